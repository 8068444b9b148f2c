//! Comparison baselines: a score-matching kernel exponential family and an
//! HMC sampler for drawing from any fitted unnormalized density.

mod hmc;
mod score_matching;

pub use hmc::{hamiltonian, hmc_sample, leapfrog, HmcConfig, HmcOutput};
pub use score_matching::{fit_score_matching, ScoreMatchingModel, ScoreMatchingSystem, MAX_SYSTEM_SIZE};
