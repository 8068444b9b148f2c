use std::path::Path;

use ndarray::ArrayView2;

use crate::error::CliError;

/// Writes a header row and one row per sample, with shortest round-trip
/// float formatting.
pub fn write_matrix(path: &Path, header: &[String], rows: ArrayView2<f64>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows.rows() {
        w.write_record(row.iter().map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}
