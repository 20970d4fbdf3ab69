//! Report emission: one JSON report plus CSV tables with deterministic
//! file names. Numeric CSV columns always travel with a standard-error
//! or tolerance column.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;

pub const REPORT_JSON: &str = "report.json";
pub const PRICE_CSV: &str = "price.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const DUAL_AUDIT_CSV: &str = "dual_audit.csv";
pub const HJB_GRID_CSV: &str = "hjb_grid.csv";
pub const HEDGE_CSV: &str = "hedge.csv";
pub const ORACLE_CSV: &str = "oracle.csv";

pub struct ReportWriter {
    dir: PathBuf,
}

impl ReportWriter {
    pub fn new(dir: &Path) -> Result<ReportWriter> {
        fs::create_dir_all(dir)?;
        Ok(ReportWriter { dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        fs::write(self.dir.join(name), text + "\n")?;
        Ok(())
    }

    pub fn write_csv(&self, name: &str, header: &str, rows: &[Vec<String>]) -> Result<()> {
        let mut text = String::from(header);
        text.push('\n');
        for row in rows {
            text.push_str(&row.join(","));
            text.push('\n');
        }
        fs::write(self.dir.join(name), text)?;
        Ok(())
    }
}

/// Shortest-roundtrip float formatting; identical bytes for identical
/// values across reruns.
pub fn fmt(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_formatting_roundtrips() {
        for x in [0.1, -3.25, 1e-17, 123456.789, f64::INFINITY] {
            let s = fmt(x);
            if x.is_finite() {
                assert_eq!(s.parse::<f64>().unwrap(), x);
            }
        }
        assert_eq!(fmt(f64::NAN), "nan");
    }

    #[test]
    fn writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let w = ReportWriter::new(dir.path()).unwrap();
        w.write_csv("t.csv", "a,b", &[vec!["1".into(), "2".into()]]).unwrap();
        let text = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
        assert_eq!(text, "a,b\n1,2\n");
    }
}
