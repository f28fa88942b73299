use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochRecord, SweepRow};
use crate::error::{Error, Result};

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

fn finite(path: &Path, what: &str, values: impl IntoIterator<Item = f64>) -> Result<()> {
    if values.into_iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} for {}", path.display())));
    }
    Ok(())
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `epoch,train_loss,test_error`, one row per recorded epoch.
pub fn write_curve_csv(path: &Path, curve: &[EpochRecord]) -> Result<()> {
    finite(path, "curve values", curve.iter().flat_map(|r| [r.train_loss, r.test_error]))?;
    write_rows(
        path,
        &["epoch", "train_loss", "test_error"],
        curve
            .iter()
            .map(|r| vec![r.epoch.to_string(), r.train_loss.to_string(), r.test_error.to_string()]),
    )
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    #[derive(Deserialize)]
    struct Row {
        epoch: usize,
        train_loss: f64,
        test_error: f64,
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize::<Row>()
        .map(|row| {
            let row = row.map_err(|e| csv_err(path, e))?;
            Ok(EpochRecord {
                epoch: row.epoch,
                train_loss: row.train_loss,
                test_error: row.test_error,
            })
        })
        .collect()
}

/// `p,mean_error,std_error,n_repeats`, one row per probability.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    finite(path, "sweep values", rows.iter().flat_map(|r| [r.p, r.mean_error, r.std_error]))?;
    write_rows(
        path,
        &["p", "mean_error", "std_error", "n_repeats"],
        rows.iter().map(|r| {
            vec![
                r.p.to_string(),
                r.mean_error.to_string(),
                r.std_error.to_string(),
                r.n_repeats.to_string(),
            ]
        }),
    )
}

/// `strategy,test_error`, one row per strategy.
pub fn write_table_csv(path: &Path, rows: &[(String, f64)]) -> Result<()> {
    finite(path, "test errors", rows.iter().map(|r| r.1))?;
    write_rows(
        path,
        &["strategy", "test_error"],
        rows.iter().map(|(s, e)| vec![s.clone(), e.to_string()]),
    )
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Deterministic description of a finished training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: String,
    pub seed: u64,
    pub layer_sizes: Vec<usize>,
    pub epochs: usize,
    pub hidden_dropout_p: f64,
    pub input_dropout_p: f64,
    pub n_workers: usize,
    pub ensemble_size: usize,
    pub test_error: f64,
    pub final_train_loss: Option<f64>,
    /// Hex checksum of the produced weights, if the run produced one model.
    pub model_checksum: Option<String>,
}

/// Wall-clock facts about an invocation, kept apart from the deterministic
/// outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunInfo {
    pub command: String,
    pub args: Vec<String>,
    pub version: String,
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
    pub wall_seconds: f64,
}

pub fn write_run_info(dir: &Path, info: &RunInfo) -> Result<()> {
    write_json(&dir.join("run-info.json"), info)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        let curve = vec![
            EpochRecord { epoch: 1, train_loss: 0.5, test_error: 0.1 },
            EpochRecord { epoch: 2, train_loss: 0.25, test_error: 0.0108 },
        ];
        write_curve_csv(&path, &curve).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "epoch,train_loss,test_error\n1,0.5,0.1\n2,0.25,0.0108\n");
        assert_eq!(read_curve_csv(&path).unwrap(), curve);
    }

    #[test]
    fn non_finite_values_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        let curve = vec![EpochRecord { epoch: 1, train_loss: f64::NAN, test_error: 0.1 }];
        assert!(matches!(write_curve_csv(&path, &curve), Err(Error::NonFinite(_))));
        assert!(!path.exists());
    }

    #[test]
    fn sweep_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        let rows = vec![SweepRow { p: 0.5, mean_error: 0.02, std_error: 0.001, n_repeats: 3, errors: vec![] }];
        write_sweep_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "p,mean_error,std_error,n_repeats");
        assert_eq!(text.lines().nth(1).unwrap(), "0.5,0.02,0.001,3");
    }

    #[test]
    fn missing_directory_is_an_io_error() {
        let path = Path::new("/nonexistent-dir-for-dbn-tests/curve.csv");
        assert!(matches!(write_curve_csv(path, &[]), Err(Error::Io { .. })));
    }
}
