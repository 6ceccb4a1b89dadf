use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REPORT_HEADER: [&str; 11] = [
    "run_id",
    "variant",
    "features",
    "L",
    "train_size",
    "seed",
    "elapsed_s",
    "split",
    "f1",
    "accuracy",
    "loss",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// What triggered an evaluation row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    /// End of the given epoch (1-based).
    Epoch(usize),
    /// Wall-clock snapshot requested at this many seconds.
    Checkpoint(f64),
    /// Best parameters on the held-out split after training.
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub kind: RowKind,
    pub split: Split,
    pub elapsed_s: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    TimeLimit,
    TargetReached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub variant: String,
    pub features: String,
    pub layers: usize,
    pub train_size: usize,
    pub seed: u64,
    pub rows: Vec<ReportRow>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_validation_f1: f64,
    /// Seconds from the start of training to the evaluation that produced the best parameters.
    pub convergence_s: f64,
    pub stop_reason: StopReason,
}

impl RunReport {
    pub fn validation_rows(&self) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(|r| r.split == Split::Validation)
    }

    pub fn test(&self) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.split == Split::Test)
    }

    /// Elapsed seconds of the first validation evaluation reaching `target` F1.
    pub fn time_to_f1(&self, target: f64) -> Option<f64> {
        self.validation_rows().find(|r| r.f1 >= target).map(|r| r.elapsed_s)
    }

    pub fn write_rows<W: Write>(&self, out: &mut csv::Writer<W>) -> Result<()> {
        for r in &self.rows {
            out.write_record([
                self.run_id.clone(),
                self.variant.clone(),
                self.features.clone(),
                self.layers.to_string(),
                self.train_size.to_string(),
                self.seed.to_string(),
                format!("{:.6}", r.elapsed_s),
                r.split.as_str().to_string(),
                format!("{:.6}", r.f1),
                format!("{:.6}", r.accuracy),
                format!("{:.6}", r.loss),
            ])
            .map_err(csv_err)?;
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_reports(path, std::slice::from_ref(self), |_| true)
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Writes `contents` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(contents).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Writes the rows of `reports` accepted by `keep` as one CSV with the standard header.
pub fn write_reports(path: &Path, reports: &[RunReport], keep: impl Fn(&ReportRow) -> bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_HEADER).map_err(csv_err)?;
    for rep in reports {
        let filtered = RunReport {
            rows: rep.rows.iter().filter(|r| keep(r)).cloned().collect(),
            ..rep.clone()
        };
        filtered.write_rows(&mut w)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
    write_atomic(path, &bytes)
}
