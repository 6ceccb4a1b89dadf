use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::report::{csv_err, write_atomic, write_reports, RowKind, RunReport, Split};
use super::{train, TrainConfig, TrainData};
use crate::data::{load_splits, DataFormat, SplitSpec, TokenizedExample};
use crate::error::{Error, Result};
use crate::features::{load_glove, EmbeddingTable, FeatureSource, IndexedFeatures};
use crate::models::{ModelConfig, Variant};

/// Wall-clock snapshots used by the timing suite when none are configured.
pub const TABLE5_CHECKPOINTS: [f64; 11] = [
    16.0, 64.0, 120.0, 210.0, 720.0, 1095.0, 1483.0, 1863.0, 2239.0, 2622.0, 3303.0,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// Both model families on static embeddings and contextual features.
    Table1,
    /// U-Net on one to four contextual layers.
    Table2,
    /// The three U-Net variants.
    Table3,
    /// Timing comparison of U-Net and BiLSTM on one contextual layer.
    Table5,
    /// U-Net over growing training sets.
    Fig2,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Table1, Suite::Table2, Suite::Table3, Suite::Table5, Suite::Fig2];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Table1 => "table1",
            Suite::Table2 => "table2",
            Suite::Table3 => "table3",
            Suite::Table5 => "table5",
            Suite::Fig2 => "fig2",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown suite {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSpec {
    Glove,
    Tcf { layers: usize },
}

impl fmt::Display for FeatureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureSpec::Glove => f.write_str("glove"),
            FeatureSpec::Tcf { layers } => write!(f, "tcf{layers}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSpec {
    pub variant: Variant,
    pub features: FeatureSpec,
    /// Leading slice of the training split to use; `None` for all of it.
    pub train_size: Option<usize>,
}

impl CellSpec {
    fn new(variant: Variant, features: FeatureSpec) -> Self {
        CellSpec {
            variant,
            features,
            train_size: None,
        }
    }

    pub fn name(&self) -> String {
        match self.train_size {
            Some(n) => format!("{}+{}@{n}", self.variant, self.features),
            None => format!("{}+{}", self.variant, self.features),
        }
    }
}

/// 8000 training pairs growing by 20000 per step, ending at all 198000.
pub fn fig2_schedule() -> Vec<usize> {
    let mut s: Vec<usize> = (0..10).map(|k| 8000 + 20_000 * k).collect();
    s.push(198_000);
    s
}

impl Suite {
    /// Cells in report order. `contextual` says whether a contextual feature
    /// file is available; the ablation and size sweeps fall back to static
    /// embeddings without one.
    pub fn cells(self, contextual: bool, schedule: &[usize]) -> Vec<CellSpec> {
        let tcf = |layers| FeatureSpec::Tcf { layers };
        let sweep = if contextual { tcf(4) } else { FeatureSpec::Glove };
        match self {
            Suite::Table1 => vec![
                CellSpec::new(Variant::Bilstm, FeatureSpec::Glove),
                CellSpec::new(Variant::FullUnet, FeatureSpec::Glove),
                CellSpec::new(Variant::Bilstm, tcf(1)),
                CellSpec::new(Variant::FullUnet, tcf(4)),
            ],
            Suite::Table2 => (1..=4).map(|l| CellSpec::new(Variant::FullUnet, tcf(l))).collect(),
            Suite::Table3 => [Variant::FullUnet, Variant::NoConv245, Variant::NoPoolBlock]
                .into_iter()
                .map(|v| CellSpec::new(v, sweep))
                .collect(),
            Suite::Table5 => vec![
                CellSpec::new(Variant::FullUnet, tcf(1)),
                CellSpec::new(Variant::Bilstm, tcf(1)),
            ],
            Suite::Fig2 => schedule
                .iter()
                .map(|&n| CellSpec {
                    train_size: Some(n),
                    ..CellSpec::new(Variant::FullUnet, sweep)
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteInputs {
    /// File whose leading records form the test and validation splits.
    pub data: PathBuf,
    pub format: DataFormat,
    /// Further files appended to the training split.
    pub extra_train: Vec<PathBuf>,
    pub glove: Option<PathBuf>,
    pub glove_dim: usize,
    pub tcf: Option<PathBuf>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteOptions {
    pub seeds: Vec<u64>,
    /// Base training configuration; the seed is replaced per run.
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub fig2_schedule: Vec<usize>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seeds: vec![1, 2, 3],
            train: TrainConfig::default(),
            split: SplitSpec::default(),
            fig2_schedule: fig2_schedule(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: CellSpec,
    pub runs: Vec<RunReport>,
}

impl CellResult {
    fn mean(&self, f: impl Fn(&RunReport) -> Option<f64>) -> Option<f64> {
        let vals: Vec<f64> = self.runs.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn mean_test_f1(&self) -> Option<f64> {
        self.mean(|r| r.test().map(|t| t.f1))
    }

    pub fn mean_test_accuracy(&self) -> Option<f64> {
        self.mean(|r| r.test().map(|t| t.accuracy))
    }

    pub fn mean_convergence_s(&self) -> Option<f64> {
        self.mean(|r| Some(r.convergence_s))
    }
}

#[derive(Debug, Clone, Default)]
pub struct SuiteOutcome {
    pub results: Vec<CellResult>,
    pub skipped: Vec<(CellSpec, String)>,
    pub files: Vec<PathBuf>,
}

impl SuiteOutcome {
    pub fn result(&self, variant: Variant, features: FeatureSpec) -> Option<&CellResult> {
        self.results
            .iter()
            .find(|r| r.cell.variant == variant && r.cell.features == features)
    }
}

fn glove_source<'a>(
    inputs: &SuiteInputs,
    slot: &'a mut Option<std::result::Result<EmbeddingTable, String>>,
) -> std::result::Result<&'a EmbeddingTable, String> {
    let table = slot.get_or_insert_with(|| match &inputs.glove {
        None => Err("no static embedding file given".to_string()),
        Some(p) => load_glove(p, inputs.glove_dim).map_err(|e| e.to_string()),
    });
    table.as_ref().map_err(Clone::clone)
}

fn tcf_source<'a>(
    inputs: &SuiteInputs,
    layers: usize,
    examples: impl IntoIterator<Item = &'a TokenizedExample>,
) -> std::result::Result<IndexedFeatures, String> {
    let Some(p) = &inputs.tcf else {
        return Err("no contextual feature file given".to_string());
    };
    if !p.exists() {
        return Err(format!("contextual feature file {} is missing", p.display()));
    }
    let idx = IndexedFeatures::open(p, layers).map_err(|e| e.to_string())?;
    idx.check_covers(examples).map_err(|e| e.to_string())?;
    Ok(idx)
}

fn summary_csv(outcome: &SuiteOutcome) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "cell",
        "variant",
        "features",
        "train_size",
        "status",
        "seeds",
        "mean_f1",
        "mean_accuracy",
        "mean_convergence_s",
        "f1_per_seed",
        "accuracy_per_seed",
        "convergence_s_per_seed",
    ])
    .map_err(csv_err)?;
    let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
    let joined = |runs: &[RunReport], f: &dyn Fn(&RunReport) -> Option<f64>| {
        runs.iter().map(|r| fmt(f(r))).collect::<Vec<_>>().join(";")
    };
    for r in &outcome.results {
        w.write_record([
            r.cell.name(),
            r.cell.variant.to_string(),
            r.cell.features.to_string(),
            r.runs.first().map_or(0, |x| x.train_size).to_string(),
            "ok".to_string(),
            r.runs.len().to_string(),
            fmt(r.mean_test_f1()),
            fmt(r.mean_test_accuracy()),
            fmt(r.mean_convergence_s()),
            joined(&r.runs, &|x| x.test().map(|t| t.f1)),
            joined(&r.runs, &|x| x.test().map(|t| t.accuracy)),
            joined(&r.runs, &|x| Some(x.convergence_s)),
        ])
        .map_err(csv_err)?;
    }
    for (cell, why) in &outcome.skipped {
        let size = cell.train_size.map_or_else(String::new, |n| n.to_string());
        w.write_record([
            cell.name(),
            cell.variant.to_string(),
            cell.features.to_string(),
            size,
            format!("skipped: {why}"),
            "0".into(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))
}

/// Runs every cell of `suite` for every seed. Cells whose inputs are missing
/// are listed as skipped; the rest still run.
///
/// Writes `<suite>.csv` (one test row per run, plus the timing-checkpoint
/// rows for table5), `<suite>_summary.csv` (one
/// row per cell), and the full report of every run under `<suite>_runs/`.
pub fn run_suite(suite: Suite, inputs: &SuiteInputs, opts: &SuiteOptions) -> Result<SuiteOutcome> {
    if opts.seeds.is_empty() {
        return Err(Error::config("at least one seed is required"));
    }
    let mut base = opts.train.clone();
    if suite == Suite::Table5 && base.timing_checkpoints.is_empty() {
        base.timing_checkpoints = TABLE5_CHECKPOINTS.to_vec();
    }
    base.validate()?;
    let extra: Vec<&Path> = inputs.extra_train.iter().map(PathBuf::as_path).collect();
    let (splits, stats) = load_splits(&inputs.data, inputs.format, opts.split, &extra)?;
    log::info!(
        "{suite}: {} train, {} validation, {} test ({stats:?})",
        splits.train.len(),
        splits.validation.len(),
        splits.test.len()
    );

    let contextual = inputs.tcf.as_deref().is_some_and(Path::exists);
    let mut glove = None;
    let mut outcome = SuiteOutcome::default();
    let runs_dir = inputs.out_dir.join(format!("{suite}_runs"));

    for cell in suite.cells(contextual, &opts.fig2_schedule) {
        let train_split: &[TokenizedExample] = match cell.train_size {
            Some(n) if n > splits.train.len() => {
                let why = format!("only {} training examples available", splits.train.len());
                log::warn!("{suite}: skipping {}: {why}", cell.name());
                outcome.skipped.push((cell, why));
                continue;
            }
            Some(n) => &splits.train[..n],
            None => &splits.train,
        };
        let tcf;
        let opened = match cell.features {
            FeatureSpec::Glove => glove_source(inputs, &mut glove).map(|t| t as &dyn FeatureSource),
            FeatureSpec::Tcf { layers } => {
                let all = train_split.iter().chain(&splits.validation).chain(&splits.test);
                match tcf_source(inputs, layers, all) {
                    Ok(idx) => {
                        tcf = idx;
                        Ok(&tcf as &dyn FeatureSource)
                    }
                    Err(e) => Err(e),
                }
            }
        };
        let source = match opened {
            Ok(s) => s,
            Err(why) => {
                log::warn!("{suite}: skipping {}: {why}", cell.name());
                outcome.skipped.push((cell, why));
                continue;
            }
        };
        let model_cfg = ModelConfig::new(cell.variant, source.channels());
        let data = TrainData {
            train: train_split,
            validation: &splits.validation,
            test: &splits.test,
        };
        let mut runs = Vec::new();
        for &seed in &opts.seeds {
            let cfg = TrainConfig { seed, ..base.clone() };
            let out = train(&model_cfg, &cfg, data, source)?;
            let path = runs_dir.join(format!("{}.csv", out.report.run_id));
            out.report.write_csv(&path)?;
            outcome.files.push(path);
            runs.push(out.report);
        }
        outcome.results.push(CellResult { cell, runs });
    }

    let all: Vec<RunReport> = outcome.results.iter().flat_map(|r| r.runs.iter().cloned()).collect();
    let table = inputs.out_dir.join(format!("{suite}.csv"));
    write_reports(&table, &all, |r| {
        r.split == Split::Test || (suite == Suite::Table5 && matches!(r.kind, RowKind::Checkpoint(_)))
    })?;
    let summary = inputs.out_dir.join(format!("{suite}_summary.csv"));
    write_atomic(&summary, &summary_csv(&outcome)?)?;
    outcome.files.push(table);
    outcome.files.push(summary);
    Ok(outcome)
}
