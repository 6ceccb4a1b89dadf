//! Training loop, evaluation, compression, and experiment suites.
//!
//! Batching, data order, evaluation cadence, and timing are shared by every
//! model family; only the forward and backward passes differ.

mod metrics;
mod report;
mod suite;

use std::borrow::Cow;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use metrics::Confusion;
pub use report::{write_atomic, write_reports, ReportRow, RowKind, RunReport, Split, StopReason, REPORT_HEADER};
pub use suite::{
    fig2_schedule, run_suite, CellResult, CellSpec, FeatureSpec, Suite, SuiteInputs, SuiteOptions, SuiteOutcome,
    TABLE5_CHECKPOINTS,
};

use crate::data::{apply_mask, pad_truncate, tokenize, Splits, TokenizedExample};
use crate::error::{Error, Result};
use crate::features::FeatureSource;
use crate::models::{self, ModelConfig, ModelParams};
use crate::par::{self, Execution};
use crate::tensor::{Adam, AdamConfig, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr: f32,
    /// Evaluations without a validation-F1 improvement before stopping.
    pub patience: usize,
    /// Epochs between validation evaluations.
    pub eval_every: usize,
    pub seed: u64,
    /// Wall-clock seconds at which to snapshot validation metrics.
    pub timing_checkpoints: Vec<f64>,
    pub max_seconds: Option<f64>,
    /// Stop as soon as validation F1 reaches this value.
    pub target_f1: Option<f64>,
    pub execution: Execution,
    /// Feature matrices are precomputed while they fit in this many bytes.
    pub cache_bytes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_epochs: 200,
            lr: 1e-3,
            patience: 10,
            eval_every: 1,
            seed: 0,
            timing_checkpoints: Vec::new(),
            max_seconds: None,
            target_f1: None,
            execution: Execution::default(),
            cache_bytes: 1 << 30,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        if self.eval_every == 0 || self.max_epochs == 0 {
            return Err(Error::config("eval_every and max_epochs must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("learning rate {} is not positive", self.lr)));
        }
        let cps = &self.timing_checkpoints;
        if cps.iter().any(|&c| !(c.is_finite() && c > 0.0)) || cps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "timing checkpoints must be positive and strictly increasing",
            ));
        }
        if self.max_seconds.is_some_and(|s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::config("max_seconds must be positive"));
        }
        Ok(())
    }
}

/// Train, validation, and test examples, already padded.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a [TokenizedExample],
    pub validation: &'a [TokenizedExample],
    pub test: &'a [TokenizedExample],
}

impl<'a> From<&'a Splits<TokenizedExample>> for TrainData<'a> {
    fn from(s: &'a Splits<TokenizedExample>) -> Self {
        TrainData {
            train: &s.train,
            validation: &s.validation,
            test: &s.test,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub report: RunReport,
}

fn stream_rng(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut s = [0u8; 32];
    s[..8].copy_from_slice(&seed.to_le_bytes());
    s[8..16].copy_from_slice(&a.to_le_bytes());
    s[16..24].copy_from_slice(&b.to_le_bytes());
    s[24..].copy_from_slice(b"tokcomp!");
    ChaCha8Rng::from_seed(s)
}

/// Order in which training examples are visited in `epoch`. Independent of the model.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, epoch as u64, u64::MAX));
    idx
}

/// Dropout stream of one training example in one epoch.
pub fn example_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    stream_rng(seed, epoch as u64, index as u64)
}

/// Feature matrices for a fixed list of examples, precomputed when they fit.
pub(crate) struct Inputs<'a> {
    examples: &'a [TokenizedExample],
    source: &'a dyn FeatureSource,
    cache: Option<Vec<Tensor>>,
}

impl<'a> Inputs<'a> {
    fn new(
        examples: &'a [TokenizedExample],
        source: &'a dyn FeatureSource,
        budget: &mut usize,
        exec: Execution,
    ) -> Result<Self> {
        let per = examples.first().map_or(0, |e| e.pad_mask.len()) * source.channels() * 4;
        let bytes = per * examples.len();
        let cache = if bytes <= *budget {
            *budget -= bytes;
            let mats = par::map_indexed(exec, examples, |_, ex| source.features(ex));
            Some(mats.into_iter().collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        Ok(Inputs {
            examples,
            source,
            cache,
        })
    }

    fn get(&self, i: usize) -> Result<Cow<'_, Tensor>> {
        match &self.cache {
            Some(c) => Ok(Cow::Borrowed(&c[i])),
            None => self.source.features(&self.examples[i]).map(Cow::Owned),
        }
    }
}

/// Token-level results of running a model over a split.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub confusion: Confusion,
    /// Mean per-example masked cross-entropy.
    pub loss: f64,
    /// Predicted retention mask per example, padded positions 0.
    pub masks: Vec<Vec<u8>>,
}

impl Evaluation {
    pub fn f1(&self) -> f64 {
        self.confusion.f1()
    }

    pub fn accuracy(&self) -> f64 {
        self.confusion.accuracy()
    }
}

fn evaluate_inputs(params: &ModelParams, inputs: &Inputs<'_>, exec: Execution) -> Result<Evaluation> {
    if inputs.examples.is_empty() {
        return Err(Error::EmptyDataset("evaluation split".into()));
    }
    let per = par::map_indexed(exec, inputs.examples, |i, ex| -> Result<_> {
        let x = inputs.get(i)?;
        let (loss, probs) = models::example_loss(params, &x, &ex.labels, &ex.pad_mask)?;
        let mask = models::predict_mask(&probs, &ex.pad_mask);
        Ok((loss, Confusion::from_masks(&mask, &ex.labels, &ex.pad_mask), mask))
    });
    let mut confusion = Confusion::default();
    let mut loss = 0.0f64;
    let mut masks = Vec::with_capacity(per.len());
    for r in per {
        let (l, c, m) = r?;
        loss += f64::from(l);
        confusion.merge(&c);
        masks.push(m);
    }
    if confusion.total() == 0 {
        return Err(Error::EmptyDataset("evaluation split has no real tokens".into()));
    }
    Ok(Evaluation {
        confusion,
        loss: loss / masks.len() as f64,
        masks,
    })
}

/// Precision, recall, F1 and accuracy of the retained class over a split.
pub fn evaluate(
    params: &ModelParams,
    examples: &[TokenizedExample],
    features: &dyn FeatureSource,
    exec: Execution,
) -> Result<Evaluation> {
    let inputs = Inputs::new(examples, features, &mut 0, exec)?;
    evaluate_inputs(params, &inputs, exec)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Compression {
    pub text: String,
    pub tokens: Vec<String>,
    pub mask: Vec<u8>,
    /// The sentence was longer than the model window and only its prefix was considered.
    pub truncated: bool,
    /// Nothing was retained.
    pub empty: bool,
}

/// Deletes the tokens the model labels 0. Only the first `seq_len` tokens are considered.
pub fn compress(params: &ModelParams, sentence: &str, features: &dyn FeatureSource) -> Result<Compression> {
    let tokens = tokenize(sentence);
    let n = tokens.len();
    let ex = TokenizedExample::new("", tokens, vec![1; n])?;
    let Some(ex) = pad_truncate(&ex, params.config().seq_len) else {
        return Ok(Compression {
            text: String::new(),
            tokens: Vec::new(),
            mask: Vec::new(),
            truncated: false,
            empty: true,
        });
    };
    let x = features.features(&ex)?;
    let probs = models::forward(params, &x, false, &mut stream_rng(0, 0, 0))?;
    let mut mask = models::predict_mask(&probs, &ex.pad_mask);
    mask.truncate(ex.tokens.len());
    let text = apply_mask(&ex.tokens, &mask);
    Ok(Compression {
        empty: text.is_empty(),
        truncated: ex.is_truncated(),
        text,
        tokens: ex.tokens,
        mask,
    })
}

struct Clock {
    start: Instant,
    last: f64,
}

impl Clock {
    fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    /// Elapsed seconds, nudged so consecutive stamps strictly increase.
    fn stamp(&mut self) -> f64 {
        let t = self.now().max(self.last + 1e-6);
        self.last = t;
        t
    }
}

/// Mean loss and averaged gradients of one batch, summed in batch order.
fn batch_gradients(
    params: &ModelParams,
    inputs: &Inputs<'_>,
    batch: &[usize],
    seed: u64,
    epoch: usize,
    exec: Execution,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let per = par::map_indexed(exec, batch, |_, &i| {
        let ex = &inputs.examples[i];
        let x = inputs.get(i)?;
        let mut rng = example_rng(seed, epoch, i);
        models::loss_and_grads(params, &x, &ex.labels, &ex.pad_mask, true, &mut rng)
    });
    let mut loss = 0.0f64;
    let mut total: Option<Vec<Vec<f32>>> = None;
    for r in per {
        let r = r?;
        loss += f64::from(r.loss);
        match &mut total {
            None => total = Some(r.grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&r.grads) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
        }
    }
    let scale = 1.0 / batch.len() as f32;
    let mut grads = total.unwrap_or_default();
    for v in grads.iter_mut().flatten() {
        *v *= scale;
    }
    Ok((loss / batch.len() as f64, grads))
}

fn run_id(model: &ModelConfig, features: &dyn FeatureSource, train_size: usize, seed: u64) -> String {
    format!(
        "{}-{}{}-n{}-s{}",
        model.variant,
        features.kind(),
        features.layers(),
        train_size,
        seed
    )
}

/// Trains from a fresh initialisation and returns the parameters with the best
/// validation F1 along with the full report.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: TrainData<'_>,
    features: &dyn FeatureSource,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptyDataset("training split".into()));
    }
    if data.validation.is_empty() {
        return Err(Error::EmptyDataset("validation split".into()));
    }
    if features.channels() != model_cfg.input_channels {
        return Err(Error::config(format!(
            "features have {} channels, model expects {}",
            features.channels(),
            model_cfg.input_channels
        )));
    }
    let exec = cfg.execution;
    let mut budget = cfg.cache_bytes;
    let train_in = Inputs::new(data.train, features, &mut budget, exec)?;
    let val_in = Inputs::new(data.validation, features, &mut budget, exec)?;

    let mut params = models::build(model_cfg, cfg.seed)?;
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut report = RunReport {
        run_id: run_id(model_cfg, features, data.train.len(), cfg.seed),
        variant: model_cfg.variant.to_string(),
        features: features.kind().to_string(),
        layers: features.layers(),
        train_size: data.train.len(),
        seed: cfg.seed,
        rows: Vec::new(),
        epochs_run: 0,
        best_epoch: 0,
        best_validation_f1: f64::NEG_INFINITY,
        convergence_s: 0.0,
        stop_reason: StopReason::MaxEpochs,
    };
    let mut best: Option<ModelParams> = None;
    let mut stale = 0usize;
    let mut next_cp = 0usize;
    let mut step = 0usize;

    let mut clock = Clock {
        start: Instant::now(),
        last: 0.0,
    };
    let validation_row = |params: &ModelParams, clock: &mut Clock, kind| -> Result<ReportRow> {
        let ev = evaluate_inputs(params, &val_in, exec)?;
        Ok(ReportRow {
            kind,
            split: Split::Validation,
            elapsed_s: clock.stamp(),
            f1: ev.f1(),
            accuracy: ev.accuracy(),
            loss: ev.loss,
        })
    };

    'epochs: for epoch in 1..=cfg.max_epochs {
        let order = epoch_order(data.train.len(), cfg.seed, epoch);
        let mut epoch_loss = 0.0;
        let mut timed_out = false;
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let (loss, grads) = batch_gradients(&params, &train_in, batch, cfg.seed, epoch, exec)?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: loss as f32,
                });
            }
            adam.step(params.tensors_mut(), &grads)?;
            epoch_loss += loss * batch.len() as f64;

            while next_cp < cfg.timing_checkpoints.len() && clock.now() >= cfg.timing_checkpoints[next_cp] {
                let row = validation_row(
                    &params,
                    &mut clock,
                    RowKind::Checkpoint(cfg.timing_checkpoints[next_cp]),
                )?;
                report.rows.push(row);
                next_cp += 1;
            }
            if cfg.max_seconds.is_some_and(|s| clock.now() >= s) {
                timed_out = true;
                break;
            }
        }
        report.epochs_run = epoch;
        let train_loss = epoch_loss / data.train.len() as f64;

        if epoch % cfg.eval_every == 0 || timed_out || epoch == cfg.max_epochs {
            let row = validation_row(&params, &mut clock, RowKind::Epoch(epoch))?;
            log::info!(
                "{} epoch {epoch}: train loss {train_loss:.4}, validation f1 {:.4} acc {:.4} at {:.1}s",
                report.run_id,
                row.f1,
                row.accuracy,
                row.elapsed_s
            );
            if row.f1 > report.best_validation_f1 {
                report.best_validation_f1 = row.f1;
                report.best_epoch = epoch;
                report.convergence_s = row.elapsed_s;
                best = Some(params.clone());
                stale = 0;
            } else {
                stale += 1;
            }
            let reached = cfg.target_f1.is_some_and(|t| row.f1 >= t);
            report.rows.push(row);
            if reached {
                report.stop_reason = StopReason::TargetReached;
                break 'epochs;
            }
            if stale >= cfg.patience {
                report.stop_reason = StopReason::Patience;
                break 'epochs;
            }
        }
        if timed_out {
            report.stop_reason = StopReason::TimeLimit;
            break;
        }
    }

    let params = best.unwrap_or(params);
    if !data.test.is_empty() {
        let test_in = Inputs::new(data.test, features, &mut budget, exec)?;
        let ev = evaluate_inputs(&params, &test_in, exec)?;
        report.rows.push(ReportRow {
            kind: RowKind::Final,
            split: Split::Test,
            elapsed_s: clock.stamp(),
            f1: ev.f1(),
            accuracy: ev.accuracy(),
            loss: ev.loss,
        });
    }
    Ok(TrainOutcome { params, report })
}
