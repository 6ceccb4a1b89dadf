use std::io::{BufRead, Write};
use std::path::Path;

use log::{info, warn};

use tokcomp::data::{load_splits, LoadStats, TokenizedExample};
use tokcomp::features::{load_glove, FeatureSource, IndexedFeatures};
use tokcomp::models::{load_checkpoint, save_checkpoint, ModelConfig, ModelParams};
use tokcomp::train::{self, compress, evaluate, run_suite, SuiteInputs, SuiteOptions};
use tokcomp::{Error, Result};

use crate::args::{execution, CompressArgs, EvalArgs, FeatureArg, SplitArg, SuiteArgs, TrainArgs};
use crate::manifest::{RunManifest, RunSpec, SuiteSpec, TrainSpec};

pub const REPORT_FILE: &str = "report.csv";
pub const CHECKPOINT_FILE: &str = "model.tckpt";

fn required<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T> {
    value
        .as_ref()
        .ok_or_else(|| Error::Config(format!("--{flag} is required")))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

/// Opens the feature source and checks that contextual features cover every example.
fn open_features(
    features: &FeatureArg,
    layers: usize,
    glove_dim: usize,
    examples: &[&[TokenizedExample]],
) -> Result<Box<dyn FeatureSource>> {
    Ok(match features {
        FeatureArg::Glove(p) => {
            let table = load_glove(p, glove_dim)?;
            info!(
                "{}: {} vectors, {} lines skipped",
                p.display(),
                table.vocab_size(),
                table.skipped_lines()
            );
            Box::new(table)
        }
        FeatureArg::Tcf(p) => {
            let idx = IndexedFeatures::open(p, layers)?;
            idx.check_covers(examples.iter().flat_map(|s| s.iter()))?;
            Box::new(idx)
        }
    })
}

fn log_stats(path: &Path, stats: &LoadStats) {
    info!(
        "{}: {} records, {} misaligned dropped, {} truncated, {} without retained tokens",
        path.display(),
        stats.records,
        stats.misaligned,
        stats.truncated,
        stats.degenerate
    );
}

fn check_width(features: &dyn FeatureSource, model: &ModelConfig) -> Result<()> {
    if features.channels() != model.input_channels {
        return Err(Error::Config(format!(
            "features provide {} channels, model expects {}",
            features.channels(),
            model.input_channels
        )));
    }
    Ok(())
}

fn resolve_train(args: &TrainArgs) -> Result<TrainSpec> {
    let features = required(&args.features.features, "features")?.clone();
    let layers = match features {
        FeatureArg::Glove(_) => 0,
        FeatureArg::Tcf(_) => args.features.layers,
    };
    let channels = match &features {
        FeatureArg::Glove(_) => args.features.glove_dim,
        FeatureArg::Tcf(p) => IndexedFeatures::open(p, layers)?.channels(),
    };
    Ok(TrainSpec {
        data: required(&args.data.data, "data")?.clone(),
        format: args.data.format.into(),
        extra_train: args.data.extra_train.clone(),
        split: args.data.split(),
        features,
        layers,
        glove_dim: args.features.glove_dim,
        model: ModelConfig::new(args.model, channels),
        train: args.knobs.config(),
    })
}

fn load_manifest(path: &Path) -> Result<RunManifest> {
    let m = RunManifest::load(path)?;
    m.verify_inputs()?;
    info!("repeating run from {} ({} {})", path.display(), m.tool, m.version);
    Ok(m)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let spec = match &args.manifest {
        Some(path) => match load_manifest(path)?.run {
            RunSpec::Train(t) => t,
            RunSpec::Suite(_) => return Err(Error::Config(format!("{} describes a suite run", path.display()))),
        },
        None => resolve_train(args)?,
    };
    spec.model.validate()?;
    spec.train.validate()?;
    let extra: Vec<&Path> = spec.extra_train.iter().map(|p| p.as_path()).collect();
    let (splits, stats) = load_splits(&spec.data, spec.format, spec.split, &extra)?;
    log_stats(&spec.data, &stats);
    let all: [&[TokenizedExample]; 3] = [&splits.train, &splits.validation, &splits.test];
    let features = open_features(&spec.features, spec.layers, spec.glove_dim, &all)?;
    check_width(&*features, &spec.model)?;

    create_dir(&args.out)?;
    let manifest = RunManifest::new(RunSpec::Train(spec.clone()))?;
    manifest.save(&args.out)?;
    let outcome = train::train(&spec.model, &spec.train, (&splits).into(), &*features)?;
    let report = &outcome.report;
    report.write_csv(&args.out.join(REPORT_FILE))?;
    save_checkpoint(&args.out.join(CHECKPOINT_FILE), &outcome.params)?;

    let best = report.best_validation_f1;
    match report.test() {
        Some(t) => println!(
            "{} best_epoch={} validation_f1={best:.6} test_f1={:.6} test_accuracy={:.6} stop={:?}",
            report.run_id, report.best_epoch, t.f1, t.accuracy, report.stop_reason
        ),
        None => println!(
            "{} best_epoch={} validation_f1={best:.6} stop={:?}",
            report.run_id, report.best_epoch, report.stop_reason
        ),
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<ModelParams> {
    if !path.exists() {
        return Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        });
    }
    load_checkpoint(path)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let params = load_model(&args.checkpoint)?;
    let data = required(&args.data.data, "data")?;
    let feats = required(&args.features.features, "features")?;
    let extra: Vec<&Path> = args.data.extra_train.iter().map(|p| p.as_path()).collect();
    let (splits, stats) = load_splits(data, args.data.format.into(), args.data.split(), &extra)?;
    log_stats(data, &stats);
    let examples = match args.split {
        SplitArg::Test => &splits.test,
        SplitArg::Validation => &splits.validation,
    };
    let features = open_features(feats, args.features.layers, args.features.glove_dim, &[examples])?;
    check_width(&*features, params.config())?;
    let ev = evaluate(&params, examples, &*features, execution(args.sequential))?;
    println!("f1={:.6} accuracy={:.6}", ev.f1(), ev.accuracy());
    Ok(())
}

pub fn cmd_compress(args: &CompressArgs) -> Result<()> {
    let params = load_model(&args.checkpoint)?;
    let path = match required(&args.features.features, "features")? {
        FeatureArg::Glove(p) => p,
        FeatureArg::Tcf(_) => {
            return Err(Error::Config(
                "compress needs glove features; contextual features exist only for precomputed datasets".into(),
            ))
        }
    };
    let table = load_glove(path, args.features.glove_dim)?;
    check_width(&table, params.config())?;
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let io = |e| Error::Io {
        path: "<stdio>".into(),
        source: e,
    };
    for (n, line) in stdin.lock().lines().enumerate() {
        let line = line.map_err(io)?;
        let c = compress(&params, &line, &table)?;
        if c.truncated {
            warn!(
                "line {}: only the first {} tokens were compressed",
                n + 1,
                params.config().seq_len
            );
        }
        writeln!(out, "{}", c.text).map_err(io)?;
    }
    out.flush().map_err(io)
}

fn resolve_suite(args: &SuiteArgs) -> Result<SuiteSpec> {
    let suite = required(&args.suite, "suite")?;
    let mut train = args.knobs.config();
    train.seed = 0;
    Ok(SuiteSpec {
        suite: suite.as_str().to_string(),
        inputs: SuiteInputs {
            data: required(&args.data.data, "data")?.clone(),
            format: args.data.format.into(),
            extra_train: args.data.extra_train.clone(),
            glove: args.glove.clone(),
            glove_dim: args.glove_dim,
            tcf: args.tcf.clone(),
            out_dir: args.out.clone(),
        },
        options: SuiteOptions {
            seeds: args.seeds.clone(),
            train,
            split: args.data.split(),
            fig2_schedule: if args.fig2_schedule.is_empty() {
                train::fig2_schedule()
            } else {
                args.fig2_schedule.clone()
            },
        },
    })
}

pub fn cmd_suite(args: &SuiteArgs) -> Result<()> {
    let mut spec = match &args.manifest {
        Some(path) => match load_manifest(path)?.run {
            RunSpec::Suite(s) => s,
            RunSpec::Train(_) => return Err(Error::Config(format!("{} describes a train run", path.display()))),
        },
        None => resolve_suite(args)?,
    };
    spec.inputs.out_dir = args.out.clone();
    let suite = spec.suite()?;
    spec.options.train.validate()?;
    if spec.options.seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    create_dir(&args.out)?;
    RunManifest::new(RunSpec::Suite(spec.clone()))?.save(&args.out)?;
    let outcome = run_suite(suite, &spec.inputs, &spec.options)?;
    let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    for r in &outcome.results {
        println!(
            "{} runs={} test_f1={} test_accuracy={} convergence_s={}",
            r.cell.name(),
            r.runs.len(),
            fmt(r.mean_test_f1()),
            fmt(r.mean_test_accuracy()),
            fmt(r.mean_convergence_s())
        );
    }
    for (cell, reason) in &outcome.skipped {
        println!("{} skipped: {reason}", cell.name());
    }
    for f in &outcome.files {
        info!("wrote {}", f.display());
    }
    Ok(())
}
