use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tokcomp::data::{DataFormat, SplitSpec};
use tokcomp::models::ModelConfig;
use tokcomp::train::{write_atomic, Suite, SuiteInputs, SuiteOptions, TrainConfig};
use tokcomp::{Error, Result};

use crate::args::FeatureArg;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to repeat a run: resolved configuration and input digests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub run: RunSpec,
    /// SHA-256 of every input file, keyed by path as given.
    pub digests: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum RunSpec {
    Train(TrainSpec),
    Suite(SuiteSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub data: PathBuf,
    pub format: DataFormat,
    pub extra_train: Vec<PathBuf>,
    pub split: SplitSpec,
    pub features: FeatureArg,
    /// Contextual layers; 0 for static embeddings.
    pub layers: usize,
    pub glove_dim: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub suite: String,
    pub inputs: SuiteInputs,
    pub options: SuiteOptions,
}

impl SuiteSpec {
    pub fn suite(&self) -> Result<Suite> {
        self.suite.parse()
    }
}

impl RunSpec {
    pub fn inputs(&self) -> Vec<&Path> {
        match self {
            RunSpec::Train(t) => std::iter::once(t.data.as_path())
                .chain(t.extra_train.iter().map(PathBuf::as_path))
                .chain(std::iter::once(t.features.path().as_path()))
                .collect(),
            RunSpec::Suite(s) => std::iter::once(s.inputs.data.as_path())
                .chain(s.inputs.extra_train.iter().map(PathBuf::as_path))
                .chain(s.inputs.glove.as_deref())
                .chain(s.inputs.tcf.as_deref())
                .collect(),
        }
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let io = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut file = File::open(path).map_err(io)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(io)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    /// Digests every existing input; missing optional inputs are left out.
    pub fn new(run: RunSpec) -> Result<Self> {
        let mut digests = BTreeMap::new();
        for p in run.inputs() {
            if p.exists() {
                digests.insert(p.display().to_string(), sha256_file(p)?);
            }
        }
        Ok(RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            run,
            digests,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest {}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(&path, json.as_bytes())?;
        Ok(path)
    }

    /// Fails when an input recorded in the manifest has changed or disappeared.
    pub fn verify_inputs(&self) -> Result<()> {
        for (path, want) in &self.digests {
            let got = sha256_file(Path::new(path))?;
            if &got != want {
                return Err(Error::Integrity(format!(
                    "{path} changed since the manifest was written (sha256 {got}, recorded {want})"
                )));
            }
        }
        Ok(())
    }
}
