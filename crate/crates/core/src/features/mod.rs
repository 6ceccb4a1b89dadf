//! Per-token input features: a `[m × T]` matrix per example.

mod glove;
mod tcf;

use std::collections::HashMap;

pub use glove::{load_glove, EmbeddingTable};
pub use tcf::{read_feature_file, IndexedFeatures, TcfHeader, TcfReader, TcfWriter, TCF_HIDDEN};

use crate::data::TokenizedExample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Anything that can produce the feature matrix of a padded example.
pub trait FeatureSource: Sync {
    /// Channel count `m` of every matrix this source produces.
    fn channels(&self) -> usize;

    /// Number of contextual layers concatenated per token; 0 for static embeddings.
    fn layers(&self) -> usize;

    /// Short label for reports, e.g. `glove` or `tcf`.
    fn kind(&self) -> &'static str;

    /// `[channels × ex.pad_mask.len()]` features; padded columns are zero.
    fn features(&self, ex: &TokenizedExample) -> Result<Tensor>;
}

/// Zeroes every column whose pad flag is 0.
pub(crate) fn zero_padding(t: &mut Tensor, pad_mask: &[u8]) {
    let len = pad_mask.len();
    for row in t.data_mut().chunks_exact_mut(len) {
        for (v, &p) in row.iter_mut().zip(pad_mask) {
            if p == 0 {
                *v = 0.0;
            }
        }
    }
}

/// Feature matrices held in memory, keyed by example id.
#[derive(Debug, Clone, Default)]
pub struct InMemoryFeatures {
    channels: usize,
    layers: usize,
    by_id: HashMap<String, Tensor>,
}

impl InMemoryFeatures {
    pub fn new(channels: usize, layers: usize) -> Self {
        InMemoryFeatures {
            channels,
            layers,
            by_id: HashMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, features: Tensor) -> Result<()> {
        if features.shape().first() != Some(&self.channels) || features.shape().len() != 2 {
            return Err(Error::dim(format!(
                "features {:?} do not have {} channels",
                features.shape(),
                self.channels
            )));
        }
        self.by_id.insert(id.into(), features);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

impl FeatureSource for InMemoryFeatures {
    fn channels(&self) -> usize {
        self.channels
    }

    fn layers(&self) -> usize {
        self.layers
    }

    fn kind(&self) -> &'static str {
        "memory"
    }

    fn features(&self, ex: &TokenizedExample) -> Result<Tensor> {
        let t = self
            .by_id
            .get(&ex.id)
            .ok_or_else(|| Error::Alignment(format!("no features for example {:?}", ex.id)))?;
        if t.shape()[1] != ex.pad_mask.len() {
            return Err(Error::dim(format!(
                "features span {} steps, example has {}",
                t.shape()[1],
                ex.pad_mask.len()
            )));
        }
        let mut t = t.clone();
        zero_padding(&mut t, &ex.pad_mask);
        Ok(t)
    }
}
