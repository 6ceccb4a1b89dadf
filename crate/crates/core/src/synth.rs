//! Synthetic compression corpora for smoke tests and benchmarks.
//!
//! Words `w0 … w{V-1}` fall into three classes. A class-0 word is always
//! retained, a class-1 word is retained only right after a retained word,
//! and class-2 words are deleted. Each word gets a random embedding whose
//! first coordinate encodes its class, so the rule is learnable from
//! embeddings plus one token of left context.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{prepare, TokenizedExample, SEQ_LEN};
use crate::error::{Error, Result};
use crate::features::{EmbeddingTable, TcfHeader, TcfWriter};
use crate::train::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSpec {
    pub examples: usize,
    pub vocab: usize,
    pub dim: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            examples: 64,
            vocab: 60,
            dim: 16,
            min_len: 8,
            max_len: 40,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    /// Unpadded examples with ids `0`, `1`, ...
    pub examples: Vec<TokenizedExample>,
    pub table: EmbeddingTable,
    pub words: Vec<(String, Vec<f32>)>,
}

fn word_class(i: usize) -> usize {
    i % 3
}

pub fn corpus(spec: &SynthSpec) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut table = EmbeddingTable::new(spec.dim);
    let mut words = Vec::with_capacity(spec.vocab);
    for i in 0..spec.vocab {
        let mut v: Vec<f32> = (0..spec.dim).map(|_| rng.random_range(-0.5..0.5)).collect();
        v[0] = [1.0, 0.0, -1.0][word_class(i)];
        let w = format!("w{i}");
        table.insert(&w, &v).expect("dimension matches");
        words.push((w, v));
    }
    let mut examples = Vec::with_capacity(spec.examples);
    while examples.len() < spec.examples {
        let n = rng.random_range(spec.min_len..=spec.max_len);
        let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.vocab)).collect();
        let mut labels = Vec::with_capacity(n);
        for (t, &w) in ids.iter().enumerate() {
            let keep = match word_class(w) {
                0 => true,
                1 => t > 0 && labels[t - 1] == 1,
                _ => false,
            };
            labels.push(u8::from(keep));
        }
        if !labels.contains(&1) {
            continue;
        }
        let tokens = ids.iter().map(|&w| words[w].0.clone()).collect();
        let id = examples.len().to_string();
        examples.push(TokenizedExample::new(id, tokens, labels).expect("lengths match"));
    }
    SynthCorpus { examples, table, words }
}

impl SynthCorpus {
    /// Examples padded or truncated to the model window.
    pub fn padded(&self) -> Vec<TokenizedExample> {
        prepare(&self.examples, SEQ_LEN).0
    }

    /// `tokens<TAB>labels` lines.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for ex in &self.examples {
            let labels: Vec<String> = ex.labels.iter().map(u8::to_string).collect();
            writeln!(out, "{}\t{}", ex.tokens.join(" "), labels.join(" ")).map_err(|e| Error::io(path, e))?;
        }
        write_atomic(path, &out)
    }

    /// Embeddings in the usual `word v1 … vd` text layout.
    pub fn write_glove(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for (w, v) in &self.words {
            let vals: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
            writeln!(out, "{w} {}", vals.join(" ")).map_err(|e| Error::io(path, e))?;
        }
        write_atomic(path, &out)
    }

    /// Contextual features with `layers` layers of width `hidden`. Layer `l`
    /// of a token repeats its embedding scaled by `1/(l+1)`; padding is zero.
    pub fn write_tcf(&self, path: &Path, layers: usize, hidden: usize) -> Result<()> {
        let padded = self.padded();
        let header = TcfHeader {
            layers,
            tokens: SEQ_LEN,
            hidden,
            records: padded.len(),
        };
        let mut w = TcfWriter::create(path, header)?;
        let mut rec = vec![0f32; layers * SEQ_LEN * hidden];
        for ex in &padded {
            rec.iter_mut().for_each(|v| *v = 0.0);
            for l in 0..layers {
                let scale = 1.0 / (l + 1) as f32;
                for (t, tok) in ex.tokens.iter().enumerate() {
                    let v = self.table.lookup(tok);
                    let dst = &mut rec[(l * SEQ_LEN + t) * hidden..][..hidden];
                    for (k, d) in dst.iter_mut().enumerate() {
                        *d = v[k % v.len()] * scale;
                    }
                }
            }
            w.write_record(&ex.id, &rec)?;
        }
        w.finish()
    }
}
