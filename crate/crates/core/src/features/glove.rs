use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use super::FeatureSource;
use crate::data::TokenizedExample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Static word vectors. Lookups are case-folded and unknown words map to zeros.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    index: HashMap<String, usize>,
    vectors: Vec<f32>,
    zero: Vec<f32>,
    skipped_lines: usize,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            index: HashMap::new(),
            vectors: Vec::new(),
            zero: vec![0.0; dim],
            skipped_lines: 0,
        }
    }

    /// Adds a vector under the lower-cased word. The first entry for a word wins.
    pub fn insert(&mut self, word: &str, vector: &[f32]) -> Result<bool> {
        if vector.len() != self.dim {
            return Err(Error::dim(format!(
                "vector for {word:?} has {} values, table dim is {}",
                vector.len(),
                self.dim
            )));
        }
        let key = word.to_lowercase();
        if self.index.contains_key(&key) {
            return Ok(false);
        }
        self.index.insert(key, self.index.len());
        self.vectors.extend_from_slice(vector);
        Ok(true)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.index.len()
    }

    pub fn skipped_lines(&self) -> usize {
        self.skipped_lines
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(&word.to_lowercase())
    }

    pub fn lookup(&self, word: &str) -> &[f32] {
        match self.index.get(&word.to_lowercase()) {
            Some(&i) => &self.vectors[i * self.dim..(i + 1) * self.dim],
            None => &self.zero,
        }
    }

    /// `[dim × len]` matrix: column `t` is the vector of token `t`, padding is zero.
    pub fn embed_sequence(&self, ex: &TokenizedExample) -> Tensor {
        let len = ex.pad_mask.len();
        let mut out = Tensor::zeros(&[self.dim, len]);
        let data = out.data_mut();
        for (t, tok) in ex.tokens.iter().enumerate().take(len) {
            if ex.pad_mask[t] == 0 {
                continue;
            }
            for (d, &v) in self.lookup(tok).iter().enumerate() {
                data[d * len + t] = v;
            }
        }
        out
    }
}

impl FeatureSource for EmbeddingTable {
    fn channels(&self) -> usize {
        self.dim
    }

    fn layers(&self) -> usize {
        0
    }

    fn kind(&self) -> &'static str {
        "glove"
    }

    fn features(&self, ex: &TokenizedExample) -> Result<Tensor> {
        Ok(self.embed_sequence(ex))
    }
}

/// Reads `word v1 … v_dim` lines. Lines with the wrong number of values or
/// unparsable numbers are counted and skipped.
pub fn load_glove(path: &Path, dim: usize) -> Result<EmbeddingTable> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut table = EmbeddingTable::new(dim);
    let mut buf = Vec::with_capacity(dim);
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut parts = line.split(' ');
        let Some(word) = parts.next().filter(|w| !w.is_empty()) else {
            table.skipped_lines += 1;
            continue;
        };
        buf.clear();
        let parsed = parts
            .filter(|p| !p.is_empty())
            .try_for_each(|p| p.parse::<f32>().map(|v| buf.push(v)));
        if parsed.is_err() || buf.len() != dim || buf.iter().any(|v| !v.is_finite()) {
            table.skipped_lines += 1;
            continue;
        }
        table.insert(word, &buf)?;
    }
    if table.vocab_size() == 0 {
        return Err(Error::Format(format!(
            "{}: no usable {dim}-dimensional vectors",
            path.display()
        )));
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::pad_truncate;
    use std::io::Write;

    fn glove_file(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    fn line(word: &str, dim: usize, base: f32) -> String {
        let vals: Vec<String> = (0..dim).map(|i| format!("{}", base + i as f32 * 0.01)).collect();
        format!("{word} {}", vals.join(" "))
    }

    #[test]
    fn parses_hundred_dim_lines() {
        let f = glove_file(&[
            line("the", 100, 0.1),
            line("bad", 99, 0.0),
            "broken x y".into(),
            line("cat", 100, 1.0),
        ]);
        let table = load_glove(f.path(), 100).unwrap();
        assert_eq!(table.vocab_size(), 2);
        assert_eq!(table.skipped_lines(), 2);
        assert_eq!(table.lookup("the").len(), 100);
        assert!((table.lookup("the")[0] - 0.1).abs() < 1e-7);
        assert_eq!(table.lookup("zebra"), &[0.0; 100][..]);
        assert_eq!(table.lookup("The"), table.lookup("the"));
    }

    #[test]
    fn loading_is_pure() {
        let f = glove_file(&[line("a", 4, 0.5), line("b", 4, -0.5)]);
        let a = load_glove(f.path(), 4).unwrap();
        let b = load_glove(f.path(), 4).unwrap();
        for w in ["a", "b", "c"] {
            assert_eq!(a.lookup(w), b.lookup(w));
        }
    }

    #[test]
    fn no_usable_lines_is_an_error() {
        let f = glove_file(&[line("a", 3, 0.0)]);
        assert!(matches!(load_glove(f.path(), 100), Err(Error::Format(_))));
    }

    #[test]
    fn embeds_with_zero_padding() {
        let mut table = EmbeddingTable::new(3);
        table.insert("the", &[1.0, 2.0, 3.0]).unwrap();
        table.insert("cat", &[4.0, 5.0, 6.0]).unwrap();
        table.insert("sat", &[7.0, 8.0, 9.0]).unwrap();
        let ex = TokenizedExample::new("0", vec!["The".into(), "cat".into(), "sat".into()], vec![1, 1, 1]).unwrap();
        let ex = pad_truncate(&ex, 64).unwrap();
        let m = table.embed_sequence(&ex);
        assert_eq!(m.shape(), &[3, 64]);
        let nonzero_cols = (0..64).filter(|&t| (0..3).any(|d| m.at2(d, t) != 0.0)).count();
        assert_eq!(nonzero_cols, 3);
        assert_eq!(m.at2(0, 0), 1.0);
        assert_eq!(m.at2(2, 2), 9.0);

        let mut all_pad = ex.clone();
        all_pad.pad_mask = vec![0; 64];
        assert!(table.embed_sequence(&all_pad).data().iter().all(|&v| v == 0.0));
    }
}
