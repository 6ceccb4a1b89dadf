//! Sentence-compression records, retention masks, padding, and splits.

mod io;
mod tokenize;

pub use io::{load_dataset, load_examples, load_splits, DataFormat, LoadStats, Records};
pub use tokenize::tokenize;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed window every model sees.
pub const SEQ_LEN: usize = 64;

/// An original sentence and its deletion-based compression.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPair {
    pub id: String,
    pub original: String,
    pub compressed: String,
}

/// Tokens with a retention mask (1 = retain, 0 = delete).
///
/// Before [`pad_truncate`] the masks have one entry per token. Afterwards
/// `labels` and `pad_mask` span the full window, `tokens` holds only the real
/// tokens, and `pad_mask` has exactly `tokens.len()` ones at the front.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedExample {
    pub id: String,
    pub tokens: Vec<String>,
    pub labels: Vec<u8>,
    pub pad_mask: Vec<u8>,
    /// Token count before truncation.
    pub original_length: usize,
}

impl TokenizedExample {
    pub fn new(id: impl Into<String>, tokens: Vec<String>, labels: Vec<u8>) -> Result<Self> {
        if tokens.len() != labels.len() {
            return Err(Error::dim(format!(
                "{} tokens but {} labels",
                tokens.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::dim("labels must be 0 or 1"));
        }
        let n = tokens.len();
        Ok(TokenizedExample {
            id: id.into(),
            tokens,
            labels,
            pad_mask: vec![1; n],
            original_length: n,
        })
    }

    pub fn is_truncated(&self) -> bool {
        self.original_length > self.tokens.len()
    }

    pub fn retained(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    /// Retained tokens joined by single spaces.
    pub fn compression(&self) -> String {
        apply_mask(&self.tokens, &self.labels)
    }
}

/// Joins the tokens whose mask entry is 1.
pub fn apply_mask(tokens: &[String], mask: &[u8]) -> String {
    tokens
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m == 1)
        .map(|(t, _)| t.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Labels original tokens by a greedy leftmost subsequence match of the compression.
pub fn derive_mask(pair: &RawPair) -> Result<TokenizedExample> {
    let original = tokenize(&pair.original);
    let compressed = tokenize(&pair.compressed);
    if compressed.is_empty() {
        return Err(Error::Alignment(format!("{}: empty compression", pair.id)));
    }
    let mut labels = vec![0u8; original.len()];
    let mut next = compressed.iter().peekable();
    for (tok, label) in original.iter().zip(labels.iter_mut()) {
        if next.peek().is_some_and(|c| *c == tok) {
            *label = 1;
            next.next();
        }
    }
    if let Some(missing) = next.next() {
        return Err(Error::Alignment(format!(
            "{}: compressed token {missing:?} has no match in order",
            pair.id
        )));
    }
    TokenizedExample::new(pair.id.clone(), original, labels)
}

/// Labelled examples from pairs plus the number of pairs that failed alignment.
pub fn derive_all(pairs: &[RawPair]) -> (Vec<TokenizedExample>, usize) {
    let mut skipped = 0;
    let examples = pairs
        .iter()
        .filter_map(|p| match derive_mask(p) {
            Ok(ex) => Some(ex),
            Err(e) => {
                log::debug!("skipping pair: {e}");
                skipped += 1;
                None
            }
        })
        .collect();
    (examples, skipped)
}

/// Truncates to `len` tokens or pads up to `len` slots. `None` for an empty sentence.
pub fn pad_truncate(ex: &TokenizedExample, len: usize) -> Option<TokenizedExample> {
    let n = ex.tokens.len().min(ex.pad_mask.iter().filter(|&&p| p == 1).count());
    if n == 0 {
        return None;
    }
    let kept = n.min(len);
    let mut labels = ex.labels[..kept].to_vec();
    labels.resize(len, 0);
    let mut pad_mask = vec![1u8; kept];
    pad_mask.resize(len, 0);
    Some(TokenizedExample {
        id: ex.id.clone(),
        tokens: ex.tokens[..kept].to_vec(),
        labels,
        pad_mask,
        original_length: ex.original_length.max(n),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PrepareStats {
    pub kept: usize,
    pub truncated: usize,
    /// Empty or all-delete examples.
    pub degenerate: usize,
}

/// Pads every example to `len`, dropping degenerate ones and counting truncations.
pub fn prepare(examples: &[TokenizedExample], len: usize) -> (Vec<TokenizedExample>, PrepareStats) {
    let mut stats = PrepareStats::default();
    let out = examples
        .iter()
        .filter_map(|ex| {
            let padded = pad_truncate(ex, len).filter(|p| p.retained() > 0);
            match padded {
                None => {
                    stats.degenerate += 1;
                    None
                }
                Some(p) => {
                    stats.truncated += usize::from(p.is_truncated());
                    stats.kept += 1;
                    Some(p)
                }
            }
        })
        .collect();
    (out, stats)
}

/// Leading test and validation sizes; everything after them trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test: usize,
    pub validation: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            test: 1000,
            validation: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits<T> {
    pub test: Vec<T>,
    pub validation: Vec<T>,
    pub train: Vec<T>,
}

impl SplitSpec {
    /// Splits in file order, without shuffling.
    pub fn split<T>(&self, records: Vec<T>) -> Result<Splits<T>> {
        let need = self.test + self.validation;
        if records.len() <= need {
            return Err(Error::EmptyDataset(format!(
                "{} records leave no training data after {} test and {} validation",
                records.len(),
                self.test,
                self.validation
            )));
        }
        let mut rest = records;
        let train = rest.split_off(need);
        let validation = rest.split_off(self.test);
        Ok(Splits {
            test: rest,
            validation,
            train,
        })
    }
}

impl<T> Splits<T> {
    /// Appends records from further files to the training split.
    pub fn with_extra_train(mut self, extra: impl IntoIterator<Item = T>) -> Self {
        self.train.extend(extra);
        self
    }

    pub fn map<U>(self, mut f: impl FnMut(Vec<T>) -> Vec<U>) -> Splits<U> {
        Splits {
            test: f(self.test),
            validation: f(self.validation),
            train: f(self.train),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(id: &str, original: &str, compressed: &str) -> RawPair {
        RawPair {
            id: id.into(),
            original: original.into(),
            compressed: compressed.into(),
        }
    }

    #[test]
    fn unique_alignment() {
        let ex = derive_mask(&pair("0", "a b c d", "b d")).unwrap();
        assert_eq!(ex.labels, vec![0, 1, 0, 1]);
    }

    #[test]
    fn greedy_leftmost_tie_break() {
        let ex = derive_mask(&pair("0", "a a b", "a b")).unwrap();
        assert_eq!(ex.labels, vec![1, 0, 1]);
    }

    #[test]
    fn identical_pair_keeps_everything() {
        let ex = derive_mask(&pair("0", "Police arrested the man.", "Police arrested the man.")).unwrap();
        assert!(ex.labels.iter().all(|&l| l == 1));
    }

    #[test]
    fn non_subsequence_is_alignment_error() {
        assert!(matches!(
            derive_mask(&pair("0", "a b c", "c a")),
            Err(Error::Alignment(_))
        ));
        assert!(derive_mask(&pair("0", "a b c", "")).is_err());
    }

    #[test]
    fn corrupted_fraction_is_counted() {
        let pairs: Vec<RawPair> = (0..200)
            .map(|i| {
                if i % 10 == 3 {
                    pair(&i.to_string(), "one two three four", "four one")
                } else {
                    pair(&i.to_string(), "one two three four", "two four")
                }
            })
            .collect();
        let (ok, skipped) = derive_all(&pairs);
        assert_eq!(skipped, 20);
        assert_eq!(ok.len(), 180);
        assert_eq!(skipped as f64 / pairs.len() as f64, 0.10);
    }

    #[test]
    fn compression_matches_text() {
        let p = pair("0", "The quick brown fox, it said, jumped.", "The fox jumped.");
        let ex = derive_mask(&p).unwrap();
        assert_eq!(ex.compression(), "The fox jumped .");
        let squash = |s: &str| s.split_whitespace().collect::<String>();
        assert_eq!(squash(&ex.compression()), squash(&p.compressed));
    }

    fn example(n: usize) -> TokenizedExample {
        TokenizedExample::new("x", (0..n).map(|i| format!("t{i}")).collect(), vec![1; n]).unwrap()
    }

    #[test]
    fn pads_short_sentences() {
        let p = pad_truncate(&example(10), 64).unwrap();
        assert_eq!(p.labels.len(), 64);
        assert_eq!(p.pad_mask.iter().filter(|&&m| m == 1).count(), 10);
        assert_eq!(p.tokens.len(), 10);
        assert!(p.labels[10..].iter().all(|&l| l == 0));
        assert!(!p.is_truncated());
    }

    #[test]
    fn truncates_long_sentences() {
        let (out, stats) = prepare(&[example(70), example(5)], 64);
        assert_eq!(out[0].tokens.len(), 64);
        assert!(out[0].is_truncated());
        assert_eq!(out[0].original_length, 70);
        assert_eq!(stats.truncated, 1);
        assert_eq!(stats.kept, 2);
    }

    #[test]
    fn degenerate_examples_skipped() {
        assert!(pad_truncate(&example(0), 64).is_none());
        let mut all_delete = example(4);
        all_delete.labels = vec![0; 4];
        let (out, stats) = prepare(&[example(0), all_delete, example(3)], 64);
        assert_eq!(out.len(), 1);
        assert_eq!(stats.degenerate, 2);
    }

    #[test]
    fn small_split_sizes() {
        let s = SplitSpec::default().split((0..10_000).collect::<Vec<_>>()).unwrap();
        assert_eq!((s.test.len(), s.validation.len(), s.train.len()), (1000, 1000, 8000));
        assert_eq!(s.test[0], 0);
        assert_eq!(s.validation[0], 1000);
        assert_eq!(s.train[0], 2000);
        let large = s.with_extra_train(10_000..200_000);
        assert_eq!(large.train.len(), 198_000);
        assert!(SplitSpec::default().split((0..2000).collect::<Vec<_>>()).is_err());
    }
}
