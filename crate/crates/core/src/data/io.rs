use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{derive_all, prepare, RawPair, SplitSpec, Splits, TokenizedExample, SEQ_LEN};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    /// `tokens<TAB>labels[<TAB>id]`, both space-separated.
    TsvLabeled,
    /// One JSON object per line with `original`, `compressed` and `id`.
    PairsJson,
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv_labeled" | "tsv" => Ok(DataFormat::TsvLabeled),
            "pairs_json" | "json" => Ok(DataFormat::PairsJson),
            other => Err(Error::config(format!("unknown data format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Records {
    Labeled(Vec<TokenizedExample>),
    Pairs(Vec<RawPair>),
}

impl Records {
    pub fn len(&self) -> usize {
        match self {
            Records::Labeled(v) => v.len(),
            Records::Pairs(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Deserialize)]
struct JsonPair {
    original: String,
    compressed: String,
    id: Option<String>,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads records in file order. Blank lines are ignored; a record without an
/// explicit id gets its zero-based ordinal.
pub fn load_dataset(path: &Path, format: DataFormat) -> Result<Records> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let records = match format {
        DataFormat::TsvLabeled => {
            let mut out = Vec::new();
            for (i, line) in lines {
                let lineno = i + 1;
                let mut fields = line.split('\t');
                let (Some(toks), Some(labs)) = (fields.next(), fields.next()) else {
                    return Err(parse_err(path, lineno, "expected tokens<TAB>labels"));
                };
                let id = fields.next().map_or_else(|| out.len().to_string(), str::to_string);
                if fields.next().is_some() {
                    return Err(parse_err(path, lineno, "too many tab-separated fields"));
                }
                let tokens: Vec<String> = toks.split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect();
                let labels = labs
                    .split(' ')
                    .filter(|t| !t.is_empty())
                    .map(|l| match l {
                        "0" => Ok(0),
                        "1" => Ok(1),
                        other => Err(parse_err(path, lineno, format!("label {other:?} is not 0 or 1"))),
                    })
                    .collect::<Result<Vec<u8>>>()?;
                if tokens.len() != labels.len() {
                    return Err(parse_err(
                        path,
                        lineno,
                        format!("{} tokens but {} labels", tokens.len(), labels.len()),
                    ));
                }
                out.push(TokenizedExample::new(id, tokens, labels)?);
            }
            Records::Labeled(out)
        }
        DataFormat::PairsJson => {
            let mut out = Vec::new();
            for (i, line) in lines {
                let p: JsonPair = serde_json::from_str(line).map_err(|e| parse_err(path, i + 1, e.to_string()))?;
                out.push(RawPair {
                    id: p.id.unwrap_or_else(|| out.len().to_string()),
                    original: p.original,
                    compressed: p.compressed,
                });
            }
            Records::Pairs(out)
        }
    };
    if records.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    Ok(records)
}

/// Loads labelled examples; pairs are aligned with [`super::derive_mask`].
/// Returns the examples and the count of pairs skipped for failed alignment.
pub fn load_examples(path: &Path, format: DataFormat) -> Result<(Vec<TokenizedExample>, usize)> {
    match load_dataset(path, format)? {
        Records::Labeled(v) => Ok((v, 0)),
        Records::Pairs(p) => Ok(derive_all(&p)),
    }
}

/// Counts gathered while turning files into padded splits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub records: usize,
    pub misaligned: usize,
    pub truncated: usize,
    pub degenerate: usize,
}

/// Splits `path` in file order, then aligns and pads every part to [`SEQ_LEN`].
/// Examples from `extra_train` files are appended to the training split.
pub fn load_splits(
    path: &Path,
    format: DataFormat,
    spec: SplitSpec,
    extra_train: &[&Path],
) -> Result<(Splits<TokenizedExample>, LoadStats)> {
    let mut stats = LoadStats::default();
    let records = load_dataset(path, format)?;
    stats.records = records.len();
    let splits = match records {
        Records::Labeled(v) => spec.split(v)?,
        Records::Pairs(p) => spec.split(p)?.map(|part| {
            let (ex, skipped) = derive_all(&part);
            stats.misaligned += skipped;
            ex
        }),
    };
    let mut extra = Vec::new();
    for p in extra_train {
        let (ex, skipped) = load_examples(p, format)?;
        stats.records += ex.len() + skipped;
        stats.misaligned += skipped;
        extra.extend(ex);
    }
    let splits = splits.with_extra_train(extra).map(|part| {
        let (out, s) = prepare(&part, SEQ_LEN);
        stats.truncated += s.truncated;
        stats.degenerate += s.degenerate;
        out
    });
    if splits.train.is_empty() || splits.validation.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{}: no usable training or validation examples",
            path.display()
        )));
    }
    Ok((splits, stats))
}
