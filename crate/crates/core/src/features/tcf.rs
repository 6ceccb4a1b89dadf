//! `TCF1` contextual feature files.
//!
//! Header: magic `TCF1`, then little-endian u32 version, layers, tokens,
//! hidden, record count. Each record is a u32 id length, the UTF-8 id, and
//! `layers × tokens × hidden` f32 values (layer-major, then token, then hidden).

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{zero_padding, FeatureSource};
use crate::data::TokenizedExample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TCF1";
const VERSION: u32 = 1;
const HEADER_BYTES: u64 = 24;
const MAX_ID_BYTES: u32 = 1 << 16;

/// Hidden width of the contextual encoder the files are produced from.
pub const TCF_HIDDEN: usize = 768;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TcfHeader {
    pub layers: usize,
    pub tokens: usize,
    pub hidden: usize,
    pub records: usize,
}

impl TcfHeader {
    fn record_floats(&self) -> usize {
        self.layers * self.tokens * self.hidden
    }

    fn read(r: &mut impl Read, path: &Path) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, path)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("{}: not a TCF1 file", path.display())));
        }
        let mut field = || read_u32(r, path);
        let version = field()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported TCF version {version}",
                path.display()
            )));
        }
        let h = TcfHeader {
            layers: field()? as usize,
            tokens: field()? as usize,
            hidden: field()? as usize,
            records: field()? as usize,
        };
        if h.layers == 0 || h.tokens == 0 || h.hidden == 0 {
            return Err(Error::Format(format!(
                "{}: zero dimension in header {h:?}",
                path.display()
            )));
        }
        Ok(h)
    }

    fn check_layers(&self, wanted: usize, path: &Path) -> Result<()> {
        if wanted == 0 || wanted > self.layers {
            return Err(Error::config(format!(
                "{}: asked for {wanted} layers, file stores {}",
                path.display(),
                self.layers
            )));
        }
        Ok(())
    }
}

fn truncated(path: &Path) -> Error {
    Error::Integrity(format!("{}: file is truncated", path.display()))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => truncated(path),
        _ => Error::io(path, e),
    })
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_id(r: &mut impl Read, path: &Path) -> Result<String> {
    let n = read_u32(r, path)?;
    if n > MAX_ID_BYTES {
        return Err(Error::Integrity(format!(
            "{}: id length {n} is implausible",
            path.display()
        )));
    }
    let mut buf = vec![0u8; n as usize];
    read_exact(r, &mut buf, path)?;
    String::from_utf8(buf).map_err(|_| Error::Integrity(format!("{}: id is not UTF-8", path.display())))
}

/// Reads the first `layers` of a record and lays them out as `[layers·hidden × tokens]`.
fn read_features(r: &mut impl Read, h: &TcfHeader, layers: usize, path: &Path) -> Result<Tensor> {
    let (t_len, hid) = (h.tokens, h.hidden);
    let mut raw = vec![0f32; layers * t_len * hid];
    r.read_f32_into::<LittleEndian>(&mut raw).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => truncated(path),
        _ => Error::io(path, e),
    })?;
    let mut out = vec![0f32; raw.len()];
    for l in 0..layers {
        for t in 0..t_len {
            let src = &raw[(l * t_len + t) * hid..][..hid];
            for (k, &v) in src.iter().enumerate() {
                out[(l * hid + k) * t_len + t] = v;
            }
        }
    }
    Tensor::new(&[layers * hid, t_len], out)
}

/// Streams records one at a time, concatenating the first `layers` layers per token.
pub struct TcfReader {
    path: PathBuf,
    reader: BufReader<File>,
    header: TcfHeader,
    layers: usize,
    remaining: usize,
    failed: bool,
}

/// Opens `path` for streaming with `layers` layers per token (channels = layers · hidden).
pub fn read_feature_file(path: &Path, layers: usize) -> Result<TcfReader> {
    TcfReader::open(path, layers)
}

impl TcfReader {
    pub fn open(path: &Path, layers: usize) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(f);
        let header = TcfHeader::read(&mut reader, path)?;
        header.check_layers(layers, path)?;
        Ok(TcfReader {
            path: path.to_path_buf(),
            reader,
            header,
            layers,
            remaining: header.records,
            failed: false,
        })
    }

    pub fn header(&self) -> TcfHeader {
        self.header
    }

    pub fn channels(&self) -> usize {
        self.layers * self.header.hidden
    }

    fn next_record(&mut self) -> Result<(String, Tensor)> {
        let id = read_id(&mut self.reader, &self.path)?;
        let feats = read_features(&mut self.reader, &self.header, self.layers, &self.path)?;
        let skip = (self.header.layers - self.layers) * self.header.tokens * self.header.hidden * 4;
        if skip > 0 {
            let copied = io::copy(&mut (&mut self.reader).take(skip as u64), &mut io::sink())
                .map_err(|e| Error::io(&self.path, e))?;
            if copied != skip as u64 {
                return Err(truncated(&self.path));
            }
        }
        Ok((id, feats))
    }

    /// Checks that the stream's ids equal `ids` in order, consuming the reader.
    pub fn check_alignment<'a>(self, ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let path = self.path.clone();
        let mut it = ids.into_iter();
        for (i, rec) in self.enumerate() {
            let (id, _) = rec?;
            match it.next() {
                Some(want) if want == id => {}
                Some(want) => {
                    return Err(Error::Alignment(format!(
                        "{}: record {i} has id {id:?}, dataset has {want:?}",
                        path.display()
                    )))
                }
                None => {
                    return Err(Error::Alignment(format!(
                        "{}: more records than dataset examples",
                        path.display()
                    )))
                }
            }
        }
        if it.next().is_some() {
            return Err(Error::Alignment(format!(
                "{}: fewer records than dataset examples",
                path.display()
            )));
        }
        Ok(())
    }
}

impl Iterator for TcfReader {
    type Item = Result<(String, Tensor)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        if self.remaining == 0 {
            let mut probe = [0u8; 1];
            return match self.reader.read(&mut probe) {
                Ok(0) => None,
                Ok(_) => {
                    self.failed = true;
                    Some(Err(Error::Integrity(format!(
                        "{}: trailing bytes after last record",
                        self.path.display()
                    ))))
                }
                Err(e) => {
                    self.failed = true;
                    Some(Err(Error::io(&self.path, e)))
                }
            };
        }
        self.remaining -= 1;
        let rec = self.next_record();
        self.failed = rec.is_err();
        Some(rec)
    }
}

/// Writes a TCF1 file atomically; the target only appears after [`TcfWriter::finish`].
pub struct TcfWriter {
    path: PathBuf,
    out: BufWriter<tempfile::NamedTempFile>,
    header: TcfHeader,
    written: usize,
}

impl TcfWriter {
    pub fn create(path: &Path, header: TcfHeader) -> Result<Self> {
        if header.layers == 0 || header.tokens == 0 || header.hidden == 0 {
            return Err(Error::config(format!("zero dimension in TCF header {header:?}")));
        }
        let dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        let mut out = BufWriter::new(tmp);
        let mut put = || -> io::Result<()> {
            out.write_all(MAGIC)?;
            for v in [
                VERSION,
                header.layers as u32,
                header.tokens as u32,
                header.hidden as u32,
                header.records as u32,
            ] {
                out.write_u32::<LittleEndian>(v)?;
            }
            Ok(())
        };
        put().map_err(|e| Error::io(path, e))?;
        Ok(TcfWriter {
            path: path.to_path_buf(),
            out,
            header,
            written: 0,
        })
    }

    /// `values` is layer-major, then token, then hidden.
    pub fn write_record(&mut self, id: &str, values: &[f32]) -> Result<()> {
        if self.written == self.header.records {
            return Err(Error::config("more records than the header declares"));
        }
        if values.len() != self.header.record_floats() {
            return Err(Error::dim(format!(
                "record has {} values, header implies {}",
                values.len(),
                self.header.record_floats()
            )));
        }
        let id_len = u32::try_from(id.len()).ok().filter(|&n| n <= MAX_ID_BYTES);
        let Some(id_len) = id_len else {
            return Err(Error::config(format!("id of {} bytes is too long", id.len())));
        };
        let mut put = || -> io::Result<()> {
            self.out.write_u32::<LittleEndian>(id_len)?;
            self.out.write_all(id.as_bytes())?;
            for &v in values {
                self.out.write_f32::<LittleEndian>(v)?;
            }
            Ok(())
        };
        put().map_err(|e| Error::io(&self.path, e))?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        if self.written != self.header.records {
            return Err(Error::config(format!(
                "wrote {} records, header declares {}",
                self.written, self.header.records
            )));
        }
        let tmp = self
            .out
            .into_inner()
            .map_err(|e| Error::io(&self.path, e.into_error()))?;
        tmp.as_file().sync_all().map_err(|e| Error::io(&self.path, e))?;
        tmp.persist(&self.path).map_err(|e| Error::io(&self.path, e.error))?;
        Ok(())
    }
}

/// Random access to a TCF1 file by example id, through an offset index.
pub struct IndexedFeatures {
    path: PathBuf,
    header: TcfHeader,
    layers: usize,
    offsets: HashMap<String, u64>,
    file: Mutex<File>,
}

impl std::fmt::Debug for IndexedFeatures {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IndexedFeatures")
            .field("path", &self.path)
            .field("header", &self.header)
            .field("layers", &self.layers)
            .finish_non_exhaustive()
    }
}

impl IndexedFeatures {
    /// Scans record headers once. Duplicate ids and truncated files are integrity errors.
    pub fn open(path: &Path, layers: usize) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let file_len = f.metadata().map_err(|e| Error::io(path, e))?.len();
        let mut r = BufReader::new(f);
        let header = TcfHeader::read(&mut r, path)?;
        header.check_layers(layers, path)?;
        let body = header.record_floats() as u64 * 4;
        let mut offsets = HashMap::with_capacity(header.records);
        let mut pos = HEADER_BYTES;
        for _ in 0..header.records {
            let id = read_id(&mut r, path)?;
            pos += 4 + id.len() as u64;
            if pos + body > file_len {
                return Err(truncated(path));
            }
            if offsets.insert(id.clone(), pos).is_some() {
                return Err(Error::Integrity(format!("{}: duplicate id {id:?}", path.display())));
            }
            pos += body;
            r.seek(SeekFrom::Start(pos)).map_err(|e| Error::io(path, e))?;
        }
        if pos != file_len {
            return Err(Error::Integrity(format!(
                "{}: trailing bytes after last record",
                path.display()
            )));
        }
        Ok(IndexedFeatures {
            path: path.to_path_buf(),
            header,
            layers,
            offsets,
            file: Mutex::new(r.into_inner()),
        })
    }

    pub fn header(&self) -> TcfHeader {
        self.header
    }

    pub fn contains(&self, id: &str) -> bool {
        self.offsets.contains_key(id)
    }

    /// Fails with an alignment error naming the first example without a record.
    pub fn check_covers<'a>(&self, examples: impl IntoIterator<Item = &'a TokenizedExample>) -> Result<()> {
        for ex in examples {
            if !self.contains(&ex.id) {
                return Err(Error::Alignment(format!(
                    "{}: no record for example {:?}",
                    self.path.display(),
                    ex.id
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<Tensor> {
        let &off = self
            .offsets
            .get(id)
            .ok_or_else(|| Error::Alignment(format!("{}: no record for example {id:?}", self.path.display())))?;
        let n = self.layers * self.header.tokens * self.header.hidden * 4;
        let mut bytes = vec![0u8; n];
        {
            let mut f = self.file.lock().unwrap_or_else(|p| p.into_inner());
            f.seek(SeekFrom::Start(off)).map_err(|e| Error::io(&self.path, e))?;
            read_exact(&mut *f, &mut bytes, &self.path)?;
        }
        read_features(&mut bytes.as_slice(), &self.header, self.layers, &self.path)
    }
}

impl FeatureSource for IndexedFeatures {
    fn channels(&self) -> usize {
        self.layers * self.header.hidden
    }

    fn layers(&self) -> usize {
        self.layers
    }

    fn kind(&self) -> &'static str {
        "tcf"
    }

    fn features(&self, ex: &TokenizedExample) -> Result<Tensor> {
        if ex.pad_mask.len() != self.header.tokens {
            return Err(Error::dim(format!(
                "example spans {} steps, feature file stores {}",
                ex.pad_mask.len(),
                self.header.tokens
            )));
        }
        let mut t = self.get(&ex.id)?;
        zero_padding(&mut t, &ex.pad_mask);
        Ok(t)
    }
}
