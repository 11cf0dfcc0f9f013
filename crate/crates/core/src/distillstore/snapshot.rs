//! Snapshot files.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "FLSNAPv1"
//! hdr_len   u32
//! header    hdr_len bytes of JSON (SnapshotHeader)
//! record*   u32 body length, then body:
//!             str example_id, str model_id     (u32 len + UTF-8)
//!             u8  mode                         (0 = train, 1 = infer)
//!             u32 n, n x u32 response token ids
//!             u32 rows, per row: u32 k, k x u32 ids, k x f32 probs
//! ```
//!
//! The residual of each row is not stored; it is recovered as one minus
//! the kept mass on read.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SparseDistribution;
use crate::error::{Error, Result};
use crate::tinylm::TokenId;

const MAGIC: &[u8; 8] = b"FLSNAPv1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Infer,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Train => "train",
            Mode::Infer => "infer",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Mode::Train),
            "infer" => Ok(Mode::Infer),
            other => Err(Error::invalid(format!("unknown mode `{other}`"))),
        }
    }
}

/// Per-position teacher distributions of one model over one supervised
/// sequence (ground truth in train mode, its own generation in infer mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub example_id: String,
    pub model_id: String,
    pub mode: Mode,
    pub response_token_ids: Vec<TokenId>,
    pub rows: Vec<SparseDistribution>,
}

impl SnapshotRecord {
    pub fn key(&self) -> (String, String, Mode) {
        (self.example_id.clone(), self.model_id.clone(), self.mode)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.len() != self.response_token_ids.len() {
            return Err(Error::invalid(format!(
                "record ({}, {}, {}) has {} rows for {} tokens",
                self.example_id,
                self.model_id,
                self.mode,
                self.rows.len(),
                self.response_token_ids.len()
            )));
        }
        self.rows.iter().try_for_each(|r| r.validate(None))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub version: u32,
    /// `model_id -> vocabulary hash` of the models whose rows are stored.
    #[serde(default)]
    pub vocab_hashes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default)]
pub struct SnapshotFilter {
    pub example_id: Option<String>,
    pub model_id: Option<String>,
    pub mode: Option<Mode>,
}

impl SnapshotFilter {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn mode(mode: Mode) -> Self {
        Self {
            mode: Some(mode),
            ..Self::default()
        }
    }

    pub fn matches(&self, r: &SnapshotRecord) -> bool {
        self.example_id.as_ref().is_none_or(|e| *e == r.example_id)
            && self.model_id.as_ref().is_none_or(|m| *m == r.model_id)
            && self.mode.is_none_or(|m| m == r.mode)
    }
}

/// Streams records into a snapshot file. The file appears under its final
/// name only after [`SnapshotWriter::finish`].
pub struct SnapshotWriter {
    path: PathBuf,
    tmp: PathBuf,
    out: BufWriter<File>,
    keys: HashSet<(String, String, Mode)>,
    count: usize,
}

impl SnapshotWriter {
    pub fn create(path: impl AsRef<Path>, header: &SnapshotHeader) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let tmp = path.with_extension("partial");
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut out = BufWriter::new(file);
        let header = SnapshotHeader {
            version: VERSION,
            ..header.clone()
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(12 + json.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        out.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        Ok(Self {
            path,
            tmp,
            out,
            keys: HashSet::new(),
            count: 0,
        })
    }

    pub fn push(&mut self, record: &SnapshotRecord) -> Result<()> {
        record.validate()?;
        if !self.keys.insert(record.key()) {
            return Err(Error::DuplicateSnapshot {
                example_id: record.example_id.clone(),
                model_id: record.model_id.clone(),
                mode: record.mode.to_string(),
            });
        }
        let body = encode_record(record);
        self.out
            .write_all(&(body.len() as u32).to_le_bytes())
            .and_then(|_| self.out.write_all(&body))
            .map_err(|e| Error::io(&self.tmp, e))?;
        self.count += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<usize> {
        self.out.flush().map_err(|e| Error::io(&self.tmp, e))?;
        drop(self.out);
        std::fs::rename(&self.tmp, &self.path).map_err(|e| Error::io(&self.path, e))?;
        Ok(self.count)
    }
}

/// Writes every record and returns how many were written.
pub fn write_snapshots<'a>(
    path: impl AsRef<Path>,
    records: impl IntoIterator<Item = &'a SnapshotRecord>,
    header: &SnapshotHeader,
) -> Result<usize> {
    let path = path.as_ref();
    let mut w = SnapshotWriter::create(path, header)?;
    for r in records {
        if let Err(e) = w.push(r) {
            let _ = std::fs::remove_file(&w.tmp);
            return Err(e);
        }
    }
    w.finish()
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn encode_record(r: &SnapshotRecord) -> Vec<u8> {
    let mut buf = Vec::new();
    put_str(&mut buf, &r.example_id);
    put_str(&mut buf, &r.model_id);
    buf.push(match r.mode {
        Mode::Train => 0,
        Mode::Infer => 1,
    });
    put_u32(&mut buf, r.response_token_ids.len() as u32);
    r.response_token_ids.iter().for_each(|&t| put_u32(&mut buf, t));
    put_u32(&mut buf, r.rows.len() as u32);
    for row in &r.rows {
        put_u32(&mut buf, row.len() as u32);
        row.token_ids().iter().for_each(|&t| put_u32(&mut buf, t));
        for &p in row.probs() {
            // keep strictly positive after narrowing
            let q = (p as f32).max(f32::from_bits(1));
            buf.extend_from_slice(&q.to_le_bytes());
        }
    }
    buf
}

/// Cursor over a record body that reports absolute file offsets.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    base: u64,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::CorruptSnapshot {
            offset: self.base + self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err("record body truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::CorruptSnapshot {
            offset: self.base + at as u64,
            message: "invalid UTF-8 in string".into(),
        })
    }
}

fn decode_record(body: &[u8], base: u64) -> Result<SnapshotRecord> {
    let mut c = Cursor { buf: body, pos: 0, base };
    let example_id = c.string()?;
    let model_id = c.string()?;
    let mode = match c.take(1)?[0] {
        0 => Mode::Train,
        1 => Mode::Infer,
        other => return Err(c.err(format!("unknown mode byte {other}"))),
    };
    let n = c.u32()? as usize;
    let response_token_ids = (0..n).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
    let n_rows = c.u32()? as usize;
    let mut rows = Vec::with_capacity(n_rows.min(body.len()));
    for _ in 0..n_rows {
        let at = c.pos;
        let k = c.u32()? as usize;
        let ids = (0..k).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let mut probs = (0..k).map(|_| c.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
        let mass: f64 = probs.iter().sum();
        let residual = if mass > 1.0 {
            probs.iter_mut().for_each(|p| *p /= mass);
            0.0
        } else {
            1.0 - mass
        };
        let row = SparseDistribution::new(ids, probs, residual).map_err(|e| Error::CorruptSnapshot {
            offset: base + at as u64,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    if c.pos != body.len() {
        return Err(c.err("trailing bytes in record"));
    }
    let record = SnapshotRecord {
        example_id,
        model_id,
        mode,
        response_token_ids,
        rows,
    };
    record.validate().map_err(|e| Error::CorruptSnapshot {
        offset: base,
        message: e.to_string(),
    })?;
    Ok(record)
}

fn read_exact_or_eof(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 => break,
            n => filled += n,
        }
    }
    Ok(filled)
}

/// Reads the header and every record matching `filter`, in file order.
pub fn read_snapshots(path: impl AsRef<Path>, filter: &SnapshotFilter) -> Result<(SnapshotHeader, Vec<SnapshotRecord>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let corrupt = |offset: u64, message: &str| Error::CorruptSnapshot {
        offset,
        message: message.into(),
    };

    let mut magic = [0u8; 8];
    if read_exact_or_eof(&mut r, &mut magic).map_err(io)? != 8 || &magic != MAGIC {
        return Err(corrupt(0, "bad magic"));
    }
    let mut len = [0u8; 4];
    if read_exact_or_eof(&mut r, &mut len).map_err(io)? != 4 {
        return Err(corrupt(8, "truncated header length"));
    }
    let hdr_len = u32::from_le_bytes(len) as usize;
    let mut hdr = vec![0u8; hdr_len];
    if read_exact_or_eof(&mut r, &mut hdr).map_err(io)? != hdr_len {
        return Err(corrupt(12, "truncated header"));
    }
    let header: SnapshotHeader =
        serde_json::from_slice(&hdr).map_err(|e| corrupt(12, &format!("bad header: {e}")))?;
    if header.version != VERSION {
        return Err(corrupt(12, &format!("unsupported version {}", header.version)));
    }

    let mut offset = 12 + hdr_len as u64;
    let mut out = Vec::new();
    let mut keys = HashSet::new();
    loop {
        let got = read_exact_or_eof(&mut r, &mut len).map_err(io)?;
        if got == 0 {
            break;
        }
        if got != 4 {
            return Err(corrupt(offset, "truncated record length"));
        }
        let body_len = u32::from_le_bytes(len) as usize;
        let mut body = vec![0u8; body_len];
        if read_exact_or_eof(&mut r, &mut body).map_err(io)? != body_len {
            return Err(corrupt(offset, "truncated record body"));
        }
        let record = decode_record(&body, offset + 4)?;
        if !keys.insert(record.key()) {
            return Err(corrupt(offset, "duplicate record key"));
        }
        if filter.matches(&record) {
            out.push(record);
        }
        offset += 4 + body_len as u64;
    }
    Ok((header, out))
}

/// Human-readable variant: one JSON record per line, full precision.
pub fn write_snapshots_jsonl<'a>(
    path: impl AsRef<Path>,
    records: impl IntoIterator<Item = &'a SnapshotRecord>,
) -> Result<usize> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut keys = HashSet::new();
    let mut n = 0;
    for r in records {
        r.validate()?;
        if !keys.insert(r.key()) {
            return Err(Error::DuplicateSnapshot {
                example_id: r.example_id.clone(),
                model_id: r.model_id.clone(),
                mode: r.mode.to_string(),
            });
        }
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        n += 1;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(n)
}

pub fn read_snapshots_jsonl(path: impl AsRef<Path>, filter: &SnapshotFilter) -> Result<Vec<SnapshotRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let r: SnapshotRecord = serde_json::from_str(trimmed).map_err(|e| Error::CorruptSnapshot {
                offset,
                message: e.to_string(),
            })?;
            r.validate().map_err(|e| Error::CorruptSnapshot {
                offset,
                message: e.to_string(),
            })?;
            if filter.matches(&r) {
                out.push(r);
            }
        }
        offset += line.len() as u64;
    }
    Ok(out)
}

/// In-memory index of snapshot records by `(example_id, model_id, mode)`.
#[derive(Debug, Clone, Default)]
pub struct SnapshotStore {
    records: HashMap<(String, String, Mode), SnapshotRecord>,
}

impl SnapshotStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: impl IntoIterator<Item = SnapshotRecord>) -> Result<Self> {
        let mut s = Self::new();
        for r in records {
            s.insert(r)?;
        }
        Ok(s)
    }

    pub fn insert(&mut self, record: SnapshotRecord) -> Result<()> {
        record.validate()?;
        let key = record.key();
        if self.records.contains_key(&key) {
            return Err(Error::DuplicateSnapshot {
                example_id: key.0,
                model_id: key.1,
                mode: key.2.to_string(),
            });
        }
        self.records.insert(key, record);
        Ok(())
    }

    pub fn get(&self, example_id: &str, model_id: &str, mode: Mode) -> Option<&SnapshotRecord> {
        self.records
            .get(&(example_id.to_string(), model_id.to_string(), mode))
    }

    pub fn require(&self, example_id: &str, model_id: &str, mode: Mode) -> Result<&SnapshotRecord> {
        self.get(example_id, model_id, mode).ok_or_else(|| Error::MissingSnapshot {
            example_id: example_id.to_string(),
            model_id: model_id.to_string(),
            mode: mode.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records sorted by key, for deterministic serialization.
    pub fn sorted(&self) -> Vec<&SnapshotRecord> {
        let mut v: Vec<_> = self.records.values().collect();
        v.sort_by(|a, b| a.key().cmp(&b.key()));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(ex: &str, model: &str, mode: Mode) -> SnapshotRecord {
        SnapshotRecord {
            example_id: ex.into(),
            model_id: model.into(),
            mode,
            response_token_ids: vec![4, 5],
            rows: vec![
                SparseDistribution::new(vec![4, 1], vec![0.6, 0.3], 0.1).unwrap(),
                SparseDistribution::one_hot(5),
            ],
        }
    }

    #[test]
    fn round_trip_and_filter() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.bin");
        let recs = vec![
            record("e1", "m0", Mode::Train),
            record("e1", "m0", Mode::Infer),
            record("e2", "m1", Mode::Train),
        ];
        assert_eq!(write_snapshots(&p, &recs, &SnapshotHeader::default()).unwrap(), 3);
        let (_, all) = read_snapshots(&p, &SnapshotFilter::all()).unwrap();
        assert_eq!(all.len(), 3);
        for (a, b) in all.iter().zip(&recs) {
            assert_eq!(a.key(), b.key());
            assert_eq!(a.response_token_ids, b.response_token_ids);
        }
        let (_, infer) = read_snapshots(&p, &SnapshotFilter::mode(Mode::Infer)).unwrap();
        assert_eq!(infer.len(), 1);
        assert_eq!(infer[0].mode, Mode::Infer);
    }

    #[test]
    fn duplicate_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.bin");
        let recs = vec![record("e1", "m0", Mode::Train), record("e1", "m0", Mode::Train)];
        assert!(matches!(
            write_snapshots(&p, &recs, &SnapshotHeader::default()),
            Err(Error::DuplicateSnapshot { .. })
        ));
        assert!(!p.exists());
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.bin");
        write_snapshots(&p, &[record("e1", "m0", Mode::Train)], &SnapshotHeader::default()).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        match read_snapshots(&p, &SnapshotFilter::all()) {
            Err(Error::CorruptSnapshot { offset, .. }) => assert!(offset > 12),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(&p, b"garbage").unwrap();
        assert!(matches!(
            read_snapshots(&p, &SnapshotFilter::all()),
            Err(Error::CorruptSnapshot { offset: 0, .. })
        ));
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        let recs = vec![record("e1", "m0", Mode::Train), record("e2", "m0", Mode::Infer)];
        write_snapshots_jsonl(&p, &recs).unwrap();
        assert_eq!(read_snapshots_jsonl(&p, &SnapshotFilter::all()).unwrap(), recs);
    }

    #[test]
    fn store_lookup() {
        let s = SnapshotStore::from_records(vec![record("e1", "m0", Mode::Train)]).unwrap();
        assert!(s.get("e1", "m0", Mode::Train).is_some());
        assert!(matches!(s.require("e1", "m0", Mode::Infer), Err(Error::MissingSnapshot { .. })));
    }
}
