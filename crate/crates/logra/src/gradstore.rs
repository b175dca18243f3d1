//! Append-once, scan-many store of projected per-sample gradients.
//!
//! File layout, little-endian throughout:
//!
//! ```text
//! "LGGS" | version u32
//! layer count u32 | per layer { name len u16 | name | k_i u32 | k_o u32 } | precision u8
//! records: { data_id u64 | payload } x N
//! index:   { data_id u64 | record offset u64 } x N
//! record count u64 | index offset u64
//! ```
//!
//! Records have a fixed size so the reader addresses them arithmetically
//! through a memory map. Labels and the provenance fingerprint live in a JSON
//! sidecar next to the store (`<store>.manifest.json`), which keeps the binary
//! layout fixed.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use logra_core::projection::ProjectionSet;
use logra_core::Matrix;
use memmap2::Mmap;
use serde::{Deserialize, Serialize};

use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};

pub const STORE_MAGIC: &[u8; 4] = b"LGGS";
pub const STORE_VERSION: u32 = 1;
const TRAILER_BYTES: u64 = 16;
const INDEX_ENTRY_BYTES: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    /// The value a stored `v` reads back as.
    pub fn quantize(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }

    fn code(self) -> u8 {
        self.width() as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            4 => Some(Precision::F32),
            8 => Some(Precision::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreLayer {
    pub name: String,
    pub k_in: usize,
    pub k_out: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreSchema {
    pub layers: Vec<StoreLayer>,
    pub precision: Precision,
}

impl StoreSchema {
    pub fn from_projections(set: &ProjectionSet, precision: Precision) -> Self {
        let layers = set
            .pairs()
            .iter()
            .map(|p| StoreLayer {
                name: p.layer_name.clone(),
                k_in: p.k_in(),
                k_out: p.k_out(),
            })
            .collect();
        Self { layers, precision }
    }

    /// Same layer order and projected dimensions as `set`.
    pub fn matches(&self, set: &ProjectionSet) -> bool {
        self.layers.len() == set.pairs().len()
            && self
                .layers
                .iter()
                .zip(set.pairs())
                .all(|(l, p)| l.name == p.layer_name && l.k_in == p.k_in() && l.k_out == p.k_out())
    }

    pub fn payload_len(&self) -> usize {
        self.layers.iter().map(|l| l.k_in * l.k_out).sum()
    }

    pub fn record_bytes(&self) -> u64 {
        8 + (self.payload_len() * self.precision.width()) as u64
    }

    pub fn header_bytes(&self) -> u64 {
        let layers: usize = self.layers.iter().map(|l| 2 + l.name.len() + 8).sum();
        (4 + 4 + 4 + layers + 1) as u64
    }

    /// Exact size of a finalized store holding `records` records.
    pub fn file_size(&self, records: u64) -> u64 {
        self.header_bytes() + records * (self.record_bytes() + INDEX_ENTRY_BYTES) + TRAILER_BYTES
    }

    fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new(STORE_MAGIC, STORE_VERSION);
        e.u32(self.layers.len() as u32);
        for l in &self.layers {
            e.name(&l.name);
            e.u32(l.k_in as u32);
            e.u32(l.k_out as u32);
        }
        e.u8(self.precision.code());
        e.buf
    }

    fn validate(&self) -> Result<()> {
        if self.payload_len() == 0 {
            return Err(Error::Config("store schema has an empty payload".into()));
        }
        for l in &self.layers {
            if l.name.len() > u16::MAX as usize || l.k_in > u32::MAX as usize || l.k_out > u32::MAX as usize {
                return Err(Error::Config(format!("layer {} does not fit the store header", l.name)));
            }
        }
        Ok(())
    }
}

/// One training example's projected gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradRecord {
    pub data_id: u64,
    pub label: Option<String>,
    pub payload: Vec<f64>,
}

impl GradRecord {
    pub fn new(data_id: u64, payload: Vec<f64>) -> Self {
        Self {
            data_id,
            label: None,
            payload,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreManifest {
    pub record_count: u64,
    /// Hex digest of the configuration, checkpoint and projections used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<u64, String>,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn manifest_path(path: &Path) -> PathBuf {
    sibling(path, ".manifest.json")
}

/// Present while a store is being written; left behind if writing failed.
pub fn partial_marker(path: &Path) -> PathBuf {
    sibling(path, ".partial")
}

pub struct StoreWriter {
    path: PathBuf,
    out: BufWriter<File>,
    schema: StoreSchema,
    offset: u64,
    index: Vec<(u64, u64)>,
    seen: HashSet<u64>,
    manifest: StoreManifest,
    scratch: Vec<u8>,
}

impl StoreWriter {
    pub fn create(path: impl AsRef<Path>, schema: StoreSchema) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        schema.validate()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let marker = partial_marker(&path);
        fs::write(&marker, b"store is incomplete\n").map_err(|e| Error::io(&marker, e))?;
        let _ = fs::remove_file(manifest_path(&path));
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = Self {
            path,
            out: BufWriter::with_capacity(1 << 20, file),
            offset: 0,
            index: Vec::new(),
            seen: HashSet::new(),
            manifest: StoreManifest::default(),
            scratch: Vec::new(),
            schema,
        };
        let header = w.schema.encode();
        w.write(&header)?;
        Ok(w)
    }

    pub fn schema(&self) -> &StoreSchema {
        &self.schema
    }

    pub fn set_fingerprint(&mut self, hex: String) {
        self.manifest.fingerprint = Some(hex);
    }

    fn write(&mut self, bytes: &[u8]) -> Result<()> {
        match self.out.write_all(bytes) {
            Ok(()) => {
                self.offset += bytes.len() as u64;
                Ok(())
            }
            Err(e) => Err(self.fail(e)),
        }
    }

    /// Records the failure in the partial-file marker; the marker keeps
    /// readers away from the half-written store.
    fn fail(&self, e: std::io::Error) -> Error {
        let _ = fs::write(
            partial_marker(&self.path),
            format!("write failed after {} records: {e}\n", self.index.len()),
        );
        Error::io(&self.path, e)
    }

    pub fn append(&mut self, record: &GradRecord) -> Result<()> {
        let expected = self.schema.payload_len();
        if record.payload.len() != expected {
            return Err(Error::PayloadLength {
                expected,
                found: record.payload.len(),
            });
        }
        if record.payload.iter().any(|v| !v.is_finite()) {
            return Err(Error::Core(logra_core::Error::NonFinite("gradient record payload")));
        }
        if !self.seen.insert(record.data_id) {
            return Err(Error::DuplicateId(record.data_id));
        }
        let mut buf = std::mem::take(&mut self.scratch);
        buf.clear();
        buf.extend_from_slice(&record.data_id.to_le_bytes());
        match self.schema.precision {
            Precision::F32 => record
                .payload
                .iter()
                .for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
            Precision::F64 => record
                .payload
                .iter()
                .for_each(|&v| buf.extend_from_slice(&v.to_le_bytes())),
        }
        self.index.push((record.data_id, self.offset));
        let res = self.write(&buf);
        self.scratch = buf;
        if res.is_err() {
            self.index.pop();
        } else if let Some(label) = &record.label {
            self.manifest.labels.insert(record.data_id, label.clone());
        }
        res
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Writes the index, trailer and manifest. Returns the record count.
    pub fn finalize(mut self) -> Result<u64> {
        let index_offset = self.offset;
        let mut e = Encoder::default();
        for &(id, off) in &self.index {
            e.u64(id);
            e.u64(off);
        }
        e.u64(self.index.len() as u64);
        e.u64(index_offset);
        self.write(&e.buf)?;
        if let Err(err) = self.out.flush().and_then(|_| self.out.get_ref().sync_all()) {
            return Err(self.fail(err));
        }
        self.manifest.record_count = self.index.len() as u64;
        let manifest = serde_json::to_vec_pretty(&self.manifest)?;
        let mpath = manifest_path(&self.path);
        fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
        let marker = partial_marker(&self.path);
        fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
        Ok(self.index.len() as u64)
    }
}

/// Write a whole store in one go.
pub fn write_store<'a>(
    path: impl AsRef<Path>,
    schema: StoreSchema,
    fingerprint: Option<String>,
    records: impl IntoIterator<Item = &'a GradRecord>,
) -> Result<u64> {
    let mut w = StoreWriter::create(path, schema)?;
    if let Some(fp) = fingerprint {
        w.set_fingerprint(fp);
    }
    for r in records {
        w.append(r)?;
    }
    w.finalize()
}

struct Inner {
    path: PathBuf,
    map: Mmap,
    schema: StoreSchema,
    records_offset: usize,
    record_bytes: usize,
    count: usize,
}

impl Inner {
    fn id_at(&self, i: usize) -> u64 {
        let at = self.records_offset + i * self.record_bytes;
        u64::from_le_bytes(self.map[at..at + 8].try_into().unwrap())
    }

    fn payload_into(&self, i: usize, out: &mut Vec<f64>) {
        let at = self.records_offset + i * self.record_bytes + 8;
        let raw = &self.map[at..at + self.record_bytes - 8];
        match self.schema.precision {
            Precision::F32 => out.extend(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64),
            ),
            Precision::F64 => out.extend(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()))),
        }
    }

    fn batch(&self, start: usize, end: usize) -> Result<(Vec<u64>, Matrix)> {
        let dim = self.schema.payload_len();
        let mut data = Vec::with_capacity((end - start) * dim);
        let ids = (start..end)
            .map(|i| {
                self.payload_into(i, &mut data);
                self.id_at(i)
            })
            .collect();
        let m = Matrix::new(end - start, dim, data)
            .map_err(|e| Error::corrupt(&self.path, format!("records {start}..{end}: {e}")))?;
        Ok((ids, m))
    }
}

/// Read side of a finalized store. Cheap to clone; clones share the mapping.
#[derive(Clone)]
pub struct GradStore {
    inner: Arc<Inner>,
    index: Arc<HashMap<u64, usize>>,
    manifest: Arc<StoreManifest>,
}

impl std::fmt::Debug for GradStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GradStore")
            .field("path", &self.inner.path)
            .field("schema", &self.inner.schema)
            .field("records", &self.inner.count)
            .finish()
    }
}

impl GradStore {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if partial_marker(&path).exists() {
            return Err(Error::corrupt(&path, "store was never finalized (partial marker present)"));
        }
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let len = file.metadata().map_err(|e| Error::io(&path, e))?.len();
        if len < 8 {
            return Err(Error::corrupt(&path, format!("truncated: {len} bytes")));
        }
        // SAFETY: finalized stores are never modified in place; writers always
        // create a fresh file.
        let map = unsafe { Mmap::map(&file) }.map_err(|e| Error::io(&path, e))?;
        let schema = parse_header(&path, &map)?;
        let header = schema.header_bytes();
        if len < header + TRAILER_BYTES {
            return Err(Error::corrupt(&path, format!("truncated: {len} bytes, header alone is {header}")));
        }
        let t = (len - TRAILER_BYTES) as usize;
        let count = u64::from_le_bytes(map[t..t + 8].try_into().unwrap());
        let index_offset = u64::from_le_bytes(map[t + 8..t + 16].try_into().unwrap());
        let record_bytes = schema.record_bytes();
        let expected = count
            .checked_mul(record_bytes + INDEX_ENTRY_BYTES)
            .and_then(|b| b.checked_add(header + TRAILER_BYTES));
        if expected != Some(len) {
            return Err(Error::corrupt(
                &path,
                format!("truncated or corrupt payload: trailer claims {count} records, file has {len} bytes"),
            ));
        }
        if index_offset != header + count * record_bytes {
            return Err(Error::corrupt(&path, format!("index offset {index_offset} is inconsistent")));
        }
        let inner = Inner {
            records_offset: header as usize,
            record_bytes: record_bytes as usize,
            count: count as usize,
            schema,
            map,
            path: path.clone(),
        };
        let mut index = HashMap::with_capacity(inner.count);
        for i in 0..inner.count {
            let at = index_offset as usize + i * INDEX_ENTRY_BYTES as usize;
            let id = u64::from_le_bytes(inner.map[at..at + 8].try_into().unwrap());
            let off = u64::from_le_bytes(inner.map[at + 8..at + 16].try_into().unwrap());
            if off != header + i as u64 * record_bytes || inner.id_at(i) != id {
                return Err(Error::corrupt(&path, format!("index entry {i} does not match record {i}")));
            }
            if index.insert(id, i).is_some() {
                return Err(Error::corrupt(&path, format!("duplicate data id {id} in index")));
            }
        }
        let mpath = manifest_path(&path);
        let manifest = match fs::read(&mpath) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| Error::corrupt(&mpath, format!("unreadable manifest: {e}")))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => StoreManifest {
                record_count: count,
                ..Default::default()
            },
            Err(e) => return Err(Error::io(&mpath, e)),
        };
        Ok(Self {
            inner: Arc::new(inner),
            index: Arc::new(index),
            manifest: Arc::new(manifest),
        })
    }

    pub fn path(&self) -> &Path {
        &self.inner.path
    }

    pub fn schema(&self) -> &StoreSchema {
        &self.inner.schema
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.inner.count
    }

    pub fn is_empty(&self) -> bool {
        self.inner.count == 0
    }

    pub fn dim(&self) -> usize {
        self.inner.schema.payload_len()
    }

    /// Ids in append order.
    pub fn ids(&self) -> Vec<u64> {
        (0..self.len()).map(|i| self.inner.id_at(i)).collect()
    }

    pub fn record_at(&self, i: usize) -> Option<GradRecord> {
        if i >= self.len() {
            return None;
        }
        let mut payload = Vec::with_capacity(self.dim());
        self.inner.payload_into(i, &mut payload);
        let data_id = self.inner.id_at(i);
        Some(GradRecord {
            data_id,
            label: self.manifest.labels.get(&data_id).cloned(),
            payload,
        })
    }

    pub fn get(&self, data_id: u64) -> Result<GradRecord> {
        let &i = self.index.get(&data_id).ok_or(Error::UnknownId(data_id))?;
        Ok(self.record_at(i).expect("index points inside the store"))
    }

    /// Everything as one `records x dim` matrix.
    pub fn read_all(&self) -> Result<(Vec<u64>, Matrix)> {
        self.inner.batch(0, self.len())
    }

    pub fn scan(&self, batch_size: usize) -> Scan {
        self.scan_with(ScanOptions::new(batch_size))
    }

    pub fn scan_with(&self, opts: ScanOptions) -> Scan {
        Scan::new(self.inner.clone(), opts)
    }
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<StoreSchema> {
    let mut d = Decoder::open(path, bytes, STORE_MAGIC, STORE_VERSION)?;
    let n = d.u32()? as usize;
    let mut layers = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let name = d.name()?;
        let k_in = d.u32()? as usize;
        let k_out = d.u32()? as usize;
        layers.push(StoreLayer { name, k_in, k_out });
    }
    let code = d.u8()?;
    let precision = Precision::from_code(code).ok_or_else(|| d.err(format!("unknown precision code {code}")))?;
    let schema = StoreSchema { layers, precision };
    debug_assert_eq!(d.position() as u64, schema.header_bytes());
    if schema.payload_len() == 0 {
        return Err(d.err("schema has an empty payload"));
    }
    Ok(schema)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanOptions {
    pub batch_size: usize,
    /// Read the next batch on a background thread while the current one is consumed.
    pub prefetch: bool,
    /// Extra delay per batch read, standing in for storage latency when the
    /// file is already in the page cache. Used by benchmarks.
    pub read_latency: Option<Duration>,
}

impl ScanOptions {
    pub fn new(batch_size: usize) -> Self {
        Self {
            batch_size,
            prefetch: true,
            read_latency: None,
        }
    }
}

type Batch = Result<(Vec<u64>, Matrix)>;

enum Source {
    Direct { inner: Arc<Inner>, next: usize },
    Prefetched { rx: Option<Receiver<Batch>>, worker: Option<JoinHandle<()>> },
}

/// Batches of `(ids, batch x dim)` in append order; the last one may be short.
pub struct Scan {
    source: Source,
    batch_size: usize,
    latency: Option<Duration>,
}

fn read_batch(inner: &Inner, start: usize, batch_size: usize, latency: Option<Duration>) -> Batch {
    if let Some(d) = latency {
        thread::sleep(d);
    }
    inner.batch(start, (start + batch_size).min(inner.count))
}

impl Scan {
    fn new(inner: Arc<Inner>, opts: ScanOptions) -> Self {
        let batch_size = opts.batch_size.max(1);
        let latency = opts.read_latency;
        let source = if opts.prefetch {
            // A rendezvous channel: the worker prepares exactly one batch
            // beyond the one being consumed, then waits for the hand-off.
            let (tx, rx) = mpsc::sync_channel(0);
            let worker = thread::spawn(move || {
                let mut start = 0;
                while start < inner.count {
                    let b = read_batch(&inner, start, batch_size, latency);
                    let failed = b.is_err();
                    if tx.send(b).is_err() || failed {
                        return;
                    }
                    start += batch_size;
                }
            });
            Source::Prefetched {
                rx: Some(rx),
                worker: Some(worker),
            }
        } else {
            Source::Direct { inner, next: 0 }
        };
        Self {
            source,
            batch_size,
            latency,
        }
    }
}

impl Iterator for Scan {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        match &mut self.source {
            Source::Direct { inner, next } => {
                if *next >= inner.count {
                    return None;
                }
                let b = read_batch(inner, *next, self.batch_size, self.latency);
                *next += self.batch_size;
                Some(b)
            }
            Source::Prefetched { rx, .. } => rx.as_ref()?.recv().ok(),
        }
    }
}

impl Drop for Scan {
    fn drop(&mut self) {
        if let Source::Prefetched { rx, worker } = &mut self.source {
            drop(rx.take());
            if let Some(w) = worker.take() {
                let _ = w.join();
            }
        }
    }
}
