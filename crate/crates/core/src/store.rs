//! Checkpoint containers: an 8-byte little-endian header length, a JSON header
//! mapping tensor names to `{dtype, shape, data_offsets}`, then the raw
//! little-endian tensor bytes.
//!
//! Writers always emit tensors in lexicographic name order with contiguous,
//! ascending offsets, so serializing the same [`Checkpoint`] twice yields
//! identical bytes. [`LazyCheckpoint`] parses only the header and reads one
//! tensor at a time with positional reads, which makes it shareable across
//! worker threads.

use std::borrow::Cow;
use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use half::{bf16, f16};
use serde_json::Value;

use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";
const HEADER_ALIGN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dtype {
    F32,
    F16,
    BF16,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "F32" => Ok(Dtype::F32),
            "F16" => Ok(Dtype::F16),
            "BF16" => Ok(Dtype::BF16),
            other => Err(Error::UnsupportedDtype(other.to_string())),
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn element_count(name: &str, shape: &[usize]) -> Result<usize> {
    shape.iter().try_fold(1usize, |acc, &d| {
        if d == 0 {
            return Err(Error::InvalidTensor {
                name: name.to_string(),
                reason: format!("zero-sized dimension in shape {shape:?}"),
            });
        }
        acc.checked_mul(d).ok_or_else(|| Error::InvalidTensor {
            name: name.to_string(),
            reason: format!("shape {shape:?} overflows"),
        })
    })
}

fn check_name(name: &str) -> Result<()> {
    let reason = if name.is_empty() {
        "empty name"
    } else if name.contains('\0') {
        "name contains NUL"
    } else if name == METADATA_KEY {
        "name is reserved for metadata"
    } else {
        return Ok(());
    };
    Err(Error::InvalidTensor {
        name: name.to_string(),
        reason: reason.to_string(),
    })
}

/// One named tensor with its raw little-endian, row-major payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorRecord {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl TensorRecord {
    pub fn new(
        name: impl Into<String>,
        dtype: Dtype,
        shape: Vec<usize>,
        data: Vec<u8>,
    ) -> Result<Self> {
        let name = name.into();
        check_name(&name)?;
        let expected = element_count(&name, &shape)? * dtype.width();
        if data.len() != expected {
            return Err(Error::InvalidTensor {
                name,
                reason: format!(
                    "{} data bytes, shape and dtype require {expected}",
                    data.len()
                ),
            });
        }
        Ok(Self {
            name,
            dtype,
            shape,
            data,
        })
    }

    /// Encodes `values` into `dtype`, rounding to nearest-even.
    pub fn from_f64(
        name: impl Into<String>,
        dtype: Dtype,
        shape: Vec<usize>,
        values: &[f64],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(values.len() * dtype.width());
        match dtype {
            Dtype::F32 => values
                .iter()
                .for_each(|&v| data.extend_from_slice(&(v as f32).to_le_bytes())),
            Dtype::F16 => values
                .iter()
                .for_each(|&v| data.extend_from_slice(&f16::from_f64(v).to_le_bytes())),
            Dtype::BF16 => values
                .iter()
                .for_each(|&v| data.extend_from_slice(&bf16::from_f64(v).to_le_bytes())),
        }
        Self::new(name, dtype, shape, data)
    }

    pub fn from_f32(name: impl Into<String>, shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::new(name, Dtype::F32, shape, data)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self.dtype {
            Dtype::F32 => self
                .data
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect(),
            Dtype::F16 => self
                .data
                .chunks_exact(2)
                .map(|b| f16::from_le_bytes([b[0], b[1]]).to_f64())
                .collect(),
            Dtype::BF16 => self
                .data
                .chunks_exact(2)
                .map(|b| bf16::from_le_bytes([b[0], b[1]]).to_f64())
                .collect(),
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        match self.dtype {
            Dtype::F32 => self
                .data
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
            _ => self.to_f64().into_iter().map(|v| v as f32).collect(),
        }
    }
}

/// Ordered name -> tensor map plus optional string metadata.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Checkpoint {
    records: BTreeMap<String, TensorRecord>,
    metadata: Option<BTreeMap<String, String>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a record; names must be unique.
    pub fn insert(&mut self, record: TensorRecord) -> Result<()> {
        if self.records.contains_key(record.name()) {
            return Err(Error::InvalidTensor {
                name: record.name.clone(),
                reason: "duplicate tensor name".to_string(),
            });
        }
        self.records.insert(record.name.clone(), record);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.records.get(name)
    }

    /// Records in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = &TensorRecord> {
        self.records.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn metadata(&self) -> Option<&BTreeMap<String, String>> {
        self.metadata.as_ref()
    }

    pub fn set_metadata(&mut self, metadata: Option<BTreeMap<String, String>>) {
        self.metadata = metadata;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

/// Anything tensors can be pulled from by name: an in-memory [`Checkpoint`]
/// or a [`LazyCheckpoint`] backed by a file.
pub trait TensorSource: Sync {
    /// Tensor names in lexicographic order.
    fn tensor_names(&self) -> Vec<String>;
    fn tensor_info(&self, name: &str) -> Option<TensorInfo>;
    fn load(&self, name: &str) -> Result<Cow<'_, TensorRecord>>;
    fn metadata(&self) -> Option<&BTreeMap<String, String>>;
}

impl TensorSource for Checkpoint {
    fn tensor_names(&self) -> Vec<String> {
        self.records.keys().cloned().collect()
    }

    fn tensor_info(&self, name: &str) -> Option<TensorInfo> {
        self.records.get(name).map(|r| TensorInfo {
            dtype: r.dtype,
            shape: r.shape.clone(),
        })
    }

    fn load(&self, name: &str) -> Result<Cow<'_, TensorRecord>> {
        self.records
            .get(name)
            .map(Cow::Borrowed)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    fn metadata(&self) -> Option<&BTreeMap<String, String>> {
        self.metadata.as_ref()
    }
}

#[derive(Debug, Clone)]
struct HeaderEntry {
    dtype: Dtype,
    shape: Vec<usize>,
    begin: u64,
    end: u64,
}

#[derive(Debug)]
struct Header {
    entries: BTreeMap<String, HeaderEntry>,
    metadata: Option<BTreeMap<String, String>>,
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedHeader(msg.into())
}

fn parse_entry(name: &str, value: &Value, data_len: u64) -> Result<HeaderEntry> {
    let obj = value
        .as_object()
        .ok_or_else(|| malformed(format!("entry `{name}` is not an object")))?;
    if let Some(key) = obj
        .keys()
        .find(|k| !matches!(k.as_str(), "dtype" | "shape" | "data_offsets"))
    {
        return Err(malformed(format!(
            "entry `{name}` has unknown field `{key}`"
        )));
    }
    let dtype = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed(format!("entry `{name}` lacks a string dtype")))?;
    let dtype = Dtype::parse(dtype)?;
    let as_u64_list = |field: &str| -> Result<Vec<u64>> {
        obj.get(field)
            .and_then(Value::as_array)
            .ok_or_else(|| malformed(format!("entry `{name}` lacks `{field}`")))?
            .iter()
            .map(|v| {
                v.as_u64().ok_or_else(|| {
                    malformed(format!("entry `{name}` has a non-integer in `{field}`"))
                })
            })
            .collect()
    };
    let shape = as_u64_list("shape")?
        .into_iter()
        .map(|d| {
            usize::try_from(d).map_err(|_| malformed(format!("entry `{name}` dimension too large")))
        })
        .collect::<Result<Vec<_>>>()?;
    let offsets = as_u64_list("data_offsets")?;
    let [begin, end] = offsets[..] else {
        return Err(malformed(format!(
            "entry `{name}` needs exactly two data_offsets"
        )));
    };
    if begin > end {
        return Err(malformed(format!("entry `{name}` has begin > end")));
    }
    let numel = element_count(name, &shape).map_err(|e| malformed(e.to_string()))?;
    let want = (numel as u64).checked_mul(dtype.width() as u64);
    if want != Some(end - begin) {
        return Err(malformed(format!(
            "entry `{name}` spans {} bytes but shape {shape:?} of {dtype} needs {}",
            end - begin,
            numel * dtype.width()
        )));
    }
    if end > data_len {
        return Err(Error::TruncatedFile(format!(
            "tensor `{name}` ends at byte {end} but only {data_len} data bytes are present"
        )));
    }
    Ok(HeaderEntry {
        dtype,
        shape,
        begin,
        end,
    })
}

fn parse_header(json: &[u8], data_len: u64) -> Result<Header> {
    let value: Value =
        serde_json::from_slice(json).map_err(|e| malformed(format!("invalid JSON: {e}")))?;
    let Value::Object(map) = value else {
        return Err(malformed("header is not a JSON object"));
    };
    let mut entries = BTreeMap::new();
    let mut metadata = None;
    for (name, v) in &map {
        if name == METADATA_KEY {
            let obj = v
                .as_object()
                .ok_or_else(|| malformed("__metadata__ is not an object"))?;
            let md = obj
                .iter()
                .map(|(k, v)| {
                    v.as_str()
                        .map(|s| (k.clone(), s.to_string()))
                        .ok_or_else(|| {
                            malformed(format!("metadata value for `{k}` is not a string"))
                        })
                })
                .collect::<Result<BTreeMap<_, _>>>()?;
            metadata = Some(md);
            continue;
        }
        check_name(name).map_err(|e| malformed(e.to_string()))?;
        entries.insert(name.clone(), parse_entry(name, v, data_len)?);
    }

    let mut spans: Vec<(&str, u64, u64)> = entries
        .iter()
        .map(|(n, e)| (n.as_str(), e.begin, e.end))
        .collect();
    spans.sort_by_key(|&(n, b, _)| (b, n));
    for pair in spans.windows(2) {
        let (a, _, a_end) = pair[0];
        let (b, b_begin, _) = pair[1];
        if b_begin < a_end {
            return Err(malformed(format!("data of `{a}` and `{b}` overlap")));
        }
    }
    Ok(Header { entries, metadata })
}

/// Splits a container into (header JSON, data section) after checking sizes.
fn split_container(bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    if bytes.len() < 8 {
        return Err(Error::TruncatedFile(format!(
            "{} bytes is shorter than the 8-byte length prefix",
            bytes.len()
        )));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let rest = &bytes[8..];
    if n > rest.len() as u64 {
        return Err(Error::TruncatedFile(format!(
            "header declares {n} bytes but only {} follow",
            rest.len()
        )));
    }
    Ok(rest.split_at(n as usize))
}

/// Parses a complete container held in memory.
pub fn deserialize(bytes: &[u8]) -> Result<Checkpoint> {
    let (json, data) = split_container(bytes)?;
    let header = parse_header(json, data.len() as u64)?;
    let mut records = BTreeMap::new();
    for (name, e) in header.entries {
        let payload = data[e.begin as usize..e.end as usize].to_vec();
        let rec = TensorRecord::new(name.clone(), e.dtype, e.shape, payload)?;
        records.insert(name, rec);
    }
    Ok(Checkpoint {
        records,
        metadata: header.metadata,
    })
}

fn encode_header<'a>(
    entries: impl IntoIterator<Item = (&'a str, Dtype, &'a [usize])>,
    metadata: Option<&BTreeMap<String, String>>,
) -> Vec<u8> {
    let mut fields = Vec::new();
    if let Some(md) = metadata {
        fields.push(format!(
            "\"{METADATA_KEY}\":{}",
            serde_json::to_string(md).expect("string map serializes")
        ));
    }
    let mut offset = 0usize;
    for (name, dtype, shape) in entries {
        let len = shape.iter().product::<usize>() * dtype.width();
        fields.push(format!(
            "{}:{{\"dtype\":\"{dtype}\",\"shape\":{},\"data_offsets\":[{offset},{}]}}",
            serde_json::to_string(name).expect("string serializes"),
            serde_json::to_string(shape).expect("shape serializes"),
            offset + len
        ));
        offset += len;
    }
    let mut header = format!("{{{}}}", fields.join(",")).into_bytes();
    let padded = header.len().div_ceil(HEADER_ALIGN) * HEADER_ALIGN;
    header.resize(padded, b' ');
    let mut out = Vec::with_capacity(8 + header.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out
}

/// Serializes a checkpoint to container bytes.
pub fn serialize(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = encode_header(
        ckpt.iter().map(|r| (r.name(), r.dtype, r.shape.as_slice())),
        ckpt.metadata.as_ref(),
    );
    for rec in ckpt.iter() {
        out.extend_from_slice(&rec.data);
    }
    out
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    deserialize(&bytes)
}

/// Writes atomically: the destination only appears once the file is complete.
pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let manifest: Vec<_> = ckpt
        .iter()
        .map(|r| (r.name.clone(), r.dtype, r.shape.clone()))
        .collect();
    let mut writer = CheckpointWriter::create(path, &manifest, ckpt.metadata.as_ref())?;
    for rec in ckpt.iter() {
        writer.write_tensor(rec)?;
    }
    writer.finish()
}

/// Streaming single-writer. The header is emitted up front from the manifest,
/// then tensors must be supplied in lexicographic name order. Nothing is
/// visible at the destination until [`CheckpointWriter::finish`] succeeds;
/// dropping the writer early discards the temporary file.
pub struct CheckpointWriter {
    dest: PathBuf,
    out: BufWriter<tempfile::NamedTempFile>,
    pending: VecDeque<(String, Dtype, Vec<usize>)>,
}

impl CheckpointWriter {
    pub fn create(
        path: impl AsRef<Path>,
        manifest: &[(String, Dtype, Vec<usize>)],
        metadata: Option<&BTreeMap<String, String>>,
    ) -> Result<Self> {
        let dest = path.as_ref().to_path_buf();
        let mut sorted = manifest.to_vec();
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        for pair in sorted.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::InvalidTensor {
                    name: pair[0].0.clone(),
                    reason: "duplicate tensor name".to_string(),
                });
            }
        }
        for (name, _, shape) in &sorted {
            check_name(name)?;
            element_count(name, shape)?;
        }
        let parent = match dest.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let tmp = tempfile::Builder::new()
            .prefix(".resm-partial-")
            .tempfile_in(&parent)
            .map_err(|e| Error::io(&parent, e))?;
        let mut out = BufWriter::new(tmp);
        let header = encode_header(
            sorted
                .iter()
                .map(|(n, d, s)| (n.as_str(), *d, s.as_slice())),
            metadata,
        );
        out.write_all(&header).map_err(|e| Error::io(&dest, e))?;
        Ok(Self {
            dest,
            out,
            pending: sorted.into(),
        })
    }

    pub fn write_tensor(&mut self, rec: &TensorRecord) -> Result<()> {
        let Some((name, dtype, shape)) = self.pending.front() else {
            return Err(Error::InvalidTensor {
                name: rec.name.clone(),
                reason: "not in the writer manifest".to_string(),
            });
        };
        if name != &rec.name || *dtype != rec.dtype || shape != &rec.shape {
            return Err(Error::InvalidTensor {
                name: rec.name.clone(),
                reason: format!("expected `{name}` {dtype} {shape:?} next"),
            });
        }
        self.out
            .write_all(&rec.data)
            .map_err(|e| Error::io(&self.dest, e))?;
        self.pending.pop_front();
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        if let Some((name, _, _)) = self.pending.front() {
            return Err(Error::MissingTensor(name.clone()));
        }
        let dest = self.dest;
        let tmp = self
            .out
            .into_inner()
            .map_err(|e| Error::io(&dest, e.into_error()))?;
        tmp.as_file().sync_all().map_err(|e| Error::io(&dest, e))?;
        tmp.persist(&dest).map_err(|e| Error::io(&dest, e.error))?;
        Ok(())
    }
}

/// Header-only view of a container file. Each [`TensorSource::load`] reads
/// exactly one tensor's bytes; concurrent loads from many threads are safe.
pub struct LazyCheckpoint {
    path: PathBuf,
    file: File,
    data_start: u64,
    header: Header,
    bytes_read: AtomicU64,
}

impl LazyCheckpoint {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let file_len = file.metadata().map_err(|e| Error::io(&path, e))?.len();
        let mut prefix = [0u8; 8];
        if file_len < 8 {
            return Err(Error::TruncatedFile(format!(
                "{file_len} bytes is shorter than the 8-byte length prefix"
            )));
        }
        file.read_exact(&mut prefix)
            .map_err(|e| Error::io(&path, e))?;
        let n = u64::from_le_bytes(prefix);
        if n > file_len - 8 {
            return Err(Error::TruncatedFile(format!(
                "header declares {n} bytes but only {} follow",
                file_len - 8
            )));
        }
        let mut json = vec![0u8; n as usize];
        file.read_exact(&mut json)
            .map_err(|e| Error::io(&path, e))?;
        let data_start = 8 + n;
        let header = parse_header(&json, file_len - data_start)?;
        Ok(Self {
            path,
            file,
            data_start,
            header,
            bytes_read: AtomicU64::new(0),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Total tensor payload bytes read so far.
    pub fn bytes_read(&self) -> u64 {
        self.bytes_read.load(Ordering::Relaxed)
    }

    #[cfg(unix)]
    fn read_at(&self, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
        use std::os::unix::fs::FileExt;
        self.file.read_exact_at(buf, offset)
    }

    #[cfg(not(unix))]
    fn read_at(&self, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
        use std::io::{Seek, SeekFrom};
        let _ = &self.file;
        let mut f = File::open(&self.path)?;
        f.seek(SeekFrom::Start(offset))?;
        f.read_exact(buf)
    }
}

impl TensorSource for LazyCheckpoint {
    fn tensor_names(&self) -> Vec<String> {
        self.header.entries.keys().cloned().collect()
    }

    fn tensor_info(&self, name: &str) -> Option<TensorInfo> {
        self.header.entries.get(name).map(|e| TensorInfo {
            dtype: e.dtype,
            shape: e.shape.clone(),
        })
    }

    fn load(&self, name: &str) -> Result<Cow<'_, TensorRecord>> {
        let e = self
            .header
            .entries
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let mut buf = vec![0u8; (e.end - e.begin) as usize];
        self.read_at(&mut buf, self.data_start + e.begin)
            .map_err(|err| Error::io(&self.path, err))?;
        self.bytes_read
            .fetch_add(buf.len() as u64, Ordering::Relaxed);
        Ok(Cow::Owned(TensorRecord::new(
            name,
            e.dtype,
            e.shape.clone(),
            buf,
        )?))
    }

    fn metadata(&self) -> Option<&BTreeMap<String, String>> {
        self.header.metadata.as_ref()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    /// Rank 0, 1 or 2.
    pub mergeable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerManifest {
    pub entries: Vec<ManifestEntry>,
}

/// Checks that every source has the same tensor names, shapes and dtypes and
/// returns the shared manifest in lexicographic order.
pub fn validate_compat(sources: &[&dyn TensorSource]) -> Result<LayerManifest> {
    if sources.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "compatibility check needs at least 2 checkpoints, got {}",
            sources.len()
        )));
    }
    let reference = sources[0];
    let names = reference.tensor_names();
    for other in &sources[1..] {
        let other_names = other.tensor_names();
        if let Some(missing) = names.iter().find(|n| other.tensor_info(n).is_none()) {
            return Err(Error::MissingTensor(missing.clone()));
        }
        if let Some(extra) = other_names
            .iter()
            .find(|n| reference.tensor_info(n).is_none())
        {
            return Err(Error::MissingTensor(extra.clone()));
        }
    }
    let mut entries = Vec::with_capacity(names.len());
    for name in names {
        let info = reference.tensor_info(&name).expect("listed name has info");
        for other in &sources[1..] {
            let o = other.tensor_info(&name).expect("presence checked above");
            if o.shape != info.shape {
                return Err(Error::ShapeMismatch(format!(
                    "`{name}`: {:?} vs {:?}",
                    info.shape, o.shape
                )));
            }
            if o.dtype != info.dtype {
                return Err(Error::DtypeMismatch(name.clone()));
            }
        }
        entries.push(ManifestEntry {
            mergeable: info.shape.len() <= 2,
            name,
            shape: info.shape,
            dtype: info.dtype,
        });
    }
    Ok(LayerManifest { entries })
}
