//! Single-file tensor container IO and flat top-k selection.
//!
//! The container layout is the common "8-byte header length, JSON header,
//! raw little-endian data" format. Writing is canonical: tensors are stored
//! in lexicographic name order with contiguous offsets, the header has sorted
//! keys and is space-padded to an 8-byte boundary, so equal maps always
//! produce equal bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";

/// Element type of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    U8,
}

impl DType {
    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::U8 => "U8",
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "F32" => Some(DType::F32),
            "U8" => Some(DType::U8),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::U8(_) => DType::U8,
        }
    }
}

/// A dense row-major tensor.
#[derive(Debug, Clone)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: TensorData,
}

// Bitwise equality so NaN payloads and signed zeros survive round-trip checks.
impl PartialEq for DenseTensor {
    fn eq(&self, other: &Self) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::U8(a), TensorData::U8(b)) => a == b,
            _ => false,
        }
    }
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                name: String::from("<tensor>"),
                detail: format!(
                    "shape {shape:?} holds {expected} values, buffer has {}",
                    data.len()
                ),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(shape, TensorData::U8(data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            TensorData::U8(_) => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Some(v),
            TensorData::F32(_) => None,
        }
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    fn byte_len(&self) -> usize {
        self.len() * self.dtype().size()
    }
}

/// Named tensors plus free-form string metadata, iterated by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorMap {
    entries: BTreeMap<String, DenseTensor>,
    metadata: BTreeMap<String, String>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: DenseTensor) -> Option<DenseTensor> {
        self.entries.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&DenseTensor> {
        self.entries.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<DenseTensor> {
        self.entries.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DenseTensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }
}

fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() || name == METADATA_KEY || name.chars().any(char::is_control) {
        return Err(Error::InvalidName(name.to_string()));
    }
    Ok(())
}

/// Serializes a map into canonical container bytes.
pub fn encode_container(tm: &TensorMap) -> Result<Vec<u8>> {
    let header = canonical_header(tm)?;
    let data_len: usize = tm.entries.values().map(DenseTensor::byte_len).sum();
    let mut out = Vec::with_capacity(8 + header.len() + data_len);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for tensor in tm.entries.values() {
        append_tensor_bytes(&mut out, tensor);
    }
    Ok(out)
}

fn canonical_header(tm: &TensorMap) -> Result<Vec<u8>> {
    let mut header = Map::new();
    let mut offset = 0usize;
    for (name, tensor) in &tm.entries {
        validate_name(name)?;
        let end = offset + tensor.byte_len();
        header.insert(
            name.clone(),
            json!({
                "dtype": tensor.dtype().as_str(),
                "shape": tensor.shape,
                "data_offsets": [offset, end],
            }),
        );
        offset = end;
    }
    if !tm.metadata.is_empty() {
        for key in tm.metadata.keys() {
            if key.chars().any(char::is_control) {
                return Err(Error::InvalidName(key.clone()));
            }
        }
        header.insert(METADATA_KEY.to_string(), json!(tm.metadata));
    }
    let mut bytes = serde_json::to_vec(&Value::Object(header))
        .map_err(|e| Error::Format(format!("header encoding failed: {e}")))?;
    while bytes.len() % 8 != 0 {
        bytes.push(b' ');
    }
    Ok(bytes)
}

fn append_tensor_bytes(out: &mut Vec<u8>, tensor: &DenseTensor) {
    match &tensor.data {
        TensorData::F32(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        TensorData::U8(v) => out.extend_from_slice(v),
    }
}

/// Writes `tm` to `path` in canonical layout.
pub fn write_container(tm: &TensorMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = canonical_header(tm)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::with_capacity(1 << 20, file);
    let io = |e| Error::io(path, e);
    w.write_all(&(header.len() as u64).to_le_bytes())
        .map_err(io)?;
    w.write_all(&header).map_err(io)?;
    let mut chunk = Vec::with_capacity(1 << 16);
    for tensor in tm.entries.values() {
        match &tensor.data {
            TensorData::F32(v) => {
                for block in v.chunks(1 << 14) {
                    chunk.clear();
                    for x in block {
                        chunk.extend_from_slice(&x.to_le_bytes());
                    }
                    w.write_all(&chunk).map_err(io)?;
                }
            }
            TensorData::U8(v) => w.write_all(v).map_err(io)?,
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

struct HeaderEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    begin: usize,
    end: usize,
}

fn parse_header(raw: &[u8]) -> Result<(Vec<HeaderEntry>, BTreeMap<String, String>)> {
    let text = std::str::from_utf8(raw).map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let value: Value =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("header JSON: {e}")))?;
    let Value::Object(obj) = value else {
        return Err(Error::Format("header is not a JSON object".into()));
    };
    let mut entries = Vec::with_capacity(obj.len());
    let mut metadata = BTreeMap::new();
    for (name, spec) in obj {
        if name == METADATA_KEY {
            let Value::Object(meta) = spec else {
                return Err(Error::Format("__metadata__ is not an object".into()));
            };
            for (k, v) in meta {
                let Value::String(s) = v else {
                    return Err(Error::Format(format!(
                        "metadata value for '{k}' is not a string"
                    )));
                };
                metadata.insert(k, s);
            }
            continue;
        }
        validate_name(&name)?;
        let bad = |what: &str| Error::Format(format!("tensor '{name}': {what}"));
        let dtype_str = spec
            .get("dtype")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("missing dtype"))?;
        let dtype = DType::parse(dtype_str)
            .ok_or_else(|| bad(&format!("unsupported dtype {dtype_str}")))?;
        let shape = spec
            .get("shape")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("missing shape"))?
            .iter()
            .map(|d| d.as_u64().map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad("shape entries must be nonnegative integers"))?;
        let offsets = spec
            .get("data_offsets")
            .and_then(Value::as_array)
            .filter(|a| a.len() == 2)
            .ok_or_else(|| bad("data_offsets must be [begin, end]"))?;
        let begin = offsets[0].as_u64().ok_or_else(|| bad("bad begin offset"))? as usize;
        let end = offsets[1].as_u64().ok_or_else(|| bad("bad end offset"))? as usize;
        if end < begin {
            return Err(bad("end offset precedes begin"));
        }
        let expected = shape
            .iter()
            .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad("shape overflows"))?;
        if expected != end - begin {
            return Err(Error::SizeMismatch {
                name,
                expected,
                actual: end - begin,
            });
        }
        entries.push(HeaderEntry {
            name,
            dtype,
            shape,
            begin,
            end,
        });
    }
    entries.sort_by_key(|e| (e.begin, e.end));
    for pair in entries.windows(2) {
        if pair[1].begin < pair[0].end {
            return Err(Error::Format(format!(
                "offset overlap between '{}' and '{}'",
                pair[0].name, pair[1].name
            )));
        }
    }
    Ok((entries, metadata))
}

fn decode(entry: &HeaderEntry, bytes: &[u8]) -> DenseTensor {
    let data = match entry.dtype {
        DType::F32 => TensorData::F32(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        DType::U8 => TensorData::U8(bytes.to_vec()),
    };
    DenseTensor {
        shape: entry.shape.clone(),
        data,
    }
}

fn check_bounds(entries: &[HeaderEntry], data_len: usize) -> Result<()> {
    if let Some(last) = entries.iter().map(|e| e.end).max() {
        if last > data_len {
            return Err(Error::Truncated(format!(
                "tensor data ends at {last} but only {data_len} bytes follow the header"
            )));
        }
    }
    Ok(())
}

/// Decodes a container held in memory.
pub fn decode_container(bytes: &[u8]) -> Result<TensorMap> {
    if bytes.len() < 8 {
        return Err(Error::Truncated("missing header length".into()));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let header_end = 8usize
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Truncated(format!("header length {n} exceeds file")))?;
    let (entries, metadata) = parse_header(&bytes[8..header_end])?;
    let data = &bytes[header_end..];
    check_bounds(&entries, data.len())?;
    let mut tm = TensorMap {
        entries: BTreeMap::new(),
        metadata,
    };
    for e in &entries {
        tm.entries
            .insert(e.name.clone(), decode(e, &data[e.begin..e.end]));
    }
    Ok(tm)
}

/// Reads a container from disk, one tensor at a time.
pub fn read_container(path: impl AsRef<Path>) -> Result<TensorMap> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let file = File::open(path).map_err(io)?;
    let file_len = file.metadata().map_err(io)?.len() as usize;
    let mut r = BufReader::with_capacity(1 << 20, file);
    if file_len < 8 {
        return Err(Error::Truncated("missing header length".into()));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes).map_err(io)?;
    let n = u64::from_le_bytes(len_bytes) as usize;
    if n > file_len - 8 {
        return Err(Error::Truncated(format!("header length {n} exceeds file")));
    }
    let mut header = vec![0u8; n];
    r.read_exact(&mut header).map_err(io)?;
    let (entries, metadata) = parse_header(&header)?;
    let data_start = 8 + n;
    check_bounds(&entries, file_len - data_start)?;

    let mut tm = TensorMap {
        entries: BTreeMap::new(),
        metadata,
    };
    let mut buf = Vec::new();
    for e in &entries {
        r.seek(SeekFrom::Start((data_start + e.begin) as u64))
            .map_err(io)?;
        buf.resize(e.end - e.begin, 0);
        r.read_exact(&mut buf).map_err(io)?;
        tm.entries.insert(e.name.clone(), decode(e, &buf));
    }
    Ok(tm)
}

/// Outcome of a flat top-k selection.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// Selected flat indices in ascending order.
    pub kept_indices: Vec<usize>,
    /// Smallest kept value; `+inf` when nothing is kept.
    pub threshold_value: f32,
    /// How many entries of the whole input equal the threshold.
    pub tie_count_at_threshold: usize,
}

/// Where a descending top-k cut falls in a flat sequence of values.
///
/// Everything strictly above `threshold` is kept; among entries equal to
/// `threshold` the first `ties_taken` in scan order are kept. Scanning the
/// same sequence with [`TopkCut::cursor`] reproduces the selection without
/// materializing indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopkCut {
    pub threshold: f32,
    pub above: usize,
    pub ties_taken: usize,
    pub ties_total: usize,
}

impl TopkCut {
    /// Computes the cut for the top `k` of `scratch`, which is reordered.
    pub fn from_scratch(scratch: &mut [f32], k: usize) -> Result<Self> {
        let n = scratch.len();
        if k > n {
            return Err(Error::KTooLarge { k, len: n });
        }
        if let Some(bad) = scratch.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("selection input at {bad}")));
        }
        if k == 0 {
            return Ok(Self {
                threshold: f32::INFINITY,
                above: 0,
                ties_taken: 0,
                ties_total: 0,
            });
        }
        let (_, kth, _) = scratch.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
        let threshold = *kth;
        let mut above = 0;
        let mut ties_total = 0;
        for &v in scratch.iter() {
            if v > threshold {
                above += 1;
            } else if v == threshold {
                ties_total += 1;
            }
        }
        Ok(Self {
            threshold,
            above,
            ties_taken: k - above,
            ties_total,
        })
    }

    pub fn compute(values: &[f32], k: usize) -> Result<Self> {
        let mut scratch = values.to_vec();
        Self::from_scratch(&mut scratch, k)
    }

    pub fn kept(&self) -> usize {
        self.above + self.ties_taken
    }

    pub fn cursor(&self) -> TopkCursor {
        TopkCursor {
            threshold: self.threshold,
            ties_left: self.ties_taken,
        }
    }
}

/// Replays a [`TopkCut`] over values in their original scan order.
#[derive(Debug, Clone)]
pub struct TopkCursor {
    threshold: f32,
    ties_left: usize,
}

impl TopkCursor {
    #[inline]
    pub fn keep(&mut self, v: f32) -> bool {
        if v > self.threshold {
            true
        } else if v == self.threshold && self.ties_left > 0 {
            self.ties_left -= 1;
            true
        } else {
            false
        }
    }
}

/// Selects the `k` largest values, breaking ties by ascending index.
pub fn select_topk(values: &[f32], k: usize) -> Result<SelectionResult> {
    let cut = TopkCut::compute(values, k)?;
    let mut cursor = cut.cursor();
    let kept_indices: Vec<usize> = values
        .iter()
        .enumerate()
        .filter_map(|(i, &v)| cursor.keep(v).then_some(i))
        .collect();
    debug_assert_eq!(kept_indices.len(), k);
    Ok(SelectionResult {
        kept_indices,
        threshold_value: cut.threshold,
        tie_count_at_threshold: cut.ties_total,
    })
}

/// Selects the `k` smallest values, breaking ties by ascending index.
pub fn select_bottomk(values: &[f32], k: usize) -> Result<SelectionResult> {
    let negated: Vec<f32> = values.iter().map(|v| -v).collect();
    let mut sel = select_topk(&negated, k)?;
    sel.threshold_value = -sel.threshold_value;
    Ok(sel)
}
