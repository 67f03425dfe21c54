//! Single-file tensor archives: an 8-byte little-endian header length, a JSON
//! header, then the raw little-endian data region.
//!
//! Opening an archive parses the header only. Tensor payloads are read on
//! demand with positioned reads, so an open archive can be shared across
//! threads and a multi-gigabyte checkpoint never has to be resident.
//! Writing is a single streaming pass into a temporary sibling file that is
//! renamed into place once every tensor has been written.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::dtype::{self, DType};
use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";
// Anything larger is certainly not a tensor index.
const MAX_HEADER_LEN: u64 = 256 * 1024 * 1024;

pub type Metadata = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Offsets into the data region, `[start, end)`.
    pub byte_span: (u64, u64),
}

impl TensorMeta {
    pub fn element_count(&self) -> usize {
        element_count(&self.shape)
    }

    pub fn byte_len(&self) -> u64 {
        self.byte_span.1 - self.byte_span.0
    }
}

pub fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// A decoded tensor: row-major values widened to `f64`, plus the dtype they
/// were stored in.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(dtype: DType, shape: Vec<usize>, values: Vec<f64>) -> Self {
        Tensor {
            dtype,
            shape,
            values,
        }
    }
}

/// One tensor to be written.
#[derive(Debug, Clone)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl TensorEntry {
    pub fn new(name: impl Into<String>, dtype: DType, shape: Vec<usize>, values: Vec<f64>) -> Self {
        TensorEntry {
            name: name.into(),
            dtype,
            shape,
            values,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorArchive {
    path: PathBuf,
    file: Arc<File>,
    data_start: u64,
    entries: BTreeMap<String, TensorMeta>,
    metadata: Option<Metadata>,
}

#[derive(Deserialize)]
struct RawEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

/// Header key/value pairs in file order, duplicates kept so they can be
/// reported.
struct RawHeader(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct HeaderVisitor;

        impl<'de> Visitor<'de> for HeaderVisitor {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object of tensor entries")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RawHeader, A::Error> {
                let mut pairs = Vec::new();
                while let Some(key) = map.next_key::<String>()? {
                    let value = map.next_value::<serde_json::Value>()?;
                    pairs.push((key, value));
                }
                Ok(RawHeader(pairs))
            }
        }

        deserializer.deserialize_map(HeaderVisitor)
    }
}

/// Open an archive and index its header. No tensor data is read.
pub fn open_archive(path: impl AsRef<Path>) -> Result<TensorArchive> {
    TensorArchive::open(path)
}

impl TensorArchive {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let file_len = file.metadata().map_err(|e| Error::io(&path, e))?.len();
        if file_len < 8 {
            return Err(Error::MalformedHeader(format!(
                "file is {file_len} bytes, too short for a header length"
            )));
        }
        let mut len_buf = [0u8; 8];
        read_exact_at(&file, &mut len_buf, 0).map_err(|e| Error::io(&path, e))?;
        let header_len = u64::from_le_bytes(len_buf);
        if header_len > file_len - 8 {
            return Err(Error::HeaderTooLong {
                declared: header_len,
                file_len,
            });
        }
        if header_len > MAX_HEADER_LEN {
            return Err(Error::MalformedHeader(format!("header length {header_len} is implausible")));
        }
        let mut header = vec![0u8; header_len as usize];
        read_exact_at(&file, &mut header, 8).map_err(|e| Error::io(&path, e))?;
        let data_start = 8 + header_len;
        let data_len = file_len - data_start;
        let (entries, metadata) = parse_header(&header, data_len)?;
        Ok(TensorArchive {
            path,
            file: Arc::new(file),
            data_start,
            entries,
            metadata,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn entries(&self) -> &BTreeMap<String, TensorMeta> {
        &self.entries
    }

    pub fn metadata(&self) -> Option<&Metadata> {
        self.metadata.as_ref()
    }

    pub fn get(&self, name: &str) -> Option<&TensorMeta> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in data-region order.
    pub fn entries_by_offset(&self) -> Vec<&TensorMeta> {
        let mut metas: Vec<&TensorMeta> = self.entries.values().collect();
        metas.sort_by_key(|m| (m.byte_span.0, m.byte_span.1));
        metas
    }

    pub fn read_raw(&self, name: &str) -> Result<Vec<u8>> {
        let meta = self.entries.get(name).ok_or_else(|| Error::UnknownTensor(name.to_string()))?;
        let mut buf = vec![0u8; meta.byte_len() as usize];
        read_exact_at(&self.file, &mut buf, self.data_start + meta.byte_span.0)
            .map_err(|e| Error::io(&self.path, e))?;
        Ok(buf)
    }

    /// Read one tensor, widened to `f64`.
    pub fn read_tensor(&self, name: &str) -> Result<Tensor> {
        let meta = self.entries.get(name).ok_or_else(|| Error::UnknownTensor(name.to_string()))?;
        let raw = self.read_raw(name)?;
        Ok(Tensor {
            dtype: meta.dtype,
            shape: meta.shape.clone(),
            values: dtype::decode(meta.dtype, &raw),
        })
    }
}

pub fn read_tensor(archive: &TensorArchive, name: &str) -> Result<Tensor> {
    archive.read_tensor(name)
}

fn parse_header(bytes: &[u8], data_len: u64) -> Result<(BTreeMap<String, TensorMeta>, Option<Metadata>)> {
    let raw: RawHeader =
        serde_json::from_slice(bytes).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let mut entries = BTreeMap::new();
    let mut metadata = None;
    for (name, value) in raw.0 {
        if name == METADATA_KEY {
            if metadata.is_some() {
                return Err(Error::DuplicateName(name));
            }
            let map: Metadata = serde_json::from_value(value)
                .map_err(|e| Error::MalformedHeader(format!("{METADATA_KEY}: {e}")))?;
            metadata = Some(map);
            continue;
        }
        if entries.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        let entry: RawEntry = serde_json::from_value(value)
            .map_err(|e| Error::MalformedHeader(format!("tensor {name}: {e}")))?;
        let dtype: DType = entry.dtype.parse().map_err(|dtype| Error::UnknownDType {
            name: name.clone(),
            dtype,
        })?;
        let [start, end] = entry.data_offsets;
        if start > end || end > data_len {
            return Err(Error::SpanOutOfBounds {
                name,
                detail: format!("[{start}, {end}) against a data region of {data_len} bytes"),
            });
        }
        let expected = (element_count(&entry.shape) * dtype.byte_width()) as u64;
        if end - start != expected {
            return Err(Error::SpanOutOfBounds {
                name,
                detail: format!("span holds {} bytes, shape needs {expected}", end - start),
            });
        }
        entries.insert(
            name.clone(),
            TensorMeta {
                name,
                dtype,
                shape: entry.shape,
                byte_span: (start, end),
            },
        );
    }
    let mut spans: Vec<&TensorMeta> = entries.values().collect();
    spans.sort_by_key(|m| m.byte_span);
    for pair in spans.windows(2) {
        if pair[1].byte_span.0 < pair[0].byte_span.1 {
            return Err(Error::SpanOutOfBounds {
                name: pair[1].name.clone(),
                detail: format!("overlaps tensor {}", pair[0].name),
            });
        }
    }
    Ok((entries, metadata))
}

#[cfg(unix)]
fn read_exact_at(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, offset)
}

#[cfg(windows)]
fn read_exact_at(file: &File, mut buf: &mut [u8], mut offset: u64) -> std::io::Result<()> {
    use std::os::windows::fs::FileExt;
    while !buf.is_empty() {
        match file.seek_read(buf, offset) {
            Ok(0) => return Err(std::io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => {
                buf = &mut buf[n..];
                offset += n as u64;
            }
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

/// Name, dtype and shape of a tensor that will be streamed into a writer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WriteOptions {
    /// Clamp values that overflow a narrow dtype instead of failing.
    pub saturate: bool,
}

/// Streaming archive writer. The header is fixed up front from the tensor
/// specs; payloads must then be supplied in exactly that order.
pub struct ArchiveWriter {
    final_path: PathBuf,
    tmp_path: PathBuf,
    out: Option<BufWriter<File>>,
    specs: Vec<TensorSpec>,
    next: usize,
    options: WriteOptions,
}

impl ArchiveWriter {
    pub fn create(
        path: impl AsRef<Path>,
        specs: Vec<TensorSpec>,
        metadata: Option<&Metadata>,
        options: WriteOptions,
    ) -> Result<Self> {
        let header = build_header(&specs, metadata)?;
        let final_path = path.as_ref().to_path_buf();
        let tmp_path = tmp_sibling(&final_path);
        let file = File::create(&tmp_path).map_err(|e| Error::io(&tmp_path, e))?;
        let mut writer = ArchiveWriter {
            final_path,
            tmp_path,
            out: Some(BufWriter::with_capacity(1 << 20, file)),
            specs,
            next: 0,
            options,
        };
        writer.write_bytes(&(header.len() as u64).to_le_bytes())?;
        writer.write_bytes(&header)?;
        Ok(writer)
    }

    /// The spec of the tensor expected next, if any remain.
    pub fn next_spec(&self) -> Option<&TensorSpec> {
        self.specs.get(self.next)
    }

    pub fn write_values(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let spec = self.expect_next(name)?;
        let expected = element_count(&spec.shape);
        if values.len() != expected {
            return Err(Error::ValueCount {
                name: name.to_string(),
                shape: spec.shape.clone(),
                expected,
                actual: values.len(),
            });
        }
        let bytes = dtype::encode(spec.dtype, values, self.options.saturate, name)?;
        self.write_bytes(&bytes)?;
        self.next += 1;
        Ok(())
    }

    /// Write an already-encoded payload, copied byte for byte.
    pub fn write_raw(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let spec = self.expect_next(name)?;
        let expected = element_count(&spec.shape) * spec.dtype.byte_width();
        if bytes.len() != expected {
            return Err(Error::invalid(format!(
                "tensor {name}: raw payload is {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        self.write_bytes(bytes)?;
        self.next += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<TensorArchive> {
        if let Some(spec) = self.specs.get(self.next) {
            return Err(Error::invalid(format!("tensor {} was never written", spec.name)));
        }
        let out = self.out.take().expect("writer already finished");
        let file = out
            .into_inner()
            .map_err(|e| Error::io(&self.tmp_path, e.into_error()))?;
        file.sync_all().map_err(|e| Error::io(&self.tmp_path, e))?;
        drop(file);
        fs::rename(&self.tmp_path, &self.final_path).map_err(|e| Error::io(&self.final_path, e))?;
        TensorArchive::open(&self.final_path)
    }

    fn expect_next(&self, name: &str) -> Result<&TensorSpec> {
        match self.specs.get(self.next) {
            Some(spec) if spec.name == name => Ok(spec),
            Some(spec) => Err(Error::invalid(format!(
                "tensor {name} written out of order, expected {}",
                spec.name
            ))),
            None => Err(Error::invalid(format!("tensor {name} is not in the archive header"))),
        }
    }

    fn write_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let out = self.out.as_mut().expect("writer already finished");
        out.write_all(bytes).map_err(|e| Error::io(&self.tmp_path, e))
    }
}

impl Drop for ArchiveWriter {
    fn drop(&mut self) {
        if self.out.take().is_some() {
            let _ = fs::remove_file(&self.tmp_path);
        }
    }
}

fn tmp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".partial-{}", std::process::id()));
    path.with_file_name(name)
}

fn build_header(specs: &[TensorSpec], metadata: Option<&Metadata>) -> Result<Vec<u8>> {
    let mut seen = BTreeSet::new();
    let mut parts = Vec::with_capacity(specs.len() + 1);
    if let Some(meta) = metadata {
        parts.push(format!(
            "{}:{}",
            json_string(METADATA_KEY),
            serde_json::to_string(meta).expect("string map serializes")
        ));
    }
    let mut offset = 0u64;
    for spec in specs {
        if spec.name == METADATA_KEY || !seen.insert(spec.name.as_str()) {
            return Err(Error::DuplicateName(spec.name.clone()));
        }
        let len = (element_count(&spec.shape) * spec.dtype.byte_width()) as u64;
        parts.push(format!(
            "{}:{{\"dtype\":\"{}\",\"shape\":{},\"data_offsets\":[{},{}]}}",
            json_string(&spec.name),
            spec.dtype,
            serde_json::to_string(&spec.shape).expect("shape serializes"),
            offset,
            offset + len
        ));
        offset += len;
    }
    let mut header = format!("{{{}}}", parts.join(",")).into_bytes();
    // pad so the data region starts 8-byte aligned
    while (header.len() + 8) % 8 != 0 {
        header.push(b' ');
    }
    Ok(header)
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

/// Write a complete archive. Every tensor is validated and encoded before the
/// output file is created.
pub fn write_archive(
    entries: &[TensorEntry],
    path: impl AsRef<Path>,
    metadata: Option<&Metadata>,
    options: WriteOptions,
) -> Result<TensorArchive> {
    let mut seen = BTreeSet::new();
    let mut encoded = Vec::with_capacity(entries.len());
    for entry in entries {
        if !seen.insert(entry.name.as_str()) {
            return Err(Error::DuplicateName(entry.name.clone()));
        }
        let expected = element_count(&entry.shape);
        if entry.values.len() != expected {
            return Err(Error::ValueCount {
                name: entry.name.clone(),
                shape: entry.shape.clone(),
                expected,
                actual: entry.values.len(),
            });
        }
        encoded.push(dtype::encode(entry.dtype, &entry.values, options.saturate, &entry.name)?);
    }
    let specs = entries
        .iter()
        .map(|e| TensorSpec {
            name: e.name.clone(),
            dtype: e.dtype,
            shape: e.shape.clone(),
        })
        .collect();
    let mut writer = ArchiveWriter::create(path, specs, metadata, options)?;
    for (entry, bytes) in entries.iter().zip(&encoded) {
        writer.write_raw(&entry.name, bytes)?;
    }
    writer.finish()
}

/// How a set of archives line up by tensor name and shape.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AlignmentReport {
    /// Present in every input with one common shape.
    pub shared: BTreeSet<String>,
    /// Present in every input, but with differing shapes.
    pub shape_conflicts: BTreeSet<String>,
    /// Missing from at least one input.
    pub partial: BTreeSet<String>,
}

pub fn validate_alignment(archives: &[&TensorArchive]) -> Result<AlignmentReport> {
    if archives.len() < 2 {
        return Err(Error::invalid("alignment needs at least two archives"));
    }
    let union: BTreeSet<&str> = archives.iter().flat_map(|a| a.names()).collect();
    let mut report = AlignmentReport::default();
    for name in union {
        let metas: Vec<&TensorMeta> = archives.iter().filter_map(|a| a.get(name)).collect();
        if metas.len() < archives.len() {
            report.partial.insert(name.to_string());
        } else if metas.iter().all(|m| m.shape == metas[0].shape) {
            report.shared.insert(name.to_string());
        } else {
            report.shape_conflicts.insert(name.to_string());
        }
    }
    Ok(report)
}
