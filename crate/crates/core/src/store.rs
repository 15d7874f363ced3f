//! PTQT v1: a small little-endian container of named tensors plus one UTF-8
//! metadata document.
//!
//! ```text
//! "PTQT" | u32 version | u32 tensor_count | u32 metadata_len | metadata
//! per tensor: u16 name_len | name | u8 dtype | u8 ndim | ndim x u64 dims
//!             | u64 data_offset | u64 data_byte_len
//! zero padding to a 64-byte boundary
//! data section (payloads back to back, in header order)
//! ```

use std::collections::HashSet;

use crate::error::{PtqError, Result};

pub const MAGIC: &[u8; 4] = b"PTQT";
pub const VERSION: u32 = 1;
pub const DATA_ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    I8,
    I16,
    I32,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::I8 => 1,
            DType::I16 => 2,
            DType::I32 => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::I8),
            2 => Some(DType::I16),
            3 => Some(DType::I32),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::I16 => 2,
            DType::I8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "float32",
            DType::I8 => "int8",
            DType::I16 => "int16",
            DType::I32 => "int32",
        }
    }
}

/// Element buffer of a tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I8(Vec<i8>),
    I16(Vec<i16>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::I8(_) => DType::I8,
            TensorData::I16(_) => DType::I16,
            TensorData::I32(_) => DType::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I8(v) => v.len(),
            TensorData::I16(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match self {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i8(&self) -> Option<&[i8]> {
        match self {
            TensorData::I8(v) => Some(v),
            _ => None,
        }
    }

    /// Widened copy of the elements; exact for every supported dtype.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::I8(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::I16(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::I32(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_bits().to_le_bytes())),
            TensorData::I8(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap())))
                    .collect(),
            ),
            DType::I8 => TensorData::I8(bytes.iter().map(|&b| b as i8).collect()),
            DType::I16 => TensorData::I16(
                bytes
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::I32 => TensorData::I32(
                bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        }
    }
}

/// A named n-dimensional tensor. An empty shape is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<u64>,
    pub data: TensorData,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, shape: Vec<u64>, data: TensorData) -> Result<Self> {
        let rec = TensorRecord {
            name: name.into(),
            shape,
            data,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn f32(name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Result<Self> {
        Self::new(
            name,
            shape.iter().map(|&d| d as u64).collect(),
            TensorData::F32(data),
        )
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn shape_usize(&self) -> Vec<usize> {
        self.shape.iter().map(|&d| d as usize).collect()
    }

    pub fn element_count(&self) -> Result<u64> {
        self.shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| PtqError::ShapeOverflow(self.name.clone()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.len() > u16::MAX as usize {
            return Err(PtqError::InvalidName(self.name.clone()));
        }
        if self.shape.len() > u8::MAX as usize {
            return Err(PtqError::ShapeMismatch(format!(
                "tensor {:?} has {} dimensions, at most 255 are supported",
                self.name,
                self.shape.len()
            )));
        }
        let expected = self.element_count()?;
        let actual = self.data.len() as u64;
        if expected != actual {
            return Err(PtqError::ElementCount {
                name: self.name.clone(),
                expected,
                actual,
            });
        }
        Ok(())
    }
}

/// Ordered tensors plus a free-form metadata document.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub records: Vec<TensorRecord>,
    pub metadata: String,
}

impl Archive {
    pub fn new(records: Vec<TensorRecord>, metadata: impl Into<String>) -> Result<Self> {
        let archive = Archive {
            records,
            metadata: metadata.into(),
        };
        archive.validate()?;
        Ok(archive)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.records.len());
        for rec in &self.records {
            rec.validate()?;
            if !seen.insert(rec.name.as_str()) {
                return Err(PtqError::DuplicateName(rec.name.clone()));
            }
        }
        if self.metadata.len() > u32::MAX as usize {
            return Err(PtqError::InvalidArgument("metadata exceeds 4 GiB".into()));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&TensorRecord> {
        get_tensor(self, name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.name.as_str())
    }
}

pub fn get_tensor<'a>(archive: &'a Archive, name: &str) -> Result<&'a TensorRecord> {
    archive
        .records
        .iter()
        .find(|r| r.name == name)
        .ok_or_else(|| PtqError::NotFound(name.to_string()))
}

fn align_up(n: usize) -> usize {
    n.div_ceil(DATA_ALIGN) * DATA_ALIGN
}

pub fn write_archive(archive: &Archive) -> Result<Vec<u8>> {
    archive.validate()?;

    let mut header = Vec::new();
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.extend_from_slice(&(archive.records.len() as u32).to_le_bytes());
    header.extend_from_slice(&(archive.metadata.len() as u32).to_le_bytes());
    header.extend_from_slice(archive.metadata.as_bytes());

    let mut offset = 0u64;
    for rec in &archive.records {
        let byte_len = rec.element_count()? * rec.dtype().size_bytes() as u64;
        header.extend_from_slice(&(rec.name.len() as u16).to_le_bytes());
        header.extend_from_slice(rec.name.as_bytes());
        header.push(rec.dtype().tag());
        header.push(rec.shape.len() as u8);
        for d in &rec.shape {
            header.extend_from_slice(&d.to_le_bytes());
        }
        header.extend_from_slice(&offset.to_le_bytes());
        header.extend_from_slice(&byte_len.to_le_bytes());
        offset += byte_len;
    }

    let data_start = align_up(header.len());
    let mut out = header;
    out.reserve(data_start - out.len() + offset as usize);
    out.resize(data_start, 0);
    for rec in &archive.records {
        rec.data.write_le(&mut out);
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| PtqError::Truncated(what.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

struct Entry {
    name: String,
    dtype: DType,
    shape: Vec<u64>,
    offset: u64,
    byte_len: u64,
}

pub fn read_archive(bytes: &[u8]) -> Result<Archive> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(PtqError::BadMagic(magic));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(PtqError::UnsupportedVersion(version));
    }
    let count = cur.u32("tensor count")? as usize;
    let meta_len = cur.u32("metadata length")? as usize;
    let metadata = std::str::from_utf8(cur.take(meta_len, "metadata")?)
        .map_err(|_| PtqError::InvalidUtf8("metadata".into()))?
        .to_string();

    let mut entries = Vec::with_capacity(count.min(1 << 16));
    let mut names = HashSet::new();
    for i in 0..count {
        let ctx = format!("header of tensor #{i}");
        let name_len = cur.u16(&ctx)? as usize;
        let name = std::str::from_utf8(cur.take(name_len, &ctx)?)
            .map_err(|_| PtqError::InvalidUtf8(format!("name of tensor #{i}")))?
            .to_string();
        if name.is_empty() {
            return Err(PtqError::InvalidName(name));
        }
        let ctx = format!("header of tensor {name:?}");
        let tag = cur.u8(&ctx)?;
        let dtype = DType::from_tag(tag).ok_or_else(|| PtqError::UnknownDtype {
            name: name.clone(),
            tag,
        })?;
        let ndim = cur.u8(&ctx)? as usize;
        let shape = (0..ndim).map(|_| cur.u64(&ctx)).collect::<Result<Vec<_>>>()?;
        let offset = cur.u64(&ctx)?;
        let byte_len = cur.u64(&ctx)?;
        if !names.insert(name.clone()) {
            return Err(PtqError::DuplicateName(name));
        }
        let elements = shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| PtqError::ShapeOverflow(name.clone()))?;
        let expected = elements
            .checked_mul(dtype.size_bytes() as u64)
            .ok_or_else(|| PtqError::ShapeOverflow(name.clone()))?;
        if expected != byte_len {
            return Err(PtqError::ElementCount {
                name,
                expected: elements,
                actual: byte_len / dtype.size_bytes() as u64,
            });
        }
        entries.push(Entry {
            name,
            dtype,
            shape,
            offset,
            byte_len,
        });
    }

    let data_start = align_up(cur.pos);
    if data_start > bytes.len() {
        // A file can only end inside the padding when it has no payload.
        if entries.iter().any(|e| e.byte_len > 0) {
            return Err(PtqError::Truncated("header padding".into()));
        }
    }
    let data = bytes.get(data_start..).unwrap_or(&[]);

    let mut by_offset: Vec<&Entry> = entries.iter().filter(|e| e.byte_len > 0).collect();
    by_offset.sort_by_key(|e| e.offset);
    for pair in by_offset.windows(2) {
        if pair[0].offset + pair[0].byte_len > pair[1].offset {
            return Err(PtqError::OverlappingExtents {
                first: pair[0].name.clone(),
                second: pair[1].name.clone(),
            });
        }
    }

    let mut records = Vec::with_capacity(entries.len());
    for e in entries {
        let end = e
            .offset
            .checked_add(e.byte_len)
            .ok_or_else(|| PtqError::ShapeOverflow(e.name.clone()))?;
        if end > data.len() as u64 {
            // Extents that stop past the end of the file are a truncation;
            // the declared layout itself is not contradictory.
            return Err(PtqError::Truncated(format!("data of tensor {:?}", e.name)));
        }
        let payload = &data[e.offset as usize..end as usize];
        records.push(TensorRecord {
            name: e.name,
            shape: e.shape,
            data: TensorData::read_le(e.dtype, payload),
        });
    }
    Ok(Archive { records, metadata })
}

pub fn read_archive_file(path: impl AsRef<std::path::Path>) -> Result<Archive> {
    read_archive(&std::fs::read(path)?)
}
