//! Self-describing array files and a `.npy` compatibility mode.
//!
//! Native layout, all integers little-endian:
//!
//! | offset      | size        | content                              |
//! |-------------|-------------|--------------------------------------|
//! | 0           | 8           | magic `UGCPARR\0`                    |
//! | 8           | 2           | format version (`1`)                 |
//! | 10          | 1           | dtype: 1 = u8, 2 = f32, 3 = f64      |
//! | 11          | 1           | ndim                                 |
//! | 12          | 8 · ndim    | extents, u64 each, C order           |
//! | 12 + 8·ndim | n · size    | payload, C order                     |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{GridField, GridShape, Real};
use crate::metrics::BinaryMask;

pub const MAGIC: &[u8; 8] = b"UGCPARR\0";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_FIXED: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    U8,
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::U8 => 1,
            DType::F32 => 2,
            DType::F64 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::U8),
            2 => Some(DType::F32),
            3 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn npy_descr(self) -> &'static str {
        match self {
            DType::U8 => "|u1",
            DType::F32 => "<f4",
            DType::F64 => "<f8",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayValues {
    U8(Vec<u8>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayValues {
    pub fn dtype(&self) -> DType {
        match self {
            ArrayValues::U8(_) => DType::U8,
            ArrayValues::F32(_) => DType::F32,
            ArrayValues::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayValues::U8(v) => v.len(),
            ArrayValues::F32(v) => v.len(),
            ArrayValues::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            ArrayValues::U8(v) => v.clone(),
            ArrayValues::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayValues::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn from_le_bytes(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::U8 => ArrayValues::U8(bytes.to_vec()),
            DType::F32 => ArrayValues::F32(
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::F64 => ArrayValues::F64(
                bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
        }
    }
}

/// An n-dimensional array with C-order payload.
#[derive(Clone, Debug, PartialEq)]
pub struct ArrayData {
    pub shape: Vec<usize>,
    pub values: ArrayValues,
}

fn element_count(shape: &[usize], offset: u64) -> Result<usize> {
    shape.iter().try_fold(1usize, |acc, &e| {
        acc.checked_mul(e).ok_or_else(|| Error::Format {
            offset,
            reason: format!("shape {shape:?} overflows the address space"),
        })
    })
}

impl ArrayData {
    pub fn new(shape: Vec<usize>, values: ArrayValues) -> Result<Self> {
        let n = element_count(&shape, 0)?;
        if n != values.len() {
            return Err(Error::Domain(format!(
                "shape {shape:?} holds {n} elements, payload has {}",
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn dtype(&self) -> DType {
        self.values.dtype()
    }

    /// Native encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_FIXED + 8 * self.shape.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.dtype().code());
        out.push(self.shape.len() as u8);
        for &e in &self.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.values.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, reason: String| Error::Format { offset: offset as u64, reason };
        if bytes.len() < HEADER_FIXED {
            return Err(fmt(
                bytes.len(),
                format!("header needs {HEADER_FIXED} bytes, file has {}", bytes.len()),
            ));
        }
        if &bytes[..8] != MAGIC {
            return Err(fmt(0, "bad magic".into()));
        }
        let version = u16::from_le_bytes([bytes[8], bytes[9]]);
        if version != FORMAT_VERSION {
            return Err(fmt(8, format!("unsupported version {version}")));
        }
        let dtype = DType::from_code(bytes[10])
            .ok_or_else(|| fmt(10, format!("unknown dtype code {}", bytes[10])))?;
        let ndim = bytes[11] as usize;
        let header = HEADER_FIXED + 8 * ndim;
        if bytes.len() < header {
            return Err(fmt(
                bytes.len(),
                format!("header with {ndim} extents needs {header} bytes, file has {}", bytes.len()),
            ));
        }
        let shape: Vec<usize> = (0..ndim)
            .map(|i| {
                let at = HEADER_FIXED + 8 * i;
                let v = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
                usize::try_from(v).map_err(|_| fmt(at, format!("extent {v} too large")))
            })
            .collect::<Result<_>>()?;
        let n = element_count(&shape, HEADER_FIXED as u64)?;
        let expected = n.checked_mul(dtype.size()).ok_or_else(|| {
            fmt(HEADER_FIXED, format!("payload size of shape {shape:?} overflows"))
        })?;
        let actual = bytes.len() - header;
        if actual != expected {
            return Err(fmt(
                header,
                format!("expected {expected} payload bytes, found {actual}"),
            ));
        }
        Ok(Self {
            shape,
            values: ArrayValues::from_le_bytes(dtype, &bytes[header..]),
        })
    }

    /// `.npy` version 1.0 encoding.
    pub fn to_npy_bytes(&self) -> Vec<u8> {
        let shape = match self.shape.len() {
            1 => format!("({},)", self.shape[0]),
            _ => format!(
                "({})",
                self.shape.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(", ")
            ),
        };
        let mut dict = format!(
            "{{'descr': '{}', 'fortran_order': False, 'shape': {shape}, }}",
            self.dtype().npy_descr()
        );
        let unpadded = 10 + dict.len() + 1;
        dict.push_str(&" ".repeat((64 - unpadded % 64) % 64));
        dict.push('\n');
        let mut out = Vec::new();
        out.extend_from_slice(b"\x93NUMPY\x01\x00");
        out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
        out.extend_from_slice(dict.as_bytes());
        out.extend_from_slice(&self.values.to_le_bytes());
        out
    }

    /// Reads little-endian, C-order `.npy` files of the three supported dtypes.
    pub fn from_npy_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, reason: String| Error::Format { offset: offset as u64, reason };
        if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
            return Err(fmt(0, "not an npy file".into()));
        }
        let (hlen, start) = match bytes[6] {
            1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
            2 | 3 if bytes.len() >= 12 => {
                (u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize, 12)
            }
            v => return Err(fmt(6, format!("unsupported npy version {v}"))),
        };
        if bytes.len() < start + hlen {
            return Err(fmt(start, "truncated npy header".into()));
        }
        let header = std::str::from_utf8(&bytes[start..start + hlen])
            .map_err(|_| fmt(start, "npy header is not UTF-8".into()))?;
        let field = |key: &str| -> Option<&str> {
            let at = header.find(&format!("'{key}'"))? + key.len() + 2;
            let rest = header[at..].trim_start().strip_prefix(':')?.trim_start();
            Some(rest)
        };
        let descr = field("descr")
            .and_then(|r| r.strip_prefix('\''))
            .and_then(|r| r.split('\'').next())
            .ok_or_else(|| fmt(start, "missing descr".into()))?;
        let dtype = match descr {
            "|u1" | "<u1" => DType::U8,
            "<f4" => DType::F32,
            "<f8" => DType::F64,
            other => return Err(fmt(start, format!("unsupported dtype {other}"))),
        };
        if field("fortran_order").is_some_and(|r| r.starts_with("True")) {
            return Err(fmt(start, "fortran-ordered arrays are not supported".into()));
        }
        let shape_src = field("shape")
            .and_then(|r| r.strip_prefix('('))
            .and_then(|r| r.split(')').next())
            .ok_or_else(|| fmt(start, "missing shape".into()))?;
        let shape: Vec<usize> = shape_src
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| fmt(start, format!("bad extent {s:?}"))))
            .collect::<Result<_>>()?;
        let payload = start + hlen;
        let n = element_count(&shape, start as u64)?;
        let expected = n * dtype.size();
        let actual = bytes.len() - payload;
        if actual != expected {
            return Err(fmt(payload, format!("expected {expected} payload bytes, found {actual}")));
        }
        Ok(Self {
            shape,
            values: ArrayValues::from_le_bytes(dtype, &bytes[payload..]),
        })
    }
}

fn is_npy(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("npy"))
}

/// Writes the native format, or `.npy` when the path ends in `.npy`.
pub fn write_array(path: impl AsRef<Path>, array: &ArrayData) -> Result<()> {
    let path = path.as_ref();
    let bytes = if is_npy(path) { array.to_npy_bytes() } else { array.to_bytes() };
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_array(path: impl AsRef<Path>) -> Result<ArrayData> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if is_npy(path) {
        ArrayData::from_npy_bytes(&bytes)
    } else {
        ArrayData::from_bytes(&bytes)
    }
}

/// Element type of a field in array files.
pub trait ArrayElement: Real {
    const DTYPE: DType;
    fn wrap(values: Vec<Self>) -> ArrayValues;
    fn unwrap(values: ArrayValues) -> Option<Vec<Self>>;
}

impl ArrayElement for f64 {
    const DTYPE: DType = DType::F64;
    fn wrap(values: Vec<Self>) -> ArrayValues {
        ArrayValues::F64(values)
    }
    fn unwrap(values: ArrayValues) -> Option<Vec<Self>> {
        match values {
            ArrayValues::F64(v) => Some(v),
            _ => None,
        }
    }
}

impl ArrayElement for f32 {
    const DTYPE: DType = DType::F32;
    fn wrap(values: Vec<Self>) -> ArrayValues {
        ArrayValues::F32(values)
    }
    fn unwrap(values: ArrayValues) -> Option<Vec<Self>> {
        match values {
            ArrayValues::F32(v) => Some(v),
            _ => None,
        }
    }
}

/// Field as an array of shape `[extents…, channels]`.
pub fn field_to_array<T: ArrayElement>(field: &GridField<T>) -> ArrayData {
    let mut shape = field.shape().extents().to_vec();
    shape.push(field.channels());
    ArrayData {
        shape,
        values: T::wrap(field.data().to_vec()),
    }
}

/// Inverse of [`field_to_array`]; the trailing axis holds the channels.
pub fn array_to_field<T: ArrayElement>(array: ArrayData) -> Result<GridField<T>> {
    if !(3..=4).contains(&array.shape.len()) {
        return Err(Error::Format {
            offset: 11,
            reason: format!("field arrays have 3 or 4 axes, got shape {:?}", array.shape),
        });
    }
    let found = array.dtype();
    let (extents, channels) = array.shape.split_at(array.shape.len() - 1);
    let shape = GridShape::new(extents)?;
    let channels = channels[0];
    let data = T::unwrap(array.values).ok_or_else(|| Error::Format {
        offset: 10,
        reason: format!("dtype mismatch: expected {:?}, found {found:?}", T::DTYPE),
    })?;
    GridField::new(shape, channels, data)
}

pub fn mask_to_array(mask: &BinaryMask) -> ArrayData {
    ArrayData {
        shape: mask.shape().extents().to_vec(),
        values: ArrayValues::U8(mask.bits().to_vec()),
    }
}

pub fn array_to_mask(array: ArrayData) -> Result<BinaryMask> {
    let shape = GridShape::new(&array.shape)?;
    match array.values {
        ArrayValues::U8(bits) => BinaryMask::new(shape, bits),
        other => Err(Error::Format {
            offset: 10,
            reason: format!("dtype mismatch: masks are u8, found {:?}", other.dtype()),
        }),
    }
}

pub fn write_field<T: ArrayElement>(path: impl AsRef<Path>, field: &GridField<T>) -> Result<()> {
    write_array(path, &field_to_array(field))
}

pub fn read_field<T: ArrayElement>(path: impl AsRef<Path>) -> Result<GridField<T>> {
    array_to_field(read_array(path)?)
}

pub fn write_mask(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    write_array(path, &mask_to_array(mask))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    array_to_mask(read_array(path)?)
}
