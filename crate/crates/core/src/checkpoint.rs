//! Named-tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MOLE1\0"                       6 bytes
//! version: u32 = 1
//! count:   u32
//! count × { name_len: u16, name: [u8], dtype: u8 (0=f32, 1=f64),
//!           ndim: u8, dims: ndim × u64, offset: u64 }
//! payload: concatenated raw buffers, row-major; offsets are relative
//!          to the start of the payload and must be contiguous
//! hash:    u64 FNV-1a over directory + payload
//! ```

use std::path::Path;

use crate::error::{MoleError, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 6] = b"MOLE1\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 6 + 4 + 4;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_extend(FNV_OFFSET, bytes)
}

fn fnv1a64_extend(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.detached().cast()),
            DType::F64 => AnyTensor::F64(t.detached().cast()),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    fn raw_bytes(&self) -> Vec<u8> {
        match self {
            AnyTensor::F32(t) => t.to_le_bytes(),
            AnyTensor::F64(t) => t.to_le_bytes(),
        }
    }

    fn byte_len(&self) -> usize {
        self.shape().iter().product::<usize>() * self.dtype().size_of()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, AnyTensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &AnyTensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn insert_any(&mut self, name: impl Into<String>, tensor: AnyTensor) -> Result<()> {
        let name = name.into();
        if name.len() > usize::from(u16::MAX) {
            return Err(MoleError::Contract(format!(
                "tensor name too long: {} bytes",
                name.len()
            )));
        }
        if tensor.shape().len() > usize::from(u8::MAX) {
            return Err(MoleError::Contract(format!(
                "tensor `{name}` has too many dims"
            )));
        }
        if self.contains(&name) {
            return Err(MoleError::Contract(format!(
                "duplicate tensor name `{name}`"
            )));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn insert<T: Element>(
        &mut self,
        name: impl Into<String>,
        tensor: &Tensor<T>,
    ) -> Result<()> {
        self.insert_any(name, AnyTensor::from_tensor(tensor))
    }

    pub fn get_any(&self, name: &str) -> Result<&AnyTensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| MoleError::Contract(format!("checkpoint has no tensor `{name}`")))
    }

    /// Fetches a tensor with the requested element type; dtypes must match.
    pub fn get<T: Element>(&self, name: &str) -> Result<Tensor<T>> {
        match (self.get_any(name)?, T::DTYPE) {
            (AnyTensor::F32(t), DType::F32) => Ok(t.cast()),
            (AnyTensor::F64(t), DType::F64) => Ok(t.cast()),
            (other, want) => Err(MoleError::Contract(format!(
                "tensor `{name}` is {:?}, expected {want:?}",
                other.dtype()
            ))),
        }
    }

    pub fn put_scalar(&mut self, name: impl Into<String>, value: f64) -> Result<()> {
        self.insert(name, &Tensor::<f64>::scalar(value))
    }

    pub fn get_scalar(&self, name: &str) -> Result<f64> {
        let t = self.get::<f64>(name)?;
        match t.data() {
            [v] => Ok(*v),
            _ => Err(MoleError::Contract(format!("`{name}` is not a scalar"))),
        }
    }

    /// Stores a u64 exactly, as four 16-bit limbs (low first) in an f64 tensor.
    pub fn put_u64(&mut self, name: impl Into<String>, value: u64) -> Result<()> {
        let limbs = (0..4)
            .map(|k| ((value >> (16 * k)) & 0xffff) as f64)
            .collect();
        self.insert(name, &Tensor::<f64>::new([4], limbs)?)
    }

    pub fn get_u64(&self, name: &str) -> Result<u64> {
        let t = self.get::<f64>(name)?;
        if t.numel() != 4 {
            return Err(MoleError::Contract(format!("`{name}` is not a u64 field")));
        }
        let mut v = 0u64;
        for (k, &limb) in t.data().iter().enumerate() {
            if !(0.0..=65535.0).contains(&limb) || limb.fract() != 0.0 {
                return Err(MoleError::Contract(format!(
                    "`{name}` has an invalid limb {limb}"
                )));
            }
            v |= (limb as u64) << (16 * k);
        }
        Ok(v)
    }

    /// Keeps only entries whose name satisfies `keep`, preserving order.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> Checkpoint {
        Checkpoint {
            entries: self
                .entries
                .iter()
                .filter(|(n, _)| keep(n))
                .cloned()
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut dir = Vec::new();
        let mut offset = 0u64;
        for (name, t) in &self.entries {
            dir.extend_from_slice(&(name.len() as u16).to_le_bytes());
            dir.extend_from_slice(name.as_bytes());
            dir.push(t.dtype().code());
            dir.push(t.shape().len() as u8);
            for &d in t.shape() {
                dir.extend_from_slice(&(d as u64).to_le_bytes());
            }
            dir.extend_from_slice(&offset.to_le_bytes());
            offset += t.byte_len() as u64;
        }
        let mut out = Vec::with_capacity(HEADER_LEN + dir.len() + offset as usize + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        out.extend_from_slice(&dir);
        for (_, t) in &self.entries {
            out.extend_from_slice(&t.raw_bytes());
        }
        let hash = fnv1a64(&out[HEADER_LEN..]);
        out.extend_from_slice(&hash.to_le_bytes());
        out
    }

    /// Parses an archive. Structural problems (magic, version, truncation)
    /// are reported before the trailing hash is checked.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() {
            return Err(MoleError::Truncated("file shorter than magic".into()));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(MoleError::BadMagic);
        }
        let mut cur = Cursor {
            bytes,
            pos: MAGIC.len(),
        };
        let version = cur.u32("version")?;
        if version != VERSION {
            return Err(MoleError::BadVersion(version));
        }
        let count = cur.u32("tensor count")? as usize;

        struct DirEntry {
            name: String,
            dtype: DType,
            shape: Vec<usize>,
            offset: u64,
        }
        let mut dir = Vec::with_capacity(count.min(1 << 16));
        let mut expected_offset = 0u64;
        for idx in 0..count {
            let name_len = cur.u16("name length")? as usize;
            let name_bytes = cur.take(name_len, "name")?;
            let name = String::from_utf8(name_bytes.to_vec())
                .map_err(|_| MoleError::Malformed(format!("entry {idx}: name is not UTF-8")))?;
            let code = cur.u8("dtype")?;
            let dtype = DType::from_code(code).ok_or_else(|| {
                MoleError::Malformed(format!("`{name}`: unknown dtype code {code}"))
            })?;
            let ndim = cur.u8("ndim")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let d = cur.u64("dim")?;
                shape.push(usize::try_from(d).map_err(|_| {
                    MoleError::Malformed(format!("`{name}`: dimension {d} too large"))
                })?);
            }
            let offset = cur.u64("offset")?;
            if offset != expected_offset {
                return Err(MoleError::Malformed(format!(
                    "`{name}`: offset {offset}, expected {expected_offset}"
                )));
            }
            let numel = shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| MoleError::Malformed(format!("`{name}`: size overflow")))?;
            expected_offset = numel
                .checked_mul(dtype.size_of() as u64)
                .and_then(|n| n.checked_add(expected_offset))
                .ok_or_else(|| MoleError::Malformed(format!("`{name}`: size overflow")))?;
            dir.push(DirEntry {
                name,
                dtype,
                shape,
                offset,
            });
        }

        let payload_start = cur.pos;
        let payload_len = usize::try_from(expected_offset)
            .map_err(|_| MoleError::Malformed("payload too large".into()))?;
        let needed = payload_start
            .checked_add(payload_len)
            .and_then(|n| n.checked_add(8))
            .ok_or_else(|| MoleError::Malformed("payload too large".into()))?;
        if bytes.len() < needed {
            return Err(MoleError::Truncated(format!(
                "need {needed} bytes, file has {}",
                bytes.len()
            )));
        }
        if bytes.len() > needed {
            return Err(MoleError::Malformed(format!(
                "{} trailing bytes after hash",
                bytes.len() - needed
            )));
        }
        let hash_pos = payload_start + payload_len;
        let stored = u64::from_le_bytes(bytes[hash_pos..hash_pos + 8].try_into().expect("8 bytes"));
        let computed = fnv1a64(&bytes[HEADER_LEN..hash_pos]);
        if stored != computed {
            return Err(MoleError::HashMismatch { stored, computed });
        }

        let mut ckpt = Checkpoint::new();
        for e in dir {
            let start = payload_start + e.offset as usize;
            let n: usize = e.shape.iter().product();
            let raw = &bytes[start..start + n * e.dtype.size_of()];
            let tensor = match e.dtype {
                DType::F32 => AnyTensor::F32(decode::<f32>(&e.shape, raw, &e.name)?),
                DType::F64 => AnyTensor::F64(decode::<f64>(&e.shape, raw, &e.name)?),
            };
            ckpt.insert_any(e.name, tensor)
                .map_err(|err| MoleError::Malformed(err.to_string()))?;
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| MoleError::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| MoleError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| MoleError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Hash of the serialized form.
    pub fn fingerprint(&self) -> u64 {
        fnv1a64(&self.to_bytes())
    }
}

fn decode<T: Element>(shape: &[usize], raw: &[u8], name: &str) -> Result<Tensor<T>> {
    let data = raw
        .chunks_exact(T::DTYPE.size_of())
        .map(T::read_le)
        .collect();
    Tensor::new(shape.to_vec(), data)
        .map_err(|_| MoleError::Malformed(format!("`{name}` has invalid shape {shape:?}")))
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
            .ok_or_else(|| MoleError::Truncated(format!("reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}
