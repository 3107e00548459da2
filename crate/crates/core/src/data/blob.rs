//! Binary tensor container.
//!
//! A single tensor ("blob") is laid out little-endian as
//!
//! ```text
//! magic   b"DNRF"
//! version u32 (= 1)
//! dtype   u32 (1 = f32, 2 = f64)
//! ndim    u32
//! dims    u32 * ndim
//! payload element_size * prod(dims) bytes, row-major
//! ```
//!
//! Named collections of blobs (checkpoints) use the archive layout
//!
//! ```text
//! magic   b"DNRA"
//! version u32 (= 1)
//! hlen    u32, followed by hlen bytes of UTF-8 JSON header
//! count   u32
//! count * { nlen u32, name bytes, blen u64, blob bytes }
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};

pub const BLOB_MAGIC: &[u8; 4] = b"DNRF";
pub const ARCHIVE_MAGIC: &[u8; 4] = b"DNRA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlobData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlob {
    pub dims: Vec<usize>,
    pub data: BlobData,
}

impl TensorBlob {
    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let blob = Self {
            dims,
            data: BlobData::F32(data),
        };
        blob.check_shape()?;
        Ok(blob)
    }

    pub fn f64(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let blob = Self {
            dims,
            data: BlobData::F64(data),
        };
        blob.check_shape()?;
        Ok(blob)
    }

    /// Stores f64 values narrowed to f32.
    pub fn f32_from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::f32(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            BlobData::F32(_) => DType::F32,
            BlobData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match &self.data {
            BlobData::F32(v) => v.len(),
            BlobData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            BlobData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            BlobData::F64(v) => v.clone(),
        }
    }

    fn check_shape(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::format("blob.ndim", "tensor must have at least one dimension"));
        }
        if let Some(i) = self.dims.iter().position(|&d| d == 0) {
            return Err(Error::format(format!("blob.dims[{i}]"), "zero-length dimension"));
        }
        if self.dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::format("blob.dims", "dimension exceeds u32"));
        }
        let count: usize = self.dims.iter().product();
        if count != self.len() {
            return Err(Error::format(
                "blob.payload",
                format!("{} elements for dims {:?}", self.len(), self.dims),
            ));
        }
        Ok(())
    }

    fn check_finite(&self) -> Result<()> {
        let bad = match &self.data {
            BlobData::F32(v) => v.iter().position(|x| !x.is_finite()),
            BlobData::F64(v) => v.iter().position(|x| !x.is_finite()),
        };
        match bad {
            Some(index) => Err(Error::NonFinite {
                field: "blob.payload".into(),
                index,
            }),
            None => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check_shape()?;
        self.check_finite()?;
        let mut out = Vec::with_capacity(16 + 4 * self.dims.len() + self.dtype().size() * self.len());
        out.extend_from_slice(BLOB_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dtype() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            BlobData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            BlobData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "blob");
        if r.take(4)? != BLOB_MAGIC {
            return Err(Error::format("blob.magic", "expected \"DNRF\""));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format("blob.version", format!("unsupported version {version}")));
        }
        let dtype = match r.u32()? {
            1 => DType::F32,
            2 => DType::F64,
            other => return Err(Error::format("blob.dtype", format!("unknown dtype code {other}"))),
        };
        let ndim = r.u32()? as usize;
        if ndim == 0 || ndim > 16 {
            return Err(Error::format("blob.ndim", format!("unsupported ndim {ndim}")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for i in 0..ndim {
            let d = r.u32()? as usize;
            if d == 0 {
                return Err(Error::format(format!("blob.dims[{i}]"), "zero-length dimension"));
            }
            dims.push(d);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format("blob.dims", "element count overflows"))?;
        let payload_len = count
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::format("blob.dims", "payload size overflows"))?;
        if r.remaining() != payload_len {
            return Err(Error::format(
                "blob.payload",
                format!("expected {payload_len} bytes, found {}", r.remaining()),
            ));
        }
        let payload = r.take(payload_len)?;
        let data = match dtype {
            DType::F32 => BlobData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => BlobData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        let blob = Self { dims, data };
        blob.check_finite()?;
        Ok(blob)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| e.context(path.display()))
    }
}

/// Named tensors plus a JSON header; the on-disk checkpoint format.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub header: serde_json::Value,
    pub entries: Vec<(String, TensorBlob)>,
}

impl Archive {
    pub fn new<H: Serialize>(header: &H) -> Result<Self> {
        let header = serde_json::to_value(header).map_err(|source| Error::Json {
            field: "archive.header".into(),
            source,
        })?;
        Ok(Self {
            header,
            entries: Vec::new(),
        })
    }

    pub fn push(&mut self, name: impl Into<String>, blob: TensorBlob) {
        self.entries.push((name.into(), blob));
    }

    pub fn get(&self, name: &str) -> Result<&TensorBlob> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b)
            .ok_or_else(|| Error::format(name, "tensor missing from archive"))
    }

    pub fn header_as<H: DeserializeOwned>(&self) -> Result<H> {
        serde_json::from_value(self.header.clone()).map_err(|source| Error::Json {
            field: "archive.header".into(),
            source,
        })
    }

    pub fn header_kind(&self) -> Option<&str> {
        self.header.get("kind").and_then(|k| k.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|source| Error::Json {
            field: "archive.header".into(),
            source,
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, blob) in &self.entries {
            let bytes = blob.to_bytes().map_err(|e| e.context(name))?;
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "archive");
        if r.take(4)? != ARCHIVE_MAGIC {
            return Err(Error::format("archive.magic", "expected \"DNRA\""));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format("archive.version", format!("unsupported version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header = serde_json::from_slice(r.take(hlen)?).map_err(|source| Error::Json {
            field: "archive.header".into(),
            source,
        })?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::format("archive.name", "not UTF-8"))?
                .to_string();
            let blen = r.u64()? as usize;
            let blob = TensorBlob::from_bytes(r.take(blen)?).map_err(|e| e.context(&name))?;
            entries.push((name, blob));
        }
        if r.remaining() != 0 {
            return Err(Error::format("archive", "trailing bytes"));
        }
        Ok(Self { header, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(self.what, "truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Writes to a sibling temporary file and renames it into place, so readers
/// never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid("path", format!("{} has no file name", path.display())))?;
    let tmp = parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let blob = TensorBlob::f32(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let bytes = blob.to_bytes().unwrap();
        let mut expected = b"DNRF".to_vec();
        for w in [1u32, 1, 2, 2, 1] {
            expected.extend_from_slice(&w.to_le_bytes());
        }
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn zero_dim_rejected_at_write() {
        assert!(TensorBlob::f32(vec![3, 0], vec![]).is_err());
        let blob = TensorBlob {
            dims: vec![0],
            data: BlobData::F32(vec![]),
        };
        assert!(blob.to_bytes().is_err());
    }

    #[test]
    fn nan_rejected_on_load() {
        let mut bytes = TensorBlob::f32(vec![2], vec![1.0, 2.0]).unwrap().to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            TensorBlob::from_bytes(&bytes),
            Err(Error::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn malformed_headers_have_distinct_fields() {
        let good = TensorBlob::f32(vec![2], vec![1.0, 2.0]).unwrap().to_bytes().unwrap();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert_eq!(TensorBlob::from_bytes(&bad_magic).unwrap_err().field(), "blob.magic");
        let mut bad_dtype = good.clone();
        bad_dtype[8] = 7;
        assert_eq!(TensorBlob::from_bytes(&bad_dtype).unwrap_err().field(), "blob.dtype");
        assert_eq!(
            TensorBlob::from_bytes(&good[..good.len() - 1]).unwrap_err().field(),
            "blob.payload"
        );
    }

    #[test]
    fn archive_round_trip() {
        let mut a = Archive::new(&serde_json::json!({"kind": "test", "n": 3})).unwrap();
        a.push("w", TensorBlob::f64(vec![1, 2], vec![0.1, 1e-300]).unwrap());
        a.push("b", TensorBlob::f32(vec![1], vec![3.5]).unwrap());
        let back = Archive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.header_kind(), Some("test"));
        assert!(back.get("missing").is_err());
    }

    proptest! {
        #[test]
        fn blob_round_trip_bit_exact(dims in proptest::collection::vec(1usize..5, 1..4), seed in any::<u64>(), wide in any::<bool>()) {
            let n: usize = dims.iter().product();
            let vals: Vec<f64> = (0..n).map(|i| ((seed.wrapping_mul(6364136223846793005).wrapping_add((i as u64).wrapping_mul(1442695040888963407))) >> 11) as f64 * 1e-9 - 3.0).collect();
            let blob = if wide {
                TensorBlob::f64(dims.clone(), vals).unwrap()
            } else {
                TensorBlob::f32_from_f64(dims.clone(), &vals).unwrap()
            };
            let bytes = blob.to_bytes().unwrap();
            let back = TensorBlob::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &blob);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}
