//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `CDIF`, `u32` version, `u32` tensor count,
//! then per tensor `u32` name length, UTF-8 name, `u8` dtype, `u8` rank,
//! `u32` dims, raw data. A metadata block follows with its own `u32` count
//! and the same per-entry layout; metadata values are UTF-8 byte strings
//! stored with dtype 1 and rank 1.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::nn::{ParamStore, Real, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CDIF";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_UTF8: u8 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn from_store<T: Real>(store: &ParamStore<T>) -> Self {
        Checkpoint {
            tensors: store.to_named(),
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks `{key}`")))
    }

    /// Parses a metadata value, reporting the key on failure.
    pub fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("checkpoint metadata `{key}` = {raw:?} is malformed")))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.tensors.len(), "tensor count")?;
        let mut seen = std::collections::HashSet::new();
        for (name, t) in &self.tensors {
            if !seen.insert(name.as_str()) {
                return Err(Error::Format(format!("duplicate tensor name {name}")));
            }
            put_entry(&mut out, name, DTYPE_F32, t.shape())?;
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_u32(&mut out, self.meta.len(), "metadata count")?;
        for (k, v) in &self.meta {
            put_entry(&mut out, k, DTYPE_UTF8, &[v.len()])?;
            out.extend_from_slice(v.as_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let (name, dtype, shape) = r.entry()?;
            if dtype != DTYPE_F32 {
                return Err(Error::Format(format!("tensor {name}: unknown dtype {dtype}")));
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor {name}: size overflows")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format(format!("tensor {name}: size overflows")))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if tensors.iter().any(|(n, _)| *n == name) {
                return Err(Error::Format(format!("duplicate tensor name {name}")));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let m = r.u32()? as usize;
        let mut meta = BTreeMap::new();
        for _ in 0..m {
            let (key, dtype, shape) = r.entry()?;
            if dtype != DTYPE_UTF8 || shape.len() != 1 {
                return Err(Error::Format(format!("metadata {key}: expected a UTF-8 string")));
            }
            let value = String::from_utf8(r.take(shape[0])?.to_vec())
                .map_err(|_| Error::Format(format!("metadata {key}: invalid UTF-8")))?;
            meta.insert(key, value);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after metadata", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { tensors, meta })
    }

    /// Writes through a temporary sibling and renames, so readers never see
    /// a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Copies every tensor into `store`; names and shapes must match exactly.
    pub fn load_into<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.load_named(&self.tensors)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{what} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_entry(out: &mut Vec<u8>, name: &str, dtype: u8, dims: &[usize]) -> Result<()> {
    put_u32(out, name.len(), "name length")?;
    out.extend_from_slice(name.as_bytes());
    out.push(dtype);
    out.push(u8::try_from(dims.len()).map_err(|_| Error::Format(format!("{name}: rank exceeds 255")))?);
    for &d in dims {
        put_u32(out, d, "dimension")?;
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated checkpoint: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn entry(&mut self) -> Result<(String, u8, Vec<usize>)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
        let dtype = self.u8()?;
        let rank = self.u8()? as usize;
        let dims = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        Ok((name, dtype, dims))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            tensors: vec![
                ("a.weight".into(), Tensor::new(vec![2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, -7.25, 1e30]).unwrap()),
                ("b".into(), Tensor::scalar(0.5)),
            ],
            meta: BTreeMap::new(),
        }
        .with_meta("stage", "autoencoder")
        .with_meta("latent_scale", 0.8125)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"CDIF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.meta_parse::<f64>("latent_scale").unwrap(), 0.8125);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x/ck.bin");
        sample().save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), sample());
        assert!(matches!(Checkpoint::load(&dir.path().join("none")), Err(Error::Io { .. })));
    }

    #[test]
    fn corrupt_header_is_a_format_error() {
        let bytes = sample().to_bytes().unwrap();
        for i in 0..8 {
            let mut b = bytes.clone();
            b[i] ^= 0x5a;
            assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Format(_))), "byte {i}");
        }
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = sample().to_bytes().unwrap();
        for n in [0, 3, 11, 20, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..n]), Err(Error::Format(_))), "len {n}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn wrong_shape_names_the_tensor() {
        let mut store = ParamStore::<f32>::new();
        store.add("a.weight", Tensor::zeros(&[3, 2])).unwrap();
        store.add("b", Tensor::scalar(0.0)).unwrap();
        let err = sample().load_into(&mut store).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        assert!(err.to_string().contains("a.weight"), "{err}");
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ck = sample();
        ck.tensors.push(("b".into(), Tensor::scalar(1.0)));
        assert!(ck.to_bytes().is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_tensors_round_trip(
            bits in proptest::collection::vec(any::<u32>(), 0..40),
            rows in 1usize..5,
            key in "[a-z]{1,8}",
            value in "\\PC{0,20}",
        ) {
            let cols = bits.len() / rows;
            let data: Vec<f32> = bits[..rows * cols].iter().map(|&b| f32::from_bits(b)).collect();
            let ck = Checkpoint {
                tensors: vec![("t".into(), Tensor::new(vec![rows, cols], data).unwrap())],
                meta: BTreeMap::new(),
            }
            .with_meta(&key, &value);
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            prop_assert_eq!(back.meta(&key).unwrap(), value.as_str());
        }
    }
}
