use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, ParamGroup, ParamKey, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

const BLOB_MAGIC: &[u8; 4] = b"SDPB";
const BLOB_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Matrix<T>,
}

/// Named parameters owned by one module. Trainability is decided per set.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    group: ParamGroup,
    params: Vec<Param<T>>,
    trainable: bool,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new(group: ParamGroup) -> Self {
        Self { group, params: Vec::new(), trainable: true }
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<T>) -> usize {
        let name = name.into();
        debug_assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, idx: usize) -> &Matrix<T> {
        &self.params[idx].value
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Matrix<T> {
        &mut self.params[idx].value
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.trainable = flag;
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn key(&self, idx: usize) -> ParamKey {
        ParamKey { group: self.group, index: idx }
    }

    /// Registers parameter `idx` as a leaf of `g`.
    pub fn leaf<'a>(&'a self, g: &mut Graph<'a, T>, idx: usize) -> Var {
        g.param(&self.params[idx].value, self.key(idx), self.trainable)
    }

    /// SHA-256 over names, shapes and raw little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_bytes());
        hex(&h.finalize())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BLOB_MAGIC);
        out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
        out.push(T::BYTES as u8);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
            for &v in p.value.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Overwrites values from a blob produced by [`ParamSet::to_bytes`]. Names and shapes
    /// must match the current layout exactly.
    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let loaded = Self::from_bytes(self.group, bytes)?;
        if loaded.params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{:?}: expected {} tensors, blob has {}",
                self.group,
                self.params.len(),
                loaded.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(loaded.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor mismatch: expected {} {:?}, found {} {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value = src.value;
        }
        Ok(())
    }

    pub fn from_bytes(group: ParamGroup, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != BLOB_MAGIC {
            return Err(Error::Checkpoint("bad blob magic".into()));
        }
        let version = r.u32()?;
        if version != BLOB_VERSION {
            return Err(Error::Checkpoint(format!("unsupported blob version {version}")));
        }
        let width = r.take(1)?[0] as usize;
        if width != T::BYTES {
            return Err(Error::Checkpoint(format!("blob scalar width {width} does not match {}", T::DTYPE)));
        }
        let count = r.u32()? as usize;
        let mut set = Self::new(group);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(rows * cols * width)?;
            let data = raw.chunks_exact(width).map(T::read_le).collect();
            set.params.push(Param { name, value: Matrix::from_vec(rows, cols, data) });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes in blob".into()));
        }
        Ok(set)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated blob".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
