use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

/// Handle to a named tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors in stable insertion order. Gradients live in a
/// separate [`GradStore`] aligned by index so that batch elements can
/// accumulate in parallel before merging.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArg(format!("duplicate parameter name {name}")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(tensor);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    /// Handle for the i-th parameter in insertion order.
    pub fn id_at(&self, i: usize) -> ParamId {
        assert!(i < self.values.len());
        ParamId(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    /// Replace a value from a loaded checkpoint, validating the shape.
    pub fn load_value(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::InvalidArg(format!("unknown parameter {name} in checkpoint")))?;
        if self.values[id.0].dims() != tensor.dims() {
            return Err(Error::shape(
                format!("checkpoint tensor {name}"),
                format!("{:?}", self.values[id.0].dims()),
                format!("{:?}", tensor.dims()),
            ));
        }
        self.values[id.0] = tensor;
        Ok(())
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient accumulators paired with a [`ParamStore`], aligned by index.
#[derive(Debug, Clone)]
pub struct GradStore<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> GradStore<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        GradStore {
            grads: store
                .values
                .iter()
                .map(|t| Tensor::zeros(t.dims()))
                .collect(),
        }
    }

    #[inline]
    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.grads[id.0]
    }

    /// grads[id] += contribution
    pub fn accumulate(&mut self, id: ParamId, contribution: &Tensor<T>) -> Result<()> {
        self.grads[id.0].add_assign(contribution)
    }

    pub fn accumulate_slice(&mut self, id: ParamId, contribution: &[T]) -> Result<()> {
        let g = &mut self.grads[id.0];
        if g.numel() != contribution.len() {
            return Err(Error::shape("GradStore::accumulate_slice", g.numel(), contribution.len()));
        }
        for (a, &b) in g.data_mut().iter_mut().zip(contribution) {
            *a += b;
        }
        Ok(())
    }

    pub fn add_value(&mut self, id: ParamId, offset: usize, v: T) {
        self.grads[id.0].data_mut()[offset] += v;
    }

    pub fn merge(&mut self, other: &GradStore<T>) -> Result<()> {
        if self.grads.len() != other.grads.len() {
            return Err(Error::shape("GradStore::merge", self.grads.len(), other.grads.len()));
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        self.grads.iter_mut().for_each(|g| g.scale(s));
    }

    pub fn zero(&mut self) {
        self.grads.iter_mut().for_each(|g| g.zero());
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.grads
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.is_finite())
    }
}

/// Checkpoint layout, all integers little-endian: magic "IDCW",
/// u32 tensor count, then per tensor: name length u16, name bytes (UTF-8),
/// dtype u8, rank u8, dims u32 each, payload little-endian reals.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IDCW";

pub fn write_named_tensors<T: Scalar>(
    path: impl AsRef<Path>,
    tensors: &[(String, &Tensor<T>)],
) -> Result<()> {
    let path = path.as_ref();
    let pstr = path.display().to_string();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::InvalidArg(format!("tensor name too long: {name}")));
        }
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(T::DTYPE.code());
        buf.push(t.dims().len() as u8);
        for &d in t.dims() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            v.write_le(&mut buf);
        }
    }
    let file = File::create(path).map_err(|e| Error::io(pstr.clone(), e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&buf)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(pstr, e))
}

pub fn read_named_tensors<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<T>)>> {
    let path = path.as_ref();
    let pstr = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(pstr.clone(), e))?;
    let mut r = BufReader::new(file);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::io(pstr.clone(), e))?;
    let bad = |detail: String| Error::BadFile {
        path: pstr.clone(),
        detail,
    };
    if bytes.len() < 8 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic, expected \"IDCW\"".into()));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let mut off = 8;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        if off + 2 > bytes.len() {
            return Err(bad("truncated tensor header".into()));
        }
        let name_len = u16::from_le_bytes(bytes[off..off + 2].try_into().unwrap()) as usize;
        off += 2;
        if off + name_len + 2 > bytes.len() {
            return Err(bad("truncated tensor name".into()));
        }
        let name = String::from_utf8(bytes[off..off + name_len].to_vec())
            .map_err(|_| bad("tensor name is not UTF-8".into()))?;
        off += name_len;
        let dtype = Dtype::from_code(bytes[off]).ok_or_else(|| bad(format!("unknown dtype code {}", bytes[off])))?;
        if dtype != T::DTYPE {
            return Err(bad(format!(
                "tensor {name} has dtype {} but {} was requested",
                dtype.name(),
                T::DTYPE.name()
            )));
        }
        let rank = bytes[off + 1] as usize;
        off += 2;
        if off + rank * 4 > bytes.len() {
            return Err(bad("truncated dims".into()));
        }
        let mut dims = Vec::with_capacity(rank);
        for i in 0..rank {
            dims.push(u32::from_le_bytes(bytes[off + i * 4..off + i * 4 + 4].try_into().unwrap()) as usize);
        }
        off += rank * 4;
        let n: usize = dims.iter().product();
        let nbytes = n * T::BYTES;
        if off + nbytes > bytes.len() {
            return Err(bad(format!("truncated payload for tensor {name}")));
        }
        let data: Vec<T> = bytes[off..off + nbytes]
            .chunks_exact(T::BYTES)
            .map(T::read_le)
            .collect();
        off += nbytes;
        out.push((name, Tensor::from_vec(&dims, data)?));
    }
    Ok(out)
}
