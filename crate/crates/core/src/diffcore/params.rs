//! Named parameter storage, gradients, and the checkpoint tensor file.

use super::graph::{Graph, Gradients, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use indexmap::IndexMap;
use std::io::{Read, Write};

/// Index of a parameter inside a [`ParameterSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named dense arrays with fixed shapes. Insertion order is the canonical
/// flattening order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    entries: IndexMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name; names are fixed at model construction.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.entries.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let (idx, _) = self.entries.insert_full(name, value);
        ParamId(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in self.entries.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::Shape(format!(
                "flat vector has {} entries, parameter set has {}",
                flat.len(),
                self.numel()
            )));
        }
        let mut off = 0;
        for t in self.entries.values_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Registers every parameter as a differentiable leaf of `g`.
    pub fn bind(&self, g: &Graph) -> BoundParams {
        BoundParams {
            vars: self.entries.values().map(|t| g.param(t.clone())).collect(),
        }
    }

    /// Same as [`bind`](Self::bind) but with constant leaves.
    pub fn bind_constant(&self, g: &Graph) -> BoundParams {
        BoundParams {
            vars: self.entries.values().map(|t| g.constant(t.clone())).collect(),
        }
    }

    pub fn zeros_like(&self) -> GradientRecord {
        GradientRecord {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.rows(), v.cols())))
                .collect(),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        write_tensors(w, self.entries.iter().map(|(k, v)| (k.as_str(), v)))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        Ok(Self {
            entries: read_tensors(r)?,
        })
    }
}

/// Parameters registered on a particular graph.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn gradients(&self, params: &ParameterSet, grads: &Gradients) -> GradientRecord {
        GradientRecord {
            entries: params
                .entries
                .iter()
                .zip(&self.vars)
                .map(|((k, v), &var)| (k.clone(), grads.get_or_zeros(var, v.shape())))
                .collect(),
        }
    }
}

/// Per-parameter gradient arrays, shape-congruent with a [`ParameterSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientRecord {
    entries: IndexMap<String, Tensor>,
}

impl GradientRecord {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn by_id(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.entries.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn from_flat(like: &ParameterSet, flat: &[f64]) -> Self {
        let mut rec = like.zeros_like();
        let mut off = 0;
        for t in rec.entries.values_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        rec
    }

    pub fn is_congruent(&self, params: &ParameterSet) -> bool {
        self.entries.len() == params.entries.len()
            && self
                .entries
                .iter()
                .zip(params.entries.iter())
                .all(|((ka, a), (kb, b))| ka == kb && a.shape() == b.shape())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    pub fn add_assign(&mut self, other: &GradientRecord) {
        for (a, b) in self.entries.values_mut().zip(other.entries.values()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.entries.values_mut() {
            t.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.entries.values().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }
}

const TENSOR_MAGIC: &[u8; 8] = b"MTPGOTNS";
const TENSOR_VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Versioned little-endian layout:
/// magic, version, count, then per tensor: name length, UTF-8 name, rows,
/// cols, row-major `f64` values.
pub fn write_tensors<'a>(
    w: &mut impl Write,
    items: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    write_u32(w, TENSOR_VERSION)?;
    write_u32(w, items.len() as u32)?;
    for (name, t) in items {
        write_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        write_u32(w, t.rows() as u32)?;
        write_u32(w, t.cols() as u32)?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors(r: &mut impl Read) -> Result<IndexMap<String, Tensor>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format("not a parameter tensor file".into()));
    }
    let version = read_u32(r)?;
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!(
            "unsupported parameter file version {version}"
        )));
    }
    let count = read_u32(r)? as usize;
    let mut out = IndexMap::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut b = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        if out.insert(name.clone(), Tensor::from_vec(rows, cols, data)).is_some() {
            return Err(Error::Format(format!("duplicate parameter {name}")));
        }
    }
    Ok(out)
}
