//! Named parameter storage, binding onto a graph, and the versioned blob
//! format used for checkpoints.
//!
//! Blob layout (all integers little-endian):
//!
//! ```text
//! magic  b"SSNP"
//! u32    version (= 1)
//! u32    dtype   (0 = f32, 1 = f64)
//! u32    entry count
//! per entry:
//!   u32  name length, then UTF-8 name bytes
//!   u32  rank, then rank x u64 dims
//!   element data, little-endian, row-major
//! ```

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::graph::{Gradients, Graph, Var};
use crate::real::{DType, Real};
use crate::tensor::Tensor;
use crate::NnError;

pub const BLOB_MAGIC: &[u8; 4] = b"SSNP";
pub const BLOB_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// He-normal initialized parameter with standard deviation
    /// `gain / sqrt(fan_in)`.
    pub fn add_he_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let std = gain / (fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let t = Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)));
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Put every parameter on the graph as a leaf.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> Bound<'g, T> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| graph.variable(t.clone(), trainable))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and little-endian values of the given
    /// parameters, as lowercase hex.
    pub fn checksum_of(&self, ids: impl IntoIterator<Item = ParamId>) -> String {
        let mut h = Sha256::new();
        for id in ids {
            h.update(self.names[id.0].as_bytes());
            for &d in self.tensors[id.0].shape() {
                h.update((d as u64).to_le_bytes());
            }
            h.update(T::to_le_bytes_vec(self.tensors[id.0].data()));
        }
        hex::encode(h.finalize())
    }

    pub fn checksum(&self) -> String {
        self.checksum_of(self.ids())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn write_blob(&self, w: &mut impl Write) -> Result<(), NnError> {
        w.write_all(BLOB_MAGIC)?;
        w.write_all(&BLOB_VERSION.to_le_bytes())?;
        w.write_all(&T::DTYPE.code().to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for (name, t) in self.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            w.write_all(&T::to_le_bytes_vec(t.data()))?;
        }
        Ok(())
    }

    pub fn read_blob(r: &mut impl Read) -> Result<Self, NnError> {
        fn u32_of(r: &mut impl Read) -> Result<u32, NnError> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        }
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BLOB_MAGIC {
            return Err(NnError::Format("bad parameter blob magic".into()));
        }
        let version = u32_of(r)?;
        if version != BLOB_VERSION {
            return Err(NnError::Format(format!("unsupported blob version {version}")));
        }
        let dtype = DType::from_code(u32_of(r)?)
            .ok_or_else(|| NnError::Format("unknown dtype code".into()))?;
        let count = u32_of(r)? as usize;
        let width = match dtype {
            DType::F32 => 4,
            DType::F64 => 8,
        };
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = u32_of(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| NnError::Format("parameter name is not UTF-8".into()))?;
            let rank = u32_of(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut bytes = vec![0u8; numel * width];
            r.read_exact(&mut bytes)?;
            let data: Vec<T> = match dtype {
                DType::F32 => f32::from_le_bytes_slice(&bytes)
                    .into_iter()
                    .map(|v| T::lit(v as f64))
                    .collect(),
                DType::F64 => f64::from_le_bytes_slice(&bytes)
                    .into_iter()
                    .map(T::lit)
                    .collect(),
            };
            store.add(name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }

    /// Overwrite values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<(), NnError> {
        if other.len() != self.len() {
            return Err(NnError::Format(format!(
                "parameter count mismatch: have {}, blob has {}",
                self.len(),
                other.len()
            )));
        }
        for (i, name) in self.names.iter().enumerate() {
            let j = other
                .find(name)
                .ok_or_else(|| NnError::Format(format!("blob lacks parameter {name}")))?;
            let src = other.get(j);
            if src.shape() != self.tensors[i].shape() {
                return Err(NnError::Format(format!("shape mismatch for {name}")));
            }
            self.tensors[i] = src.clone();
        }
        Ok(())
    }
}

/// Parameters of one store placed on a graph.
pub struct Bound<'g, T: Real> {
    vars: Vec<Var<'g, T>>,
}

impl<'g, T: Real> Bound<'g, T> {
    pub fn get(&self, id: ParamId) -> Var<'g, T> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'g, T>] {
        &self.vars
    }

    /// One gradient per parameter, zeros where nothing flowed.
    pub fn grads(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}
