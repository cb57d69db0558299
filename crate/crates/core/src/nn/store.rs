use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use sha2::{Digest, Sha256};

use crate::error::{CghError, Result};

/// Dense f32 tensor with a row-major shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: f32) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(CghError::Shape(format!(
                "tensor of shape {shape:?} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// View as `[shape[0], rest]`.
    pub fn as_matrix(&self) -> ArrayView2<'_, f32> {
        let rows = self.shape[0];
        let cols = self.data.len() / rows.max(1);
        ArrayView2::from_shape((rows, cols), &self.data).expect("row-major tensor")
    }

    pub fn as_matrix_mut(&mut self) -> ArrayViewMut2<'_, f32> {
        let rows = self.shape[0];
        let cols = self.data.len() / rows.max(1);
        ArrayViewMut2::from_shape((rows, cols), &mut self.data).expect("row-major tensor")
    }

    pub fn as_vector(&self) -> ArrayView1<'_, f32> {
        ArrayView1::from(&self.data[..])
    }

    pub fn as_vector_mut(&mut self) -> ArrayViewMut1<'_, f32> {
        ArrayViewMut1::from(&mut self.data[..])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named tensors.
///
/// Stores built by the same builder calls have identical layouts, which is
/// what lets EMA, SGD and gradient accumulation zip them positionally.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(&t.shape)).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape == b.shape)
    }

    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(CghError::Shape("parameter trees are not shape-isomorphic".into()))
        }
    }

    /// Overwrites a tensor by name, checking the shape.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| CghError::Shape(format!("no tensor named {name}")))?;
        if self.tensors[i].shape != t.shape {
            return Err(CghError::Shape(format!(
                "{name}: expected shape {:?}, got {:?}",
                self.tensors[i].shape, t.shape
            )));
        }
        self.tensors[i] = t;
        Ok(())
    }

    /// SHA-256 over names, shapes and raw bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for d in &t.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}
