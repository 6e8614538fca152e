//! Dense row-major `f32` tensors and named parameter collections.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(&mut f).collect();
        Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(
                "set_grad",
                format!("gradient of {} values for tensor {:?}", grad.len(), self.shape),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Keep-mask (`true` = weight survives). Only set on pruned matrices.
    pub mask: Option<Vec<bool>>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

impl Param {
    pub fn is_matrix(&self) -> bool {
        self.tensor.rank() >= 2
    }

    pub fn nonzero_count(&self) -> usize {
        match &self.mask {
            Some(mask) => mask.iter().filter(|k| **k).count(),
            None => self.tensor.numel(),
        }
    }

    /// Zero every masked entry in place.
    pub fn apply_mask(&mut self) {
        if let Some(mask) = &self.mask {
            for (w, keep) in self.tensor.data.iter_mut().zip(mask) {
                if !keep {
                    *w = 0.0;
                }
            }
        }
    }
}

static NEXT_SET_UID: AtomicU64 = AtomicU64::new(1);

/// Ordered collection of named parameters.
///
/// Every set carries a process-unique id so that gradients recorded on a
/// tape can be routed back to the set they came from.
#[derive(Debug)]
pub struct ParamSet {
    uid: u64,
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl Clone for ParamSet {
    fn clone(&self) -> Self {
        ParamSet {
            uid: NEXT_SET_UID.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            index: self.index.clone(),
        }
    }
}

impl PartialEq for ParamSet {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            uid: NEXT_SET_UID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    /// Register a trainable parameter. Matrices (rank >= 2) get weight decay.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let decay = tensor.rank() >= 2;
        self.insert_with(name, tensor, decay)
    }

    pub fn insert_with(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        decay: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            tensor: tensor.with_requires_grad(true),
            mask: None,
            decay,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Param> {
        Ok(self.get(self.id(name)?))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut Param> {
        let id = self.id(name)?;
        Ok(self.get_mut(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }
}
