use crate::error::{Error, Result};
use crate::nn::tensor::{Shape, Tensor};

/// Handle to one entry of a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Adam first moment.
    pub m: Tensor,
    /// Adam second moment.
    pub v: Tensor,
    /// Set once a backward pass (or an explicit `set_grad`) has written the
    /// gradient since the last optimizer step.
    pub(crate) grad_ready: bool,
}

impl ParamEntry {
    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn grad_ready(&self) -> bool {
        self.grad_ready
    }
}

/// Named trainable tensors together with their gradients and Adam state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    /// Optimizer step counter shared by all entries.
    pub(crate) step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let shape = value.shape();
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            grad: Tensor::zeros(shape),
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            grad_ready: false,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn set_grad(&mut self, id: ParamId, grad: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if grad.shape() != e.value.shape() {
            return Err(Error::Shape(format!(
                "gradient {} does not match parameter '{}' {}",
                grad.shape(),
                e.name,
                e.value.shape()
            )));
        }
        e.grad = grad;
        e.grad_ready = true;
        Ok(())
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) {
        let e = &mut self.entries[id.0];
        if e.grad_ready {
            e.grad.add_assign(grad);
        } else {
            e.grad.data_mut().copy_from_slice(grad.data());
            e.grad_ready = true;
        }
    }

    /// Zero every gradient and mark it populated.
    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
            e.grad_ready = true;
        }
    }

    pub(crate) fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
            e.grad_ready = false;
        }
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    /// Copy parameter values from `other`, matched by name.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for e in &mut self.entries {
            let src = other
                .entries
                .iter()
                .find(|o| o.name == e.name)
                .ok_or_else(|| Error::State(format!("parameter '{}' missing from source", e.name)))?;
            if src.value.shape() != e.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter '{}': {} vs {}",
                    e.name,
                    e.value.shape(),
                    src.value.shape()
                )));
            }
            e.value = src.value.clone();
        }
        Ok(())
    }

    /// Snapshot of all values, in entry order.
    pub fn values(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn restore_values(&mut self, values: &[Tensor]) {
        for (e, v) in self.entries.iter_mut().zip(values) {
            e.value = v.clone();
        }
    }
}
