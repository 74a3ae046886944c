use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique handle of a [`Parameter`]. Clones receive a fresh id, so
/// gradients and optimizer moments never leak between copies of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A tensor with a gradient buffer and a trainable flag.
///
/// Frozen parameters (`trainable == false`) never receive gradient from a
/// [`super::Tape`] and are skipped by [`super::Adam`].
#[derive(Debug)]
pub struct Parameter {
    id: ParamId,
    value: Tensor,
    grad: Tensor,
    trainable: bool,
}

impl Clone for Parameter {
    fn clone(&self) -> Self {
        Parameter {
            id: ParamId::fresh(),
            value: self.value.clone(),
            grad: self.grad.clone(),
            trainable: self.trainable,
        }
    }
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            id: ParamId::fresh(),
            value,
            grad,
            trainable: true,
        }
    }

    pub fn frozen(value: Tensor) -> Self {
        let mut p = Parameter::new(value);
        p.trainable = false;
        p
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    /// Direct write access for initialization and deserialization; training
    /// code goes through the optimizer.
    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut Tensor {
        &mut self.grad
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    /// Adds the accumulated gradient for this parameter (if any), scaled by
    /// `scale`, into the grad buffer. Frozen parameters are left untouched.
    pub fn absorb(&mut self, grads: &Gradients, scale: f64) {
        if !self.trainable {
            return;
        }
        if let Some(g) = grads.get(self.id) {
            for (dst, src) in self.grad.data_mut().iter_mut().zip(g.data()) {
                *dst += scale * src;
            }
        }
    }
}

/// Gradient accumulator keyed by parameter id, filled by
/// [`super::Tape::backward`]. Accumulates across several backward passes,
/// which is how minibatches are summed.
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn clear(&mut self) {
        self.map.clear();
    }

    pub(crate) fn slot(&mut self, id: ParamId, shape: &[usize]) -> &mut Tensor {
        self.map
            .entry(id)
            .or_insert_with(|| Tensor::zeros(shape))
    }
}
