//! Dense row-major `f64` tensors and a reverse-mode autodiff tape.
//!
//! A [`Tensor`] owns its values and, when it is a trainable parameter, a
//! gradient slot. Computation happens on a [`Tape`]: parameters enter the tape
//! through [`Tape::leaf`], every primitive records a node, and
//! [`Tape::backward`] walks the nodes in reverse to produce [`Gradients`]
//! keyed by parameter identity. Gradients are then folded back into the
//! parameter slots with [`Gradients::accumulate_into`].
//!
//! Nothing broadcasts implicitly. The only broadcasting primitive is
//! [`Tape::add_broadcast`], whose right operand must match the trailing
//! extents of the left one.

mod kernels;
mod tape;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;

pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Identity of a tensor for gradient routing. Clones share the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        static NEXT: AtomicU64 = AtomicU64::new(1);
        ParamId(NEXT.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    id: ParamId,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid("tensor", format!("zero extent in shape {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!(
                    "shape {shape:?} needs {} values, got {}",
                    numel(shape),
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
            id: ParamId::fresh(),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor::new(shape, vec![value; numel(shape)]).expect("non-empty shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(&[], vec![value]).expect("scalar")
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(&[n], data).expect("non-empty vector")
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("tensor", "ragged rows"));
        }
        Tensor::new(&[rows.len(), cols], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::new(shape, data).expect("non-empty shape")
    }

    /// Marks the tensor as trainable (`requires_grad = true`).
    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn frozen(mut self) -> Self {
        self.requires_grad = false;
        self.grad = None;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    /// Drops the gradient slot entirely.
    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient slot, creating it if absent.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::shape("accumulate_grad", &self.shape, &[delta.len()]));
        }
        let slot = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        slot.iter_mut().zip(delta).for_each(|(g, d)| *g += d);
        Ok(())
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Same values, new shape.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), self.data.len());
        }
        Ok(self)
    }

    /// Equality of shape and the exact bit patterns of every value.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Little-endian bytes of the values, for hashing.
    pub fn le_bytes(&self) -> impl Iterator<Item = u8> + '_ {
        self.data.iter().flat_map(|v| v.to_le_bytes())
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn rejects_wrong_element_count() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn zero_grad_sets_exact_zeros() {
        let mut t = Tensor::from_vec(vec![1.0, 2.0]).trainable();
        t.accumulate_grad(&[0.5, -3.0]).unwrap();
        t.accumulate_grad(&[0.5, 1.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.0, -2.0]);
        t.zero_grad();
        assert!(t.grad().unwrap().iter().all(|g| g.to_bits() == 0.0f64.to_bits()));
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let mut a = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut b = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[3, 4], 0.5, &mut a);
        let y = Tensor::randn(&[3, 4], 0.5, &mut b);
        assert!(x.bitwise_eq(&y));
        assert_ne!(x.id(), y.id());
    }
}
