//! Dense row-major tensor with cheap clones (shared storage).

use std::sync::Arc;

use rand::Rng;

use crate::scalar::Scalar;

/// N-dimensional dense tensor. Storage is reference-counted so passing
/// tensors into the autodiff graph never copies data.
#[derive(Clone, Debug)]
pub struct Tensor<S> {
    dims: Vec<usize>,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(dims: Vec<usize>, data: Vec<S>) -> Self {
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match {} elements",
            dims,
            data.len()
        );
        Tensor { dims, data: Arc::new(data) }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: Arc::new(vec![S::zero(); n]) }
    }

    pub fn full(dims: &[usize], v: S) -> Self {
        let n = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: Arc::new(vec![v; n]) }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { dims: vec![], data: Arc::new(vec![v]) }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: Arc::new((0..n).map(&mut f).collect()) }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform(dims: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(dims, |_| S::from_f64(rng.gen_range(lo..hi)))
    }

    /// Gaussian samples with the given standard deviation (Box–Muller).
    pub fn rand_normal(dims: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(dims, |_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            S::from_f64((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * std)
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Mutable access; clones the storage if it is shared.
    pub fn data_mut(&mut self) -> &mut [S] {
        Arc::make_mut(&mut self.data)
    }

    /// Value of a 0-dim (or single-element) tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    /// Same storage, new shape. Element count must match.
    pub fn reshape(&self, dims: &[usize]) -> Self {
        assert_eq!(dims.iter().product::<usize>(), self.data.len());
        Tensor { dims: dims.to_vec(), data: Arc::clone(&self.data) }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        assert_eq!(self.dims, other.dims, "shape mismatch {:?} vs {:?}", self.dims, other.dims);
        Tensor {
            dims: self.dims.clone(),
            data: Arc::new(self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect()),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.dims, other.dims);
        let dst = self.data_mut();
        for (d, &s) in dst.iter_mut().zip(other.data.iter()) {
            *d += s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert precision (used by tests that re-run f32 graphs in f64).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(self.dims.clone(), self.data.iter().map(|v| T::from_f64(v.to_f64())).collect())
    }

    /// True if both tensors hold bit-identical values.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reshape_shares_storage() {
        let t = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32);
        let r = t.reshape(&[3, 2]);
        assert_eq!(r.dims(), &[3, 2]);
        assert_eq!(r.data(), t.data());
    }

    #[test]
    fn data_mut_does_not_alias() {
        let t = Tensor::<f32>::zeros(&[4]);
        let mut u = t.clone();
        u.data_mut()[0] = 1.0;
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(u.data()[0], 1.0);
    }
}
