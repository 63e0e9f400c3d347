//! Dense tensors and the operator set the network graphs are built from.

pub mod conv;
pub mod ops;
pub mod optim;

use crate::scalar::Scalar;

/// Dense N-dimensional array. Image tensors use NCHW layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![F::zero(); shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn filled(shape: &[usize], value: F) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: F) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Dimensions of an NCHW image tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected rank-4 tensor, got shape {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected rank-2 tensor, got shape {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn fill(&mut self, value: F) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Sum of squares of all elements.
    pub fn sq_l2(&self) -> F {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn scale_in_place(&mut self, s: F) {
        self.data.iter_mut().for_each(|x| *x = *x * s);
    }

    /// Elementwise `self += other`.
    pub fn add_in_place(&mut self, other: &Tensor<F>) {
        assert_eq!(self.shape, other.shape, "add_in_place shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + *b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Debug-build guard: forward ops must not introduce NaN/Inf from finite inputs.
#[inline]
pub fn debug_check_finite<F: Scalar>(what: &str, t: &Tensor<F>) {
    if cfg!(debug_assertions) {
        debug_assert!(t.all_finite(), "non-finite values produced by {what}");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length() {
        let t = Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 6]);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.len(), 6);
    }

    #[test]
    #[should_panic]
    fn length_mismatch_panics() {
        let _ = Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 5]);
    }

    #[test]
    fn sq_l2_sums_squares() {
        let t = Tensor::from_vec(&[3], vec![1.0f64, -2.0, 2.0]);
        assert_eq!(t.sq_l2(), 9.0);
    }
}
