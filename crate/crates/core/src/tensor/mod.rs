//! Dense row-major `f64` tensors and a reverse-mode autodiff tape.
//!
//! The tape records only the primitives a decoder-only transformer needs.
//! There is no general broadcasting: every op documents the exact shapes it
//! accepts and rejects anything else with [`Error::Shape`].

mod gradcheck;
pub mod kernels;
mod tape;

pub use gradcheck::{finite_difference_check, finite_difference_check_at};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Tensor::from_rows", "ragged rows"));
        }
        Ok(Tensor { shape: vec![rows.len(), cols], data: rows.concat() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the trailing dimension (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected rank 2, got {s:?}"))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.last_dim();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.last_dim().max(1))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Numerically stable softmax over every trailing row of `x`.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let n = x.last_dim();
    if x.shape().is_empty() || n == 0 {
        return Err(Error::shape("softmax_rows", "empty trailing dimension"));
    }
    let mut out = x.data.clone();
    for row in out.chunks_mut(n) {
        kernels::softmax_in_place(row);
    }
    Tensor::new(x.shape.clone(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().len(), 6);
    }

    #[test]
    fn softmax_symmetric_pair() {
        let y = softmax_rows(&Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_large_logit_is_stable() {
        let y = softmax_rows(&Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap()).unwrap();
        assert!(y.all_finite());
        assert_eq!(y.data()[0], 1.0);
        assert_eq!(y.data()[1], 0.0);
    }

    #[test]
    fn softmax_rejects_empty_rows() {
        assert!(softmax_rows(&Tensor::zeros(vec![3, 0])).is_err());
        assert!(softmax_rows(&Tensor::scalar(1.0)).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in prop::collection::vec(-700.0f64..700.0, 1..64)) {
            let n = row.len();
            let y = softmax_rows(&Tensor::new(vec![n], row).unwrap()).unwrap();
            let s: f64 = y.data().iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(y.data().iter().all(|&p| p >= 0.0));
        }
    }
}
