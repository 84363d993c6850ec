use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named, shaped, row-major float32 buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, rejecting zero-sized dimensions, a shape that does not
    /// match `data.len()`, and non-finite values.
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if shape.contains(&0) {
            return Err(Error::invalid(format!(
                "tensor {name:?}: zero-sized dimension in {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {name:?}: shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "tensor {name:?}: non-finite value at index {i}"
            )));
        }
        Ok(Self { name, shape, data })
    }

    pub fn from_vec(name: impl Into<String>, data: Vec<f32>) -> Result<Self> {
        let len = data.len();
        Self::new(name, vec![len], data)
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(name, shape, vec![0.0; numel])
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Squared Frobenius norm, accumulated in f64.
    pub fn norm_sq(&self) -> f64 {
        norm_sq(&self.data)
    }
}

pub(crate) fn norm_sq(xs: &[f32]) -> f64 {
    xs.iter().map(|&x| f64::from(x) * f64::from(x)).sum()
}

pub(crate) fn diff_norm_sq(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(Tensor::new("a", vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new("a", vec![2, 0], vec![]).is_err());
        assert!(Tensor::new("a", vec![2], vec![1.0, f32::NAN]).is_err());
        assert!(Tensor::new("a", vec![1], vec![f32::INFINITY]).is_err());
        let t = Tensor::new("a", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.norm_sq(), 30.0);
    }
}
