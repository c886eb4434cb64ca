use crate::error::{Error, Result};

/// Dense row-major tensor of `f64` values, rank 0 through 4.
///
/// Rank-4 tensors use NCHW layout: `[batch, channels, height, width]`.
/// All shape arithmetic is checked; out-of-contract shapes surface as
/// [`Error::ShapeMismatch`] rather than panics so callers can report
/// them with context.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Creates a tensor filled with zeros.
    pub fn zeros(shape: &[usize]) -> Tensor {
        assert!(shape.len() <= 4, "tensor rank must be at most 4");
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    /// Creates a tensor filled with `value`.
    pub fn full(shape: &[usize], value: f64) -> Tensor {
        assert!(shape.len() <= 4, "tensor rank must be at most 4");
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Creates a rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Wraps an existing buffer. The buffer length must match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.len() > 4 {
            return Err(Error::invalid(format!(
                "tensor rank {} exceeds maximum 4",
                shape.len()
            )));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                context: "Tensor::from_vec",
                expected: vec![expected],
                got: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a rank-0 tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::ShapeMismatch {
                context: "Tensor::item",
                expected: vec![1],
                got: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    /// NCHW dimensions of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        if self.shape.len() != 4 {
            return Err(Error::ShapeMismatch {
                context: "Tensor::dims4",
                expected: vec![4],
                got: vec![self.shape.len()],
            });
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    /// Flat offset of NCHW coordinates. Callers must stay in bounds.
    #[inline]
    pub fn idx4(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.idx4(n, c, h, w)]
    }

    #[inline]
    pub fn set4(&mut self, n: usize, c: usize, h: usize, w: usize, value: f64) {
        let i = self.idx4(n, c, h, w);
        self.data[i] = value;
    }

    /// Applies `f` elementwise, producing a new tensor of the same shape.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shaped tensors.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                context: "Tensor::zip_map",
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Sum of all elements.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Returns an error if any element is NaN or infinite.
    pub fn check_finite(&self, context: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context))
        }
    }
}
