//! Dense row-major tensors of rank 1 to 3.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::real::Real;

pub const MAX_RANK: usize = 3;

/// Extents of a tensor. Every extent is at least 1.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: [usize; MAX_RANK],
    rank: usize,
}

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(Error::Contract(format!(
                "rank must be 1..={MAX_RANK}, got {}",
                dims.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Contract(format!("zero extent in shape {dims:?}")));
        }
        let mut d = [1; MAX_RANK];
        d[..dims.len()].copy_from_slice(dims);
        Ok(Self {
            dims: d,
            rank: dims.len(),
        })
    }

    /// # Panics
    /// If `n` is zero.
    pub fn vector(n: usize) -> Self {
        Self::new(&[n]).expect("vector extent must be positive")
    }

    /// # Panics
    /// If either extent is zero.
    pub fn matrix(rows: usize, cols: usize) -> Self {
        Self::new(&[rows, cols]).expect("matrix extents must be positive")
    }

    pub fn scalar() -> Self {
        Self::vector(1)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.rank]
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn numel(&self) -> usize {
        self.dims().iter().product()
    }

    /// Row count when the tensor is viewed as a matrix: leading extents are
    /// flattened, a vector is a single row.
    pub fn rows(&self) -> usize {
        if self.rank == 1 {
            1
        } else {
            self.dims[..self.rank - 1].iter().product()
        }
    }

    pub fn cols(&self) -> usize {
        self.dims[self.rank - 1]
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.dims())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        f.write_str("[")?;
        for d in self.dims() {
            if !first {
                f.write_str("x")?;
            }
            write!(f, "{d}")?;
            first = false;
        }
        f.write_str("]")
    }
}

/// A dense value with optional gradient storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Shape,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Contract(format!(
                "data length {} does not match shape {shape}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![T::ZERO; shape.numel()],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
            return Err(Error::Contract("ragged or empty rows".into()));
        }
        Self::new(Shape::matrix(r, c), rows.concat())
    }

    pub fn scalar(v: T) -> Self {
        Self::filled(Shape::scalar(), v)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.shape.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape.cols() + c]
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Contract(format!(
                "gradient length {} does not match tensor of shape {}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts the element type; gradients are dropped.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_rules() {
        assert!(Shape::new(&[]).is_err());
        assert!(Shape::new(&[2, 0]).is_err());
        assert!(Shape::new(&[1, 2, 3, 4]).is_err());
        let s = Shape::new(&[2, 3, 4]).unwrap();
        assert_eq!(s.numel(), 24);
        assert_eq!(s.rows(), 6);
        assert_eq!(s.cols(), 4);
        assert_eq!(Shape::vector(5).rows(), 1);
        assert_eq!(alloc::format!("{}", Shape::matrix(2, 3)), "[2x3]");
    }

    #[test]
    fn data_length_must_match() {
        assert!(Tensor::<f32>::new(Shape::matrix(2, 2), vec![1.0; 3]).is_err());
        let t = Tensor::<f32>::new(Shape::matrix(2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.get(1, 0), 3.0);
        assert_eq!(t.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn gradient_accumulates() {
        let mut t = Tensor::<f32>::zeros(Shape::vector(2));
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(t.grad.as_deref(), Some(&[2.0, 4.0][..]));
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }
}
