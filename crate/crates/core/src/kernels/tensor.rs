use serde::{Deserialize, Serialize};

use super::KernelError;
use crate::Scalar;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, KernelError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(KernelError::DimMismatch(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(KernelError::NonFinite);
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn from_fn2(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor { shape: vec![rows, cols], data }
    }

    pub fn from_fn3(a: usize, b: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(a * b * c);
        for i in 0..a {
            for j in 0..b {
                for k in 0..c {
                    data.push(f(i, j, k));
                }
            }
        }
        Tensor { shape: vec![a, b, c], data }
    }

    /// One row tensor `1 x n`.
    pub fn row_vector(v: &[T]) -> Self {
        Tensor { shape: vec![1, v.len()], data: v.to_vec() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, KernelError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(KernelError::DimMismatch(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn expect_shape(&self, what: &str, shape: &[usize]) -> Result<(), KernelError> {
        if self.shape != shape {
            return Err(KernelError::DimMismatch(format!("{what}: expected {shape:?}, got {:?}", self.shape)));
        }
        Ok(())
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize), KernelError> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(KernelError::DimMismatch(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize), KernelError> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(KernelError::DimMismatch(format!("expected rank 3, got shape {:?}", self.shape))),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape[1] + c]
    }

    pub fn at3(&self, i: usize, j: usize, k: usize) -> T {
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn rows(&self, range: std::ops::Range<usize>) -> Result<Self, KernelError> {
        let (r, c) = self.dims2()?;
        if range.end > r || range.start > range.end {
            return Err(KernelError::DimMismatch(format!("rows {range:?} of {r}")));
        }
        Ok(Tensor { shape: vec![range.len(), c], data: self.data[range.start * c..range.end * c].to_vec() })
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self, KernelError> {
        let (n, k) = self.dims2()?;
        let (k2, m) = rhs.dims2()?;
        if k != k2 {
            return Err(KernelError::DimMismatch(format!("matmul {n}x{k} by {k2}x{m}")));
        }
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == T::zero() {
                    continue;
                }
                let rrow = &rhs.data[p * m..(p + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, b) in orow.iter_mut().zip(rrow) {
                    *o = *o + a * *b;
                }
            }
        }
        Ok(Tensor { shape: vec![n, m], data: out })
    }

    pub fn transpose(&self) -> Result<Self, KernelError> {
        let (r, c) = self.dims2()?;
        Ok(Self::from_fn2(c, r, |i, j| self.data[j * c + i]))
    }

    pub fn add(&self, rhs: &Self) -> Result<Self, KernelError> {
        if self.shape != rhs.shape {
            return Err(KernelError::DimMismatch(format!("add {:?} and {:?}", self.shape, rhs.shape)));
        }
        Ok(Tensor { shape: self.shape.clone(), data: self.data.iter().zip(&rhs.data).map(|(a, b)| *a + *b).collect() })
    }

    /// Adds `bias` to every row of a matrix.
    pub fn add_row(&self, bias: &[T]) -> Result<Self, KernelError> {
        let (r, c) = self.dims2()?;
        if bias.len() != c {
            return Err(KernelError::DimMismatch(format!("bias of {} for {c} columns", bias.len())));
        }
        Ok(Self::from_fn2(r, c, |i, j| self.data[i * c + j] + bias[j]))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| f(*v)).collect() }
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Self]) -> Result<Self, KernelError> {
        let cols = parts.first().map(|p| p.dims2()).transpose()?.map(|d| d.1).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, c) = p.dims2()?;
            if c != cols {
                return Err(KernelError::DimMismatch(format!("vstack of {c} and {cols} columns")));
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { shape: vec![rows, cols], data })
    }

    pub fn max_abs_diff(&self, rhs: &Self) -> Option<f64> {
        (self.shape == rhs.shape).then(|| {
            self.data.iter().zip(&rhs.data).map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs()).fold(0.0, f64::max)
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(vec![3, 1], vec![1.0, 0.0, -1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[-2.0, -2.0]);
        assert!(b.matmul(&b).is_err());
        assert_eq!(a.transpose().unwrap().shape(), &[3, 2]);
        assert_eq!(a.transpose().unwrap().at2(2, 1), 6.0);
    }

    #[test]
    fn construction_checks() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(matches!(Tensor::<f32>::new(vec![1], vec![f32::NAN]), Err(KernelError::NonFinite)));
        let t = Tensor::<f64>::zeros(&[2, 3]).reshape(&[3, 2]).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
    }
}
