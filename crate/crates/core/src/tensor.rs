//! Dense row-major `f64` tensors.
//!
//! Only the operations the flow models need are provided. Binary
//! elementwise operations accept either equal shapes or one operand with a
//! single element (scalar broadcast).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

/// Which of the two binary operands broadcasts as a scalar, if any.
enum Broadcast {
    Equal,
    LhsScalar,
    RhsScalar,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::dim("Tensor::from_rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, value: f64) {
        let c = self.cols();
        self.data[i * c + j] = value;
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn broadcast(&self, other: &Self, op: &'static str) -> Result<Broadcast> {
        if self.shape == other.shape {
            Ok(Broadcast::Equal)
        } else if other.data.len() == 1 {
            Ok(Broadcast::RhsScalar)
        } else if self.data.len() == 1 {
            Ok(Broadcast::LhsScalar)
        } else {
            Err(Error::dim(op, &self.shape, &other.shape))
        }
    }

    pub(crate) fn zip_with(
        &self,
        other: &Self,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        Ok(match self.broadcast(other, op)? {
            Broadcast::Equal => Self {
                shape: self.shape.clone(),
                data: self
                    .data
                    .iter()
                    .zip(&other.data)
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            },
            Broadcast::RhsScalar => {
                let b = other.data[0];
                self.map(|a| f(a, b))
            }
            Broadcast::LhsScalar => {
                let a = self.data[0];
                other.map(|b| f(a, b))
            }
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        if other.data.contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.zip_with(other, "div", |a, b| a / b)
    }

    pub fn neg(&self) -> Self {
        self.map(|v| -v)
    }

    pub fn tanh(&self) -> Self {
        self.map(f64::tanh)
    }

    pub fn exp(&self) -> Self {
        self.map(f64::exp)
    }

    pub fn log(&self) -> Result<Self> {
        if let Some(v) = self.data.iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("argument {v} is not positive"),
            });
        }
        Ok(self.map(f64::ln))
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Adds `row` (length = cols) to every row of a matrix.
    pub fn add_row(&self, row: &Self) -> Result<Self> {
        let c = self.cols();
        if self.shape.len() != 2 || row.len() != c {
            return Err(Error::dim("add_row", &self.shape, &row.shape));
        }
        let mut out = self.clone();
        for r in out.data.chunks_exact_mut(c) {
            for (o, &b) in r.iter_mut().zip(&row.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Per-row sums of a matrix, shape `[rows]`.
    pub fn sum_rows(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(Error::dim("sum_rows", &self.shape, &[0, 0]));
        }
        Ok(Self::vector(
            self.data
                .chunks_exact(self.cols().max(1))
                .map(|r| r.iter().sum())
                .collect(),
        ))
    }

    /// Column sums of a matrix, shape `[cols]`.
    pub fn sum_cols(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(Error::dim("sum_cols", &self.shape, &[0, 0]));
        }
        let c = self.cols();
        let mut out = vec![0.0; c];
        for r in self.data.chunks_exact(c.max(1)) {
            for (o, &v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        Ok(Self::vector(out))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        let c = self.cols();
        if self.shape.len() != 2 || start > end || end > c {
            return Err(Error::dim("slice_cols", &self.shape, &[start, end]));
        }
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows() * width);
        for r in self.data.chunks_exact(c.max(1)) {
            data.extend_from_slice(&r[start..end]);
        }
        Ok(Self {
            shape: vec![self.rows(), width],
            data,
        })
    }

    /// Reverses the column order of a matrix.
    pub fn flip_cols(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(Error::dim("flip_cols", &self.shape, &[0, 0]));
        }
        let mut out = self.clone();
        for r in out.data.chunks_exact_mut(self.cols().max(1)) {
            r.reverse();
        }
        Ok(out)
    }

    pub fn concat_cols(&self, other: &Self) -> Result<Self> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.rows() != other.rows() {
            return Err(Error::dim("concat_cols", &self.shape, &other.shape));
        }
        let (a, b) = (self.cols(), other.cols());
        let mut data = Vec::with_capacity(self.rows() * (a + b));
        for i in 0..self.rows() {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(Self {
            shape: vec![self.rows(), a + b],
            data,
        })
    }

    /// Selects rows by index.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape = vec![idx.len()];
        } else {
            shape[0] = idx.len();
        }
        Self { shape, data }
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(Error::dim("transpose", &self.shape, &[0, 0]));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data,
        })
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul_t(self, false, other, false)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `op(a) · op(b)` where `op` optionally transposes a 2-D operand.
pub(crate) fn matmul_t(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 {
        return Err(Error::dim("matmul", &a.shape, &b.shape));
    }
    let (ar, ac) = (a.shape[0], a.shape[1]);
    let (br, bc) = (b.shape[0], b.shape[1]);
    let (m, k, rsa, csa) = if ta {
        (ac, ar, 1, ac)
    } else {
        (ar, ac, ac, 1)
    };
    let (k2, n, rsb, csb) = if tb {
        (bc, br, 1, bc)
    } else {
        (br, bc, bc, 1)
    };
    if k != k2 {
        return Err(Error::dim("matmul", &a.shape, &b.shape));
    }
    let mut out = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: the strides describe the row-major buffers of `a`, `b`
        // and `out`, whose lengths were checked against the shapes above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                rsa as isize,
                csa as isize,
                b.data.as_ptr(),
                rsb as isize,
                csb as isize,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_matrix() {
        let m = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(Tensor::identity(3).matmul(&m).unwrap(), m);
    }

    #[test]
    fn small_matmul_by_hand() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        let b = Tensor::new(vec![2, 4], (0..8).map(|v| f64::from(v) * 0.5).collect()).unwrap();
        let lhs = matmul_t(&a, true, &b, false).unwrap();
        let rhs = a.transpose().unwrap().matmul(&b).unwrap();
        assert_eq!(lhs, rhs);
        let lhs = matmul_t(&b, false, &b, true).unwrap();
        let rhs = b.matmul(&b.transpose().unwrap()).unwrap();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&a), Err(Error::Dimension { .. })));
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(
            Tensor::vector(vec![1.0, 0.0]).log(),
            Err(Error::Domain { op: "log", .. })
        ));
        assert!(matches!(
            Tensor::scalar(1.0).div(&Tensor::scalar(0.0)),
            Err(Error::Domain { op: "div", .. })
        ));
    }

    #[test]
    fn exp_log_inverse() {
        let x = Tensor::vector(vec![0.1, 1.0, 7.5]);
        let y = x.log().unwrap().exp();
        assert!(x.max_abs_diff(&y) < 1e-14);
        assert_eq!(Tensor::scalar(0.0).tanh().item(), Some(0.0));
    }

    #[test]
    fn scalar_broadcast() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let y = x.add(&Tensor::scalar(1.0)).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0]);
        let y = Tensor::scalar(10.0).sub(&x).unwrap();
        assert_eq!(y.data(), &[9.0, 8.0]);
        assert!(x.add(&Tensor::zeros(&[3])).is_err());
    }
}
