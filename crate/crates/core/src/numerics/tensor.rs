use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Dense row-major tensor of `f64`.
///
/// Rank 2 is the working shape for almost everything; rank 3 appears only as a
/// batch of matrices for batched products. Scalars are `[1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

// Below this many multiply-adds a product stays on the calling thread.
const PAR_MATMUL_WORK: usize = 1 << 16;

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.is_empty() {
            return Err(Error::dim(
                "Tensor::new",
                format!("shape {:?} does not hold {} values", shape, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::dim("Tensor::from_rows", "ragged rows"));
        }
        Self::from_vec(r, c, rows.concat())
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

    /// Leading extent of a matrix (rank 2); for rank 3 the middle extent.
    pub fn rows(&self) -> usize {
        self.shape[self.shape.len() - 2.min(self.shape.len())]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() == 3 {
            let (b, r, c) = (self.shape[0], self.shape[1], self.shape[2]);
            let mut out = vec![0.0; self.data.len()];
            for k in 0..b {
                let base = k * r * c;
                for i in 0..r {
                    for j in 0..c {
                        out[base + j * r + i] = self.data[base + i * c + j];
                    }
                }
            }
            return Tensor::new(vec![b, c, r], out);
        }
        self.expect_rank2("transpose")?;
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; self.data.len()];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_vec(c, r, out)
    }

    /// Matrix product `op(self) · op(other)`; rank-3 operands multiply
    /// batch-wise. `ta`/`tb` transpose the trailing two axes first.
    pub fn matmul_t(&self, other: &Tensor, ta: bool, tb: bool) -> Result<Self> {
        match (ta, tb, self.shape.len(), other.shape.len()) {
            (false, false, _, _) => self.matmul(other),
            (false, true, 2, 2) => {
                let (m, k) = (self.shape[0], self.shape[1]);
                let (n, k2) = (other.shape[0], other.shape[1]);
                if k != k2 {
                    return Err(Error::dim("matmul", format!("{:?} x {:?}^T", self.shape, other.shape)));
                }
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    let a = &self.data[i * k..(i + 1) * k];
                    for j in 0..n {
                        out[i * n + j] = dot(a, &other.data[j * k..(j + 1) * k]);
                    }
                }
                Tensor::from_vec(m, n, out)
            }
            (true, false, 2, 2) => {
                let (k, m) = (self.shape[0], self.shape[1]);
                let (k2, n) = (other.shape[0], other.shape[1]);
                if k != k2 {
                    return Err(Error::dim("matmul", format!("{:?}^T x {:?}", self.shape, other.shape)));
                }
                let mut out = vec![0.0; m * n];
                for kk in 0..k {
                    let a = &self.data[kk * m..(kk + 1) * m];
                    let b = &other.data[kk * n..(kk + 1) * n];
                    for (i, &av) in a.iter().enumerate() {
                        axpy(av, b, &mut out[i * n..(i + 1) * n]);
                    }
                }
                Tensor::from_vec(m, n, out)
            }
            _ => {
                let a = if ta { self.transpose()? } else { self.clone() };
                let b = if tb { other.transpose()? } else { other.clone() };
                a.matmul(&b)
            }
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        match (self.shape.len(), other.shape.len()) {
            (2, 2) => {
                let (m, k) = (self.shape[0], self.shape[1]);
                let (k2, n) = (other.shape[0], other.shape[1]);
                if k != k2 {
                    return Err(Error::dim(
                        "matmul",
                        format!("{:?} x {:?}", self.shape, other.shape),
                    ));
                }
                let mut out = vec![0.0; m * n];
                matmul_into(&self.data, &other.data, &mut out, k, n);
                Tensor::from_vec(m, n, out)
            }
            (3, 3) => {
                let (bs, m, k) = (self.shape[0], self.shape[1], self.shape[2]);
                let (bs2, k2, n) = (other.shape[0], other.shape[1], other.shape[2]);
                if bs != bs2 || k != k2 {
                    return Err(Error::dim(
                        "batched matmul",
                        format!("{:?} x {:?}", self.shape, other.shape),
                    ));
                }
                let mut out = vec![0.0; bs * m * n];
                for b in 0..bs {
                    let a = &self.data[b * m * k..(b + 1) * m * k];
                    let bb = &other.data[b * k * n..(b + 1) * k * n];
                    let o = &mut out[b * m * n..(b + 1) * m * n];
                    for i in 0..m {
                        row_times(&a[i * k..(i + 1) * k], bb, &mut o[i * n..(i + 1) * n], n);
                    }
                }
                Tensor::new(vec![bs, m, n], out)
            }
            _ => Err(Error::dim(
                "matmul",
                format!("unsupported ranks {:?} x {:?}", self.shape, other.shape),
            )),
        }
    }

    pub(crate) fn expect_rank2(&self, op: &'static str) -> Result<()> {
        if self.shape.len() != 2 {
            return Err(Error::dim(op, format!("expected a matrix, got {:?}", self.shape)));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    let n = y.len();
    let x = &x[..n];
    for j in 0..n {
        y[j] += a * x[j];
    }
}

fn row_times(a_row: &[f64], b: &[f64], out_row: &mut [f64], n: usize) {
    for (kk, &a) in a_row.iter().enumerate() {
        axpy(a, &b[kk * n..(kk + 1) * n], out_row);
    }
}

// i-k-j loop: every output cell accumulates over k in ascending order, the
// same order as the textbook triple loop.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], k: usize, n: usize) {
    let m = if n == 0 { 0 } else { out.len() / n };
    if m * k * n >= PAR_MATMUL_WORK && par::parallel_enabled() {
        par::for_each_row_mut(out, n, |i, row| row_times(&a[i * k..(i + 1) * k], b, row, n));
    } else {
        for i in 0..m {
            row_times(&a[i * k..(i + 1) * k], b, &mut out[i * n..(i + 1) * n], n);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_product() {
        let a = Tensor::from_rows(&[vec![1., 2., 3.], vec![4., 5., 6.], vec![7., 8., 9.]]).unwrap();
        assert_eq!(Tensor::eye(3).matmul(&a).unwrap(), a);
    }

    #[test]
    fn small_product() {
        let a = Tensor::from_rows(&[vec![1., 2.], vec![3., 4.]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.], vec![1.]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn inner_dimension_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn transposed_products_match_materialized() {
        let a = Tensor::new(vec![3, 4], (0..12).map(|v| f64::from(v) * 0.5 - 2.0).collect()).unwrap();
        let b = Tensor::new(vec![5, 4], (0..20).map(|v| f64::from(v % 7) - 3.0).collect()).unwrap();
        let abt = a.matmul(&b.transpose().unwrap()).unwrap();
        assert_eq!(a.matmul_t(&b, false, true).unwrap(), abt);
        let c = Tensor::new(vec![3, 5], (0..15).map(f64::from).collect()).unwrap();
        let atc = a.transpose().unwrap().matmul(&c).unwrap();
        assert_eq!(a.matmul_t(&c, true, false).unwrap(), atc);
    }

    #[test]
    fn batched_transpose_round_trip() {
        let t = Tensor::new(vec![2, 2, 3], (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(t.transpose().unwrap().transpose().unwrap(), t);
        assert_eq!(t.transpose().unwrap().shape(), &[2, 3, 2]);
    }
}
