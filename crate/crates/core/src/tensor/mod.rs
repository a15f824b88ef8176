//! Dense row-major `f64` tensors and the kernels the rest of the crate uses.
//!
//! Tensors are plain values: operations return new tensors and never alias
//! their inputs. Matrix products split work by output row, so results are
//! bit-identical regardless of how many threads run them.

mod im2col;
mod io;
mod linalg;

pub use im2col::{col2im, im2col, ConvGeometry};
pub use io::{read_tensor, write_tensor};
pub use linalg::{dense_inverse, dense_solve, sym_eig, sym_eigvals, SymEig};

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Below this many multiply-adds a product runs on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
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

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut t = Self::zeros(&[n, n]);
        for (i, v) in values.iter().enumerate() {
            t.data[i * n + i] = *v;
        }
        t
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Contract(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() < 2 {
            return self.data.len();
        }
        self.data.len() / self.rows().max(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// `self · rhs` for matrices.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = rhs.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &rhs.shape));
        }
        let mut out = vec![0.0; m * n];
        let kernel = |(i, out_row): (usize, &mut [f64])| {
            let a_row = &self.data[i * k..(i + 1) * k];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &rhs.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        };
        if m * k * n >= PAR_THRESHOLD && n > 0 {
            out.par_chunks_mut(n).enumerate().for_each(kernel);
        } else if n > 0 {
            out.chunks_mut(n).enumerate().for_each(kernel);
        }
        Tensor::new(vec![m, n], out)
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn matmul_tn(&self, rhs: &Tensor) -> Result<Tensor> {
        let (k, m) = self.dims2()?;
        let (k2, n) = rhs.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul_tn", &self.shape, &rhs.shape));
        }
        let mut out = vec![0.0; m * n];
        let kernel = |(i, out_row): (usize, &mut [f64])| {
            for p in 0..k {
                let a = self.data[p * m + i];
                if a == 0.0 {
                    continue;
                }
                let b_row = &rhs.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        };
        if m * k * n >= PAR_THRESHOLD && n > 0 {
            out.par_chunks_mut(n).enumerate().for_each(kernel);
        } else if n > 0 {
            out.chunks_mut(n).enumerate().for_each(kernel);
        }
        Tensor::new(vec![m, n], out)
    }

    /// `self · rhsᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (n, k2) = rhs.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", &self.shape, &rhs.shape));
        }
        let mut out = vec![0.0; m * n];
        let kernel = |(i, out_row): (usize, &mut [f64])| {
            let a_row = &self.data[i * k..(i + 1) * k];
            for (j, o) in out_row.iter_mut().enumerate() {
                *o = dot(a_row, &rhs.data[j * k..(j + 1) * k]);
            }
        };
        if m * k * n >= PAR_THRESHOLD && n > 0 {
            out.par_chunks_mut(n).enumerate().for_each(kernel);
        } else if n > 0 {
            out.chunks_mut(n).enumerate().for_each(kernel);
        }
        Tensor::new(vec![m, n], out)
    }

    /// Matrix-vector product `self · v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        let (m, k) = self.dims2()?;
        if v.len() != k {
            return Err(Error::shape("matvec", &self.shape, &[v.len()]));
        }
        Ok((0..m).map(|i| dot(self.row(i), v)).collect())
    }

    fn zip_with(
        &self,
        rhs: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(Error::shape(op, &self.shape, &rhs.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| f(*a, *b))
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    /// `self += alpha * rhs` in place.
    pub fn axpy(&mut self, alpha: f64, rhs: &Tensor) -> Result<()> {
        if self.shape != rhs.shape {
            return Err(Error::shape("axpy", &self.shape, &rhs.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn outer(a: &[f64], b: &[f64]) -> Tensor {
        let mut data = Vec::with_capacity(a.len() * b.len());
        for x in a {
            data.extend(b.iter().map(|y| x * y));
        }
        Tensor {
            shape: vec![a.len(), b.len()],
            data,
        }
    }

    /// Kronecker product of two matrices.
    pub fn kron(&self, rhs: &Tensor) -> Result<Tensor> {
        let (ar, ac) = self.dims2()?;
        let (br, bc) = rhs.dims2()?;
        let (r, c) = (ar * br, ac * bc);
        let mut out = vec![0.0; r * c];
        for i in 0..ar {
            for j in 0..ac {
                let a = self.data[i * ac + j];
                for p in 0..br {
                    for q in 0..bc {
                        out[(i * br + p) * c + j * bc + q] = a * rhs.data[p * bc + q];
                    }
                }
            }
        }
        Tensor::new(vec![r, c], out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sums a matrix along `axis` (0 collapses rows, 1 collapses columns).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        match axis {
            0 => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, v) in out.iter_mut().zip(self.row(i)) {
                        *o += v;
                    }
                }
                Ok(Tensor::vector(out))
            }
            1 => Ok(Tensor::vector(
                (0..r).map(|i| self.row(i).iter().sum()).collect(),
            )),
            _ => Err(Error::Contract(format!(
                "axis {axis} out of range for a matrix"
            ))),
        }
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let n = if axis == 0 { r } else { c };
        if n == 0 {
            return Err(Error::Contract("mean over an empty axis".into()));
        }
        Ok(self.sum_axis(axis)?.scale(1.0 / n as f64))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> Result<f64> {
        let (r, c) = self.dims2()?;
        if r != c {
            return Err(Error::shape("trace", &self.shape, &[c, r]));
        }
        Ok((0..r).map(|i| self.data[i * c + i]).sum())
    }

    /// Column-major vectorization, the `vec(·)` of Kronecker identities.
    pub fn vec_col_major(&self) -> Result<Vec<f64>> {
        let (r, c) = self.dims2()?;
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Ok(out)
    }

    /// Inverse of [`Tensor::vec_col_major`].
    pub fn from_col_major(rows: usize, cols: usize, v: &[f64]) -> Result<Tensor> {
        if v.len() != rows * cols {
            return Err(Error::shape("from_col_major", &[rows, cols], &[v.len()]));
        }
        let mut out = Tensor::zeros(&[rows, cols]);
        for j in 0..cols {
            for i in 0..rows {
                out.data[i * cols + j] = v[j * rows + i];
            }
        }
        Ok(out)
    }

    /// Largest absolute entrywise difference from a symmetric reflection.
    pub fn asymmetry(&self) -> Result<f64> {
        let (r, c) = self.dims2()?;
        if r != c {
            return Err(Error::shape("asymmetry", &self.shape, &[c, r]));
        }
        let mut worst: f64 = 0.0;
        for i in 0..r {
            for j in i + 1..c {
                worst = worst.max((self.data[i * c + j] - self.data[j * c + i]).abs());
            }
        }
        Ok(worst)
    }

    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let n = b.cols();
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(i, p) * b.at(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn shape_invariant_enforced() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_ok());
    }

    #[test]
    fn identity_times_b() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random(3, 4, &mut rng);
        assert_eq!(Tensor::eye(3).matmul(&b).unwrap(), b);
    }

    #[test]
    fn hand_forced_product() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(7, 5, &mut rng);
        let b = random(5, 3, &mut rng);
        let diff = a.matmul(&b).unwrap().sub(&naive_matmul(&a, &b)).unwrap();
        assert!(diff.frobenius_norm() <= 1e-12);
    }

    #[test]
    fn transposed_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(40, 30, &mut rng);
        let b = random(40, 50, &mut rng);
        let c = random(20, 30, &mut rng);
        let tn = a.matmul_tn(&b).unwrap();
        let reference = naive_matmul(&a.transpose().unwrap(), &b);
        assert!(tn.sub(&reference).unwrap().frobenius_norm() < 1e-12);
        let nt = a.matmul_nt(&c).unwrap();
        let reference = naive_matmul(&a, &c.transpose().unwrap());
        assert!(nt.sub(&reference).unwrap().frobenius_norm() < 1e-12);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&a), Err(Error::Shape { .. })));
    }

    #[test]
    fn reductions_and_norms() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(a.sum_axis(0).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(a.sum_axis(1).unwrap().data(), &[3.0, 7.0]);
        assert_eq!(a.mean_axis(0).unwrap().data(), &[2.0, 3.0]);
        assert!((a.frobenius_norm() - 30f64.sqrt()).abs() < 1e-15);
        assert_eq!(a.trace().unwrap(), 5.0);
        assert_eq!(Tensor::outer(&[1.0, 2.0], &[3.0]).data(), &[3.0, 6.0]);
    }

    #[test]
    fn kron_vec_identity() {
        // vec(A X B) = (Bᵀ ⊗ A) vec(X)
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(3, 2, &mut rng);
        let x = random(2, 4, &mut rng);
        let b = random(4, 3, &mut rng);
        let lhs = a
            .matmul(&x)
            .unwrap()
            .matmul(&b)
            .unwrap()
            .vec_col_major()
            .unwrap();
        let k = b.transpose().unwrap().kron(&a).unwrap();
        let rhs = k.matvec(&x.vec_col_major().unwrap()).unwrap();
        for (l, r) in lhs.iter().zip(&rhs) {
            assert!((l - r).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in 0u64..10_000, m in 1usize..6, k in 1usize..6, n in 1usize..6, p in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(m, k, &mut rng);
            let b = random(k, n, &mut rng);
            let c = random(n, p, &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.frobenius_norm().max(1e-300);
            prop_assert!(left.sub(&right).unwrap().frobenius_norm() / scale <= 1e-9);
        }
    }
}
