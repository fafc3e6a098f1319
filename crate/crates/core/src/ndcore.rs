//! Dense 64-bit linear algebra and the seeded generator every other module
//! draws from.
//!
//! Only matrix-vector products are needed: batches are handled as independent
//! lanes, so there is no general matmul here.

use std::fmt;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Dense vector; `len` is the length of the backing buffer.
#[derive(Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Vector {
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}) ", self.rows, self.cols)?;
        f.debug_list().entries(self.data.chunks(self.cols)).finish()
    }
}

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Vector({}) {:?}", self.data.len(), self.data)
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{rows}x{cols}"),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. All rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape(
                "Matrix::from_rows",
                format!("row of {cols}"),
                format!("row of {}", bad.len()),
            ));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Zero matrix.
    ///
    /// Panics if either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    fn same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, shape_str(self), shape_str(other)));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "add")?;
        Ok(self.zip_with(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "sub")?;
        Ok(self.zip_with(other, |a, b| a - b))
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "hadamard")?;
        Ok(self.zip_with(other, |a, b| a * b))
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self += alpha * u ⊗ v` without materializing the outer product.
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) -> Result<()> {
        if u.len() != self.rows || v.len() != self.cols {
            return Err(Error::shape(
                "add_outer",
                shape_str(self),
                format!("{}x{}", u.len(), v.len()),
            ));
        }
        for (row, &ui) in self.data.chunks_exact_mut(self.cols).zip(u) {
            if ui != 0.0 {
                axpy(alpha * ui, v, row);
            }
        }
        Ok(())
    }
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.len())
    }

    fn same_len(&self, other: &Vector, op: &'static str) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::shape(
                op,
                format!("len {}", self.len()),
                format!("len {}", other.len()),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        self.same_len(other, "add")?;
        Ok(self.zip_with(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector> {
        self.same_len(other, "sub")?;
        Ok(self.zip_with(other, |a, b| a - b))
    }

    pub fn hadamard(&self, other: &Vector) -> Result<Vector> {
        self.same_len(other, "hadamard")?;
        Ok(self.zip_with(other, |a, b| a * b))
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector::new(self.data.iter().map(|a| a * s).collect())
    }

    fn zip_with(&self, other: &Vector, f: impl Fn(f64, f64) -> f64) -> Vector {
        Vector::new(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Self::new(data)
    }
}

impl AsRef<[f64]> for Vector {
    fn as_ref(&self) -> &[f64] {
        &self.data
    }
}

impl AsRef<[f64]> for Matrix {
    fn as_ref(&self) -> &[f64] {
        &self.data
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

fn shape_str(m: &Matrix) -> String {
    format!("{}x{}", m.rows, m.cols)
}

/// Outer product `u ⊗ v` as a `u.len() × v.len()` matrix.
pub fn outer(u: &Vector, v: &Vector) -> Result<Matrix> {
    let mut m = Matrix::new(
        u.len(),
        v.len(),
        vec![0.0; u.len() * v.len()],
    )?;
    m.add_outer(1.0, u.as_slice(), v.as_slice())?;
    Ok(m)
}

pub fn matvec(m: &Matrix, v: &Vector) -> Result<Vector> {
    let mut out = Vector::zeros(m.rows);
    matvec_into(m, v.as_slice(), out.as_mut_slice())?;
    Ok(out)
}

/// `out = m · v`, overwriting `out`.
pub fn matvec_into(m: &Matrix, v: &[f64], out: &mut [f64]) -> Result<()> {
    if m.cols != v.len() || m.rows != out.len() {
        return Err(Error::shape(
            "matvec",
            shape_str(m),
            format!("vector of len {} into len {}", v.len(), out.len()),
        ));
    }
    for (o, row) in out.iter_mut().zip(m.data.chunks_exact(m.cols)) {
        *o = dot(row, v);
    }
    Ok(())
}

/// `out += mᵀ · v`.
pub fn matvec_t_acc(m: &Matrix, v: &[f64], out: &mut [f64]) -> Result<()> {
    if m.rows != v.len() || m.cols != out.len() {
        return Err(Error::shape(
            "matvec_t",
            shape_str(m),
            format!("vector of len {} into len {}", v.len(), out.len()),
        ));
    }
    for (&vi, row) in v.iter().zip(m.data.chunks_exact(m.cols)) {
        if vi != 0.0 {
            axpy(vi, row, out);
        }
    }
    Ok(())
}

/// Dot product with a fixed four-way accumulation order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn identity(n: usize) -> Result<Matrix> {
    scaled_identity(n, 1.0)
}

pub fn scaled_identity(n: usize, s: f64) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::invalid("identity size must be at least 1"));
    }
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        m.set(i, i, s);
    }
    Ok(m)
}

pub fn gaussian_fill(rows: usize, cols: usize, mean: f64, std: f64, rng: &mut Rng) -> Result<Matrix> {
    check_std(std)?;
    let data = (0..rows * cols).map(|_| rng.normal(mean, std)).collect();
    Matrix::new(rows, cols, data)
}

pub fn gaussian_vector(len: usize, mean: f64, std: f64, rng: &mut Rng) -> Result<Vector> {
    check_std(std)?;
    Ok(Vector::new((0..len).map(|_| rng.normal(mean, std)).collect()))
}

fn check_std(std: f64) -> Result<()> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::invalid(format!(
            "standard deviation must be finite and non-negative, got {std}"
        )));
    }
    Ok(())
}

/// Euclidean norm over every element of every block, taken jointly.
pub fn l2_norm<'a, I>(blocks: I) -> f64
where
    I: IntoIterator<Item = &'a [f64]>,
{
    blocks
        .into_iter()
        .flat_map(|b| b.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Seeded deterministic generator (ChaCha8). Each owner holds its own;
/// `fork` derives independent streams from the same seed.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// A fresh generator on stream `stream` of the original seed.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Self {
            seed: self.seed,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Draw from Normal(mean, std²). `std == 0` returns `mean` exactly.
    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.inner);
        mean + std * z
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher–Yates shuffle in place.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use super::Rng;

    fn v(xs: &[f64]) -> Vector {
        Vector::new(xs.to_vec())
    }

    #[test]
    fn matvec_examples() {
        let i2 = identity(2).unwrap();
        assert_eq!(matvec(&i2, &v(&[3.0, -4.0])).unwrap(), v(&[3.0, -4.0]));

        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matvec(&m, &v(&[1.0, 1.0])).unwrap(), v(&[3.0, 7.0]));

        let z = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(matvec(&z, &v(&[5.0, 6.0])).unwrap(), v(&[0.0]));
    }

    #[test]
    fn matvec_shape_error_names_both_shapes() {
        let m = Matrix::zeros(2, 3);
        let err = matvec(&m, &v(&[1.0, 2.0])).unwrap_err().to_string();
        assert!(err.contains("2x3"), "{err}");
        assert!(err.contains("len 2"), "{err}");
    }

    #[test]
    fn identity_examples() {
        assert_eq!(identity(1).unwrap().as_slice(), &[1.0]);
        let i3 = identity(3).unwrap();
        assert_eq!(i3.trace(), 3.0);
        let off: f64 = i3.as_slice().iter().sum::<f64>() - i3.trace();
        assert_eq!(off, 0.0);
        assert!(identity(0).is_err());
    }

    #[test]
    fn scaled_identity_examples() {
        let m = scaled_identity(2, 0.01).unwrap();
        assert_eq!(m.as_slice(), &[0.01, 0.0, 0.0, 0.01]);
        assert_eq!(scaled_identity(4, 1.0).unwrap(), identity(4).unwrap());
        assert!(scaled_identity(3, 0.0).unwrap().as_slice().iter().all(|&x| x == 0.0));
        assert!(scaled_identity(0, 2.0).is_err());
    }

    #[test]
    fn gaussian_fill_zero_std_is_mean() {
        let mut rng = Rng::new(1);
        let m = gaussian_fill(3, 4, 0.0, 0.0, &mut rng).unwrap();
        assert!(m.as_slice().iter().all(|&x| x == 0.0));
        let m = gaussian_fill(2, 2, 1.5, 0.0, &mut rng).unwrap();
        assert!(m.as_slice().iter().all(|&x| x == 1.5));
    }

    #[test]
    fn gaussian_fill_statistics() {
        let mut rng = Rng::new(42);
        let m = gaussian_fill(100, 100, 0.0, 0.001, &mut rng).unwrap();
        let n = m.as_slice().len() as f64;
        let mean = m.as_slice().iter().sum::<f64>() / n;
        let var = m.as_slice().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.0005, "mean {mean}");
        let std = var.sqrt();
        assert!((0.0005..=0.0015).contains(&std), "std {std}");
    }

    #[test]
    fn gaussian_fill_deterministic_and_rejects_negative_std() {
        let a = gaussian_fill(7, 5, 0.0, 1.0, &mut Rng::new(9)).unwrap();
        let b = gaussian_fill(7, 5, 0.0, 1.0, &mut Rng::new(9)).unwrap();
        let bits = |m: &Matrix| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(gaussian_fill(2, 2, 0.0, -1.0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn l2_norm_examples() {
        assert_eq!(l2_norm([v(&[3.0, 4.0]).as_slice()]), 5.0);
        assert_eq!(l2_norm(std::iter::empty::<&[f64]>()), 0.0);
        let a = v(&[1.0, 0.0]);
        let b = v(&[0.0, 1.0]);
        assert_eq!(l2_norm([a.as_slice(), b.as_slice()]), 2f64.sqrt());
    }

    #[test]
    fn elementwise_helpers() {
        let a = v(&[1.0, 2.0]);
        let b = v(&[3.0, 5.0]);
        assert_eq!(a.add(&b).unwrap(), v(&[4.0, 7.0]));
        assert_eq!(b.sub(&a).unwrap(), v(&[2.0, 3.0]));
        assert_eq!(a.hadamard(&b).unwrap(), v(&[3.0, 10.0]));
        assert_eq!(a.scale(-2.0), v(&[-2.0, -4.0]));
        assert!(a.add(&v(&[1.0])).is_err());

        let o = outer(&a, &v(&[1.0, 0.0, -1.0])).unwrap();
        assert_eq!(o.shape(), (2, 3));
        assert_eq!(o.as_slice(), &[1.0, 0.0, -1.0, 2.0, 0.0, -2.0]);
        assert_eq!(o.transpose().shape(), (3, 2));
        assert_eq!(o.transpose().get(2, 1), -2.0);

        let m = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(m.add(&Matrix::zeros(2, 1)).is_err());
        assert_eq!(m.hadamard(&m).unwrap().as_slice(), &[1.0, 4.0]);
    }

    #[test]
    fn matvec_t_matches_explicit_transpose() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let x = [0.5, -1.0];
        let mut out = vec![0.0; 3];
        matvec_t_acc(&m, &x, &mut out).unwrap();
        let expect = matvec(&m.transpose(), &v(&x)).unwrap();
        assert_eq!(out, expect.into_vec());
    }

    #[test]
    fn fork_streams_differ() {
        let base = Rng::new(5);
        let mut a = base.fork(1);
        let mut b = base.fork(2);
        let xa: Vec<f64> = (0..4).map(|_| a.uniform()).collect();
        let xb: Vec<f64> = (0..4).map(|_| b.uniform()).collect();
        assert_ne!(xa, xb);
        let mut a2 = base.fork(1);
        assert_eq!(xa, (0..4).map(|_| a2.uniform()).collect::<Vec<_>>());
    }

    fn arb_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1e6f64..1e6, 1..40)
    }

    proptest! {
        #[test]
        fn identity_matvec_exact(xs in arb_vec()) {
            let i = identity(xs.len()).unwrap();
            let out = matvec(&i, &v(&xs)).unwrap();
            prop_assert_eq!(out.as_slice(), xs.as_slice());
        }

        #[test]
        fn norm_is_absolutely_homogeneous(xs in arb_vec(), c in -1e3f64..1e3) {
            let x = v(&xs);
            let lhs = l2_norm([x.scale(c).as_slice()]);
            let rhs = c.abs() * l2_norm([x.as_slice()]);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(f64::MIN_POSITIVE));
        }

        #[test]
        fn transpose_is_involution(r in 1usize..8, c in 1usize..8, seed in any::<u64>()) {
            let m = gaussian_fill(r, c, 0.0, 1.0, &mut Rng::new(seed)).unwrap();
            prop_assert_eq!(m.transpose().transpose(), m);
        }
    }
}
