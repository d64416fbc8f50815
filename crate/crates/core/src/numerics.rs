//! Dense row-major matrices, row-wise L2 normalization with its exact
//! vector-Jacobian product, and seeded Gaussian sampling.
//!
//! Every reduction accumulates left to right in index order so results are
//! bit-reproducible across runs.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Rows with a norm below this are rejected by [`l2_normalize_rows`].
pub const MIN_ROW_NORM: f64 = 1e-12;

#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} values for {rows}x{cols}", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("{cols} columns"),
                    format!("{} columns in row {i}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Converts between scalar types (e.g. `f64` storage to `f32`).
    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&mut self, factor: T) {
        for x in &mut self.data {
            *x *= factor;
        }
    }

    pub fn fill(&mut self, value: T) {
        for x in &mut self.data {
            *x = value;
        }
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape("Matrix::add_assign", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha * other`, elementwise.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.check_same_shape("Matrix::axpy", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// Adds a `1 x cols` row vector to every row.
    pub fn add_row_broadcast(&mut self, row: &Self) -> Result<()> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::shape(
                "Matrix::add_row_broadcast",
                format!("1x{}", self.cols),
                format!("{}x{}", row.rows, row.cols),
            ));
        }
        for i in 0..self.rows {
            for (a, &b) in self.row_mut(i).iter_mut().zip(&row.data) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Column sums as a `1 x cols` matrix.
    pub fn sum_rows(&self) -> Self {
        let mut out = Self::zeros(1, self.cols);
        for i in 0..self.rows {
            for (a, &b) in out.data.iter_mut().zip(self.row(i)) {
                *a += b;
            }
        }
        out
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Elementwise `max |a - b|`.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same_shape("Matrix::max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }

    pub(crate) fn check_same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(())
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", &self.data[i * self.cols..(i + 1) * self.cols])?;
        }
        write!(f, "]")
    }
}

/// `a · b`. Each output entry accumulates over the shared index in increasing order.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("rhs with {} rows", a.cols),
            format!("{}x{}", b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows != b.rows {
        return Err(Error::shape(
            "matmul_tn",
            format!("rhs with {} rows", a.rows),
            format!("{}x{}", b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let a_row = a.row(k);
        let b_row = b.row(k);
        for (i, &aki) in a_row.iter().enumerate() {
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aki * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(Error::shape(
            "matmul_nt",
            format!("rhs with {} columns", a.cols),
            format!("{}x{}", b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(a_row, b.row(j));
        }
    }
    Ok(out)
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// What [`l2_normalize_vjp`] needs from the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizeTape<T> {
    pub input_norms: Vec<T>,
    pub normalized: Matrix<T>,
}

/// Divides every row by its L2 norm.
///
/// Rows with norm below [`MIN_ROW_NORM`] are an error rather than a clamp.
pub fn l2_normalize_rows<T: Scalar>(x: &Matrix<T>) -> Result<(Matrix<T>, NormalizeTape<T>)> {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let n = norm(x.row(i));
        if !(n.as_f64() >= MIN_ROW_NORM) {
            return Err(Error::DegenerateRow {
                row: i,
                norm: n.as_f64(),
            });
        }
        for v in out.row_mut(i) {
            *v /= n;
        }
        norms.push(n);
    }
    let tape = NormalizeTape {
        input_norms: norms,
        normalized: out.clone(),
    };
    Ok((out, tape))
}

/// Backward of [`l2_normalize_rows`]: `d_in = (d_out − y (yᵀ d_out)) / ‖x‖` per row.
pub fn l2_normalize_vjp<T: Scalar>(d_out: &Matrix<T>, tape: &NormalizeTape<T>) -> Result<Matrix<T>> {
    tape.normalized.check_same_shape("l2_normalize_vjp", d_out)?;
    let mut d_in = d_out.clone();
    for i in 0..d_out.rows {
        let y = tape.normalized.row(i);
        let radial = dot(y, d_out.row(i));
        let inv = T::one() / tape.input_norms[i];
        for (g, &yk) in d_in.row_mut(i).iter_mut().zip(y) {
            *g = (*g - yk * radial) * inv;
        }
    }
    Ok(d_in)
}

/// Seeded generator used for every random draw in the crate: ChaCha8 seeded
/// through `SeedableRng::seed_from_u64`.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draws standard-normal samples from `rng` into a new matrix, row-major.
pub fn gaussian_from<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<T> {
    let data = (0..rows * cols)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            T::of(x)
        })
        .collect();
    Matrix { rows, cols, data }
}

/// `rows x cols` i.i.d. standard normals from a ChaCha8 stream keyed by `seed`.
///
/// Samples are drawn in `f64` and converted, so the `f32` and `f64` results
/// for one seed agree up to rounding.
pub fn gaussian<T: Scalar>(rows: usize, cols: usize, seed: u64) -> Matrix<T> {
    gaussian_from(rows, cols, &mut rng_from_seed(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = acc;
            }
        }
        out
    }

    #[test]
    fn identity_product_is_exact() {
        let x = gaussian::<f64>(3, 3, 1);
        let i = Matrix::identity(3);
        assert_eq!(matmul(&i, &x).unwrap(), x);
        assert_eq!(matmul(&x, &i).unwrap(), x);
    }

    #[test]
    fn small_product() {
        let a = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[[3.0], [4.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().as_slice(), &[11.0]);
    }

    #[test]
    fn random_product_matches_triple_loop() {
        let a = gaussian::<f64>(5, 4, 10);
        let b = gaussian::<f64>(4, 3, 11);
        let fast = matmul(&a, &b).unwrap();
        let slow = naive_matmul(&a, &b);
        assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-12);
        let tn = matmul_tn(&a.transpose(), &b).unwrap();
        assert!(tn.max_abs_diff(&slow).unwrap() <= 1e-12);
        let nt = matmul_nt(&a, &b.transpose()).unwrap();
        assert!(nt.max_abs_diff(&slow).unwrap() <= 1e-12);
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let a = Matrix::<f64>::zeros(2, 3);
        let b = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
        assert!(matches!(matmul_tn(&a, &Matrix::zeros(3, 1)), Err(Error::Shape { .. })));
    }

    #[test]
    fn normalize_three_four_five() {
        let x = Matrix::from_rows(&[[3.0, 4.0], [1.0, 0.0]]).unwrap();
        let (y, tape) = l2_normalize_rows(&x).unwrap();
        assert!((y[(0, 0)] - 0.6_f64).abs() < 1e-15);
        assert!((y[(0, 1)] - 0.8_f64).abs() < 1e-15);
        assert_eq!(y.row(1), &[1.0, 0.0]);
        assert_eq!(tape.input_norms, vec![5.0, 1.0]);
    }

    #[test]
    fn normalize_random_rows_are_unit() {
        let x = gaussian::<f64>(7, 9, 3);
        let (y, _) = l2_normalize_rows(&x).unwrap();
        for i in 0..y.rows() {
            assert!((norm(y.row(i)) - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let x = Matrix::from_rows(&[[1.0, 1.0], [0.0, 1e-14]]).unwrap();
        match l2_normalize_rows(&x) {
            Err(Error::DegenerateRow { row, .. }) => assert_eq!(row, 1),
            other => panic!("expected degenerate row, got {other:?}"),
        }
    }

    #[test]
    fn vjp_kills_radial_direction() {
        let x = Matrix::from_rows(&[[3.0, 4.0]]).unwrap();
        let (y, tape) = l2_normalize_rows(&x).unwrap();
        let mut d = y.clone();
        d.scale(2.5);
        let g = l2_normalize_vjp(&d, &tape).unwrap();
        assert!(g.max_abs() < 1e-15);
    }

    #[test]
    fn vjp_passes_tangent_direction_on_unit_input() {
        let x = Matrix::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        let (_, tape) = l2_normalize_rows(&x).unwrap();
        let d = Matrix::from_rows(&[[0.0, 0.3, -0.7]]).unwrap();
        assert_eq!(l2_normalize_vjp(&d, &tape).unwrap(), d);
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let x = gaussian::<f64>(4, 5, 21);
        let w = gaussian::<f64>(4, 5, 22);
        let (_, tape) = l2_normalize_rows(&x).unwrap();
        let analytic = l2_normalize_vjp(&w, &tape).unwrap();
        // f(x) = Σ w ⊙ normalize(x)
        let f = |x: &Matrix<f64>| -> f64 {
            let (y, _) = l2_normalize_rows(x).unwrap();
            y.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for k in 0..x.as_slice().len() {
            let mut xp = x.clone();
            xp.as_mut_slice()[k] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[k] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let a = analytic.as_slice()[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-5, "coord {k}: analytic {a} fd {fd}");
        }
    }

    #[test]
    fn gaussian_is_deterministic_per_seed() {
        let a = gaussian::<f64>(4, 4, 7);
        let b = gaussian::<f64>(4, 4, 7);
        let c = gaussian::<f64>(4, 4, 8);
        assert_eq!(a.as_slice(), b.as_slice());
        assert_ne!(a.as_slice(), c.as_slice());
    }

    #[test]
    fn gaussian_moments() {
        let g = gaussian::<f64>(100, 100, 2024);
        let n = g.as_slice().len() as f64;
        let mean = g.sum() / n;
        let var = g.as_slice().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn f32_instantiation_works() {
        let x = Matrix::<f32>::from_rows(&[[3.0f32, 4.0]]).unwrap();
        let (y, _) = l2_normalize_rows(&x).unwrap();
        assert!((y[(0, 1)] - 0.8).abs() < 1e-6);
    }
}
