//! Dense double-precision matrix primitives and statistical kernels, plus a
//! seeded deterministic random generator used by every other module.
//!
//! All arithmetic is in 64-bit floats. Exponentials (softmax, logsumexp) use
//! max-subtraction so temperature-scaled inputs survive extreme magnitudes.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Row-major dense matrix of `f64`.
///
/// Zero-sized dimensions are permitted (an empty contraction yields zeros);
/// operations that need at least one row or column check for themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArg {
                op: "Mat::new",
                msg: format!(
                    "data length {} does not match {rows}x{cols}",
                    data.len()
                ),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Identity matrix of size `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::InvalidArg {
                    op: "Mat::from_rows",
                    msg: format!("row {i} has length {} but row 0 has {cols}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Mat::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn add_at(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] += v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Standard matrix product. An inner dimension of zero contracts to the
    /// all-zero `rows x cols` matrix.
    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: (self.rows, self.cols),
                right: (other.rows, other.cols),
            });
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = other.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }
}

/// Free-function form of [`Mat::matmul`].
pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    a.matmul(b)
}

/// Temperature-scaled softmax: `out_i = exp(v_i/t) / sum_j exp(v_j/t)`.
///
/// Computed with max-subtraction; entries sum to 1 within 1e-12 for finite
/// inputs and the map is strictly order-preserving.
pub fn softmax_scaled(v: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::EmptyInput {
            op: "softmax_scaled",
        });
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArg {
            op: "softmax_scaled",
            msg: format!("temperature must be positive, got {temperature}"),
        });
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|&x| ((x - max) / temperature).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    Ok(out)
}

/// Population variance `sum((v_i - mean)^2) / n`.
pub fn variance(v: &[f64]) -> Result<f64> {
    if v.len() < 2 {
        return Err(Error::InvalidArg {
            op: "variance",
            msg: format!("need at least 2 elements, got {}", v.len()),
        });
    }
    Ok(population_variance(v))
}

/// Population variance without the length precondition; a single element has
/// variance zero. Internal helper for callers whose own contracts permit a
/// degenerate sample.
pub(crate) fn population_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// Pairwise cosine similarities between the rows of `x` and the rows of `y`:
/// `out[i][j] = x_i . y_j / (|x_i| |y_j|)`, shape `x.rows x y.rows`.
pub fn cosine_matrix(x: &Mat, y: &Mat) -> Result<Mat> {
    if x.cols() != y.cols() {
        return Err(Error::ShapeMismatch {
            op: "cosine_matrix",
            left: (x.rows(), x.cols()),
            right: (y.rows(), y.cols()),
        });
    }
    let norms = |m: &Mat, side: &'static str| -> Result<Vec<f64>> {
        (0..m.rows())
            .map(|r| {
                let n = l2_norm(m.row(r));
                if n == 0.0 {
                    Err(Error::ZeroNormRow {
                        op: "cosine_matrix",
                        side,
                        row: r,
                    })
                } else {
                    Ok(n)
                }
            })
            .collect()
    };
    let xn = norms(x, "x")?;
    let yn = norms(y, "y")?;
    let mut out = Mat::zeros(x.rows(), y.rows());
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            let d = dot(x.row(i), y.row(j));
            out.set(i, j, d / (xn[i] * yn[j]));
        }
    }
    Ok(out)
}

/// `log(sum_i exp(v_i))` with max-subtraction, so
/// `max(v) <= logsumexp(v) <= max(v) + ln(n)`.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::EmptyInput { op: "logsumexp" });
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Seeded deterministic random generator (counter-based ChaCha core).
///
/// The same seed yields the same sequence on every platform. Single-owner
/// mutable; never share one instance across concurrent tasks.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream derived from (seed, stream); used to decouple
    /// per-epoch shuffles and generator stages from one another.
    pub fn from_seed_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    /// Uniform draw in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Standard normal draw.
    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Fisher-Yates shuffle in place.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!(
            (a - b).abs() <= tol,
            "expected {b}, got {a} (diff {})",
            (a - b).abs()
        );
    }

    #[test]
    fn matmul_identity_is_noop() {
        let m = Mat::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]])
            .unwrap();
        let out = Mat::identity(3).matmul(&m).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn matmul_hand_example() {
        // [[1,2],[3,4]] x [[1],[1]] = [[3],[7]]
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Mat::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_empty_contraction_is_zero() {
        let a = Mat::new(1, 0, vec![]).unwrap();
        let b = Mat::new(0, 1, vec![]).unwrap();
        let out = a.matmul(&b).unwrap();
        assert_eq!((out.rows(), out.cols()), (1, 1));
        assert_eq!(out.get(0, 0), 0.0);
    }

    #[test]
    fn matmul_dimension_mismatch_names_shapes() {
        let a = Mat::zeros(2, 3);
        let b = Mat::zeros(2, 2);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("2x2"), "{msg}");
    }

    #[test]
    fn softmax_uniform_input() {
        for tau in [0.01, 1.0, 170.0] {
            let out = softmax_scaled(&[0.7, 0.7, 0.7], tau).unwrap();
            for &o in &out {
                approx(o, 1.0 / 3.0, 1e-15);
            }
        }
    }

    #[test]
    fn softmax_two_element_oracle() {
        // exp(1)/(exp(1)+1) and 1/(exp(1)+1), evaluated directly.
        let e = 1f64.exp();
        let out = softmax_scaled(&[1.0, 0.0], 1.0).unwrap();
        approx(out[0], e / (e + 1.0), 1e-15);
        approx(out[1], 1.0 / (e + 1.0), 1e-15);
        approx(out[0], 0.7311, 1e-4);
        approx(out[1], 0.2689, 1e-4);
    }

    #[test]
    fn softmax_survives_extreme_inputs() {
        let out = softmax_scaled(&[1000.0, 0.0], 1.0).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
        approx(out[0], 1.0, 1e-12);
        assert!(out[1] >= 0.0 && out[1] < 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_inputs() {
        assert!(softmax_scaled(&[], 1.0).is_err());
        assert!(softmax_scaled(&[1.0], 0.0).is_err());
        assert!(softmax_scaled(&[1.0], -2.0).is_err());
    }

    #[test]
    fn softmax_sums_to_one_and_preserves_order() {
        let mut rng = Rng::from_seed(11);
        for _ in 0..200 {
            let n = 2 + rng.below(12);
            let v: Vec<f64> = (0..n).map(|_| rng.uniform(-40.0, 40.0)).collect();
            let tau = rng.uniform(0.05, 20.0);
            let out = softmax_scaled(&v, tau).unwrap();
            approx(out.iter().sum::<f64>(), 1.0, 1e-12);
            for i in 0..n {
                for j in 0..n {
                    if v[i] > v[j] {
                        assert!(out[i] > out[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn variance_examples() {
        assert_eq!(variance(&[2.5, 2.5, 2.5]).unwrap(), 0.0);
        assert_eq!(variance(&[0.0, 2.0]).unwrap(), 1.0);
        // Brute-force formula: mean 2.5, deviations squared sum 5, /4.
        assert_eq!(variance(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 1.25);
        assert!(variance(&[1.0]).is_err());
    }

    #[test]
    fn variance_nonnegative_and_zero_iff_constant() {
        let mut rng = Rng::from_seed(3);
        for _ in 0..200 {
            let n = 2 + rng.below(10);
            let v: Vec<f64> = (0..n).map(|_| rng.uniform(-5.0, 5.0)).collect();
            let var = variance(&v).unwrap();
            assert!(var >= 0.0);
            let all_equal = v.iter().all(|&x| x == v[0]);
            if !all_equal {
                assert!(var > 0.0);
            }
        }
    }

    #[test]
    fn cosine_matrix_examples() {
        let x = Mat::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let y = Mat::from_rows(&[vec![1.0, 1.0], vec![-1.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let out = cosine_matrix(&x, &y).unwrap();
        approx(out.get(0, 0), 1.0, 1e-15); // identical rows
        approx(out.get(0, 1), 0.0, 1e-15); // orthogonal rows
        approx(out.get(0, 2), std::f64::consts::FRAC_1_SQRT_2, 1e-15);
    }

    #[test]
    fn cosine_matrix_zero_row_error_names_row() {
        let x = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let y = Mat::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let err = cosine_matrix(&x, &y).unwrap_err();
        match err {
            Error::ZeroNormRow { side: "x", row: 1, .. } => {}
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn cosine_matrix_unit_diagonal() {
        let mut rng = Rng::from_seed(5);
        for _ in 0..50 {
            let n = 1 + rng.below(6);
            let d = 1 + rng.below(8);
            let mut m = Mat::zeros(n, d);
            for r in 0..n {
                loop {
                    for c in 0..d {
                        m.set(r, c, rng.standard_normal());
                    }
                    if l2_norm(m.row(r)) > 1e-6 {
                        break;
                    }
                }
            }
            let out = cosine_matrix(&m, &m).unwrap();
            for i in 0..n {
                approx(out.get(i, i), 1.0, 1e-12);
            }
        }
    }

    #[test]
    fn logsumexp_examples() {
        assert_eq!(logsumexp(&[3.25]).unwrap(), 3.25);
        approx(logsumexp(&[0.0, 0.0]).unwrap(), std::f64::consts::LN_2, 1e-15);
        let big = logsumexp(&[1000.0, 0.0]).unwrap();
        assert!(big.is_finite());
        approx(big, 1000.0, 1e-12);
        assert!(logsumexp(&[]).is_err());
    }

    #[test]
    fn logsumexp_bound_on_random_vectors() {
        let mut rng = Rng::from_seed(7);
        for _ in 0..1000 {
            let n = 1 + rng.below(16);
            let v: Vec<f64> = (0..n).map(|_| rng.uniform(-30.0, 30.0)).collect();
            let lse = logsumexp(&v).unwrap();
            let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(lse >= max - 1e-12);
            assert!(lse <= max + (n as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn rng_is_reproducible() {
        let mut a = Rng::from_seed(99);
        let mut b = Rng::from_seed(99);
        for _ in 0..1000 {
            assert_eq!(a.next_f64().to_bits(), b.next_f64().to_bits());
        }
        let mut c = Rng::from_seed(100);
        let first: Vec<f64> = (0..8).map(|_| c.next_f64()).collect();
        let mut d = Rng::from_seed(99);
        let other: Vec<f64> = (0..8).map(|_| d.next_f64()).collect();
        assert_ne!(first, other);
    }

    #[test]
    fn rng_streams_are_independent() {
        let mut a = Rng::from_seed_stream(1, 0);
        let mut b = Rng::from_seed_stream(1, 1);
        let xs: Vec<f64> = (0..8).map(|_| a.next_f64()).collect();
        let ys: Vec<f64> = (0..8).map(|_| b.next_f64()).collect();
        assert_ne!(xs, ys);
    }
}
