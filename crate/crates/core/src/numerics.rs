//! Dense vector/matrix arithmetic, stable softmax, the seeded generator and a
//! central finite-difference gradient checker.
//!
//! Vectors are plain `&[f64]` slices; every fallible entry point rejects
//! non-finite values so nothing downstream ever stores a NaN.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dim(rows * cols, data.len())?;
        check_finite(&data)?;
        Ok(Mat { rows, cols, data })
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim(cols, r.as_ref().len())?;
            data.extend_from_slice(r.as_ref());
        }
        Mat::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Keeps only the listed columns, in order.
    pub fn select_cols(&self, cols: &[usize]) -> Mat {
        let mut out = Mat::zeros(self.rows, cols.len());
        for r in 0..self.rows {
            for (j, &c) in cols.iter().enumerate() {
                out.set(r, j, self.get(r, c));
            }
        }
        out
    }

    /// Appends one column per entry of `columns`; each entry has `rows` values.
    pub fn append_cols(&self, columns: &[Vec<f64>]) -> Result<Mat> {
        for c in columns {
            check_dim(self.rows, c.len())?;
            check_finite(c)?;
        }
        let cols = self.cols + columns.len();
        let mut out = Mat::zeros(self.rows, cols);
        for r in 0..self.rows {
            out.row_mut(r)[..self.cols].copy_from_slice(self.row(r));
            for (j, c) in columns.iter().enumerate() {
                out.set(r, self.cols + j, c[r]);
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` where `op` optionally transposes.
pub fn gemm(alpha: f64, a: &Mat, trans_a: bool, b: &Mat, trans_b: bool, beta: f64, c: &mut Mat) {
    let (m, k, rsa, csa) = if trans_a {
        (a.cols, a.rows, 1isize, a.cols as isize)
    } else {
        (a.rows, a.cols, a.cols as isize, 1isize)
    };
    let (kb, n, rsb, csb) = if trans_b {
        (b.cols, b.rows, 1isize, b.cols as isize)
    } else {
        (b.rows, b.cols, b.cols as isize, 1isize)
    };
    assert_eq!(k, kb, "gemm inner dimensions");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.data.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: strides and extents are derived from the owning matrices and
    // checked against the output shape above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

pub fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::InvalidInput(format!("non-finite value at index {i}"))),
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Arithmetic mean of equal-length vectors.
pub fn mean_vector<R: AsRef<[f64]>>(vectors: &[R]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Degenerate("mean of an empty set".into()))?;
    let d = first.as_ref().len();
    let mut acc = vec![0.0; d];
    for v in vectors {
        check_dim(d, v.as_ref().len())?;
        axpy(1.0, v.as_ref(), &mut acc);
    }
    let n = vectors.len() as f64;
    acc.iter_mut().for_each(|x| *x /= n);
    Ok(acc)
}

pub fn argmax(values: &[f64]) -> usize {
    // strict comparison keeps the lowest index on ties
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn validate_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && !temperature.is_nan() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("temperature must be positive, got {temperature}")))
    }
}

/// `log Σ exp(z_i)` with max subtraction.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Temperature-scaled log-probabilities, `z/T - lse(z/T)`.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    validate_temperature(temperature)?;
    check_finite(logits)?;
    if logits.is_empty() {
        return Err(Error::InvalidInput("empty logits".into()));
    }
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    let lse = log_sum_exp(&scaled);
    Ok(scaled.iter().map(|z| z - lse).collect())
}

pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    validate_temperature(temperature)?;
    check_finite(logits)?;
    if logits.is_empty() {
        return Err(Error::InvalidInput("empty logits".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| ((z - max) / temperature).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero-norm vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::InvalidInput(format!("step {h} outside [1e-6, 1e-3]")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite evaluation along coordinate {i}")));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, or the absolute gap when both are tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let gap = norm(&sub(a, b));
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        gap
    } else {
        gap / scale
    }
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// SplitMix64 generator in counter form: draw `i` is `mix64(seed + (i+1)·γ)`
/// with γ = 0x9E3779B97F4A7C15. Bit-exact on every platform.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, counter: 0 }
    }

    pub fn from_parts(seed: u64, counter: u64) -> Self {
        Rng { seed, counter }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Independent stream keyed by `(seed, stream)`; does not advance `self`.
    pub fn derive(&self, stream: u64) -> Rng {
        Rng::new(mix64(self.seed ^ mix64(stream.wrapping_add(GOLDEN_GAMMA))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on the open interval `(0, 1)`.
    pub fn open_unit(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `0..n` by rejection; `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller, one value per call.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.open_unit();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, uniformly, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let k = k.min(n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, proptest};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0], 1.0).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[1.0, 0.0], 1.0).unwrap();
        // e/(e+1)
        let e = std::f64::consts::E;
        assert!(close(p[0], e / (e + 1.0), 1e-15));
        assert!(close(p[0], 0.73106, 1e-5) && close(p[1], 0.26894, 1e-5));
        let hot = softmax(&[1.0, 0.0], 1e9).unwrap();
        assert!(close(hot[0], 0.5, 1e-9));
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax(&[f64::NAN, 0.0], 1.0).is_err());
        assert!(softmax(&[f64::INFINITY], 1.0).is_err());
        assert!(softmax(&[1.0], 0.0).is_err());
        assert!(softmax(&[1.0], -2.0).is_err());
    }

    #[test]
    fn softmax_huge_logits_stay_finite() {
        let p = softmax(&[1000.0, 999.0, -1000.0], 1.0).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        let lp = log_softmax(&[1000.0, -1000.0], 1.0).unwrap();
        assert!(close(lp[0], 0.0, 1e-12));
        assert!(close(lp[1], -2000.0, 1e-9));
    }

    #[test]
    fn distance_examples() {
        assert_eq!(euclidean_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(euclidean_distance(&[1.5, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
        assert_eq!(euclidean_distance(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert!(matches!(
            euclidean_distance(&[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn cosine_examples() {
        assert!(close(cosine_similarity(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 1.0, 1e-15));
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_gradient(|x| dot(x, x), &[1.0, 2.0], 1e-5).unwrap();
        assert!(close(g[0], 2.0, 1e-6) && close(g[1], 4.0, 1e-6));
        let g = finite_diff_gradient(|_| 3.5, &[1.0, -7.0, 2.0], 1e-5).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        let w = [0.5, -1.25, 3.0];
        let g = finite_diff_gradient(|x| dot(x, &w), &[0.1, 0.2, 0.3], 1e-5).unwrap();
        for (gi, wi) in g.iter().zip(&w) {
            assert!(close(*gi, *wi, 1e-6));
        }
    }

    #[test]
    fn finite_diff_rejects_bad_step_and_nan() {
        assert!(finite_diff_gradient(|x| x[0], &[1.0], 1e-2).is_err());
        assert!(finite_diff_gradient(|x| x[0].ln(), &[0.0], 1e-5).is_err());
    }

    #[test]
    fn finite_diff_matches_quadratic_forms() {
        let mut rng = Rng::new(11);
        for _ in 0..20 {
            let n = 1 + rng.below(6);
            let a: Vec<f64> = (0..n * n).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let x: Vec<f64> = (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect();
            // f = x^T A x, grad = (A + A^T) x
            let f = |v: &[f64]| {
                let mut s = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        s += v[i] * a[i * n + j] * v[j];
                    }
                }
                s
            };
            let analytic: Vec<f64> = (0..n)
                .map(|i| (0..n).map(|j| (a[i * n + j] + a[j * n + i]) * x[j]).sum())
                .collect();
            let numeric = finite_diff_gradient(f, &x, 1e-5).unwrap();
            assert!(relative_error(&analytic, &numeric) < 1e-5);
        }
    }

    #[test]
    fn rng_reference_values() {
        // SplitMix64 with seed 0: first output is the published reference value.
        let mut r = Rng::new(0);
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(r.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let resumed = Rng::from_parts(a.seed(), a.counter());
        assert_eq!(resumed, a);
    }

    #[test]
    fn rng_ranges() {
        let mut r = Rng::new(5);
        for _ in 0..10_000 {
            let u = r.open_unit();
            assert!(u > 0.0 && u < 1.0);
            assert!(r.below(7) < 7);
        }
        let picks = r.sample_indices(10, 4);
        let mut sorted = picks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 4);
        assert_eq!(r.sample_indices(3, 10).len(), 3);
    }

    #[test]
    fn gemm_matches_naive() {
        let mut rng = Rng::new(3);
        let a = Mat::from_vec(3, 4, (0..12).map(|_| rng.normal()).collect()).unwrap();
        let b = Mat::from_vec(4, 2, (0..8).map(|_| rng.normal()).collect()).unwrap();
        let mut c = Mat::zeros(3, 2);
        gemm(1.0, &a, false, &b, false, 0.0, &mut c);
        for i in 0..3 {
            for j in 0..2 {
                let naive: f64 = (0..4).map(|k| a.get(i, k) * b.get(k, j)).sum();
                assert!(close(c.get(i, j), naive, 1e-12));
            }
        }
        let at = a.transpose();
        let mut c2 = Mat::zeros(3, 2);
        gemm(1.0, &at, true, &b, false, 0.0, &mut c2);
        assert_eq!(c, c2);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            z in prop::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
            t in 0.5f64..10.0,
        ) {
            let p = softmax(&z, t).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|v| *v > 0.0 && *v <= 1.0));
            let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
            let q = softmax(&shifted, t).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn triangle_inequality(
            a in prop::collection::vec(-10.0f64..10.0, 4),
            b in prop::collection::vec(-10.0f64..10.0, 4),
            c in prop::collection::vec(-10.0f64..10.0, 4),
        ) {
            let ab = euclidean_distance(&a, &b).unwrap();
            let bc = euclidean_distance(&b, &c).unwrap();
            let ac = euclidean_distance(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-9);
            prop_assert!((ab - euclidean_distance(&b, &a).unwrap()).abs() < 1e-15);
        }
    }
}
