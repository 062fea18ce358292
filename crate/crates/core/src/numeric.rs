//! Dense row-major matrices, activations, the seeded generator and a
//! central-difference gradient oracle.
//!
//! Everything here is 64-bit and sequential: a reduction always runs in the
//! same order, so two runs with the same inputs agree bit for bit.

use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Dense `rows x cols` matrix of `f64`, row-major. Instances are rows.
#[derive(Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for FeatureMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FeatureMatrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list()
                .entries(self.data.chunks(self.cols.max(1)))
                .finish()?;
        }
        Ok(())
    }
}

impl FeatureMatrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Domain(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "matrix entry ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::Domain(format!(
                "ragged rows: row {bad} has {} values, expected {cols}",
                rows[bad].len()
            )));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// A single-row matrix.
    pub fn row_vector(values: &[f64]) -> Result<Self> {
        Self::new(1, values.len(), values.to_vec())
    }

    /// Entries drawn uniformly from `[-scale, scale)`.
    pub fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut SeededRng) -> Self {
        let data = (0..rows * cols)
            .map(|_| scale * (2.0 * rng.uniform() - 1.0))
            .collect();
        Self { rows, cols, data }
    }

    /// Entries drawn from `N(0, std^2)`.
    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Self {
        let data = (0..rows * cols).map(|_| std * rng.normal()).collect();
        Self { rows, cols, data }
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
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks(0) panics, and a 0-column matrix still has `rows` empty rows.
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// `self * other`.
    pub fn matmul(&self, other: &FeatureMatrix) -> Result<FeatureMatrix> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let (n, m) = (self.rows, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(FeatureMatrix {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// `self^T * other`; both operands share their row count.
    pub fn matmul_tn(&self, other: &FeatureMatrix) -> Result<FeatureMatrix> {
        if self.rows != other.rows {
            return Err(Error::shape("matmul_tn", self.shape(), other.shape()));
        }
        let (n, m) = (self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for r in 0..self.rows {
            let right = other.row(r);
            for (i, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out[i * m..(i + 1) * m].iter_mut().zip(right) {
                    *o += a * b;
                }
            }
        }
        Ok(FeatureMatrix {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// `self * other^T`; both operands share their column count.
    pub fn matmul_nt(&self, other: &FeatureMatrix) -> Result<FeatureMatrix> {
        if self.cols != other.cols {
            return Err(Error::shape("matmul_nt", self.shape(), other.shape()));
        }
        let (n, m) = (self.rows, other.rows);
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let left = self.row(i);
            for j in 0..m {
                out.push(dot(left, other.row(j)));
            }
        }
        Ok(FeatureMatrix {
            rows: n,
            cols: m,
            data: out,
        })
    }

    pub fn transpose(&self) -> FeatureMatrix {
        let mut out = FeatureMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Adds `bias` to every row in place.
    pub fn add_row_vector(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::shape(
                "add_row_vector",
                self.shape(),
                (1, bias.len()),
            ));
        }
        if self.cols == 0 {
            return Ok(());
        }
        for row in self.data.chunks_mut(self.cols) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> FeatureMatrix {
        FeatureMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    pub fn zip_map(
        &self,
        other: &FeatureMatrix,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<FeatureMatrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape("zip_map", self.shape(), other.shape()));
        }
        Ok(FeatureMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sub(&self, other: &FeatureMatrix) -> Result<FeatureMatrix> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &FeatureMatrix) -> Result<FeatureMatrix> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn hadamard(&self, other: &FeatureMatrix) -> Result<FeatureMatrix> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> FeatureMatrix {
        self.map(|v| v * s)
    }

    /// Sum over rows: one value per column.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for row in self.row_iter() {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.row_iter().map(|r| r.iter().sum()).collect()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Horizontal concatenation `[left | right]`.
    pub fn hstack(left: &FeatureMatrix, right: &FeatureMatrix) -> Result<FeatureMatrix> {
        if left.rows != right.rows {
            return Err(Error::shape("hstack", left.shape(), right.shape()));
        }
        let cols = left.cols + right.cols;
        let mut data = Vec::with_capacity(left.rows * cols);
        for r in 0..left.rows {
            data.extend_from_slice(left.row(r));
            data.extend_from_slice(right.row(r));
        }
        Ok(FeatureMatrix {
            rows: left.rows,
            cols,
            data,
        })
    }

    /// Vertical concatenation.
    pub fn vstack(parts: &[&FeatureMatrix]) -> Result<FeatureMatrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for part in parts {
            if part.cols != cols {
                return Err(Error::shape("vstack", (rows, cols), part.shape()));
            }
            data.extend_from_slice(&part.data);
            rows += part.rows;
        }
        Ok(FeatureMatrix { rows, cols, data })
    }

    /// Columns `[start, end)` as a new matrix.
    pub fn column_slice(&self, start: usize, end: usize) -> FeatureMatrix {
        assert!(
            start <= end && end <= self.cols,
            "column range out of bounds"
        );
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for row in self.row_iter() {
            data.extend_from_slice(&row[start..end]);
        }
        FeatureMatrix {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    pub fn select_rows(&self, indices: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise logistic function.
pub fn sigmoid(x: &FeatureMatrix) -> FeatureMatrix {
    x.map(sigmoid_scalar)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &FeatureMatrix) -> FeatureMatrix {
    let mut out = x.clone();
    for r in 0..out.rows {
        softmax_inplace(out.row_mut(r));
    }
    out
}

pub fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Domain(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at coordinate {i} (f(x+h)={plus}, f(x-h)={minus})"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Seeded pseudo-random source.
///
/// Backed by ChaCha8 (`rand_chacha`), whose output stream is fixed by the
/// seed and independent of platform and endianness. Normal deviates use the
/// Ziggurat sampler from `rand_distr`.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent generator for a named sub-stream. The result depends
    /// only on this generator's seed and `stream`, not on how many samples
    /// have been drawn so far.
    pub fn derive(&self, stream: u64) -> SeededRng {
        SeededRng::new(splitmix64(
            self.seed ^ splitmix64(stream.wrapping_add(0x51_7cc1_b727_220a)),
        ))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// 1.0 with probability `p`, else 0.0.
    pub fn bernoulli(&mut self, p: f64) -> f64 {
        if self.uniform() < p {
            1.0
        } else {
            0.0
        }
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Counts from `draws` independent categorical draws over `probs`.
    pub fn multinomial(&mut self, probs: &[f64], draws: usize) -> Vec<f64> {
        let mut cumulative = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for &p in probs {
            acc += p;
            cumulative.push(acc);
        }
        let mut counts = vec![0.0; probs.len()];
        if probs.is_empty() {
            return counts;
        }
        for _ in 0..draws {
            let u = self.uniform() * acc;
            let idx = cumulative.partition_point(|&c| c <= u).min(probs.len() - 1);
            counts[idx] += 1.0;
        }
        counts
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> FeatureMatrix {
        FeatureMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_hand_case() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[1.0], &[1.0]]);
        assert_eq!(a.matmul(&b).unwrap(), m(&[&[3.0], &[7.0]]));
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut rng = SeededRng::new(3);
        let x = FeatureMatrix::gaussian(3, 5, 1.0, &mut rng);
        assert_eq!(FeatureMatrix::identity(3).matmul(&x).unwrap(), x);
        let z = x.matmul(&FeatureMatrix::zeros(5, 2)).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = FeatureMatrix::zeros(2, 3)
            .matmul(&FeatureMatrix::zeros(4, 1))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("4x1"), "{msg}");
    }

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let mut rng = SeededRng::new(11);
        let a = FeatureMatrix::gaussian(4, 3, 1.0, &mut rng);
        let b = FeatureMatrix::gaussian(4, 5, 1.0, &mut rng);
        let tn = a.matmul_tn(&b).unwrap();
        let plain = a.transpose().matmul(&b).unwrap();
        for (x, y) in tn.as_slice().iter().zip(plain.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
        let c = FeatureMatrix::gaussian(6, 3, 1.0, &mut rng);
        let nt = a.matmul_nt(&c).unwrap();
        let plain = a.matmul(&c.transpose()).unwrap();
        for (x, y) in nt.as_slice().iter().zip(plain.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(FeatureMatrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(FeatureMatrix::new(1, 2, vec![1.0]).is_err());
    }

    #[test]
    fn sigmoid_and_softmax_basics() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        let s = softmax_rows(&FeatureMatrix::zeros(1, 4));
        assert_eq!(s.row(0), &[0.25; 4]);
        // large logits stay finite
        let big = softmax_rows(&m(&[&[1000.0, -1000.0, 0.0]]));
        assert!(big.is_finite());
        assert!((big.row_sums()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 3.0], 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let g = finite_diff_grad(|x| x.iter().sum(), &[0.3, -7.0, 2.5, 9.0], 1e-5).unwrap();
        assert!(g.iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn finite_diff_reports_non_finite_objective() {
        let err = finite_diff_grad(|x| x[0].ln(), &[0.0], 1e-5).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert!(finite_diff_grad(|x| x[0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn finite_diff_error_is_second_order() {
        // cubic term gives a nonzero h^2 truncation error
        let f = |x: &[f64]| x[0].powi(3) + 2.0 * x[0] * x[0];
        let exact = 3.0 * 1.5f64.powi(2) + 4.0 * 1.5;
        let e1 = (finite_diff_grad(f, &[1.5], 1e-2).unwrap()[0] - exact).abs();
        let e2 = (finite_diff_grad(f, &[1.5], 5e-3).unwrap()[0] - exact).abs();
        assert!(e1 / e2 >= 3.0, "ratio {}", e1 / e2);
    }

    #[test]
    fn rng_streams_are_reproducible() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..1_000_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = SeededRng::new(43);
        assert_ne!(SeededRng::new(42).next_u64(), c.next_u64());
    }

    #[test]
    fn derived_streams_ignore_parent_position() {
        let a = SeededRng::new(5);
        let mut b = SeededRng::new(5);
        b.uniform();
        assert_eq!(a.derive(9).next_u64(), b.derive(9).next_u64());
        assert_ne!(a.derive(9).next_u64(), a.derive(10).next_u64());
    }

    #[test]
    fn multinomial_counts_sum_to_draws() {
        let mut rng = SeededRng::new(1);
        let counts = rng.multinomial(&[0.1, 0.2, 0.7], 57);
        assert_eq!(counts.iter().sum::<f64>(), 57.0);
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in 0u64..1000, n in 1usize..6, k in 1usize..6, l in 1usize..6, p in 1usize..6) {
            let mut rng = SeededRng::new(seed);
            let a = FeatureMatrix::gaussian(n, k, 1.0, &mut rng);
            let b = FeatureMatrix::gaussian(k, l, 1.0, &mut rng);
            let c = FeatureMatrix::gaussian(l, p, 1.0, &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.as_slice().iter().fold(1.0f64, |s, v| s.max(v.abs()));
            for (x, y) in left.as_slice().iter().zip(right.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-9 * scale);
            }
        }

        #[test]
        fn sigmoid_is_symmetric(x in -50.0f64..50.0) {
            let s = sigmoid_scalar(x) + sigmoid_scalar(-x);
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn softmax_rows_sum_to_one(values in proptest::collection::vec(-30.0f64..30.0, 1..12)) {
            let s = softmax_rows(&FeatureMatrix::row_vector(&values).unwrap());
            prop_assert!((s.row_sums()[0] - 1.0).abs() < 1e-12);
            prop_assert!(s.as_slice().iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }
}
