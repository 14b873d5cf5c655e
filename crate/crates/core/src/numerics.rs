//! Dense row-major matrices, a reproducible RNG and the order-sensitive
//! selection primitives used everywhere else in the crate.
//!
//! Everything here is deterministic: equal inputs give bit-identical outputs,
//! and sorts break ties toward the lower index.

use std::cmp::Ordering;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::shape(format!("non-finite entry at flat index {pos}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
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

    pub fn into_data(self) -> Vec<f64> {
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

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    /// Copies the column block `[start, start + width)` into a new matrix.
    pub fn col_block(&self, start: usize, width: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    /// Copies the row block `[start, start + height)` into a new matrix.
    pub fn row_block(&self, start: usize, height: usize) -> Matrix {
        Matrix {
            rows: height,
            cols: self.cols,
            data: self.data[start * self.cols..(start + height) * self.cols].to_vec(),
        }
    }
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Row vector times matrix, written into `out` (length `m.cols()`).
pub fn vecmat_into(v: &[f64], m: &Matrix, out: &mut [f64]) {
    debug_assert_eq!(v.len(), m.rows);
    debug_assert_eq!(out.len(), m.cols);
    out.fill(0.0);
    for (k, &vk) in v.iter().enumerate() {
        if vk == 0.0 {
            continue;
        }
        for (o, &mkj) in out.iter_mut().zip(m.row(k)) {
            *o += vk * mkj;
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// In-place softmax of `xs * scale` with max subtraction. `-inf` entries
/// become exactly 0; a row that is entirely `-inf` becomes all zeros.
pub fn softmax_in_place(xs: &mut [f64], scale: f64) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        xs.fill(0.0);
        return;
    }
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = if *x == f64::NEG_INFINITY {
            0.0
        } else {
            ((*x - max) * scale).exp()
        };
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax_rows(m: &Matrix, scale: f64) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r), scale);
    }
    out
}

/// Descending order comparator on `(value, index)` pairs: larger value
/// first, then lower index.
#[inline]
pub fn desc_then_index(a: (f64, usize), b: (f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Stable descending argsort; ties keep the lower original index first.
pub fn argsort_desc(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| desc_then_index((v[a], a), (v[b], b)));
    idx
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `floor((1 - ratio) * total)`, tolerant of the representation error in
/// `1 - ratio` (0.9 is not exact in binary, yet 0.1 * 40 must give 4).
pub fn retained_count(ratio: f64, total: usize) -> usize {
    let raw = (1.0 - ratio) * total as f64;
    let nearest = raw.round();
    let kept = if (raw - nearest).abs() <= 1e-9 * (total.max(1) as f64) {
        nearest
    } else {
        raw.floor()
    };
    (kept.max(0.0) as usize).min(total)
}

/// SplitMix64: `state += 0x9E3779B97F4A7C15`, then the output is the state
/// passed through the standard xor-shift-multiply finalizer. Being a pure
/// counter-plus-mix generator it is trivial to reproduce in any language.
#[derive(Debug, Clone)]
pub struct SeededRng {
    state: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller (one draw per call, two uniforms used).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Lemire's multiply-shift; the bias is < n / 2^64.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// `k` distinct values from `[0, n)` in draw order.
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }

    /// Derives an independent stream for a sub-task.
    pub fn fork(&mut self) -> SeededRng {
        SeededRng::new(self.next_u64())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.normal()).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_selector() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2), &m).unwrap(), m);

        let sel = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let col = Matrix::from_rows(&[vec![5.0], vec![7.0]]).unwrap();
        assert_eq!(matmul(&sel, &col).unwrap().data(), &[5.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = SeededRng::new(11);
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 4, 2);
        let fast = matmul(&a, &b).unwrap();
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![1.0]).is_err());
    }

    #[test]
    fn softmax_closed_forms() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0], vec![2f64.ln(), 0.0]]).unwrap();
        let s = softmax_rows(&m, 1.0);
        assert!((s.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((s.get(1, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_masks_neg_inf_to_zero() {
        let mut row = vec![1.0, f64::NEG_INFINITY, 0.5];
        softmax_in_place(&mut row, 1.0);
        assert_eq!(row[1], 0.0);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let mut dead = vec![f64::NEG_INFINITY; 3];
        softmax_in_place(&mut dead, 1.0);
        assert_eq!(dead, vec![0.0; 3]);
    }

    #[test]
    fn softmax_matches_direct_exponentiation() {
        let mut rng = SeededRng::new(5);
        let m = random_matrix(&mut rng, 3, 5);
        let scale = 1.0 / 8f64.sqrt();
        let s = softmax_rows(&m, scale);
        for r in 0..3 {
            let exps: Vec<f64> = m.row(r).iter().map(|x| (x * scale).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..5 {
                assert!((s.get(r, c) - exps[c] / z).abs() < 1e-12);
            }
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn argsort_examples() {
        assert_eq!(argsort_desc(&[0.2, 0.9, 0.5]), vec![1, 2, 0]);
        assert_eq!(argsort_desc(&[1.0, 1.0, 0.0]), vec![0, 1, 2]);
        assert!(argsort_desc(&[]).is_empty());
    }

    #[test]
    fn argsort_matches_pair_sort_oracle() {
        let mut rng = SeededRng::new(3);
        // Coarse values so that ties actually occur.
        let v: Vec<f64> = (0..64).map(|_| rng.below(10) as f64).collect();
        let mut pairs: Vec<(f64, usize)> = v.iter().copied().zip(0..).collect();
        // Insertion sort with the same tie rule, written independently.
        for i in 1..pairs.len() {
            let mut j = i;
            while j > 0 {
                let (pv, pi) = pairs[j - 1];
                let (cv, ci) = pairs[j];
                if cv > pv || (cv == pv && ci < pi) {
                    pairs.swap(j - 1, j);
                    j -= 1;
                } else {
                    break;
                }
            }
        }
        let oracle: Vec<usize> = pairs.into_iter().map(|p| p.1).collect();
        assert_eq!(argsort_desc(&v), oracle);
    }

    #[test]
    fn retained_count_handles_inexact_ratios() {
        assert_eq!(retained_count(0.9, 40), 4);
        assert_eq!(retained_count(0.5, 6), 3);
        assert_eq!(retained_count(0.0, 17), 17);
        assert_eq!(retained_count(1.0, 17), 0);
        let total = 2 * 3 * 7;
        assert_eq!(retained_count(1.0 - 1.0 / total as f64, total), 1);
        assert_eq!(retained_count(0.25, 10), 7);
    }

    #[test]
    fn rng_is_reproducible() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        // Reference value of SplitMix64 seeded with 0.
        assert_eq!(SeededRng::new(0).next_u64(), 0xE220_A839_7B1D_CDAF);
    }

    #[test]
    fn sample_distinct_is_distinct() {
        let mut rng = SeededRng::new(1);
        let mut s = rng.sample_distinct(20, 20);
        s.sort_unstable();
        assert_eq!(s, (0..20).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(v in proptest::collection::vec(-50.0f64..50.0, 1..40)) {
            let mut row = v.clone();
            softmax_in_place(&mut row, 0.7);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            // Monotone: larger input never gets smaller probability.
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] > v[j] {
                        prop_assert!(row[i] >= row[j]);
                    }
                }
            }
        }

        #[test]
        fn argsort_is_sorting_permutation(v in proptest::collection::vec(-5i32..5, 0..80)) {
            let v: Vec<f64> = v.into_iter().map(f64::from).collect();
            let idx = argsort_desc(&v);
            let mut seen = idx.clone();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..v.len()).collect::<Vec<_>>());
            for w in idx.windows(2) {
                prop_assert!(v[w[0]] >= v[w[1]]);
                if v[w[0]] == v[w[1]] {
                    prop_assert!(w[0] < w[1]);
                }
            }
        }
    }
}
