//! Small dense linear-algebra and statistics helpers.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// `(m + mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// Solve `h x = rhs` for symmetric positive definite `h`.
///
/// `h` is symmetrized first. Fails with [`Error::NotPositiveDefinite`] when the
/// smallest eigenvalue is not positive relative to the largest.
pub fn spd_solve(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if h.nrows() != h.ncols() || h.nrows() != rhs.len() {
        return Err(Error::ShapeMismatch(format!(
            "spd_solve: {}x{} system with rhs of length {}",
            h.nrows(),
            h.ncols(),
            rhs.len()
        )));
    }
    let hs = symmetrize(h);
    let ev = sym_eigenvalues(&hs);
    let (lo, hi) = (ev[0], *ev.last().unwrap());
    if !(lo > hi.abs() * 1e-13) {
        return Err(Error::NotPositiveDefinite { min_eigenvalue: lo });
    }
    let chol = hs
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { min_eigenvalue: lo })?;
    Ok(chol.solve(rhs))
}

/// Running mean and variance of fixed-length vectors (Welford, mergeable).
#[derive(Clone, Debug)]
pub struct RunningStats {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningStats {
    pub fn new(len: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn push(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.mean.len());
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
    }

    /// Combine with another accumulator (Chan et al. parallel update).
    pub fn merge(&mut self, other: &RunningStats) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * nb / n;
            self.m2[i] += other.m2[i] + delta * delta * na * nb / n;
        }
        self.count += other.count;
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Unbiased sample variance per entry.
    pub fn variance(&self) -> Vec<f64> {
        let d = (self.count.max(2) - 1) as f64;
        self.m2.iter().map(|s| s / d).collect()
    }

    /// Standard error of the mean per entry.
    pub fn std_error(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.variance().iter().map(|v| (v / n).sqrt()).collect()
    }
}

/// Accumulate `f(i)` for `i in 0..count` into [`RunningStats`] in parallel.
///
/// Work is split into fixed-size chunks merged in index order, so the result
/// does not depend on the number of threads.
pub fn par_stats<F>(count: u64, len: usize, f: F) -> RunningStats
where
    F: Fn(u64, &mut Vec<f64>) + Sync,
{
    const CHUNK: u64 = 4096;
    let chunks = count.div_ceil(CHUNK);
    let parts: Vec<RunningStats> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = RunningStats::new(len);
            let mut buf = vec![0.0; len];
            for i in c * CHUNK..((c + 1) * CHUNK).min(count) {
                f(i, &mut buf);
                acc.push(&buf);
            }
            acc
        })
        .collect();
    let mut total = RunningStats::new(len);
    for p in &parts {
        total.merge(p);
    }
    total
}

/// Mean of per-index matrices in fixed chunks, returning per-chunk means too.
///
/// Used for block bootstraps: `blocks` chunk means of equal size.
pub fn par_block_means<F>(count: u64, blocks: u64, rows: usize, f: F) -> Vec<DMatrix<f64>>
where
    F: Fn(u64, &mut DMatrix<f64>) + Sync,
{
    let blocks = blocks.clamp(1, count.max(1));
    (0..blocks)
        .into_par_iter()
        .map(|b| {
            let lo = b * count / blocks;
            let hi = (b + 1) * count / blocks;
            let mut acc = DMatrix::zeros(rows, rows);
            let mut buf = DMatrix::zeros(rows, rows);
            for i in lo..hi {
                f(i, &mut buf);
                acc += &buf;
            }
            acc / ((hi - lo).max(1) as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_stats_matches_two_pass() {
        let xs = [1.0, 4.0, -2.0, 7.5, 3.25];
        let mut a = RunningStats::new(1);
        for &x in &xs[..2] {
            a.push(&[x]);
        }
        let mut b = RunningStats::new(1);
        for &x in &xs[2..] {
            b.push(&[x]);
        }
        a.merge(&b);
        let mean = xs.iter().sum::<f64>() / 5.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((a.mean()[0] - mean).abs() < 1e-14);
        assert!((a.variance()[0] - var).abs() < 1e-12);
    }

    #[test]
    fn spd_solve_rejects_singular() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let r = spd_solve(&h, &DVector::from_vec(vec![1.0, 1.0]));
        assert!(matches!(r, Err(Error::NotPositiveDefinite { .. })));
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let x = spd_solve(&h, &DVector::from_vec(vec![3.0, 3.0])).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
    }
}
