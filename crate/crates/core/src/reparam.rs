//! The enlarged parameter space of one-layer sparse attention.
//!
//! For `d` covariates let `m = (d+1)(d+2)/2`. A vector `X` of length `d*m`
//! has one block of length `m` per column `j` of `A`, indexed within the block
//! by the row-major rank of a pair `i <= k` in the upper triangle. Writing
//! `g` for the upper triangle of the context Gram matrix, one-layer sparse
//! attention predicts `<x_query ⊗ g, phi(b, A)>` exactly.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{invalid, shape, Error, Result};
use crate::linalg::{sym_eigenvalues, symmetrize};
use crate::markov_data::{gram_matrix, Prompt, PromptSampler};
use crate::rng::{domain, substream};

/// Number of pairs `i <= k` over `d + 1` indices.
pub fn pair_count(d: usize) -> usize {
    (d + 1) * (d + 2) / 2
}

/// 1-based row-major rank of `(i, k)`, `1 <= i <= k <= d + 1`.
pub fn pair_index(i: usize, k: usize, d: usize) -> Result<usize> {
    if i == 0 || i > k || k > d + 1 {
        return Err(invalid(format!(
            "pair ({i}, {k}) is not an upper-triangle pair for d = {d}"
        )));
    }
    Ok(pair_index0(i - 1, k - 1, d) + 1)
}

/// 0-based rank of the 0-based pair `(i, k)`, `i <= k <= d`.
pub(crate) fn pair_index0(i: usize, k: usize, d: usize) -> usize {
    i * (d + 1) - i * i.saturating_sub(1) / 2 + (k - i)
}

/// All 0-based pairs in rank order.
pub fn pairs0(d: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::with_capacity(pair_count(d));
    for i in 0..=d {
        for k in i..=d {
            v.push((i, k));
        }
    }
    v
}

/// A point of the enlarged parameter space.
#[derive(Clone, Debug, PartialEq)]
pub struct ReparamVector {
    d: usize,
    x: DVector<f64>,
}

impl ReparamVector {
    pub fn new(d: usize, x: DVector<f64>) -> Result<Self> {
        if d == 0 || x.len() != d * pair_count(d) {
            return Err(shape(format!(
                "expected length {} for d = {d}, got {}",
                d * pair_count(d),
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(invalid("reparameterized vector has non-finite entries"));
        }
        Ok(Self { d, x })
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            d,
            x: DVector::zeros(d * pair_count(d)),
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        pair_count(self.d)
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.x
    }

    /// Entry for column `j` and pair `(i, k)`, all 1-based.
    pub fn get(&self, j: usize, i: usize, k: usize) -> Result<f64> {
        if j == 0 || j > self.d {
            return Err(invalid(format!("column {j} out of range")));
        }
        Ok(self.x[(j - 1) * self.m() + pair_index(i, k, self.d)? - 1])
    }

    /// Block of column `j` (0-based).
    pub fn block(&self, j: usize) -> DVector<f64> {
        self.x.rows(j * self.m(), self.m()).into_owned()
    }

    /// `(j, i, k)` annotations (1-based) in storage order.
    pub fn annotations(d: usize) -> Vec<(usize, usize, usize)> {
        let pairs = pairs0(d);
        (0..d)
            .flat_map(|j| pairs.iter().map(move |&(i, k)| (j + 1, i + 1, k + 1)))
            .collect()
    }
}

/// `X_{(j-1)m + pair(i,k)} = b_i A_{k,j}` if `i = k`, else `b_i A_{k,j} + b_k A_{i,j}`.
pub fn phi(b: &DVector<f64>, a: &DMatrix<f64>) -> Result<ReparamVector> {
    let d = b
        .len()
        .checked_sub(1)
        .filter(|&d| d >= 1)
        .ok_or_else(|| shape("b needs length >= 2"))?;
    if a.shape() != (d + 1, d) {
        return Err(shape(format!(
            "A must be {}x{d}, got {}x{}",
            d + 1,
            a.nrows(),
            a.ncols()
        )));
    }
    let pairs = pairs0(d);
    let m = pairs.len();
    let mut x = DVector::zeros(d * m);
    for j in 0..d {
        for (r, &(i, k)) in pairs.iter().enumerate() {
            x[j * m + r] = if i == k {
                b[i] * a[(k, j)]
            } else {
                b[i] * a[(k, j)] + b[k] * a[(i, j)]
            };
        }
    }
    Ok(ReparamVector { d, x })
}

/// `x_query ⊗ g`.
pub fn features(prompt: &Prompt) -> DVector<f64> {
    let g = gram_upper(prompt);
    let xq = prompt.query_x();
    let m = g.len();
    let mut f = DVector::zeros(prompt.d() * m);
    for j in 0..prompt.d() {
        f.rows_mut(j * m, m).copy_from(&(&g * xq[j]));
    }
    f
}

fn gram_upper(prompt: &Prompt) -> DVector<f64> {
    crate::markov_data::upper_triangle(&gram_matrix(prompt))
}

/// `<features(prompt), x>` without forming the Kronecker product.
pub fn predict_reparam(x: &ReparamVector, prompt: &Prompt) -> Result<f64> {
    if prompt.d() != x.d {
        return Err(shape(format!(
            "prompt has d = {}, vector has d = {}",
            prompt.d(),
            x.d
        )));
    }
    let g = gram_upper(prompt);
    let xq = prompt.query_x();
    let m = g.len();
    Ok((0..x.d).map(|j| xq[j] * g.dot(&x.x.rows(j * m, m))).sum())
}

/// Mean squared error of the linear model on the features.
pub fn reparam_loss(x: &ReparamVector, prompts: &[Prompt]) -> Result<f64> {
    if prompts.is_empty() {
        return Err(invalid("empty batch"));
    }
    let errs: Vec<f64> = prompts
        .par_iter()
        .map(|p| predict_reparam(x, p).map(|y| (y - p.label()).powi(2)))
        .collect::<Result<_>>()?;
    Ok(errs.iter().sum::<f64>() / prompts.len() as f64)
}

/// Feature second moments `F^T F / B` and `F^T y / B`.
pub fn normal_equations(prompts: &[Prompt]) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let first = prompts.first().ok_or_else(|| invalid("empty batch"))?;
    let d = first.d();
    let dm = d * pair_count(d);
    if prompts.iter().any(|p| p.d() != d) {
        return Err(shape("prompts disagree on d"));
    }
    const CHUNK: usize = 1024;
    let parts: Vec<(DMatrix<f64>, DVector<f64>)> = prompts
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut f = DMatrix::zeros(chunk.len(), dm);
            let mut y = DVector::zeros(chunk.len());
            for (r, p) in chunk.iter().enumerate() {
                f.row_mut(r).copy_from(&features(p).transpose());
                y[r] = p.label();
            }
            (f.tr_mul(&f), f.tr_mul(&y))
        })
        .collect();
    let mut h = DMatrix::zeros(dm, dm);
    let mut rhs = DVector::zeros(dm);
    for (ph, pr) in parts {
        h += ph;
        rhs += pr;
    }
    let b = prompts.len() as f64;
    Ok((symmetrize(&(h / b)), rhs / b))
}

/// Least-squares solution and whether the ridge fallback was used.
#[derive(Clone, Debug, PartialEq)]
pub struct LstsqSolution {
    pub x: ReparamVector,
    /// `Some(lambda)` when the normal equations needed a ridge term.
    pub ridge: Option<f64>,
}

pub const LSTSQ_RIDGE: f64 = 1e-10;

/// Minimizer of the empirical reparameterized loss.
pub fn lstsq_oracle(prompts: &[Prompt]) -> Result<LstsqSolution> {
    let (h, rhs) = normal_equations(prompts)?;
    let d = prompts[0].d();
    let ev = sym_eigenvalues(&h);
    let (lo, hi) = (ev[0], ev[ev.len() - 1]);
    let well_posed = lo > hi.abs() * 1e-12;
    if well_posed {
        if let Some(ch) = h.clone().cholesky() {
            return Ok(LstsqSolution {
                x: ReparamVector::new(d, ch.solve(&rhs))?,
                ridge: None,
            });
        }
    }
    let dm = h.nrows();
    let reg = &h + DMatrix::identity(dm, dm) * LSTSQ_RIDGE;
    let x = match reg.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => reg
            .lu()
            .solve(&rhs)
            .ok_or(Error::NotPositiveDefinite { min_eigenvalue: lo })?,
    };
    Ok(LstsqSolution {
        x: ReparamVector::new(d, x)?,
        ridge: Some(LSTSQ_RIDGE),
    })
}

/// Monte Carlo estimate of `E[f f^T]` with a block-bootstrap error bar for
/// its smallest eigenvalue.
#[derive(Clone, Debug)]
pub struct HessianEstimate {
    pub matrix: DMatrix<f64>,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    pub min_eigenvalue: f64,
    pub bootstrap_se: f64,
    pub samples: u64,
}

/// Estimate the feature second-moment matrix from `samples` prompts.
///
/// Prompts are split into `blocks` equal blocks; the standard error of the
/// smallest eigenvalue is the spread of that eigenvalue over `replicates`
/// resamples of the block means.
pub fn hessian_estimate(
    sampler: &PromptSampler,
    samples: u64,
    blocks: u64,
    replicates: usize,
    seed: u64,
) -> Result<HessianEstimate> {
    if samples < 1000 {
        return Err(invalid("need at least 1000 samples"));
    }
    let d = sampler.d;
    let dm = d * pair_count(d);
    let block_means = crate::linalg::par_block_means(samples, blocks, dm, |i, out| {
        let f = features(&sampler.prompt(i));
        out.copy_from(&(&f * f.transpose()));
    });
    let k = block_means.len();
    let mean = block_means
        .iter()
        .fold(DMatrix::zeros(dm, dm), |acc, m| acc + m)
        / k as f64;
    let matrix = symmetrize(&mean);
    let eigenvalues = sym_eigenvalues(&matrix);
    let boots: Vec<f64> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = substream(seed, domain::BOOTSTRAP, r as u64);
            let mut acc = DMatrix::zeros(dm, dm);
            for _ in 0..k {
                acc += &block_means[rng.random_range(0..k)];
            }
            sym_eigenvalues(&(acc / k as f64))[0]
        })
        .collect();
    let mb = boots.iter().sum::<f64>() / boots.len().max(1) as f64;
    let var = boots.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / (boots.len().max(2) - 1) as f64;
    Ok(HessianEstimate {
        min_eigenvalue: eigenvalues[0],
        eigenvalues,
        matrix,
        bootstrap_se: var.sqrt(),
        samples,
    })
}

/// CSV with one `(j, i, k, value)` row per entry, indices 1-based.
pub fn write_reparam_csv<W: Write>(mut w: W, x: &ReparamVector) -> Result<()> {
    writeln!(w, "j,i,k,value")?;
    for ((j, i, k), v) in ReparamVector::annotations(x.d).into_iter().zip(x.x.iter()) {
        writeln!(w, "{j},{i},{k},{v}")?;
    }
    Ok(())
}

pub fn read_reparam_csv<R: BufRead>(r: R) -> Result<ReparamVector> {
    let mut rows = Vec::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        if ln == 0 || line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::Parse(format!("line {}: expected 4 fields", ln + 1)));
        }
        let p = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", ln + 1)))
        };
        let v = f[3]
            .trim()
            .parse::<f64>()
            .map_err(|e| Error::Parse(format!("line {}: {e}", ln + 1)))?;
        rows.push((p(f[0])?, p(f[1])?, p(f[2])?, v));
    }
    let d = rows
        .iter()
        .map(|r| r.0)
        .max()
        .ok_or_else(|| Error::Parse("no entries".into()))?;
    let m = pair_count(d);
    let mut x = DVector::from_element(d * m, f64::NAN);
    for (j, i, k, v) in rows {
        x[(j - 1) * m + pair_index(i, k, d)? - 1] = v;
    }
    ReparamVector::new(d, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lsa::{LayerParams, LsaModel};

    #[test]
    fn pair_index_examples() {
        assert_eq!(pair_index(1, 1, 1).unwrap(), 1);
        assert_eq!(pair_index(1, 2, 1).unwrap(), 2);
        assert_eq!(pair_index(2, 2, 1).unwrap(), 3);
        assert_eq!(pair_index(2, 3, 2).unwrap(), 5);
        assert!(pair_index(2, 1, 2).is_err());
    }

    #[test]
    fn pair_index_is_bijective() {
        for d in 1..=10 {
            let mut seen = vec![false; pair_count(d)];
            for (i, k) in pairs0(d) {
                let r = pair_index(i + 1, k + 1, d).unwrap();
                assert!(!seen[r - 1]);
                seen[r - 1] = true;
            }
            assert!(seen.iter().all(|&s| s));
            for (r, (i, k)) in pairs0(d).into_iter().enumerate() {
                assert_eq!(pair_index0(i, k, d), r);
            }
        }
    }

    #[test]
    fn phi_examples() {
        let x = phi(
            &DVector::from_vec(vec![1.0, 0.0]),
            &DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
        )
        .unwrap();
        assert_eq!(x.as_vector().as_slice(), &[1.0, 0.0, 0.0]);
        let x = phi(
            &DVector::from_vec(vec![2.0, 3.0]),
            &DMatrix::from_column_slice(2, 1, &[5.0, 7.0]),
        )
        .unwrap();
        assert_eq!(x.as_vector().as_slice(), &[10.0, 29.0, 21.0]);
    }

    #[test]
    fn features_match_sparse_prediction() {
        let s = PromptSampler::binary(0.4, 3, 9, 2).unwrap();
        for t in 0..100u64 {
            let m = LsaModel::random(crate::lsa::ParamForm::Sparse, 3, 9, 1, 1.0, t).unwrap();
            let (b, a) = m.layers()[0].sparse_parts().unwrap();
            let x = phi(&b, &a).unwrap();
            let p = s.prompt(t);
            let y = m.predict(&p).unwrap();
            assert!((features(&p).dot(x.as_vector()) - y).abs() < 1e-12);
            assert!((predict_reparam(&x, &p).unwrap() - y).abs() < 1e-12);
            let direct = (b.transpose() * gram_matrix(&p) * (&a * p.query_x()))[(0, 0)];
            assert!((direct - y).abs() < 1e-12);
        }
    }

    #[test]
    fn phi_gauge_invariance() {
        let b = DVector::from_vec(vec![0.3, -1.1, 2.0]);
        let a = DMatrix::from_column_slice(3, 2, &[1.0, 2.0, -0.5, 0.7, 0.1, -3.0]);
        let x = phi(&b, &a).unwrap();
        for c in [-2.0, 0.5, 7.0] {
            let y = phi(&(&b * c), &(&a / c)).unwrap();
            assert!((x.as_vector() - y.as_vector()).abs().max() < 1e-13);
        }
    }

    #[test]
    fn lstsq_recovers_noiseless_target_and_is_scale_invariant() {
        let s = PromptSampler::binary(0.5, 2, 6, 4).unwrap();
        let x0 = DVector::from_fn(2 * pair_count(2), |i, _| (i as f64 * 0.37).sin());
        let prompts: Vec<Prompt> = s
            .batch(0, 2000)
            .into_iter()
            .map(|p| {
                let y = features(&p).dot(&x0);
                Prompt::new(p.z().clone(), y, 2).unwrap()
            })
            .collect();
        let sol = lstsq_oracle(&prompts).unwrap();
        assert!((sol.x.as_vector() - &x0).abs().max() < 1e-8);
        let doubled: Vec<Prompt> = prompts.iter().chain(prompts.iter()).cloned().collect();
        let sol2 = lstsq_oracle(&doubled).unwrap();
        assert!((sol.x.as_vector() - sol2.x.as_vector()).abs().max() < 1e-10);
        let lx = reparam_loss(&sol.x, &prompts).unwrap();
        let mut bumped = sol.x.as_vector().clone();
        bumped[3] += 0.01;
        assert!(reparam_loss(&ReparamVector::new(2, bumped).unwrap(), &prompts).unwrap() > lx);
    }

    #[test]
    fn reparam_loss_matches_lsa_loss() {
        let s = PromptSampler::binary(0.3, 2, 7, 8).unwrap();
        let prompts = s.batch(0, 200);
        let b = DVector::from_vec(vec![0.2, -0.4, 0.9]);
        let a = DMatrix::from_column_slice(3, 2, &[0.5, -0.1, 0.3, 0.8, 0.2, -0.6]);
        let m = LsaModel::new(
            2,
            7,
            vec![LayerParams::Sparse {
                b: b.clone(),
                a: a.clone(),
            }],
        )
        .unwrap();
        let x = phi(&b, &a).unwrap();
        assert!((reparam_loss(&x, &prompts).unwrap() - m.loss(&prompts).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_chains_give_rank_one_hessian() {
        let s = PromptSampler::binary(1.0, 1, 5, 1).unwrap();
        let h = hessian_estimate(&s, 2000, 20, 10, 1).unwrap();
        assert!(h.min_eigenvalue.abs() < 1e-12);
        assert!((&h.matrix - h.matrix.transpose()).abs().max() < 1e-12);
    }

    #[test]
    fn reparam_csv_round_trip() {
        let x = ReparamVector::new(2, DVector::from_fn(12, |i, _| i as f64 / 7.0)).unwrap();
        let mut buf = Vec::new();
        write_reparam_csv(&mut buf, &x).unwrap();
        assert_eq!(read_reparam_csv(buf.as_slice()).unwrap(), x);
    }
}
