//! Global minimizers of the reparameterized population loss and the way back
//! to attention parameters.
//!
//! `X* = H^{-1} h` with `H = E[f f^T]` and `h = E[y f]`, `f = x_query ⊗ g`.
//! Conditional on the kernel, every entry factors into products of chain
//! moments `E[s_{t1} s_{t2} ... | P]`, which are computed exactly from kernel
//! powers. The remaining expectation over the kernel prior is either exact
//! (chains over two states with the uniform prior, where every moment is a
//! polynomial in `p01, p11`) or Monte Carlo over kernel draws.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::{Add, Mul};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::bilinear::BilinearInstance;
use crate::error::{invalid, Error, Result};
use crate::linalg::{spd_solve, sym_eigenvalues, symmetrize};
use crate::lsa::LayerParams;
use crate::markov_data::{
    InitialDistribution, KernelPrior, QueryCorrelatedBinary, TransitionKernel,
};
use crate::reparam::{pair_count, pairs0, phi, ReparamVector};
use crate::rng::{domain, substream};

fn check_p(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("p must lie in (0, 1), got {p}")))
    }
}

/// `H` and right-hand side for length-2 chains, i.i.d. `Bern(p)` starts and
/// uniform kernels.
pub fn h_and_rhs_len2_iid(p: f64, n: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_p(p)?;
    if n == 0 {
        return Err(invalid("n must be at least 1"));
    }
    let nf = n as f64;
    let r = (nf - 1.0) / nf;
    let h11 = p * (p / nf + r * p * p);
    let h12 = p * (p / (2.0 * nf) + r * p * p / 2.0);
    let h13 = p * (p / 2.0);
    let h22 = p * (p / (2.0 * nf) + r * p * p / 3.0);
    let h23 = p * (p / (2.0 * nf) + r * (p / 4.0 + p * p / 12.0));
    let h33 = p * (1.0 / (2.0 * nf) + r * (1.0 / 3.0 - p / 6.0 + p * p / 6.0));
    let h = DMatrix::from_row_slice(3, 3, &[h11, h12, h13, h12, h22, h23, h13, h23, h33]);
    let rhs = DVector::from_vec(vec![p * p / 2.0, p * p / 3.0, p * p / 12.0 + p / 4.0]);
    Ok((h, rhs))
}

pub fn xstar_len2_iid(p: f64, n: usize) -> Result<ReparamVector> {
    let (h, rhs) = h_and_rhs_len2_iid(p, n)?;
    ReparamVector::new(1, spd_solve(&h, &rhs)?)
}

/// Query-weighted moments of length-2 chains with correlated starts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Len2Moments {
    pub p: f64,
    pub n: usize,
    /// `sum_i E[x_i x_query]`.
    pub c1: f64,
    /// `sum_i sum_{j != i} E[x_i x_j x_query]`.
    pub c2: f64,
}

impl Len2Moments {
    pub fn new(p: f64, n: usize, c1: f64, c2: f64) -> Result<Self> {
        check_p(p)?;
        let nf = n as f64;
        if n == 0 || !(0.0..=nf).contains(&c1) || !(0.0..=nf * (nf - 1.0)).contains(&c2) {
            return Err(invalid(format!(
                "moments out of range: n={n}, c1={c1}, c2={c2}"
            )));
        }
        Ok(Self { p, n, c1, c2 })
    }

    /// `c1 = n p^2`, `c2 = n (n-1) p^3`.
    pub fn iid(p: f64, n: usize) -> Result<Self> {
        let nf = n as f64;
        Self::new(p, n, nf * p * p, nf * (nf - 1.0) * p.powi(3))
    }

    /// Moments of a query-correlated start law.
    pub fn from_query_correlated(law: &QueryCorrelatedBinary, n: usize) -> Result<Self> {
        let nf = n as f64;
        Self::new(
            law.p,
            n,
            nf * law.p * law.g1,
            nf * (nf - 1.0) * law.p * law.g1 * law.g1,
        )
    }
}

pub fn h_and_rhs_len2_correlated(m: &Len2Moments) -> (DMatrix<f64>, DVector<f64>) {
    let (p, c1, c2) = (m.p, m.c1, m.c2);
    let nf = m.n as f64;
    let n2 = nf * nf;
    let h11 = c1 / n2 + c2 / n2;
    let h12 = c1 / (2.0 * n2) + c2 / (2.0 * n2);
    let h13 = c1 / (2.0 * nf);
    let h22 = c1 / (2.0 * n2) + c2 / (3.0 * n2);
    let h23 = (nf + 1.0) * c1 / (4.0 * n2) + c2 / (12.0 * n2);
    let h33 = (2.0 * nf + 1.0) * p / (6.0 * nf) - (nf - 1.0) * c1 / (6.0 * n2) + c2 / (6.0 * n2);
    let h = DMatrix::from_row_slice(3, 3, &[h11, h12, h13, h12, h22, h23, h13, h23, h33]);
    let rhs = DVector::from_vec(vec![
        c1 / (2.0 * nf),
        c1 / (3.0 * nf),
        p / 4.0 + c1 / (12.0 * nf),
    ]);
    (h, rhs)
}

pub fn xstar_len2_correlated(m: &Len2Moments) -> Result<ReparamVector> {
    let (h, rhs) = h_and_rhs_len2_correlated(m);
    ReparamVector::new(1, spd_solve(&h, &rhs)?)
}

/// Commutative ring used to evaluate chain moments.
pub trait Ring:
    Clone + Send + Sync + for<'a> Add<&'a Self, Output = Self> + for<'a> Mul<&'a Self, Output = Self>
{
    fn constant(x: f64) -> Self;
}

impl Ring for f64 {
    fn constant(x: f64) -> Self {
        x
    }
}

/// Polynomial in two variables `a = p01` and `c = p11`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Poly2 {
    terms: BTreeMap<(u32, u32), f64>,
}

impl Poly2 {
    pub fn var_a() -> Self {
        Self {
            terms: BTreeMap::from([((1, 0), 1.0)]),
        }
    }

    pub fn var_c() -> Self {
        Self {
            terms: BTreeMap::from([((0, 1), 1.0)]),
        }
    }

    /// Expectation with `a, c ~ U(0, 1)` independent: `E[a^i c^j] = 1/((i+1)(j+1))`.
    pub fn expect_uniform(&self) -> f64 {
        self.terms
            .iter()
            .map(|(&(i, j), v)| v / ((i + 1) as f64 * (j + 1) as f64))
            .sum()
    }

    pub fn eval(&self, a: f64, c: f64) -> f64 {
        self.terms
            .iter()
            .map(|(&(i, j), v)| v * a.powi(i as i32) * c.powi(j as i32))
            .sum()
    }

    fn scale(mut self, s: f64) -> Self {
        self.terms.values_mut().for_each(|v| *v *= s);
        self
    }
}

impl<'a> Add<&'a Poly2> for Poly2 {
    type Output = Poly2;
    fn add(mut self, o: &'a Poly2) -> Poly2 {
        for (k, v) in &o.terms {
            *self.terms.entry(*k).or_insert(0.0) += v;
        }
        self
    }
}

impl<'a> Mul<&'a Poly2> for Poly2 {
    type Output = Poly2;
    fn mul(self, o: &'a Poly2) -> Poly2 {
        let mut terms = BTreeMap::new();
        for (&(i, j), v) in &self.terms {
            for (&(k, l), w) in &o.terms {
                *terms.entry((i + k, j + l)).or_insert(0.0) += v * w;
            }
        }
        Poly2 { terms }
    }
}

impl Ring for Poly2 {
    fn constant(x: f64) -> Self {
        Self {
            terms: BTreeMap::from([((0, 0), x)]),
        }
    }
}

/// Conditional chain moments for one kernel over positions `0..=d`.
struct ChainMoments<T: Ring> {
    /// State values `0, 1, ..., S-1`.
    values: Vec<f64>,
    /// `pi_t = pi_0 P^t`.
    marginals: Vec<Vec<T>>,
    /// `P^k` for `k = 0..=d`.
    powers: Vec<Vec<Vec<T>>>,
}

impl<T: Ring> ChainMoments<T> {
    fn new(init: Vec<T>, kernel: Vec<Vec<T>>, d: usize) -> Self {
        let s = init.len();
        let values = (0..s).map(|v| v as f64).collect();
        let identity: Vec<Vec<T>> = (0..s)
            .map(|i| {
                (0..s)
                    .map(|j| T::constant(f64::from(u8::from(i == j))))
                    .collect()
            })
            .collect();
        let mut powers = vec![identity];
        for _ in 0..d {
            let prev = powers.last().unwrap();
            powers.push(mat_mul(prev, &kernel));
        }
        let mut marginals = vec![init];
        for _ in 0..d {
            let prev = marginals.last().unwrap();
            marginals.push(vec_mat(prev, &kernel));
        }
        Self {
            values,
            marginals,
            powers,
        }
    }

    /// `E[prod_t s_t]` over sorted 0-based positions.
    fn moment(&self, positions: &[usize]) -> T {
        let mut v: Vec<T> = self.marginals[positions[0]].clone();
        self.weight(&mut v);
        for w in positions.windows(2) {
            v = vec_mat(&v, &self.powers[w[1] - w[0]]);
            self.weight(&mut v);
        }
        v.iter().skip(1).fold(T::constant(0.0), |acc, x| acc + x)
    }

    fn weight(&self, v: &mut [T]) {
        for (x, &s) in v.iter_mut().zip(&self.values) {
            *x = x.clone() * &T::constant(s);
        }
    }
}

fn vec_mat<T: Ring>(v: &[T], m: &[Vec<T>]) -> Vec<T> {
    let s = v.len();
    (0..s)
        .map(|j| (0..s).fold(T::constant(0.0), |acc, i| acc + &(v[i].clone() * &m[i][j])))
        .collect()
}

fn mat_mul<T: Ring>(a: &[Vec<T>], b: &[Vec<T>]) -> Vec<Vec<T>> {
    let s = a.len();
    (0..s)
        .map(|i| {
            (0..s)
                .map(|j| {
                    (0..s).fold(T::constant(0.0), |acc, k| {
                        acc + &(a[i][k].clone() * &b[k][j])
                    })
                })
                .collect()
        })
        .collect()
}

fn sorted4(a: (usize, usize), b: (usize, usize)) -> [usize; 4] {
    let mut t = [a.0, a.1, b.0, b.1];
    t.sort_unstable();
    t
}

/// Per-kernel contribution to `H` and `h`, stored flat as `[H (row-major), h]`.
fn kernel_contribution<T: Ring>(cm: &ChainMoments<T>, d: usize, n: usize, out: &mut Vec<T>) {
    let pairs = pairs0(d);
    let m = pairs.len();
    let nf = n as f64;
    let m2: Vec<T> = pairs.iter().map(|&(i, k)| cm.moment(&[i, k])).collect();
    let mut gmat: Vec<T> = Vec::with_capacity(m * m);
    for a in 0..m {
        for b in 0..m {
            let m4 = cm.moment(&sorted4(pairs[a], pairs[b]));
            let g = m4 * &T::constant(1.0 / nf)
                + &(m2[a].clone() * &m2[b] * &T::constant((nf - 1.0) / nf));
            gmat.push(g);
        }
    }
    let q = |i: usize, j: usize| m2[crate::reparam::pair_index0(i.min(j), i.max(j), d)].clone();
    out.clear();
    for i in 0..d {
        for a in 0..m {
            for j in 0..d {
                let qij = q(i, j);
                for b in 0..m {
                    out.push(qij.clone() * &gmat[a * m + b]);
                }
            }
        }
    }
    for j in 0..d {
        let qy = q(j, d);
        for m2a in m2.iter().take(m) {
            out.push(qy.clone() * m2a);
        }
    }
}

/// Product-form moment for two-state chains:
/// `(p (P^{t1-1})_{11} + (1-p) (P^{t1-1})_{01}) * prod_k (P^{t_{k+1}-t_k})_{11}`,
/// positions 1-based and sorted.
pub fn literal_binary_moment(kernel: &TransitionKernel, p: f64, positions: &[usize]) -> f64 {
    let pk = kernel.probs();
    let pow = |k: usize| {
        let mut m = DMatrix::identity(2, 2);
        for _ in 0..k {
            m = &m * pk;
        }
        m
    };
    let t1 = positions[0] - 1;
    let first = p * pow(t1)[(1, 1)] + (1.0 - p) * pow(t1)[(0, 1)];
    positions
        .windows(2)
        .fold(first, |acc, w| acc * pow(w[1] - w[0])[(1, 1)])
}

/// How kernel-prior expectations are taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MomentMethod {
    /// Exact for a two-state uniform prior with `d = 1`, Monte Carlo otherwise.
    Auto,
    MonteCarlo,
    /// Exact polynomial expectations; two-state uniform prior only.
    ExactUniform,
}

#[derive(Clone, Debug)]
pub struct GeneralMinimizerSpec {
    pub d: usize,
    pub n: usize,
    /// Law of every chain's first state.
    pub init: InitialDistribution,
    pub prior: KernelPrior,
    pub mc_samples: u64,
    pub seed: u64,
    pub method: MomentMethod,
}

impl GeneralMinimizerSpec {
    pub fn binary(d: usize, n: usize, p: f64, mc_samples: u64, seed: u64) -> Result<Self> {
        Ok(Self {
            d,
            n,
            init: InitialDistribution::binary(p)?,
            prior: KernelPrior::IndependentUniform,
            mc_samples,
            seed,
            method: MomentMethod::Auto,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n == 0 {
            return Err(invalid("d and n must be at least 1"));
        }
        self.prior.validate()?;
        if self.prior.states() != self.init.pmf().len() {
            return Err(invalid(
                "kernel prior and initial law disagree on the state count",
            ));
        }
        Ok(())
    }

    fn exact(&self) -> Result<bool> {
        let uniform_binary = matches!(self.prior, KernelPrior::IndependentUniform);
        match self.method {
            MomentMethod::Auto => Ok(uniform_binary && self.d == 1),
            MomentMethod::MonteCarlo => Ok(false),
            MomentMethod::ExactUniform if uniform_binary => Ok(true),
            MomentMethod::ExactUniform => Err(invalid(
                "exact expectations need the two-state uniform prior",
            )),
        }
    }
}

/// `H`, `h` and their Monte Carlo standard errors (zero when exact).
#[derive(Clone, Debug)]
pub struct MomentEstimate {
    pub d: usize,
    pub h: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub h_se: DMatrix<f64>,
    pub rhs_se: DVector<f64>,
    /// Kernel draws used; 0 for exact expectations.
    pub samples: u64,
    /// Per-block estimates, used for the spread of the solution.
    blocks: Vec<(DMatrix<f64>, DVector<f64>)>,
}

const MC_BLOCKS: u64 = 64;

/// Estimate `H` and `h` for the given chain law.
pub fn general_moments(spec: &GeneralMinimizerSpec) -> Result<MomentEstimate> {
    spec.validate()?;
    let (d, n) = (spec.d, spec.n);
    let dm = d * pair_count(d);
    let unflatten = |flat: &[f64]| {
        let h = DMatrix::from_row_slice(dm, dm, &flat[..dm * dm]);
        let rhs = DVector::from_column_slice(&flat[dm * dm..]);
        (h, rhs)
    };
    if spec.exact()? {
        let a = Poly2::var_a();
        let c = Poly2::var_c();
        let one = Poly2::constant(1.0);
        let kernel = vec![
            vec![one.clone() + &a.clone().scale(-1.0), a.clone()],
            vec![one + &c.clone().scale(-1.0), c.clone()],
        ];
        let init: Vec<Poly2> = spec
            .init
            .pmf()
            .iter()
            .map(|&v| Poly2::constant(v))
            .collect();
        let cm = ChainMoments::new(init, kernel, d);
        let mut flat = Vec::new();
        kernel_contribution(&cm, d, n, &mut flat);
        let values: Vec<f64> = flat.iter().map(Poly2::expect_uniform).collect();
        let (h, rhs) = unflatten(&values);
        return Ok(MomentEstimate {
            d,
            h: symmetrize(&h),
            rhs,
            h_se: DMatrix::zeros(dm, dm),
            rhs_se: DVector::zeros(dm),
            samples: 0,
            blocks: vec![],
        });
    }
    let point = matches!(spec.prior, KernelPrior::PointMass(_));
    let samples = if point { 1 } else { spec.mc_samples };
    if samples == 0 {
        return Err(invalid("need at least one kernel draw"));
    }
    let blocks = if point { 1 } else { MC_BLOCKS.min(samples) };
    let init: Vec<f64> = spec.init.pmf().to_vec();
    let block_means: Vec<Vec<f64>> = (0..blocks)
        .into_par_iter()
        .map(|blk| {
            let lo = blk * samples / blocks;
            let hi = (blk + 1) * samples / blocks;
            let mut acc = vec![0.0; dm * dm + dm];
            let mut buf = Vec::with_capacity(dm * dm + dm);
            for i in lo..hi {
                let k = spec
                    .prior
                    .sample(&mut substream(spec.seed, domain::KERNELS, i));
                let rows: Vec<Vec<f64>> = k
                    .probs()
                    .row_iter()
                    .map(|r| r.iter().copied().collect())
                    .collect();
                let cm = ChainMoments::new(init.clone(), rows, d);
                kernel_contribution(&cm, d, n, &mut buf);
                acc.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
            }
            let cnt = (hi - lo) as f64;
            acc.iter_mut().for_each(|a| *a /= cnt);
            acc
        })
        .collect();
    let k = block_means.len() as f64;
    let len = dm * dm + dm;
    let mut mean = vec![0.0; len];
    for bm in &block_means {
        mean.iter_mut().zip(bm).for_each(|(m, v)| *m += v / k);
    }
    let mut se = vec![0.0; len];
    if block_means.len() > 1 {
        for bm in &block_means {
            se.iter_mut()
                .zip(bm)
                .zip(&mean)
                .for_each(|((s, v), m)| *s += (v - m).powi(2));
        }
        se.iter_mut().for_each(|s| *s = (*s / (k - 1.0) / k).sqrt());
    }
    let (h, rhs) = unflatten(&mean);
    let (h_se, rhs_se) = unflatten(&se);
    let blocks = block_means.iter().map(|b| unflatten(b)).collect();
    Ok(MomentEstimate {
        d,
        h: symmetrize(&h),
        rhs,
        h_se,
        rhs_se,
        samples,
        blocks,
    })
}

/// A solved minimizer with diagnostics.
#[derive(Clone, Debug)]
pub struct GeneralMinimizer {
    pub x: ReparamVector,
    /// Spread of block-wise solutions; zero for exact expectations.
    pub x_se: DVector<f64>,
    pub min_eigenvalue: f64,
    pub moments: MomentEstimate,
}

/// Solve `H X = h`, refusing when `H` is not positive definite.
pub fn solve_moments(moments: MomentEstimate) -> Result<GeneralMinimizer> {
    let x = spd_solve(&moments.h, &moments.rhs)?;
    let min_eigenvalue = sym_eigenvalues(&moments.h)[0];
    let dm = x.len();
    let mut x_se = DVector::zeros(dm);
    let sols: Vec<DVector<f64>> = moments
        .blocks
        .iter()
        .filter_map(|(h, r)| spd_solve(h, r).ok())
        .collect();
    if sols.len() > 1 {
        let k = sols.len() as f64;
        let mean = sols.iter().fold(DVector::zeros(dm), |a, s| a + s) / k;
        for s in &sols {
            x_se += (s - &mean).map(|v| v * v);
        }
        x_se = x_se.map(|v| (v / (k - 1.0) / k).sqrt());
    }
    Ok(GeneralMinimizer {
        x: ReparamVector::new(moments.d, x)?,
        x_se,
        min_eigenvalue,
        moments,
    })
}

/// Minimizer for two-state chains.
pub fn xstar_general_binary(spec: &GeneralMinimizerSpec) -> Result<GeneralMinimizer> {
    if spec.prior.states() != 2 {
        return Err(invalid("two-state chains expected"));
    }
    solve_moments(general_moments(spec)?)
}

/// Minimizer for chains over any number of states.
pub fn xstar_general_dirichlet(spec: &GeneralMinimizerSpec) -> Result<GeneralMinimizer> {
    if spec.prior.states() < 2 {
        return Err(invalid("need at least two states"));
    }
    solve_moments(general_moments(spec)?)
}

/// Result of inverting the reparameterization for `d = 1`.
#[derive(Clone, Debug, PartialEq)]
pub enum Recovery {
    Preimage(LayerParams),
    NoRealPreimage { discriminant: f64 },
}

/// Exact preimage of `X` under `phi` for `d = 1`.
///
/// With `b = (1, t)` and `A = (X1, X2 - X1 t)`, `phi` matches `X` iff
/// `X1 t^2 - X2 t + X3 = 0`. For `X1 = 0` the family `b = (0, 1)`,
/// `A = (X2, X3)` is used instead.
pub fn recover_pq_len2(x: &ReparamVector) -> Result<Recovery> {
    if x.d() != 1 {
        return Err(invalid("recovery is defined for d = 1"));
    }
    let v = x.as_vector();
    let (x1, x2, x3) = (v[0], v[1], v[2]);
    let candidates: Vec<(DVector<f64>, DMatrix<f64>)> = if x1 == 0.0 {
        vec![(
            DVector::from_vec(vec![0.0, 1.0]),
            DMatrix::from_column_slice(2, 1, &[x2, x3]),
        )]
    } else {
        let disc = x2 * x2 - 4.0 * x1 * x3;
        if disc < 0.0 {
            return Ok(Recovery::NoRealPreimage { discriminant: disc });
        }
        // Stable pair of roots: one from the quadratic formula, the other by Vieta.
        let sign = if x2 >= 0.0 { 1.0 } else { -1.0 };
        let q = x2 + sign * disc.sqrt();
        let mut roots = vec![q / (2.0 * x1)];
        if q != 0.0 {
            roots.push(2.0 * x3 / q);
        }
        roots
            .into_iter()
            .map(|t| {
                (
                    DVector::from_vec(vec![1.0, t]),
                    DMatrix::from_column_slice(2, 1, &[x1, x2 - x1 * t]),
                )
            })
            .collect()
    };
    let scale = 1.0 + v.amax();
    let mut best: Option<(f64, DVector<f64>, DMatrix<f64>)> = None;
    for (b, a) in candidates {
        let err = (phi(&b, &a)?.as_vector() - v).amax();
        if best.as_ref().is_none_or(|(e, _, _)| err < *e) {
            best = Some((err, b, a));
        }
    }
    let (err, b, a) = best.expect("at least one candidate");
    if !(err <= 1e-10 * scale) {
        return Err(Error::InvalidArgument(format!(
            "recovered parameters miss the target by {err:e}"
        )));
    }
    Ok(Recovery::Preimage(LayerParams::Sparse { b, a }))
}

/// Closest point of the image of `phi`, found by alternating least squares.
#[derive(Clone, Debug)]
pub struct Projection {
    pub layer: LayerParams,
    /// `|phi(b, A) - X|`.
    pub residual: f64,
    pub monotone: bool,
}

pub const PSI_RESTARTS: usize = 32;
pub const PSI_ITERS: usize = 5000;

pub fn project_psi(x: &ReparamVector, restarts: usize, seed: u64) -> Result<Projection> {
    let inst = BilinearInstance::phi_system(x.clone());
    let res = inst.als_solve(restarts, PSI_ITERS, seed)?;
    // Balance the gauge (c b, A / c) so that |b| = |A|.
    let (nb, na) = (res.b.norm(), res.a.norm());
    let (b, a) = if nb > 0.0 && na > 0.0 {
        let c = (na / nb).sqrt();
        (res.b * c, res.a / c)
    } else {
        (res.b, res.a)
    };
    Ok(Projection {
        layer: LayerParams::Sparse { b, a },
        residual: res.residual,
        monotone: res.monotone,
    })
}

/// CSV dumps of `X*`, `H` and `h` with 1-based index annotations.
///
/// `H` rows are `(i, i', j')` and columns `(j, k', l')`, meaning
/// `E[x_i x_j g_{i'j'} g_{k'l'}]`; `h` rows are `(j, i', j')`.
pub fn write_minimizer_csv<W: Write>(mut w: W, est: &GeneralMinimizer) -> Result<()> {
    let d = est.x.d();
    let ann = ReparamVector::annotations(d);
    writeln!(w, "block,i,ip,jp,j,kp,lp,value,se")?;
    for (r, &(j, i, k)) in ann.iter().enumerate() {
        writeln!(
            w,
            "xstar,,{i},{k},{j},,,{},{}",
            est.x.as_vector()[r],
            est.x_se[r]
        )?;
    }
    for (r, &(qi, ip, jp)) in ann.iter().enumerate() {
        writeln!(
            w,
            "rhs,,{ip},{jp},{qi},,,{},{}",
            est.moments.rhs[r], est.moments.rhs_se[r]
        )?;
    }
    for (r, &(qi, ip, jp)) in ann.iter().enumerate() {
        for (c, &(qj, kp, lp)) in ann.iter().enumerate() {
            writeln!(
                w,
                "H,{qi},{ip},{jp},{qj},{kp},{lp},{},{}",
                est.moments.h[(r, c)],
                est.moments.h_se[(r, c)]
            )?;
        }
    }
    Ok(())
}
