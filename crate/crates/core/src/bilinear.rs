//! Bilinear systems `b^T D^(r) A_{:, j(r)} = X_r`.
//!
//! The recovery of one-layer parameters from a reparameterized vector is such a
//! system. This module evaluates and heuristically solves general instances,
//! and builds the reduction from bilinear separability together with a
//! sampling-based check that the reduced instance reproduces the separability
//! program term by term.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{invalid, shape, Result};
use crate::reparam::{pair_count, pairs0, ReparamVector};
use crate::rng::{domain, substream};

/// An entry of `b` or `A` (0-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Var {
    B(usize),
    A(usize, usize),
}

impl std::fmt::Display for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Var::B(i) => write!(f, "b_{}", i + 1),
            Var::A(i, j) => write!(f, "A_{},{}", i + 1, j + 1),
        }
    }
}

/// One stored constraint: index `r` (1-based) and the nonzeros of `D^(r)`
/// as 0-based `(row, col, value)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Constraint {
    pub r: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl Constraint {
    /// 0-based column of `A` addressed by `r`.
    pub fn column(&self, m: usize) -> usize {
        (self.r - 1) / m
    }

    /// `b^T D A_{:, j}`.
    pub fn eval(&self, b: &DVector<f64>, a: &DMatrix<f64>, m: usize) -> f64 {
        let j = self.column(m);
        self.entries
            .iter()
            .map(|&(i, k, v)| v * b[i] * a[(k, j)])
            .sum()
    }
}

/// A variable written as the difference of two nonnegative parts.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub name: String,
    pub vars: Vec<Var>,
}

/// A bilinear system with optional pinned entries and split metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct BilinearInstance {
    pub d: usize,
    pub target: ReparamVector,
    /// Sorted by `r`; unstored indices have `D^(r) = 0` and `X_r = 0`.
    pub constraints: Vec<Constraint>,
    pub fixed: Vec<(Var, f64)>,
    pub splits: Vec<Split>,
}

/// Constraints of the reparameterization map: `D^(r)` has a 1 at `(i, k)` and,
/// for `i != k`, at `(k, i)`.
pub fn default_structure(d: usize) -> Vec<Constraint> {
    let pairs = pairs0(d);
    let m = pairs.len();
    let mut out = Vec::with_capacity(d * m);
    for j in 0..d {
        for (p, &(i, k)) in pairs.iter().enumerate() {
            let mut entries = vec![(i, k, 1.0)];
            if i != k {
                entries.push((k, i, 1.0));
            }
            out.push(Constraint {
                r: j * m + p + 1,
                entries,
            });
        }
    }
    out
}

impl BilinearInstance {
    pub fn new(
        target: ReparamVector,
        constraints: Vec<Constraint>,
        fixed: Vec<(Var, f64)>,
        splits: Vec<Split>,
    ) -> Result<Self> {
        let d = target.d();
        let m = pair_count(d);
        let mut constraints = constraints;
        constraints.sort_by_key(|c| c.r);
        for c in &constraints {
            if c.r == 0 || c.r > d * m {
                return Err(invalid(format!(
                    "constraint index {} outside 1..={}",
                    c.r,
                    d * m
                )));
            }
            if c.entries.iter().any(|&(i, k, _)| i > d || k > d) {
                return Err(invalid(format!(
                    "D^({}) has an entry outside {}x{}",
                    c.r,
                    d + 1,
                    d + 1
                )));
            }
        }
        if constraints.windows(2).any(|w| w[0].r == w[1].r) {
            return Err(invalid("duplicate constraint index"));
        }
        for (v, _) in &fixed {
            check_var(*v, d)?;
            if splits.iter().any(|s| s.vars.contains(v)) {
                return Err(invalid(format!("{v} is both fixed and split")));
            }
        }
        Ok(Self {
            d,
            target,
            constraints,
            fixed,
            splits,
        })
    }

    /// The system `phi(b, A) = target`.
    pub fn phi_system(target: ReparamVector) -> Self {
        let d = target.d();
        Self {
            d,
            target,
            constraints: default_structure(d),
            fixed: vec![],
            splits: vec![],
        }
    }

    pub fn m(&self) -> usize {
        pair_count(self.d)
    }

    fn is_fixed(&self, v: Var) -> Option<f64> {
        self.fixed.iter().find(|(u, _)| *u == v).map(|(_, x)| *x)
    }

    /// Zero `b`, `A` with the pins applied.
    pub fn pinned_zero(&self) -> (DVector<f64>, DMatrix<f64>) {
        let mut b = DVector::zeros(self.d + 1);
        let mut a = DMatrix::zeros(self.d + 1, self.d);
        self.apply_pins(&mut b, &mut a);
        (b, a)
    }

    fn apply_pins(&self, b: &mut DVector<f64>, a: &mut DMatrix<f64>) {
        for &(v, x) in &self.fixed {
            match v {
                Var::B(i) => b[i] = x,
                Var::A(i, j) => a[(i, j)] = x,
            }
        }
    }

    /// `b^T D^(r) A_{:, j(r)} - X_r` for each stored constraint.
    pub fn residual(&self, b: &DVector<f64>, a: &DMatrix<f64>) -> Result<DVector<f64>> {
        if b.len() != self.d + 1 || a.shape() != (self.d + 1, self.d) {
            return Err(shape(format!(
                "expected b of length {} and A of {}x{}",
                self.d + 1,
                self.d + 1,
                self.d
            )));
        }
        for &(v, x) in &self.fixed {
            let got = match v {
                Var::B(i) => b[i],
                Var::A(i, j) => a[(i, j)],
            };
            if got != x {
                return Err(invalid(format!("{v} is pinned to {x} but holds {got}")));
            }
        }
        Ok(self.residual_unchecked(b, a))
    }

    fn residual_unchecked(&self, b: &DVector<f64>, a: &DMatrix<f64>) -> DVector<f64> {
        let m = self.m();
        let x = self.target.as_vector();
        DVector::from_iterator(
            self.constraints.len(),
            self.constraints
                .iter()
                .map(|c| c.eval(b, a, m) - x[c.r - 1]),
        )
    }
}

fn check_var(v: Var, d: usize) -> Result<()> {
    let ok = match v {
        Var::B(i) => i <= d,
        Var::A(i, j) => i <= d && j < d,
    };
    if ok {
        Ok(())
    } else {
        Err(invalid(format!(
            "{v} is outside the parameter shapes for d = {d}"
        )))
    }
}

/// One alternating-least-squares run.
#[derive(Clone, Debug)]
pub struct AlsRun {
    pub b: DVector<f64>,
    pub a: DMatrix<f64>,
    /// Residual norm before the first sweep and after each sweep.
    pub history: Vec<f64>,
}

/// Best of several runs.
#[derive(Clone, Debug)]
pub struct AlsResult {
    pub b: DVector<f64>,
    pub a: DMatrix<f64>,
    /// Euclidean norm of the residual vector.
    pub residual: f64,
    /// Whether every run's residual was nonincreasing sweep over sweep.
    pub monotone: bool,
    pub runs: usize,
}

const ALS_RIDGE: f64 = 1e-12;

/// Ridge-regularized least squares `min |C x - y|^2 + ridge |x|^2`.
fn ridge_lstsq(c: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let k = c.ncols();
    let h = c.tr_mul(c) + DMatrix::identity(k, k) * ALS_RIDGE;
    let rhs = c.tr_mul(y);
    match h.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => h.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(k)),
    }
}

impl BilinearInstance {
    fn free_b(&self) -> Vec<usize> {
        (0..=self.d)
            .filter(|&i| self.is_fixed(Var::B(i)).is_none())
            .collect()
    }

    fn free_a(&self, j: usize) -> Vec<usize> {
        (0..=self.d)
            .filter(|&i| self.is_fixed(Var::A(i, j)).is_none())
            .collect()
    }

    /// Exact least-squares update of the free entries of `b` with `A` fixed.
    fn update_b(&self, b: &mut DVector<f64>, a: &DMatrix<f64>) {
        let free = self.free_b();
        if free.is_empty() {
            return;
        }
        let m = self.m();
        let x = self.target.as_vector();
        let rows = self.constraints.len();
        let mut c = DMatrix::zeros(rows, free.len());
        let mut y = DVector::zeros(rows);
        for (row, con) in self.constraints.iter().enumerate() {
            let j = con.column(m);
            let mut coeff = DVector::zeros(self.d + 1);
            for &(i, k, v) in &con.entries {
                coeff[i] += v * a[(k, j)];
            }
            let fixed_part: f64 = (0..=self.d)
                .filter(|i| !free.contains(i))
                .map(|i| coeff[i] * b[i])
                .sum();
            for (col, &i) in free.iter().enumerate() {
                c[(row, col)] = coeff[i];
            }
            y[row] = x[con.r - 1] - fixed_part;
        }
        let sol = ridge_lstsq(&c, &y);
        for (col, &i) in free.iter().enumerate() {
            b[i] = sol[col];
        }
    }

    /// Exact least-squares update of the free entries of `A` with `b` fixed,
    /// one column at a time.
    fn update_a(&self, b: &DVector<f64>, a: &mut DMatrix<f64>) {
        let m = self.m();
        let x = self.target.as_vector();
        for j in 0..self.d {
            let free = self.free_a(j);
            let cons: Vec<&Constraint> = self
                .constraints
                .iter()
                .filter(|c| c.column(m) == j)
                .collect();
            if free.is_empty() || cons.is_empty() {
                continue;
            }
            let mut c = DMatrix::zeros(cons.len(), free.len());
            let mut y = DVector::zeros(cons.len());
            for (row, con) in cons.iter().enumerate() {
                let mut coeff = DVector::zeros(self.d + 1);
                for &(i, k, v) in &con.entries {
                    coeff[k] += v * b[i];
                }
                let fixed_part: f64 = (0..=self.d)
                    .filter(|k| !free.contains(k))
                    .map(|k| coeff[k] * a[(k, j)])
                    .sum();
                for (col, &k) in free.iter().enumerate() {
                    c[(row, col)] = coeff[k];
                }
                y[row] = x[con.r - 1] - fixed_part;
            }
            let sol = ridge_lstsq(&c, &y);
            for (col, &k) in free.iter().enumerate() {
                a[(k, j)] = sol[col];
            }
        }
    }

    /// One ALS run from a random start drawn from `rng`.
    pub fn als_run<R: Rng + ?Sized>(&self, iters: usize, rng: &mut R) -> AlsRun {
        let mut b = DVector::from_fn(self.d + 1, |_, _| rng.random_range(-1.0..1.0));
        let mut a = DMatrix::from_fn(self.d + 1, self.d, |_, _| rng.random_range(-1.0..1.0));
        self.apply_pins(&mut b, &mut a);
        let mut history = vec![self.residual_unchecked(&b, &a).norm()];
        for _ in 0..iters {
            self.update_a(&b, &mut a);
            self.update_b(&mut b, &a);
            let r = self.residual_unchecked(&b, &a).norm();
            let prev = *history.last().unwrap();
            history.push(r);
            if r < 1e-15 || prev - r <= 1e-15 * prev.max(1e-300) {
                break;
            }
        }
        AlsRun { b, a, history }
    }

    /// Best of `restarts` ALS runs; ties in residual go to the smaller
    /// parameter norm.
    pub fn als_solve(&self, restarts: usize, iters: usize, seed: u64) -> Result<AlsResult> {
        if restarts == 0 {
            return Err(invalid("need at least one restart"));
        }
        let runs: Vec<AlsRun> = (0..restarts)
            .into_par_iter()
            .map(|k| self.als_run(iters, &mut substream(seed, domain::RESTARTS, k as u64)))
            .collect();
        let slack = self.monotone_slack();
        let monotone = runs.iter().all(|r| is_nonincreasing(&r.history, slack));
        let mut best: Option<(f64, f64, &AlsRun)> = None;
        for run in &runs {
            let res = *run.history.last().unwrap();
            let norm = run.b.norm_squared() + run.a.norm_squared();
            let better = match best {
                None => true,
                Some((br, bn, _)) => {
                    let tol = 1e-12 * br.max(res).max(1e-300);
                    res < br - tol || ((res - br).abs() <= tol && norm < bn)
                }
            };
            if better {
                best = Some((res, norm, run));
            }
        }
        let (residual, _, run) = best.expect("at least one run");
        Ok(AlsResult {
            b: run.b.clone(),
            a: run.a.clone(),
            residual,
            monotone,
            runs: restarts,
        })
    }
}

/// Nonincreasing up to `slack`, which absorbs the ridge term and rounding of
/// the least-squares solves.
pub fn is_nonincreasing(h: &[f64], slack: f64) -> bool {
    h.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + slack)
}

impl BilinearInstance {
    /// Tolerance for [`is_nonincreasing`] on this instance's residuals.
    pub fn monotone_slack(&self) -> f64 {
        1e-10 * (1.0 + self.target.as_vector().norm())
    }
}

/// Point sets of the bilinear separability program: rows of `a_mat`
/// (`m' x n'`) and `b_mat` (`k' x n'`).
#[derive(Clone, Debug, PartialEq)]
pub struct SeparabilityInstance {
    pub a_mat: DMatrix<f64>,
    pub b_mat: DMatrix<f64>,
}

impl SeparabilityInstance {
    pub fn new(a_mat: DMatrix<f64>, b_mat: DMatrix<f64>) -> Result<Self> {
        if a_mat.nrows() == 0
            || b_mat.nrows() == 0
            || a_mat.ncols() == 0
            || a_mat.ncols() != b_mat.ncols()
        {
            return Err(shape(
                "A' and B need at least one row and a shared positive column count",
            ));
        }
        Ok(Self { a_mat, b_mat })
    }

    /// Entries uniform in `[-1, 1]`.
    pub fn random(m: usize, k: usize, n: usize, seed: u64) -> Result<Self> {
        let mut rng = substream(seed, domain::CASES, 0);
        let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..=1.0));
        let b = DMatrix::from_fn(k, n, |_, _| rng.random_range(-1.0..=1.0));
        Self::new(a, b)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.a_mat.nrows(), self.b_mat.nrows(), self.a_mat.ncols())
    }

    /// `z^1 . z^2`.
    pub fn objective(v: &SeparabilityPoint) -> f64 {
        v.z1.dot(&v.z2)
    }

    /// Left-hand sides of the four families written as `g <= 0`:
    /// `-A'w^1 + g^1 e + e`, `-A'w^2 + g^2 e + e`,
    /// `Bw^1 - g^1 e + e - z^1`, `Bw^2 - g^2 e + e - z^2`.
    pub fn constraint_lhs(&self, v: &SeparabilityPoint) -> [DVector<f64>; 4] {
        let (m, k, _) = self.dims();
        let em = DVector::from_element(m, 1.0);
        let ek = DVector::from_element(k, 1.0);
        [
            -(&self.a_mat * &v.w1) + &em * v.gamma1 + &em,
            -(&self.a_mat * &v.w2) + &em * v.gamma2 + &em,
            &self.b_mat * &v.w1 - &ek * v.gamma1 + &ek - &v.z1,
            &self.b_mat * &v.w2 - &ek * v.gamma2 + &ek - &v.z2,
        ]
    }
}

/// Values of the separability program's variables.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparabilityPoint {
    pub z1: DVector<f64>,
    pub z2: DVector<f64>,
    pub w1: DVector<f64>,
    pub w2: DVector<f64>,
    pub gamma1: f64,
    pub gamma2: f64,
}

/// Where each separability variable lives in `(b, A)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VariableMap {
    pub z1: Vec<Var>,
    pub z2: Vec<Var>,
    pub w1: Vec<Var>,
    pub w2: Vec<Var>,
    pub gamma1: Var,
    pub gamma2: Var,
}

/// Which family and row of the separability program a constraint encodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encodes {
    Objective,
    /// `(family 1..=4, row 0-based)`.
    Row(usize, usize),
}

/// Constraint placement.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReductionLayout {
    /// Index sets and entry lists of the standard construction.
    Standard,
    /// Standard families 1 to 3; the fourth family moved into column 1 where
    /// `z^2` lives, with the needed constants pinned in column 1.
    ColumnOneRepair,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reduction {
    pub instance: BilinearInstance,
    pub map: VariableMap,
    /// Parallel to `instance.constraints`.
    pub encodes: Vec<Encodes>,
    pub layout: ReductionLayout,
}

/// `max(k' + 2n' + 2, 1 + max(m', k'))`.
pub fn reduction_dimension(m: usize, k: usize, n: usize) -> usize {
    (k + 2 * n + 2).max(1 + m.max(k))
}

/// Build the bilinear instance encoding `s`.
pub fn reduce_separability(s: &SeparabilityInstance, layout: ReductionLayout) -> Result<Reduction> {
    let (mp, kp, np) = s.dims();
    let mut d = reduction_dimension(mp, kp, np);
    if layout == ReductionLayout::ColumnOneRepair {
        // Column 1 must also hold z^2, the k' x n' constants of B and one pin.
        d = d.max(kp * (np + 1));
    }
    let m = pair_count(d);
    // 0-based positions.
    let w1: Vec<Var> = (0..np).map(|k| Var::B(kp + k)).collect();
    let w2: Vec<Var> = (0..np).map(|k| Var::B(kp + np + k)).collect();
    let g1 = kp + 2 * np;
    let g2 = kp + 2 * np + 1;
    let one_b = kp + 2 * np + 2;
    let one_a = 2 * np;
    let zero_a = 2 * np + 1;
    let map = VariableMap {
        z1: (0..kp).map(Var::B).collect(),
        z2: (0..kp).map(|i| Var::A(i, 0)).collect(),
        w1,
        w2,
        gamma1: Var::B(g1),
        gamma2: Var::B(g2),
    };

    let mut fixed: Vec<(Var, f64)> = Vec::new();
    for j in 0..mp {
        for k in 0..np {
            fixed.push((Var::A(k, j + 1), -s.a_mat[(j, k)]));
        }
    }
    for j in 0..kp {
        for k in 0..np {
            fixed.push((Var::A(np + k, j + 1), s.b_mat[(j, k)]));
        }
    }
    fixed.push((Var::B(one_b), 1.0));
    for c in 1..=mp.max(kp) {
        fixed.push((Var::A(one_a, c), 1.0));
        fixed.push((Var::A(zero_a, c), 0.0));
    }

    let mut constraints = vec![Constraint {
        r: 1,
        entries: (0..kp).map(|i| (i, i, 1.0)).collect(),
    }];
    let mut encodes = vec![Encodes::Objective];
    for j in 1..=mp {
        let mut e: Vec<(usize, usize, f64)> = (0..np).map(|k| (kp + k, k, 1.0)).collect();
        e.extend([(g1, one_a, 1.0), (one_b, one_a, 1.0), (one_b, zero_a, 1.0)]);
        constraints.push(Constraint {
            r: j * m + 1,
            entries: e,
        });
        encodes.push(Encodes::Row(1, j - 1));

        let mut e: Vec<(usize, usize, f64)> = (0..np).map(|k| (kp + np + k, k, 1.0)).collect();
        e.extend([(g2, one_a, 1.0), (one_b, one_a, 1.0), (one_b, zero_a, 1.0)]);
        constraints.push(Constraint {
            r: j * m + 2,
            entries: e,
        });
        encodes.push(Encodes::Row(2, j - 1));
    }
    for j in 1..=kp {
        let mut e: Vec<(usize, usize, f64)> = (0..np).map(|k| (kp + k, np + k, 1.0)).collect();
        e.extend([(one_b, one_a, 1.0), (g1, one_a, -1.0), (j - 1, one_a, -1.0)]);
        constraints.push(Constraint {
            r: j * m + 3,
            entries: e,
        });
        encodes.push(Encodes::Row(3, j - 1));
    }
    match layout {
        ReductionLayout::Standard => {
            for j in 1..=kp {
                let mut e: Vec<(usize, usize, f64)> =
                    (0..np).map(|k| (kp + np + k, np + k, 1.0)).collect();
                e.extend([(one_b, one_a, 1.0), (g2, one_a, -1.0), (j - 1, one_a, -1.0)]);
                constraints.push(Constraint {
                    r: j * m + 4,
                    entries: e,
                });
                encodes.push(Encodes::Row(4, j - 1));
            }
        }
        ReductionLayout::ColumnOneRepair => {
            // Column 1 rows: z^2 in 0..k', then B row j at k' + j n' .. , then a 1.
            let b_row = |j: usize, k: usize| kp + j * np + k;
            let pin = kp + kp * np;
            for j in 0..kp {
                for k in 0..np {
                    fixed.push((Var::A(b_row(j, k), 0), s.b_mat[(j, k)]));
                }
            }
            fixed.push((Var::A(pin, 0), 1.0));
            for j in 0..kp {
                let mut e: Vec<(usize, usize, f64)> =
                    (0..np).map(|k| (kp + np + k, b_row(j, k), 1.0)).collect();
                e.extend([(one_b, pin, 1.0), (g2, pin, -1.0), (one_b, j, -1.0)]);
                constraints.push(Constraint {
                    r: 2 + j,
                    entries: e,
                });
                encodes.push(Encodes::Row(4, j));
            }
        }
    }

    let splits = vec![
        Split {
            name: "z1".into(),
            vars: map.z1.clone(),
        },
        Split {
            name: "z2".into(),
            vars: map.z2.clone(),
        },
    ];
    let mut paired: Vec<(Constraint, Encodes)> = constraints.into_iter().zip(encodes).collect();
    paired.sort_by_key(|(c, _)| c.r);
    let (constraints, encodes): (Vec<_>, Vec<_>) = paired.into_iter().unzip();
    let instance = BilinearInstance::new(ReparamVector::zeros(d), constraints, fixed, splits)?;
    Ok(Reduction {
        instance,
        map,
        encodes,
        layout,
    })
}

/// Outcome of [`verify_reduction`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReductionCheck {
    pub passed: bool,
    pub max_deviation: f64,
    /// `(r, encodes, max deviation over samples)` per constraint.
    pub per_constraint: Vec<(usize, Encodes, f64)>,
    /// First constraint whose deviation exceeded the tolerance.
    pub first_failure: Option<usize>,
    pub samples: usize,
}

pub const REDUCTION_TOL: f64 = 1e-12;

impl Reduction {
    /// `(b, A)` for a separability point; unassigned free entries take `noise`.
    pub fn embed<R: Rng + ?Sized>(
        &self,
        v: &SeparabilityPoint,
        rng: &mut R,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.instance.d;
        let mut b = DVector::from_fn(d + 1, |_, _| rng.random_range(-1.0..1.0));
        let mut a = DMatrix::from_fn(d + 1, d, |_, _| rng.random_range(-1.0..1.0));
        self.instance.apply_pins(&mut b, &mut a);
        let mut set = |var: Var, x: f64| match var {
            Var::B(i) => b[i] = x,
            Var::A(i, j) => a[(i, j)] = x,
        };
        for (var, x) in self.map.z1.iter().zip(v.z1.iter()) {
            set(*var, *x);
        }
        for (var, x) in self.map.z2.iter().zip(v.z2.iter()) {
            set(*var, *x);
        }
        for (var, x) in self.map.w1.iter().zip(v.w1.iter()) {
            set(*var, *x);
        }
        for (var, x) in self.map.w2.iter().zip(v.w2.iter()) {
            set(*var, *x);
        }
        set(self.map.gamma1, v.gamma1);
        set(self.map.gamma2, v.gamma2);
        (b, a)
    }
}

/// Compare every encoded constraint with the separability program at random
/// points. Free entries of `(b, A)` that carry no separability variable are
/// filled with noise, so a constraint that touches them fails.
pub fn verify_reduction(
    s: &SeparabilityInstance,
    reduced: &Reduction,
    samples: usize,
    seed: u64,
) -> ReductionCheck {
    let (_, kp, np) = s.dims();
    let m = reduced.instance.m();
    let per_sample: Vec<Vec<f64>> = (0..samples)
        .into_par_iter()
        .map(|t| {
            let mut rng = substream(seed, domain::CASES, 1 + t as u64);
            let mut draw = |len: usize| DVector::from_fn(len, |_, _| rng.random_range(-1.0..1.0));
            let z1 = draw(kp);
            let z2 = draw(kp);
            let w1 = draw(np);
            let w2 = draw(np);
            let g = draw(2);
            let v = SeparabilityPoint {
                z1,
                z2,
                w1,
                w2,
                gamma1: g[0],
                gamma2: g[1],
            };
            let (b, a) = reduced.embed(&v, &mut rng);
            let lhs = s.constraint_lhs(&v);
            reduced
                .instance
                .constraints
                .iter()
                .zip(&reduced.encodes)
                .map(|(c, enc)| {
                    let got = c.eval(&b, &a, m);
                    let want = match *enc {
                        Encodes::Objective => SeparabilityInstance::objective(&v),
                        Encodes::Row(f, row) => lhs[f - 1][row],
                    };
                    (got - want).abs()
                })
                .collect()
        })
        .collect();
    let mut per_constraint: Vec<(usize, Encodes, f64)> = reduced
        .instance
        .constraints
        .iter()
        .zip(&reduced.encodes)
        .map(|(c, e)| (c.r, *e, 0.0))
        .collect();
    for devs in &per_sample {
        for (slot, dev) in per_constraint.iter_mut().zip(devs) {
            slot.2 = slot.2.max(*dev);
        }
    }
    let max_deviation = per_constraint.iter().map(|c| c.2).fold(0.0, f64::max);
    let first_failure = per_constraint
        .iter()
        .find(|c| !(c.2 <= REDUCTION_TOL))
        .map(|c| c.0);
    ReductionCheck {
        passed: first_failure.is_none(),
        max_deviation,
        per_constraint,
        first_failure,
        samples,
    }
}

/// Human-readable account of a reduction and, optionally, its check.
pub fn reduction_report(
    s: &SeparabilityInstance,
    red: &Reduction,
    check: Option<&ReductionCheck>,
) -> String {
    let (mp, kp, np) = s.dims();
    let inst = &red.instance;
    let m = inst.m();
    let mut out = String::new();
    let _ = writeln!(out, "bilinear separability reduction");
    let _ = writeln!(out, "m' = {mp}, k' = {kp}, n' = {np}");
    let _ = writeln!(out, "layout: {:?}", red.layout);
    let _ = writeln!(out, "d = {}, m = {m}, dm = {}", inst.d, inst.d * m);
    let _ = writeln!(
        out,
        "stored constraint matrices: {}",
        inst.constraints.len()
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "variable map");
    let list = |vs: &[Var]| vs.iter().map(Var::to_string).collect::<Vec<_>>().join(" ");
    let _ = writeln!(out, "  z1 (split) -> {}", list(&red.map.z1));
    let _ = writeln!(out, "  z2 (split) -> {}", list(&red.map.z2));
    let _ = writeln!(out, "  w1 -> {}", list(&red.map.w1));
    let _ = writeln!(out, "  w2 -> {}", list(&red.map.w2));
    let _ = writeln!(out, "  gamma1 -> {}", red.map.gamma1);
    let _ = writeln!(out, "  gamma2 -> {}", red.map.gamma2);
    let _ = writeln!(out);
    let _ = writeln!(out, "pinned entries");
    for (v, x) in &inst.fixed {
        let _ = writeln!(out, "  {v} = {x}");
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "constraints (1-based D entries)");
    for (i, (c, e)) in inst.constraints.iter().zip(&red.encodes).enumerate() {
        let what = match e {
            Encodes::Objective => "objective z1 . z2".to_string(),
            Encodes::Row(f, row) => format!("family {f}, row {}", row + 1),
        };
        let nz: Vec<String> = c
            .entries
            .iter()
            .map(|(i, k, v)| format!("({},{})={v}", i + 1, k + 1))
            .collect();
        let dev = check
            .map(|ch| format!("  max deviation {:.3e}", ch.per_constraint[i].2))
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "  r = {:>4}  column {:>2}  {what}: {}{dev}",
            c.r,
            c.column(m) + 1,
            nz.join(" ")
        );
    }
    if let Some(ch) = check {
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "verification over {} samples: {} (max deviation {:.3e}{})",
            ch.samples,
            if ch.passed { "PASS" } else { "FAIL" },
            ch.max_deviation,
            ch.first_failure
                .map(|r| format!(", first failing r = {r}"))
                .unwrap_or_default()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reparam::phi;

    fn random_params(d: usize, seed: u64) -> (DVector<f64>, DMatrix<f64>) {
        let mut rng = substream(seed, 7, 0);
        (
            DVector::from_fn(d + 1, |_, _| rng.random_range(-1.0..1.0)),
            DMatrix::from_fn(d + 1, d, |_, _| rng.random_range(-1.0..1.0)),
        )
    }

    #[test]
    fn default_structure_examples() {
        let s = default_structure(1);
        assert_eq!(s[0].entries, vec![(0, 0, 1.0)]);
        assert_eq!(s[1].entries, vec![(0, 1, 1.0), (1, 0, 1.0)]);
        for d in 1..=4 {
            let (b, a) = random_params(d, d as u64);
            let x = phi(&b, &a).unwrap();
            let inst = BilinearInstance::phi_system(x.clone());
            let m = inst.m();
            for c in &inst.constraints {
                assert!((c.eval(&b, &a, m) - x.as_vector()[c.r - 1]).abs() < 1e-13);
            }
            assert!(inst.residual(&b, &a).unwrap().amax() < 1e-13);
        }
    }

    #[test]
    fn residual_shift_and_pins() {
        let (b, a) = random_params(2, 3);
        let x = phi(&b, &a).unwrap();
        let mut shifted = x.as_vector().clone();
        shifted[4] += 0.25;
        let inst = BilinearInstance::phi_system(ReparamVector::new(2, shifted).unwrap());
        let r = inst.residual(&b, &a).unwrap();
        assert!((r[4] + 0.25).abs() < 1e-15);
        assert_eq!(r.iter().filter(|v| v.abs() > 1e-13).count(), 1);
        let pinned =
            BilinearInstance::new(x, default_structure(2), vec![(Var::B(0), 5.0)], vec![]).unwrap();
        assert!(pinned.residual(&b, &a).is_err());
    }

    #[test]
    fn als_finds_feasible_targets() {
        for d in 1..=3 {
            for seed in 0..3 {
                let (b, a) = random_params(d, 100 + seed);
                let inst = BilinearInstance::phi_system(phi(&b, &a).unwrap());
                let res = inst.als_solve(32, 2000, seed).unwrap();
                assert!(res.monotone);
                assert!(res.residual <= 1e-8, "d={d} seed={seed}: {}", res.residual);
            }
        }
    }

    #[test]
    fn standard_reduction_layout() {
        let s = SeparabilityInstance::random(2, 2, 2, 5).unwrap();
        let red = reduce_separability(&s, ReductionLayout::Standard).unwrap();
        assert_eq!(red.instance.d, 8);
        let rs: Vec<usize> = red.instance.constraints.iter().map(|c| c.r).collect();
        assert_eq!(rs, vec![1, 46, 47, 48, 49, 91, 92, 93, 94]);
        assert!(red
            .instance
            .constraints
            .iter()
            .all(|c| c.entries.len() <= 2 + 3));
        assert!(red.instance.fixed.contains(&(Var::B(8), 1.0)));
        for c in 1..=2 {
            assert!(red.instance.fixed.contains(&(Var::A(4, c), 1.0)));
            assert!(red.instance.fixed.contains(&(Var::A(5, c), 0.0)));
        }
        let again = reduce_separability(&s, ReductionLayout::Standard).unwrap();
        assert_eq!(red, again);
    }

    #[test]
    fn standard_fourth_family_tracks_the_wrong_decision_vector() {
        let s = SeparabilityInstance::random(2, 2, 2, 5).unwrap();
        let red = reduce_separability(&s, ReductionLayout::Standard).unwrap();
        let check = verify_reduction(&s, &red, 100, 1);
        for (r, enc, dev) in &check.per_constraint {
            match enc {
                Encodes::Row(4, _) => assert!(*dev > 1e-3, "r={r}"),
                _ => assert!(*dev <= REDUCTION_TOL, "r={r}: {dev}"),
            }
        }
        assert!(!check.passed);
    }

    #[test]
    fn repaired_layout_verifies() {
        for (m, k, n) in [(2, 2, 2), (3, 1, 2), (1, 3, 1), (4, 2, 3)] {
            let s = SeparabilityInstance::random(m, k, n, 9).unwrap();
            let red = reduce_separability(&s, ReductionLayout::ColumnOneRepair).unwrap();
            let check = verify_reduction(&s, &red, 100, 2);
            assert!(check.passed, "{m},{k},{n}: {:?}", check.first_failure);
        }
    }

    #[test]
    fn perturbed_pin_breaks_verification() {
        let s = SeparabilityInstance::random(2, 2, 2, 5).unwrap();
        let mut red = reduce_separability(&s, ReductionLayout::ColumnOneRepair).unwrap();
        let idx = red
            .instance
            .fixed
            .iter()
            .position(|(v, _)| *v == Var::B(8))
            .unwrap();
        red.instance.fixed[idx].1 += 1e-3;
        assert!(!verify_reduction(&s, &red, 20, 3).passed);
    }

    #[test]
    fn zero_point_leaves_constant_terms() {
        let s = SeparabilityInstance::random(2, 2, 2, 5).unwrap();
        let zero = SeparabilityPoint {
            z1: DVector::zeros(2),
            z2: DVector::zeros(2),
            w1: DVector::zeros(2),
            w2: DVector::zeros(2),
            gamma1: 0.0,
            gamma2: 0.0,
        };
        assert_eq!(SeparabilityInstance::objective(&zero), 0.0);
        for f in s.constraint_lhs(&zero) {
            assert!(f.iter().all(|&v| v == 1.0));
        }
    }
}
