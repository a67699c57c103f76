//! Markov-chain prompts.
//!
//! A prompt holds `n` context chains and one query chain, each of length
//! `d + 1`, stored as the columns of a `(d+1) x (n+1)` matrix. The first `d`
//! rows of a column are the covariates `x`, the last row the label `y`. The
//! query column carries `0` in the label slot and its true label is kept
//! separately. States are encoded as the reals `0, 1, ..., S-1`.

use std::io::{BufRead, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;

use crate::error::{invalid, shape, Error, Result};
use crate::rng::{domain, substream};

const PROB_TOL: f64 = 1e-12;

/// Row-stochastic transition matrix over `S` states.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionKernel {
    probs: DMatrix<f64>,
}

impl TransitionKernel {
    pub fn new(probs: DMatrix<f64>) -> Result<Self> {
        if probs.nrows() != probs.ncols() || probs.nrows() < 2 {
            return Err(Error::InvalidKernel(format!(
                "expected a square matrix with at least 2 states, got {}x{}",
                probs.nrows(),
                probs.ncols()
            )));
        }
        for (r, row) in probs.row_iter().enumerate() {
            if row
                .iter()
                .any(|&v| !(-PROB_TOL..=1.0 + PROB_TOL).contains(&v))
            {
                return Err(Error::InvalidKernel(format!(
                    "row {r} has an entry outside [0, 1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PROB_TOL {
                return Err(Error::InvalidKernel(format!("row {r} sums to {sum}")));
            }
        }
        Ok(Self { probs })
    }

    /// `[[1 - p01, p01], [p10, 1 - p10]]`.
    pub fn binary(p01: f64, p10: f64) -> Result<Self> {
        Self::new(DMatrix::from_row_slice(
            2,
            2,
            &[1.0 - p01, p01, p10, 1.0 - p10],
        ))
    }

    pub fn identity(states: usize) -> Result<Self> {
        Self::new(DMatrix::identity(states, states))
    }

    pub fn states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn probs(&self) -> &DMatrix<f64> {
        &self.probs
    }

    /// Next state drawn from row `s`.
    pub fn step<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        sample_categorical(self.probs.row(s).iter().copied(), rng.random())
    }
}

/// Distribution over transition kernels.
#[derive(Clone, Debug)]
pub enum KernelPrior {
    /// Binary chains with `p01, p10 ~ U(0, 1)` independently.
    IndependentUniform,
    /// Each row drawn independently from `Dirichlet(alpha * 1)`.
    DirichletRows { states: usize, alpha: f64 },
    /// Always the given kernel.
    PointMass(TransitionKernel),
}

impl KernelPrior {
    pub fn states(&self) -> usize {
        match self {
            KernelPrior::IndependentUniform => 2,
            KernelPrior::DirichletRows { states, .. } => *states,
            KernelPrior::PointMass(k) => k.states(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            KernelPrior::DirichletRows { states, alpha } => {
                if *states < 2 {
                    return Err(invalid("Dirichlet prior needs at least 2 states"));
                }
                if !(*alpha > 0.0 && alpha.is_finite()) {
                    return Err(invalid(format!(
                        "Dirichlet concentration must be positive, got {alpha}"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TransitionKernel {
        match self {
            KernelPrior::IndependentUniform => {
                let p01: f64 = rng.random();
                let p10: f64 = rng.random();
                TransitionKernel::binary(p01, p10).expect("uniform draws lie in [0, 1)")
            }
            KernelPrior::DirichletRows { states, alpha } => {
                let gamma = Gamma::new(*alpha, 1.0).expect("validated concentration");
                let mut probs = DMatrix::zeros(*states, *states);
                for r in 0..*states {
                    let mut row: Vec<f64> = (0..*states).map(|_| gamma.sample(rng)).collect();
                    let mut sum: f64 = row.iter().sum();
                    if !(sum > 0.0) {
                        // Every gamma draw underflowed: the row is a vertex of the simplex.
                        let hot = rng.random_range(0..*states);
                        row.iter_mut()
                            .enumerate()
                            .for_each(|(i, v)| *v = f64::from(u8::from(i == hot)));
                        sum = 1.0;
                    }
                    for (c, v) in row.iter().enumerate() {
                        probs[(r, c)] = v / sum;
                    }
                }
                TransitionKernel { probs }
            }
            KernelPrior::PointMass(k) => k.clone(),
        }
    }
}

/// Probability mass function over states.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialDistribution {
    pmf: Vec<f64>,
}

impl InitialDistribution {
    pub fn new(pmf: Vec<f64>) -> Result<Self> {
        if pmf.len() < 2 {
            return Err(Error::InvalidDistribution("need at least 2 states".into()));
        }
        if pmf.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidDistribution(
                "entries must lie in [0, 1]".into(),
            ));
        }
        let sum: f64 = pmf.iter().sum();
        if (sum - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidDistribution(format!("masses sum to {sum}")));
        }
        Ok(Self { pmf })
    }

    /// `[1 - p, p]`.
    pub fn binary(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidDistribution(format!(
                "p = {p} is not a probability"
            )));
        }
        Self::new(vec![1.0 - p, p])
    }

    pub fn uniform(states: usize) -> Result<Self> {
        Self::new(vec![1.0 / states as f64; states])
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(self.pmf.iter().copied(), rng.random())
    }
}

/// Joint law of the `n + 1` initial states of a prompt.
pub trait InitialSampler: Send + Sync + std::fmt::Debug {
    fn states(&self) -> usize;

    /// Fill `out[0..n]` with context initial states and `out[n]` with the query's.
    fn sample_initials(&self, rng: &mut dyn rand::RngCore, out: &mut [usize]);
}

impl InitialSampler for InitialDistribution {
    fn states(&self) -> usize {
        self.pmf.len()
    }

    fn sample_initials(&self, rng: &mut dyn rand::RngCore, out: &mut [usize]) {
        for s in out.iter_mut() {
            *s = self.sample(rng);
        }
    }
}

/// Binary initial states where the query start is `Bern(p)` and each context
/// start is `Bern(g(x_query))`, independently given the query.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryCorrelatedBinary {
    pub p: f64,
    /// `g(0)`.
    pub g0: f64,
    /// `g(1)`.
    pub g1: f64,
}

impl QueryCorrelatedBinary {
    pub fn new(p: f64, g0: f64, g1: f64) -> Result<Self> {
        for (name, v) in [("p", p), ("g(0)", g0), ("g(1)", g1)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidDistribution(format!(
                    "{name} = {v} is not a probability"
                )));
            }
        }
        Ok(Self { p, g0, g1 })
    }

    /// `g(x) = (x - p)^2`.
    pub fn squared_offset(p: f64) -> Result<Self> {
        Self::new(p, p * p, (1.0 - p) * (1.0 - p))
    }
}

impl InitialSampler for QueryCorrelatedBinary {
    fn states(&self) -> usize {
        2
    }

    fn sample_initials(&self, rng: &mut dyn rand::RngCore, out: &mut [usize]) {
        let n = out.len() - 1;
        let q = usize::from(rng.random::<f64>() < self.p);
        let g = if q == 1 { self.g1 } else { self.g0 };
        for s in out[..n].iter_mut() {
            *s = usize::from(rng.random::<f64>() < g);
        }
        out[n] = q;
    }
}

fn sample_categorical(pmf: impl Iterator<Item = f64>, u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, p) in pmf.enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// One prompt: the input matrix and the held-out query label.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    d: usize,
    n: usize,
    states: usize,
    z: DMatrix<f64>,
    label: f64,
}

impl Prompt {
    /// Build from a full `(d+1) x (n+1)` matrix whose query label slot is zero.
    pub fn new(z: DMatrix<f64>, label: f64, states: usize) -> Result<Self> {
        if z.nrows() < 2 || z.ncols() < 2 {
            return Err(shape(format!(
                "prompt matrix {}x{} is too small",
                z.nrows(),
                z.ncols()
            )));
        }
        let (d, n) = (z.nrows() - 1, z.ncols() - 1);
        if z[(d, n)] != 0.0 {
            return Err(invalid("query label slot must be zero"));
        }
        Ok(Self {
            d,
            n,
            states,
            z,
            label,
        })
    }

    /// Build from chains of `d + 1` states; the last chain is the query.
    pub fn from_chains(chains: &[Vec<usize>], states: usize) -> Result<Self> {
        if chains.len() < 2 {
            return Err(invalid("need at least one context chain and a query chain"));
        }
        let len = chains[0].len();
        if len < 2 || chains.iter().any(|c| c.len() != len) {
            return Err(shape("chains must share a length of at least 2"));
        }
        let (d, n) = (len - 1, chains.len() - 1);
        let mut z = DMatrix::zeros(d + 1, n + 1);
        for (j, c) in chains.iter().enumerate() {
            for (t, &s) in c.iter().enumerate() {
                if s >= states {
                    return Err(invalid(format!(
                        "state {s} out of range for {states} states"
                    )));
                }
                z[(t, j)] = s as f64;
            }
        }
        let label = z[(d, n)];
        z[(d, n)] = 0.0;
        Ok(Self {
            d,
            n,
            states,
            z,
            label,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn label(&self) -> f64 {
        self.label
    }

    /// Covariates of the query chain.
    pub fn query_x(&self) -> DVector<f64> {
        self.z.view((0, self.n), (self.d, 1)).column(0).into_owned()
    }

    /// The prompt with `y` written into the masked query slot.
    pub fn with_query_label(&self, y: f64) -> DMatrix<f64> {
        let mut z = self.z.clone();
        z[(self.d, self.n)] = y;
        z
    }
}

/// Draw one prompt and the kernel that generated it.
pub fn sample_prompt<R: Rng + ?Sized>(
    prior: &KernelPrior,
    init: &dyn InitialSampler,
    d: usize,
    n: usize,
    rng: &mut R,
) -> Result<(Prompt, TransitionKernel)> {
    check_dims(prior, init, d, n)?;
    let kernel = prior.sample(rng);
    let prompt = sample_prompt_with_kernel(&kernel, init, d, n, rng);
    Ok((prompt, kernel))
}

fn check_dims(prior: &KernelPrior, init: &dyn InitialSampler, d: usize, n: usize) -> Result<()> {
    if d == 0 {
        return Err(invalid("chain length must be at least 2 (d >= 1)"));
    }
    if n == 0 {
        return Err(invalid("need at least one context chain (n >= 1)"));
    }
    prior.validate()?;
    if prior.states() != init.states() {
        return Err(invalid(format!(
            "kernel prior has {} states but initial law has {}",
            prior.states(),
            init.states()
        )));
    }
    Ok(())
}

/// Draw a prompt under a fixed kernel.
pub fn sample_prompt_with_kernel<R: Rng + ?Sized>(
    kernel: &TransitionKernel,
    init: &dyn InitialSampler,
    d: usize,
    n: usize,
    mut rng: &mut R,
) -> Prompt {
    let mut starts = vec![0usize; n + 1];
    init.sample_initials(&mut rng, &mut starts);
    let mut z = DMatrix::zeros(d + 1, n + 1);
    for (j, &s0) in starts.iter().enumerate() {
        let mut s = s0;
        z[(0, j)] = s as f64;
        for t in 1..=d {
            s = kernel.step(s, rng);
            z[(t, j)] = s as f64;
        }
    }
    let label = z[(d, n)];
    z[(d, n)] = 0.0;
    Prompt {
        d,
        n,
        states: kernel.states(),
        z,
        label,
    }
}

/// Reproducible prompt source: prompt `i` is drawn from its own substream.
#[derive(Clone, Debug)]
pub struct PromptSampler {
    pub prior: KernelPrior,
    pub init: Arc<dyn InitialSampler>,
    pub d: usize,
    pub n: usize,
    pub seed: u64,
}

impl PromptSampler {
    pub fn new(
        prior: KernelPrior,
        init: Arc<dyn InitialSampler>,
        d: usize,
        n: usize,
        seed: u64,
    ) -> Result<Self> {
        check_dims(&prior, init.as_ref(), d, n)?;
        Ok(Self {
            prior,
            init,
            d,
            n,
            seed,
        })
    }

    /// Binary chains, uniform kernel prior, `Bern(p)` initial states.
    pub fn binary(p: f64, d: usize, n: usize, seed: u64) -> Result<Self> {
        Self::new(
            KernelPrior::IndependentUniform,
            Arc::new(InitialDistribution::binary(p)?),
            d,
            n,
            seed,
        )
    }

    pub fn states(&self) -> usize {
        self.prior.states()
    }

    pub fn sample(&self, index: u64) -> (Prompt, TransitionKernel) {
        let mut rng = substream(self.seed, domain::PROMPTS, index);
        let kernel = self.prior.sample(&mut rng);
        let prompt =
            sample_prompt_with_kernel(&kernel, self.init.as_ref(), self.d, self.n, &mut rng);
        (prompt, kernel)
    }

    pub fn prompt(&self, index: u64) -> Prompt {
        self.sample(index).0
    }

    /// Prompts `start .. start + count`, generated in parallel.
    pub fn batch(&self, start: u64, count: usize) -> Vec<Prompt> {
        (0..count as u64)
            .into_par_iter()
            .map(|i| self.prompt(start + i))
            .collect()
    }

    pub fn batch_with_kernels(&self, start: u64, count: usize) -> Vec<(Prompt, TransitionKernel)> {
        (0..count as u64)
            .into_par_iter()
            .map(|i| self.sample(start + i))
            .collect()
    }
}

/// `(1/n) * sum_i z_i z_i^T` over the context columns.
pub fn gram_matrix(prompt: &Prompt) -> DMatrix<f64> {
    let ctx = prompt.z.columns(0, prompt.n);
    (ctx * ctx.transpose()) / prompt.n as f64
}

/// Upper triangle of a symmetric matrix, row-major.
pub fn upper_triangle(g: &DMatrix<f64>) -> DVector<f64> {
    let k = g.nrows();
    let mut v = Vec::with_capacity(k * (k + 1) / 2);
    for i in 0..k {
        for j in i..k {
            v.push(g[(i, j)]);
        }
    }
    DVector::from_vec(v)
}

/// Gram matrix and its upper-triangle vector.
pub fn gram_stats(prompt: &Prompt) -> (DMatrix<f64>, DVector<f64>) {
    let g = gram_matrix(prompt);
    let v = upper_triangle(&g);
    (g, v)
}

/// Write prompts and their kernels as CSV, one prompt per row.
///
/// Columns: `index,d,n,states,seed`, the kernel row-major, `Z_0` column-major,
/// then the held-out label.
pub fn write_prompt_batch<W: Write>(
    mut w: W,
    records: &[(Prompt, TransitionKernel)],
    seed: u64,
) -> Result<()> {
    let Some((first, _)) = records.first() else {
        return Err(invalid("empty prompt batch"));
    };
    let (d, n, s) = (first.d, first.n, first.states);
    writeln!(w, "# markov-icl prompt batch v1")?;
    let mut header = vec![
        "index".to_string(),
        "d".into(),
        "n".into(),
        "states".into(),
        "seed".into(),
    ];
    for r in 0..s {
        for c in 0..s {
            header.push(format!("k_{r}_{c}"));
        }
    }
    for col in 0..=n {
        for row in 0..=d {
            header.push(format!("z_{row}_{col}"));
        }
    }
    header.push("label".into());
    writeln!(w, "{}", header.join(","))?;
    for (i, (p, k)) in records.iter().enumerate() {
        if p.d != d || p.n != n || p.states != s || k.states() != s {
            return Err(shape(
                "all prompts in a batch must share d, n and state count",
            ));
        }
        let mut fields = vec![
            i.to_string(),
            d.to_string(),
            n.to_string(),
            s.to_string(),
            seed.to_string(),
        ];
        for r in 0..s {
            for c in 0..s {
                fields.push(k.probs[(r, c)].to_string());
            }
        }
        fields.extend(p.z.iter().map(|v| v.to_string()));
        fields.push(p.label.to_string());
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}

/// A prompt batch read back from CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBatch {
    pub seed: u64,
    pub records: Vec<(Prompt, TransitionKernel)>,
}

pub fn read_prompt_batch<R: BufRead>(r: R) -> Result<PromptBatch> {
    let mut lines = r
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.starts_with('#')));
    let _header = lines
        .next()
        .ok_or_else(|| Error::Parse("missing header".into()))??;
    let mut records = Vec::new();
    let mut seed = 0;
    for (ln, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let num = |i: usize| -> Result<f64> {
            f.get(i)
                .ok_or_else(|| Error::Parse(format!("row {ln}: missing field {i}")))?
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("row {ln}: field {i}: {e}")))
        };
        let int = |i: usize| -> Result<u64> {
            f.get(i)
                .ok_or_else(|| Error::Parse(format!("row {ln}: missing field {i}")))?
                .parse::<u64>()
                .map_err(|e| Error::Parse(format!("row {ln}: field {i}: {e}")))
        };
        let (d, n, s) = (int(1)? as usize, int(2)? as usize, int(3)? as usize);
        seed = int(4)?;
        let expected = 5 + s * s + (d + 1) * (n + 1) + 1;
        if f.len() != expected {
            return Err(Error::Parse(format!(
                "row {ln}: expected {expected} fields, got {}",
                f.len()
            )));
        }
        let mut probs = DMatrix::zeros(s, s);
        for r in 0..s {
            for c in 0..s {
                probs[(r, c)] = num(5 + r * s + c)?;
            }
        }
        let base = 5 + s * s;
        let zs = (0..(d + 1) * (n + 1))
            .map(|i| num(base + i))
            .collect::<Result<Vec<_>>>()?;
        let z = DMatrix::from_column_slice(d + 1, n + 1, &zs);
        let label = num(expected - 1)?;
        records.push((Prompt::new(z, label, s)?, TransitionKernel::new(probs)?));
    }
    Ok(PromptBatch { seed, records })
}
