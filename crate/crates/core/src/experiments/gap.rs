//! Accuracy of a trained 1-layer LSA against the least-squares optimum of the
//! reparameterized model, as the chain length grows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fmt, mean, repeat_seed, Check, RunStamp, Summary, Table, TrainSettings};
use crate::error::{invalid, Result};
use crate::lsa::{accuracy_of, train, FixedBatch, LsaModel, ParamForm, TrainData};
use crate::markov_data::PromptSampler;
use crate::reparam::{lstsq_oracle, predict_reparam, reparam_loss};
use crate::rng::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GapConfig {
    /// Probability that a chain starts in state 1.
    pub p: f64,
    pub n: usize,
    pub dims: Vec<usize>,
    /// Prompts per `d`; both models are fit and scored on this batch.
    pub prompts: usize,
    pub repeats: usize,
    pub seed: u64,
    pub train: TrainSettings,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self {
            p: 0.5,
            n: 100,
            dims: (1..=10).collect(),
            prompts: 1000,
            repeats: 5,
            seed: 0,
            train: TrainSettings::default(),
        }
    }
}

/// One `(d, repeat)` cell.
#[derive(Clone, Debug, PartialEq)]
pub struct GapCell {
    pub d: usize,
    pub seed: u64,
    pub acc_reparam: f64,
    pub acc_lsa: f64,
    pub loss_reparam: f64,
    pub loss_lsa: f64,
    /// `ok`, or the reason the LSA fit failed.
    pub status: String,
}

#[derive(Clone, Debug)]
pub struct GapResult {
    pub cells: Vec<GapCell>,
    pub table: Table,
    pub summary: Summary,
}

fn run_cell(cfg: &GapConfig, d: usize, seed: u64) -> Result<GapCell> {
    let sampler = PromptSampler::binary(cfg.p, d, cfg.n, seed)?;
    let prompts = sampler.batch(0, cfg.prompts);
    let oracle = lstsq_oracle(&prompts)?;
    let preds: Vec<f64> = prompts
        .iter()
        .map(|p| predict_reparam(&oracle.x, p))
        .collect::<Result<_>>()?;
    let acc_reparam = accuracy_of(&preds, &prompts);
    let loss_reparam = reparam_loss(&oracle.x, &prompts)?;
    let mut model = LsaModel::random(
        ParamForm::Sparse,
        d,
        cfg.n,
        1,
        cfg.train.init_scale,
        derive_seed(seed, 1),
    )?;
    let data = TrainData::Fixed(FixedBatch::new(prompts.clone()));
    let (acc_lsa, loss_lsa, status) = match train(
        &mut model,
        &data,
        &cfg.train.config(ParamForm::Sparse, seed),
    ) {
        Ok(_) => (
            model.accuracy(&prompts)?,
            model.loss(&prompts)?,
            "ok".to_string(),
        ),
        Err(e) => (f64::NAN, f64::NAN, format!("failed: {e}")),
    };
    Ok(GapCell {
        d,
        seed,
        acc_reparam,
        acc_lsa,
        loss_reparam,
        loss_lsa,
        status,
    })
}

pub fn run_gap(cfg: &GapConfig) -> Result<GapResult> {
    if cfg.dims.is_empty() || cfg.dims.contains(&0) || cfg.repeats == 0 || cfg.prompts == 0 {
        return Err(invalid(
            "gap: need nonempty positive dims, repeats >= 1 and prompts >= 1",
        ));
    }
    cfg.train.validate()?;
    let jobs: Vec<(usize, u64)> = cfg
        .dims
        .iter()
        .flat_map(|&d| {
            (0..cfg.repeats).map(move |r| (d, derive_seed(repeat_seed(cfg.seed, r), d as u64)))
        })
        .collect();
    let cells: Vec<GapCell> = jobs
        .par_iter()
        .map(|&(d, s)| run_cell(cfg, d, s))
        .collect::<Result<_>>()?;

    let mut table = Table::new(&[
        "d",
        "seed",
        "acc_reparam",
        "acc_lsa",
        "loss_reparam",
        "loss_lsa",
        "status",
    ]);
    for c in &cells {
        table.push(vec![
            c.d.to_string(),
            c.seed.to_string(),
            fmt(c.acc_reparam),
            fmt(c.acc_lsa),
            fmt(c.loss_reparam),
            fmt(c.loss_lsa),
            c.status.clone(),
        ]);
    }
    let summary = Summary {
        stamp: RunStamp::new("gap", cfg, cfg.seed)?,
        checks: gap_checks(&cells),
    };
    Ok(GapResult {
        cells,
        table,
        summary,
    })
}

/// Mean `acc_reparam - acc_lsa` at `d`, over cells where training succeeded.
pub fn mean_gap(cells: &[GapCell], d: usize) -> Option<f64> {
    let gaps: Vec<f64> = cells
        .iter()
        .filter(|c| c.d == d && c.acc_lsa.is_finite())
        .map(|c| c.acc_reparam - c.acc_lsa)
        .collect();
    (!gaps.is_empty()).then(|| mean(&gaps))
}

pub fn gap_checks(cells: &[GapCell]) -> Vec<Check> {
    let mut dims: Vec<usize> = cells.iter().map(|c| c.d).collect();
    dims.sort_unstable();
    dims.dedup();
    let mut checks = Vec::new();
    let failed = cells.iter().filter(|c| c.status != "ok").count();
    checks.push(Check::new(
        "all cells trained",
        failed == 0,
        format!("{failed} failed cells"),
    ));
    if let (Some(g1), Some(g8)) = (mean_gap(cells, 1), mean_gap(cells, 8)) {
        checks.push(Check::new(
            "gap grows from d=1 to d=8",
            g8 > g1,
            format!("gap(1)={g1:.4} gap(8)={g8:.4}"),
        ));
    }
    let per_d: Vec<String> = dims
        .iter()
        .map(|&d| format!("{d}:{:.4}", mean_gap(cells, d).unwrap_or(f64::NAN)))
        .collect();
    let all = dims
        .iter()
        .all(|&d| mean_gap(cells, d).is_some_and(|g| g >= 0.0));
    checks.push(Check::new(
        "reparam accuracy >= lsa accuracy for every d",
        all,
        per_d.join(" "),
    ));
    checks
}
