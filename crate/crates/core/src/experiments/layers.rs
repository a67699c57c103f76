//! Accuracy against depth for chains over 2, 3 and 4 states.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fmt, mean, repeat_seed, std_dev, Check, RunStamp, Summary, Table, TrainSettings};
use crate::error::{invalid, Result};
use crate::lsa::{train, LsaModel, ParamForm, TrainData};
use crate::markov_data::{InitialDistribution, KernelPrior, PromptSampler};
use crate::rng::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayersConfig {
    pub states: Vec<usize>,
    pub layers: Vec<usize>,
    /// Covariates per chain; chains have length `d + 1`.
    pub d: usize,
    pub n: usize,
    /// Dirichlet concentration of each kernel row.
    pub alpha: f64,
    pub form: ParamForm,
    pub eval_prompts: usize,
    pub repeats: usize,
    pub seed: u64,
    pub train: TrainSettings,
}

impl Default for LayersConfig {
    fn default() -> Self {
        Self {
            states: vec![2, 3, 4],
            layers: vec![1, 2, 3],
            d: 5,
            n: 10,
            alpha: 0.1,
            form: ParamForm::Dense,
            eval_prompts: 2000,
            repeats: 5,
            seed: 0,
            train: TrainSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayersCell {
    pub states: usize,
    pub layers: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub final_loss: f64,
    pub status: String,
}

#[derive(Clone, Debug)]
pub struct LayersResult {
    pub cells: Vec<LayersCell>,
    pub table: Table,
    /// `(states, layers, mean, sd)` over repeats.
    pub means: Table,
    pub summary: Summary,
}

fn sampler(cfg: &LayersConfig, states: usize, seed: u64) -> Result<PromptSampler> {
    PromptSampler::new(
        KernelPrior::DirichletRows {
            states,
            alpha: cfg.alpha,
        },
        Arc::new(InitialDistribution::uniform(states)?),
        cfg.d,
        cfg.n,
        seed,
    )
}

fn run_cell(cfg: &LayersConfig, states: usize, layers: usize, seed: u64) -> Result<LayersCell> {
    let train_data = sampler(cfg, states, derive_seed(seed, 1))?;
    let eval = sampler(cfg, states, derive_seed(seed, 2))?.batch(0, cfg.eval_prompts);
    let mut model = LsaModel::random(
        cfg.form,
        cfg.d,
        cfg.n,
        layers,
        cfg.train.init_scale,
        derive_seed(seed, 3),
    )?;
    Ok(
        match train(
            &mut model,
            &TrainData::Stream(train_data),
            &cfg.train.config(cfg.form, seed),
        ) {
            Ok(trace) => {
                let tail = &trace[trace.len().saturating_sub(10)..];
                LayersCell {
                    states,
                    layers,
                    seed,
                    accuracy: model.accuracy(&eval)?,
                    final_loss: mean(tail),
                    status: "ok".into(),
                }
            }
            Err(e) => LayersCell {
                states,
                layers,
                seed,
                accuracy: f64::NAN,
                final_loss: f64::NAN,
                status: format!("failed: {e}"),
            },
        },
    )
}

pub fn run_layers(cfg: &LayersConfig) -> Result<LayersResult> {
    if cfg.states.iter().any(|&s| s < 2)
        || cfg.layers.contains(&0)
        || cfg.repeats == 0
        || cfg.eval_prompts == 0
    {
        return Err(invalid(
            "layers: need states >= 2, layers >= 1, repeats >= 1, eval_prompts >= 1",
        ));
    }
    if !(cfg.alpha > 0.0) {
        return Err(invalid("layers: alpha must be positive"));
    }
    cfg.train.validate()?;
    let mut jobs = Vec::new();
    for &s in &cfg.states {
        for &l in &cfg.layers {
            for r in 0..cfg.repeats {
                jobs.push((s, l, derive_seed(repeat_seed(cfg.seed, r), s as u64)));
            }
        }
    }
    let cells: Vec<LayersCell> = jobs
        .par_iter()
        .map(|&(s, l, seed)| run_cell(cfg, s, l, seed))
        .collect::<Result<_>>()?;

    let mut table = Table::new(&[
        "states",
        "layers",
        "seed",
        "accuracy",
        "final_loss",
        "status",
    ]);
    for c in &cells {
        table.push(vec![
            c.states.to_string(),
            c.layers.to_string(),
            c.seed.to_string(),
            fmt(c.accuracy),
            fmt(c.final_loss),
            c.status.clone(),
        ]);
    }
    let mut means = Table::new(&["states", "layers", "mean_accuracy", "sd_accuracy", "runs"]);
    for &s in &cfg.states {
        for &l in &cfg.layers {
            let accs = accuracies(&cells, s, l);
            means.push(vec![
                s.to_string(),
                l.to_string(),
                fmt(mean(&accs)),
                fmt(std_dev(&accs)),
                accs.len().to_string(),
            ]);
        }
    }
    let summary = Summary {
        stamp: RunStamp::new("layers", cfg, cfg.seed)?,
        checks: layers_checks(cfg, &cells),
    };
    Ok(LayersResult {
        cells,
        table,
        means,
        summary,
    })
}

fn accuracies(cells: &[LayersCell], states: usize, layers: usize) -> Vec<f64> {
    cells
        .iter()
        .filter(|c| c.states == states && c.layers == layers && c.accuracy.is_finite())
        .map(|c| c.accuracy)
        .collect()
}

/// Mean accuracy over successful repeats.
pub fn mean_accuracy(cells: &[LayersCell], states: usize, layers: usize) -> f64 {
    mean(&accuracies(cells, states, layers))
}

pub fn layers_checks(cfg: &LayersConfig, cells: &[LayersCell]) -> Vec<Check> {
    let mut checks = Vec::new();
    let failed = cells.iter().filter(|c| c.status != "ok").count();
    checks.push(Check::new(
        "all cells trained",
        failed == 0,
        format!("{failed} failed cells"),
    ));
    let mut ls = cfg.layers.clone();
    ls.sort_unstable();
    if cfg.states.contains(&3) && ls.contains(&1) && ls.contains(&3) {
        let (a1, a3) = (mean_accuracy(cells, 3, 1), mean_accuracy(cells, 3, 3));
        checks.push(Check::new(
            "|S|=3: acc(L=3) - acc(L=1) >= 0.15",
            a3 - a1 >= 0.15,
            format!("L1={a1:.4} L3={a3:.4}"),
        ));
    }
    for &s in &cfg.states {
        let accs: Vec<f64> = ls.iter().map(|&l| mean_accuracy(cells, s, l)).collect();
        let mono = accs.windows(2).all(|w| w[1] >= w[0]);
        let detail: Vec<String> = accs.iter().map(|a| format!("{a:.4}")).collect();
        checks.push(Check::new(
            format!("|S|={s}: accuracy nondecreasing in L"),
            mono,
            detail.join(" "),
        ));
    }
    checks
}
