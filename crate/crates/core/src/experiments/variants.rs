//! Sparse against dense 1-layer parameterizations on length-2 chains.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fmt, mean, repeat_seed, Check, RunStamp, Summary, Table, TrainSettings};
use crate::error::{invalid, Result};
use crate::lsa::{train, LsaModel, ParamForm, TrainData};
use crate::markov_data::{InitialDistribution, KernelPrior, PromptSampler};
use crate::rng::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantsConfig {
    pub p: f64,
    pub d: usize,
    pub n: usize,
    /// Epochs averaged at the end of the trace when comparing variants.
    pub tail: usize,
    /// Allowed relative difference of the final losses.
    pub tolerance: f64,
    pub repeats: usize,
    pub seed: u64,
    /// One epoch is one iteration over `batch_size` fresh prompts.
    pub train: TrainSettings,
}

impl Default for VariantsConfig {
    fn default() -> Self {
        Self {
            p: 0.3,
            d: 1,
            n: 30,
            tail: 10,
            tolerance: 0.05,
            repeats: 5,
            seed: 0,
            train: TrainSettings {
                batch_size: 100,
                ..TrainSettings::default()
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct VariantsResult {
    /// `(seed, sparse trace, dense trace)`.
    pub traces: Vec<(u64, Vec<f64>, Vec<f64>)>,
    pub table: Table,
    pub summary: Summary,
}

fn run_one(cfg: &VariantsConfig, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let sampler = PromptSampler::new(
        KernelPrior::IndependentUniform,
        Arc::new(InitialDistribution::binary(cfg.p)?),
        cfg.d,
        cfg.n,
        derive_seed(seed, 1),
    )?;
    let data = TrainData::Stream(sampler);
    let mut out = Vec::new();
    for form in [ParamForm::Sparse, ParamForm::Dense] {
        let mut model = LsaModel::random(
            form,
            cfg.d,
            cfg.n,
            1,
            cfg.train.init_scale,
            derive_seed(seed, 2),
        )?;
        out.push(train(&mut model, &data, &cfg.train.config(form, seed))?);
    }
    let dense = out.pop().unwrap();
    Ok((out.pop().unwrap(), dense))
}

pub fn run_variants(cfg: &VariantsConfig) -> Result<VariantsResult> {
    if cfg.repeats == 0 || cfg.tail == 0 || cfg.tail > cfg.train.iterations {
        return Err(invalid(
            "variants: need repeats >= 1 and 1 <= tail <= iterations",
        ));
    }
    cfg.train.validate()?;
    let seeds: Vec<u64> = (0..cfg.repeats).map(|r| repeat_seed(cfg.seed, r)).collect();
    let traces: Vec<(u64, Vec<f64>, Vec<f64>)> = seeds
        .par_iter()
        .map(|&s| run_one(cfg, s).map(|(a, b)| (s, a, b)))
        .collect::<Result<_>>()?;
    let mut table = Table::new(&["variant", "seed", "epoch", "loss"]);
    let mut checks = Vec::new();
    for (s, sparse, dense) in &traces {
        for (name, tr) in [("sparse", sparse), ("dense", dense)] {
            for (e, v) in tr.iter().enumerate() {
                table.push(vec![
                    name.into(),
                    s.to_string(),
                    (e + 1).to_string(),
                    fmt(*v),
                ]);
            }
        }
        let fs = mean(&sparse[sparse.len() - cfg.tail..]);
        let fd = mean(&dense[dense.len() - cfg.tail..]);
        let rel = (fs - fd).abs() / fs.abs().max(fd.abs());
        checks.push(Check::new(
            format!("seed {s}: final losses within {}", cfg.tolerance),
            rel <= cfg.tolerance,
            format!("sparse={fs:.5} dense={fd:.5} rel={rel:.4}"),
        ));
    }
    Ok(VariantsResult {
        traces,
        table,
        summary: Summary {
            stamp: RunStamp::new("variants", cfg, cfg.seed)?,
            checks,
        },
    })
}
