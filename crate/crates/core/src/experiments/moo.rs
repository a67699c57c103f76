//! Objective values and Generational Distance along the weight trajectory of
//! a trained restricted model.

use serde::{Deserialize, Serialize};

use super::{fmt, Check, RunStamp, Summary, Table, TrainSettings};
use crate::error::{invalid, Result};
use crate::lsa::{train, LsaModel, ParamForm, TrainData};
use crate::markov_data::PromptSampler;
use crate::multiobjective::{
    forward_equiv_check, generational_distance, objectives, pareto_front_approx, weight_trajectory,
};
use crate::rng::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MooConfig {
    pub p: f64,
    pub d: usize,
    pub n: usize,
    pub layers: usize,
    /// Prompts whose trajectories are averaged.
    pub eval_prompts: usize,
    /// Uniform weight samples used to approximate each front.
    pub pareto_samples: usize,
    /// Front box half-width as a multiple of the largest trajectory norm.
    pub box_factor: f64,
    pub seed: u64,
    pub train: TrainSettings,
}

impl Default for MooConfig {
    fn default() -> Self {
        Self {
            p: 0.5,
            d: 4,
            n: 100,
            layers: 10,
            eval_prompts: 4,
            pareto_samples: 100_000,
            box_factor: 3.0,
            seed: 0,
            train: TrainSettings::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MooResult {
    pub model: LsaModel,
    /// Mean objective vector `(R1; R2)` per layer.
    pub objectives: Vec<Vec<f64>>,
    /// Mean Generational Distance per layer.
    pub gd: Vec<f64>,
    pub max_equiv_deviation: f64,
    pub table: Table,
    pub summary: Summary,
}

/// Train the restricted model used by [`run_moo`].
pub fn train_moo_model(cfg: &MooConfig) -> Result<LsaModel> {
    let sampler = PromptSampler::binary(cfg.p, cfg.d, cfg.n, derive_seed(cfg.seed, 1))?;
    let mut model = LsaModel::random(
        ParamForm::Restricted,
        cfg.d,
        cfg.n,
        cfg.layers,
        cfg.train.init_scale,
        derive_seed(cfg.seed, 2),
    )?;
    train(
        &mut model,
        &TrainData::Stream(sampler),
        &cfg.train.config(ParamForm::Restricted, cfg.seed),
    )?;
    Ok(model)
}

pub fn run_moo(cfg: &MooConfig) -> Result<MooResult> {
    if cfg.d == 0
        || cfg.n == 0
        || cfg.layers == 0
        || cfg.eval_prompts == 0
        || cfg.pareto_samples == 0
    {
        return Err(invalid(
            "moo: d, n, layers, eval_prompts and pareto_samples must be positive",
        ));
    }
    cfg.train.validate()?;
    let model = train_moo_model(cfg)?;
    analyze_moo(cfg, model)
}

/// Roll out the weight trajectory of `model` on evaluation prompts.
pub fn analyze_moo(cfg: &MooConfig, model: LsaModel) -> Result<MooResult> {
    let eval = PromptSampler::binary(cfg.p, cfg.d, cfg.n, derive_seed(cfg.seed, 3))?
        .batch(0, cfg.eval_prompts);
    let k = 2 * (cfg.d + 1);
    let layers = model.num_layers();
    let mut obj = vec![vec![0.0; k]; layers + 1];
    let mut gd = vec![0.0; layers + 1];
    let mut max_dev: f64 = 0.0;
    for (i, prompt) in eval.iter().enumerate() {
        max_dev = max_dev.max(forward_equiv_check(&model, prompt)?.max_deviation());
        let ws = weight_trajectory(&model, prompt)?;
        let radius = ws.iter().map(|w| w.amax()).fold(0.0, f64::max);
        let bound = if radius > 0.0 {
            cfg.box_factor * radius
        } else {
            1.0
        };
        let front = pareto_front_approx(
            prompt,
            cfg.pareto_samples,
            bound,
            derive_seed(cfg.seed, 100 + i as u64),
        )?;
        for (l, w) in ws.iter().enumerate() {
            let v = objectives(w, prompt)?.stacked();
            for (o, x) in obj[l].iter_mut().zip(v.iter()) {
                *o += x / eval.len() as f64;
            }
            gd[l] += generational_distance(std::slice::from_ref(&v), &front)? / eval.len() as f64;
        }
    }
    let mut table = Table::new(&["layer", "group", "objective_index", "value", "gd"]);
    for l in 0..=layers {
        for (idx, v) in obj[l].iter().enumerate() {
            let (group, j) = if idx <= cfg.d {
                ("R1", idx + 1)
            } else {
                ("R2", idx - cfg.d)
            };
            table.push(vec![
                l.to_string(),
                group.into(),
                j.to_string(),
                fmt(*v),
                fmt(gd[l]),
            ]);
        }
    }
    let summary = Summary {
        stamp: RunStamp::new("moo", cfg, cfg.seed)?,
        checks: moo_checks(cfg.d, &obj, &gd, max_dev),
    };
    Ok(MooResult {
        model,
        objectives: obj,
        gd,
        max_equiv_deviation: max_dev,
        table,
        summary,
    })
}

pub fn moo_checks(d: usize, obj: &[Vec<f64>], gd: &[f64], max_dev: f64) -> Vec<Check> {
    let gd_min = gd.iter().copied().fold(f64::INFINITY, f64::min);
    let sq: Vec<f64> = obj.iter().map(|o| o[d]).collect();
    let sq_min = sq.iter().copied().fold(f64::INFINITY, f64::min);
    vec![
        Check::new(
            "GD minimum below layer 0",
            gd_min < gd[0],
            format!("GD0={:.6} min={gd_min:.6}", gd[0]),
        ),
        Check::new(
            "forward pass equals weight recursion",
            max_dev <= 1e-9,
            format!("max deviation {max_dev:e}"),
        ),
        Check::new(
            "squared-loss objective minimum below layer 0",
            sq_min < sq[0],
            format!("layer0={:.6} min={sq_min:.6}", sq[0]),
        ),
    ]
}
