//! Axis-aligned slices of the Monte Carlo reparameterized loss through `X*`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{fmt, Check, RunStamp, Summary, Table};
use crate::closed_form::{xstar_general_binary, xstar_len2_iid, GeneralMinimizerSpec};
use crate::error::{invalid, Result};
use crate::markov_data::PromptSampler;
use crate::reparam::normal_equations;
use crate::rng::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeCase {
    pub d: usize,
    pub p: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeConfig {
    pub cases: Vec<LandscapeCase>,
    /// Prompts in the Monte Carlo loss.
    pub mc_prompts: usize,
    /// Kernel draws for `X*` when no closed form applies.
    pub mc_kernels: u64,
    /// Leading coordinates to slice.
    pub coordinates: usize,
    pub max_offset: f64,
    pub steps: usize,
    /// Allowed distance of the slice minimum from offset 0 at `d = 1`.
    pub argmin_tolerance: f64,
    pub seed: u64,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        Self {
            cases: vec![
                LandscapeCase {
                    d: 1,
                    p: 0.3,
                    n: 10,
                },
                LandscapeCase {
                    d: 2,
                    p: 0.3,
                    n: 10,
                },
            ],
            mc_prompts: 100_000,
            mc_kernels: 200_000,
            coordinates: 6,
            max_offset: 0.2,
            steps: 41,
            argmin_tolerance: 0.02,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LandscapeResult {
    pub table: Table,
    pub summary: Summary,
}

pub fn run_landscape(cfg: &LandscapeConfig) -> Result<LandscapeResult> {
    if cfg.steps < 3 || !(cfg.max_offset > 0.0) || cfg.mc_prompts == 0 {
        return Err(invalid(
            "landscape: need steps >= 3, positive max_offset and mc_prompts",
        ));
    }
    let offsets: Vec<f64> = (0..cfg.steps)
        .map(|i| -cfg.max_offset + 2.0 * cfg.max_offset * i as f64 / (cfg.steps - 1) as f64)
        .collect();
    let mut table = Table::new(&["d", "coordinate", "offset", "mc_loss"]);
    let mut checks = Vec::new();
    for (ci, case) in cfg.cases.iter().enumerate() {
        let seed = derive_seed(cfg.seed, ci as u64);
        let xstar = if case.d == 1 {
            xstar_len2_iid(case.p, case.n)?.into_vector()
        } else {
            let spec = GeneralMinimizerSpec::binary(
                case.d,
                case.n,
                case.p,
                cfg.mc_kernels,
                derive_seed(seed, 1),
            )?;
            xstar_general_binary(&spec)?.x.into_vector()
        };
        let prompts = PromptSampler::binary(case.p, case.d, case.n, derive_seed(seed, 2))?
            .batch(0, cfg.mc_prompts);
        let (h, rhs) = normal_equations(&prompts)?;
        let yy = prompts.iter().map(|p| p.label() * p.label()).sum::<f64>() / prompts.len() as f64;
        let loss = |x: &DVector<f64>| (x.transpose() * &h * x)[0] - 2.0 * rhs.dot(x) + yy;
        let at_star = loss(&xstar);
        let mut convex = true;
        let mut argmin_ok = true;
        let mut local_min = true;
        let mut worst_argmin: f64 = 0.0;
        for c in 0..cfg.coordinates.min(xstar.len()) {
            let slice: Vec<f64> = offsets
                .iter()
                .map(|&t| {
                    let mut x = xstar.clone();
                    x[c] += t;
                    loss(&x)
                })
                .collect();
            for (t, v) in offsets.iter().zip(&slice) {
                table.push(vec![
                    case.d.to_string(),
                    (c + 1).to_string(),
                    fmt(*t),
                    fmt(*v),
                ]);
            }
            convex &= slice.windows(3).all(|w| w[0] - 2.0 * w[1] + w[2] > 0.0);
            let best = offsets[slice
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0];
            worst_argmin = worst_argmin.max(best.abs());
            argmin_ok &= best.abs() <= cfg.argmin_tolerance;
            for s in [-0.1, 0.1] {
                let mut x = xstar.clone();
                x[c] += s;
                local_min &= at_star <= loss(&x);
            }
        }
        let tag = format!("d={} p={} n={}", case.d, case.p, case.n);
        checks.push(Check::new(
            format!("{tag}: slices are U-shaped"),
            convex,
            "",
        ));
        checks.push(Check::new(
            format!("{tag}: loss at X* below X* +- 0.1 e_i"),
            local_min,
            fmt(at_star),
        ));
        if case.d == 1 {
            checks.push(Check::new(
                format!("{tag}: slice minima near offset 0"),
                argmin_ok,
                format!("largest |argmin| {worst_argmin}"),
            ));
        }
    }
    Ok(LandscapeResult {
        table,
        summary: Summary {
            stamp: RunStamp::new("landscape", cfg, cfg.seed)?,
            checks,
        },
    })
}
