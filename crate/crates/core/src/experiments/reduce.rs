//! The worked reduction from bilinear separability.

use serde::{Deserialize, Serialize};

use super::{Check, RunStamp, Summary};
use crate::bilinear::{
    reduce_separability, reduction_report, verify_reduction, ReductionLayout, SeparabilityInstance,
};
use crate::error::{invalid, Result};
use crate::rng::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutChoice {
    Standard,
    ColumnOneRepair,
}

impl From<LayoutChoice> for ReductionLayout {
    fn from(c: LayoutChoice) -> Self {
        match c {
            LayoutChoice::Standard => ReductionLayout::Standard,
            LayoutChoice::ColumnOneRepair => ReductionLayout::ColumnOneRepair,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReduceConfig {
    /// Points in the first set.
    pub m: usize,
    /// Points in the second set.
    pub k: usize,
    /// Ambient dimension of the points.
    pub n: usize,
    pub samples: usize,
    pub layout: LayoutChoice,
    pub seed: u64,
}

impl Default for ReduceConfig {
    fn default() -> Self {
        Self {
            m: 2,
            k: 2,
            n: 2,
            samples: 100,
            layout: LayoutChoice::Standard,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReduceResult {
    pub report: String,
    pub max_deviation: f64,
    pub summary: Summary,
}

pub fn run_reduction_demo(cfg: &ReduceConfig) -> Result<ReduceResult> {
    if cfg.samples == 0 || cfg.m == 0 || cfg.k == 0 || cfg.n == 0 {
        return Err(invalid("reduce: m, k, n and samples must be positive"));
    }
    let inst = SeparabilityInstance::random(cfg.m, cfg.k, cfg.n, derive_seed(cfg.seed, 1))?;
    let red = reduce_separability(&inst, cfg.layout.into())?;
    let check = verify_reduction(&inst, &red, cfg.samples, derive_seed(cfg.seed, 2));
    let report = reduction_report(&inst, &red, Some(&check));
    let checks = vec![Check::new(
        "reduction reproduces every constraint",
        check.passed,
        format!("max deviation {:e}", check.max_deviation),
    )];
    Ok(ReduceResult {
        report,
        max_deviation: check.max_deviation,
        summary: Summary {
            stamp: RunStamp::new("reduce", cfg, cfg.seed)?,
            checks,
        },
    })
}
