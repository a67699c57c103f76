//! Desk-scale experiments. Every run is deterministic per (config, seed) and
//! writes CSV tables stamped with the config hash, version and seed.

use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::lsa::{Optimizer, ParamForm, TrainConfig};
use crate::rng::derive_seed;

pub mod gap;
pub mod landscape;
pub mod layers;
pub mod moo;
pub mod reduce;
pub mod variants;
pub mod verify;

/// Crate version plus `git describe` output when built from a checkout.
pub const VERSION: &str = env!("MARKOV_ICL_VERSION");

/// Training hyperparameters shared by the experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Prompts per iteration when training on a stream.
    pub batch_size: usize,
    /// Half-width of the uniform initialization.
    pub init_scale: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::adam(),
            learning_rate: 0.01,
            iterations: 1000,
            batch_size: 256,
            init_scale: 0.1,
        }
    }
}

impl TrainSettings {
    pub fn config(&self, form: ParamForm, seed: u64) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer,
            learning_rate: self.learning_rate,
            iterations: self.iterations,
            batch_size: self.batch_size,
            seed,
            parameter_form: form,
            divergence_threshold: 1e6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config(ParamForm::Sparse, 0).validate()?;
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(invalid("init_scale must be non-negative"));
        }
        Ok(())
    }
}

/// Seed of repeat `r` under a master seed.
pub fn repeat_seed(master: u64, r: usize) -> u64 {
    derive_seed(master, r as u64)
}

/// First 16 hex digits of the SHA-256 of the config's JSON form.
pub fn config_hash<C: Serialize>(cfg: &C) -> Result<String> {
    let json = serde_json::to_vec(cfg)?;
    let digest = Sha256::digest(&json);
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

/// Provenance of one run, written as the first line of every table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStamp {
    pub experiment: String,
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
}

impl RunStamp {
    pub fn new<C: Serialize>(experiment: &str, cfg: &C, seed: u64) -> Result<Self> {
        Ok(Self {
            experiment: experiment.into(),
            config_hash: config_hash(cfg)?,
            version: VERSION.into(),
            seed,
        })
    }

    pub fn header(&self) -> String {
        format!(
            "# experiment={} config_hash={} version={} seed={}",
            self.experiment, self.config_hash, self.version, self.seed
        )
    }
}

/// A CSV table with a header row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: vec![],
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn write_csv<W: Write>(&self, mut w: W, stamp: &RunStamp) -> Result<()> {
        writeln!(w, "{}", stamp.header())?;
        writeln!(w, "{}", self.columns.join(","))?;
        for r in &self.rows {
            writeln!(w, "{}", r.join(","))?;
        }
        Ok(())
    }

    /// Column index by name.
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

/// One pass/fail acceptance check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// JSON summary written next to the tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub stamp: RunStamp,
    pub checks: Vec<Check>,
}

impl Summary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Finite value or `NaN`, formatted for CSV.
pub(crate) fn fmt(x: f64) -> String {
    format!("{x}")
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub(crate) fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = TrainSettings::default();
        let mut b = a.clone();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&a.clone()).unwrap());
        b.learning_rate = 0.02;
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_eq!(config_hash(&a).unwrap().len(), 16);
    }

    #[test]
    fn table_writes_stamp_first() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec!["1".into(), "2".into()]);
        let stamp = RunStamp::new("x", &TrainSettings::default(), 7).unwrap();
        let mut out = Vec::new();
        t.write_csv(&mut out, &stamp).unwrap();
        let s = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert!(lines[0].starts_with("# experiment=x config_hash="));
        assert!(lines[0].ends_with("seed=7"));
        assert_eq!(lines[1..], ["a,b", "1,2"]);
    }
}
