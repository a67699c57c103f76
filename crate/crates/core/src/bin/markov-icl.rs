use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use markov_icl::closed_form::{
    write_minimizer_csv, xstar_general_binary, GeneralMinimizerSpec, MomentMethod,
};
use markov_icl::experiments::gap::{run_gap, GapConfig};
use markov_icl::experiments::landscape::{run_landscape, LandscapeConfig};
use markov_icl::experiments::layers::{run_layers, LayersConfig};
use markov_icl::experiments::moo::{run_moo, MooConfig};
use markov_icl::experiments::reduce::{run_reduction_demo, ReduceConfig};
use markov_icl::experiments::variants::{run_variants, VariantsConfig};
use markov_icl::experiments::verify::{run_criterion, VerifyOptions, CRITERIA};
use markov_icl::experiments::{RunStamp, Summary, Table, VERSION};
use markov_icl::lsa::write_checkpoint;

#[derive(Parser)]
#[command(name = "markov-icl", version = VERSION, about = "In-context learning of Markov chains with linear self-attention")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Monte Carlo sample count for experiments that draw one.
    #[arg(long, global = true)]
    mc_samples: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Reparameterized optimum against trained 1-layer LSA as d grows.
    Gap,
    /// Accuracy against depth for 2, 3 and 4 states.
    Layers,
    /// Objectives and Generational Distance along a trained restricted model.
    Moo,
    /// Loss slices through the closed-form minimizer.
    Landscape,
    /// Sparse against dense 1-layer training curves.
    Variants,
    /// Build and verify the reduction from bilinear separability.
    Reduce,
    /// Closed-form minimizer, its moment matrix and right-hand side.
    Xstar,
    /// Run the acceptance criteria.
    Verify {
        /// Smaller sample counts, same tolerances.
        #[arg(long)]
        quick: bool,
        /// Only these criteria (repeatable).
        #[arg(long = "criterion")]
        criteria: Vec<u8>,
    },
}

/// Config of the `xstar` subcommand.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct XstarConfig {
    d: usize,
    n: usize,
    p: f64,
    mc_kernels: u64,
    exact: bool,
    seed: u64,
}

impl Default for XstarConfig {
    fn default() -> Self {
        Self {
            d: 1,
            n: 10,
            p: 0.3,
            mc_kernels: 200_000,
            exact: false,
            seed: 0,
        }
    }
}

fn load<C: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<C> {
    match path {
        None => Ok(C::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn write_table(dir: &Path, name: &str, table: &Table, stamp: &RunStamp) -> Result<()> {
    let path = dir.join(name);
    let mut w = BufWriter::new(
        File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    );
    table.write_csv(&mut w, stamp)?;
    w.flush()?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn write_summary(dir: &Path, name: &str, summary: &Summary) -> Result<bool> {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(summary)?)?;
    for c in &summary.checks {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    eprintln!("wrote {}", path.display());
    Ok(summary.passed())
}

fn run(cli: Cli) -> Result<bool> {
    let c = &cli.common;
    if let Some(t) = c.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()?;
    }
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    let out = c.out.as_path();
    match cli.command {
        Command::Gap => {
            let mut cfg: GapConfig = load(&c.config)?;
            cfg.seed = c.seed.unwrap_or(cfg.seed);
            let res = run_gap(&cfg)?;
            write_table(out, "gap.csv", &res.table, &res.summary.stamp)?;
            write_summary(out, "gap_summary.json", &res.summary)
        }
        Command::Layers => {
            let mut cfg: LayersConfig = load(&c.config)?;
            cfg.seed = c.seed.unwrap_or(cfg.seed);
            let res = run_layers(&cfg)?;
            write_table(out, "layers.csv", &res.table, &res.summary.stamp)?;
            write_table(out, "layers_means.csv", &res.means, &res.summary.stamp)?;
            write_summary(out, "layers_summary.json", &res.summary)
        }
        Command::Moo => {
            let mut cfg: MooConfig = load(&c.config)?;
            cfg.seed = c.seed.unwrap_or(cfg.seed);
            if let Some(s) = c.mc_samples {
                cfg.pareto_samples = s as usize;
            }
            let res = run_moo(&cfg)?;
            write_table(out, "moo.csv", &res.table, &res.summary.stamp)?;
            let mut w = BufWriter::new(File::create(out.join("moo_model.txt"))?);
            write_checkpoint(&mut w, &res.model)?;
            write_summary(out, "moo_summary.json", &res.summary)
        }
        Command::Landscape => {
            let mut cfg: LandscapeConfig = load(&c.config)?;
            cfg.seed = c.seed.unwrap_or(cfg.seed);
            if let Some(s) = c.mc_samples {
                cfg.mc_prompts = s as usize;
            }
            let res = run_landscape(&cfg)?;
            write_table(out, "landscape.csv", &res.table, &res.summary.stamp)?;
            write_summary(out, "landscape_summary.json", &res.summary)
        }
        Command::Variants => {
            let mut cfg: VariantsConfig = load(&c.config)?;
            cfg.seed = c.seed.unwrap_or(cfg.seed);
            let res = run_variants(&cfg)?;
            write_table(out, "variants.csv", &res.table, &res.summary.stamp)?;
            write_summary(out, "variants_summary.json", &res.summary)
        }
        Command::Reduce => {
            let mut cfg: ReduceConfig = load(&c.config)?;
            cfg.seed = c.seed.unwrap_or(cfg.seed);
            let res = run_reduction_demo(&cfg)?;
            let path = out.join("reduction.txt");
            fs::write(
                &path,
                format!("{}\n{}", res.summary.stamp.header(), res.report),
            )?;
            print!("{}", res.report);
            eprintln!("wrote {}", path.display());
            write_summary(out, "reduce_summary.json", &res.summary)
        }
        Command::Xstar => {
            let mut cfg: XstarConfig = load(&c.config)?;
            cfg.seed = c.seed.unwrap_or(cfg.seed);
            if let Some(s) = c.mc_samples {
                cfg.mc_kernels = s;
            }
            let mut spec =
                GeneralMinimizerSpec::binary(cfg.d, cfg.n, cfg.p, cfg.mc_kernels, cfg.seed)?;
            spec.method = if cfg.exact {
                MomentMethod::ExactUniform
            } else {
                MomentMethod::Auto
            };
            let est = xstar_general_binary(&spec)?;
            let stamp = RunStamp::new("xstar", &cfg, cfg.seed)?;
            let path = out.join("xstar.csv");
            let mut w = BufWriter::new(File::create(&path)?);
            writeln!(w, "{}", stamp.header())?;
            write_minimizer_csv(&mut w, &est)?;
            w.flush()?;
            println!("X* = {:?}", est.x.as_vector().as_slice());
            println!("min eigenvalue of H = {:e}", est.min_eigenvalue);
            eprintln!("wrote {}", path.display());
            Ok(true)
        }
        Command::Verify { quick, criteria } => {
            let opts = VerifyOptions {
                quick,
                seed: c.seed.unwrap_or(0),
            };
            let ids: Vec<u8> = if criteria.is_empty() {
                CRITERIA.iter().map(|c| c.0).collect()
            } else {
                criteria
            };
            let mut outcomes = Vec::new();
            for id in ids {
                let o = run_criterion(id, &opts);
                println!("{}", o.line());
                outcomes.push(o);
            }
            let path = out.join("verify_summary.json");
            let body =
                serde_json::json!({ "version": VERSION, "options": opts, "outcomes": outcomes });
            fs::write(&path, serde_json::to_string_pretty(&body)?)?;
            eprintln!("wrote {}", path.display());
            Ok(outcomes.iter().all(|o| o.passed))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
