use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use oril_core::crragent::{evaluate, TrainMethod};
use oril_core::diffcore::read_checkpoint;
use oril_core::lab::{self, AblationSpec, RunConfig};
use oril_core::trajdata::write_dataset;

#[derive(Parser)]
#[command(name = "oril", version, about = "Offline reinforced imitation learning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (`key = value` lines); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed (the data seed for `gen`, the run seed otherwise).
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured method.
    #[arg(long)]
    method: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the configured behavior mix into `OUT/dataset.bin`.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one (method, seed) run.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean return of a checkpointed policy.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
    },
    /// Run an ablation grid: UNLABELED_FRACTION, LOW_QUALITY_INJECTION or DEMO_FRACTION.
    Ablate {
        kind: String,
        /// Cell values, e.g. `0.25 0.5 1.0` or `[0.25, 0.5, 1.0]`.
        #[arg(required = true, num_args = 1..)]
        values: Vec<String>,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate summary files into `OUT/report.csv` (mean and std per cell).
    Report {
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(m) = &common.method {
        cfg.method = m.parse::<TrainMethod>()?;
    }
    Ok(cfg)
}

fn parse_values(raw: &[String]) -> Result<Vec<f64>> {
    raw.iter()
        .flat_map(|s| s.split(|c: char| c == ',' || c == '[' || c == ']' || c.is_whitespace()))
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().with_context(|| format!("bad ablation value {s:?}")))
        .collect()
}

fn run_seed(cfg: &RunConfig, common: &Common) -> u64 {
    common.seed.unwrap_or(cfg.seeds[0])
}

fn report(rows: &[lab::SummaryRow], out: &Path) -> Result<()> {
    let table = lab::aggregate(rows);
    lab::write_csv(out.join("report.csv"), &table)?;
    for r in &table {
        println!(
            "{} {} unlabeled={} injection={} demos={}: {:.3} ± {:.3} ({} seeds)",
            r.method, r.env, r.unlabeled_fraction, r.low_quality_multiplier, r.demo_fraction, r.mean, r.std, r.seeds
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gen { common, out } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.data_seed = s;
            }
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let raw = lab::generate_raw(&cfg)?;
            let path = out.join("dataset.bin");
            write_dataset(&raw, &path)?;
            println!("wrote {} episodes to {}", raw.len(), path.display());
        }
        Command::Train { common, dataset, out } => {
            let cfg = load_config(&common)?;
            let raw = lab::load_dataset(&dataset)?;
            let seed = run_seed(&cfg, &common);
            let outcome = lab::train_to_dir(&cfg, &raw, seed, &out)?;
            println!("{} seed {seed}: score {}", cfg.method, outcome.score);
        }
        Command::Eval { common, checkpoint, episodes } => {
            let cfg = load_config(&common)?;
            let ck = read_checkpoint(&checkpoint)?;
            let Some(policy) = ck.get("policy") else { bail!("{} holds no policy", checkpoint.display()) };
            let seed = common.seed.unwrap_or(cfg.eval_seed);
            println!("{}", evaluate(policy, &cfg.env, episodes, seed, cfg.eval_sample)?);
        }
        Command::Ablate { kind, values, common, dataset, out } => {
            let cfg = load_config(&common)?;
            let spec = AblationSpec::parse(&kind, &parse_values(&values)?)?;
            let raw = lab::load_dataset(&dataset)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let rows = lab::ablate(&cfg, &spec, &raw, Some(&out))?;
            lab::write_csv(out.join("summary.csv"), &rows)?;
            report(&rows, &out)?;
        }
        Command::Report { summaries, out } => {
            let mut rows = Vec::new();
            for s in &summaries {
                rows.extend(lab::read_summary(s)?);
            }
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            report(&rows, &out)?;
        }
    }
    Ok(())
}
