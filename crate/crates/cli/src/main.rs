use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use devi_cli::config::{Preset, RunConfig};
use devi_cli::{cmd_build_dataset, cmd_caption, cmd_eval, cmd_memory, cmd_run, cmd_stats, Backends};

#[derive(Parser)]
#[command(name = "devi", version, about = "Grounded question answering over dense video events")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// TOML run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    delta: Option<u32>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Scripted responses for every backend configured as `mock`
    #[arg(long)]
    mock_script: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(p) = self.preset {
            cfg.preset = p;
            cfg.hierarchy = None;
        }
        if let Some(s) = self.sigma {
            cfg.grounder.sigma = s;
        }
        if let Some(d) = self.delta {
            cfg.grounder.delta = d;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = &self.mock_script {
            cfg.mock_script = Some(p.clone());
        }
        if let Some(p) = &self.cache_dir {
            cfg.cache_dir = Some(p.clone());
        }
        cfg.resolve()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Answer every question of a dataset file
    Run {
        #[arg(long)]
        dataset: PathBuf,
        /// Run directory (defaults to the config's run_dir)
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Score a predictions file against a dataset file
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        gqa_threshold: f64,
    },
    /// Build a multiple-choice dataset from dense captions
    BuildDataset {
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        o: Overrides,
    },
    /// Print statistics of a dataset file
    Stats {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Caption the dataset's videos only
    Caption {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        o: Overrides,
    },
    /// Build per-question memories only
    Memory {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        o: Overrides,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run { dataset, out, o } => {
            let cfg = o.resolve()?;
            let out = out.unwrap_or_else(|| cfg.run_dir.clone());
            let backends = Backends::from_config(&cfg, None)?;
            let s = cmd_run(&cfg, &backends, &dataset, &out)?;
            println!(
                "{} questions: {} answered, {} failed, {} already done -> {}",
                s.total,
                s.answered,
                s.failed,
                s.skipped,
                s.predictions_path.display()
            );
        }
        Command::Eval {
            predictions,
            dataset,
            out,
            gqa_threshold,
        } => {
            let report = cmd_eval(&predictions, &dataset, gqa_threshold, out.as_deref())?;
            print!("{}", report.table());
        }
        Command::BuildDataset { captions, out, o } => {
            let cfg = o.resolve()?;
            let backends = Backends::from_config(&cfg, None)?;
            let build = cmd_build_dataset(&cfg, &backends, &captions, &out)?;
            let flagged = build.review.len() - build.drafts.len();
            println!(
                "{} captions kept, {} questions written, {} flagged for review -> {}",
                build.kept_captions,
                build.records.len(),
                flagged,
                out.display()
            );
        }
        Command::Stats { dataset, out } => {
            let stats = cmd_stats(&dataset, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::Caption { dataset, out, o } => {
            let cfg = o.resolve()?;
            let backends = Backends::from_config(&cfg, None)?;
            for p in cmd_caption(&cfg, &backends, &dataset, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Memory { dataset, out, o } => {
            let cfg = o.resolve()?;
            let backends = Backends::from_config(&cfg, None)?;
            for p in cmd_memory(&cfg, &backends, &dataset, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
