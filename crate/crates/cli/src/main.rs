use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use splitgym::algorithms::{train, AgentBundle, Algo, TrainOptions};
use splitgym::data::{collect_to_dir, coverage, Dataset};
use splitgym::evalharness::{compare, evaluate, render_csv, render_markdown, EvalReport, Policy};
use splitgym::policies::HeuristicKind;
use splitgym::simnet::SimConfig;

#[derive(Parser)]
#[command(name = "splitgym", version, about = "Wi-Fi/LTE traffic splitting: data collection, offline training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out a heuristic and write one file per episode.
    Collect {
        #[arg(long)]
        policy: HeuristicKind,
        #[arg(long, default_value_t = 64)]
        episodes: usize,
        #[arg(long, default_value_t = 10_000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed_start: u64,
        #[arg(long)]
        out: PathBuf,
        /// Simulator config as JSON.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print coverage statistics of a dataset as JSON.
    Coverage {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Train an agent on an offline dataset.
    Train {
        #[arg(long, value_enum)]
        algo: TrainAlgo,
        #[arg(long)]
        dataset: PathBuf,
        /// Fisher decay.
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        /// Pessimism weight.
        #[arg(long, default_value_t = 10.0)]
        beta: f64,
        #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
        normalize: bool,
        #[arg(long, default_value_t = 10_000)]
        steps: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Drop the Q term from the PTD3 actor objective.
        #[arg(long)]
        pure_pessimism: bool,
        #[arg(long, default_value_t = 2.5)]
        bc_alpha: f64,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
        /// Comma-separated hidden widths.
        #[arg(long, value_delimiter = ',', default_value = "64,64")]
        critic_hidden: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "64,64")]
        actor_hidden: Vec<usize>,
    },
    /// Evaluate a heuristic or a checkpoint on seeded episodes.
    Eval {
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        policy: Option<HeuristicKind>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        episodes: usize,
        #[arg(long, default_value_t = 3200)]
        steps: usize,
        #[arg(long, default_value_t = 128)]
        seed_start: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Overrides the policy name in the report.
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Tabulate evaluation reports.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Markdown)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainAlgo {
    Bc,
    Td3,
    Td3bc,
    Ptd3,
}

impl From<TrainAlgo> for Algo {
    fn from(a: TrainAlgo) -> Self {
        match a {
            TrainAlgo::Bc => Algo::Bc,
            TrainAlgo::Td3 => Algo::Td3,
            TrainAlgo::Td3bc => Algo::Td3Bc,
            TrainAlgo::Ptd3 => Algo::Ptd3,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Markdown,
    Csv,
}

fn load_config(path: Option<&Path>) -> Result<SimConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(SimConfig::from_json_str(&text)?)
        }
        None => Ok(SimConfig::default()),
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Collect {
            policy,
            episodes,
            steps,
            seed_start,
            out,
            config,
        } => {
            let cfg = load_config(config.as_deref())?.with_steps(steps);
            let headers = collect_to_dir(&cfg, policy, episodes, seed_start, &out)?;
            let transitions: usize = headers.iter().map(|h| h.transitions).sum();
            eprintln!(
                "wrote {} episodes ({transitions} transitions) to {}",
                headers.len(),
                out.display()
            );
        }
        Command::Coverage { dataset } => {
            let ds = Dataset::load(&dataset)?;
            println!("{}", serde_json::to_string_pretty(&coverage(&ds)?)?);
        }
        Command::Train {
            algo,
            dataset,
            alpha,
            beta,
            normalize,
            steps,
            seed,
            out,
            pure_pessimism,
            bc_alpha,
            batch_size,
            critic_hidden,
            actor_hidden,
        } => {
            let ds = Dataset::load(&dataset)?;
            let mut options = TrainOptions::new(algo.into());
            options.normalize = normalize;
            options.bc_alpha = bc_alpha;
            options.hyper.alpha = alpha;
            options.hyper.beta = beta;
            options.hyper.pure_pessimism = pure_pessimism;
            options.hyper.td3.steps = steps;
            options.hyper.td3.batch_size = batch_size;
            options.hyper.td3.critic_hidden = critic_hidden;
            options.hyper.td3.actor_hidden = actor_hidden;
            let bundle = train(options, &ds, seed)?;
            bundle.save(&out)?;
            eprintln!("saved {} ({})", out.display(), bundle.fingerprint());
        }
        Command::Eval {
            policy,
            checkpoint,
            episodes,
            steps,
            seed_start,
            out,
            workers,
            label,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let bundle = checkpoint.as_deref().map(AgentBundle::load).transpose()?;
            let policy = match (&bundle, policy) {
                (Some(b), _) => Policy::Agent(b),
                (None, Some(kind)) => Policy::Heuristic(kind),
                (None, None) => bail!("either --policy or --checkpoint is required"),
            };
            let mut report = evaluate(policy, &cfg, episodes, steps, seed_start, workers)?;
            if let Some(label) = label {
                report.policy = label;
            }
            report.save(&out)?;
            eprintln!("{}: {:.4} ± {:.4}", report.policy, report.mean, report.ci95);
        }
        Command::Compare { reports, format } => {
            let loaded = reports
                .iter()
                .map(|p| EvalReport::load(p).with_context(|| format!("reading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            let rows = compare(&loaded);
            match format {
                Format::Markdown => print!("{}", render_markdown(&rows)),
                Format::Csv => print!("{}", render_csv(&rows)),
            }
        }
    }
    Ok(())
}
