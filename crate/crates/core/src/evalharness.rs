//! Seeded evaluation of heuristics and trained agents.
//!
//! Each episode is reset with its own seed and run to truncation. An
//! episode's score is its mean step reward; a report aggregates those scores
//! with a normal-approximation 95% interval.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::algorithms::{AgentBundle, AlgoError};
use crate::env::{EnvError, Environment, SplitEnv};
use crate::policies::HeuristicKind;
use crate::simnet::{SimConfig, MEASUREMENT_FEATURES};

pub const Z_95: f64 = 1.96;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("checkpoint expects state dim {state_dim} and action dim {action_dim}, environment has {num_users} users")]
    DimensionMismatch {
        state_dim: usize,
        action_dim: usize,
        num_users: usize,
    },
    #[error("at least one episode is required")]
    NoEpisodes,
    #[error("episode with seed {0} ended before any step")]
    EmptyEpisode(u64),
    #[error("evaluation worker panicked")]
    Worker,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Algo(#[from] AlgoError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    Heuristic(HeuristicKind),
    Agent(&'a AgentBundle),
}

impl Policy<'_> {
    pub fn label(&self) -> String {
        match self {
            Policy::Heuristic(k) => k.name().to_string(),
            Policy::Agent(b) => {
                let mut label = b.options.algo.name().to_string();
                if b.norm.is_some() {
                    label.push_str(" (norm)");
                }
                label
            }
        }
    }

    fn check_dims(&self, num_users: usize) -> Result<()> {
        if let Policy::Agent(b) = self {
            if b.state_dim() != num_users * MEASUREMENT_FEATURES || b.action_dim() != num_users {
                return Err(EvalError::DimensionMismatch {
                    state_dim: b.state_dim(),
                    action_dim: b.action_dim(),
                    num_users,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub seeds: Vec<u64>,
    /// Mean step reward of each episode, in seed order.
    pub episode_means: Vec<f64>,
    pub mean: f64,
    pub ci95: f64,
    /// False when the interval is undefined (a single episode); `ci95` is 0.
    pub ci_defined: bool,
}

impl EvalReport {
    /// Aggregates `(seed, episode mean)` pairs in any order.
    pub fn from_episodes(policy: String, steps_per_episode: usize, mut per_episode: Vec<(u64, f64)>) -> Result<Self> {
        if per_episode.is_empty() {
            return Err(EvalError::NoEpisodes);
        }
        per_episode.sort_by_key(|&(seed, _)| seed);
        let (seeds, episode_means): (Vec<u64>, Vec<f64>) = per_episode.into_iter().unzip();
        let n = episode_means.len();
        let mean = episode_means.iter().sum::<f64>() / n as f64;
        let (ci95, ci_defined) = if n > 1 {
            let var = episode_means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (Z_95 * var.sqrt() / (n as f64).sqrt(), true)
        } else {
            (0.0, false)
        };
        Ok(Self {
            policy,
            episodes: n,
            steps_per_episode,
            seeds,
            episode_means,
            mean,
            ci95,
            ci_defined,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Runs one episode and returns its mean step reward.
pub fn run_episode<E: Environment>(env: &mut E, policy: Policy<'_>, seed: u64) -> Result<f64> {
    policy.check_dims(env.num_users())?;
    let mut obs = env.reset(seed)?;
    let mut total = 0.0;
    let mut steps = 0usize;
    loop {
        let action = match policy {
            Policy::Heuristic(kind) => kind.act(env.measurements()),
            Policy::Agent(bundle) => bundle.act(&obs.flatten())?,
        };
        let res = env.step(&action)?;
        total += res.reward;
        steps += 1;
        obs = res.observation;
        if res.truncated {
            break;
        }
    }
    if steps == 0 {
        return Err(EvalError::EmptyEpisode(seed));
    }
    Ok(total / steps as f64)
}

/// Evaluates on environments built by `make_env`, which must already be
/// configured for the episode length. Seeds run `seed_start..seed_start +
/// episodes` across up to `workers` threads.
pub fn evaluate_with<E, F>(
    policy: Policy<'_>,
    make_env: F,
    episodes: usize,
    seed_start: u64,
    workers: usize,
) -> Result<Vec<(u64, f64)>>
where
    E: Environment,
    F: Fn() -> std::result::Result<E, EnvError> + Sync,
{
    if episodes == 0 {
        return Err(EvalError::NoEpisodes);
    }
    let seeds: Vec<u64> = (0..episodes as u64).map(|i| seed_start + i).collect();
    let workers = workers.clamp(1, episodes);
    let run_share = |share: &[u64]| -> Result<Vec<(u64, f64)>> {
        let mut env = make_env()?;
        share
            .iter()
            .map(|&seed| Ok((seed, run_episode(&mut env, policy, seed)?)))
            .collect()
    };
    if workers == 1 {
        return run_share(&seeds);
    }
    let shares: Vec<Vec<u64>> = (0..workers)
        .map(|w| seeds.iter().copied().skip(w).step_by(workers).collect())
        .collect();
    let results: Vec<Result<Vec<(u64, f64)>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = shares
            .iter()
            .map(|share| scope.spawn(|| run_share(share)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or(Err(EvalError::Worker)))
            .collect()
    });
    let mut all = Vec::with_capacity(episodes);
    for r in results {
        all.extend(r?);
    }
    Ok(all)
}

/// Evaluates on the split environment with `steps` steps per episode.
pub fn evaluate(
    policy: Policy<'_>,
    config: &SimConfig,
    episodes: usize,
    steps: usize,
    seed_start: u64,
    workers: usize,
) -> Result<EvalReport> {
    let config = config.with_steps(steps);
    let per_episode = evaluate_with(policy, || SplitEnv::new(config.clone()), episodes, seed_start, workers)?;
    EvalReport::from_episodes(policy.label(), steps, per_episode)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub policy: String,
    pub mean: f64,
    pub ci95: f64,
    pub episodes: usize,
    /// Interval overlaps the best row's interval.
    pub best: bool,
}

/// Rows sorted by mean, best first. A row is marked best when its 95%
/// interval reaches the lower end of the top row's interval.
pub fn compare(reports: &[EvalReport]) -> Vec<CompareRow> {
    let mut rows: Vec<CompareRow> = reports
        .iter()
        .map(|r| CompareRow {
            policy: r.policy.clone(),
            mean: r.mean,
            ci95: r.ci95,
            episodes: r.episodes,
            best: false,
        })
        .collect();
    rows.sort_by(|a, b| b.mean.total_cmp(&a.mean));
    if let Some(top) = rows.first() {
        let floor = top.mean - top.ci95;
        for row in &mut rows {
            row.best = row.mean + row.ci95 >= floor;
        }
    }
    rows
}

pub fn render_markdown(rows: &[CompareRow]) -> String {
    let mut out = String::from("| policy | mean step return | ci95 | episodes |\n|---|---:|---:|---:|\n");
    for r in rows {
        let mean = if r.best {
            format!("**{:.4}**", r.mean)
        } else {
            format!("{:.4}", r.mean)
        };
        let _ = writeln!(out, "| {} | {} | ±{:.4} | {} |", r.policy, mean, r.ci95, r.episodes);
    }
    out
}

pub fn render_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from("policy,mean,ci95,episodes,best\n");
    for r in rows {
        let policy = if r.policy.contains([',', '"']) {
            format!("\"{}\"", r.policy.replace('"', "\"\""))
        } else {
            r.policy.clone()
        };
        let _ = writeln!(out, "{},{},{},{},{}", policy, r.mean, r.ci95, r.episodes, r.best);
    }
    out
}
