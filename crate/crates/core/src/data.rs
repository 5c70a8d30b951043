//! Offline datasets: collection, episode files, normalization and coverage.
//!
//! # Episode file layout
//!
//! One file per episode, named `episode_<seed>.bin`. The first line is a JSON
//! [`EpisodeHeader`] terminated by `\n`. It is followed by `transitions` rows,
//! each `state_dim + action_dim + 1 + state_dim` little-endian `f64` values in
//! the order `s, a, r, s'`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffnet::{read_f64s, write_f64s};
use crate::env::{EnvError, Environment, SplitEnv};
use crate::linalg::{jacobi_eigenvalues, LinalgError, JACOBI_TOLERANCE};
use crate::policies::HeuristicKind;
use crate::simnet::{SimConfig, MEASUREMENT_FEATURES};

pub const SCHEMA_VERSION: u32 = 1;
/// Lower bound on per-feature standard deviation used for normalization.
pub const NORM_STD_FLOOR: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("dataset is empty")]
    Empty,
    #[error("coverage needs at least {needed} transitions, dataset has {actual}")]
    TooFewTransitions { needed: usize, actual: usize },
    #[error("shape mismatch: expected {expected} {what}, got {actual}")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("episode files disagree: {0}")]
    Inconsistent(String),
    #[error("malformed episode file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub seed: u64,
    pub transitions: Vec<Transition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub policy: String,
    pub config_hash: String,
    pub state_dim: usize,
    pub action_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub episodes: Vec<Episode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub schema_version: u32,
    pub state_dim: usize,
    pub action_dim: usize,
    pub policy: String,
    pub seed: u64,
    pub config_hash: String,
    pub transitions: usize,
}

/// Hex SHA-256 of the config with the seed cleared, so that every episode of
/// one collection run shares the hash.
pub fn config_hash(config: &SimConfig) -> String {
    let canonical = serde_json::to_vec(&config.with_seed(0)).expect("config serializes");
    let digest = Sha256::digest(&canonical);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.episodes.iter().map(|e| e.transitions.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.episodes.iter().flat_map(|e| e.transitions.iter())
    }

    /// Transitions in a flat vector for random access.
    pub fn flat(&self) -> Vec<&Transition> {
        self.transitions().collect()
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.episodes.iter().map(|e| e.seed).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for ep in &self.episodes {
            write_episode(&episode_path(dir, ep.seed), &self.meta, ep)?;
        }
        Ok(())
    }

    /// Loads every `episode_*.bin` in `dir`, ordered by seed.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut meta: Option<DatasetMeta> = None;
        let mut episodes = Vec::new();
        for path in episode_files(dir)? {
            let (header, ep) = read_episode(&path)?;
            let this = DatasetMeta {
                policy: header.policy,
                config_hash: header.config_hash,
                state_dim: header.state_dim,
                action_dim: header.action_dim,
            };
            match &meta {
                None => meta = Some(this),
                Some(m) if *m != this => {
                    return Err(DataError::Inconsistent(format!(
                        "{} does not match earlier episodes",
                        path.display()
                    )))
                }
                Some(_) => {}
            }
            episodes.push(ep);
        }
        let meta = meta.ok_or(DataError::Empty)?;
        episodes.sort_by_key(|e| e.seed);
        Ok(Self { meta, episodes })
    }
}

pub fn episode_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("episode_{seed:05}.bin"))
}

/// Episode files in `dir`, sorted by name.
pub fn episode_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("episode_") && n.ends_with(".bin"))
        })
        .collect();
    files.sort();
    Ok(files)
}

pub fn write_episode(path: &Path, meta: &DatasetMeta, ep: &Episode) -> Result<()> {
    let header = EpisodeHeader {
        schema_version: SCHEMA_VERSION,
        state_dim: meta.state_dim,
        action_dim: meta.action_dim,
        policy: meta.policy.clone(),
        seed: ep.seed,
        config_hash: meta.config_hash.clone(),
        transitions: ep.transitions.len(),
    };
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    let mut row = Vec::with_capacity(2 * meta.state_dim + meta.action_dim + 1);
    for t in &ep.transitions {
        row.clear();
        row.extend_from_slice(&t.s);
        row.extend_from_slice(&t.a);
        row.push(t.r);
        row.extend_from_slice(&t.s_next);
        write_f64s(&mut out, &row)?;
    }
    out.flush()?;
    Ok(())
}

fn read_header<R: BufRead>(path: &Path, input: &mut R) -> Result<EpisodeHeader> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    let header: EpisodeHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| DataError::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(DataError::Format {
            path: path.to_path_buf(),
            reason: format!("unsupported schema version {}", header.schema_version),
        });
    }
    Ok(header)
}

pub fn read_episode_header(path: &Path) -> Result<EpisodeHeader> {
    read_header(path, &mut BufReader::new(File::open(path)?))
}

pub fn read_episode(path: &Path) -> Result<(EpisodeHeader, Episode)> {
    let mut input = BufReader::new(File::open(path)?);
    let header = read_header(path, &mut input)?;
    let (sd, ad) = (header.state_dim, header.action_dim);
    let width = 2 * sd + ad + 1;
    let values = read_f64s(&mut input, width * header.transitions).map_err(|e| {
        DataError::Format {
            path: path.to_path_buf(),
            reason: format!("truncated body: {e}"),
        }
    })?;
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(DataError::Format {
            path: path.to_path_buf(),
            reason: format!("{} trailing bytes", rest.len()),
        });
    }
    let transitions = values
        .chunks_exact(width)
        .map(|row| Transition {
            s: row[..sd].to_vec(),
            a: row[sd..sd + ad].to_vec(),
            r: row[sd + ad],
            s_next: row[sd + ad + 1..].to_vec(),
        })
        .collect();
    let ep = Episode {
        seed: header.seed,
        transitions,
    };
    Ok((header, ep))
}

fn meta_for(config: &SimConfig, policy: HeuristicKind) -> DatasetMeta {
    DatasetMeta {
        policy: policy.name().to_string(),
        config_hash: config_hash(config),
        state_dim: MEASUREMENT_FEATURES * config.num_users,
        action_dim: config.num_users,
    }
}

/// Runs one seeded episode under a heuristic, recording every transition.
pub fn collect_episode(config: &SimConfig, policy: HeuristicKind, seed: u64) -> Result<Episode> {
    let mut env = SplitEnv::new(config.with_seed(seed))?;
    let mut obs = env.reset(seed)?.flatten();
    let mut transitions = Vec::with_capacity(config.steps_per_episode.saturating_sub(1));
    while !env.is_truncated() {
        let action = policy.act(env.measurements());
        let step = env.step(&action)?;
        let next = step.observation.flatten();
        // Record the split the environment applied.
        let applied = step.measurements.iter().map(|m| m.sr_wifi).collect();
        transitions.push(Transition {
            s: std::mem::replace(&mut obs, next.clone()),
            a: applied,
            r: step.reward,
            s_next: next,
        });
    }
    Ok(Episode { seed, transitions })
}

/// Seeds `seed_start .. seed_start + episodes`.
pub fn collect(
    config: &SimConfig,
    policy: HeuristicKind,
    episodes: usize,
    seed_start: u64,
) -> Result<Dataset> {
    let episodes = (0..episodes as u64)
        .map(|i| collect_episode(config, policy, seed_start + i))
        .collect::<Result<_>>()?;
    Ok(Dataset {
        meta: meta_for(config, policy),
        episodes,
    })
}

/// Like [`collect`] but writes each episode as soon as it finishes and keeps
/// only the headers in memory.
pub fn collect_to_dir(
    config: &SimConfig,
    policy: HeuristicKind,
    episodes: usize,
    seed_start: u64,
    dir: &Path,
) -> Result<Vec<EpisodeHeader>> {
    fs::create_dir_all(dir)?;
    let meta = meta_for(config, policy);
    let mut headers = Vec::with_capacity(episodes);
    for i in 0..episodes as u64 {
        let ep = collect_episode(config, policy, seed_start + i)?;
        let path = episode_path(dir, ep.seed);
        write_episode(&path, &meta, &ep)?;
        headers.push(read_episode_header(&path)?);
    }
    Ok(headers)
}

/// `concat(s, a)`.
pub fn featurize(s: &[f64], a: &[f64], state_dim: usize, action_dim: usize) -> Result<Vec<f64>> {
    if s.len() != state_dim {
        return Err(DataError::Shape {
            what: "state values",
            expected: state_dim,
            actual: s.len(),
        });
    }
    if a.len() != action_dim {
        return Err(DataError::Shape {
            what: "action values",
            expected: action_dim,
            actual: a.len(),
        });
    }
    let mut phi = Vec::with_capacity(state_dim + action_dim);
    phi.extend_from_slice(s);
    phi.extend_from_slice(a);
    Ok(phi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// `lambda_max / lambda_min`; infinite when `lambda_min` is zero.
    #[serde(with = "infinite_as_string")]
    pub condition_number: f64,
    pub feature_dim: usize,
    pub transitions: usize,
}

mod infinite_as_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad number {t:?}"))),
        }
    }
}

/// Second-moment matrix `(1/K) sum phi phi^T` of raw feature vectors.
pub fn feature_second_moment<'a, I>(features: I, dim: usize) -> Result<(DMatrix<f64>, usize)>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut c = DMatrix::<f64>::zeros(dim, dim);
    let mut count = 0usize;
    for phi in features {
        if phi.len() != dim {
            return Err(DataError::Shape {
                what: "features",
                expected: dim,
                actual: phi.len(),
            });
        }
        for i in 0..dim {
            let pi = phi[i];
            if pi == 0.0 {
                continue;
            }
            for j in i..dim {
                c[(i, j)] += pi * phi[j];
            }
        }
        count += 1;
    }
    if count == 0 {
        return Err(DataError::Empty);
    }
    let k = count as f64;
    for i in 0..dim {
        for j in i..dim {
            let v = c[(i, j)] / k;
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    Ok((c, count))
}

/// Extreme eigenvalues of a feature second-moment matrix.
pub fn coverage_of_features<'a, I>(features: I, dim: usize) -> Result<CoverageReport>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let (c, count) = feature_second_moment(features, dim)?;
    let eig = jacobi_eigenvalues(&c, JACOBI_TOLERANCE)?;
    // C is positive semidefinite; negative values are rounding.
    let lambda_min = eig[0].max(0.0);
    let lambda_max = eig[dim - 1].max(0.0);
    let condition_number = if lambda_min > 0.0 {
        lambda_max / lambda_min
    } else {
        f64::INFINITY
    };
    Ok(CoverageReport {
        lambda_min,
        lambda_max,
        condition_number,
        feature_dim: dim,
        transitions: count,
    })
}

/// Coverage of `phi(s, a) = concat(s, a)` over the whole dataset, on raw
/// (unnormalized) features.
pub fn coverage(dataset: &Dataset) -> Result<CoverageReport> {
    let (sd, ad) = (dataset.meta.state_dim, dataset.meta.action_dim);
    let dim = sd + ad;
    let k = dataset.len();
    if k == 0 {
        return Err(DataError::Empty);
    }
    if k < dim {
        return Err(DataError::TooFewTransitions {
            needed: dim,
            actual: k,
        });
    }
    let features = dataset
        .transitions()
        .map(|t| featurize(&t.s, &t.a, sd, ad))
        .collect::<Result<Vec<_>>>()?;
    coverage_of_features(features.iter().map(Vec::as_slice), dim)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Per-feature mean and population standard deviation of all dataset
    /// states, std floored at [`NORM_STD_FLOOR`].
    pub fn from_dataset(dataset: &Dataset) -> Result<Self> {
        let dim = dataset.meta.state_dim;
        let n = dataset.len();
        if n == 0 {
            return Err(DataError::Empty);
        }
        let mut mean = vec![0.0; dim];
        for t in dataset.transitions() {
            for (m, v) in mean.iter_mut().zip(&t.s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for t in dataset.transitions() {
            for ((acc, v), m) in var.iter_mut().zip(&t.s).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| (v / n as f64).sqrt().max(NORM_STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, sd))| (v - m) / sd)
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, sd))| v * sd + m)
            .collect()
    }
}

/// Z-scores every state and next-state with statistics of the dataset states.
pub fn normalize(dataset: &Dataset) -> Result<(Dataset, NormStats)> {
    let stats = NormStats::from_dataset(dataset)?;
    let episodes = dataset
        .episodes
        .iter()
        .map(|ep| Episode {
            seed: ep.seed,
            transitions: ep
                .transitions
                .iter()
                .map(|t| Transition {
                    s: stats.apply(&t.s),
                    a: t.a.clone(),
                    r: t.r,
                    s_next: stats.apply(&t.s_next),
                })
                .collect(),
        })
        .collect();
    Ok((
        Dataset {
            meta: dataset.meta.clone(),
            episodes,
        },
        stats,
    ))
}
