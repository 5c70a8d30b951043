//! Episodic reset/step wrapper around the simulator.
//!
//! The interval produced by `reset` counts as the first step of an episode,
//! so an episode of `steps_per_episode` steps takes `steps_per_episode - 1`
//! calls to [`Environment::step`], and the last of them is truncated.

use serde::{Deserialize, Serialize};

use crate::simnet::{Measurement, SimConfig, SimError, SimState, MEASUREMENT_FEATURES};

/// Number of discrete split levels above zero; actions are `k / 32`.
pub const SPLIT_LEVELS: u32 = 32;
/// Floor applied to both ratio means before taking logs.
pub const REWARD_LOG_FLOOR: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("step called before reset")]
    NotReset,
    #[error("step called after the episode was truncated")]
    AfterTruncation,
    #[error("expected {expected} action values, got {actual}")]
    ActionDim { expected: usize, actual: usize },
    #[error("observation has {actual} values, expected a multiple of {MEASUREMENT_FEATURES}")]
    ObservationShape { actual: usize },
    #[error(transparent)]
    Sim(#[from] SimError),
}

pub type Result<T> = std::result::Result<T, EnvError>;

/// `N_u x 14` observation, one row per UE in [`Measurement::to_row`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    rows: Vec<[f64; MEASUREMENT_FEATURES]>,
}

impl Observation {
    pub fn from_measurements(measurements: &[Measurement]) -> Self {
        Self {
            rows: measurements.iter().map(Measurement::to_row).collect(),
        }
    }

    pub fn rows(&self) -> &[[f64; MEASUREMENT_FEATURES]] {
        &self.rows
    }

    pub fn num_users(&self) -> usize {
        self.rows.len()
    }

    /// Row-major flattening, length `14 * N_u`.
    pub fn flatten(&self) -> Vec<f64> {
        self.rows.iter().flatten().copied().collect()
    }

    pub fn unflatten(values: &[f64]) -> Result<Self> {
        if !values.len().is_multiple_of(MEASUREMENT_FEATURES) {
            return Err(EnvError::ObservationShape {
                actual: values.len(),
            });
        }
        Ok(Self {
            rows: values
                .chunks_exact(MEASUREMENT_FEATURES)
                .map(|c| c.try_into().expect("chunk of 14"))
                .collect(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub truncated: bool,
    pub measurements: Vec<Measurement>,
}

/// Clamps to `[0, 1]` and rounds half-up to the nearest multiple of 1/32.
pub fn quantize(raw: f64) -> f64 {
    let levels = SPLIT_LEVELS as f64;
    let v = if raw.is_nan() { 0.0 } else { raw.clamp(0.0, 1.0) };
    (v * levels + 0.5).floor() / levels
}

/// Mean one-way delay of a UE weighted by what each link actually served;
/// equal weights when nothing was served.
pub fn ue_delay(m: &Measurement) -> f64 {
    let total = m.tp_out();
    if total > 0.0 {
        (m.tp_out_lte * m.owd_lte + m.tp_out_wifi * m.owd_wifi) / total
    } else {
        0.5 * (m.owd_lte + m.owd_wifi)
    }
}

/// `log(mean tp/tp_max) - log(mean dy/dy_max)` over UEs, natural log, with
/// both means floored at [`REWARD_LOG_FLOOR`].
pub fn reward(measurements: &[Measurement], dy_max_ms: f64) -> f64 {
    let n = measurements.len() as f64;
    let throughput = measurements
        .iter()
        .map(|m| {
            let cap = m.lc_total();
            if cap > 0.0 {
                m.tp_out() / cap
            } else {
                0.0
            }
        })
        .sum::<f64>()
        / n;
    let delay = measurements.iter().map(|m| ue_delay(m) / dy_max_ms).sum::<f64>() / n;
    throughput.max(REWARD_LOG_FLOOR).ln() - delay.max(REWARD_LOG_FLOOR).ln()
}

/// Minimal episodic interface shared by the simulator-backed environment
/// and test doubles.
pub trait Environment {
    fn num_users(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Result<Observation>;
    fn step(&mut self, action: &[f64]) -> Result<StepResult>;
    /// Measurements of the most recent interval (after `reset` or `step`).
    fn measurements(&self) -> &[Measurement];
}

#[derive(Debug, Clone)]
pub struct SplitEnv {
    config: SimConfig,
    sim: Option<SimState>,
    step_index: usize,
    last: Vec<Measurement>,
}

impl SplitEnv {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            sim: None,
            step_index: 0,
            last: Vec::new(),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    /// 1-based index of the most recent step; `reset` is step 1.
    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn sim(&self) -> Option<&SimState> {
        self.sim.as_ref()
    }

    pub fn is_truncated(&self) -> bool {
        self.step_index >= self.config.steps_per_episode
    }

    /// Resets with the seed stored in the config.
    pub fn reset_default(&mut self) -> Result<Observation> {
        let seed = self.config.seed;
        self.reset(seed)
    }
}

impl Environment for SplitEnv {
    fn num_users(&self) -> usize {
        self.config.num_users
    }

    fn reset(&mut self, seed: u64) -> Result<Observation> {
        self.config.seed = seed;
        let mut sim = SimState::init_episode(&self.config)?;
        let initial: Vec<f64> = sim.ues().iter().map(|ue| ue.sr_wifi).collect();
        let out = sim.advance_interval(&initial)?;
        self.last = out.measurements;
        self.sim = Some(sim);
        self.step_index = 1;
        Ok(Observation::from_measurements(&self.last))
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let truncated_already = self.is_truncated();
        let sim = self.sim.as_mut().ok_or(EnvError::NotReset)?;
        if truncated_already {
            return Err(EnvError::AfterTruncation);
        }
        if action.len() != self.config.num_users {
            return Err(EnvError::ActionDim {
                expected: self.config.num_users,
                actual: action.len(),
            });
        }
        let splits: Vec<f64> = action.iter().map(|&a| quantize(a)).collect();
        let out = sim.advance_interval(&splits)?;
        self.step_index += 1;
        let reward = reward(&out.measurements, self.config.dy_max_ms);
        self.last = out.measurements;
        Ok(StepResult {
            observation: Observation::from_measurements(&self.last),
            reward,
            truncated: self.is_truncated(),
            measurements: self.last.clone(),
        })
    }

    fn measurements(&self) -> &[Measurement] {
        &self.last
    }
}
