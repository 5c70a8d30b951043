//! Offline training: behavioral cloning, TD3, TD3+BC and pessimistic TD3.
//!
//! Randomness comes from two ChaCha streams derived from the training seed.
//! The main stream draws minibatch indices and then target-policy noise on
//! every step. The Fisher stream draws the single Fisher sample index and
//! then the Fisher noise on every delayed step. Keeping the Fisher draws on
//! their own stream means a PTD3 run with `beta = 0` replays a TD3 run
//! exactly.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{normalize, DataError, Dataset, NormStats};
use crate::diffnet::{
    backward, forward, forward_tape, grad_params, init_params, mixed_grad_params_wrt_action,
    write_f64s, DiffnetError, MlpSpec, ParamVector,
};
use crate::fisher::{batch_quadratic_forms, FisherError, FisherState};
use crate::optim::Adam;

const INIT_STREAM: u64 = 0;
const MAIN_STREAM: u64 = 1;
const FISHER_STREAM: u64 = 2;

pub const CHECKPOINT_MAGIC: &str = "splitgym-agent";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum AlgoError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("{what}: expected dimension {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Diffnet(#[from] DiffnetError),
    #[error(transparent)]
    Fisher(#[from] FisherError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AlgoError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Bc,
    Td3,
    Td3Bc,
    Ptd3,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::Bc => "bc",
            Algo::Td3 => "td3",
            Algo::Td3Bc => "td3bc",
            Algo::Ptd3 => "ptd3",
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = AlgoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bc" => Ok(Algo::Bc),
            "td3" => Ok(Algo::Td3),
            "td3bc" | "td3_bc" | "td3+bc" => Ok(Algo::Td3Bc),
            "ptd3" => Ok(Algo::Ptd3),
            other => Err(AlgoError::InvalidHyper(format!("unknown algorithm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Td3Hyper {
    pub gamma: f64,
    pub tau: f64,
    pub policy_delay: u64,
    /// Std of the target-policy smoothing noise.
    pub target_noise: f64,
    pub noise_clip: f64,
    pub batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub steps: u64,
    pub critic_hidden: Vec<usize>,
    pub actor_hidden: Vec<usize>,
}

impl Default for Td3Hyper {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            policy_delay: 2,
            target_noise: 0.2,
            noise_clip: 0.5,
            batch_size: 256,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            steps: 10_000,
            critic_hidden: vec![64, 64],
            actor_hidden: vec![64, 64],
        }
    }
}

impl Td3Hyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AlgoError::InvalidHyper(m.to_string()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !(self.target_noise > 0.0 && self.noise_clip > 0.0) {
            return bad("target noise and noise clip must be positive");
        }
        if self.policy_delay == 0 || self.batch_size == 0 {
            return bad("policy delay and batch size must be at least 1");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PtD3Hyper {
    #[serde(flatten)]
    pub td3: Td3Hyper,
    /// Fisher decay.
    pub alpha: f64,
    /// Pessimism weight.
    pub beta: f64,
    /// Drop the Q term and descend the bonus alone.
    pub pure_pessimism: bool,
    pub fisher_noise_std: f64,
    pub recompute_period: u64,
}

impl Default for PtD3Hyper {
    fn default() -> Self {
        Self {
            td3: Td3Hyper::default(),
            alpha: 1.0,
            beta: 10.0,
            pure_pessimism: false,
            fisher_noise_std: crate::fisher::DEFAULT_NOISE_STD,
            recompute_period: crate::fisher::DEFAULT_RECOMPUTE_PERIOD,
        }
    }
}

impl PtD3Hyper {
    pub fn validate(&self) -> Result<()> {
        self.td3.validate()?;
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(AlgoError::InvalidHyper("alpha must lie in (0, 1]".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(AlgoError::InvalidHyper("beta must be non-negative".into()));
        }
        if !(self.fisher_noise_std >= 0.0) {
            return Err(AlgoError::InvalidHyper("Fisher noise std must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub algo: Algo,
    pub hyper: PtD3Hyper,
    /// TD3+BC trade-off; 2.5 is the value of the reference implementation.
    pub bc_alpha: f64,
    pub normalize: bool,
}

impl TrainOptions {
    pub fn new(algo: Algo) -> Self {
        Self {
            algo,
            hyper: PtD3Hyper::default(),
            bc_alpha: 2.5,
            normalize: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if !(self.bc_alpha >= 0.0) {
            return Err(AlgoError::InvalidHyper("bc_alpha must be non-negative".into()));
        }
        Ok(())
    }
}

/// Dataset transitions packed into contiguous row-major arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub state_dim: usize,
    pub action_dim: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<f64>,
}

impl TrainingData {
    pub fn from_dataset(dataset: &Dataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(AlgoError::EmptyDataset);
        }
        let (sd, ad) = (dataset.meta.state_dim, dataset.meta.action_dim);
        let n = dataset.len();
        let mut data = Self {
            state_dim: sd,
            action_dim: ad,
            states: Vec::with_capacity(n * sd),
            actions: Vec::with_capacity(n * ad),
            rewards: Vec::with_capacity(n),
            next_states: Vec::with_capacity(n * sd),
        };
        for t in dataset.transitions() {
            if t.s.len() != sd || t.s_next.len() != sd {
                return Err(AlgoError::Dimension {
                    what: "state",
                    expected: sd,
                    actual: t.s.len().max(t.s_next.len()),
                });
            }
            if t.a.len() != ad {
                return Err(AlgoError::Dimension {
                    what: "action",
                    expected: ad,
                    actual: t.a.len(),
                });
            }
            data.states.extend_from_slice(&t.s);
            data.actions.extend_from_slice(&t.a);
            data.rewards.push(t.r);
            data.next_states.extend_from_slice(&t.s_next);
        }
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn next_state(&self, i: usize) -> &[f64] {
        &self.next_states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    /// `batch_size` indices drawn uniformly with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<usize> {
        (0..batch_size).map(|_| rng.random_range(0..self.len())).collect()
    }
}

fn concat(s: &[f64], a: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(s.len() + a.len());
    x.extend_from_slice(s);
    x.extend_from_slice(a);
    x
}

/// Everything needed to act and to keep training: live and target networks,
/// optional state normalization, and the options they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentBundle {
    pub actor_spec: MlpSpec,
    pub critic_spec: MlpSpec,
    pub actor: ParamVector,
    pub critic1: ParamVector,
    pub critic2: ParamVector,
    pub actor_target: ParamVector,
    pub critic1_target: ParamVector,
    pub critic2_target: ParamVector,
    pub norm: Option<NormStats>,
    pub options: TrainOptions,
    pub seed: u64,
    pub steps_done: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointRecord {
    format: String,
    version: u32,
    options: TrainOptions,
    seed: u64,
    steps_done: u64,
    norm: Option<NormStats>,
}

impl AgentBundle {
    /// Fresh networks with targets equal to the live copies.
    pub fn new(options: TrainOptions, state_dim: usize, action_dim: usize, seed: u64) -> Result<Self> {
        options.validate()?;
        let h = &options.hyper.td3;
        let actor_spec = MlpSpec::actor(state_dim, &h.actor_hidden, action_dim)?;
        let critic_spec = MlpSpec::critic(state_dim + action_dim, &h.critic_hidden)?;
        let mut init = stream(seed, INIT_STREAM);
        let actor = init_params(&actor_spec, init.next_u64());
        let critic1 = init_params(&critic_spec, init.next_u64());
        let critic2 = init_params(&critic_spec, init.next_u64());
        Ok(Self {
            actor_target: actor.clone(),
            critic1_target: critic1.clone(),
            critic2_target: critic2.clone(),
            actor_spec,
            critic_spec,
            actor,
            critic1,
            critic2,
            norm: None,
            options,
            seed,
            steps_done: 0,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.actor_spec.input_dim
    }

    pub fn action_dim(&self) -> usize {
        self.actor_spec.output_dim
    }

    /// Raw actor output for an unnormalized state.
    pub fn act(&self, state: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.state_dim() {
            return Err(AlgoError::Dimension {
                what: "state",
                expected: self.state_dim(),
                actual: state.len(),
            });
        }
        let out = match &self.norm {
            Some(stats) => forward(&self.actor_spec, &self.actor, &stats.apply(state))?,
            None => forward(&self.actor_spec, &self.actor, state)?,
        };
        Ok(out)
    }

    fn blocks(&self) -> [(&MlpSpec, &ParamVector); 6] {
        [
            (&self.actor_spec, &self.actor),
            (&self.critic_spec, &self.critic1),
            (&self.critic_spec, &self.critic2),
            (&self.actor_spec, &self.actor_target),
            (&self.critic_spec, &self.critic1_target),
            (&self.critic_spec, &self.critic2_target),
        ]
    }

    /// Hex SHA-256 over all parameter blocks.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for (_, p) in self.blocks() {
            let mut bytes = Vec::with_capacity(p.len() * 8);
            write_f64s(&mut bytes, p.as_slice()).expect("writing to a Vec cannot fail");
            hasher.update(&bytes);
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// A JSON record line followed by six parameter blocks: actor, both
    /// critics, then their targets in the same order.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let record = CheckpointRecord {
            format: CHECKPOINT_MAGIC.to_string(),
            version: CHECKPOINT_VERSION,
            options: self.options.clone(),
            seed: self.seed,
            steps_done: self.steps_done,
            norm: self.norm.clone(),
        };
        let line = serde_json::to_string(&record).map_err(|e| AlgoError::Format(e.to_string()))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
        for (spec, p) in self.blocks() {
            p.write_to(spec, &mut out)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut input: R) -> Result<Self> {
        let mut line = String::new();
        input.read_line(&mut line)?;
        let record: CheckpointRecord =
            serde_json::from_str(line.trim_end()).map_err(|e| AlgoError::Format(e.to_string()))?;
        if record.format != CHECKPOINT_MAGIC || record.version != CHECKPOINT_VERSION {
            return Err(AlgoError::Format(format!(
                "unexpected header {:?} v{}",
                record.format, record.version
            )));
        }
        let mut read = || ParamVector::read_from(&mut input);
        let (actor_spec, actor) = read()?;
        let (critic_spec, critic1) = read()?;
        let blocks = [read()?, read()?, read()?, read()?];
        let expected = [&critic_spec, &actor_spec, &critic_spec, &critic_spec];
        if blocks.iter().zip(expected).any(|((s, _), e)| s != e) {
            return Err(AlgoError::Format("parameter block specs disagree".into()));
        }
        if critic_spec.input_dim != actor_spec.input_dim + actor_spec.output_dim {
            return Err(AlgoError::Format("critic input does not match actor dims".into()));
        }
        if let Some(n) = &record.norm {
            if n.mean.len() != actor_spec.input_dim || n.std.len() != actor_spec.input_dim {
                return Err(AlgoError::Format("normalization stats have the wrong length".into()));
            }
        }
        let [(_, critic2), (_, actor_target), (_, critic1_target), (_, critic2_target)] = blocks;
        Ok(Self {
            actor_spec,
            critic_spec,
            actor,
            critic1,
            critic2,
            actor_target,
            critic1_target,
            critic2_target,
            norm: record.norm,
            options: record.options,
            seed: record.seed,
            steps_done: record.steps_done,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// One Adam state per trained network.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizers {
    pub actor: Adam,
    pub critic1: Adam,
    pub critic2: Adam,
}

impl Optimizers {
    pub fn new(bundle: &AgentBundle) -> Self {
        let h = &bundle.options.hyper.td3;
        Self {
            actor: Adam::new(bundle.actor.len(), h.actor_lr),
            critic1: Adam::new(bundle.critic1.len(), h.critic_lr),
            critic2: Adam::new(bundle.critic2.len(), h.critic_lr),
        }
    }
}

/// Mean squared Bellman errors before the step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticLosses {
    pub critic1: f64,
    pub critic2: f64,
}

/// One gradient step for both critics toward the clipped double-Q target.
///
/// Draws `batch.len() * action_dim` normals from `rng` for the target-policy
/// noise, sample by sample. Noisy target actions are clamped into `[0, 1]`.
pub fn td3_critic_update<R: Rng + ?Sized>(
    bundle: &mut AgentBundle,
    opts: &mut Optimizers,
    data: &TrainingData,
    batch: &[usize],
    rng: &mut R,
) -> Result<CriticLosses> {
    let h = bundle.options.hyper.td3.clone();
    let n = batch.len() as f64;
    let cs = &bundle.critic_spec;
    let mut g1 = vec![0.0; bundle.critic1.len()];
    let mut g2 = vec![0.0; bundle.critic2.len()];
    let (mut loss1, mut loss2) = (0.0, 0.0);
    for &i in batch {
        let s_next = data.next_state(i);
        let mut a_next = forward(&bundle.actor_spec, &bundle.actor_target, s_next)?;
        for a in a_next.iter_mut() {
            let eps: f64 = rng.sample(StandardNormal);
            let eps = (h.target_noise * eps).clamp(-h.noise_clip, h.noise_clip);
            *a = (*a + eps).clamp(0.0, 1.0);
        }
        let x_next = concat(s_next, &a_next);
        let q1t = forward(cs, &bundle.critic1_target, &x_next)?[0];
        let q2t = forward(cs, &bundle.critic2_target, &x_next)?[0];
        let y = data.rewards[i] + h.gamma * q1t.min(q2t);

        let x = concat(data.state(i), data.action(i));
        let tape1 = forward_tape(cs, &bundle.critic1, &x)?;
        let tape2 = forward_tape(cs, &bundle.critic2, &x)?;
        let e1 = tape1.output()[0] - y;
        let e2 = tape2.output()[0] - y;
        loss1 += e1 * e1 / n;
        loss2 += e2 * e2 / n;
        backward(cs, &bundle.critic1, &tape1, &[2.0 * e1 / n], Some(&mut g1))?;
        backward(cs, &bundle.critic2, &tape2, &[2.0 * e2 / n], Some(&mut g2))?;
    }
    if !(loss1.is_finite() && loss2.is_finite()) {
        return Err(AlgoError::NonFinite("critic loss"));
    }
    opts.critic1.step(&mut bundle.critic1.0, &g1);
    opts.critic2.step(&mut bundle.critic2.0, &g2);
    Ok(CriticLosses {
        critic1: loss1,
        critic2: loss2,
    })
}

/// `J(phi) = mean_i [w Q1(s_i, pi(s_i)) - beta * sqrt(g_i^T F^-1 g_i)]` with
/// `g_i = grad_theta Q1(s_i, pi(s_i))` and `w = 0` under pure pessimism.
/// Without a Fisher state the bonus term is absent.
pub fn ptd3_objective(
    bundle: &AgentBundle,
    fisher: Option<&FisherState>,
    states: &[&[f64]],
    beta: f64,
    pure_pessimism: bool,
) -> Result<f64> {
    let cs = &bundle.critic_spec;
    let mut total = 0.0;
    for s in states {
        let a = forward(&bundle.actor_spec, &bundle.actor, s)?;
        let x = concat(s, &a);
        if !pure_pessimism {
            total += forward(cs, &bundle.critic1, &x)?[0];
        }
        if let Some(f) = fisher {
            if beta != 0.0 {
                let g = grad_params(cs, &bundle.critic1, &x)?;
                total -= beta * f.quadratic_form(g.as_slice())?.sqrt();
            }
        }
    }
    Ok(total / states.len() as f64)
}

/// Gradient of [`ptd3_objective`] with respect to the actor parameters,
/// together with the objective value.
///
/// The bonus derivative uses `d sqrt(q)/da_j = (F^-1 g)^T (dg/da_j) / sqrt(q)`
/// with `dg/da_j` from [`mixed_grad_params_wrt_action`]; samples with
/// `q = 0` contribute no bonus gradient.
pub fn ptd3_actor_gradient(
    bundle: &AgentBundle,
    fisher: Option<&FisherState>,
    states: &[&[f64]],
    beta: f64,
    pure_pessimism: bool,
) -> Result<(f64, Vec<f64>)> {
    let cs = &bundle.critic_spec;
    let (sd, ad) = (bundle.state_dim(), bundle.action_dim());
    let n = states.len();
    let with_bonus = beta != 0.0 && fisher.is_some();
    let d = bundle.critic1.len();

    let mut actor_tapes = Vec::with_capacity(n);
    let mut dj_da = vec![0.0; n * ad];
    let mut q_sum = 0.0;
    let mut grads = if with_bonus {
        DMatrix::<f64>::zeros(d, n)
    } else {
        DMatrix::<f64>::zeros(0, 0)
    };
    for (i, s) in states.iter().enumerate() {
        let tape = forward_tape(&bundle.actor_spec, &bundle.actor, s)?;
        let x = concat(s, tape.output());
        let ctape = forward_tape(cs, &bundle.critic1, &x)?;
        let dq = if with_bonus {
            let col = &mut grads.as_mut_slice()[i * d..(i + 1) * d];
            backward(cs, &bundle.critic1, &ctape, &[1.0], Some(col))?
        } else {
            backward(cs, &bundle.critic1, &ctape, &[1.0], None)?
        };
        if !pure_pessimism {
            q_sum += ctape.output()[0];
            dj_da[i * ad..(i + 1) * ad].copy_from_slice(&dq[sd..]);
        }
        actor_tapes.push(tape);
    }

    let mut bonus_sum = 0.0;
    if with_bonus {
        let fisher = fisher.expect("checked above");
        let (forms, solved) = batch_quadratic_forms(fisher, &grads)?;
        let mut dir = vec![0.0; ad];
        for (i, s) in states.iter().enumerate() {
            let root = forms[i].sqrt();
            bonus_sum += beta * root;
            if root == 0.0 {
                continue;
            }
            let a = actor_tapes[i].output();
            let v = solved.column(i);
            for j in 0..ad {
                dir.iter_mut().for_each(|x| *x = 0.0);
                dir[j] = 1.0;
                let dg = mixed_grad_params_wrt_action(cs, &bundle.critic1, s, a, &dir)?;
                let dot: f64 = v.iter().zip(dg.as_slice()).map(|(x, y)| x * y).sum();
                dj_da[i * ad + j] -= beta * dot / root;
            }
        }
    }

    let mut grad = vec![0.0; bundle.actor.len()];
    let scale = 1.0 / n as f64;
    for (i, tape) in actor_tapes.iter().enumerate() {
        let upstream: Vec<f64> = dj_da[i * ad..(i + 1) * ad].iter().map(|g| g * scale).collect();
        backward(&bundle.actor_spec, &bundle.actor, tape, &upstream, Some(&mut grad))?;
    }
    let value = (q_sum - bonus_sum) / n as f64;
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(AlgoError::NonFinite("actor objective"));
    }
    Ok((value, grad))
}

fn batch_states<'a>(data: &'a TrainingData, batch: &[usize]) -> Vec<&'a [f64]> {
    batch.iter().map(|&i| data.state(i)).collect()
}

fn ascend(opt: &mut Adam, params: &mut ParamVector, mut grad: Vec<f64>) {
    grad.iter_mut().for_each(|g| *g = -*g);
    opt.step(&mut params.0, &grad);
}

/// Plain TD3 policy step: ascend the batch mean of `Q1(s, pi(s))`.
pub fn td3_actor_update(
    bundle: &mut AgentBundle,
    opts: &mut Optimizers,
    data: &TrainingData,
    batch: &[usize],
) -> Result<f64> {
    let states = batch_states(data, batch);
    let (value, grad) = ptd3_actor_gradient(bundle, None, &states, 0.0, false)?;
    ascend(&mut opts.actor, &mut bundle.actor, grad);
    Ok(value)
}

/// Pessimistic policy step. First one transition drawn from `fisher_rng`
/// feeds the Fisher estimator, then the actor ascends [`ptd3_objective`].
pub fn ptd3_actor_update<R: Rng + ?Sized>(
    bundle: &mut AgentBundle,
    opts: &mut Optimizers,
    fisher: &mut FisherState,
    data: &TrainingData,
    batch: &[usize],
    fisher_rng: &mut R,
) -> Result<f64> {
    let j = fisher_rng.random_range(0..data.len());
    let x = concat(data.state(j), data.action(j));
    let g = grad_params(&bundle.critic_spec, &bundle.critic1, &x)?;
    fisher.update(&g, fisher_rng)?;

    let hyper = &bundle.options.hyper;
    let (beta, pure) = (hyper.beta, hyper.pure_pessimism);
    let states = batch_states(data, batch);
    let (value, grad) = ptd3_actor_gradient(bundle, Some(fisher), &states, beta, pure)?;
    ascend(&mut opts.actor, &mut bundle.actor, grad);
    Ok(value)
}

/// Gradient of `mean_i [lambda Q1(s_i, pi(s_i)) - |pi(s_i) - a_i|^2]` with
/// `lambda = bc_alpha / mean_i |Q1(s_i, a_i)|`.
pub fn td3bc_actor_gradient(
    bundle: &AgentBundle,
    data: &TrainingData,
    batch: &[usize],
    bc_alpha: f64,
) -> Result<(f64, Vec<f64>)> {
    let cs = &bundle.critic_spec;
    let (sd, ad) = (bundle.state_dim(), bundle.action_dim());
    let n = batch.len() as f64;
    let mut abs_q = 0.0;
    for &i in batch {
        abs_q += forward(cs, &bundle.critic1, &concat(data.state(i), data.action(i)))?[0].abs();
    }
    let lambda = if bc_alpha == 0.0 {
        0.0
    } else {
        bc_alpha / (abs_q / n)
    };
    if !lambda.is_finite() {
        return Err(AlgoError::NonFinite("TD3+BC lambda"));
    }
    let mut grad = vec![0.0; bundle.actor.len()];
    let mut value = 0.0;
    for &i in batch {
        let s = data.state(i);
        let target = data.action(i);
        let tape = forward_tape(&bundle.actor_spec, &bundle.actor, s)?;
        let pi = tape.output();
        let mut upstream = vec![0.0; ad];
        let mut sq = 0.0;
        for j in 0..ad {
            let diff = pi[j] - target[j];
            sq += diff * diff;
            upstream[j] = -2.0 * diff;
        }
        value -= sq;
        if lambda != 0.0 {
            let ctape = forward_tape(cs, &bundle.critic1, &concat(s, pi))?;
            let dq = backward(cs, &bundle.critic1, &ctape, &[1.0], None)?;
            value += lambda * ctape.output()[0];
            for j in 0..ad {
                upstream[j] += lambda * dq[sd + j];
            }
        }
        upstream.iter_mut().for_each(|u| *u /= n);
        backward(&bundle.actor_spec, &bundle.actor, &tape, &upstream, Some(&mut grad))?;
    }
    Ok((value / n, grad))
}

pub fn td3bc_actor_update(
    bundle: &mut AgentBundle,
    opts: &mut Optimizers,
    data: &TrainingData,
    batch: &[usize],
) -> Result<f64> {
    let bc_alpha = bundle.options.bc_alpha;
    let (value, grad) = td3bc_actor_gradient(bundle, data, batch, bc_alpha)?;
    ascend(&mut opts.actor, &mut bundle.actor, grad);
    Ok(value)
}

/// One behavioral-cloning step on `mean_i |pi(s_i) - a_i|^2`; returns the
/// loss before the step.
pub fn bc_actor_update(
    bundle: &mut AgentBundle,
    opts: &mut Optimizers,
    data: &TrainingData,
    batch: &[usize],
) -> Result<f64> {
    let ad = bundle.action_dim();
    let n = batch.len() as f64;
    let mut grad = vec![0.0; bundle.actor.len()];
    let mut loss = 0.0;
    let mut upstream = vec![0.0; ad];
    for &i in batch {
        let tape = forward_tape(&bundle.actor_spec, &bundle.actor, data.state(i))?;
        for (j, (p, a)) in tape.output().iter().zip(data.action(i)).enumerate() {
            let diff = p - a;
            loss += diff * diff / n;
            upstream[j] = 2.0 * diff / n;
        }
        backward(&bundle.actor_spec, &bundle.actor, &tape, &upstream, Some(&mut grad))?;
    }
    if !loss.is_finite() {
        return Err(AlgoError::NonFinite("behavioral cloning loss"));
    }
    opts.actor.step(&mut bundle.actor.0, &grad);
    Ok(loss)
}

/// `target <- tau * live + (1 - tau) * target` for all three networks.
pub fn soft_update_targets(bundle: &mut AgentBundle) {
    let tau = bundle.options.hyper.td3.tau;
    bundle.actor_target.soft_update_from(&bundle.actor, tau);
    bundle.critic1_target.soft_update_from(&bundle.critic1, tau);
    bundle.critic2_target.soft_update_from(&bundle.critic2, tau);
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    pub critic: Option<CriticLosses>,
    /// Actor objective (or BC loss) before the step, on delayed steps.
    pub actor: Option<f64>,
}

/// A resumable training run. Cloning it mid-run and continuing both copies
/// yields identical results.
#[derive(Debug, Clone)]
pub struct Trainer {
    bundle: AgentBundle,
    data: TrainingData,
    opts: Optimizers,
    fisher: Option<FisherState>,
    rng: ChaCha8Rng,
    fisher_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(options: TrainOptions, dataset: &Dataset, seed: u64) -> Result<Self> {
        options.validate()?;
        if dataset.is_empty() {
            return Err(AlgoError::EmptyDataset);
        }
        let (data, norm) = if options.normalize {
            let (normalized, stats) = normalize(dataset)?;
            (TrainingData::from_dataset(&normalized)?, Some(stats))
        } else {
            (TrainingData::from_dataset(dataset)?, None)
        };
        let mut bundle = AgentBundle::new(options, data.state_dim, data.action_dim, seed)?;
        bundle.norm = norm;
        Self::from_parts(bundle, data)
    }

    /// Starts from an existing bundle; `data` must already be normalized
    /// with the bundle's statistics if it carries any.
    pub fn from_parts(bundle: AgentBundle, data: TrainingData) -> Result<Self> {
        if data.state_dim != bundle.state_dim() || data.action_dim != bundle.action_dim() {
            return Err(AlgoError::Dimension {
                what: "training data",
                expected: bundle.state_dim() + bundle.action_dim(),
                actual: data.state_dim + data.action_dim,
            });
        }
        if data.is_empty() {
            return Err(AlgoError::EmptyDataset);
        }
        let h = &bundle.options.hyper;
        let fisher = match bundle.options.algo {
            Algo::Ptd3 => Some(
                FisherState::new(bundle.critic1.len(), h.alpha)?
                    .with_noise_std(h.fisher_noise_std)
                    .with_recompute_period(h.recompute_period),
            ),
            _ => None,
        };
        let opts = Optimizers::new(&bundle);
        let rng = stream(bundle.seed, MAIN_STREAM);
        let fisher_rng = stream(bundle.seed, FISHER_STREAM);
        Ok(Self {
            bundle,
            data,
            opts,
            fisher,
            rng,
            fisher_rng,
        })
    }

    /// Replaces the Fisher estimator, e.g. with a pinned matrix.
    pub fn with_fisher(mut self, fisher: FisherState) -> Result<Self> {
        if fisher.dim() != self.bundle.critic1.len() {
            return Err(AlgoError::Dimension {
                what: "Fisher state",
                expected: self.bundle.critic1.len(),
                actual: fisher.dim(),
            });
        }
        self.fisher = Some(fisher);
        Ok(self)
    }

    pub fn bundle(&self) -> &AgentBundle {
        &self.bundle
    }

    pub fn fisher(&self) -> Option<&FisherState> {
        self.fisher.as_ref()
    }

    pub fn data(&self) -> &TrainingData {
        &self.data
    }

    pub fn into_bundle(self) -> AgentBundle {
        self.bundle
    }

    /// One iteration of the outer loop.
    pub fn step(&mut self) -> Result<StepStats> {
        let h = self.bundle.options.hyper.td3.clone();
        let batch = self.data.sample_batch(h.batch_size, &mut self.rng);
        self.bundle.steps_done += 1;
        let t = self.bundle.steps_done;
        let b = &mut self.bundle;
        let o = &mut self.opts;
        let d = &self.data;
        if b.options.algo == Algo::Bc {
            let loss = bc_actor_update(b, o, d, &batch)?;
            return Ok(StepStats {
                critic: None,
                actor: Some(loss),
            });
        }
        let critic = td3_critic_update(b, o, d, &batch, &mut self.rng)?;
        let mut stats = StepStats {
            critic: Some(critic),
            actor: None,
        };
        if t.is_multiple_of(h.policy_delay) {
            let value = match b.options.algo {
                Algo::Td3 => td3_actor_update(b, o, d, &batch)?,
                Algo::Td3Bc => td3bc_actor_update(b, o, d, &batch)?,
                Algo::Ptd3 => {
                    let fisher = self.fisher.as_mut().expect("PTD3 trainer owns a Fisher state");
                    ptd3_actor_update(b, o, fisher, d, &batch, &mut self.fisher_rng)?
                }
                Algo::Bc => unreachable!(),
            };
            soft_update_targets(b);
            stats.actor = Some(value);
        }
        Ok(stats)
    }

    pub fn run(&mut self, steps: u64) -> Result<()> {
        for _ in 0..steps {
            self.step()?;
        }
        Ok(())
    }
}

/// Trains for `options.hyper.td3.steps` steps.
pub fn train(options: TrainOptions, dataset: &Dataset, seed: u64) -> Result<AgentBundle> {
    let steps = options.hyper.td3.steps;
    let mut trainer = Trainer::new(options, dataset, seed)?;
    trainer.run(steps)?;
    Ok(trainer.into_bundle())
}

/// Behavioral cloning with the shared hyperparameters.
pub fn bc_train(hyper: PtD3Hyper, dataset: &Dataset, seed: u64, normalize: bool) -> Result<AgentBundle> {
    let options = TrainOptions {
        hyper,
        normalize,
        ..TrainOptions::new(Algo::Bc)
    };
    train(options, dataset, seed)
}
