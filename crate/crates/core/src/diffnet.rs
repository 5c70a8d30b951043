//! Dense multilayer perceptrons with exact reverse-mode gradients.
//!
//! Networks are described by an [`MlpSpec`] and carry their weights in a flat
//! [`ParamVector`]. The layout is layer-major: for every layer, in order from
//! the input, the weight matrix is stored row-major as `fan_out` rows of
//! `fan_in` entries, followed by the `fan_out` biases. [`Gradient`] uses the
//! same layout, so a parameter step is a plain element-wise operation.
//!
//! Everything here is a pure function of its inputs and runs in `f64`.

use std::io::{BufRead, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Step used for the finite-difference mixed derivative in action space.
pub const MIXED_FD_STEP: f64 = 1e-4;

/// Version tag written into parameter file headers.
pub const LAYOUT_VERSION: u32 = 1;

const PARAM_FILE_MAGIC: &str = "splitgym-params";

#[derive(Debug, thiserror::Error)]
pub enum DiffnetError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: expected {expected}, got {actual} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("gradient requested on a network with {0} outputs; a scalar output is required")]
    NotScalar(usize),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("malformed parameter file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DiffnetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenActivation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    /// `(tanh(z) + 1) / 2`, a monotone map from R onto (0, 1).
    UnitInterval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub hidden_activation: HiddenActivation,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: &[usize],
        output_dim: usize,
        output_activation: OutputActivation,
    ) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            output_dim,
            hidden_activation: HiddenActivation::Relu,
            output_activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Scalar-output critic over `input_dim` inputs.
    pub fn critic(input_dim: usize, hidden_dims: &[usize]) -> Result<Self> {
        Self::new(input_dim, hidden_dims, 1, OutputActivation::Identity)
    }

    /// Actor whose outputs live in (0, 1).
    pub fn actor(input_dim: usize, hidden_dims: &[usize], output_dim: usize) -> Result<Self> {
        Self::new(input_dim, hidden_dims, output_dim, OutputActivation::UnitInterval)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(DiffnetError::InvalidSpec(
                "input and output dims must be at least 1".into(),
            ));
        }
        if self.hidden_dims.contains(&0) {
            return Err(DiffnetError::InvalidSpec(
                "hidden dims must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for every layer, input side first.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.output_dim));
        dims
    }

    /// Total number of parameters, `sum (fan_in + 1) * fan_out`.
    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(fan_in, fan_out)| (fan_in + 1) * fan_out)
            .sum()
    }

    /// Offset of each layer's weight block in the flat layout. The bias block
    /// of a layer follows its weights immediately.
    pub fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::new();
        let mut at = 0;
        for (fan_in, fan_out) in self.layer_dims() {
            offsets.push(at);
            at += (fan_in + 1) * fan_out;
        }
        offsets
    }

    fn max_width(&self) -> usize {
        self.hidden_dims
            .iter()
            .copied()
            .chain([self.input_dim, self.output_dim])
            .max()
            .unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Self(vec![0.0; spec.param_count()])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `self <- tau * source + (1 - tau) * self`.
    pub fn soft_update_from(&mut self, source: &ParamVector, tau: f64) {
        for (t, &s) in self.0.iter_mut().zip(&source.0) {
            *t = tau * s + (1.0 - tau) * *t;
        }
    }

    /// Header line followed by `d` little-endian `f64` values.
    pub fn write_to<W: Write>(&self, spec: &MlpSpec, mut out: W) -> Result<()> {
        check_len("parameter vector", spec.param_count(), self.len())?;
        let header = ParamHeader {
            format: PARAM_FILE_MAGIC.to_string(),
            layout_version: LAYOUT_VERSION,
            spec: spec.clone(),
            d: self.len(),
        };
        let line = serde_json::to_string(&header).map_err(|e| DiffnetError::Format(e.to_string()))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
        write_f64s(&mut out, &self.0)?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut input: R) -> Result<(MlpSpec, ParamVector)> {
        let mut line = String::new();
        input.read_line(&mut line)?;
        let header: ParamHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| DiffnetError::Format(e.to_string()))?;
        if header.format != PARAM_FILE_MAGIC {
            return Err(DiffnetError::Format(format!("unexpected format tag {:?}", header.format)));
        }
        if header.layout_version != LAYOUT_VERSION {
            return Err(DiffnetError::Format(format!(
                "unsupported layout version {}",
                header.layout_version
            )));
        }
        header.spec.validate()?;
        check_len("parameter count in header", header.spec.param_count(), header.d)?;
        let values = read_f64s(&mut input, header.d)?;
        Ok((header.spec, ParamVector(values)))
    }
}

impl Gradient {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamHeader {
    format: String,
    layout_version: u32,
    spec: MlpSpec,
    d: usize,
}

pub(crate) fn write_f64s<W: Write>(out: &mut W, values: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

pub(crate) fn read_f64s<R: Read>(input: &mut R, count: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    input.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(DiffnetError::Dimension {
            what,
            expected,
            actual,
        });
    }
    Ok(())
}

/// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
pub fn init_params(spec: &MlpSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(spec.param_count());
    for (fan_in, fan_out) in spec.layer_dims() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            values.push(rng.random_range(-bound..bound));
        }
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParamVector(values)
}

/// Activations recorded by a forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    /// Layer inputs: `layer_inputs[0]` is the network input, `layer_inputs[l]`
    /// the post-activation output of hidden layer `l - 1`.
    layer_inputs: Vec<Vec<f64>>,
    /// Pre-activation of the output layer.
    output_pre: Vec<f64>,
    output: Vec<f64>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

fn check_params(spec: &MlpSpec, params: &ParamVector) -> Result<()> {
    check_len("parameter vector", spec.param_count(), params.len())
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut Vec<f64>) {
    let fan_in = x.len();
    out.clear();
    out.extend(b.iter().enumerate().map(|(j, &bj)| {
        let row = &w[j * fan_in..(j + 1) * fan_in];
        bj + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }));
}

fn head(activation: OutputActivation, z: f64) -> f64 {
    match activation {
        OutputActivation::Identity => z,
        OutputActivation::UnitInterval => 0.5 * (z.tanh() + 1.0),
    }
}

fn head_derivative(activation: OutputActivation, z: f64) -> f64 {
    match activation {
        OutputActivation::Identity => 1.0,
        OutputActivation::UnitInterval => {
            let t = z.tanh();
            0.5 * (1.0 - t * t)
        }
    }
}

pub fn forward_tape(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<Tape> {
    check_params(spec, params)?;
    check_len("network input", spec.input_dim, input.len())?;
    let dims = spec.layer_dims();
    let last = dims.len() - 1;
    let mut layer_inputs = Vec::with_capacity(dims.len());
    layer_inputs.push(input.to_vec());
    let mut at = 0;
    let mut z = Vec::with_capacity(spec.max_width());
    for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let w = &params.0[at..at + fan_in * fan_out];
        let b = &params.0[at + fan_in * fan_out..at + (fan_in + 1) * fan_out];
        at += (fan_in + 1) * fan_out;
        affine(w, b, &layer_inputs[l], &mut z);
        if l < last {
            layer_inputs.push(z.iter().map(|&v| v.max(0.0)).collect());
        }
    }
    let output = z.iter().map(|&v| head(spec.output_activation, v)).collect();
    Ok(Tape {
        layer_inputs,
        output_pre: z,
        output,
    })
}

pub fn forward(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
    Ok(forward_tape(spec, params, input)?.output)
}

/// Vector-Jacobian product through a recorded forward pass.
///
/// `upstream` is `dL/d(output)`. Parameter gradients are *added* into
/// `param_grad` when given, so a batch can be accumulated in one buffer.
/// Returns `dL/d(input)`.
pub fn backward(
    spec: &MlpSpec,
    params: &ParamVector,
    tape: &Tape,
    upstream: &[f64],
    mut param_grad: Option<&mut [f64]>,
) -> Result<Vec<f64>> {
    check_params(spec, params)?;
    check_len("upstream gradient", spec.output_dim, upstream.len())?;
    if let Some(g) = param_grad.as_deref() {
        check_len("gradient buffer", spec.param_count(), g.len())?;
    }
    let dims = spec.layer_dims();
    let offsets = spec.layer_offsets();

    let mut delta: Vec<f64> = upstream
        .iter()
        .zip(&tape.output_pre)
        .map(|(&u, &z)| u * head_derivative(spec.output_activation, z))
        .collect();
    let mut next = Vec::with_capacity(spec.max_width());

    for l in (0..dims.len()).rev() {
        let (fan_in, fan_out) = dims[l];
        let at = offsets[l];
        let x = &tape.layer_inputs[l];
        let w = &params.0[at..at + fan_in * fan_out];
        if let Some(g) = param_grad.as_deref_mut() {
            let (gw, rest) = g[at..at + (fan_in + 1) * fan_out].split_at_mut(fan_in * fan_out);
            for (j, &dj) in delta.iter().enumerate() {
                if dj != 0.0 {
                    for (gw_ji, &xi) in gw[j * fan_in..(j + 1) * fan_in].iter_mut().zip(x) {
                        *gw_ji += dj * xi;
                    }
                }
                rest[j] += dj;
            }
        }
        next.clear();
        next.resize(fan_in, 0.0);
        for (j, &dj) in delta.iter().enumerate() {
            if dj != 0.0 {
                for (n, &wji) in next.iter_mut().zip(&w[j * fan_in..(j + 1) * fan_in]) {
                    *n += dj * wji;
                }
            }
        }
        if l > 0 {
            // x is the relu output of the previous layer; zero where inactive.
            for (n, &xi) in next.iter_mut().zip(x) {
                if xi <= 0.0 {
                    *n = 0.0;
                }
            }
        }
        std::mem::swap(&mut delta, &mut next);
    }
    Ok(delta)
}

fn require_scalar(spec: &MlpSpec) -> Result<()> {
    if spec.output_dim != 1 {
        return Err(DiffnetError::NotScalar(spec.output_dim));
    }
    Ok(())
}

/// Gradient of a scalar-output network with respect to every parameter.
pub fn grad_params(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<Gradient> {
    require_scalar(spec)?;
    let tape = forward_tape(spec, params, input)?;
    let mut g = vec![0.0; spec.param_count()];
    backward(spec, params, &tape, &[1.0], Some(&mut g))?;
    Ok(Gradient(g))
}

/// Gradient of a scalar-output network with respect to its input.
pub fn grad_input(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
    require_scalar(spec)?;
    let tape = forward_tape(spec, params, input)?;
    backward(spec, params, &tape, &[1.0], None)
}

/// Directional derivative of `grad_params` along `direction` in action space,
/// where the network input is `concat(state_part, action_part)`.
///
/// Computed by central differences with step [`MIXED_FD_STEP`].
pub fn mixed_grad_params_wrt_action(
    spec: &MlpSpec,
    params: &ParamVector,
    state_part: &[f64],
    action_part: &[f64],
    direction: &[f64],
) -> Result<Gradient> {
    mixed_grad_with_step(spec, params, state_part, action_part, direction, MIXED_FD_STEP)
}

pub fn mixed_grad_with_step(
    spec: &MlpSpec,
    params: &ParamVector,
    state_part: &[f64],
    action_part: &[f64],
    direction: &[f64],
    h: f64,
) -> Result<Gradient> {
    require_scalar(spec)?;
    check_len("critic input", spec.input_dim, state_part.len() + action_part.len())?;
    check_len("direction", action_part.len(), direction.len())?;
    if direction.iter().all(|&v| v == 0.0) {
        return Ok(Gradient::zeros(spec.param_count()));
    }
    let mut input = Vec::with_capacity(spec.input_dim);
    input.extend_from_slice(state_part);
    input.extend(action_part.iter().zip(direction).map(|(a, d)| a + h * d));
    let plus = grad_params(spec, params, &input)?;
    for (slot, (a, d)) in input[state_part.len()..]
        .iter_mut()
        .zip(action_part.iter().zip(direction))
    {
        *slot = a - h * d;
    }
    let minus = grad_params(spec, params, &input)?;
    let scale = 1.0 / (2.0 * h);
    let out: Vec<f64> = plus
        .0
        .iter()
        .zip(&minus.0)
        .map(|(p, m)| (p - m) * scale)
        .collect();
    let out = Gradient(out);
    if !out.is_finite() {
        return Err(DiffnetError::NonFinite("mixed derivative"));
    }
    Ok(out)
}
