//! Fisher-information uncertainty for pessimistic policy improvement.
//!
//! [`FisherState`] tracks an exponentially weighted moving sum of critic
//! gradient outer products, `F_t = alpha * F_{t-1} + g g^T`, starting from the
//! identity, together with its inverse. The inverse is advanced with the
//! Sherman-Morrison rank-one rule and periodically recomputed from `F` to
//! stop round-off from accumulating. [`bonus`] turns the inverse into the
//! uncertainty width `beta * sqrt(g^T F^-1 g)` that is subtracted from Q.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffnet::Gradient;
use crate::linalg::{identity_deviation, spd_inverse, LinalgError};

pub const DEFAULT_NOISE_STD: f64 = 1e-9;
pub const DEFAULT_RECOMPUTE_PERIOD: u64 = 100;
/// Largest tolerated `max |F F^-1 - I|` right after a recompute.
pub const RECOMPUTE_TOLERANCE: f64 = 1e-6;
/// Radicands below `-RADICAND_TOLERANCE` mean the inverse is broken.
pub const RADICAND_TOLERANCE: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum FisherError {
    #[error("gradient has length {actual}, Fisher state has dimension {expected}")]
    Dimension { expected: usize, actual: usize },
    #[error("empty gradient list without ridge term has no defined dimension")]
    EmptyWithoutRidge,
    #[error("Sherman-Morrison denominator {0:e} is not positive; the estimator lost positive definiteness")]
    NotPositiveDefinite(f64),
    #[error("quadratic form {0:e} is negative; the inverse estimate is broken")]
    NegativeRadicand(f64),
    #[error("recomputed inverse deviates from identity by {0:e}")]
    InverseDrift(f64),
    #[error("decay must lie in (0, 1], got {0}")]
    InvalidDecay(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, FisherError>;

/// `sum_k g_k g_k^T + ridge * I`.
pub fn fisher_full_batch(grads: &[Gradient], dim: usize, ridge: f64) -> Result<DMatrix<f64>> {
    if grads.is_empty() && ridge == 0.0 {
        return Err(FisherError::EmptyWithoutRidge);
    }
    let mut f = DMatrix::<f64>::identity(dim, dim) * ridge;
    for g in grads {
        check_dim(dim, g.len())?;
        let v = DVector::from_column_slice(g.as_slice());
        f.ger(1.0, &v, &v, 1.0);
    }
    Ok(f)
}

fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(FisherError::Dimension { expected, actual });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FisherState {
    f: DMatrix<f64>,
    f_inv: DMatrix<f64>,
    alpha: f64,
    noise_std: f64,
    recompute_period: u64,
    updates: u64,
    frozen: bool,
    last_recompute_deviation: Option<f64>,
    worst_recompute_deviation: Option<f64>,
}

impl FisherState {
    /// `F_0 = I_d`.
    pub fn new(dim: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(FisherError::InvalidDecay(alpha));
        }
        Ok(Self {
            f: DMatrix::identity(dim, dim),
            f_inv: DMatrix::identity(dim, dim),
            alpha,
            noise_std: DEFAULT_NOISE_STD,
            recompute_period: DEFAULT_RECOMPUTE_PERIOD,
            updates: 0,
            frozen: false,
            last_recompute_deviation: None,
            worst_recompute_deviation: None,
        })
    }

    pub fn with_noise_std(mut self, noise_std: f64) -> Self {
        self.noise_std = noise_std;
        self
    }

    /// `0` disables recomputation.
    pub fn with_recompute_period(mut self, period: u64) -> Self {
        self.recompute_period = period;
        self
    }

    /// A frozen state still draws its noise on `update` but never changes.
    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// Replaces `F` and `F^-1` wholesale, e.g. to pin a known matrix in tests.
    pub fn with_matrix(mut self, f: DMatrix<f64>) -> Result<Self> {
        check_dim(self.dim(), f.nrows())?;
        self.f_inv = spd_inverse(&f)?;
        self.f = f;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.f.nrows()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.f_inv
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// `max |F F^-1 - I|` measured at the most recent recompute.
    pub fn last_recompute_deviation(&self) -> Option<f64> {
        self.last_recompute_deviation
    }

    /// `max |F F^-1 - I|` now. Costs a full matrix product.
    pub fn inverse_deviation(&self) -> f64 {
        identity_deviation(&self.f, &self.f_inv)
    }

    /// Folds one gradient into the estimator.
    ///
    /// Draws `dim` standard normals from `rng` when the noise std is
    /// positive, then applies `F <- alpha F + g g^T` and the matching
    /// rank-one inverse update. Every `recompute_period` updates the inverse
    /// is rebuilt from `F` directly.
    pub fn update<R: Rng + ?Sized>(&mut self, g: &Gradient, rng: &mut R) -> Result<()> {
        let d = self.dim();
        check_dim(d, g.len())?;
        let mut noisy = DVector::from_column_slice(g.as_slice());
        if self.noise_std > 0.0 {
            for v in noisy.iter_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *v += self.noise_std * n;
            }
        }
        if self.frozen {
            return Ok(());
        }
        let alpha = self.alpha;
        let v = &self.f_inv * &noisy;
        let denom = alpha * alpha + alpha * noisy.dot(&v);
        if !(denom > 0.0) {
            return Err(FisherError::NotPositiveDefinite(denom));
        }
        self.f.ger(1.0, &noisy, &noisy, alpha);
        self.f_inv.ger(-1.0 / denom, &v, &v, 1.0 / alpha);
        self.updates += 1;
        if self.recompute_period > 0 && self.updates.is_multiple_of(self.recompute_period) {
            self.recompute()?;
        }
        Ok(())
    }

    /// Rebuilds `F^-1` from `F` and records `max |F F^-1 - I|`.
    ///
    /// A large deviation here reflects the conditioning of `F` itself, so it
    /// is recorded rather than raised; see [`FisherState::check_inverse`].
    pub fn recompute(&mut self) -> Result<()> {
        self.f_inv = spd_inverse(&self.f)
            .map_err(|_| FisherError::NotPositiveDefinite(f64::NAN))?;
        let dev = identity_deviation(&self.f, &self.f_inv);
        self.last_recompute_deviation = Some(dev);
        self.worst_recompute_deviation = Some(self.worst_recompute_deviation.map_or(dev, |w| w.max(dev)));
        Ok(())
    }

    /// Largest deviation seen over all recomputes so far.
    pub fn worst_recompute_deviation(&self) -> Option<f64> {
        self.worst_recompute_deviation
    }

    /// Fails when the most recent recompute missed the identity tolerance.
    pub fn check_inverse(&self) -> Result<()> {
        match self.last_recompute_deviation {
            Some(dev) if !(dev < RECOMPUTE_TOLERANCE) => Err(FisherError::InverseDrift(dev)),
            _ => Ok(()),
        }
    }

    /// `g^T F^-1 g`, with tiny negative values clamped to zero.
    pub fn quadratic_form(&self, g: &[f64]) -> Result<f64> {
        check_dim(self.dim(), g.len())?;
        let gv = DVector::from_column_slice(g);
        let q = gv.dot(&(&self.f_inv * &gv));
        clamp_radicand(q)
    }
}

fn clamp_radicand(q: f64) -> Result<f64> {
    if q < -RADICAND_TOLERANCE || q.is_nan() {
        return Err(FisherError::NegativeRadicand(q));
    }
    Ok(q.max(0.0))
}

/// `beta * sqrt(g^T F^-1 g)`.
pub fn bonus(state: &FisherState, g: &Gradient, beta: f64) -> Result<f64> {
    Ok(beta * state.quadratic_form(g.as_slice())?.sqrt())
}

/// Quadratic forms and `F^-1 g` for a batch of gradients stored as the
/// columns of `grads` (`d x N`), using one matrix product.
pub fn batch_quadratic_forms(
    state: &FisherState,
    grads: &DMatrix<f64>,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    check_dim(state.dim(), grads.nrows())?;
    let solved = state.inverse() * grads;
    let forms = (0..grads.ncols())
        .map(|j| clamp_radicand(grads.column(j).dot(&solved.column(j))))
        .collect::<Result<Vec<_>>>()?;
    Ok((forms, solved))
}
