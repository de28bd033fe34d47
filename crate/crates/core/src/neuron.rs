//! Single-timestep LIF mechanics, adaptive firing thresholds and
//! threshold-driven surrogate-gradient widths.
//!
//! ```text
//! U(t) = tau * U(t-1) * (1 - S(t-1)) + I(t)        hard reset
//! S(t) = [U(t) >= th]
//! h(U) = 1/k  if |U - th| <= k/2, else 0            rectangular surrogate
//!
//! th_estimated = f_c * sqrt(1 + tau^2) * v_th
//! th_true      = f_c * (mean(U(t)) + std(U(t)))     pooled over batch and neurons
//! running      = m * th_batch + (1 - m) * running
//!
//! k(th) = (1 - tanh(v_th - th)) * kappa   th <  v_th
//!       = (1 + tanh(th - v_th)) * kappa   th >= v_th
//! ```

use crate::error::{Result, SnnError};
use crate::rng::Rng;
use crate::tensor::{mean_std, Tensor};

/// Smallest threshold the adaptive rule may produce. A layer whose potentials
/// are mostly negative can yield `mean + std <= 0`; thresholds stay positive.
pub const THRESHOLD_FLOOR: f64 = 1e-3;

/// Bounds `tau` is clamped to after every optimizer step.
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifParams {
    pub tau: f64,
    pub v_th_init: f64,
    pub tau_learnable: bool,
}

impl Default for LifParams {
    fn default() -> Self {
        LifParams {
            tau: 0.2,
            v_th_init: 1.0,
            tau_learnable: false,
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(SnnError::Config(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if !(self.v_th_init > 0.0 && self.v_th_init.is_finite()) {
            return Err(SnnError::Config(format!(
                "v_th_init must be positive, got {}",
                self.v_th_init
            )));
        }
        Ok(())
    }
}

pub fn clamp_tau(tau: f64) -> f64 {
    tau.clamp(TAU_MIN, TAU_MAX)
}

/// How the per-timestep batch threshold is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThresholdMode {
    /// Closed form from the layer's `tau`, assuming Gaussian inputs scaled to `v_th`.
    Estimated,
    /// Mean plus standard deviation of the observed membrane potentials.
    True,
}

/// Adaptive-threshold bookkeeping of one LIF layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdState {
    pub mode: ThresholdMode,
    pub f_c: f64,
    pub momentum_m: f64,
    /// Threshold computed on the most recent training batch, per timestep.
    pub batch_thresholds: Tensor,
    /// Moving average used at inference, per timestep.
    pub running_thresholds: Tensor,
}

impl ThresholdState {
    pub fn new(mode: ThresholdMode, f_c: f64, momentum_m: f64, timesteps: usize, v_th_init: f64) -> Result<Self> {
        if !(f_c > 0.0 && f_c.is_finite()) {
            return Err(SnnError::Config(format!("f_c must be positive, got {f_c}")));
        }
        if !(momentum_m > 0.0 && momentum_m <= 1.0) {
            return Err(SnnError::Config(format!(
                "threshold momentum must lie in (0, 1], got {momentum_m}"
            )));
        }
        Ok(ThresholdState {
            mode,
            f_c,
            momentum_m,
            batch_thresholds: Tensor::full(&[timesteps], v_th_init),
            running_thresholds: Tensor::full(&[timesteps], v_th_init),
        })
    }

    /// Records a training-batch threshold for timestep `t` and folds it into the running average.
    pub fn observe(&mut self, t: usize, batch_th: f64) -> Result<()> {
        if !(batch_th > 0.0 && batch_th.is_finite()) {
            return Err(SnnError::Contract(format!(
                "batch threshold at timestep {t} must be positive and finite, got {batch_th}"
            )));
        }
        self.batch_thresholds.data_mut()[t] = batch_th;
        let r = &mut self.running_thresholds.data_mut()[t];
        *r = update_running_threshold(batch_th, *r, self.momentum_m);
        Ok(())
    }
}

/// Base surrogate width plus the per-timestep widths used on the last training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateConfig {
    pub base_width_kappa: f64,
    pub effective_widths: Tensor,
}

impl SurrogateConfig {
    pub fn new(base_width_kappa: f64, timesteps: usize) -> Result<Self> {
        if !(base_width_kappa > 0.0 && base_width_kappa.is_finite()) {
            return Err(SnnError::Config(format!(
                "surrogate width kappa must be positive, got {base_width_kappa}"
            )));
        }
        Ok(SurrogateConfig {
            base_width_kappa,
            effective_widths: Tensor::full(&[timesteps], base_width_kappa),
        })
    }

    /// Width for a given threshold; `kappa` itself when `tgo` is off.
    pub fn width_for(&self, threshold: f64, v_th_init: f64, tgo: bool) -> Result<f64> {
        if tgo {
            tgo_width(threshold, v_th_init, self.base_width_kappa)
        } else {
            Ok(self.base_width_kappa)
        }
    }
}

/// Membrane update `U = tau * U_prev * (1 - gate) + I`.
///
/// `reset_gate` is normally the previous spike tensor and must be binary.
pub fn integrate(current: &Tensor, u_prev: &Tensor, reset_gate: &Tensor, tau: f64) -> Result<Tensor> {
    current.expect_same_shape(u_prev, "integrate")?;
    current.expect_same_shape(reset_gate, "integrate")?;
    if !reset_gate.is_binary() {
        return Err(SnnError::Contract("previous spikes must be binary".into()));
    }
    Ok(integrate_unchecked(current, u_prev, reset_gate, tau))
}

pub(crate) fn integrate_unchecked(current: &Tensor, u_prev: &Tensor, gate: &Tensor, tau: f64) -> Tensor {
    let mut u = current.clone();
    for ((ui, up), g) in u.data_mut().iter_mut().zip(u_prev.data()).zip(gate.data()) {
        *ui += tau * up * (1.0 - g);
    }
    u
}

/// Heaviside firing: 1 where `U >= threshold`.
pub fn fire(u: &Tensor, threshold: f64) -> Tensor {
    u.map(|v| if v >= threshold { 1.0 } else { 0.0 })
}

/// Continuous stand-in for `fire` whose derivative equals the rectangular
/// surrogate almost everywhere: `clip((U - th)/k + 1/2, 0, 1)`.
pub fn ramp(u: &Tensor, threshold: f64, width_k: f64) -> Tensor {
    u.map(|v| ((v - threshold) / width_k + 0.5).clamp(0.0, 1.0))
}

#[inline]
pub fn surrogate_value(u: f64, threshold: f64, width_k: f64) -> f64 {
    if (u - threshold).abs() <= width_k / 2.0 {
        1.0 / width_k
    } else {
        0.0
    }
}

/// Rectangular surrogate derivative, boundary inclusive.
pub fn surrogate_grad(u: &Tensor, threshold: f64, width_k: f64) -> Result<Tensor> {
    if !(width_k > 0.0 && width_k.is_finite()) {
        return Err(SnnError::Config(format!(
            "surrogate width must be positive, got {width_k}"
        )));
    }
    Ok(u.map(|v| surrogate_value(v, threshold, width_k)))
}

pub fn adaptive_threshold_estimated(tau: f64, v_th_init: f64, f_c: f64) -> f64 {
    f_c * (1.0 + tau * tau).sqrt() * v_th_init
}

/// `f_c * (mean + std)` of the potentials, pooled over all entries. Not floored.
pub fn adaptive_threshold_true(u: &Tensor, f_c: f64) -> Result<f64> {
    if u.len() < 2 {
        return Err(SnnError::DegenerateStats(format!(
            "adaptive threshold needs at least 2 potentials, got {}",
            u.len()
        )));
    }
    let (mean, std) = mean_std(u.data());
    Ok(f_c * (mean + std))
}

pub fn update_running_threshold(batch_th: f64, running_th: f64, m: f64) -> f64 {
    if m >= 1.0 {
        return batch_th;
    }
    running_th + m * (batch_th - running_th)
}

/// Surrogate width driven by how far the adaptive threshold has moved from `v_th_init`.
pub fn tgo_width(delta_v_th: f64, v_th_init: f64, base_k: f64) -> Result<f64> {
    let k = if delta_v_th < v_th_init {
        (1.0 - (v_th_init - delta_v_th).tanh()) * base_k
    } else {
        (1.0 + (delta_v_th - v_th_init).tanh()) * base_k
    };
    if !k.is_finite() {
        return Err(SnnError::NonFinite(format!(
            "surrogate width for threshold {delta_v_th}"
        )));
    }
    if k <= 0.0 {
        // tanh saturates to 1.0 in floating point once the gap exceeds ~19
        return Err(SnnError::Contract(format!(
            "surrogate width underflowed to {k} for threshold {delta_v_th} (v_th {v_th_init})"
        )));
    }
    Ok(k)
}

/// Monte Carlo estimate of `P(U > mu + sigma)` for `U ~ N(mu, sigma^2)`.
pub fn gaussian_tail_check(mu: f64, sigma: f64, n_samples: usize, rng: &mut Rng) -> Result<f64> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(SnnError::Config(format!("sigma must be positive, got {sigma}")));
    }
    if n_samples < 100_000 {
        return Err(SnnError::Config(format!(
            "at least 1e5 samples required, got {n_samples}"
        )));
    }
    let th = mu + sigma;
    let hits = (0..n_samples).filter(|_| rng.normal(mu, sigma) > th).count();
    Ok(hits as f64 / n_samples as f64)
}
