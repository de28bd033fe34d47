//! Finite-difference check of [`backward`](crate::bptt::backward) on a relaxed twin.
//!
//! The twin replaces the spike step with the ramp `clip((U - th)/k + 1/2, 0, 1)`,
//! whose derivative is the rectangular surrogate. Thresholds and widths are
//! taken from one unperturbed pass and replayed, so they stay constants as
//! the backward pass assumes. Parameters whose perturbation moves any
//! potential across a ramp kink (or across the threshold of a detached reset
//! gate) are skipped and counted.

use crate::bptt::{backward, BpttOptions};
use crate::error::{Result, SnnError};
use crate::model::{cross_entropy_ls, run_forward, ForwardTrace, Network, SpikeFn, Stats};
use crate::tensor::Tensor;

pub const MAX_PARAMETERS: usize = 1000;
pub const MAX_BATCH: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: usize,
    /// Parameter element with the largest error, e.g. `layer1.weight[7]`.
    pub worst: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckSettings {
    pub epsilon: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub label_smoothing: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            epsilon: 1e-5,
            floor: 1e-6,
            label_smoothing: 0.1,
        }
    }
}

/// Max relative error between analytic and central-difference gradients.
pub fn relaxed_gradient_check(
    net: &Network,
    input: &Tensor,
    labels: &[usize],
    opts: &BpttOptions,
    settings: GradCheckSettings,
) -> Result<GradCheckReport> {
    opts.validate()?;
    if net.num_parameters() > MAX_PARAMETERS {
        return Err(SnnError::Contract(format!(
            "gradient check is limited to {MAX_PARAMETERS} parameters, network has {}",
            net.num_parameters()
        )));
    }
    if input.shape().first().copied().unwrap_or(0) > MAX_BATCH {
        return Err(SnnError::Contract(format!("gradient check batch is limited to {MAX_BATCH}")));
    }
    let eps = settings.epsilon;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(SnnError::Config(format!("epsilon must be positive, got {eps}")));
    }

    let (base, logits) = run_forward(net, input, opts, Stats::Batch, SpikeFn::Ramp)?;
    let frozen = frozen_stats(&base);
    let (_, d_logits) = cross_entropy_ls(&logits, labels, settings.label_smoothing)?;
    let grads = backward(net, &base, &d_logits, opts)?.flat(net.config().lif.tau_learnable);
    let base_sig = signature(&base, opts);

    let loss_at = |perturbed: &Network| -> Result<(f64, Vec<u8>)> {
        let (trace, logits) = run_forward(perturbed, input, opts, Stats::Frozen(&frozen), SpikeFn::Ramp)?;
        let (loss, _) = cross_entropy_ls(&logits, labels, settings.label_smoothing)?;
        Ok((loss, signature(&trace, opts)))
    };
    let perturb = |p: usize, i: usize, delta: f64| -> Network {
        let mut twin = net.clone();
        twin.params_mut()[p].1.data_mut()[i] += delta;
        twin
    };

    let names: Vec<String> = net.clone().params_mut().into_iter().map(|(n, _)| n).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        excluded: 0,
        worst: None,
    };
    for (p, g) in grads.iter().enumerate() {
        for i in 0..g.len() {
            let (plus, sig_p) = loss_at(&perturb(p, i, eps))?;
            let (minus, sig_m) = loss_at(&perturb(p, i, -eps))?;
            let (_, sig_pp) = loss_at(&perturb(p, i, 10.0 * eps))?;
            let (_, sig_mm) = loss_at(&perturb(p, i, -10.0 * eps))?;
            if [&sig_p, &sig_m, &sig_pp, &sig_mm].iter().any(|s| **s != base_sig) {
                report.excluded += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = g.data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(settings.floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(format!("{}[{i}]", names[p]));
            }
        }
    }
    Ok(report)
}

fn frozen_stats(trace: &ForwardTrace) -> Vec<Vec<(f64, f64)>> {
    (0..trace.num_layers())
        .map(|l| {
            (0..trace.timesteps)
                .map(|t| trace.lif(l, t).map_or((0.0, 0.0), |s| (s.threshold, s.width)))
                .collect()
        })
        .collect()
}

/// Piecewise region of every potential: below/inside/above the ramp, plus the hard gate.
fn signature(trace: &ForwardTrace, opts: &BpttOptions) -> Vec<u8> {
    let mut sig = Vec::new();
    for l in trace.lif_layers() {
        for t in 0..trace.timesteps {
            let s = trace.lif(l, t).expect("lif step");
            let half = s.width / 2.0;
            for &u in s.potential.data() {
                let region = if u < s.threshold - half {
                    0
                } else if u <= s.threshold + half {
                    1
                } else {
                    2
                };
                let gate = u8::from(opts.detach_reset && u >= s.threshold);
                sig.push(region * 2 + gate);
            }
        }
    }
    sig
}
