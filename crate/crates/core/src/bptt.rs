//! Backpropagation through time over a recorded [`ForwardTrace`].
//!
//! For a LIF layer, walking t = T..1:
//!
//! ```text
//! dS(t) = spatial(t) + [full reset] dU(t+1) * (-tau * U(t))
//! dU(t) = dS(t) * h(U(t)) + dU(t+1) * tau * (1 - G(t))
//! dW   += dU(t)^T x(t)
//! dtau += sum dU(t) * U(t-1) * (1 - G(t-1))
//! ```
//!
//! `G` is the gate applied by the reset. Thresholds and widths are constants.

use crate::error::{Result, SnnError};
use crate::layers::{self, LayerKind};
use crate::model::{readout_input_mean, ForwardTrace, Network, StepRecord};
use crate::neuron::surrogate_grad;
use crate::tensor::{matmul, matmul_tn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BpttOptions {
    /// Treat the reset gate as a constant in the backward pass.
    pub detach_reset: bool,
    /// Adaptive thresholds from membrane statistics.
    pub use_at: bool,
    /// Threshold-driven surrogate widths.
    pub use_tgo: bool,
    /// Drops `tau` from the temporal Jacobian. Only for negative-control tests.
    #[doc(hidden)]
    pub jacobian_fault: bool,
}

impl Default for BpttOptions {
    fn default() -> Self {
        BpttOptions {
            detach_reset: true,
            use_at: true,
            use_tgo: true,
            jacobian_fault: false,
        }
    }
}

impl BpttOptions {
    pub fn new(detach_reset: bool, use_at: bool, use_tgo: bool) -> Result<Self> {
        let o = BpttOptions {
            detach_reset,
            use_at,
            use_tgo,
            jacobian_fault: false,
        };
        o.validate()?;
        Ok(o)
    }

    /// Fixed threshold and fixed surrogate width.
    pub fn vanilla() -> Self {
        BpttOptions {
            use_at: false,
            use_tgo: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_tgo && !self.use_at {
            return Err(SnnError::Config(
                "threshold-driven widths need adaptive thresholds (use_tgo requires use_at)".into(),
            ));
        }
        Ok(())
    }
}

/// Gradients of the loss w.r.t. every parameter, plus `dL/dU` per (layer, t).
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub weights: Vec<Option<Tensor>>,
    pub tau: Vec<Option<f64>>,
    /// `d_potential[layer][t]`, present for LIF layers.
    pub d_potential: Vec<Vec<Option<Tensor>>>,
}

impl GradientBundle {
    /// Gradients in the order of [`Network::params_mut`].
    pub fn flat(&self, tau_learnable: bool) -> Vec<Tensor> {
        let mut out = Vec::new();
        for (w, tau) in self.weights.iter().zip(&self.tau) {
            if let Some(w) = w {
                out.push(w.clone());
            }
            if let (true, Some(t)) = (tau_learnable, tau) {
                out.push(Tensor::scalar(*t));
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        let w = self.weights.iter().flatten().map(Tensor::max_abs).fold(0.0, f64::max);
        self.tau.iter().flatten().map(|t| t.abs()).fold(w, f64::max)
    }
}

/// Reverse sweep through a trace given `dL/dlogits`.
pub fn backward(net: &Network, trace: &ForwardTrace, d_logits: &Tensor, opts: &BpttOptions) -> Result<GradientBundle> {
    opts.validate()?;
    let n_layers = net.num_layers();
    let big_t = trace.timesteps;
    if trace.num_layers() != n_layers || big_t != net.timesteps() {
        return Err(SnnError::Contract("trace was not produced by this network".into()));
    }
    if d_logits.shape() != [trace.batch, net.classes()] {
        return Err(SnnError::Shape(format!(
            "dL/dlogits {:?} vs batch {} and {} classes",
            d_logits.shape(),
            trace.batch,
            net.classes()
        )));
    }
    d_logits.check_finite("dL/dlogits")?;

    let specs = net.specs();
    let out = n_layers - 1;
    let mut weights: Vec<Option<Tensor>> = vec![None; n_layers];
    let mut tau: Vec<Option<f64>> = vec![None; n_layers];
    let mut d_potential: Vec<Vec<Option<Tensor>>> = vec![vec![None; big_t]; n_layers];

    // Readout: logits = mean_t(x) W^T
    let w_out = net.weight(out).expect("readout weights");
    weights[out] = Some(matmul_tn(d_logits, &readout_input_mean(trace))?);
    let d_x = matmul(d_logits, w_out)?.scale(1.0 / big_t as f64);
    // Gradient arriving at the output of layer `l` for every t.
    let mut upstream: Vec<Tensor> = vec![d_x; big_t];

    for l in (0..out).rev() {
        let spec = &specs[l];
        match spec.kind {
            LayerKind::Flatten { .. } => {}
            LayerKind::AvgPool { .. } => {
                for d in upstream.iter_mut() {
                    *d = layers::pool_backward(spec, d);
                }
            }
            LayerKind::Affine { .. } | LayerKind::Conv2d { .. } => {
                let lif = net.lif(l).expect("hidden weighted layers carry LIF neurons");
                let tau_l = lif.tau();
                let temporal = if opts.jacobian_fault { 1.0 } else { tau_l };
                let mut d_tau = 0.0;
                let mut d_u: Vec<Tensor> = Vec::with_capacity(big_t);
                let mut next: Option<Tensor> = None;
                for t in (0..big_t).rev() {
                    let step = match &trace.steps[l][t] {
                        StepRecord::Lif(s) => s,
                        _ => return Err(SnnError::Contract(format!("layer {l} has no LIF record at {t}"))),
                    };
                    let mut d_s = std::mem::replace(&mut upstream[t], Tensor::scalar(0.0));
                    if let (false, Some(n)) = (opts.detach_reset, &next) {
                        for ((ds, &dn), &u) in d_s.data_mut().iter_mut().zip(n.data()).zip(step.potential.data()) {
                            *ds -= dn * tau_l * u;
                        }
                    }
                    let h = surrogate_grad(&step.potential, step.threshold, step.width)?;
                    let mut du = d_s.zip_map(&h, |a, b| a * b)?;
                    if let Some(n) = &next {
                        for ((d, &dn), &g) in du.data_mut().iter_mut().zip(n.data()).zip(step.gate().data()) {
                            *d += dn * temporal * (1.0 - g);
                        }
                    }
                    du.check_finite(&format!("dL/dU of layer {l} at timestep {t}"))?;
                    if t > 0 {
                        if let StepRecord::Lif(prev) = &trace.steps[l][t - 1] {
                            d_tau += du
                                .data()
                                .iter()
                                .zip(prev.potential.data())
                                .zip(prev.gate().data())
                                .map(|((&d, &u), &g)| d * u * (1.0 - g))
                                .sum::<f64>();
                        }
                    }
                    next = Some(du.clone());
                    d_u.push(du);
                }
                d_u.reverse();

                let w = net.weight(l).expect("weights");
                if l == 0 {
                    // Time-invariant input: accumulate dI over t first.
                    let mut sum = d_u[0].clone();
                    for d in &d_u[1..] {
                        sum.add_assign(d)?;
                    }
                    weights[l] = Some(layers::weighted_backward_weights(spec, &sum, &trace.input)?);
                } else {
                    let dy = stack_rows(&d_u)?;
                    let xs: Vec<&Tensor> = (0..big_t).map(|t| trace.layer_input(l, t)).collect();
                    let x = stack_rows_ref(&xs)?;
                    weights[l] = Some(layers::weighted_backward_weights(spec, &dy, &x)?);
                    let dx = layers::weighted_backward_input(spec, w, &dy)?;
                    upstream = split_rows(&dx, big_t)?;
                }
                weights[l]
                    .as_ref()
                    .expect("just set")
                    .check_finite(&format!("weight gradient of layer {l}"))?;
                if !d_tau.is_finite() {
                    return Err(SnnError::NonFinite(format!("tau gradient of layer {l}")));
                }
                tau[l] = Some(d_tau);
                for (t, d) in d_u.into_iter().enumerate() {
                    d_potential[l][t] = Some(d);
                }
            }
        }
    }

    Ok(GradientBundle {
        weights,
        tau,
        d_potential,
    })
}

fn stack_rows(parts: &[Tensor]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = parts.iter().collect();
    stack_rows_ref(&refs)
}

/// Concatenates `[B × F]` blocks along the batch axis.
fn stack_rows_ref(parts: &[&Tensor]) -> Result<Tensor> {
    let (b, f) = parts[0].rows_cols();
    let mut data = Vec::with_capacity(parts.len() * b * f);
    for p in parts {
        if p.shape() != [b, f] {
            return Err(SnnError::Shape(format!("cannot stack {:?} onto [{b}, {f}]", p.shape())));
        }
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![parts.len() * b, f], data)
}

fn split_rows(x: &Tensor, parts: usize) -> Result<Vec<Tensor>> {
    let (rows, f) = x.rows_cols();
    let b = rows / parts;
    x.data()
        .chunks(b * f)
        .map(|c| Tensor::new(vec![b, f], c.to_vec()))
        .collect()
}
