//! Layer stacks of affine/conv synapses and LIF neurons, the T-step forward
//! pass, the time-averaged readout and the label-smoothed loss.

use crate::bptt::BpttOptions;
use crate::error::{Result, SnnError};
use crate::layers::{self, LayerKind, LayerSpec};
use crate::neuron::{
    adaptive_threshold_estimated, adaptive_threshold_true, clamp_tau, fire, integrate_unchecked, ramp, LifParams,
    SurrogateConfig, ThresholdMode, ThresholdState, THRESHOLD_FLOOR,
};
use crate::rng::{stream, Rng};
use crate::tensor::{matmul_nt, Tensor};

/// Neuron and threshold hyperparameters shared by every LIF layer of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronConfig {
    pub lif: LifParams,
    pub threshold_mode: ThresholdMode,
    pub f_c: f64,
    pub momentum_m: f64,
    pub kappa: f64,
    /// Estimated-mode thresholds follow the learned `tau` (otherwise the initial one).
    pub estimated_tracks_tau: bool,
}

impl Default for NeuronConfig {
    fn default() -> Self {
        NeuronConfig {
            lif: LifParams::default(),
            threshold_mode: ThresholdMode::True,
            f_c: 1.0,
            momentum_m: 0.1,
            kappa: 1.0,
            estimated_tracks_tau: true,
        }
    }
}

/// State of one LIF population.
#[derive(Clone, Debug, PartialEq)]
pub struct LifLayer {
    /// Single-element tensor so it can be handed to the optimizer.
    pub tau: Tensor,
    pub thresholds: ThresholdState,
    pub surrogate: SurrogateConfig,
}

impl LifLayer {
    pub fn tau(&self) -> f64 {
        self.tau.data()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    specs: Vec<LayerSpec>,
    weights: Vec<Option<Tensor>>,
    lif: Vec<Option<LifLayer>>,
    timesteps: usize,
    config: NeuronConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch thresholds; running thresholds are updated.
    Train,
    /// Stored running thresholds; nothing is mutated.
    Infer,
}

impl Network {
    /// Builds a network with Kaiming fan-in normal weights drawn from `seed`.
    pub fn new(specs: Vec<LayerSpec>, timesteps: usize, config: NeuronConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeroed(specs, timesteps, config)?;
        let mut rng = Rng::stream(seed, stream::INIT);
        for (spec, w) in net.specs.iter().zip(net.weights.iter_mut()) {
            if let Some(w) = w {
                let std = (2.0 / spec.fan_in() as f64).sqrt();
                *w = rng.normal_tensor(w.shape(), 0.0, std);
            }
        }
        Ok(net)
    }

    /// Same architecture with every weight set to zero.
    pub fn zeroed(specs: Vec<LayerSpec>, timesteps: usize, config: NeuronConfig) -> Result<Self> {
        validate_specs(&specs)?;
        if timesteps == 0 {
            return Err(SnnError::Config("timesteps must be at least 1".into()));
        }
        config.lif.validate()?;
        let weights = specs.iter().map(|s| s.weight_shape().map(|sh| Tensor::zeros(&sh))).collect();
        let lif = specs
            .iter()
            .map(|s| {
                s.followed_by_lif
                    .then(|| -> Result<LifLayer> {
                        Ok(LifLayer {
                            tau: Tensor::scalar(config.lif.tau),
                            thresholds: ThresholdState::new(
                                config.threshold_mode,
                                config.f_c,
                                config.momentum_m,
                                timesteps,
                                config.lif.v_th_init,
                            )?,
                            surrogate: SurrogateConfig::new(config.kappa, timesteps)?,
                        })
                    })
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Network {
            specs,
            weights,
            lif,
            timesteps,
            config,
        })
    }

    /// Fully connected stack `sizes[0] → … → sizes[n-1]`; the last layer is the readout.
    pub fn mlp(sizes: &[usize], timesteps: usize, config: NeuronConfig, seed: u64) -> Result<Self> {
        Self::new(mlp_specs(sizes)?, timesteps, config, seed)
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn num_layers(&self) -> usize {
        self.specs.len()
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn config(&self) -> &NeuronConfig {
        &self.config
    }

    pub fn input_features(&self) -> usize {
        self.specs[0].in_features()
    }

    pub fn classes(&self) -> usize {
        self.specs.last().map_or(0, |s| s.out_features())
    }

    pub fn weight(&self, layer: usize) -> Option<&Tensor> {
        self.weights.get(layer).and_then(Option::as_ref)
    }

    pub fn set_weight(&mut self, layer: usize, w: Tensor) -> Result<()> {
        let slot = self
            .weights
            .get_mut(layer)
            .and_then(Option::as_mut)
            .ok_or_else(|| SnnError::Config(format!("layer {layer} has no weights")))?;
        slot.expect_same_shape(&w, &format!("weights of layer {layer}"))?;
        w.check_finite(&format!("weights of layer {layer}"))?;
        *slot = w;
        Ok(())
    }

    pub fn lif(&self, layer: usize) -> Option<&LifLayer> {
        self.lif.get(layer).and_then(Option::as_ref)
    }

    pub fn lif_mut(&mut self, layer: usize) -> Option<&mut LifLayer> {
        self.lif.get_mut(layer).and_then(Option::as_mut)
    }

    /// Indices of layers followed by LIF neurons.
    pub fn lif_layers(&self) -> Vec<usize> {
        (0..self.specs.len()).filter(|&l| self.lif[l].is_some()).collect()
    }

    pub fn set_tau(&mut self, layer: usize, tau: f64) -> Result<()> {
        let lif = self
            .lif_mut(layer)
            .ok_or_else(|| SnnError::Config(format!("layer {layer} has no LIF neurons")))?;
        lif.tau.data_mut()[0] = clamp_tau(tau);
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        let w: usize = self.weights.iter().flatten().map(Tensor::len).sum();
        let taus = if self.config.lif.tau_learnable {
            self.lif_layers().len()
        } else {
            0
        };
        w + taus
    }

    /// Trainable parameters with stable names, in the order gradients are reported.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let learn_tau = self.config.lif.tau_learnable;
        let mut out = Vec::new();
        for (l, (w, lif)) in self.weights.iter_mut().zip(self.lif.iter_mut()).enumerate() {
            if let Some(w) = w {
                out.push((format!("layer{l}.weight"), w));
            }
            if let (true, Some(lif)) = (learn_tau, lif) {
                out.push((format!("layer{l}.tau"), &mut lif.tau));
            }
        }
        out
    }

    /// Pulls every `tau` back into its admissible range after an update.
    pub fn clamp_taus(&mut self) {
        for lif in self.lif.iter_mut().flatten() {
            let t = &mut lif.tau.data_mut()[0];
            *t = clamp_tau(*t);
        }
    }

    /// One-line architecture signature used to detect checkpoint mismatches.
    pub fn architecture(&self) -> String {
        let parts: Vec<String> = self
            .specs
            .iter()
            .map(|s| {
                let lif = if s.followed_by_lif { "+lif" } else { "" };
                match s.kind {
                    LayerKind::Affine { fan_in, fan_out } => format!("fc{fan_in}x{fan_out}{lif}"),
                    LayerKind::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        height,
                        width,
                    } => format!("conv{in_channels}x{out_channels}k{kernel}@{height}x{width}{lif}"),
                    LayerKind::AvgPool {
                        channels,
                        height,
                        width,
                        size,
                    } => format!("pool{size}@{channels}x{height}x{width}"),
                    LayerKind::Flatten { features } => format!("flatten{features}"),
                }
            })
            .collect();
        format!("T{}:{}", self.timesteps, parts.join("-"))
    }

    /// Applies the running-threshold update for every (layer, timestep) of a training trace.
    pub(crate) fn absorb_batch_statistics(&mut self, trace: &ForwardTrace, opts: &BpttOptions) -> Result<()> {
        for l in self.lif_layers() {
            let lif = self.lif[l].as_mut().expect("lif layer");
            for t in 0..self.timesteps {
                let step = trace.lif(l, t).expect("lif step");
                if opts.use_at {
                    lif.thresholds.observe(t, step.threshold)?;
                } else {
                    lif.thresholds.batch_thresholds.data_mut()[t] = step.threshold;
                }
                lif.surrogate.effective_widths.data_mut()[t] = step.width;
            }
        }
        Ok(())
    }
}

fn mlp_specs(sizes: &[usize]) -> Result<Vec<LayerSpec>> {
    if sizes.len() < 2 {
        return Err(SnnError::Config("an MLP needs at least an input and an output size".into()));
    }
    let n = sizes.len() - 1;
    Ok((0..n)
        .map(|i| LayerSpec::affine(sizes[i], sizes[i + 1], i + 1 < n))
        .collect())
}

/// `16C3-pool-32C3-pool-FC` over `channels×height×width` inputs.
pub fn small_conv_specs(channels: usize, height: usize, width: usize, classes: usize) -> Vec<LayerSpec> {
    let (h2, w2) = (height / 2, width / 2);
    let (h4, w4) = (h2 / 2, w2 / 2);
    vec![
        LayerSpec::conv(channels, 16, 3, height, width),
        LayerSpec::avg_pool(16, height, width, 2),
        LayerSpec::conv(16, 32, 3, h2, w2),
        LayerSpec::avg_pool(32, h2, w2, 2),
        LayerSpec::flatten(32 * h4 * w4),
        LayerSpec::affine(32 * h4 * w4, classes, false),
    ]
}

pub fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    let Some(last) = specs.last() else {
        return Err(SnnError::Config("network has no layers".into()));
    };
    if !matches!(last.kind, LayerKind::Affine { .. }) || last.followed_by_lif {
        return Err(SnnError::Config(
            "the last layer must be an affine readout without LIF neurons".into(),
        ));
    }
    for (l, s) in specs.iter().enumerate() {
        s.validate()?;
        let last = l + 1 == specs.len();
        if s.is_weighted() && !last && !s.followed_by_lif {
            return Err(SnnError::Config(format!(
                "layer {l}: only the readout layer may omit LIF neurons"
            )));
        }
        if !s.is_weighted() && s.followed_by_lif {
            return Err(SnnError::Config(format!(
                "layer {l}: pooling/flatten layers cannot carry LIF neurons"
            )));
        }
        if let Some(next) = specs.get(l + 1) {
            if s.out_features() != next.in_features() {
                return Err(SnnError::Config(format!(
                    "layer {l} emits {} features but layer {} expects {}",
                    s.out_features(),
                    l + 1,
                    next.in_features()
                )));
            }
        }
    }
    Ok(())
}

/// Everything one LIF layer did at one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct LifStep {
    pub current: Tensor,
    pub potential: Tensor,
    pub spikes: Tensor,
    /// Gate used by the reset when it differs from `spikes` (relaxed forward with detached reset).
    pub reset_gate: Option<Tensor>,
    pub threshold: f64,
    pub width: f64,
}

impl LifStep {
    pub fn gate(&self) -> &Tensor {
        self.reset_gate.as_ref().unwrap_or(&self.spikes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StepRecord {
    Lif(LifStep),
    Pool(Tensor),
    Flatten,
    /// The readout layer; its contribution is folded into the logits.
    Readout,
}

/// State retained from a forward pass for backpropagation and diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub timesteps: usize,
    pub batch: usize,
    pub input: Tensor,
    /// `steps[layer][t]`.
    pub steps: Vec<Vec<StepRecord>>,
}

impl ForwardTrace {
    pub fn num_layers(&self) -> usize {
        self.steps.len()
    }

    pub fn lif(&self, layer: usize, t: usize) -> Option<&LifStep> {
        match self.steps.get(layer)?.get(t)? {
            StepRecord::Lif(s) => Some(s),
            _ => None,
        }
    }

    pub fn lif_layers(&self) -> Vec<usize> {
        (0..self.steps.len())
            .filter(|&l| matches!(self.steps[l].first(), Some(StepRecord::Lif(_))))
            .collect()
    }

    /// Activation entering `layer` at timestep `t`.
    pub fn layer_input(&self, layer: usize, t: usize) -> &Tensor {
        if layer == 0 {
            return &self.input;
        }
        self.layer_output(layer - 1, t)
    }

    /// Activation leaving a hidden `layer` at timestep `t`.
    pub fn layer_output(&self, layer: usize, t: usize) -> &Tensor {
        match &self.steps[layer][t] {
            StepRecord::Lif(s) => &s.spikes,
            StepRecord::Pool(p) => p,
            StepRecord::Flatten => self.layer_input(layer, t),
            StepRecord::Readout => panic!("the readout layer has no per-timestep output"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum SpikeFn {
    Heaviside,
    /// Piecewise-linear ramp used by the relaxed gradient check.
    Ramp,
}

/// Where thresholds and surrogate widths come from during a forward pass.
pub(crate) enum Stats<'a> {
    Batch,
    Running,
    /// `(threshold, width)` per `[layer][t]`, replayed verbatim.
    Frozen(&'a [Vec<(f64, f64)>]),
}

/// T-step forward pass. In [`Mode::Train`] the batch thresholds are folded
/// into the network's running averages.
pub fn forward_sequence(
    net: &mut Network,
    input: &Tensor,
    mode: Mode,
    opts: &BpttOptions,
) -> Result<(ForwardTrace, Tensor)> {
    match mode {
        Mode::Train => {
            let out = run_forward(net, input, opts, Stats::Batch, SpikeFn::Heaviside)?;
            net.absorb_batch_statistics(&out.0, opts)?;
            Ok(out)
        }
        Mode::Infer => infer(net, input, opts),
    }
}

/// Inference-mode forward pass over a shared network.
pub fn infer(net: &Network, input: &Tensor, opts: &BpttOptions) -> Result<(ForwardTrace, Tensor)> {
    run_forward(net, input, opts, Stats::Running, SpikeFn::Heaviside)
}

pub(crate) fn run_forward(
    net: &Network,
    input: &Tensor,
    opts: &BpttOptions,
    stats: Stats<'_>,
    spike_fn: SpikeFn,
) -> Result<(ForwardTrace, Tensor)> {
    opts.validate()?;
    if input.shape().len() != 2 || input.shape()[1] != net.input_features() {
        return Err(SnnError::Shape(format!(
            "input {:?} does not match {} input features",
            input.shape(),
            net.input_features()
        )));
    }
    input.check_finite("network input")?;
    let batch = input.shape()[0];
    let big_t = net.timesteps;
    let n_layers = net.specs.len();
    let cfg = &net.config;

    // Direct encoding: the first layer sees the same analog input every timestep.
    let static_current = match net.weight(0) {
        Some(w) if n_layers > 1 => Some(layers::weighted_forward(&net.specs[0], w, input)?),
        _ => None,
    };

    let mut steps: Vec<Vec<StepRecord>> = (0..n_layers).map(|_| Vec::with_capacity(big_t)).collect();
    for t in 0..big_t {
        for l in 0..n_layers {
            let spec = &net.specs[l];
            if l + 1 == n_layers {
                steps[l].push(StepRecord::Readout);
                continue;
            }
            let record = match spec.kind {
                LayerKind::Flatten { .. } => StepRecord::Flatten,
                LayerKind::AvgPool { .. } => {
                    let x = layer_input(&steps, input, l, t);
                    StepRecord::Pool(layers::pool_forward(spec, x))
                }
                LayerKind::Affine { .. } | LayerKind::Conv2d { .. } => {
                    let current = match (&static_current, l) {
                        (Some(c), 0) => c.clone(),
                        _ => {
                            let x = layer_input(&steps, input, l, t);
                            layers::weighted_forward(spec, net.weights[l].as_ref().expect("weights"), x)?
                        }
                    };
                    let lif = net.lif[l].as_ref().expect("hidden weighted layers carry LIF neurons");
                    let tau = lif.tau();
                    let potential = match t {
                        0 => current.clone(),
                        _ => {
                            let prev = match &steps[l][t - 1] {
                                StepRecord::Lif(s) => s,
                                _ => unreachable!(),
                            };
                            integrate_unchecked(&current, &prev.potential, prev.gate(), tau)
                        }
                    };
                    potential.check_finite(&format!("membrane potential of layer {l} at timestep {t}"))?;

                    let (threshold, width) = match &stats {
                        Stats::Frozen(f) => f[l][t],
                        _ if !opts.use_at => (cfg.lif.v_th_init, cfg.kappa),
                        Stats::Batch => {
                            let raw = match cfg.threshold_mode {
                                ThresholdMode::Estimated => {
                                    let tau_used = if cfg.estimated_tracks_tau { tau } else { cfg.lif.tau };
                                    adaptive_threshold_estimated(tau_used, cfg.lif.v_th_init, cfg.f_c)
                                }
                                ThresholdMode::True => adaptive_threshold_true(&potential, cfg.f_c).map_err(|e| {
                                    SnnError::DegenerateStats(format!("layer {l} timestep {t}: {e}"))
                                })?,
                            };
                            let th = raw.max(THRESHOLD_FLOOR);
                            (th, lif.surrogate.width_for(th, cfg.lif.v_th_init, opts.use_tgo)?)
                        }
                        Stats::Running => {
                            let th = lif.thresholds.running_thresholds.data()[t];
                            (th, lif.surrogate.width_for(th, cfg.lif.v_th_init, opts.use_tgo)?)
                        }
                    };

                    let (spikes, reset_gate) = match spike_fn {
                        SpikeFn::Heaviside => (fire(&potential, threshold), None),
                        SpikeFn::Ramp if opts.detach_reset => {
                            (ramp(&potential, threshold, width), Some(fire(&potential, threshold)))
                        }
                        SpikeFn::Ramp => (ramp(&potential, threshold, width), None),
                    };
                    StepRecord::Lif(LifStep {
                        current,
                        potential,
                        spikes,
                        reset_gate,
                        threshold,
                        width,
                    })
                }
            };
            steps[l].push(record);
        }
    }

    let trace = ForwardTrace {
        timesteps: big_t,
        batch,
        input: input.clone(),
        steps,
    };
    let out_w = net.weights[n_layers - 1].as_ref().expect("readout weights");
    let logits = output_readout(&trace, out_w)?;
    Ok((trace, logits))
}

fn layer_input<'a>(steps: &'a [Vec<StepRecord>], input: &'a Tensor, layer: usize, t: usize) -> &'a Tensor {
    if layer == 0 {
        return input;
    }
    match &steps[layer - 1][t] {
        StepRecord::Lif(s) => &s.spikes,
        StepRecord::Pool(p) => p,
        StepRecord::Flatten => layer_input(steps, input, layer - 1, t),
        StepRecord::Readout => unreachable!(),
    }
}

/// Time-averaged input of the readout layer, `(1/T) Σ_t x_out(t)`.
pub(crate) fn readout_input_mean(trace: &ForwardTrace) -> Tensor {
    let last = trace.num_layers() - 1;
    let mut acc = trace.layer_input(last, 0).clone();
    for t in 1..trace.timesteps {
        acc.add_assign(trace.layer_input(last, t)).expect("consistent shapes");
    }
    acc.scale(1.0 / trace.timesteps as f64)
}

/// Leak-free, non-firing readout: `logits = (1/T) Σ_t W · x_out(t)`.
pub fn output_readout(trace: &ForwardTrace, output_weights: &Tensor) -> Result<Tensor> {
    let logits = matmul_nt(&readout_input_mean(trace), output_weights)?;
    logits.check_finite("logits")?;
    Ok(logits)
}

/// Softmax cross-entropy against `(1 - s)·onehot + s/C`, averaged over the batch.
/// Returns the loss and `dL/dlogits`.
pub fn cross_entropy_ls(logits: &Tensor, labels: &[usize], smoothing: f64) -> Result<(f64, Tensor)> {
    if logits.shape().len() != 2 || logits.shape()[0] != labels.len() {
        return Err(SnnError::Shape(format!(
            "logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(SnnError::Config(format!("label smoothing must lie in [0, 1), got {smoothing}")));
    }
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(SnnError::Contract(format!("label {bad} out of range for {c} classes")));
    }
    let mut grad = vec![0.0; b * c];
    let mut loss = 0.0;
    let off = smoothing / c as f64;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let (arg, max) = row
            .iter()
            .cloned()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |a, (j, z)| if z > a.1 { (j, z) } else { a });
        // the max term contributes exactly 1; ln_1p keeps tiny tails accurate
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != arg)
            .map(|(_, z)| (z - max).exp())
            .sum();
        let log_z_rel = rest.ln_1p();
        for j in 0..c {
            let log_p = (row[j] - max) - log_z_rel;
            let q = off + if j == y { 1.0 - smoothing } else { 0.0 };
            loss -= q * log_p;
            let d = if q > 0.5 { log_p.exp_m1() + (1.0 - q) } else { log_p.exp() - q };
            grad[i * c + j] = d / b as f64;
        }
    }
    Ok((loss / b as f64, Tensor::new(vec![b, c], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuron::ThresholdMode;

    fn vanilla() -> BpttOptions {
        BpttOptions::vanilla()
    }

    #[test]
    fn spec_validation() {
        assert!(Network::mlp(&[4], 2, NeuronConfig::default(), 0).is_err());
        let bad = vec![LayerSpec::affine(3, 4, true), LayerSpec::affine(5, 2, false)];
        assert!(Network::new(bad, 2, NeuronConfig::default(), 0).is_err());
        let lif_last = vec![LayerSpec::affine(3, 2, true)];
        assert!(Network::new(lif_last, 2, NeuronConfig::default(), 0).is_err());
        let missing_lif = vec![LayerSpec::affine(3, 4, false), LayerSpec::affine(4, 2, false)];
        assert!(Network::new(missing_lif, 2, NeuronConfig::default(), 0).is_err());
        assert!(Network::mlp(&[3, 4, 2], 0, NeuronConfig::default(), 0).is_err());
        let conv = small_conv_specs(1, 28, 28, 10);
        assert!(validate_specs(&conv).is_ok());
    }

    #[test]
    fn zero_input_zero_net() {
        let mut net = Network::zeroed(mlp_specs(&[4, 5, 3]).unwrap(), 3, NeuronConfig::default()).unwrap();
        let x = Tensor::zeros(&[2, 4]);
        let (trace, logits) = forward_sequence(&mut net, &x, Mode::Train, &vanilla()).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        for t in 0..3 {
            assert!(trace.lif(0, t).unwrap().spikes.data().iter().all(|&s| s == 0.0));
        }
    }

    #[test]
    fn causality_across_horizons() {
        let cfg = NeuronConfig::default();
        let net1 = Network::mlp(&[3, 6, 2], 1, cfg.clone(), 4).unwrap();
        let net2 = Network::mlp(&[3, 6, 2], 2, cfg, 4).unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.5, 1.0, -0.3, 2.0, 0.1, 0.7]).unwrap();
        let opts = BpttOptions::default();
        let (t1, _) = infer(&net1, &x, &opts).unwrap();
        let (t2, _) = infer(&net2, &x, &opts).unwrap();
        assert_eq!(t1.lif(0, 0), t2.lif(0, 0));
    }

    #[test]
    fn two_neuron_hand_unroll() {
        // layer 0: 1 input -> 2 LIF neurons (w = [1.2, 0.6]), readout 2 -> 1 (w = [1, 1])
        let mut net = Network::zeroed(mlp_specs(&[1, 2, 1]).unwrap(), 2, NeuronConfig::default()).unwrap();
        net.set_weight(0, Tensor::new(vec![2, 1], vec![1.2, 0.6]).unwrap()).unwrap();
        net.set_weight(1, Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap()).unwrap();
        let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let (trace, logits) = forward_sequence(&mut net, &x, Mode::Train, &vanilla()).unwrap();
        // t=1: U = [1.2, 0.6] -> S = [1, 0]
        // t=2: U = 0.2*[1.2, 0.6]*(1-[1,0]) + [1.2, 0.6] = [1.2, 0.72] -> S = [1, 0]
        let s0 = trace.lif(0, 0).unwrap();
        assert_eq!(s0.potential.data(), &[1.2, 0.6]);
        assert_eq!(s0.spikes.data(), &[1.0, 0.0]);
        let s1 = trace.lif(0, 1).unwrap();
        assert!((s1.potential.data()[0] - 1.2).abs() < 1e-15);
        assert!((s1.potential.data()[1] - 0.72).abs() < 1e-15);
        assert_eq!(s1.spikes.data(), &[1.0, 0.0]);
        assert_eq!(logits.data(), &[1.0]);
    }

    #[test]
    fn readout_examples() {
        // spike trains into identity readout: neuron 0 fires [1,0], neuron 1 fires [1,1]
        let mut trace = ForwardTrace {
            timesteps: 2,
            batch: 1,
            input: Tensor::zeros(&[1, 2]),
            steps: vec![vec![], vec![StepRecord::Readout, StepRecord::Readout]],
        };
        let step = |s: [f64; 2]| {
            StepRecord::Lif(LifStep {
                current: Tensor::zeros(&[1, 2]),
                potential: Tensor::zeros(&[1, 2]),
                spikes: Tensor::new(vec![1, 2], s.to_vec()).unwrap(),
                reset_gate: None,
                threshold: 1.0,
                width: 1.0,
            })
        };
        trace.steps[0] = vec![step([1.0, 1.0]), step([0.0, 1.0])];
        let logits = output_readout(&trace, &Tensor::identity(2)).unwrap();
        assert_eq!(logits.data(), &[0.5, 1.0]);

        trace.steps[0] = vec![step([2.0, 2.0]), step([0.0, 2.0])];
        assert_eq!(output_readout(&trace, &Tensor::identity(2)).unwrap().data(), &[1.0, 2.0]);

        trace.steps[0] = vec![step([0.0, 0.0]), step([0.0, 0.0])];
        assert_eq!(output_readout(&trace, &Tensor::identity(2)).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let (loss, _) = cross_entropy_ls(&Tensor::zeros(&[1, 5]), &[2], 0.0).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-15);
        let logits = Tensor::from_rows(&[&[10.0, -10.0]]);
        let (loss, g) = cross_entropy_ls(&logits, &[0], 0.0).unwrap();
        let p1 = (-20f64).exp() / (1.0 + (-20f64).exp());
        assert!((loss - (-20f64).exp().ln_1p()).abs() < 1e-12 * loss);
        assert!((loss - 2.06e-9).abs() < 0.01e-9);
        assert!((g.data()[0] + p1).abs() < 1e-12 * p1 && (g.data()[1] - p1).abs() < 1e-12 * p1);
        assert!(cross_entropy_ls(&logits, &[2], 0.0).is_err());
        assert!(cross_entropy_ls(&logits, &[0], 1.0).is_err());
    }

    #[test]
    fn cross_entropy_matches_finite_differences() {
        let mut rng = Rng::new(21);
        let logits = rng.normal_tensor(&[3, 4], 0.0, 2.0);
        let labels = [1, 3, 0];
        let s = 0.1;
        let (_, g) = cross_entropy_ls(&logits, &labels, s).unwrap();
        let eps = 1e-5;
        for i in 0..logits.len() {
            let mut hi = logits.clone();
            hi.data_mut()[i] += eps;
            let mut lo = logits.clone();
            lo.data_mut()[i] -= eps;
            let fd = (cross_entropy_ls(&hi, &labels, s).unwrap().0 - cross_entropy_ls(&lo, &labels, s).unwrap().0)
                / (2.0 * eps);
            let a = g.data()[i];
            assert!((fd - a).abs() <= 1e-6 * a.abs().max(1e-3), "{i}: {fd} vs {a}");
        }
        for r in 0..3 {
            let row_sum: f64 = g.row(r).iter().sum();
            assert!(row_sum.abs() < 1e-15);
        }
    }

    #[test]
    fn inference_is_read_only_and_repeatable() {
        let mut net = Network::mlp(&[5, 8, 8, 3], 3, NeuronConfig::default(), 1).unwrap();
        let x = Rng::new(2).normal_tensor(&[4, 5], 0.0, 1.0);
        let opts = BpttOptions::default();
        forward_sequence(&mut net, &x, Mode::Train, &opts).unwrap();
        let snapshot = net.clone();
        let a = forward_sequence(&mut net, &x, Mode::Infer, &opts).unwrap();
        let b = forward_sequence(&mut net, &x, Mode::Infer, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(net, snapshot);
    }

    #[test]
    fn unit_momentum_makes_running_equal_batch() {
        let cfg = NeuronConfig {
            momentum_m: 1.0,
            ..NeuronConfig::default()
        };
        let mut net = Network::mlp(&[5, 8, 8, 3], 3, cfg, 1).unwrap();
        let x = Rng::new(2).normal_tensor(&[6, 5], 0.0, 1.0);
        let opts = BpttOptions::default();
        let (train, _) = forward_sequence(&mut net, &x, Mode::Train, &opts).unwrap();
        let (inf, _) = forward_sequence(&mut net, &x, Mode::Infer, &opts).unwrap();
        for l in train.lif_layers() {
            for t in 0..3 {
                assert_eq!(train.lif(l, t).unwrap().spikes, inf.lif(l, t).unwrap().spikes);
            }
        }
    }

    #[test]
    fn permuting_batch_permutes_trace() {
        let net = Network::mlp(&[4, 7, 3], 2, NeuronConfig::default(), 9).unwrap();
        let x = Rng::new(3).normal_tensor(&[5, 4], 0.0, 1.5);
        let perm = [3usize, 0, 4, 1, 2];
        let mut xp = Tensor::zeros(&[5, 4]);
        for (i, &p) in perm.iter().enumerate() {
            xp.data_mut()[i * 4..(i + 1) * 4].copy_from_slice(x.row(p));
        }
        let opts = BpttOptions::default();
        let (a, _) = run_forward(&net, &x, &opts, Stats::Batch, SpikeFn::Heaviside).unwrap();
        let (b, _) = run_forward(&net, &xp, &opts, Stats::Batch, SpikeFn::Heaviside).unwrap();
        for t in 0..2 {
            let (sa, sb) = (a.lif(0, t).unwrap(), b.lif(0, t).unwrap());
            assert!((sa.threshold - sb.threshold).abs() < 1e-12);
            for (i, &p) in perm.iter().enumerate() {
                assert_eq!(sb.spikes.row(i), sa.spikes.row(p));
            }
        }
    }

    #[test]
    fn estimated_mode_threshold_and_infer_uses_running() {
        let cfg = NeuronConfig {
            threshold_mode: ThresholdMode::Estimated,
            ..NeuronConfig::default()
        };
        let mut net = Network::mlp(&[3, 4, 2], 2, cfg, 0).unwrap();
        let x = Tensor::full(&[2, 3], 0.5);
        let (trace, _) = forward_sequence(&mut net, &x, Mode::Train, &BpttOptions::default()).unwrap();
        let want = 1.04f64.sqrt();
        assert!((trace.lif(0, 0).unwrap().threshold - want).abs() < 1e-15);
        let running = net.lif(0).unwrap().thresholds.running_thresholds.data()[0];
        assert!((running - (0.1 * want + 0.9)).abs() < 1e-15);
        let (inf, _) = infer(&net, &x, &BpttOptions::default()).unwrap();
        assert_eq!(inf.lif(0, 0).unwrap().threshold, running);
    }

    #[test]
    fn fixed_threshold_without_at() {
        let mut net = Network::mlp(&[3, 4, 2], 2, NeuronConfig::default(), 0).unwrap();
        let x = Rng::new(1).normal_tensor(&[3, 3], 0.0, 1.0);
        let (trace, _) = forward_sequence(&mut net, &x, Mode::Train, &vanilla()).unwrap();
        assert_eq!(trace.lif(0, 1).unwrap().threshold, 1.0);
        assert_eq!(trace.lif(0, 1).unwrap().width, 1.0);
        assert_eq!(net.lif(0).unwrap().thresholds.running_thresholds.data(), &[1.0, 1.0]);
    }

    #[test]
    fn conv_preset_runs() {
        let specs = small_conv_specs(1, 8, 8, 3);
        let mut net = Network::new(specs, 2, NeuronConfig::default(), 0).unwrap();
        let x = Rng::new(0).normal_tensor(&[2, 64], 0.0, 1.0);
        let (trace, logits) = forward_sequence(&mut net, &x, Mode::Train, &BpttOptions::default()).unwrap();
        assert_eq!(logits.shape(), &[2, 3]);
        assert_eq!(trace.lif_layers(), vec![0, 2]);
    }

    #[test]
    fn tau_is_clamped() {
        let mut net = Network::mlp(&[2, 2, 2], 1, NeuronConfig::default(), 0).unwrap();
        net.set_tau(0, 1.7).unwrap();
        assert_eq!(net.lif(0).unwrap().tau(), crate::neuron::TAU_MAX);
        assert!(net.set_tau(1, 0.5).is_err());
    }
}
