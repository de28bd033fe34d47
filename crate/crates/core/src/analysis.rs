//! Gaussian-drive experiments: how firing rates and gradient-available
//! proportions respond to the spread of the input current.
//!
//! The first layer copies its input into the membrane (identity weights), so
//! the drive of every first-layer neuron is `N(mu, sigma²)`, constant over
//! time. Deeper layers use fixed random weights.

use crate::bptt::BpttOptions;
use crate::error::{Result, SnnError};
use crate::layers::LayerSpec;
use crate::metrics::{FiringReport, GradAvailableReport, MetricRow, TraceAccumulator};
use crate::model::{forward_sequence, Mode, Network, NeuronConfig};
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Regime {
    /// Fixed threshold and fixed surrogate width.
    Fixed,
    /// Adaptive threshold, fixed width.
    At,
    /// Adaptive threshold and threshold-driven width.
    AtTgo,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Fixed, Regime::At, Regime::AtTgo];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Fixed => "fixed",
            Regime::At => "at",
            Regime::AtTgo => "at_tgo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == s)
    }

    pub fn options(self) -> BpttOptions {
        match self {
            Regime::Fixed => BpttOptions::vanilla(),
            Regime::At => BpttOptions {
                use_tgo: false,
                ..BpttOptions::default()
            },
            Regime::AtTgo => BpttOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriveConfig {
    pub mu: f64,
    /// Neurons per layer.
    pub width: usize,
    /// Number of LIF layers.
    pub depth: usize,
    pub batch: usize,
    pub timesteps: usize,
    pub seed: u64,
    pub neuron: NeuronConfig,
}

impl Default for DriveConfig {
    fn default() -> Self {
        DriveConfig {
            mu: 0.45,
            width: 100,
            depth: 2,
            batch: 200,
            timesteps: 4,
            seed: 0,
            neuron: NeuronConfig::default(),
        }
    }
}

/// `depth` LIF layers of `width` neurons; the first has identity weights.
pub fn drive_network(cfg: &DriveConfig) -> Result<Network> {
    if cfg.depth == 0 || cfg.width < 2 || cfg.batch == 0 {
        return Err(SnnError::Config(
            "drive network needs depth >= 1, width >= 2 and a non-empty batch".into(),
        ));
    }
    let mut specs: Vec<LayerSpec> = (0..cfg.depth).map(|_| LayerSpec::affine(cfg.width, cfg.width, true)).collect();
    specs.push(LayerSpec::affine(cfg.width, 2, false));
    let mut net = Network::new(specs, cfg.timesteps, cfg.neuron.clone(), cfg.seed)?;
    net.set_weight(0, Tensor::identity(cfg.width))?;
    Ok(net)
}

pub fn drive_batch(cfg: &DriveConfig, sigma: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(SnnError::Config(format!("sigma must be positive, got {sigma}")));
    }
    Ok(rng.normal_tensor(&[cfg.batch, cfg.width], cfg.mu, sigma))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub regime: Regime,
    pub sigma: f64,
    pub firing: FiringReport,
    pub grad_available: GradAvailableReport,
}

/// Batch-statistics forward of the drive network for each `(regime, sigma)`.
/// Every regime sees the same input draw for a given sigma.
pub fn sigma_sweep(cfg: &DriveConfig, sigmas: &[f64], regimes: &[Regime]) -> Result<Vec<SweepPoint>> {
    let net = drive_network(cfg)?;
    let mut out = Vec::with_capacity(sigmas.len() * regimes.len());
    for (i, &sigma) in sigmas.iter().enumerate() {
        let mut rng = Rng::stream(cfg.seed.wrapping_add(i as u64), stream::ANALYSIS);
        let x = drive_batch(cfg, sigma, &mut rng)?;
        for &regime in regimes {
            let mut probe = net.clone();
            let (trace, _) = forward_sequence(&mut probe, &x, Mode::Train, &regime.options())?;
            let mut acc = TraceAccumulator::new();
            acc.add(&trace)?;
            out.push(SweepPoint {
                regime,
                sigma,
                firing: acc.firing(),
                grad_available: acc.grad_available(),
            });
        }
    }
    Ok(out)
}

/// CSV rows; `run_id` is extended with the regime and sigma of each point.
pub fn sweep_rows(points: &[SweepPoint], run_id: &str, seed: u64) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for p in points {
        let id = format!("{run_id}:{}:sigma={}", p.regime.name(), p.sigma);
        rows.extend(p.firing.rows(&id, seed));
        rows.extend(p.grad_available.rows(&id, seed));
    }
    rows
}
