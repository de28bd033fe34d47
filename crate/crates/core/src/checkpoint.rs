//! Network state as a [`Blob`]: architecture, neuron config, weights, `tau`
//! and the per-timestep thresholds and widths inference depends on.

use std::path::Path;

use crate::blob::{Blob, Block};
use crate::error::{Result, SnnError};
use crate::layers::{LayerKind, LayerSpec};
use crate::model::{Network, NeuronConfig};
use crate::neuron::{LifParams, ThresholdMode};
use crate::tensor::Tensor;

const SPEC_WORDS: usize = 7;

fn encode_spec(s: &LayerSpec) -> [u64; SPEC_WORDS] {
    let lif = s.followed_by_lif as u64;
    let u = |v: usize| v as u64;
    match s.kind {
        LayerKind::Affine { fan_in, fan_out } => [0, u(fan_in), u(fan_out), 0, 0, 0, lif],
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            height,
            width,
        } => [1, u(in_channels), u(out_channels), u(kernel), u(height), u(width), lif],
        LayerKind::AvgPool {
            channels,
            height,
            width,
            size,
        } => [2, u(channels), u(height), u(width), u(size), 0, lif],
        LayerKind::Flatten { features } => [3, u(features), 0, 0, 0, 0, lif],
    }
}

fn decode_spec(w: &[u64]) -> Result<LayerSpec> {
    let d = |i: usize| w[i] as usize;
    let kind = match w[0] {
        0 => LayerKind::Affine {
            fan_in: d(1),
            fan_out: d(2),
        },
        1 => LayerKind::Conv2d {
            in_channels: d(1),
            out_channels: d(2),
            kernel: d(3),
            height: d(4),
            width: d(5),
        },
        2 => LayerKind::AvgPool {
            channels: d(1),
            height: d(2),
            width: d(3),
            size: d(4),
        },
        3 => LayerKind::Flatten { features: d(1) },
        k => return Err(SnnError::Config(format!("unknown layer kind code {k} in checkpoint"))),
    };
    Ok(LayerSpec {
        kind,
        followed_by_lif: w[6] != 0,
    })
}

fn encode_config(c: &NeuronConfig) -> Tensor {
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    let mode = match c.threshold_mode {
        ThresholdMode::Estimated => 0.0,
        ThresholdMode::True => 1.0,
    };
    let v = vec![
        c.lif.tau,
        c.lif.v_th_init,
        flag(c.lif.tau_learnable),
        mode,
        c.f_c,
        c.momentum_m,
        c.kappa,
        flag(c.estimated_tracks_tau),
    ];
    Tensor::new(vec![v.len()], v).expect("length matches shape")
}

fn decode_config(t: &Tensor) -> Result<NeuronConfig> {
    let v = t.data();
    if v.len() != 8 {
        return Err(SnnError::Config(format!("neuron config block has {} entries, expected 8", v.len())));
    }
    Ok(NeuronConfig {
        lif: LifParams {
            tau: v[0],
            v_th_init: v[1],
            tau_learnable: v[2] != 0.0,
        },
        threshold_mode: if v[3] == 0.0 { ThresholdMode::Estimated } else { ThresholdMode::True },
        f_c: v[4],
        momentum_m: v[5],
        kappa: v[6],
        estimated_tracks_tau: v[7] != 0.0,
    })
}

/// Serializes `net` into a fresh blob; callers may push extra blocks.
pub fn to_blob(net: &Network) -> Blob {
    let mut b = Blob::new();
    b.push("net.specs", Block::Indices(net.specs().iter().flat_map(encode_spec).collect()));
    b.push("net.timesteps", Block::Indices(vec![net.timesteps() as u64]));
    b.push("net.neuron", Block::Tensor(encode_config(net.config())));
    for l in 0..net.num_layers() {
        if let Some(w) = net.weight(l) {
            b.push(format!("layer{l}.weight"), Block::Tensor(w.clone()));
        }
        if let Some(lif) = net.lif(l) {
            b.push(format!("layer{l}.tau"), Block::Tensor(lif.tau.clone()));
            b.push(
                format!("layer{l}.running_thresholds"),
                Block::Tensor(lif.thresholds.running_thresholds.clone()),
            );
            b.push(
                format!("layer{l}.batch_thresholds"),
                Block::Tensor(lif.thresholds.batch_thresholds.clone()),
            );
            b.push(
                format!("layer{l}.widths"),
                Block::Tensor(lif.surrogate.effective_widths.clone()),
            );
        }
    }
    b
}

fn same_shape(name: &str, got: &Tensor, want: &Tensor) -> Result<()> {
    if got.shape() != want.shape() {
        return Err(SnnError::Shape(format!(
            "checkpoint block {name} has shape {:?}, network expects {:?}",
            got.shape(),
            want.shape()
        )));
    }
    Ok(())
}

pub fn from_blob(b: &Blob) -> Result<Network> {
    let words = b.indices("net.specs")?;
    if words.is_empty() || words.len() % SPEC_WORDS != 0 {
        return Err(SnnError::Config("malformed layer list in checkpoint".into()));
    }
    let specs = words.chunks(SPEC_WORDS).map(decode_spec).collect::<Result<Vec<_>>>()?;
    let timesteps = match b.indices("net.timesteps")? {
        [t] => *t as usize,
        _ => return Err(SnnError::Config("malformed timestep count in checkpoint".into())),
    };
    let config = decode_config(b.tensor("net.neuron")?)?;
    let mut net = Network::zeroed(specs, timesteps, config)?;
    for l in 0..net.num_layers() {
        if net.weight(l).is_some() {
            net.set_weight(l, b.tensor(&format!("layer{l}.weight"))?.clone())?;
        }
        if let Some(lif) = net.lif_mut(l) {
            let load = |suffix: &str, slot: &mut Tensor| -> Result<()> {
                let name = format!("layer{l}.{suffix}");
                let t = b.tensor(&name)?;
                same_shape(&name, t, slot)?;
                *slot = t.clone();
                Ok(())
            };
            load("tau", &mut lif.tau)?;
            load("running_thresholds", &mut lif.thresholds.running_thresholds)?;
            load("batch_thresholds", &mut lif.thresholds.batch_thresholds)?;
            load("widths", &mut lif.surrogate.effective_widths)?;
        }
    }
    Ok(net)
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    to_blob(net).write(path)
}

pub fn load(path: &Path) -> Result<Network> {
    from_blob(&Blob::read(path)?)
}
