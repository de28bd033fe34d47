//! Firing rates, gradient-available proportions, operation-count energy
//! estimates and their CSV export.
//!
//! CSV schema (stable): `run_id,seed,layer,timestep,metric,value`. `layer`
//! and `timestep` are empty for network-level values; `value` uses the
//! shortest representation that parses back to the same `f64`.

use std::path::Path;

use crate::error::{Result, SnnError};
use crate::model::{ForwardTrace, Network};

/// Energy of one accumulate, in joules.
pub const AC_JOULES: f64 = 0.9e-12;
/// Energy of one multiply-accumulate, in joules.
pub const MAC_JOULES: f64 = 4.6e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSeries {
    pub layer: usize,
    pub per_timestep: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiringReport {
    pub layers: Vec<LayerSeries>,
    /// Spikes over all (neuron, timestep) slots of every LIF layer.
    pub network_mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradAvailableReport {
    pub layers: Vec<LayerSeries>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerEnergy {
    pub layer: usize,
    pub ac: f64,
    pub mac: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyReport {
    pub layers: Vec<LayerEnergy>,
    pub total_ac: f64,
    pub total_mac: f64,
    pub joules: f64,
}

/// Running sums over several traces of the same network.
#[derive(Clone, Debug, Default)]
pub struct TraceAccumulator {
    layers: Vec<usize>,
    spikes: Vec<Vec<f64>>,
    in_band: Vec<Vec<f64>>,
    slots: Vec<Vec<f64>>,
}

impl TraceAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, trace: &ForwardTrace) -> Result<()> {
        let layers = trace.lif_layers();
        if self.layers.is_empty() && self.slots.is_empty() {
            let z = vec![vec![0.0; trace.timesteps]; layers.len()];
            self.layers = layers.clone();
            self.spikes = z.clone();
            self.in_band = z.clone();
            self.slots = z;
        } else if layers != self.layers || self.slots.first().is_some_and(|s| s.len() != trace.timesteps) {
            return Err(SnnError::Contract("accumulated traces come from different networks".into()));
        }
        for (i, &l) in layers.iter().enumerate() {
            for t in 0..trace.timesteps {
                let s = trace.lif(l, t).expect("lif step");
                let half = s.width / 2.0;
                self.spikes[i][t] += s.spikes.sum();
                self.in_band[i][t] += s
                    .potential
                    .data()
                    .iter()
                    .filter(|&&u| (u - s.threshold).abs() <= half)
                    .count() as f64;
                self.slots[i][t] += s.potential.len() as f64;
            }
        }
        Ok(())
    }

    fn series(&self, num: &[Vec<f64>]) -> Vec<LayerSeries> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, &layer)| {
                let per_timestep: Vec<f64> = num[i]
                    .iter()
                    .zip(&self.slots[i])
                    .map(|(&n, &d)| if d > 0.0 { n / d } else { 0.0 })
                    .collect();
                let mean = per_timestep.iter().sum::<f64>() / per_timestep.len().max(1) as f64;
                LayerSeries {
                    layer,
                    per_timestep,
                    mean,
                }
            })
            .collect()
    }

    pub fn firing(&self) -> FiringReport {
        let total: f64 = self.slots.iter().flatten().sum();
        let spikes: f64 = self.spikes.iter().flatten().sum();
        FiringReport {
            layers: self.series(&self.spikes),
            network_mean: if total > 0.0 { spikes / total } else { 0.0 },
        }
    }

    pub fn grad_available(&self) -> GradAvailableReport {
        GradAvailableReport {
            layers: self.series(&self.in_band),
        }
    }
}

/// `rate(l, t)` = mean of `S^l(t)` over batch × neurons.
pub fn firing_rates(trace: &ForwardTrace) -> FiringReport {
    let mut acc = TraceAccumulator::new();
    acc.add(trace).expect("single trace");
    acc.firing()
}

/// Share of potentials with `|U - th| <= k/2`, per layer and timestep.
pub fn grad_available(trace: &ForwardTrace) -> GradAvailableReport {
    let mut acc = TraceAccumulator::new();
    acc.add(trace).expect("single trace");
    acc.grad_available()
}

/// Operation counts from a trace's firing rates.
pub fn energy_estimate(trace: &ForwardTrace, net: &Network) -> EnergyReport {
    energy_from_rates(net, &firing_rates(trace))
}

/// Encoding and readout layers are charged `T · OP` MACs; every other
/// weighted layer is charged `FR · T · OP` ACs, where `FR` is the mean rate
/// of the nearest spiking layer below it.
pub fn energy_from_rates(net: &Network, firing: &FiringReport) -> EnergyReport {
    let big_t = net.timesteps() as f64;
    let specs = net.specs();
    let last = specs.len() - 1;
    let rate_of = |l: usize| firing.layers.iter().find(|s| s.layer == l).map_or(0.0, |s| s.mean);
    let mut layers = Vec::new();
    for (l, spec) in specs.iter().enumerate() {
        if !spec.is_weighted() {
            continue;
        }
        let op = spec.ann_ops() as f64;
        let (ac, mac) = if l == 0 || l == last {
            (0.0, big_t * op)
        } else {
            let pre = (0..l).rev().find(|&p| specs[p].followed_by_lif);
            (pre.map_or(0.0, rate_of) * big_t * op, 0.0)
        };
        layers.push(LayerEnergy { layer: l, ac, mac });
    }
    let total_ac: f64 = layers.iter().map(|e| e.ac).sum();
    let total_mac: f64 = layers.iter().map(|e| e.mac).sum();
    EnergyReport {
        layers,
        total_ac,
        total_mac,
        joules: AC_JOULES * total_ac + MAC_JOULES * total_mac,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub run_id: String,
    pub seed: u64,
    pub layer: Option<usize>,
    pub timestep: Option<usize>,
    pub metric: String,
    pub value: f64,
}

fn row(run_id: &str, seed: u64, layer: Option<usize>, timestep: Option<usize>, metric: &str, value: f64) -> MetricRow {
    MetricRow {
        run_id: run_id.to_string(),
        seed,
        layer,
        timestep,
        metric: metric.to_string(),
        value,
    }
}

fn series_rows(out: &mut Vec<MetricRow>, layers: &[LayerSeries], run_id: &str, seed: u64, metric: &str) {
    for s in layers {
        for (t, &v) in s.per_timestep.iter().enumerate() {
            out.push(row(run_id, seed, Some(s.layer), Some(t), metric, v));
        }
        out.push(row(run_id, seed, Some(s.layer), None, &format!("{metric}_mean"), s.mean));
    }
}

impl FiringReport {
    pub fn rows(&self, run_id: &str, seed: u64) -> Vec<MetricRow> {
        let mut out = Vec::new();
        series_rows(&mut out, &self.layers, run_id, seed, "firing_rate");
        out.push(row(run_id, seed, None, None, "firing_rate_mean", self.network_mean));
        out
    }
}

impl GradAvailableReport {
    pub fn rows(&self, run_id: &str, seed: u64) -> Vec<MetricRow> {
        let mut out = Vec::new();
        series_rows(&mut out, &self.layers, run_id, seed, "grad_available");
        out
    }
}

impl EnergyReport {
    pub fn rows(&self, run_id: &str, seed: u64) -> Vec<MetricRow> {
        let mut out = Vec::new();
        for e in &self.layers {
            out.push(row(run_id, seed, Some(e.layer), None, "ac_ops", e.ac));
            out.push(row(run_id, seed, Some(e.layer), None, "mac_ops", e.mac));
        }
        out.push(row(run_id, seed, None, None, "ac_ops", self.total_ac));
        out.push(row(run_id, seed, None, None, "mac_ops", self.total_mac));
        out.push(row(run_id, seed, None, None, "energy_joules", self.joules));
        out
    }
}

pub const CSV_HEADER: [&str; 6] = ["run_id", "seed", "layer", "timestep", "metric", "value"];

pub fn export_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(CSV_HEADER).map_err(|e| csv_io(path, e))?;
    let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.run_id.clone(),
            r.seed.to_string(),
            opt(r.layer),
            opt(r.timestep),
            r.metric.clone(),
            r.value.to_string(),
        ])
        .map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| SnnError::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let bad = |offset: u64, msg: String| SnnError::Parse {
        path: path.to_path_buf(),
        offset,
        msg,
    };
    let header = r.headers().map_err(|e| csv_io(path, e))?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(bad(0, format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_io(path, e))?;
        let at = rec.position().map_or(0, |p| p.byte());
        let opt = |s: &str| -> Result<Option<usize>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(at, format!("bad index `{s}`")))
            }
        };
        rows.push(MetricRow {
            run_id: rec[0].to_string(),
            seed: rec[1].parse().map_err(|_| bad(at, format!("bad seed `{}`", &rec[1])))?,
            layer: opt(&rec[2])?,
            timestep: opt(&rec[3])?,
            metric: rec[4].to_string(),
            value: rec[5].parse().map_err(|_| bad(at, format!("bad value `{}`", &rec[5])))?,
        });
    }
    Ok(rows)
}

fn csv_io(path: &Path, e: csv::Error) -> SnnError {
    let offset = e.position().map_or(0, |p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => SnnError::io(path, io),
        other => SnnError::Parse {
            path: path.to_path_buf(),
            offset,
            msg: format!("{other:?}"),
        },
    }
}
