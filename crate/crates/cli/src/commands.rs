use std::path::{Path, PathBuf};

use lifnet::analysis::{sigma_sweep, sweep_rows};
use lifnet::blob::{Blob, Block};
use lifnet::checkpoint;
use lifnet::data::{load_csv, load_idx, synth_gaussian};
use lifnet::gradcheck::{relaxed_gradient_check, GradCheckSettings};
use lifnet::metrics::{energy_from_rates, export_csv, MetricRow, TraceAccumulator};
use lifnet::train::{evaluate, evaluate_with};
use lifnet::{BpttOptions, Dataset, Network, SgdState, SyntheticGaussianSpec, TrainRun};
use serde_json::{json, Value};

use crate::config::{self, RunConfig};
use crate::error::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const GRADCHECK_LIMIT: f64 = 1e-4;

fn mkdir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Training and test splits named by the config.
pub fn datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset), CliError> {
    let (train, test) = match cfg.dataset.as_str() {
        "mnist" => {
            let d = &cfg.data_dir;
            (
                load_idx(&d.join("train-images-idx3-ubyte"), &d.join("train-labels-idx1-ubyte"))?,
                load_idx(&d.join("t10k-images-idx3-ubyte"), &d.join("t10k-labels-idx1-ubyte"))?,
            )
        }
        "synthetic" => {
            // one draw so both splits share the separating hyperplane
            let all = synth_gaussian(&SyntheticGaussianSpec {
                mu: cfg.synthetic_mu,
                sigma: cfg.synthetic_sigma,
                dims: vec![cfg.input_features()],
                n: 2 * cfg.synthetic_n,
                seed: cfg.seed,
            })?;
            let n = cfg.synthetic_n;
            let split = |idx: Vec<usize>| -> Result<Dataset, CliError> {
                let (x, y) = all.gather(&idx);
                Ok(Dataset::new(x, y, all.classes())?)
            };
            (split((0..n).collect())?, split((n..2 * n).collect())?)
        }
        _ => (load_csv(&cfg.train_path)?, load_csv(&cfg.test_path)?),
    };
    let mut problems = Vec::new();
    if train.features() != cfg.input_features() {
        problems.push(format!(
            "dataset has {} features but input_shape {:?} gives {}",
            train.features(),
            cfg.input_shape,
            cfg.input_features()
        ));
    }
    if train.classes().max(test.classes()) > cfg.classes {
        problems.push(format!(
            "dataset has {} classes but classes = {}",
            train.classes().max(test.classes()),
            cfg.classes
        ));
    }
    if problems.is_empty() {
        Ok((train, test))
    } else {
        Err(CliError::Validation(problems))
    }
}

pub fn build_network(cfg: &RunConfig) -> Result<Network, CliError> {
    let specs = cfg.layer_specs().map_err(|e| CliError::Validation(vec![e]))?;
    Ok(Network::new(specs, cfg.timesteps, cfg.neuron_config(), cfg.seed)?)
}

/// Network state plus the effective config and its hash.
pub fn checkpoint_blob(net: &Network, cfg: &RunConfig) -> Blob {
    let mut b = checkpoint::to_blob(net);
    b.push("config.toml", Block::Bytes(cfg.to_toml().into_bytes()));
    b.push("config.sha256", Block::Bytes(cfg.hash().into_bytes()));
    b.push("version", Block::Bytes(VERSION.as_bytes().to_vec()));
    b
}

pub fn read_checkpoint(path: &Path) -> Result<(Network, RunConfig), CliError> {
    let blob = Blob::read(path)?;
    let text = String::from_utf8(blob.bytes("config.toml")?.to_vec())
        .map_err(|_| CliError::Validation(vec![format!("{}: embedded config is not UTF-8", path.display())]))?;
    Ok((checkpoint::from_blob(&blob)?, config::from_toml(&text)?))
}

fn epoch_id(cfg: &RunConfig, epoch: usize) -> String {
    format!("{}:epoch={epoch}", cfg.run_id)
}

fn scalar(id: &str, seed: u64, metric: &str, value: f64) -> MetricRow {
    MetricRow {
        run_id: id.to_string(),
        seed,
        layer: None,
        timestep: None,
        metric: metric.to_string(),
        value,
    }
}

pub fn train(cfg: &RunConfig) -> Result<Value, CliError> {
    let (train_ds, test_ds) = datasets(cfg)?;
    let net = build_network(cfg)?;
    let sgd = SgdState::new(cfg.lr, cfg.momentum, cfg.weight_decay)?;
    let mut run = TrainRun::new(net, sgd, cfg.train_options(), cfg.epochs, cfg.seed)?;
    let dir = cfg.run_dir();
    mkdir(&dir)?;
    write(&dir.join("config.toml"), &cfg.to_toml())?;

    let mut rows = Vec::new();
    let mut history = Vec::new();
    let bptt = cfg.bptt();
    for _ in 0..cfg.epochs {
        let mut acc = TraceAccumulator::new();
        let m = run.run_epoch(&train_ds, &mut |b| acc.add(b.trace))?;
        let test = evaluate(&run.net, &test_ds, cfg.eval_batch_size, &bptt)?;
        let id = epoch_id(cfg, m.epoch);
        rows.push(scalar(&id, cfg.seed, "learning_rate", m.learning_rate));
        rows.push(scalar(&id, cfg.seed, "train_loss", m.loss));
        rows.push(scalar(&id, cfg.seed, "train_accuracy", m.accuracy));
        rows.push(scalar(&id, cfg.seed, "test_loss", test.loss));
        rows.push(scalar(&id, cfg.seed, "test_accuracy", test.accuracy));
        rows.extend(acc.firing().rows(&id, cfg.seed));
        rows.extend(acc.grad_available().rows(&id, cfg.seed));
        eprintln!(
            "epoch {:>3}  lr {:.5}  loss {:.4}  train {:.4}  test {:.4}",
            m.epoch, m.learning_rate, m.loss, m.accuracy, test.accuracy
        );
        history.push(json!({
            "epoch": m.epoch,
            "learning_rate": m.learning_rate,
            "train_loss": m.loss,
            "train_accuracy": m.accuracy,
            "test_loss": test.loss,
            "test_accuracy": test.accuracy,
        }));
    }

    let metrics_path = dir.join("metrics.csv");
    let ckpt_path = dir.join("checkpoint.bin");
    export_csv(&rows, &metrics_path)?;
    checkpoint_blob(&run.net, cfg).write(&ckpt_path)?;
    let last = run.history.last();
    let summary = json!({
        "command": "train",
        "version": VERSION,
        "run_id": cfg.run_id,
        "seed": cfg.seed,
        "config_sha256": cfg.hash(),
        "architecture": run.net.architecture(),
        "parameters": run.net.num_parameters(),
        "epochs": cfg.epochs,
        "final_train_loss": last.map(|m| m.loss),
        "final_train_accuracy": last.map(|m| m.accuracy),
        "final_test_accuracy": history.last().map(|h| h["test_accuracy"].clone()),
        "history": history,
        "artifacts": {
            "checkpoint": ckpt_path,
            "metrics": metrics_path,
            "config": dir.join("config.toml"),
        },
    });
    write(&dir.join("summary.json"), &serde_json::to_string_pretty(&summary).expect("json"))?;
    Ok(summary)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Infer-mode pass with the stored running thresholds.
pub fn eval(ckpt: &Path, override_cfg: Option<RunConfig>, split: Split) -> Result<Value, CliError> {
    let (net, stored) = read_checkpoint(ckpt)?;
    let cfg = match override_cfg {
        Some(c) => {
            let specs = c.layer_specs().map_err(|e| CliError::Validation(vec![e]))?;
            if specs != net.specs() || c.timesteps != net.timesteps() {
                return Err(CliError::Validation(vec![format!(
                    "config describes {} with T={} but checkpoint holds {} with T={}",
                    Network::zeroed(specs, c.timesteps.max(1), c.neuron_config())
                        .map(|n| n.architecture())
                        .unwrap_or_else(|_| "an invalid network".into()),
                    c.timesteps,
                    net.architecture(),
                    net.timesteps()
                )]));
            }
            c
        }
        None => stored,
    };
    let (train_ds, test_ds) = datasets(&cfg)?;
    let ds = match split {
        Split::Train => train_ds,
        Split::Test => test_ds,
    };
    let mut acc = TraceAccumulator::new();
    let res = evaluate_with(&net, &ds, cfg.eval_batch_size, &cfg.bptt(), cfg.label_smoothing, &mut |t, _, _| {
        acc.add(t)
    })?;
    let firing = acc.firing();
    let energy = energy_from_rates(&net, &firing);
    let id = format!("{}:eval", cfg.run_id);
    let mut rows = vec![
        scalar(&id, cfg.seed, "loss", res.loss),
        scalar(&id, cfg.seed, "accuracy", res.accuracy),
    ];
    rows.extend(firing.rows(&id, cfg.seed));
    rows.extend(acc.grad_available().rows(&id, cfg.seed));
    rows.extend(energy.rows(&id, cfg.seed));
    let dir = cfg.run_dir();
    mkdir(&dir)?;
    let csv_path = dir.join("eval.csv");
    export_csv(&rows, &csv_path)?;
    Ok(json!({
        "command": "eval",
        "version": VERSION,
        "run_id": cfg.run_id,
        "config_sha256": cfg.hash(),
        "split": if split == Split::Train { "train" } else { "test" },
        "samples": res.samples,
        "accuracy": res.accuracy,
        "loss": res.loss,
        "firing_rate": firing.network_mean,
        "firing_rate_per_layer": firing.layers.iter().map(|l| l.mean).collect::<Vec<_>>(),
        "energy": { "ac_ops": energy.total_ac, "mac_ops": energy.total_mac, "joules": energy.joules },
        "report": csv_path,
    }))
}

pub struct GradCheckOutcome {
    pub summary: Value,
    pub worst: f64,
}

/// Runs every `detach_reset × tgo` combination the config allows.
pub fn gradcheck(cfg: &RunConfig) -> Result<GradCheckOutcome, CliError> {
    let net = build_network(cfg)?;
    let (train_ds, _) = datasets(cfg)?;
    let probe = train_ds.head(cfg.gradcheck_batch);
    let settings = GradCheckSettings {
        epsilon: cfg.gradcheck_epsilon,
        label_smoothing: cfg.label_smoothing,
        ..GradCheckSettings::default()
    };
    let use_at = cfg.at_mode != "off";
    let tgo_options: &[bool] = if use_at { &[false, true] } else { &[false] };
    let mut worst: f64 = 0.0;
    let mut results = Vec::new();
    for detach in [true, false] {
        for &tgo in tgo_options {
            let opts = BpttOptions {
                detach_reset: detach,
                use_at,
                use_tgo: tgo,
                jacobian_fault: cfg.jacobian_fault,
            };
            let r = relaxed_gradient_check(&net, probe.samples(), probe.labels(), &opts, settings)?;
            eprintln!(
                "detach_reset={detach:<5} tgo={tgo:<5} max_rel_error={:.3e} checked={} excluded={}",
                r.max_rel_error, r.checked, r.excluded
            );
            worst = worst.max(r.max_rel_error);
            results.push(json!({
                "detach_reset": detach,
                "tgo": tgo,
                "max_rel_error": r.max_rel_error,
                "checked": r.checked,
                "excluded": r.excluded,
                "worst_parameter": r.worst,
            }));
        }
    }
    Ok(GradCheckOutcome {
        summary: json!({
            "command": "gradcheck",
            "version": VERSION,
            "config_sha256": cfg.hash(),
            "parameters": net.num_parameters(),
            "limit": GRADCHECK_LIMIT,
            "max_rel_error": worst,
            "passed": worst < GRADCHECK_LIMIT,
            "combinations": results,
        }),
        worst,
    })
}

pub fn analyze(cfg: &RunConfig) -> Result<Value, CliError> {
    let points = sigma_sweep(&cfg.drive(), &cfg.sigmas, &cfg.regime_list())?;
    let dir = cfg.run_dir();
    mkdir(&dir)?;
    let path: PathBuf = dir.join("analysis.csv");
    export_csv(&sweep_rows(&points, &cfg.run_id, cfg.seed), &path)?;
    let curves: Vec<Value> = points
        .iter()
        .map(|p| {
            json!({
                "regime": p.regime.name(),
                "sigma": p.sigma,
                "firing_rate": p.firing.layers.iter().map(|l| l.mean).collect::<Vec<_>>(),
                "grad_available": p.grad_available.layers.iter().map(|l| l.mean).collect::<Vec<_>>(),
            })
        })
        .collect();
    Ok(json!({
        "command": "analyze",
        "version": VERSION,
        "config_sha256": cfg.hash(),
        "drive_mu": cfg.drive_mu,
        "curves": curves,
        "report": path,
    }))
}
