//! Flat TOML run configuration.
//!
//! Precedence, lowest to highest: built-in defaults, the config file, the
//! `LIFNET_METRICS_DIR` environment variable, then `--set key=value` flags.

use std::path::{Path, PathBuf};

use lifnet::analysis::{DriveConfig, Regime};
use lifnet::layers::LayerSpec;
use lifnet::model::small_conv_specs;
use lifnet::train::TrainOptions;
use lifnet::{BpttOptions, LifParams, NeuronConfig, ThresholdMode};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const METRICS_DIR_ENV: &str = "LIFNET_METRICS_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,
    pub dataset: String,
    pub data_dir: PathBuf,
    pub train_path: PathBuf,
    pub test_path: PathBuf,
    pub synthetic_n: usize,
    pub synthetic_mu: f64,
    pub synthetic_sigma: f64,
    pub architecture: String,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub hidden: Vec<usize>,
    pub layers: Vec<String>,
    pub timesteps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub at_mode: String,
    pub f_c: f64,
    pub momentum_m: f64,
    pub tgo: bool,
    pub kappa: f64,
    pub v_th: f64,
    pub tau: f64,
    pub detach_reset: bool,
    pub tau_learnable: bool,
    pub label_smoothing: f64,
    pub metrics_dir: PathBuf,
    pub gradcheck_batch: usize,
    pub gradcheck_epsilon: f64,
    pub jacobian_fault: bool,
    pub drive_mu: f64,
    pub drive_width: usize,
    pub drive_depth: usize,
    pub drive_batch: usize,
    pub sigmas: Vec<f64>,
    pub regimes: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let lif = LifParams::default();
        let neuron = NeuronConfig::default();
        let train = TrainOptions::default();
        let bptt = BpttOptions::default();
        let drive = DriveConfig::default();
        RunConfig {
            run_id: "run".into(),
            seed: 0,
            dataset: "mnist".into(),
            data_dir: "data/mnist".into(),
            train_path: PathBuf::new(),
            test_path: PathBuf::new(),
            synthetic_n: 1000,
            synthetic_mu: 0.0,
            synthetic_sigma: 1.0,
            architecture: "mlp".into(),
            input_shape: vec![1, 28, 28],
            classes: 10,
            hidden: vec![300, 300],
            layers: Vec::new(),
            timesteps: 4,
            epochs: 10,
            batch_size: train.batch_size,
            eval_batch_size: 500,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            max_grad_norm: 0.0,
            at_mode: "true".into(),
            f_c: neuron.f_c,
            momentum_m: neuron.momentum_m,
            tgo: bptt.use_tgo,
            kappa: neuron.kappa,
            v_th: lif.v_th_init,
            tau: lif.tau,
            detach_reset: bptt.detach_reset,
            tau_learnable: lif.tau_learnable,
            label_smoothing: train.label_smoothing,
            metrics_dir: "runs".into(),
            gradcheck_batch: 4,
            gradcheck_epsilon: 1e-5,
            jacobian_fault: false,
            drive_mu: drive.mu,
            drive_width: drive.width,
            drive_depth: drive.depth,
            drive_batch: drive.batch,
            sigmas: vec![0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0],
            regimes: Regime::ALL.iter().map(|r| r.name().to_string()).collect(),
        }
    }
}

/// `(key, description)` for every accepted key, in `--help` order.
pub const KEYS: &[(&str, &str)] = &[
    ("run_id", "name of the run; artifacts go to <metrics_dir>/<run_id>"),
    ("seed", "master seed for initialization, shuffling and synthetic data"),
    ("dataset", "mnist | synthetic | csv"),
    ("data_dir", "directory holding the four MNIST IDX files"),
    ("train_path", "training CSV (label,f0,f1,...) when dataset = csv"),
    ("test_path", "test CSV when dataset = csv"),
    ("synthetic_n", "samples per split of the synthetic two-class Gaussian set"),
    ("synthetic_mu", "mean of the synthetic features"),
    ("synthetic_sigma", "standard deviation of the synthetic features"),
    ("architecture", "mlp | conv | custom"),
    ("input_shape", "[channels, height, width] or [features] of one sample; synthetic data uses its product as dimension"),
    ("classes", "number of output classes"),
    ("hidden", "hidden LIF layer sizes when architecture = mlp"),
    ("layers", "layer list when architecture = custom: \"fc:N\", \"conv:C:K\", \"pool:S\", \"flatten\""),
    ("timesteps", "simulation timesteps T"),
    ("epochs", "training epochs; the learning rate follows a cosine decay to 0"),
    ("batch_size", "training mini-batch size"),
    ("eval_batch_size", "mini-batch size for evaluation"),
    ("lr", "initial SGD learning rate"),
    ("momentum", "SGD momentum"),
    ("weight_decay", "L2 weight decay"),
    ("max_grad_norm", "global gradient-norm clip; 0 disables"),
    ("at_mode", "adaptive threshold: off | estimated | true"),
    ("f_c", "firing-control factor scaling the adaptive threshold"),
    ("momentum_m", "moving-average momentum of the inference thresholds"),
    ("tgo", "threshold-driven surrogate width (needs at_mode != off)"),
    ("kappa", "base surrogate width"),
    ("v_th", "initial firing threshold"),
    ("tau", "membrane decay factor"),
    ("detach_reset", "drop the reset path from the backward pass"),
    ("tau_learnable", "train tau along with the weights"),
    ("label_smoothing", "label smoothing of the cross-entropy loss"),
    ("metrics_dir", "output directory; overridden by LIFNET_METRICS_DIR"),
    ("gradcheck_batch", "samples used by the gradient check (at most 8)"),
    ("gradcheck_epsilon", "finite-difference step of the gradient check"),
    ("jacobian_fault", "test hook: corrupt the temporal Jacobian so the gradient check must fail"),
    ("drive_mu", "mean of the Gaussian drive for analyze"),
    ("drive_width", "neurons per layer of the analyze network"),
    ("drive_depth", "LIF layers of the analyze network"),
    ("drive_batch", "drive samples per sigma"),
    ("sigmas", "drive standard deviations swept by analyze"),
    ("regimes", "analyze regimes: any of fixed, at, at_tgo"),
];

pub fn keys_help() -> String {
    let d = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
    let mut out = String::from("Config keys (flat TOML; defaults in brackets):\n");
    for (k, doc) in KEYS {
        let def = d.get(*k).map(|v| v.to_string()).unwrap_or_else(|| "\"\"".into());
        out.push_str(&format!("  {k:<18} {doc} [{def}]\n"));
    }
    out.push_str(&format!(
        "\nPrecedence: defaults < --config file < {METRICS_DIR_ENV} < --set key=value\n"
    ));
    out
}

/// Parses a `--set` value as a TOML value; keys whose default is a string
/// take the raw text, so `at_mode=true` needs no quoting.
fn parse_value(key: &str, raw: &str) -> toml::Value {
    let defaults = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
    if let Some(toml::Value::String(_)) = defaults.get(key) {
        if let Ok(mut t) = format!("v = {raw}").parse::<toml::Table>() {
            if let Some(v @ toml::Value::String(_)) = t.remove("v") {
                return v;
            }
        }
        return toml::Value::String(raw.to_string());
    }
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    load_onto(None, file, overrides)
}

/// Like [`load`], with `base` (e.g. a checkpoint's config) under the file values.
pub fn load_onto(base: Option<&RunConfig>, file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut table = base
        .map(|b| toml::Table::try_from(b).expect("config serializes"))
        .unwrap_or_default();
    let file_table = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            text.parse::<toml::Table>()
                .map_err(|e| CliError::Validation(vec![format!("{}: {e}", p.display())]))?
        }
        None => toml::Table::new(),
    };
    table.extend(file_table);
    if let Some(dir) = std::env::var_os(METRICS_DIR_ENV) {
        table.insert(
            "metrics_dir".into(),
            toml::Value::String(dir.to_string_lossy().into_owned()),
        );
    }
    let mut errors = Vec::new();
    for o in overrides {
        match o.split_once('=') {
            Some((k, v)) if KEYS.iter().any(|(name, _)| *name == k.trim()) => {
                table.insert(k.trim().to_string(), parse_value(k.trim(), v.trim()));
            }
            Some((k, _)) => errors.push(format!("unknown key `{}` in --set", k.trim())),
            None => errors.push(format!("--set expects key=value, got `{o}`")),
        }
    }
    let unknown: Vec<String> = table.keys().filter(|k| !KEYS.iter().any(|(n, _)| n == k)).cloned().collect();
    for k in unknown {
        table.remove(&k);
        errors.push(format!("unknown key `{k}`"));
    }
    match RunConfig::deserialize(table) {
        Ok(cfg) => match cfg.validate() {
            Ok(()) if errors.is_empty() => Ok(cfg),
            Ok(()) => Err(CliError::Validation(errors)),
            Err(CliError::Validation(more)) => {
                errors.extend(more);
                Err(CliError::Validation(errors))
            }
            Err(e) => Err(e),
        },
        Err(e) => {
            errors.push(e.message().to_string());
            Err(CliError::Validation(errors))
        }
    }
}

pub fn from_toml(text: &str) -> Result<RunConfig, CliError> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Validation(vec![e.message().to_string()]))?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the effective config, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Every problem at once, so a config can be fixed in one pass.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut e = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                e.push(msg);
            }
        };
        need(
            matches!(self.dataset.as_str(), "mnist" | "synthetic" | "csv"),
            format!("dataset must be mnist, synthetic or csv, got `{}`", self.dataset),
        );
        if self.dataset == "csv" {
            need(!self.train_path.as_os_str().is_empty(), "dataset = csv needs train_path".into());
            need(!self.test_path.as_os_str().is_empty(), "dataset = csv needs test_path".into());
        }
        if self.dataset == "synthetic" {
            need(self.synthetic_n >= 2, "synthetic_n must be at least 2".into());
            need(self.synthetic_sigma > 0.0, "synthetic_sigma must be positive".into());
        }
        need(
            matches!(self.architecture.as_str(), "mlp" | "conv" | "custom"),
            format!("architecture must be mlp, conv or custom, got `{}`", self.architecture),
        );
        need(
            !self.input_shape.is_empty() && self.input_shape.iter().all(|&d| d > 0),
            "input_shape must be non-empty with positive entries".into(),
        );
        need(self.classes >= 2, "classes must be at least 2".into());
        need(self.hidden.iter().all(|&h| h > 0), "hidden sizes must be positive".into());
        if self.architecture == "conv" {
            need(self.input_shape.len() == 3, "architecture = conv needs a 3-entry input_shape".into());
        }
        if self.architecture == "custom" {
            need(!self.layers.is_empty(), "architecture = custom needs a non-empty layers list".into());
        }
        need(self.timesteps >= 1, "timesteps must be at least 1".into());
        need(self.batch_size >= 1, "batch_size must be at least 1".into());
        need(self.eval_batch_size >= 1, "eval_batch_size must be at least 1".into());
        need(self.lr >= 0.0 && self.lr.is_finite(), format!("lr must be non-negative, got {}", self.lr));
        need((0.0..1.0).contains(&self.momentum), format!("momentum must lie in [0, 1), got {}", self.momentum));
        need(self.weight_decay >= 0.0, "weight_decay must be non-negative".into());
        need(self.max_grad_norm >= 0.0, "max_grad_norm must be non-negative".into());
        need(
            matches!(self.at_mode.as_str(), "off" | "estimated" | "true"),
            format!("at_mode must be off, estimated or true, got `{}`", self.at_mode),
        );
        need(
            !(self.tgo && self.at_mode == "off"),
            "tgo = true requires an adaptive threshold (at_mode estimated or true)".into(),
        );
        need(self.f_c > 0.0, format!("f_c must be positive, got {}", self.f_c));
        need(
            self.momentum_m > 0.0 && self.momentum_m <= 1.0,
            format!("momentum_m must lie in (0, 1], got {}", self.momentum_m),
        );
        need(self.kappa > 0.0, format!("kappa must be positive, got {}", self.kappa));
        need(self.v_th > 0.0, format!("v_th must be positive, got {}", self.v_th));
        need(self.tau > 0.0 && self.tau < 1.0, format!("tau must lie in (0, 1), got {}", self.tau));
        need(
            (0.0..1.0).contains(&self.label_smoothing),
            format!("label_smoothing must lie in [0, 1), got {}", self.label_smoothing),
        );
        need(
            (1..=8).contains(&self.gradcheck_batch),
            "gradcheck_batch must lie in 1..=8".into(),
        );
        need(self.gradcheck_epsilon > 0.0, "gradcheck_epsilon must be positive".into());
        need(self.drive_width >= 2, "drive_width must be at least 2".into());
        need(self.drive_depth >= 1, "drive_depth must be at least 1".into());
        need(self.drive_batch >= 1, "drive_batch must be at least 1".into());
        need(
            !self.sigmas.is_empty() && self.sigmas.iter().all(|&s| s > 0.0 && s.is_finite()),
            "sigmas must be a non-empty list of positive values".into(),
        );
        for r in &self.regimes {
            need(Regime::parse(r).is_some(), format!("unknown regime `{r}` (fixed, at, at_tgo)"));
        }
        need(!self.regimes.is_empty(), "regimes must not be empty".into());
        if let Err(msg) = self.layer_specs() {
            e.push(msg);
        }
        if e.is_empty() {
            Ok(())
        } else {
            Err(CliError::Validation(e))
        }
    }

    pub fn input_features(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>, String> {
        let features = self.input_features();
        match self.architecture.as_str() {
            "mlp" => {
                let mut sizes = vec![features];
                sizes.extend(&self.hidden);
                sizes.push(self.classes);
                Ok(sizes
                    .windows(2)
                    .enumerate()
                    .map(|(i, w)| LayerSpec::affine(w[0], w[1], i + 2 < sizes.len()))
                    .collect())
            }
            "conv" => match self.input_shape[..] {
                [c, h, w] => Ok(small_conv_specs(c, h, w, self.classes)),
                _ => Err("architecture = conv needs a 3-entry input_shape".into()),
            },
            "custom" => custom_specs(&self.layers, &self.input_shape, self.classes),
            _ => Ok(Vec::new()),
        }
    }

    pub fn neuron_config(&self) -> NeuronConfig {
        NeuronConfig {
            lif: LifParams {
                tau: self.tau,
                v_th_init: self.v_th,
                tau_learnable: self.tau_learnable,
            },
            threshold_mode: if self.at_mode == "estimated" {
                ThresholdMode::Estimated
            } else {
                ThresholdMode::True
            },
            f_c: self.f_c,
            momentum_m: self.momentum_m,
            kappa: self.kappa,
            ..NeuronConfig::default()
        }
    }

    pub fn bptt(&self) -> BpttOptions {
        BpttOptions {
            detach_reset: self.detach_reset,
            use_at: self.at_mode != "off",
            use_tgo: self.tgo,
            jacobian_fault: self.jacobian_fault,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            bptt: self.bptt(),
            batch_size: self.batch_size,
            label_smoothing: self.label_smoothing,
            max_grad_norm: (self.max_grad_norm > 0.0).then_some(self.max_grad_norm),
        }
    }

    pub fn drive(&self) -> DriveConfig {
        DriveConfig {
            mu: self.drive_mu,
            width: self.drive_width,
            depth: self.drive_depth,
            batch: self.drive_batch,
            timesteps: self.timesteps,
            seed: self.seed,
            neuron: self.neuron_config(),
        }
    }

    pub fn regime_list(&self) -> Vec<Regime> {
        self.regimes.iter().filter_map(|r| Regime::parse(r)).collect()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.metrics_dir.join(&self.run_id)
    }
}

fn custom_specs(layers: &[String], input_shape: &[usize], classes: usize) -> Result<Vec<LayerSpec>, String> {
    // (channels, height, width) while spatial, None once flattened
    let mut vol = match input_shape {
        [c, h, w] => Some((*c, *h, *w)),
        _ => None,
    };
    let mut features: usize = input_shape.iter().product();
    let mut specs = Vec::new();
    for (i, item) in layers.iter().enumerate() {
        let parts: Vec<&str> = item.split(':').collect();
        let num = |s: &str| s.parse::<usize>().map_err(|_| format!("layers[{i}] `{item}`: `{s}` is not a size"));
        match parts[..] {
            ["fc", n] => {
                let n = num(n)?;
                if vol.is_some() {
                    specs.push(LayerSpec::flatten(features));
                    vol = None;
                }
                specs.push(LayerSpec::affine(features, n, true));
                features = n;
            }
            ["conv", c, k] => {
                let (ci, h, w) = vol.ok_or(format!("layers[{i}] `{item}`: conv after flatten"))?;
                let (co, k) = (num(c)?, num(k)?);
                specs.push(LayerSpec::conv(ci, co, k, h, w));
                vol = Some((co, h, w));
                features = co * h * w;
            }
            ["pool", s] => {
                let (c, h, w) = vol.ok_or(format!("layers[{i}] `{item}`: pool after flatten"))?;
                let s = num(s)?;
                if s == 0 || h % s != 0 || w % s != 0 {
                    return Err(format!("layers[{i}] `{item}`: window must divide {h}x{w}"));
                }
                specs.push(LayerSpec::avg_pool(c, h, w, s));
                vol = Some((c, h / s, w / s));
                features = c * (h / s) * (w / s);
            }
            ["flatten"] => {
                specs.push(LayerSpec::flatten(features));
                vol = None;
            }
            _ => return Err(format!("layers[{i}]: cannot parse `{item}`")),
        }
    }
    if vol.is_some() && !specs.is_empty() {
        specs.push(LayerSpec::flatten(features));
    }
    specs.push(LayerSpec::affine(features, classes, false));
    lifnet::model::validate_specs(&specs).map_err(|e| e.to_string())?;
    Ok(specs)
}
