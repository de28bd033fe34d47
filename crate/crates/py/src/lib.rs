//! Python module `lifnet_py`: networks, training, gradient checks and the
//! Gaussian-drive analysis. Arrays cross the boundary as nested lists.

use std::collections::BTreeMap;
use std::path::PathBuf;

use lifnet::analysis::{sigma_sweep, DriveConfig, Regime};
use lifnet::data::synth_gaussian;
use lifnet::gradcheck::{relaxed_gradient_check, GradCheckSettings};
use lifnet::metrics::{energy_from_rates, TraceAccumulator};
use lifnet::train::{argmax_rows, evaluate, TrainOptions, TrainRun};
use lifnet::{
    checkpoint, forward_sequence, infer, BpttOptions, Dataset, Mode, Network, NeuronConfig, Rng, SgdState, SnnError,
    SyntheticGaussianSpec, Tensor, ThresholdMode,
};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: SnnError) -> PyErr {
    match e {
        SnnError::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Rectangular nested list to a `[rows, cols]` tensor.
pub fn to_tensor(rows: &[Vec<f64>]) -> Result<Tensor, SnnError> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 {
        return Err(SnnError::Shape("expected a non-empty list of non-empty rows".into()));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != cols) {
        return Err(SnnError::Shape(format!("row {i} has {} entries, row 0 has {cols}", rows[i].len())));
    }
    Tensor::new(vec![rows.len(), cols], rows.concat())
}

pub fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = t.shape().last().copied().unwrap_or(1).max(1);
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn bptt(at: bool, tgo: bool, detach_reset: bool) -> PyResult<BpttOptions> {
    BpttOptions::new(detach_reset, at, tgo).map_err(py_err)
}

fn dataset(net: &Network, x: &[Vec<f64>], y: Vec<usize>) -> PyResult<Dataset> {
    Dataset::new(to_tensor(x).map_err(py_err)?, y, net.classes()).map_err(py_err)
}

/// A LIF multilayer perceptron; the last size is the number of classes.
#[pyclass(name = "Network", module = "lifnet_py", from_py_object)]
#[derive(Clone)]
pub struct PyNetwork {
    inner: Network,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (sizes, timesteps=4, seed=0, at_mode="true", f_c=1.0, momentum_m=0.1, kappa=1.0, v_th=1.0, tau=0.2))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        sizes: Vec<usize>,
        timesteps: usize,
        seed: u64,
        at_mode: &str,
        f_c: f64,
        momentum_m: f64,
        kappa: f64,
        v_th: f64,
        tau: f64,
    ) -> PyResult<Self> {
        let threshold_mode = match at_mode {
            "true" | "off" => ThresholdMode::True,
            "estimated" => ThresholdMode::Estimated,
            other => return Err(PyValueError::new_err(format!("unknown at_mode `{other}`"))),
        };
        let mut cfg = NeuronConfig {
            threshold_mode,
            f_c,
            momentum_m,
            kappa,
            ..NeuronConfig::default()
        };
        cfg.lif.v_th_init = v_th;
        cfg.lif.tau = tau;
        Ok(PyNetwork {
            inner: Network::mlp(&sizes, timesteps, cfg, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyNetwork {
            inner: checkpoint::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &path).map_err(py_err)
    }

    /// Logits. `train=True` uses batch thresholds and updates the running ones.
    #[pyo3(signature = (x, train=false, at=true, tgo=true))]
    fn forward(&mut self, x: Vec<Vec<f64>>, train: bool, at: bool, tgo: bool) -> PyResult<Vec<Vec<f64>>> {
        let x = to_tensor(&x).map_err(py_err)?;
        let opts = bptt(at, tgo, true)?;
        let (_, logits) = if train {
            forward_sequence(&mut self.inner, &x, Mode::Train, &opts)
        } else {
            infer(&self.inner, &x, &opts)
        }
        .map_err(py_err)?;
        Ok(to_rows(&logits))
    }

    #[pyo3(signature = (x, at=true))]
    fn predict(&self, x: Vec<Vec<f64>>, at: bool) -> PyResult<Vec<usize>> {
        let x = to_tensor(&x).map_err(py_err)?;
        let (_, logits) = infer(&self.inner, &x, &bptt(at, at, true)?).map_err(py_err)?;
        Ok(argmax_rows(&logits))
    }

    /// Inference thresholds per LIF layer and timestep.
    fn running_thresholds(&self) -> Vec<Vec<f64>> {
        self.inner
            .lif_layers()
            .into_iter()
            .filter_map(|l| self.inner.lif(l))
            .map(|lif| lif.thresholds.running_thresholds.data().to_vec())
            .collect()
    }

    /// Mean inference firing rate per LIF layer.
    #[pyo3(signature = (x, at=true))]
    fn firing_rates(&self, x: Vec<Vec<f64>>, at: bool) -> PyResult<Vec<f64>> {
        let x = to_tensor(&x).map_err(py_err)?;
        let (trace, _) = infer(&self.inner, &x, &bptt(at, at, true)?).map_err(py_err)?;
        let mut acc = TraceAccumulator::new();
        acc.add(&trace).map_err(py_err)?;
        Ok(acc.firing().layers.iter().map(|l| l.mean).collect())
    }

    /// Synaptic operation counts and energy of one inference pass.
    #[pyo3(signature = (x, at=true))]
    fn energy(&self, x: Vec<Vec<f64>>, at: bool) -> PyResult<BTreeMap<String, f64>> {
        let x = to_tensor(&x).map_err(py_err)?;
        let (trace, _) = infer(&self.inner, &x, &bptt(at, at, true)?).map_err(py_err)?;
        let mut acc = TraceAccumulator::new();
        acc.add(&trace).map_err(py_err)?;
        let e = energy_from_rates(&self.inner, &acc.firing());
        Ok(BTreeMap::from([
            ("ac_ops".to_string(), e.total_ac),
            ("mac_ops".to_string(), e.total_mac),
            ("joules".to_string(), e.joules),
        ]))
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    #[getter]
    fn timesteps(&self) -> usize {
        self.inner.timesteps()
    }

    #[getter]
    fn architecture(&self) -> String {
        self.inner.architecture()
    }

    fn __repr__(&self) -> String {
        format!("Network({})", self.inner.architecture())
    }
}

/// SGD with momentum and a cosine learning-rate schedule over `epochs`.
#[pyclass(name = "Trainer", module = "lifnet_py")]
pub struct PyTrainer {
    run: TrainRun,
}

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (network, lr=0.1, momentum=0.9, weight_decay=1e-4, epochs=10, seed=0, batch_size=100,
                        at=true, tgo=true, detach_reset=true, label_smoothing=0.1))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        network: &PyNetwork,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
        epochs: usize,
        seed: u64,
        batch_size: usize,
        at: bool,
        tgo: bool,
        detach_reset: bool,
        label_smoothing: f64,
    ) -> PyResult<Self> {
        let opts = TrainOptions {
            bptt: bptt(at, tgo, detach_reset)?,
            batch_size,
            label_smoothing,
            max_grad_norm: None,
        };
        let sgd = SgdState::new(lr, momentum, weight_decay).map_err(py_err)?;
        Ok(PyTrainer {
            run: TrainRun::new(network.inner.clone(), sgd, opts, epochs, seed).map_err(py_err)?,
        })
    }

    fn run_epoch(&mut self, x: Vec<Vec<f64>>, y: Vec<usize>) -> PyResult<BTreeMap<String, f64>> {
        let ds = dataset(&self.run.net, &x, y)?;
        let m = self.run.run_epoch(&ds, &mut |_| Ok(())).map_err(py_err)?;
        Ok(BTreeMap::from([
            ("epoch".to_string(), m.epoch as f64),
            ("learning_rate".to_string(), m.learning_rate),
            ("loss".to_string(), m.loss),
            ("accuracy".to_string(), m.accuracy),
        ]))
    }

    /// Inference-mode loss (without smoothing) and accuracy.
    fn evaluate(&self, x: Vec<Vec<f64>>, y: Vec<usize>) -> PyResult<BTreeMap<String, f64>> {
        let ds = dataset(&self.run.net, &x, y)?;
        let r = evaluate(&self.run.net, &ds, self.run.options.batch_size, &self.run.options.bptt).map_err(py_err)?;
        Ok(BTreeMap::from([
            ("loss".to_string(), r.loss),
            ("accuracy".to_string(), r.accuracy),
        ]))
    }

    #[getter]
    fn network(&self) -> PyNetwork {
        PyNetwork {
            inner: self.run.net.clone(),
        }
    }

    #[getter]
    fn losses(&self) -> Vec<f64> {
        self.run.history.iter().map(|m| m.loss).collect()
    }
}

/// Monte Carlo estimate of `P(U > mu + sigma)` for Gaussian `U`.
#[pyfunction]
#[pyo3(signature = (mu, sigma, n_samples=1_000_000, seed=0))]
fn gaussian_tail_check(mu: f64, sigma: f64, n_samples: usize, seed: u64) -> PyResult<f64> {
    let mut rng = Rng::stream(seed, lifnet::rng::stream::MONTE_CARLO);
    lifnet::neuron::gaussian_tail_check(mu, sigma, n_samples, &mut rng).map_err(py_err)
}

#[pyfunction]
fn tgo_width(delta_v_th: f64, v_th_init: f64, base_k: f64) -> PyResult<f64> {
    lifnet::neuron::tgo_width(delta_v_th, v_th_init, base_k).map_err(py_err)
}

/// Rectangular surrogate derivative at one potential.
#[pyfunction]
fn surrogate(u: f64, threshold: f64, width_k: f64) -> f64 {
    lifnet::neuron::surrogate_value(u, threshold, width_k)
}

/// Max relative error of the analytic gradient against finite differences.
#[pyfunction]
#[pyo3(signature = (network, x, labels, detach_reset=true, tgo=true, at=true))]
fn gradcheck(
    network: &PyNetwork,
    x: Vec<Vec<f64>>,
    labels: Vec<usize>,
    detach_reset: bool,
    tgo: bool,
    at: bool,
) -> PyResult<f64> {
    let x = to_tensor(&x).map_err(py_err)?;
    let opts = bptt(at, tgo, detach_reset)?;
    let r = relaxed_gradient_check(&network.inner, &x, &labels, &opts, GradCheckSettings::default()).map_err(py_err)?;
    Ok(r.max_rel_error)
}

/// Two-class Gaussian data: `(samples, labels)`.
#[pyfunction]
fn synthetic_gaussian(mu: f64, sigma: f64, dims: usize, n: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let ds = synth_gaussian(&SyntheticGaussianSpec {
        mu,
        sigma,
        dims: vec![dims],
        n,
        seed,
    })
    .map_err(py_err)?;
    Ok((to_rows(ds.samples()), ds.labels().to_vec()))
}

type SweepRow = (String, f64, Vec<f64>, Vec<f64>);

/// Per-layer mean firing rate and grad-available proportion for each `(regime, sigma)`.
#[pyfunction]
#[pyo3(signature = (sigmas, regimes=vec!["fixed".to_string(), "at".to_string(), "at_tgo".to_string()], mu=0.45, width=100, depth=2, batch=200, timesteps=4, seed=0))]
#[allow(clippy::too_many_arguments)]
fn gaussian_sweep(
    sigmas: Vec<f64>,
    regimes: Vec<String>,
    mu: f64,
    width: usize,
    depth: usize,
    batch: usize,
    timesteps: usize,
    seed: u64,
) -> PyResult<Vec<SweepRow>> {
    let regimes = regimes
        .iter()
        .map(|r| Regime::parse(r).ok_or_else(|| PyValueError::new_err(format!("unknown regime `{r}`"))))
        .collect::<PyResult<Vec<_>>>()?;
    let cfg = DriveConfig {
        mu,
        width,
        depth,
        batch,
        timesteps,
        seed,
        neuron: NeuronConfig::default(),
    };
    let points = sigma_sweep(&cfg, &sigmas, &regimes).map_err(py_err)?;
    Ok(points
        .into_iter()
        .map(|p| {
            (
                p.regime.name().to_string(),
                p.sigma,
                p.firing.layers.iter().map(|l| l.mean).collect(),
                p.grad_available.layers.iter().map(|l| l.mean).collect(),
            )
        })
        .collect())
}

#[pymodule]
fn lifnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(gaussian_tail_check, m)?)?;
    m.add_function(wrap_pyfunction!(tgo_width, m)?)?;
    m.add_function(wrap_pyfunction!(surrogate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_sweep, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
