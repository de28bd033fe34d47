//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.
//!
//! The MNIST criteria read the IDX files from `data/mnist` at the workspace
//! root (or `LIFNET_MNIST_DIR`); `scripts/fetch_mnist.sh` downloads them.

mod common;

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use lifnet::data::{batch_iter, load_idx, synth_gaussian, SyntheticGaussianSpec};
use lifnet::gradcheck::{relaxed_gradient_check, GradCheckSettings};
use lifnet::metrics::{energy_estimate, energy_from_rates, FiringReport, LayerSeries, TraceAccumulator};
use lifnet::neuron::{surrogate_value, tgo_width, gaussian_tail_check, update_running_threshold};
use lifnet::rng::stream;
use lifnet::train::{evaluate, TrainOptions, TrainRun};
use lifnet::analysis::{sigma_sweep, DriveConfig, Regime};
use lifnet::{forward_sequence, BpttOptions, Dataset, Mode, Network, NeuronConfig, Rng, SgdState};

fn report(n: usize, name: &str, ok: bool, detail: &str) {
    println!("criterion {n} ({name}): {} | {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} ({name}) failed: {detail}");
}

// ---------------------------------------------------------------- MNIST runs

const SEEDS: [u64; 3] = [1, 2, 3];
const EPOCHS: usize = 10;
const SNAPSHOT_EPOCH: usize = 5;
const PROBE_SAMPLES: usize = 2000;

struct Mnist {
    train: Dataset,
    test: Dataset,
}

fn mnist() -> &'static Mnist {
    static DATA: OnceLock<Mnist> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = std::env::var_os("LIFNET_MNIST_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
        let load = |img: &str, lbl: &str| {
            load_idx(&dir.join(img), &dir.join(lbl)).unwrap_or_else(|e| {
                panic!("MNIST not found in {} ({e}); run scripts/fetch_mnist.sh", dir.display())
            })
        };
        Mnist {
            train: load("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            test: load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    })
}

fn mlp_run(seed: u64, bptt: BpttOptions, momentum_m: f64, epochs: usize) -> TrainRun {
    let cfg = NeuronConfig {
        momentum_m,
        ..NeuronConfig::default()
    };
    let net = Network::mlp(&[784, 300, 300, 10], 4, cfg, seed).unwrap();
    let opts = TrainOptions {
        bptt,
        ..TrainOptions::default()
    };
    TrainRun::new(net, SgdState::new(0.1, 0.9, 1e-4).unwrap(), opts, epochs, seed).unwrap()
}

/// Per-layer mean grad-available proportion of a batch-statistics forward
/// over the first training samples, leaving `net` untouched.
fn availability(net: &Network, opts: &BpttOptions) -> Vec<f64> {
    let probe_set = mnist().train.head(PROBE_SAMPLES);
    let mut probe = net.clone();
    let mut acc = TraceAccumulator::new();
    for (x, _) in batch_iter(&probe_set, 100, false, &mut Rng::new(0)).unwrap() {
        let (trace, _) = forward_sequence(&mut probe, &x, Mode::Train, opts).unwrap();
        acc.add(&trace).unwrap();
    }
    acc.grad_available().layers.iter().map(|l| l.mean).collect()
}

struct MlpResult {
    snapshot_availability: Vec<f64>,
    test_accuracy: f64,
}

/// 784-300-300-10, T = 4, 10 epochs, per seed and configuration.
fn mlp_results() -> &'static [(u64, MlpResult, MlpResult)] {
    static RUNS: OnceLock<Vec<(u64, MlpResult, MlpResult)>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let data = mnist();
        SEEDS
            .iter()
            .map(|&seed| {
                let one = |bptt: BpttOptions| {
                    let mut run = mlp_run(seed, bptt, 0.1, EPOCHS);
                    let mut snapshot = Vec::new();
                    for e in 0..EPOCHS {
                        run.run_epoch(&data.train, &mut |_| Ok(())).unwrap();
                        if e + 1 == SNAPSHOT_EPOCH {
                            snapshot = availability(&run.net, &bptt);
                        }
                    }
                    let test_accuracy = evaluate(&run.net, &data.test, 500, &bptt).unwrap().accuracy;
                    MlpResult {
                        snapshot_availability: snapshot,
                        test_accuracy,
                    }
                };
                (seed, one(BpttOptions::default()), one(BpttOptions::vanilla()))
            })
            .collect()
    })
}

// ---------------------------------------------------------------- criteria

#[test]
fn criterion_1_gaussian_tail_is_distribution_free() {
    let start = Instant::now();
    let pairs = [(0.0, 1.0), (0.3, 0.2), (-1.5, 3.0), (2.0, 0.5)];
    let mut worst: f64 = 0.0;
    for (i, &(mu, sigma)) in pairs.iter().enumerate() {
        let mut rng = Rng::stream(i as u64, stream::MONTE_CARLO);
        let p = gaussian_tail_check(mu, sigma, 1_000_000, &mut rng).unwrap();
        worst = worst.max((p - 0.1587).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        "tail probability",
        worst <= 0.005 && secs < 5.0,
        &format!("{} pairs, max |p - 0.1587| = {worst:.5}, {secs:.2}s", pairs.len()),
    );
}

#[test]
fn criterion_2_relaxed_finite_differences() {
    let start = Instant::now();
    let net = Network::mlp(&[6, 16, 12, 4], 3, NeuronConfig::default(), 3).unwrap();
    let params = net.num_parameters();
    let x = Rng::new(17).normal_tensor(&[6, 6], 0.5, 1.0);
    let labels = [0, 1, 2, 3, 1, 0];
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for detach in [true, false] {
        for tgo in [false, true] {
            let opts = BpttOptions::new(detach, true, tgo).unwrap();
            let r = relaxed_gradient_check(&net, &x, &labels, &opts, GradCheckSettings::default()).unwrap();
            worst = worst.max(r.max_rel_error);
            parts.push(format!("detach={detach} tgo={tgo}: {:.2e} ({} checked)", r.max_rel_error, r.checked));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        2,
        "gradient check",
        params <= 1000 && worst < 1e-4 && secs < 60.0,
        &format!("{params} parameters, T=3, {}; {secs:.1}s", parts.join(", ")),
    );
}

#[test]
fn criterion_3_backward_matches_scalar_loop() {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for seed in 0..10u64 {
        for detach in [true, false] {
            for t in 1..=3 {
                let mut rng = Rng::new(500 + seed);
                let mut net = Network::mlp(&[4, 6, 5, 3], t, NeuronConfig::default(), seed).unwrap();
                assert!(net.num_parameters() <= 100);
                let x = rng.normal_tensor(&[4, 4], 0.5, 1.0);
                let d = rng.normal_tensor(&[4, 3], 0.0, 0.3);
                worst = worst.max(common::compare(&mut net, &x, &d, &BpttOptions::new(detach, false, false).unwrap()));
                cases += 1;
            }
        }
    }
    report(3, "oracle equivalence", worst <= 1e-12, &format!("{cases} cases, max abs diff {worst:e}"));
}

#[test]
fn criterion_4_firing_rate_stability() {
    let cfg = DriveConfig {
        batch: 1000,
        ..DriveConfig::default()
    };
    let sigmas = [0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0];
    let pts = sigma_sweep(&cfg, &sigmas, &[Regime::Fixed, Regime::At]).unwrap();
    let rates = |regime: Regime| -> Vec<f64> {
        pts.iter()
            .filter(|p| p.regime == regime)
            .flat_map(|p| p.firing.layers.iter().flat_map(|l| l.per_timestep.clone()))
            .collect()
    };
    let lo = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (at, fixed) = (rates(Regime::At), rates(Regime::Fixed));
    let ok = lo(&at) >= 0.10 && hi(&at) <= 0.22 && lo(&fixed) <= 0.02 && hi(&fixed) >= 0.45;
    report(
        4,
        "firing-rate stability",
        ok,
        &format!(
            "adaptive [{:.3}, {:.3}], fixed [{:.3}, {:.3}] over sigma 0.25..4",
            lo(&at),
            hi(&at),
            lo(&fixed),
            hi(&fixed)
        ),
    );
}

#[test]
fn criterion_5_gradient_availability_after_five_epochs() {
    let mut ok = true;
    let mut parts = Vec::new();
    for (seed, tgo, vanilla) in mlp_results() {
        let better = tgo
            .snapshot_availability
            .iter()
            .zip(&vanilla.snapshot_availability)
            .all(|(a, b)| a > b);
        ok &= better && !tgo.snapshot_availability.is_empty();
        parts.push(format!(
            "seed {seed}: at+tgo {:?} vs vanilla {:?}",
            rounded(&tgo.snapshot_availability),
            rounded(&vanilla.snapshot_availability)
        ));
    }
    report(5, "gradient availability", ok, &parts.join("; "));
}

#[test]
fn criterion_6_mnist_accuracy() {
    let runs = mlp_results();
    let tgo: Vec<f64> = runs.iter().map(|r| r.1.test_accuracy).collect();
    let vanilla: Vec<f64> = runs.iter().map(|r| r.2.test_accuracy).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ok = tgo.iter().all(|&a| a >= 0.97) && mean(&tgo) >= mean(&vanilla) - 0.001;
    report(
        6,
        "MNIST accuracy",
        ok,
        &format!(
            "at+tgo {:?} (mean {:.4}), vanilla {:?} (mean {:.4}), gap {:+.2} points",
            rounded(&tgo),
            mean(&tgo),
            rounded(&vanilla),
            mean(&vanilla),
            100.0 * (mean(&tgo) - mean(&vanilla))
        ),
    );
}

#[test]
fn criterion_7_threshold_momentum_robustness() {
    const EPOCHS_M: usize = 3;
    let data = mnist();
    let runs: Vec<(f64, Network, f64)> = [0.05, 0.1, 0.2]
        .into_iter()
        .map(|m| {
            let mut run = mlp_run(1, BpttOptions::default(), m, EPOCHS_M);
            for _ in 0..EPOCHS_M {
                run.run_epoch(&data.train, &mut |_| Ok(())).unwrap();
            }
            let acc = evaluate(&run.net, &data.test, 500, &BpttOptions::default()).unwrap().accuracy;
            (m, run.net, acc)
        })
        .collect();
    let reference = &runs[1].1;
    let mut worst_rel: f64 = 0.0;
    for (_, net, _) in &runs {
        for l in reference.lif_layers() {
            let a = &reference.lif(l).unwrap().thresholds.running_thresholds;
            let b = &net.lif(l).unwrap().thresholds.running_thresholds;
            for (x, y) in a.data().iter().zip(b.data()) {
                worst_rel = worst_rel.max((x - y).abs() / x.abs());
            }
        }
    }
    let accs: Vec<f64> = runs.iter().map(|r| r.2).collect();
    let spread = 100.0 * (accs.iter().copied().fold(f64::NEG_INFINITY, f64::max) - accs.iter().copied().fold(f64::INFINITY, f64::min));
    report(
        7,
        "threshold momentum robustness",
        worst_rel <= 0.05 && spread < 0.3,
        &format!(
            "m in {{0.05, 0.1, 0.2}}, {EPOCHS_M} epochs: max relative threshold gap {:.4}, accuracies {:?}, spread {spread:.3} points",
            worst_rel,
            rounded(&accs)
        ),
    );
}

#[test]
fn criterion_8_energy_accounting() {
    let t = 2;
    let mut net = Network::mlp(&[784, 100, 10], t, NeuronConfig::default(), 0).unwrap();
    let x = Rng::new(8).normal_tensor(&[5, 784], 0.0, 1.0);
    let (trace, _) = forward_sequence(&mut net, &x, Mode::Train, &BpttOptions::default()).unwrap();
    let e = energy_estimate(&trace, &net);
    // both weighted layers are encoding or output layers, so every op is a MAC
    let mac = (t * 784 * 100 + t * 100 * 10) as f64;
    let ledger_ok = e.total_ac == 0.0 && e.total_mac == mac && e.joules == 4.6e-12 * mac;

    let deep = Network::mlp(&[20, 16, 12, 8, 4], 2, NeuronConfig::default(), 0).unwrap();
    let rates = |r: [f64; 3]| FiringReport {
        layers: r
            .iter()
            .enumerate()
            .map(|(l, &v)| LayerSeries {
                layer: l,
                per_timestep: vec![v; 2],
                mean: v,
            })
            .collect(),
        network_mean: 0.0,
    };
    let mut monotone = true;
    let mut prev = f64::NEG_INFINITY;
    for i in 0..=20 {
        let r = i as f64 / 20.0;
        let e = energy_from_rates(&deep, &rates([r, r, r])).joules;
        monotone &= e >= prev;
        prev = e;
    }
    let hidden_ac = energy_from_rates(&deep, &rates([0.0, 0.5, 0.0])).total_ac;
    // LIF layer 1 feeds the 12 -> 8 layer
    let hand_ac = 0.5 * 2.0 * (12 * 8) as f64;
    report(
        8,
        "energy accounting",
        ledger_ok && monotone && hidden_ac == hand_ac,
        &format!(
            "784-100-10: AC {} MAC {} (hand {mac}); hidden-layer AC {hidden_ac} (hand {hand_ac}); monotone {monotone}",
            e.total_ac, e.total_mac
        ),
    );
}

#[test]
fn criterion_9_invariant_suites() {
    let mut failures = Vec::new();

    for k in [0.5, 1.0, 2.0] {
        let n = 100_000;
        let (a, b) = (-3.0, 3.0);
        let h = (b - a) / n as f64;
        let area: f64 = (0..n).map(|i| surrogate_value(a + (i as f64 + 0.5) * h, 0.0, k) * h).sum();
        if (area - 1.0).abs() > 1e-3 {
            failures.push(format!("surrogate area {area} at k={k}"));
        }
    }

    let (v_th, base_k) = (1.0, 1.0);
    let grid: Vec<f64> = (0..1000).map(|i| 3.0 * i as f64 / 999.0).collect();
    let widths: Vec<f64> = grid.iter().map(|&d| tgo_width(d, v_th, base_k).unwrap()).collect();
    if widths.windows(2).any(|w| w[1] < w[0]) || widths.iter().any(|&w| !(w > 0.0 && w < 2.0 * base_k)) {
        failures.push("tgo width not monotone or out of bounds".into());
    }
    if (tgo_width(v_th, v_th, base_k).unwrap() - base_k).abs() > 0.0 {
        failures.push("tgo width discontinuous at v_th".into());
    }
    let step = grid[1] - grid[0];
    if widths.windows(2).any(|w| (w[1] - w[0]).abs() > 2.0 * base_k * step) {
        failures.push("tgo width jumps between grid points".into());
    }

    let mut rng = Rng::new(9);
    for _ in 0..1000 {
        let (b, r, m) = (rng.normal(0.0, 2.0), rng.normal(0.0, 2.0), rng.uniform().max(1e-3));
        let u = update_running_threshold(b, r, m);
        if u < b.min(r) || u > b.max(r) {
            failures.push(format!("EMA {u} outside [{b}, {r}]"));
            break;
        }
        if update_running_threshold(b, b, m) != b {
            failures.push(format!("EMA fixed point broken at {b}"));
            break;
        }
    }

    let losses = || {
        let ds = synth_gaussian(&SyntheticGaussianSpec {
            mu: 0.0,
            sigma: 1.0,
            dims: vec![4],
            n: 200,
            seed: 4,
        })
        .unwrap();
        let net = Network::mlp(&[4, 12, 2], 3, NeuronConfig::default(), 4).unwrap();
        let opts = TrainOptions {
            batch_size: 20,
            ..TrainOptions::default()
        };
        let mut run = TrainRun::new(net, SgdState::new(0.1, 0.9, 1e-4).unwrap(), opts, 4, 4).unwrap();
        (0..4)
            .map(|_| run.run_epoch(&ds, &mut |_| Ok(())).unwrap().loss.to_bits())
            .collect::<Vec<_>>()
    };
    if losses() != losses() {
        failures.push("equal seeds gave different epoch losses".into());
    }

    let ok = failures.is_empty();
    let detail = if ok {
        "surrogate area, tgo grid, EMA convexity and fixed point, determinism".to_string()
    } else {
        failures.join("; ")
    };
    report(9, "invariant suites", ok, &detail);
}

fn rounded(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}
