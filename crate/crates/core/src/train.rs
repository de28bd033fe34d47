//! Mini-batch training and evaluation loops.

use crate::bptt::{backward, BpttOptions, GradientBundle};
use crate::data::{batch_iter, Dataset};
use crate::error::{Result, SnnError};
use crate::model::{cross_entropy_ls, forward_sequence, infer, ForwardTrace, Mode, Network};
use crate::optim::{clip_grad_norm, cosine_lr, SgdState};
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub bptt: BpttOptions,
    pub batch_size: usize,
    pub label_smoothing: f64,
    /// Joint L2 clipping of all gradients; off when `None`.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            bptt: BpttOptions::default(),
            batch_size: 100,
            label_smoothing: 0.1,
            max_grad_norm: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub accuracy: f64,
    pub batches: usize,
}

/// What a per-batch hook sees during training.
pub struct BatchRecord<'a> {
    pub index: usize,
    pub loss: f64,
    pub correct: usize,
    pub size: usize,
    pub trace: &'a ForwardTrace,
    pub grads: &'a GradientBundle,
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |a, (j, &v)| if v > a.1 { (j, v) } else { a })
                .0
        })
        .collect()
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    argmax_rows(logits).iter().zip(labels).filter(|(p, y)| p == y).count()
}

/// One pass over `ds`: train-mode forward, loss, backward and an SGD step per batch.
pub fn train_epoch(
    net: &mut Network,
    ds: &Dataset,
    opts: &TrainOptions,
    sgd: &mut SgdState,
    rng: &mut Rng,
    hook: &mut dyn FnMut(&BatchRecord<'_>) -> Result<()>,
) -> Result<EpochMetrics> {
    if ds.is_empty() {
        return Err(SnnError::Contract("cannot train on an empty dataset".into()));
    }
    if ds.features() != net.input_features() || ds.classes() > net.classes() {
        return Err(SnnError::Shape(format!(
            "dataset ({} features, {} classes) does not fit network ({} inputs, {} outputs)",
            ds.features(),
            ds.classes(),
            net.input_features(),
            net.classes()
        )));
    }
    let tau_learnable = net.config().lif.tau_learnable;
    let (mut loss_sum, mut correct, mut batches) = (0.0, 0usize, 0usize);
    for (index, (x, y)) in batch_iter(ds, opts.batch_size, true, rng)?.enumerate() {
        let (trace, logits) = forward_sequence(net, &x, Mode::Train, &opts.bptt)?;
        let (loss, d_logits) = cross_entropy_ls(&logits, &y, opts.label_smoothing)?;
        let grads = backward(net, &trace, &d_logits, &opts.bptt)?;
        let batch_correct = count_correct(&logits, &y);
        hook(&BatchRecord {
            index,
            loss,
            correct: batch_correct,
            size: y.len(),
            trace: &trace,
            grads: &grads,
        })?;

        let mut flat = grads.flat(tau_learnable);
        if let Some(max) = opts.max_grad_norm {
            clip_grad_norm(&mut flat.iter_mut().collect::<Vec<_>>(), max);
        }
        let mut params = net.params_mut();
        let mut named: Vec<(&str, &mut Tensor)> = params.iter_mut().map(|(n, p)| (n.as_str(), &mut **p)).collect();
        let refs: Vec<&Tensor> = flat.iter().collect();
        sgd.step(&mut named, &refs)?;
        drop(named);
        drop(params);
        net.clamp_taus();

        loss_sum += loss * y.len() as f64;
        correct += batch_correct;
        batches += 1;
    }
    Ok(EpochMetrics {
        epoch: 0,
        learning_rate: sgd.learning_rate,
        loss: loss_sum / ds.len() as f64,
        accuracy: correct as f64 / ds.len() as f64,
        batches,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
    pub samples: usize,
}

pub type BatchVisitor<'a> = dyn FnMut(&ForwardTrace, &Tensor, &[usize]) -> Result<()> + 'a;

/// Inference-mode pass over `ds` in storage order; `visit` sees every batch trace.
pub fn evaluate_with(
    net: &Network,
    ds: &Dataset,
    batch_size: usize,
    opts: &BpttOptions,
    label_smoothing: f64,
    visit: &mut BatchVisitor,
) -> Result<EvalResult> {
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for (x, y) in batch_iter(ds, batch_size, false, &mut Rng::new(0))? {
        let (trace, logits) = infer(net, &x, opts)?;
        let (loss, _) = cross_entropy_ls(&logits, &y, label_smoothing)?;
        visit(&trace, &logits, &y)?;
        loss_sum += loss * y.len() as f64;
        correct += count_correct(&logits, &y);
    }
    let n = ds.len().max(1) as f64;
    Ok(EvalResult {
        loss: loss_sum / n,
        accuracy: correct as f64 / n,
        samples: ds.len(),
    })
}

pub fn evaluate(net: &Network, ds: &Dataset, batch_size: usize, opts: &BpttOptions) -> Result<EvalResult> {
    evaluate_with(net, ds, batch_size, opts, 0.0, &mut |_, _, _| Ok(()))
}

/// A network plus optimizer, shuffling stream and cosine schedule over `epochs`.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub net: Network,
    pub sgd: SgdState,
    pub options: TrainOptions,
    pub base_lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub history: Vec<EpochMetrics>,
    shuffle: Rng,
}

impl TrainRun {
    pub fn new(net: Network, sgd: SgdState, options: TrainOptions, epochs: usize, seed: u64) -> Result<Self> {
        options.bptt.validate()?;
        if options.batch_size == 0 {
            return Err(SnnError::Config("batch size must be at least 1".into()));
        }
        Ok(TrainRun {
            base_lr: sgd.learning_rate,
            net,
            sgd,
            options,
            epochs,
            seed,
            history: Vec::new(),
            shuffle: Rng::stream(seed, stream::SHUFFLE),
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    /// Runs the next epoch at its scheduled learning rate.
    pub fn run_epoch(
        &mut self,
        ds: &Dataset,
        hook: &mut dyn FnMut(&BatchRecord<'_>) -> Result<()>,
    ) -> Result<EpochMetrics> {
        let epoch = self.history.len();
        self.sgd.learning_rate = cosine_lr(self.base_lr, epoch, self.epochs);
        let mut m = train_epoch(&mut self.net, ds, &self.options, &mut self.sgd, &mut self.shuffle, hook)?;
        m.epoch = epoch;
        self.history.push(m.clone());
        Ok(m)
    }
}
