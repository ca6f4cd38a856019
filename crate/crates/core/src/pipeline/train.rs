use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::data::{augment, BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::layers::Layer;
use crate::nets::Network;
use crate::ops::{softmax_cross_entropy, Mode};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub base_lr: f64,
    pub batch_size: usize,
    /// Iterations at which the learning rate is multiplied by `decay_factor`.
    pub lr_decay_points: Vec<usize>,
    pub decay_factor: f64,
    pub max_iters: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default)]
    pub augment: bool,
}

impl Default for TrainSchedule {
    /// Batch 128, learning rate 0.1 decayed tenfold at 32k and 48k of 64k
    /// iterations, momentum 0.9, weight decay 1e-4.
    fn default() -> Self {
        TrainSchedule {
            base_lr: 0.1,
            batch_size: 128,
            lr_decay_points: vec![32_000, 48_000],
            decay_factor: 0.1,
            max_iters: 64_000,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            augment: false,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.base_lr >= 0.0) || !(self.decay_factor > 0.0) {
            return Err(Error::config("learning rate must be >= 0 and decay factor > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("momentum must be in [0, 1) and weight decay >= 0"));
        }
        if self.lr_decay_points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("decay points must be strictly increasing"));
        }
        if self.lr_decay_points.last().is_some_and(|&p| p >= self.max_iters) {
            return Err(Error::config("decay points must precede max_iters"));
        }
        Ok(())
    }

    /// Learning rate in effect at `iter`; a decay point applies from its own
    /// iteration onward.
    pub fn lr_at(&self, iter: usize) -> f64 {
        let passed = self.lr_decay_points.iter().filter(|&&p| iter >= p).count();
        self.base_lr * self.decay_factor.powi(passed as i32)
    }
}

/// SGD with momentum and L2 weight decay:
/// `v = momentum * v + (g + wd * w)`, `w -= lr * v`.
pub struct Sgd<T: Real> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Applies one update to every parameter; returns the number of scalars updated.
    pub fn step(&mut self, net: &mut dyn Layer<T>, lr: f64) -> Result<usize> {
        let mut params = net.params_mut();
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::invalid("parameter set changed between optimizer steps"));
        }
        let (m, wd, lr) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        let mut updated = 0;
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let (w, g, v) = (p.value.data_mut(), p.grad.data(), v.data_mut());
            for i in 0..w.len() {
                v[i] = m * v[i] + g[i] + wd * w[i];
                w[i] -= lr * v[i];
            }
            updated += w.len();
        }
        Ok(updated)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub acc: f64,
}

/// Eval-mode accuracy over the whole training set after `iter + 1` steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iter: usize,
    pub top1: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    #[serde(default)]
    pub evals: Vec<EvalRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,lr,loss,acc\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{}", r.iter, r.lr, r.loss, r.acc);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Median loss over records with `lo <= iter < hi`.
    pub fn median_loss(&self, lo: usize, hi: usize) -> Option<f64> {
        let mut v: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.iter >= lo && r.iter < hi)
            .map(|r| r.loss)
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        Some(v[v.len() / 2])
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Record every `log_every` iterations (and always the last one).
    pub log_every: usize,
    /// Final checkpoint location.
    pub checkpoint: Option<PathBuf>,
    /// Stop early once a logged batch reaches this accuracy.
    pub stop_at_accuracy: Option<f64>,
    /// Score the full training set in eval mode every `eval_every` steps (0 disables).
    pub eval_every: usize,
}

/// Name of the first parameter, gradient or buffer holding a NaN or infinity.
pub fn first_non_finite<T: Real>(net: &mut dyn Layer<T>) -> Option<String> {
    for p in net.params_mut() {
        if !p.value.all_finite() {
            return Some(p.name);
        }
        if !p.grad.all_finite() {
            return Some(format!("{} (gradient)", p.name));
        }
    }
    net.buffers().into_iter().find(|b| !b.value.all_finite()).map(|b| b.name)
}

fn count_correct<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(n, &l)| argmax(logits.item(n)) == l)
        .count()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Runs `schedule.max_iters` SGD steps. Deterministic for a fixed seed.
pub fn train<T: Real>(
    net: &mut Network<T>,
    data: &Dataset,
    schedule: &TrainSchedule,
    opts: &TrainOptions,
) -> Result<TrainLog> {
    schedule.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if data.num_classes > net.num_classes() {
        return Err(Error::config(format!(
            "dataset has {} classes, network head has {}",
            data.num_classes,
            net.num_classes()
        )));
    }
    let mut sampler = BatchSampler::new(data.len(), schedule.seed);
    let mut opt = Sgd::new(schedule.momentum, schedule.weight_decay);
    let mut log = TrainLog::default();
    let every = opts.log_every.max(1);
    for iter in 0..schedule.max_iters {
        let idx = sampler.next_batch(schedule.batch_size);
        let (mut x, labels) = data.batch::<T>(&idx)?;
        if schedule.augment {
            x = augment(&x, sampler.rng());
        }
        let logits = net.forward(&x, Mode::Train)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, &labels)?;
        if !loss.is_finite() || !logits.all_finite() {
            let culprit = first_non_finite(net).unwrap_or_else(|| "logits".to_string());
            return Err(Error::NonFinite(format!("iteration {iter}: first non-finite tensor is {culprit}")));
        }
        net.backward(&dlogits)?;
        let lr = schedule.lr_at(iter);
        opt.step(net, lr)?;
        let last = iter + 1 == schedule.max_iters;
        if iter % every == 0 || last {
            let acc = count_correct(&logits, &labels) as f64 / labels.len() as f64;
            log.records.push(LogRecord { iter, lr, loss, acc });
            if opts.stop_at_accuracy.is_some_and(|a| acc >= a) {
                break;
            }
        }
        if opts.eval_every > 0 && (iter + 1) % opts.eval_every == 0 {
            let r = evaluate(net, data, schedule.batch_size)?;
            log.evals.push(EvalRecord {
                iter,
                top1: r.top1,
                loss: r.loss,
            });
        }
    }
    if let Some(path) = &opts.checkpoint {
        let iteration = log.records.last().map_or(0, |r| r.iter + 1);
        save_checkpoint(net, path, iteration, Some(schedule))?;
    }
    Ok(log)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub top1: f64,
    pub loss: f64,
}

/// Eval-mode accuracy and mean cross-entropy. Batch-norm statistics are not touched.
pub fn evaluate<T: Real>(net: &mut Network<T>, data: &Dataset, batch_size: usize) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let bs = batch_size.max(1);
    let (mut correct, mut loss_sum) = (0usize, 0.0f64);
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(bs) {
        let (x, labels) = data.batch::<T>(chunk)?;
        let logits = net.forward(&x, Mode::Eval)?;
        let (loss, _) = softmax_cross_entropy(&logits, &labels)?;
        loss_sum += loss * chunk.len() as f64;
        correct += count_correct(&logits, &labels);
    }
    Ok(EvalResult {
        top1: correct as f64 / data.len() as f64,
        loss: loss_sum / data.len() as f64,
    })
}

/// Eval-mode logits for the whole dataset, batch by batch.
pub fn predict<T: Real>(net: &mut Network<T>, data: &Dataset, batch_size: usize) -> Result<Vec<Tensor<T>>> {
    let all: Vec<usize> = (0..data.len()).collect();
    all.chunks(batch_size.max(1))
        .map(|chunk| {
            let (x, _) = data.batch::<T>(chunk)?;
            net.forward(&x, Mode::Eval)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::build_shiftresnet;
    use crate::pipeline::data::synth_dataset;

    fn small_schedule(lr: f64, iters: usize) -> TrainSchedule {
        TrainSchedule {
            base_lr: lr,
            batch_size: 4,
            lr_decay_points: vec![],
            max_iters: iters,
            weight_decay: 0.0,
            ..TrainSchedule::default()
        }
    }

    #[test]
    fn schedule_decays_at_points() {
        let s = TrainSchedule::default();
        assert_eq!(s.lr_at(0), 0.1);
        assert!((s.lr_at(31_999) - 0.1).abs() < 1e-15);
        assert!((s.lr_at(32_000) - 0.01).abs() < 1e-15);
        assert!((s.lr_at(48_000) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn schedule_validation() {
        let mut s = TrainSchedule::default();
        s.lr_decay_points = vec![10, 10];
        assert!(s.validate().is_err());
        s.lr_decay_points = vec![64_000];
        assert!(s.validate().is_err());
        s.lr_decay_points = vec![];
        s.batch_size = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0f32; 4]), 0);
    }

    #[test]
    fn zero_lr_is_a_fixpoint() {
        let data = synth_dataset(8, 4, (3, 8, 8), 0).unwrap();
        let mut net = build_shiftresnet::<f32>(20, 1.0, 4, 0).unwrap();
        let before: Vec<_> = net.params().into_iter().map(|p| p.value.clone()).collect();
        let s = TrainSchedule {
            momentum: 0.0,
            ..small_schedule(0.0, 3)
        };
        train(&mut net, &data, &s, &TrainOptions::default()).unwrap();
        for (b, p) in before.iter().zip(net.params()) {
            assert_eq!(b, p.value);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = synth_dataset(8, 4, (3, 8, 8), 0).unwrap();
        let run = || {
            let mut net = build_shiftresnet::<f32>(20, 1.0, 4, 0).unwrap();
            let log = train(&mut net, &data, &small_schedule(0.05, 2), &TrainOptions::default()).unwrap();
            (log, net.params().into_iter().map(|p| p.value.clone()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn optimizer_updates_every_parameter() {
        let data = synth_dataset(4, 4, (3, 8, 8), 0).unwrap();
        let mut net = build_shiftresnet::<f32>(20, 1.0, 4, 0).unwrap();
        let (x, labels) = data.batch::<f32>(&[0, 1, 2, 3]).unwrap();
        let logits = net.forward(&x, Mode::Train).unwrap();
        let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
        net.backward(&g).unwrap();
        let updated = Sgd::new(0.9, 1e-4).step(&mut net, 0.1).unwrap();
        assert_eq!(updated as u64, crate::accounting::count_params(&net));
    }

    #[test]
    fn nan_is_diagnosed() {
        let data = synth_dataset(4, 4, (3, 8, 8), 0).unwrap();
        let mut net = build_shiftresnet::<f32>(20, 1.0, 4, 0).unwrap();
        net.head.bias.data_mut()[0] = f32::NAN;
        let err = train(&mut net, &data, &small_schedule(0.1, 1), &TrainOptions::default()).unwrap_err();
        assert!(err.to_string().contains("head.bias"), "{err}");
    }

    #[test]
    fn evaluate_uniform_logits_is_chance() {
        let data = synth_dataset(20, 10, (3, 8, 8), 0).unwrap();
        let mut net = build_shiftresnet::<f32>(20, 1.0, 10, 0).unwrap();
        net.head.weight.fill(0.0);
        let r = evaluate(&mut net, &data, 7).unwrap();
        assert!((r.top1 - 0.1).abs() < 1e-12);
        assert!((r.loss - 10f64.ln()).abs() < 1e-5);
        let empty = data.take(0).unwrap();
        assert!(evaluate(&mut net, &empty, 4).is_err());
    }

    #[test]
    fn evaluate_leaves_running_stats() {
        let data = synth_dataset(10, 10, (3, 8, 8), 0).unwrap();
        let mut net = build_shiftresnet::<f32>(20, 1.0, 10, 0).unwrap();
        let before: Vec<_> = net.buffers().into_iter().map(|b| b.value.clone()).collect();
        evaluate(&mut net, &data, 5).unwrap();
        for (b, a) in before.iter().zip(net.buffers()) {
            assert_eq!(b, a.value);
        }
    }

    #[test]
    fn log_csv_columns() {
        let log = TrainLog {
            records: vec![LogRecord {
                iter: 0,
                lr: 0.1,
                loss: 2.3,
                acc: 0.25,
            }],
            evals: vec![],
        };
        assert_eq!(log.to_csv(), "iter,lr,loss,acc\n0,0.1,2.3,0.25\n");
        assert_eq!(log.median_loss(0, 1), Some(2.3));
        assert_eq!(log.median_loss(1, 2), None);
    }
}
