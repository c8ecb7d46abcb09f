//! Optimizer, learning-rate schedule, token batching and the training loop.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore};
use crate::checkpoint::{checkpoint_path, prune_checkpoints, Checkpoint};
use crate::error::{Error, Result};
use crate::model::{Model, TrainingBatch};

/// A source/target pair of vocabulary ids, without specials.
pub type EncodedPair = (Vec<usize>, Vec<usize>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub max_tokens_per_batch: usize,
    pub max_epochs: u64,
    /// Save every this many steps; `None` saves at the end of each epoch.
    pub checkpoint_every: Option<u64>,
    pub keep_last: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; off when `None`.
    pub clip_norm: Option<f64>,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 7e-4,
            warmup_steps: 6000,
            max_tokens_per_batch: 4096,
            max_epochs: 100,
            checkpoint_every: None,
            keep_last: 5,
            seed: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            clip_norm: None,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr must be positive");
        }
        if self.warmup_steps == 0 || self.max_tokens_per_batch == 0 || self.max_epochs == 0 {
            return bad("warmup_steps, max_tokens_per_batch and max_epochs must be positive");
        }
        if self.keep_last == 0 {
            return bad("keep_last must be at least 1");
        }
        if self.checkpoint_every == Some(0) || self.max_steps == Some(0) {
            return bad("checkpoint_every and max_steps must be positive when set");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0) {
            return bad("clip_norm must be positive when set");
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr`, then `peak_lr * sqrt(warmup / step)`.
pub fn lr_at_step(step: u64, cfg: &TrainConfig) -> f64 {
    let (s, w) = (step as f64, cfg.warmup_steps as f64);
    if step <= cfg.warmup_steps {
        cfg.peak_lr * s / w
    } else {
        cfg.peak_lr * (w / s).sqrt()
    }
}

/// Adam with bias correction; one moment buffer pair per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Adam { beta1, beta2, eps, t: 0, m: zeros(), v: zeros() }
    }

    pub fn from_config(store: &ParamStore, cfg: &TrainConfig) -> Self {
        Adam::new(store, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// Applies one update from the gradients accumulated in `store`.
    ///
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Invalid(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        if let Some(p) = store.iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(Error::NonFinite(format!("gradient of parameter `{}`", p.name)));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.iter().flat_map(|p| p.grad.iter()).map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        store.iter_mut().for_each(|p| p.grad.iter_mut().for_each(|g| *g *= k));
    }
    norm
}

/// Padded token cost of a batch as the model sees it (source gets `</s>`, target gets `<s>`/`</s>`).
pub fn batch_cost(pairs: &[EncodedPair], members: &[usize]) -> usize {
    let src = members.iter().map(|&i| pairs[i].0.len() + 1).max().unwrap_or(0);
    let tgt = members.iter().map(|&i| pairs[i].1.len() + 1).max().unwrap_or(0);
    members.len() * src.max(tgt)
}

/// Groups pair indices into batches whose padded token cost stays within `max_tokens`.
///
/// Pairs are sorted by target length (then source length, then index) and
/// filled greedily; batch order is shuffled with `seed`. A pair that alone
/// exceeds the cap becomes a singleton batch.
pub fn make_token_batches(pairs: &[EncodedPair], max_tokens: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&i| (pairs[i].1.len(), pairs[i].0.len(), i));
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    for i in order {
        current.push(i);
        if batch_cost(pairs, &current) > max_tokens {
            current.pop();
            if !current.is_empty() {
                batches.push(std::mem::take(&mut current));
            }
            current.push(i);
            if batch_cost(pairs, &current) > max_tokens {
                log::warn!(
                    "pair {i} ({} source / {} target tokens) exceeds the batch cap of {max_tokens} tokens; using a singleton batch",
                    pairs[i].0.len(),
                    pairs[i].1.len()
                );
                batches.push(std::mem::take(&mut current));
            }
        }
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    batches
}

pub fn training_batch(pairs: &[EncodedPair], members: &[usize]) -> Result<TrainingBatch> {
    let refs: Vec<(&[usize], &[usize])> =
        members.iter().map(|&i| (pairs[i].0.as_slice(), pairs[i].1.as_slice())).collect();
    TrainingBatch::from_pairs(&refs)
}

/// Token-weighted mean loss over `pairs`, no dropout.
pub fn evaluate_loss(model: &Model, pairs: &[EncodedPair], max_tokens: usize, smoothing: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0;
    for members in make_token_batches(pairs, max_tokens, 0) {
        let batch = training_batch(pairs, &members)?;
        let mut g = Graph::new();
        let loss = model.loss(&mut g, &batch, smoothing)?;
        let n = batch.target_tokens();
        total += g.value(loss).data()[0] * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::Invalid("empty evaluation set".into()));
    }
    Ok(total / tokens as f64)
}

/// Teacher-forced next-token accuracy over `pairs`.
pub fn evaluate_accuracy(model: &Model, pairs: &[EncodedPair], max_tokens: usize) -> Result<f64> {
    let (mut correct, mut total) = (0, 0);
    for members in make_token_batches(pairs, max_tokens, 0) {
        let (c, t) = model.token_accuracy(&training_batch(pairs, &members)?)?;
        correct += c;
        total += t;
    }
    if total == 0 {
        return Err(Error::Invalid("empty evaluation set".into()));
    }
    Ok(correct as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: u64,
    pub step: u64,
    pub train_loss: f64,
    pub dev_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: u64,
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochSummary>,
}

/// Where and how to write checkpoints during training.
#[derive(Clone, Copy, Debug)]
pub struct CheckpointSink<'a> {
    pub dir: &'a Path,
    /// Run configuration echoed into every manifest.
    pub config: &'a str,
}

/// Returned by the epoch callback of [`train_loop_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

pub fn train_loop(
    model: &mut Model,
    cfg: &TrainConfig,
    train: &[EncodedPair],
    dev: &[EncodedPair],
    sink: Option<CheckpointSink<'_>>,
) -> Result<TrainReport> {
    train_loop_with(model, cfg, train, dev, sink, |_, _| Flow::Continue)
}

/// Runs the training loop, calling `on_epoch` after every completed epoch.
pub fn train_loop_with(
    model: &mut Model,
    cfg: &TrainConfig,
    train: &[EncodedPair],
    dev: &[EncodedPair],
    sink: Option<CheckpointSink<'_>>,
    mut on_epoch: impl FnMut(&Model, &EpochSummary) -> Flow,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("training corpus is empty".into()));
    }
    if let Some(s) = sink {
        std::fs::create_dir_all(s.dir)?;
    }
    let smoothing = model.config().label_smoothing;
    let mut adam = Adam::from_config(model.params(), cfg);
    let mut report = TrainReport::default();
    let mut step = 0u64;
    let save = |model: &Model, step: u64, epoch: u64| -> Result<()> {
        if let Some(s) = sink {
            Checkpoint::new(step, epoch, s.config, model.named_tensors())?.save(&checkpoint_path(s.dir, step))?;
            prune_checkpoints(s.dir, cfg.keep_last)?;
        }
        Ok(())
    };
    'epochs: for epoch in 1..=cfg.max_epochs {
        let (mut loss_sum, mut tokens) = (0.0, 0usize);
        let mut finished = false;
        for members in make_token_batches(train, cfg.max_tokens_per_batch, cfg.seed.wrapping_add(epoch)) {
            step += 1;
            let batch = training_batch(train, &members)?;
            let mut g = Graph::training(cfg.seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let loss = model.loss(&mut g, &batch, smoothing).map_err(|e| at_step(e, step))?;
            let value = g.value(loss).data()[0];
            model.params_mut().zero_grads();
            g.backward(loss, model.params_mut()).map_err(|e| at_step(e, step))?;
            if let Some(c) = cfg.clip_norm {
                clip_grad_norm(model.params_mut(), c);
            }
            adam.step(model.params_mut(), lr_at_step(step, cfg)).map_err(|e| at_step(e, step))?;
            report.step_losses.push(value);
            let n = batch.target_tokens();
            loss_sum += value * n as f64;
            tokens += n;
            if cfg.checkpoint_every.is_some_and(|every| step.is_multiple_of(every)) {
                save(model, step, epoch)?;
            }
            if cfg.max_steps.is_some_and(|m| step >= m) {
                finished = true;
                break;
            }
        }
        let dev_loss =
            if dev.is_empty() { None } else { Some(evaluate_loss(model, dev, cfg.max_tokens_per_batch, smoothing)?) };
        let summary = EpochSummary { epoch, step, train_loss: loss_sum / tokens.max(1) as f64, dev_loss };
        match dev_loss {
            Some(d) => log::info!("epoch {epoch} step {step} train_loss {:.4} dev_loss {d:.4}", summary.train_loss),
            None => log::info!("epoch {epoch} step {step} train_loss {:.4}", summary.train_loss),
        }
        if cfg.checkpoint_every.is_none() {
            save(model, step, epoch)?;
        }
        let flow = on_epoch(model, &summary);
        report.epochs.push(summary);
        if finished || flow == Flow::Stop {
            break 'epochs;
        }
    }
    report.steps = step;
    Ok(report)
}

fn at_step(e: Error, step: u64) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{m} at step {step}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_points() {
        let cfg = TrainConfig::default();
        assert!((lr_at_step(6000, &cfg) - 7e-4).abs() < 1e-18);
        assert!((lr_at_step(3000, &cfg) - 3.5e-4).abs() < 1e-18);
        assert!((lr_at_step(24000, &cfg) - 3.5e-4).abs() < 1e-18);
        assert!(lr_at_step(6001, &cfg) < lr_at_step(6000, &cfg));
    }

    fn store_with(values: Vec<f64>, grads: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::vector(values)).unwrap();
        s.get_mut(id).grad = grads;
        s
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut s = store_with(vec![1.0, -2.0], vec![0.0, 0.0]);
        let mut adam = Adam::new(&s, 0.9, 0.98, 1e-9);
        adam.step(&mut s, 0.1).unwrap();
        assert_eq!(s.get(s.id("w").unwrap()).value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut s = store_with(vec![0.0, 0.0, 0.0], vec![3.0, -0.5, 1e-3]);
        let mut adam = Adam::new(&s, 0.9, 0.98, 1e-9);
        adam.step(&mut s, 0.01).unwrap();
        for (w, sign) in s.get(s.id("w").unwrap()).value.data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((w - sign * 0.01).abs() < 1e-7, "{w}");
        }
    }

    #[test]
    fn adam_nan_names_parameter() {
        let mut s = store_with(vec![0.0], vec![f64::NAN]);
        let mut adam = Adam::new(&s, 0.9, 0.98, 1e-9);
        let err = adam.step(&mut s, 0.01).unwrap_err().to_string();
        assert!(err.contains("`w`"), "{err}");
        assert_eq!(s.get(s.id("w").unwrap()).value.data(), &[0.0]);
    }

    #[test]
    fn clipping_scales_to_max_norm() {
        let mut s = store_with(vec![0.0, 0.0], vec![3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut s, 1.0), 5.0);
        let g = &s.get(s.id("w").unwrap()).grad;
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn batching_partitions_and_respects_cap() {
        let pairs: Vec<EncodedPair> = (0..50).map(|i| (vec![4; 1 + i % 7], vec![5; 1 + (i * 3) % 11])).collect();
        let batches = make_token_batches(&pairs, 40, 3);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..50).collect::<Vec<_>>());
        assert!(batches.iter().all(|b| batch_cost(&pairs, b) <= 40));
        assert_eq!(batches, make_token_batches(&pairs, 40, 3));
    }

    #[test]
    fn oversized_pair_is_singleton() {
        let pairs: Vec<EncodedPair> =
            vec![(vec![4; 3], vec![4; 3]), (vec![4; 30], vec![4; 2]), (vec![4; 2], vec![4; 2])];
        let batches = make_token_batches(&pairs, 10, 0);
        assert!(batches.contains(&vec![1]));
        assert_eq!(batches.iter().map(Vec::len).sum::<usize>(), 3);
    }

    #[test]
    fn config_rejects_zero_keep() {
        let cfg = TrainConfig { keep_last: 0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
