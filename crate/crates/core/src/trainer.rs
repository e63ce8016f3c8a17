//! Training loop.
//!
//! Only the network's trainable tensors and the task head are optimized.
//! Batches are drawn from a generator seeded by `(seed, step)`, so a run
//! resumed from a checkpoint sees exactly the batches of an uninterrupted
//! run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapters::{context_inject_var, InjectionTarget};
use crate::config::{derive_seed, SenConfig, TaskKind};
use crate::error::{Error, Result};
use crate::head::LinearHead;
use crate::metrics::MetricRecord;
use crate::network::Sen;
use crate::nn::Module;
use crate::optim::AdamW;
use crate::tasks::{build_task, Batch, Dataset, SyntheticTask};
use crate::tensor::{Tape, Tensor, Var};

/// Samples per forward pass when evaluating or caching features.
const CHUNK: usize = 256;

/// Optimizer plus running training-loss accumulators.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub optimizer: AdamW,
    /// Sum and count of training losses since the last evaluation.
    pub loss_sum: f64,
    pub loss_count: usize,
}

impl TrainState {
    pub fn new(cfg: &SenConfig) -> Self {
        TrainState {
            optimizer: AdamW::new(&cfg.training),
            loss_sum: 0.0,
            loss_count: 0,
        }
    }

    pub fn step(&self) -> usize {
        self.optimizer.step_count()
    }
}

/// Test-set evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// Parity: classification accuracy. Injection: accuracy of the sign of
    /// the predicted offset along the task direction.
    pub accuracy: f64,
}

/// Features that never change during training.
#[derive(Debug)]
enum Cache {
    /// Pass-1 pooled features, `[N×d]` per modality.
    Initial { train: Vec<Tensor>, test: Vec<Tensor> },
    /// The whole network is constant: final contexts, `[N×d]`.
    Context { train: Tensor, test: Tensor },
}

pub fn head_outputs(cfg: &SenConfig) -> usize {
    match cfg.task.kind {
        TaskKind::Parity | TaskKind::Contrastive => 2,
        TaskKind::Injection => cfg.shared_dim,
    }
}

#[derive(Debug)]
pub struct Trainer {
    config: SenConfig,
    pub sen: Sen,
    pub head: LinearHead,
    pub state: TrainState,
    task: SyntheticTask,
    cache: Cache,
    arm: String,
    encoder_digest: String,
}

fn concat_rows(parts: Vec<Tensor>) -> Result<Tensor> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(&shape, data)
}

impl Trainer {
    /// Fresh model, head and optimizer for `config`.
    pub fn new(config: &SenConfig) -> Result<Self> {
        let sen = Sen::new(config)?;
        let head = LinearHead::new(config.shared_dim, head_outputs(config), config.head_seed());
        Self::from_parts(config, sen, head, TrainState::new(config))
    }

    /// Assembles a trainer from restored parts.
    pub fn from_parts(config: &SenConfig, sen: Sen, head: LinearHead, state: TrainState) -> Result<Self> {
        config.validate()?;
        if config.task.kind == TaskKind::Contrastive {
            return Err(Error::invalid("train", "the contrastive task is evaluation-only"));
        }
        let task = build_task(config)?;
        let m = sen.num_modalities();
        let cache = if sen.num_parameters() == 0 {
            Cache::Context {
                train: constant_contexts(&sen, &task.train, m)?,
                test: constant_contexts(&sen, &task.test, m)?,
            }
        } else {
            Cache::Initial {
                train: initial_features(&sen, &task.train, m)?,
                test: initial_features(&sen, &task.test, m)?,
            }
        };
        let encoder_digest = sen.encoder_digest();
        Ok(Trainer {
            config: config.clone(),
            sen,
            head,
            state,
            task,
            cache,
            arm: config.variant.as_str().to_string(),
            encoder_digest,
        })
    }

    /// Label used in the `arm` field of emitted metrics.
    pub fn with_arm(mut self, arm: impl Into<String>) -> Self {
        self.arm = arm.into();
        self
    }

    pub fn config(&self) -> &SenConfig {
        &self.config
    }

    pub fn task(&self) -> &SyntheticTask {
        &self.task
    }

    pub fn step(&self) -> usize {
        self.state.step()
    }

    /// Every optimized tensor, named `sen.*` or `head.*`.
    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        named_parameters_mut(&mut self.sen, &mut self.head)
    }

    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .sen
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (format!("sen.{n}"), t))
            .collect();
        out.extend(self.head.named_tensors().into_iter().map(|(n, t)| (format!("head.{n}"), t)));
        out
    }

    fn batch_indices(&self, step: usize) -> Vec<usize> {
        let n = self.task.train.len();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.batch_seed(), step as u64));
        (0..self.config.training.batch).map(|_| rng.random_range(0..n)).collect()
    }

    /// Context `[B×d]` for rows `idx` of a split.
    fn context(&self, tape: &mut Tape, split: &Dataset, cached: CachedRows, idx: &[usize]) -> Result<Var> {
        let m = self.sen.num_modalities();
        match cached {
            CachedRows::Context(ctx) => Ok(tape.constant(gather(ctx, idx))),
            CachedRows::Initial(initial) => {
                let batch = split.batch(idx, m);
                let inputs: Vec<Var> = batch.inputs.into_iter().map(|x| tape.constant(x)).collect();
                let init: Vec<Var> = initial.iter().map(|f| tape.constant(gather(f, idx))).collect();
                Ok(self.sen.forward_from(tape, &inputs, init)?.context)
            }
        }
    }

    fn cached(&self, test: bool) -> CachedRows<'_> {
        match (&self.cache, test) {
            (Cache::Context { train, .. }, false) => CachedRows::Context(train),
            (Cache::Context { test, .. }, true) => CachedRows::Context(test),
            (Cache::Initial { train, .. }, false) => CachedRows::Initial(train),
            (Cache::Initial { test, .. }, true) => CachedRows::Initial(test),
        }
    }

    /// Mean task loss over `idx`, plus the number of correct predictions.
    fn loss(&self, tape: &mut Tape, test: bool, idx: &[usize]) -> Result<(Var, usize)> {
        let split = if test { &self.task.test } else { &self.task.train };
        let ctx = self.context(tape, split, self.cached(test), idx)?;
        let out = self.head.forward(tape, ctx)?;
        let labels: Vec<usize> = idx.iter().map(|&i| split.labels[i]).collect();
        match self.config.task.kind {
            TaskKind::Parity | TaskKind::Contrastive => {
                let correct = tape
                    .value(out)
                    .chunks(2)
                    .zip(&labels)
                    .filter(|(l, &y)| usize::from(l[1] > l[0]) == y)
                    .count();
                Ok((tape.cross_entropy(out, &labels)?, correct))
            }
            TaskKind::Injection => {
                let b = self.batch_targets(split, idx);
                let target = InjectionTarget::new(&self.config.task.target_shape)?;
                let size = target.size();
                let offset = context_inject_var(tape, out, &target)?;
                let base = tape.constant(b.base.expect("injection base").reshaped(&[idx.len(), size])?);
                let pred = tape.add(base, offset)?;
                let y = tape.constant(b.targets.expect("injection targets").reshaped(&[idx.len(), size])?);
                let u = self.task.direction.as_ref().expect("injection direction").data();
                let correct = tape
                    .value(offset)
                    .chunks(size)
                    .zip(&labels)
                    .filter(|(o, &bit)| {
                        let along: f64 = o.iter().zip(u).map(|(a, b)| a * b).sum();
                        usize::from(along < 0.0) == bit
                    })
                    .count();
                Ok((tape.mse(pred, y)?, correct))
            }
        }
    }

    fn batch_targets(&self, split: &Dataset, idx: &[usize]) -> Batch {
        Batch {
            inputs: Vec::new(),
            labels: Vec::new(),
            base: split.base.as_ref().map(|t| gather(t, idx)),
            targets: split.targets.as_ref().map(|t| gather(t, idx)),
        }
    }

    /// One optimizer update; returns the batch loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let step = self.step();
        let idx = self.batch_indices(step);
        let mut tape = Tape::new();
        let (loss, _) = self.loss(&mut tape, false, &idx)?;
        let value = tape.value(loss)[0];
        if !value.is_finite() {
            return Err(Error::numeric("train", format!("loss is {value} at step {step}")));
        }
        let grads = tape.backward(loss)?;
        drop(tape);
        let mut params = named_parameters_mut(&mut self.sen, &mut self.head);
        grads.accumulate_into(params.iter_mut().map(|(_, t)| &mut **t))?;
        let stepped = self
            .state
            .optimizer
            .step(params.iter_mut().map(|(n, t)| (n.clone(), &mut **t)));
        params.into_iter().for_each(|(_, t)| t.clear_grad());
        stepped?;
        self.state.loss_sum += value;
        self.state.loss_count += 1;
        Ok(value)
    }

    /// Loss and accuracy over the whole test split.
    pub fn evaluate(&self) -> Result<Evaluation> {
        let n = self.task.test.len();
        let (mut loss, mut correct) = (0.0, 0);
        for start in (0..n).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
            let mut tape = Tape::new();
            let (l, c) = self.loss(&mut tape, true, &idx)?;
            loss += tape.value(l)[0] * idx.len() as f64;
            correct += c;
        }
        Ok(Evaluation {
            loss: loss / n as f64,
            accuracy: correct as f64 / n as f64,
        })
    }

    fn record(&self, metric: &str, value: f64) -> MetricRecord {
        MetricRecord {
            step: self.step(),
            arm: self.arm.clone(),
            metric: metric.to_string(),
            value,
            seed: self.config.seed,
        }
    }

    fn emit_eval(&mut self, sink: &mut dyn FnMut(&MetricRecord) -> Result<()>) -> Result<Evaluation> {
        if self.state.loss_count > 0 {
            let mean = self.state.loss_sum / self.state.loss_count as f64;
            sink(&self.record("train_loss", mean))?;
            self.state.loss_sum = 0.0;
            self.state.loss_count = 0;
        }
        let eval = self.evaluate()?;
        sink(&self.record("test_loss", eval.loss))?;
        sink(&self.record("test_accuracy", eval.accuracy))?;
        Ok(eval)
    }

    /// Trains until `until` updates have been applied (capped at the
    /// configured step count), evaluating at step 0, every `eval_every`
    /// steps and at the final step. Returns the last evaluation, if any.
    pub fn run(
        &mut self,
        until: usize,
        sink: &mut dyn FnMut(&MetricRecord) -> Result<()>,
    ) -> Result<Option<Evaluation>> {
        let total = self.config.training.steps;
        let until = until.min(total);
        let every = self.config.training.eval_every;
        let mut last = None;
        if self.step() == 0 {
            last = Some(self.emit_eval(sink)?);
        }
        while self.step() < until {
            self.train_step()?;
            let s = self.step();
            if s % every == 0 || s == total {
                last = Some(self.emit_eval(sink)?);
            }
        }
        self.assert_encoders_unchanged()?;
        Ok(last)
    }

    /// Fails if any encoder byte changed since construction.
    pub fn assert_encoders_unchanged(&self) -> Result<()> {
        let now = self.sen.encoder_digest();
        if now != self.encoder_digest {
            return Err(Error::invalid(
                "train",
                format!("encoder parameters changed: {} → {now}", self.encoder_digest),
            ));
        }
        Ok(())
    }
}

fn named_parameters_mut<'a>(sen: &'a mut Sen, head: &'a mut LinearHead) -> Vec<(String, &'a mut Tensor)> {
    let mut out = sen.named_tensors_mut();
    out.iter_mut().for_each(|(n, _)| *n = format!("sen.{n}"));
    let mut h = head.named_tensors_mut();
    h.iter_mut().for_each(|(n, _)| *n = format!("head.{n}"));
    out.extend(h);
    out
}

enum CachedRows<'a> {
    Initial(&'a [Tensor]),
    Context(&'a Tensor),
}

fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let per = t.numel() / t.shape()[0];
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(&shape, data).expect("gathered shape")
}

fn chunked<F>(split: &Dataset, m: usize, mut f: F) -> Result<Vec<Vec<Tensor>>>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Vec<Var>>,
{
    let n = split.len();
    let mut parts: Vec<Vec<Tensor>> = Vec::new();
    for start in (0..n).step_by(CHUNK) {
        let len = CHUNK.min(n - start);
        let mut tape = Tape::new();
        let inputs: Vec<Var> = split.inputs[..m]
            .iter()
            .map(|x| tape.constant(gather(x, &(start..start + len).collect::<Vec<_>>())))
            .collect();
        let outs = f(&mut tape, &inputs)?;
        let outs: Vec<Tensor> = outs.iter().map(|&v| tape.to_tensor(v)).collect();
        if parts.is_empty() {
            parts = vec![Vec::new(); outs.len()];
        }
        for (p, o) in parts.iter_mut().zip(outs) {
            p.push(o);
        }
    }
    Ok(parts)
}

fn initial_features(sen: &Sen, split: &Dataset, m: usize) -> Result<Vec<Tensor>> {
    chunked(split, m, |tape, inputs| sen.initial_features(tape, inputs))?
        .into_iter()
        .map(concat_rows)
        .collect()
}

fn constant_contexts(sen: &Sen, split: &Dataset, m: usize) -> Result<Tensor> {
    let parts = chunked(split, m, |tape, inputs| Ok(vec![sen.forward(tape, inputs)?.context]))?;
    concat_rows(parts.into_iter().next().expect("one output"))
}

/// Trains `config` from scratch to completion.
pub fn train(config: &SenConfig, sink: &mut dyn FnMut(&MetricRecord) -> Result<()>) -> Result<(Trainer, Option<Evaluation>)> {
    let mut trainer = Trainer::new(config)?;
    let eval = trainer.run(config.training.steps, sink)?;
    Ok((trainer, eval))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SenConfig {
        let mut cfg = SenConfig::default();
        cfg.shared_dim = 8;
        cfg.ra.layers = 1;
        cfg.ra.prompt_tokens = 2;
        cfg.task.train_samples = 64;
        cfg.task.test_samples = 32;
        cfg.training.steps = 6;
        cfg.training.batch = 8;
        cfg.training.eval_every = 3;
        cfg
    }

    fn collect(cfg: &SenConfig) -> Vec<MetricRecord> {
        let mut out = Vec::new();
        train(cfg, &mut |r| {
            out.push(r.clone());
            Ok(())
        })
        .unwrap();
        out
    }

    #[test]
    fn zero_steps_emit_initial_metrics_only() {
        let mut cfg = tiny();
        cfg.training.steps = 0;
        let m = collect(&cfg);
        assert_eq!(m.len(), 2);
        assert!(m.iter().all(|r| r.step == 0));
    }

    #[test]
    fn evaluations_follow_the_interval() {
        let m = collect(&tiny());
        let steps: Vec<(usize, &str)> = m.iter().map(|r| (r.step, r.metric.as_str())).collect();
        assert_eq!(
            steps,
            vec![
                (0, "test_loss"),
                (0, "test_accuracy"),
                (3, "train_loss"),
                (3, "test_loss"),
                (3, "test_accuracy"),
                (6, "train_loss"),
                (6, "test_loss"),
                (6, "test_accuracy"),
            ]
        );
    }

    #[test]
    fn optimizer_state_covers_exactly_the_trainable_tensors() {
        let (trainer, _) = train(&tiny(), &mut |_| Ok(())).unwrap();
        let names: Vec<String> = trainer.parameters().into_iter().map(|(n, _)| n).collect();
        let keys: Vec<String> = trainer.state.optimizer.state().keys().cloned().collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert!(keys.iter().all(|k| k.starts_with("sen.ra") || k.starts_with("head.")));
    }

    #[test]
    fn split_run_matches_uninterrupted_run() {
        let cfg = tiny();
        let full = collect(&cfg);
        let mut parts = Vec::new();
        let mut t = Trainer::new(&cfg).unwrap();
        t.run(4, &mut |r| {
            parts.push(r.clone());
            Ok(())
        })
        .unwrap();
        t.run(6, &mut |r| {
            parts.push(r.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(parts, full);
    }

    #[test]
    fn constant_arms_train_only_the_head() {
        let mut cfg = tiny();
        cfg.variant = crate::config::Variant::Baseline;
        let (trainer, _) = train(&cfg, &mut |_| Ok(())).unwrap();
        assert!(trainer.state.optimizer.state().keys().all(|k| k.starts_with("head.")));
    }

    #[test]
    fn injection_trains() {
        let mut cfg = tiny();
        cfg.task.kind = TaskKind::Injection;
        let m = collect(&cfg);
        assert!(m.iter().all(|r| r.value.is_finite()));
    }

    #[test]
    fn contrastive_is_not_trainable() {
        let mut cfg = tiny();
        cfg.task.kind = TaskKind::Contrastive;
        assert!(Trainer::new(&cfg).is_err());
    }
}
