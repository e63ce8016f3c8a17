//! The full network: frozen encoders plus recursive feedback.
//!
//! Pass 1 encodes every modality without prompts. Each feedback layer then
//! turns the current pooled latents into prompt tokens, and every encoder
//! runs again on its original input with those prompts prepended. The same
//! frozen encoder instance serves every pass.
//!
//! Four arms share this structure and differ only in the feedback layer:
//!
//! | variant       | feedback                                      | trainable |
//! |---------------|-----------------------------------------------|-----------|
//! | `sen`         | RA layers                                     | yes       |
//! | `baseline`    | frozen projection of the concatenated latents | no        |
//! | `transformer` | shared transformer block + down-projections   | yes       |
//! | `pure`        | none (single pass)                            | no        |

use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::{SenConfig, Variant};
use crate::encoder::{build_super_neuron, SuperNeuron};
use crate::error::{Error, Result};
use crate::nn::{join, Linear, Module, TransformerBlock};
use crate::ra::{RaLayer, RaShape};
use crate::tensor::{Tape, Tensor, Var};

/// MLP width of the transformer baseline block, as a multiple of `d`.
pub const TRANSFORMER_MLP_RATIO: usize = 4;

/// Batched network output.
#[derive(Clone, Debug)]
pub struct SenOutput {
    /// One `[batch×d]` pooled feature per modality.
    pub finals: Vec<Var>,
    /// Modality mean of `finals`, `[batch×d]`.
    pub context: Var,
}

/// One feedback layer of the transformer baseline.
#[derive(Clone, Debug)]
pub struct TransformerFeedback {
    pub block: TransformerBlock,
    /// Per-modality `M·d → k·d` projections, zero-initialized.
    pub down: Vec<Linear>,
}

impl TransformerFeedback {
    pub fn parameter_count(m: usize, d: usize, k: usize) -> usize {
        TransformerBlock::parameter_count(d, TRANSFORMER_MLP_RATIO * d) + m * (m * d * k * d + k * d)
    }
}

impl Module for TransformerFeedback {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.block.visit(&join(prefix, "block"), f);
        for (m, l) in self.down.iter().enumerate() {
            l.visit(&join(prefix, &format!("down{m}")), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        let TransformerFeedback { block, down } = self;
        block.visit_mut(&join(prefix, "block"), f);
        for (m, l) in down.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("down{m}")), f);
        }
    }
}

#[derive(Debug)]
pub struct Sen {
    config: SenConfig,
    neurons: Vec<SuperNeuron>,
    /// Trainable RA layers (`sen` variant with `k ≥ 1`).
    pub ra_layers: Vec<RaLayer>,
    /// Trainable feedback of the `transformer` variant.
    pub transformer_layers: Vec<TransformerFeedback>,
    /// Frozen `M·d → k·d` projection of the `baseline` variant.
    projection: Option<Tensor>,
    rounds: usize,
    invocations: Cell<usize>,
}

impl Sen {
    pub fn new(config: &SenConfig) -> Result<Self> {
        config.validate()?;
        let neurons = config
            .encoder_configs()
            .iter()
            .zip(config.encoder_seeds())
            .map(|(c, s)| build_super_neuron(c, s))
            .collect::<Result<Vec<_>>>()?;
        let m = neurons.len();
        let (d, k) = (config.shared_dim, config.ra.prompt_tokens);
        let rounds = match config.variant {
            Variant::Pure => 0,
            _ => config.feedback_layers(),
        };

        let mut rng = ChaCha8Rng::seed_from_u64(config.ra_seed());
        let ra_layers = if config.variant == Variant::Sen && k > 0 {
            (0..rounds)
                .map(|_| RaLayer::new(config.ra_shape(), &mut rng))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let transformer_layers = if config.variant == Variant::Transformer && k > 0 {
            (0..rounds)
                .map(|_| {
                    let mut block = TransformerBlock::new(d, 1, TRANSFORMER_MLP_RATIO * d, 0.02, &mut rng);
                    block.visit_mut("", &mut |_, t| t.set_requires_grad(true));
                    let down = (0..m).map(|_| Linear::zeros(m * d, k * d, true)).collect::<Vec<_>>();
                    let mut layer = TransformerFeedback { block, down };
                    layer.visit_mut("", &mut |_, t| t.set_requires_grad(true));
                    layer
                })
                .collect()
        } else {
            Vec::new()
        };
        let projection = (config.variant == Variant::Baseline && k > 0).then(|| {
            let mut prng = ChaCha8Rng::seed_from_u64(config.projection_seed());
            Tensor::randn(&[m * d, k * d], 1.0 / ((m * d) as f64).sqrt(), &mut prng).frozen()
        });

        Ok(Sen {
            config: config.clone(),
            neurons,
            ra_layers,
            transformer_layers,
            projection,
            rounds,
            invocations: Cell::new(0),
        })
    }

    pub fn config(&self) -> &SenConfig {
        &self.config
    }

    pub fn neurons(&self) -> &[SuperNeuron] {
        &self.neurons
    }

    pub fn num_modalities(&self) -> usize {
        self.neurons.len()
    }

    pub fn shared_dim(&self) -> usize {
        self.config.shared_dim
    }

    /// Feedback rounds performed by [`Sen::forward`]; encoder passes are
    /// `rounds + 1`.
    pub fn rounds(&self) -> usize {
        self.rounds
    }

    /// Encoder invocations since construction (one per modality per pass).
    pub fn encoder_invocations(&self) -> usize {
        self.invocations.get()
    }

    pub fn ra_shape(&self) -> RaShape {
        self.config.ra_shape()
    }

    /// Every trainable tensor, in a fixed order.
    pub fn trainable_parameters(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    /// `(frozen, trainable)` element counts. The baseline projection is a
    /// fixed constant and counts as neither.
    pub fn count_parameters(&self) -> (usize, usize) {
        let frozen = self.neurons.iter().map(Module::num_parameters).sum();
        (frozen, self.num_parameters())
    }

    /// Closed-form trainable count for a config.
    pub fn closed_form_trainable(config: &SenConfig) -> usize {
        let (m, d, k) = (config.num_modalities(), config.shared_dim, config.ra.prompt_tokens);
        if k == 0 {
            return 0;
        }
        let rounds = config.feedback_layers();
        match config.variant {
            Variant::Sen => rounds * config.ra_shape().parameter_count(),
            Variant::Transformer => rounds * TransformerFeedback::parameter_count(m, d, k),
            Variant::Baseline | Variant::Pure => 0,
        }
    }

    /// Hex SHA-256 over every encoder tensor's little-endian bytes, in
    /// modality then visit order.
    pub fn encoder_digest(&self) -> String {
        let mut h = Sha256::new();
        for n in &self.neurons {
            for (_, t) in n.named_tensors() {
                h.update(t.le_bytes().collect::<Vec<u8>>());
            }
        }
        hex::encode(h.finalize())
    }

    fn check_inputs(&self, tape: &Tape, inputs: &[Var]) -> Result<usize> {
        if inputs.len() != self.neurons.len() {
            return Err(Error::invalid(
                "sen_forward",
                format!("expected {} modality inputs, got {}", self.neurons.len(), inputs.len()),
            ));
        }
        let batch = tape.shape(inputs[0]).first().copied().unwrap_or(0);
        for &x in inputs {
            if tape.shape(x).first() != Some(&batch) {
                return Err(Error::shape("sen_forward", tape.shape(inputs[0]), tape.shape(x)));
            }
        }
        Ok(batch)
    }

    fn encode_all(&self, tape: &mut Tape, inputs: &[Var], prompts: Option<&[Var]>) -> Result<Vec<Var>> {
        self.neurons
            .iter()
            .enumerate()
            .map(|(m, n)| {
                self.invocations.set(self.invocations.get() + 1);
                Ok(n.encode(tape, inputs[m], prompts.map(|p| p[m]))?.pooled)
            })
            .collect()
    }

    /// Pass-1 pooled features (`[batch×d]` per modality). They depend only
    /// on the inputs, so callers may compute them once and reuse them.
    pub fn initial_features(&self, tape: &mut Tape, inputs: &[Var]) -> Result<Vec<Var>> {
        self.check_inputs(tape, inputs)?;
        self.encode_all(tape, inputs, None)
    }

    /// Runs the configured variant.
    pub fn forward(&self, tape: &mut Tape, inputs: &[Var]) -> Result<SenOutput> {
        let initial = self.initial_features(tape, inputs)?;
        self.forward_from(tape, inputs, initial)
    }

    /// Runs the configured variant from precomputed pass-1 features.
    pub fn forward_from(&self, tape: &mut Tape, inputs: &[Var], initial: Vec<Var>) -> Result<SenOutput> {
        self.check_inputs(tape, inputs)?;
        if initial.len() != self.neurons.len() {
            return Err(Error::invalid("sen_forward", "one initial feature per modality is required"));
        }
        let mut feats = initial;
        for round in 0..self.rounds {
            let prompts = self.feedback(tape, round, &feats)?;
            feats = self.encode_all(tape, inputs, prompts.as_deref())?;
        }
        let context = average(tape, &feats)?;
        Ok(SenOutput { finals: feats, context })
    }

    /// Prompts for the given round, or `None` when the arm injects nothing.
    fn feedback(&self, tape: &mut Tape, round: usize, feats: &[Var]) -> Result<Option<Vec<Var>>> {
        let k = self.config.ra.prompt_tokens;
        if k == 0 {
            return Ok(None);
        }
        match self.config.variant {
            Variant::Sen => Ok(Some(self.ra_layers[round].forward(tape, feats)?)),
            Variant::Baseline => {
                let projection = self.projection.as_ref().expect("baseline projection");
                let p = self.projected(tape, feats, projection)?;
                Ok(Some(vec![p; feats.len()]))
            }
            Variant::Transformer => Ok(Some(self.transformer_feedback(tape, round, feats)?)),
            Variant::Pure => Ok(None),
        }
    }

    /// `concat(feats) · P` reshaped to `[batch×k×d]`.
    fn projected(&self, tape: &mut Tape, feats: &[Var], projection: &Tensor) -> Result<Var> {
        let (d, k) = (self.shared_dim(), self.config.ra.prompt_tokens);
        let cat = tape.concat(feats, 1)?;
        let batch = tape.shape(cat)[0];
        let p = tape.leaf(projection);
        let out = tape.matmul(cat, p)?;
        tape.reshape(out, &[batch, k, d])
    }

    fn transformer_feedback(&self, tape: &mut Tape, round: usize, feats: &[Var]) -> Result<Vec<Var>> {
        let layer = &self.transformer_layers[round];
        let (m, d, k) = (feats.len(), self.shared_dim(), self.config.ra.prompt_tokens);
        let cat = tape.concat(feats, 1)?;
        let batch = tape.shape(cat)[0];
        let seq = tape.reshape(cat, &[batch, m, d])?;
        let mixed = layer.block.forward(tape, seq)?;
        let flat = tape.reshape(mixed, &[batch, m * d])?;
        layer
            .down
            .iter()
            .map(|lin| {
                let p = lin.forward(tape, flat)?;
                tape.reshape(p, &[batch, k, d])
            })
            .collect()
    }

    /// Single-sample forward: `inputs[m]` is `[n_m×input_dim_m]`. Returns
    /// `M` final features `[d]` and the context `[d]`.
    pub fn forward_sample(&self, inputs: &[Tensor]) -> Result<(Vec<Tensor>, Tensor)> {
        let mut tape = Tape::new();
        let vars = inputs
            .iter()
            .map(|x| {
                let mut s = vec![1];
                s.extend_from_slice(x.shape());
                Ok(tape.constant(x.clone().reshaped(&s)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let out = self.forward(&mut tape, &vars)?;
        let d = self.shared_dim();
        let finals = out
            .finals
            .iter()
            .map(|&f| tape.to_tensor(f).reshaped(&[d]))
            .collect::<Result<Vec<_>>>()?;
        Ok((finals, tape.to_tensor(out.context).reshaped(&[d])?))
    }
}

/// Elementwise mean of `M` equally shaped `[batch×d]` features, taken as a
/// reduce-mean over the stacked modality axis.
pub fn average(tape: &mut Tape, feats: &[Var]) -> Result<Var> {
    let first = *feats
        .first()
        .ok_or_else(|| Error::invalid("average_features", "no features"))?;
    let shape = tape.shape(first).to_vec();
    if shape.len() != 2 {
        return Err(Error::invalid("average_features", format!("expected [batch×d], got {shape:?}")));
    }
    let cat = tape.concat(feats, 1)?;
    let stacked = tape.reshape(cat, &[shape[0], feats.len(), shape[1]])?;
    tape.mean(stacked, 1)
}

impl Module for Sen {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, l) in self.ra_layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("ra{i}")), f);
        }
        for (i, l) in self.transformer_layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("xf{i}")), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        let Sen {
            ra_layers,
            transformer_layers,
            ..
        } = self;
        for (i, l) in ra_layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("ra{i}")), f);
        }
        for (i, l) in transformer_layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("xf{i}")), f);
        }
    }
}

/// Overwrites every trainable tensor with seeded Gaussian values, so that
/// zero-initialized layers carry generic weights.
pub fn randomize_trainable<M: Module + ?Sized>(model: &mut M, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.visit_mut("", &mut |_, t| {
        if t.requires_grad() {
            let fresh = Tensor::randn(t.shape(), std, &mut rng);
            t.data_mut().copy_from_slice(fresh.data());
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PassMode;

    fn small(variant: Variant, layers: usize) -> SenConfig {
        let mut cfg = SenConfig::default();
        cfg.variant = variant;
        cfg.ra.layers = layers;
        cfg
    }

    fn inputs(cfg: &SenConfig, batch: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cfg.modalities
            .iter()
            .map(|m| Tensor::randn(&[batch, m.seq_len, m.input_dim], 1.0, &mut rng))
            .collect()
    }

    fn run(sen: &Sen, xs: &[Tensor]) -> (Vec<Tensor>, Tensor) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = sen.forward(&mut tape, &vars).unwrap();
        (out.finals.iter().map(|&f| tape.to_tensor(f)).collect(), tape.to_tensor(out.context))
    }

    #[test]
    fn default_trainable_count() {
        let sen = Sen::new(&SenConfig::default()).unwrap();
        assert_eq!(sen.count_parameters().1, 12816);
        assert_eq!(Sen::closed_form_trainable(sen.config()), 12816);
        let mut cfg = SenConfig::default();
        cfg.ra.learnable_prompt = false;
        let without = Sen::new(&cfg).unwrap();
        assert_eq!(12816 - without.count_parameters().1, 3 * 4 * 16 * 3);
    }

    #[test]
    fn frozen_count_matches_encoder_closed_form() {
        let sen = Sen::new(&SenConfig::default()).unwrap();
        let per = sen.config().encoder_configs()[0].parameter_count();
        assert_eq!(sen.count_parameters().0, 3 * per);
        assert!(sen.neurons().iter().all(SuperNeuron::is_frozen));
        assert!(sen.trainable_parameters().iter().all(|t| t.requires_grad()));
    }

    #[test]
    fn invocation_count_is_m_times_passes() {
        let sen = Sen::new(&SenConfig::default()).unwrap();
        let xs = inputs(sen.config(), 2, 0);
        run(&sen, &xs);
        assert_eq!(sen.encoder_invocations(), 3 * 4);
        let mut cfg = SenConfig::default();
        cfg.ra.passes = PassMode::L;
        let sen = Sen::new(&cfg).unwrap();
        run(&sen, &xs);
        assert_eq!(sen.encoder_invocations(), 3 * 3);
        assert_eq!(sen.ra_layers.len(), 2);
    }

    #[test]
    fn zero_depth_is_plain_encoding() {
        let sen = Sen::new(&small(Variant::Sen, 0)).unwrap();
        assert!(sen.trainable_parameters().is_empty());
        let xs = inputs(sen.config(), 2, 1);
        let (finals, context) = run(&sen, &xs);
        let mut tape = Tape::new();
        for (m, n) in sen.neurons().iter().enumerate() {
            let x = tape.constant(xs[m].clone());
            let e = n.encode(&mut tape, x, None).unwrap();
            assert!(tape.to_tensor(e.pooled).bitwise_eq(&finals[m]));
        }
        assert_eq!(context.shape(), &[2, 16]);
    }

    #[test]
    fn zero_prompt_tokens_match_zero_depth() {
        let mut cfg = small(Variant::Sen, 3);
        cfg.ra.prompt_tokens = 0;
        let sen = Sen::new(&cfg).unwrap();
        assert_eq!(sen.count_parameters().1, 0);
        let plain = Sen::new(&small(Variant::Sen, 0)).unwrap();
        let xs = inputs(&cfg, 2, 2);
        let (a, ca) = run(&sen, &xs);
        let mut cfg0 = small(Variant::Sen, 0);
        cfg0.ra.prompt_tokens = 0;
        let (b, cb) = run(&Sen::new(&cfg0).unwrap(), &xs);
        for (x, y) in a.iter().zip(&b) {
            assert!(x.bitwise_eq(y));
        }
        assert!(ca.bitwise_eq(&cb));
        assert_eq!(plain.count_parameters().0, sen.count_parameters().0 + 3 * 4 * 16);
    }

    #[test]
    fn context_is_mean_of_finals() {
        let sen = Sen::new(&SenConfig::default()).unwrap();
        let xs = inputs(sen.config(), 3, 3);
        let (finals, context) = run(&sen, &xs);
        for (i, &c) in context.data().iter().enumerate() {
            let mean = (0.0 + finals[0].data()[i] + finals[1].data()[i] + finals[2].data()[i]) / 3.0;
            assert_eq!(c.to_bits(), mean.to_bits());
        }
    }

    #[test]
    fn arms_share_output_shapes() {
        for variant in [Variant::Sen, Variant::Baseline, Variant::Transformer, Variant::Pure] {
            let sen = Sen::new(&small(variant, 2)).unwrap();
            let xs = inputs(sen.config(), 2, 4);
            let (finals, context) = run(&sen, &xs);
            assert_eq!(finals.len(), 3);
            assert!(finals.iter().all(|f| f.shape() == [2, 16]));
            assert_eq!(context.shape(), &[2, 16]);
            assert_eq!(sen.count_parameters().1, Sen::closed_form_trainable(sen.config()), "{variant:?}");
        }
    }

    #[test]
    fn baseline_has_no_trainable_parameters_and_is_deterministic() {
        let sen = Sen::new(&small(Variant::Baseline, 3)).unwrap();
        assert_eq!(sen.count_parameters().1, 0);
        let xs = inputs(sen.config(), 2, 5);
        let (a, _) = run(&sen, &xs);
        let (b, _) = run(&Sen::new(&small(Variant::Baseline, 3)).unwrap(), &xs);
        assert!(a.iter().zip(&b).all(|(x, y)| x.bitwise_eq(y)));
    }

    #[test]
    fn transformer_feedback_outweighs_ra() {
        let ra = Sen::new(&small(Variant::Sen, 1)).unwrap().count_parameters().1;
        let xf = Sen::new(&small(Variant::Transformer, 1)).unwrap().count_parameters().1;
        assert_eq!(ra, 4272);
        assert_eq!(xf, 12 * 256 + 13 * 16 + 3 * (48 * 64 + 64));
        assert!(xf > ra);
    }

    #[test]
    fn batch_rows_match_single_samples() {
        let mut sen = Sen::new(&SenConfig::default()).unwrap();
        randomize_trainable(&mut sen, 0.2, 9);
        let xs = inputs(sen.config(), 3, 6);
        let (finals, context) = run(&sen, &xs);
        for row in 0..3 {
            let sample: Vec<Tensor> = xs
                .iter()
                .map(|x| {
                    let per = x.numel() / 3;
                    Tensor::new(&x.shape()[1..], x.data()[row * per..(row + 1) * per].to_vec()).unwrap()
                })
                .collect();
            let (f, c) = sen.forward_sample(&sample).unwrap();
            assert_eq!(c.data(), &context.data()[row * 16..(row + 1) * 16]);
            assert_eq!(f[2].data(), &finals[2].data()[row * 16..(row + 1) * 16]);
        }
    }

    #[test]
    fn wrong_modality_count_is_rejected() {
        let sen = Sen::new(&SenConfig::default()).unwrap();
        let xs = inputs(sen.config(), 1, 7);
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs[..2].iter().map(|x| tape.constant(x.clone())).collect();
        assert!(sen.forward(&mut tape, &vars).is_err());
    }
}
