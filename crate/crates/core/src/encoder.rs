//! Frozen single-modality encoders ("super neurons").
//!
//! Each encoder is a small pre-norm transformer whose weights are a pure
//! function of `(config, seed)`. It stands in for a pretrained encoder:
//! it is never updated, but gradients pass through it so that prompt
//! tokens injected into its input can be trained.
//!
//! Prompt tokens enter after the input projection. They are prepended to
//! the embedded token sequence and get their own positional rows, stored
//! after the `seq_len` rows used by ordinary tokens, so the positional
//! entries of ordinary tokens do not depend on how many prompts are given.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, LayerNorm, Linear, Module, TransformerBlock};
use crate::tensor::{Tape, Tensor, Var};

/// MLP width of each encoder block, as a multiple of the shared width.
pub const ENCODER_MLP_RATIO: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub modality_name: String,
    pub input_dim: usize,
    pub seq_len: usize,
    pub depth: usize,
    pub heads: usize,
    pub shared_dim: usize,
    pub max_prompt_tokens: usize,
}

impl EncoderConfig {
    /// Every violated constraint, in a fixed order.
    pub fn violations(&self) -> Vec<String> {
        let name = &self.modality_name;
        let mut v = Vec::new();
        if self.input_dim == 0 {
            v.push(format!("modality {name}: input_dim must be ≥ 1"));
        }
        if self.seq_len == 0 {
            v.push(format!("modality {name}: seq_len must be ≥ 1"));
        }
        if self.depth == 0 {
            v.push(format!("modality {name}: depth must be ≥ 1"));
        }
        if self.shared_dim == 0 {
            v.push(format!("modality {name}: shared_dim must be ≥ 1"));
        }
        if self.heads == 0 || self.shared_dim % self.heads != 0 {
            v.push(format!(
                "modality {name}: heads ({}) must divide shared_dim ({})",
                self.heads, self.shared_dim
            ));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn parameter_count(&self) -> usize {
        let d = self.shared_dim;
        let hidden = ENCODER_MLP_RATIO * d;
        (self.input_dim * d + d)
            + (self.seq_len + self.max_prompt_tokens) * d
            + self.depth * TransformerBlock::parameter_count(d, hidden)
            + 2 * d
    }
}

/// Output of one encoder pass over a batch.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[batch×(k+n)×d]`, prompt tokens first.
    pub tokens: Var,
    /// `[batch×d]`, mean over all output tokens.
    pub pooled: Var,
}

#[derive(Clone, Debug)]
pub struct SuperNeuron {
    config: EncoderConfig,
    seed: u64,
    embed: Linear,
    positions: Tensor,
    blocks: Vec<TransformerBlock>,
    final_norm: LayerNorm,
}

/// Builds a frozen encoder deterministically from `(cfg, seed)`.
pub fn build_super_neuron(cfg: &EncoderConfig, seed: u64) -> Result<SuperNeuron> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.shared_dim;
    let residual_std = 0.02 / (cfg.depth as f64).sqrt();
    let embed = Linear::new(cfg.input_dim, d, 1.0 / (cfg.input_dim as f64).sqrt(), true, &mut rng);
    let positions = Tensor::randn(&[cfg.seq_len + cfg.max_prompt_tokens, d], 0.02, &mut rng);
    let blocks = (0..cfg.depth)
        .map(|_| TransformerBlock::new(d, cfg.heads, ENCODER_MLP_RATIO * d, residual_std, &mut rng))
        .collect();
    let mut neuron = SuperNeuron {
        config: cfg.clone(),
        seed,
        embed,
        positions,
        blocks,
        final_norm: LayerNorm::new(d),
    };
    neuron.visit_mut("", &mut |_, t| t.set_requires_grad(false));
    Ok(neuron)
}

impl SuperNeuron {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn shared_dim(&self) -> usize {
        self.config.shared_dim
    }

    /// Always true: no constructor produces trainable encoder tensors.
    pub fn is_frozen(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| !t.requires_grad())
    }

    /// Encodes `tokens` (`[batch×seq_len×input_dim]`) with optional prompt
    /// tokens (`[batch×k×d]`).
    pub fn encode(&self, tape: &mut Tape, tokens: Var, prompts: Option<Var>) -> Result<Encoded> {
        let cfg = &self.config;
        let (n, d) = (cfg.seq_len, cfg.shared_dim);
        let ts = tape.shape(tokens).to_vec();
        if ts.len() != 3 || ts[1] != n || ts[2] != cfg.input_dim {
            return Err(Error::shape("encode", &ts, &[0, n, cfg.input_dim]));
        }
        let batch = ts[0];

        let pos = tape.leaf(&self.positions);
        let embedded = self.embed.forward(tape, tokens)?;
        let token_pos = tape.slice(pos, 0, 0, n)?;
        let embedded = tape.add_broadcast(embedded, token_pos)?;

        let seq = match prompts {
            None => embedded,
            Some(p) => {
                let ps = tape.shape(p).to_vec();
                if ps.len() != 3 || ps[0] != batch || ps[2] != d {
                    return Err(Error::shape("encode prompts", &ps, &[batch, 0, d]));
                }
                let k = ps[1];
                if k > cfg.max_prompt_tokens {
                    return Err(Error::invalid(
                        "encode",
                        format!("{k} prompt tokens exceed the maximum of {}", cfg.max_prompt_tokens),
                    ));
                }
                let prompt_pos = tape.slice(pos, 0, n, k)?;
                let p = tape.add_broadcast(p, prompt_pos)?;
                tape.concat(&[p, embedded], 1)?
            }
        };

        let mut h = seq;
        for block in &self.blocks {
            h = block.forward(tape, h)?;
        }
        let h = self.final_norm.forward(tape, h)?;
        let pooled = tape.mean(h, 1)?;
        Ok(Encoded { tokens: h, pooled })
    }

    /// Single-sample convenience wrapper: `tokens` is `[seq_len×input_dim]`,
    /// prompts `[k×d]`. Returns `([(k+n)×d], [d])`.
    pub fn encode_sample(&self, tokens: &Tensor, prompts: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let unsqueeze = |t: &Tensor| -> Result<Tensor> {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            t.clone().reshaped(&s)
        };
        let x = tape.constant(unsqueeze(tokens)?);
        let p = match prompts {
            Some(p) => {
                if p.shape().len() != 2 || p.shape()[1] != self.shared_dim() {
                    return Err(Error::shape("encode prompts", p.shape(), &[0, self.shared_dim()]));
                }
                Some(tape.constant(unsqueeze(p)?))
            }
            None => None,
        };
        let out = self.encode(&mut tape, x, p)?;
        let feats = tape.to_tensor(out.tokens);
        let rows = feats.shape()[1];
        let feats = feats.reshaped(&[rows, self.shared_dim()])?;
        let pooled = tape.to_tensor(out.pooled).reshaped(&[self.shared_dim()])?;
        Ok((feats, pooled))
    }
}

impl Module for SuperNeuron {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.embed.visit(&join(prefix, "embed"), f);
        f(join(prefix, "pos"), &self.positions);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.final_norm.visit(&join(prefix, "final_norm"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        let SuperNeuron {
            embed,
            positions,
            blocks,
            final_norm,
            ..
        } = self;
        embed.visit_mut(&join(prefix, "embed"), f);
        f(join(prefix, "pos"), positions);
        for (i, b) in blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        final_norm.visit_mut(&join(prefix, "final_norm"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            modality_name: "video".into(),
            input_dim: 6,
            seq_len: 8,
            depth: 2,
            heads: 2,
            shared_dim: 16,
            max_prompt_tokens: 4,
        }
    }

    #[test]
    fn construction_is_a_pure_function_of_config_and_seed() {
        let a = build_super_neuron(&cfg(), 7).unwrap();
        let b = build_super_neuron(&cfg(), 7).unwrap();
        let c = build_super_neuron(&cfg(), 8).unwrap();
        let same = a
            .named_tensors()
            .iter()
            .zip(b.named_tensors())
            .all(|((_, x), (_, y))| x.bitwise_eq(y));
        assert!(same);
        let differs = a
            .named_tensors()
            .iter()
            .zip(c.named_tensors())
            .any(|((_, x), (_, y))| !x.bitwise_eq(y));
        assert!(differs);
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let n = build_super_neuron(&cfg(), 0).unwrap();
        // embed 6·16+16, positions 12·16, two blocks, final norm 32
        let block = 4 * 16 + 4 * (256 + 16) + (16 * 32 + 32) + (32 * 16 + 16);
        assert_eq!(cfg().parameter_count(), 112 + 192 + 2 * block + 32);
        assert_eq!(n.num_parameters(), cfg().parameter_count());
    }

    #[test]
    fn all_parameters_frozen() {
        let n = build_super_neuron(&cfg(), 3).unwrap();
        assert!(n.is_frozen());
    }

    #[test]
    fn invalid_configs_are_named() {
        let mut c = cfg();
        c.heads = 3;
        c.depth = 0;
        let Err(Error::Config(v)) = build_super_neuron(&c, 0) else {
            panic!("expected config error");
        };
        assert_eq!(v.len(), 2);
        assert!(v.iter().any(|m| m.contains("heads")));
        assert!(v.iter().any(|m| m.contains("depth")));
    }

    #[test]
    fn shape_contract_with_and_without_prompts() {
        let n = build_super_neuron(&cfg(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[8, 6], 1.0, &mut rng);
        let (feats, pooled) = n.encode_sample(&x, None).unwrap();
        assert_eq!(feats.shape(), &[8, 16]);
        assert_eq!(pooled.shape(), &[16]);

        let p = Tensor::randn(&[4, 16], 1.0, &mut rng);
        let (feats, pooled) = n.encode_sample(&x, Some(&p)).unwrap();
        assert_eq!(feats.shape(), &[12, 16]);
        assert_eq!(pooled.shape(), &[16]);
    }

    #[test]
    fn prompt_errors() {
        let n = build_super_neuron(&cfg(), 1).unwrap();
        let x = Tensor::zeros(&[8, 6]);
        assert!(n.encode_sample(&x, Some(&Tensor::zeros(&[2, 15]))).is_err());
        assert!(n.encode_sample(&x, Some(&Tensor::zeros(&[5, 16]))).is_err());
        assert!(n.encode_sample(&Tensor::zeros(&[7, 6]), None).is_err());
    }

    #[test]
    fn pooled_is_mean_of_output_tokens() {
        let n = build_super_neuron(&cfg(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[8, 6], 1.0, &mut rng);
        let p = Tensor::randn(&[3, 16], 1.0, &mut rng);
        let (feats, pooled) = n.encode_sample(&x, Some(&p)).unwrap();
        for j in 0..16 {
            let mean = (0..11).map(|r| feats.data()[r * 16 + j]).sum::<f64>() / 11.0;
            assert!((mean - pooled.data()[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn prompt_gradient_flows_but_encoder_gets_none() {
        let n = build_super_neuron(&cfg(), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&[1, 8, 6], 1.0, &mut rng);
        let prompt = Tensor::randn(&[1, 4, 16], 0.5, &mut rng).trainable();
        let readout = Tensor::randn(&[1, 16], 1.0, &mut rng);

        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let pv = tape.leaf(&prompt);
        let out = n.encode(&mut tape, xv, Some(pv)).unwrap();
        let r = tape.constant(readout);
        let y = tape.mul(out.pooled, r).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();

        assert!(grads.get(&prompt).unwrap().iter().any(|g| *g != 0.0));
        assert_eq!(grads.len(), 1);
        for (_, t) in n.named_tensors() {
            assert!(grads.get(t).is_none());
        }
    }

    #[test]
    fn pooled_output_is_sensitive_to_every_prompt_entry() {
        let n = build_super_neuron(&cfg(), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[8, 6], 1.0, &mut rng);
        let p = Tensor::randn(&[4, 16], 0.5, &mut rng);
        let (_, base) = n.encode_sample(&x, Some(&p)).unwrap();
        for i in 0..p.numel() {
            let mut q = p.clone();
            q.data_mut()[i] += 1e-3;
            let (_, moved) = n.encode_sample(&x, Some(&q)).unwrap();
            let diff: f64 = moved.data().iter().zip(base.data()).map(|(a, b)| (a - b).abs()).sum();
            assert!(diff > 0.0, "entry {i} had no effect");
        }
    }
}
