//! Layer building blocks shared by the frozen encoders and the trainable
//! association variants.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Layer-normalization epsilon used everywhere.
pub const LN_EPS: f64 = 1e-5;

/// Named access to the tensors owned by a component.
///
/// Names are dot-separated paths; visiting order is fixed by each
/// implementation and never depends on runtime state.
pub trait Module {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor));

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |n, t| out.push((n, t)));
        out
    }

    fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Module for Vec<Tensor> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, t) in self.iter().enumerate() {
            f(join(prefix, &i.to_string()), t);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        for (i, t) in self.iter_mut().enumerate() {
            f(join(prefix, &i.to_string()), t);
        }
    }
}

/// Affine map over the last axis: `x·W + b`, with `W` stored `[in×out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, std: f64, bias: bool, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::randn(&[input, output], std, rng),
            bias: bias.then(|| Tensor::zeros(&[output])),
        }
    }

    pub fn zeros(input: usize, output: usize, bias: bool) -> Self {
        Linear {
            weight: Tensor::zeros(&[input, output]),
            bias: bias.then(|| Tensor::zeros(&[output])),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.visit_mut("", &mut |_, t| t.set_requires_grad(on));
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.leaf(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.leaf(b));
        tape.affine(x, w, b)
    }
}

impl Module for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "w"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "b"), b);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        let Linear { weight, bias } = self;
        f(join(prefix, "w"), weight);
        if let Some(b) = bias {
            f(join(prefix, "b"), b);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gamma: Tensor::full(&[d], 1.0),
            beta: Tensor::zeros(&[d]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.leaf(&self.gamma);
        let b = tape.leaf(&self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

impl Module for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        let LayerNorm { gamma, beta } = self;
        f(join(prefix, "gamma"), gamma);
        f(join(prefix, "beta"), beta);
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub heads: usize,
    pub ln1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    /// `residual_std` initializes the two projections that write into the
    /// residual stream; the rest use fan-in scaling.
    pub fn new<R: Rng + ?Sized>(d: usize, heads: usize, hidden: usize, residual_std: f64, rng: &mut R) -> Self {
        let fan_in = 1.0 / (d as f64).sqrt();
        TransformerBlock {
            heads,
            ln1: LayerNorm::new(d),
            query: Linear::new(d, d, fan_in, true, rng),
            key: Linear::new(d, d, fan_in, true, rng),
            value: Linear::new(d, d, fan_in, true, rng),
            out: Linear::new(d, d, residual_std, true, rng),
            ln2: LayerNorm::new(d),
            fc1: Linear::new(d, hidden, fan_in, true, rng),
            fc2: Linear::new(hidden, d, residual_std, true, rng),
        }
    }

    /// Closed-form parameter count for width `d` and MLP width `hidden`.
    pub fn parameter_count(d: usize, hidden: usize) -> usize {
        2 * (2 * d) + 4 * (d * d + d) + (d * hidden + hidden) + (hidden * d + d)
    }

    /// `x` is `[batch×tokens×d]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let [b, t, d] = shape[..] else {
            return Err(Error::invalid("transformer_block", format!("expected rank 3, got {shape:?}")));
        };
        let h = self.heads;
        let dh = d / h;

        let normed = self.ln1.forward(tape, x)?;
        let split_heads = |tape: &mut Tape, v: Var| -> Result<Var> {
            let v = tape.reshape(v, &[b, t, h, dh])?;
            let v = tape.permute(v, &[0, 2, 1, 3])?;
            tape.reshape(v, &[b * h, t, dh])
        };
        let q = self.query.forward(tape, normed)?;
        let q = split_heads(tape, q)?;
        let k = self.key.forward(tape, normed)?;
        let k = split_heads(tape, k)?;
        let v = self.value.forward(tape, normed)?;
        let v = split_heads(tape, v)?;

        let kt = tape.permute(k, &[0, 2, 1])?;
        let scores = tape.bmm(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax(scores, 2)?;
        let ctx = tape.bmm(attn, v)?;
        let ctx = tape.reshape(ctx, &[b, h, t, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, t, d])?;
        let attn_out = self.out.forward(tape, ctx)?;
        let x = tape.add(x, attn_out)?;

        let normed = self.ln2.forward(tape, x)?;
        let hidden = self.fc1.forward(tape, normed)?;
        let hidden = tape.gelu(hidden);
        let mlp_out = self.fc2.forward(tape, hidden)?;
        tape.add(x, mlp_out)
    }
}

impl Module for TransformerBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.query.visit(&join(prefix, "attn.q"), f);
        self.key.visit(&join(prefix, "attn.k"), f);
        self.value.visit(&join(prefix, "attn.v"), f);
        self.out.visit(&join(prefix, "attn.o"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.fc1.visit(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit(&join(prefix, "mlp.fc2"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        let TransformerBlock {
            heads: _,
            ln1,
            query,
            key,
            value,
            out,
            ln2,
            fc1,
            fc2,
        } = self;
        ln1.visit_mut(&join(prefix, "ln1"), f);
        query.visit_mut(&join(prefix, "attn.q"), f);
        key.visit_mut(&join(prefix, "attn.k"), f);
        value.visit_mut(&join(prefix, "attn.v"), f);
        out.visit_mut(&join(prefix, "attn.o"), f);
        ln2.visit_mut(&join(prefix, "ln2"), f);
        fc1.visit_mut(&join(prefix, "mlp.fc1"), f);
        fc2.visit_mut(&join(prefix, "mlp.fc2"), f);
    }
}
