//! The recursive association (RA) block.
//!
//! One RA layer turns the pooled latents of all modalities into prompt
//! tokens for the next encoder pass, in three steps:
//!
//! 1. **integrate**: fuse the `M` latents (`[batch×d]` each) into one
//!    multi-modal feature with a [`FusionStrategy`];
//! 2. **distribute**: map the fused feature through a two-layer GELU MLP per
//!    modality (sparse) or one shared MLP (dense) into `k` tokens of width
//!    `d` per modality;
//! 3. **prompt**: add a learnable per-modality prompt `Q` (`[k×d]`) when
//!    enabled.
//!
//! Distributor output layers and `Q` start at zero, so a fresh layer emits
//! all-zero prompts.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Linear, Module};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    Avg,
    Add,
    Concat,
    Attention,
    Moe,
}

impl FusionKind {
    pub const ALL: [FusionKind; 5] = [
        FusionKind::Avg,
        FusionKind::Add,
        FusionKind::Concat,
        FusionKind::Attention,
        FusionKind::Moe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::Avg => "avg",
            FusionKind::Add => "add",
            FusionKind::Concat => "concat",
            FusionKind::Attention => "attention",
            FusionKind::Moe => "moe",
        }
    }

    /// Width of the fused feature for `m` modalities of width `d`.
    pub fn fused_dim(self, m: usize, d: usize) -> usize {
        match self {
            FusionKind::Concat => m * d,
            _ => d,
        }
    }

    pub fn parameter_count(self, d: usize) -> usize {
        match self {
            FusionKind::Avg | FusionKind::Add | FusionKind::Concat => 0,
            FusionKind::Attention => d + 2 * d * d,
            FusionKind::Moe => d,
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid("fusion", format!("unknown fusion kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    /// One distributor per modality.
    Sparse,
    /// One distributor shared by every modality.
    Dense,
}

impl Distribution {
    pub fn as_str(self) -> &'static str {
        match self {
            Distribution::Sparse => "sparse",
            Distribution::Dense => "dense",
        }
    }
}

/// Shape of one RA layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RaShape {
    pub modalities: usize,
    pub dim: usize,
    pub prompt_tokens: usize,
    pub fusion: FusionKind,
    pub distribution: Distribution,
    pub learnable_prompt: bool,
}

impl RaShape {
    pub fn fused_dim(&self) -> usize {
        self.fusion.fused_dim(self.modalities, self.dim)
    }

    pub fn distributor_count(&self) -> usize {
        match self.distribution {
            Distribution::Sparse => self.modalities,
            Distribution::Dense => 1,
        }
    }

    /// One distributor: `fused → d` (GELU) `→ k·d`.
    pub fn distributor_parameter_count(&self) -> usize {
        let (d, kd) = (self.dim, self.prompt_tokens * self.dim);
        self.fused_dim() * d + d + d * kd + kd
    }

    pub fn prompt_parameter_count(&self) -> usize {
        if self.learnable_prompt {
            self.modalities * self.prompt_tokens * self.dim
        } else {
            0
        }
    }

    /// Closed-form trainable count of one layer.
    pub fn parameter_count(&self) -> usize {
        self.fusion.parameter_count(self.dim)
            + self.distributor_count() * self.distributor_parameter_count()
            + self.prompt_parameter_count()
    }
}

/// Fusion operator and its trainable state.
///
/// Attention is single-head with a learnable query `q ∈ ℝᵈ` and key/value
/// projections `d→d`; its weights are `softmax_m(⟨q, F_m·K⟩/√d)` applied to
/// `F_m·V`. MoE scores every modality with one shared gate `w ∈ ℝᵈ` and
/// mixes the raw features with `softmax_m(⟨w, F_m⟩)`.
#[derive(Clone, Debug)]
pub enum FusionStrategy {
    Avg,
    Add,
    Concat,
    Attention { query: Tensor, key: Tensor, value: Tensor },
    Moe { gate: Tensor },
}

impl FusionStrategy {
    /// `q = 0` (uniform weights), random keys, identity values; MoE gate 0.
    pub fn new<R: Rng + ?Sized>(kind: FusionKind, d: usize, rng: &mut R) -> Self {
        match kind {
            FusionKind::Avg => FusionStrategy::Avg,
            FusionKind::Add => FusionStrategy::Add,
            FusionKind::Concat => FusionStrategy::Concat,
            FusionKind::Attention => FusionStrategy::Attention {
                query: Tensor::zeros(&[d, 1]).trainable(),
                key: Tensor::randn(&[d, d], 1.0 / (d as f64).sqrt(), rng).trainable(),
                value: Tensor::eye(d).trainable(),
            },
            FusionKind::Moe => FusionStrategy::Moe {
                gate: Tensor::zeros(&[d, 1]).trainable(),
            },
        }
    }

    pub fn kind(&self) -> FusionKind {
        match self {
            FusionStrategy::Avg => FusionKind::Avg,
            FusionStrategy::Add => FusionKind::Add,
            FusionStrategy::Concat => FusionKind::Concat,
            FusionStrategy::Attention { .. } => FusionKind::Attention,
            FusionStrategy::Moe { .. } => FusionKind::Moe,
        }
    }

    /// Fuses `M` features of shape `[batch×d]`.
    pub fn integrate(&self, tape: &mut Tape, features: &[Var]) -> Result<Var> {
        let first = *features
            .first()
            .ok_or_else(|| Error::invalid("integrate", "no modality features"))?;
        let shape = tape.shape(first).to_vec();
        if shape.len() != 2 {
            return Err(Error::invalid("integrate", format!("expected [batch×d], got {shape:?}")));
        }
        for &f in features {
            if tape.shape(f) != shape.as_slice() {
                return Err(Error::shape("integrate", &shape, tape.shape(f)));
            }
        }
        let (batch, d) = (shape[0], shape[1]);
        let m = features.len();
        let sum = |tape: &mut Tape| -> Result<Var> {
            features[1..].iter().try_fold(features[0], |acc, &f| tape.add(acc, f))
        };
        match self {
            FusionStrategy::Avg => {
                let s = sum(tape)?;
                tape.div_scalar(s, m as f64)
            }
            FusionStrategy::Add => sum(tape),
            FusionStrategy::Concat => tape.concat(features, 1),
            FusionStrategy::Attention { query, key, value } => {
                check_param("attention query", query, &[d, 1])?;
                let stacked = stack_rows(tape, features, batch, d)?;
                let (q, k, v) = (tape.leaf(query), tape.leaf(key), tape.leaf(value));
                let keys = tape.matmul(stacked, k)?;
                let scores = tape.matmul(keys, q)?;
                let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
                let values = tape.matmul(stacked, v)?;
                mix(tape, scores, values, batch, m, d)
            }
            FusionStrategy::Moe { gate } => {
                check_param("moe gate", gate, &[d, 1])?;
                let stacked = stack_rows(tape, features, batch, d)?;
                let g = tape.leaf(gate);
                let scores = tape.matmul(stacked, g)?;
                mix(tape, scores, stacked, batch, m, d)
            }
        }
    }
}

fn check_param(what: &'static str, t: &Tensor, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::shape(what, t.shape(), shape));
    }
    Ok(())
}

/// `M` tensors `[batch×d]` → `[(batch·M)×d]`, modality-minor.
fn stack_rows(tape: &mut Tape, features: &[Var], batch: usize, d: usize) -> Result<Var> {
    let m = features.len();
    let cat = tape.concat(features, 1)?;
    tape.reshape(cat, &[batch * m, d])
}

/// Softmax over modalities of `scores` (`[(batch·M)×1]`), applied to `rows`
/// (`[(batch·M)×d]`).
fn mix(tape: &mut Tape, scores: Var, rows: Var, batch: usize, m: usize, d: usize) -> Result<Var> {
    let scores = tape.reshape(scores, &[batch, m])?;
    let weights = tape.softmax(scores, 1)?;
    let weights = tape.reshape(weights, &[batch, 1, m])?;
    let rows = tape.reshape(rows, &[batch, m, d])?;
    let out = tape.bmm(weights, rows)?;
    tape.reshape(out, &[batch, d])
}

impl Module for FusionStrategy {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        match self {
            FusionStrategy::Attention { query, key, value } => {
                f(join(prefix, "query"), query);
                f(join(prefix, "key"), key);
                f(join(prefix, "value"), value);
            }
            FusionStrategy::Moe { gate } => f(join(prefix, "gate"), gate),
            _ => {}
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        match self {
            FusionStrategy::Attention { query, key, value } => {
                f(join(prefix, "query"), query);
                f(join(prefix, "key"), key);
                f(join(prefix, "value"), value);
            }
            FusionStrategy::Moe { gate } => f(join(prefix, "gate"), gate),
            _ => {}
        }
    }
}

/// Two-layer GELU MLP producing `k` prompt tokens of width `d`.
#[derive(Clone, Debug)]
pub struct Distributor {
    pub hidden: Linear,
    pub output: Linear,
}

impl Distributor {
    pub fn new<R: Rng + ?Sized>(input: usize, d: usize, k: usize, rng: &mut R) -> Self {
        let mut hidden = Linear::new(input, d, 1.0 / (input as f64).sqrt(), true, rng);
        let mut output = Linear::zeros(d, k * d, true);
        hidden.set_trainable(true);
        output.set_trainable(true);
        Distributor { hidden, output }
    }

    /// `[batch×input]` → `[batch×k×d]`.
    pub fn forward(&self, tape: &mut Tape, fused: Var, k: usize, d: usize) -> Result<Var> {
        let h = self.hidden.forward(tape, fused)?;
        let h = tape.gelu(h);
        let out = self.output.forward(tape, h)?;
        let batch = tape.shape(out)[0];
        tape.reshape(out, &[batch, k, d])
    }
}

impl Module for Distributor {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.hidden.visit(&join(prefix, "fc1"), f);
        self.output.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        let Distributor { hidden, output } = self;
        hidden.visit_mut(&join(prefix, "fc1"), f);
        output.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Trainable state of one RA layer.
#[derive(Clone, Debug)]
pub struct RaLayer {
    shape: RaShape,
    pub fusion: FusionStrategy,
    pub distributors: Vec<Distributor>,
    /// `Q(i,m)`, one `[k×d]` tensor per modality, when learnable prompts
    /// are enabled.
    pub prompts: Option<Vec<Tensor>>,
}

impl RaLayer {
    pub fn new<R: Rng + ?Sized>(shape: RaShape, rng: &mut R) -> Result<Self> {
        if shape.modalities == 0 || shape.dim == 0 || shape.prompt_tokens == 0 {
            return Err(Error::invalid(
                "ra_layer",
                format!("modalities, dim and prompt tokens must be ≥ 1: {shape:?}"),
            ));
        }
        let fusion = FusionStrategy::new(shape.fusion, shape.dim, rng);
        let distributors = (0..shape.distributor_count())
            .map(|_| Distributor::new(shape.fused_dim(), shape.dim, shape.prompt_tokens, rng))
            .collect();
        let prompts = shape.learnable_prompt.then(|| {
            (0..shape.modalities)
                .map(|_| Tensor::zeros(&[shape.prompt_tokens, shape.dim]).trainable())
                .collect()
        });
        Ok(RaLayer {
            shape,
            fusion,
            distributors,
            prompts,
        })
    }

    pub fn shape(&self) -> &RaShape {
        &self.shape
    }

    fn check_features(&self, tape: &Tape, features: &[Var]) -> Result<()> {
        if features.len() != self.shape.modalities {
            return Err(Error::invalid(
                "ra_forward",
                format!("expected {} modalities, got {}", self.shape.modalities, features.len()),
            ));
        }
        for &f in features {
            let s = tape.shape(f);
            if s.len() != 2 || s[1] != self.shape.dim {
                return Err(Error::shape("ra_forward", s, &[0, self.shape.dim]));
            }
        }
        Ok(())
    }

    /// Knowledge integrating.
    pub fn integrate(&self, tape: &mut Tape, features: &[Var]) -> Result<Var> {
        self.check_features(tape, features)?;
        self.fusion.integrate(tape, features)
    }

    /// Knowledge distributing: one `[batch×k×d]` message per modality. In
    /// dense mode every modality receives the same handle.
    pub fn distribute(&self, tape: &mut Tape, fused: Var) -> Result<Vec<Var>> {
        let expected = self.shape.fused_dim();
        let s = tape.shape(fused);
        if s.len() != 2 || s[1] != expected {
            return Err(Error::shape("distribute", s, &[0, expected]));
        }
        let (k, d) = (self.shape.prompt_tokens, self.shape.dim);
        match self.shape.distribution {
            Distribution::Sparse => self
                .distributors
                .iter()
                .map(|h| h.forward(tape, fused, k, d))
                .collect(),
            Distribution::Dense => {
                let g = self.distributors[0].forward(tape, fused, k, d)?;
                Ok(vec![g; self.shape.modalities])
            }
        }
    }

    /// Knowledge prompting: `P = G + Q`, or `P = G` without learnable prompts.
    pub fn prompt_compose(&self, tape: &mut Tape, messages: Vec<Var>) -> Result<Vec<Var>> {
        if messages.len() != self.shape.modalities {
            return Err(Error::invalid(
                "prompt_compose",
                format!("expected {} messages, got {}", self.shape.modalities, messages.len()),
            ));
        }
        let Some(prompts) = &self.prompts else {
            return Ok(messages);
        };
        messages
            .into_iter()
            .zip(prompts)
            .map(|(g, q)| {
                let qv = tape.leaf(q);
                tape.add_broadcast(g, qv)
            })
            .collect()
    }

    /// integrate → distribute → prompt; returns `M` prompt tensors
    /// `[batch×k×d]`.
    pub fn forward(&self, tape: &mut Tape, features: &[Var]) -> Result<Vec<Var>> {
        let fused = self.integrate(tape, features)?;
        let messages = self.distribute(tape, fused)?;
        self.prompt_compose(tape, messages)
    }

    /// Same layer with modality-owned state (sparse distributors, prompts)
    /// reordered so that new slot `j` holds old slot `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        if self.shape.distribution == Distribution::Sparse {
            out.distributors = perm.iter().map(|&p| self.distributors[p].clone()).collect();
        }
        if let Some(q) = &self.prompts {
            out.prompts = Some(perm.iter().map(|&p| q[p].clone()).collect());
        }
        out
    }
}

impl Module for RaLayer {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.fusion.visit(&join(prefix, "fusion"), f);
        for (m, h) in self.distributors.iter().enumerate() {
            h.visit(&join(prefix, &format!("dist{m}")), f);
        }
        if let Some(q) = &self.prompts {
            for (m, t) in q.iter().enumerate() {
                f(join(prefix, &format!("prompt{m}")), t);
            }
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        let RaLayer {
            fusion,
            distributors,
            prompts,
            ..
        } = self;
        fusion.visit_mut(&join(prefix, "fusion"), f);
        for (m, h) in distributors.iter_mut().enumerate() {
            h.visit_mut(&join(prefix, &format!("dist{m}")), f);
        }
        if let Some(q) = prompts {
            for (m, t) in q.iter_mut().enumerate() {
                f(join(prefix, &format!("prompt{m}")), t);
            }
        }
    }
}
