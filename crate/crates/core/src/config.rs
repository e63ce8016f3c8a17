//! Experiment configuration.
//!
//! Configs are JSON documents. Every field has a default, so `{}` is a
//! complete config; unknown keys are rejected at every level.
//!
//! ```
//! use sen_core::config::SenConfig;
//! let cfg = SenConfig::from_json("{\"ra\": {\"layers\": 2}}").unwrap();
//! assert_eq!(cfg.ra.layers, 2);
//! assert_eq!(cfg.ra.prompt_tokens, 4);
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::ra::{Distribution, FusionKind, RaShape};

/// Mixes a base seed with a stream index (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SEED_ENCODER: u64 = 0x100;
const SEED_RA: u64 = 0x200;
const SEED_TASK: u64 = 0x300;
const SEED_BATCH: u64 = 0x400;
const SEED_PROJECTION: u64 = 0x500;
const SEED_HEAD: u64 = 0x600;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Frozen encoders with recursive RA layers.
    #[default]
    Sen,
    /// RA removed: a frozen seeded projection of the concatenated latents
    /// is fed back as prompts.
    Baseline,
    /// A shared trainable transformer block replaces the RA layers.
    Transformer,
    /// Single frozen pass, no feedback.
    Pure,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Sen => "sen",
            Variant::Baseline => "baseline",
            Variant::Transformer => "transformer",
            Variant::Pure => "pure",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum PassMode {
    /// `L` feedback layers and `L + 1` encoder passes.
    #[default]
    #[serde(rename = "l_plus_1")]
    LPlus1,
    /// `L` encoder passes and `L - 1` feedback layers.
    #[serde(rename = "l")]
    L,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    #[default]
    Parity,
    Contrastive,
    Injection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModalityConfig {
    pub name: String,
    pub input_dim: usize,
    pub seq_len: usize,
    pub depth: usize,
    pub heads: usize,
    /// Encoder weight seed; derived from the top-level seed when absent.
    pub seed: Option<u64>,
}

impl Default for ModalityConfig {
    fn default() -> Self {
        ModalityConfig {
            name: "modality".into(),
            input_dim: 8,
            seq_len: 8,
            depth: 2,
            heads: 2,
            seed: None,
        }
    }
}

impl ModalityConfig {
    pub fn named(name: &str) -> Self {
        ModalityConfig {
            name: name.into(),
            ..ModalityConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RaConfig {
    pub layers: usize,
    pub fusion: FusionKind,
    pub distribution: Distribution,
    pub prompt_tokens: usize,
    pub learnable_prompt: bool,
    pub passes: PassMode,
}

impl Default for RaConfig {
    fn default() -> Self {
        RaConfig {
            layers: 3,
            fusion: FusionKind::Avg,
            distribution: Distribution::Sparse,
            prompt_tokens: 4,
            learnable_prompt: true,
            passes: PassMode::LPlus1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch: usize,
    pub schedule: Schedule,
    /// Steps between evaluations; step 0 and the final step are always
    /// evaluated.
    pub eval_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            base_lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
            steps: 2000,
            batch: 32,
            schedule: Schedule::Cosine,
            eval_every: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub noise: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Number of generated streams; defaults to the modality count. The
    /// network reads the first `modalities.len()` of them.
    pub streams: Option<usize>,
    /// Contrastive task: number of classes.
    pub classes: usize,
    /// Injection task: shape of the task-model input.
    pub target_shape: Vec<usize>,
    /// Dataset seed; derived from the top-level seed when absent.
    pub seed: Option<u64>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskKind::Parity,
            noise: 0.1,
            train_samples: 4096,
            test_samples: 1024,
            streams: None,
            classes: 4,
            target_shape: vec![4, 6],
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SenConfig {
    pub seed: u64,
    pub shared_dim: usize,
    pub modalities: Vec<ModalityConfig>,
    pub variant: Variant,
    pub ra: RaConfig,
    pub training: TrainingConfig,
    pub task: TaskConfig,
}

impl Default for SenConfig {
    fn default() -> Self {
        SenConfig {
            seed: 0,
            shared_dim: 16,
            modalities: ["video", "text", "depth"].map(ModalityConfig::named).to_vec(),
            variant: Variant::Sen,
            ra: RaConfig::default(),
            training: TrainingConfig::default(),
            task: TaskConfig::default(),
        }
    }
}

impl SenConfig {
    /// Parses and validates a JSON document.
    pub fn from_json(doc: &str) -> Result<Self> {
        let cfg: SenConfig = serde_json::from_str(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let doc = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&doc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the compact JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn streams(&self) -> usize {
        self.task.streams.unwrap_or(self.modalities.len())
    }

    /// Number of feedback layers implied by `ra.layers` and the pass mode.
    pub fn feedback_layers(&self) -> usize {
        match self.ra.passes {
            PassMode::LPlus1 => self.ra.layers,
            PassMode::L => self.ra.layers.saturating_sub(1),
        }
    }

    pub fn encoder_configs(&self) -> Vec<EncoderConfig> {
        self.modalities
            .iter()
            .map(|m| EncoderConfig {
                modality_name: m.name.clone(),
                input_dim: m.input_dim,
                seq_len: m.seq_len,
                depth: m.depth,
                heads: m.heads,
                shared_dim: self.shared_dim,
                max_prompt_tokens: self.ra.prompt_tokens,
            })
            .collect()
    }

    pub fn encoder_seeds(&self) -> Vec<u64> {
        self.modalities
            .iter()
            .enumerate()
            .map(|(i, m)| m.seed.unwrap_or_else(|| derive_seed(self.seed, SEED_ENCODER + i as u64)))
            .collect()
    }

    pub fn ra_shape(&self) -> RaShape {
        RaShape {
            modalities: self.modalities.len(),
            dim: self.shared_dim,
            prompt_tokens: self.ra.prompt_tokens,
            fusion: self.ra.fusion,
            distribution: self.ra.distribution,
            learnable_prompt: self.ra.learnable_prompt,
        }
    }

    pub fn ra_seed(&self) -> u64 {
        derive_seed(self.seed, SEED_RA)
    }

    pub fn projection_seed(&self) -> u64 {
        derive_seed(self.seed, SEED_PROJECTION)
    }

    pub fn head_seed(&self) -> u64 {
        derive_seed(self.seed, SEED_HEAD)
    }

    pub fn task_seed(&self) -> u64 {
        self.task.seed.unwrap_or_else(|| derive_seed(self.seed, SEED_TASK))
    }

    pub fn batch_seed(&self) -> u64 {
        derive_seed(self.seed, SEED_BATCH)
    }

    /// Every violated constraint, in a fixed order.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.shared_dim == 0 {
            v.push("shared_dim must be ≥ 1".to_string());
        }
        if self.modalities.is_empty() {
            v.push("at least one modality is required".to_string());
        }
        for enc in self.encoder_configs() {
            if self.shared_dim > 0 {
                v.extend(enc.violations());
            } else {
                v.extend(enc.violations().into_iter().filter(|s| !s.contains("shared_dim")));
            }
        }

        if self.ra.passes == PassMode::L && self.ra.layers == 0 {
            v.push("ra.layers must be ≥ 1 when ra.passes is \"l\"".to_string());
        }

        let t = &self.training;
        if !(t.base_lr.is_finite() && t.base_lr > 0.0) {
            v.push(format!("training.base_lr must be positive, got {}", t.base_lr));
        }
        for (name, b) in [("beta1", t.beta1), ("beta2", t.beta2)] {
            if !(0.0..1.0).contains(&b) {
                v.push(format!("training.{name} must be in [0, 1), got {b}"));
            }
        }
        if !(t.eps.is_finite() && t.eps > 0.0) {
            v.push(format!("training.eps must be positive, got {}", t.eps));
        }
        if !(t.weight_decay.is_finite() && t.weight_decay >= 0.0) {
            v.push(format!("training.weight_decay must be ≥ 0, got {}", t.weight_decay));
        }
        if t.batch == 0 {
            v.push("training.batch must be ≥ 1".to_string());
        }
        if t.eval_every == 0 {
            v.push("training.eval_every must be ≥ 1".to_string());
        }

        let task = &self.task;
        if !(task.noise.is_finite() && task.noise >= 0.0) {
            v.push(format!("task.noise must be ≥ 0, got {}", task.noise));
        }
        if task.train_samples == 0 || task.test_samples == 0 {
            v.push("task.train_samples and task.test_samples must be ≥ 1".to_string());
        }
        match task.kind {
            TaskKind::Parity | TaskKind::Injection => {
                let streams = self.streams();
                if streams < 2 {
                    v.push(format!("task.streams must be ≥ 2, got {streams}"));
                }
                if streams < self.modalities.len() {
                    v.push(format!(
                        "task.streams ({streams}) must cover all {} modalities",
                        self.modalities.len()
                    ));
                }
                if let Some(first) = self.modalities.first() {
                    if first.input_dim < 2 {
                        v.push("synthetic tasks need input_dim ≥ 2".to_string());
                    }
                    if self
                        .modalities
                        .iter()
                        .any(|m| m.input_dim != first.input_dim || m.seq_len != first.seq_len)
                    {
                        v.push("synthetic tasks need equal input_dim and seq_len across modalities".to_string());
                    }
                }
                if task.kind == TaskKind::Injection
                    && (task.target_shape.is_empty() || task.target_shape.contains(&0))
                {
                    v.push(format!("task.target_shape must be non-empty with extents ≥ 1, got {:?}", task.target_shape));
                }
            }
            TaskKind::Contrastive => {
                if task.classes == 0 || task.classes > self.shared_dim {
                    v.push(format!(
                        "task.classes must be in 1..={} for orthonormal classes, got {}",
                        self.shared_dim, task.classes
                    ));
                }
            }
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
}
