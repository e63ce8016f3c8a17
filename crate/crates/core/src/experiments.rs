//! Ablation arms and network gradient checks.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{SenConfig, Variant};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckReport, DEFAULT_EPS};
use crate::metrics::MetricRecord;
use crate::network::{randomize_trainable, Sen};
use crate::nn::Module;
use crate::ra::{Distribution, FusionKind};
use crate::tensor::{Tape, Tensor, Var};
use crate::trainer::Trainer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Fusion,
    Depth,
    Distribution,
    Prompt,
    Modality,
}

impl Axis {
    pub const ALL: [Axis; 5] = [Axis::Fusion, Axis::Depth, Axis::Distribution, Axis::Prompt, Axis::Modality];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Fusion => "fusion",
            Axis::Depth => "depth",
            Axis::Distribution => "distribution",
            Axis::Prompt => "prompt",
            Axis::Modality => "modality",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::invalid("ablate", format!("unknown axis {s:?}")))
    }
}

/// Named configs of one ablation axis, derived from `base`.
pub fn arms(axis: Axis, base: &SenConfig) -> Vec<(String, SenConfig)> {
    let with = |f: &dyn Fn(&mut SenConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        Axis::Fusion => {
            let mut out = vec![
                ("pure".to_string(), with(&|c| c.variant = Variant::Pure)),
                ("baseline".to_string(), with(&|c| c.variant = Variant::Baseline)),
                ("transformer".to_string(), with(&|c| c.variant = Variant::Transformer)),
            ];
            for kind in FusionKind::ALL {
                out.push((
                    format!("ra-{kind}"),
                    with(&|c| {
                        c.variant = Variant::Sen;
                        c.ra.fusion = kind;
                    }),
                ));
            }
            out
        }
        Axis::Depth => (1..=4)
            .map(|l| {
                (
                    format!("L={l}"),
                    with(&|c| {
                        c.variant = Variant::Sen;
                        c.ra.layers = l;
                    }),
                )
            })
            .collect(),
        Axis::Distribution => [Distribution::Sparse, Distribution::Dense]
            .into_iter()
            .map(|d| (d.as_str().to_string(), with(&|c| c.ra.distribution = d)))
            .collect(),
        Axis::Prompt => [("with-q", true), ("without-q", false)]
            .into_iter()
            .map(|(name, on)| (name.to_string(), with(&|c| c.ra.learnable_prompt = on)))
            .collect(),
        Axis::Modality => {
            let streams = base.streams();
            (1..=base.modalities.len())
                .map(|m| {
                    (
                        format!("m={m}"),
                        with(&|c| {
                            c.modalities.truncate(m);
                            c.task.streams = Some(streams);
                        }),
                    )
                })
                .collect()
        }
    }
}

/// Final evaluation of one arm.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmResult {
    pub arm: String,
    pub seed: u64,
    pub accuracy: f64,
    pub loss: f64,
    pub records: Vec<MetricRecord>,
}

/// Trains one arm to completion.
pub fn run_arm(arm: &str, cfg: &SenConfig) -> Result<ArmResult> {
    let mut trainer = Trainer::new(cfg)?.with_arm(arm);
    let mut records = Vec::new();
    let eval = trainer.run(cfg.training.steps, &mut |r| {
        records.push(r.clone());
        Ok(())
    })?;
    let eval = eval.ok_or_else(|| Error::invalid("ablate", "no evaluation was run"))?;
    Ok(ArmResult {
        arm: arm.to_string(),
        seed: cfg.seed,
        accuracy: eval.accuracy,
        loss: eval.loss,
        records,
    })
}

/// Mean final test accuracy of `cfg` over `seeds`.
pub fn mean_accuracy(arm: &str, cfg: &SenConfig, seeds: &[u64]) -> Result<f64> {
    let mut total = 0.0;
    for &seed in seeds {
        let mut c = cfg.clone();
        c.seed = seed;
        total += run_arm(arm, &c)?.accuracy;
    }
    Ok(total / seeds.len() as f64)
}

/// The 20 gradient-check configurations: every fusion kind, distribution
/// mode and prompt setting at `M = 3`, `d = 8`, `k = 2`, `L = 2`.
pub fn gradcheck_configs() -> Vec<(String, SenConfig)> {
    let mut base = SenConfig::default();
    base.shared_dim = 8;
    base.ra.prompt_tokens = 2;
    base.ra.layers = 2;
    base.variant = Variant::Sen;
    let mut out = Vec::new();
    for fusion in FusionKind::ALL {
        for distribution in [Distribution::Sparse, Distribution::Dense] {
            for prompts in [true, false] {
                let mut c = base.clone();
                c.ra.fusion = fusion;
                c.ra.distribution = distribution;
                c.ra.learnable_prompt = prompts;
                let name = format!(
                    "{fusion}/{}/{}",
                    distribution.as_str(),
                    if prompts { "q" } else { "no-q" }
                );
                out.push((name, c));
            }
        }
    }
    out
}

/// Gradient check of the network's trainable tensors under a fixed random
/// linear read-out of every final feature and the context. Trainable
/// tensors are first overwritten with generic random values.
pub fn gradcheck_network(cfg: &SenConfig, seed: u64) -> Result<GradCheckReport> {
    let mut sen = Sen::new(cfg)?;
    randomize_trainable(&mut sen, 0.5, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let batch = 1;
    let inputs: Vec<Tensor> = cfg
        .modalities
        .iter()
        .map(|m| Tensor::randn(&[batch, m.seq_len, m.input_dim], 1.0, &mut rng))
        .collect();
    let d = cfg.shared_dim;
    let readout: Vec<Tensor> = (0..=cfg.modalities.len())
        .map(|_| Tensor::randn(&[batch, d], 1.0, &mut rng))
        .collect();
    let loss = |sen: &Sen, tape: &mut Tape| -> Result<Var> {
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = sen.forward(tape, &vars)?;
        let mut total: Option<Var> = None;
        for (f, w) in out.finals.iter().chain(std::iter::once(&out.context)).zip(&readout) {
            let wv = tape.constant(w.clone());
            let prod = tape.mul(*f, wv)?;
            let s = tape.sum(prod);
            total = Some(match total {
                Some(t) => tape.add(t, s)?,
                None => s,
            });
        }
        Ok(total.expect("at least one modality"))
    };
    if sen.num_parameters() == 0 {
        return Err(Error::invalid("gradcheck", "the configuration has no trainable tensors"));
    }
    grad_check(&mut sen, loss, DEFAULT_EPS, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arm_names() {
        let base = SenConfig::default();
        let names: Vec<String> = arms(Axis::Fusion, &base).into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            ["pure", "baseline", "transformer", "ra-avg", "ra-add", "ra-concat", "ra-attention", "ra-moe"]
        );
        let depth = arms(Axis::Depth, &base);
        assert_eq!(depth.iter().map(|(_, c)| c.ra.layers).collect::<Vec<_>>(), [1, 2, 3, 4]);
        let modality = arms(Axis::Modality, &base);
        assert_eq!(modality[0].1.modalities.len(), 1);
        assert_eq!(modality[0].1.streams(), 3);
        for axis in Axis::ALL {
            for (name, c) in arms(axis, &base) {
                assert!(c.validate().is_ok(), "{axis}/{name}");
            }
            assert_eq!(axis.as_str().parse::<Axis>().unwrap(), axis);
        }
    }

    #[test]
    fn twenty_gradcheck_configs() {
        let cfgs = gradcheck_configs();
        assert_eq!(cfgs.len(), 20);
        let names: std::collections::BTreeSet<_> = cfgs.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names.len(), 20);
    }

    #[test]
    fn one_network_gradcheck() {
        let (_, cfg) = &gradcheck_configs()[0];
        let report = gradcheck_network(cfg, 0).unwrap();
        assert!(report.passes(1e-4), "{report:?}");
        assert_eq!(report.trainable, Sen::closed_form_trainable(cfg));
    }
}
