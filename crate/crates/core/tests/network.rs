use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sen_core::config::{SenConfig, Variant};
use sen_core::experiments::gradcheck_network;
use sen_core::network::{randomize_trainable, Sen};
use sen_core::nn::Module;
use sen_core::tensor::{Tape, Tensor, Var};

fn small(variant: Variant, layers: usize) -> SenConfig {
    let mut cfg = SenConfig::default();
    cfg.variant = variant;
    cfg.shared_dim = 8;
    cfg.ra.prompt_tokens = 2;
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

fn finals(sen: &Sen, xs: &[Tensor]) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = sen.forward(&mut tape, &vars).unwrap();
    out.finals.iter().map(|&f| tape.value(f).to_vec()).collect()
}

fn first_pass(sen: &Sen, xs: &[Tensor]) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let feats = sen.initial_features(&mut tape, &vars).unwrap();
    feats.iter().map(|&f| tape.value(f).to_vec()).collect()
}

#[test]
fn transformer_feedback_gradients() {
    let cfg = small(Variant::Transformer, 2);
    let report = gradcheck_network(&cfg, 0).unwrap();
    assert!(report.passes(1e-4), "{report:?}");
    assert_eq!(report.trainable, Sen::new(&cfg).unwrap().count_parameters().1);
}

#[test]
fn transformer_output_shapes_match_ra() {
    let xs = inputs(&small(Variant::Sen, 2), 3, 1);
    let ra = finals(&Sen::new(&small(Variant::Sen, 2)).unwrap(), &xs);
    let xf = finals(&Sen::new(&small(Variant::Transformer, 2)).unwrap(), &xs);
    assert_eq!(ra.len(), xf.len());
    for (a, b) in ra.iter().zip(&xf) {
        assert_eq!(a.len(), b.len());
    }
}

#[test]
fn symmetric_baseline_keeps_modalities_equal() {
    for layers in 0..=3 {
        let mut cfg = small(Variant::Baseline, layers);
        for m in &mut cfg.modalities {
            m.seed = Some(42);
        }
        let sen = Sen::new(&cfg).unwrap();
        assert_eq!(sen.count_parameters().1, 0);
        let x = inputs(&cfg, 2, 3).swap_remove(0);
        let xs = vec![x; cfg.modalities.len()];
        let out = finals(&sen, &xs);
        for f in &out[1..] {
            assert_eq!(f, &out[0], "L={layers}");
        }
        assert_eq!(out, finals(&sen, &xs));
    }
}

#[test]
fn later_rounds_depend_on_earlier_prompts() {
    let cfg = small(Variant::Sen, 1);
    let xs = inputs(&cfg, 1, 4);
    let mut sen = Sen::new(&cfg).unwrap();
    randomize_trainable(&mut sen, 0.5, 5);
    let base_final = finals(&sen, &xs);
    let base_first = first_pass(&sen, &xs);

    let names: Vec<(String, usize)> = sen
        .named_tensors()
        .into_iter()
        .filter(|(n, _)| n.starts_with("ra0."))
        .map(|(n, t)| (n, t.numel()))
        .collect();
    assert!(!names.is_empty());
    for (name, _) in &names {
        let mut probe = Sen::new(&cfg).unwrap();
        randomize_trainable(&mut probe, 0.5, 5);
        for (n, t) in probe.named_tensors_mut() {
            if &n == name {
                t.data_mut()[0] += 1e-3;
            }
        }
        assert_eq!(first_pass(&probe, &xs), base_first, "{name} reached the first pass");
        assert_ne!(finals(&probe, &xs), base_final, "{name} did not reach the finals");
    }

    let flat = small(Variant::Sen, 0);
    let sen0 = Sen::new(&flat).unwrap();
    assert!(sen0.named_tensors().is_empty());
    assert_eq!(finals(&sen0, &xs), first_pass(&sen0, &xs));
}
