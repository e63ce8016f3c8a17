//! Central-difference gradient checking over a module's trainable entries.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::{Tape, Var};

pub const DEFAULT_EPS: f64 = 1e-5;
/// Above this many trainable entries only a seeded subsample is probed.
pub const FULL_SWEEP_LIMIT: usize = 10_000;
pub const SUBSAMPLE: usize = 256;
/// Denominator floor for relative errors.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Trainable entries probed by finite differences.
    pub checked: usize,
    /// Total trainable entries in the module.
    pub trainable: usize,
    /// Name and flat index of the entry with the largest error.
    pub worst: Option<(String, usize)>,
    /// Analytic and finite-difference gradients at `worst`.
    pub worst_values: (f64, f64),
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + REL_FLOOR)
}

fn eval<M: Module>(model: &M, loss_fn: &impl Fn(&M, &mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let root = loss_fn(model, &mut tape)?;
    let v = tape.value(root);
    if v.len() != 1 {
        return Err(Error::invalid("grad_check", "loss must be scalar"));
    }
    if !v[0].is_finite() {
        return Err(Error::numeric("grad_check", format!("loss is {}", v[0])));
    }
    Ok(v[0])
}

/// Compares reverse-mode gradients of `loss_fn` with central differences.
///
/// Only tensors with `requires_grad` are probed; frozen tensors are
/// skipped entirely. The model is restored exactly after every probe.
pub fn grad_check<M: Module>(
    model: &mut M,
    loss_fn: impl Fn(&M, &mut Tape) -> Result<Var>,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let root = loss_fn(model, &mut tape)?;
    if !tape.value(root)[0].is_finite() {
        return Err(Error::numeric("grad_check", "non-finite loss"));
    }
    let grads = tape.backward(root)?;
    drop(tape);

    // (tensor index, name, analytic gradient) for every trainable tensor.
    let trainable: Vec<(usize, String, Vec<f64>)> = model
        .named_tensors()
        .into_iter()
        .enumerate()
        .filter(|(_, (_, t))| t.requires_grad())
        .map(|(i, (name, t))| {
            let g = grads.get(t).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec);
            (i, name, g)
        })
        .collect();
    let total: usize = trainable.iter().map(|(_, _, g)| g.len()).sum();

    let mut flat: Vec<(usize, usize)> = Vec::with_capacity(total);
    for (slot, (_, _, g)) in trainable.iter().enumerate() {
        flat.extend((0..g.len()).map(|e| (slot, e)));
    }
    let probes: Vec<(usize, usize)> = if total > FULL_SWEEP_LIMIT {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, total, SUBSAMPLE).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| flat[i]).collect()
    } else {
        flat
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: probes.len(),
        trainable: total,
        worst: None,
        worst_values: (0.0, 0.0),
    };
    for (slot, entry) in probes {
        let (tensor_index, name, analytic) = &trainable[slot];
        let set = |model: &mut M, value: Option<f64>| -> f64 {
            let mut tensors = model.named_tensors_mut();
            let data = tensors[*tensor_index].1.data_mut();
            let old = data[entry];
            data[entry] = value.unwrap_or(old);
            old
        };
        let original = set(model, None);
        set(model, Some(original + eps));
        let plus = eval(model, &loss_fn);
        set(model, Some(original - eps));
        let minus = eval(model, &loss_fn);
        set(model, Some(original));
        let numeric = (plus? - minus?) / (2.0 * eps);
        let err = relative_error(analytic[entry], numeric);
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = err;
            report.worst = Some((name.clone(), entry));
            report.worst_values = (analytic[entry], numeric);
        }
    }
    Ok(report)
}
