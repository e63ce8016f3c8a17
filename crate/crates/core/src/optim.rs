//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::collections::BTreeMap;

use crate::config::{Schedule, TrainingConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `base_lr · ½ · (1 + cos(π · step / total_steps))`.
///
/// ```
/// use sen_core::optim::cosine_lr;
/// assert_eq!(cosine_lr(0, 3e-4, 100).unwrap(), 3e-4);
/// assert!((cosine_lr(50, 3e-4, 100).unwrap() - 1.5e-4).abs() < 1e-18);
/// assert!(cosine_lr(101, 3e-4, 100).is_err());
/// ```
pub fn cosine_lr(step: usize, base_lr: f64, total_steps: usize) -> Result<f64> {
    if step > total_steps {
        return Err(Error::invalid(
            "cosine_lr",
            format!("step {step} outside 0..={total_steps}"),
        ));
    }
    if total_steps == 0 {
        return Ok(base_lr);
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + phase.cos()))
}

/// First and second moment buffers of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    pub schedule: Schedule,
    step: usize,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: &TrainingConfig) -> Self {
        AdamW {
            base_lr: cfg.base_lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            total_steps: cfg.steps,
            schedule: cfg.schedule,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    /// Updates applied so far.
    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn state(&self) -> &BTreeMap<String, Moments> {
        &self.state
    }

    /// Restores a saved step counter and moment buffers.
    pub fn restore(&mut self, step: usize, state: BTreeMap<String, Moments>) {
        self.step = step;
        self.state = state;
    }

    /// Learning rate of the next update.
    pub fn current_lr(&self) -> Result<f64> {
        match self.schedule {
            Schedule::Cosine => cosine_lr(self.step.min(self.total_steps), self.base_lr, self.total_steps),
            Schedule::Constant => Ok(self.base_lr),
        }
    }

    /// One update of every named parameter from its accumulated gradient.
    ///
    /// Each parameter is updated from its own buffers only, so the result
    /// does not depend on the order of `params`.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (String, &'a mut Tensor)>) -> Result<()> {
        let lr = self.current_lr()?;
        let t = (self.step + 1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);

        let mut pending = Vec::new();
        for (name, p) in params {
            if !p.requires_grad() {
                return Err(Error::invalid("adamw_step", format!("{name} is frozen")));
            }
            let g = p
                .grad()
                .ok_or_else(|| Error::invalid("adamw_step", format!("missing gradient for {name}")))?
                .to_vec();
            if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
                return Err(Error::numeric("adamw_step", format!("gradient of {name} is {bad}")));
            }
            pending.push((name, p, g));
        }

        for (name, p, g) in pending {
            let n = p.numel();
            let st = self.state.entry(name).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                *x -= lr * wd * *x;
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * g[i];
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = st.m[i] / c1;
                let v_hat = st.v[i] / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}
