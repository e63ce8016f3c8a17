//! Task heads trained alongside the feedback layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{join, Linear, Module};
use crate::tensor::{Tape, Tensor, Var};

/// Affine map from the context feature to task outputs.
#[derive(Clone, Debug)]
pub struct LinearHead {
    pub linear: Linear,
}

impl LinearHead {
    pub fn new(input: usize, output: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut linear = Linear::new(input, output, 1.0 / (input as f64).sqrt(), true, &mut rng);
        linear.set_trainable(true);
        LinearHead { linear }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.linear.forward(tape, x)
    }
}

impl Module for LinearHead {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.linear.visit(&join(prefix, "linear"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.linear.visit_mut(&join(prefix, "linear"), f);
    }
}
