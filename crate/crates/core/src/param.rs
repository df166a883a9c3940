//! Named learnable parameter buffers, stored off-tape between steps and
//! bound onto a fresh tape for each forward/backward pass.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{numel, Tape, TensorId};

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

impl Param {
    pub fn filled(name: &str, shape: Vec<usize>, v: f64) -> Self {
        let n = numel(&shape);
        Param { name: name.into(), data: vec![v; n], shape }
    }

    pub fn zeros(name: &str, shape: Vec<usize>) -> Self {
        Self::filled(name, shape, 0.0)
    }

    pub fn ones(name: &str, shape: Vec<usize>) -> Self {
        Self::filled(name, shape, 1.0)
    }

    /// Fan-in-scaled uniform init from the given stream.
    pub fn fan_in(name: &str, shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(name, shape);
        rng.fill_fan_in(&mut p.data, fan_in);
        p
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Registers the current values as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<TensorId> {
        tape.leaf(self.data.clone(), self.shape.clone(), true)
    }
}
