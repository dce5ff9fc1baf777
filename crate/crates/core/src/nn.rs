//! Fully connected networks evaluated on the tape.

use rand::Rng;

use crate::autodiff::{Bindings, Tape, Var};
use crate::error::Result;
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softplus,
    Tanh,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Softplus => tape.softplus(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// Dense stack `sizes[0] -> sizes[1] -> ... -> sizes[last]`. Hidden layers
/// use `activation`; the output layer is affine.
///
/// Layer `i` stores `{prefix}{i}.w` with shape `[in, out]` and
/// `{prefix}{i}.b` with shape `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub prefix: String,
    pub sizes: Vec<usize>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, sizes: Vec<usize>, activation: Activation) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        Self {
            prefix: prefix.into(),
            sizes,
            activation,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}{layer}.w", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}{layer}.b", self.prefix)
    }

    /// He-style uniform fan-in initialization with zero biases. The last
    /// layer's weights are multiplied by `last_gain`.
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R, last_gain: f64) -> Result<()> {
        for l in 0..self.n_layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let mut bound = (6.0 / fan_in as f64).sqrt();
            if l + 1 == self.n_layers() {
                bound *= last_gain;
            }
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| {
                    if bound > 0.0 {
                        rng.random_range(-bound..bound)
                    } else {
                        0.0
                    }
                })
                .collect();
            store.insert(self.weight_name(l), Tensor::matrix(fan_in, fan_out, w)?)?;
            store.insert(self.bias_name(l), Tensor::zeros(&[fan_out]))?;
        }
        Ok(())
    }

    /// Applies the network to a batch `[n, sizes[0]]`.
    pub fn forward(&self, tape: &mut Tape, params: &Bindings, x: Var) -> Result<Var> {
        let mut h = x;
        for l in 0..self.n_layers() {
            let w = params.get(&self.weight_name(l))?;
            let b = params.get(&self.bias_name(l))?;
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if l + 1 < self.n_layers() {
                h = self.activation.apply(tape, h)?;
            }
        }
        Ok(h)
    }
}
