use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ParamSet, Tape, Tensor, Var};
use crate::error::Result;

/// Affine layer whose weight `[in, out]` and bias `[out]` live in a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    /// Gaussian weights with standard deviation `std`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = if std == 0.0 {
            Tensor::zeros(&[fan_in, fan_out])
        } else {
            Tensor::randn(&[fan_in, fan_out], std, rng)
        };
        Self {
            weight: params.push(format!("{name}.weight"), weight),
            bias: params.push(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    /// He initialisation, suited to a following ReLU.
    pub fn he<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self::new(params, name, fan_in, fan_out, (2.0 / fan_in as f64).sqrt(), rng)
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let h = tape.matmul(x, vars[self.weight])?;
        tape.add_trailing(h, vars[self.bias])
    }
}

/// ReLU multilayer perceptron; the last layer is linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub dims: Vec<usize>,
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `zero_last` starts the output layer at exactly zero.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        dims: &[usize],
        zero_last: bool,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let name = format!("{prefix}.{i}");
                if zero_last && i == n - 1 {
                    Linear::new(params, &name, dims[i], dims[i + 1], 0.0, rng)
                } else {
                    Linear::he(params, &name, dims[i], dims[i + 1], rng)
                }
            })
            .collect();
        Self {
            dims: dims.to_vec(),
            layers,
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, vars, x)?;
            if i + 1 < self.layers.len() {
                x = tape.relu(x)?;
            }
        }
        Ok(x)
    }
}
