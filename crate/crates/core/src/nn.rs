//! Small building blocks shared by the model components.

use crate::rng::{normal_vec, SeededRng, INIT_STD};
use crate::tensor::{Parameter, Result, Tensor};

/// Forward-pass mode. Dropout draws from the generator only in training.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut SeededRng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    /// Inverted dropout at `rate` in training, identity in evaluation.
    pub fn dropout(&mut self, x: &Tensor, rate: f64) -> Result<Tensor> {
        match self {
            Mode::Train(rng) if rate > 0.0 => x.dropout(1.0 - rate, *rng),
            _ => Ok(x.clone()),
        }
    }
}

/// Anything that owns named parameters.
pub trait Module {
    fn parameters(&self) -> Vec<&Parameter>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter>;
}

/// `y = x W + b` with `W: (in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new(name: &str, input: usize, output: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            weight: Parameter::new(format!("{name}.weight"), &[input, output], normal_vec(rng, input * output, INIT_STD))?,
            bias: Parameter::new(format!("{name}.bias"), &[output], vec![0.0; output])?,
        })
    }

    /// `x` is `(rows, in)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(self.weight.tensor())?.add_row(self.bias.tensor())
    }

    pub fn output_dim(&self) -> usize {
        self.bias.shape()[0]
    }
}

impl Module for Linear {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Row-wise layer normalization followed by a learned gain and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Parameter,
    pub shift: Parameter,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: Parameter::new(format!("{name}.gain"), &[dim], vec![1.0; dim])?,
            shift: Parameter::new(format!("{name}.shift"), &[dim], vec![0.0; dim])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm().mul_row(self.gain.tensor())?.add_row(self.shift.tensor())
    }
}

impl Module for LayerNorm {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.gain, &self.shift]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.gain, &mut self.shift]
    }
}
