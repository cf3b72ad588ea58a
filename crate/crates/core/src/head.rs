//! Two-layer classification head.

use crate::error::{Error, Result};
use crate::label::NUM_CLASSES;
use crate::nn::{Linear, Mode, Module};
use crate::rng::SeededRng;
use crate::tensor::{Parameter, Tensor};

/// `z = W2 relu(W1 x + b1) + b2`, where `x` is the phrase representation,
/// optionally followed by the cue embedding.
#[derive(Debug, Clone)]
pub struct Head {
    pub hidden: Linear,
    pub output: Linear,
    repr_dim: usize,
    cue_dim: Option<usize>,
    dropout: f64,
}

impl Head {
    /// `cue_dim` is `Some(D)` when the cue embedding is fused into the input.
    pub fn new(repr_dim: usize, cue_dim: Option<usize>, hidden: usize, dropout: f64, rng: &mut SeededRng) -> Result<Self> {
        if repr_dim == 0 || hidden == 0 || cue_dim == Some(0) {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("head dropout {dropout} not in [0, 1)")));
        }
        let input = repr_dim + cue_dim.unwrap_or(0);
        Ok(Self {
            hidden: Linear::new("head.hidden", input, hidden, rng)?,
            output: Linear::new("head.output", hidden, NUM_CLASSES, rng)?,
            repr_dim,
            cue_dim,
            dropout,
        })
    }

    pub fn fuses_cue_embedding(&self) -> bool {
        self.cue_dim.is_some()
    }

    pub fn input_dim(&self) -> usize {
        self.repr_dim + self.cue_dim.unwrap_or(0)
    }

    /// Logits `(B, 3)`. `cue` must be given exactly when the head fuses it.
    pub fn logits(&self, repr: &Tensor, cue: Option<&Tensor>, mode: &mut Mode) -> Result<Tensor> {
        let input = match (cue, self.cue_dim) {
            (None, None) => repr.clone(),
            (Some(e), Some(d)) => {
                if e.shape().len() != 2 || e.shape()[1] != d || e.shape()[0] != repr.shape()[0] {
                    return Err(Error::Usage(format!("cue embedding {:?} does not fit head width {d}", e.shape())));
                }
                Tensor::concat(&[repr.clone(), e.clone()], 1)?
            }
            (Some(_), None) => return Err(Error::Usage("cue embedding given to a head without fusion".into())),
            (None, Some(_)) => return Err(Error::Usage("fusion head needs the cue embedding".into())),
        };
        if input.shape().len() != 2 || input.shape()[1] != self.input_dim() {
            return Err(Error::Usage(format!("head expects width {}, got {:?}", self.input_dim(), input.shape())));
        }
        let hidden = mode.dropout(&self.hidden.forward(&input)?.relu(), self.dropout)?;
        Ok(self.output.forward(&hidden)?)
    }
}

/// Row-wise softmax of the logits.
pub fn probs(logits: &Tensor) -> Tensor {
    logits.softmax()
}

impl Module for Head {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut p = self.hidden.parameters();
        p.extend(self.output.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.hidden.parameters_mut();
        p.extend(self.output.parameters_mut());
        p
    }
}
