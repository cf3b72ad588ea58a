//! Attention-based cue extractor.
//!
//! A single learned vector scores every token embedding. The softmax of those
//! scores over valid positions gives per-token importance, which produces a
//! weighted sentence embedding and the per-sample weight that scales the loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::rng::{normal_vec, SeededRng, INIT_STD};
use crate::tensor::{Parameter, Tensor};

/// How the per-sample loss weight is derived from the attention scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// Sum of the attention weights over valid positions. Always 1, so the
    /// weighted loss reduces to the plain focal loss.
    PaperLiteral,
    /// Mean of `sigmoid(score)` over valid positions, in `(0, 1)`.
    #[default]
    SigmoidMean,
}

impl std::str::FromStr for ContextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_literal" => Ok(Self::PaperLiteral),
            "sigmoid_mean" => Ok(Self::SigmoidMean),
            other => Err(Error::Config(format!("unknown context mode '{other}' (expected paper_literal or sigmoid_mean)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaflConfig {
    pub context_mode: ContextMode,
}

#[derive(Debug, Clone)]
pub struct CueExtractor {
    w_att: Parameter,
}

impl CueExtractor {
    pub fn new(dim: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self { w_att: Parameter::new("cue.w_att", &[dim], normal_vec(rng, dim, INIT_STD))? })
    }

    pub fn from_weights(w: Vec<f64>) -> Result<Self> {
        let n = w.len();
        Ok(Self { w_att: Parameter::new("cue.w_att", &[n], w)? })
    }

    pub fn dim(&self) -> usize {
        self.w_att.shape()[0]
    }

    /// Raw importance scores `(B, L)`, one dot product per position.
    pub fn score(&self, h: &Tensor) -> Result<Tensor> {
        let shape = h.shape();
        if shape.len() != 3 || shape[2] != self.dim() {
            return Err(Error::Usage(format!("cue scores need (B, L, {}) embeddings, got {shape:?}", self.dim())));
        }
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        let flat = h.reshape(&[b * l, d])?;
        let w = self.w_att.tensor().reshape(&[d, 1])?;
        Ok(flat.matmul(&w)?.reshape(&[b, l])?)
    }
}

impl Module for CueExtractor {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.w_att]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.w_att]
    }
}

/// Softmax of the scores over valid positions; masked weights are exactly 0.
pub fn attend(scores: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if scores.shape() != mask.shape() {
        return Err(Error::Usage(format!("scores {:?} and mask {:?} differ in shape", scores.shape(), mask.shape())));
    }
    Ok(scores.masked_softmax(mask)?)
}

/// `E = sum_i a_i h_i`, shape `(B, D)`.
pub fn weighted_embedding(attn: &Tensor, h: &Tensor) -> Result<Tensor> {
    let (sa, sh) = (attn.shape(), h.shape());
    if sa.len() != 2 || sh.len() != 3 || sa[0] != sh[0] || sa[1] != sh[1] {
        return Err(Error::Usage(format!("attention {sa:?} does not match embeddings {sh:?}")));
    }
    let (b, l, d) = (sh[0], sh[1], sh[2]);
    Ok(attn.head_context(&h.reshape(&[b * l, d])?, b, 1)?)
}

/// Per-sample loss weight `(B,)`, detached from the graph.
pub fn contextual_weight(scores: &Tensor, attn: &Tensor, mask: &Tensor, mode: ContextMode) -> Result<Tensor> {
    if scores.shape() != mask.shape() || attn.shape() != mask.shape() || mask.shape().len() != 2 {
        return Err(Error::Usage(format!(
            "scores {:?}, attention {:?} and mask {:?} must share one (B, L) shape",
            scores.shape(),
            attn.shape(),
            mask.shape()
        )));
    }
    let l = mask.shape()[1];
    let rows = mask.data().chunks(l).zip(scores.data().chunks(l)).zip(attn.data().chunks(l));
    let mut out = Vec::with_capacity(mask.shape()[0]);
    for (row, ((m, s), a)) in rows.enumerate() {
        let valid = m.iter().filter(|&&v| v != 0.0).count();
        if valid == 0 {
            return Err(crate::tensor::TensorError::NoValidPositions { row }.into());
        }
        let w = match mode {
            ContextMode::PaperLiteral => a.iter().zip(m).map(|(a, m)| a * m).sum(),
            ContextMode::SigmoidMean => s.iter().zip(m).map(|(s, m)| sigmoid(*s) * m).sum::<f64>() / valid as f64,
        };
        out.push(w);
    }
    Ok(Tensor::from_vec(out))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
