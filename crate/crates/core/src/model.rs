//! The full classifier: encoder, cue extractor, phrase encoder and head.

use serde::{Deserialize, Serialize};

use crate::cue::{self, ContextMode, CueExtractor};
use crate::encoder::{Encoder, EncoderConfig, TokenBatch};
use crate::error::{Error, Result};
use crate::head::{self, Head};
use crate::label::NUM_CLASSES;
use crate::nn::{Linear, Mode, Module};
use crate::phrase::{final_repr, BiGru};
use crate::rng::SeededRng;
use crate::tensor::{Parameter, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhraseConfig {
    /// GRU hidden size per direction.
    pub hidden: usize,
}

impl Default for PhraseConfig {
    fn default() -> Self {
        Self { hidden: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden: usize,
    pub dropout: f64,
    /// Feed the cue embedding to the head alongside the phrase representation.
    pub fuse_cue_embedding: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden: 32, dropout: 0.3, fuse_cue_embedding: false }
    }
}

/// Which component, if any, is replaced by its ablation stand-in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Uniform attention over valid tokens and a constant loss weight of 1.
    NoCue,
    /// Mean-pooled encoder outputs projected to the phrase width.
    NoPhrase,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub phrase: PhraseConfig,
    pub head: HeadConfig,
    pub variant: Variant,
}

#[derive(Debug, Clone)]
enum Phrase {
    Gru(BiGru),
    MeanPool(Linear),
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    encoder: Encoder,
    cue: Option<CueExtractor>,
    phrase: Phrase,
    head: Head,
}

/// Everything one forward pass exposes.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub logits: Tensor,
    pub probs: Tensor,
    /// Raw cue scores `(B, L)`; absent without the cue extractor.
    pub scores: Option<Tensor>,
    /// Token weights `(B, L)`.
    pub attention: Tensor,
    pub mask: Tensor,
}

impl ModelOutput {
    /// Per-sample loss weight `(B,)`; constant 1 without the cue extractor.
    pub fn context_weight(&self, mode: ContextMode) -> Result<Tensor> {
        match &self.scores {
            Some(s) => cue::contextual_weight(s, &self.attention, &self.mask, mode),
            None => Ok(Tensor::from_vec(vec![1.0; self.mask.shape()[0]])),
        }
    }

    pub fn prob_rows(&self) -> Vec<[f64; NUM_CLASSES]> {
        self.probs.data().chunks(NUM_CLASSES).map(|r| [r[0], r[1], r[2]]).collect()
    }
}

/// Uniform weights over the valid positions of each row.
fn uniform_attention(mask: &Tensor) -> Result<Tensor> {
    let l = mask.shape()[1];
    let mut data = Vec::with_capacity(mask.numel());
    for (row, m) in mask.data().chunks(l).enumerate() {
        let n = m.iter().sum::<f64>();
        if n == 0.0 {
            return Err(crate::tensor::TensorError::NoValidPositions { row }.into());
        }
        data.extend(m.iter().map(|v| v / n));
    }
    Ok(Tensor::new(mask.shape(), data)?)
}

impl Model {
    pub fn new(cfg: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        let d = cfg.encoder.d_model;
        let hg = cfg.phrase.hidden;
        if hg == 0 {
            return Err(Error::Config("phrase.hidden must be positive".into()));
        }
        let encoder = Encoder::new(cfg.encoder.clone(), rng)?;
        let cue = match cfg.variant {
            Variant::NoCue => None,
            _ => Some(CueExtractor::new(d, rng)?),
        };
        let phrase = match cfg.variant {
            Variant::NoPhrase => Phrase::MeanPool(Linear::new("phrase.pool_projection", d, 2 * hg, rng)?),
            _ => Phrase::Gru(BiGru::new(d, hg, rng)?),
        };
        let cue_dim = cfg.head.fuse_cue_embedding.then_some(d);
        let head = Head::new(2 * hg, cue_dim, cfg.head.hidden, cfg.head.dropout, rng)?;
        Ok(Self { cfg, encoder, cue, phrase, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn forward(&self, batch: &TokenBatch, mode: &mut Mode) -> Result<ModelOutput> {
        let h = self.encoder.forward(batch, mode)?;
        let mask = batch.mask().clone();
        let (scores, attention) = match &self.cue {
            Some(c) => {
                let s = c.score(&h)?;
                let a = cue::attend(&s, &mask)?;
                (Some(s), a)
            }
            None => (None, uniform_attention(&mask)?),
        };
        let repr = match &self.phrase {
            Phrase::Gru(gru) => final_repr(&gru.forward(&h, &mask)?, &mask)?,
            Phrase::MeanPool(proj) => proj.forward(&cue::weighted_embedding(&uniform_attention(&mask)?, &h)?)?,
        };
        let e = match self.head.fuses_cue_embedding() {
            true => Some(cue::weighted_embedding(&attention, &h)?),
            false => None,
        };
        let logits = self.head.logits(&repr, e.as_ref(), mode)?;
        let probs = head::probs(&logits);
        Ok(ModelOutput { logits, probs, scores, attention, mask })
    }

    /// Eval-mode probabilities.
    pub fn predict(&self, batch: &TokenBatch) -> Result<Vec<[f64; NUM_CLASSES]>> {
        Ok(self.forward(batch, &mut Mode::Eval)?.prob_rows())
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.values().len()).sum()
    }

    /// Copies of every parameter's values, in [`Module::parameters`] order.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.parameters().iter().map(|p| p.values().to_vec()).collect()
    }

    pub fn restore(&mut self, values: &[Vec<f64>]) -> Result<()> {
        let params = self.parameters_mut();
        if params.len() != values.len() {
            return Err(Error::Checkpoint(format!("{} parameter tensors for a model with {}", values.len(), params.len())));
        }
        for (p, v) in params.into_iter().zip(values) {
            p.set_values(v.clone())?;
        }
        Ok(())
    }
}

impl Module for Model {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut p = self.encoder.parameters();
        if let Some(c) = &self.cue {
            p.extend(c.parameters());
        }
        match &self.phrase {
            Phrase::Gru(g) => p.extend(g.parameters()),
            Phrase::MeanPool(l) => p.extend(l.parameters()),
        }
        p.extend(self.head.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.encoder.parameters_mut();
        if let Some(c) = &mut self.cue {
            p.extend(c.parameters_mut());
        }
        match &mut self.phrase {
            Phrase::Gru(g) => p.extend(g.parameters_mut()),
            Phrase::MeanPool(l) => p.extend(l.parameters_mut()),
        }
        p.extend(self.head.parameters_mut());
        p
    }
}
