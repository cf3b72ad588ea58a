//! Small post-layer-norm transformer encoder producing one embedding per token.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Mode, Module};
use crate::rng::{normal_vec, SeededRng, INIT_STD};
use crate::tensor::{Parameter, Tensor};
use crate::tokenizer::{TokenizedPost, DEFAULT_MAX_LEN, PAD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Filled in from the tokenizer when zero.
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Defaults to `4 * d_model` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ffn_dim: Option<usize>,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { vocab_size: 0, max_len: DEFAULT_MAX_LEN, d_model: 64, n_heads: 4, n_layers: 2, ffn_dim: None, dropout: 0.3 }
    }
}

impl EncoderConfig {
    pub fn ffn_dim(&self) -> usize {
        self.ffn_dim.unwrap_or(4 * self.d_model)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("encoder: {msg}")));
        if self.vocab_size == 0 || self.max_len == 0 || self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return bad("vocab_size, max_len, d_model, n_heads and n_layers must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.ffn_dim() == 0 {
            return bad("ffn_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// A batch of token ids with its padding mask, `B` sequences of length `L`.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    ids: Vec<usize>,
    mask: Tensor,
    batch: usize,
    len: usize,
}

impl TokenBatch {
    /// Row-major ids and 0/1 mask, both `batch * len` long.
    pub fn from_parts(ids: Vec<usize>, mask: Vec<f64>, batch: usize, len: usize) -> Result<Self> {
        if batch == 0 || len == 0 || ids.len() != batch * len || mask.len() != batch * len {
            return Err(Error::Usage(format!(
                "token batch of {batch}x{len} needs {} ids and mask entries, got {} and {}",
                batch * len,
                ids.len(),
                mask.len()
            )));
        }
        let mask = Tensor::new(&[batch, len], mask)?;
        Ok(Self { ids, mask, batch, len })
    }

    /// Full-length batch; every post must have the same `max_len`.
    pub fn new(posts: &[&TokenizedPost]) -> Result<Self> {
        let len = posts.first().map(|p| p.max_len()).unwrap_or(0);
        Self::truncated(posts, len)
    }

    /// Keeps only the longest valid prefix in the batch. Positions dropped
    /// this way are padding in every row, so valid-position outputs are unchanged.
    pub fn trimmed(posts: &[&TokenizedPost]) -> Result<Self> {
        let len = posts.iter().map(|p| p.valid_len).max().unwrap_or(0);
        Self::truncated(posts, len)
    }

    fn truncated(posts: &[&TokenizedPost], len: usize) -> Result<Self> {
        let mut ids = Vec::with_capacity(posts.len() * len);
        let mut mask = Vec::with_capacity(posts.len() * len);
        for p in posts {
            if p.max_len() < len {
                return Err(Error::Usage(format!("post of length {} in batch of length {len}", p.max_len())));
            }
            ids.extend(p.ids[..len].iter().map(|&i| i as usize));
            mask.extend(p.mask[..len].iter().map(|&m| f64::from(m)));
        }
        Self::from_parts(ids, mask, posts.len(), len)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// `(B, L)` mask with 1 at valid positions.
    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.len
    }

    /// Copy with the ids at masked positions replaced.
    pub fn with_masked_ids(&self, fill: impl Fn(usize) -> usize) -> Self {
        let ids = self
            .ids
            .iter()
            .zip(self.mask.data())
            .enumerate()
            .map(|(i, (&id, &m))| if m == 0.0 { fill(i) } else { id })
            .collect();
        Self { ids, ..self.clone() }
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    attn_norm: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    ffn_norm: LayerNorm,
}

impl EncoderLayer {
    fn new(name: &str, cfg: &EncoderConfig, rng: &mut SeededRng) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            query: Linear::new(&format!("{name}.attn.query"), d, d, rng)?,
            key: Linear::new(&format!("{name}.attn.key"), d, d, rng)?,
            value: Linear::new(&format!("{name}.attn.value"), d, d, rng)?,
            output: Linear::new(&format!("{name}.attn.output"), d, d, rng)?,
            attn_norm: LayerNorm::new(&format!("{name}.attn_norm"), d)?,
            ffn_in: Linear::new(&format!("{name}.ffn.in"), d, cfg.ffn_dim(), rng)?,
            ffn_out: Linear::new(&format!("{name}.ffn.out"), cfg.ffn_dim(), d, rng)?,
            ffn_norm: LayerNorm::new(&format!("{name}.ffn_norm"), d)?,
        })
    }

    /// `x` is `(B * L, D)`.
    fn forward(&self, x: &Tensor, batch: &TokenBatch, cfg: &EncoderConfig, mode: &mut Mode) -> Result<Tensor> {
        let b = batch.batch_size();
        let dh = cfg.d_model / cfg.n_heads;
        let q = self.query.forward(x)?;
        let k = self.key.forward(x)?;
        let v = self.value.forward(x)?;
        let scores = q.head_scores(&k, b, cfg.n_heads, 1.0 / (dh as f64).sqrt())?;
        let attn = scores.masked_softmax(batch.mask())?;
        let ctx = attn.head_context(&v, b, cfg.n_heads)?;
        let attended = mode.dropout(&self.output.forward(&ctx)?, cfg.dropout)?;
        let x = self.attn_norm.forward(&x.add(&attended)?)?;
        let hidden = self.ffn_in.forward(&x)?.gelu();
        let ffn = mode.dropout(&self.ffn_out.forward(&hidden)?, cfg.dropout)?;
        Ok(self.ffn_norm.forward(&x.add(&ffn)?)?)
    }
}

impl Module for EncoderLayer {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut p = Vec::new();
        for l in [&self.query, &self.key, &self.value, &self.output] {
            p.extend(l.parameters());
        }
        p.extend(self.attn_norm.parameters());
        p.extend(self.ffn_in.parameters());
        p.extend(self.ffn_out.parameters());
        p.extend(self.ffn_norm.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = Vec::new();
        for l in [&mut self.query, &mut self.key, &mut self.value, &mut self.output] {
            p.extend(l.parameters_mut());
        }
        p.extend(self.attn_norm.parameters_mut());
        p.extend(self.ffn_in.parameters_mut());
        p.extend(self.ffn_out.parameters_mut());
        p.extend(self.ffn_norm.parameters_mut());
        p
    }
}

/// Token and learned position embeddings followed by `n_layers` self-attention blocks.
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    token_embedding: Parameter,
    position_embedding: Parameter,
    embedding_norm: LayerNorm,
    layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut tokens = normal_vec(rng, cfg.vocab_size * d, INIT_STD);
        let pad = PAD as usize;
        tokens[pad * d..(pad + 1) * d].fill(0.0);
        let token_embedding = Parameter::new("encoder.token_embedding", &[cfg.vocab_size, d], tokens)?;
        let position_embedding =
            Parameter::new("encoder.position_embedding", &[cfg.max_len, d], normal_vec(rng, cfg.max_len * d, INIT_STD))?;
        let embedding_norm = LayerNorm::new("encoder.embedding_norm", d)?;
        let layers = (0..cfg.n_layers)
            .map(|i| EncoderLayer::new(&format!("encoder.layer{i}"), &cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { cfg, token_embedding, position_embedding, embedding_norm, layers })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Contextual embeddings `(B, L, D)`.
    ///
    /// Attention only looks at valid keys, so outputs at valid positions do
    /// not depend on what sits in the padded positions.
    pub fn forward(&self, batch: &TokenBatch, mode: &mut Mode) -> Result<Tensor> {
        let (b, l, d) = (batch.batch_size(), batch.seq_len(), self.cfg.d_model);
        if l > self.cfg.max_len {
            return Err(Error::Usage(format!("sequence length {l} exceeds encoder max_len {}", self.cfg.max_len)));
        }
        if let Some(&bad) = batch.ids().iter().find(|&&id| id >= self.cfg.vocab_size) {
            return Err(Error::Usage(format!("token id {bad} out of range for vocabulary of {}", self.cfg.vocab_size)));
        }
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
        let tok = self.token_embedding.tensor().embedding(batch.ids())?;
        let pos = self.position_embedding.tensor().embedding(&positions)?;
        let mut x = self.embedding_norm.forward(&tok.add(&pos)?)?;
        x = mode.dropout(&x, self.cfg.dropout)?;
        for layer in &self.layers {
            x = layer.forward(&x, batch, &self.cfg, mode)?;
        }
        Ok(x.reshape(&[b, l, d])?)
    }
}

impl Module for Encoder {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut p = vec![&self.token_embedding, &self.position_embedding];
        p.extend(self.embedding_norm.parameters());
        for layer in &self.layers {
            p.extend(layer.parameters());
        }
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = vec![&mut self.token_embedding, &mut self.position_embedding];
        p.extend(self.embedding_norm.parameters_mut());
        for layer in &mut self.layers {
            p.extend(layer.parameters_mut());
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::RngExt;

    fn config(vocab: usize) -> EncoderConfig {
        EncoderConfig { vocab_size: vocab, d_model: 16, n_heads: 2, n_layers: 2, ..Default::default() }
    }

    fn random_batch(rng: &mut SeededRng, vocab: usize, lens: &[usize], l: usize) -> TokenBatch {
        let mut ids = Vec::new();
        let mut mask = Vec::new();
        for &n in lens {
            for i in 0..l {
                ids.push(if i < n { rng.random_range(4..vocab) } else { PAD as usize });
                mask.push(if i < n { 1.0 } else { 0.0 });
            }
        }
        TokenBatch::from_parts(ids, mask, lens.len(), l).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(config(50).validate().is_ok());
        assert!(EncoderConfig { n_heads: 3, ..config(50) }.validate().is_err());
        assert!(EncoderConfig { dropout: 1.0, ..config(50) }.validate().is_err());
        assert!(EncoderConfig::default().validate().is_err(), "vocab_size must be set");
        assert_eq!(EncoderConfig::default().ffn_dim(), 256);
    }

    #[test]
    fn output_shape() {
        let mut rng = seeded(1);
        let enc = Encoder::new(EncoderConfig { vocab_size: 300, ..Default::default() }, &mut rng).unwrap();
        let batch = random_batch(&mut rng, 300, &[5, 128], 128);
        let h = enc.forward(&batch, &mut Mode::Eval).unwrap();
        assert_eq!(h.shape(), &[2, 128, 64]);
    }

    #[test]
    fn masked_content_does_not_leak() {
        let mut rng = seeded(2);
        let enc = Encoder::new(config(60), &mut rng).unwrap();
        let batch = random_batch(&mut rng, 60, &[3, 7, 1], 9);
        let other = batch.with_masked_ids(|i| 4 + (i * 7) % 50);
        let a = enc.forward(&batch, &mut Mode::Eval).unwrap();
        let b = enc.forward(&other, &mut Mode::Eval).unwrap();
        let d = 16;
        for (row, &m) in batch.mask().data().iter().enumerate() {
            if m == 1.0 {
                for j in 0..d {
                    assert!((a.data()[row * d + j] - b.data()[row * d + j]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn trimming_keeps_valid_outputs() {
        let mut rng = seeded(3);
        let enc = Encoder::new(config(60), &mut rng).unwrap();
        let vocab = crate::tokenizer::Vocabulary::bytes_only();
        let posts = [vocab.encode("abc", 12).unwrap(), vocab.encode("abcdef", 12).unwrap()];
        let refs: Vec<&TokenizedPost> = posts.iter().collect();
        let cfg = config(300);
        let enc300 = Encoder::new(cfg, &mut rng).unwrap();
        let _ = enc;
        let full = enc300.forward(&TokenBatch::new(&refs).unwrap(), &mut Mode::Eval).unwrap();
        let trimmed_batch = TokenBatch::trimmed(&refs).unwrap();
        assert_eq!(trimmed_batch.seq_len(), 6);
        let trimmed = enc300.forward(&trimmed_batch, &mut Mode::Eval).unwrap();
        for b in 0..2 {
            for i in 0..posts[b].valid_len {
                for j in 0..16 {
                    let x = full.data()[(b * 12 + i) * 16 + j];
                    let y = trimmed.data()[(b * 6 + i) * 16 + j];
                    assert!((x - y).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn position_embeddings_break_permutation_symmetry() {
        let mut rng = seeded(4);
        let enc = Encoder::new(config(60), &mut rng).unwrap();
        let a = TokenBatch::from_parts(vec![10, 20, 30], vec![1.0; 3], 1, 3).unwrap();
        let b = TokenBatch::from_parts(vec![20, 10, 30], vec![1.0; 3], 1, 3).unwrap();
        let ha = enc.forward(&a, &mut Mode::Eval).unwrap();
        let hb = enc.forward(&b, &mut Mode::Eval).unwrap();
        let last = |h: &Tensor| h.data()[2 * 16..3 * 16].to_vec();
        assert_ne!(last(&ha), last(&hb));
    }

    #[test]
    fn eval_is_deterministic_and_train_uses_dropout() {
        let mut rng = seeded(5);
        let enc = Encoder::new(config(60), &mut rng).unwrap();
        let batch = random_batch(&mut rng, 60, &[4, 6], 6);
        let a = enc.forward(&batch, &mut Mode::Eval).unwrap();
        let b = enc.forward(&batch, &mut Mode::Eval).unwrap();
        assert_eq!(a.data(), b.data());
        let mut drng = seeded(9);
        let c = enc.forward(&batch, &mut Mode::Train(&mut drng)).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn rejects_out_of_range_ids() {
        let mut rng = seeded(6);
        let enc = Encoder::new(config(20), &mut rng).unwrap();
        let batch = TokenBatch::from_parts(vec![5, 25], vec![1.0, 1.0], 1, 2).unwrap();
        assert!(enc.forward(&batch, &mut Mode::Eval).is_err());
    }

    #[test]
    fn pad_row_starts_at_zero() {
        let mut rng = seeded(7);
        let enc = Encoder::new(config(20), &mut rng).unwrap();
        assert!(enc.token_embedding.values()[..16].iter().all(|&v| v == 0.0));
        let names: std::collections::HashSet<_> = enc.parameters().iter().map(|p| p.name().to_string()).collect();
        assert_eq!(names.len(), enc.parameters().len());
    }
}
