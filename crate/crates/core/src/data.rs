//! Tokenized, labelled posts ready for batching.

use serde::{Deserialize, Serialize};

use crate::corpus::{class_counts, filter_short, stratified_split, PostRecord};
use crate::encoder::TokenBatch;
use crate::error::{Error, Result};
use crate::label::{Label, NUM_CLASSES};
use crate::tokenizer::{TokenizedPost, Vocabulary, DEFAULT_MAX_LEN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    /// Wrap each post in begin/end markers.
    pub bos_eos: bool,
    /// Posts with fewer tokens are dropped before splitting.
    pub min_tokens: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { vocab_size: 512, max_len: DEFAULT_MAX_LEN, bos_eos: false, min_tokens: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Train, validation and test fractions.
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { ratios: [0.8, 0.1, 0.1], seed: 0 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub posts: Vec<TokenizedPost>,
    pub labels: Vec<Label>,
}

impl Dataset {
    pub fn encode(records: &[PostRecord], vocab: &Vocabulary, max_len: usize, bos_eos: bool) -> Result<Self> {
        let posts = records
            .iter()
            .map(|r| vocab.encode_with(&r.text, max_len, bos_eos))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { posts, labels: records.iter().map(|r| r.label).collect() })
    }

    pub fn len(&self) -> usize {
        self.posts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posts.is_empty()
    }

    /// Trimmed batch of the posts at `indices` with their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(TokenBatch, Vec<Label>)> {
        if indices.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let posts: Vec<&TokenizedPost> = indices.iter().map(|&i| &self.posts[i]).collect();
        Ok((TokenBatch::trimmed(&posts)?, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            posts: indices.iter().map(|&i| self.posts[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Training, validation and optional test data.
#[derive(Debug, Clone, Default)]
pub struct SplitData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Option<Dataset>,
}

/// Counts reported by [`prepare`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrepSummary {
    pub dropped_short: usize,
    pub train: [usize; NUM_CLASSES],
    pub val: [usize; NUM_CLASSES],
    pub test: [usize; NUM_CLASSES],
}

/// Drops short posts, splits by class and tokenizes each part.
pub fn prepare(
    records: Vec<PostRecord>,
    vocab: &Vocabulary,
    tok: &TokenizerConfig,
    split: &SplitConfig,
) -> Result<(SplitData, PrepSummary)> {
    let (kept, dropped_short) = filter_short(records, tok.min_tokens, vocab, tok.bos_eos);
    if dropped_short > 0 {
        log::info!("dropped {dropped_short} posts shorter than {} tokens", tok.min_tokens);
    }
    let parts = stratified_split(&kept, split.ratios, split.seed)?;
    let summary = PrepSummary {
        dropped_short,
        train: class_counts(&parts.train),
        val: class_counts(&parts.val),
        test: class_counts(&parts.test),
    };
    let enc = |r: &[PostRecord]| Dataset::encode(r, vocab, tok.max_len, tok.bos_eos);
    let test = match parts.test.is_empty() {
        true => None,
        false => Some(enc(&parts.test)?),
    };
    Ok((SplitData { train: enc(&parts.train)?, val: enc(&parts.val)?, test }, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_synthetic, SyntheticSpec};

    #[test]
    fn prepare_filters_then_splits() {
        let mut recs = gen_synthetic(&SyntheticSpec { n_total: 200, priors: [0.2, 0.6, 0.2], ..Default::default() }).unwrap();
        recs.push(PostRecord { text: "hi".into(), label: Label::new(2).unwrap(), id: None });
        let vocab = Vocabulary::bytes_only();
        let (data, summary) = prepare(recs, &vocab, &TokenizerConfig::default(), &SplitConfig::default()).unwrap();
        assert_eq!(summary.dropped_short, 1);
        assert_eq!(data.train.len(), summary.train.iter().sum::<usize>());
        assert_eq!(data.val.len(), summary.val.iter().sum::<usize>());
        assert_eq!(data.test.as_ref().unwrap().len(), summary.test.iter().sum::<usize>());
        assert_eq!(data.train.len() + data.val.len() + data.test.unwrap().len(), 200);
    }

    #[test]
    fn batch_rejects_empty_index_list() {
        let d = Dataset::default();
        assert!(d.batch(&[]).is_err());
    }
}
