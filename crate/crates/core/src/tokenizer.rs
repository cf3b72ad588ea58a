//! Byte-level BPE tokenizer producing fixed-length id/mask pairs.
//!
//! Ids `0..4` are reserved specials (pad, unk, bos, eos), ids `4..260` are the
//! 256 raw bytes, and every later id is a learned merge of two earlier ids.
//! Because every byte has a token, encoding never produces `unk`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const NUM_SPECIALS: usize = 4;
/// Id of byte `0x00`; byte `b` has id `BYTE_OFFSET + b`.
pub const BYTE_OFFSET: u32 = NUM_SPECIALS as u32;
/// Smallest vocabulary: specials plus every byte, no merges.
pub const BASE_VOCAB: usize = NUM_SPECIALS + 256;
/// Fixed sequence length fed to the encoder.
pub const DEFAULT_MAX_LEN: usize = 128;

const HEADER: &str = "bpe-vocab v1";
const MERGES_SENTINEL: &str = "#merges";
const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<bos>", "<eos>"];
/// A pair must occur at least this often to be merged.
const MIN_PAIR_COUNT: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("cannot train a tokenizer on an empty corpus")]
    EmptyCorpus,
    #[error("vocabulary size {requested} is below the byte-level minimum {minimum}")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("cannot encode empty text")]
    EmptyText,
    #[error("max_len must be at least {0}")]
    MaxLenTooSmall(usize),
    #[error("token id {id} out of range for vocabulary of {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("vocabulary file line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TokenizerError>;

/// Fixed-length encoding of one post: `ids` and `mask` both have length `max_len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPost {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
    pub valid_len: usize,
}

impl TokenizedPost {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    pub fn valid_ids(&self) -> &[u32] {
        &self.ids[..self.valid_len]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    /// Byte content per id; specials are empty.
    tokens: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    /// pair -> (rank, merged id)
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

impl Vocabulary {
    /// Specials and raw bytes only.
    pub fn bytes_only() -> Self {
        let mut tokens = vec![Vec::new(); NUM_SPECIALS];
        tokens.extend((0..=255u8).map(|b| vec![b]));
        Self { tokens, merges: Vec::new(), ranks: HashMap::new() }
    }

    fn push_merge(&mut self, left: u32, right: u32) -> u32 {
        let id = self.tokens.len() as u32;
        let mut bytes = self.tokens[left as usize].clone();
        bytes.extend_from_slice(&self.tokens[right as usize]);
        self.tokens.push(bytes);
        self.ranks.insert((left, right), (self.merges.len(), id));
        self.merges.push((left, right));
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Byte content of a token; empty for specials.
    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    /// Merges the lowest-ranked adjacent pair until none applies.
    fn apply_merges(&self, mut seq: Vec<u32>) -> Vec<u32> {
        while seq.len() >= 2 {
            let best = seq
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(rank, id)| (rank, (w[0], w[1]), id)))
                .min_by_key(|&(rank, _, _)| rank);
            let Some((_, pair, id)) = best else { break };
            seq = merge_pair(&seq, pair, id);
        }
        seq
    }

    /// Token ids for `text` without padding or truncation.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let bytes = text.bytes().map(|b| BYTE_OFFSET + b as u32).collect();
        self.apply_merges(bytes)
    }

    /// Encodes to exactly `max_len` positions, truncating and padding on the right.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<TokenizedPost> {
        self.encode_with(text, max_len, false)
    }

    /// Like [`Vocabulary::encode`], optionally wrapping the content in bos/eos.
    pub fn encode_with(&self, text: &str, max_len: usize, bos_eos: bool) -> Result<TokenizedPost> {
        if text.trim().is_empty() {
            return Err(TokenizerError::EmptyText);
        }
        let min = if bos_eos { 3 } else { 1 };
        if max_len < min {
            return Err(TokenizerError::MaxLenTooSmall(min));
        }
        let mut content = self.tokenize(text);
        let mut ids = Vec::with_capacity(max_len);
        if bos_eos {
            content.truncate(max_len - 2);
            ids.push(BOS);
            ids.extend(content);
            ids.push(EOS);
        } else {
            content.truncate(max_len);
            ids.extend(content);
        }
        let valid_len = ids.len();
        ids.resize(max_len, PAD);
        let mask = (0..max_len).map(|i| u8::from(i < valid_len)).collect();
        Ok(TokenizedPost { ids, mask, valid_len })
    }

    /// Concatenates token bytes, dropping specials; invalid UTF-8 becomes U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self.token_bytes(id).ok_or(TokenizerError::IdOutOfRange { id, size: self.len() })?;
            bytes.extend_from_slice(tok);
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Text form: header, one hex token per line, sentinel, one `left right` merge per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER} {}\n", self.len());
        for (id, tok) in self.tokens.iter().enumerate() {
            if id < NUM_SPECIALS {
                out.push_str(SPECIAL_NAMES[id]);
            } else {
                for b in tok {
                    write!(out, "{b:02x}").expect("write to string");
                }
            }
            out.push('\n');
        }
        out.push_str(MERGES_SENTINEL);
        out.push('\n');
        for (l, r) in &self.merges {
            writeln!(out, "{l} {r}").expect("write to string");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let err = |line: usize, msg: String| TokenizerError::Format { line, msg };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
        let size: usize = header
            .strip_prefix(HEADER)
            .and_then(|rest| rest.trim().parse().ok())
            .ok_or_else(|| err(1, format!("expected `{HEADER} <size>`, got `{header}`")))?;
        if size < BASE_VOCAB {
            return Err(err(1, format!("size {size} below {BASE_VOCAB}")));
        }
        let mut tokens = Vec::with_capacity(size);
        for id in 0..size {
            let (n, line) = lines.next().ok_or_else(|| err(id + 2, "unexpected end of token list".into()))?;
            if id < NUM_SPECIALS {
                if line != SPECIAL_NAMES[id] {
                    return Err(err(n, format!("expected {}", SPECIAL_NAMES[id])));
                }
                tokens.push(Vec::new());
            } else {
                tokens.push(parse_hex(line).ok_or_else(|| err(n, format!("bad hex token `{line}`")))?);
            }
        }
        let (n, sentinel) = lines.next().ok_or_else(|| err(size + 2, "missing merges sentinel".into()))?;
        if sentinel != MERGES_SENTINEL {
            return Err(err(n, format!("expected `{MERGES_SENTINEL}`")));
        }
        let mut vocab = Self::bytes_only();
        for (id, tok) in tokens.iter().enumerate().take(BASE_VOCAB).skip(NUM_SPECIALS) {
            if tok != &vocab.tokens[id] {
                return Err(err(id + 2, format!("byte token {id} has wrong content")));
            }
        }
        for (n, line) in lines {
            let mut parts = line.split(' ');
            let (Some(l), Some(r), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(err(n, format!("expected `left right`, got `{line}`")));
            };
            let parse = |s: &str| s.parse::<u32>().map_err(|_| err(n, format!("bad id `{s}`")));
            let (l, r) = (parse(l)?, parse(r)?);
            let next = vocab.len();
            if l as usize >= next || r as usize >= next || (l as usize) < NUM_SPECIALS || (r as usize) < NUM_SPECIALS {
                return Err(err(n, format!("merge ({l}, {r}) references an unavailable token")));
            }
            let id = vocab.push_merge(l, r) as usize;
            if tokens.get(id) != Some(&vocab.tokens[id]) {
                return Err(err(n, format!("merge output does not match token {id}")));
            }
        }
        if vocab.len() != size {
            return Err(err(0, format!("{} tokens listed but merges produce {}", size, vocab.len())));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn parse_hex(s: &str) -> Option<Vec<u8>> {
    if s.is_empty() || s.len() % 2 != 0 {
        return None;
    }
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok()).collect()
}

fn merge_pair(seq: &[u32], pair: (u32, u32), id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && (seq[i], seq[i + 1]) == pair {
            out.push(id);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    out
}

fn count_pairs(seq: &[u32], weight: i64, counts: &mut HashMap<(u32, u32), i64>) {
    for w in seq.windows(2) {
        let c = counts.entry((w[0], w[1])).or_insert(0);
        *c += weight;
    }
}

/// Learns merges until the vocabulary reaches `vocab_size` or no pair repeats.
///
/// Each step merges the most frequent adjacent pair across the corpus; ties go
/// to the pair whose (left bytes, right bytes) is lexicographically smallest.
pub fn train_bpe<S: AsRef<str>>(texts: &[S], vocab_size: usize) -> Result<Vocabulary> {
    if texts.is_empty() || texts.iter().all(|t| t.as_ref().is_empty()) {
        return Err(TokenizerError::EmptyCorpus);
    }
    if vocab_size < BASE_VOCAB {
        return Err(TokenizerError::VocabTooSmall { requested: vocab_size, minimum: BASE_VOCAB });
    }
    let mut vocab = Vocabulary::bytes_only();

    let mut freq: BTreeMap<&str, i64> = BTreeMap::new();
    for t in texts {
        *freq.entry(t.as_ref()).or_insert(0) += 1;
    }
    let mut seqs: Vec<(Vec<u32>, i64)> = freq
        .into_iter()
        .map(|(t, n)| (t.bytes().map(|b| BYTE_OFFSET + b as u32).collect(), n))
        .collect();
    let mut counts = HashMap::new();
    for (seq, n) in &seqs {
        count_pairs(seq, *n, &mut counts);
    }

    while vocab.len() < vocab_size {
        let mut best: Option<((u32, u32), i64)> = None;
        for (&pair, &count) in &counts {
            let better = match best {
                None => true,
                Some((bp, bc)) => {
                    count > bc
                        || (count == bc
                            && (vocab.tokens[pair.0 as usize].as_slice(), vocab.tokens[pair.1 as usize].as_slice())
                                < (vocab.tokens[bp.0 as usize].as_slice(), vocab.tokens[bp.1 as usize].as_slice()))
                }
            };
            if better {
                best = Some((pair, count));
            }
        }
        let Some((pair, count)) = best else { break };
        if count < MIN_PAIR_COUNT as i64 {
            break;
        }
        let id = vocab.push_merge(pair.0, pair.1);
        for (seq, n) in seqs.iter_mut() {
            if !seq.windows(2).any(|w| (w[0], w[1]) == pair) {
                continue;
            }
            count_pairs(seq, -*n, &mut counts);
            *seq = merge_pair(seq, pair, id);
            count_pairs(seq, *n, &mut counts);
        }
        counts.retain(|_, c| *c > 0);
    }
    Ok(vocab)
}
