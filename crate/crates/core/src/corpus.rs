//! Labelled posts: JSON-lines I/O, length filtering, stratified splits and a
//! synthetic generator with planted perspective cues.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::label::{Label, NUM_CLASSES};
use crate::rng::seeded;
use crate::tokenizer::Vocabulary;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostRecord {
    pub text: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub msg: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.msg)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{} malformed line(s): {}", .0.len(), summarize(.0))]
    Malformed(Vec<LineError>),
    #[error("class {label} has {count} record(s); a stratified split needs at least 3")]
    ClassTooSmall { label: Label, count: usize },
    #[error("split ratios {0:?} must be non-negative and sum to 1")]
    BadRatios([f64; 3]),
    #[error("invalid synthetic spec: {0}")]
    BadSpec(String),
}

fn summarize(errors: &[LineError]) -> String {
    const SHOWN: usize = 5;
    let mut s: Vec<String> = errors.iter().take(SHOWN).map(ToString::to_string).collect();
    if errors.len() > SHOWN {
        s.push(format!("and {} more", errors.len() - SHOWN));
    }
    s.join("; ")
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Deserialize)]
struct RawRecord {
    text: Option<String>,
    label: Option<i64>,
    id: Option<String>,
}

fn parse_line(line: &str) -> std::result::Result<PostRecord, String> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let text = raw.text.ok_or("missing key 'text'")?;
    if text.trim().is_empty() {
        return Err("empty text".into());
    }
    let label = Label::new(raw.label.ok_or("missing key 'label'")?).map_err(|e| e.to_string())?;
    Ok(PostRecord { text, label, id: raw.id })
}

/// Parses one JSON object per line. Blank lines are skipped; every malformed
/// line is reported with its 1-based number.
pub fn parse_jsonl(content: &str) -> Result<Vec<PostRecord>> {
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line) {
            Ok(r) => records.push(r),
            Err(msg) => errors.push(LineError { line: i + 1, msg }),
        }
    }
    if errors.is_empty() {
        Ok(records)
    } else {
        Err(CorpusError::Malformed(errors))
    }
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<PostRecord>> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
    parse_jsonl(&content)
}

pub fn to_jsonl(records: &[PostRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(path: impl AsRef<Path>, records: &[PostRecord]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_jsonl(records)).map_err(|source| CorpusError::Io { path: path.display().to_string(), source })
}

/// Number of valid positions `text` occupies once tokenized.
pub fn token_count(vocab: &Vocabulary, text: &str, bos_eos: bool) -> usize {
    vocab.tokenize(text).len() + if bos_eos { 2 } else { 0 }
}

/// Keeps records with at least `min_tokens` tokens, in order. Returns the
/// survivors and the number dropped.
pub fn filter_short(records: Vec<PostRecord>, min_tokens: usize, vocab: &Vocabulary, bos_eos: bool) -> (Vec<PostRecord>, usize) {
    let before = records.len();
    let kept: Vec<PostRecord> = records.into_iter().filter(|r| token_count(vocab, &r.text, bos_eos) >= min_tokens).collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<PostRecord>,
    pub val: Vec<PostRecord>,
    pub test: Vec<PostRecord>,
}

pub fn class_counts(records: &[PostRecord]) -> [usize; NUM_CLASSES] {
    let mut counts = [0; NUM_CLASSES];
    for r in records {
        counts[r.label.index()] += 1;
    }
    counts
}

/// Per-class shuffle then partition. Validation and test receive
/// `floor(n * ratio)` of each class and training keeps the remainder.
/// Each part lists its records in input order.
pub fn stratified_split(records: &[PostRecord], ratios: [f64; 3], seed: u64) -> Result<Split> {
    if ratios.iter().any(|&r| !(r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CorpusError::BadRatios(ratios));
    }
    let mut by_class: [Vec<usize>; NUM_CLASSES] = Default::default();
    for (i, r) in records.iter().enumerate() {
        by_class[r.label.index()].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < 3 {
            let label = Label::from_index(c).expect("class index");
            return Err(CorpusError::ClassTooSmall { label, count: members.len() });
        }
    }
    let mut rng = seeded(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for mut members in by_class {
        members.shuffle(&mut rng);
        let n = members.len() as f64;
        let n_val = (n * ratios[1] + 1e-9).floor() as usize;
        let n_test = (n * ratios[2] + 1e-9).floor() as usize;
        let n_train = members.len() - n_val - n_test;
        parts[0].extend_from_slice(&members[..n_train]);
        parts[1].extend_from_slice(&members[n_train..n_train + n_val]);
        parts[2].extend_from_slice(&members[n_train + n_val..]);
    }
    let [train, val, test] = parts.map(|mut idx| {
        idx.sort_unstable();
        idx.into_iter().map(|i| records[i].clone()).collect::<Vec<_>>()
    });
    Ok(Split { train, val, test })
}

/// Word pools for the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Lexicons {
    pub first_person: Vec<String>,
    pub third_person: Vec<String>,
    pub cues: Vec<String>,
    pub filler: Vec<String>,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

impl Default for Lexicons {
    fn default() -> Self {
        Self {
            first_person: words("i me my myself mine"),
            third_person: words("she he her his they them their someone"),
            cues: words("allowance sponsor arrangement monthly generous tuition gifts rent daddy stipend"),
            filler: words(
                "today weather coffee movie went park friends dinner weekend music city work happy train book \
                 photo cat dog rain sunny lunch class exam game song trip beach tired morning night walk shop \
                 cake tea bus phone video news story market garden river hill lake snow winter summer late \
                 early new old good nice long short quiet busy the a and with after before at on in",
            ),
        }
    }
}

/// Parameters of the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_total: usize,
    pub priors: [f64; NUM_CLASSES],
    /// Probability that an unrelated post mentions a transactional cue.
    pub ambiguity_rate: f64,
    /// Inclusive word-count range.
    pub min_words: usize,
    pub max_words: usize,
    pub seed: u64,
    pub lexicons: Lexicons,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_total: 3067,
            priors: [0.0352, 0.9302, 0.0346],
            ambiguity_rate: 0.05,
            min_words: 8,
            max_words: 24,
            seed: 0,
            lexicons: Lexicons::default(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CorpusError::BadSpec(m));
        if self.n_total == 0 {
            return bad("n_total must be positive".into());
        }
        if self.priors.iter().any(|&p| !(p >= 0.0)) || (self.priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("priors {:?} must be non-negative and sum to 1", self.priors));
        }
        if !(0.0..=1.0).contains(&self.ambiguity_rate) {
            return bad(format!("ambiguity_rate {} not in [0, 1]", self.ambiguity_rate));
        }
        if self.min_words < 5 || self.max_words < self.min_words {
            return bad(format!("word range {}..={} must satisfy 5 <= min <= max", self.min_words, self.max_words));
        }
        let lex = &self.lexicons;
        let pools = [("first_person", &lex.first_person), ("third_person", &lex.third_person), ("cues", &lex.cues), ("filler", &lex.filler)];
        for (name, pool) in pools {
            if pool.is_empty() {
                return bad(format!("lexicon '{name}' is empty"));
            }
            if pool.iter().any(|w| w.is_empty() || w.contains(char::is_whitespace)) {
                return bad(format!("lexicon '{name}' entries must be single words"));
            }
        }
        for (i, (a, pa)) in pools.iter().enumerate() {
            for (b, pb) in &pools[i + 1..] {
                if let Some(w) = pa.iter().find(|w| pb.contains(w)) {
                    return bad(format!("'{w}' appears in both '{a}' and '{b}' lexicons"));
                }
            }
        }
        Ok(())
    }
}

fn pick<'a, R: rand::Rng + ?Sized>(rng: &mut R, pool: &'a [String]) -> &'a str {
    &pool[rng.random_range(0..pool.len())]
}

/// Puts `marker` strictly before a cue word; returns both positions.
fn plant_ordered<'a>(rng: &mut crate::rng::SeededRng, post: &mut [&'a str], marker: &'a str, cues: &'a [String]) -> (usize, usize) {
    let n = post.len();
    let m = rng.random_range(0..n - 1);
    let c = rng.random_range(m + 1..n);
    post[m] = marker;
    post[c] = pick(rng, cues);
    (m, c)
}

/// Draws a labelled corpus.
///
/// - Class 1 places a first-person marker before a transactional cue.
/// - Class 3 places a third-person marker before a cue; some also mention
///   a first-person marker elsewhere.
/// - Class 2 mentions a marker of either kind half the time, at a random
///   position, and a cue with probability `ambiguity_rate`.
///
/// All other words come from the shared filler pool.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Vec<PostRecord>> {
    spec.validate()?;
    let lex = &spec.lexicons;
    let mut rng = seeded(spec.seed);
    let mut records = Vec::with_capacity(spec.n_total);
    for i in 0..spec.n_total {
        let u: f64 = rng.random();
        let class = if u < spec.priors[0] {
            0
        } else if u < spec.priors[0] + spec.priors[1] {
            1
        } else {
            2
        };
        let n = rng.random_range(spec.min_words..=spec.max_words);
        let mut post: Vec<&str> = (0..n).map(|_| pick(&mut rng, &lex.filler)).collect();
        match class {
            0 => {
                let marker = pick(&mut rng, &lex.first_person);
                plant_ordered(&mut rng, &mut post, marker, &lex.cues);
            }
            2 => {
                let marker = pick(&mut rng, &lex.third_person);
                let (m, c) = plant_ordered(&mut rng, &mut post, marker, &lex.cues);
                if rng.random_bool(0.5) {
                    let free: Vec<usize> = (0..n).filter(|&k| k != m && k != c).collect();
                    post[free[rng.random_range(0..free.len())]] = pick(&mut rng, &lex.first_person);
                }
            }
            _ => {
                let cue_at = rng.random_bool(spec.ambiguity_rate).then(|| rng.random_range(0..n));
                if let Some(c) = cue_at {
                    post[c] = pick(&mut rng, &lex.cues);
                }
                if rng.random_bool(0.5) {
                    let pool = if rng.random_bool(0.5) { &lex.first_person } else { &lex.third_person };
                    let free: Vec<usize> = (0..n).filter(|&k| Some(k) != cue_at).collect();
                    post[free[rng.random_range(0..free.len())]] = pick(&mut rng, pool);
                }
            }
        }
        records.push(PostRecord {
            text: post.join(" "),
            label: Label::from_index(class).expect("class index"),
            id: Some(format!("syn-{:05}", i + 1)),
        });
    }
    Ok(records)
}
