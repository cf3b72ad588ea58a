//! Run configuration: one TOML document with a section per component.
//!
//! Every key can be overridden with a dotted flag, `--train.epochs 3` or
//! `--loss.kind=focal`. Values are read as TOML when they parse as such and as
//! plain strings otherwise.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::SyntheticSpec;
use crate::cue::CaflConfig;
use crate::data::{SplitConfig, TokenizerConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{HeadConfig, ModelConfig, PhraseConfig, Variant};
use crate::trainer::{AblationConfig, RunSpec, TrainConfig};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// JSONL corpus with `text` and `label` fields.
    pub corpus: Option<PathBuf>,
    /// Vocabulary file; trained from the corpus when absent.
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Plain text, one post per line, for `predict`.
    pub input: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: Variant,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub tokenizer: TokenizerConfig,
    pub encoder: EncoderConfig,
    pub phrase: PhraseConfig,
    pub head: HeadConfig,
    pub model: ModelSection,
    pub loss: LossConfig,
    pub cafl: CaflConfig,
    pub synthetic: SyntheticSpec,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
    pub paths: Paths,
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Usage(format!("malformed override key `{key}`")));
    }
    let (last, sections) = parts.split_last().expect("non-empty");
    let mut table = root;
    for s in sections {
        let entry = table.entry(s.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Usage(format!("override `{key}`: `{s}` is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Pulls `--section.key value` and `--section.key=value` pairs out of `args`.
/// Returns the overrides and the remaining arguments.
pub fn split_overrides(args: &[String]) -> Result<(Vec<(String, String)>, Vec<String>)> {
    let mut overrides = Vec::new();
    let mut rest = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--").filter(|f| f.split('=').next().is_some_and(|k| k.contains('.'))) else {
            rest.push(a.clone());
            continue;
        };
        match flag.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| Error::Usage(format!("--{flag} needs a value")))?;
                overrides.push((flag.to_string(), v.clone()));
            }
        }
    }
    Ok((overrides, rest))
}

impl RunConfig {
    /// Reads `file` (if any), applies overrides in order and validates the result.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(format!("reading config {}", p.display()), e))?;
                text.parse::<toml::Table>().map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            set_dotted(&mut table, k, parse_value(v))?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        // vocab_size 0 means "take it from the vocabulary".
        EncoderConfig { vocab_size: self.encoder.vocab_size.max(1), ..self.encoder.clone() }.validate()?;
        self.train.validate()?;
        self.synthetic.validate()?;
        if self.ablation.seeds.is_empty() {
            return Err(Error::Config("ablation.seeds must not be empty".into()));
        }
        if self.tokenizer.max_len > self.encoder.max_len {
            return Err(Error::Config(format!(
                "tokenizer.max_len {} exceeds encoder.max_len {}",
                self.tokenizer.max_len, self.encoder.max_len
            )));
        }
        Ok(())
    }

    /// Every resolved key, as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Model and training settings for a vocabulary of `vocab_len` entries.
    pub fn run_spec(&self, vocab_len: usize) -> Result<RunSpec> {
        let mut encoder = self.encoder.clone();
        match encoder.vocab_size {
            0 => encoder.vocab_size = vocab_len,
            n if n != vocab_len => {
                return Err(Error::Config(format!("encoder.vocab_size {n} does not match the vocabulary ({vocab_len} entries)")))
            }
            _ => {}
        }
        Ok(RunSpec {
            model: ModelConfig { encoder, phrase: self.phrase.clone(), head: self.head.clone(), variant: self.model.variant },
            loss: self.loss.clone(),
            context_mode: self.cafl.context_mode,
            train: self.train.clone(),
        })
    }
}
