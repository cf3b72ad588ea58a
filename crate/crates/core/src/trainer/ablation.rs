//! Component ablations under a shared seed set.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{train, RunSpec};
use crate::data::SplitData;
use crate::error::{Error, Result};
use crate::label::Label;
use crate::losses::LossKind;
use crate::model::Variant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: (0..5).collect() }
    }
}

/// The four configurations, in report order.
pub const CONFIGURATIONS: [&str; 4] = ["full", "no_cue", "no_phrase", "no_cafl"];

fn configure(base: &RunSpec, name: &str) -> RunSpec {
    let mut spec = base.clone();
    match name {
        "no_cue" => spec.model.variant = Variant::NoCue,
        "no_phrase" => spec.model.variant = Variant::NoPhrase,
        "no_cafl" => spec.loss.kind = LossKind::CrossEntropy,
        _ => {}
    }
    spec
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub configuration: String,
    /// Test macro F1, one entry per seed.
    pub macro_f1: Vec<f64>,
    pub mean_macro_f1: f64,
    /// Test recall of class 1, one entry per seed.
    pub recall_class1: Vec<f64>,
    pub mean_recall_class1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

impl AblationReport {
    pub fn row(&self, configuration: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.configuration == configuration)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Macro F1 table: one row per configuration, one column per seed, then the mean.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<12}", "config");
        for s in &self.seeds {
            let _ = write!(out, " {:>8}", format!("seed{s}"));
        }
        out.push_str("     mean\n");
        for r in &self.rows {
            let _ = write!(out, "{:<12}", r.configuration);
            for v in &r.macro_f1 {
                let _ = write!(out, " {v:>8.4}");
            }
            let _ = writeln!(out, " {:>8.4}", r.mean_macro_f1);
        }
        out
    }
}

/// Trains every configuration once per seed and scores it on the test split.
pub fn ablate(base: &RunSpec, data: &SplitData, cfg: &AblationConfig) -> Result<AblationReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("ablation.seeds must not be empty".into()));
    }
    if data.test.as_ref().is_none_or(|t| t.is_empty()) {
        return Err(Error::Usage("ablation needs a non-empty test split".into()));
    }
    let mut rows = Vec::with_capacity(CONFIGURATIONS.len());
    for name in CONFIGURATIONS {
        let mut f1 = Vec::with_capacity(cfg.seeds.len());
        let mut recall = Vec::with_capacity(cfg.seeds.len());
        for &seed in &cfg.seeds {
            let mut spec = configure(base, name);
            spec.train.seed = seed;
            let out = train(&spec, data)?;
            let report = out.test_report.expect("test split present");
            log::info!("ablation {name} seed {seed}: macro-F1 {:.4}", report.macro_f1);
            f1.push(report.macro_f1);
            recall.push(report.class(Label::ALL[0]).recall);
        }
        rows.push(AblationRow {
            configuration: name.to_string(),
            mean_macro_f1: mean(&f1),
            mean_recall_class1: mean(&recall),
            macro_f1: f1,
            recall_class1: recall,
        });
    }
    Ok(AblationReport { seeds: cfg.seeds.clone(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn configurations_differ_in_one_place() {
        let base = RunSpec::default();
        assert_eq!(configure(&base, "full"), base);
        assert_eq!(configure(&base, "no_cue").model.variant, Variant::NoCue);
        assert_eq!(configure(&base, "no_phrase").model.variant, Variant::NoPhrase);
        let c = configure(&base, "no_cafl");
        assert_eq!(c.loss.kind, LossKind::CrossEntropy);
        assert_eq!(c.model, base.model);
    }

    #[test]
    fn table_shape() {
        let report = AblationReport {
            seeds: vec![0, 1],
            rows: CONFIGURATIONS
                .iter()
                .map(|c| AblationRow {
                    configuration: c.to_string(),
                    macro_f1: vec![0.5, 0.7],
                    mean_macro_f1: 0.6,
                    recall_class1: vec![0.0, 1.0],
                    mean_recall_class1: 0.5,
                })
                .collect(),
        };
        let table = report.to_table();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 5);
        for line in &lines[1..] {
            assert_eq!(line.split_whitespace().count(), 1 + 2 + 1);
        }
        assert!(lines[0].ends_with("mean"));
        let back: AblationReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }
}
