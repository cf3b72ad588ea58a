//! The `stxn` command line.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{split_overrides, RunConfig};
use crate::corpus::{filter_short, gen_synthetic, load_jsonl, write_jsonl, CorpusError, LineError};
use crate::data::{prepare, Dataset};
use crate::error::{Error, Result};
use crate::label::{argmax, Label, NUM_CLASSES};
use crate::metrics::EvalReport;
use crate::tokenizer::{train_bpe, Vocabulary};
use crate::trainer::{
    ablate, evaluate, load_checkpoint, predict_all, save_checkpoint, train, Checkpoint, CheckpointMeta,
};

pub const CONFIG_DUMP: &str = "effective_config.toml";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Debug, Parser)]
#[command(
    name = "stxn",
    version,
    about = "Train and evaluate the three-class post classifier",
    after_help = "Any config key can be overridden with a dotted flag, e.g. --train.epochs 3 or --loss.kind=focal."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for every output of the run.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus (corpus.jsonl).
    GenCorpus(Common),
    /// Train a vocabulary on paths.corpus (vocab.txt).
    Tokenize(Common),
    /// Train on paths.corpus (model.ckpt, history.json, test_report.json).
    Train(Common),
    /// Score paths.checkpoint on paths.corpus (eval_report.json).
    Eval(Common),
    /// Classify each line of paths.input (predictions.txt).
    Predict(Common),
    /// Run the four ablation configurations (ablation.json, ablation.txt).
    Ablate(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenCorpus(c)
            | Command::Tokenize(c)
            | Command::Train(c)
            | Command::Eval(c)
            | Command::Predict(c)
            | Command::Ablate(c) => c,
        }
    }
}

/// Parses `args` (without the program name), runs the command and returns the
/// process exit code.
pub fn run<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let args: Vec<String> = match args.into_iter().map(|a| a.into_string()).collect() {
        Ok(a) => a,
        Err(_) => {
            eprintln!("error: arguments must be valid UTF-8");
            return 1;
        }
    };
    let (overrides, rest) = match split_overrides(&args) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(std::iter::once("stxn".to_string()).chain(rest)) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command, &overrides) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Usage(format!("this command needs --{key}")))
}

fn execute(command: &Command, overrides: &[(String, String)]) -> Result<()> {
    let common = command.common();
    let cfg = RunConfig::load(common.config.as_deref(), overrides)?;
    let out = &common.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    write(&out.join(CONFIG_DUMP), &cfg.to_toml())?;
    match command {
        Command::GenCorpus(_) => gen_corpus(&cfg, out),
        Command::Tokenize(_) => tokenize(&cfg, out),
        Command::Train(_) => train_cmd(&cfg, out),
        Command::Eval(_) => eval_cmd(&cfg, out),
        Command::Predict(_) => predict_cmd(&cfg, out),
        Command::Ablate(_) => ablate_cmd(&cfg, out),
    }
}

fn gen_corpus(cfg: &RunConfig, out: &Path) -> Result<()> {
    let records = gen_synthetic(&cfg.synthetic)?;
    let path = out.join("corpus.jsonl");
    write_jsonl(&path, &records)?;
    let counts = crate::corpus::class_counts(&records);
    eprintln!("wrote {} posts to {} (per class {:?})", records.len(), path.display(), counts);
    Ok(())
}

fn corpus_texts(path: &Path) -> Result<Vec<crate::corpus::PostRecord>> {
    Ok(load_jsonl(path)?)
}

fn fit_vocab(cfg: &RunConfig, records: &[crate::corpus::PostRecord]) -> Result<Vocabulary> {
    let texts: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
    Ok(train_bpe(&texts, cfg.tokenizer.vocab_size)?)
}

fn tokenize(cfg: &RunConfig, out: &Path) -> Result<()> {
    let records = corpus_texts(require(&cfg.paths.corpus, "paths.corpus")?)?;
    let vocab = fit_vocab(cfg, &records)?;
    let path = out.join(VOCAB_FILE);
    vocab.save(&path)?;
    eprintln!("wrote {} entries to {}", vocab.len(), path.display());
    Ok(())
}

fn train_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let records = corpus_texts(require(&cfg.paths.corpus, "paths.corpus")?)?;
    let vocab = match &cfg.paths.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => fit_vocab(cfg, &records)?,
    };
    vocab.save(out.join(VOCAB_FILE))?;
    let (data, summary) = prepare(records, &vocab, &cfg.tokenizer, &cfg.split)?;
    eprintln!(
        "train {:?} val {:?} test {:?} (dropped {} short posts)",
        summary.train, summary.val, summary.test, summary.dropped_short
    );
    let spec = cfg.run_spec(vocab.len())?;
    let outcome = train(&spec, &data)?;
    let meta = CheckpointMeta {
        format_version: 1,
        run: spec,
        step: outcome.optimizer.step,
        alpha: outcome.objective.alpha,
        tokenizer: VOCAB_FILE.to_string(),
        tokenization: cfg.tokenizer.clone(),
        best_epoch: outcome.best_epoch,
    };
    let ckpt = Checkpoint { meta, model: outcome.model, optimizer: outcome.optimizer };
    save_checkpoint(out.join(CHECKPOINT_FILE), &ckpt)?;
    let mut history = serde_json::to_string_pretty(&outcome.history).expect("history serializes");
    history.push('\n');
    write(&out.join("history.json"), &history)?;
    if let Some(r) = &outcome.test_report {
        write(&out.join("test_report.json"), &r.to_json())?;
        eprintln!("test macro-F1 {:.4} accuracy {:.4}", r.macro_f1, r.accuracy);
    }
    Ok(())
}

fn load_for_inference(cfg: &RunConfig) -> Result<(Checkpoint, Vocabulary)> {
    let ckpt_path = require(&cfg.paths.checkpoint, "paths.checkpoint")?;
    let ckpt = load_checkpoint(ckpt_path)?;
    let vocab_path = match &cfg.paths.vocab {
        Some(p) => p.clone(),
        None => ckpt_path.parent().unwrap_or(Path::new(".")).join(&ckpt.meta.tokenizer),
    };
    let vocab = Vocabulary::load(&vocab_path)?;
    if vocab.len() != ckpt.meta.run.model.encoder.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary {} has {} entries, checkpoint expects {}",
            vocab_path.display(),
            vocab.len(),
            ckpt.meta.run.model.encoder.vocab_size
        )));
    }
    Ok((ckpt, vocab))
}

fn eval_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (ckpt, vocab) = load_for_inference(cfg)?;
    let records = corpus_texts(require(&cfg.paths.corpus, "paths.corpus")?)?;
    let tok = &ckpt.meta.tokenization;
    let (kept, dropped) = filter_short(records, tok.min_tokens, &vocab, tok.bos_eos);
    let data = Dataset::encode(&kept, &vocab, tok.max_len, tok.bos_eos)?;
    let mut report: EvalReport = evaluate(&ckpt.model, &data, cfg.train.eval_batch_size)?;
    if dropped > 0 {
        report.warnings.push(format!("{dropped} posts shorter than {} tokens were skipped", tok.min_tokens));
    }
    write(&out.join("eval_report.json"), &report.to_json())?;
    eprintln!("macro-F1 {:.4} accuracy {:.4} on {} posts", report.macro_f1, report.accuracy, report.n);
    Ok(())
}

/// Rounds to multiples of 1e-6 so the printed values still sum to exactly 1.
pub fn round_probs(p: &[f64; NUM_CLASSES]) -> [u64; NUM_CLASSES] {
    const SCALE: f64 = 1e6;
    let mut units = [0u64; NUM_CLASSES];
    let mut rema = [0.0; NUM_CLASSES];
    for k in 0..NUM_CLASSES {
        let x = p[k].clamp(0.0, 1.0) * SCALE;
        units[k] = x.floor() as u64;
        rema[k] = x - x.floor();
    }
    let short = 1_000_000u64.saturating_sub(units.iter().sum());
    let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
    order.sort_by(|&a, &b| rema[b].total_cmp(&rema[a]).then(a.cmp(&b)));
    for &k in order.iter().take(short as usize) {
        units[k] += 1;
    }
    units
}

/// One output line: three probabilities and the predicted label.
pub fn format_prediction(p: &[f64; NUM_CLASSES]) -> String {
    let u = round_probs(p);
    let mut line = String::new();
    for v in u {
        let _ = write!(line, "{}.{:06} ", v / 1_000_000, v % 1_000_000);
    }
    let label = Label::from_index(argmax(p)).expect("class index");
    let _ = write!(line, "{label}");
    line
}

fn predict_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (ckpt, vocab) = load_for_inference(cfg)?;
    let input = require(&cfg.paths.input, "paths.input")?;
    let text = std::fs::read_to_string(input).map_err(|e| Error::io(format!("reading {}", input.display()), e))?;
    let tok = &ckpt.meta.tokenization;
    let mut posts = Vec::new();
    let mut bad = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if vocab.tokenize(line).is_empty() {
            bad.push(LineError { line: i + 1, msg: "no tokens to classify".into() });
            continue;
        }
        posts.push(vocab.encode_with(line, tok.max_len, tok.bos_eos)?);
    }
    if !bad.is_empty() {
        return Err(CorpusError::Malformed(bad).into());
    }
    let data = Dataset { labels: vec![Label::ALL[0]; posts.len()], posts };
    let probs = predict_all(&ckpt.model, &data, cfg.train.eval_batch_size)?;
    let mut body = String::new();
    for p in &probs {
        body.push_str(&format_prediction(p));
        body.push('\n');
    }
    write(&out.join("predictions.txt"), &body)?;
    eprintln!("wrote {} predictions", probs.len());
    Ok(())
}

fn ablate_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let records = corpus_texts(require(&cfg.paths.corpus, "paths.corpus")?)?;
    let vocab = match &cfg.paths.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => fit_vocab(cfg, &records)?,
    };
    let (data, _) = prepare(records, &vocab, &cfg.tokenizer, &cfg.split)?;
    let report = ablate(&cfg.run_spec(vocab.len())?, &data, &cfg.ablation)?;
    write(&out.join("ablation.json"), &report.to_json())?;
    let table = report.to_table();
    write(&out.join("ablation.txt"), &table)?;
    eprint!("{table}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn prediction_line_format() {
        assert_eq!(format_prediction(&[0.1, 0.7, 0.2]), "0.100000 0.700000 0.200000 2");
        assert_eq!(format_prediction(&[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]), "0.333334 0.333333 0.333333 1");
        assert_eq!(format_prediction(&[0.0, 0.0, 1.0]), "0.000000 0.000000 1.000000 3");
    }

    proptest! {
        #[test]
        fn printed_probabilities_sum_to_one(a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0) {
            prop_assume!(a + b + c > 1e-3);
            let s = a + b + c;
            let line = format_prediction(&[a / s, b / s, c / s]);
            let parts: Vec<&str> = line.split(' ').collect();
            prop_assert_eq!(parts.len(), 4);
            let total: f64 = parts[..3].iter().map(|x| x.parse::<f64>().unwrap()).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            for (x, p) in parts[..3].iter().zip([a / s, b / s, c / s]) {
                prop_assert!((x.parse::<f64>().unwrap() - p).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn usage_errors_exit_one() {
        let args = |v: &[&str]| v.iter().map(OsString::from).collect::<Vec<_>>();
        assert_eq!(run(args(&["frobnicate"])), 1);
        assert_eq!(run(args(&["train"])), 1);
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().to_str().unwrap();
        assert_eq!(run(args(&["train", "--out-dir", d])), 1);
        assert_eq!(run(args(&["train", "--out-dir", d, "--train.nosuch", "1"])), 1);
        assert_eq!(run(args(&["eval", "--out-dir", d, "--paths.checkpoint", "/nonexistent/x.ckpt"])), 2);
    }
}
