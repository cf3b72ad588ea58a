//! Train a compact model on the synthetic corpus, save a checkpoint and
//! check that the reloaded model scores identically.
//!
//! cargo run --release --example train_checkpoint [epochs]

use stxn::corpus::{gen_synthetic, SyntheticSpec};
use stxn::data::{prepare, SplitConfig, TokenizerConfig};
use stxn::encoder::EncoderConfig;
use stxn::model::{HeadConfig, ModelConfig, PhraseConfig};
use stxn::tokenizer::train_bpe;
use stxn::trainer::{evaluate, load_checkpoint, save_checkpoint, train, Checkpoint, CheckpointMeta, RunSpec, TrainConfig};

fn main() -> stxn::Result<()> {
    let epochs = std::env::args().nth(1).map_or(8, |s| s.parse().expect("epochs is a number"));
    let records = gen_synthetic(&SyntheticSpec { n_total: 1200, priors: [0.15, 0.7, 0.15], ..Default::default() })?;
    let tok = TokenizerConfig { max_len: 48, ..Default::default() };
    let texts: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
    let vocab = train_bpe(&texts, tok.vocab_size)?;
    let (data, summary) = prepare(records, &vocab, &tok, &SplitConfig::default())?;
    println!("train {:?} val {:?} test {:?}", summary.train, summary.val, summary.test);

    let spec = RunSpec {
        model: ModelConfig {
            encoder: EncoderConfig { vocab_size: vocab.len(), d_model: 32, n_heads: 4, n_layers: 1, max_len: 48, dropout: 0.1, ..Default::default() },
            phrase: PhraseConfig { hidden: 16 },
            head: HeadConfig { hidden: 16, ..Default::default() },
            ..Default::default()
        },
        train: TrainConfig { lr_max: 2e-3, epochs, ..Default::default() },
        ..Default::default()
    };
    let outcome = train(&spec, &data)?;
    for r in &outcome.history {
        println!(
            "epoch {:>2}  loss {:.4}  val acc {:.3}  val macro-F1 {:.3}  val recall(1) {:.3}",
            r.epoch, r.train_loss, r.val_accuracy, r.val_macro_f1, r.val_recall_class1
        );
    }
    let test = data.test.as_ref().expect("test split");
    let report = outcome.test_report.clone().expect("test report");
    println!("best epoch {:?}, test macro-F1 {:.3}", outcome.best_epoch, report.macro_f1);

    let dir = std::env::temp_dir().join("stxn-train-example");
    std::fs::create_dir_all(&dir).map_err(|e| stxn::Error::io("creating temp dir", e))?;
    vocab.save(dir.join("vocab.txt"))?;
    let meta = CheckpointMeta {
        format_version: 1,
        run: spec,
        step: outcome.optimizer.step,
        alpha: outcome.objective.alpha,
        tokenizer: "vocab.txt".into(),
        tokenization: tok,
        best_epoch: outcome.best_epoch,
    };
    let path = dir.join("model.ckpt");
    save_checkpoint(&path, &Checkpoint { meta, model: outcome.model, optimizer: outcome.optimizer })?;
    let loaded = load_checkpoint(&path)?;
    assert_eq!(evaluate(&loaded.model, test, 64)?, report);
    println!("checkpoint {} reloads with an identical test report", path.display());
    Ok(())
}
