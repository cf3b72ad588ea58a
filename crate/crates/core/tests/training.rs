use stxn::corpus::{gen_synthetic, SyntheticSpec};
use stxn::data::{Dataset, SplitData};
use stxn::encoder::EncoderConfig;
use stxn::model::{HeadConfig, ModelConfig};
use stxn::tokenizer::train_bpe;
use stxn::trainer::{train, RunSpec, TrainConfig};

fn overfit_data() -> (SplitData, usize) {
    let spec = SyntheticSpec { n_total: 64, priors: [1.0 / 3.0; 3], ambiguity_rate: 0.0, seed: 5, ..Default::default() };
    let recs = gen_synthetic(&spec).unwrap();
    let vocab = train_bpe(&recs.iter().map(|r| r.text.as_str()).collect::<Vec<_>>(), 512).unwrap();
    let data = Dataset::encode(&recs, &vocab, 128, false).unwrap();
    (SplitData { train: data.clone(), val: data, test: None }, vocab.len())
}

/// Means over consecutive 10-epoch windows of the training loss never rise.
/// Dropout is off: with it the late windows wander at the noise floor.
#[test]
fn smoothed_overfit_loss_is_non_increasing() {
    let (data, vocab_len) = overfit_data();
    let run = RunSpec {
        model: ModelConfig {
            encoder: EncoderConfig { vocab_size: vocab_len, dropout: 0.0, ..Default::default() },
            head: HeadConfig { dropout: 0.0, ..Default::default() },
            ..Default::default()
        },
        train: TrainConfig { lr_max: 1e-3, batch_size: 16, epochs: 60, seed: 5, ..Default::default() },
        ..Default::default()
    };
    let out = train(&run, &data).unwrap();
    let losses: Vec<f64> = out.history.iter().map(|h| h.train_loss).collect();
    let means: Vec<f64> = losses.chunks_exact(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    assert_eq!(means.len(), 6);
    for pair in means.windows(2) {
        assert!(pair[1] <= pair[0], "window means {means:?}");
    }
}

#[test]
fn early_stopping_halts_after_patience() {
    let (data, vocab_len) = overfit_data();
    let run = RunSpec {
        model: ModelConfig {
            encoder: EncoderConfig { vocab_size: vocab_len, d_model: 16, n_heads: 2, n_layers: 1, ..Default::default() },
            ..Default::default()
        },
        // A learning rate this small cannot move validation macro F1 for long.
        train: TrainConfig { lr_max: 1e-9, epochs: 50, early_stop_patience: Some(3), ..Default::default() },
        ..Default::default()
    };
    let out = train(&run, &data).unwrap();
    let best = out.best_epoch.unwrap();
    assert_eq!(out.history.len(), best + 3);
    assert!(out.history.len() < 50);
}
