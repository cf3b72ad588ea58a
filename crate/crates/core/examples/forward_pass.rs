//! One forward pass through the untrained model, showing where the cue
//! extractor puts its attention.
//!
//! cargo run --example forward_pass

use stxn::encoder::{EncoderConfig, TokenBatch};
use stxn::model::{Model, ModelConfig};
use stxn::nn::{Mode, Module};
use stxn::rng::seeded;
use stxn::tokenizer::Vocabulary;

fn main() -> stxn::Result<()> {
    let vocab = Vocabulary::bytes_only();
    let cfg = ModelConfig {
        encoder: EncoderConfig { vocab_size: vocab.len(), max_len: 64, ..Default::default() },
        ..Default::default()
    };
    let model = Model::new(cfg, &mut seeded(7))?;
    println!("{} parameters in {} tensors", model.num_parameters(), model.parameters().len());

    let posts = [vocab.encode("my allowance", 64)?, vocab.encode("rainy day", 64)?];
    let batch = TokenBatch::trimmed(&posts.iter().collect::<Vec<_>>())?;
    println!("batch {}x{} after trimming padding", batch.batch_size(), batch.seq_len());

    let out = model.forward(&batch, &mut Mode::Eval)?;
    for (i, p) in out.prob_rows().iter().enumerate() {
        println!("post {i}: p = [{:.4}, {:.4}, {:.4}]", p[0], p[1], p[2]);
    }
    let l = batch.seq_len();
    let weights = &out.attention.data()[..l];
    let bytes = posts[0].valid_ids();
    for (id, a) in bytes.iter().zip(weights) {
        let piece = vocab.decode(&[*id])?;
        println!("  {piece:?} {a:.4}");
    }
    let w = out.context_weight(Default::default())?;
    println!("context weights {:?}", w.data());
    Ok(())
}
