//! Score raw posts with a saved checkpoint.
//!
//! cargo run --release --example predict -- <model.ckpt> "post one" "post two"
//!
//! Without arguments it uses the checkpoint written by the `train_checkpoint`
//! example and a few built-in posts.

use stxn::cli::format_prediction;
use stxn::encoder::TokenBatch;
use stxn::tokenizer::Vocabulary;
use stxn::trainer::load_checkpoint;

fn main() -> stxn::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next().map_or_else(|| std::env::temp_dir().join("stxn-train-example/model.ckpt"), Into::into);
    let mut posts: Vec<String> = args.collect();
    if posts.is_empty() {
        posts = ["my sponsor pays my rent every month", "she gets gifts from her sugar daddy", "lovely walk by the river today"]
            .map(String::from)
            .to_vec();
    }

    let ckpt = load_checkpoint(&path)?;
    let vocab = Vocabulary::load(path.parent().unwrap_or(".".as_ref()).join(&ckpt.meta.tokenizer))?;
    let tok = &ckpt.meta.tokenization;
    let encoded = posts.iter().map(|p| vocab.encode_with(p, tok.max_len, tok.bos_eos)).collect::<Result<Vec<_>, _>>()?;
    let batch = TokenBatch::trimmed(&encoded.iter().collect::<Vec<_>>())?;
    for (post, p) in posts.iter().zip(ckpt.model.predict(&batch)?) {
        println!("{}  {post}", format_prediction(&p));
    }
    Ok(())
}
