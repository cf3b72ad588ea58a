//! Train a byte-level BPE vocabulary, encode a post and round-trip the file.
//!
//! cargo run --example tokenizer

use stxn::corpus::{gen_synthetic, SyntheticSpec};
use stxn::tokenizer::{train_bpe, Vocabulary};

fn main() -> stxn::Result<()> {
    let records = gen_synthetic(&SyntheticSpec { n_total: 500, ..Default::default() })?;
    let texts: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
    let vocab = train_bpe(&texts, 400)?;
    println!("vocabulary: {} entries, {} merges", vocab.len(), vocab.merges().len());

    let text = "my sponsor pays the rent monthly";
    let ids = vocab.tokenize(text);
    let pieces: Vec<String> = ids.iter().map(|&i| vocab.decode(&[i]).unwrap()).collect();
    println!("{text:?} -> {ids:?}");
    println!("pieces: {pieces:?}");
    assert_eq!(vocab.decode(&ids)?, text);

    let post = vocab.encode_with(text, 16, true)?;
    println!("padded to 16 with bos/eos: {:?}", post.ids);

    let dir = std::env::temp_dir().join("stxn-tokenizer-example");
    std::fs::create_dir_all(&dir).map_err(|e| stxn::Error::io("creating temp dir", e))?;
    let path = dir.join("vocab.txt");
    vocab.save(&path)?;
    assert_eq!(Vocabulary::load(&path)?, vocab);
    println!("saved and reloaded {}", path.display());
    Ok(())
}
