//! Generate the imbalanced synthetic corpus and split it by class.
//!
//! cargo run --example synthetic_corpus

use stxn::corpus::{class_counts, gen_synthetic, stratified_split, SyntheticSpec};

fn main() -> stxn::Result<()> {
    let spec = SyntheticSpec::default();
    let records = gen_synthetic(&spec)?;
    println!("{} posts, per class {:?}", records.len(), class_counts(&records));
    for label in 1..=3 {
        let r = records.iter().find(|r| r.label.value() == label).unwrap();
        println!("  class {label}: {}", r.text);
    }

    let split = stratified_split(&records, [0.8, 0.1, 0.1], 0)?;
    println!("train {:?}", class_counts(&split.train));
    println!("val   {:?}", class_counts(&split.val));
    println!("test  {:?}", class_counts(&split.test));

    let path = std::env::temp_dir().join("stxn-synthetic.jsonl");
    stxn::corpus::write_jsonl(&path, &records)?;
    println!("wrote {}", path.display());
    Ok(())
}
