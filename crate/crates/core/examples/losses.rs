//! Cross-entropy, focal loss and the context-aware focal loss side by side.
//!
//! cargo run --example losses

use stxn::head::probs;
use stxn::losses::{cafl, cross_entropy, focal, inverse_frequency};
use stxn::{Label, Tensor};

fn main() -> stxn::Result<()> {
    let logits = Tensor::new(&[3, 3], vec![2.0, 0.1, -1.0, 0.2, 0.3, 0.1, -2.0, 3.0, 0.5])?;
    let p = probs(&logits);
    let y: Vec<Label> = [1, 2, 2].iter().map(|&v| Label::new(v).unwrap()).collect();

    let train_labels: Vec<Label> = [1, 2, 2, 2, 2, 2, 2, 3].iter().map(|&v| Label::new(v).unwrap()).collect();
    let alpha = inverse_frequency(&train_labels)?;
    println!("inverse-frequency alpha {alpha:?}");

    println!("cross-entropy      {:.6}", cross_entropy(&p, &y)?.item());
    println!("focal, gamma 0     {:.6}", focal(&p, &y, &[1.0; 3], 0.0)?.item());
    for gamma in [1.0, 2.0, 5.0] {
        println!("focal, gamma {gamma}     {:.6}", focal(&p, &y, &alpha, gamma)?.item());
    }
    let context = Tensor::from_vec(vec![0.9, 0.5, 0.2]);
    println!("cafl, gamma 2      {:.6}", cafl(&p, &y, &context, &alpha, 2.0)?.item());
    Ok(())
}
