//! Evaluation report and agreement statistics.
//!
//! cargo run --example metrics

use stxn::metrics::{cohen_kappa, fleiss_kappa, EvalReport};
use stxn::Label;

fn labels(v: &[i64]) -> Vec<Label> {
    v.iter().map(|&x| Label::new(x).unwrap()).collect()
}

fn main() -> stxn::Result<()> {
    let golds = labels(&[1, 2, 2, 2, 3, 2, 1, 3]);
    let probs = [
        [0.7, 0.2, 0.1],
        [0.1, 0.8, 0.1],
        [0.2, 0.6, 0.2],
        [0.4, 0.5, 0.1],
        [0.1, 0.3, 0.6],
        [0.1, 0.1, 0.8],
        [0.3, 0.6, 0.1],
        [0.2, 0.2, 0.6],
    ];
    let report = EvalReport::from_probs(&probs, &golds)?;
    print!("{}", report.to_json());

    let a = labels(&[1, 2, 2, 3, 2, 2, 1, 3, 2, 2]);
    let b = labels(&[1, 2, 2, 3, 2, 1, 1, 2, 2, 2]);
    println!("cohen kappa {:.4}", cohen_kappa(&a, &b)?);
    let c = labels(&[1, 2, 2, 3, 2, 2, 2, 3, 2, 2]);
    let items: Vec<Vec<Label>> = (0..a.len()).map(|i| vec![a[i], b[i], c[i]]).collect();
    println!("fleiss kappa {:.4}", fleiss_kappa(&items)?);
    Ok(())
}
