//! Reverse-mode differentiation on a tiny graph.
//!
//! cargo run --example autodiff

use stxn::{Parameter, Tensor};

fn main() -> stxn::Result<()> {
    // y = sum(tanh(x W + b))
    let x = Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.5])?;
    let w = Parameter::new("w", &[3, 2], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6])?;
    let b = Parameter::new("b", &[2], vec![0.01, -0.02])?;

    let y = x.matmul(w.tensor())?.add_row(b.tensor())?.tanh().sum_all();
    y.backward()?;
    println!("y = {:.6}", y.item());
    println!("dy/dw = {:?}", w.grad().unwrap());
    println!("dy/db = {:?}", b.grad().unwrap());

    // Central difference on one weight agrees with the analytic gradient.
    let h = 1e-6;
    let probe = |delta: f64| -> stxn::Result<f64> {
        let mut v = w.values().to_vec();
        v[0] += delta;
        let wp = Tensor::new(&[3, 2], v)?;
        Ok(x.matmul(&wp)?.add_row(b.tensor())?.tanh().sum_all().item())
    };
    let numeric = (probe(h)? - probe(-h)?) / (2.0 * h);
    println!("numeric dy/dw[0] = {numeric:.9}, analytic = {:.9}", w.grad().unwrap()[0]);
    Ok(())
}
