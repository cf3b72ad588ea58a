//! Helpers shared by unit tests.

use crate::tensor::Tensor;

/// Compares the gradients of scalar `f` with central finite differences.
pub fn check_grads(inputs: &[Tensor], f: impl Fn(&[Tensor]) -> Tensor) {
    let h = 1e-5;
    inputs.iter().for_each(Tensor::zero_grad);
    let out = f(inputs);
    out.backward().unwrap();
    for (which, x) in inputs.iter().enumerate() {
        let analytic = x.grad().unwrap_or_else(|| vec![0.0; x.numel()]);
        for i in 0..x.numel() {
            let eval = |delta: f64| {
                let mut probe: Vec<Tensor> = inputs.iter().map(|t| t.detach()).collect();
                let mut vals = x.to_vec();
                vals[i] += delta;
                probe[which] = Tensor::new(x.shape(), vals).unwrap();
                f(&probe).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[i];
            let scale = a.abs().max(numeric.abs());
            if scale < 1e-6 {
                assert!((a - numeric).abs() < 1e-7, "input {which}[{i}]: {a} vs {numeric}");
            } else {
                assert!((a - numeric).abs() / scale < 1e-4, "input {which}[{i}]: {a} vs {numeric}");
            }
        }
    }
}
