//! AdamW with decoupled weight decay, cosine learning-rate annealing and
//! global-norm gradient clipping.

use crate::tensor::Parameter;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Number of applied updates.
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Applied,
    /// Some gradient entry was NaN or infinite; nothing changed.
    Rejected { parameter: String },
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &[&Parameter]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.values().len()]).collect::<Vec<_>>();
        Self { cfg, m: zeros(), v: zeros(), step: 0 }
    }

    /// One update at learning rate `lr`. `grads[i]` belongs to `params[i]`.
    ///
    /// `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)`
    pub fn update(&mut self, params: &mut [&mut Parameter], grads: &[Vec<f64>], lr: f64) -> StepOutcome {
        assert_eq!(params.len(), self.m.len(), "optimizer built for a different parameter set");
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            let parameter = params[i].name().to_string();
            log::warn!("rejecting optimizer step {}: non-finite gradient in {parameter}", self.step + 1);
            return StepOutcome::Rejected { parameter };
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            let mut theta = p.values().to_vec();
            for k in 0..theta.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                theta[k] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * theta[k]);
            }
            p.set_values(theta).expect("same length");
        }
        StepOutcome::Applied
    }
}

/// `lr_max * (1 + cos(pi * step / total)) / 2`; steps past `total` are clamped.
pub fn cosine_lr(step: u64, total: u64, lr_max: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let t = if step > total {
        log::warn!("schedule step {step} past total {total}; clamping");
        total
    } else {
        step
    };
    lr_max * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()) / 2.0
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales all gradients so their joint norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
    }
    norm
}
