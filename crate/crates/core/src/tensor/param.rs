use std::sync::Arc;

use super::{Result, Tensor, TensorError};

/// A named trainable tensor.
///
/// Every forward pass builds its graph on top of [`Parameter::tensor`];
/// optimizers swap in new values between passes with [`Parameter::set_values`].
#[derive(Debug, Clone)]
pub struct Parameter {
    name: String,
    tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Result<Self> {
        Ok(Self { name: name.into(), tensor: Tensor::leaf(shape, values)? })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn values(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tensor.grad()
    }

    pub fn zero_grad(&self) {
        self.tensor.zero_grad();
    }

    /// Same name bound to another tensor, used to probe graphs with constants.
    #[cfg(test)]
    pub(crate) fn replaced(&self, tensor: Tensor) -> Self {
        Self { name: self.name.clone(), tensor }
    }

    /// Replaces the values, dropping any accumulated gradient.
    pub fn set_values(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.tensor.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "set_values",
                lhs: self.shape().to_vec(),
                rhs: vec![values.len()],
            });
        }
        let shape = self.shape().to_vec();
        // Reuse the node in place when no graph still holds it.
        if let Some(node) = Arc::get_mut(&mut self.tensor.0) {
            node.data = values;
            *node.grad.get_mut().expect("grad lock") = None;
            return Ok(());
        }
        self.tensor = Tensor::leaf(&shape, values)?;
        Ok(())
    }
}
