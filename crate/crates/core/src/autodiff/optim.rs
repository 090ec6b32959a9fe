use crate::autodiff::Tensor;
use crate::error::{config_err, Result};
use crate::Scalar;

/// SGD with heavy-ball momentum: `v <- mu v + g; p <- p - lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdMomentum<S> {
    pub lr: S,
    pub momentum: S,
    velocity: Vec<Vec<S>>,
}

impl<S: Scalar> SgdMomentum<S> {
    pub fn new(lr: S, momentum: S) -> Result<Self> {
        if !(lr >= S::zero()) || !lr.is_finite() {
            return Err(config_err(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        if !(momentum >= S::zero() && momentum < S::one()) {
            return Err(config_err(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self { lr, momentum, velocity: Vec::new() })
    }

    pub fn velocity(&self) -> &[Vec<S>] {
        &self.velocity
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    /// Applies one update. The velocity buffers are created on the first call
    /// and must keep mirroring the parameter shapes afterwards.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Vec<S>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(config_err(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![S::zero(); p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(config_err("optimizer state does not match the parameter list"));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.len() != g.len() || p.len() != v.len() {
                return Err(config_err("parameter, gradient and velocity lengths differ"));
            }
            for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= self.lr * *vi;
            }
        }
        Ok(())
    }
}
