use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{config_err, Result};
use crate::Scalar;

/// Whether a forward pass trains (batch statistics, noise on) or evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-feature batch-norm parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<S> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub momentum: S,
    pub eps: S,
}

impl<S: Scalar> BnState<S> {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(width: usize) -> Self {
        Self::with_hyper(width, S::lit(Self::DEFAULT_MOMENTUM), S::lit(Self::DEFAULT_EPS))
    }

    pub fn with_hyper(width: usize, momentum: S, eps: S) -> Self {
        Self {
            gamma: Tensor::ones(&[width]),
            beta: Tensor::zeros(&[width]),
            running_mean: Tensor::zeros(&[width]),
            running_var: Tensor::ones(&[width]),
            momentum,
            eps,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes `x: [B, k]`. In train mode the running statistics move toward
    /// the batch moments (unbiased variance); eval mode leaves them untouched.
    pub fn forward(&mut self, tape: &mut Tape<S>, x: Var, gamma: Var, beta: Var, mode: Mode) -> Result<Var> {
        if tape.value(x).cols() != self.width() {
            return Err(config_err(format!(
                "batchnorm width {} != input width {}",
                self.width(),
                tape.value(x).cols()
            )));
        }
        match mode {
            Mode::Train => {
                let (out, moments) = tape.batch_norm_train(x, gamma, beta, self.eps)?;
                let rows = tape.value(x).rows();
                let unbias = S::from_usize_lossy(rows) / S::from_usize_lossy(rows - 1);
                let m = self.momentum;
                let keep = S::one() - m;
                for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&moments.mean) {
                    *r = keep * *r + m * b;
                }
                for (r, &b) in self.running_var.data_mut().iter_mut().zip(&moments.var) {
                    *r = keep * *r + m * b * unbias;
                }
                Ok(out)
            }
            Mode::Eval => {
                tape.batch_norm_eval(x, gamma, beta, self.running_mean.data(), self.running_var.data(), self.eps)
            }
        }
    }
}
