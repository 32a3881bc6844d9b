//! SGD with classical momentum.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// `v <- momentum * v + g; p <- p - lr * v`, per parameter tensor.
///
/// Velocity buffers are allocated lazily on the first step and stay aligned
/// with the parameter list order, which must not change between steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    #[serde(skip)]
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !lr.is_finite() || lr <= 0.0 {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        if !momentum.is_finite() || !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(SgdMomentum {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::internal(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::internal(format!(
                "optimizer holds {} velocity buffers for {} parameters",
                self.velocity.len(),
                params.len()
            )));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(Error::internal(format!(
                    "parameter {:?}, gradient {:?}, velocity {:?} shapes diverged",
                    p.shape(),
                    g.shape(),
                    v.shape()
                )));
            }
            let (pd, gd, vd) = (p.data_mut(), g.data(), v.data_mut());
            for i in 0..pd.len() {
                vd[i] = self.momentum * vd[i] + gd[i];
                pd[i] -= self.lr * vd[i];
            }
        }
        Ok(())
    }
}
