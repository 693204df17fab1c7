//! Rectified Adam.
//!
//! Tracks the usual first/second moments; while the variance-rectification
//! length rho_t is at most 4 the update falls back to plain (bias-corrected)
//! momentum, afterwards the rectified adaptive step applies.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct RAdamConfig {
    pub learning_rate: f32,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl RAdamConfig {
    pub fn with_lr(learning_rate: f32) -> Self {
        RAdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment buffers for one parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct MomentBuffers {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct RAdam {
    pub config: RAdamConfig,
    pub step_count: u64,
    pub buffers: Vec<MomentBuffers>,
}

impl RAdam {
    pub fn new(config: RAdamConfig, param_sizes: &[usize]) -> Self {
        let buffers = param_sizes
            .iter()
            .map(|&n| MomentBuffers {
                m: vec![0.0; n],
                v: vec![0.0; n],
            })
            .collect();
        RAdam {
            config,
            step_count: 0,
            buffers,
        }
    }

    /// Apply one update across all tracked parameters. `params` and `grads`
    /// must be index-aligned with the sizes given at construction. A gradient
    /// slot may be None (parameter untouched this step, moments still decay).
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[Option<&[f32]>]) -> Result<()> {
        if params.len() != self.buffers.len() || grads.len() != self.buffers.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} parameters, got {} params / {} grads",
                self.buffers.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        param: format!("#{i}"),
                    });
                }
            }
        }
        self.step_count += 1;
        let t = self.step_count;
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        let lr = self.config.learning_rate as f64;
        let eps = self.config.epsilon;

        let b1t = b1.powi(t as i32);
        let b2t = b2.powi(t as i32);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let rho_t = rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t);
        let rectified = rho_t > 4.0;
        let r_t = if rectified {
            (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt()
        } else {
            0.0
        };

        for ((param, grad), buf) in params.iter_mut().zip(grads).zip(&mut self.buffers) {
            let Some(grad) = grad else { continue };
            debug_assert_eq!(param.len(), grad.len());
            debug_assert_eq!(param.len(), buf.m.len());
            for j in 0..param.len() {
                let g = grad[j] as f64;
                let m = b1 * buf.m[j] as f64 + (1.0 - b1) * g;
                let v = b2 * buf.v[j] as f64 + (1.0 - b2) * g * g;
                buf.m[j] = m as f32;
                buf.v[j] = v as f32;
                let m_hat = m / (1.0 - b1t);
                let update = if rectified {
                    let v_hat = (v / (1.0 - b2t)).sqrt();
                    lr * r_t * m_hat / (v_hat + eps)
                } else {
                    lr * m_hat
                };
                param[j] = (param[j] as f64 - update) as f32;
            }
        }
        Ok(())
    }
}
