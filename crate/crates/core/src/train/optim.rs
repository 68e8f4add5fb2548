use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TensorMap;
use crate::tensor::{Scalar, Tensor};

fn default_lr() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_warmup() -> u64 {
    100
}

/// Momentum SGD with a linear learning-rate warm-up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Steps over which the rate ramps linearly from `lr / warmup` to `lr`.
    #[serde(default = "default_warmup")]
    pub warmup_steps: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: default_lr(),
            momentum: default_momentum(),
            warmup_steps: default_warmup(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        Ok(())
    }

    /// Learning rate applied at zero-based step `step`.
    pub fn rate_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.learning_rate;
        }
        self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub config: OptimizerConfig,
    /// One buffer per parameter, shaped like it.
    pub velocity: TensorMap<T>,
    /// Completed steps.
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: OptimizerConfig, params: &TensorMap<T>) -> Result<Self> {
        config.validate()?;
        let velocity = params
            .iter()
            .map(|(n, p)| (n.clone(), Tensor::zeros(p.shape())))
            .collect();
        Ok(OptimizerState {
            config,
            velocity,
            step: 0,
        })
    }

    /// `v = momentum * v + g; p -= lr * v` for every parameter in `grads`.
    pub fn apply(&mut self, params: &mut TensorMap<T>, grads: &TensorMap<T>) -> Result<()> {
        let lr = T::from_f64_lossy(self.config.rate_at(self.step));
        let mu = T::from_f64_lossy(self.config.momentum);
        for (name, g) in grads {
            let (Some(p), Some(v)) = (params.get_mut(name), self.velocity.get_mut(name)) else {
                return Err(Error::Contract(format!("gradient for unknown parameter {name}")));
            };
            if g.shape() != p.shape() {
                return Err(Error::Dimension {
                    op: "optimizer step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
            *v = v.zip_map(g, |v, g| mu * v + g)?;
            *p = p.zip_map(v, |p, v| p - lr * v)?;
        }
        self.step += 1;
        Ok(())
    }
}
