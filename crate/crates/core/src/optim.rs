//! Plain SGD with an optional step-decay schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named trainable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Parameter {
            name: name.into(),
            value,
            grad: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub step_decay_factor: f64,
    pub decay_every_epochs: Option<usize>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            step_decay_factor: 1.0,
            decay_every_epochs: None,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.step_decay_factor > 0.0 && self.step_decay_factor <= 1.0) {
            return Err(Error::invalid(format!(
                "step decay factor must lie in (0, 1], got {}",
                self.step_decay_factor
            )));
        }
        if self.decay_every_epochs == Some(0) {
            return Err(Error::invalid("decay interval must be positive"));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.decay_every_epochs {
            Some(every) => {
                self.learning_rate * self.step_decay_factor.powi((epoch / every) as i32)
            }
            None => self.learning_rate,
        }
    }
}

/// `p ← p − lr(epoch)·g` for every parameter, then zeroes the gradients.
///
/// All gradients are checked before any parameter moves, so a non-finite
/// gradient leaves the whole set untouched.
pub fn sgd_step(params: &mut [Parameter], config: &SgdConfig, epoch: usize) -> Result<()> {
    config.validate()?;
    for p in params.iter() {
        let Some(g) = &p.grad else {
            return Err(Error::invalid(format!("parameter `{}` has no gradient", p.name)));
        };
        if g.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                expected: p.value.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    let lr = config.learning_rate_at(epoch);
    for p in params.iter_mut() {
        let g = p.grad.as_mut().expect("checked above");
        for (v, gv) in p.value.data_mut().iter_mut().zip(g.data_mut()) {
            *v -= lr * *gv;
            *gv = 0.0;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(value: f64, grad: f64) -> Parameter {
        Parameter {
            name: "w".into(),
            value: Tensor::scalar(value),
            grad: Some(Tensor::scalar(grad)),
        }
    }

    #[test]
    fn single_step() {
        let mut ps = vec![param(1.0, 1.0)];
        sgd_step(&mut ps, &SgdConfig::default(), 0).unwrap();
        assert!((ps[0].value.item() - 0.99).abs() < 1e-15);
        assert_eq!(ps[0].grad.as_ref().unwrap().item(), 0.0);
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut ps = vec![param(0.3, 0.0)];
        sgd_step(&mut ps, &SgdConfig::default(), 7).unwrap();
        assert_eq!(ps[0].value.item(), 0.3);
    }

    #[test]
    fn step_decay_schedule() {
        let cfg = SgdConfig {
            learning_rate: 0.01,
            step_decay_factor: 0.1,
            decay_every_epochs: Some(50),
        };
        assert_eq!(cfg.learning_rate_at(49), 0.01);
        assert!((cfg.learning_rate_at(60) - 0.001).abs() < 1e-15);
        assert!((cfg.learning_rate_at(120) - 0.0001).abs() < 1e-16);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut ps = vec![param(1.0, 0.5), param(1.0, f64::NAN)];
        ps[1].name = "head.weight".into();
        let err = sgd_step(&mut ps, &SgdConfig::default(), 0).unwrap_err();
        assert_eq!(err, Error::NonFiniteGradient("head.weight".into()));
        assert_eq!(ps[0].value.item(), 1.0);
    }

    #[test]
    fn invalid_learning_rate() {
        let cfg = SgdConfig {
            learning_rate: 0.0,
            ..SgdConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
