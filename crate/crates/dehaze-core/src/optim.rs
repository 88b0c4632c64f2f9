//! SGD with momentum and weight decay, and the training-rate schedule:
//! constant through the decay-start epoch, then linear to zero at the end of
//! the final epoch.
//!
//! Update rule per parameter:
//!
//! ```text
//! v <- momentum * v + (grad + weight_decay * param)
//! param <- param - lr * v
//! ```

use std::collections::BTreeMap;

use ndarray::{ArrayD, NdFloat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Gradients, ParamSet, Scale};

/// Optimizer, schedule, and loss-weight settings for a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub epochs: usize,
    pub decay_start_epoch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub seed: u64,
    pub scale: Scale,
    /// Training crop size; pairs smaller than this are used whole.
    pub crop: usize,
    /// Random horizontal flip during training.
    pub hflip: bool,
    /// Drop a trailing partial batch each epoch.
    pub drop_last: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr0: 0.1,
            epochs: 60,
            decay_start_epoch: 30,
            momentum: 0.9,
            weight_decay: 1e-4,
            lambda: 1.0,
            seed: 0,
            scale: Scale::Full,
            crop: 224,
            hflip: false,
            drop_last: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::InvalidConfig("lr0 must be positive".into()));
        }
        if self.decay_start_epoch == 0 || self.decay_start_epoch > self.epochs {
            return Err(Error::InvalidConfig(format!(
                "decay_start_epoch must satisfy 0 < {} <= epochs {}",
                self.decay_start_epoch, self.epochs
            )));
        }
        if self.momentum < 0.0 || self.momentum >= 1.0 {
            return Err(Error::InvalidConfig("momentum must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 || self.lambda < 0.0 {
            return Err(Error::InvalidConfig(
                "weight_decay and lambda must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Learning rate for a zero-based epoch index: `lr0` before the decay start,
/// then linear down to 0 at the end of the last epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    cfg.validate()?;
    if epoch >= cfg.epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} out of range 0..{}",
            cfg.epochs
        )));
    }
    if epoch < cfg.decay_start_epoch {
        return Ok(cfg.lr0);
    }
    let span = (cfg.epochs - cfg.decay_start_epoch) as f64;
    Ok(cfg.lr0 * (cfg.epochs - epoch) as f64 / span)
}

/// Per-parameter momentum buffers, keyed like the parameter set.
#[derive(Debug, Clone)]
pub struct SgdState<T = f32> {
    pub velocity: BTreeMap<String, ArrayD<T>>,
}

impl<T> Default for SgdState<T> {
    fn default() -> Self {
        Self {
            velocity: BTreeMap::new(),
        }
    }
}

/// Apply one SGD step to every trainable parameter that has a gradient.
/// Frozen parameters are never touched. Fails on non-finite gradients.
pub fn sgd_step<T: NdFloat>(
    params: &mut ParamSet<T>,
    grads: &Gradients<T>,
    state: &mut SgdState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let momentum = T::from(cfg.momentum).unwrap();
    let wd = T::from(cfg.weight_decay).unwrap();
    let lr = T::from(lr).unwrap();

    for (name, grad) in grads {
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Other(format!(
                "non-finite gradient for parameter {name}"
            )));
        }
        let param = params.get_mut(name)?;
        if !param.trainable {
            return Err(Error::Other(format!(
                "gradient supplied for frozen parameter {name}"
            )));
        }
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
        ndarray::Zip::from(&mut param.value)
            .and(&mut *v)
            .and(grad)
            .for_each(|p, v, &g| {
                *v = momentum * *v + (g + wd * *p);
                *p -= lr * *v;
            });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn schedule_matches_protocol() {
        let c = cfg();
        assert_eq!(lr_at(10, &c).unwrap(), 0.1);
        assert_eq!(lr_at(30, &c).unwrap(), 0.1);
        assert!((lr_at(45, &c).unwrap() - 0.05).abs() < 1e-12);
        assert!((lr_at(59, &c).unwrap() - 0.1 / 30.0).abs() < 1e-12);
        assert!(lr_at(60, &c).is_err());
    }

    #[test]
    fn schedule_is_nonincreasing_and_continuous_at_decay_start() {
        let c = cfg();
        let mut last = f64::INFINITY;
        for e in 0..c.epochs {
            let lr = lr_at(e, &c).unwrap();
            assert!(lr <= last + 1e-15);
            last = lr;
        }
        // One epoch before the decay start still sees lr0 exactly.
        assert_eq!(lr_at(c.decay_start_epoch - 1, &c).unwrap(), c.lr0);
        assert_eq!(lr_at(c.decay_start_epoch, &c).unwrap(), c.lr0);
    }

    fn single_param<T: NdFloat>(value: T) -> ParamSet<T> {
        let mut p = ParamSet::default();
        p.insert("w", arr1(&[value]).into_dyn(), true);
        p
    }

    fn grad_of<T: NdFloat>(value: T) -> Gradients<T> {
        let mut g = Gradients::new();
        g.insert("w".into(), arr1(&[value]).into_dyn());
        g
    }

    #[test]
    fn plain_gradient_step() {
        let mut params = single_param(1.0f32);
        let mut state = SgdState::default();
        let c = TrainConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..cfg()
        };
        sgd_step(&mut params, &grad_of(0.5), &mut state, 0.1, &c).unwrap();
        let v = params.get("w").unwrap().value[[0]];
        assert!((v - 0.95).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_zero_state_is_fixed_point() {
        let mut params = single_param(0.7f32);
        let mut state = SgdState::default();
        let c = TrainConfig {
            weight_decay: 0.0,
            ..cfg()
        };
        sgd_step(&mut params, &grad_of(0.0), &mut state, 0.1, &c).unwrap();
        assert_eq!(params.get("w").unwrap().value[[0]], 0.7);
    }

    #[test]
    fn hand_computed_update() {
        // param 1, grad 0.5, lr 0.1, momentum 0.9, v 0, wd 1e-4:
        // v = 0.5001, param = 1 - 0.05001 = 0.94999.
        let mut params = single_param(1.0f64);
        let mut state = SgdState::default();
        sgd_step(&mut params, &grad_of(0.5), &mut state, 0.1, &cfg()).unwrap();
        let v = state.velocity["w"][[0]];
        let p = params.get("w").unwrap().value[[0]];
        assert!((v - 0.5001).abs() < 1e-9, "v = {v}");
        assert!((p - 0.94999).abs() < 1e-9, "p = {p}");

        // The single-precision path agrees to f32 resolution.
        let mut params = single_param(1.0f32);
        let mut state = SgdState::default();
        sgd_step(&mut params, &grad_of(0.5f32), &mut state, 0.1, &cfg()).unwrap();
        assert!((params.get("w").unwrap().value[[0]] - 0.94999).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_is_parameter_noop_but_updates_momentum() {
        let mut params = single_param(0.5f32);
        let mut state = SgdState::default();
        sgd_step(&mut params, &grad_of(0.25), &mut state, 0.0, &cfg()).unwrap();
        assert_eq!(params.get("w").unwrap().value[[0]], 0.5);
        assert!(state.velocity["w"][[0]] > 0.0);
    }

    #[test]
    fn pure_decay_shrinks_by_expected_factor() {
        let mut params = single_param(2.0f64);
        let mut state = SgdState::default();
        let c = TrainConfig {
            momentum: 0.0,
            ..cfg()
        };
        let lr = 0.1;
        sgd_step(&mut params, &grad_of(0.0f64), &mut state, lr, &c).unwrap();
        let expected = 2.0 * (1.0 - lr * c.weight_decay);
        let got = params.get("w").unwrap().value[[0]];
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut params = single_param(1.0);
        let mut state = SgdState::default();
        assert!(sgd_step(&mut params, &grad_of(f32::NAN), &mut state, 0.1, &cfg()).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut c = cfg();
        c.decay_start_epoch = 61;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.lr0 = 0.0;
        assert!(c.validate().is_err());
    }
}
