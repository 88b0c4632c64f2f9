//! Training objective: mean-squared reconstruction error plus a weighted
//! perceptual term computed on frozen encoder features,
//! `L = mean((pred - target)^2) + lambda * mean((g(pred) - g(target))^2)`.
//!
//! Both terms are means over all elements. The gradient with respect to the
//! prediction backpropagates through the feature extractor.

use ndarray::{Array4, NdFloat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::{batch_to_model_space, ENCODER_STD};
use crate::net::Model;

/// Weight of the perceptual term and which encoder block feeds it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda: f64,
    /// Encoder block whose first convolution (post-ReLU) is the feature tap.
    pub perceptual_block: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            perceptual_block: 3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if !(1..=3).contains(&self.perceptual_block) {
            return Err(Error::InvalidArgument(format!(
                "perceptual block must be 1..=3, got {}",
                self.perceptual_block
            )));
        }
        Ok(())
    }
}

/// A differentiable feature map over `[0, 1]` image batches.
pub trait FeatureExtractor<T: NdFloat> {
    fn features(&self, img: &Array4<T>) -> Result<Array4<T>>;
    /// Vector-Jacobian product: gradient on the features pulled back to the
    /// image.
    fn features_vjp(&self, img: &Array4<T>, grad_features: &Array4<T>) -> Result<Array4<T>>;
}

/// `g(x) = x`: the stub extractor used by tests and stub evaluations.
pub struct IdentityFeatures;

impl<T: NdFloat> FeatureExtractor<T> for IdentityFeatures {
    fn features(&self, img: &Array4<T>) -> Result<Array4<T>> {
        Ok(img.clone())
    }

    fn features_vjp(&self, _img: &Array4<T>, grad_features: &Array4<T>) -> Result<Array4<T>> {
        Ok(grad_features.clone())
    }
}

/// The frozen encoder tap: standardizes the image batch, then runs the
/// encoder through the first convolution of the configured block.
pub struct PerceptualTap<'a, T> {
    pub model: &'a Model<T>,
    pub block: usize,
}

impl<'a, T: NdFloat> PerceptualTap<'a, T> {
    pub fn new(model: &'a Model<T>, block: usize) -> Self {
        Self { model, block }
    }
}

impl<T: NdFloat> FeatureExtractor<T> for PerceptualTap<'_, T> {
    fn features(&self, img: &Array4<T>) -> Result<Array4<T>> {
        let x = batch_to_model_space(img);
        self.model.perceptual_features(&x, self.block)
    }

    fn features_vjp(&self, img: &Array4<T>, grad_features: &Array4<T>) -> Result<Array4<T>> {
        let x = batch_to_model_space(img);
        let mut grad = self.model.perceptual_features_vjp(&x, self.block, grad_features)?;
        // Standardization scales each channel by 1/std.
        for n in 0..grad.dim().0 {
            for c in 0..3 {
                let s = T::from(ENCODER_STD[c]).unwrap();
                grad.index_axis_mut(ndarray::Axis(0), n)
                    .index_axis_mut(ndarray::Axis(0), c)
                    .mapv_inplace(|v| v / s);
            }
        }
        Ok(grad)
    }
}

/// Mean squared difference in double precision.
fn mse<T: NdFloat>(a: &Array4<T>, b: &Array4<T>) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x.to_f64().unwrap() - y.to_f64().unwrap();
        acc += d * d;
    }
    acc / a.len() as f64
}

/// Elementwise `2 (a - b) / n`, the gradient of the mean-squared term.
fn mse_grad<T: NdFloat>(a: &Array4<T>, b: &Array4<T>) -> Array4<T> {
    let scale = T::from(2.0 / a.len() as f64).unwrap();
    let mut g = a.clone();
    g.zip_mut_with(b, |x, &y| *x = (*x - y) * scale);
    g
}

/// Total training loss and its gradient with respect to `pred`.
pub fn total_loss<T: NdFloat>(
    pred: &Array4<T>,
    target: &Array4<T>,
    g: &dyn FeatureExtractor<T>,
    cfg: &LossConfig,
) -> Result<(f64, Array4<T>)> {
    cfg.validate()?;
    if pred.dim() != target.dim() {
        return Err(Error::ShapeMismatch(format!(
            "loss inputs differ: {:?} vs {:?}",
            pred.dim(),
            target.dim()
        )));
    }

    let mut loss = mse(pred, target);
    let mut grad = mse_grad(pred, target);

    if cfg.lambda > 0.0 {
        let fp = g.features(pred)?;
        let ft = g.features(target)?;
        loss += cfg.lambda * mse(&fp, &ft);
        let lambda = T::from(cfg.lambda).unwrap();
        let gf = mse_grad(&fp, &ft);
        let gp = g.features_vjp(pred, &gf)?;
        grad.zip_mut_with(&gp, |a, &b| *a = *a + lambda * b);
    }

    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::net::{build_model, ModelConfig, NormKind, Scale, WeightInit};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(seed: u64, n: usize, h: usize, w: usize) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((n, 3, h, w), |_| rng.random_range(0.05..0.95))
    }

    #[test]
    fn identical_inputs_give_zero_loss() {
        let a = batch(1, 2, 8, 8);
        let (loss, grad) = total_loss(&a, &a, &IdentityFeatures, &LossConfig::default()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_offset_closed_forms() {
        let a = batch(2, 1, 8, 8);
        let b = a.mapv(|v| v + 0.1);
        let cfg_l0 = LossConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let (loss, _) = total_loss(&b, &a, &IdentityFeatures, &cfg_l0).unwrap();
        assert!((loss - 0.01).abs() < 1e-12, "{loss}");

        // With the identity stub and lambda = 1 the two terms coincide.
        let cfg_l1 = LossConfig {
            lambda: 1.0,
            ..Default::default()
        };
        let (loss, _) = total_loss(&b, &a, &IdentityFeatures, &cfg_l1).unwrap();
        assert!((loss - 0.02).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn loss_is_nonnegative_and_zero_only_at_equality() {
        let a = batch(3, 1, 8, 8);
        let b = a.mapv(|v| v + 1e-3);
        let (loss, _) = total_loss(&b, &a, &IdentityFeatures, &LossConfig::default()).unwrap();
        assert!(loss > 0.0);
    }

    #[test]
    fn rejects_shape_mismatch_and_bad_lambda() {
        let a = batch(4, 1, 8, 8);
        let b = batch(4, 1, 8, 16);
        assert!(total_loss(&a, &b, &IdentityFeatures, &LossConfig::default()).is_err());
        let cfg = LossConfig {
            lambda: -1.0,
            ..Default::default()
        };
        assert!(total_loss(&a, &a, &IdentityFeatures, &cfg).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences_with_encoder_tap() {
        let cfg = ModelConfig::new(Scale::Tiny, NormKind::In, NormKind::In);
        let model = build_model(cfg, WeightInit::Random { seed: 5 }).unwrap().to_f64();
        let pred = batch(6, 1, 16, 16);
        let target = batch(7, 1, 16, 16);

        for lambda in [0.0, 1.0] {
            let loss_cfg = LossConfig {
                lambda,
                perceptual_block: 3,
            };
            let tap = PerceptualTap::new(&model, 3);
            let (_, grad) = total_loss(&pred, &target, &tap, &loss_cfg).unwrap();

            let eval = |p: &Array4<f64>| {
                let tap = PerceptualTap::new(&model, 3);
                total_loss(p, &target, &tap, &loss_cfg).unwrap().0
            };

            // Spot-check a deterministic sample of coordinates.
            let step = 1e-3;
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            for _ in 0..24 {
                let idx = (
                    0,
                    rng.random_range(0..3),
                    rng.random_range(0..16),
                    rng.random_range(0..16),
                );
                let mut pp = pred.clone();
                pp[idx] += step;
                let mut pm = pred.clone();
                pm[idx] -= step;
                let numeric = (eval(&pp) - eval(&pm)) / (2.0 * step);
                let analytic = grad[idx];
                assert!(
                    gradcheck::close(analytic, numeric, 1e-3, 1e-6),
                    "lambda {lambda} idx {idx:?}: {analytic} vs {numeric}"
                );
            }
        }
    }
}
