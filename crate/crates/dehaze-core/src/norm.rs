//! Instance normalization, its batch-level reduction, and the identity map.
//!
//! Instance normalization standardizes each (sample, channel) slice of an
//! N×C×H×W feature map with its own spatial statistics, then applies a
//! learnable per-channel affine transform:
//!
//! ```text
//! y = gamma[c] * (x - mu_nc) / sqrt(var_nc + eps) + beta[c]
//! ```
//!
//! Replacing the per-sample statistics with statistics pooled over the whole
//! minibatch per channel gives batch normalization. Variances use the biased
//! (1/m) estimator. For a batch of one, train-mode batch normalization and
//! instance normalization coincide.

use ndarray::{Array1, Array4, ArrayView1, Axis, NdFloat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which normalization a network site applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum NormKind {
    /// No normalization: the exact identity map.
    Na,
    /// Batch normalization.
    Bn,
    /// Instance normalization.
    In,
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NormKind::Na => write!(f, "NA"),
            NormKind::Bn => write!(f, "BN"),
            NormKind::In => write!(f, "IN"),
        }
    }
}

/// Default epsilon inside the variance square root.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Momentum for batch-norm running statistics:
/// `running = (1 - momentum) * running + momentum * batch`.
pub const BN_MOMENTUM: f64 = 0.1;

/// Owned affine parameters for a normalization site.
#[derive(Debug, Clone)]
pub struct NormParams<T> {
    pub kind: NormKind,
    pub gamma: Array1<T>,
    pub beta_shift: Array1<T>,
    pub eps: T,
}

impl<T: NdFloat> NormParams<T> {
    pub fn identity_affine(kind: NormKind, channels: usize) -> Self {
        Self {
            kind,
            gamma: Array1::ones(channels),
            beta_shift: Array1::zeros(channels),
            eps: T::from(DEFAULT_EPS).unwrap(),
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.eps <= T::zero() {
            return Err(Error::InvalidArgument("eps must be positive".into()));
        }
        if self.gamma.len() != channels || self.beta_shift.len() != channels {
            return Err(Error::ShapeMismatch(format!(
                "affine parameters have {} channels, feature map has {}",
                self.gamma.len(),
                channels
            )));
        }
        Ok(())
    }

    /// Instance-normalize a feature map with these parameters.
    pub fn instance_norm(&self, x: &Array4<T>) -> Result<Array4<T>> {
        if self.kind != NormKind::In {
            return Err(Error::InvalidArgument(format!(
                "instance_norm called on a {} site",
                self.kind
            )));
        }
        self.validate(x.dim().1)?;
        Ok(instance_norm_eval(
            x,
            &self.gamma.view(),
            &self.beta_shift.view(),
            self.eps,
        ))
    }
}

/// Backward cache shared by instance and batch normalization.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    /// Standardized input, same shape as x.
    x_hat: Array4<T>,
    /// Per-(n,c) standard deviation for IN; per-channel (broadcast over n)
    /// for BN.
    sigma: ndarray::Array2<T>,
    batch_stats: bool,
}

fn stat_dims<T: NdFloat>(x: &Array4<T>) -> (usize, usize, usize, usize) {
    let (n, c, h, w) = x.dim();
    debug_assert!(n >= 1 && c >= 1 && h >= 1 && w >= 1);
    (n, c, h, w)
}

/// Instance normalization without caching (inference path).
pub fn instance_norm_eval<T: NdFloat>(
    x: &Array4<T>,
    gamma: &ArrayView1<T>,
    beta: &ArrayView1<T>,
    eps: T,
) -> Array4<T> {
    let (out, _) = instance_norm_inner(x, gamma, beta, eps, false);
    out
}

/// Instance normalization keeping what the backward pass needs.
pub fn instance_norm_train<T: NdFloat>(
    x: &Array4<T>,
    gamma: &ArrayView1<T>,
    beta: &ArrayView1<T>,
    eps: T,
) -> (Array4<T>, NormCache<T>) {
    let (out, cache) = instance_norm_inner(x, gamma, beta, eps, true);
    (out, cache.expect("cache requested"))
}

fn instance_norm_inner<T: NdFloat>(
    x: &Array4<T>,
    gamma: &ArrayView1<T>,
    beta: &ArrayView1<T>,
    eps: T,
    keep_cache: bool,
) -> (Array4<T>, Option<NormCache<T>>) {
    let (n, c, h, w) = stat_dims(x);
    assert_eq!(gamma.len(), c, "gamma/channel mismatch");
    assert_eq!(beta.len(), c, "beta/channel mismatch");
    let m = T::from(h * w).unwrap();

    let mut out = Array4::zeros((n, c, h, w));
    let mut x_hat = if keep_cache {
        Array4::zeros((n, c, h, w))
    } else {
        Array4::zeros((0, 0, 0, 0))
    };
    let mut sigma = ndarray::Array2::zeros((n, c));

    for ni in 0..n {
        for ci in 0..c {
            let slice = x.index_axis(Axis(0), ni);
            let slice = slice.index_axis(Axis(0), ci);
            let mut sum = T::zero();
            for &v in slice.iter() {
                sum += v;
            }
            let mu = sum / m;
            let mut var = T::zero();
            for &v in slice.iter() {
                let d = v - mu;
                var += d * d;
            }
            var = var / m;
            let sd = (var + eps).sqrt();
            sigma[[ni, ci]] = sd;
            let (g, b) = (gamma[ci], beta[ci]);
            let mut dst = out.index_axis_mut(Axis(0), ni);
            let mut dst = dst.index_axis_mut(Axis(0), ci);
            if keep_cache {
                let mut xh = x_hat.index_axis_mut(Axis(0), ni);
                let mut xh = xh.index_axis_mut(Axis(0), ci);
                for ((d, xh), &v) in dst.iter_mut().zip(xh.iter_mut()).zip(slice.iter()) {
                    let hat = (v - mu) / sd;
                    *xh = hat;
                    *d = g * hat + b;
                }
            } else {
                for (d, &v) in dst.iter_mut().zip(slice.iter()) {
                    *d = g * ((v - mu) / sd) + b;
                }
            }
        }
    }

    let cache = keep_cache.then(|| NormCache {
        x_hat,
        sigma,
        batch_stats: false,
    });
    (out, cache)
}

/// Batch normalization in train mode. Returns the output, the backward
/// cache, and the per-channel batch mean/variance for running-stat updates.
pub fn batch_norm_train<T: NdFloat>(
    x: &Array4<T>,
    gamma: &ArrayView1<T>,
    beta: &ArrayView1<T>,
    eps: T,
) -> (Array4<T>, NormCache<T>, Array1<T>, Array1<T>) {
    let (n, c, h, w) = stat_dims(x);
    assert_eq!(gamma.len(), c);
    let m = T::from(n * h * w).unwrap();

    let mut mean = Array1::zeros(c);
    let mut var = Array1::zeros(c);
    for ci in 0..c {
        let mut sum = T::zero();
        for ni in 0..n {
            let plane = x.index_axis(Axis(0), ni);
            for &v in plane.index_axis(Axis(0), ci).iter() {
                sum += v;
            }
        }
        let mu = sum / m;
        let mut acc = T::zero();
        for ni in 0..n {
            let plane = x.index_axis(Axis(0), ni);
            for &v in plane.index_axis(Axis(0), ci).iter() {
                let d = v - mu;
                acc += d * d;
            }
        }
        mean[ci] = mu;
        var[ci] = acc / m;
    }

    let mut out = Array4::zeros((n, c, h, w));
    let mut x_hat = Array4::zeros((n, c, h, w));
    let mut sigma = ndarray::Array2::zeros((n, c));
    for ci in 0..c {
        let sd = (var[ci] + eps).sqrt();
        let (g, b) = (gamma[ci], beta[ci]);
        for ni in 0..n {
            sigma[[ni, ci]] = sd;
            let src = x.index_axis(Axis(0), ni);
            let src = src.index_axis(Axis(0), ci);
            let mut dst = out.index_axis_mut(Axis(0), ni);
            let mut dst = dst.index_axis_mut(Axis(0), ci);
            let mut xh = x_hat.index_axis_mut(Axis(0), ni);
            let mut xh = xh.index_axis_mut(Axis(0), ci);
            for ((d, hat), &v) in dst.iter_mut().zip(xh.iter_mut()).zip(src.iter()) {
                let hv = (v - mean[ci]) / sd;
                *hat = hv;
                *d = g * hv + b;
            }
        }
    }

    (
        out,
        NormCache {
            x_hat,
            sigma,
            batch_stats: true,
        },
        mean,
        var,
    )
}

/// Batch normalization in eval mode, using accumulated running statistics.
pub fn batch_norm_eval<T: NdFloat>(
    x: &Array4<T>,
    gamma: &ArrayView1<T>,
    beta: &ArrayView1<T>,
    running_mean: &ArrayView1<T>,
    running_var: &ArrayView1<T>,
    eps: T,
) -> Array4<T> {
    let (n, c, _, _) = stat_dims(x);
    let mut out = x.clone();
    for ci in 0..c {
        let sd = (running_var[ci] + eps).sqrt();
        let (g, b, mu) = (gamma[ci], beta[ci], running_mean[ci]);
        for ni in 0..n {
            let mut dst = out.index_axis_mut(Axis(0), ni);
            let mut dst = dst.index_axis_mut(Axis(0), ci);
            dst.mapv_inplace(|v| g * ((v - mu) / sd) + b);
        }
    }
    out
}

/// Backward pass for both instance and batch normalization.
///
/// Returns `(grad_x, grad_gamma, grad_beta)`. The input gradient accounts for
/// the dependence of the statistics on x.
pub fn norm_backward<T: NdFloat>(
    grad_y: &Array4<T>,
    cache: &NormCache<T>,
    gamma: &ArrayView1<T>,
) -> (Array4<T>, Array1<T>, Array1<T>) {
    let (n, c, h, w) = stat_dims(&cache.x_hat);
    assert_eq!(grad_y.dim(), (n, c, h, w), "grad/cache shape mismatch");

    let mut grad_gamma = Array1::zeros(c);
    let mut grad_beta = Array1::zeros(c);
    for ni in 0..n {
        let gy = grad_y.index_axis(Axis(0), ni);
        let xh = cache.x_hat.index_axis(Axis(0), ni);
        for ci in 0..c {
            let mut sg = T::zero();
            let mut sb = T::zero();
            for (&g, &hat) in gy
                .index_axis(Axis(0), ci)
                .iter()
                .zip(xh.index_axis(Axis(0), ci).iter())
            {
                sg += g * hat;
                sb += g;
            }
            grad_gamma[ci] += sg;
            grad_beta[ci] += sb;
        }
    }

    let mut grad_x = Array4::zeros((n, c, h, w));
    if cache.batch_stats {
        // Statistics pooled over (n, h, w) per channel.
        let m = T::from(n * h * w).unwrap();
        for ci in 0..c {
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for ni in 0..n {
                let gy = grad_y.index_axis(Axis(0), ni);
                let xh = cache.x_hat.index_axis(Axis(0), ni);
                for (&g, &hat) in gy
                    .index_axis(Axis(0), ci)
                    .iter()
                    .zip(xh.index_axis(Axis(0), ci).iter())
                {
                    sum_g += g;
                    sum_gx += g * hat;
                }
            }
            let mean_g = sum_g / m;
            let mean_gx = sum_gx / m;
            let scale = gamma[ci] / cache.sigma[[0, ci]];
            for ni in 0..n {
                let gy = grad_y.index_axis(Axis(0), ni);
                let xh = cache.x_hat.index_axis(Axis(0), ni);
                let mut gx = grad_x.index_axis_mut(Axis(0), ni);
                for ((o, &g), &hat) in gx
                    .index_axis_mut(Axis(0), ci)
                    .iter_mut()
                    .zip(gy.index_axis(Axis(0), ci).iter())
                    .zip(xh.index_axis(Axis(0), ci).iter())
                {
                    *o = scale * (g - mean_g - hat * mean_gx);
                }
            }
        }
    } else {
        // Per-(n, c) statistics.
        let m = T::from(h * w).unwrap();
        for ni in 0..n {
            let gy = grad_y.index_axis(Axis(0), ni);
            let xh = cache.x_hat.index_axis(Axis(0), ni);
            let mut gx = grad_x.index_axis_mut(Axis(0), ni);
            for ci in 0..c {
                let mut sum_g = T::zero();
                let mut sum_gx = T::zero();
                for (&g, &hat) in gy
                    .index_axis(Axis(0), ci)
                    .iter()
                    .zip(xh.index_axis(Axis(0), ci).iter())
                {
                    sum_g += g;
                    sum_gx += g * hat;
                }
                let mean_g = sum_g / m;
                let mean_gx = sum_gx / m;
                let scale = gamma[ci] / cache.sigma[[ni, ci]];
                for ((o, &g), &hat) in gx
                    .index_axis_mut(Axis(0), ci)
                    .iter_mut()
                    .zip(gy.index_axis(Axis(0), ci).iter())
                    .zip(xh.index_axis(Axis(0), ci).iter())
                {
                    *o = scale * (g - mean_g - hat * mean_gx);
                }
            }
        }
    }

    (grad_x, grad_gamma, grad_beta)
}

/// Update running statistics in place.
pub fn update_running_stats<T: NdFloat>(
    running_mean: &mut ndarray::ArrayViewMut1<T>,
    running_var: &mut ndarray::ArrayViewMut1<T>,
    batch_mean: &Array1<T>,
    batch_var: &Array1<T>,
    momentum: T,
) {
    let keep = T::one() - momentum;
    for (r, &b) in running_mean.iter_mut().zip(batch_mean.iter()) {
        *r = keep * *r + momentum * b;
    }
    for (r, &b) in running_var.iter_mut().zip(batch_var.iter()) {
        *r = keep * *r + momentum * b;
    }
}
