//! PSNR and SSIM on `[0, 1]` images. Accumulation runs in double precision.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::ImageTensor;

/// SSIM window: 11-tap Gaussian, sigma 1.5, applied per channel over the
/// valid (unpadded) region.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    /// Peak signal-to-noise ratio in dB; `+inf` for identical inputs.
    pub psnr_db: f64,
    /// Structural similarity in `[-1, 1]`.
    pub ssim: f64,
}

fn check_same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.data.dim() != b.data.dim() {
        return Err(Error::ShapeMismatch(format!(
            "metric inputs differ: {:?} vs {:?}",
            a.data.dim(),
            b.data.dim()
        )));
    }
    Ok(())
}

/// `10 log10(peak^2 / MSE)` with the MSE over all channels and pixels.
pub fn psnr(a: &ImageTensor, b: &ImageTensor, peak: f64) -> Result<f64> {
    check_same_shape(a, b)?;
    let mut acc = 0.0f64;
    for (x, y) in a.data.iter().zip(b.data.iter()) {
        let d = *x as f64 - *y as f64;
        acc += d * d;
    }
    let mse = acc / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size as isize - 1) / 2;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-region convolution with a symmetric 1-D kernel.
fn filter_valid(img: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let k = kernel.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    // Horizontal pass.
    let mut tmp = Array2::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                acc += kv * img[[y, x + i]];
            }
            tmp[[y, x]] = acc;
        }
    }
    // Vertical pass.
    let mut out = Array2::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                acc += kv * tmp[[y + i, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Mean local SSIM with the standard constants `C1 = (0.01 peak)^2`,
/// `C2 = (0.03 peak)^2`, computed per channel and averaged.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same_shape(a, b)?;
    let (c, h, w) = a.data.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ShapeMismatch(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}-tap SSIM window"
        )));
    }
    let peak = 1.0f64;
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let kernel = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);

    let mut total = 0.0;
    for ch in 0..c {
        let xa = a.data.index_axis(ndarray::Axis(0), ch).mapv(|v| v as f64);
        let xb = b.data.index_axis(ndarray::Axis(0), ch).mapv(|v| v as f64);

        let mu_a = filter_valid(&xa, &kernel);
        let mu_b = filter_valid(&xb, &kernel);
        let aa = filter_valid(&(&xa * &xa), &kernel);
        let bb = filter_valid(&(&xb * &xb), &kernel);
        let ab = filter_valid(&(&xa * &xb), &kernel);

        let mut acc = 0.0;
        for ((((ma, mb), saa), sbb), sab) in mu_a
            .iter()
            .zip(mu_b.iter())
            .zip(aa.iter())
            .zip(bb.iter())
            .zip(ab.iter())
        {
            let var_a = saa - ma * ma;
            let var_b = sbb - mb * mb;
            let cov = sab - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
            acc += num / den;
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

pub fn metrics(a: &ImageTensor, b: &ImageTensor) -> Result<MetricResult> {
    Ok(MetricResult {
        psnr_db: psnr(a, b, 1.0)?,
        ssim: ssim(a, b)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image_from(data: Array3<f32>) -> ImageTensor {
        ImageTensor::new(data).unwrap()
    }

    fn random_image(seed: u64, h: usize, w: usize) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        image_from(Array3::from_shape_fn((3, h, w), |_| {
            rng.random_range(0.0..1.0f32)
        }))
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let a = random_image(1, 16, 16);
        assert!(psnr(&a, &a, 1.0).unwrap().is_infinite());
    }

    #[test]
    fn psnr_uniform_error_closed_forms() {
        let a = image_from(Array3::from_elem((3, 8, 8), 0.3));
        let b = image_from(Array3::from_elem((3, 8, 8), 0.4));
        let p = psnr(&a, &b, 1.0).unwrap();
        assert!((p - 20.0).abs() < 1e-5, "{p}");

        let zero = image_from(Array3::from_elem((3, 8, 8), 0.0));
        let one = image_from(Array3::from_elem((3, 8, 8), 1.0));
        assert_eq!(psnr(&zero, &one, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn psnr_decreases_with_error() {
        let a = random_image(2, 12, 12);
        let mut last = f64::INFINITY;
        for err in [0.01f32, 0.05, 0.1, 0.5] {
            let b = image_from(a.data.mapv(|v| v + err));
            let p = psnr(&a, &b, 1.0).unwrap();
            assert!(p < last, "psnr {p} not below {last} at err {err}");
            last = p;
        }
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        let a = random_image(3, 16, 20);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let a = image_from(Array3::from_elem((3, 16, 16), 0.5));
        let b = image_from(Array3::from_elem((3, 16, 16), 0.25));
        let c1 = 0.01f64.powi(2);
        // Luminance term only; contrast/structure is (0 + C2)/(0 + C2) = 1.
        let expected = (2.0 * 0.5 * 0.25 + c1) / (0.25 + 0.0625 + c1);
        let s = ssim(&a, &b).unwrap();
        assert!((s - expected).abs() < 1e-9, "{s} vs {expected}");
        assert!((s - 0.8004).abs() < 1e-3);
    }

    #[test]
    fn ssim_is_symmetric() {
        for seed in 0..50 {
            let a = random_image(seed, 14, 18);
            let b = random_image(seed + 1000, 14, 18);
            let ab = ssim(&a, &b).unwrap();
            let ba = ssim(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!(ab < 1.0);
        }
    }

    #[test]
    fn ssim_below_one_unless_identical() {
        let a = random_image(7, 16, 16);
        for eps in [0.005f32, 0.02, 0.1, 0.3] {
            let b = image_from(a.data.mapv(|v| (v + eps).min(1.0)));
            let s = ssim(&a, &b).unwrap();
            assert!(s < 1.0, "ssim {s} at perturbation {eps}");
            assert!(s >= -1.0);
        }
    }

    #[test]
    fn ssim_rejects_tiny_images() {
        let a = random_image(4, 8, 8);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = random_image(5, 16, 16);
        let b = random_image(5, 16, 17);
        assert!(psnr(&a, &b, 1.0).is_err());
        assert!(ssim(&a, &b).is_err());
    }
}
