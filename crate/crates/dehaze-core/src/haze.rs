//! Atmospheric scattering model: transmission maps and hazy image synthesis.
//!
//! A hazy observation is `I(x) = J(x)·t(x) + A·(1 - t(x))` where `J` is the
//! clear scene, `A` the global atmospheric light, and `t(x) = exp(-β·d(x))`
//! the transmission for depth `d` and scattering coefficient `β`.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::ImageTensor;

/// Per-image synthesis parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazeParams {
    /// Atmospheric light per RGB channel, each in `(0, 1]`.
    pub atmospheric_light: [f32; 3],
    /// Scattering coefficient, positive.
    pub beta: f32,
}

impl HazeParams {
    pub fn validate(&self) -> Result<()> {
        if self
            .atmospheric_light
            .iter()
            .any(|&a| !(a > 0.0 && a <= 1.0))
        {
            return Err(Error::InvalidArgument(format!(
                "atmospheric light must lie in (0, 1], got {:?}",
                self.atmospheric_light
            )));
        }
        if self.beta <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Sampling ranges for [`sample_haze_params`]. Defaults follow the standard
/// synthetic-benchmark protocol: `A` per channel in `(0.7, 1.0)`, `β` in
/// `(0.6, 1.8)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HazeRanges {
    pub atmospheric_light: (f32, f32),
    pub beta: (f32, f32),
}

impl Default for HazeRanges {
    fn default() -> Self {
        Self {
            atmospheric_light: (0.7, 1.0),
            beta: (0.6, 1.8),
        }
    }
}

impl HazeRanges {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("atmospheric_light", self.atmospheric_light),
            ("beta", self.beta),
        ] {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{name} range must satisfy lo < hi, got ({lo}, {hi})"
                )));
            }
        }
        if self.atmospheric_light.0 <= 0.0 || self.atmospheric_light.1 > 1.0 {
            return Err(Error::InvalidArgument(
                "atmospheric light range must lie within (0, 1]".into(),
            ));
        }
        if self.beta.0 <= 0.0 {
            return Err(Error::InvalidArgument("beta range must be positive".into()));
        }
        Ok(())
    }
}

/// A per-pixel depth map, 1×H×W, non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub data: Array2<f32>,
}

impl DepthMap {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        if data.iter().any(|&d| !(d >= 0.0)) {
            return Err(Error::InvalidArgument(
                "depth values must be non-negative and finite".into(),
            ));
        }
        Ok(Self { data })
    }

    /// From a single-channel image tensor as produced by the depth loader.
    pub fn from_image(img: &ImageTensor) -> Result<Self> {
        if img.channels() != 1 {
            return Err(Error::ShapeMismatch(
                "depth maps must be single-channel".into(),
            ));
        }
        let (_, h, w) = img.data.dim();
        Self::new(
            img.data
                .clone()
                .into_shape_with_order((h, w))
                .expect("1xHxW reshapes to HxW"),
        )
    }

    /// Scale so the maximum depth is 1. A constant-zero map stays zero.
    pub fn normalized_to_unit_max(&self) -> DepthMap {
        let max = self.data.iter().cloned().fold(0.0f32, f32::max);
        if max <= 0.0 {
            return self.clone();
        }
        DepthMap {
            data: self.data.mapv(|d| d / max),
        }
    }
}

/// A per-pixel transmission map with values in `(0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionMap {
    pub data: Array2<f32>,
}

/// `t = exp(-β·d)` elementwise.
pub fn transmission_from_depth(depth: &DepthMap, beta: f32) -> Result<TransmissionMap> {
    if beta <= 0.0 || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "beta must be positive and finite, got {beta}"
        )));
    }
    Ok(TransmissionMap {
        data: depth.data.mapv(|d| (-(beta * d)).exp()),
    })
}

/// Compose a hazy observation from a clear image, a transmission map, and an
/// atmospheric light: `I = J·t + A·(1 - t)` per pixel and channel.
pub fn apply_scattering(
    clear: &ImageTensor,
    t: &TransmissionMap,
    atmospheric_light: [f32; 3],
) -> Result<ImageTensor> {
    if !clear.is_rgb() {
        return Err(Error::ShapeMismatch("clear image must be RGB".into()));
    }
    let (c, h, w) = clear.data.dim();
    if t.data.dim() != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "transmission {:?} does not match image {}x{}",
            t.data.dim(),
            h,
            w
        )));
    }
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        let a = atmospheric_light[ch];
        for y in 0..h {
            for x in 0..w {
                let tv = t.data[[y, x]];
                out[[ch, y, x]] = clear.data[[ch, y, x]] * tv + a * (1.0 - tv);
            }
        }
    }
    ImageTensor::new(out)
}

/// Invert the scattering model given exact `(t, A)`: `J = (I - A(1-t)) / t`.
/// Test oracle for synthesis round-trips; valid for `t` bounded away from 0.
pub fn invert_scattering(
    hazy: &ImageTensor,
    t: &TransmissionMap,
    atmospheric_light: [f32; 3],
) -> Result<ImageTensor> {
    let (c, h, w) = hazy.data.dim();
    if t.data.dim() != (h, w) {
        return Err(Error::ShapeMismatch("transmission/image mismatch".into()));
    }
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        let a = atmospheric_light[ch] as f64;
        for y in 0..h {
            for x in 0..w {
                let tv = t.data[[y, x]] as f64;
                let i = hazy.data[[ch, y, x]] as f64;
                out[[ch, y, x]] = ((i - a * (1.0 - tv)) / tv) as f32;
            }
        }
    }
    ImageTensor::new(out)
}

/// Draw one `(A, β)` pair: `A` i.i.d. uniform per channel, then `β` uniform,
/// all from a stream seeded by `seed`.
pub fn sample_haze_params(seed: u64, ranges: &HazeRanges) -> Result<HazeParams> {
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_haze_params_from(&mut rng, ranges)
}

/// Same as [`sample_haze_params`] but drawing from a caller-owned stream.
pub fn sample_haze_params_from(rng: &mut impl Rng, ranges: &HazeRanges) -> Result<HazeParams> {
    ranges.validate()?;
    let (alo, ahi) = ranges.atmospheric_light;
    let (blo, bhi) = ranges.beta;
    let atmospheric_light = [
        rng.random_range(alo..ahi),
        rng.random_range(alo..ahi),
        rng.random_range(alo..ahi),
    ];
    let beta = rng.random_range(blo..bhi);
    Ok(HazeParams {
        atmospheric_light,
        beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn depth_from(vals: Array2<f32>) -> DepthMap {
        DepthMap::new(vals).unwrap()
    }

    #[test]
    fn zero_depth_gives_unit_transmission() {
        let d = depth_from(Array2::zeros((3, 4)));
        let t = transmission_from_depth(&d, 1.2).unwrap();
        assert!(t.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn analytic_exponents() {
        let d = depth_from(Array2::from_elem((1, 1), std::f32::consts::LN_2));
        let t = transmission_from_depth(&d, 1.0).unwrap();
        assert!((t.data[[0, 0]] - 0.5).abs() < 1e-7);

        // Independent value: exp(-1.8) evaluated in f64.
        let d = depth_from(Array2::from_elem((1, 1), 1.0));
        let t = transmission_from_depth(&d, 1.8).unwrap();
        let expected = (-1.8f64).exp() as f32;
        assert!((t.data[[0, 0]] - expected).abs() < 1e-7);
        assert!((t.data[[0, 0]] - 0.165_29).abs() < 1e-5);
    }

    #[test]
    fn transmission_rejects_bad_inputs() {
        let d = depth_from(Array2::zeros((2, 2)));
        assert!(transmission_from_depth(&d, 0.0).is_err());
        assert!(transmission_from_depth(&d, -1.0).is_err());
        assert!(DepthMap::new(Array2::from_elem((1, 1), -0.5)).is_err());
    }

    fn const_image(v: [f32; 3], h: usize, w: usize) -> ImageTensor {
        let mut data = Array3::zeros((3, h, w));
        for c in 0..3 {
            data.index_axis_mut(ndarray::Axis(0), c).fill(v[c]);
        }
        ImageTensor::new(data).unwrap()
    }

    #[test]
    fn scattering_endpoint_cases() {
        let clear = const_image([0.2, 0.4, 0.6], 2, 3);
        let a = [0.9, 0.8, 0.7];

        let t1 = TransmissionMap {
            data: Array2::ones((2, 3)),
        };
        let hazy = apply_scattering(&clear, &t1, a).unwrap();
        assert_eq!(hazy.data, clear.data);

        let t0 = TransmissionMap {
            data: Array2::zeros((2, 3)),
        };
        let hazy = apply_scattering(&clear, &t0, a).unwrap();
        for c in 0..3 {
            assert!(hazy.data.index_axis(ndarray::Axis(0), c).iter().all(|&v| v == a[c]));
        }
    }

    #[test]
    fn scattering_hand_value() {
        let clear = const_image([0.2; 3], 1, 1);
        let t = TransmissionMap {
            data: Array2::from_elem((1, 1), 0.5),
        };
        let hazy = apply_scattering(&clear, &t, [0.9; 3]).unwrap();
        // 0.2*0.5 + 0.9*0.5
        assert!((hazy.data[[0, 0, 0]] - 0.55).abs() < 1e-7);
    }

    #[test]
    fn scattering_shape_mismatch_errors() {
        let clear = const_image([0.2; 3], 2, 2);
        let t = TransmissionMap {
            data: Array2::ones((3, 3)),
        };
        assert!(apply_scattering(&clear, &t, [0.9; 3]).is_err());
    }

    #[test]
    fn sample_ranges_and_determinism() {
        let ranges = HazeRanges::default();
        for seed in 0..10_000u64 {
            let p = sample_haze_params(seed, &ranges).unwrap();
            for a in p.atmospheric_light {
                assert!(a > 0.7 && a < 1.0, "A={a} out of range at seed {seed}");
            }
            assert!(p.beta > 0.6 && p.beta < 1.8, "beta={} at seed {seed}", p.beta);
        }
        assert_eq!(
            sample_haze_params(42, &ranges).unwrap(),
            sample_haze_params(42, &ranges).unwrap()
        );
    }

    #[test]
    fn sample_rejects_invalid_ranges() {
        let mut r = HazeRanges::default();
        r.beta = (1.8, 0.6);
        assert!(sample_haze_params(1, &r).is_err());
        let mut r = HazeRanges::default();
        r.atmospheric_light = (0.9, 0.9);
        assert!(sample_haze_params(1, &r).is_err());
    }

    proptest! {
        #[test]
        fn hazy_pixels_are_convex_combinations(
            seed in 0u64..500,
            beta in 0.01f32..5.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = Array3::from_shape_fn((3, 4, 5), |_| rng.random_range(0.0..1.0f32));
            let clear = ImageTensor::new(data).unwrap();
            let depth = depth_from(Array2::from_shape_fn((4, 5), |_| rng.random_range(0.0..3.0f32)));
            let a = [
                rng.random_range(0.7..1.0f32),
                rng.random_range(0.7..1.0f32),
                rng.random_range(0.7..1.0f32),
            ];
            let t = transmission_from_depth(&depth, beta).unwrap();
            let hazy = apply_scattering(&clear, &t, a).unwrap();
            for c in 0..3 {
                for y in 0..4 {
                    for x in 0..5 {
                        let j = clear.data[[c, y, x]];
                        let i = hazy.data[[c, y, x]];
                        let lo = j.min(a[c]) - 1e-6;
                        let hi = j.max(a[c]) + 1e-6;
                        prop_assert!(i >= lo && i <= hi);
                    }
                }
            }
        }

        #[test]
        fn atmospheric_light_equal_to_scene_is_fixed_point(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = [
                rng.random_range(0.1..1.0f32),
                rng.random_range(0.1..1.0f32),
                rng.random_range(0.1..1.0f32),
            ];
            let clear = const_image(a, 3, 3);
            let depth = depth_from(Array2::from_shape_fn((3, 3), |_| rng.random_range(0.0..2.0f32)));
            let t = transmission_from_depth(&depth, 1.0).unwrap();
            let hazy = apply_scattering(&clear, &t, a).unwrap();
            for (h, c) in hazy.data.iter().zip(clear.data.iter()) {
                prop_assert!((h - c).abs() < 1e-6);
            }
        }

        #[test]
        fn depth_beta_scaling_symmetry(
            seed in 0u64..200,
            pow in -3i32..4,
        ) {
            // k a power of two: beta*(k*d) and (k*beta)*d round identically,
            // so the two transmissions must be bit-equal.
            let k = 2.0f32.powi(pow);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = depth_from(Array2::from_shape_fn((3, 3), |_| rng.random_range(0.0..4.0f32)));
            let beta = rng.random_range(0.1..2.0f32);
            let scaled_depth = DepthMap { data: d.data.mapv(|v| k * v) };
            let a = transmission_from_depth(&scaled_depth, beta).unwrap();
            let b = transmission_from_depth(&d, k * beta).unwrap();
            prop_assert_eq!(a.data, b.data);
        }

        #[test]
        fn inversion_recovers_clear_image(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = Array3::from_shape_fn((3, 5, 4), |_| rng.random_range(0.0..1.0f32));
            let clear = ImageTensor::new(data).unwrap();
            // Depth capped so t = exp(-beta d) >= 0.1.
            let beta = rng.random_range(0.6..1.8f32);
            let dmax = -(0.1f32.ln()) / beta;
            let depth = depth_from(Array2::from_shape_fn((5, 4), |_| rng.random_range(0.0..dmax)));
            let a = [
                rng.random_range(0.7..1.0f32),
                rng.random_range(0.7..1.0f32),
                rng.random_range(0.7..1.0f32),
            ];
            let t = transmission_from_depth(&depth, beta).unwrap();
            let hazy = apply_scattering(&clear, &t, a).unwrap();
            let recovered = invert_scattering(&hazy, &t, a).unwrap();
            for (r, c) in recovered.data.iter().zip(clear.data.iter()) {
                prop_assert!((r - c).abs() < 1e-5, "recovered {} vs clear {}", r, c);
            }
        }
    }
}
