//! Image tensors and conversions between file space, metric space, and model space.
//!
//! Images live in `[0, 1]` as C×H×W single-precision arrays. The encoder
//! consumes channel-standardized inputs; the decoder emits Tanh-range values
//! in `[-1, 1]` that map back to `[0, 1]` via [`from_model_space`].

use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageReader, Luma, Rgb};
use ndarray::{Array3, Array4, Axis, NdFloat};

use crate::error::{Error, Result};

/// Channel statistics of the encoder's pretraining corpus (large-scale image
/// classification). Applied by [`to_model_space`] before the encoder.
pub const ENCODER_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const ENCODER_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// A floating-point image, channels × height × width, RGB values in `[0, 1]`.
/// Single-channel tensors hold depth maps scaled by their max representable
/// value at load time.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub data: Array3<f32>,
}

/// The convention a [`ModelSpaceTensor`] follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelSpace {
    /// Channel-standardized encoder input.
    EncoderInput,
    /// Tanh-range decoder output in `[-1, 1]`.
    TanhRange,
}

/// An image mapped into the network's working space.
#[derive(Debug, Clone)]
pub struct ModelSpaceTensor {
    pub data: Array3<f32>,
    pub space: ModelSpace,
}

impl ImageTensor {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if !(c == 1 || c == 3) || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch(format!(
                "expected 1 or 3 channels and positive H, W, got {c}x{h}x{w}"
            )));
        }
        Ok(Self { data })
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn is_rgb(&self) -> bool {
        self.channels() == 3
    }
}

/// Load an 8- or 16-bit PNG/JPEG as floats in `[0, 1]`.
///
/// RGB(A) sources become 3-channel tensors (alpha dropped); greyscale sources
/// become 1-channel tensors scaled by the max representable value of their
/// bit depth.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })?;
    decode_dynamic(path, img)
}

fn decode_dynamic(path: &Path, img: DynamicImage) -> Result<ImageTensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        DynamicImage::ImageLuma8(buf) => {
            luma_to_array(h, w, buf.as_raw().iter().map(|&v| v as f32 / 255.0))
        }
        DynamicImage::ImageLuma16(buf) => {
            luma_to_array(h, w, buf.as_raw().iter().map(|&v| v as f32 / 65535.0))
        }
        DynamicImage::ImageLumaA8(buf) => luma_to_array(
            h,
            w,
            buf.as_raw().chunks_exact(2).map(|p| p[0] as f32 / 255.0),
        ),
        DynamicImage::ImageLumaA16(buf) => luma_to_array(
            h,
            w,
            buf.as_raw().chunks_exact(2).map(|p| p[0] as f32 / 65535.0),
        ),
        DynamicImage::ImageRgb8(buf) => {
            rgb_to_array(h, w, buf.as_raw().chunks_exact(3), 255.0)
        }
        DynamicImage::ImageRgba8(buf) => {
            rgb_to_array(h, w, buf.as_raw().chunks_exact(4), 255.0)
        }
        DynamicImage::ImageRgb16(buf) => {
            rgb_to_array(h, w, buf.as_raw().chunks_exact(3), 65535.0)
        }
        DynamicImage::ImageRgba16(buf) => {
            rgb_to_array(h, w, buf.as_raw().chunks_exact(4), 65535.0)
        }
        other => {
            return Err(Error::UnsupportedImage {
                path: path.into(),
                detail: format!("unsupported pixel layout {:?}", other.color()),
            })
        }
    };
    ImageTensor::new(data)
}

fn luma_to_array(h: usize, w: usize, values: impl Iterator<Item = f32>) -> Array3<f32> {
    let mut data = Array3::zeros((1, h, w));
    for (i, v) in values.enumerate() {
        data[[0, i / w, i % w]] = v;
    }
    data
}

fn rgb_to_array<'a, P: Copy + Into<f32> + 'a>(
    h: usize,
    w: usize,
    pixels: impl Iterator<Item = &'a [P]> + 'a,
    scale: f32,
) -> Array3<f32> {
    let mut data = Array3::zeros((3, h, w));
    for (i, p) in pixels.enumerate() {
        let (y, x) = (i / w, i % w);
        for c in 0..3 {
            data[[c, y, x]] = p[c].into() / scale;
        }
    }
    data
}

/// Save an [`ImageTensor`] as an 8-bit PNG (values quantized from `[0, 1]`).
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if img.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinitePixels);
    }
    let (h, w) = (img.height() as u32, img.width() as u32);
    let quantize = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match img.channels() {
        3 => {
            let buf = ImageBuffer::from_fn(w, h, |x, y| {
                Rgb([
                    quantize(img.data[[0, y as usize, x as usize]]),
                    quantize(img.data[[1, y as usize, x as usize]]),
                    quantize(img.data[[2, y as usize, x as usize]]),
                ])
            });
            buf.save(path).map_err(|e| Error::Image {
                path: path.into(),
                source: e,
            })
        }
        _ => {
            let buf = ImageBuffer::from_fn(w, h, |x, y| {
                Luma([quantize(img.data[[0, y as usize, x as usize]])])
            });
            buf.save(path).map_err(|e| Error::Image {
                path: path.into(),
                source: e,
            })
        }
    }
}

/// Standardize an RGB image per channel: `out[c] = (img[c] - mean[c]) / std[c]`.
pub fn to_model_space(img: &ImageTensor, mean: [f32; 3], std: [f32; 3]) -> Result<ModelSpaceTensor> {
    if !img.is_rgb() {
        return Err(Error::ShapeMismatch("expected an RGB image".into()));
    }
    if std.iter().any(|&s| s <= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "std components must be positive, got {std:?}"
        )));
    }
    let mut data = img.data.clone();
    for (c, mut plane) in data.axis_iter_mut(Axis(0)).enumerate() {
        plane.mapv_inplace(|v| (v - mean[c]) / std[c]);
    }
    Ok(ModelSpaceTensor {
        data,
        space: ModelSpace::EncoderInput,
    })
}

/// Map a Tanh-range tensor back to a `[0, 1]` image: `(t + 1) / 2`, clamped.
pub fn from_model_space(t: &ModelSpaceTensor) -> Result<ImageTensor> {
    if t.space != ModelSpace::TanhRange {
        return Err(Error::InvalidArgument(
            "from_model_space expects a tanh-range tensor".into(),
        ));
    }
    let data = t.data.mapv(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0));
    ImageTensor::new(data)
}

/// Stack images into an N×C×H×W batch of the requested float type.
pub fn batch_from_images<T: NdFloat>(images: &[&ImageTensor]) -> Result<Array4<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (c, h, w) = first.data.dim();
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (n, img) in images.iter().enumerate() {
        if img.data.dim() != (c, h, w) {
            return Err(Error::ShapeMismatch(format!(
                "batch image {n} is {:?}, expected {:?}",
                img.data.dim(),
                (c, h, w)
            )));
        }
        out.index_axis_mut(Axis(0), n)
            .assign(&img.data.mapv(|v| T::from(v).unwrap()));
    }
    Ok(out)
}

/// Per-channel standardization on an N×3×H×W batch (encoder preprocessing).
pub fn batch_to_model_space<T: NdFloat>(batch: &Array4<T>) -> Array4<T> {
    let mut out = batch.clone();
    for n in 0..out.dim().0 {
        for c in 0..3 {
            let mean = T::from(ENCODER_MEAN[c]).unwrap();
            let std = T::from(ENCODER_STD[c]).unwrap();
            out.index_axis_mut(Axis(0), n)
                .index_axis_mut(Axis(0), c)
                .mapv_inplace(|v| (v - mean) / std);
        }
    }
    out
}

/// Map a Tanh-range batch to `[0, 1]`.
pub fn batch_from_tanh<T: NdFloat>(batch: &Array4<T>) -> Array4<T> {
    let half = T::from(0.5).unwrap();
    let one = T::one();
    let zero = T::zero();
    batch.mapv(|v| ((v + one) * half).max(zero).min(one))
}

/// Place RGB images of equal height side by side with a white gap between
/// them (montage rendering).
pub fn hstack_images(images: &[&ImageTensor], gap: usize) -> Result<ImageTensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty montage".into()))?;
    let h = first.height();
    if images.iter().any(|i| i.height() != h || !i.is_rgb()) {
        return Err(Error::ShapeMismatch(
            "montage inputs must be RGB with equal heights".into(),
        ));
    }
    let total_w: usize =
        images.iter().map(|i| i.width()).sum::<usize>() + gap * (images.len() - 1);
    let mut out = Array3::from_elem((3, h, total_w), 1.0f32);
    let mut x0 = 0;
    for img in images {
        let w = img.width();
        out.slice_mut(ndarray::s![.., .., x0..x0 + w]).assign(&img.data);
        x0 += w + gap;
    }
    ImageTensor::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use tempfile::tempdir;

    fn gradient_image(c: usize, h: usize, w: usize) -> ImageTensor {
        let data = Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
            ((ch * 31 + y * 7 + x * 3) % 256) as f32 / 255.0
        });
        ImageTensor::new(data).unwrap()
    }

    #[test]
    fn save_load_roundtrip_within_quantization() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = gradient_image(3, 9, 13);
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.data.dim(), img.data.dim());
        for (a, b) in img.data.iter().zip(back.data.iter()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn all_zero_image_roundtrips_to_zero() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("zero.png");
        let img = ImageTensor::new(Array3::zeros((3, 4, 4))).unwrap();
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert!(back.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sixteen_bit_depth_png_scales_to_unit_max() {
        // Oracle: write a 16-bit greyscale PNG through the `image` crate
        // directly, so the decode path is checked against its encoder.
        let dir = tempdir().unwrap();
        let path = dir.path().join("depth.png");
        let buf = ImageBuffer::<Luma<u16>, Vec<u16>>::from_fn(4, 3, |x, y| {
            if (x, y) == (0, 0) {
                Luma([65535u16])
            } else {
                Luma([(x * 1000 + y * 200) as u16])
            }
        });
        buf.save(&path).unwrap();
        let depth = load_image(&path).unwrap();
        assert_eq!(depth.channels(), 1);
        let max = depth.data.iter().cloned().fold(0.0f32, f32::max);
        assert!((max - 1.0).abs() < 1e-6);
        assert!((depth.data[[0, 1, 2]] - 2200.0 / 65535.0).abs() < 1e-6);
    }

    #[test]
    fn save_rejects_nan() {
        let dir = tempdir().unwrap();
        let mut img = gradient_image(3, 4, 4);
        img.data[[0, 0, 0]] = f32::NAN;
        assert!(matches!(
            save_image(&img, dir.path().join("nan.png")),
            Err(Error::NonFinitePixels)
        ));
    }

    #[test]
    fn load_missing_file_fails() {
        assert!(load_image("/nonexistent/definitely_missing.png").is_err());
    }

    #[test]
    fn to_model_space_centering_and_identity() {
        let mut img = gradient_image(3, 2, 2);
        img.data[[1, 0, 0]] = ENCODER_MEAN[1];
        let t = to_model_space(&img, ENCODER_MEAN, ENCODER_STD).unwrap();
        assert!(t.data[[1, 0, 0]].abs() < 1e-7);

        let id = to_model_space(&img, [0.0; 3], [1.0; 3]).unwrap();
        assert_eq!(id.data, img.data);
    }

    #[test]
    fn to_model_space_matches_hand_arithmetic() {
        let mut img = gradient_image(3, 1, 1);
        img.data[[0, 0, 0]] = 0.7;
        let t = to_model_space(&img, ENCODER_MEAN, ENCODER_STD).unwrap();
        // (0.7 - 0.485) / 0.229
        assert!((t.data[[0, 0, 0]] - 0.938_864_6).abs() < 1e-5);
    }

    #[test]
    fn to_model_space_rejects_zero_std() {
        let img = gradient_image(3, 2, 2);
        assert!(to_model_space(&img, ENCODER_MEAN, [0.229, 0.0, 0.225]).is_err());
    }

    #[test]
    fn from_model_space_endpoints() {
        let mk = |v: f32| ModelSpaceTensor {
            data: Array3::from_elem((3, 1, 1), v),
            space: ModelSpace::TanhRange,
        };
        assert_eq!(from_model_space(&mk(-1.0)).unwrap().data[[0, 0, 0]], 0.0);
        assert_eq!(from_model_space(&mk(0.0)).unwrap().data[[0, 0, 0]], 0.5);
        assert_eq!(from_model_space(&mk(1.0)).unwrap().data[[0, 0, 0]], 1.0);
    }

    #[test]
    fn from_model_space_inverts_affine_map() {
        // from_model_space(2x - 1) should be the identity on [0, 1].
        let img = gradient_image(3, 5, 5);
        let t = ModelSpaceTensor {
            data: img.data.mapv(|v| 2.0 * v - 1.0),
            space: ModelSpace::TanhRange,
        };
        let back = from_model_space(&t).unwrap();
        for (a, b) in img.data.iter().zip(back.data.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn to_model_space_is_affine_per_channel() {
        let a = gradient_image(3, 4, 4);
        let mut b = gradient_image(3, 4, 4);
        b.data.mapv_inplace(|v| (v * 0.4 + 0.21).min(1.0));
        let ta = to_model_space(&a, ENCODER_MEAN, ENCODER_STD).unwrap();
        let tb = to_model_space(&b, ENCODER_MEAN, ENCODER_STD).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let lhs = ta.data[[c, y, x]] - tb.data[[c, y, x]];
                    let rhs = (a.data[[c, y, x]] - b.data[[c, y, x]]) / ENCODER_STD[c];
                    assert!((lhs - rhs).abs() < 1e-5);
                }
            }
        }
    }
}
