//! Dataset ingestion and synthesis: paired hazy/clear directory trees,
//! clear+depth synthesis via the scattering model, and a procedural toy
//! dataset for desk-scale runs.
//!
//! Directory conventions: `hazy/` and `clear/` subdirectories with matching
//! stems. Synthetic-benchmark naming, where one clear image serves several
//! hazy variants (`stem_<beta>_<A>.png`), is resolved by matching the hazy
//! stem's prefix before the first underscore. Synthesis inputs use `clear/`
//! plus `depth/`; outputs are a `hazy/` tree and a JSON manifest recording
//! the per-image `(A, beta, seed)`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::haze::{self, DepthMap, HazeRanges};
use crate::image_io::{self, ImageTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Training-time cropping/augmentation. `crop: None` uses whole images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropPolicy {
    pub crop: Option<usize>,
    pub hflip: bool,
}

impl Default for CropPolicy {
    fn default() -> Self {
        Self {
            crop: None,
            hflip: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPaths {
    pub stem: String,
    pub hazy: PathBuf,
    pub clear: PathBuf,
}

/// Files excluded during pairing.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct UnmatchedReport {
    pub hazy_without_clear: Vec<String>,
    pub clear_without_hazy: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct PairedDataset {
    pub pairs: Vec<PairPaths>,
    pub split: Split,
    pub policy: CropPolicy,
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let Some(ext) = path.extension().and_then(|e| e.to_str()) else {
            continue;
        };
        if !IMAGE_EXTENSIONS.contains(&ext.to_ascii_lowercase().as_str()) {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        out.push((stem, path));
    }
    out.sort();
    Ok(out)
}

fn dimensions_of(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })?;
    Ok((h as usize, w as usize))
}

/// Scan `root/hazy` and `root/clear`, pairing by exact stem or by the hazy
/// stem's prefix before its first underscore. Pairs are ordered
/// lexicographically by hazy stem; unmatched files are reported, not fatal.
pub fn load_paired_dataset(
    root: impl AsRef<Path>,
    split: Split,
    policy: CropPolicy,
) -> Result<(PairedDataset, UnmatchedReport)> {
    let root = root.as_ref();
    let hazy = list_images(&root.join("hazy"))?;
    let clear = list_images(&root.join("clear"))?;
    let clear_by_stem: BTreeMap<&str, &PathBuf> =
        clear.iter().map(|(s, p)| (s.as_str(), p)).collect();

    let mut pairs = Vec::new();
    let mut report = UnmatchedReport::default();
    let mut used_clear: std::collections::BTreeSet<&str> = Default::default();

    for (stem, path) in &hazy {
        let direct = clear_by_stem.get(stem.as_str()).map(|p| (stem.as_str(), *p));
        let by_prefix = || {
            let prefix = stem.split('_').next().unwrap_or(stem.as_str());
            clear_by_stem.get(prefix).map(|p| (prefix, *p))
        };
        match direct.or_else(by_prefix) {
            Some((clear_stem, clear_path)) => {
                let hd = dimensions_of(path)?;
                let cd = dimensions_of(clear_path)?;
                if hd != cd {
                    return Err(Error::PairDimensionMismatch {
                        stem: stem.clone(),
                        hazy: hd,
                        clear: cd,
                    });
                }
                used_clear.insert(clear_stem);
                pairs.push(PairPaths {
                    stem: stem.clone(),
                    hazy: path.clone(),
                    clear: clear_path.clone(),
                });
            }
            None => report.hazy_without_clear.push(stem.clone()),
        }
    }
    for (stem, _) in &clear {
        if !used_clear.contains(stem.as_str()) {
            report.clear_without_hazy.push(stem.clone());
        }
    }

    if pairs.is_empty() {
        return Err(Error::EmptyDataset { root: root.into() });
    }
    Ok((
        PairedDataset {
            pairs,
            split,
            policy,
        },
        report,
    ))
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn with_policy(mut self, policy: CropPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn load_pair(&self, index: usize) -> Result<(ImageTensor, ImageTensor)> {
        let pair = &self.pairs[index];
        let hazy = image_io::load_image(&pair.hazy)?;
        let clear = image_io::load_image(&pair.clear)?;
        Ok((hazy, clear))
    }

    /// Batch index lists for one epoch: a seed+epoch-keyed shuffle, chunked.
    /// With `drop_last`, a trailing partial batch is discarded.
    pub fn epoch_batches(
        &self,
        seed: u64,
        epoch: usize,
        batch_size: usize,
        drop_last: bool,
    ) -> Vec<Vec<usize>> {
        let mut indices: Vec<usize> = (0..self.pairs.len()).collect();
        let mut rng = stream_rng(seed, STREAM_SHUFFLE, epoch as u64, 0);
        indices.shuffle(&mut rng);
        let mut batches: Vec<Vec<usize>> = indices
            .chunks(batch_size)
            .map(|chunk| chunk.to_vec())
            .collect();
        if drop_last {
            batches.retain(|b| b.len() == batch_size);
        }
        batches
    }

    /// Load a batch as N×3×H×W arrays (hazy, clear), applying the crop
    /// policy. Crops and flips are deterministic functions of
    /// `(seed, epoch, pair index)`, so prefetching cannot reorder them.
    pub fn load_batch(
        &self,
        indices: &[usize],
        seed: u64,
        epoch: usize,
    ) -> Result<(Array4<f32>, Array4<f32>)> {
        let mut hazy_images = Vec::with_capacity(indices.len());
        let mut clear_images = Vec::with_capacity(indices.len());
        for &i in indices {
            let (mut hazy, mut clear) = self.load_pair(i)?;
            let mut rng = stream_rng(seed, STREAM_CROP, epoch as u64, i as u64);
            if let Some(crop) = self.policy.crop {
                let (_, h, w) = hazy.data.dim();
                if crop <= h.min(w) {
                    let y = rng.random_range(0..=h - crop);
                    let x = rng.random_range(0..=w - crop);
                    hazy = crop_image(&hazy, y, x, crop);
                    clear = crop_image(&clear, y, x, crop);
                }
            }
            if self.policy.hflip && rng.random_bool(0.5) {
                hazy = flip_horizontal(&hazy);
                clear = flip_horizontal(&clear);
            }
            hazy_images.push(hazy);
            clear_images.push(clear);
        }
        let hazy_refs: Vec<&ImageTensor> = hazy_images.iter().collect();
        let clear_refs: Vec<&ImageTensor> = clear_images.iter().collect();
        Ok((
            image_io::batch_from_images(&hazy_refs)?,
            image_io::batch_from_images(&clear_refs)?,
        ))
    }
}

fn crop_image(img: &ImageTensor, y: usize, x: usize, size: usize) -> ImageTensor {
    let data = img
        .data
        .slice(ndarray::s![.., y..y + size, x..x + size])
        .to_owned();
    ImageTensor::new(data).expect("crop keeps validity")
}

fn flip_horizontal(img: &ImageTensor) -> ImageTensor {
    let (c, h, w) = img.data.dim();
    let mut out = Array3::zeros((c, h, w));
    for ci in 0..c {
        for yi in 0..h {
            for xi in 0..w {
                out[[ci, yi, xi]] = img.data[[ci, yi, w - 1 - xi]];
            }
        }
    }
    ImageTensor::new(out).expect("flip keeps validity")
}

// Disjoint RNG streams derived from one user seed.
const STREAM_SHUFFLE: u64 = 0x5346;
const STREAM_CROP: u64 = 0x4352;
const STREAM_SYNTH: u64 = 0x5359;
const STREAM_TOY: u64 = 0x544f;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn stream_rng(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mixed = splitmix64(seed ^ splitmix64(tag ^ splitmix64(a ^ splitmix64(b))));
    ChaCha8Rng::seed_from_u64(mixed)
}

/// How raw depth values map into the transmission exponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthMode {
    /// Scale each depth map so its maximum is 1 before applying beta.
    NormalizedMax,
    /// Use stored depth values as-is.
    Raw,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthImageRecord {
    pub atmospheric_light: [f32; 3],
    pub beta: f32,
    pub seed: u64,
}

/// Per-run synthesis record; serializes deterministically (sorted stems).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthManifest {
    pub format: String,
    pub seed: u64,
    pub ranges: HazeRanges,
    pub depth_mode: DepthMode,
    pub images: BTreeMap<String, SynthImageRecord>,
}

pub const MANIFEST_FORMAT: &str = "dehaze-synth-manifest-v1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Synthesize hazy images for every `clear/`+`depth/` stem pair under
/// `input_root`, writing `hazy/`, `clear/` (copied when the roots differ),
/// and a manifest under `out_root`. One `(A, beta)` pair is drawn per image
/// from a per-image seed, so results do not depend on traversal order.
pub fn synthesize_dataset(
    input_root: impl AsRef<Path>,
    out_root: impl AsRef<Path>,
    seed: u64,
    ranges: &HazeRanges,
    depth_mode: DepthMode,
) -> Result<PairedDataset> {
    ranges.validate()?;
    let input_root = input_root.as_ref();
    let out_root = out_root.as_ref();
    let clear_images = list_images(&input_root.join("clear"))?;
    if clear_images.is_empty() {
        return Err(Error::EmptyDataset {
            root: input_root.into(),
        });
    }

    let hazy_dir = out_root.join("hazy");
    let clear_dir = out_root.join("clear");
    fs::create_dir_all(&hazy_dir).map_err(|e| Error::io(&hazy_dir, e))?;
    fs::create_dir_all(&clear_dir).map_err(|e| Error::io(&clear_dir, e))?;

    let mut manifest = SynthManifest {
        format: MANIFEST_FORMAT.into(),
        seed,
        ranges: ranges.clone(),
        depth_mode,
        images: BTreeMap::new(),
    };
    let mut pairs = Vec::new();

    for (i, (stem, clear_path)) in clear_images.iter().enumerate() {
        let depth_path = find_depth(input_root, stem).ok_or_else(|| Error::MissingDepth {
            stem: stem.clone(),
        })?;
        let clear = image_io::load_image(clear_path)?;
        if !clear.is_rgb() {
            return Err(Error::ShapeMismatch(format!(
                "clear image {stem} must be RGB"
            )));
        }
        let depth_img = image_io::load_image(&depth_path)?;
        let mut depth = DepthMap::from_image(&depth_img)?;
        if depth_mode == DepthMode::NormalizedMax {
            depth = depth.normalized_to_unit_max();
        }
        if depth.data.dim() != (clear.height(), clear.width()) {
            return Err(Error::PairDimensionMismatch {
                stem: stem.clone(),
                hazy: depth.data.dim(),
                clear: (clear.height(), clear.width()),
            });
        }

        let image_seed = splitmix64(seed ^ splitmix64(STREAM_SYNTH ^ i as u64));
        let params = haze::sample_haze_params(image_seed, ranges)?;
        let t = haze::transmission_from_depth(&depth, params.beta)?;
        let hazy = haze::apply_scattering(&clear, &t, params.atmospheric_light)?;

        let hazy_path = hazy_dir.join(format!("{stem}.png"));
        image_io::save_image(&hazy, &hazy_path)?;
        let clear_out = clear_dir.join(format!("{stem}.png"));
        if clear_out != *clear_path {
            image_io::save_image(&clear, &clear_out)?;
        }

        manifest.images.insert(
            stem.clone(),
            SynthImageRecord {
                atmospheric_light: params.atmospheric_light,
                beta: params.beta,
                seed: image_seed,
            },
        );
        pairs.push(PairPaths {
            stem: stem.clone(),
            hazy: hazy_path,
            clear: clear_out,
        });
    }

    let manifest_path = out_root.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;

    Ok(PairedDataset {
        pairs,
        split: Split::Train,
        policy: CropPolicy::default(),
    })
}

fn find_depth(root: &Path, stem: &str) -> Option<PathBuf> {
    for ext in IMAGE_EXTENSIONS {
        let p = root.join("depth").join(format!("{stem}.{ext}"));
        if p.exists() {
            return Some(p);
        }
    }
    None
}

/// Procedural clear scenes (background gradient plus solid rectangles, each
/// with its own depth), synthesized into hazy/clear pairs under `out_root`.
pub fn make_toy_dataset(
    out_root: impl AsRef<Path>,
    seed: u64,
    n_images: usize,
    size: usize,
) -> Result<PairedDataset> {
    if n_images == 0 {
        return Err(Error::InvalidArgument("need at least one image".into()));
    }
    if size == 0 || size % 8 != 0 {
        return Err(Error::InvalidArgument(format!(
            "size must be a positive multiple of 8, got {size}"
        )));
    }
    let out_root = out_root.as_ref();
    let clear_dir = out_root.join("clear");
    let depth_dir = out_root.join("depth");
    fs::create_dir_all(&clear_dir).map_err(|e| Error::io(&clear_dir, e))?;
    fs::create_dir_all(&depth_dir).map_err(|e| Error::io(&depth_dir, e))?;

    for i in 0..n_images {
        let mut rng = stream_rng(seed, STREAM_TOY, i as u64, 0);
        let (clear, depth) = render_toy_scene(&mut rng, size);
        let stem = format!("toy{i:03}");
        image_io::save_image(&clear, clear_dir.join(format!("{stem}.png")))?;
        image_io::save_image(&depth, depth_dir.join(format!("{stem}.png")))?;
    }

    synthesize_dataset(
        out_root,
        out_root,
        seed,
        &HazeRanges::default(),
        DepthMode::NormalizedMax,
    )
}

/// One scene: a two-color gradient background at depth 1 and several
/// drawn far-to-near, each at its own depth.
fn render_toy_scene(rng: &mut ChaCha8Rng, size: usize) -> (ImageTensor, ImageTensor) {
    let mut color = Array3::zeros((3, size, size));
    let mut depth = Array3::zeros((1, size, size));

    let top: [f32; 3] = [rng.random(), rng.random(), rng.random()];
    let bottom: [f32; 3] = [rng.random(), rng.random(), rng.random()];
    for y in 0..size {
        let ty = y as f32 / (size - 1) as f32;
        for x in 0..size {
            for c in 0..3 {
                color[[c, y, x]] = top[c] * (1.0 - ty) + bottom[c] * ty;
            }
            depth[[0, y, x]] = 1.0;
        }
    }

    let n_shapes = rng.random_range(3..=7);
    let mut shapes: Vec<(usize, usize, usize, usize, [f32; 3], f32)> = (0..n_shapes)
        .map(|_| {
            let w = rng.random_range(size / 8..=size / 2);
            let h = rng.random_range(size / 8..=size / 2);
            let x0 = rng.random_range(0..size - w);
            let y0 = rng.random_range(0..size - h);
            let col = [rng.random(), rng.random(), rng.random()];
            let d = rng.random_range(0.1..0.85f32);
            (x0, y0, w, h, col, d)
        })
        .collect();
    // Far shapes first, so nearer ones occlude them in both color and depth.
    shapes.sort_by(|a, b| b.5.partial_cmp(&a.5).expect("depths are finite"));

    for (x0, y0, w, h, col, d) in shapes {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                for c in 0..3 {
                    color[[c, y, x]] = col[c];
                }
                depth[[0, y, x]] = d;
            }
        }
    }

    (
        ImageTensor::new(color).expect("valid scene"),
        ImageTensor::new(depth).expect("valid depth"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write_png(path: &Path, value: f32, h: usize, w: usize) {
        let img = ImageTensor::new(Array3::from_elem((3, h, w), value)).unwrap();
        image_io::save_image(&img, path).unwrap();
    }

    #[test]
    fn pairing_counts_and_order() {
        let dir = tempdir().unwrap();
        fs::create_dir_all(dir.path().join("hazy")).unwrap();
        fs::create_dir_all(dir.path().join("clear")).unwrap();
        for stem in ["a", "b", "c"] {
            write_png(&dir.path().join(format!("hazy/{stem}.png")), 0.5, 8, 8);
            write_png(&dir.path().join(format!("clear/{stem}.png")), 0.2, 8, 8);
        }
        let (ds, report) =
            load_paired_dataset(dir.path(), Split::Train, CropPolicy::default()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(
            ds.pairs.iter().map(|p| p.stem.as_str()).collect::<Vec<_>>(),
            vec!["a", "b", "c"]
        );
        assert!(report.hazy_without_clear.is_empty());
        assert!(report.clear_without_hazy.is_empty());
    }

    #[test]
    fn unmatched_hazy_is_reported_and_excluded() {
        let dir = tempdir().unwrap();
        fs::create_dir_all(dir.path().join("hazy")).unwrap();
        fs::create_dir_all(dir.path().join("clear")).unwrap();
        write_png(&dir.path().join("hazy/a.png"), 0.5, 8, 8);
        write_png(&dir.path().join("hazy/orphan.png"), 0.5, 8, 8);
        write_png(&dir.path().join("clear/a.png"), 0.2, 8, 8);
        write_png(&dir.path().join("clear/lonely.png"), 0.2, 8, 8);
        let (ds, report) =
            load_paired_dataset(dir.path(), Split::Train, CropPolicy::default()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(report.hazy_without_clear, vec!["orphan".to_string()]);
        assert_eq!(report.clear_without_hazy, vec!["lonely".to_string()]);
    }

    #[test]
    fn multi_hazy_variants_share_one_clear_image() {
        let dir = tempdir().unwrap();
        fs::create_dir_all(dir.path().join("hazy")).unwrap();
        fs::create_dir_all(dir.path().join("clear")).unwrap();
        // Benchmark-style naming: stem_beta_A.png variants of clear stem.png.
        for name in ["0001_0.8_0.2", "0001_1_0.9", "0002_1.2_0.75"] {
            write_png(&dir.path().join(format!("hazy/{name}.png")), 0.6, 8, 8);
        }
        write_png(&dir.path().join("clear/0001.png"), 0.3, 8, 8);
        write_png(&dir.path().join("clear/0002.png"), 0.4, 8, 8);
        let (ds, report) =
            load_paired_dataset(dir.path(), Split::Train, CropPolicy::default()).unwrap();
        assert_eq!(ds.len(), 3);
        let clears: Vec<&str> = ds
            .pairs
            .iter()
            .map(|p| p.clear.file_stem().unwrap().to_str().unwrap())
            .collect();
        assert_eq!(clears, vec!["0001", "0001", "0002"]);
        assert!(report.hazy_without_clear.is_empty());
    }

    #[test]
    fn dimension_mismatch_fails() {
        let dir = tempdir().unwrap();
        fs::create_dir_all(dir.path().join("hazy")).unwrap();
        fs::create_dir_all(dir.path().join("clear")).unwrap();
        write_png(&dir.path().join("hazy/a.png"), 0.5, 8, 8);
        write_png(&dir.path().join("clear/a.png"), 0.2, 8, 10);
        assert!(matches!(
            load_paired_dataset(dir.path(), Split::Train, CropPolicy::default()),
            Err(Error::PairDimensionMismatch { .. })
        ));
    }

    #[test]
    fn empty_dataset_fails() {
        let dir = tempdir().unwrap();
        fs::create_dir_all(dir.path().join("hazy")).unwrap();
        fs::create_dir_all(dir.path().join("clear")).unwrap();
        assert!(matches!(
            load_paired_dataset(dir.path(), Split::Train, CropPolicy::default()),
            Err(Error::EmptyDataset { .. })
        ));
    }

    #[test]
    fn toy_dataset_is_deterministic_and_well_formed() {
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        let ds1 = make_toy_dataset(d1.path(), 1, 8, 64).unwrap();
        let ds2 = make_toy_dataset(d2.path(), 1, 8, 64).unwrap();
        assert_eq!(ds1.len(), 8);

        for (p1, p2) in ds1.pairs.iter().zip(ds2.pairs.iter()) {
            let b1 = fs::read(&p1.hazy).unwrap();
            let b2 = fs::read(&p2.hazy).unwrap();
            assert_eq!(b1, b2, "hazy bytes differ for {}", p1.stem);
        }
        let m1 = fs::read(d1.path().join(MANIFEST_FILE)).unwrap();
        let m2 = fs::read(d2.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(m1, m2, "manifests must be byte-identical");

        let (hazy, clear) = ds1.load_pair(0).unwrap();
        assert_eq!(hazy.data.dim(), (3, 64, 64));
        assert_eq!(clear.data.dim(), (3, 64, 64));

        let d3 = tempdir().unwrap();
        let other = make_toy_dataset(d3.path(), 2, 8, 64).unwrap();
        let b1 = fs::read(&ds1.pairs[0].hazy).unwrap();
        let b3 = fs::read(&other.pairs[0].hazy).unwrap();
        assert_ne!(b1, b3, "different seeds must differ");
    }

    #[test]
    fn toy_hazy_pixels_lie_between_clear_and_atmospheric_light() {
        let dir = tempdir().unwrap();
        let ds = make_toy_dataset(dir.path(), 3, 4, 32).unwrap();
        let manifest: SynthManifest =
            serde_json::from_slice(&fs::read(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        let q = 1.0 / 255.0 + 1e-6;
        for pair in &ds.pairs {
            let idx = ds.pairs.iter().position(|p| p.stem == pair.stem).unwrap();
            let (hazy, clear) = ds.load_pair(idx).unwrap();
            let rec = &manifest.images[&pair.stem];
            for c in 0..3 {
                let a = rec.atmospheric_light[c];
                for (h, j) in hazy
                    .data
                    .index_axis(Axis(0), c)
                    .iter()
                    .zip(clear.data.index_axis(Axis(0), c).iter())
                {
                    let lo = j.min(a) - q;
                    let hi = j.max(a) + q;
                    assert!(*h >= lo && *h <= hi, "pixel {h} outside [{lo}, {hi}]");
                }
            }
        }
    }

    #[test]
    fn zero_depth_synthesis_reproduces_clear() {
        let dir = tempdir().unwrap();
        let out = tempdir().unwrap();
        fs::create_dir_all(dir.path().join("clear")).unwrap();
        fs::create_dir_all(dir.path().join("depth")).unwrap();
        write_png(&dir.path().join("clear/z.png"), 0.37, 16, 16);
        let depth = ImageTensor::new(Array3::zeros((1, 16, 16))).unwrap();
        image_io::save_image(&depth, dir.path().join("depth/z.png")).unwrap();

        let ds = synthesize_dataset(
            dir.path(),
            out.path(),
            7,
            &HazeRanges::default(),
            DepthMode::NormalizedMax,
        )
        .unwrap();
        let (hazy, clear) = ds.load_pair(0).unwrap();
        for (h, c) in hazy.data.iter().zip(clear.data.iter()) {
            assert!((h - c).abs() <= 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn missing_depth_is_an_error() {
        let dir = tempdir().unwrap();
        fs::create_dir_all(dir.path().join("clear")).unwrap();
        fs::create_dir_all(dir.path().join("depth")).unwrap();
        write_png(&dir.path().join("clear/q.png"), 0.5, 16, 16);
        assert!(matches!(
            synthesize_dataset(
                dir.path(),
                tempdir().unwrap().path(),
                1,
                &HazeRanges::default(),
                DepthMode::NormalizedMax
            ),
            Err(Error::MissingDepth { .. })
        ));
    }

    #[test]
    fn forced_beta_far_pixel_matches_transmission_formula() {
        // beta pinned to ~1.8 via a degenerate range; the farthest pixel has
        // normalized depth 1, so I = exp(-1.8) J + (1 - exp(-1.8)) A.
        let dir = tempdir().unwrap();
        let out = tempdir().unwrap();
        fs::create_dir_all(dir.path().join("clear")).unwrap();
        fs::create_dir_all(dir.path().join("depth")).unwrap();
        write_png(&dir.path().join("clear/f.png"), 0.2, 16, 16);
        let mut d = Array3::zeros((1, 16, 16));
        d[[0, 0, 0]] = 1.0;
        d[[0, 8, 8]] = 0.5;
        image_io::save_image(
            &ImageTensor::new(d).unwrap(),
            dir.path().join("depth/f.png"),
        )
        .unwrap();

        let mut ranges = HazeRanges::default();
        ranges.beta = (1.799_999, 1.800_001);
        let ds = synthesize_dataset(dir.path(), out.path(), 11, &ranges, DepthMode::NormalizedMax)
            .unwrap();
        let manifest: SynthManifest =
            serde_json::from_slice(&fs::read(out.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        let rec = &manifest.images["f"];
        let (hazy, clear) = ds.load_pair(0).unwrap();
        let t = (-1.8f64).exp() as f32;
        for c in 0..3 {
            let expected = clear.data[[c, 0, 0]] * t + rec.atmospheric_light[c] * (1.0 - t);
            let got = hazy.data[[c, 0, 0]];
            assert!(
                (got - expected).abs() <= 1.0 / 255.0 + 1e-4,
                "channel {c}: {got} vs {expected}"
            );
        }
    }

    #[test]
    fn epoch_batches_partition_dataset() {
        let dir = tempdir().unwrap();
        let ds = make_toy_dataset(dir.path(), 5, 10, 16).unwrap();
        // Without drop_last every index appears exactly once.
        let batches = ds.epoch_batches(3, 0, 4, false);
        let mut seen: Vec<usize> = batches.iter().flatten().cloned().collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        // With drop_last only full batches remain.
        let batches = ds.epoch_batches(3, 0, 4, true);
        assert_eq!(batches.len(), 2);
        assert!(batches.iter().all(|b| b.len() == 4));
        // Same seed+epoch, same order; later epochs reshuffle.
        assert_eq!(ds.epoch_batches(3, 0, 4, true), ds.epoch_batches(3, 0, 4, true));
        assert_ne!(ds.epoch_batches(3, 0, 4, true), ds.epoch_batches(3, 1, 4, true));
    }

    #[test]
    fn crop_policy_produces_requested_sizes() {
        let dir = tempdir().unwrap();
        let ds = make_toy_dataset(dir.path(), 9, 4, 64)
            .unwrap()
            .with_policy(CropPolicy {
                crop: Some(32),
                hflip: false,
            });
        let (hazy, clear) = ds.load_batch(&[0, 1], 1, 0).unwrap();
        assert_eq!(hazy.dim(), (2, 3, 32, 32));
        assert_eq!(clear.dim(), (2, 3, 32, 32));
        // Crops are aligned between hazy and clear: check that the hazy crop
        // still lies between clear and A (convexity survives cropping).
        let (h2, _) = ds.load_batch(&[0, 1], 1, 0).unwrap();
        assert_eq!(hazy, h2, "same seed/epoch/index crops identically");
    }
}
