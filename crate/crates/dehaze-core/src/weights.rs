//! Weight archives: the on-disk tensor container used for checkpoints and
//! converted pretrained encoders, plus fetching and verification.
//!
//! # Archive format
//!
//! ```text
//! [u64 LE header length][header JSON][tensor blob]
//! ```
//!
//! The header carries `format`, a `tensors` index mapping each name to
//! `{shape, offset, nbytes}` (offsets relative to the blob), free-form
//! `meta`, and optionally the full model config (checkpoints). Tensor data is
//! raw little-endian `f32` in row-major order. Conversion into and out of the
//! archive is lossless at the bit level.
//!
//! # Pretrained encoders
//!
//! [`fetch_pretrained`] downloads a safetensors file (the common container
//! for published VGG weights), verifies its SHA-256 digest, caches it, and
//! converts the `features.N.*` tensors into the encoder names used here.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::{Array1, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::{hex_string, LayerSpec, ModelConfig};

pub const ARCHIVE_FORMAT: &str = "dehaze-archive-v1";

/// A tensor's shape and row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorData {
    pub fn to_dyn_array(&self) -> Result<ArrayD<f32>> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data.clone()).map_err(|_| {
            Error::MalformedArchive(format!(
                "tensor data length {} does not match shape {:?}",
                self.data.len(),
                self.shape
            ))
        })
    }

    pub fn to_array1(&self) -> Result<Array1<f32>> {
        if self.shape.len() != 1 {
            return Err(Error::MalformedArchive(format!(
                "expected rank-1 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(Array1::from_vec(self.data.clone()))
    }
}

/// Named tensors plus provenance metadata; optionally a model config when
/// the archive is a checkpoint.
#[derive(Debug, Clone)]
pub struct WeightArchive {
    pub tensors: BTreeMap<String, TensorData>,
    pub meta: serde_json::Value,
    pub config: Option<ModelConfig>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Serialize, Deserialize)]
struct ArchiveHeader {
    format: String,
    tensors: BTreeMap<String, TensorEntry>,
    meta: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<ModelConfig>,
}

impl WeightArchive {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            tensors: BTreeMap::new(),
            meta,
            config: None,
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&TensorData> {
        self.tensors.get(name).ok_or_else(|| Error::MissingTensor {
            name: name.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut index = BTreeMap::new();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let nbytes = (t.data.len() * 4) as u64;
            index.insert(
                name.clone(),
                TensorEntry {
                    shape: t.shape.clone(),
                    offset,
                    nbytes,
                },
            );
            offset += nbytes;
        }
        let header = ArchiveHeader {
            format: ARCHIVE_FORMAT.to_string(),
            tensors: index,
            meta: self.meta.clone(),
            config: self.config.clone(),
        };
        let header_json = serde_json::to_vec(&header)?;

        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&(header_json.len() as u64).to_le_bytes())
            .and_then(|_| file.write_all(&header_json))
            .map_err(|e| Error::io(path, e))?;
        let mut buf = Vec::with_capacity(1 << 16);
        for t in self.tensors.values() {
            buf.clear();
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            file.write_all(&buf).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)
            .map_err(|e| Error::io(path, e))?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        if header_len > 1 << 30 {
            return Err(Error::MalformedArchive(format!(
                "implausible header length {header_len}"
            )));
        }
        let mut header_json = vec![0u8; header_len];
        file.read_exact(&mut header_json)
            .map_err(|e| Error::io(path, e))?;
        let header: ArchiveHeader = serde_json::from_slice(&header_json)?;
        if header.format != ARCHIVE_FORMAT {
            return Err(Error::MalformedArchive(format!(
                "unknown archive format {:?}",
                header.format
            )));
        }
        let blob_start = 8 + header_len as u64;
        let mut tensors = BTreeMap::new();
        for (name, entry) in header.tensors {
            let count = entry.nbytes as usize / 4;
            let numel: usize = entry.shape.iter().product();
            if count != numel {
                return Err(Error::MalformedArchive(format!(
                    "tensor {name}: {count} values for shape {:?}",
                    entry.shape
                )));
            }
            file.seek(SeekFrom::Start(blob_start + entry.offset))
                .map_err(|e| Error::io(path, e))?;
            let mut raw = vec![0u8; entry.nbytes as usize];
            file.read_exact(&mut raw).map_err(|e| Error::io(path, e))?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.insert(
                name,
                TensorData {
                    shape: entry.shape,
                    data,
                },
            );
        }
        Ok(WeightArchive {
            tensors,
            meta: header.meta,
            config: header.config,
        })
    }
}

/// Outcome of checking an archive against a model config's encoder table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub matched: Vec<String>,
    pub missing: Vec<String>,
    pub mismatched: Vec<ShapeMismatchEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapeMismatchEntry {
    pub name: String,
    pub expected: Vec<usize>,
    pub found: Vec<usize>,
}

impl VerifyReport {
    pub fn all_matched(&self) -> bool {
        self.missing.is_empty() && self.mismatched.is_empty()
    }
}

/// List matched, missing, and shape-mismatched encoder tensors.
pub fn verify_archive(archive: &WeightArchive, cfg: &ModelConfig) -> VerifyReport {
    let mut report = VerifyReport {
        matched: Vec::new(),
        missing: Vec::new(),
        mismatched: Vec::new(),
    };
    for spec in &cfg.encoder {
        let LayerSpec::Conv {
            name,
            in_ch,
            out_ch,
            kernel,
            ..
        } = spec
        else {
            continue;
        };
        let want = [
            (format!("{name}.weight"), vec![*out_ch, *in_ch, *kernel, *kernel]),
            (format!("{name}.bias"), vec![*out_ch]),
        ];
        for (tname, expected) in want {
            match archive.tensors.get(&tname) {
                None => report.missing.push(tname),
                Some(t) if t.shape != expected => report.mismatched.push(ShapeMismatchEntry {
                    name: tname,
                    expected,
                    found: t.shape.clone(),
                }),
                Some(_) => report.matched.push(tname),
            }
        }
    }
    report
}

// ---------------------------------------------------------------------------
// safetensors import

#[derive(Deserialize)]
struct SafetensorsEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: (u64, u64),
}

/// Parse a safetensors buffer into named f32 tensors.
pub fn parse_safetensors(bytes: &[u8]) -> Result<BTreeMap<String, TensorData>> {
    if bytes.len() < 8 {
        return Err(Error::MalformedArchive("safetensors file too short".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if 8 + header_len > bytes.len() {
        return Err(Error::MalformedArchive(
            "safetensors header overruns file".into(),
        ));
    }
    let header: HashMap<String, serde_json::Value> =
        serde_json::from_slice(&bytes[8..8 + header_len])?;
    let buffer = &bytes[8 + header_len..];

    let mut tensors = BTreeMap::new();
    for (name, value) in header {
        if name == "__metadata__" {
            continue;
        }
        let entry: SafetensorsEntry = serde_json::from_value(value)?;
        if entry.dtype != "F32" {
            return Err(Error::MalformedArchive(format!(
                "tensor {name} has dtype {}, only F32 is supported",
                entry.dtype
            )));
        }
        let (start, end) = (entry.data_offsets.0 as usize, entry.data_offsets.1 as usize);
        if end > buffer.len() || start > end {
            return Err(Error::MalformedArchive(format!(
                "tensor {name} offsets out of range"
            )));
        }
        let numel: usize = entry.shape.iter().product();
        if end - start != numel * 4 {
            return Err(Error::MalformedArchive(format!(
                "tensor {name}: byte span does not match shape {:?}",
                entry.shape
            )));
        }
        let data = buffer[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.insert(
            name,
            TensorData {
                shape: entry.shape,
                data,
            },
        );
    }
    Ok(tensors)
}

/// Serialize tensors as a safetensors buffer (used for fixtures and tests).
pub fn write_safetensors(tensors: &BTreeMap<String, TensorData>) -> Vec<u8> {
    let mut header = serde_json::Map::new();
    let mut offset = 0u64;
    for (name, t) in tensors {
        let nbytes = (t.data.len() * 4) as u64;
        header.insert(
            name.clone(),
            serde_json::json!({
                "dtype": "F32",
                "shape": t.shape,
                "data_offsets": [offset, offset + nbytes],
            }),
        );
        offset += nbytes;
    }
    let header_json = serde_json::to_vec(&serde_json::Value::Object(header)).unwrap();
    let mut out = Vec::with_capacity(8 + header_json.len() + offset as usize);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for t in tensors.values() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Source-layer index in the published `features.N` numbering for each
/// encoder convolution, in table order.
pub const VGG16_FEATURE_INDICES: [(usize, &str); 8] = [
    (0, "enc.b1c1"),
    (2, "enc.b1c2"),
    (5, "enc.b2c1"),
    (7, "enc.b2c2"),
    (10, "enc.b3c1"),
    (12, "enc.b3c2"),
    (14, "enc.b3c3"),
    (17, "enc.b4c1"),
];

/// Convert a parsed safetensors tensor map (torchvision `features.N.*`
/// naming) into an encoder archive with this crate's tensor names.
pub fn convert_vgg16_safetensors(
    src: &BTreeMap<String, TensorData>,
    meta: serde_json::Value,
) -> Result<WeightArchive> {
    let mut archive = WeightArchive::new(meta);
    for (idx, dst) in VGG16_FEATURE_INDICES {
        for part in ["weight", "bias"] {
            let src_name = format!("features.{idx}.{part}");
            let t = src.get(&src_name).ok_or(Error::MissingTensor {
                name: src_name.clone(),
            })?;
            archive
                .tensors
                .insert(format!("{dst}.{part}"), t.clone());
        }
    }
    Ok(archive)
}

// ---------------------------------------------------------------------------
// fetch + cache

fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex_string(&hasher.finalize()))
}

fn cache_key(url: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(url.as_bytes());
    let digest = hex_string(&hasher.finalize());
    let base = url
        .rsplit('/')
        .next()
        .filter(|s| !s.is_empty())
        .unwrap_or("weights");
    format!("{}-{}", &digest[..16], base)
}

/// One lock per URL within this process, so concurrent callers share a
/// single download.
fn url_lock(url: &str) -> Arc<Mutex<()>> {
    static LOCKS: OnceLock<Mutex<HashMap<String, Arc<Mutex<()>>>>> = OnceLock::new();
    let locks = LOCKS.get_or_init(|| Mutex::new(HashMap::new()));
    locks
        .lock()
        .expect("lock map poisoned")
        .entry(url.to_string())
        .or_default()
        .clone()
}

/// Cross-process guard: a lock file created exclusively; waiting callers
/// poll until it disappears.
struct FileLock {
    path: PathBuf,
}

impl FileLock {
    fn acquire(path: PathBuf) -> Result<Self> {
        let deadline = std::time::Instant::now() + std::time::Duration::from_secs(600);
        loop {
            match fs::OpenOptions::new()
                .write(true)
                .create_new(true)
                .open(&path)
            {
                Ok(_) => return Ok(FileLock { path }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if std::time::Instant::now() > deadline {
                        return Err(Error::Other(format!(
                            "timed out waiting for download lock {}",
                            path.display()
                        )));
                    }
                    std::thread::sleep(std::time::Duration::from_millis(50));
                }
                Err(e) => return Err(Error::io(&path, e)),
            }
        }
    }
}

impl Drop for FileLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Fetch a published safetensors encoder, verify its digest, and convert it.
///
/// The raw download is cached under `cache_dir`; a warm cache performs no
/// network access. Interrupted downloads resume from a `.part` file via HTTP
/// range requests. With `offline` set, only the cache is consulted.
pub fn fetch_pretrained(
    url: &str,
    cache_dir: impl AsRef<Path>,
    expected_digest: &str,
    offline: bool,
) -> Result<WeightArchive> {
    let cache_dir = cache_dir.as_ref();
    fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    let raw_path = cache_dir.join(cache_key(url));

    let _in_process = url_lock(url);
    let _guard = _in_process.lock().expect("url lock poisoned");

    if !raw_path.exists() {
        if offline {
            return Err(Error::NetworkUnavailable { url: url.into() });
        }
        let _file_lock = FileLock::acquire(raw_path.with_extension("lock"))?;
        // Another process may have finished while we waited.
        if !raw_path.exists() {
            download_with_resume(url, &raw_path)?;
        }
    }

    let actual = sha256_file(&raw_path)?;
    if !actual.eq_ignore_ascii_case(expected_digest) {
        return Err(Error::DigestMismatch {
            path: raw_path,
            expected: expected_digest.to_string(),
            actual,
        });
    }

    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let tensors = parse_safetensors(&bytes)?;
    convert_vgg16_safetensors(
        &tensors,
        serde_json::json!({
            "source_url": url,
            "sha256": actual,
        }),
    )
}

fn download_with_resume(url: &str, dest: &Path) -> Result<()> {
    let part = dest.with_extension("part");
    let resume_from = fs::metadata(&part).map(|m| m.len()).unwrap_or(0);

    let mut request = ureq::get(url);
    if resume_from > 0 {
        request = request.header("Range", format!("bytes={resume_from}-"));
    }
    let mut response = request.call().map_err(|e| Error::DownloadFailed {
        url: url.into(),
        detail: e.to_string(),
    })?;

    let status = response.status().as_u16();
    let mut file = match status {
        206 if resume_from > 0 => fs::OpenOptions::new()
            .append(true)
            .open(&part)
            .map_err(|e| Error::io(&part, e))?,
        200 => File::create(&part).map_err(|e| Error::io(&part, e))?,
        other => {
            return Err(Error::DownloadFailed {
                url: url.into(),
                detail: format!("HTTP status {other}"),
            })
        }
    };

    let mut reader = response.body_mut().as_reader();
    std::io::copy(&mut reader, &mut file).map_err(|e| Error::DownloadFailed {
        url: url.into(),
        detail: format!("transfer failed: {e}"),
    })?;
    file.flush().map_err(|e| Error::io(&part, e))?;
    drop(file);
    fs::rename(&part, dest).map_err(|e| Error::io(dest, e))?;
    Ok(())
}
