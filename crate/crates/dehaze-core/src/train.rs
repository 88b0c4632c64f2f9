//! Training loop, dataset evaluation, and the normalization ablation harness.
//!
//! Training optimizes the decoder, skip-normalization, and decoder-
//! normalization parameters with SGD under the linear-decay schedule; the
//! encoder never changes. Evaluation scores each dehazed image against its
//! clear counterpart with PSNR/SSIM and also reports the do-nothing baseline
//! (hazy vs clear). The ablation harness trains one model per grid cell with
//! identical seeds and data order and evaluates all cells on a shared set.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::PairedDataset;
use crate::error::{Error, Result};
use crate::image_io::{batch_from_tanh, batch_to_model_space, ImageTensor};
use crate::loss::{total_loss, LossConfig, PerceptualTap};
use crate::metrics::{self, MetricResult};
use crate::net::{build_model, Model, ModelConfig, NormKind, WeightInit};
use crate::optim::{lr_at, sgd_step, SgdState, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub wall_time_s: f64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

/// Train `model` on `data` under `cfg`. Checkpoints (`last.ckpt`, plus
/// `best.ckpt` when a validation set is given) are written each epoch under
/// `out_dir` when provided. The per-epoch losses are deterministic given the
/// seed.
pub fn train(
    model: &mut Model<f32>,
    data: &PairedDataset,
    val: Option<&PairedDataset>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    let loss_cfg = LossConfig {
        lambda: cfg.lambda,
        ..LossConfig::default()
    };
    loss_cfg.validate()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let encoder_before = model.encoder_digest();
    let mut state = SgdState::default();
    let mut history = TrainHistory {
        config: cfg.clone(),
        epochs: Vec::with_capacity(cfg.epochs),
        best_checkpoint: None,
        last_checkpoint: None,
    };
    let mut best_val_psnr = f64::NEG_INFINITY;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(epoch, cfg)?;
        let batches = data.epoch_batches(cfg.seed, epoch, cfg.batch_size, cfg.drop_last);
        if batches.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no full batches: {} pairs with batch size {}",
                data.len(),
                cfg.batch_size
            )));
        }

        let mut loss_sum = 0.0f64;
        for (step, batch) in batches.iter().enumerate() {
            let (hazy, clear) = data.load_batch(batch, cfg.seed, epoch)?;
            let x = batch_to_model_space(&hazy);
            let (y, cache) = model.forward_train(&x)?;
            let pred = batch_from_tanh(&y);

            let tap = PerceptualTap::new(model, loss_cfg.perceptual_block);
            let (loss, grad_pred) = total_loss(&pred, &clear, &tap, &loss_cfg)?;
            if !loss.is_finite() {
                return Err(Error::NanLoss { epoch, step });
            }
            loss_sum += loss;

            // pred = (y + 1) / 2, so the chain factor is 1/2.
            let grad_y = grad_pred.mapv(|v| v * 0.5);
            let grads = model.backward(&cache, &grad_y)?;
            sgd_step(&mut model.params, &grads, &mut state, lr, cfg)
                .map_err(|_| Error::NanLoss { epoch, step })?;
        }

        let mean_loss = loss_sum / batches.len() as f64;
        let mut checkpoint = None;
        if let Some(dir) = out_dir {
            let last = dir.join("last.ckpt");
            model.save_checkpoint(
                &last,
                serde_json::json!({
                    "epoch": epoch,
                    "mean_loss": mean_loss,
                    "seed": cfg.seed,
                }),
            )?;
            checkpoint = Some(last.clone());
            history.last_checkpoint = Some(last);

            if let Some(val) = val {
                let psnr = mean_dehazed_psnr(model, val)?;
                if psnr > best_val_psnr {
                    best_val_psnr = psnr;
                    let best = dir.join("best.ckpt");
                    model.save_checkpoint(
                        &best,
                        serde_json::json!({
                            "epoch": epoch,
                            "val_psnr": psnr,
                            "seed": cfg.seed,
                        }),
                    )?;
                    history.best_checkpoint = Some(best);
                }
            }
        }

        history.epochs.push(EpochRecord {
            epoch,
            mean_loss,
            lr,
            wall_time_s: started.elapsed().as_secs_f64(),
            checkpoint,
        });
    }

    if history.best_checkpoint.is_none() {
        history.best_checkpoint = history.last_checkpoint.clone();
    }
    if model.encoder_digest() != encoder_before {
        return Err(Error::Other(
            "encoder parameters changed during training".into(),
        ));
    }
    Ok(history)
}

fn mean_dehazed_psnr(model: &Model<f32>, data: &PairedDataset) -> Result<f64> {
    let mut acc = 0.0;
    for i in 0..data.len() {
        let (hazy, clear) = data.load_pair(i)?;
        let dehazed = model.dehaze_image(&hazy)?;
        acc += metrics::psnr(&dehazed, &clear, 1.0)?;
    }
    Ok(acc / data.len() as f64)
}

/// Anything that maps a hazy image to a restored image.
pub trait Dehazer {
    fn dehaze(&self, img: &ImageTensor) -> Result<ImageTensor>;
    fn label(&self) -> String;
}

impl Dehazer for Model<f32> {
    fn dehaze(&self, img: &ImageTensor) -> Result<ImageTensor> {
        self.dehaze_image(img)
    }

    fn label(&self) -> String {
        format!(
            "model(scale={}, skip={}, dec={})",
            self.config.scale, self.config.skip_norm, self.config.decoder_norm
        )
    }
}

/// Passes the hazy input through unchanged; evaluating it reproduces the
/// do-nothing baseline exactly.
pub struct IdentityDehazer;

impl Dehazer for IdentityDehazer {
    fn dehaze(&self, img: &ImageTensor) -> Result<ImageTensor> {
        Ok(img.clone())
    }

    fn label(&self) -> String {
        "identity".into()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageEval {
    pub dehazed: MetricResult,
    pub baseline: MetricResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalAggregate {
    pub count: usize,
    pub mean_psnr_dehazed: f64,
    pub mean_ssim_dehazed: f64,
    pub mean_psnr_baseline: f64,
    pub mean_ssim_baseline: f64,
}

/// Per-image and aggregate scores; `per_image` is keyed by file stem.
/// Infinite PSNR (identical images) serializes as JSON null.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub per_image: BTreeMap<String, ImageEval>,
    pub aggregate: EvalAggregate,
}

/// Score `dehazer` over a paired dataset, including the hazy-input baseline.
pub fn evaluate(dehazer: &dyn Dehazer, data: &PairedDataset) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluation dataset is empty".into()));
    }
    let mut per_image = BTreeMap::new();
    let mut agg = EvalAggregate {
        count: 0,
        mean_psnr_dehazed: 0.0,
        mean_ssim_dehazed: 0.0,
        mean_psnr_baseline: 0.0,
        mean_ssim_baseline: 0.0,
    };
    for (i, pair) in data.pairs.iter().enumerate() {
        let (hazy, clear) = data.load_pair(i)?;
        let dehazed = dehazer.dehaze(&hazy)?;
        let d = metrics::metrics(&dehazed, &clear)?;
        let b = metrics::metrics(&hazy, &clear)?;
        agg.count += 1;
        agg.mean_psnr_dehazed += d.psnr_db;
        agg.mean_ssim_dehazed += d.ssim;
        agg.mean_psnr_baseline += b.psnr_db;
        agg.mean_ssim_baseline += b.ssim;
        per_image.insert(
            pair.stem.clone(),
            ImageEval {
                dehazed: d,
                baseline: b,
            },
        );
    }
    let n = agg.count as f64;
    agg.mean_psnr_dehazed /= n;
    agg.mean_ssim_dehazed /= n;
    agg.mean_psnr_baseline /= n;
    agg.mean_ssim_baseline /= n;
    Ok(EvalReport {
        model: dehazer.label(),
        per_image,
        aggregate: agg,
    })
}

/// One ablation cell: normalization kinds per site and the perceptual-loss
/// toggle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCell {
    pub skip_norm: NormKind,
    pub decoder_norm: NormKind,
    pub perceptual: bool,
}

impl AblationCell {
    pub fn name(&self) -> String {
        let mut s = format!("{}-{}", self.skip_norm, self.decoder_norm);
        if self.perceptual {
            s.push_str("-percep");
        }
        s
    }
}

/// The full published ablation grid: all nine normalization combinations
/// with reconstruction loss only, plus IN-IN with the combined loss.
pub fn paper_grid() -> Vec<AblationCell> {
    use NormKind::{Bn, In, Na};
    let mut cells = Vec::new();
    for decoder_norm in [Na, Bn, In] {
        for skip_norm in [Na, Bn, In] {
            cells.push(AblationCell {
                skip_norm,
                decoder_norm,
                perceptual: false,
            });
        }
    }
    cells.push(AblationCell {
        skip_norm: In,
        decoder_norm: In,
        perceptual: true,
    });
    cells
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCellResult {
    pub cell: AblationCell,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: TrainConfig,
    pub cells: Vec<AblationCellResult>,
}

impl AblationReport {
    pub fn cell(&self, skip: NormKind, dec: NormKind, perceptual: bool) -> Option<&AblationCellResult> {
        self.cells.iter().find(|c| {
            c.cell.skip_norm == skip && c.cell.decoder_norm == dec && c.cell.perceptual == perceptual
        })
    }

    /// Fixed-width text table, one row per metric.
    pub fn render_table(&self) -> String {
        let mut head = String::from("|      ");
        let mut psnr = String::from("| PSNR ");
        let mut ssim = String::from("| SSIM ");
        for c in &self.cells {
            head.push_str(&format!("| {:^12} ", c.cell.name()));
            psnr.push_str(&format!("| {:^12.2} ", c.mean_psnr));
            ssim.push_str(&format!("| {:^12.4} ", c.mean_ssim));
        }
        for s in [&mut head, &mut psnr, &mut ssim] {
            s.push('|');
        }
        format!("{head}\n{psnr}\n{ssim}\n")
    }
}

/// Train and evaluate one model per grid cell. Every cell uses the same
/// seed, data order, and schedule; only the normalization kinds and the
/// perceptual-loss weight differ. Evaluation runs on `eval_data` with the
/// trained model in eval mode (batch-norm cells use running statistics).
pub fn run_ablation(
    grid: &[AblationCell],
    base_cfg: &TrainConfig,
    train_data: &PairedDataset,
    eval_data: &PairedDataset,
    out_dir: Option<&Path>,
) -> Result<AblationReport> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("ablation grid is empty".into()));
    }
    let mut cells = Vec::with_capacity(grid.len());
    for cell in grid {
        let cell_dir = out_dir.map(|d| d.join(cell.name()));
        let mut cfg = base_cfg.clone();
        if !cell.perceptual {
            cfg.lambda = 0.0;
        }
        let model_cfg = ModelConfig::new(cfg.scale, cell.skip_norm, cell.decoder_norm);
        let mut model = build_model(model_cfg, WeightInit::Random { seed: cfg.seed })
            .map_err(|e| ablation_error(cell, e))?;
        let history = train(&mut model, train_data, None, &cfg, cell_dir.as_deref())
            .map_err(|e| ablation_error(cell, e))?;
        let report =
            evaluate(&model, eval_data).map_err(|e| ablation_error(cell, e))?;
        cells.push(AblationCellResult {
            cell: *cell,
            mean_psnr: report.aggregate.mean_psnr_dehazed,
            mean_ssim: report.aggregate.mean_ssim_dehazed,
            final_loss: history.epochs.last().map(|e| e.mean_loss).unwrap_or(f64::NAN),
        });
    }
    Ok(AblationReport {
        config: base_cfg.clone(),
        cells,
    })
}

fn ablation_error(cell: &AblationCell, e: Error) -> Error {
    Error::Other(format!("ablation cell {} failed: {e}", cell.name()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_toy_dataset, CropPolicy};
    use crate::net::Scale;
    use tempfile::tempdir;

    /// Short training run shared by the tests below.
    fn smoke_cfg(steps_epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            lr0: 0.05,
            epochs: steps_epochs,
            decay_start_epoch: (steps_epochs / 2).max(1),
            momentum: 0.9,
            weight_decay: 1e-4,
            lambda: 1.0,
            seed: 7,
            scale: Scale::Tiny,
            crop: 32,
            hflip: false,
            drop_last: true,
        }
    }

    fn tiny_model(seed: u64) -> Model<f32> {
        build_model(
            ModelConfig::new(Scale::Tiny, NormKind::In, NormKind::In),
            WeightInit::Random { seed },
        )
        .unwrap()
    }

    #[test]
    fn short_training_runs_and_freezes_encoder() {
        let dir = tempdir().unwrap();
        let data = make_toy_dataset(dir.path(), 5, 4, 32).unwrap();
        let mut model = tiny_model(1);
        let before = model.encoder_digest();
        let out = tempdir().unwrap();
        let cfg = smoke_cfg(2);
        let history = train(&mut model, &data, None, &cfg, Some(out.path())).unwrap();
        assert_eq!(history.epochs.len(), 2);
        assert_eq!(model.encoder_digest(), before);
        assert!(out.path().join("last.ckpt").exists());
        assert!(history.epochs.iter().all(|e| e.mean_loss.is_finite()));
        // lr follows the schedule.
        assert_eq!(history.epochs[0].lr, cfg.lr0);
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let dir = tempdir().unwrap();
        let data = make_toy_dataset(dir.path(), 5, 4, 32).unwrap();
        let cfg = smoke_cfg(2);

        let mut m1 = tiny_model(2);
        let h1 = train(&mut m1, &data, None, &cfg, None).unwrap();
        let mut m2 = tiny_model(2);
        let h2 = train(&mut m2, &data, None, &cfg, None).unwrap();
        assert_eq!(h1.losses(), h2.losses());

        let mut cfg3 = cfg.clone();
        cfg3.seed = 8;
        let mut m3 = tiny_model(2);
        let h3 = train(&mut m3, &data, None, &cfg3, None).unwrap();
        assert_ne!(h1.losses(), h3.losses());
    }

    #[test]
    fn empty_dataset_and_oversized_batches_error() {
        let dir = tempdir().unwrap();
        let data = make_toy_dataset(dir.path(), 5, 2, 32).unwrap();
        let mut model = tiny_model(3);
        let mut cfg = smoke_cfg(1);
        cfg.batch_size = 64; // larger than the dataset with drop_last
        assert!(train(&mut model, &data, None, &cfg, None).is_err());
    }

    #[test]
    fn identity_dehazer_report_equals_baseline() {
        let dir = tempdir().unwrap();
        let data = make_toy_dataset(dir.path(), 6, 3, 32)
            .unwrap()
            .with_policy(CropPolicy::default());
        let report = evaluate(&IdentityDehazer, &data).unwrap();
        assert_eq!(report.aggregate.count, 3);
        for eval in report.per_image.values() {
            assert_eq!(eval.dehazed.psnr_db, eval.baseline.psnr_db);
            assert_eq!(eval.dehazed.ssim, eval.baseline.ssim);
        }
        assert_eq!(
            report.aggregate.mean_psnr_dehazed,
            report.aggregate.mean_psnr_baseline
        );
    }

    #[test]
    fn identical_pairs_give_unit_baseline_ssim() {
        // Build a dataset where hazy == clear by pairing a zero-depth scene.
        let dir = tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("clear")).unwrap();
        std::fs::create_dir_all(root.join("depth")).unwrap();
        let img = ImageTensor::new(ndarray::Array3::from_shape_fn((3, 32, 32), |(c, y, x)| {
            ((c + y + x) % 17) as f32 / 16.0
        }))
        .unwrap();
        crate::image_io::save_image(&img, root.join("clear/s.png")).unwrap();
        let depth = ImageTensor::new(ndarray::Array3::zeros((1, 32, 32))).unwrap();
        crate::image_io::save_image(&depth, root.join("depth/s.png")).unwrap();
        let out = tempdir().unwrap();
        let data = crate::data::synthesize_dataset(
            root,
            out.path(),
            1,
            &crate::haze::HazeRanges::default(),
            crate::data::DepthMode::NormalizedMax,
        )
        .unwrap();
        let report = evaluate(&IdentityDehazer, &data).unwrap();
        let eval = report.per_image.values().next().unwrap();
        assert_eq!(eval.baseline.ssim, 1.0);
        assert!(eval.baseline.psnr_db.is_infinite());
    }

    #[test]
    fn paper_grid_has_ten_cells() {
        let grid = paper_grid();
        assert_eq!(grid.len(), 10);
        let perceptual: Vec<_> = grid.iter().filter(|c| c.perceptual).collect();
        assert_eq!(perceptual.len(), 1);
        assert_eq!(perceptual[0].skip_norm, NormKind::In);
        assert_eq!(perceptual[0].decoder_norm, NormKind::In);
    }

    #[test]
    fn single_cell_ablation_produces_one_entry() {
        let dir = tempdir().unwrap();
        let data = make_toy_dataset(dir.path(), 9, 4, 32).unwrap();
        let cfg = smoke_cfg(1);
        let grid = [AblationCell {
            skip_norm: NormKind::In,
            decoder_norm: NormKind::In,
            perceptual: false,
        }];
        let report = run_ablation(&grid, &cfg, &data, &data, None).unwrap();
        assert_eq!(report.cells.len(), 1);
        assert!(report.cells[0].mean_psnr.is_finite());
        let table = report.render_table();
        assert!(table.contains("IN-IN"));
        assert!(run_ablation(&[], &cfg, &data, &data, None).is_err());
    }
}
