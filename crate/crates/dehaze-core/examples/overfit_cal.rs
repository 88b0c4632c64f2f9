// Scratch calibration for the overfit protocol (not part of the test suite).
use dehaze_core::data::make_toy_dataset;
use dehaze_core::net::{build_model, ModelConfig, NormKind, Scale, WeightInit};
use dehaze_core::optim::TrainConfig;
use dehaze_core::train::{evaluate, train};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr0: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(250);
    let lambda: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let batch: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(4);
    let seed: u64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(42);

    let dir = tempfile::tempdir().unwrap();
    let data = make_toy_dataset(dir.path(), 1, 8, 64).unwrap();
    let cfg = TrainConfig {
        batch_size: batch,
        lr0,
        epochs,
        decay_start_epoch: epochs / 2,
        momentum: 0.9,
        weight_decay: 1e-4,
        lambda,
        seed,
        scale: Scale::Tiny,
        crop: 64,
        hflip: false,
        drop_last: true,
    };
    let mut model = build_model(
        ModelConfig::new(Scale::Tiny, NormKind::In, NormKind::In),
        WeightInit::Random { seed },
    )
    .unwrap();

    let t0 = std::time::Instant::now();
    let history = train(&mut model, &data, None, &cfg, None).unwrap();
    let train_time = t0.elapsed().as_secs_f64();

    let losses = history.losses();
    let first = losses.first().unwrap();
    let last = losses.last().unwrap();
    println!("lr0={lr0} epochs={epochs} lambda={lambda}");
    println!("first epoch loss: {first:.6}");
    println!("last epoch loss:  {last:.6}  (ratio {:.4})", last / first);
    for (i, l) in losses.iter().enumerate() {
        if i % (epochs / 10).max(1) == 0 {
            println!("  epoch {i:4}: loss {l:.6}");
        }
    }
    let report = evaluate(&model, &data).unwrap();
    println!(
        "dehazed PSNR {:.2} vs baseline {:.2} (gain {:+.2} dB)",
        report.aggregate.mean_psnr_dehazed,
        report.aggregate.mean_psnr_baseline,
        report.aggregate.mean_psnr_dehazed - report.aggregate.mean_psnr_baseline
    );
    println!("train time: {train_time:.1}s for {} steps", epochs * (8 / batch));
}
