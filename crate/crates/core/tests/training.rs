//! End-to-end training runs on small synthetic datasets.

use intensim::models::{Checkpoint, Normalization};
use intensim::pipeline::{build_frames, split_dataset, train_on, DataSource, TrainConfig};
use intensim::projection::select_channels;
use intensim::*;

fn tiny(arch: ArchKind, frames: usize, epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(arch);
    cfg.epochs = epochs;
    cfg.base_width = 4;
    cfg.disc_width = 4;
    cfg.batch_size = 2;
    cfg.data = DataSource::Synthetic { frames, scene: SynthSceneConfig::default() };
    cfg.split = [frames - 4, 2, 2];
    cfg.deterministic = true;
    cfg
}

#[test]
fn smoke_run_checkpoint_reproduces_validation_mse() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(ArchKind::UNet, 10, 2);
    cfg.out_dir = Some(dir.path().to_path_buf());
    let frames = build_frames::<f32>(&cfg).unwrap();
    assert_eq!((frames[0].height(), frames[0].width()), (64, 256));
    let report = train_on(&cfg, &frames).unwrap();
    assert_eq!(report.history.len(), 2);
    for name in ["best.ckpt", "final.ckpt", "metrics.csv"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }

    let ck = Checkpoint::<f32>::load(&dir.path().join("best.ckpt"), Some(&cfg.combo)).unwrap();
    let [_, val, _] = split_dataset(frames.len(), cfg.split, cfg.seed).unwrap();
    let val: Vec<_> = val.iter().map(|&i| frames[i].clone()).collect();
    let mse = intensim::evaluation::eval_mse(&ck, &val).unwrap();
    assert_eq!(mse.to_bits(), report.best_val_mse.to_bits());
    assert!(report.best_val_mse <= report.final_val_mse);
}

#[test]
fn identical_configs_give_identical_checkpoints() {
    let cfg = tiny(ArchKind::UNet, 8, 2);
    let frames = build_frames::<f32>(&cfg).unwrap();
    let a = train_on(&cfg, &frames).unwrap();
    let b = train_on(&cfg, &frames).unwrap();
    assert_eq!(a.last.to_bytes().unwrap(), b.last.to_bytes().unwrap());
    assert_eq!(a.metrics_csv(), b.metrics_csv());
}

#[test]
fn normalization_comes_from_the_training_split() {
    let cfg = tiny(ArchKind::UNet, 10, 1);
    let frames = build_frames::<f32>(&cfg).unwrap();
    let report = train_on(&cfg, &frames).unwrap();
    let [train, _, _] = split_dataset(frames.len(), cfg.split, cfg.seed).unwrap();
    let stacks = |idx: Vec<usize>| -> Vec<_> {
        idx.into_iter().map(|i| select_channels(&frames[i], &cfg.combo).unwrap()).collect()
    };
    let from_train = Normalization::fit(&stacks(train)).unwrap();
    let from_all = Normalization::fit(&stacks((0..frames.len()).collect())).unwrap();
    assert_eq!(report.best.normalization, from_train);
    assert_ne!(report.best.normalization, from_all);
}

#[test]
fn training_loss_decreases_over_five_epochs() {
    let cfg = tiny(ArchKind::UNet, 20, 5);
    let frames = build_frames::<f32>(&cfg).unwrap();
    let report = train_on(&cfg, &frames).unwrap();
    let loss = |e: usize| report.history[e].train_value("masked_mse").unwrap();
    assert!(loss(4) < loss(0), "{} vs {}", loss(4), loss(0));
}

#[test]
fn pix2pix_smoke_run_stays_finite() {
    let cfg = tiny(ArchKind::Pix2Pix, 8, 2);
    let frames = build_frames::<f32>(&cfg).unwrap();
    let report = train_on(&cfg, &frames).unwrap();
    assert!(report.best.discriminator.is_some());
    for r in &report.history {
        assert!(r.train.iter().all(|(_, v)| v.is_finite()));
        assert!(r.val_mse.is_finite());
    }
    let bytes = report.best.to_bytes().unwrap();
    let back = Checkpoint::<f32>::from_bytes(&bytes, None).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
}

#[test]
fn combo_without_camera_data_is_rejected() {
    let mut cfg = tiny(ArchKind::UNet, 6, 1);
    cfg.split = [4, 1, 1];
    cfg.combo = "D+RGB".parse().unwrap();
    let frames = build_frames::<f32>(&cfg).unwrap();
    assert!(matches!(train_on(&cfg, &frames), Err(Error::ModalityUnavailable(_))));
}

#[test]
fn divergent_update_reports_a_fault_with_a_dump() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(ArchKind::UNet, 6, 1);
    cfg.split = [4, 1, 1];
    cfg.lr = 1e39;
    cfg.out_dir = Some(dir.path().to_path_buf());
    let frames = build_frames::<f32>(&cfg).unwrap();
    let err = train_on(&cfg, &frames).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::TrainingFault, "{err}");
    assert!(dir.path().join("fault.txt").exists());
    assert!(dir.path().join("fault.ckpt").exists());
}
