#![allow(dead_code)]

use std::path::Path;

use duet_core::data::manifest::{load_manifest, ClipManifest};
use duet_core::data::synthetic::{make_synthetic_scene, AnalyticScene, SceneSpec};
use duet_core::encoding::EncodingConfig;
use duet_core::field::{DeformationConfig, FieldConfig, FieldParams};
use duet_core::image::Image;
use duet_core::render::{render_image, RenderConfig};
use duet_core::train::{AdamConfig, FieldDataset, FieldTrainer, TrainConfig};

/// Field small enough to train in minutes on one core.
pub fn small_field(deformation: bool) -> FieldConfig {
    FieldConfig {
        position_encoding: EncodingConfig::new(6),
        direction_encoding: EncodingConfig::new(2),
        pose_encoding: EncodingConfig::new(2),
        depth: 4,
        width: 64,
        skip_layer: None,
        color_width: 32,
        latent_dim: 8,
        condition_width: 8,
        deformation: DeformationConfig {
            enabled: deformation,
            depth: 3,
            width: 32,
        },
        ..FieldConfig::default()
    }
}

pub fn small_train(iterations: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        ray_batch: 128,
        iterations,
        seed,
        adam: AdamConfig {
            lr: 3e-3,
            ..AdamConfig::default()
        },
        n_samples: 24,
        jitter: true,
        ..TrainConfig::default()
    }
}

/// Tiny field for gradient and invariance checks.
pub fn tiny_field(deformation: bool) -> FieldConfig {
    FieldConfig {
        position_encoding: EncodingConfig::new(2),
        direction_encoding: EncodingConfig::new(1),
        pose_encoding: EncodingConfig::new(1),
        depth: 3,
        width: 8,
        skip_layer: Some(1),
        color_width: 6,
        latent_dim: 3,
        condition_width: 4,
        speaker_feature_dim: 6,
        expression_feature_dim: 5,
        deformation: DeformationConfig {
            enabled: deformation,
            depth: 2,
            width: 6,
        },
    }
}

pub struct Scene {
    pub manifest: ClipManifest,
    pub oracle: AnalyticScene,
    pub data: FieldDataset,
}

pub fn scene(preset: &str, seed: u64, dir: &Path) -> Scene {
    let spec = SceneSpec::preset(preset).unwrap();
    let s = make_synthetic_scene(&spec, seed, dir).unwrap();
    let manifest = load_manifest(&s.manifest_path).unwrap();
    let data = FieldDataset::from_manifest(&manifest).unwrap();
    Scene {
        manifest,
        oracle: s.oracle,
        data,
    }
}

pub fn psnr_of_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        100.0
    } else {
        (-10.0 * mse.log10()).min(100.0)
    }
}

pub fn sq_err(a: &Image, b: &Image) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Deterministic renders of every training frame.
pub fn render_all(field: &FieldParams, data: &FieldDataset, n_samples: usize) -> Vec<Image> {
    let cfg = RenderConfig {
        n_samples,
        jitter: false,
        seed: 0,
    };
    data.frames
        .iter()
        .map(|f| render_image(field, &f.view(&data.background), &cfg).unwrap().image)
        .collect()
}

/// Mean per-frame PSNR for each identity index.
pub fn per_identity_psnr(data: &FieldDataset, renders: &[Image], identities: usize) -> Vec<f64> {
    let mut sum = vec![0.0; identities];
    let mut n = vec![0usize; identities];
    for (f, r) in data.frames.iter().zip(renders) {
        let mse = sq_err(&f.image, r) / f.image.data.len() as f64;
        sum[f.identity] += psnr_of_mse(mse);
        n[f.identity] += 1;
    }
    sum.iter().zip(&n).map(|(s, k)| s / *k as f64).collect()
}

pub fn mean_psnr(data: &FieldDataset, renders: &[Image]) -> f64 {
    let total: f64 = data
        .frames
        .iter()
        .zip(renders)
        .map(|(f, r)| psnr_of_mse(sq_err(&f.image, r) / f.image.data.len() as f64))
        .sum();
    total / data.frames.len() as f64
}

/// Trains until the rendered training PSNR reaches `target` or the
/// iteration budget runs out. Returns (iterations, best PSNR).
pub fn train_until(trainer: &mut FieldTrainer, data: &FieldDataset, target: f64, every: usize) -> (usize, f64) {
    let n = trainer.cfg.n_samples;
    loop {
        let stop = (trainer.iteration + every).min(trainer.cfg.iterations);
        while trainer.iteration < stop {
            trainer.step(data).unwrap();
        }
        let p = mean_psnr(data, &render_all(&trainer.field, data, n));
        if p >= target || trainer.iteration >= trainer.cfg.iterations {
            return (trainer.iteration, p);
        }
    }
}

pub fn new_trainer(ids: &[String], field: FieldConfig, train: TrainConfig) -> FieldTrainer {
    let f = FieldParams::new(field, ids, train.seed).unwrap();
    FieldTrainer::new(f, train).unwrap()
}
