#![allow(dead_code)]

use std::path::Path;

use artigen_cli::commands::LoadedModel;
use artigen_core::diffusion::NoiseSchedule;
use artigen_core::nn::{save_checkpoint, Checkpoint, Denoiser, DenoiserConfig};
use artigen_core::schema::{ArticulatedObject, Category};
use artigen_core::synth::{generate_synthetic_corpus, write_synthetic_corpus};

/// A one-layer network at full slot count; untrained, but enough to drive
/// the plumbing.
pub fn small_config() -> DenoiserConfig {
    DenoiserConfig {
        slots: DenoiserConfig::full().slots,
        ..DenoiserConfig::tiny()
    }
}

pub fn small_model() -> LoadedModel {
    LoadedModel {
        model: Denoiser::new(small_config(), 3).unwrap(),
        schedule: NoiseSchedule::default(),
    }
}

pub fn write_checkpoint(path: &Path) {
    let m = small_model();
    let ck = Checkpoint {
        model: m.model,
        schedule: m.schedule.spec(),
        optimizer: None,
        train_state: serde_json::Value::Null,
    };
    save_checkpoint(path, &ck).unwrap();
}

pub fn objects(n: usize) -> Vec<ArticulatedObject> {
    let mix: Vec<(Category, f64)> = Category::ALL.iter().map(|&c| (c, 1.0)).collect();
    generate_synthetic_corpus(n, &mix, 5).unwrap()
}

pub fn write_corpus(dir: &Path, n: usize) -> Vec<ArticulatedObject> {
    let objs = objects(n);
    write_synthetic_corpus(dir, &objs, 0.75).unwrap();
    objs
}
