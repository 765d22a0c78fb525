#![allow(dead_code)]

use std::path::PathBuf;

use sliderspace_core::backend::{ToyBackend, ToyBackendConfig};
use sliderspace_core::trainer::TrainingConfig;
use sliderspace_core::workspace::PipelineConfig;

pub fn cache_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("toy-cache")
}

/// A barely trained backend: enough to exercise plumbing, useless for quality.
pub fn quick_backend_config() -> ToyBackendConfig {
    ToyBackendConfig {
        hidden: 32,
        train_steps: 30,
        batch_size: 16,
        validation_size: 16,
        validation_threshold: 1e9,
        ..Default::default()
    }
}

pub fn quick_backend() -> ToyBackend {
    ToyBackend::load_or_train(quick_backend_config(), &cache_dir()).expect("quick toy backend")
}

pub fn quick_pipeline() -> PipelineConfig {
    PipelineConfig {
        backend: quick_backend_config(),
        num_samples: 12,
        num_directions: 2,
        training: TrainingConfig {
            steps: 6,
            report_samples: 4,
            ..Default::default()
        },
        ..Default::default()
    }
}
