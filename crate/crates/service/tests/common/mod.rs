#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, Response};
use axum::Router;
use http_body_util::BodyExt;
use tower::ServiceExt;

use sliderspace_core::backend::{ToyBackend, ToyBackendConfig};
use sliderspace_core::encoder::EncoderRegistry;
use sliderspace_core::manifest::SliderSpace;
use sliderspace_core::trainer::TrainingConfig;
use sliderspace_core::workspace::{discover, PipelineConfig};
use sliderspace_service::api::{router, AppState, ServiceConfig};

pub fn cache_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("toy-cache")
}

pub fn quick_pipeline() -> PipelineConfig {
    PipelineConfig {
        backend: ToyBackendConfig {
            hidden: 32,
            train_steps: 30,
            batch_size: 16,
            validation_size: 16,
            validation_threshold: 1e9,
            ..Default::default()
        },
        num_samples: 12,
        num_directions: 4,
        training: TrainingConfig {
            steps: 6,
            report_samples: 4,
            ..Default::default()
        },
        ..Default::default()
    }
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub space: SliderSpace,
    pub backend: Arc<ToyBackend>,
}

impl Fixture {
    pub fn workspace(&self) -> PathBuf {
        self.dir.path().to_path_buf()
    }

    pub fn router(&self, config: ServiceConfig) -> Router {
        router(Arc::new(AppState::new(self.space.clone(), self.backend.clone(), config)))
    }
}

/// A discovered workspace on the quick toy backend with four sliders.
pub fn quick_fixture() -> Fixture {
    let cfg = quick_pipeline();
    let backend = Arc::new(ToyBackend::load_or_train(cfg.backend.clone(), &cache_dir()).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let ws = discover(dir.path(), &cfg, backend.as_ref(), &EncoderRegistry::with_builtins()).unwrap();
    let space = ws.load_space().unwrap();
    Fixture { dir, space, backend }
}

pub async fn send(app: &Router, req: Request<Body>) -> (Response<Body>, Vec<u8>) {
    let response = app.clone().oneshot(req).await.unwrap();
    let (parts, body) = response.into_parts();
    let bytes = body.collect().await.unwrap().to_bytes().to_vec();
    (Response::from_parts(parts, Body::empty()), bytes)
}

pub fn post_json(uri: &str, body: serde_json::Value) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

pub fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}
