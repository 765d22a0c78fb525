mod common;

use std::fs;
use std::path::Path;

use sliderspace_core::encoder::EncoderRegistry;
use sliderspace_core::manifest::{load_manifest, save_manifest, MANIFEST_FILE};
use sliderspace_core::workspace::{discover, PipelineConfig, Stage, Workspace};
use sliderspace_core::Error;

use common::{quick_backend, quick_pipeline};

fn marker_time(ws: &Workspace, stage: Stage) -> String {
    ws.marker(stage).unwrap().expect("marker present").completed_at
}

#[test]
fn shipped_config_matches_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.json");
    let shipped = PipelineConfig::load(&path).unwrap();
    assert_eq!(shipped, PipelineConfig::default());
}

#[test]
fn rerun_on_completed_workspace_is_a_no_op() {
    let backend = quick_backend();
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_pipeline();
    let encoders = EncoderRegistry::with_builtins();
    let ws = discover(dir.path(), &cfg, &backend, &encoders).unwrap();
    assert_eq!(ws.completed().unwrap(), vec![Stage::Sampled, Stage::Decomposed, Stage::Trained]);
    let first = ws.load_space().unwrap().manifest;
    let times: Vec<String> = [Stage::Sampled, Stage::Decomposed, Stage::Trained]
        .into_iter()
        .map(|s| marker_time(&ws, s))
        .collect();
    let manifest_bytes = fs::read(ws.space_dir().join(MANIFEST_FILE)).unwrap();

    std::thread::sleep(std::time::Duration::from_millis(1100));
    let ws = discover(dir.path(), &cfg, &backend, &encoders).unwrap();
    let again: Vec<String> = [Stage::Sampled, Stage::Decomposed, Stage::Trained]
        .into_iter()
        .map(|s| marker_time(&ws, s))
        .collect();
    assert_eq!(times, again);
    assert_eq!(fs::read(ws.space_dir().join(MANIFEST_FILE)).unwrap(), manifest_bytes);
    assert_eq!(ws.load_space().unwrap().manifest.hash(), first.hash());
}

#[test]
fn deleting_trained_marker_repeats_only_training() {
    let backend = quick_backend();
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_pipeline();
    let encoders = EncoderRegistry::with_builtins();
    let ws = discover(dir.path(), &cfg, &backend, &encoders).unwrap();
    let hash = ws.load_space().unwrap().manifest.hash();
    let sampled = marker_time(&ws, Stage::Sampled);
    let decomposed = marker_time(&ws, Stage::Decomposed);
    let trained = marker_time(&ws, Stage::Trained);

    fs::remove_file(ws.marker_path(Stage::Trained)).unwrap();
    std::thread::sleep(std::time::Duration::from_millis(1100));
    let ws = discover(dir.path(), &cfg, &backend, &encoders).unwrap();
    assert_eq!(marker_time(&ws, Stage::Sampled), sampled);
    assert_eq!(marker_time(&ws, Stage::Decomposed), decomposed);
    assert_ne!(marker_time(&ws, Stage::Trained), trained);
    assert_eq!(ws.load_space().unwrap().manifest.hash(), hash);
}

#[test]
fn changed_training_config_keeps_samples() {
    let backend = quick_backend();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_pipeline();
    let encoders = EncoderRegistry::with_builtins();
    let ws = discover(dir.path(), &cfg, &backend, &encoders).unwrap();
    let sampled = marker_time(&ws, Stage::Sampled);
    let hash = ws.load_space().unwrap().manifest.hash();

    cfg.training.steps += 1;
    let ws = discover(dir.path(), &cfg, &backend, &encoders).unwrap();
    assert_eq!(marker_time(&ws, Stage::Sampled), sampled);
    assert_ne!(ws.load_space().unwrap().manifest.hash(), hash);
}

#[test]
fn orphaned_later_markers_are_dropped() {
    let backend = quick_backend();
    let dir = tempfile::tempdir().unwrap();
    let ws = discover(dir.path(), &quick_pipeline(), &backend, &EncoderRegistry::with_builtins()).unwrap();
    fs::remove_file(ws.marker_path(Stage::Sampled)).unwrap();
    let ws = Workspace::open(dir.path()).unwrap();
    assert!(ws.completed().unwrap().is_empty());
    assert!(!ws.marker_path(Stage::Trained).exists());
}

#[test]
fn manifest_round_trip_is_lossless() {
    let backend = quick_backend();
    let dir = tempfile::tempdir().unwrap();
    let ws = discover(dir.path(), &quick_pipeline(), &backend, &EncoderRegistry::with_builtins()).unwrap();
    let space = ws.load_space().unwrap();
    let copy = tempfile::tempdir().unwrap();
    sliderspace_core::manifest::export_space(&space, copy.path()).unwrap();
    let loaded = load_manifest(copy.path()).unwrap();
    assert_eq!(loaded.manifest, space.manifest);
    assert_eq!(loaded.sliders, space.sliders);
    assert_eq!(loaded.directions, space.directions);
    assert_eq!(space.manifest.n, 2);
}

#[test]
fn corrupted_weight_file_refuses_load() {
    let backend = quick_backend();
    let dir = tempfile::tempdir().unwrap();
    let ws = discover(dir.path(), &quick_pipeline(), &backend, &EncoderRegistry::with_builtins()).unwrap();
    let space = ws.load_space().unwrap();
    let target = ws.space_dir().join(&space.manifest.sliders[1].weights.path);
    let mut bytes = fs::read(&target).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x5a;
    fs::write(&target, bytes).unwrap();
    match load_manifest(&ws.space_dir()) {
        Err(e @ Error::Integrity { .. }) => {
            assert!(e.to_string().contains(&space.manifest.sliders[1].weights.path));
            assert_eq!(e.exit_code(), 2);
        }
        other => panic!("expected integrity error, got {other:?}"),
    }
}

#[test]
fn unknown_manifest_version_is_explicit() {
    let backend = quick_backend();
    let dir = tempfile::tempdir().unwrap();
    let ws = discover(dir.path(), &quick_pipeline(), &backend, &EncoderRegistry::with_builtins()).unwrap();
    let mut manifest = ws.load_space().unwrap().manifest;
    manifest.manifest_version = 99;
    save_manifest(&ws.space_dir(), &manifest).unwrap();
    match load_manifest(&ws.space_dir()) {
        Err(Error::Version { found: 99, supported: 1 }) => {}
        other => panic!("expected version error, got {other:?}"),
    }
}

#[test]
fn missing_directions_file_is_an_integrity_error() {
    let backend = quick_backend();
    let dir = tempfile::tempdir().unwrap();
    let ws = discover(dir.path(), &quick_pipeline(), &backend, &EncoderRegistry::with_builtins()).unwrap();
    let space = ws.load_space().unwrap();
    fs::remove_file(ws.space_dir().join(&space.manifest.directions.path)).unwrap();
    assert!(matches!(load_manifest(&ws.space_dir()), Err(Error::Integrity { .. })));
}

#[test]
fn invalid_config_is_rejected_before_any_stage() {
    let backend = quick_backend();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_pipeline();
    cfg.num_directions = 0;
    assert!(discover(dir.path(), &cfg, &backend, &EncoderRegistry::with_builtins()).is_err());
    assert!(!dir.path().join("stages/sampled.json").exists());
}
