mod common;

use std::fs;

use sliderspace_core::adapter::{init_adapter, InitPolicy, Slider};
use sliderspace_core::backend::{initial_noise, predict_noise, DiffusionBackend};
use sliderspace_core::composer::{generate, GenerationRequest, SliderLibrary, TimestepGate};
use sliderspace_core::encoder::{EncoderRegistry, FactorOracleEncoder, TOY_SEMANTIC_ID};
use sliderspace_core::eval::{diversity_protocol, factor_correlation, DiversityProtocolConfig};
use sliderspace_core::pca::fit_pca;
use sliderspace_core::sampler::{sample_to_store, RecordStore, SamplingPlan};
use sliderspace_core::schedule::LatentImage;
use sliderspace_core::trainer::{slider_id, train_slider, train_sliderspace};
use sliderspace_core::workspace::{discover, training_corpus};
use sliderspace_core::Error;

use common::{quick_backend, quick_pipeline};

fn zero_slider(backend: &dyn DiffusionBackend, id: &str) -> Slider {
    let adapters = backend
        .descriptor()
        .adapter_target_layers
        .iter()
        .map(|l| init_adapter(id, &l.id, l.shape, 1, InitPolicy::new(1.0, 7)).unwrap())
        .collect();
    Slider {
        id: id.into(),
        adapters,
    }
}

fn trained_library(backend: &dyn DiffusionBackend) -> (tempfile::TempDir, SliderLibrary) {
    let dir = tempfile::tempdir().unwrap();
    let ws = discover(dir.path(), &quick_pipeline(), backend, &EncoderRegistry::with_builtins()).unwrap();
    let lib = ws.load_space().unwrap().library();
    (dir, lib)
}

#[test]
fn zero_scale_adapters_leave_noise_prediction_bit_exact() {
    let backend = quick_backend();
    let slider = zero_slider(&backend, "s");
    let shape = backend.descriptor().latent_shape;
    let x = LatentImage::from_tensor(&initial_noise(3, shape, backend.device()).unwrap().squeeze(0).unwrap()).unwrap();
    let ctx = backend.encode_text("a red circle");
    let acts: Vec<_> = slider.adapters.iter().map(|a| (a, 0.0)).collect();
    for t in [0, 17, 49] {
        let base = predict_noise(&backend, &x, t, &ctx, &[]).unwrap();
        let with = predict_noise(&backend, &x, t, &ctx, &acts).unwrap();
        assert_eq!(base.data(), with.data());
    }
}

#[test]
fn empty_and_zero_activations_reproduce_the_base_image() {
    let backend = quick_backend();
    let (_dir, lib) = trained_library(&backend);
    for seed in [0, 5, 11] {
        let base = generate(&GenerationRequest::new("a shape", seed), &lib, &backend).unwrap();
        let zero = generate(&GenerationRequest::new("a shape", seed).with("slider-000", 0.0), &lib, &backend).unwrap();
        let again = generate(&GenerationRequest::new("a shape", seed), &lib, &backend).unwrap();
        assert_eq!(base.rgb, zero.rgb);
        assert_eq!(base.rgb, again.rgb);
    }
}

#[test]
fn sliders_gated_out_have_no_effect() {
    let backend = quick_backend();
    let (_dir, lib) = trained_library(&backend);
    let base = generate(&GenerationRequest::new("a shape", 2), &lib, &backend).unwrap();
    for (start, scale) in [(0usize, 3.0), (25, -2.0), (50, 1.5)] {
        let gate = TimestepGate {
            start_step: start,
            end_step: start,
        };
        let req = GenerationRequest::new("a shape", 2).with("slider-001", scale).with_gate(gate);
        assert_eq!(generate(&req, &lib, &backend).unwrap().rgb, base.rgb);
    }
    let active = GenerationRequest::new("a shape", 2).with("slider-001", 3.0);
    assert_ne!(generate(&active, &lib, &backend).unwrap().rgb, base.rgb);
}

#[test]
fn training_leaves_the_base_model_untouched() {
    let backend = quick_backend();
    let shape = backend.descriptor().latent_shape;
    let x = initial_noise(9, shape, backend.device()).unwrap();
    let ctx = backend.encode_text("a shape");
    let predict = || {
        backend
            .predict_noise_with_deltas(&x, &[20], &ctx, &Default::default())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap()
    };
    let before = (backend.weights_checksum(), predict());
    let _ = trained_library(&backend);
    assert_eq!((backend.weights_checksum(), predict()), before);
}

#[test]
fn sliders_train_independently_of_their_siblings() {
    let backend = quick_backend();
    let cfg = quick_pipeline();
    let encoder = EncoderRegistry::with_builtins().get(TOY_SEMANTIC_ID).unwrap();
    let plan = cfg.sampling_plan(&backend).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = RecordStore::new(dir.path());
    sample_to_store(&plan, &backend, encoder.as_ref(), &store).unwrap();
    let samples = store.load(&plan, backend.descriptor().latent_shape).unwrap();
    let directions = fit_pca(&samples.embedding_matrix().unwrap(), 2).unwrap();
    let corpus = training_corpus(&cfg, &samples, &backend).unwrap();
    let (all, _) = train_sliderspace(&directions, &corpus, &backend, encoder.as_ref(), &cfg.training, None).unwrap();
    let (alone, ..) =
        train_slider(&slider_id(1), 1, &directions, &corpus, &backend, encoder.as_ref(), &cfg.training, None).unwrap();
    assert_eq!(alone, all[1]);
}

#[test]
fn resumed_sampling_matches_uninterrupted_sampling() {
    let backend = quick_backend();
    let encoder = EncoderRegistry::with_builtins().get(TOY_SEMANTIC_ID).unwrap();
    let plan = SamplingPlan::new("a shape", 40, &backend);
    let full_dir = tempfile::tempdir().unwrap();
    let full = RecordStore::new(full_dir.path());
    sample_to_store(&plan, &backend, encoder.as_ref(), &full).unwrap();

    // Simulate a crash after the first chunk, with a torn second chunk on disk.
    let cut_dir = tempfile::tempdir().unwrap();
    for entry in fs::read_dir(full_dir.path()).unwrap() {
        let entry = entry.unwrap();
        fs::copy(entry.path(), cut_dir.path().join(entry.file_name())).unwrap();
    }
    let cursor_path = cut_dir.path().join("cursor.json");
    let mut cursor: serde_json::Value = serde_json::from_slice(&fs::read(&cursor_path).unwrap()).unwrap();
    let per_chunk_finals = 16;
    cursor["completed_chunks"] = 1.into();
    cursor["finals"] = per_chunk_finals.into();
    cursor["records"] = (per_chunk_finals * plan.timestep_subset.len()).into();
    fs::write(&cursor_path, serde_json::to_vec(&cursor).unwrap()).unwrap();
    let emb = cut_dir.path().join("embeddings.f32");
    let len = fs::metadata(&emb).unwrap().len();
    fs::OpenOptions::new().write(true).open(&emb).unwrap().set_len(len * 3 / 5).unwrap();

    let resumed = RecordStore::new(cut_dir.path());
    assert!(!resumed.is_complete(&plan).unwrap());
    sample_to_store(&plan, &backend, encoder.as_ref(), &resumed).unwrap();
    let shape = backend.descriptor().latent_shape;
    let a = full.load(&plan, shape).unwrap();
    let b = resumed.load(&plan, shape).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.finals, b.finals);
    assert_eq!(a.records.len(), plan.expected_records());
    assert_eq!(a.embedding_matrix().unwrap().rows, plan.prompts.len() * 40 * plan.timestep_subset.len());
}

#[test]
fn zero_sparsity_protocol_reports_equal_sets() {
    let backend = quick_backend();
    let (_dir, lib) = trained_library(&backend);
    let encoder = EncoderRegistry::with_builtins().get(TOY_SEMANTIC_ID).unwrap();
    let cfg = DiversityProtocolConfig {
        num_images: 6,
        k: 0,
        ..Default::default()
    };
    let report = diversity_protocol(&lib, &backend, encoder.as_ref(), &cfg).unwrap();
    assert_eq!(report.base_diversity.value, report.augmented_diversity.value);
    assert_eq!(report.base_alignment.value, report.augmented_alignment.value);
    assert_eq!(report.diversity_ratio(), 1.0);
}

#[test]
fn factor_correlation_contracts() {
    let backend = quick_backend();
    let lib = SliderLibrary::new("a shape", vec![zero_slider(&backend, "flat")]);
    let oracle = FactorOracleEncoder::default();
    let seeds: Vec<u64> = (0..20).collect();
    let scales = [-1.0, 0.0, 1.0];
    let report = factor_correlation(&lib, &backend, &oracle, &FactorOracleEncoder::FACTORS, "flat", &scales, &seeds, None, None).unwrap();
    assert_eq!(report.factors.len(), 4);
    for f in &report.factors {
        assert_eq!(f.rho, 0.0);
        assert_eq!(f.mean_seed_rho, 0.0);
        assert!(f.degenerate);
    }
    let single = factor_correlation(&lib, &backend, &oracle, &FactorOracleEncoder::FACTORS, "flat", &[1.0], &seeds, None, None);
    assert!(matches!(single, Err(Error::Validation(_))));
    let semantic = EncoderRegistry::with_builtins().get(TOY_SEMANTIC_ID).unwrap();
    let wrong = factor_correlation(&lib, &backend, semantic.as_ref(), &FactorOracleEncoder::FACTORS, "flat", &scales, &seeds, None, None);
    assert!(matches!(wrong, Err(Error::Capability(_))));
}

#[test]
fn registry_descriptors_are_stable() {
    let registry = EncoderRegistry::with_builtins();
    let first = registry.get(TOY_SEMANTIC_ID).unwrap().descriptor().clone();
    for _ in 0..3 {
        assert_eq!(registry.get(TOY_SEMANTIC_ID).unwrap().descriptor(), &first);
    }
    assert!(matches!(registry.get("nope"), Err(Error::NotFound(_))));
}

#[test]
fn unknown_slider_is_not_found() {
    let backend = quick_backend();
    let lib = SliderLibrary::new("a shape", vec![zero_slider(&backend, "only")]);
    let req = GenerationRequest::new("a shape", 0).with("missing", 1.0);
    match generate(&req, &lib, &backend) {
        Err(Error::NotFound(m)) => assert!(m.contains("missing")),
        other => panic!("expected not-found, got {:?}", other.map(|_| ())),
    }
}
