mod common;

use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine;
use serde_json::{json, Value};

use sliderspace_service::api::{ServiceConfig, MANIFEST_HASH_HEADER, REQUEST_ECHO_HEADER};

use common::{get, post_json, quick_fixture, send};

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

#[tokio::test]
async fn sliders_lists_every_slider_in_pc_order() {
    let fx = quick_fixture();
    let app = fx.router(ServiceConfig::default());
    let (res, body) = send(&app, get("/sliders")).await;
    assert_eq!(res.status(), StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    let sliders = v["sliders"].as_array().unwrap();
    assert_eq!(sliders.len(), 4);
    for (i, s) in sliders.iter().enumerate() {
        assert_eq!(s["pc_index"], i);
        assert_eq!(s["id"], format!("slider-{i:03}"));
        assert!(s["variance_share"].as_f64().unwrap() > 0.0);
    }
    assert_eq!(v["manifest_hash"], fx.space.manifest.hash());
}

#[tokio::test]
async fn every_response_carries_the_manifest_hash() {
    let fx = quick_fixture();
    let app = fx.router(ServiceConfig::default());
    let hash = fx.space.manifest.hash();
    for req in [
        get("/manifest"),
        get("/sliders"),
        get("/spectrum"),
        post_json("/generate", json!({"prompt": "a shape", "seed": 1})),
        post_json("/generate", json!({"prompt": "a shape", "seed": 1, "activations": {"missing": 1.0}})),
        post_json("/random", json!({"k": 2, "seed": 3})),
        get("/nowhere"),
    ] {
        let (res, _) = send(&app, req).await;
        assert_eq!(res.headers()[MANIFEST_HASH_HEADER], hash.as_str());
    }
    let (_, body) = send(&app, get("/manifest")).await;
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["manifest_hash"], hash);
    assert_eq!(v["manifest"]["n"], 4);
}

#[tokio::test]
async fn stale_manifest_hash_is_a_conflict() {
    let fx = quick_fixture();
    let app = fx.router(ServiceConfig::default());
    let mut req = post_json("/generate", json!({"prompt": "a shape", "seed": 1}));
    req.headers_mut().insert(MANIFEST_HASH_HEADER, "0000000000000000".parse().unwrap());
    let (res, body) = send(&app, req).await;
    assert_eq!(res.status(), StatusCode::CONFLICT);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["manifest_hash"], fx.space.manifest.hash());

    let mut fresh = get("/sliders");
    fresh.headers_mut().insert(MANIFEST_HASH_HEADER, fx.space.manifest.hash().parse().unwrap());
    assert_eq!(send(&app, fresh).await.0.status(), StatusCode::OK);
}

#[tokio::test]
async fn generate_is_deterministic_through_the_wire() {
    let fx = quick_fixture();
    let app = fx.router(ServiceConfig::default());
    let body = json!({"prompt": "a shape", "seed": 42, "activations": {}});
    let (a, first) = send(&app, post_json("/generate", body.clone())).await;
    let (_, second) = send(&app, post_json("/generate", body)).await;
    assert_eq!(a.status(), StatusCode::OK);
    assert_eq!(a.headers()["content-type"], "image/png");
    assert!(first.starts_with(PNG_MAGIC));
    assert_eq!(first, second);
    let echo: Value = serde_json::from_str(a.headers()[REQUEST_ECHO_HEADER].to_str().unwrap()).unwrap();
    assert_eq!(echo["request"]["seed"], 42);
}

#[tokio::test]
async fn sliders_change_the_image() {
    let fx = quick_fixture();
    let app = fx.router(ServiceConfig::default());
    let (_, base) = send(&app, post_json("/generate", json!({"prompt": "a shape", "seed": 4}))).await;
    let (_, moved) = send(
        &app,
        post_json("/generate", json!({"prompt": "a shape", "seed": 4, "activations": {"slider-000": 3.0}})),
    )
    .await;
    assert_ne!(base, moved);
}

#[tokio::test]
async fn unknown_slider_is_404_naming_the_id() {
    let fx = quick_fixture();
    let app = fx.router(ServiceConfig::default());
    let (res, body) = send(
        &app,
        post_json("/generate", json!({"prompt": "a shape", "seed": 0, "activations": {"missing": 1.0}})),
    )
    .await;
    assert_eq!(res.status(), StatusCode::NOT_FOUND);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert!(v["error"].as_str().unwrap().contains("missing"));
    assert_eq!(v["field"], "activations.missing");
}

#[tokio::test]
async fn out_of_range_scale_is_400_with_field_path() {
    let fx = quick_fixture();
    let app = fx.router(ServiceConfig::default());
    let (res, body) = send(
        &app,
        post_json("/generate", json!({"prompt": "a shape", "seed": 0, "activations": {"slider-002": 9.5}})),
    )
    .await;
    assert_eq!(res.status(), StatusCode::BAD_REQUEST);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["field"], "activations.slider-002");

    let (res, body) = send(
        &app,
        post_json(
            "/grid",
            json!({"prompt": "a shape", "seeds": [1], "activations": [{}, {"slider-001": -7.0}]}),
        ),
    )
    .await;
    assert_eq!(res.status(), StatusCode::BAD_REQUEST);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["field"], "activations[1].slider-001");
}

#[tokio::test]
async fn malformed_bodies_and_gates_are_400() {
    let fx = quick_fixture();
    let app = fx.router(ServiceConfig::default());
    let req = Request::post("/generate").body(Body::from("{not json")).unwrap();
    assert_eq!(send(&app, req).await.0.status(), StatusCode::BAD_REQUEST);
    let gate = json!({"prompt": "a shape", "seed": 0, "gate": {"start_step": 10, "end_step": 99}});
    assert_eq!(send(&app, post_json("/generate", gate)).await.0.status(), StatusCode::BAD_REQUEST);
    let fmt = post_json("/generate?format=gif", json!({"prompt": "a shape", "seed": 0}));
    assert_eq!(send(&app, fmt).await.0.status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn base64_variant_matches_png_bytes() {
    let fx = quick_fixture();
    let app = fx.router(ServiceConfig::default());
    let body = json!({"prompt": "a shape", "seed": 8, "activations": {"slider-001": 1.0}});
    let (_, png) = send(&app, post_json("/generate", body.clone())).await;
    let (res, doc) = send(&app, post_json("/generate?format=base64", body.clone())).await;
    assert_eq!(res.status(), StatusCode::OK);
    let v: Value = serde_json::from_slice(&doc).unwrap();
    let decoded = base64::engine::general_purpose::STANDARD
        .decode(v["image_base64"].as_str().unwrap())
        .unwrap();
    assert_eq!(decoded, png);
    assert_eq!(v["request"]["request"]["seed"], 8);

    let mut negotiated = post_json("/generate", body);
    negotiated.headers_mut().insert("accept", "application/json".parse().unwrap());
    let (res, _) = send(&app, negotiated).await;
    assert_eq!(res.headers()["content-type"], "application/json");
}

#[tokio::test]
async fn grid_sheet_matches_individual_cells() {
    let fx = quick_fixture();
    let app = fx.router(ServiceConfig::default());
    let (res, sheet) = send(
        &app,
        post_json(
            "/grid",
            json!({"prompt": "a shape", "seeds": [1, 2, 3], "activations": [{}, {"slider-000": 1.0}]}),
        ),
    )
    .await;
    assert_eq!(res.status(), StatusCode::OK);
    let sheet = image::load_from_memory(&sheet).unwrap().to_rgb8();
    let (_, cell) = send(
        &app,
        post_json("/generate", json!({"prompt": "a shape", "seed": 2, "activations": {"slider-000": 1.0}})),
    )
    .await;
    let cell = image::load_from_memory(&cell).unwrap().to_rgb8();
    let (w, h) = cell.dimensions();
    // Cells are separated by a one-pixel gutter.
    assert_eq!(sheet.dimensions(), (3 * w + 2, 2 * h + 1));
    for y in 0..h {
        for x in 0..w {
            assert_eq!(sheet.get_pixel(w + 1 + x, h + 1 + y), cell.get_pixel(x, y));
        }
    }

    let too_big = json!({"prompt": "a shape", "seeds": (0..65).collect::<Vec<u64>>(), "activations": [{}]});
    assert_eq!(send(&app, post_json("/grid", too_big)).await.0.status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn random_returns_sparse_activations() {
    let fx = quick_fixture();
    let app = fx.router(ServiceConfig::default());
    let (res, body) = send(&app, post_json("/random", json!({"k": 3, "seed": 5}))).await;
    assert_eq!(res.status(), StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    let acts = v["activations"].as_object().unwrap();
    assert_eq!(acts.values().filter(|s| s.as_f64().unwrap() != 0.0).count(), 3);
    let (_, again) = send(&app, post_json("/random", json!({"k": 3, "seed": 5}))).await;
    assert_eq!(serde_json::from_slice::<Value>(&again).unwrap()["activations"], v["activations"]);

    let (_, zero) = send(&app, post_json("/random", json!({"k": 0}))).await;
    let zero: Value = serde_json::from_slice(&zero).unwrap();
    assert!(zero["activations"].as_object().unwrap().values().all(|s| s.as_f64().unwrap() == 0.0));

    let (res, body) = send(&app, post_json("/random", json!({"k": 9}))).await;
    assert_eq!(res.status(), StatusCode::BAD_REQUEST);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["field"], "k");
}

#[tokio::test]
async fn spectrum_is_cumulative() {
    let fx = quick_fixture();
    let app = fx.router(ServiceConfig::default());
    let (_, body) = send(&app, get("/spectrum")).await;
    let v: Value = serde_json::from_slice(&body).unwrap();
    let entries = v["spectrum"].as_array().unwrap();
    assert_eq!(entries.len(), 4);
    let mut last = 0.0;
    for e in entries {
        let c = e["cumulative_ratio"].as_f64().unwrap();
        assert!(c >= last && c <= 1.0);
        last = c;
    }
    assert_eq!(v["encoder_id"], "toy-semantic");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn queue_overflow_is_429_and_recovers() {
    let fx = quick_fixture();
    let app = fx.router(ServiceConfig {
        workers: 1,
        queue_depth: 0,
        deadline: Duration::from_secs(30),
        ..ServiceConfig::default()
    });
    let mut handles = Vec::new();
    for seed in 0..8u64 {
        let app = app.clone();
        handles.push(tokio::spawn(async move {
            let body = json!({"prompt": "a shape", "seed": seed, "activations": {"slider-000": 1.0}});
            send(&app, post_json("/generate", body)).await.0.status()
        }));
    }
    let mut statuses = Vec::new();
    for h in handles {
        statuses.push(h.await.unwrap());
    }
    assert!(statuses.contains(&StatusCode::TOO_MANY_REQUESTS), "{statuses:?}");
    assert!(statuses.contains(&StatusCode::OK), "{statuses:?}");
    let (res, _) = send(&app, post_json("/generate", json!({"prompt": "a shape", "seed": 0}))).await;
    assert_eq!(res.status(), StatusCode::OK);
}
