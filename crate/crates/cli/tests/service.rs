mod common;

use std::sync::Arc;

use affectsynth::container::load_morphable_model;
use affectsynth::va_grid::CellIndex;
use affectsynth_cli::pipeline::{fit_photo, load_photo, process_image, render_request};
use affectsynth_cli::service::{router, AppState};
use affectsynth_cli::synth::{render_preview, synthesize, SynthRequest};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine;
use common::{small_config, workspace, Workspace};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn state(ws: &Workspace) -> Arc<AppState> {
    let model = load_morphable_model(ws.manifest.morphable_model_path().unwrap()).unwrap();
    Arc::new(AppState::new(
        ws.gallery.clone(),
        Some(model),
        ws.cfg.fit,
        ws.cfg.synthesis.intensity,
        ws.cfg.synthesis.preview_size,
    ))
}

async fn call(state: &Arc<AppState>, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn post_json(state: &Arc<AppState>, path: &str, body: &str) -> (StatusCode, Value) {
    let req = Request::post(path)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let (status, bytes) = call(state, req).await;
    (status, serde_json::from_slice(&bytes).unwrap())
}

async fn get(state: &Arc<AppState>, path: &str) -> (StatusCode, Vec<u8>) {
    call(state, Request::get(path).body(Body::empty()).unwrap()).await
}

fn decode_png(v: &Value) -> Vec<u8> {
    base64::engine::general_purpose::STANDARD
        .decode(v["image_png_base64"].as_str().unwrap())
        .unwrap()
}

fn multipart(parts: &[(&str, &[u8])]) -> Request<Body> {
    let boundary = "XaffectsynthX";
    let mut body = Vec::new();
    for (name, bytes) in parts {
        body.extend_from_slice(
            format!("--{boundary}\r\nContent-Disposition: form-data; name=\"{name}\"; filename=\"{name}\"\r\nContent-Type: application/octet-stream\r\n\r\n").as_bytes(),
        );
        body.extend_from_slice(bytes);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    Request::post("/session")
        .header("content-type", format!("multipart/form-data; boundary={boundary}"))
        .body(Body::from(body))
        .unwrap()
}

#[tokio::test]
async fn health_and_grid_match_the_built_gallery() {
    let ws = workspace(small_config(21));
    let st = state(&ws);
    let (status, body) = get(&st, "/health").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap(), json!({"status": "ok"}));

    let (status, body) = get(&st, "/grid").await;
    assert_eq!(status, StatusCode::OK);
    let grid: Value = serde_json::from_slice(&body).unwrap();
    let counts: Vec<Vec<usize>> = serde_json::from_value(grid["counts"].clone()).unwrap();
    let hist = ws.gallery.histogram();
    assert_eq!(counts, hist.iter().map(|r| r.to_vec()).collect::<Vec<_>>());
    for (r, row) in grid["medians"].as_array().unwrap().iter().enumerate() {
        for (c, m) in row.as_array().unwrap().iter().enumerate() {
            match ws.gallery.cells.get(&CellIndex { row: r, col: c }) {
                Some(cell) => assert_eq!(m, &json!([cell.median.0, cell.median.1])),
                None => assert!(m.is_null()),
            }
        }
    }
}

#[tokio::test]
async fn synthesize_without_session_renders_the_template_at_zero_intensity() {
    let ws = workspace(small_config(22));
    let st = state(&ws);
    let (status, v) = post_json(&st, "/synthesize", r#"{"valence": 0, "arousal": 0, "intensity": 0}"#).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let expected = render_preview(&ws.gallery.template, ws.cfg.synthesis.preview_size)
        .unwrap()
        .to_png_bytes()
        .unwrap();
    assert_eq!(decode_png(&v), expected);
    let s = synthesize(&ws.gallery, &SynthRequest { valence: 0.0, arousal: 0.0, intensity: 0.0 }).unwrap();
    assert_eq!(v["cell"], json!({"row": s.cell.row, "col": s.cell.col}));
    assert_eq!(v["median_va"], json!([s.median_va.0, s.median_va.1]));

    // mesh_url serves the same mesh as the library call
    let (status, obj) = get(&st, v["mesh_url"].as_str().unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(String::from_utf8(obj).unwrap(), ws.gallery.template.to_obj_string());
}

#[tokio::test]
async fn synthesize_matches_the_cli_code_path_byte_for_byte() {
    let ws = workspace(small_config(23));
    let st = state(&ws);
    let req = SynthRequest { valence: -0.35, arousal: 0.62, intensity: 1.3 };
    let body = serde_json::to_string(&req).unwrap();
    let (status, v) = post_json(&st, "/synthesize", &body).await;
    assert_eq!(status, StatusCode::OK);
    let (_, image) = render_request(&ws.gallery, None, &req, ws.cfg.synthesis.preview_size).unwrap();
    assert_eq!(decode_png(&v), image.to_png_bytes().unwrap());
}

#[tokio::test]
async fn invalid_requests_get_structured_errors() {
    let ws = workspace(small_config(24));
    let st = state(&ws);
    let cases = [
        (r#"{"valence": 1.7, "arousal": 0}"#, StatusCode::UNPROCESSABLE_ENTITY, Some("valence")),
        (r#"{"valence": 0, "arousal": -3}"#, StatusCode::UNPROCESSABLE_ENTITY, Some("arousal")),
        (r#"{"valence": 0, "arousal": 0, "intensity": 2}"#, StatusCode::UNPROCESSABLE_ENTITY, Some("intensity")),
        (r#"{"valence": "high", "arousal": 0}"#, StatusCode::UNPROCESSABLE_ENTITY, Some("valence")),
        (r#"{"arousal": 0}"#, StatusCode::UNPROCESSABLE_ENTITY, Some("valence")),
        (r#"{"valence": 0, "arousal": 0, "colour": 1}"#, StatusCode::UNPROCESSABLE_ENTITY, Some("colour")),
        (r#"{"valence": 0, "arousal": 0, "session": 7}"#, StatusCode::UNPROCESSABLE_ENTITY, Some("session")),
        (r#"{"valence": 0, "arousal": 0, "session": "missing"}"#, StatusCode::NOT_FOUND, Some("session")),
        (r#"{"valence": 0,"#, StatusCode::BAD_REQUEST, None),
        (r#"[1, 2]"#, StatusCode::BAD_REQUEST, None),
    ];
    for (body, status, field) in cases {
        let (got, v) = post_json(&st, "/synthesize", body).await;
        assert_eq!(got, status, "{body} -> {v}");
        assert!(v["error"].as_str().is_some_and(|e| !e.is_empty()), "{v}");
        assert_eq!(v["field"].as_str(), field, "{body} -> {v}");
    }
}

#[tokio::test]
async fn session_synthesis_matches_process_image_output() {
    let ws = workspace(small_config(25));
    let st = state(&ws);
    let (img, lm) = ws.fixture();
    let png = std::fs::read(&img).unwrap();
    let csv = std::fs::read(&lm).unwrap();

    let (status, body) = call(&st, multipart(&[("image", &png), ("landmarks", &csv)])).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let id = serde_json::from_slice::<Value>(&body).unwrap()["session"].as_str().unwrap().to_string();
    let (_, again) = call(&st, multipart(&[("image", &png), ("landmarks", &csv)])).await;
    assert_eq!(serde_json::from_slice::<Value>(&again).unwrap()["session"], json!(id));

    let model = load_morphable_model(ws.manifest.morphable_model_path().unwrap()).unwrap();
    for req in [
        SynthRequest { valence: 0.45, arousal: 0.3, intensity: 1.0 },
        SynthRequest { valence: -0.2, arousal: -0.6, intensity: 0.5 },
    ] {
        let body = json!({"valence": req.valence, "arousal": req.arousal, "intensity": req.intensity, "session": id});
        let (status, v) = post_json(&st, "/synthesize", &body.to_string()).await;
        assert_eq!(status, StatusCode::OK, "{v}");
        let out = ws.path().join("cli.png");
        process_image(&img, &lm, &model, &ws.gallery, &ws.cfg.fit, &req, &out).unwrap();
        let served = decode_png(&v);
        assert_eq!(served, std::fs::read(&out).unwrap());
        // and the library path through a separately fitted photo
        let (image, landmarks) = load_photo(&img, &lm, model.mean().n_vertices()).unwrap();
        let photo = fit_photo(image, landmarks, &model, &ws.cfg.fit).unwrap();
        let (_, direct) = render_request(&ws.gallery, Some(&photo), &req, 0).unwrap();
        assert_eq!(served, direct.to_png_bytes().unwrap());
    }
}

#[tokio::test]
async fn bad_session_uploads_are_rejected() {
    let ws = workspace(small_config(26));
    let st = state(&ws);
    let (img, _) = ws.fixture();
    let png = std::fs::read(&img).unwrap();

    let (status, body) = call(&st, multipart(&[("image", &png)])).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["field"], "landmarks");

    let (status, body) = call(&st, multipart(&[("image", b"not a png"), ("landmarks", b"vertex_index,x_px,y_px\n")])).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["stage"], "load-image");

    let (status, body) = call(&st, multipart(&[("image", &png), ("landmarks", b"vertex_index,x_px,y_px\n0,1,2\n")])).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["stage"], "load-landmarks");
}

#[tokio::test]
async fn concurrent_requests_agree() {
    let ws = workspace(small_config(27));
    let st = state(&ws);
    let body = r#"{"valence": 0.3, "arousal": 0.2, "intensity": 1}"#;
    let tasks: Vec<_> = (0..8)
        .map(|_| {
            let st = st.clone();
            tokio::spawn(async move { post_json(&st, "/synthesize", body).await })
        })
        .collect();
    let mut images = Vec::new();
    for t in tasks {
        let (status, v) = t.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        images.push(decode_png(&v));
    }
    assert!(images.windows(2).all(|w| w[0] == w[1]));
}
