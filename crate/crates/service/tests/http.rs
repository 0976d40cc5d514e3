use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use layered_core::compositor::{composite_color, degrade_color_map, flatten, ColorStroke, LayerStack, DEFAULT_STROKE_ALPHA};
use layered_core::{Mask, Raster};
use layered_dit::{ToyDit, ToyModelConfig};
use layered_service::{router, AppState, LoadedModel, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

fn base_image(w: usize, h: usize) -> Raster {
    Raster::from_fn(w, h, 3, |x, y, c| ((x * 7 + y * 3 + c * 50) % 256) as f64 / 255.0)
}

fn b64_png(r: &Raster) -> String {
    STANDARD.encode(r.to_png_bytes().unwrap())
}

fn tiny_model() -> LoadedModel {
    let cfg = ToyModelConfig { image_size: 8, d_model: 16, mlp_ratio: 2, lora_rank_content: 4, lora_rank_control: 8, cue_resolution: 8, ..Default::default() };
    let mut m = ToyDit::new(cfg, 3).unwrap();
    m.randomize_lora(4, 0.3);
    LoadedModel::new(m)
}

fn app(model: Option<LoadedModel>, strict: bool) -> Router {
    router(AppState::new(ServiceConfig { max_image_side: 64, strict_sigma_zero: strict, ..Default::default() }, model))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>, if_match: Option<u64>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(r) = if_match {
        req = req.header("if-match", format!("\"{r}\""));
    }
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let v = serde_json::from_slice(&bytes).unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, v)
}

async fn raw(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(Request::get(uri).body(Body::empty()).unwrap()).await.unwrap();
    let s = resp.status();
    (s, axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn create(app: &Router, img: &Raster) -> String {
    let (s, v) = call(app, "POST", "/sessions", Some(json!({ "image": b64_png(img) })), None).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    v["id"].as_str().unwrap().to_string()
}

fn decode(v: &Value) -> Raster {
    Raster::from_png_bytes(&STANDARD.decode(v.as_str().unwrap()).unwrap()).unwrap()
}

#[tokio::test]
async fn create_get_and_unknown() {
    let app = app(None, false);
    let a = create(&app, &base_image(20, 16)).await;
    let b = create(&app, &base_image(20, 16)).await;
    assert_ne!(a, b);
    let (s, v) = call(&app, "GET", &format!("/sessions/{a}"), None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["revision"], 0);
    assert_eq!(v["stack"]["layers"].as_array().unwrap().len(), 0);
    let (s, v) = call(&app, "GET", "/sessions/nope", None, None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"], "not_found");
}

#[tokio::test]
async fn bad_images_are_client_errors() {
    let app = app(None, false);
    let (s, _) = call(&app, "POST", "/sessions", Some(json!({ "image": b64_png(&base_image(65, 8)) })), None).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
    let (s, v) = call(&app, "POST", "/sessions", Some(json!({ "image": STANDARD.encode(b"not a png") })), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST, "{v}");
    let (s, _) = call(&app, "POST", "/sessions", Some(json!({ "picture": "x" })), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn color_stroke_uses_default_alpha_end_to_end() {
    let app = app(None, false);
    let img = base_image(24, 20);
    let id = create(&app, &img).await;
    let (_, empty) = call(&app, "POST", &format!("/sessions/{id}/composite"), None, None).await;

    let (s, v) = call(&app, "POST", &format!("/sessions/{id}/layers"), Some(json!({ "kind": "color" })), Some(0)).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    let lid = v["layer_id"].as_str().unwrap().to_string();
    let stroke = json!({ "points": [[4.0, 5.0], [18.0, 12.0]], "radius": 3.0, "color": "#20c040" });
    let (s, v) = call(&app, "PATCH", &format!("/sessions/{id}/layers/{lid}"), Some(json!({ "strokes": [stroke] })), Some(1)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["revision"], 2);
    assert_ne!(v["digests"]["y"], Value::Null);
    assert_ne!(v["digests"]["colors"], empty["digests"]["colors"]);

    let (_, state) = call(&app, "GET", &format!("/sessions/{id}"), None, None).await;
    assert_eq!(state["stack"]["layers"][0]["strokes"][0]["alpha"], json!(0.4));

    // Direct arithmetic on the degraded map with α = 0.4.
    let (_, c) = call(&app, "POST", &format!("/sessions/{id}/composite"), None, None).await;
    let served = decode(&c["colors"]);
    let mask = layered_core::compositor::rasterize_stroke(&[[4.0, 5.0], [18.0, 12.0]], 3.0, 24, 20).unwrap();
    let rgb = [0x20 as f64 / 255.0, 0xc0 as f64 / 255.0, 0x40 as f64 / 255.0];
    let degraded = degrade_color_map(&img, 24, 20);
    let oracle = Raster::from_fn(24, 20, 3, |x, y, k| {
        let v = degraded.get(x, y, k);
        if mask.get(x, y) { 0.4 * rgb[k] + 0.6 * v } else { v }
    });
    assert_eq!(DEFAULT_STROKE_ALPHA, 0.4);
    let lib = composite_color(&degraded, &[ColorStroke { mask, color: rgb, alpha: 0.4 }]).unwrap();
    assert_eq!(served, Raster::from_png_bytes(&oracle.to_png_bytes().unwrap()).unwrap());
    assert_eq!(served, Raster::from_png_bytes(&lib.to_png_bytes().unwrap()).unwrap());
}

#[tokio::test]
async fn deleting_the_only_layer_restores_empty_digests() {
    let app = app(None, false);
    let id = create(&app, &base_image(16, 16)).await;
    let (_, empty) = call(&app, "POST", &format!("/sessions/{id}/composite"), None, None).await;
    let layer = json!({ "kind": "spatial", "strokes": [{ "points": [[8.0, 8.0]], "radius": 3.0 }] });
    let (_, v) = call(&app, "POST", &format!("/sessions/{id}/layers"), Some(layer), None).await;
    assert_ne!(v["digests"]["mask"], Value::Null);
    let lid = v["layer_id"].as_str().unwrap();
    let (s, v) = call(&app, "DELETE", &format!("/sessions/{id}/layers/{lid}"), None, Some(1)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["digests"], empty["digests"]);
    assert_eq!(v["revision"], 2);
}

#[tokio::test]
async fn stale_if_match_conflicts_without_mutating() {
    let app = app(None, false);
    let id = create(&app, &base_image(16, 16)).await;
    let (s, _) = call(&app, "POST", &format!("/sessions/{id}/layers"), Some(json!({ "kind": "spatial" })), Some(0)).await;
    assert_eq!(s, StatusCode::CREATED);
    let (s, v) = call(&app, "POST", &format!("/sessions/{id}/layers"), Some(json!({ "kind": "color" })), Some(0)).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"], "revision_conflict");
    let (s, _) = call(&app, "PATCH", &format!("/sessions/{id}/layers/layer-0"), Some(json!({ "sigma": 2.0 })), Some(0)).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (_, st) = call(&app, "GET", &format!("/sessions/{id}"), None, None).await;
    assert_eq!(st["revision"], 1);
    assert_eq!(st["stack"]["layers"].as_array().unwrap().len(), 1);
    assert_eq!(st["stack"]["layers"][0]["sigma"], json!(1.0));
}

#[tokio::test]
async fn schema_violations_are_rejected() {
    let app = app(None, false);
    let id = create(&app, &base_image(16, 16)).await;
    let (s, _) = call(&app, "POST", &format!("/sessions/{id}/layers"), Some(json!({ "kind": "glitter" })), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "POST", &format!("/sessions/{id}/layers"), Some(json!({ "kind": "spatial", "sigma": -2.0 })), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let small = b64_png(&Raster::new(4, 4, 1));
    let (s, _) = call(&app, "POST", &format!("/sessions/{id}/layers"), Some(json!({ "kind": "structural", "edges": small })), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (_, st) = call(&app, "GET", &format!("/sessions/{id}"), None, None).await;
    assert_eq!(st["revision"], 0);
}

#[tokio::test]
async fn composite_matches_direct_flatten_and_is_stable() {
    let app = app(None, false);
    let img = base_image(32, 24);
    let id = create(&app, &img).await;
    let piece = Raster::solid_rgb(6, 5, [1.0, 0.0, 0.0]);
    let layers = [
        json!({ "kind": "content", "piece": b64_png(&piece), "placement": { "x": 10.0, "y": 9.0, "rotation": 15.0 } }),
        json!({ "kind": "structural", "add": [{ "points": [[2.0, 2.0], [30.0, 20.0]], "radius": 1.5 }],
                "subtract": [{ "points": [[16.0, 12.0]], "radius": 5.0 }], "sigma": 2.0 }),
        json!({ "kind": "spatial", "strokes": [{ "points": [[20.0, 10.0]], "radius": 4.0 }], "sigma": 0.5 }),
    ];
    for l in &layers {
        let (s, v) = call(&app, "POST", &format!("/sessions/{id}/layers"), Some(l.clone()), None).await;
        assert_eq!(s, StatusCode::CREATED, "{v}");
    }
    let (_, st) = call(&app, "GET", &format!("/sessions/{id}"), None, None).await;
    let stack: LayerStack = serde_json::from_value(st["stack"].clone()).unwrap();
    let direct = flatten(&img, &stack).unwrap();

    let (_, c1) = call(&app, "POST", &format!("/sessions/{id}/composite"), None, None).await;
    let (_, c2) = call(&app, "POST", &format!("/sessions/{id}/composite"), None, None).await;
    assert_eq!(c1, c2);
    assert_eq!(decode(&c1["y"]), Raster::from_png_bytes(&direct.image.to_png_bytes().unwrap()).unwrap());
    assert_eq!(decode(&c1["edges"]), Raster::from_png_bytes(&direct.edges.unwrap().to_png_bytes().unwrap()).unwrap());
    let m = Mask::from_png_bytes(&STANDARD.decode(c1["mask"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!(m, direct.mask.unwrap());
    assert_eq!(c1["strengths"], json!({ "spatial": 0.5, "structural": 2.0 }));

    let (s, png) = raw(&app, &format!("/sessions/{id}/maps/edges")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(STANDARD.encode(png), c1["edges"].as_str().unwrap());
    assert_eq!(raw(&app, &format!("/sessions/{id}/maps/colors")).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn out_of_bounds_content_surfaces_compositor_error() {
    let app = app(None, false);
    let id = create(&app, &base_image(16, 16)).await;
    let piece = b64_png(&Raster::solid_rgb(3, 3, [0.0, 0.0, 1.0]));
    let (s, v) = call(&app, "POST", &format!("/sessions/{id}/layers"), Some(json!({ "kind": "content", "piece": piece, "placement": { "x": 100.0, "y": 100.0 } })), None).await;
    assert_eq!(s, StatusCode::CREATED);
    assert!(v["composite_error"].as_str().unwrap().contains("outside the canvas"));
    let (s, v) = call(&app, "POST", &format!("/sessions/{id}/composite"), None, None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["message"].as_str().unwrap().contains("layer-0"));
}

#[tokio::test]
async fn sessions_are_isolated_and_export_round_trips() {
    let app = app(None, false);
    let a = create(&app, &base_image(16, 16)).await;
    let b = create(&app, &base_image(16, 16)).await;
    let (_, before) = call(&app, "GET", &format!("/sessions/{b}"), None, None).await;
    call(&app, "POST", &format!("/sessions/{a}/layers"), Some(json!({ "kind": "color", "strokes": [{ "points": [[3.0, 3.0]], "radius": 2.0, "color": "#ffffff" }] })), None).await;
    call(&app, "POST", &format!("/sessions/{a}/layers"), Some(json!({ "kind": "structural" })), None).await;
    let (_, after) = call(&app, "GET", &format!("/sessions/{b}"), None, None).await;
    assert_eq!(before["digests"], after["digests"]);

    let (_, export) = call(&app, "GET", &format!("/sessions/{a}/export"), None, None).await;
    let (s, imported) = call(&app, "POST", "/sessions/import", Some(export), None).await;
    assert_eq!(s, StatusCode::CREATED);
    let (_, orig) = call(&app, "GET", &format!("/sessions/{a}"), None, None).await;
    assert_ne!(imported["id"], orig["id"]);
    assert_eq!(imported["digests"], orig["digests"]);
    assert_eq!(imported["revision"], orig["revision"]);
    assert_eq!(imported["base_digest"], orig["base_digest"]);
}

#[tokio::test]
async fn generate_without_checkpoint_is_503_with_hint() {
    let app = app(None, false);
    let id = create(&app, &base_image(16, 16)).await;
    let (s, v) = call(&app, "POST", &format!("/sessions/{id}/generate"), Some(json!({ "seed": 1 })), None).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert!(v["hint"].as_str().unwrap().contains("--checkpoint"));
}

async fn color_session(app: &Router) -> (String, String) {
    let id = create(app, &base_image(16, 16)).await;
    let layer = json!({ "kind": "color", "strokes": [{ "points": [[2.0, 2.0], [13.0, 13.0]], "radius": 3.0, "color": "#ff2000" }] });
    let (_, v) = call(app, "POST", &format!("/sessions/{id}/layers"), Some(layer), None).await;
    (id, v["layer_id"].as_str().unwrap().to_string())
}

#[tokio::test]
async fn generation_is_deterministic_and_steps_matter() {
    let app = app(Some(tiny_model()), false);
    let (id, _) = color_session(&app).await;
    let gen = |seed: u64, steps: usize| {
        let app = app.clone();
        let id = id.clone();
        async move { call(&app, "POST", &format!("/sessions/{id}/generate"), Some(json!({ "seed": seed, "steps": steps })), None).await }
    };
    let (s, a) = gen(7, 20).await;
    assert_eq!(s, StatusCode::OK, "{a}");
    let (_, b) = gen(7, 20).await;
    assert_eq!(a["image"], b["image"]);
    assert_eq!((a["seed"].as_u64(), a["steps"].as_u64()), (Some(7), Some(20)));
    assert_eq!(a["sigmas"], json!({ "color": 1.0 }));
    assert_eq!((a["width"].as_u64(), a["height"].as_u64()), (Some(16), Some(16)));
    assert!(a["checkpoint"].as_str().is_some_and(|t| t.len() == 16));
    let (_, one) = gen(7, 1).await;
    assert_ne!(one["image"], a["image"]);
    let (_, other_seed) = gen(8, 20).await;
    assert_ne!(other_seed["image"], a["image"]);

    let (s, png) = raw(&app, &format!("/sessions/{id}/result")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(STANDARD.encode(png), other_seed["image"].as_str().unwrap());
    let (s, _) = call(&app, "POST", &format!("/sessions/{id}/generate"), Some(json!({ "steps": 0 })), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn sigma_zero_strict_equals_removing_the_cue() {
    let app = app(Some(tiny_model()), true);
    let (id, lid) = color_session(&app).await;
    let gen = || async { call(&app, "POST", &format!("/sessions/{id}/generate"), Some(json!({ "seed": 3 })), None).await.1 };
    let with_cue = gen().await;
    let (s, _) = call(&app, "PATCH", &format!("/sessions/{id}/layers/{lid}"), Some(json!({ "sigma": 0.0 })), None).await;
    assert_eq!(s, StatusCode::OK);
    let disabled = gen().await;
    assert_eq!(disabled["sigmas"], json!({ "color": 0.0 }));
    assert_ne!(disabled["image"], with_cue["image"]);
    let (_, st) = call(&app, "GET", &format!("/sessions/{id}"), None, None).await;
    assert_eq!(st["stack"]["layers"].as_array().unwrap().len(), 1);
    call(&app, "DELETE", &format!("/sessions/{id}/layers/{lid}"), None, None).await;
    let removed = gen().await;
    assert_eq!(disabled["image"], removed["image"]);
}

#[tokio::test]
async fn result_can_become_the_new_base() {
    let app = app(Some(tiny_model()), false);
    let (id, _) = color_session(&app).await;
    let (s, _) = call(&app, "PUT", &format!("/sessions/{id}/base"), Some(json!({ "from_result": true })), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (_, g) = call(&app, "POST", &format!("/sessions/{id}/generate"), Some(json!({ "seed": 1 })), None).await;
    let (s, v) = call(&app, "PUT", &format!("/sessions/{id}/base"), Some(json!({ "from_result": true })), Some(1)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["revision"], 2);
    let (_, st) = call(&app, "GET", &format!("/sessions/{id}"), None, None).await;
    assert_eq!(st["base_digest"], g["digest"]);
}

#[tokio::test]
async fn health_openapi_and_index() {
    let app = app(None, false);
    let (s, v) = call(&app, "GET", "/healthz", None, None).await;
    assert_eq!((s, v["status"].as_str()), (StatusCode::OK, Some("ok")));
    let (s, body) = raw(&app, "/openapi.yaml").await;
    assert_eq!(s, StatusCode::OK);
    let text = String::from_utf8(body).unwrap();
    for path in ["/sessions/{id}/layers/{lid}", "/sessions/{id}/composite", "/sessions/{id}/generate", "/healthz"] {
        assert!(text.contains(&format!("  {path}:")), "{path} undocumented");
    }
    assert_eq!(raw(&app, "/").await.0, StatusCode::OK);
}

#[tokio::test]
async fn static_dir_is_served_at_root() {
    let dir = tempfile_dir();
    std::fs::write(dir.join("index.html"), "<html>ui</html>").unwrap();
    let app = router(AppState::new(ServiceConfig { static_dir: Some(dir.clone()), ..Default::default() }, None));
    let (s, body) = raw(&app, "/").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, b"<html>ui</html>");
    assert_eq!(call(&app, "GET", "/healthz", None, None).await.0, StatusCode::OK);
    std::fs::remove_dir_all(dir).unwrap();
}

fn tempfile_dir() -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("layered-static-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}
