use std::path::Path;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

use barmorph::attributes::AttributeBins;
use barmorph::bundle::{ModelBundle, ModelKind};
use barmorph::corpus::synthetic_piece;
use barmorph::midi::{parse_midi, write_midi, Bar, Note, QuantizedScore};
use barmorph::remi::Vocab;
use barmorph::service::{Service, ServiceConfig};
use barmorph::transformer::{ConditioningMode, ModelConfig};

fn midi(bars: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    write_midi(&synthetic_piece(bars, &mut rng))
}

fn one_note_midi() -> Vec<u8> {
    let bar = Bar {
        notes: vec![Note {
            sub_beat: 4,
            pitch: 60,
            velocity_class: 10,
            duration_units: 4,
        }],
        tempos: vec![],
    };
    write_midi(&QuantizedScore::new(16, vec![bar]))
}

/// Format-0 file in 3/4 with one note.
fn waltz_midi() -> Vec<u8> {
    let mut track = vec![0x00, 0xFF, 0x58, 0x04, 0x03, 0x02, 0x18, 0x08];
    track.extend([0x00, 0x90, 60, 100, 0x83, 0x60, 0x80, 60, 0]);
    track.extend([0x00, 0xFF, 0x2F, 0x00]);
    let mut out = b"MThd".to_vec();
    out.extend([0, 0, 0, 6, 0, 0, 0, 1, 0x01, 0xE0]);
    out.extend(b"MTrk");
    out.extend((track.len() as u32).to_be_bytes());
    out.extend(track);
    out
}

fn save_checkpoint(path: &Path, seed: u64) {
    let mut cfg = ModelConfig::tiny(Vocab::new(16).len(), ConditioningMode::InAttention);
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = ModelBundle::init(ModelKind::Style, cfg, AttributeBins::reference(), 16, &mut rng).unwrap();
    b.extra.insert("train.k_crop", 4);
    b.save(path).unwrap();
}

async fn call(app: &Router, method: &str, uri: &str, body: Body, ctype: &str) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", ctype)
        .body(body)
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b) = call(app, "GET", uri, Body::empty(), "application/json").await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn post_json(app: &Router, uri: &str, v: Value) -> (StatusCode, Value) {
    let (s, b) = call(app, "POST", uri, Body::from(v.to_string()), "application/json").await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn upload(app: &Router, bytes: Vec<u8>) -> (StatusCode, Value) {
    let (s, b) = call(app, "POST", "/pieces", Body::from(bytes), "application/octet-stream").await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn wait_done(app: &Router, id: &str) -> Value {
    for _ in 0..600 {
        let (s, v) = get_json(app, &format!("/transfers/{id}")).await;
        assert_eq!(s, StatusCode::OK);
        if v["status"] == "done" || v["status"] == "failed" {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("transfer {id} did not finish");
}

fn service(dir: &Path) -> Service {
    let mut cfg = ServiceConfig::new(dir);
    cfg.workers = 2;
    Service::open(cfg).unwrap()
}

#[tokio::test]
async fn upload_and_fetch_pieces() {
    let dir = tempfile::tempdir().unwrap();
    let app = service(dir.path()).router();
    let bytes = midi(8, 1);
    let (s, v) = upload(&app, bytes.clone()).await;
    assert_eq!(s, StatusCode::CREATED);
    let id = v["id"].as_str().unwrap().to_string();
    let (s, v) = get_json(&app, &format!("/pieces/{id}")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["attributes"].as_array().unwrap().len(), 8);
    assert_eq!(v["has_latents"], false);

    let (s, again) = upload(&app, bytes).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_ne!(again["id"], v["id"]);

    let (s, _) = upload(&app, b"garbage bytes".to_vec()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = upload(&app, waltz_midi()).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = get_json(&app, "/pieces/p-999999").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn pianoroll_projection() {
    let dir = tempfile::tempdir().unwrap();
    let app = service(dir.path()).router();
    let (_, v) = upload(&app, one_note_midi()).await;
    let id = v["id"].as_str().unwrap();
    let (s, roll) = get_json(&app, &format!("/pieces/{id}/pianoroll")).await;
    assert_eq!(s, StatusCode::OK);
    let notes = roll["notes"].as_array().unwrap();
    assert_eq!(notes.len(), 1);
    assert_eq!(notes[0]["sub_beat"], 4);
    assert_eq!(notes[0]["pitch"], 60);
    assert_eq!(notes[0]["duration_units"], 4);
    assert_eq!(roll["attributes"].as_array().unwrap().len(), 1);
    let (s, _) = get_json(&app, "/pieces/nope/pianoroll").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn transfers_need_a_checkpoint_and_valid_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let app = service(dir.path()).router();
    let (_, v) = upload(&app, midi(4, 2)).await;
    let id = v["id"].as_str().unwrap().to_string();
    let (s, _) = post_json(&app, "/transfers", json!({ "piece_id": id })).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let (s, _) = post_json(&app, "/admin/checkpoint", json!({ "path": dir.path().join("missing.ckpt") })).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let ckpt = dir.path().join("m.ckpt");
    save_checkpoint(&ckpt, 1);
    let (s, info) = post_json(&app, "/admin/checkpoint", json!({ "path": ckpt })).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(info["step"], 0);

    let (s, _) = post_json(&app, "/transfers", json!({ "piece_id": id, "rhym": "+1,+1" })).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = post_json(&app, "/transfers", json!({ "piece_id": id, "poly": "sideways" })).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = post_json(&app, "/transfers", json!({ "piece_id": "p-424242" })).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "POST", "/transfers", Body::from("{"), "application/json").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = get_json(&app, "/transfers/t-999999").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn transfer_jobs_complete_and_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    save_checkpoint(&ckpt, 3);
    let mut cfg = ServiceConfig::new(dir.path().join("store"));
    cfg.checkpoint = Some(ckpt);
    let app = Service::open(cfg).unwrap().router();
    let (_, v) = upload(&app, midi(6, 5)).await;
    assert_eq!(v["has_latents"], true);
    let pid = v["id"].as_str().unwrap().to_string();

    let req = json!({ "piece_id": pid, "rhym": "+2", "poly": ["=1", "=1", "=2", "=2", "+0", "-1"], "seed": 9, "max_tokens_per_bar": 24 });
    let (s, a) = post_json(&app, "/transfers", req.clone()).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(a["status"], "queued");
    let (_, b) = post_json(&app, "/transfers", req).await;
    let (_, c) = post_json(&app, "/transfers", json!({ "piece_id": pid, "max_tokens_per_bar": 24 })).await;
    let (_, d) = post_json(&app, "/transfers", json!({ "piece_id": pid, "max_tokens_per_bar": 24 })).await;

    let a = wait_done(&app, a["id"].as_str().unwrap()).await;
    let b = wait_done(&app, b["id"].as_str().unwrap()).await;
    let c = wait_done(&app, c["id"].as_str().unwrap()).await;
    let d = wait_done(&app, d["id"].as_str().unwrap()).await;
    for j in [&a, &b, &c, &d] {
        assert_eq!(j["status"], "done", "{j}");
        assert_eq!(j["achieved"].as_array().unwrap().len(), 6);
    }
    assert_eq!(a["requested_poly"], json!([1, 1, 2, 2, a["requested_poly"][4], a["requested_poly"][5]]));
    assert_ne!(c["sampling"]["seed"], d["sampling"]["seed"]);

    let ta = get_json(&app, &format!("/transfers/{}/pianoroll", a["id"].as_str().unwrap())).await.1;
    let tb = get_json(&app, &format!("/pieces/{}/pianoroll", b["id"].as_str().unwrap())).await.1;
    assert_eq!(ta["notes"], tb["notes"]);
    assert_eq!(ta["kind"], "transfer");
    assert_eq!(ta["requested"].as_array().unwrap().len(), 6);
    assert_eq!(ta["achieved"].as_array().unwrap().len(), 6);

    let (s, bytes) = call(&app, "GET", &format!("/transfers/{}/midi", a["id"].as_str().unwrap()), Body::empty(), "").await;
    assert_eq!(s, StatusCode::OK);
    assert!(parse_midi(&bytes).is_ok());

    let (s, piece) = get_json(&app, &format!("/pieces/{pid}")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(piece["attributes"].as_array().unwrap().len(), 6);
}

#[tokio::test]
async fn records_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let id = {
        let app = service(dir.path()).router();
        let (_, v) = upload(&app, midi(3, 7)).await;
        v["id"].as_str().unwrap().to_string()
    };
    let app = service(dir.path()).router();
    let (s, v) = get_json(&app, &format!("/pieces/{id}")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["n_bars"], 3);
    let (_, fresh) = upload(&app, midi(3, 8)).await;
    assert_ne!(fresh["id"].as_str().unwrap(), id);
}
