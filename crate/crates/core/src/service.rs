//! HTTP service: piece upload, piano-roll projection and queued style
//! transfer against a hot-swappable checkpoint.
//!
//! Routes:
//!
//! | method | path | success |
//! |---|---|---|
//! | POST | `/pieces` (SMF bytes) | 201 piece record |
//! | GET | `/pieces/{id}` | 200 piece record |
//! | GET | `/pieces/{id}/pianoroll` | 200 notes and attribute rows (piece or transfer id) |
//! | POST | `/transfers` (JSON) | 201 queued job |
//! | GET | `/transfers/{id}` | 200 job |
//! | GET | `/transfers/{id}/pianoroll` | 200 notes, requested and achieved rows |
//! | GET | `/transfers/{id}/midi` | 200 SMF bytes |
//! | POST | `/admin/checkpoint` (JSON `{"path": ...}`) | 200 checkpoint info |
//!
//! Records live under the store directory as `pieces/<id>.json` with the
//! original SMF in `pieces/<id>.mid`, and `transfers/<id>.json` with the
//! result in `transfers/<id>.mid`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex, RwLock, Weak};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::attributes::{compute_attributes, BarAttributes};
use crate::bundle::{BundleError, ModelBundle};
use crate::decode::{sliding_window_transfer, OverrideSpec, SamplingConfig};
use crate::midi::{parse_midi, quantize, write_midi, MidiError, QuantizedScore};
use crate::remi::{detokenize, tokenize, Vocab};
use crate::vae::StyleModel;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("store I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("store record {0}: {1}")]
    Record(String, String),
    #[error(transparent)]
    Bundle(#[from] BundleError),
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub store_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub workers: usize,
    /// Grid resolution used when no checkpoint fixes one.
    pub sub_beats_per_bar: u16,
}

impl ServiceConfig {
    pub fn new(store_dir: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            store_dir: store_dir.into(),
            checkpoint: None,
            workers: 2,
            sub_beats_per_bar: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributeRow {
    pub bar: usize,
    pub rhym: u8,
    pub poly: u8,
    pub s_rhym: f64,
    pub s_poly: f64,
}

fn rows(attrs: &[BarAttributes]) -> Vec<AttributeRow> {
    attrs
        .iter()
        .map(|a| AttributeRow {
            bar: a.bar_index,
            rhym: a.a_rhym,
            poly: a.a_poly,
            s_rhym: a.s_rhym,
            s_poly: a.s_poly,
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PieceRecord {
    pub id: String,
    pub created: u64,
    pub n_bars: usize,
    pub tokens: Vec<u32>,
    pub attributes: Vec<AttributeRow>,
    /// Posterior means per bar under the checkpoint named alongside.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latents: Option<Latents>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Latents {
    pub checkpoint: String,
    pub mu: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferJob {
    pub id: String,
    pub piece_id: String,
    pub rhym_overrides: String,
    pub poly_overrides: String,
    pub requested_rhym: Vec<u8>,
    pub requested_poly: Vec<u8>,
    pub sampling: SamplingConfig,
    pub window: usize,
    pub status: JobStatus,
    pub checkpoint: Option<String>,
    pub tokens: Option<Vec<u32>>,
    pub achieved: Option<Vec<AttributeRow>>,
    pub truncated_bars: Option<usize>,
    pub error: Option<String>,
}

struct LoadedModel {
    path: String,
    bundle: ModelBundle,
    model: StyleModel,
}

struct Inner {
    dir: PathBuf,
    sub_beats_per_bar: u16,
    pieces: RwLock<HashMap<String, PieceRecord>>,
    jobs: RwLock<HashMap<String, TransferJob>>,
    model: RwLock<Option<Arc<LoadedModel>>>,
    queue: Mutex<mpsc::Sender<String>>,
    counter: AtomicU64,
}

/// Shared service state; cheap to clone.
#[derive(Clone)]
pub struct Service {
    inner: Arc<Inner>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn read_records<T: for<'de> Deserialize<'de>>(dir: &Path) -> Result<Vec<T>, ServiceError> {
    let mut out = Vec::new();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    for p in paths {
        let text = fs::read_to_string(&p)?;
        let rec = serde_json::from_str(&text).map_err(|e| ServiceError::Record(p.display().to_string(), e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

fn id_number(id: &str) -> u64 {
    id.split('-').nth(1).and_then(|n| n.parse().ok()).unwrap_or(0)
}

impl Service {
    /// Opens (or creates) the store, loads the checkpoint if given and
    /// starts the worker threads.
    pub fn open(cfg: ServiceConfig) -> Result<Self, ServiceError> {
        fs::create_dir_all(cfg.store_dir.join("pieces"))?;
        fs::create_dir_all(cfg.store_dir.join("transfers"))?;
        let pieces: Vec<PieceRecord> = read_records(&cfg.store_dir.join("pieces"))?;
        let mut jobs: Vec<TransferJob> = read_records(&cfg.store_dir.join("transfers"))?;
        for j in &mut jobs {
            if matches!(j.status, JobStatus::Queued | JobStatus::Running) {
                j.status = JobStatus::Failed;
                j.error = Some("interrupted by restart".into());
            }
        }
        let counter = pieces
            .iter()
            .map(|p| id_number(&p.id))
            .chain(jobs.iter().map(|j| id_number(&j.id)))
            .max()
            .unwrap_or(0);
        let (tx, rx) = mpsc::channel::<String>();
        let inner = Arc::new(Inner {
            dir: cfg.store_dir.clone(),
            sub_beats_per_bar: cfg.sub_beats_per_bar,
            pieces: RwLock::new(pieces.into_iter().map(|p| (p.id.clone(), p)).collect()),
            jobs: RwLock::new(jobs.into_iter().map(|j| (j.id.clone(), j)).collect()),
            model: RwLock::new(None),
            queue: Mutex::new(tx),
            counter: AtomicU64::new(counter),
        });
        let svc = Service { inner };
        if let Some(path) = &cfg.checkpoint {
            svc.load_checkpoint(path)?;
        }
        let rx = Arc::new(Mutex::new(rx));
        for _ in 0..cfg.workers.max(1) {
            let rx = Arc::clone(&rx);
            let weak = Arc::downgrade(&svc.inner);
            std::thread::spawn(move || worker(weak, rx));
        }
        Ok(svc)
    }

    /// Replaces the active checkpoint. Running jobs keep their snapshot.
    pub fn load_checkpoint(&self, path: &Path) -> Result<(String, u64), ServiceError> {
        let bundle = ModelBundle::load(path)?;
        let model = bundle.style_model()?;
        let step = bundle.step;
        let name = path.display().to_string();
        *self.inner.model.write().unwrap() = Some(Arc::new(LoadedModel {
            path: name.clone(),
            bundle,
            model,
        }));
        log::info!("checkpoint {name} (step {step}) active");
        Ok((name, step))
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/pieces", post(upload_piece))
            .route("/pieces/:id", get(get_piece))
            .route("/pieces/:id/pianoroll", get(get_pianoroll))
            .route("/transfers", post(request_transfer))
            .route("/transfers/:id", get(get_transfer))
            .route("/transfers/:id/pianoroll", get(get_pianoroll))
            .route("/transfers/:id/midi", get(get_transfer_midi))
            .route("/admin/checkpoint", post(swap_checkpoint))
            .with_state(self.clone())
    }

    fn next_id(&self, prefix: &str) -> String {
        let n = self.inner.counter.fetch_add(1, Ordering::SeqCst) + 1;
        format!("{prefix}-{n:06}")
    }

    fn model(&self) -> Option<Arc<LoadedModel>> {
        self.inner.model.read().unwrap().clone()
    }

    fn vocab(&self) -> Vocab {
        match self.model() {
            Some(m) => m.bundle.vocab(),
            None => Vocab::new(self.inner.sub_beats_per_bar),
        }
    }
}

fn save_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(value).map_err(std::io::Error::other)?)?;
    fs::rename(tmp, path)
}

fn worker(inner: Weak<Inner>, rx: Arc<Mutex<mpsc::Receiver<String>>>) {
    loop {
        let id = match rx.lock().unwrap().recv() {
            Ok(id) => id,
            Err(_) => return,
        };
        let Some(inner) = inner.upgrade() else { return };
        run_job(&Service { inner }, &id);
    }
}

fn run_job(svc: &Service, id: &str) {
    let inner = &svc.inner;
    let Some(mut job) = inner.jobs.read().unwrap().get(id).cloned() else {
        return;
    };
    job.status = JobStatus::Running;
    inner.jobs.write().unwrap().insert(id.to_string(), job.clone());
    let result = (|| -> Result<(Vec<u32>, Vec<AttributeRow>, usize, String), String> {
        let model = svc.model().ok_or("no checkpoint loaded")?;
        let piece = inner
            .pieces
            .read()
            .unwrap()
            .get(&job.piece_id)
            .cloned()
            .ok_or("piece vanished")?;
        let mut rng = ChaCha8Rng::seed_from_u64(job.sampling.seed);
        let gen = sliding_window_transfer(
            &model.model,
            &model.bundle.store,
            &piece.tokens,
            &job.requested_rhym,
            &job.requested_poly,
            job.window.max(2),
            &job.sampling,
            &mut rng,
        )
        .map_err(|e| e.to_string())?;
        let vocab = model.bundle.vocab();
        let score = detokenize(&gen.tokens, &vocab).map_err(|e| e.to_string())?.score;
        let achieved = rows(&compute_attributes(&score, &model.bundle.bins));
        fs::write(inner.dir.join("transfers").join(format!("{id}.mid")), write_midi(&score))
            .map_err(|e| e.to_string())?;
        let truncated = gen.truncated.iter().filter(|&&t| t).count();
        Ok((gen.tokens, achieved, truncated, model.path.clone()))
    })();
    match result {
        Ok((tokens, achieved, truncated, ckpt)) => {
            job.status = JobStatus::Done;
            job.tokens = Some(tokens);
            job.achieved = Some(achieved);
            job.truncated_bars = Some(truncated);
            job.checkpoint = Some(ckpt);
        }
        Err(e) => {
            log::warn!("transfer {id} failed: {e}");
            job.status = JobStatus::Failed;
            job.error = Some(e);
        }
    }
    if let Err(e) = save_json(&inner.dir.join("transfers").join(format!("{id}.json")), &job) {
        log::warn!("could not persist transfer {id}: {e}");
    }
    inner.jobs.write().unwrap().insert(id.to_string(), job);
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": msg.into() }))).into_response()
}

fn piece_view(p: &PieceRecord) -> Value {
    json!({
        "id": p.id,
        "created": p.created,
        "n_bars": p.n_bars,
        "n_tokens": p.tokens.len(),
        "attributes": p.attributes,
        "has_latents": p.latents.is_some(),
    })
}

async fn upload_piece(State(svc): State<Service>, body: Bytes) -> Response {
    let raw = match parse_midi(&body) {
        Ok(r) => r,
        Err(MidiError::UnsupportedMeter(n, d)) => {
            return error(StatusCode::UNPROCESSABLE_ENTITY, format!("unsupported meter {n}/{d}"))
        }
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let vocab = svc.vocab();
    let q = match quantize(&raw, vocab.sub_beats_per_bar()) {
        Ok(q) => q,
        Err(e @ MidiError::UnsupportedMeter(..)) => return error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    if q.n_bars() == 0 {
        return error(StatusCode::UNPROCESSABLE_ENTITY, "file has no notes");
    }
    let tokens = match tokenize(&q, &vocab) {
        Ok(t) => t.tokens,
        Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
    };
    let model = svc.model();
    let bins = model
        .as_ref()
        .map(|m| m.bundle.bins.clone())
        .unwrap_or_else(crate::attributes::AttributeBins::reference);
    let latents = model.as_ref().and_then(|m| {
        m.model.posterior(&m.bundle.store, &tokens).ok().map(|(mu, _)| Latents {
            checkpoint: m.path.clone(),
            mu,
        })
    });
    let id = svc.next_id("p");
    let record = PieceRecord {
        id: id.clone(),
        created: now(),
        n_bars: q.n_bars(),
        tokens,
        attributes: rows(&compute_attributes(&q, &bins)),
        latents,
    };
    let dir = svc.inner.dir.join("pieces");
    if let Err(e) = fs::write(dir.join(format!("{id}.mid")), &body)
        .and_then(|_| save_json(&dir.join(format!("{id}.json")), &record))
    {
        return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
    }
    let view = piece_view(&record);
    svc.inner.pieces.write().unwrap().insert(id, record);
    (StatusCode::CREATED, Json(view)).into_response()
}

async fn get_piece(State(svc): State<Service>, UrlPath(id): UrlPath<String>) -> Response {
    match svc.inner.pieces.read().unwrap().get(&id) {
        Some(p) => Json(piece_view(p)).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("no piece {id}")),
    }
}

fn notes_of(score: &QuantizedScore) -> Vec<Value> {
    let mut out = Vec::new();
    for (k, bar) in score.bars.iter().enumerate() {
        for n in &bar.notes {
            out.push(json!({
                "bar": k,
                "sub_beat": n.sub_beat,
                "pitch": n.pitch,
                "duration_units": n.duration_units,
                "velocity_class": n.velocity_class,
            }));
        }
    }
    out
}

async fn get_pianoroll(State(svc): State<Service>, UrlPath(id): UrlPath<String>) -> Response {
    let vocab = svc.vocab();
    if let Some(p) = svc.inner.pieces.read().unwrap().get(&id) {
        return match detokenize(&p.tokens, &vocab) {
            Ok(d) => Json(json!({
                "id": id,
                "kind": "piece",
                "sub_beats_per_bar": d.score.sub_beats_per_bar,
                "n_bars": d.score.n_bars(),
                "notes": notes_of(&d.score),
                "attributes": p.attributes,
            }))
            .into_response(),
            Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        };
    }
    let job = svc.inner.jobs.read().unwrap().get(&id).cloned();
    match job {
        None => error(StatusCode::NOT_FOUND, format!("no piece or transfer {id}")),
        Some(j) => {
            let Some(tokens) = &j.tokens else {
                return error(StatusCode::CONFLICT, format!("transfer {id} is {:?}", j.status));
            };
            match detokenize(tokens, &vocab) {
                Ok(d) => {
                    let requested: Vec<Value> = j
                        .requested_rhym
                        .iter()
                        .zip(&j.requested_poly)
                        .enumerate()
                        .map(|(k, (r, p))| json!({ "bar": k, "rhym": r, "poly": p }))
                        .collect();
                    Json(json!({
                        "id": id,
                        "kind": "transfer",
                        "piece_id": j.piece_id,
                        "sub_beats_per_bar": d.score.sub_beats_per_bar,
                        "n_bars": d.score.n_bars(),
                        "notes": notes_of(&d.score),
                        "requested": requested,
                        "achieved": j.achieved,
                    }))
                    .into_response()
                }
                Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
            }
        }
    }
}

#[derive(Debug, Deserialize)]
struct TransferRequest {
    piece_id: String,
    #[serde(default)]
    rhym: Option<Value>,
    #[serde(default)]
    poly: Option<Value>,
    #[serde(default)]
    p: Option<f64>,
    #[serde(default)]
    tau: Option<f64>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    max_tokens_per_bar: Option<usize>,
    #[serde(default)]
    window: Option<usize>,
}

/// Accepts `"+2"`, `"=1,+1,-3"`, `[1, "+1", "=2"]` or null (keep source).
fn parse_overrides(v: &Option<Value>) -> Result<(String, OverrideSpec), String> {
    let text = match v {
        None | Some(Value::Null) => "+0".to_string(),
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => format!("={n}"),
        Some(Value::Array(items)) => items
            .iter()
            .map(|x| match x {
                Value::String(s) => Ok(s.clone()),
                Value::Number(n) => Ok(format!("={n}")),
                _ => Err(format!("bad override entry {x}")),
            })
            .collect::<Result<Vec<_>, _>>()?
            .join(","),
        Some(other) => return Err(format!("bad overrides {other}")),
    };
    let spec = text.parse::<OverrideSpec>().map_err(|e| e.to_string())?;
    Ok((text, spec))
}

async fn request_transfer(State(svc): State<Service>, body: Bytes) -> Response {
    let req: TransferRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let Some(model) = svc.model() else {
        return error(StatusCode::CONFLICT, "no checkpoint loaded");
    };
    let Some(piece) = svc.inner.pieces.read().unwrap().get(&req.piece_id).cloned() else {
        return error(StatusCode::NOT_FOUND, format!("no piece {}", req.piece_id));
    };
    let bins = &model.bundle.bins;
    let score = match detokenize(&piece.tokens, &model.bundle.vocab()) {
        Ok(d) => d.score,
        Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
    };
    let source = compute_attributes(&score, bins);
    let src_r: Vec<u8> = source.iter().map(|a| a.a_rhym).collect();
    let src_p: Vec<u8> = source.iter().map(|a| a.a_poly).collect();
    let resolve = |v: &Option<Value>, src: &[u8]| -> Result<(String, Vec<u8>), String> {
        let (text, spec) = parse_overrides(v)?;
        Ok((text, spec.resolve(src).map_err(|e| e.to_string())?))
    };
    let ((rt, rr), (pt, rp)) = match (resolve(&req.rhym, &src_r), resolve(&req.poly, &src_p)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return error(StatusCode::UNPROCESSABLE_ENTITY, e),
    };
    let id = svc.next_id("t");
    let defaults = SamplingConfig::default();
    let sampling = SamplingConfig {
        p: req.p.unwrap_or(defaults.p),
        tau: req.tau.unwrap_or(defaults.tau),
        seed: req.seed.unwrap_or_else(|| id_number(&id)),
        max_tokens_per_bar: req.max_tokens_per_bar.unwrap_or(defaults.max_tokens_per_bar),
    };
    if let Err(e) = sampling.validate() {
        return error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string());
    }
    let window = req.window.unwrap_or_else(|| {
        model
            .bundle
            .extra
            .get::<usize>("train.k_crop")
            .ok()
            .flatten()
            .unwrap_or(16)
    });
    if window < 2 {
        return error(StatusCode::UNPROCESSABLE_ENTITY, "window must span at least 2 bars");
    }
    let job = TransferJob {
        id: id.clone(),
        piece_id: piece.id.clone(),
        rhym_overrides: rt,
        poly_overrides: pt,
        requested_rhym: rr,
        requested_poly: rp,
        sampling,
        window,
        status: JobStatus::Queued,
        checkpoint: None,
        tokens: None,
        achieved: None,
        truncated_bars: None,
        error: None,
    };
    let view = job_view(&job);
    svc.inner.jobs.write().unwrap().insert(id.clone(), job);
    if svc.inner.queue.lock().unwrap().send(id).is_err() {
        return error(StatusCode::INTERNAL_SERVER_ERROR, "job queue closed");
    }
    (StatusCode::CREATED, Json(view)).into_response()
}

fn job_view(j: &TransferJob) -> Value {
    json!({
        "id": j.id,
        "piece_id": j.piece_id,
        "status": j.status,
        "rhym": j.rhym_overrides,
        "poly": j.poly_overrides,
        "requested_rhym": j.requested_rhym,
        "requested_poly": j.requested_poly,
        "sampling": j.sampling,
        "window": j.window,
        "checkpoint": j.checkpoint,
        "n_tokens": j.tokens.as_ref().map(Vec::len),
        "achieved": j.achieved,
        "truncated_bars": j.truncated_bars,
        "error": j.error,
    })
}

async fn get_transfer(State(svc): State<Service>, UrlPath(id): UrlPath<String>) -> Response {
    match svc.inner.jobs.read().unwrap().get(&id) {
        Some(j) => Json(job_view(j)).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("no transfer {id}")),
    }
}

async fn get_transfer_midi(State(svc): State<Service>, UrlPath(id): UrlPath<String>) -> Response {
    let status = match svc.inner.jobs.read().unwrap().get(&id) {
        Some(j) => j.status,
        None => return error(StatusCode::NOT_FOUND, format!("no transfer {id}")),
    };
    if status != JobStatus::Done {
        return error(StatusCode::CONFLICT, format!("transfer {id} is {status:?}"));
    }
    match fs::read(svc.inner.dir.join("transfers").join(format!("{id}.mid"))) {
        Ok(bytes) => ([(header::CONTENT_TYPE, "audio/midi")], bytes).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

#[derive(Debug, Deserialize)]
struct CheckpointRequest {
    path: PathBuf,
}

async fn swap_checkpoint(State(svc): State<Service>, body: Bytes) -> Response {
    let req: CheckpointRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let svc2 = svc.clone();
    let res = tokio::task::spawn_blocking(move || svc2.load_checkpoint(&req.path)).await;
    match res {
        Ok(Ok((path, step))) => Json(json!({ "path": path, "step": step })).into_response(),
        Ok(Err(e)) => error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// Serves until the process is stopped.
pub async fn serve(svc: Service, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, svc.router()).await
}
