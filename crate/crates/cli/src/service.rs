//! HTTP service driven by the studio UI.
//!
//! One checkpoint is loaded at startup and shared read-only; swapping models
//! means restarting the process. Generated objects are kept in memory under
//! ids derived from the request, so identical requests get identical bodies.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use artigen_core::corpus::{Corpus, ObjectDocument};
use artigen_core::diffusion::SamplerConfig;
use artigen_core::generate::{generate, FieldError, GenerateError, GenerateRequest};
use artigen_core::kinematics::{instantiate, PosedBox};
use artigen_core::mesh::TriMesh;
use artigen_core::metrics::MetricConfig;
use artigen_core::retrieval::{retrieve_and_assemble, AssembledObject, Library};
use artigen_core::schema::{ArticulatedObject, Vec3};
use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::commands::LoadedModel;

/// Generated objects kept for `/api/objects/{id}` before the oldest are dropped.
pub const STORE_CAPACITY: usize = 4096;

#[derive(Clone, Debug)]
pub struct ServiceOptions {
    pub max_count: usize,
    pub steps: usize,
}

struct Stored {
    object: ArticulatedObject,
    assembled: Option<AssembledObject>,
}

#[derive(Default)]
struct Store {
    objects: HashMap<String, Arc<Stored>>,
    order: VecDeque<String>,
}

impl Store {
    fn insert(&mut self, id: String, value: Stored) {
        if self.objects.insert(id.clone(), Arc::new(value)).is_none() {
            self.order.push_back(id);
        }
        while self.order.len() > STORE_CAPACITY {
            if let Some(old) = self.order.pop_front() {
                self.objects.remove(&old);
            }
        }
    }
}

pub struct AppState {
    model: Option<LoadedModel>,
    corpus: Option<Corpus>,
    library: Option<Library>,
    options: ServiceOptions,
    store: Mutex<Store>,
}

impl AppState {
    pub fn new(model: Option<LoadedModel>, corpus: Option<Corpus>, options: ServiceOptions) -> Self {
        let library = corpus.as_ref().map(Library::from_corpus);
        AppState {
            model,
            corpus,
            library,
            options,
            store: Mutex::new(Store::default()),
        }
    }

    fn stored(&self, id: &str) -> Option<Arc<Stored>> {
        self.store.lock().expect("store lock").objects.get(id).cloned()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/generate", post(generate_handler))
        .route("/api/corpus", get(corpus_handler))
        .route("/api/objects/{id}", get(object_handler))
        .route("/api/objects/{id}/meshes/{node}", get(mesh_handler))
        .route("/api/articulate", post(articulate_handler))
        .with_state(state)
}

pub struct ApiError {
    status: StatusCode,
    message: String,
    fields: Vec<FieldError>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
            fields: Vec::new(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn field(field: &str, message: impl Into<String>) -> Self {
        let message = message.into();
        ApiError {
            status: StatusCode::BAD_REQUEST,
            fields: vec![FieldError {
                field: field.into(),
                message: message.clone(),
            }],
            message,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": self.message, "fields": self.fields});
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "model_loaded": state.model.is_some(),
        "corpus_objects": state.corpus.as_ref().map_or(0, |c| c.entries.len()),
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshRef {
    pub node: usize,
    pub url: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_node: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSample {
    pub id: String,
    pub seed: u64,
    pub object: ObjectDocument,
    pub meshes: Vec<MeshRef>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub assembly_error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub samples: Vec<GeneratedSample>,
}

/// Ids depend only on the request, which keeps responses reproducible.
fn request_prefix(req: &GenerateRequest) -> String {
    let canonical = serde_json::to_vec(req).expect("request serializes");
    let digest = Sha256::digest(&canonical);
    let hex: String = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
    format!("gen-{hex}")
}

fn assembled_refs(id: &str, a: &AssembledObject) -> Vec<MeshRef> {
    a.parts
        .iter()
        .map(|p| MeshRef {
            node: p.node,
            url: format!("/api/objects/{id}/meshes/{}", p.node),
            source_id: Some(p.source_id.clone()),
            source_node: Some(p.source_node),
        })
        .collect()
}

fn run_generation(state: &AppState, req: &GenerateRequest) -> ApiResult<GenerateResponse> {
    let Some(model) = &state.model else {
        return Err(ApiError::new(StatusCode::CONFLICT, "no checkpoint loaded"));
    };
    if req.count > state.options.max_count {
        return Err(ApiError::field(
            "count",
            format!("at most {} samples per request", state.options.max_count),
        ));
    }
    let sampler = SamplerConfig {
        steps: state.options.steps,
    };
    let generated =
        generate(&model.model, &model.schedule, sampler, req, &request_prefix(req)).map_err(|e| match e {
            GenerateError::Request(fields) => ApiError {
                status: StatusCode::BAD_REQUEST,
                message: "invalid request".into(),
                fields,
            },
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        })?;
    let mut samples = Vec::with_capacity(generated.len());
    for g in generated {
        let id = g.object.id.clone();
        let (assembled, assembly_error) = match &state.library {
            Some(lib) => match retrieve_and_assemble(&g.object, lib, Some(req.category), &MetricConfig::default()) {
                Ok((a, _)) => (Some(a), None),
                Err(e) => {
                    log::warn!("assembling {id}: {e}");
                    (None, Some(e.to_string()))
                }
            },
            None => (None, None),
        };
        let meshes = assembled.as_ref().map_or_else(Vec::new, |a| assembled_refs(&id, a));
        samples.push(GeneratedSample {
            id: id.clone(),
            seed: g.seed,
            object: ObjectDocument::from_object(&g.object),
            meshes,
            assembly_error,
        });
        state.store.lock().expect("store lock").insert(
            id,
            Stored {
                object: g.object,
                assembled,
            },
        );
    }
    Ok(GenerateResponse { samples })
}

async fn generate_handler(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<GenerateResponse>> {
    let req: GenerateRequest = parse_body(&body)?;
    // sampling is CPU bound, keep it off the async workers
    let resp = tokio::task::spawn_blocking(move || run_generation(&state, &req))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(resp))
}

#[derive(Serialize)]
struct CorpusItem<'a> {
    id: &'a str,
    category: &'static str,
    split: artigen_core::corpus::Split,
}

async fn corpus_handler(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let items: Vec<CorpusItem<'_>> = state
        .corpus
        .iter()
        .flat_map(|c| c.entries.iter())
        .map(|e| CorpusItem {
            id: &e.object.id,
            category: e.object.category().name(),
            split: e.split,
        })
        .collect();
    Json(json!({ "objects": items }))
}

fn corpus_refs(obj: &ArticulatedObject) -> Vec<MeshRef> {
    (0..obj.parts.len())
        .map(|node| MeshRef {
            node,
            url: format!("/api/objects/{}/meshes/{node}", obj.id),
            source_id: None,
            source_node: None,
        })
        .collect()
}

async fn object_handler(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<serde_json::Value>> {
    if let Some(s) = state.stored(&id) {
        let meshes = s.assembled.as_ref().map_or_else(Vec::new, |a| assembled_refs(&id, a));
        return Ok(Json(json!({
            "source": "generated",
            "object": ObjectDocument::from_object(&s.object),
            "meshes": meshes,
        })));
    }
    if let Some(obj) = state.corpus.as_ref().and_then(|c| c.get(&id)) {
        return Ok(Json(json!({
            "source": "corpus",
            "object": ObjectDocument::from_object(obj),
            "meshes": corpus_refs(obj),
        })));
    }
    Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown object '{id}'")))
}

/// Resting-state OBJ text for one part.
fn mesh_for(state: &AppState, id: &str, node: usize) -> ApiResult<TriMesh> {
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, format!("no mesh for part {node} of '{id}'"));
    if let Some(s) = state.stored(id) {
        let a = s.assembled.as_ref().ok_or_else(not_found)?;
        return a
            .parts
            .iter()
            .find(|p| p.node == node)
            .map(|p| p.mesh.clone())
            .ok_or_else(not_found);
    }
    let (Some(corpus), Some(lib)) = (&state.corpus, &state.library) else {
        return Err(not_found());
    };
    let index = corpus
        .entries
        .iter()
        .position(|e| e.object.id == id)
        .ok_or_else(not_found)?;
    if node >= corpus.entries[index].object.parts.len() {
        return Err(not_found());
    }
    lib.part(index, node)
        .map(|p| p.mesh)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

async fn mesh_handler(
    State(state): State<Arc<AppState>>,
    UrlPath((id, node)): UrlPath<(String, usize)>,
) -> ApiResult<Response> {
    let mesh = mesh_for(&state, &id, node)?;
    Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], mesh.to_obj()).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ArticulateRequest {
    id: Option<String>,
    object: Option<ObjectDocument>,
    tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosedBoxBody {
    pub part: usize,
    pub local_min: Vec3,
    pub local_max: Vec3,
    /// Row-major 3x3.
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
    pub world_min: Vec3,
    pub world_max: Vec3,
}

impl From<&PosedBox> for PosedBoxBody {
    fn from(b: &PosedBox) -> Self {
        let r = &b.transform.rotation;
        let t = &b.transform.translation;
        let (world_min, world_max) = b.world_aabb();
        PosedBoxBody {
            part: b.part,
            local_min: b.local_min,
            local_max: b.local_max,
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
            translation: [t[0], t[1], t[2]],
            world_min,
            world_max,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArticulateResponse {
    pub tau: f64,
    pub boxes: Vec<PosedBoxBody>,
}

fn articulate(state: &AppState, req: ArticulateRequest) -> ApiResult<ArticulateResponse> {
    if !(0.0..=1.0).contains(&req.tau) {
        return Err(ApiError::field("tau", "must lie in [0, 1]"));
    }
    let obj = match (req.id, req.object) {
        (Some(_), Some(_)) => return Err(ApiError::field("id", "give either id or object, not both")),
        (None, None) => return Err(ApiError::field("id", "one of id or object is required")),
        (None, Some(doc)) => doc.to_object().map_err(|e| ApiError::field("object", e.to_string()))?,
        (Some(id), None) => match state.stored(&id) {
            Some(s) => s.object.clone(),
            None => state
                .corpus
                .as_ref()
                .and_then(|c| c.get(&id))
                .cloned()
                .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown object '{id}'")))?,
        },
    };
    let boxes = instantiate(&obj, req.tau).map_err(|e| ApiError::field("object", e.to_string()))?;
    Ok(ArticulateResponse {
        tau: req.tau,
        boxes: boxes.iter().map(PosedBoxBody::from).collect(),
    })
}

async fn articulate_handler(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<ArticulateResponse>> {
    let req: ArticulateRequest = parse_body(&body)?;
    articulate(&state, req).map(Json)
}

pub async fn serve(state: Arc<AppState>, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
