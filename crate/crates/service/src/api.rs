//! JSON endpoints.
//!
//! | method | path | purpose |
//! |--------|------|---------|
//! | GET | `/health` | liveness and artifact hashes |
//! | GET | `/instances` | images ranked by Tail/Head questions |
//! | POST | `/ask` | forward one question, store it as the session's current state |
//! | GET | `/head/{id}/map?session=` | full attention map of the current forward |
//! | GET | `/head/{id}/stats?session=&agg=` | corpus k distribution of a head |
//! | POST | `/filter` | heads attending to a selected token |
//! | POST | `/compare` | current forward minus a stored snapshot |
//! | GET | `/session/{id}` | session settings and stored snapshot ids |
//!
//! Matrices travel as flat row-major arrays with `rows`/`cols`. Every
//! success body carries `model_hash` and `corpus_hash`, and every response
//! (errors included) has them as `x-model-hash` / `x-corpus-hash` headers.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::{FromRequest, FromRequestParts, Path, State};
use axum::http::{HeaderName, HeaderValue};
use axum::middleware::map_response_with_state;
use axum::response::Response;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use vlscope_core::analytics::{
    diff_snapshots, filter_heads, summarize_head, AggKind, BucketThresholds, CapturedState,
    FilterMatch, KSummary, Selection, TokenRef,
};
use vlscope_core::analytics::filter::{resolve_selection, DEFAULT_FILTER_THRESHOLD};
use vlscope_core::bias::{bias_flag, AnswerClass, Instance};
use vlscope_core::model::{HeadId, PruneConfig};
use vlscope_core::tokenizer::tokenize;
use vlscope_core::AttentionMap32;

use crate::error::{ApiError, ApiResult};
use crate::session::Snapshot;
use crate::state::AppState;

pub const MODEL_HASH_HEADER: &str = "x-model-hash";
pub const CORPUS_HASH_HEADER: &str = "x-corpus-hash";

/// Session used when a request names none.
pub const DEFAULT_SESSION: &str = "default";

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/instances", get(instances))
        .route("/ask", post(ask))
        .route("/head/{id}/map", get(head_map))
        .route("/head/{id}/stats", get(head_stats))
        .route("/filter", post(filter))
        .route("/compare", post(compare))
        .route("/session/{id}", get(session_info))
        .fallback(|| async { ApiError::NotFound("no such endpoint".into()) })
        .layer(map_response_with_state(state.clone(), hash_headers))
        .with_state(state)
}

async fn hash_headers(State(state): State<AppState>, mut res: Response) -> Response {
    for (name, value) in [
        (MODEL_HASH_HEADER, state.model_hash()),
        (CORPUS_HASH_HEADER, state.corpus_hash()),
    ] {
        if let Ok(v) = HeaderValue::from_str(value) {
            res.headers_mut().insert(HeaderName::from_static(name), v);
        }
    }
    res
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Hashes {
    pub model_hash: String,
    pub corpus_hash: String,
}

impl Hashes {
    fn of(state: &AppState) -> Self {
        Self {
            model_hash: state.model_hash().to_owned(),
            corpus_hash: state.corpus_hash().to_owned(),
        }
    }
}

/// JSON body whose rejections use the API error body.
#[derive(FromRequest)]
#[from_request(via(axum::Json), rejection(ApiError))]
pub struct ApiJson<T>(pub T);

/// Query string whose rejections use the API error body.
#[derive(FromRequestParts)]
#[from_request(via(axum::extract::Query), rejection(ApiError))]
pub struct Query<T>(pub T);

fn parse_head(state: &AppState, id: &str) -> ApiResult<HeadId> {
    id.parse::<HeadId>()
        .ok()
        .filter(|h| h.is_valid_for(state.model().config()))
        .ok_or_else(|| ApiError::NotFound(format!("no head `{id}` in this model")))
}

fn parse_prune(state: &AppState, heads: &[String]) -> ApiResult<PruneConfig> {
    let mut prune = PruneConfig::new();
    for h in heads {
        let id = h
            .parse::<HeadId>()
            .map_err(|e| ApiError::BadRequest(format!("prune: {e}")))?;
        prune.insert(id);
    }
    prune
        .validate(state.model().config())
        .map_err(|e| ApiError::BadRequest(format!("prune: {e}")))?;
    Ok(prune)
}

// ---- /health ---------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub heads: usize,
    pub corpus_loaded: bool,
    #[serde(flatten)]
    pub hashes: Hashes,
}

async fn health(State(state): State<AppState>) -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok".into(),
        heads: state.model().config().head_count(),
        corpus_loaded: state.corpus_data().is_some(),
        hashes: Hashes::of(&state),
    })
}

// ---- /instances ------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct QuestionSummary {
    pub question_id: String,
    pub question: String,
    pub answer: String,
    pub operation: String,
    pub topic: String,
    pub class: AnswerClass,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RankedImage {
    pub image_id: String,
    pub score: f64,
    pub n_head: usize,
    pub n_tail: usize,
    pub questions: Vec<QuestionSummary>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InstancesResponse {
    pub images: Vec<RankedImage>,
    #[serde(flatten)]
    pub hashes: Hashes,
}

async fn instances(State(state): State<AppState>) -> ApiResult<Json<InstancesResponse>> {
    let data = state.require_corpus()?;
    let mut by_image: BTreeMap<&str, Vec<QuestionSummary>> = BTreeMap::new();
    for inst in data.corpus.instances() {
        by_image
            .entry(inst.image_id.as_str())
            .or_default()
            .push(QuestionSummary {
                question_id: inst.question_id.clone(),
                question: inst.question.clone(),
                answer: inst.gt_answer.clone(),
                operation: inst.operation.clone(),
                topic: inst.topic.clone(),
                class: data
                    .tables
                    .get(&inst.group_key())
                    .map_or(AnswerClass::Mid, |t| t.classify(&inst.gt_answer)),
            });
    }
    let images = data
        .ranking
        .iter()
        .map(|s| RankedImage {
            image_id: s.image_id.clone(),
            score: s.score,
            n_head: s.n_head,
            n_tail: s.n_tail,
            questions: by_image.remove(s.image_id.as_str()).unwrap_or_default(),
        })
        .collect();
    Ok(Json(InstancesResponse {
        images,
        hashes: Hashes::of(&state),
    }))
}

// ---- /ask ------------------------------------------------------------------

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct AskRequest {
    #[serde(default)]
    pub session: Option<String>,
    #[serde(default)]
    pub image_id: Option<String>,
    #[serde(default)]
    pub question: Option<String>,
    #[serde(default)]
    pub instance_id: Option<String>,
    /// Heads to prune from now on; omitted keeps the session's selection.
    #[serde(default)]
    pub prune: Option<Vec<String>>,
    #[serde(default)]
    pub agg: Option<AggKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopAnswer {
    pub index: usize,
    pub answer: String,
    pub probability: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerCount {
    pub answer: String,
    pub count: usize,
    pub class: AnswerClass,
}

/// Answer frequencies of the instance's question group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyContext {
    pub group_key: String,
    pub gt_answer: String,
    pub gt_class: AnswerClass,
    pub predicted: String,
    pub predicted_class: AnswerClass,
    pub correct: bool,
    pub bias_flag: bool,
    /// Ranked, most frequent first.
    pub answers: Vec<AnswerCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSummary {
    pub head: HeadId,
    pub rows: usize,
    pub cols: usize,
    pub aggregate: f64,
    pub bucket: u8,
    pub pruned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AskResponse {
    pub session: String,
    pub snapshot_id: String,
    pub instance_id: Option<String>,
    pub image_id: String,
    pub question: String,
    pub tokens: Vec<String>,
    pub objects: Vec<String>,
    pub prune: Vec<HeadId>,
    pub agg: AggKind,
    pub top5: Vec<TopAnswer>,
    pub answer_frequencies: Option<FrequencyContext>,
    pub heads: Vec<HeadSummary>,
    #[serde(flatten)]
    pub hashes: Hashes,
}

fn non_empty(field: &str, v: Option<String>) -> ApiResult<Option<String>> {
    match v {
        Some(s) if s.trim().is_empty() => Err(ApiError::BadRequest(format!("`{field}` is empty"))),
        other => Ok(other),
    }
}

async fn ask(State(state): State<AppState>, ApiJson(req): ApiJson<AskRequest>) -> ApiResult<Json<AskResponse>> {
    let question = non_empty("question", req.question)?;
    let instance_id = non_empty("instance_id", req.instance_id)?;
    let image_id = non_empty("image_id", req.image_id)?;
    let (question, image_id, instance): (String, String, Option<Instance>) =
        match (question, instance_id) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(ApiError::BadRequest(
                    "give exactly one of `question` and `instance_id`".into(),
                ))
            }
            (Some(q), None) => {
                let image = image_id.ok_or_else(|| {
                    ApiError::BadRequest("a free-form question needs `image_id`".into())
                })?;
                (q, image, None)
            }
            (None, Some(id)) => {
                let data = state.require_corpus()?;
                let inst = data
                    .corpus
                    .get(&id)
                    .ok_or_else(|| ApiError::NotFound(format!("no instance `{id}`")))?
                    .clone();
                if let Some(img) = &image_id {
                    if *img != inst.image_id {
                        return Err(ApiError::BadRequest(format!(
                            "instance `{id}` belongs to image `{}`, not `{img}`",
                            inst.image_id
                        )));
                    }
                }
                (inst.question.clone(), inst.image_id.clone(), Some(inst))
            }
        };
    let new_prune = req.prune.as_deref().map(|p| parse_prune(&state, p)).transpose()?;

    let session_id = req.session.unwrap_or_else(|| DEFAULT_SESSION.to_owned());
    let handle = state
        .sessions()
        .get_or_create(&session_id, state.config().default_agg);
    let mut session = handle.lock().await;
    if let Some(p) = new_prune {
        session.prune = p;
    }
    if let Some(agg) = req.agg {
        session.agg = agg;
    }
    let prune = session.prune.clone();
    let agg = session.agg;

    let worker = state.clone();
    let (q, img, p) = (question.clone(), image_id.clone(), prune.clone());
    let captured = tokio::task::spawn_blocking(move || -> ApiResult<_> {
        let vf = worker.features().features(&img)?;
        let seq = tokenize(&q, worker.vocab());
        let result = worker.model().forward(&seq, &vf, &p)?;
        Ok(CapturedState::new(result, agg, &worker.config().thresholds))
    })
    .await??;

    let snapshot_id = session.next_snapshot_id();
    let snap = Arc::new(Snapshot::new(
        snapshot_id.clone(),
        instance.as_ref().map(|i| i.question_id.clone()),
        image_id.clone(),
        question.clone(),
        prune.clone(),
        captured,
    ));
    session.push(snap.clone());
    drop(session);

    let result = &snap.state.result;
    let top5: Vec<TopAnswer> = result
        .answer
        .top5
        .iter()
        .map(|&(index, probability)| TopAnswer {
            index,
            answer: state.answers().answer(index).unwrap_or("?").to_owned(),
            probability,
        })
        .collect();
    let answer_frequencies = match &instance {
        Some(inst) => frequency_context(&state, inst, &top5[0].answer)?,
        None => None,
    };
    let heads = result
        .maps
        .iter()
        .zip(&snap.state.summaries)
        .map(|(m, s)| HeadSummary {
            head: m.head(),
            rows: m.rows(),
            cols: m.cols(),
            aggregate: s.aggregate,
            bucket: s.bucket,
            pruned: prune.contains(&m.head()),
        })
        .collect();
    Ok(Json(AskResponse {
        session: session_id,
        snapshot_id,
        instance_id: instance.map(|i| i.question_id),
        image_id,
        question,
        tokens: result.words.clone(),
        objects: result.objects.clone(),
        prune: prune.iter().copied().collect(),
        agg,
        top5,
        answer_frequencies,
        heads,
        hashes: Hashes::of(&state),
    }))
}

fn frequency_context(
    state: &AppState,
    inst: &Instance,
    predicted: &str,
) -> ApiResult<Option<FrequencyContext>> {
    let data = state.require_corpus()?;
    let Some(table) = data.tables.get(&inst.group_key()) else {
        return Ok(None);
    };
    Ok(Some(FrequencyContext {
        group_key: table.group_key.clone(),
        gt_answer: inst.gt_answer.clone(),
        gt_class: table.classify(&inst.gt_answer),
        predicted: predicted.to_owned(),
        predicted_class: table.classify(predicted),
        correct: predicted == inst.gt_answer,
        bias_flag: bias_flag(predicted, inst, &data.tables)?,
        answers: table
            .ranked
            .iter()
            .map(|a| AnswerCount {
                answer: a.clone(),
                count: table.counts[a],
                class: table.classify(a),
            })
            .collect(),
    }))
}

// ---- /head/{id}/map --------------------------------------------------------

#[derive(Debug, Deserialize)]
pub struct SessionQuery {
    #[serde(default)]
    pub session: Option<String>,
    #[serde(default)]
    pub agg: Option<AggKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResponse {
    pub head: HeadId,
    pub snapshot_id: String,
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub cells: Vec<f32>,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub per_row_k: Vec<f64>,
    pub aggregate: f64,
    pub agg: AggKind,
    pub bucket: u8,
    pub pruned: bool,
    #[serde(flatten)]
    pub hashes: Hashes,
}

async fn current_snapshot(state: &AppState, session: Option<&str>) -> ApiResult<Arc<Snapshot>> {
    let id = session.unwrap_or(DEFAULT_SESSION);
    let handle = state
        .sessions()
        .get(id)
        .ok_or_else(|| ApiError::Conflict(format!("session `{id}` has not asked anything yet")))?;
    let session = handle.lock().await;
    session
        .current
        .clone()
        .ok_or_else(|| ApiError::Conflict(format!("session `{id}` has no current forward")))
}

fn find_map<'a>(snap: &'a Snapshot, head: &HeadId) -> ApiResult<(&'a AttentionMap32, &'a KSummary)> {
    let i = snap
        .state
        .result
        .maps
        .iter()
        .position(|m| m.head() == *head)
        .ok_or_else(|| ApiError::NotFound(format!("head {head} not captured")))?;
    Ok((&snap.state.result.maps[i], &snap.state.summaries[i]))
}

async fn head_map(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<SessionQuery>,
) -> ApiResult<Json<MapResponse>> {
    let head = parse_head(&state, &id)?;
    let snap = current_snapshot(&state, q.session.as_deref()).await?;
    let (map, stored) = find_map(&snap, &head)?;
    let summary = match q.agg {
        Some(agg) if agg != stored.agg => summarize_head(map, agg, &state.config().thresholds),
        _ => stored.clone(),
    };
    Ok(Json(MapResponse {
        head,
        snapshot_id: snap.snapshot_id.clone(),
        rows: map.rows(),
        cols: map.cols(),
        cells: map.cells().data().to_vec(),
        row_labels: map.row_labels().to_vec(),
        col_labels: map.col_labels().to_vec(),
        per_row_k: summary.per_row_k,
        aggregate: summary.aggregate,
        agg: summary.agg,
        bucket: summary.bucket,
        pruned: snap.prune.contains(&head),
        hashes: Hashes::of(&state),
    }))
}

// ---- /head/{id}/stats ------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsResponse {
    pub head: HeadId,
    pub agg: AggKind,
    pub thresholds: BucketThresholds,
    pub instances: usize,
    pub skipped: usize,
    pub k_values: Vec<f64>,
    /// Operation → instances per bucket.
    pub by_operation: BTreeMap<String, [usize; 4]>,
    /// The session's current k for this head, if it has a forward.
    pub current_k: Option<f64>,
    pub current_bucket: Option<u8>,
    #[serde(flatten)]
    pub hashes: Hashes,
}

async fn head_stats(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<SessionQuery>,
) -> ApiResult<Json<StatsResponse>> {
    let head = parse_head(&state, &id)?;
    let session_agg = match q.session.as_deref().and_then(|s| state.sessions().get(s)) {
        Some(h) => Some(h.lock().await.agg),
        None => None,
    };
    let agg = q
        .agg
        .or(session_agg)
        .unwrap_or(state.config().default_agg);
    let stats = state.dataset_stats(agg).await?;
    let hs = stats
        .head(&head)
        .ok_or_else(|| ApiError::NotFound(format!("head {head} missing from statistics")))?;
    let current = match current_snapshot(&state, q.session.as_deref()).await {
        Ok(snap) => {
            let (map, _) = find_map(&snap, &head)?;
            Some(summarize_head(map, agg, &state.config().thresholds))
        }
        Err(_) => None,
    };
    Ok(Json(StatsResponse {
        head,
        agg,
        thresholds: stats.thresholds,
        instances: stats.question_ids.len(),
        skipped: stats.skipped.len(),
        k_values: hs.k_values.clone(),
        by_operation: hs.by_operation.clone(),
        current_k: current.as_ref().map(|s| s.aggregate),
        current_bucket: current.map(|s| s.bucket),
        hashes: Hashes::of(&state),
    }))
}

// ---- /filter ---------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterRequest {
    #[serde(default)]
    pub session: Option<String>,
    /// Head whose map the selection was made on.
    pub head: String,
    pub selection: Selection,
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub agg: Option<AggKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterResponse {
    pub head: HeadId,
    pub selection: Selection,
    pub tokens: Vec<TokenRef>,
    pub threshold: f64,
    pub agg: AggKind,
    pub matches: Vec<FilterMatch>,
    #[serde(flatten)]
    pub hashes: Hashes,
}

async fn filter(
    State(state): State<AppState>,
    ApiJson(req): ApiJson<FilterRequest>,
) -> ApiResult<Json<FilterResponse>> {
    let head = parse_head(&state, &req.head)?;
    let threshold = req.threshold.unwrap_or(DEFAULT_FILTER_THRESHOLD);
    if !threshold.is_finite() {
        return Err(ApiError::BadRequest("threshold must be finite".into()));
    }
    let session_id = req.session.as_deref().unwrap_or(DEFAULT_SESSION);
    let snap = current_snapshot(&state, Some(session_id)).await?;
    let agg = req.agg.unwrap_or(snap.state.summaries.first().map_or(AggKind::Median, |s| s.agg));
    let tokens = resolve_selection(&snap.state.result, head, req.selection)?;
    let matches = filter_heads(&snap.state.result, head, req.selection, threshold, agg)?;
    Ok(Json(FilterResponse {
        head,
        selection: req.selection,
        tokens,
        threshold,
        agg,
        matches,
        hashes: Hashes::of(&state),
    }))
}

// ---- /compare --------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareRequest {
    #[serde(default)]
    pub session: Option<String>,
    pub snapshot_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadDeltaBody {
    pub head: HeadId,
    pub rows: usize,
    pub cols: usize,
    pub k_delta: f64,
    /// Row-major `current − reference`.
    pub cells: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareResponse {
    pub current: String,
    pub reference: String,
    pub heads: Vec<HeadDeltaBody>,
    /// Heads left out because their maps differ in shape.
    pub excluded: Vec<HeadId>,
    #[serde(flatten)]
    pub hashes: Hashes,
}

async fn compare(
    State(state): State<AppState>,
    ApiJson(req): ApiJson<CompareRequest>,
) -> ApiResult<Json<CompareResponse>> {
    let session_id = req.session.as_deref().unwrap_or(DEFAULT_SESSION);
    let handle = state
        .sessions()
        .get(session_id)
        .ok_or_else(|| ApiError::NotFound(format!("no snapshot `{}` in session `{session_id}`", req.snapshot_id)))?;
    let (current, reference) = {
        let mut session = handle.lock().await;
        let reference = session.snapshot(&req.snapshot_id).ok_or_else(|| {
            ApiError::NotFound(format!("no snapshot `{}` in session `{session_id}`", req.snapshot_id))
        })?;
        let current = session
            .current
            .clone()
            .ok_or_else(|| ApiError::Conflict("no current forward".into()))?;
        (current, reference)
    };
    let diff = diff_snapshots(&current.state, &reference.state, &state.config().thresholds);
    Ok(Json(CompareResponse {
        current: current.snapshot_id.clone(),
        reference: reference.snapshot_id.clone(),
        heads: diff
            .heads
            .into_iter()
            .map(|d| HeadDeltaBody {
                head: d.head,
                rows: d.cells.rows(),
                cols: d.cells.cols(),
                k_delta: d.k_delta,
                cells: d.cells.into_data(),
            })
            .collect(),
        excluded: diff.excluded,
        hashes: Hashes::of(&state),
    }))
}

// ---- /session/{id} ---------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResponse {
    pub session: String,
    pub agg: AggKind,
    pub prune: Vec<HeadId>,
    pub current: Option<String>,
    pub snapshots: Vec<String>,
    #[serde(flatten)]
    pub hashes: Hashes,
}

async fn session_info(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Json<SessionResponse>> {
    let handle = state
        .sessions()
        .get(&id)
        .ok_or_else(|| ApiError::NotFound(format!("no session `{id}`")))?;
    let session = handle.lock().await;
    Ok(Json(SessionResponse {
        session: id,
        agg: session.agg,
        prune: session.prune.iter().copied().collect(),
        current: session.current.as_ref().map(|s| s.snapshot_id.clone()),
        snapshots: session.snapshot_ids(),
        hashes: Hashes::of(&state),
    }))
}
