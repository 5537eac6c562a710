//! Read-only HTTP API over a loaded session.
//!
//! Every body is the same JSON the CLI prints for the equivalent command.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use axum::extract::{Path, Query, State};
use axum::http::{header, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use serde::Serialize;
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;

use absalign_core::metrics::{ConfusionOptions, LevelSummary, PairSelection, PreferenceOptions};
use absalign_core::report::to_json;
use absalign_core::{EntropyBase, QueryError, Session, SessionError, SubgraphSelector};

pub const DEFAULT_PAGE: usize = 50;
pub const MAX_PAGE: usize = 1000;

struct AppState {
    session: Arc<Session>,
    levels: OnceLock<LevelsBody>,
}

#[derive(Clone, Serialize)]
struct LevelsBody {
    mode: String,
    instances: usize,
    levels: Vec<LevelSummary>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    warnings: Vec<String>,
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    param: Option<String>,
    /// 1-based character position inside a query, when known.
    #[serde(skip_serializing_if = "Option::is_none")]
    position: Option<usize>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    param: Option<String>,
    position: Option<usize>,
}

impl ApiError {
    fn bad(param: &str, message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
            param: Some(param.to_string()),
            position: None,
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::NOT_FOUND,
            message: message.into(),
            param: None,
            position: None,
        }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let position = match &e {
            SessionError::Query(q) => Some(match q {
                QueryError::Syntax { pos, .. }
                | QueryError::UnknownNode { pos, .. }
                | QueryError::UnknownLevel { pos, .. }
                | QueryError::InvalidThreshold { pos, .. } => *pos,
            }),
            _ => None,
        };
        ApiError {
            status: StatusCode::BAD_REQUEST,
            message: e.to_string(),
            param: None,
            position,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.message,
            param: self.param,
            position: self.position,
        };
        (self.status, json_body(to_json(&body))).into_response()
    }
}

fn json_body(text: String) -> impl IntoResponse {
    ([(header::CONTENT_TYPE, "application/json; charset=utf-8")], text)
}

type Params = Query<HashMap<String, String>>;
type ApiResult = Result<Response, ApiError>;

fn ok<T: Serialize>(value: &T) -> ApiResult {
    Ok(json_body(to_json(value)).into_response())
}

fn opt<T: std::str::FromStr>(p: &HashMap<String, String>, key: &str) -> Result<Option<T>, ApiError>
where
    T::Err: std::fmt::Display,
{
    match p.get(key) {
        None => Ok(None),
        Some(raw) => raw
            .parse()
            .map(Some)
            .map_err(|e| ApiError::bad(key, format!("bad `{key}` value `{raw}`: {e}"))),
    }
}

fn req<T: std::str::FromStr>(p: &HashMap<String, String>, key: &str) -> Result<T, ApiError>
where
    T::Err: std::fmt::Display,
{
    opt(p, key)?.ok_or_else(|| ApiError::bad(key, format!("missing required parameter `{key}`")))
}

fn flag(p: &HashMap<String, String>, key: &str) -> Result<bool, ApiError> {
    match p.get(key).map(String::as_str) {
        None | Some("false") | Some("0") => Ok(false),
        Some("") | Some("true") | Some("1") => Ok(true),
        Some(other) => Err(ApiError::bad(key, format!("`{key}` must be true or false, got `{other}`"))),
    }
}

/// Runs a session computation off the async workers.
async fn blocking<F>(state: Arc<AppState>, f: F) -> ApiResult
where
    F: FnOnce(&Session) -> ApiResult + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&state.session))
        .await
        .unwrap_or_else(|e| {
            Err(ApiError {
                status: StatusCode::INTERNAL_SERVER_ERROR,
                message: format!("worker failed: {e}"),
                param: None,
                position: None,
            })
        })
}

async fn dag(State(state): State<Arc<AppState>>) -> ApiResult {
    ok(&state.session.dag().describe())
}

async fn levels(State(state): State<Arc<AppState>>) -> ApiResult {
    let st = state.clone();
    blocking(state, move |s| {
        let body = st.levels.get_or_init(|| LevelsBody {
            mode: s.mode().to_string(),
            instances: s.records().len(),
            levels: s.levels(EntropyBase::Two),
            warnings: s.warnings(),
        });
        ok(body)
    })
    .await
}

#[derive(Serialize)]
struct InstancePage {
    #[serde(skip_serializing_if = "Option::is_none")]
    query: Option<String>,
    total: usize,
    matched: usize,
    fraction: f64,
    offset: usize,
    limit: usize,
    ids: Vec<String>,
}

async fn instances(State(state): State<Arc<AppState>>, Query(p): Params) -> ApiResult {
    let limit: usize = opt(&p, "limit")?.unwrap_or(DEFAULT_PAGE);
    if limit == 0 || limit > MAX_PAGE {
        return Err(ApiError::bad("limit", format!("limit must be in 1..={MAX_PAGE}")));
    }
    let offset: usize = opt(&p, "offset")?.unwrap_or(0);
    let query = p.get("query").filter(|q| !q.trim().is_empty()).cloned();
    blocking(state, move |s| {
        let total = s.records().len();
        let (canonical, ids) = match &query {
            Some(q) => {
                let r = s.query(q)?;
                (Some(r.query), r.matches)
            }
            None => {
                let mut ids: Vec<String> = s.records().iter().map(|r| r.instance_id.clone()).collect();
                ids.sort();
                (None, ids)
            }
        };
        let matched = ids.len();
        let fraction = if total == 0 { 0.0 } else { matched as f64 / total as f64 };
        let page = ids.into_iter().skip(offset).take(limit).collect();
        ok(&InstancePage {
            query: canonical,
            total,
            matched,
            fraction,
            offset,
            limit,
            ids: page,
        })
    })
    .await
}

async fn weighted(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    blocking(state, move |s| match s.weighted_by_id(&id) {
        Some(wd) => ok(&wd.to_persisted(s.dag())),
        None => Err(ApiError::not_found(format!("no instance `{id}`"))),
    })
    .await
}

async fn accuracy(State(state): State<Arc<AppState>>, Query(p): Params) -> ApiResult {
    let from: u32 = req(&p, "from")?;
    let to: u32 = req(&p, "to")?;
    let group_by: Option<u32> = opt(&p, "group_by")?;
    blocking(state, move |s| ok(&s.accuracy(from, to, group_by)?)).await
}

async fn uncertainty(State(state): State<Arc<AppState>>, Query(p): Params) -> ApiResult {
    let from: u32 = req(&p, "from")?;
    let to: u32 = req(&p, "to")?;
    let group_by: Option<u32> = opt(&p, "group_by")?;
    let base: EntropyBase = opt(&p, "base")?.unwrap_or_default();
    blocking(state, move |s| ok(&s.uncertainty(from, to, base, group_by)?)).await
}

async fn preference(State(state): State<Arc<AppState>>, Query(p): Params) -> ApiResult {
    let left: SubgraphSelector = req(&p, "left")?;
    let right: SubgraphSelector = req(&p, "right")?;
    let options = PreferenceOptions {
        value_kind: opt(&p, "value_kind")?.unwrap_or_default(),
        disjoint: flag(&p, "disjoint")?,
    };
    blocking(state, move |s| ok(&s.preference(&left, &right, options)?)).await
}

async fn confusion(State(state): State<Arc<AppState>>, Query(p): Params) -> ApiResult {
    let pairs = p.get("pairs").cloned().unwrap_or_else(|| "co-supported".into());
    let options = ConfusionOptions {
        pair_mode: opt(&p, "pair_mode")?.unwrap_or_default(),
        exclude_related: flag(&p, "exclude_related")?,
        base: opt(&p, "base")?.unwrap_or_default(),
        top: opt(&p, "top")?,
    };
    blocking(state, move |s| {
        let selection = PairSelection::parse(&pairs, s.dag()).map_err(|e| ApiError::bad("pairs", e))?;
        ok(&s.confusion(&selection, options)?)
    })
    .await
}

async fn acc_at_k(State(state): State<Arc<AppState>>, Query(p): Params) -> ApiResult {
    let k: usize = req(&p, "k")?;
    blocking(state, move |s| ok(&s.acc_at_k(k)?)).await
}

async fn not_found() -> ApiError {
    ApiError::not_found("no such route")
}

/// Builds the API router. `static_dir`, when it exists, is served at `/`.
pub fn router(session: Arc<Session>, static_dir: Option<PathBuf>) -> Router {
    let state = Arc::new(AppState {
        session,
        levels: OnceLock::new(),
    });
    let api = Router::new()
        .route("/api/dag", get(dag))
        .route("/api/levels", get(levels))
        .route("/api/instances", get(instances))
        .route("/api/instances/{id}/weighted", get(weighted))
        .route("/api/metrics/accuracy", get(accuracy))
        .route("/api/metrics/uncertainty", get(uncertainty))
        .route("/api/metrics/preference", get(preference))
        .route("/api/metrics/concept-confusion", get(confusion))
        .route("/api/metrics/acc-at-k", get(acc_at_k))
        .route("/api/{*rest}", get(not_found))
        .with_state(state);
    let app = match static_dir.filter(|d| d.is_dir()) {
        Some(dir) => api.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true)),
        None => api.fallback(not_found),
    };
    app.layer(CorsLayer::new().allow_origin(Any).allow_methods([Method::GET]))
}

/// Binds `addr` and serves until the process exits.
pub async fn serve(session: Arc<Session>, addr: SocketAddr, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(session, static_dir)).await
}
