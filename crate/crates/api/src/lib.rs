//! HTTP/JSON service: asynchronous simulation runs, playback frames,
//! response-time metrics and forecast / historical-data charts.
//!
//! Every payload is recomputed from the persisted run folder, so a restarted
//! server answers exactly as before. JSON field names are snake_case; see
//! `schema.json` next to this crate's manifest.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use emsim::io::RunConfig;
use emsim::metrics::{ecdf_values, histogram_values, select, summarize_outputs, DistSummary, Histogram, MetricFilter};
use serde::{Deserialize, Serialize};
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;

pub mod charts;
pub mod error;
pub mod frames;
pub mod registry;

pub use error::ApiError;
pub use registry::{Registry, RunHandle, RunStatus};

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub port: u16,
    pub data_dir: PathBuf,
    /// Static assets of the playback UI, served at `/`.
    pub ui_dir: Option<PathBuf>,
    pub workers: usize,
    pub max_pending: usize,
}

impl ServeOptions {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
        ServeOptions { port: 8080, data_dir: data_dir.into(), ui_dir: None, workers: 2 * cores, max_pending: 64 }
    }
}

pub fn app(registry: Arc<Registry>, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/runs", post(create_run).get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/frames", get(get_frames))
        .route("/runs/{id}/metrics", get(get_metrics))
        .route("/forecast/heatmap", get(forecast_heatmap))
        .route("/forecast/lineplot", get(forecast_lineplot))
        .route("/data/{chart}", get(data_chart))
        .with_state(registry);
    let api = match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    api.layer(CorsLayer::new().allow_origin(Any).allow_methods(Any).allow_headers(Any))
}

pub async fn serve(opts: ServeOptions) -> Result<(), ApiError> {
    let registry = Registry::open(&opts.data_dir, opts.workers, opts.max_pending)?;
    let addr = SocketAddr::from(([0, 0, 0, 0], opts.port));
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| ApiError::Internal(format!("bind {addr}: {e}")))?;
    axum::serve(listener, app(registry, opts.ui_dir)).await.map_err(|e| ApiError::Internal(e.to_string()))
}

type Reg = State<Arc<Registry>>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::Internal(e.to_string()))?
}

async fn create_run(State(reg): Reg, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    let config: RunConfig = serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(format!("invalid config: {e}")))?;
    let key = headers.get(IDEMPOTENCY_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string);
    let (handle, _) = reg.submit(config, key)?;
    Ok((StatusCode::ACCEPTED, Json(handle)).into_response())
}

async fn list_runs(State(reg): Reg) -> Json<Vec<RunHandle>> {
    Json(reg.list())
}

async fn get_run(State(reg): Reg, Path(id): Path<String>) -> Result<Json<RunHandle>, ApiError> {
    reg.get(&id).map(Json).ok_or_else(|| ApiError::NotFound(format!("run {id}")))
}

#[derive(Debug, Deserialize)]
struct FramesQuery {
    t_step: f64,
    from: Option<f64>,
    to: Option<f64>,
    scenario: Option<u64>,
    policy: Option<String>,
}

async fn get_frames(State(reg): Reg, Path(id): Path<String>, Query(q): Query<FramesQuery>) -> Result<Response, ApiError> {
    let outputs = reg.outputs(&id)?;
    let router = reg.router(&id)?;
    let payload = blocking(move || {
        let out = outputs
            .iter()
            .find(|o| q.scenario.is_none_or(|s| s == o.scenario) && q.policy.as_deref().is_none_or(|p| p == o.label()))
            .ok_or_else(|| ApiError::NotFound("scenario/policy".into()))?;
        let payload = frames::frames(out, router.as_ref(), q.t_step, q.from, q.to)?;
        serde_json::to_vec(&payload).map_err(|e| ApiError::Internal(e.to_string()))
    })
    .await?;
    Ok(([(axum::http::header::CONTENT_TYPE, "application/json")], payload).into_response())
}

#[derive(Debug, Deserialize)]
struct MetricsQuery {
    days: Option<String>,
    window: Option<String>,
    kind: Option<String>,
    priority: Option<String>,
    bins: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyMetrics {
    pub policy: String,
    pub summary: DistSummary,
    pub ecdf: Vec<(f64, f64)>,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsPayload {
    pub filter: MetricFilter,
    pub policies: Vec<PolicyMetrics>,
}

/// Per policy, pooled over scenarios. Policies with no matching record are
/// left out; an empty result is an error.
pub fn metrics_payload(outputs: &[emsim::sim::SimOutput], filter: MetricFilter, bins: usize) -> Result<MetricsPayload, ApiError> {
    let mut policies = Vec::new();
    for row in summarize_outputs(outputs, &filter, false) {
        let records: Vec<_> = outputs.iter().filter(|o| o.label() == row.policy).flat_map(|o| o.records.iter().cloned()).collect();
        let mut values = select(&records, &filter);
        values.sort_by(f64::total_cmp);
        policies.push(PolicyMetrics {
            histogram: histogram_values(&values, bins)?,
            ecdf: ecdf_values(&values),
            policy: row.policy,
            summary: row.summary,
        });
    }
    if policies.is_empty() {
        return Err(emsim::metrics::MetricsError::EmptySelection.into());
    }
    Ok(MetricsPayload { filter, policies })
}

async fn get_metrics(State(reg): Reg, Path(id): Path<String>, Query(q): Query<MetricsQuery>) -> Result<Json<MetricsPayload>, ApiError> {
    let filter = MetricFilter::parse(q.days.as_deref(), q.window.as_deref(), q.kind.as_deref(), q.priority.as_deref())?;
    let outputs = reg.outputs(&id)?;
    let bins = q.bins.unwrap_or(20);
    blocking(move || metrics_payload(&outputs, filter, bins)).await.map(Json)
}

#[derive(Debug, Deserialize)]
struct ForecastQuery {
    run: String,
    from: Option<String>,
    to: Option<String>,
    #[serde(rename = "type")]
    call_type: Option<usize>,
    period: Option<f64>,
    paths: Option<usize>,
    seed: Option<u64>,
}

const MAX_PATHS: usize = 10_000;

fn forecast_inputs(reg: &Registry, q: &ForecastQuery) -> Result<(emsim::io::ForecastArtifacts, f64, f64, u64), ApiError> {
    let h = reg.done(&q.run)?;
    let art = reg.folder(&q.run).load_forecast()?;
    if art.model.is_none() {
        return Err(ApiError::NotFound(format!("arrival model of run {}", q.run)));
    }
    let instant = |v: &Option<String>, d: f64| match v {
        None => Ok(d),
        Some(s) => emsim::io::config::parse_instant(s).ok_or_else(|| ApiError::BadRequest(format!("bad instant '{s}'"))),
    };
    let (from, to) = (instant(&q.from, h.config.start)?, instant(&q.to, h.config.end())?);
    if from > to {
        return Err(ApiError::BadRequest("expected from <= to".into()));
    }
    Ok((art, from, to, q.seed.unwrap_or(h.config.seed)))
}

async fn forecast_heatmap(State(reg): Reg, Query(q): Query<ForecastQuery>) -> Result<Json<Vec<charts::ZoneValue>>, ApiError> {
    blocking(move || {
        let (art, from, to, _) = forecast_inputs(&reg, &q)?;
        let model = art.model.as_ref().expect("checked");
        charts::forecast_heatmap(model, &art.partition, &art.time_partition, from, to, q.call_type)
    })
    .await
    .map(Json)
}

async fn forecast_lineplot(State(reg): Reg, Query(q): Query<ForecastQuery>) -> Result<Json<Vec<charts::PeriodPoint>>, ApiError> {
    let n_paths = q.paths.unwrap_or(200);
    if n_paths == 0 || n_paths > MAX_PATHS {
        return Err(ApiError::BadRequest(format!("paths must be in 1..={MAX_PATHS}")));
    }
    blocking(move || {
        let (art, from, to, seed) = forecast_inputs(&reg, &q)?;
        let model = art.model.as_ref().expect("checked");
        let period = q.period.unwrap_or(3600.0);
        if !(period > 0.0) || (to - from) / period > 100_000.0 {
            return Err(ApiError::BadRequest("period must be positive and yield at most 100000 periods".into()));
        }
        charts::forecast_lineplot(model, &art.partition, &art.time_partition, from, to, period, n_paths, seed)
    })
    .await
    .map(Json)
}

#[derive(Debug, Deserialize)]
struct DataQuery {
    run: String,
    period: Option<f64>,
    field: Option<String>,
    bins: Option<usize>,
    by: Option<String>,
    #[serde(flatten)]
    filter: charts::DataFilter,
}

async fn data_chart(State(reg): Reg, Path(chart): Path<String>, Query(q): Query<DataQuery>) -> Result<Response, ApiError> {
    if !["lineplot", "heatmap", "histogram", "piechart"].contains(&chart.as_str()) {
        return Err(ApiError::NotFound(format!("chart {chart}")));
    }
    let value = blocking(move || {
        reg.done(&q.run)?;
        let folder = reg.folder(&q.run);
        let records = folder.load_history()?.ok_or_else(|| ApiError::NotFound(format!("historical dataset of run {}", q.run)))?;
        let sel = q.filter.parse()?;
        let json = |v: Result<serde_json::Value, serde_json::Error>| v.map_err(|e| ApiError::Internal(e.to_string()));
        match chart.as_str() {
            "lineplot" => json(serde_json::to_value(charts::data_lineplot(&records, &sel, q.period.unwrap_or(86_400.0))?)),
            "heatmap" => {
                let art = folder.load_forecast()?;
                json(serde_json::to_value(charts::data_heatmap(&records, &sel, &art.partition)?))
            }
            "histogram" => json(serde_json::to_value(charts::data_histogram(
                &records,
                &sel,
                q.field.as_deref().unwrap_or("age"),
                q.bins.unwrap_or(10),
            )?)),
            _ => json(serde_json::to_value(charts::data_piechart(&records, &sel, q.by.as_deref().unwrap_or("type"))?)),
        }
    })
    .await?;
    Ok(Json(value).into_response())
}
