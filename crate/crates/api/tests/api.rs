use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use emsim::io::{RunConfig, RunFolder};
use emsim::metrics::{export_table, summarize_outputs, MetricFilter, MetricKind};
use emsim::trace::discretize_log;
use emsim_api::frames::FramesPayload;
use emsim_api::{app, MetricsPayload, Registry, RunHandle, RunStatus};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

async fn send(app: &Router, method: &str, uri: &str, body: Option<Value>, key: Option<&str>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(k) = key {
        req = req.header("idempotency-key", k);
    }
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let res = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b) = send(app, "GET", uri, None, None).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn submit(app: &Router, cfg: Value) -> RunHandle {
    let (s, b) = send(app, "POST", "/runs", Some(cfg), None).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{}", String::from_utf8_lossy(&b));
    serde_json::from_slice(&b).unwrap()
}

async fn wait_done(app: &Router, id: &str) -> RunHandle {
    for _ in 0..600 {
        let (_, v) = get_json(app, &format!("/runs/{id}")).await;
        let h: RunHandle = serde_json::from_value(v).unwrap();
        match h.status {
            RunStatus::Done => return h,
            RunStatus::Failed => panic!("run failed: {:?}", h.error),
            _ => tokio::time::sleep(Duration::from_millis(50)).await,
        }
    }
    panic!("run {id} did not finish");
}

fn small() -> Value {
    json!({ "n_scenarios": 2, "horizon_hours": 3.0, "n_ambulances": 4, "policies": ["CA", "BM", "GHP1"], "call_rate": 6.0 })
}

fn server(dir: &std::path::Path, workers: usize, max_pending: usize) -> Router {
    app(Registry::open(dir, workers, max_pending).unwrap(), None)
}

#[tokio::test]
async fn run_lifecycle_frames_and_restart() {
    let dir = tempfile::tempdir().unwrap();
    let app = server(dir.path(), 2, 8);
    let h = submit(&app, small()).await;
    assert!(matches!(h.status, RunStatus::Queued | RunStatus::Running | RunStatus::Done));
    let h = wait_done(&app, &h.id).await;
    let start = h.config.start;

    let uri = format!("/runs/{}/frames?t_step=5&from={}&to={}&policy=BM&scenario=1", h.id, start, start + 60.0);
    let (s, body) = send(&app, "GET", &uri, None, None).await;
    assert_eq!(s, StatusCode::OK);
    let payload: FramesPayload = serde_json::from_slice(&body).unwrap();
    assert_eq!(payload.frames.len(), 13);
    assert_eq!((payload.policy.as_str(), payload.scenario), ("BM", 1));

    // Positions are the trace module's output, bit for bit.
    let outputs = RunFolder::new(dir.path().join(&h.id)).load_outputs().unwrap();
    let out = outputs.iter().find(|o| o.label() == "BM" && o.scenario == 1).unwrap();
    for (k, a) in out.ambulances.iter().enumerate() {
        let ride = discretize_log(&a.log, 5.0, out.speed_kmh).unwrap();
        for f in &payload.frames {
            let j = ride.times.iter().position(|t| *t == f.t).unwrap();
            assert_eq!(f.ambulances[k].position, ride.rides[j]);
            assert_eq!(f.ambulances[k].ride_type, ride.types[j].code());
        }
    }

    // Full window at a coarser step; repeated calls are byte-identical.
    let uri = format!("/runs/{}/frames?t_step=60", h.id);
    let (_, a) = send(&app, "GET", &uri, None, None).await;
    let (_, b) = send(&app, "GET", &uri, None, None).await;
    assert_eq!(a, b);
    let full: FramesPayload = serde_json::from_slice(&a).unwrap();
    assert_eq!(full.frames.len(), 3 * 60 + 1);
    let moving = full.frames.iter().flat_map(|f| &f.ambulances).filter(|a| matches!(a.ride_type, 2 | 4 | 6 | 8));
    for a in moving {
        assert!(a.future_path.is_empty() || a.future_path[0] == a.position);
    }

    let bad = format!("/runs/{}/frames?t_step=5&from={}&to={}", h.id, start + 60.0, start);
    assert_eq!(send(&app, "GET", &bad, None, None).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(send(&app, "GET", "/runs/nope/frames?t_step=5", None, None).await.0, StatusCode::NOT_FOUND);

    // A fresh server on the same folder answers identically.
    let restarted = server(dir.path(), 1, 8);
    let (s, c) = send(&restarted, "GET", &uri, None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(a, c);
    let h2 = submit(&restarted, json!({ "n_scenarios": 1, "horizon_hours": 1.0, "seed": 99 })).await;
    assert_ne!(h2.id, h.id);
}

#[tokio::test]
async fn config_errors_idempotency_and_capacity() {
    let dir = tempfile::tempdir().unwrap();
    // No workers: runs stay queued.
    let app = server(dir.path(), 0, 2);
    let (s, _) = send(&app, "POST", "/runs", Some(json!({ "n_hospitals": 12 })), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = send(&app, "POST", "/runs", Some(json!({ "no_such_key": 1 })), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, a) = send(&app, "POST", "/runs", Some(json!({ "seed": 1 })), Some("k1")).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let (_, b) = send(&app, "POST", "/runs", Some(json!({ "seed": 2 })), Some("k1")).await;
    let (a, b): (RunHandle, RunHandle) = (serde_json::from_slice(&a).unwrap(), serde_json::from_slice(&b).unwrap());
    assert_eq!(a.id, b.id);

    let c = submit(&app, json!({ "seed": 3 })).await;
    assert_ne!(c.id, a.id);
    let (s, _) = send(&app, "POST", "/runs", Some(json!({ "seed": 4 })), None).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);

    let (s, _) = send(&app, "GET", &format!("/runs/{}/frames?t_step=5", a.id), None, None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = send(&app, "GET", &format!("/runs/{}/metrics", a.id), None, None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, list) = get_json(&app, "/runs").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(list.as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn metrics_match_library_export() {
    let dir = tempfile::tempdir().unwrap();
    let app = server(dir.path(), 1, 8);
    let h = submit(&app, small()).await;
    let h = wait_done(&app, &h.id).await;
    let outputs = RunFolder::new(dir.path().join(&h.id)).load_outputs().unwrap();

    let (s, raw) = get_json(&app, &format!("/runs/{}/metrics?priority=high", h.id)).await;
    assert_eq!(s, StatusCode::OK);
    let (_, pen) = get_json(&app, &format!("/runs/{}/metrics?priority=high&kind=penalized", h.id)).await;
    let raw: MetricsPayload = serde_json::from_value(raw).unwrap();
    let pen: MetricsPayload = serde_json::from_value(pen).unwrap();
    for (r, p) in raw.policies.iter().zip(&pen.policies) {
        assert_eq!(p.summary.mean, 4.0 * r.summary.mean);
        assert_eq!(p.summary.max, 4.0 * r.summary.max);
        assert_eq!(r.ecdf.last().unwrap().1, 1.0);
        assert_eq!(r.histogram.counts.iter().sum::<usize>(), r.summary.n);
    }

    // Same numbers as the tabular export for the same filter.
    let f = MetricFilter::parse(Some("0"), Some("00:00-02:00"), Some("raw"), None).unwrap();
    let rows = summarize_outputs(&outputs, &f, false);
    let (_, v) = get_json(&app, &format!("/runs/{}/metrics?days=0&window=00:00-02:00", h.id)).await;
    let api: MetricsPayload = serde_json::from_value(v).unwrap();
    let api_rows: Vec<_> = rows
        .iter()
        .map(|r| {
            let p = api.policies.iter().find(|p| p.policy == r.policy).unwrap();
            emsim::metrics::SummaryRow { summary: p.summary, ..r.clone() }
        })
        .collect();
    assert_eq!(export_table(&api_rows), export_table(&rows));
    assert_eq!(api.filter.kind, MetricKind::Raw);

    // Sunday selects nothing in a Monday-morning run.
    let (s, _) = get_json(&app, &format!("/runs/{}/metrics?days=6", h.id)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = get_json(&app, &format!("/runs/{}/metrics?window=00:10-01:00", h.id)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn forecast_and_data_charts() {
    let dir = tempfile::tempdir().unwrap();
    let app = server(dir.path(), 2, 8);

    let zero = submit(&app, json!({ "call_rate": 0.0, "horizon_hours": 1.0, "grid": [3, 2] })).await;
    let zero = wait_done(&app, &zero.id).await;
    let (s, v) = get_json(&app, &format!("/forecast/heatmap?run={}", zero.id)).await;
    assert_eq!(s, StatusCode::OK);
    let zones = v.as_array().unwrap();
    assert_eq!(zones.len(), 6);
    assert!(zones.iter().all(|z| z["value"] == 0.0));

    let busy = submit(&app, json!({ "call_rate": 4.0, "horizon_hours": 24.0, "n_ambulances": 6 })).await;
    let busy = wait_done(&app, &busy.id).await;
    let (s, v) = get_json(&app, &format!("/forecast/lineplot?run={}&period=3600&paths=300", busy.id)).await;
    assert_eq!(s, StatusCode::OK);
    let pts: Vec<emsim_api::charts::PeriodPoint> = serde_json::from_value(v).unwrap();
    assert_eq!(pts.len(), 24);
    let bracketed = pts.iter().filter(|p| p.q_low <= p.mean && p.mean <= p.q_high).count();
    assert!(bracketed as f64 >= 0.95 * pts.len() as f64);
    let (s, v) = get_json(&app, &format!("/forecast/heatmap?run={}", busy.id)).await;
    assert_eq!(s, StatusCode::OK);
    let total: f64 = v.as_array().unwrap().iter().map(|z| z["value"].as_f64().unwrap()).sum();
    assert!((total - 96.0).abs() < 1e-9);

    // No dataset on these runs.
    let (s, _) = get_json(&app, &format!("/data/piechart?run={}", busy.id)).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let hist = dir.path().join("history.txt");
    std::fs::write(
        &hist,
        "1609718400 -22.9 -43.2 0 low 34 F 1 2\n1609722000 -22.95 -43.3 1 intermediate - M - 2\n1609804800 -22.8 -43.5 2 high 80 - 0 -\n",
    )
    .unwrap();
    let with = submit(&app, json!({ "history_file": hist, "horizon_hours": 2.0 })).await;
    let with = wait_done(&app, &with.id).await;
    let (s, v) = get_json(&app, &format!("/data/piechart?run={}&by=gender", with.id)).await;
    assert_eq!(s, StatusCode::OK);
    let fr: f64 = v.as_array().unwrap().iter().map(|x| x["fraction"].as_f64().unwrap()).sum();
    assert!((fr - 1.0).abs() < 1e-12);
    let (_, v) = get_json(&app, &format!("/data/lineplot?run={}&period=86400", with.id)).await;
    assert_eq!(v.as_array().unwrap().iter().map(|p| p["count"].as_u64().unwrap()).collect::<Vec<_>>(), vec![2, 1]);
    let (_, v) = get_json(&app, &format!("/data/heatmap?run={}&days=0", with.id)).await;
    let n: f64 = v.as_array().unwrap().iter().map(|z| z["value"].as_f64().unwrap()).sum();
    assert_eq!(n, 2.0);
    let (s, v) = get_json(&app, &format!("/data/histogram?run={}&field=age&bins=2", with.id)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["counts"], json!([1, 1]));
    let (s, _) = get_json(&app, &format!("/data/histogram?run={}&gender=X", with.id)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = get_json(&app, &format!("/data/scatter?run={}", with.id)).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn serves_ui_assets_and_cors() {
    let data = tempfile::tempdir().unwrap();
    let ui = tempfile::tempdir().unwrap();
    std::fs::write(ui.path().join("index.html"), "<html>ui</html>").unwrap();
    let app = app(Registry::open(data.path(), 1, 4).unwrap(), Some(ui.path().to_path_buf()));
    let (s, body) = send(&app, "GET", "/index.html", None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, b"<html>ui</html>");
    let req = Request::builder().uri("/health").header("origin", "http://localhost:5173").body(Body::empty()).unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    assert_eq!(res.headers()["access-control-allow-origin"], "*");
    let _: Arc<Registry> = Registry::open(data.path(), 1, 4).unwrap();
}

#[test]
fn config_json_round_trip() {
    let cfg: RunConfig = serde_json::from_value(small()).unwrap();
    assert_eq!(cfg.n_ambulances, 4);
    assert_eq!(emsim_api::registry::config_hash(&cfg), emsim_api::registry::config_hash(&cfg.clone()));
}
