//! Run registry: submission, idempotency, a bounded worker pool and the
//! on-disk run folders that make the service restart safe.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use emsim::io::{RunConfig, RunFolder};
use emsim::sim::{run_batch, SimOutput};
use emsim::streets::TravelModel;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;

use crate::error::ApiError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl RunStatus {
    fn pending(self) -> bool {
        matches!(self, RunStatus::Queued | RunStatus::Running)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHandle {
    pub id: String,
    pub status: RunStatus,
    pub config: RunConfig,
    pub config_hash: String,
    #[serde(default)]
    pub idempotency_key: Option<String>,
    #[serde(default)]
    pub error: Option<String>,
}

const HANDLE_FILE: &str = "handle.json";

#[derive(Default)]
struct Inner {
    runs: HashMap<String, RunHandle>,
    by_key: HashMap<String, String>,
    by_hash: HashMap<String, String>,
    next_id: u64,
    outputs: HashMap<String, Arc<Vec<SimOutput>>>,
    routers: HashMap<String, Arc<TravelModel>>,
}

pub struct Registry {
    data_dir: PathBuf,
    inner: Mutex<Inner>,
    permits: Arc<Semaphore>,
    max_pending: usize,
}

/// Hash of the configuration as the run sees it (output folder excluded).
pub fn config_hash(config: &RunConfig) -> String {
    let mut c = config.clone();
    c.output_folder = None;
    let bytes = serde_json::to_vec(&c).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}

const OUTPUT_CACHE: usize = 8;

impl Registry {
    /// Opens `data_dir`, reloading the runs persisted there. Runs that were
    /// queued or running when the previous server stopped are marked failed.
    /// With `workers == 0` submitted runs stay queued.
    pub fn open(data_dir: impl Into<PathBuf>, workers: usize, max_pending: usize) -> Result<Arc<Self>, ApiError> {
        let data_dir = data_dir.into();
        fs::create_dir_all(&data_dir).map_err(|e| ApiError::Internal(format!("{}: {e}", data_dir.display())))?;
        let mut inner = Inner::default();
        let entries = fs::read_dir(&data_dir).map_err(|e| ApiError::Internal(e.to_string()))?;
        for entry in entries.flatten() {
            let path = entry.path().join(HANDLE_FILE);
            let Ok(bytes) = fs::read(&path) else { continue };
            let Ok(mut h) = serde_json::from_slice::<RunHandle>(&bytes) else { continue };
            if h.status.pending() {
                h.status = RunStatus::Failed;
                h.error = Some("interrupted by a server restart".into());
                let _ = fs::write(&path, serde_json::to_vec(&h).expect("handle serializes"));
            }
            if let Some(n) = h.id.strip_prefix("run-").and_then(|n| n.parse::<u64>().ok()) {
                inner.next_id = inner.next_id.max(n + 1);
            }
            if let Some(k) = &h.idempotency_key {
                inner.by_key.insert(k.clone(), h.id.clone());
            }
            if h.status == RunStatus::Done {
                inner.by_hash.insert(h.config_hash.clone(), h.id.clone());
            }
            inner.runs.insert(h.id.clone(), h);
        }
        Ok(Arc::new(Registry { data_dir, inner: Mutex::new(inner), permits: Arc::new(Semaphore::new(workers)), max_pending }))
    }

    pub fn folder(&self, id: &str) -> RunFolder {
        RunFolder::new(self.data_dir.join(id))
    }

    fn persist(&self, h: &RunHandle) {
        let dir = self.data_dir.join(&h.id);
        if fs::create_dir_all(&dir).is_ok() {
            let _ = fs::write(dir.join(HANDLE_FILE), serde_json::to_vec(h).expect("handle serializes"));
        }
    }

    pub fn get(&self, id: &str) -> Option<RunHandle> {
        self.inner.lock().unwrap().runs.get(id).cloned()
    }

    pub fn list(&self) -> Vec<RunHandle> {
        let mut v: Vec<RunHandle> = self.inner.lock().unwrap().runs.values().cloned().collect();
        v.sort_by(|a, b| a.id.cmp(&b.id));
        v
    }

    /// Registers a run and schedules it. Returns the handle and whether a
    /// new run was created (false for idempotent replays and cache hits).
    pub fn submit(self: &Arc<Self>, mut config: RunConfig, key: Option<String>) -> Result<(RunHandle, bool), ApiError> {
        config.validate()?;
        config.output_folder = None;
        let hash = config_hash(&config);
        let handle = {
            let mut inner = self.inner.lock().unwrap();
            if let Some(id) = key.as_ref().and_then(|k| inner.by_key.get(k)) {
                return Ok((inner.runs[id].clone(), false));
            }
            if let Some(id) = inner.by_hash.get(&hash) {
                let h = inner.runs[id].clone();
                if h.status != RunStatus::Failed {
                    if let Some(k) = key {
                        inner.by_key.insert(k, h.id.clone());
                    }
                    return Ok((h, false));
                }
            }
            if inner.runs.values().filter(|h| h.status.pending()).count() >= self.max_pending {
                return Err(ApiError::Capacity);
            }
            let id = format!("run-{:06}", inner.next_id);
            inner.next_id += 1;
            config.output_folder = Some(self.data_dir.join(&id));
            let h = RunHandle {
                id: id.clone(),
                status: RunStatus::Queued,
                config,
                config_hash: hash.clone(),
                idempotency_key: key.clone(),
                error: None,
            };
            if let Some(k) = key {
                inner.by_key.insert(k, id.clone());
            }
            inner.by_hash.insert(hash, id.clone());
            inner.runs.insert(id, h.clone());
            h
        };
        self.persist(&handle);
        let reg = Arc::clone(self);
        let id = handle.id.clone();
        tokio::spawn(async move {
            let Ok(_permit) = reg.permits.clone().acquire_owned().await else { return };
            let Some(config) = reg.set_status(&id, RunStatus::Running, None).map(|h| h.config) else { return };
            let folder = reg.folder(&id);
            let result = tokio::task::spawn_blocking(move || execute(&config, &folder))
                .await
                .unwrap_or_else(|e| Err(format!("worker panicked: {e}")));
            match result {
                Ok(()) => reg.set_status(&id, RunStatus::Done, None),
                Err(msg) => reg.set_status(&id, RunStatus::Failed, Some(msg)),
            };
        });
        Ok((handle, true))
    }

    fn set_status(&self, id: &str, status: RunStatus, error: Option<String>) -> Option<RunHandle> {
        let h = {
            let mut inner = self.inner.lock().unwrap();
            let h = inner.runs.get_mut(id)?;
            h.status = status;
            h.error = error;
            let h = h.clone();
            if status == RunStatus::Failed && inner.by_hash.get(&h.config_hash) == Some(&h.id) {
                inner.by_hash.remove(&h.config_hash);
            }
            h
        };
        self.persist(&h);
        Some(h)
    }

    /// Handle of a finished run, or the matching error.
    pub fn done(&self, id: &str) -> Result<RunHandle, ApiError> {
        let h = self.get(id).ok_or_else(|| ApiError::NotFound(format!("run {id}")))?;
        match h.status {
            RunStatus::Done => Ok(h),
            _ => Err(ApiError::NotDone(id.to_string())),
        }
    }

    pub fn outputs(&self, id: &str) -> Result<Arc<Vec<SimOutput>>, ApiError> {
        self.done(id)?;
        if let Some(o) = self.inner.lock().unwrap().outputs.get(id) {
            return Ok(Arc::clone(o));
        }
        let outputs = Arc::new(self.folder(id).load_outputs()?);
        let mut inner = self.inner.lock().unwrap();
        if inner.outputs.len() >= OUTPUT_CACHE {
            inner.outputs.clear();
        }
        inner.outputs.insert(id.to_string(), Arc::clone(&outputs));
        Ok(outputs)
    }

    pub fn router(&self, id: &str) -> Result<Arc<TravelModel>, ApiError> {
        let h = self.done(id)?;
        if let Some(r) = self.inner.lock().unwrap().routers.get(id) {
            return Ok(Arc::clone(r));
        }
        let router = Arc::new(h.config.router()?);
        self.inner.lock().unwrap().routers.insert(id.to_string(), Arc::clone(&router));
        Ok(router)
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }
}

fn execute(config: &RunConfig, folder: &RunFolder) -> Result<(), String> {
    let run = config.prepare().map_err(|e| e.to_string())?;
    let outputs = run_batch(&run.sim, &run.scenarios, &run.policies, &run.router);
    folder.save(config, &run, &outputs).map_err(|e| e.to_string())?;
    Ok(())
}
