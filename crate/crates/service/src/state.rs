//! Dataset registry and per-session state machines.
//!
//! Every session sits behind its own async mutex, held for the whole of a
//! request (including the selection compute), so requests on one session
//! are applied in some sequential order. Retraining happens on a blocking
//! worker after the lock is released; the session is parked as `Training`
//! until the worker puts it back.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use batchal_core::session::{ActiveLearningSession, BatchProposal, RoundConfig, SessionError};
use batchal_core::{Dataset, RoundRecord, Triplet};
use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex, RwLock};

use crate::error::ApiError;
use crate::wire::{
    AnnotationSubmission, BatchItem, BatchResponse, MetricsResponse, ObjectView, SessionDescriptor, SessionSpec, Status,
    SubmissionResponse,
};

/// Optional per-object display strings, read from `manifest.json` next to
/// the dataset files. The service passes them through untouched.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub labels: Vec<String>,
    #[serde(default)]
    pub images: Vec<String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

#[derive(Debug, Clone)]
pub struct DatasetEntry {
    pub dataset: Arc<Dataset>,
    pub manifest: Manifest,
}

impl DatasetEntry {
    fn object(&self, id: usize) -> ObjectView {
        ObjectView {
            id,
            features: self.dataset.features.row(id).to_vec(),
            label: self.manifest.labels.get(id).cloned(),
            image: self.manifest.images.get(id).cloned(),
        }
    }
}

struct Pending {
    proposal: BatchProposal,
    response: BatchResponse,
    answers: BTreeMap<usize, Triplet>,
}

struct Slot {
    id: String,
    spec: SessionSpec,
    round_cfg: RoundConfig,
    dataset: DatasetEntry,
    /// `None` while a retrain worker owns it.
    session: Option<ActiveLearningSession>,
    status: Status,
    pending: Option<Pending>,
    history: Vec<RoundRecord>,
    round: usize,
    labeled: usize,
    unlabeled: usize,
    last_error: Option<String>,
}

impl Slot {
    fn descriptor(&self) -> SessionDescriptor {
        SessionDescriptor {
            session_id: self.id.clone(),
            config: self.spec.clone(),
            round: self.round,
            labeled: self.labeled,
            unlabeled: self.unlabeled,
            status: self.status,
            last_error: self.last_error.clone(),
        }
    }
}

#[derive(Clone, Default)]
pub struct AppState {
    datasets: Arc<HashMap<String, DatasetEntry>>,
    sessions: Arc<RwLock<HashMap<String, Arc<Mutex<Slot>>>>>,
    counter: Arc<AtomicU64>,
}

impl AppState {
    pub fn new(datasets: HashMap<String, DatasetEntry>) -> Self {
        Self { datasets: Arc::new(datasets), ..Self::default() }
    }

    /// Registers datasets under names; manifests default to empty.
    pub fn with_datasets<I: IntoIterator<Item = (String, Arc<Dataset>)>>(datasets: I) -> Self {
        Self::new(
            datasets.into_iter().map(|(name, dataset)| (name, DatasetEntry { dataset, manifest: Manifest::default() })).collect(),
        )
    }

    pub fn dataset_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.datasets.keys().cloned().collect();
        names.sort();
        names
    }

    async fn slot(&self, id: &str) -> Result<Arc<Mutex<Slot>>, ApiError> {
        self.sessions.read().await.get(id).cloned().ok_or_else(|| ApiError::not_found(format!("no session {id}")))
    }

    pub async fn create(&self, spec: SessionSpec) -> Result<SessionDescriptor, ApiError> {
        let cfg = spec.experiment();
        cfg.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
        let entry = self
            .datasets
            .get(&spec.dataset)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no dataset named {:?}", spec.dataset)))?;
        let session_cfg = cfg.session_config();
        let round_cfg = cfg.round_config(spec.strategy);
        let data = entry.dataset.clone();
        let seed = spec.seed;
        let session = tokio::task::spawn_blocking(move || ActiveLearningSession::init(data, session_cfg, seed))
            .await
            .map_err(ApiError::internal)?
            .map_err(|e| match e {
                SessionError::PoolTooSmall { .. } | SessionError::EmptyTestSet => ApiError::bad_request(e.to_string()),
                other => ApiError::from(other),
            })?;
        let available = round_cfg.candidate_cap.map_or(session.unlabeled().len(), |c| c.min(session.unlabeled().len()));
        if round_cfg.batch_size > available {
            return Err(ApiError::bad_request(format!(
                "batch too large: batch_size {} exceeds the {available} candidates available",
                round_cfg.batch_size
            )));
        }

        let id = format!("s{:04}", self.counter.fetch_add(1, Ordering::Relaxed) + 1);
        let slot = Slot {
            id: id.clone(),
            spec,
            round_cfg,
            dataset: entry,
            labeled: session.labeled().len(),
            unlabeled: session.unlabeled().len(),
            history: session.history().to_vec(),
            round: 0,
            session: Some(session),
            status: Status::Idle,
            pending: None,
            last_error: None,
        };
        let descriptor = slot.descriptor();
        self.sessions.write().await.insert(id, Arc::new(Mutex::new(slot)));
        Ok(descriptor)
    }

    pub async fn list(&self) -> Vec<SessionDescriptor> {
        let slots: Vec<Arc<Mutex<Slot>>> = self.sessions.read().await.values().cloned().collect();
        let mut out = Vec::with_capacity(slots.len());
        for s in slots {
            out.push(s.lock().await.descriptor());
        }
        out.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        out
    }

    pub async fn describe(&self, id: &str) -> Result<SessionDescriptor, ApiError> {
        Ok(self.slot(id).await?.lock().await.descriptor())
    }

    pub async fn metrics(&self, id: &str) -> Result<MetricsResponse, ApiError> {
        let slot = self.slot(id).await?;
        let s = slot.lock().await;
        Ok(MetricsResponse { session_id: s.id.clone(), status: s.status, round: s.round, records: s.history.clone() })
    }

    /// Selects the next batch, or returns the one already being annotated.
    pub async fn batch(&self, id: &str) -> Result<BatchResponse, ApiError> {
        let slot = self.slot(id).await?;
        let mut s = slot.lock().await;
        match s.status {
            Status::Training => return Err(ApiError::conflict("session is training")),
            Status::AwaitingAnnotations => {
                return Ok(s.pending.as_ref().expect("awaiting implies a batch").response.clone());
            }
            Status::Idle => {}
        }
        let session = s.session.take().expect("idle sessions are parked");
        let cfg = s.round_cfg.clone();
        let (session, proposal) = tokio::task::spawn_blocking(move || {
            let p = session.propose(&cfg);
            (session, p)
        })
        .await
        .map_err(ApiError::internal)?;
        s.session = Some(session);
        let proposal = proposal.map_err(|e| match e {
            SessionError::BatchTooLarge { .. } => ApiError::conflict(e.to_string()),
            other => ApiError::from(other),
        })?;
        let items = proposal
            .items
            .iter()
            .map(|c| {
                let t = c.triplet;
                BatchItem {
                    triplet_id: c.id,
                    i: t.i,
                    j: t.j,
                    k: t.k,
                    objects: [s.dataset.object(t.i), s.dataset.object(t.j), s.dataset.object(t.k)],
                }
            })
            .collect();
        let response = BatchResponse { session_id: s.id.clone(), round: proposal.round, items };
        s.pending = Some(Pending { proposal, response: response.clone(), answers: BTreeMap::new() });
        s.status = Status::AwaitingAnnotations;
        Ok(response)
    }

    /// Records answers; the last missing answer starts a background retrain.
    pub async fn annotate(&self, id: &str, sub: AnnotationSubmission) -> Result<SubmissionResponse, ApiError> {
        let slot = self.slot(id).await?;
        let mut s = slot.lock().await;
        if let Some(sid) = &sub.session_id {
            if sid != &s.id {
                return Err(ApiError::unprocessable(format!("submission names session {sid}")));
            }
        }
        if s.status != Status::AwaitingAnnotations {
            return Err(ApiError::conflict(format!("session is {}", status_name(s.status))));
        }
        let pending = s.pending.as_mut().expect("awaiting implies a batch");
        if sub.round != pending.proposal.round {
            return Err(ApiError::unprocessable(format!(
                "answers are for round {}, the open batch is round {}",
                sub.round, pending.proposal.round
            )));
        }
        let mut staged = Vec::with_capacity(sub.answers.len());
        for a in &sub.answers {
            let item = pending
                .proposal
                .items
                .iter()
                .find(|c| c.id == a.triplet_id)
                .ok_or_else(|| ApiError::unprocessable(format!("triplet {} is not in the current batch", a.triplet_id)))?;
            if staged.iter().any(|(id, _)| *id == a.triplet_id) {
                return Err(ApiError::unprocessable(format!("triplet {} answered twice in one submission", a.triplet_id)));
            }
            staged.push((a.triplet_id, a.closer.order(item.triplet)));
        }
        pending.answers.extend(staged);
        let remaining = pending.proposal.items.len() - pending.answers.len();
        if remaining > 0 {
            return Ok(SubmissionResponse { accepted: sub.answers.len(), remaining, status: s.status });
        }

        let pending = s.pending.take().expect("checked above");
        let answers: Vec<Triplet> = pending.proposal.items.iter().map(|c| pending.answers[&c.id]).collect();
        let mut session = s.session.take().expect("awaiting sessions are parked");
        s.status = Status::Training;
        s.labeled += answers.len();
        s.unlabeled -= answers.len();
        let worker_slot = slot.clone();
        tokio::spawn(async move {
            let proposal = pending.proposal;
            let (session, outcome) = match tokio::task::spawn_blocking(move || {
                let r = session.commit(&proposal, &answers);
                (session, r)
            })
            .await
            {
                Ok(done) => done,
                Err(e) => {
                    tracing::error!("retrain worker failed: {e}");
                    worker_slot.lock().await.last_error = Some(e.to_string());
                    return;
                }
            };
            let mut s = worker_slot.lock().await;
            match outcome {
                Ok(_) => {
                    s.history = session.history().to_vec();
                    s.round = session.round();
                    s.last_error = None;
                }
                Err(e) => s.last_error = Some(e.to_string()),
            }
            s.labeled = session.labeled().len();
            s.unlabeled = session.unlabeled().len();
            s.session = Some(session);
            s.status = Status::Idle;
        });
        Ok(SubmissionResponse { accepted: sub.answers.len(), remaining: 0, status: Status::Training })
    }
}

fn status_name(s: Status) -> &'static str {
    match s {
        Status::Idle => "idle",
        Status::AwaitingAnnotations => "awaiting_annotations",
        Status::Training => "training",
    }
}
