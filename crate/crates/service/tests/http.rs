use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use batchal_core::rng::{derive_seed, stream};
use batchal_core::session::{ActiveLearningSession, Architecture, Oracle, TrainSettings};
use batchal_core::{Activation, Dataset, Strategy, SyntheticSpec, Triplet};
use batchal_service::{
    AnnotationSubmission, Answer, AppState, BatchResponse, Closer, ErrorBody, MetricsResponse, SessionDescriptor,
    SessionSpec, Status, SubmissionResponse,
};
use serde::de::DeserializeOwned;
use serde::Serialize;

fn dataset() -> Arc<Dataset> {
    let spec = SyntheticSpec { n: 40, d: 5, latent_dim: 2, seed: 4, ..Default::default() };
    Arc::new(Dataset::synthetic(&spec, 1_500, None).unwrap())
}

fn start(ds: Arc<Dataset>) -> String {
    let (tx, rx) = std::sync::mpsc::channel::<SocketAddr>();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            let app = AppState::with_datasets([("synth".to_string(), ds)]);
            batchal_service::serve(listener, app, None).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

struct Client {
    base: String,
    agent: ureq::Agent,
}

impl Client {
    fn new(base: String) -> Self {
        let agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Self { base, agent }
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> (u16, Result<T, ErrorBody>) {
        let resp = self.agent.get(&format!("{}{path}", self.base)).call().unwrap();
        decode(resp)
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> (u16, Result<T, ErrorBody>) {
        let resp = self.agent.post(&format!("{}{path}", self.base)).send_json(body).unwrap();
        decode(resp)
    }

    fn wait_idle(&self, id: &str) -> SessionDescriptor {
        let start = Instant::now();
        loop {
            let d: SessionDescriptor = self.get(&format!("/sessions/{id}")).1.unwrap();
            if d.status == Status::Idle {
                return d;
            }
            assert!(start.elapsed() < Duration::from_secs(120), "session stuck in {:?}", d.status);
            std::thread::sleep(Duration::from_millis(10));
        }
    }
}

fn decode<T: DeserializeOwned>(mut resp: ureq::http::Response<ureq::Body>) -> (u16, Result<T, ErrorBody>) {
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string().unwrap();
    if status < 400 {
        (status, Ok(serde_json::from_str(&text).unwrap()))
    } else {
        (status, Err(serde_json::from_str(&text).unwrap_or_else(|e| panic!("non-JSON error {text:?}: {e}"))))
    }
}

fn spec(strategy: Strategy, batch_size: usize) -> SessionSpec {
    SessionSpec {
        dataset: "synth".into(),
        seed: 7,
        strategy,
        batch_size,
        passes: 12,
        dropout: 0.1,
        candidate_cap: Some(300),
        init_pool: 40,
        noise: 0.2,
        model: Architecture { hidden: vec![10], embedding_dim: 3, activation: Activation::Relu },
        train: TrainSettings { init_epochs: 20, epochs: 6, sgd_batch: 32, learning_rate: 3e-3, dropout: 0.02 },
        ..SessionSpec::default()
    }
}

fn answers_from(oracle: &Oracle, batch: &BatchResponse) -> Vec<Answer> {
    batch
        .items
        .iter()
        .map(|it| {
            let served = Triplet { i: it.i, j: it.j, k: it.k };
            let c = batchal_core::posterior::Candidate { id: it.triplet_id, triplet: served };
            let ordered = oracle.annotate(&[c]).unwrap()[0];
            Answer { triplet_id: it.triplet_id, closer: Closer::of(served, ordered) }
        })
        .collect()
}

#[test]
fn session_lifecycle() {
    let c = Client::new(start(dataset()));
    let (code, d) = c.post::<_, SessionDescriptor>("/sessions", &spec(Strategy::Uncertainty, 5));
    let d = d.unwrap();
    assert_eq!(code, 201);
    assert_eq!((d.round, d.status, d.labeled), (0, Status::Idle, 40));
    let id = d.session_id.clone();

    let (code, m) = c.get::<MetricsResponse>(&format!("/sessions/{id}/metrics"));
    assert_eq!(code, 200);
    assert_eq!(m.unwrap().records.len(), 1);

    // answers before a batch is served
    let early = AnnotationSubmission { session_id: None, round: 1, answers: vec![] };
    assert_eq!(c.post::<_, SubmissionResponse>(&format!("/sessions/{id}/annotations"), &early).0, 409);

    let (code, b1) = c.get::<BatchResponse>(&format!("/sessions/{id}/batch"));
    let b1 = b1.unwrap();
    assert_eq!(code, 200);
    assert_eq!((b1.round, b1.items.len()), (1, 5));
    assert!(b1.items.iter().all(|it| it.objects[0].id == it.i && it.objects[0].features.len() == 5));
    assert_eq!(c.get::<SessionDescriptor>(&format!("/sessions/{id}")).1.unwrap().status, Status::AwaitingAnnotations);
    let b2 = c.get::<BatchResponse>(&format!("/sessions/{id}/batch")).1.unwrap();
    assert_eq!(b1, b2);

    let path = format!("/sessions/{id}/annotations");
    let first = Answer { triplet_id: b1.items[0].triplet_id, closer: Closer::J };
    let sub = AnnotationSubmission { session_id: Some(id.clone()), round: 1, answers: vec![first] };
    let r = c.post::<_, SubmissionResponse>(&path, &sub).1.unwrap();
    assert_eq!((r.accepted, r.remaining), (1, 4));
    // resubmission overwrites rather than counting twice
    let again = AnnotationSubmission { answers: vec![Answer { closer: Closer::K, ..first }], ..sub.clone() };
    assert_eq!(c.post::<_, SubmissionResponse>(&path, &again).1.unwrap().remaining, 4);

    let stranger = AnnotationSubmission { answers: vec![Answer { triplet_id: usize::MAX, closer: Closer::J }], ..sub.clone() };
    let (code, err) = c.post::<_, SubmissionResponse>(&path, &stranger);
    assert_eq!(code, 422);
    assert_eq!(err.unwrap_err().code, "unprocessable");
    assert_eq!(c.post::<_, SubmissionResponse>(&path, &AnnotationSubmission { round: 2, ..sub.clone() }).0, 422);
    let dup = AnnotationSubmission { answers: vec![first, first], ..sub.clone() };
    assert_eq!(c.post::<_, SubmissionResponse>(&path, &dup).0, 422);

    let rest: Vec<Answer> =
        b1.items[1..].iter().map(|it| Answer { triplet_id: it.triplet_id, closer: Closer::K }).collect();
    let done = c.post::<_, SubmissionResponse>(&path, &AnnotationSubmission { answers: rest, ..sub }).1.unwrap();
    assert_eq!(done.remaining, 0);

    let d = c.wait_idle(&id);
    assert_eq!((d.round, d.labeled), (1, 45));
    let m = c.get::<MetricsResponse>(&format!("/sessions/{id}/metrics")).1.unwrap();
    assert_eq!(m.records.len(), 2);
    assert!(m.records.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));
    assert_eq!(m.records[1].chosen, b1.items.iter().map(|it| it.triplet_id).collect::<Vec<_>>());

    let b3 = c.get::<BatchResponse>(&format!("/sessions/{id}/batch")).1.unwrap();
    assert_eq!(b3.round, 2);
    assert!(b3.items.iter().all(|it| b1.items.iter().all(|old| old.triplet_id != it.triplet_id)));
}

#[test]
fn batch_requests_conflict_while_training() {
    let c = Client::new(start(dataset()));
    let mut s = spec(Strategy::Random, 4);
    s.train.epochs = 3_000;
    let id = c.post::<_, SessionDescriptor>("/sessions", &s).1.unwrap().session_id;
    let b = c.get::<BatchResponse>(&format!("/sessions/{id}/batch")).1.unwrap();
    let answers = b.items.iter().map(|it| Answer { triplet_id: it.triplet_id, closer: Closer::J }).collect();
    let r = c
        .post::<_, SubmissionResponse>(&format!("/sessions/{id}/annotations"), &AnnotationSubmission {
            session_id: None,
            round: 1,
            answers,
        })
        .1
        .unwrap();
    assert_eq!(r.status, Status::Training);
    let (code, err) = c.get::<BatchResponse>(&format!("/sessions/{id}/batch"));
    assert_eq!(code, 409);
    assert_eq!(err.unwrap_err().code, "conflict");
    let late = AnnotationSubmission { session_id: None, round: 1, answers: vec![] };
    assert_eq!(c.post::<_, SubmissionResponse>(&format!("/sessions/{id}/annotations"), &late).0, 409);
    assert_eq!(c.wait_idle(&id).round, 1);
}

#[test]
fn creation_errors() {
    let c = Client::new(start(dataset()));
    let (code, err) = c.post::<_, SessionDescriptor>("/sessions", &SessionSpec { dataset: "nope".into(), ..spec(Strategy::Random, 5) });
    assert_eq!(code, 404);
    assert_eq!(err.unwrap_err().code, "not_found");

    let (code, err) = c.post::<_, SessionDescriptor>("/sessions", &spec(Strategy::Random, 5_000));
    assert_eq!(code, 400);
    assert!(err.unwrap_err().error.contains("batch too large"));

    let (code, _) = c.post::<_, SessionDescriptor>("/sessions", &serde_json::json!({"dataset": "synth", "pases": 3}));
    assert_eq!(code, 400);
    let (code, _) = c.post::<_, SessionDescriptor>("/sessions", &SessionSpec { passes: 1, ..spec(Strategy::Random, 5) });
    assert_eq!(code, 400);

    assert_eq!(c.get::<SessionDescriptor>("/sessions/missing").0, 404);
    assert_eq!(c.get::<BatchResponse>("/sessions/missing/batch").0, 404);
    assert_eq!(c.get::<MetricsResponse>("/sessions/missing/metrics").0, 404);
    assert_eq!(c.get::<Vec<String>>("/datasets").1.unwrap(), vec!["synth".to_string()]);
}

/// Concurrent partial submissions from several threads: every answer lands
/// exactly once and the round completes once.
#[test]
fn concurrent_submissions_serialize() {
    let base = start(dataset());
    let c = Client::new(base.clone());
    let id = c.post::<_, SessionDescriptor>("/sessions", &spec(Strategy::Variance, 12)).1.unwrap().session_id;
    let b = c.get::<BatchResponse>(&format!("/sessions/{id}/batch")).1.unwrap();
    let handles: Vec<_> = b
        .items
        .chunks(3)
        .map(|chunk| {
            let ids: Vec<usize> = chunk.iter().map(|it| it.triplet_id).collect();
            let (base, id) = (base.clone(), id.clone());
            std::thread::spawn(move || {
                let c = Client::new(base);
                for _ in 0..3 {
                    let answers = ids.iter().map(|&t| Answer { triplet_id: t, closer: Closer::J }).collect();
                    let sub = AnnotationSubmission { session_id: None, round: 1, answers };
                    let code = c.post::<_, SubmissionResponse>(&format!("/sessions/{id}/annotations"), &sub).0;
                    assert!(code == 200 || code == 409, "{code}");
                }
            })
        })
        .collect();
    handles.into_iter().for_each(|h| h.join().unwrap());
    let d = c.wait_idle(&id);
    assert_eq!((d.round, d.labeled), (1, 52));
    assert_eq!(c.get::<MetricsResponse>(&format!("/sessions/{id}/metrics")).1.unwrap().records.len(), 2);
}

/// A simulated-oracle client over HTTP reproduces the in-process loop.
#[test]
fn http_rounds_match_in_process_rounds() {
    let ds = dataset();
    let c = Client::new(start(ds.clone()));
    for strategy in Strategy::ALL {
        let s = spec(strategy, 6);
        let cfg = s.experiment();
        let mut local = ActiveLearningSession::init(ds.clone(), cfg.session_config(), s.seed).unwrap();
        let round_cfg = cfg.round_config(strategy);
        for _ in 0..3 {
            local.run_round(&round_cfg).unwrap();
        }

        let oracle = Oracle::new(&ds.truth, s.noise, derive_seed(s.seed, &[stream::ORACLE])).unwrap();
        let id = c.post::<_, SessionDescriptor>("/sessions", &s).1.unwrap().session_id;
        for _ in 0..3 {
            let b = c.get::<BatchResponse>(&format!("/sessions/{id}/batch")).1.unwrap();
            let sub = AnnotationSubmission { session_id: Some(id.clone()), round: b.round, answers: answers_from(&oracle, &b) };
            c.post::<_, SubmissionResponse>(&format!("/sessions/{id}/annotations"), &sub).1.unwrap();
            c.wait_idle(&id);
        }
        let remote = c.get::<MetricsResponse>(&format!("/sessions/{id}/metrics")).1.unwrap().records;
        assert_eq!(remote.len(), local.history().len());
        for (r, l) in remote.iter().zip(local.history()) {
            assert!(r.same_outcome(l), "{strategy}: {r:?} vs {l:?}");
        }
    }
}
