//! Service state: scenarios with their demonstrations, and the job queue
//! with its single worker.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::mpsc::{channel, Sender};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use shiftflow::bench::runner::{run_benchmark, synth_set};
use shiftflow::bench::{check_success, Failure, Method, Regime, Scenario, ScenarioSampler, TaskKind};
use shiftflow::geometry::{resample, Dataset, Demonstration, TaskQuery, Trajectory, DEFAULT_HORIZON};
use shiftflow::{Error, Result};

use crate::bundle::{train_bundle, Overrides};
use crate::store::{content_id, Collection, Store};

/// A scenario and the demonstrations drawn on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub id: String,
    pub scenario: Scenario,
    pub query: TaskQuery,
    pub demos: Vec<Demonstration>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioRequest {
    Sample {
        task: TaskKind,
        #[serde(default = "train_regime")]
        regime: Regime,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        index: u64,
    },
    Scenario(Scenario),
}

fn train_regime() -> Regime {
    Regime::Train
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoRequest {
    pub trajectory: Vec<Vec<f64>>,
    /// Resampling length; the scenario's existing horizon, else 50.
    #[serde(default)]
    pub horizon: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoReceipt {
    pub scenario: String,
    pub index: usize,
    pub demonstration: Demonstration,
    pub success: bool,
    pub failure: Option<Failure>,
    /// The same trajectory was already stored; nothing was added.
    pub duplicate: bool,
}

/// Strokes shorter than this are rejected.
pub const MIN_STROKE_POINTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JobKind {
    TrainFlow,
    TrainAttention,
    TrainBaseline,
    Benchmark,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobResult {
    Model(String),
    Report(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub progress: f64,
    pub result: Option<JobResult>,
    pub error: Option<String>,
    /// Submission sequence number; the worker runs jobs in this order.
    pub submitted: u64,
}

/// Where a training job's demonstrations come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// All demonstrations stored on these scenarios.
    Scenarios(Vec<String>),
    Dataset(Dataset),
    Synth { task: TaskKind, demos: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineVariant {
    Plain,
    Alpha,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobRequest {
    pub kind: JobKind,
    #[serde(default)]
    pub data: Option<DataSource>,
    #[serde(default)]
    pub variant: Option<BaselineVariant>,
    #[serde(default)]
    pub task: Option<TaskKind>,
    #[serde(default)]
    pub methods: Option<Vec<Method>>,
    #[serde(default)]
    pub trials: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub config: Overrides,
}

/// A request with its inputs resolved; the job id hashes this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobSpec {
    Train { method: Method, dataset: Dataset, seed: u64, config: Overrides },
    Benchmark { task: TaskKind, methods: Vec<Method>, trials: usize, seed: u64, config: Overrides },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct JobFile {
    record: JobRecord,
    spec: JobSpec,
}

/// Failures surfaced to HTTP clients.
#[derive(Debug)]
pub enum ServiceError {
    NotFound(String),
    Invalid(String),
    Conflict(Box<JobRecord>),
    Internal(String),
}

impl From<Error> for ServiceError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::NonFinite { .. } | Error::Numerical(_) | Error::Diverged(_) => ServiceError::Internal(e.to_string()),
            _ => ServiceError::Invalid(e.to_string()),
        }
    }
}

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;

pub const DEFAULT_TRIALS: usize = 100;
/// Upper bound on benchmark trials per job.
pub const MAX_TRIALS: usize = 1000;

struct Shared {
    store: Store,
    jobs: RwLock<BTreeMap<String, JobRecord>>,
    /// Serializes every store write.
    writes: Mutex<()>,
}

impl Shared {
    fn save_job(&self, id: &str) -> Result<()> {
        let _w = self.writes.lock().unwrap_or_else(|p| p.into_inner());
        let Some(record) = self.jobs.read().unwrap_or_else(|p| p.into_inner()).get(id).cloned() else {
            return Ok(());
        };
        let mut file: JobFile = self
            .store
            .get(Collection::Jobs, id)?
            .ok_or_else(|| Error::InvalidInput(format!("job file {id} vanished")))?;
        file.record = record;
        self.store.put(Collection::Jobs, id, &file)
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut JobRecord)) {
        if let Some(r) = self.jobs.write().unwrap_or_else(|p| p.into_inner()).get_mut(id) {
            f(r);
        }
    }
}

/// The service: cheap to clone, one background worker shared by all clones.
#[derive(Clone)]
pub struct Service {
    shared: Arc<Shared>,
    queue: Arc<Mutex<Sender<String>>>,
}

impl Service {
    /// Opens `root`, re-queues unfinished jobs in submission order and starts the worker.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let store = Store::open(root)?;
        let files: Vec<JobFile> = store.list(Collection::Jobs)?;
        let mut pending: Vec<&JobRecord> =
            files.iter().map(|f| &f.record).filter(|r| matches!(r.status, JobStatus::Queued | JobStatus::Running)).collect();
        pending.sort_by_key(|r| r.submitted);
        let pending: Vec<String> = pending.into_iter().map(|r| r.id.clone()).collect();
        let jobs = files.iter().map(|f| (f.record.id.clone(), f.record.clone())).collect();
        let shared = Arc::new(Shared { store, jobs: RwLock::new(jobs), writes: Mutex::new(()) });
        let (tx, rx) = channel::<String>();
        let worker = Arc::clone(&shared);
        std::thread::spawn(move || {
            for id in rx {
                run_job(&worker, &id);
            }
        });
        for id in pending {
            shared.update(&id, |r| {
                r.status = JobStatus::Queued;
                r.progress = 0.0;
            });
            shared.save_job(&id)?;
            let _ = tx.send(id);
        }
        Ok(Service { shared, queue: Arc::new(Mutex::new(tx)) })
    }

    pub fn store(&self) -> &Store {
        &self.shared.store
    }

    fn write_lock(&self) -> std::sync::MutexGuard<'_, ()> {
        self.shared.writes.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Returns the record and whether it was newly created.
    pub fn create_scenario(&self, req: ScenarioRequest) -> ServiceResult<(ScenarioRecord, bool)> {
        let scenario = match req {
            ScenarioRequest::Sample { task, regime, seed, index } => ScenarioSampler::new(seed).sample(task, regime, index)?,
            ScenarioRequest::Scenario(s) => {
                s.validate()?;
                s
            }
        };
        let id = content_id(serde_json::to_string(&scenario).map_err(Error::from)?.as_bytes());
        let _w = self.write_lock();
        if let Some(existing) = self.store().get::<ScenarioRecord>(Collection::Scenarios, &id)? {
            return Ok((existing, false));
        }
        let record = ScenarioRecord { id: id.clone(), query: scenario.query(), scenario, demos: Vec::new() };
        self.store().put(Collection::Scenarios, &id, &record)?;
        Ok((record, true))
    }

    pub fn scenario(&self, id: &str) -> ServiceResult<ScenarioRecord> {
        self.store().get(Collection::Scenarios, id)?.ok_or_else(|| ServiceError::NotFound(format!("no scenario {id}")))
    }

    /// Resamples a drawn stroke, scores it and appends it to the scenario.
    pub fn add_demo(&self, id: &str, req: DemoRequest) -> ServiceResult<DemoReceipt> {
        if req.trajectory.len() < MIN_STROKE_POINTS {
            return Err(ServiceError::Invalid(format!(
                "a demonstration needs at least {MIN_STROKE_POINTS} points, got {}",
                req.trajectory.len()
            )));
        }
        let raw = Trajectory::from_rows(&req.trajectory)?;
        let _w = self.write_lock();
        let mut record = self.scenario(id)?;
        let existing = record.demos.first().map(|d| d.trajectory.len());
        let horizon = req.horizon.or(existing).unwrap_or(DEFAULT_HORIZON);
        if existing.is_some_and(|h| h != horizon) {
            return Err(ServiceError::Invalid(format!("scenario demonstrations use T = {}, not {horizon}", existing.unwrap_or(0))));
        }
        if horizon < 2 {
            return Err(ServiceError::Invalid("horizon must be at least 2".into()));
        }
        let demonstration = Demonstration::new(record.query.clone(), resample(&raw, horizon)?)?;
        let verdict = check_success(&demonstration.trajectory, &record.scenario);
        let (index, duplicate) = match record.demos.iter().position(|d| d == &demonstration) {
            Some(i) => (i, true),
            None => {
                record.demos.push(demonstration.clone());
                self.store().put(Collection::Scenarios, id, &record)?;
                (record.demos.len() - 1, false)
            }
        };
        Ok(DemoReceipt { scenario: id.to_string(), index, demonstration, success: verdict.is_ok(), failure: verdict.err(), duplicate })
    }

    fn resolve(&self, req: JobRequest) -> ServiceResult<JobSpec> {
        let train = |method: Method| -> ServiceResult<JobSpec> {
            let dataset = match req.data.clone() {
                None => return Err(ServiceError::Invalid("training jobs need `data`".into())),
                Some(DataSource::Dataset(d)) => d,
                Some(DataSource::Scenarios(ids)) => {
                    let mut demos = Vec::new();
                    for id in &ids {
                        demos.extend(self.scenario(id)?.demos);
                    }
                    Dataset::new(demos)?
                }
                Some(DataSource::Synth { task, demos, seed }) => {
                    synth_set(task, Regime::Train, demos, &Overrides::default().config(seed))?.1
                }
            };
            Ok(JobSpec::Train { method, dataset, seed: req.seed, config: req.config.clone() })
        };
        match req.kind {
            JobKind::TrainFlow => train(Method::Salat),
            JobKind::TrainAttention => train(Method::Salit),
            JobKind::TrainBaseline => train(match req.variant.unwrap_or(BaselineVariant::Alpha) {
                BaselineVariant::Plain => Method::TpGmm,
                BaselineVariant::Alpha => Method::AlphaTpGmm,
            }),
            JobKind::Benchmark => {
                let task = req.task.ok_or_else(|| ServiceError::Invalid("benchmark jobs need `task`".into()))?;
                let methods = req.methods.clone().unwrap_or_else(|| Method::TABLE.to_vec());
                let trials = req.trials.unwrap_or(DEFAULT_TRIALS);
                if methods.is_empty() || trials > MAX_TRIALS {
                    return Err(ServiceError::Invalid(format!("benchmark needs at least one method and at most {MAX_TRIALS} trials")));
                }
                Ok(JobSpec::Benchmark { task, methods, trials, seed: req.seed, config: req.config.clone() })
            }
        }
    }

    /// Queues a job. Resubmitting an identical job conflicts unless the earlier one failed.
    pub fn submit(&self, req: JobRequest) -> ServiceResult<JobRecord> {
        let kind = req.kind;
        let spec = self.resolve(req)?;
        let id = content_id(serde_json::to_string(&spec).map_err(Error::from)?.as_bytes());
        let record = {
            let _w = self.write_lock();
            let mut jobs = self.shared.jobs.write().unwrap_or_else(|p| p.into_inner());
            if let Some(r) = jobs.get(&id) {
                if r.status != JobStatus::Failed {
                    return Err(ServiceError::Conflict(Box::new(r.clone())));
                }
            }
            let submitted = jobs.values().map(|r| r.submitted + 1).max().unwrap_or(0);
            let record = JobRecord { id: id.clone(), kind, status: JobStatus::Queued, progress: 0.0, result: None, error: None, submitted };
            self.store().put(Collection::Jobs, &id, &JobFile { record: record.clone(), spec })?;
            jobs.insert(id.clone(), record.clone());
            record
        };
        self.queue
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .send(id)
            .map_err(|_| ServiceError::Internal("job worker has stopped".into()))?;
        Ok(record)
    }

    pub fn job(&self, id: &str) -> ServiceResult<JobRecord> {
        self.shared.jobs.read().unwrap_or_else(|p| p.into_inner()).get(id).cloned().ok_or_else(|| ServiceError::NotFound(format!("no job {id}")))
    }

    pub fn jobs(&self) -> Vec<JobRecord> {
        let mut all: Vec<JobRecord> = self.shared.jobs.read().unwrap_or_else(|p| p.into_inner()).values().cloned().collect();
        all.sort_by_key(|r| r.submitted);
        all
    }
}

fn execute(shared: &Shared, id: &str, spec: JobSpec) -> Result<JobResult> {
    let progress = |p: f64| shared.update(id, |r| r.progress = p.clamp(0.0, 1.0));
    match spec {
        JobSpec::Train { method, dataset, seed, config } => {
            let (bundle, summary) = train_bundle(&dataset, method, &config.config(seed), progress)?;
            let _w = shared.writes.lock().unwrap_or_else(|p| p.into_inner());
            let model = shared.store.put_immutable(Collection::Models, &bundle.to_json()?)?;
            shared.store.put(Collection::Summaries, &model, &summary)?;
            Ok(JobResult::Model(model))
        }
        JobSpec::Benchmark { task, methods, trials, seed, config } => {
            let report = run_benchmark(task, &methods, trials, &config.config(seed))?;
            let _w = shared.writes.lock().unwrap_or_else(|p| p.into_inner());
            Ok(JobResult::Report(shared.store.put_immutable(Collection::Reports, &report.to_json()?)?))
        }
    }
}

fn run_job(shared: &Shared, id: &str) {
    let spec = match shared.store.get::<JobFile>(Collection::Jobs, id) {
        Ok(Some(f)) => f.spec,
        other => {
            let why = match other {
                Err(e) => e.to_string(),
                _ => "job file is missing".into(),
            };
            shared.update(id, |r| {
                r.status = JobStatus::Failed;
                r.error = Some(why);
            });
            let _ = shared.save_job(id);
            return;
        }
    };
    shared.update(id, |r| r.status = JobStatus::Running);
    let _ = shared.save_job(id);
    let outcome = catch_unwind(AssertUnwindSafe(|| execute(shared, id, spec)));
    shared.update(id, |r| match outcome {
        Ok(Ok(result)) => {
            r.status = JobStatus::Done;
            r.progress = 1.0;
            r.result = Some(result);
            r.error = None;
        }
        Ok(Err(e)) => {
            r.status = JobStatus::Failed;
            r.error = Some(e.to_string());
        }
        Err(_) => {
            r.status = JobStatus::Failed;
            r.error = Some("job panicked".into());
        }
    });
    let _ = shared.save_job(id);
}
