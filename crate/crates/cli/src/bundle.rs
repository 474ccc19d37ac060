//! Model bundles and the training path shared by the CLI and the job worker.

use clap::Args;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use shiftflow::attention::{train_model_with, Generation, LatentPolicy, ModelKind, ShiftAttentionModel};
use shiftflow::bench::{BenchConfig, Method, Scenario};
use shiftflow::geometry::{variance_profile, Dataset, Frame, FrameVarianceProfile, TaskQuery, DEFAULT_EPSILON};
use shiftflow::tpgmm::{fit_tpgmm, select_gamma, TpGmmGeneration, TpGmmModel, Variant};
use shiftflow::{Error, Result};

/// Hyperparameters that may be overridden from flags or job requests.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    #[arg(long)]
    pub flow_blocks: Option<usize>,
    #[arg(long)]
    pub flow_hidden: Option<usize>,
    #[arg(long)]
    pub flow_epochs: Option<usize>,
    #[arg(long)]
    pub flow_lr: Option<f64>,
    #[arg(long)]
    pub attention_hidden: Option<usize>,
    #[arg(long)]
    pub attention_epochs: Option<usize>,
    #[arg(long)]
    pub attention_lr: Option<f64>,
    /// Mixture components per frame for the TP-GMM baselines.
    #[arg(long)]
    pub components: Option<usize>,
    /// Training demonstrations per task (bench only).
    #[arg(long)]
    pub train_demos: Option<usize>,
}

impl Overrides {
    /// The desk-scale defaults with these overrides and `seed` applied everywhere.
    pub fn config(&self, seed: u64) -> BenchConfig {
        let mut c = BenchConfig { seed, ..Default::default() };
        c.flow.seed = seed;
        c.attention.seed = seed;
        c.tpgmm.seed = seed;
        c.train_demos = self.train_demos;
        if let Some(v) = self.flow_blocks {
            c.flow.blocks = v;
        }
        if let Some(v) = self.flow_hidden {
            c.flow.hidden = v;
        }
        if let Some(v) = self.flow_epochs {
            c.flow.epochs = v;
        }
        if let Some(v) = self.flow_lr {
            c.flow.lr = v;
        }
        if let Some(v) = self.attention_hidden {
            c.attention.hidden = v;
        }
        if let Some(v) = self.attention_epochs {
            c.attention.epochs = v;
        }
        if let Some(v) = self.attention_lr {
            c.attention.lr = v;
        }
        if let Some(v) = self.components {
            c.tpgmm.components = v;
        }
        c
    }
}

/// A trained model as written to disk.
#[derive(Debug, Clone, PartialEq)]
pub enum Bundle {
    Shift(Box<ShiftAttentionModel>),
    TpGmm(TpGmmModel),
}

/// Output of [`Bundle::generate`], serialized as the underlying generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Output {
    Shift(Generation),
    TpGmm(TpGmmGeneration),
}

impl Output {
    pub fn trajectory(&self) -> &shiftflow::geometry::Trajectory {
        match self {
            Output::Shift(g) => &g.trajectory,
            Output::TpGmm(g) => &g.trajectory,
        }
    }

    /// The `T×K` frame weighting: attention or α.
    pub fn weights(&self) -> &[Vec<f64>] {
        match self {
            Output::Shift(g) => &g.attention,
            Output::TpGmm(g) => &g.alpha,
        }
    }
}

impl Bundle {
    /// Baseline bundles carry a `variant` key; everything else is a shift-attention model.
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        if !v.is_object() {
            return Err(Error::Schema("model bundle must be a JSON object".into()));
        }
        if v.get("variant").is_some() {
            Ok(Bundle::TpGmm(serde_json::from_value(v)?))
        } else {
            Ok(Bundle::Shift(Box::new(serde_json::from_value(v)?)))
        }
    }

    pub fn to_json(&self) -> Result<String> {
        match self {
            Bundle::Shift(m) => m.to_json(),
            Bundle::TpGmm(m) => m.to_json(),
        }
    }

    pub fn num_frames(&self) -> usize {
        match self {
            Bundle::Shift(m) => m.num_frames(),
            Bundle::TpGmm(m) => m.num_frames(),
        }
    }

    pub fn method(&self) -> Method {
        match self {
            Bundle::Shift(m) if m.kind == ModelKind::Salat => Method::Salat,
            Bundle::Shift(_) => Method::Salit,
            Bundle::TpGmm(m) if m.variant == Variant::Plain => Method::TpGmm,
            Bundle::TpGmm(_) => Method::AlphaTpGmm,
        }
    }

    /// `policy` only matters for flow-based models.
    pub fn generate(&self, query: &TaskQuery, policy: LatentPolicy) -> Result<Output> {
        if query.num_frames() != self.num_frames() {
            return Err(Error::Dimension(format!("query has {} frames, model expects {}", query.num_frames(), self.num_frames())));
        }
        match self {
            Bundle::Shift(m) => Ok(Output::Shift(m.generate_with(query, policy)?)),
            Bundle::TpGmm(m) => Ok(Output::TpGmm(m.generate(query)?)),
        }
    }
}

/// Query file contents: a bare query, or a scenario that implies one.
#[derive(Debug, Clone, PartialEq)]
pub enum QueryInput {
    Query(TaskQuery),
    Scenario(Box<Scenario>),
}

impl QueryInput {
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        if v.get("task").is_some() {
            let s: Scenario = serde_json::from_value(v)?;
            s.validate()?;
            Ok(QueryInput::Scenario(Box::new(s)))
        } else {
            let q: TaskQuery = serde_json::from_value(v)?;
            q.validate()?;
            Ok(QueryInput::Query(q))
        }
    }

    pub fn query(&self) -> TaskQuery {
        match self {
            QueryInput::Query(q) => q.clone(),
            QueryInput::Scenario(s) => s.query(),
        }
    }

    pub fn scenario(&self) -> Option<&Scenario> {
        match self {
            QueryInput::Scenario(s) => Some(s),
            QueryInput::Query(_) => None,
        }
    }
}

/// Training losses of a bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    /// Per-frame flow NLL curves (SALaT only).
    pub flows: Vec<Vec<f64>>,
    /// Attention objective per epoch.
    pub attention: Vec<f64>,
    /// Selected γ and the reproduction cost at every grid value (αTP-GMM only).
    pub gamma: Option<f64>,
    pub gamma_costs: Vec<(f64, f64)>,
}

/// What `GET /models/{id}/summary` returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub method: Method,
    pub num_frames: usize,
    pub horizon: usize,
    pub dim: usize,
    pub demos: usize,
    pub losses: Losses,
    pub variance: FrameVarianceProfile,
    /// Mean-policy attention schedule, `T×K`.
    pub schedule: Option<Vec<Vec<f64>>>,
    /// Baseline frame weights, `T×K`; query-independent.
    pub alpha: Option<Vec<Vec<f64>>>,
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

/// Trains `method` on `data`, reporting progress in [0, 1].
pub fn train_bundle(data: &Dataset, method: Method, config: &BenchConfig, mut progress: impl FnMut(f64)) -> Result<(Bundle, ModelSummary)> {
    let variance = variance_profile(&data.local_sets()?, DEFAULT_EPSILON)?;
    let summary = |losses, schedule, alpha| ModelSummary {
        method,
        num_frames: data.num_frames(),
        horizon: data.horizon(),
        dim: data.dim(),
        demos: data.len(),
        losses,
        variance: variance.clone(),
        schedule,
        alpha,
    };
    match method {
        Method::Salat | Method::Salit => {
            let kind = if method == Method::Salat { ModelKind::Salat } else { ModelKind::Salit };
            let (model, report) = train_model_with(data, kind, &config.flow, &config.attention, &mut progress)?;
            let schedule = rows(&model.schedule(LatentPolicy::Mean)?);
            let losses = Losses {
                flows: report.flows.into_iter().map(|f| f.losses).collect(),
                attention: report.attention.losses,
                gamma: None,
                gamma_costs: Vec::new(),
            };
            Ok((Bundle::Shift(Box::new(model)), summary(losses, Some(schedule), None)))
        }
        Method::TpGmm | Method::AlphaTpGmm => {
            let variant = if method == Method::TpGmm { Variant::Plain } else { Variant::Alpha };
            let model = fit_tpgmm(data, variant, &config.tpgmm)?;
            progress(0.9);
            let (gamma, gamma_costs) = match variant {
                Variant::Alpha => (Some(model.gamma), select_gamma(&model, data, &config.tpgmm.gamma_grid)?.1),
                Variant::Plain => (None, Vec::new()),
            };
            let identity = TaskQuery::new(vec![Frame::identity(data.dim()); data.num_frames()])?;
            let alpha = model.generate(&identity)?.alpha;
            progress(1.0);
            let losses = Losses { flows: Vec::new(), attention: Vec::new(), gamma, gamma_costs };
            Ok((Bundle::TpGmm(model), summary(losses, None, Some(alpha))))
        }
        Method::Oracle | Method::StraightLine => Err(Error::InvalidInput(format!("{method} is scripted and has nothing to train"))),
    }
}

/// Process exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged(_) | Error::NonFinite { .. } | Error::Numerical(_) => 3,
        _ => 2,
    }
}
