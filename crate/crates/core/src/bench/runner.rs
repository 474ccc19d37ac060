//! Training and evaluation of every method on one task.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attention::{fit_locals, train_attention, AttentionConfig, ModelKind, ShiftAttentionModel};
use crate::bench::demo::{synth_demo, DemoMode, DemoStyle};
use crate::bench::scenario::{Regime, Scenario, ScenarioSampler, TaskKind, P2};
use crate::bench::score::{check_success, Failure};
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::geometry::{Dataset, Trajectory};
use crate::tpgmm::{fit_tpgmm, TpGmmConfig, TpGmmModel, Variant};

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Salat,
    Salit,
    TpGmm,
    AlphaTpGmm,
    /// The scripted demonstrator itself.
    Oracle,
    StraightLine,
}

impl Method {
    /// The four learned methods of the comparison table.
    pub const TABLE: [Method; 4] = [Method::Salat, Method::Salit, Method::TpGmm, Method::AlphaTpGmm];

    pub fn name(self) -> &'static str {
        match self {
            Method::Salat => "SALaT",
            Method::Salit => "SALiT",
            Method::TpGmm => "TP-GMM",
            Method::AlphaTpGmm => "αTP-GMM",
            Method::Oracle => "oracle",
            Method::StraightLine => "straight-line",
        }
    }

    fn key(self) -> &'static str {
        match self {
            Method::Salat => "salat",
            Method::Salit => "salit",
            Method::TpGmm => "tpgmm",
            Method::AlphaTpGmm => "alpha-tpgmm",
            Method::Oracle => "oracle",
            Method::StraightLine => "straight-line",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Method::Salat, Method::Salit, Method::TpGmm, Method::AlphaTpGmm, Method::Oracle, Method::StraightLine]
            .into_iter()
            .find(|m| m.key() == s.to_ascii_lowercase() || m.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Training demonstrations; the task default when `None`.
    pub train_demos: Option<usize>,
    pub flow: FlowConfig,
    pub attention: AttentionConfig,
    pub tpgmm: TpGmmConfig,
    pub style: DemoStyle,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            train_demos: None,
            flow: FlowConfig { blocks: 4, hidden: 16, epochs: 400, lr: 5e-3, ..Default::default() },
            attention: AttentionConfig { hidden: 16, epochs: 3000, lr: 1e-2, ..Default::default() },
            tpgmm: TpGmmConfig::default(),
            style: DemoStyle::default(),
            seed: 0,
        }
    }
}

fn sub_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut x = seed ^ tag.wrapping_mul(0xA24B_AED4_963E_E407) ^ index.wrapping_mul(0x9FB2_1C65_1E98_DF25);
    x ^= x >> 31;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^ (x >> 29)
}

/// Training scenarios and their synthesized demonstrations.
pub fn training_set(kind: TaskKind, config: &BenchConfig) -> Result<(Vec<Scenario>, Dataset)> {
    let n = config.train_demos.unwrap_or_else(|| kind.default_train_demos());
    synth_set(kind, Regime::Train, n, config)
}

/// `n` scenarios of `regime`, one synthesized demonstration each.
pub fn synth_set(kind: TaskKind, regime: Regime, n: usize, config: &BenchConfig) -> Result<(Vec<Scenario>, Dataset)> {
    let sampler = ScenarioSampler::new(config.seed);
    let mut scenarios = Vec::with_capacity(n);
    let mut demos = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let s = sampler.sample(kind, regime, i)?;
        demos.push(synth_demo(&s, DemoMode::Auto, sub_seed(config.seed, 1, i), &config.style)?.demonstration);
        scenarios.push(s);
    }
    Ok((scenarios, Dataset::new(demos)?))
}

/// The test scenario of trial `index`.
pub fn test_scenario(kind: TaskKind, config: &BenchConfig, index: u64) -> Result<Scenario> {
    ScenarioSampler::new(config.seed).sample(kind, Regime::Test, index)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Trained {
    Shift(Box<ShiftAttentionModel>),
    TpGmm(TpGmmModel),
    Oracle,
    StraightLine,
}

/// A generated trajectory with the frame weighting that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub trajectory: Trajectory,
    /// `T×K` attention or α rows; absent for the scripted methods.
    pub weights: Option<Array2<f64>>,
}

fn rows(v: &[Vec<f64>]) -> Array2<f64> {
    Array2::from_shape_fn((v.len(), v.first().map_or(0, Vec::len)), |(i, j)| v[i][j])
}

impl Trained {
    pub fn rollout(&self, scenario: &Scenario, horizon: usize, style: &DemoStyle, seed: u64) -> Result<Rollout> {
        let query = scenario.query();
        match self {
            Trained::Shift(m) => {
                let g = m.generate(&query)?;
                Ok(Rollout { trajectory: g.trajectory, weights: Some(rows(&g.attention)) })
            }
            Trained::TpGmm(m) => {
                let g = m.generate(&query)?;
                Ok(Rollout { trajectory: g.trajectory, weights: Some(rows(&g.alpha)) })
            }
            Trained::Oracle => {
                let style = DemoStyle { horizon, ..*style };
                Ok(Rollout { trajectory: synth_demo(scenario, DemoMode::Auto, seed, &style)?.demonstration.trajectory, weights: None })
            }
            Trained::StraightLine => Ok(Rollout { trajectory: straight_line(scenario, horizon)?, weights: None }),
        }
    }
}

/// Piecewise-linear path through `stops` at equal arc length.
fn polyline(stops: &[P2], horizon: usize) -> Result<Trajectory> {
    let lens: Vec<f64> = stops.windows(2).map(|w| (w[1] - w[0]).norm()).collect();
    let total: f64 = lens.iter().sum();
    let rows: Vec<Vec<f64>> = (0..horizon)
        .map(|i| {
            let mut s = total * i as f64 / (horizon - 1) as f64;
            for (k, l) in lens.iter().enumerate() {
                if s <= *l || k + 1 == lens.len() {
                    let p = stops[k] + (stops[k + 1] - stops[k]) * if *l > 0.0 { (s / l).min(1.0) } else { 0.0 };
                    return vec![p.x, p.y];
                }
                s -= l;
            }
            unreachable!()
        })
        .collect();
    Trajectory::from_rows(&rows)
}

/// Start mouth to goal mouth, or start through the tunnel and straight back.
pub fn straight_line(scenario: &Scenario, horizon: usize) -> Result<Trajectory> {
    if horizon < 2 {
        return Err(Error::InvalidInput("straight line needs T >= 2".into()));
    }
    let a = scenario.start.pose.position();
    match (&scenario.goal, &scenario.tunnel) {
        (Some(g), _) => polyline(&[a, g.pose.position()], horizon),
        (None, Some(t)) => polyline(&[a, t.exit() + t.pose.axis() * 0.03, a], horizon),
        (None, None) => Err(Error::InvalidInput("scenario has neither goal nor tunnel".into())),
    }
}

/// Methods trained on one task's training set.
#[derive(Debug, Clone)]
pub struct TrainedSet {
    pub task: TaskKind,
    pub horizon: usize,
    pub models: BTreeMap<Method, Trained>,
}

impl TrainedSet {
    pub fn get(&self, method: Method) -> Result<&Trained> {
        self.models.get(&method).ok_or_else(|| Error::InvalidInput(format!("{method} has not been trained for {}", self.task.name())))
    }
}

pub fn train_method(method: Method, data: &Dataset, config: &BenchConfig) -> Result<Trained> {
    Ok(match method {
        Method::Salat | Method::Salit => {
            let kind = if method == Method::Salat { ModelKind::Salat } else { ModelKind::Salit };
            let locals = fit_locals(data, kind, &config.flow)?;
            Trained::Shift(Box::new(train_attention(locals, data, &config.attention)?.0))
        }
        Method::TpGmm => Trained::TpGmm(fit_tpgmm(data, Variant::Plain, &config.tpgmm)?),
        Method::AlphaTpGmm => Trained::TpGmm(fit_tpgmm(data, Variant::Alpha, &config.tpgmm)?),
        Method::Oracle => Trained::Oracle,
        Method::StraightLine => Trained::StraightLine,
    })
}

pub fn train_methods(kind: TaskKind, methods: &[Method], config: &BenchConfig) -> Result<TrainedSet> {
    let (_, data) = training_set(kind, config)?;
    let models = methods.iter().map(|m| Ok((*m, train_method(*m, &data, config)?))).collect::<Result<_>>()?;
    Ok(TrainedSet { task: kind, horizon: data.horizon(), models })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub successes: usize,
    pub failures: BTreeMap<Failure, usize>,
}

impl MethodResult {
    pub fn trials(&self) -> usize {
        self.successes + self.failures.values().sum::<usize>()
    }

    /// Zero when there were no trials.
    pub fn rate(&self) -> f64 {
        match self.trials() {
            0 => 0.0,
            n => self.successes as f64 / n as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessReport {
    pub schema: u32,
    pub task: TaskKind,
    pub seed: u64,
    pub trials: usize,
    pub results: Vec<MethodResult>,
}

impl SuccessReport {
    pub fn result(&self, method: Method) -> Option<&MethodResult> {
        self.results.iter().find(|r| r.method == method)
    }

    pub fn rate(&self, method: Method) -> Option<f64> {
        self.result(method).map(MethodResult::rate)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: SuccessReport = serde_json::from_str(text)?;
        if r.schema != REPORT_SCHEMA {
            return Err(Error::Schema(format!("unsupported report schema {}", r.schema)));
        }
        if r.results.iter().any(|m| m.trials() != r.trials) {
            return Err(Error::Schema("method counts do not sum to the trial count".into()));
        }
        Ok(r)
    }
}

fn score(trained: &Trained, scenario: &Scenario, horizon: usize, config: &BenchConfig, seed: u64) -> Result<std::result::Result<(), Failure>> {
    match trained.rollout(scenario, horizon, &config.style, seed) {
        Ok(r) => Ok(check_success(&r.trajectory, scenario)),
        Err(Error::NonFinite { .. } | Error::Numerical(_)) => Ok(Err(Failure::NonFinite)),
        Err(e) => Err(e),
    }
}

/// Scores `methods` on `trials` test scenarios. Each trial draws from its
/// own sub-seed, so the result for a method ignores which others run.
pub fn evaluate(trained: &TrainedSet, methods: &[Method], trials: usize, config: &BenchConfig) -> Result<SuccessReport> {
    let mut results: Vec<MethodResult> =
        methods.iter().map(|m| MethodResult { method: *m, successes: 0, failures: BTreeMap::new() }).collect();
    for m in methods {
        trained.get(*m)?;
    }
    for i in 0..trials as u64 {
        let scenario = test_scenario(trained.task, config, i)?;
        for r in results.iter_mut() {
            match score(trained.get(r.method)?, &scenario, trained.horizon, config, sub_seed(config.seed, 2, i))? {
                Ok(()) => r.successes += 1,
                Err(f) => *r.failures.entry(f).or_default() += 1,
            }
        }
    }
    Ok(SuccessReport { schema: REPORT_SCHEMA, task: trained.task, seed: config.seed, trials, results })
}

/// Trains `methods` on fresh demonstrations of `kind` and evaluates them.
pub fn run_benchmark(kind: TaskKind, methods: &[Method], trials: usize, config: &BenchConfig) -> Result<SuccessReport> {
    if trials == 0 {
        let results = methods.iter().map(|m| MethodResult { method: *m, successes: 0, failures: BTreeMap::new() }).collect();
        return Ok(SuccessReport { schema: REPORT_SCHEMA, task: kind, seed: config.seed, trials, results });
    }
    let trained = train_methods(kind, methods, config)?;
    evaluate(&trained, methods, trials, config)
}

/// Success rates as a text table: one row per method, one column per task.
pub fn render_table(reports: &[SuccessReport]) -> String {
    let mut methods: Vec<Method> = Vec::new();
    for r in reports {
        for m in &r.results {
            if !methods.contains(&m.method) {
                methods.push(m.method);
            }
        }
    }
    let width = reports.iter().map(|r| r.task.name().len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<14}", "method");
    for r in reports {
        out += &format!(" | {:>width$}", r.task.name());
    }
    out.push('\n');
    out += &"-".repeat(14 + reports.len() * (width + 3));
    out.push('\n');
    for m in methods {
        out += &format!("{:<14}", m.name());
        for r in reports {
            let cell = r.rate(m).map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
            out += &format!(" | {cell:>width$}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> BenchConfig {
        BenchConfig { seed: 3, ..Default::default() }
    }

    #[test]
    fn oracle_always_succeeds() {
        for kind in TaskKind::ALL {
            let trained = train_methods(kind, &[Method::Oracle], &quick()).unwrap();
            let report = evaluate(&trained, &[Method::Oracle], 25, &quick()).unwrap();
            assert_eq!(report.rate(Method::Oracle), Some(1.0), "{kind:?}");
        }
    }

    #[test]
    fn straight_lines_rarely_clear_the_obstacle() {
        let cfg = quick();
        let trained = train_methods(TaskKind::DockerObstacle, &[Method::StraightLine], &cfg).unwrap();
        let report = evaluate(&trained, &[Method::StraightLine], 100, &cfg).unwrap();
        assert!(report.rate(Method::StraightLine).unwrap() < 0.5);
        // the layout alone predicts it: how often the obstacle disc meets the start-goal chord
        let blocked = (0..100)
            .filter(|i| {
                let s = test_scenario(TaskKind::DockerObstacle, &cfg, *i).unwrap();
                let o = s.obstacle.unwrap();
                crate::bench::score::point_segment_distance(o.center(), s.start.pose.position(), s.goal.unwrap().pose.position()) < o.radius
            })
            .count();
        assert!(100 - blocked >= report.result(Method::StraightLine).unwrap().successes);
        assert!(blocked > 50);
    }

    #[test]
    fn rates_ignore_method_order() {
        let cfg = quick();
        let methods = [Method::StraightLine, Method::Oracle];
        let trained = train_methods(TaskKind::DockerObstacleTunnel, &methods, &cfg).unwrap();
        let a = evaluate(&trained, &methods, 10, &cfg).unwrap();
        let b = evaluate(&trained, &[Method::Oracle, Method::StraightLine], 10, &cfg).unwrap();
        for m in methods {
            assert_eq!(a.result(m), b.result(m));
        }
        let solo = evaluate(&trained, &[Method::Oracle], 10, &cfg).unwrap();
        assert_eq!(solo.result(Method::Oracle), a.result(Method::Oracle));
    }

    #[test]
    fn untrained_method_is_an_error() {
        let trained = train_methods(TaskKind::Docker, &[Method::Oracle], &quick()).unwrap();
        assert!(evaluate(&trained, &[Method::Salat], 1, &quick()).is_err());
    }

    #[test]
    fn empty_report_round_trips() {
        let trained = train_methods(TaskKind::Docker, &[Method::Oracle], &quick()).unwrap();
        let report = evaluate(&trained, &[Method::Oracle], 0, &quick()).unwrap();
        assert_eq!(report.rate(Method::Oracle), Some(0.0));
        assert_eq!(SuccessReport::from_json(&report.to_json().unwrap()).unwrap(), report);
        let table = render_table(&[report]);
        assert!(table.contains("oracle") && table.contains("0.00"));
    }

    #[test]
    fn method_names_parse() {
        for m in [Method::Salat, Method::AlphaTpGmm, Method::StraightLine] {
            assert_eq!(m.key().parse::<Method>().unwrap(), m);
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("nope".parse::<Method>().is_err());
    }
}
