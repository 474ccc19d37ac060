//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use shiftflow::attention::LatentPolicy;
use shiftflow::bench::runner::synth_set;
use shiftflow::bench::{render_svg, render_table, run_benchmark, Curve, Method, Regime, ScenarioSampler, TaskKind};
use shiftflow::geometry::Dataset;
use shiftflow::{Error, Result};

use crate::bundle::{train_bundle, Bundle, Overrides, QueryInput};
use crate::service::Service;

#[derive(Debug, Parser)]
#[command(name = "shiftflow", version, about = "Train, run and benchmark shift-attention trajectory models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainMethod {
    Salat,
    Salit,
    Tpgmm,
    AlphaTpgmm,
}

impl From<TrainMethod> for Method {
    fn from(m: TrainMethod) -> Self {
        match m {
            TrainMethod::Salat => Method::Salat,
            TrainMethod::Salit => Method::Salit,
            TrainMethod::Tpgmm => Method::TpGmm,
            TrainMethod::AlphaTpgmm => Method::AlphaTpGmm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Policy {
    Mean,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegimeArg {
    Train,
    Test,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::Train => Regime::Train,
            RegimeArg::Test => Regime::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model to a dataset file and write the bundle.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        method: TrainMethod,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        hyper: Overrides,
    },
    /// Generate a trajectory for a query or scenario file.
    Generate {
        #[arg(long)]
        model: PathBuf,
        /// A task query, or a scenario (needed for --svg).
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Policy::Mean)]
        policy: Policy,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Train on fresh demonstrations and score methods on test scenarios.
    Bench {
        /// A task name, or `all`.
        #[arg(long, default_value = "all")]
        task: String,
        /// Comma-separated method names.
        #[arg(long, value_delimiter = ',', default_values_t = Method::TABLE.to_vec())]
        methods: Vec<Method>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON list of per-task reports.
        #[arg(long)]
        report: PathBuf,
        /// Also write the text table here.
        #[arg(long)]
        table: Option<PathBuf>,
        #[command(flatten)]
        hyper: Overrides,
    },
    /// Synthesize a dataset of scripted demonstrations.
    Synth {
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        demos: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = RegimeArg::Train)]
        regime: RegimeArg,
        #[arg(long)]
        out: PathBuf,
        /// Also write the scenarios, one per demonstration.
        #[arg(long)]
        scenarios: Option<PathBuf>,
    },
    /// Sample one scenario.
    Scenario {
        #[arg(long)]
        task: TaskKind,
        #[arg(long, value_enum, default_value_t = RegimeArg::Test)]
        regime: RegimeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        index: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, env = "SHIFTFLOW_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, env = "SHIFTFLOW_STORE", default_value = "shiftflow-store")]
        store: PathBuf,
    },
}

/// Writes through a sibling temporary file so a failed run leaves nothing behind.
fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Schema(format!("cannot read {}: {e}", path.display())))
}

fn tasks(name: &str) -> Result<Vec<TaskKind>> {
    if name == "all" {
        Ok(TaskKind::ALL.to_vec())
    } else {
        Ok(vec![name.parse()?])
    }
}

fn train(data: &Path, method: Method, out: &Path, seed: u64, hyper: &Overrides) -> Result<()> {
    let dataset = Dataset::load(data).map_err(|e| match e {
        Error::Io(io) => Error::Schema(format!("cannot read {}: {io}", data.display())),
        e => e,
    })?;
    let (bundle, summary) = train_bundle(&dataset, method, &hyper.config(seed), |_| {})?;
    for (k, curve) in summary.losses.flows.iter().enumerate() {
        let best = curve.iter().copied().fold(f64::INFINITY, f64::min);
        println!("flow {k}: final nll {:.4}, best {best:.4}", curve.last().copied().unwrap_or(f64::NAN));
    }
    if let Some(last) = summary.losses.attention.last() {
        let best = summary.losses.attention.iter().copied().fold(f64::INFINITY, f64::min);
        println!("attention: final cost {last:.4}, best {best:.4}");
    }
    if let Some(g) = summary.losses.gamma {
        println!("gamma: {g}");
    }
    write_atomic(out, &bundle.to_json()?)?;
    println!("wrote {method} model to {}", out.display());
    Ok(())
}

fn generate(model: &Path, query: &Path, out: &Path, policy: Policy, seed: u64, svg: Option<&Path>) -> Result<()> {
    let bundle = Bundle::from_json(&read(model)?)?;
    let input = QueryInput::from_json(&read(query)?)?;
    let policy = match policy {
        Policy::Mean => LatentPolicy::Mean,
        Policy::Sample => LatentPolicy::Sample { seed },
    };
    let output = bundle.generate(&input.query(), policy)?;
    let svg_text = match svg {
        Some(_) => {
            let scenario = input.scenario().ok_or_else(|| Error::InvalidInput("--svg needs a scenario file as --query".into()))?;
            let weights = ndarray::Array2::from_shape_fn((output.weights().len(), bundle.num_frames()), |(t, k)| output.weights()[t][k]);
            let attention = matches!(bundle, Bundle::Shift(_)).then_some(&weights);
            let alpha = matches!(bundle, Bundle::TpGmm(_)).then_some(&weights);
            Some(render_svg(scenario, &[Curve::generated(output.trajectory())], attention, alpha)?)
        }
        None => None,
    };
    write_atomic(out, &serde_json::to_string_pretty(&output)?)?;
    if let (Some(path), Some(text)) = (svg, svg_text) {
        write_atomic(path, &text)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn bench(task: &str, methods: &[Method], trials: usize, seed: u64, report: &Path, table: Option<&Path>, hyper: &Overrides) -> Result<()> {
    let kinds = tasks(task)?;
    let config = hyper.config(seed);
    let mut reports = Vec::with_capacity(kinds.len());
    for kind in kinds {
        reports.push(run_benchmark(kind, methods, trials, &config)?);
    }
    let text = render_table(&reports);
    write_atomic(report, &serde_json::to_string_pretty(&reports)?)?;
    if let Some(path) = table {
        write_atomic(path, &text)?;
    }
    print!("{text}");
    Ok(())
}

/// Runs one command; the error carries the exit code via [`crate::bundle::exit_code`].
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { data, method, out, seed, hyper } => train(&data, method.into(), &out, seed, &hyper),
        Command::Generate { model, query, out, policy, seed, svg } => generate(&model, &query, &out, policy, seed, svg.as_deref()),
        Command::Bench { task, methods, trials, seed, report, table, hyper } => {
            bench(&task, &methods, trials, seed, &report, table.as_deref(), &hyper)
        }
        Command::Synth { task, demos, seed, regime, out, scenarios } => {
            let (s, data) = synth_set(task, regime.into(), demos, &Overrides::default().config(seed))?;
            write_atomic(&out, &data.to_json()?)?;
            if let Some(path) = scenarios {
                write_atomic(&path, &serde_json::to_string_pretty(&s)?)?;
            }
            Ok(())
        }
        Command::Scenario { task, regime, seed, index, out } => {
            let s = ScenarioSampler::new(seed).sample(task, regime.into(), index)?;
            write_atomic(&out, &serde_json::to_string_pretty(&s)?)
        }
        Command::Serve { port, store } => {
            let service = Service::open(&store)?;
            let rt = tokio::runtime::Runtime::new()?;
            eprintln!("serving {} on port {port}", store.display());
            Ok(rt.block_on(crate::http::serve(service, port))?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn flags_parse() {
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from(["shiftflow", "bench", "--task", "docker", "--methods", "salat,TP-GMM", "--report", "r.json"]).unwrap();
        match cli.command {
            Command::Bench { methods, trials, .. } => {
                assert_eq!(methods, vec![Method::Salat, Method::TpGmm]);
                assert_eq!(trials, 100);
            }
            _ => panic!("wrong subcommand"),
        }
        assert!(Cli::try_parse_from(["shiftflow", "train", "--data", "d", "--method", "gmm", "--out", "o"]).is_err());
    }
}
