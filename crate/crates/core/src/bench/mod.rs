//! Simulated docking benchmarks: layouts, a scripted demonstrator, scoring,
//! a runner that trains and evaluates methods, and SVG figures.

pub mod demo;
pub mod runner;
pub mod scenario;
pub mod score;
pub mod svg;

pub use demo::{synth_demo, DemoMode, DemoStyle, Side, SynthDemo};
pub use scenario::{Docker, Obstacle, Pose, Regime, Scenario, ScenarioSampler, TaskKind, Tunnel};
pub use score::{check_collision, check_success, Collision, Contact, Failure, TAU_ANG_DEG, TAU_POS};
pub use runner::{run_benchmark, render_table, BenchConfig, Method, SuccessReport, Trained, TrainedSet};
pub use svg::{emit_svg, render_svg, Curve};
