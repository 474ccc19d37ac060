use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use shiftflow::geometry::{Dataset, Demonstration, Frame, TaskQuery, Trajectory};

fn shiftflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shiftflow")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// One frame, eight demos: a quarter arc seen from a randomly placed frame.
fn toy_dataset() -> Dataset {
    let demos = (0..8)
        .map(|i| {
            let f = Frame::planar(0.1 * i as f64, 0.5 - 0.05 * i as f64, 0.3 * i as f64);
            let local: Vec<Vec<f64>> = (0..20)
                .map(|t| {
                    let a = std::f64::consts::FRAC_PI_2 * t as f64 / 19.0;
                    vec![0.3 * a.sin(), 0.3 * (1.0 - a.cos()) + 0.01 * (i % 3) as f64]
                })
                .collect();
            let global = shiftflow::geometry::to_global(&Trajectory::from_rows(&local).unwrap(), &f).unwrap();
            Demonstration::new(TaskQuery::new(vec![f]).unwrap(), global).unwrap()
        })
        .collect();
    Dataset::new(demos).unwrap()
}

#[test]
fn missing_or_malformed_data_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("model.json");
    let o = shiftflow(&["train", "--data", p(&dir.path().join("nope.json")), "--method", "salit", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"schema": 99, "demos": []}"#).unwrap();
    let o = shiftflow(&["train", "--data", p(&bad), "--method", "tpgmm", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
    assert!(!out.exists());
}

#[test]
fn toy_salat_trains_quickly_and_replays_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy.json");
    toy_dataset().save(&data).unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    let args = |out: &Path| -> Vec<String> {
        ["train", "--data", p(&data), "--method", "salat", "--out", p(out), "--seed", "3", "--flow-epochs", "150", "--attention-epochs", "300"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    };
    let start = Instant::now();
    let o = Command::new(env!("CARGO_BIN_EXE_shiftflow")).args(args(&a)).output().unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(elapsed < 60.0, "took {elapsed:.1}s");
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("flow 0: final nll") && stdout.contains("attention: final cost"));
    assert!(Command::new(env!("CARGO_BIN_EXE_shiftflow")).args(args(&b)).output().unwrap().status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let query = dir.path().join("q.json");
    std::fs::write(&query, serde_json::to_string(&toy_dataset().demos()[2].query).unwrap()).unwrap();
    let (g1, g2) = (dir.path().join("g1.json"), dir.path().join("g2.json"));
    for g in [&g1, &g2] {
        assert!(shiftflow(&["generate", "--model", p(&a), "--query", p(&query), "--out", p(g)]).status.success());
    }
    assert_eq!(std::fs::read(&g1).unwrap(), std::fs::read(&g2).unwrap());
    let gen: serde_json::Value = serde_json::from_slice(&std::fs::read(&g1).unwrap()).unwrap();
    assert_eq!(gen["trajectory"].as_array().unwrap().len(), 20);
    assert_eq!(gen["attention"][0].as_array().unwrap().len(), 1);

    let two = dir.path().join("two.json");
    let f = Frame::identity(2);
    std::fs::write(&two, serde_json::to_string(&TaskQuery::new(vec![f.clone(), f]).unwrap()).unwrap()).unwrap();
    let g3 = dir.path().join("g3.json");
    assert_eq!(shiftflow(&["generate", "--model", p(&a), "--query", p(&two), "--out", p(&g3)]).status.code(), Some(2));
    assert!(!g3.exists());
}

#[test]
fn divergent_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let huge: Vec<Demonstration> = toy_dataset()
        .demos()
        .iter()
        .map(|d| Demonstration::new(d.query.clone(), Trajectory::new(d.trajectory.points() * 1e160).unwrap()).unwrap())
        .collect();
    let data = dir.path().join("huge.json");
    Dataset::new(huge).unwrap().save(&data).unwrap();
    let out = dir.path().join("m.json");
    let o = shiftflow(&["train", "--data", p(&data), "--method", "salit", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.exists());
}

#[test]
fn zero_trial_bench_writes_an_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    let table = dir.path().join("t.txt");
    let o = shiftflow(&["bench", "--task", "all", "--trials", "0", "--report", p(&report), "--table", p(&table)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let reports: Vec<shiftflow::bench::SuccessReport> = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(reports.len(), 3);
    assert!(reports.iter().all(|r| r.trials == 0 && r.results.iter().all(|m| m.trials() == 0)));
    assert!(std::fs::read_to_string(&table).unwrap().contains("SALaT"));
    assert_eq!(shiftflow(&["bench", "--task", "maze", "--report", p(&report)]).status.code(), Some(2));
}

#[test]
fn synth_baseline_and_svg_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.json");
    let scenes = dir.path().join("s.json");
    let run = |args: &[&str]| {
        let o = shiftflow(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    run(&["synth", "--task", "docker", "--demos", "10", "--seed", "4", "--out", p(&data), "--scenarios", p(&scenes)]);
    let again = dir.path().join("d2.json");
    run(&["synth", "--task", "docker", "--demos", "10", "--seed", "4", "--out", p(&again)]);
    assert_eq!(std::fs::read(&data).unwrap(), std::fs::read(&again).unwrap());
    assert_eq!(Dataset::load(&data).unwrap().len(), 10);

    let model = dir.path().join("m.json");
    run(&["train", "--data", p(&data), "--method", "alpha-tpgmm", "--out", p(&model), "--components", "4"]);
    let scene = dir.path().join("scene.json");
    run(&["scenario", "--task", "docker", "--seed", "4", "--index", "7", "--out", p(&scene)]);
    let (out, svg) = (dir.path().join("g.json"), dir.path().join("g.svg"));
    run(&["generate", "--model", p(&model), "--query", p(&scene), "--out", p(&out), "--svg", p(&svg)]);
    let text = std::fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg") && text.contains("alpha"));
    let gen: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert!(gen.get("alpha").is_some());

    let query = dir.path().join("q.json");
    std::fs::write(&query, serde_json::to_string(&Dataset::load(&data).unwrap().demos()[0].query).unwrap()).unwrap();
    let o = shiftflow(&["generate", "--model", p(&model), "--query", p(&query), "--out", p(&out), "--svg", p(&svg)]);
    assert_eq!(o.status.code(), Some(2));
}
