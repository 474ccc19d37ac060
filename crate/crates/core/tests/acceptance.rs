//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test --test acceptance -- <filter>...` runs the criteria whose
//! names contain a filter. Set `ACCEPTANCE_STRICT=1` to exit non-zero when
//! a criterion fails.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shiftflow::attention::{
    cost_dist, cost_point, cost_traj, train_attention, AttentionConfig, CostWeights, LatentPolicy, LocalModel, ModelKind, Objective,
    ShiftAttentionModel,
};
use shiftflow::bench::runner::{evaluate, test_scenario, train_method, training_set};
use shiftflow::bench::{BenchConfig, Method, SuccessReport, TaskKind, Trained, TrainedSet};
use shiftflow::diffcore::gradcheck;
use shiftflow::flow::{train_flow, FlowConfig, FlowModel, FlowTopology, Prior, SCALE_CLAMP};
use shiftflow::geometry::{to_global, Dataset, Frame, Trajectory};
use shiftflow::tpgmm::{alpha_weights, fit_tpgmm, gaussian_product, Gaussian, TpGmmConfig, Variant};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn random_seq(rng: &mut impl Rng, t: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((t, d), || rng.random_range(-1.0..1.0))
}

fn random_flow(t: usize, seed: u64, prior: Prior) -> FlowModel {
    let topo = FlowTopology { dim: 2, horizon: t, blocks: 3, hidden: 4, clamp: SCALE_CLAMP, prior };
    let mut m = FlowModel::init(topo, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    let flat: Vec<f64> = (0..m.params.num_scalars()).map(|_| rng.random_range(-0.5..0.5)).collect();
    m.params.set_flat(&flat).unwrap();
    m
}

fn flow_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut inv = 0.0f64;
    for i in 0..100 {
        let m = random_flow(50, i, Prior::default());
        let y = random_seq(&mut rng, 50, 2);
        let back = m.decode(&m.encode(&Trajectory::new(y.clone()).unwrap()).unwrap()).unwrap();
        inv = inv.max((back.points() - &y).iter().fold(0.0, |a, v| a.max(v.abs())));
    }

    let m = random_flow(50, 7, Prior::default());
    let y = random_seq(&mut rng, 50, 2);
    let ld = m.flow.log_det(&m.params, &y).unwrap();
    let h = 1e-6;
    let mut logdet = 0.0f64;
    for t in 0..50 {
        let mut jac = DMatrix::zeros(2, 2);
        for j in 0..2 {
            let (mut plus, mut minus) = (y.row(t).to_vec(), y.row(t).to_vec());
            plus[j] += h;
            minus[j] -= h;
            let fp = m.flow.timestep_map(&m.params, &y, t, &plus).unwrap();
            let fm = m.flow.timestep_map(&m.params, &y, t, &minus).unwrap();
            for r in 0..2 {
                jac[(r, j)] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
        let num = jac.determinant().abs().ln();
        logdet = logdet.max((num - ld[t]).abs() / ld[t].abs().max(1.0));
    }

    let mut grad = 0.0f64;
    for prior in [Prior::Iid, Prior::default()] {
        let m = random_flow(8, 21, prior);
        let ys: Vec<Array2<f64>> = (0..3).map(|_| random_seq(&mut rng, 8, 2)).collect();
        let gp = m.flow.gp_factor().unwrap();
        let flow = m.flow.clone();
        grad = grad.max(gradcheck::check(&m.params, |t, p| flow.nll_tape(t, p, &ys, gp.as_ref())).unwrap());
    }
    let data = docker_like(5, 8, 3);
    let locals: Vec<LocalModel> = (0..2).map(|k| LocalModel::Flow(random_flow(8, 30 + k, Prior::default()))).collect();
    for policy in [LatentPolicy::Mean, LatentPolicy::Sample { seed: 2 }] {
        let cfg = AttentionConfig { hidden: 4, epochs: 0, policy, ..Default::default() };
        let (model, _) = train_attention(locals.clone(), &data, &cfg).unwrap();
        let obj = Objective::new(&model, &data, &cfg.costs).unwrap();
        for part in 0..5 {
            let err = gradcheck::check(&model.params, |t, p| {
                let (total, parts) = obj.build(t, p);
                Ok(if part == 4 { total } else { parts[part] })
            })
            .unwrap();
            grad = grad.max(err);
        }
    }
    outcome(
        inv < 1e-8 && logdet < 1e-4 && grad < 1e-4,
        format!("inverse max err {inv:.1e} (< 1e-8), log-det rel err {logdet:.1e} (< 1e-4), worst gradient rel err {grad:.1e} (< 1e-4)"),
    )
}

/// Two demonstrations per frame pair, frames scattered, endpoints pinned in
/// the respective frames.
fn docker_like(n: usize, t: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let demos = (0..n)
        .map(|_| {
            let a = Frame::planar(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-3.0..3.0));
            let b = Frame::planar(rng.random_range(2.0..3.0), rng.random_range(-1.0..1.0), rng.random_range(-3.0..3.0));
            let (pa, pb) = (a.translation().clone(), b.translation().clone());
            let rows: Vec<Vec<f64>> = (0..t)
                .map(|i| {
                    let s = i as f64 / (t - 1) as f64;
                    let p = &pa * (1.0 - s) + &pb * s;
                    vec![p[0] + 0.2 * (3.0 * s).sin(), p[1] + rng.random_range(-0.05..0.05)]
                })
                .collect();
            shiftflow::geometry::Demonstration::new(
                shiftflow::geometry::TaskQuery::new(vec![a, b]).unwrap(),
                Trajectory::from_rows(&rows).unwrap(),
            )
            .unwrap()
        })
        .collect();
    Dataset::new(demos).unwrap()
}

/// Fifteen arcs bulging up and fifteen bulging down.
fn two_clusters() -> Vec<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    (0..30)
        .map(|i| {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            let amp = 0.3 + rng.random_range(-0.03..0.03);
            let rows: Vec<Vec<f64>> = (0..50)
                .map(|t| {
                    let s = t as f64 / 49.0;
                    vec![s + rng.random_range(-0.005..0.005), sign * amp * (std::f64::consts::PI * s).sin() + rng.random_range(-0.005..0.005)]
                })
                .collect();
            Trajectory::from_rows(&rows).unwrap()
        })
        .collect()
}

fn multimodality() -> Outcome {
    let data = two_clusters();
    let prior = Prior::Gp { sigma_f: 1.0, length_scale: 3.0 };
    let cfg = FlowConfig { blocks: 4, hidden: 16, epochs: 1000, lr: 5e-3, prior, ..Default::default() };
    let (m, _) = train_flow(&data, &cfg).unwrap();
    let latents: Vec<Array2<f64>> = data.iter().map(|y| m.encode(y).unwrap()).collect();
    let mut worst = 0.0f64;
    for d in 0..2 {
        let vals: Vec<f64> = latents.iter().flat_map(|z| z.column(d).to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        worst = worst.max(mean.abs() / sd);
    }
    let centroid = |sign: f64| -> Array2<f64> {
        let members: Vec<&Trajectory> = data.iter().enumerate().filter(|(i, _)| (i % 2 == 0) == (sign > 0.0)).map(|(_, y)| y).collect();
        members.iter().fold(Array2::zeros((50, 2)), |acc, y| acc + y.points()) / members.len() as f64
    };
    let (up, down) = (centroid(1.0), centroid(-1.0));
    let nearest = |y: &Trajectory| {
        let du: f64 = (y.points() - &up).iter().map(|v| v * v).sum();
        let dd: f64 = (y.points() - &down).iter().map(|v| v * v).sum();
        if du < dd {
            "up"
        } else {
            "down"
        }
    };
    let plus = m.decode(&Array2::from_elem((50, 2), 2.0)).unwrap();
    let minus = m.decode(&Array2::from_elem((50, 2), -2.0)).unwrap();
    let (a, b) = (nearest(&plus), nearest(&minus));
    outcome(
        worst < 0.5 && a != b,
        format!("pooled latent |mean|/sd {worst:.3} (< 0.5); z = +2 decodes to {a}, z = -2 decodes to {b}"),
    )
}

fn cost_extremes() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for k in [2usize, 3, 5] {
        let lk = (k as f64).ln();
        let uniform = vec![Array2::from_elem((10, k), 1.0 / k as f64); 4];
        let onehot = vec![Array2::from_shape_fn((10, k), |(_, j)| if j == 0 { 1.0 } else { 0.0 }); 4];
        let traj_u = cost_traj(&uniform).unwrap();
        let traj_o = cost_traj(&onehot).unwrap();
        let point_o = cost_point(&onehot).unwrap();
        let point_u = cost_point(&uniform).unwrap();
        let tight = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs().max(1.0);
        ok &= tight(traj_u, 0.0) && tight(traj_o, lk) && tight(point_o, 0.0) && tight(point_u, lk);
        notes.push(format!("K={k}: traj {traj_u:.1e}/{traj_o:.6}, point {:.1e}/{point_u:.6}", point_o.abs()));
    }
    let w = CostWeights::default();
    let mixed: Vec<Array2<f64>> = vec![Array2::from_shape_fn((6, 3), |(t, j)| [0.6, 0.3, 0.1][(t + j) % 3])];
    let dist = cost_dist(&mixed, &w).unwrap();
    let by_hand = 10.0 * cost_traj(&mixed).unwrap() + cost_point(&mixed).unwrap();
    ok &= w.traj == 10.0 && w.point == 1.0 && dist == by_hand;
    notes.push(format!("weights traj {} point {}, L_dist exact: {}", w.traj, w.point, dist == by_hand));
    outcome(ok, notes.join("; "))
}

fn equivariance() -> Outcome {
    let cfg = BenchConfig { train_demos: Some(10), ..Default::default() };
    let (_, data) = training_set(TaskKind::Docker, &cfg).unwrap();
    let flow = FlowConfig { blocks: 2, hidden: 8, epochs: 40, lr: 5e-3, ..Default::default() };
    let att = AttentionConfig { hidden: 8, epochs: 100, lr: 1e-2, ..Default::default() };
    let model = shiftflow::attention::train_model(&data, ModelKind::Salat, &flow, &att).unwrap().0;
    let q = test_scenario(TaskKind::Docker, &cfg, 0).unwrap().query();
    let base = model.generate(&q).unwrap().trajectory;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let g = Frame::planar(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-3.2..3.2));
        let moved = model.generate(&q.transformed(&g).unwrap()).unwrap().trajectory;
        worst = worst.max(moved.max_abs_diff(&to_global(&base, &g).unwrap()));
    }
    outcome(worst < 1e-10, format!("max |generate(g.q) - g.generate(q)| = {worst:.1e} over 100 rigid motions (< 1e-10)"))
}

fn alpha_math() -> Outcome {
    let a = alpha_weights(&[DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 4.0], 1.0).unwrap();
    let eq1 = (a[0] - 0.8).abs() < 1e-10 && (a[1] - 0.2).abs() < 1e-10;

    let cfg = BenchConfig { train_demos: Some(10), ..Default::default() };
    let (_, data) = training_set(TaskKind::Docker, &cfg).unwrap();
    let tp = TpGmmConfig { components: 4, ..Default::default() };
    let plain = fit_tpgmm(&data, Variant::Plain, &tp).unwrap();
    let mut alpha = plain.clone();
    alpha.variant = Variant::Alpha;
    let q = test_scenario(TaskKind::Docker, &cfg, 1).unwrap().query();
    let reduce = alpha.generate_with_gamma(&q, 0.0).unwrap().trajectory.max_abs_diff(&plain.generate(&q).unwrap().trajectory);

    let g1 = Gaussian::new(DVector::from_vec(vec![1.0, -2.0]), DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
    let g2 = Gaussian::new(DVector::from_vec(vec![0.5, 4.0]), DMatrix::from_row_slice(2, 2, &[0.5, -0.1, -0.1, 3.0])).unwrap();
    let w = [0.7, 0.3];
    let prod = gaussian_product(&[g1.clone(), g2.clone()], &w).unwrap();
    let (p1, p2) = (g1.cov.clone().try_inverse().unwrap(), g2.cov.clone().try_inverse().unwrap());
    let lambda = &p1 * w[0] + &p2 * w[1];
    let cov = lambda.clone().try_inverse().unwrap();
    let mean = &cov * (&p1 * &g1.mean * w[0] + &p2 * &g2.mean * w[1]);
    let closed = (&prod.mean - &mean).amax().max((&prod.cov - &cov).amax());
    outcome(
        eq1 && reduce < 1e-10 && closed < 1e-10,
        format!("alpha = ({:.12}, {:.12}); gamma=0 vs plain {reduce:.1e}; product vs closed form {closed:.1e}", a[0], a[1]),
    )
}

struct TableRun {
    report: SuccessReport,
    trained: TrainedSet,
    data: Dataset,
    seconds: f64,
}

fn run_task(kind: TaskKind, cfg: &BenchConfig) -> TableRun {
    let start = Instant::now();
    let (_, data) = training_set(kind, cfg).unwrap();
    let models: BTreeMap<Method, Trained> = Method::TABLE.iter().map(|m| (*m, train_method(*m, &data, cfg).unwrap())).collect();
    let trained = TrainedSet { task: kind, horizon: data.horizon(), models };
    let report = evaluate(&trained, &Method::TABLE, 100, cfg).unwrap();
    TableRun { report, trained, data, seconds: start.elapsed().as_secs_f64() }
}

fn rates(r: &SuccessReport) -> [f64; 4] {
    Method::TABLE.map(|m| r.rate(m).unwrap())
}

fn benchmark_success(runs: &BTreeMap<TaskKind, TableRun>) -> Outcome {
    let d = rates(&runs[&TaskKind::Docker].report);
    let o = rates(&runs[&TaskKind::DockerObstacle].report);
    let t = rates(&runs[&TaskKind::DockerObstacleTunnel].report);
    let docker = d[0] >= 0.5 && d[1] >= 0.5 && d[3] >= 0.5;
    let obstacle = o[0] >= 0.4 && o[0] - o[1] >= 0.2 - 1e-12 && o[0] - o[3] >= 0.1 - 1e-12;
    let tunnel = t[0] >= 0.3 && t[1..].iter().all(|v| t[0] > *v);
    let secs: f64 = runs.values().map(|r| r.seconds).sum();
    let fmt = |r: [f64; 4]| format!("SALaT {:.2} SALiT {:.2} TP-GMM {:.2} aTP-GMM {:.2}", r[0], r[1], r[2], r[3]);
    outcome(
        docker && obstacle && tunnel && secs < 1800.0,
        format!(
            "docker [{}] {}; docker-obstacle [{}] {}; tunnel [{}] {}; {secs:.0} s (< 1800)",
            fmt(d),
            if docker { "ok" } else { "MISS" },
            fmt(o),
            if obstacle { "ok" } else { "MISS" },
            fmt(t),
            if tunnel { "ok" } else { "MISS" }
        ),
    )
}

fn salat(run: &TableRun) -> &ShiftAttentionModel {
    match run.trained.get(Method::Salat).unwrap() {
        Trained::Shift(m) => m,
        _ => unreachable!(),
    }
}

/// Interior local maxima of `v` that rise at least `prominence` above the
/// lowest point on either side before the next higher value.
fn peaks(v: &[f64], prominence: f64) -> usize {
    let mut count = 0;
    for i in 1..v.len() - 1 {
        if !(v[i] > v[i - 1] && v[i] >= v[i + 1]) {
            continue;
        }
        let left = v[..i].iter().rev().take_while(|x| **x <= v[i]).fold(v[i], |a, x| a.min(*x));
        let right = v[i + 1..].iter().take_while(|x| **x <= v[i]).fold(v[i], |a, x| a.min(*x));
        if v[i] - left.max(right) >= prominence {
            count += 1;
        }
    }
    count
}

fn attention_shape(runs: &BTreeMap<TaskKind, TableRun>) -> Outcome {
    let d = salat(&runs[&TaskKind::Docker]).schedule(LatentPolicy::Mean).unwrap();
    let last = d.nrows() - 1;
    let (s0, gt) = (d[[0, 0]], d[[last, 1]]);
    let t = salat(&runs[&TaskKind::DockerObstacleTunnel]).schedule(LatentPolicy::Mean).unwrap();
    let obstacle: Vec<f64> = t.column(1).to_vec();
    let n = peaks(&obstacle, 0.02);
    outcome(
        s0 > 0.8 && gt > 0.8 && n >= 2,
        format!("docker start weight at t=0 {s0:.3} (> 0.8), goal weight at t=T {gt:.3} (> 0.8); tunnel obstacle-frame maxima {n} (>= 2)"),
    )
}

fn smoothness(runs: &BTreeMap<TaskKind, TableRun>, base: &BenchConfig) -> Outcome {
    let run = &runs[&TaskKind::DockerObstacle];
    let locals = salat(run).locals.clone();
    let max_step = |m: &ShiftAttentionModel| -> f64 {
        (0..100).map(|i| m.generate(&test_scenario(TaskKind::DockerObstacle, base, i).unwrap().query()).unwrap().trajectory.max_step()).fold(0.0, f64::max)
    };
    let (mut full_sum, mut none_sum, mut wins) = (0.0, 0.0, 0);
    for seed in 0..10 {
        let full = AttentionConfig { seed, ..base.attention.clone() };
        let none = AttentionConfig { costs: CostWeights { smooth: 0.0, ..full.costs }, ..full.clone() };
        let a = max_step(&train_attention(locals.clone(), &run.data, &full).unwrap().0);
        let b = max_step(&train_attention(locals.clone(), &run.data, &none).unwrap().0);
        full_sum += a;
        none_sum += b;
        wins += (a <= b) as usize;
    }
    outcome(
        full_sum <= none_sum,
        format!("mean max step with L_smooth {:.5}, without {:.5}; with <= without on {wins}/10 seeds", full_sum / 10.0, none_sum / 10.0),
    )
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let mut failed = 0;
    let mut report = |name: &str, start: Instant, o: Outcome| {
        let status = if o.pass { "PASS" } else { "FAIL" };
        failed += !o.pass as usize;
        println!("[{status}] {name}: {} ({:.1} s)", o.detail, start.elapsed().as_secs_f64());
    };
    let simple: [(&str, fn() -> Outcome); 5] = [
        ("flow-correctness", flow_suite),
        ("multimodality", multimodality),
        ("cost-extremes", cost_extremes),
        ("equivariance", equivariance),
        ("alpha-tpgmm-math", alpha_math),
    ];
    for (name, f) in simple {
        if wanted(name) {
            let start = Instant::now();
            report(name, start, f());
        }
    }
    let needs_table = ["benchmark-success", "attention-shape", "smoothness-ablation"];
    if needs_table.iter().any(|n| wanted(n)) {
        let cfg = BenchConfig::default();
        let runs: BTreeMap<TaskKind, TableRun> = TaskKind::ALL.iter().map(|k| (*k, run_task(*k, &cfg))).collect();
        for r in runs.values() {
            print!("{}", shiftflow::bench::render_table(std::slice::from_ref(&r.report)));
        }
        let start = Instant::now();
        if wanted("benchmark-success") {
            report("benchmark-success", start, benchmark_success(&runs));
        }
        if wanted("attention-shape") {
            report("attention-shape", start, attention_shape(&runs));
        }
        if wanted("smoothness-ablation") {
            let start = Instant::now();
            report("smoothness-ablation", start, smoothness(&runs, &cfg));
        }
    }
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
