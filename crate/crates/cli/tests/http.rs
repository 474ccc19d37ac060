use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use shiftflow_cli::http::router;
use shiftflow_cli::service::Service;
use tower::ServiceExt;

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn raw(app: &Router, method: &str, uri: &str, body: &str) -> StatusCode {
    let req = Request::builder().method(method).uri(uri).body(Body::from(body.to_string())).unwrap();
    app.clone().oneshot(req).await.unwrap().status()
}

async fn wait(app: &Router, id: &str) -> Value {
    let start = Instant::now();
    loop {
        let (status, job) = call(app, "GET", &format!("/jobs/{id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        if job["status"] == "done" || job["status"] == "failed" {
            return job;
        }
        assert!(start.elapsed() < Duration::from_secs(300), "job {id} stuck: {job}");
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
}

fn salit_job(seed: u64) -> Value {
    json!({
        "kind": "train-attention",
        "data": { "synth": { "task": "docker", "demos": 6, "seed": seed } },
        "config": { "attention_epochs": 200 }
    })
}

#[tokio::test]
async fn scenarios_and_demos() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(Service::open(dir.path()).unwrap());
    let sample = json!({ "sample": { "task": "docker-obstacle", "seed": 2, "index": 5 } });
    let (status, created) = call(&app, "POST", "/scenarios", Some(sample.clone())).await;
    assert_eq!(status, StatusCode::CREATED);
    let id = created["id"].as_str().unwrap().to_string();
    assert_eq!(created["query"]["frames"].as_array().unwrap().len(), 3);
    let (status, again) = call(&app, "POST", "/scenarios", Some(sample)).await;
    assert_eq!((status, &again["id"]), (StatusCode::OK, &created["id"]));

    let (status, explicit) = call(&app, "POST", "/scenarios", Some(json!({ "scenario": created["scenario"] }))).await;
    assert_eq!((status, &explicit["id"]), (StatusCode::OK, &created["id"]));

    let stroke = json!({ "trajectory": [[0.1, 0.1], [0.4, 0.2], [0.8, 0.7]] });
    let (status, receipt) = call(&app, "POST", &format!("/scenarios/{id}/demos"), Some(stroke.clone())).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(receipt["demonstration"]["trajectory"].as_array().unwrap().len(), 50);
    assert_eq!(receipt["index"], 0);
    assert_eq!(receipt["success"], false);
    let (status, dup) = call(&app, "POST", &format!("/scenarios/{id}/demos"), Some(stroke)).await;
    assert_eq!((status, &dup["duplicate"]), (StatusCode::OK, &json!(true)));

    let short = json!({ "trajectory": [[0.1, 0.1], [0.4, 0.2]] });
    assert_eq!(call(&app, "POST", &format!("/scenarios/{id}/demos"), Some(short)).await.0, StatusCode::BAD_REQUEST);
    let other_t = json!({ "trajectory": [[0.1, 0.1], [0.4, 0.2], [0.5, 0.5]], "horizon": 30 });
    assert_eq!(call(&app, "POST", &format!("/scenarios/{id}/demos"), Some(other_t)).await.0, StatusCode::BAD_REQUEST);
    let nan = r#"{"trajectory": [[0.1, 0.1], [0.4, 0.2], [1e999, 0.5]]}"#;
    assert_eq!(raw(&app, "POST", &format!("/scenarios/{id}/demos"), nan).await, StatusCode::BAD_REQUEST);

    let (status, fetched) = call(&app, "GET", &format!("/scenarios/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(fetched["demos"].as_array().unwrap().len(), 1);

    assert_eq!(call(&app, "GET", "/scenarios/0123456789abcdef", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "POST", "/scenarios/0123456789abcdef/demos", Some(json!({"trajectory": [[0,0],[1,1],[2,2]]}))).await.0, StatusCode::NOT_FOUND);
    assert_eq!(raw(&app, "POST", "/scenarios", "{not json").await, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, "POST", "/scenarios", Some(json!({ "sample": { "task": "maze" } }))).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn training_generation_and_conflicts() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(Service::open(dir.path()).unwrap());
    let (status, job) = call(&app, "POST", "/jobs", Some(salit_job(1))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(job["kind"], "train-attention");
    let id = job["id"].as_str().unwrap().to_string();
    let (status, conflict) = call(&app, "POST", "/jobs", Some(salit_job(1))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(conflict["job"]["id"], job["id"]);

    let done = wait(&app, &id).await;
    assert_eq!(done["status"], "done", "{done}");
    assert_eq!(done["progress"], 1.0);
    let model = done["result"]["model"].as_str().unwrap().to_string();

    let (status, summary) = call(&app, "GET", &format!("/models/{model}/summary"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(summary["method"], "salit");
    assert_eq!(summary["schedule"].as_array().unwrap().len(), 50);
    assert_eq!(summary["variance"]["v"].as_array().unwrap().len(), 50);
    assert_eq!(summary["losses"]["attention"].as_array().unwrap().len(), 201);

    let (_, scenario) = call(&app, "POST", "/scenarios", Some(json!({ "sample": { "task": "docker", "regime": "test" } }))).await;
    let body = json!({ "query": scenario["query"] });
    let (status, first) = call(&app, "POST", &format!("/models/{model}/generate"), Some(body.clone())).await;
    assert_eq!(status, StatusCode::OK);
    let (_, second) = call(&app, "POST", &format!("/models/{model}/generate"), Some(body)).await;
    assert_eq!(first, second);
    for row in first["attention"].as_array().unwrap() {
        let s: f64 = row.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
    let by_id = json!({ "scenario": scenario["id"], "policy": { "type": "mean" } });
    assert_eq!(call(&app, "POST", &format!("/models/{model}/generate"), Some(by_id)).await.1, first);

    let (_, three) = call(&app, "POST", "/scenarios", Some(json!({ "sample": { "task": "docker-obstacle" } }))).await;
    let mismatch = json!({ "query": three["query"] });
    assert_eq!(call(&app, "POST", &format!("/models/{model}/generate"), Some(mismatch)).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, "POST", &format!("/models/{model}/generate"), Some(json!({}))).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, "POST", "/models/00ff/generate", Some(json!({ "query": scenario["query"] }))).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", "/models/00ff/summary", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", "/jobs/00ff", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "POST", "/jobs", Some(json!({ "kind": "train-flow" }))).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, "POST", "/jobs", Some(json!({ "kind": "sleep" }))).await.0, StatusCode::BAD_REQUEST);

    let model_file = dir.path().join("models").join(format!("{model}.json"));
    let before = std::fs::read(&model_file).unwrap();
    let (status, _) = call(&app, "POST", "/jobs", Some(salit_job(2))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(std::fs::read(&model_file).unwrap(), before);
}

#[tokio::test]
async fn failing_jobs_leave_the_service_healthy() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(Service::open(dir.path()).unwrap());
    let mut bad = salit_job(1);
    bad["config"]["attention_lr"] = json!(1e308);
    let (_, job) = call(&app, "POST", "/jobs", Some(bad.clone())).await;
    let failed = wait(&app, job["id"].as_str().unwrap()).await;
    assert_eq!(failed["status"], "failed");
    assert!(failed["error"].as_str().unwrap().contains("non-finite"));
    assert!(failed["result"].is_null());
    assert_eq!(call(&app, "GET", "/health", None).await.0, StatusCode::OK);
    let (status, retry) = call(&app, "POST", "/jobs", Some(bad)).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert!(retry["submitted"].as_u64().unwrap() > failed["submitted"].as_u64().unwrap());

    let bench = json!({ "kind": "benchmark", "task": "docker", "methods": ["straight-line", "oracle"], "trials": 5, "seed": 3 });
    let (_, job) = call(&app, "POST", "/jobs", Some(bench)).await;
    let done = wait(&app, job["id"].as_str().unwrap()).await;
    assert_eq!(done["status"], "done", "{done}");
    let report = done["result"]["report"].as_str().unwrap();
    let (status, report) = call(&app, "GET", &format!("/reports/{report}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(report["trials"], 5);
    assert_eq!(report["results"][1]["successes"], 5);
}

#[tokio::test]
async fn jobs_run_in_submission_order() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(Service::open(dir.path()).unwrap());
    let mut ids = Vec::new();
    for seed in 10..13 {
        let (_, job) = call(&app, "POST", "/jobs", Some(salit_job(seed))).await;
        ids.push(job["id"].as_str().unwrap().to_string());
    }
    let last = wait(&app, &ids[2]).await;
    assert_eq!(last["status"], "done");
    let (_, all) = call(&app, "GET", "/jobs", None).await;
    let seqs: Vec<u64> = all.as_array().unwrap().iter().map(|j| j["submitted"].as_u64().unwrap()).collect();
    assert_eq!(seqs, vec![0, 1, 2]);
    for id in &ids[..2] {
        assert_eq!(call(&app, "GET", &format!("/jobs/{id}"), None).await.1["status"], "done");
    }
}

#[tokio::test]
async fn restart_reproduces_reads_and_requeues_unfinished_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let (scenario_id, job_id, job, scenario) = {
        let app = router(Service::open(dir.path()).unwrap());
        let (_, s) = call(&app, "POST", "/scenarios", Some(json!({ "sample": { "task": "docker" } }))).await;
        let sid = s["id"].as_str().unwrap().to_string();
        let stroke = json!({ "trajectory": [[0.2, 0.2], [0.5, 0.3], [0.7, 0.8]] });
        call(&app, "POST", &format!("/scenarios/{sid}/demos"), Some(stroke)).await;
        let (_, job) = call(&app, "POST", "/jobs", Some(salit_job(5))).await;
        let id = job["id"].as_str().unwrap().to_string();
        let job = wait(&app, &id).await;
        let scenario = call(&app, "GET", &format!("/scenarios/{sid}"), None).await.1;
        (sid, id, job, scenario)
    };

    let app = router(Service::open(dir.path()).unwrap());
    assert_eq!(call(&app, "GET", &format!("/jobs/{job_id}"), None).await.1, job);
    assert_eq!(call(&app, "GET", &format!("/scenarios/{scenario_id}"), None).await.1, scenario);
    drop(app);

    let path = dir.path().join("jobs").join(format!("{job_id}.json"));
    let mut file: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    file["record"]["status"] = json!("running");
    file["record"]["result"] = Value::Null;
    file["record"]["progress"] = json!(0.4);
    std::fs::write(&path, file.to_string()).unwrap();

    let app = router(Service::open(dir.path()).unwrap());
    let rerun = wait(&app, &job_id).await;
    assert_eq!(rerun["status"], "done");
    assert_eq!(rerun["result"], job["result"]);
}
