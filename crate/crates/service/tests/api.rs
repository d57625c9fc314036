use axum::body::Body;
use axum::http::{Request, StatusCode};
use fitsearch_core::eval::{generate_workload, model_id_for, SyntheticWorkloadSpec};
use fitsearch_core::metrics::exact_adaptivity;
use fitsearch_core::search::ExactRescoring;
use fitsearch_core::{DatasetSketch, Registry, RegistryParams, SearchConfig, SearchResponse};
use fitsearch_service::{router, AppState, ServiceConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn workload(families: usize, per_family: usize) -> (RegistryParams, Vec<DatasetSketch>) {
    let spec = SyntheticWorkloadSpec {
        num_families: families,
        datasets_per_family: per_family,
        rows_per_dataset: 1000,
        ..Default::default()
    };
    let w = generate_workload(&spec).unwrap();
    let params = RegistryParams { bins_per_numeric_feature: spec.bins as u32, ..Default::default() };
    (params, w.sketches().unwrap())
}

fn state_for(params: RegistryParams, config: ServiceConfig) -> AppState {
    AppState::new(Registry::new(params).unwrap(), config)
}

async fn call(state: &AppState, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = router(state.clone()).oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

fn register_body(id: &str, sketch: &DatasetSketch) -> Value {
    json!({ "model_id": id, "source_accuracy": 0.9, "sketch": sketch })
}

#[tokio::test]
async fn health_and_empty_search() {
    let (params, sketches) = workload(1, 1);
    let state = state_for(params, ServiceConfig::default());
    let (s, v) = call(&state, "GET", "/healthz", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    let (s, v) = call(&state, "POST", "/search", Some(json!({ "sketch": sketches[0] }))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["results"], json!([]));
    assert_eq!(v["manifest_version"], 0);
}

#[tokio::test]
async fn register_get_list_and_errors() {
    let (params, sketches) = workload(3, 1);
    let state = state_for(params, ServiceConfig::default());
    for (i, s) in sketches.iter().enumerate() {
        let (status, v) = call(&state, "POST", "/models", Some(register_body(&format!("m{i}"), s))).await;
        assert_eq!(status, StatusCode::CREATED, "{v}");
        assert_eq!(v["manifest_version"], i as u64 + 1);
        assert_eq!(v["receipt"]["model_id"], format!("m{i}"));
    }
    let (s, v) = call(&state, "GET", "/models/m1", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["record"]["dataset_id"], sketches[1].dataset_id);
    assert_eq!(v["record"]["source_accuracy"], 0.9);

    let (s, v) = call(&state, "GET", "/models", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["models"].as_array().unwrap().len(), 3);
    assert_eq!(v["manifest_version"], 3);

    let (s, v) = call(&state, "POST", "/models", Some(register_body("m0", &sketches[0]))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"]["code"], "conflict");

    let (s, _) = call(&state, "GET", "/models/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, v) = call(&state, "DELETE", "/models/m2", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["manifest_version"], 4);
    let (s, _) = call(&state, "GET", "/models/m2", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn invalid_payloads_are_rejected() {
    let (params, sketches) = workload(1, 1);
    let state = state_for(params, ServiceConfig::default());

    let mut other_bins = sketches[0].clone();
    other_bins.bins_per_numeric_feature += 1;
    let (s, v) = call(&state, "POST", "/models", Some(register_body("a", &other_bins))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["code"], "params");

    let mut broken = sketches[0].clone();
    broken.total_rows += 1;
    let (s, _) = call(&state, "POST", "/models", Some(register_body("a", &broken))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let (s, _) = call(&state, "POST", "/models", Some(json!({ "model_id": "a" }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let mut body = register_body("a", &sketches[0]);
    body["source_accuracy"] = json!(1.2);
    let (s, _) = call(&state, "POST", "/models", Some(body)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let (s, _) = call(&state, "POST", "/search", Some(json!({ "sketch": sketches[0], "config": { "t1": 3.0 } }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let req = Request::builder()
        .method("POST")
        .uri("/search")
        .header("content-type", "text/csv")
        .body(Body::from("a,b\n1,2\n"))
        .unwrap();
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::UNSUPPORTED_MEDIA_TYPE);

    let (_, v) = call(&state, "GET", "/models", None).await;
    assert_eq!(v["models"], json!([]));
}

#[tokio::test]
async fn search_returns_oracle_top1_and_matches_library() {
    let (params, sketches) = workload(6, 2);
    let state = state_for(params, ServiceConfig::default());
    let (models, queries): (Vec<_>, Vec<_>) = sketches.iter().partition(|s| s.dataset_id.ends_with("ds000"));
    for s in &models {
        let (status, _) = call(&state, "POST", "/models", Some(register_body(&model_id_for(&s.dataset_id), s))).await;
        assert_eq!(status, StatusCode::CREATED);
    }
    let config = SearchConfig { exact_rescoring: ExactRescoring::On, ..Default::default() };
    for q in &queries {
        let (s, v) = call(&state, "POST", "/search", Some(json!({ "sketch": q, "config": config }))).await;
        assert_eq!(s, StatusCode::OK);
        let got: SearchResponse = serde_json::from_value(v).unwrap();
        let direct = SearchResponse::run(q, &state.registry().read().unwrap(), &config).unwrap();
        assert_eq!(got, direct);

        let best = models
            .iter()
            .map(|m| {
                let a = exact_adaptivity(m, q, &q.feature_ids(), config.t_js).unwrap().value;
                (a, model_id_for(&m.dataset_id))
            })
            .max_by(|a, b| a.0.total_cmp(&b.0).then_with(|| b.1.cmp(&a.1)))
            .unwrap();
        assert_eq!(got.results[0].model_id, best.1);
        assert_eq!(got.results[0].exact_score, Some(best.0));
    }
}

#[tokio::test]
async fn large_registration_is_deferred() {
    let (params, sketches) = workload(1, 1);
    let state = state_for(params, ServiceConfig { async_partitions: 1, ..Default::default() });
    let (s, v) = call(&state, "POST", "/models", Some(register_body("big", &sketches[0]))).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let poll = v["poll"].as_str().unwrap().to_string();
    let mut done = Value::Null;
    for _ in 0..500 {
        let (s, v) = call(&state, "GET", &poll, None).await;
        assert_eq!(s, StatusCode::OK);
        if v["status"] != "pending" {
            done = v;
            break;
        }
        tokio::time::sleep(std::time::Duration::from_millis(10)).await;
    }
    assert_eq!(done["status"], "done", "{done}");
    assert_eq!(done["receipt"]["model_id"], "big");
    let (s, _) = call(&state, "GET", "/models/big", None).await;
    assert_eq!(s, StatusCode::OK);
    let (s, _) = call(&state, "GET", "/jobs/999", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn registrations_are_persisted() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("reg.fits");
    let (params, sketches) = workload(2, 1);
    let state = state_for(params, ServiceConfig { registry_path: Some(path.clone()), ..Default::default() });
    for (i, s) in sketches.iter().enumerate() {
        call(&state, "POST", "/models", Some(register_body(&format!("m{i}"), s))).await;
    }
    let loaded = Registry::load(&path).unwrap();
    assert_eq!(loaded, *state.registry().read().unwrap());
    call(&state, "DELETE", "/models/m0", None).await;
    assert_eq!(Registry::load(&path).unwrap().len(), 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn searches_never_see_partial_registrations() {
    let (params, sketches) = workload(4, 2);
    let config = SearchConfig { t1: 0.0, t2: 0.0, ..Default::default() };
    let query = sketches[0].clone();

    // expected answer after each prefix of registrations
    let mut expected = Vec::new();
    let mut reg = Registry::new(params).unwrap();
    expected.push(SearchResponse::run(&query, &reg, &config).unwrap().results);
    for (i, s) in sketches.iter().enumerate() {
        reg.register(fitsearch_core::ModelRecord::new(format!("m{i}"), s.dataset_id.clone()), s.clone()).unwrap();
        expected.push(SearchResponse::run(&query, &reg, &config).unwrap().results);
    }

    let state = state_for(params, ServiceConfig::default());
    let writer = {
        let state = state.clone();
        let sketches = sketches.clone();
        tokio::spawn(async move {
            for (i, s) in sketches.iter().enumerate() {
                let (st, _) = call(&state, "POST", "/models", Some(register_body(&format!("m{i}"), s))).await;
                assert_eq!(st, StatusCode::CREATED);
            }
        })
    };
    let mut readers = Vec::new();
    for _ in 0..4 {
        let state = state.clone();
        let query = query.clone();
        let expected = expected.clone();
        readers.push(tokio::spawn(async move {
            for _ in 0..10 {
                let (_, v) = call(&state, "POST", "/search", Some(json!({ "sketch": query, "config": config }))).await;
                let got: SearchResponse = serde_json::from_value(v).unwrap();
                assert_eq!(got.results, expected[got.manifest_version as usize]);
            }
        }));
    }
    writer.await.unwrap();
    for r in readers {
        r.await.unwrap();
    }
}
