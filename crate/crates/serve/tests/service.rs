mod common;

use std::collections::BTreeSet;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use gliopipe::lossmetric::labels::raw_labels;
use gliopipe::modality::Modality;
use gliopipe::models::inference::predict_methylation;
use gliopipe::render::{render_slice, Axis};
use gliopipe::trainer::evaluate::{evaluate_segmentation, RegionSelection};
use gliopipe::trainer::phantom::{generate_phantom, phantom_cohort, PhantomSpec};
use gliopipe::volio::{read_nifti, write_nifti};
use gliopipe_serve::api::{encode_png, router, AppState, ServeConfig};
use gliopipe_serve::bundle::ModelBundle;
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tower::ServiceExt;

use common::{bundle, models, multipart, study_fields, BOUNDARY};

fn app() -> Router {
    router(AppState::new(bundle(), ServeConfig::default()))
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn post(app: &Router, path: &str, fields: &[(&str, Vec<u8>)]) -> (StatusCode, Value) {
    let req = Request::post(path)
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(multipart(fields)))
        .unwrap();
    let (s, b) = send(app, req).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn get(app: &Router, path: &str) -> (StatusCode, Vec<u8>) {
    send(app, Request::get(path).body(Body::empty()).unwrap()).await
}

async fn get_json(app: &Router, path: &str) -> (StatusCode, Value) {
    let (s, b) = get(app, path).await;
    (s, serde_json::from_slice(&b).unwrap())
}

/// Polls until the job leaves pending/running.
async fn wait(app: &Router, id: &str) -> Value {
    for _ in 0..6000 {
        let (s, v) = get_json(app, &format!("/api/v1/jobs/{id}")).await;
        assert_eq!(s, StatusCode::OK);
        match v["status"].as_str().unwrap() {
            "pending" | "running" => tokio::time::sleep(Duration::from_millis(10)).await,
            _ => return v,
        }
    }
    panic!("job {id} never finished");
}

async fn submit(app: &Router, path: &str, fields: &[(&str, Vec<u8>)]) -> String {
    let (s, v) = post(app, path, fields).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");
    v["job_id"].as_str().unwrap().to_string()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn scripted_phantom_scenario() {
    let app = app();
    let case = generate_phantom(17, [128; 3], &Modality::ALL);
    let truth = case.labels.clone().unwrap();

    // segment: upload, poll, fetch mask
    let id = submit(&app, "/api/v1/segment", &study_fields(&case)).await;
    let job = wait(&app, &id).await;
    assert_eq!(job["status"], "done", "{job}");
    let (s, bytes) = get(&app, &format!("/api/v1/jobs/{id}/mask")).await;
    assert_eq!(s, StatusCode::OK);
    let mask = read_nifti(&bytes).unwrap();
    assert_eq!(mask.dims, [128; 3]);
    let values: BTreeSet<u8> = raw_labels(&mask).unwrap().into_iter().collect();
    assert!(values.is_subset(&[0, 1, 2, 4].into()), "{values:?}");
    let counts = &job["result"]["summary"];
    assert_eq!(counts["dims"], serde_json::json!([128, 128, 128]));

    // compare against the offline evaluator
    let (s, cmp) = post(&app, "/api/v1/compare", &[("job_id", id.clone().into_bytes()), ("truth", write_nifti(&truth))]).await;
    assert_eq!(s, StatusCode::OK, "{cmp}");
    let offline = evaluate_segmentation(&models().segmentation, std::slice::from_ref(&case), RegionSelection::EdemaPlusEnhancing).unwrap();
    let d = &offline.cases[0].dice;
    assert_eq!(cmp["dice"]["et"].as_f64().unwrap(), d.et);
    assert_eq!(cmp["dice"]["tc"].as_f64().unwrap(), d.tc);
    assert_eq!(cmp["dice"]["wt"].as_f64().unwrap(), d.wt);
    assert!(d.wt > 0.0, "model should find some tumor: {d:?}");

    // truth identical to the prediction scores 1.0 everywhere
    let (_, same) = post(&app, "/api/v1/compare", &[("job_id", id.clone().into_bytes()), ("truth", bytes.clone())]).await;
    for r in ["et", "tc", "wt"] {
        assert_eq!(same["dice"][r], 1.0);
    }
    // all-background truth against a nonempty prediction scores 0.0 on nonempty regions
    let empty = gliopipe::volio::Volume3D { data: vec![0.0; mask.len()], ..mask.clone() };
    let (_, zero) = post(&app, "/api/v1/compare", &[("job_id", id.clone().into_bytes()), ("truth", write_nifti(&empty))]).await;
    assert_eq!(zero["dice"]["wt"], 0.0);

    // slices
    let (s, last) = get(&app, &format!("/api/v1/jobs/{id}/slices/axial/127")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&last[1..4], b"PNG");
    assert_eq!(get(&app, &format!("/api/v1/jobs/{id}/slices/axial/128")).await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, &format!("/api/v1/jobs/{id}/slices/oblique/3")).await.0, StatusCode::NOT_FOUND);
    let mid = format!("/api/v1/jobs/{id}/slices/axial/64");
    let plain = get(&app, &format!("{mid}?channel=t1ce")).await.1;
    let alpha0 = get(&app, &format!("{mid}?channel=t1ce&overlay=0")).await.1;
    let alpha5 = get(&app, &format!("{mid}?channel=t1ce&overlay=0.5")).await.1;
    assert_eq!(plain, alpha0);
    assert_ne!(plain, alpha5);
    let direct = render_slice(&case.volumes[&Modality::T1ce], None, Axis::Axial, 64, 0.0).unwrap();
    assert_eq!(plain, encode_png(&direct));

    // methylation: full study, then T1ce alone
    let id = submit(&app, "/api/v1/methylation", &study_fields(&case)).await;
    let job = wait(&app, &id).await;
    assert_eq!(job["status"], "done", "{job}");
    let p = job["probability"].as_f64().unwrap();
    let direct = predict_methylation(&models().methylation, &case.volumes).unwrap();
    assert_eq!(p, direct.probability);
    assert_eq!(job["status_bit"].as_u64().unwrap() as u8, direct.status_bit as u8);
    let per = job["per_modality"].as_array().unwrap();
    assert_eq!(per.len(), 4);
    assert!(per.iter().all(|e| e["imputed"] == false));

    let t1ce = vec![("t1ce", write_nifti(&case.volumes[&Modality::T1ce]))];
    let id = submit(&app, "/api/v1/methylation", &t1ce).await;
    let job = wait(&app, &id).await;
    let per = job["per_modality"].as_array().unwrap();
    assert_eq!(per.iter().filter(|e| e["imputed"] == true).count(), 3);
    assert!((0.0..=1.0).contains(&job["probability"].as_f64().unwrap()));

    // compare on a methylation job conflicts
    let (s, v) = post(&app, "/api/v1/compare", &[("job_id", id.into_bytes()), ("truth", write_nifti(&truth))]).await;
    assert_eq!(s, StatusCode::CONFLICT, "{v}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn sixteen_concurrent_jobs_stay_isolated() {
    let app = router(AppState::new(bundle(), ServeConfig { workers: 4, ..ServeConfig::default() }));
    let cases = phantom_cohort(16, &PhantomSpec::cube(24), 300);
    let mut handles = Vec::new();
    for (i, case) in cases.iter().enumerate() {
        let app = app.clone();
        let fields = study_fields(case);
        let kind = if i % 2 == 0 { "segment" } else { "methylation" };
        handles.push(tokio::spawn(async move {
            let id = submit(&app, &format!("/api/v1/{kind}"), &fields).await;
            let job = wait(&app, &id).await;
            let slice = get(&app, &format!("/api/v1/jobs/{id}/slices/axial/12?channel=flair")).await.1;
            let mask = if kind == "segment" { Some(get(&app, &format!("/api/v1/jobs/{id}/mask")).await.1) } else { None };
            (id, job, slice, mask)
        }));
    }
    let mut ids = BTreeSet::new();
    let mut slices = BTreeSet::new();
    for (i, h) in handles.into_iter().enumerate() {
        let (id, job, slice, mask) = h.await.unwrap();
        let case = &cases[i];
        assert!(ids.insert(id));
        assert_eq!(job["status"], "done", "{job}");
        let direct = render_slice(&case.volumes[&Modality::Flair], None, Axis::Axial, 12, 0.0).unwrap();
        assert_eq!(slice, encode_png(&direct), "job {i} returned another study's slice");
        assert!(slices.insert(slice));
        match mask {
            Some(bytes) => {
                let expect = models().segmentation.segment(&case.volumes).unwrap();
                assert_eq!(read_nifti(&bytes).unwrap().data, expect.data, "job {i} mask");
            }
            None => {
                let expect = predict_methylation(&models().methylation, &case.volumes).unwrap();
                assert_eq!(job["probability"].as_f64().unwrap(), expect.probability, "job {i} probability");
            }
        }
    }
}

#[tokio::test]
async fn no_model_is_503() {
    let app = router(AppState::new(ModelBundle::default(), ServeConfig::default()));
    let case = generate_phantom(3, [16; 3], &Modality::ALL);
    let (s, v) = post(&app, "/api/v1/segment", &study_fields(&case)).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(v["error"], "ModelNotLoaded");
    assert_eq!(post(&app, "/api/v1/methylation", &study_fields(&case)).await.0, StatusCode::SERVICE_UNAVAILABLE);
    let (s, h) = get_json(&app, "/api/v1/health").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(h["segmentation_loaded"], false);
}

#[tokio::test]
async fn upload_errors() {
    let app = app();
    let case = generate_phantom(4, [16; 3], &Modality::ALL);
    let mut fields = study_fields(&case);
    fields[0].1[344] = b'x';
    let (s, v) = post(&app, "/api/v1/segment", &fields).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "UnsupportedFormat", "{v}");

    let three: Vec<_> = study_fields(&case).into_iter().filter(|(n, _)| *n != "t2").collect();
    let (s, v) = post(&app, "/api/v1/segment", &three).await;
    assert_eq!((s, v["error"].as_str().unwrap()), (StatusCode::BAD_REQUEST, "MissingModality"));

    let (s, v) = post(&app, "/api/v1/methylation", &[]).await;
    assert_eq!((s, v["error"].as_str().unwrap()), (StatusCode::BAD_REQUEST, "NoModalities"));

    let small = generate_phantom(5, [12; 3], &[Modality::T2]);
    let mut mixed = study_fields(&case);
    mixed[2] = ("t2", write_nifti(&small.volumes[&Modality::T2]));
    let (s, v) = post(&app, "/api/v1/segment", &mixed).await;
    assert_eq!((s, v["error"].as_str().unwrap()), (StatusCode::BAD_REQUEST, "DimMismatch"));

    assert_eq!(get(&app, "/api/v1/jobs/nope").await.0, StatusCode::NOT_FOUND);

    let id = submit(&app, "/api/v1/segment", &study_fields(&case)).await;
    wait(&app, &id).await;
    let (s, v) = post(&app, "/api/v1/compare", &[("job_id", id.clone().into_bytes()), ("truth", write_nifti(&small.volumes[&Modality::T2]))]).await;
    assert_eq!((s, v["error"].as_str().unwrap()), (StatusCode::BAD_REQUEST, "DimMismatch"));
    let bad = gliopipe::volio::Volume3D { data: vec![3.0; 16 * 16 * 16], ..case.labels.clone().unwrap() };
    let (s, v) = post(&app, "/api/v1/compare", &[("job_id", id.into_bytes()), ("truth", write_nifti(&bad))]).await;
    assert_eq!((s, v["error"].as_str().unwrap()), (StatusCode::BAD_REQUEST, "IllegalLabel"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn fuzzed_methylation_uploads_give_probabilities() {
    let app = app();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for k in 0..100u64 {
        let dims = [rng.random_range(6..=20), rng.random_range(6..=20), rng.random_range(4..=20)];
        let mods: Vec<Modality> = Modality::ALL.into_iter().filter(|_| rng.random::<bool>()).collect();
        let mods = if mods.is_empty() { vec![Modality::T1] } else { mods };
        let case = generate_phantom(k, dims, &mods);
        let id = submit(&app, "/api/v1/methylation", &study_fields(&case)).await;
        let job = wait(&app, &id).await;
        assert_eq!(job["status"], "done", "{job}");
        let p = job["probability"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&p), "{p}");
        assert_eq!(job["status_bit"].as_u64().unwrap() == 1, p >= 0.5);
    }
}
