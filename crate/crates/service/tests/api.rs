use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use longiseg_core::io::{write_labels, write_mask, write_volume};
use longiseg_core::preprocess::AffineBackend;
use longiseg_core::synth::{generate_patient, Split, SynthConfig};
use longiseg_core::{InputScheme, LabelVolume, Lesion, Plane, Volume};
use longiseg_model::{BackboneConfig, Network};
use longiseg_service::rle::decode;
use longiseg_service::*;
use longiseg_train::{synthetic_split, NetworkSegmenter, PatientVolumes};
use serde_json::{json, Value};
use tower::ServiceExt;

const BOUNDARY: &str = "longiseg-test-boundary";

fn engine(dir: &Path) -> Engine {
    let net = Network::<f32>::new(BackboneConfig::tiny(11)).unwrap();
    let seg = NetworkSegmenter::new(net, InputScheme::Proposed);
    let mut config = ServiceConfig::new(dir);
    config.output_shape = [16, 16, 16];
    Engine::new(config, Arc::new(seg), "tiny-11").unwrap()
}

fn patient() -> PatientVolumes<f32> {
    let cfg = SynthConfig {
        shape: [32, 32, 32],
        splits: [1, 0, 0],
        ..SynthConfig::default()
    };
    synthetic_split(&cfg, Split::Train, &AffineBackend, [16, 16, 16]).unwrap().remove(0)
}

fn multipart(parts: &[(&str, &Path)]) -> Body {
    let mut body = Vec::new();
    for (field, path) in parts {
        let name = path.file_name().unwrap().to_str().unwrap();
        body.extend(
            format!(
                "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"{field}\"; filename=\"{name}\"\r\n\
                 Content-Type: application/octet-stream\r\n\r\n"
            )
            .bytes(),
        );
        body.extend(std::fs::read(path).unwrap());
        body.extend(b"\r\n");
    }
    body.extend(format!("--{BOUNDARY}--\r\n").bytes());
    Body::from(body)
}

fn write_patient(dir: &Path, p: &PatientVolumes<f32>, with_gt: bool) -> Vec<(&'static str, std::path::PathBuf)> {
    let mut parts = vec![
        ("reference", dir.join("ref.nii.gz")),
        ("reference_seg", dir.join("ref_seg.nii.gz")),
        ("target", dir.join("tgt.nii")),
    ];
    write_volume(&parts[0].1, &Volume::new(p.reference.clone()).unwrap()).unwrap();
    write_labels(&parts[1].1, &p.reference_seg).unwrap();
    write_volume(&parts[2].1, &Volume::new(p.target.clone()).unwrap()).unwrap();
    if with_gt {
        parts.push(("target_seg", dir.join("tgt_seg.nii.gz")));
        write_labels(&parts[3].1, p.target_seg.as_ref().unwrap()).unwrap();
    }
    parts
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, bytes)
}

async fn send_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let (status, _, bytes) = send(app, req.body(body).unwrap()).await;
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

async fn create(app: &Router, parts: &[(&str, std::path::PathBuf)]) -> (StatusCode, Value) {
    let refs: Vec<(&str, &Path)> = parts.iter().map(|(f, p)| (*f, p.as_path())).collect();
    let req = Request::post("/sessions")
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(multipart(&refs))
        .unwrap();
    let (status, _, bytes) = send(app, req).await;
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn stroke(plane: &str, slice: usize, cls: u8, polarity: i8, polyline: Value, radius: usize) -> Value {
    json!({"plane": plane, "slice_index": slice, "class": cls, "polarity": polarity, "polyline": polyline, "brush_radius": radius})
}

#[tokio::test]
async fn full_session_lifecycle() {
    let data = tempfile::tempdir().unwrap();
    let files = tempfile::tempdir().unwrap();
    let p = patient();
    let app = router(AppState::new(engine(data.path())));

    let (status, health) = send_json(&app, "GET", "/health", None).await;
    assert_eq!((status, health["model_ref"].as_str()), (StatusCode::OK, Some("tiny-11")));

    let (status, manifest) = create(&app, &write_patient(files.path(), &p, true)).await;
    assert_eq!(status, StatusCode::CREATED, "{manifest}");
    let id = manifest["id"].as_str().unwrap().to_string();
    assert_eq!(manifest["rounds"], json!([]));
    assert_eq!(manifest["shape"], json!([16, 16, 16]));
    assert_eq!(manifest["has_ground_truth"], json!(true));

    let (status, list) = send_json(&app, "GET", "/sessions", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(list.as_array().unwrap().len(), 1);

    // refinement before the initial round is a conflict
    let body = json!({"base_round": 0, "strokes": []});
    let (status, _) = send_json(&app, "POST", &format!("/sessions/{id}/rounds"), Some(body)).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (status, r1) = send_json(&app, "POST", &format!("/sessions/{id}/initial"), None).await;
    assert_eq!(status, StatusCode::OK, "{r1}");
    assert_eq!(r1["index"], 1);
    assert!(r1["metrics"]["ggo"]["dsc"].is_number());
    let (status, _) = send_json(&app, "POST", &format!("/sessions/{id}/initial"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let strokes = json!([
        stroke("axial", 8, 1, 1, json!([[2, 2], [10, 9]]), 1),
        stroke("coronal", 3, 2, -1, json!([[5, 5]]), 0),
    ]);
    let (status, r2) = send_json(
        &app,
        "POST",
        &format!("/sessions/{id}/rounds"),
        Some(json!({"base_round": 1, "strokes": strokes})),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{r2}");
    assert_eq!(r2["index"], 2);
    assert!(r2["edit_voxels"].as_u64().unwrap() > 9);

    // a stale base round loses
    let (status, err) = send_json(
        &app,
        "POST",
        &format!("/sessions/{id}/rounds"),
        Some(json!({"base_round": 1, "strokes": []})),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert!(err["error"].as_str().unwrap().contains("stale"));

    // out-of-bounds strokes are rejected by index
    let bad = json!([stroke("axial", 0, 1, 1, json!([[0, 0]]), 0), stroke("sagittal", 2, 1, 1, json!([[3, 16]]), 0)]);
    let (status, err) = send_json(
        &app,
        "POST",
        &format!("/sessions/{id}/rounds"),
        Some(json!({"base_round": 2, "strokes": bad})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(err["error"].as_str().unwrap().starts_with("stroke 1:"), "{err}");

    let (status, round) = send_json(&app, "GET", &format!("/sessions/{id}/rounds/2"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(round["strokes"].as_array().unwrap().len(), 2);
    let (status, _) = send_json(&app, "GET", &format!("/sessions/{id}/rounds/3"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    // both mask encodings agree
    let (status, rle) = send_json(&app, "GET", &format!("/sessions/{id}/rounds/2/mask"), None).await;
    assert_eq!(status, StatusCode::OK);
    let from_rle = decode(&serde_json::from_value(rle).unwrap()).unwrap();
    let (status, headers, raw) = send(
        &app,
        Request::get(format!("/sessions/{id}/rounds/2/mask?format=raw")).body(Body::empty()).unwrap(),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers["x-shape"], "16,16,16");
    assert_eq!(from_rle.as_slice(), raw.as_slice());

    let (status, headers, prob) = send(
        &app,
        Request::get(format!("/sessions/{id}/rounds/1/prob")).body(Body::empty()).unwrap(),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers["x-shape"], "3,16,16,16");
    assert_eq!(prob.len(), 3 * 16 * 16 * 16 * 4);

    let (status, headers, slice) = send(
        &app,
        Request::get(format!("/sessions/{id}/volumes/target/coronal/4")).body(Body::empty()).unwrap(),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers["x-shape"], "16,16");
    let expected: Vec<u8> = (0..16)
        .flat_map(|r| (0..16).map(move |c| [4, r, c]))
        .map(|v| (p.target[v].clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    assert_eq!(slice, expected);
    let (status, _) = send_json(&app, "GET", &format!("/sessions/{id}/volumes/target/oblique/4"), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, report) = send_json(&app, "POST", &format!("/sessions/{id}/replay"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(report, json!({"rounds": 2, "bit_exact": true, "mismatched": []}));

    let (status, _) = send_json(&app, "DELETE", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (status, _) = send_json(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (_, list) = send_json(&app, "GET", "/sessions", None).await;
    assert_eq!(list, json!([]));
}

#[tokio::test]
async fn concurrent_submissions_have_one_winner() {
    let data = tempfile::tempdir().unwrap();
    let files = tempfile::tempdir().unwrap();
    let app = router(AppState::new(engine(data.path())));
    let (_, manifest) = create(&app, &write_patient(files.path(), &patient(), false)).await;
    let id = manifest["id"].as_str().unwrap().to_string();
    assert_eq!(manifest["has_ground_truth"], json!(false));
    send_json(&app, "POST", &format!("/sessions/{id}/initial"), None).await;

    let submit = |polarity: i8| {
        let app = app.clone();
        let uri = format!("/sessions/{id}/rounds");
        let body = json!({"base_round": 1, "strokes": [stroke("axial", 5, 1, polarity, json!([[1, 1], [6, 6]]), 0)]});
        tokio::spawn(async move { send_json(&app, "POST", &uri, Some(body)).await.0 })
    };
    let (a, b) = (submit(1), submit(-1));
    let mut statuses = [a.await.unwrap(), b.await.unwrap()];
    statuses.sort();
    assert_eq!(statuses, [StatusCode::OK, StatusCode::CONFLICT]);
    let (_, m) = send_json(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(m["rounds"].as_array().unwrap().len(), 2);
    assert!(m["rounds"][1].get("metrics").is_none());
}

#[tokio::test]
async fn upload_errors() {
    let data = tempfile::tempdir().unwrap();
    let files = tempfile::tempdir().unwrap();
    let app = router(AppState::new(engine(data.path())));
    let parts = write_patient(files.path(), &patient(), false);

    let (status, err) = create(&app, &parts[..2]).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(err["error"].as_str().unwrap().contains("`target`"));

    // volumes on different grids
    let small = files.path().join("small.nii.gz");
    write_volume(&small, &Volume::new(longiseg_core::Grid::filled([8, 16, 16], 0.5f32)).unwrap()).unwrap();
    let mut mismatched = parts.clone();
    mismatched[2].1 = small;
    let (status, _) = create(&app, &mismatched).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let mut one_lung = parts.clone();
    one_lung.push(("reference_lung", files.path().join("ref_seg.nii.gz")));
    let (status, err) = create(&app, &one_lung).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(err["error"].as_str().unwrap().contains("both"));

    let (status, _) = send_json(&app, "GET", "/sessions/../etc", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    // nothing half-written is left behind
    let (_, list) = send_json(&app, "GET", "/sessions", None).await;
    assert_eq!(list, json!([]));
}

#[tokio::test]
async fn raw_scans_are_preprocessed_on_upload() {
    let data = tempfile::tempdir().unwrap();
    let files = tempfile::tempdir().unwrap();
    let app = router(AppState::new(engine(data.path())));
    let cfg = SynthConfig {
        shape: [24, 24, 24],
        ..SynthConfig::default()
    };
    let raw = generate_patient::<f32>(&cfg, 3).unwrap().into_loaded().unwrap();
    let d = files.path();
    write_volume(&d.join("r.nii.gz"), &Volume::new(raw.reference.raw.clone()).unwrap()).unwrap();
    write_volume(&d.join("t.nii.gz"), &Volume::new(raw.target.raw.clone()).unwrap()).unwrap();
    write_labels(&d.join("rs.nii.gz"), &raw.reference_seg).unwrap();
    write_mask(&d.join("rl.nii.gz"), &raw.reference.lung_mask.map(|&b| u8::from(b))).unwrap();
    write_mask(&d.join("tl.nii.gz"), &raw.target.lung_mask.map(|&b| u8::from(b))).unwrap();
    let parts = vec![
        ("reference", d.join("r.nii.gz")),
        ("target", d.join("t.nii.gz")),
        ("reference_seg", d.join("rs.nii.gz")),
        ("reference_lung", d.join("rl.nii.gz")),
        ("target_lung", d.join("tl.nii.gz")),
    ];
    let (status, m) = create(&app, &parts).await;
    assert_eq!(status, StatusCode::CREATED, "{m}");
    assert_eq!(m["preprocessed"], json!(true));
    assert_eq!(m["shape"], json!([16, 16, 16]));
    let uploads = data.path().join(m["id"].as_str().unwrap()).join("uploads");
    assert!(uploads.join("reference_lung.nii.gz").is_file());
}

fn fresh_session(engine: &Engine, p: &PatientVolumes<f32>) -> String {
    let inputs = SessionInputs {
        reference: Volume::new(p.reference.clone()).unwrap(),
        reference_seg: p.reference_seg.clone(),
        target: Volume::new(p.target.clone()).unwrap(),
        target_seg: p.target_seg.clone(),
        lungs: None,
    };
    engine.create(inputs, &[]).unwrap().id
}

fn typed(plane: Plane, slice: usize, cls: u8, polarity: i8, polyline: Vec<[usize; 2]>, radius: usize) -> Stroke {
    Stroke {
        plane,
        slice_index: slice,
        cls,
        polarity,
        polyline,
        brush_radius: radius,
    }
}

#[test]
fn edits_accumulate_across_rounds() {
    let data = tempfile::tempdir().unwrap();
    let engine = engine(data.path());
    let p = patient();
    let id = fresh_session(&engine, &p);
    engine.run_initial(&id).unwrap();

    // no strokes: a new round, accumulated edits unchanged
    let r = engine.submit(&id, 1, Vec::new()).unwrap();
    assert_eq!((r.index, r.edit_voxels), (2, 0));
    assert!(engine.round_edits(&id, 2).unwrap().is_zero());

    let line = vec![[3, 3], [3, 12]];
    engine
        .submit(&id, 2, vec![typed(Plane::Axial, 7, 1, 1, line.clone(), 0)])
        .unwrap();
    let e3 = engine.round_edits(&id, 3).unwrap();
    let on_stroke: Vec<[usize; 3]> = (3..=12).map(|c| [3, c, 7]).collect();
    assert_eq!(e3.nonzero_count(), on_stroke.len());
    assert!(on_stroke.iter().all(|&v| e3.channel(Lesion::Ggo)[v] == 1));

    // the opposite polarity on the same voxels flips the sign
    engine.submit(&id, 3, vec![typed(Plane::Axial, 7, 1, -1, line, 0)]).unwrap();
    let e4 = engine.round_edits(&id, 4).unwrap();
    assert!(on_stroke.iter().all(|&v| e4.channel(Lesion::Ggo)[v] == -1));
    assert_eq!(e4.nonzero_count(), on_stroke.len());

    // a stroke elsewhere leaves the earlier edits in place
    engine
        .submit(&id, 4, vec![typed(Plane::Sagittal, 2, 2, 1, vec![[0, 0]], 0)])
        .unwrap();
    let e5 = engine.round_edits(&id, 5).unwrap();
    assert_eq!(e5.channel(Lesion::Cons)[[0, 2, 0]], 1);
    assert!(on_stroke.iter().all(|&v| e5.channel(Lesion::Ggo)[v] == -1));

    let report = engine.verify_replay(&id).unwrap();
    assert!(report.bit_exact, "{report:?}");
    assert_eq!(report.rounds, 5);
}

#[test]
fn sessions_survive_restart_and_detect_tampering() {
    let data = tempfile::tempdir().unwrap();
    let p = patient();
    let id = {
        let engine = engine(data.path());
        let id = fresh_session(&engine, &p);
        engine.run_initial(&id).unwrap();
        engine
            .submit(&id, 1, vec![typed(Plane::Coronal, 5, 2, 1, vec![[2, 2], [9, 4], [9, 12]], 2)])
            .unwrap();
        id
    };
    let engine = engine(data.path());
    assert_eq!(engine.list().unwrap().len(), 1);
    let replayed = engine.replay(&id).unwrap();
    assert_eq!(replayed[1], engine.round_labels(&id, 2).unwrap());
    assert!(engine.verify_replay(&id).unwrap().bit_exact);

    // overwrite the stored round-2 labels: replay must notice
    let path = data.path().join(&id).join("rounds/002/labels.raw");
    let stored = engine.round_labels(&id, 2).unwrap();
    let flipped: Vec<u8> = stored.as_slice().iter().map(|&l| (l + 1) % 3).collect();
    let tampered = LabelVolume::new(longiseg_core::Grid::from_vec(stored.shape(), flipped).unwrap()).unwrap();
    write_labels(&path, &tampered).unwrap();
    let report = engine.verify_replay(&id).unwrap();
    assert!(!report.bit_exact);
    assert_eq!(report.mismatched, vec![2]);
}

#[test]
fn per_slice_stroke_cap() {
    let data = tempfile::tempdir().unwrap();
    let mut config = ServiceConfig::new(data.path());
    config.edit_cap = 2;
    let net = Network::<f32>::new(BackboneConfig::tiny(0)).unwrap();
    let engine = Engine::new(config, Arc::new(NetworkSegmenter::new(net, InputScheme::Proposed)), "t").unwrap();
    let id = fresh_session(&engine, &patient());
    engine.run_initial(&id).unwrap();
    let s = typed(Plane::Axial, 1, 1, 1, vec![[0, 0]], 0);
    let err = engine.submit(&id, 1, vec![s.clone(), s.clone(), s]).unwrap_err();
    assert!(err.to_string().starts_with("stroke 2:"), "{err}");
}
