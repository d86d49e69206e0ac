use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use toothlabel::crops::CropRef;
use toothlabel::labeling::ConditionVocabulary;
use toothlabel::report::FdiTooth;
use toothlabel::study::{
    kappa_per_condition, AnnotationSet, ExpertImageDataset, ExpertItem, RaterGroup, Stratum,
    StratumCounts,
};
use toothlabel_service::store::{read_log, replay};
use toothlabel_service::{router, AnnotationStore, AppState, RaterToken, ServiceError};
use tower::ServiceExt;

struct Fixture {
    app: Router,
    dir: tempfile::TempDir,
    items: Vec<CropRef>,
}

fn dataset(n: usize) -> ExpertImageDataset {
    let teeth: Vec<FdiTooth> = FdiTooth::all().collect();
    let items = (0..n)
        .map(|i| {
            let crop = CropRef::new(format!("pano{:03}", i / 4), teeth[i % teeth.len()]);
            ExpertItem {
                crop_id: crop.crop_id(),
                image_id: crop.image_id,
                tooth: crop.tooth,
                condition: i / 6 + 1,
                stratum: [Stratum::Tp, Stratum::Fp, Stratum::Fn][(i / 2) % 3],
            }
        })
        .collect();
    ExpertImageDataset {
        items,
        seed: 1,
        per_condition: StratumCounts::default(),
    }
}

fn raters(n: usize) -> Vec<RaterToken> {
    (0..n)
        .map(|i| RaterToken {
            id: format!("expert{i}"),
            group: RaterGroup::Expert,
        })
        .chain([RaterToken {
            id: "student0".into(),
            group: RaterGroup::Student,
        }])
        .collect()
}

fn fixture(n_items: usize, n_raters: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(n_items);
    let crops = dir.path().join("more_raw");
    std::fs::create_dir_all(&crops).unwrap();
    for crop in data.crops().iter().take(3) {
        GrayImage::from_pixel(380, 380, Luma([90]))
            .save(crops.join(format!("{crop}.png")))
            .unwrap();
    }
    let vocabulary = ConditionVocabulary::dental_default();
    let store = AnnotationStore::open(&dir.path().join("log.jsonl"), vocabulary.len()).unwrap();
    let state = AppState::new(vocabulary, &data, &raters(n_raters), 9, crops, store).unwrap();
    Fixture {
        app: router(Arc::new(state), None, Some("http://localhost:5173")).unwrap(),
        dir,
        items: data.crops(),
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (
        status,
        resp.into_body()
            .collect()
            .await
            .unwrap()
            .to_bytes()
            .to_vec(),
    )
}

async fn call_json(
    app: &Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let (status, bytes) = call(app, method, uri, body).await;
    (
        status,
        serde_json::from_slice(&bytes).unwrap_or(Value::Null),
    )
}

#[tokio::test]
async fn conditions_are_stable_and_ordered() {
    let f = fixture(12, 2);
    let (status, first) = call(&f.app, "GET", "/conditions", None).await;
    assert_eq!(status, StatusCode::OK);
    let (_, second) = call(&f.app, "GET", "/conditions", None).await;
    assert_eq!(first, second);
    let v: Value = serde_json::from_slice(&first).unwrap();
    let list = v["conditions"].as_array().unwrap();
    assert_eq!(list.len(), 13);
    assert_eq!(list[0], json!({"index": 1, "name": "endodontic treatment"}));
}

#[tokio::test]
async fn empty_vocabulary_refuses_startup() {
    let dir = tempfile::tempdir().unwrap();
    let mut vocabulary = ConditionVocabulary::dental_default();
    vocabulary.conditions.clear();
    let result = AppState::new(
        vocabulary,
        &dataset(6),
        &raters(1),
        0,
        dir.path().into(),
        AnnotationStore::in_memory(0),
    );
    assert!(matches!(result, Err(ServiceError::EmptyVocabulary)));
}

#[tokio::test]
async fn submission_errors() {
    let f = fixture(12, 2);
    let crop = f.items[0].crop_id();
    let (status, v) = call_json(&f.app, "GET", "/tasks/next?rater=nobody", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["error"], "UnknownRater");
    let short = json!({"rater": "expert0", "crop_id": crop, "labels": vec![0; 12]});
    let (status, v) = call_json(&f.app, "POST", "/annotations", Some(short)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "BadVectorLength");
    let unknown = json!({"rater": "expert0", "crop_id": "nope_11", "labels": vec![0; 13]});
    let (status, v) = call_json(&f.app, "POST", "/annotations", Some(unknown)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["error"], "UnknownCrop");
    let stranger = json!({"rater": "nobody", "crop_id": crop, "labels": vec![0; 13]});
    let (_, v) = call_json(&f.app, "POST", "/annotations", Some(stranger)).await;
    assert_eq!(v["error"], "UnknownRater");
    assert!(read_log(&f.dir.path().join("log.jsonl"))
        .unwrap()
        .is_empty());
}

#[tokio::test]
async fn crops_are_served_unresized() {
    let f = fixture(12, 2);
    let id = f.items[0].crop_id();
    let (status, first) = call(&f.app, "GET", &format!("/crops/{id}.png"), None).await;
    assert_eq!(status, StatusCode::OK);
    let img = image::load_from_memory(&first).unwrap();
    assert_eq!((img.width(), img.height()), (380, 380));
    assert_eq!(img.color(), image::ColorType::L8);
    let (_, second) = call(&f.app, "GET", &format!("/crops/{id}.png"), None).await;
    assert_eq!(first, second);
    let (status, v) = call_json(&f.app, "GET", "/crops/unknown_11.png", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["error"], "UnknownCrop");
}

#[tokio::test]
async fn five_raters_round_trip_matches_offline_kappa() {
    let f = fixture(78, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let truth: Vec<Vec<u8>> = (0..78)
        .map(|_| {
            (0..13)
                .map(|c| rng.random_bool(if c == 12 { 0.0 } else { 0.3 }) as u8)
                .collect()
        })
        .collect();

    let (_, first) = call_json(&f.app, "GET", "/tasks/next?rater=expert0", None).await;
    assert_eq!(first["completed"], 0);
    assert_eq!(first["total"], 78);

    for r in 0..5 {
        let rater = format!("expert{r}");
        let mut served = Vec::new();
        loop {
            let (status, task) =
                call_json(&f.app, "GET", &format!("/tasks/next?rater={rater}"), None).await;
            assert_eq!(status, StatusCode::OK);
            if task["done"] == true {
                assert_eq!(task["completed"], 78);
                break;
            }
            let crop_id = task["crop_id"].as_str().unwrap().to_string();
            assert_eq!(task["image_url"], format!("/crops/{crop_id}.png"));
            let idx = f.items.iter().position(|c| c.crop_id() == crop_id).unwrap();
            let mut labels = truth[idx].clone();
            for v in labels.iter_mut().take(12) {
                if rng.random_bool(0.15) {
                    *v ^= 1;
                }
            }
            let (status, _) = call_json(
                &f.app,
                "POST",
                "/annotations",
                Some(json!({"rater": rater, "crop_id": crop_id, "labels": labels})),
            )
            .await;
            assert_eq!(status, StatusCode::OK);
            served.push(crop_id);
        }
        assert_eq!(served.len(), 78);
        let unique: std::collections::BTreeSet<_> = served.iter().collect();
        assert_eq!(unique.len(), 78);
    }

    let (_, agreement) = call_json(&f.app, "GET", "/agreement?group=expert", None).await;
    assert_eq!(agreement["complete_raters"].as_array().unwrap().len(), 5);
    let conditions = agreement["conditions"].as_array().unwrap();
    assert_eq!(conditions.len(), 13);

    let log = read_log(&f.dir.path().join("log.jsonl")).unwrap();
    assert_eq!(log.len(), 5 * 78);
    let offline: AnnotationSet = replay(&log, 13).unwrap();
    let experts = offline.raters(Some(RaterGroup::Expert));
    let expected = kappa_per_condition(&offline, &experts, &f.items).unwrap();
    for (served, want) in conditions.iter().zip(&expected) {
        match want.kappa {
            Some(k) => assert!((served["kappa"].as_f64().unwrap() - k).abs() < 1e-9),
            None => {
                assert!(served["kappa"].is_null());
                assert_eq!(served["degenerate"], true);
            }
        }
    }
    assert_eq!(conditions[12]["degenerate"], true);

    let crop = f.items[5].crop_id();
    let before = offline.get("expert0", &f.items[5]).unwrap().clone();
    let mut changed: Vec<u8> = (1..=13).map(|c| before.get(c) as u8).collect();
    changed[0] ^= 1;
    call_json(
        &f.app,
        "POST",
        "/annotations",
        Some(json!({"rater": "expert0", "crop_id": crop, "labels": changed})),
    )
    .await;
    let log = read_log(&f.dir.path().join("log.jsonl")).unwrap();
    assert_eq!(log.len(), 5 * 78 + 1);
    let current = replay(&log, 13).unwrap();
    assert_eq!(current.len(), 5 * 78);
    assert_ne!(current.get("expert0", &f.items[5]).unwrap(), &before);
    let (_, export) = call(&f.app, "GET", "/annotations", None).await;
    assert_eq!(
        AnnotationSet::from_jsonl(std::str::from_utf8(&export).unwrap(), 13).unwrap(),
        current
    );
}

#[tokio::test]
async fn agreement_needs_two_complete_raters() {
    let f = fixture(6, 2);
    for crop in &f.items {
        let body = json!({"rater": "expert0", "crop_id": crop.crop_id(), "labels": vec![1; 13]});
        call_json(&f.app, "POST", "/annotations", Some(body)).await;
    }
    let (_, v) = call_json(&f.app, "GET", "/agreement", None).await;
    assert_eq!(v["complete_raters"], json!(["expert0"]));
    assert_eq!(v["progress"]["expert1"], 0);
    assert!(v.get("conditions").is_none());
}
