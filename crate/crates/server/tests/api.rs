use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

use absalign_core::report::to_json;
use absalign_core::{EntropyBase, Session, SessionConfig};
use absalign_server::router;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

fn session() -> Arc<Session> {
    Arc::new(
        Session::load(&SessionConfig {
            dag_path: fixture("four_leaf.json"),
            instances_path: Some(fixture("accuracy10_instances.jsonl")),
            truth_path: Some(fixture("accuracy10_truth.jsonl")),
            ..Default::default()
        })
        .unwrap(),
    )
}

async fn get(app: &Router, uri: &str) -> (StatusCode, String) {
    let res = app
        .clone()
        .oneshot(Request::get(uri).body(Body::empty()).unwrap())
        .await
        .unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (status, body) = get(app, uri).await;
    (status, serde_json::from_str(&body).unwrap_or_else(|e| panic!("{uri}: {e}: {body}")))
}

#[tokio::test]
async fn dag_and_levels() {
    let app = router(session(), None);
    let (status, dag) = get_json(&app, "/api/dag").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(dag["node_count"], 7);
    assert_eq!(dag["edge_count"], 6);
    assert_eq!(dag["levels"]["2"], 2);
    let (_, levels) = get_json(&app, "/api/levels").await;
    assert_eq!(levels["levels"].as_array().unwrap().len(), 3);
    assert_eq!(levels["instances"], 10);
}

#[tokio::test]
async fn instance_pages_are_stable() {
    let app = router(session(), None);
    let (_, first) = get_json(&app, "/api/instances?limit=3&offset=2").await;
    assert_eq!(first["ids"], serde_json::json!(["i02", "i03", "i04"]));
    assert_eq!(first["total"], 10);
    let (_, again) = get_json(&app, "/api/instances?limit=3&offset=2").await;
    assert_eq!(first, again);
    let (_, tail) = get_json(&app, "/api/instances?offset=9").await;
    assert_eq!(tail["ids"], serde_json::json!(["i09"]));
}

#[tokio::test]
async fn instance_query_filters() {
    let app = router(session(), None);
    let (status, r) = get_json(&app, "/api/instances?query=top(level%3D2)%20%3D%3D%20B").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(r["ids"], serde_json::json!(["i09"]));
    assert_eq!(r["fraction"], 0.1);
    assert_eq!(r["query"], "top(level=2) == B");
    let (_, spread) = get_json(&app, "/api/instances?query=count(level%3D2,min_mass%3D0.1)%3E3&limit=50").await;
    assert_eq!(spread["matched"], 0);
}

#[tokio::test]
async fn bad_query_is_400_with_position() {
    let app = router(session(), None);
    let (status, r) = get_json(&app, "/api/instances?query=mass(Q)%20%3E%200.1").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(r["position"], 6);
    assert!(r["error"].as_str().unwrap().contains('Q'));
    let (status, r) = get_json(&app, "/api/instances?limit=0").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(r["param"], "limit");
}

#[tokio::test]
async fn weighted_matches_persisted_form() {
    let s = session();
    let app = router(s.clone(), None);
    let (status, body) = get(&app, "/api/instances/i03/weighted").await;
    assert_eq!(status, StatusCode::OK);
    let wd = s.weighted_by_id("i03").unwrap();
    assert_eq!(body, to_json(&wd.to_persisted(s.dag())));
    let (status, _) = get_json(&app, "/api/instances/zz/weighted").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn metric_bodies_equal_session_reports() {
    let s = session();
    let app = router(s.clone(), None);
    let (status, body) = get(&app, "/api/metrics/accuracy?from=1&to=2").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, to_json(&s.accuracy(1, 2, None).unwrap()));
    let v: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(v["value"], 0.75);

    let (_, body) = get(&app, "/api/metrics/uncertainty?from=1&to=2&group_by=2").await;
    assert_eq!(body, to_json(&s.uncertainty(1, 2, EntropyBase::Two, Some(2)).unwrap()));

    let (_, pref) = get_json(&app, "/api/metrics/preference?left=node:A&right=node:B&value_kind=aggregate").await;
    assert_eq!(pref["value"], 0.9);

    let (status, conf) = get_json(&app, "/api/metrics/concept-confusion?pairs=co-supported&top=3&pair_mode=raw&exclude_related=true").await;
    assert_eq!(status, StatusCode::OK);
    let pairs = conf["pairs"].as_array().unwrap();
    assert_eq!(pairs.len(), 3);
    assert!(pairs.windows(2).all(|w| w[0]["score"].as_f64() >= w[1]["score"].as_f64()));
}

#[tokio::test]
async fn malformed_metric_params_are_400() {
    let app = router(session(), None);
    for (uri, param) in [
        ("/api/metrics/accuracy?to=2", "from"),
        ("/api/metrics/accuracy?from=x&to=2", "from"),
        ("/api/metrics/uncertainty?from=1&to=2&base=10", "base"),
        ("/api/metrics/preference?left=sideways:A&right=node:B", "left"),
        ("/api/metrics/concept-confusion?pairs=bogus", "pairs"),
        ("/api/metrics/concept-confusion?exclude_related=maybe", "exclude_related"),
    ] {
        let (status, r) = get_json(&app, uri).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{uri}");
        assert_eq!(r["param"], param, "{uri}");
    }
    let (status, r) = get_json(&app, "/api/metrics/accuracy?from=1&to=9").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(r["error"].as_str().unwrap().contains('9'));
}

#[tokio::test]
async fn unknown_routes_are_404() {
    let app = router(session(), None);
    for uri in ["/api/nope", "/api/metrics/unknown", "/elsewhere"] {
        let (status, r) = get_json(&app, uri).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        assert!(r["error"].is_string());
    }
}

#[tokio::test]
async fn cors_headers_present() {
    let app = router(session(), None);
    let res = app
        .oneshot(
            Request::get("/api/dag")
                .header("origin", "http://localhost:5173")
                .body(Body::empty())
                .unwrap(),
        )
        .await
        .unwrap();
    assert_eq!(res.headers()["access-control-allow-origin"], "*");
}

#[tokio::test]
async fn static_bundle_served_at_root() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>explorer</html>").unwrap();
    let app = router(session(), Some(dir.path().to_path_buf()));
    let (status, body) = get(&app, "/").await;
    assert_eq!(status, StatusCode::OK);
    assert!(body.contains("explorer"));
    let (status, _) = get(&app, "/api/dag").await;
    assert_eq!(status, StatusCode::OK);
    let (status, _) = get(&app, "/api/unknown").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}
