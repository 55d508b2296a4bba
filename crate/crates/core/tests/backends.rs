mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::http::HeaderMap;
use axum::routing::post;
use axum::{Json, Router};
use common::*;
use serde_json::{json, Value};
use sgg_core::backends::wire::DetectRequest;
use sgg_core::backends::{
    request_digest, serve_mock, BackendError, EncodedImage, EndpointConfig, HttpTransport, MockScript, MockTransport,
    ModelClient, ServiceKind, TransportError, YesNo,
};
use sgg_core::pipeline::{Pipeline, PipelineConfig};
use tokio::net::TcpListener;

async fn spawn(router: Router) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router).await });
    format!("http://{addr}")
}

async fn spawn_mock(script: MockScript) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve_mock(Arc::new(script), listener));
    format!("http://{addr}")
}

fn http_client(url: &str, timeout_secs: f64, retries: u32) -> ModelClient {
    let endpoints = EndpointConfig {
        timeout_secs,
        ..EndpointConfig::all_at(url)
    };
    let t = HttpTransport::new(endpoints).unwrap().with_bearer_token(None);
    ModelClient::new(Arc::new(t), retries, Duration::from_millis(1))
}

fn scripted() -> (MockScript, EncodedImage) {
    let img = blank("street", 320, 200);
    let encoded = EncodedImage::from_rgb(&img.load_rgb().unwrap()).unwrap();
    let mut s = MockScript::new();
    // the detector answer is keyed on the exact request; the rest fall back
    s.insert(
        ServiceKind::Detect,
        &DetectRequest {
            image_png_b64: encoded.png_b64.clone(),
        },
        &detect_response(&[
            ("Man", [10.0, 20.0, 100.0, 190.0]),
            ("dog", [120.0, 120.0, 180.0, 190.0]),
            ("bike", [190.0, 40.0, 330.0, 190.0]),
        ]),
    );
    s.set_fallback(ServiceKind::Depth, &depth_response(2, 4, &[0.2, 0.2, 0.3, 0.9, 0.2, 0.25, 0.3, 0.9]))
        .set_fallback(ServiceKind::Caption, &text("the man in the red rectangle walks the dog"))
        .set_fallback(ServiceKind::Complete, &text("Step 2: <man, walking, dog>, <dog, next to, man>"))
        .set_fallback(ServiceKind::Vqa, &text("yes, it is"));
    (s, encoded)
}

#[tokio::test]
async fn mock_server_matches_in_process_mock() {
    let (script, _) = scripted();
    // the standalone server reads scripts from disk, so go through the file format
    let reloaded = MockScript::from_jsonl(&script.to_jsonl()).unwrap();
    let url = spawn_mock(reloaded).await;
    let image = blank("street", 320, 200);

    let cfg = PipelineConfig::default();
    let local = Pipeline::new(cfg.clone(), client(Arc::new(MockTransport::new(script)))).unwrap();
    let remote = Pipeline::new(cfg, http_client(&url, 10.0, 0)).unwrap();
    let a = local.run_batch(std::slice::from_ref(&image)).await.unwrap();
    let b = remote.run_batch(std::slice::from_ref(&image)).await.unwrap();
    assert_eq!(a.graphs_jsonl().unwrap(), b.graphs_jsonl().unwrap());
    assert_eq!(a.report.total_backend_calls, b.report.total_backend_calls);

    let g = a.outcomes[0].as_ref().unwrap().graph().unwrap().clone();
    assert_eq!(g.nodes[0].label, "man");
    // the bike box is clamped to the image width
    assert_eq!(g.nodes[2].bbox.x2, 320.0);
    assert!(!g.edges.is_empty());
}

#[tokio::test]
async fn mock_miss_reports_the_same_digest_over_http() {
    let url = spawn_mock(MockScript::new()).await;
    let body = json!({"prompt": "hello", "max_tokens": 8});
    let expected = request_digest(ServiceKind::Complete, &body);

    let local = client(Arc::new(MockTransport::new(MockScript::new())));
    let remote = http_client(&url, 10.0, 3);
    for c in [local, remote] {
        match c.complete("hello", 8).await {
            Err(BackendError::MockMiss { kind, digest }) => {
                assert_eq!(kind, ServiceKind::Complete);
                assert_eq!(digest, expected);
            }
            other => panic!("expected a mock miss, got {other:?}"),
        }
        // misses are not retried
        assert_eq!(c.telemetry()[&ServiceKind::Complete].attempts, 1);
    }
}

#[tokio::test]
async fn transient_failures_are_retried() {
    let failures = Arc::new(AtomicUsize::new(2));
    let left = Arc::clone(&failures);
    let t = FnTransport::new(move |_, _| {
        if left.load(Ordering::SeqCst) > 0 {
            left.fetch_sub(1, Ordering::SeqCst);
            return Err(TransportError::Status {
                status: 503,
                body: "warming up".into(),
            });
        }
        Ok(text("no."))
    });
    let c = ModelClient::new(t.clone(), 2, Duration::ZERO);
    let img = EncodedImage::from_rgb(&image::RgbImage::new(4, 4)).unwrap();
    let a = c.vqa(&img, "Is the cat on the mat?").await.unwrap();
    assert_eq!(a.answer, YesNo::No);
    let tel = c.telemetry()[&ServiceKind::Vqa];
    assert_eq!((tel.calls, tel.attempts, tel.retries, tel.failures), (1, 3, 2, 0));

    failures.store(5, Ordering::SeqCst);
    match c.vqa(&img, "Is the cat on the mat?").await {
        Err(BackendError::Unavailable { attempts, last, .. }) => {
            assert_eq!(attempts, 3);
            assert!(matches!(last, TransportError::Status { status: 503, .. }));
        }
        other => panic!("expected unavailable, got {other:?}"),
    }
}

#[tokio::test]
async fn client_errors_are_not_retried() {
    let t = FnTransport::new(|_, _| {
        Err(TransportError::Status {
            status: 422,
            body: "bad field".into(),
        })
    });
    let c = ModelClient::new(t.clone(), 3, Duration::ZERO);
    assert!(matches!(c.complete("x", 4).await, Err(BackendError::Protocol { .. })));
    assert_eq!(t.calls(ServiceKind::Complete), 1);

    let t = FnTransport::new(|_, _| {
        Err(TransportError::Status {
            status: 429,
            body: "slow down".into(),
        })
    });
    let c = ModelClient::new(t.clone(), 3, Duration::ZERO);
    assert!(matches!(c.complete("x", 4).await, Err(BackendError::Unavailable { attempts: 4, .. })));
}

#[tokio::test]
async fn slow_backend_times_out() {
    let router = Router::new().route(
        "/{kind}",
        post(|| async {
            tokio::time::sleep(Duration::from_secs(3)).await;
            Json(json!({"text": "late"}))
        }),
    );
    let url = spawn(router).await;
    let c = http_client(&url, 0.2, 1);
    let started = std::time::Instant::now();
    match c.complete("hi", 4).await {
        Err(BackendError::Unavailable { attempts, last, .. }) => {
            assert_eq!(attempts, 2);
            assert!(matches!(last, TransportError::Timeout(_)), "{last:?}");
        }
        other => panic!("expected a timeout, got {other:?}"),
    }
    assert!(started.elapsed() < Duration::from_secs(2));
}

#[tokio::test]
async fn unreachable_backend_is_unavailable() {
    // bind then drop to get a port nobody listens on
    let port = TcpListener::bind("127.0.0.1:0").await.unwrap().local_addr().unwrap().port();
    let c = http_client(&format!("http://127.0.0.1:{port}"), 2.0, 1);
    match c.complete("hi", 4).await {
        Err(BackendError::Unavailable { last: TransportError::Connect(_), attempts: 2, .. }) => {}
        other => panic!("expected a connection failure, got {other:?}"),
    }
}

#[tokio::test]
async fn bearer_token_is_sent() {
    let router = Router::new().route(
        "/{kind}",
        post(|headers: HeaderMap| async move {
            let auth = headers.get("authorization").and_then(|v| v.to_str().ok()).unwrap_or("").to_string();
            Json(json!({ "text": auth }))
        }),
    );
    let url = spawn(router).await;
    let t = HttpTransport::new(EndpointConfig::all_at(&url))
        .unwrap()
        .with_bearer_token(Some("s3cret".into()));
    let c = ModelClient::new(Arc::new(t), 0, Duration::ZERO);
    assert_eq!(c.complete("hi", 4).await.unwrap(), "Bearer s3cret");
}

#[tokio::test]
async fn out_of_contract_responses_are_protocol_errors() {
    let img = EncodedImage::from_rgb(&image::RgbImage::new(50, 40)).unwrap();
    let cases: Vec<(ServiceKind, Value)> = vec![
        (ServiceKind::Detect, json!({"objects": [{"label": "cat", "bbox": [0, 0, 10, 10], "score": 1.5}]})),
        (ServiceKind::Detect, json!({"objects": [{"label": "cat", "bbox": [10, 0, 5, 10]}]})),
        (ServiceKind::Detect, json!({"objects": [{"label": "cat", "bbox": [60, 50, 90, 70]}]})),
        (ServiceKind::Detect, json!({"objects": [{"label": "  ", "bbox": [0, 0, 10, 10]}]})),
        (ServiceKind::Detect, json!({"boxes": []})),
        (ServiceKind::Depth, json!({"rows": 2, "cols": 2, "values": [0.1, 0.2, 0.3]})),
        (ServiceKind::Depth, json!({"rows": 1, "cols": 2, "values": [0.1, 1.2]})),
        (ServiceKind::Depth, json!({"rows": 1, "cols": 64, "values": vec![0.5; 64]})),
        (ServiceKind::Complete, json!({"text": "   "})),
    ];
    for (kind, resp) in cases {
        let r = resp.clone();
        let c = client(FnTransport::new(move |_, _| Ok(r.clone())));
        let err = match kind {
            ServiceKind::Detect => c.detect(&img).await.err(),
            ServiceKind::Depth => c.depth(&img, 32).await.err(),
            _ => c.complete("p", 4).await.err(),
        };
        assert!(matches!(err, Some(BackendError::Protocol { .. })), "{kind} {resp}: {err:?}");
    }
}

#[tokio::test]
async fn detections_are_normalized() {
    let img = EncodedImage::from_rgb(&image::RgbImage::new(50, 40)).unwrap();
    let c = client(FnTransport::new(|_, _| {
        Ok(json!({"objects": [
            {"label": "Traffic   Light", "bbox": [-5, -5, 20, 30], "score": 0.9},
            {"label": "cat", "bbox": [10, 10, 60, 45]}
        ]}))
    }));
    let objs = c.detect(&img).await.unwrap();
    assert_eq!(objs[0].label, "traffic light");
    assert_eq!(<[f64; 4]>::from(objs[0].bbox), [0.0, 0.0, 20.0, 30.0]);
    assert_eq!(<[f64; 4]>::from(objs[1].bbox), [10.0, 10.0, 50.0, 40.0]);
    assert_eq!((objs[0].node_id, objs[1].node_id), (0, 1));
    assert_eq!(objs[1].score, 1.0);
}

#[tokio::test]
async fn vqa_answers() {
    let img = EncodedImage::from_rgb(&image::RgbImage::new(4, 4)).unwrap();
    for (raw, want) in [("Yes.", Some(YesNo::Yes)), ("no, it is not", Some(YesNo::No)), ("maybe", None), ("yes and no", Some(YesNo::Yes))] {
        let c = client(FnTransport::new(move |_, _| Ok(text(raw))));
        match (c.vqa(&img, "Is it?").await, want) {
            (Ok(a), Some(w)) => assert_eq!(a.answer, w, "{raw}"),
            (Err(BackendError::AmbiguousAnswer { raw: r }), None) => assert_eq!(r, raw),
            (other, _) => panic!("{raw}: {other:?}"),
        }
    }
    let c = client(FnTransport::new(|_, _| Ok(text("yes"))));
    assert!(matches!(c.vqa(&img, " ").await, Err(BackendError::BadRequest { .. })));
    assert!(matches!(c.depth(&img, 8).await, Err(BackendError::BadRequest { .. })));
}
