//! The HTTP embedding API against an in-process service that serves the
//! synthetic oracle.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use descry_core::ablation::predict_studies;
use descry_core::embedding::{CachedBackend, EmbeddingBackend, HttpBackend, ImageRef, SyntheticBackend};
use descry_core::fixture::{generate_fixture, FixtureSpec};
use descry_core::{Catalog, InferenceConfig};
use serde_json::{json, Value};

struct Service {
    url: String,
    requests: Arc<AtomicUsize>,
}

fn serve(backend: SyntheticBackend) -> Service {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let requests = Arc::new(AtomicUsize::new(0));
    let counter = requests.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { break };
            counter.fetch_add(1, Ordering::SeqCst);
            answer(stream, &backend);
        }
    });
    Service { url, requests }
}

fn answer(stream: TcpStream, backend: &SyntheticBackend) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut request_line = String::new();
    reader.read_line(&mut request_line).unwrap();
    let mut length = 0;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap() == 0 || line.trim().is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                length = v.trim().parse().unwrap();
            }
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).unwrap();

    let (status, reply) = if !request_line.starts_with("POST /v1/embed ") {
        (404, json!({"error": "not found"}))
    } else {
        let req: Value = serde_json::from_slice(&body).unwrap();
        let items: Vec<&str> = req["items"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
        let vectors: Result<Vec<Vec<f32>>, String> = items
            .iter()
            .map(|item| {
                let e = match req["kind"].as_str() {
                    Some("text") => backend.embed_text(item),
                    Some("image") => backend.embed_image(&ImageRef::from_path(item)),
                    _ => return Err("bad kind".to_string()),
                };
                e.map(|e| e.into_inner()).map_err(|e| e.to_string())
            })
            .collect();
        match vectors {
            Ok(v) => (200, json!({"dimension": backend.dimension(), "embeddings": v})),
            Err(e) => (422, json!({"error": e})),
        }
    };
    let reply = reply.to_string();
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
        reply.len()
    );
}

#[test]
fn served_vectors_match_the_local_oracle() {
    let local = SyntheticBackend::new(3, 64);
    let service = serve(local.clone());
    let remote = HttpBackend::new(&service.url);
    let prompts = ["There is fluid.", "There is no fluid.", "Opacity"];
    let served = remote.embed_texts(&prompts).unwrap();
    assert_eq!(remote.dimension(), Some(64));
    for (p, e) in prompts.iter().zip(&served) {
        let want = local.embed_text(p).unwrap();
        for (a, b) in e.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }
    let image = ImageRef::from_path("p1/s1/view1_frontal.jpg");
    let e = remote.embed_image(&image).unwrap();
    assert_eq!(e.as_slice(), local.embed_image(&image).unwrap().as_slice());

    let misrouted = HttpBackend::new(&format!("{}/elsewhere", service.url));
    let err = misrouted.embed_text("There is fluid.").unwrap_err();
    assert!(matches!(&err, descry_core::EmbeddingError::Service { status: 404, message } if message == "not found"), "{err}");
    assert!(err.is_transport());
}

#[test]
fn remote_diagnosis_matches_local_and_caches_keys() {
    let fixture = generate_fixture(
        &Catalog::refined(),
        FixtureSpec {
            studies: 12,
            dimension: 64,
            ..FixtureSpec::default()
        },
    )
    .unwrap();
    let local = fixture.backend();
    let service = serve(local.clone());
    let remote = CachedBackend::new(HttpBackend::new(&service.url));
    let config = InferenceConfig::default();

    let via_http = predict_studies(&fixture.table, &fixture.catalog, config, &remote).unwrap();
    let direct = predict_studies(&fixture.table, &fixture.catalog, config, &local).unwrap();
    for (a, b) in via_http.iter().zip(&direct) {
        assert_eq!(a.study_id, b.study_id);
        for (pa, pb) in a.pathologies.iter().zip(&b.pathologies) {
            assert!((pa.probability - pb.probability).abs() <= 1e-6);
        }
    }

    let after_first = service.requests.load(Ordering::SeqCst);
    let again = predict_studies(&fixture.table, &fixture.catalog, config, &remote).unwrap();
    assert_eq!(again, via_http);
    assert_eq!(service.requests.load(Ordering::SeqCst), after_first, "cache missed");
}
