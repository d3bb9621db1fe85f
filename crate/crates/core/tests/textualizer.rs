use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use proptest::prelude::*;
use steerkit::annotations::{BoundingBox, ImageRecord, ObjectAnnotation, Polygon};
use steerkit::textualizer::{absence_sentence, RemoteBackendConfig, RemoteClient, COCO_CATEGORIES};
use steerkit::{build_fact_set, compose_description, generate_question_set, query_focus, Backend, Error, FactConfig, FactSet, Question, TaskKind};

fn image(objects: &[(&str, f64, f64, f64)]) -> ImageRecord {
    ImageRecord {
        image_id: 7,
        width: 200,
        height: 200,
        file_name: "x.ppm".into(),
        pixels: None,
        objects: objects
            .iter()
            .enumerate()
            .map(|(i, &(cat, x, y, s))| ObjectAnnotation {
                object_id: i as i64 + 1,
                category: cat.into(),
                bbox: BoundingBox::new(x, y, s, s).unwrap(),
                parts: vec![Polygon::new(vec![(x, y), (x + s, y), (x + s, y + s), (x, y + s)]).unwrap()],
            })
            .collect(),
    }
}

fn facts(objects: &[(&str, f64, f64, f64)]) -> FactSet {
    let cfg = FactConfig { colors: false, ..FactConfig::default() };
    build_fact_set(&image(objects), &cfg).unwrap()
}

#[test]
fn template_output_is_pinned() {
    let f = facts(&[("dog", 10.0, 10.0, 20.0), ("cup", 100.0, 12.0, 20.0)]);
    let d = compose_description(&f, &Backend::Template).unwrap();
    // Pinned so that a change in wording is a deliberate test update.
    assert_eq!(
        d.text,
        "The image contains a dog and a cup. There is 1 dog and 1 cup. The dog is square. \
         The cup is square. The dog is to the left of the cup."
    );
    assert_eq!(d, compose_description(&f.clone(), &Backend::Template).unwrap());
    let round = FactSet::from_json(&f.to_json().unwrap()).unwrap();
    assert_eq!(compose_description(&round, &Backend::Template).unwrap().text, d.text);
}

#[test]
fn absent_category_gets_only_the_absence_sentence() {
    let f = facts(&[("dog", 10.0, 10.0, 20.0), ("cup", 100.0, 12.0, 20.0)]);
    let d = compose_description(&f, &Backend::Template).unwrap();
    let focused = query_focus(&d, &f, &Question::existence(0, "zebra"), &Backend::Template).unwrap();
    assert_eq!(focused, absence_sentence("zebra"));
    let present = query_focus(&d, &f, &Question::existence(1, "dog"), &Backend::Template).unwrap();
    assert!(present.contains("dog"));
    assert_eq!(query_focus(&d, &f, &Question::describe(2), &Backend::Template).unwrap(), d.text);
}

/// Answers every request with `reply(n)` where n counts requests so far.
fn serve(reply: impl Fn(usize) -> (u16, String) + Send + Sync + 'static) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap_or(0);
                }
            }
            let mut body = vec![0u8; length];
            reader.read_exact(&mut body).ok();
            let n = counter.fetch_add(1, Ordering::SeqCst);
            let (status, text) = reply(n);
            let resp = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                text.len()
            );
            stream.write_all(resp.as_bytes()).ok();
        }
    });
    (format!("http://{addr}/integrate"), hits)
}

fn client(endpoint: String, retries: u32) -> Backend {
    Backend::Remote(
        RemoteClient::new(RemoteBackendConfig {
            endpoint,
            retries,
            timeout_secs: 5.0,
            ..RemoteBackendConfig::default()
        })
        .unwrap(),
    )
}

#[test]
fn remote_backend_returns_server_text() {
    let (url, hits) = serve(|_| (200, r#"{"text":"A dog sits left of a cup."}"#.into()));
    let f = facts(&[("dog", 10.0, 10.0, 20.0), ("cup", 100.0, 12.0, 20.0)]);
    let d = compose_description(&f, &client(url, 0)).unwrap();
    assert_eq!(d.text, "A dog sits left of a cup.");
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn remote_backend_retries_then_fails() {
    let (url, hits) = serve(|_| (500, "{}".into()));
    let f = facts(&[("dog", 10.0, 10.0, 20.0)]);
    let err = compose_description(&f, &client(url, 2)).unwrap_err();
    assert!(matches!(err, Error::RemoteUnavailable { attempts: 3, .. }), "{err:?}");
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[test]
fn remote_backend_recovers_after_a_failure() {
    let (url, _) = serve(|n| if n == 0 { (503, "{}".into()) } else { (200, r#"{"text":"ok"}"#.into()) });
    let f = facts(&[("dog", 10.0, 10.0, 20.0)]);
    assert_eq!(compose_description(&f, &client(url, 1)).unwrap().text, "ok");
}

fn arb_objects() -> impl Strategy<Value = Vec<(&'static str, f64, f64, f64)>> {
    let cat = prop::sample::select(COCO_CATEGORIES[..12].to_vec());
    prop::collection::vec((cat, 0.0..150.0f64, 0.0..150.0f64, 5.0..40.0f64), 1..7)
}

proptest! {
    #[test]
    fn descriptions_name_every_category(objects in arb_objects()) {
        let f = facts(&objects);
        let d = compose_description(&f, &Backend::Template).unwrap();
        for c in f.category_names() {
            prop_assert!(d.text.contains(c), "{} missing from {}", c, d.text);
        }
    }

    #[test]
    fn discriminative_sets_are_balanced(objects in arb_objects(), n in 1usize..12, seed in any::<u64>()) {
        let f = facts(&objects);
        let qs = generate_question_set(&f, TaskKind::Discriminative, n, seed).unwrap();
        prop_assert!(qs.len() <= n);
        let present = qs.iter().filter(|q| f.has_category(&q.referenced_categories[0])).count();
        let absent = qs.len() - present;
        prop_assert!(present.abs_diff(absent) <= 1);
        prop_assert_eq!(qs, generate_question_set(&f, TaskKind::Discriminative, n, seed).unwrap());
    }

    #[test]
    fn absent_focus_never_describes_the_object(objects in arb_objects(), pick in 12usize..80) {
        let f = facts(&objects);
        let d = compose_description(&f, &Backend::Template).unwrap();
        let cat = COCO_CATEGORIES[pick];
        let focused = query_focus(&d, &f, &Question::existence(0, cat), &Backend::Template).unwrap();
        prop_assert_eq!(focused, absence_sentence(cat));
    }
}
