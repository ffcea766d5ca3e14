use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scalebound::interventions::{
    grammar_error_rate, intervention_report, length_variance, score_corpus, tokenize, GenerationCorpus, GrammarService,
    HttpGrammarService, InterventionError, RecordingService, ReplayService, Sample, ScaleTag,
};

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/grammar_replay.json");

fn corpus(texts: &[&str], tag: ScaleTag, sigma: f64) -> GenerationCorpus {
    GenerationCorpus::new(texts.iter().map(|t| Sample::from_text(*t)).collect(), tag, sigma).unwrap()
}

fn fixture_sentences() -> Vec<(String, usize)> {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(FIXTURE).unwrap()).unwrap();
    v.as_array()
        .unwrap()
        .iter()
        .map(|e| (e["request_text"].as_str().unwrap().to_string(), e["match_count"].as_u64().unwrap() as usize))
        .collect()
}

#[test]
fn replayed_fixture_rate() {
    let entries = fixture_sentences();
    let texts: Vec<&str> = entries.iter().map(|e| e.0.as_str()).collect();
    let c = corpus(&texts, ScaleTag::Baseline, 0.0);
    let service = ReplayService::load(FIXTURE).unwrap();
    let matches: usize = entries.iter().map(|e| e.1).sum();
    let tokens: usize = texts.iter().map(|t| tokenize(t).len()).sum();
    let want = 100.0 * matches as f64 / tokens as f64;
    assert_eq!(grammar_error_rate(&c, &service, 4).unwrap(), want);
    assert_eq!((matches, tokens), (6, 36));
}

#[test]
fn length_variance_matches_planted_distribution() {
    // lengths uniform on 5..=15: variance ((15 - 5 + 1)^2 - 1) / 12 = 10
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let samples: Vec<Sample> = (0..1000)
        .map(|_| {
            let n = rng.random_range(5..=15);
            Sample::from_text(vec!["w"; n].join(" "))
        })
        .collect();
    let c = GenerationCorpus::new(samples, ScaleTag::Baseline, 0.0).unwrap();
    let v = length_variance(&c).unwrap();
    assert!((v - 10.0).abs() / 10.0 < 0.05, "{v}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 500, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn length_variance_ignores_token_identity(lens in prop::collection::vec(1usize..20, 2..30), salt in 0u32..1000) {
        let a: Vec<Sample> = lens.iter().map(|&n| Sample::from_text(vec!["x"; n].join(" "))).collect();
        let b: Vec<Sample> = lens
            .iter()
            .enumerate()
            .map(|(i, &n)| Sample::from_text((0..n).map(|k| format!("t{}", (k as u32 * 31 + i as u32 + salt) % 7)).collect::<Vec<_>>().join(" ")))
            .collect();
        let va = length_variance(&GenerationCorpus::new(a, ScaleTag::Baseline, 0.0).unwrap()).unwrap();
        let vb = length_variance(&GenerationCorpus::new(b, ScaleTag::Baseline, 0.0).unwrap()).unwrap();
        prop_assert_eq!(va, vb);
    }
}

/// Minimal HTTP/1.1 server answering `/v2/check` with one match per
/// occurrence of "err" in the form body. The first `failures` requests get a 503.
fn spawn_stub(failures: usize) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { break };
            let counter = counter.clone();
            std::thread::spawn(move || serve(stream, failures, counter));
        }
    });
    (format!("http://{addr}"), hits)
}

fn serve(stream: TcpStream, failures: usize, hits: Arc<AtomicUsize>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut out = stream;
    loop {
        let mut request_line = String::new();
        if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
            return;
        }
        let mut len = 0;
        loop {
            let mut h = String::new();
            reader.read_line(&mut h).unwrap();
            if h == "\r\n" || h.is_empty() {
                break;
            }
            if let Some(v) = h.to_ascii_lowercase().strip_prefix("content-length:") {
                len = v.trim().parse().unwrap();
            }
        }
        let mut body = vec![0; len];
        reader.read_exact(&mut body).unwrap();
        let body = String::from_utf8(body).unwrap();
        let n = hits.fetch_add(1, Ordering::SeqCst);
        let (status, payload) = if !request_line.starts_with("POST /v2/check ") {
            ("404 Not Found", "{}".to_string())
        } else if n < failures {
            ("503 Service Unavailable", "busy".to_string())
        } else if !body.contains("language=en-US") || !body.starts_with("text=") {
            ("400 Bad Request", "missing fields".to_string())
        } else if body.contains("garbage") {
            ("200 OK", "{\"nothing\": true}".to_string())
        } else {
            let m = body.matches("err").count();
            ("200 OK", format!("{{\"matches\": [{}]}}", vec!["{}"; m].join(",")))
        };
        let resp = format!("HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{payload}", payload.len());
        if out.write_all(resp.as_bytes()).is_err() {
            return;
        }
    }
}

#[test]
fn http_client_counts_matches_and_retries() {
    let (url, hits) = spawn_stub(2);
    let service = HttpGrammarService::new(&url).with_retries(3, Duration::from_millis(5));
    assert_eq!(service.match_count("an err and another err").unwrap(), 2);
    assert_eq!(hits.load(Ordering::SeqCst), 3);
    let c = corpus(&["err one two three four", "five six seven eight nine"], ScaleTag::Local, 0.1);
    assert_eq!(grammar_error_rate(&c, &service, 2).unwrap(), 10.0);
}

#[test]
fn http_client_surfaces_bad_payloads_and_outages() {
    let (url, _) = spawn_stub(0);
    let service = HttpGrammarService::new(&url).with_retries(0, Duration::from_millis(1));
    assert!(matches!(service.match_count("garbage"), Err(InterventionError::MalformedResponse(_))));

    let (url, _) = spawn_stub(usize::MAX);
    let busy = HttpGrammarService::new(&url).with_retries(1, Duration::from_millis(1));
    assert!(matches!(busy.match_count("x"), Err(InterventionError::ServiceUnavailable(_))));

    // nothing listens on a freshly closed port
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let down = HttpGrammarService::new(&format!("http://127.0.0.1:{port}")).with_retries(0, Duration::from_millis(1));
    assert!(matches!(down.match_count("x"), Err(InterventionError::ServiceUnavailable(_))));
}

#[test]
fn unavailable_service_leaves_metric_absent_with_a_note() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let down = HttpGrammarService::new(&format!("http://127.0.0.1:{port}")).with_retries(0, Duration::from_millis(1));
    let c = corpus(&["a b c", "d e f g"], ScaleTag::Baseline, 0.0);
    let s = score_corpus(&c, Some(&down), 0).unwrap();
    assert!(s.metrics.grammar_error_rate.is_none());
    assert!(s.notes.iter().any(|n| n.contains("unavailable")));
}

#[test]
fn recording_against_http_replays_identically() {
    let (url, _) = spawn_stub(0);
    let rec = RecordingService::new(HttpGrammarService::new(&url));
    let base = corpus(&["no error here", "one err", "err err twice"], ScaleTag::Baseline, 0.0);
    let local = corpus(&["an err", "fine text", "err"], ScaleTag::Local, 0.1);
    let live = intervention_report(&base, &[local.clone()], Some(&rec), 0).unwrap();
    let replay = ReplayService::from_json(&rec.fixture_json()).unwrap();
    let again = intervention_report(&base, &[local], Some(&replay), 0).unwrap();
    assert_eq!(live, again);
    assert!(live.metrics[&ScaleTag::Baseline].grammar_error_rate.is_some());
    assert_eq!(again.to_json(), live.to_json());
}

#[test]
fn report_json_round_trips() {
    let base = corpus(&["the cat sat", "a dog ran far away", "birds fly"], ScaleTag::Baseline, 0.0);
    let local = corpus(&["the cat sat down", "a dog ran", "birds fly high"], ScaleTag::Local, 0.1);
    let r = intervention_report(&base, &[local], None, 0).unwrap();
    let back: scalebound::interventions::InterventionReport = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(back, r);
}
