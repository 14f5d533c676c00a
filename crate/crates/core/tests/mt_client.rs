mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use common::mock_mt::{echo, reverse_words, translations, MockServer};
use v2t_core::augment::rtt_via_mt;
use v2t_core::mt_client::{cache_stats, ApiKey, ClientConfig, Direction, RetryPolicy, TranslationClient};
use v2t_core::Error;

const KEY: &str = "sk-test-SECRET-7f3a91";

struct Capture;

static LINES: Mutex<Vec<String>> = Mutex::new(Vec::new());

impl log::Log for Capture {
    fn enabled(&self, _: &log::Metadata) -> bool {
        true
    }

    fn log(&self, record: &log::Record) {
        LINES.lock().unwrap().push(format!("{} {} {}", record.level(), record.target(), record.args()));
    }

    fn flush(&self) {}
}

fn capture_logs() {
    static INIT: OnceLock<()> = OnceLock::new();
    INIT.get_or_init(|| {
        log::set_logger(&Capture).unwrap();
        log::set_max_level(log::LevelFilter::Trace);
    });
}

fn client(url: &str, cache: &Path) -> TranslationClient {
    capture_logs();
    let mut cfg = ClientConfig::new(url, cache);
    cfg.api_key = ApiKey::new(KEY);
    cfg.retry = RetryPolicy {
        max_attempts: 3,
        base_backoff: Duration::from_millis(2),
    };
    cfg.timeout = Duration::from_secs(10);
    TranslationClient::new(cfg).unwrap()
}

fn texts(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("sentence number {i} is here")).collect()
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn assert_no_key_in(dir: &Path) {
    for (name, bytes) in snapshot(dir) {
        assert!(!name.contains(KEY));
        assert!(!String::from_utf8_lossy(&bytes).contains(KEY), "key leaked into cache file {name}");
    }
}

#[test]
fn alignment_survives_batching() {
    let server = MockServer::start(reverse_words);
    let dir = tempfile::tempdir().unwrap();
    let c = client(&server.url, dir.path());
    let input = texts(70);
    let out = c.translate_batch(&input, Direction::Forward).unwrap();
    assert_eq!(out.len(), 70);
    for (i, o) in input.iter().zip(&out) {
        assert_eq!(o, &i.split_whitespace().rev().collect::<Vec<_>>().join(" "));
    }
    // 70 texts in batches of 32
    assert_eq!(server.count(), 3);
    let reqs = server.requests();
    assert_eq!(reqs.iter().map(|r| r.texts().len()).sum::<usize>(), 70);
    assert_eq!(reqs[0].body["source_lang"], "en");
    assert_eq!(reqs[0].body["target_lang"], "de");
    assert_eq!(reqs[0].header("authorization"), Some(format!("Bearer {KEY}").as_str()));
    assert_no_key_in(dir.path());
}

#[test]
fn cache_prevents_repeat_requests() {
    let server = MockServer::start(echo);
    let dir = tempfile::tempdir().unwrap();
    let input = texts(100);
    let c = client(&server.url, dir.path());
    assert_eq!(c.translate_batch(&input, Direction::Forward).unwrap(), input);
    let sent = server.count();
    let before = snapshot(dir.path());
    assert_eq!(cache_stats(dir.path()).unwrap().entries, 100);

    let again = client(&server.url, dir.path());
    assert_eq!(again.translate_batch(&input, Direction::Forward).unwrap(), input);
    assert_eq!(server.count(), sent);
    assert_eq!(again.requests_sent(), 0);
    assert_eq!(snapshot(dir.path()), before);

    // the other direction is a different cache entry
    again.translate_batch(&input[..1], Direction::Backward).unwrap();
    assert_eq!(server.count(), sent + 1);
    assert_eq!(server.requests().last().unwrap().body["target_lang"], "en");
}

#[test]
fn duplicates_are_sent_once() {
    let server = MockServer::start(reverse_words);
    let dir = tempfile::tempdir().unwrap();
    let c = client(&server.url, dir.path());
    let input: Vec<String> = ["a b", "c d", "a b", "a b"].iter().map(|s| s.to_string()).collect();
    let out = c.translate_batch(&input, Direction::Forward).unwrap();
    assert_eq!(out, ["b a", "d c", "b a", "b a"]);
    assert_eq!(server.requests()[0].texts(), ["a b", "c d"]);
}

#[test]
fn server_errors_are_retried() {
    let server = MockServer::start(|n, r| if n < 2 { (500, "oops".into()) } else { echo(n, r) });
    let dir = tempfile::tempdir().unwrap();
    let c = client(&server.url, dir.path());
    let input = texts(3);
    assert_eq!(c.translate_batch(&input, Direction::Forward).unwrap(), input);
    assert_eq!(server.count(), 3);
    assert_eq!(c.requests_sent(), 3);
}

#[test]
fn rate_limits_are_retried() {
    let server = MockServer::start(|n, r| if n == 0 { (429, String::new()) } else { echo(n, r) });
    let dir = tempfile::tempdir().unwrap();
    let c = client(&server.url, dir.path());
    c.translate_batch(&texts(1), Direction::Forward).unwrap();
    assert_eq!(server.count(), 2);
}

#[test]
fn retries_give_up_after_max_attempts() {
    let server = MockServer::start(|_, _| (503, String::new()));
    let dir = tempfile::tempdir().unwrap();
    let c = client(&server.url, dir.path());
    match c.translate_batch(&texts(2), Direction::Forward) {
        Err(Error::Transport { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("{other:?}"),
    }
    assert_eq!(server.count(), 3);
    assert_eq!(cache_stats(dir.path()).unwrap().entries, 0);
}

#[test]
fn client_errors_fail_immediately_without_the_key() {
    let server = MockServer::start(|_, r| (401, format!("bad credentials: {}", r.header("authorization").unwrap_or(""))));
    let dir = tempfile::tempdir().unwrap();
    let c = client(&server.url, dir.path());
    let err = c.translate_batch(&texts(2), Direction::Forward).unwrap_err();
    assert!(matches!(err, Error::Client { status: 401, .. }), "{err:?}");
    assert_eq!(server.count(), 1);
    assert!(!err.to_string().contains(KEY));
    assert!(!format!("{err:?}").contains(KEY));
    assert!(!format!("{c:?}").contains(KEY));
}

#[test]
fn short_responses_are_protocol_errors() {
    let server = MockServer::start(|_, _| (200, translations(["only one".to_string()])));
    let dir = tempfile::tempdir().unwrap();
    let c = client(&server.url, dir.path());
    assert!(matches!(c.translate_batch(&texts(2), Direction::Forward), Err(Error::Protocol(_))));
    let garbage = MockServer::start(|_, _| (200, "not json".into()));
    let c = client(&garbage.url, dir.path());
    assert!(matches!(c.translate_batch(&texts(1), Direction::Forward), Err(Error::Protocol(_))));
    assert_eq!(garbage.count(), 1);
}

#[test]
fn unreachable_server_is_a_transport_error() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dir = tempfile::tempdir().unwrap();
    let c = client(&format!("http://127.0.0.1:{port}/translate"), dir.path());
    let err = c.translate_batch(&texts(1), Direction::Forward).unwrap_err();
    assert!(matches!(err, Error::Transport { attempts: 3, .. }), "{err:?}");
}

#[test]
fn round_trip_through_an_echo_server() {
    let server = MockServer::start(echo);
    let dir = tempfile::tempdir().unwrap();
    let c = client(&server.url, dir.path());
    let input = texts(40);
    let records = rtt_via_mt(&input, &c).unwrap();
    assert_eq!(records.len(), 40);
    for (r, s) in records.iter().zip(&input) {
        assert_eq!(&r.source, s);
        assert_eq!(&r.round_trip, s);
        assert_eq!(r.bleu, 100.0);
    }
    assert_no_key_in(dir.path());
}

#[test]
fn round_trip_errors_name_the_chunk() {
    // Forward for chunk 0 succeeds, backward for chunk 0 succeeds, chunk 1 fails.
    let server = MockServer::start(|n, r| if n < 2 { echo(n, r) } else { (400, "bad".into()) });
    let dir = tempfile::tempdir().unwrap();
    let c = client(&server.url, dir.path());
    match rtt_via_mt(&texts(40), &c) {
        Err(Error::Augmentation { index, source }) => {
            assert_eq!(index, 32);
            assert!(matches!(*source, Error::Client { status: 400, .. }));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn logs_never_contain_the_key() {
    let server = MockServer::start(|n, r| if n % 2 == 0 { (500, KEY.into()) } else { echo(n, r) });
    let dir = tempfile::tempdir().unwrap();
    let c = client(&server.url, dir.path());
    c.translate_batch(&texts(5), Direction::Forward).unwrap();
    let lines = LINES.lock().unwrap();
    assert!(!lines.is_empty());
    for l in lines.iter() {
        assert!(!l.contains(KEY), "key leaked into log line: {l}");
    }
}
