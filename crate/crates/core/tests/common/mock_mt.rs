//! Minimal HTTP/1.1 translation server on a random local port.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::Value;

#[derive(Debug, Clone)]
pub struct Received {
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: Value,
}

impl Received {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }

    pub fn texts(&self) -> Vec<String> {
        self.body["texts"]
            .as_array()
            .expect("texts array")
            .iter()
            .map(|t| t.as_str().expect("string").to_string())
            .collect()
    }
}

/// `(status, body)` for the n-th request (0-based).
pub type Responder = dyn Fn(usize, &Received) -> (u16, String) + Send + Sync;

pub struct MockServer {
    pub url: String,
    log: Arc<Mutex<Vec<Received>>>,
}

impl MockServer {
    pub fn start(responder: impl Fn(usize, &Received) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
        let url = format!("http://{}/translate", listener.local_addr().unwrap());
        let log = Arc::new(Mutex::new(Vec::new()));
        let responder: Arc<Responder> = Arc::new(responder);
        let shared = log.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let log = shared.clone();
                let responder = responder.clone();
                thread::spawn(move || handle(stream, &log, &*responder));
            }
        });
        Self { url, log }
    }

    pub fn requests(&self) -> Vec<Received> {
        self.log.lock().unwrap().clone()
    }

    pub fn count(&self) -> usize {
        self.log.lock().unwrap().len()
    }
}

fn handle(stream: TcpStream, log: &Mutex<Vec<Received>>, responder: &Responder) {
    let mut reader = BufReader::new(stream.try_clone().expect("clone stream"));
    let mut line = String::new();
    if reader.read_line(&mut line).unwrap_or(0) == 0 {
        return;
    }
    let path = line.split_whitespace().nth(1).unwrap_or("/").to_string();
    let mut headers = Vec::new();
    let mut length = 0;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).expect("header line");
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if k.eq_ignore_ascii_case("content-length") {
                length = v.parse().expect("content length");
            }
            headers.push((k, v));
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).expect("body");
    let received = Received {
        path,
        headers,
        body: serde_json::from_slice(&body).unwrap_or(Value::Null),
    };
    let index = {
        let mut l = log.lock().unwrap();
        l.push(received.clone());
        l.len() - 1
    };
    let (status, text) = responder(index, &received);
    let mut stream = stream;
    let reply = format!(
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        text.len()
    );
    let _ = stream.write_all(reply.as_bytes());
    let _ = stream.flush();
}

pub fn translations(texts: impl IntoIterator<Item = String>) -> String {
    serde_json::json!({ "translations": texts.into_iter().collect::<Vec<_>>() }).to_string()
}

pub fn echo(_: usize, r: &Received) -> (u16, String) {
    (200, translations(r.texts()))
}

pub fn reverse_words(_: usize, r: &Received) -> (u16, String) {
    (
        200,
        translations(r.texts().into_iter().map(|t| t.split_whitespace().rev().collect::<Vec<_>>().join(" "))),
    )
}
