#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use misinfo_sim::corpus::{Corpus, DomainSpec, PersonaSpec};

/// One request as the mock server saw it.
#[derive(Debug, Clone)]
pub struct SeenRequest {
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

/// Scripted reply: status, extra headers, body.
#[derive(Debug, Clone)]
pub struct Reply {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl Reply {
    pub fn ok_content(content: &str) -> Self {
        let body = serde_json::json!({
            "choices": [{ "index": 0, "message": { "role": "assistant", "content": content } }]
        })
        .to_string();
        Self {
            status: 200,
            headers: Vec::new(),
            body,
        }
    }

    pub fn status(status: u16, body: &str) -> Self {
        Self {
            status,
            headers: Vec::new(),
            body: body.to_string(),
        }
    }

    pub fn with_header(mut self, k: &str, v: &str) -> Self {
        self.headers.push((k.into(), v.into()));
        self
    }
}

type Responder = dyn Fn(&SeenRequest) -> Reply + Send + Sync;

/// Minimal HTTP/1.1 server on a loopback port. Each connection carries one
/// request; the responder decides the reply.
pub struct MockServer {
    pub base: String,
    pub seen: Arc<Mutex<Vec<SeenRequest>>>,
}

impl MockServer {
    pub fn start(responder: impl Fn(&SeenRequest) -> Reply + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let seen: Arc<Mutex<Vec<SeenRequest>>> = Arc::default();
        let responder: Arc<Responder> = Arc::new(responder);
        let log = seen.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let log = log.clone();
                let responder = responder.clone();
                thread::spawn(move || {
                    let mut reader = BufReader::new(stream.try_clone().unwrap());
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        return;
                    }
                    let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
                    let mut headers = Vec::new();
                    let mut len = 0usize;
                    loop {
                        let mut h = String::new();
                        reader.read_line(&mut h).unwrap();
                        let h = h.trim_end();
                        if h.is_empty() {
                            break;
                        }
                        if let Some((k, v)) = h.split_once(':') {
                            let (k, v) = (k.trim().to_ascii_lowercase(), v.trim().to_string());
                            if k == "content-length" {
                                len = v.parse().unwrap();
                            }
                            headers.push((k, v));
                        }
                    }
                    let mut body = vec![0u8; len];
                    reader.read_exact(&mut body).unwrap();
                    let req = SeenRequest {
                        path,
                        headers,
                        body: String::from_utf8(body).unwrap(),
                    };
                    let reply = responder(&req);
                    log.lock().unwrap().push(req);
                    let mut out = format!(
                        "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n",
                        reply.status,
                        reply.body.len()
                    );
                    for (k, v) in &reply.headers {
                        out.push_str(&format!("{k}: {v}\r\n"));
                    }
                    out.push_str("\r\n");
                    out.push_str(&reply.body);
                    let _ = stream.write_all(out.as_bytes());
                    let _ = stream.flush();
                });
            }
        });
        Self { base, seen }
    }

    pub fn requests(&self) -> Vec<SeenRequest> {
        self.seen.lock().unwrap().clone()
    }
}

/// Messages of a chat-completions request body.
pub fn messages_of(req: &SeenRequest) -> Vec<(String, String)> {
    let v: serde_json::Value = serde_json::from_str(&req.body).unwrap();
    v["messages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| {
            (
                m["role"].as_str().unwrap().to_string(),
                m["content"].as_str().unwrap().to_string(),
            )
        })
        .collect()
}

/// Small corpus with `personas` personas and `domains` domains of `m` questions.
pub fn tiny_corpus(personas: u32, domains: usize, m: usize) -> Corpus {
    Corpus {
        personas: (1..=personas)
            .map(|id| PersonaSpec {
                id,
                name: format!("Persona {id}"),
                prompt: format!("You are persona number {id}."),
            })
            .collect(),
        domains: (0..domains)
            .map(|i| DomainSpec {
                id: format!("dom{i}"),
                title: format!("dom-{i}"),
                body: format!("Source article {i}. It reports several facts."),
                questions: (1..=m).map(|j| format!("Is fact {j} of article {i} true?")).collect(),
            })
            .collect(),
        m,
    }
}
