//! Remote proposer against an in-process HTTP stub and replay files.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::{json, Value};

use unlearn_search::dsl::{builtin, canonicalize, render, ProbeBatch};
use unlearn_search::evalgrad::evaluate;
use unlearn_search::evolve::{run_search, ProposerChoice, Schedule, SearchConfig, SearchContext};
use unlearn_search::proposer::remote::request_hash;
use unlearn_search::proposer::{GrammarProposer, Proposer, ProposerError, ProposerKind, RemoteConfig, RemoteProposer};

type Handler = dyn Fn(&Value) -> (u16, String) + Send + Sync;

/// Minimal one-request-per-connection HTTP server.
struct Stub {
    url: String,
    seen: Arc<Mutex<Vec<Value>>>,
}

fn stub(handler: impl Fn(&Value) -> (u16, String) + Send + Sync + 'static) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let handler: Arc<Handler> = Arc::new(handler);
    std::thread::spawn(move || {
        for conn in listener.incoming() {
            let Ok(mut conn) = conn else { continue };
            let mut reader = BufReader::new(conn.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    break;
                }
                if line == "\r\n" {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        len = v.trim().parse().unwrap();
                    }
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let request: Value = serde_json::from_slice(&body).unwrap();
            let (code, text) = handler(&request);
            log.lock().unwrap().push(request);
            let reply = format!(
                "HTTP/1.1 {code} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                text.len()
            );
            let _ = conn.write_all(reply.as_bytes());
        }
    });
    Stub { url, seen }
}

fn chat(content: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

/// Reasoning at the thinking temperature, `answer` otherwise.
fn two_phase(answer: &'static str) -> impl Fn(&Value) -> (u16, String) + Send + Sync {
    move |req| {
        if req["temperature"] == 0.6 {
            (200, chat("Let me think about forget and retain terms."))
        } else {
            (200, chat(answer))
        }
    }
}

fn config(url: &str) -> RemoteConfig {
    RemoteConfig {
        endpoint: url.to_string(),
        model: "stub-model".into(),
        backoff: Duration::from_millis(1),
        timeout: Duration::from_secs(10),
        ..RemoteConfig::default()
    }
}

fn proposer(cfg: RemoteConfig) -> RemoteProposer {
    RemoteProposer::new(cfg).unwrap()
}

#[test]
fn single_valid_loss_round_trip() {
    let s = stub(two_phase(
        "<think>short</think>\n<answer>\nepochs: 7\n(mean (add (scale 1.2 (sub zf zf_ref)) (sub zr_ref zr)))\n</answer>",
    ));
    let out = proposer(config(&s.url)).propose_initial(1).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].as_ref().unwrap(), &canonicalize(&builtin("tofu5").unwrap()));

    let seen = s.seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    assert_eq!(seen[0]["temperature"], 0.6);
    assert_eq!(seen[0]["max_tokens"], 4096);
    assert_eq!(seen[1]["temperature"], 0.2);
    assert_eq!(seen[1]["model"], "stub-model");
    let roles = |v: &Value| -> Vec<String> {
        v["messages"].as_array().unwrap().iter().map(|m| m["role"].as_str().unwrap().to_string()).collect()
    };
    assert_eq!(roles(&seen[0]), ["system", "user", "user"]);
    assert_eq!(roles(&seen[1]), ["system", "user", "user", "assistant", "user"]);
    assert!(seen[1]["messages"][4]["content"].as_str().unwrap().contains("CRITICAL OUTPUT FORMAT"));
}

#[test]
fn two_expressions_are_averaged() {
    let s = stub(two_phase("<answer>epochs: 4\n(mean (sub zf zf_ref))\n(mean (square zr))</answer>"));
    let out = proposer(config(&s.url)).propose_initial(1).unwrap();
    let loss = out[0].as_ref().unwrap();
    assert_eq!(loss.epochs, 4);
    let b = ProbeBatch::new(vec![-0.2, -0.8], vec![-1.5], vec![-0.1, -0.3], vec![-1.0]).unwrap();
    let oracle = 0.5 * ((-0.1 + -0.5) / 2.0 + 2.25);
    assert!((evaluate(&loss.expr, &b).unwrap() - oracle).abs() < 1e-12);
}

#[test]
fn prose_and_missing_blocks_fail_the_slot() {
    let s = stub(two_phase("<answer>Try a larger forgetting coefficient next time.</answer>"));
    let out = proposer(config(&s.url)).propose_initial(2).unwrap();
    assert_eq!(out.len(), 2);
    assert!(out.iter().all(|o| o.is_err()));

    let s = stub(two_phase("epochs: 3\n(mean zf)"));
    let out = proposer(config(&s.url)).propose_initial(1).unwrap();
    assert!(out[0].as_ref().unwrap_err().reason.contains("answer"));
}

#[test]
fn fewer_files_than_slots_and_duplicates() {
    let s = stub(two_phase("<answer>epochs: 3\n(mean zf)\n\nepochs: 3\n(mean zf)</answer>"));
    let out = proposer(config(&s.url)).propose_initial(3).unwrap();
    assert!(out[0].is_ok());
    assert!(out[1].as_ref().unwrap_err().reason.contains("duplicate"));
    assert!(out[2].is_err());
}

#[test]
fn server_errors_are_retried_then_fatal() {
    let s = stub(|_| (500, "{\"error\":\"boom\"}".into()));
    let err = proposer(config(&s.url)).propose_initial(1).unwrap_err();
    assert!(matches!(err, ProposerError::Status { code: 500, .. }), "{err}");
    assert_eq!(s.seen.lock().unwrap().len(), 4);

    let s = stub(|_| (400, "bad request".into()));
    let err = proposer(config(&s.url)).propose_initial(1).unwrap_err();
    assert!(matches!(err, ProposerError::Status { code: 400, .. }));
    assert_eq!(s.seen.lock().unwrap().len(), 1);

    // a transient 503 then success
    let count = Arc::new(Mutex::new(0));
    let c = count.clone();
    let s = stub(move |req| {
        let mut n = c.lock().unwrap();
        *n += 1;
        if *n == 1 {
            (503, String::new())
        } else {
            two_phase("<answer>epochs: 2\n(mean zf)</answer>")(req)
        }
    });
    let out = proposer(config(&s.url)).propose_initial(1).unwrap();
    assert!(out[0].is_ok());
    assert_eq!(s.seen.lock().unwrap().len(), 3);
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let cfg = RemoteConfig { retries: 1, ..config(&format!("http://127.0.0.1:{port}/v1")) };
    let err = proposer(cfg).propose_initial(1).unwrap_err();
    assert!(matches!(err, ProposerError::Transport { .. }), "{err}");
}

#[test]
fn malformed_json_fails_slots_not_the_run() {
    let s = stub(|_| (200, "this is not json".into()));
    let out = proposer(config(&s.url)).propose_initial(2).unwrap();
    assert!(out.iter().all(|o| o.as_ref().unwrap_err().reason.contains("malformed")));

    let s = stub(|_| (200, json!({"choices": []}).to_string()));
    let out = proposer(config(&s.url)).propose_initial(1).unwrap();
    assert!(out[0].is_err());
}

#[test]
fn record_then_replay() {
    let dir = tempfile::tempdir().unwrap();
    let tape = dir.path().join("tape.jsonl");
    let s = stub(two_phase("<answer>epochs: 3\n(mean zf)\nepochs: 5\n(mean (neg zr))</answer>"));
    let live = proposer(RemoteConfig { record: Some(tape.clone()), ..config(&s.url) }).propose_initial(2).unwrap();
    drop(s);

    let lines: Vec<Value> = std::fs::read_to_string(&tape)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    for l in &lines {
        assert_eq!(l["request"].as_str().unwrap().len(), 64);
    }

    let replay = RemoteConfig { replay: Some(tape.clone()), ..config("http://127.0.0.1:9/unused") };
    let p = proposer(replay.clone());
    assert_eq!(p.propose_initial(2).unwrap(), live);
    // a different request has no recording
    let err = p.propose_initial(3).unwrap_err();
    assert!(matches!(err, ProposerError::ReplayMiss { .. }));
}

/// Answers with ten grammar samples seeded by the request hash.
fn grammar_stub(req: &Value) -> (u16, String) {
    if req["temperature"] == 0.6 {
        return (200, chat("thinking"));
    }
    let hash = request_hash(&req.to_string());
    let seed = u64::from_str_radix(&hash[..16], 16).unwrap();
    let files: Vec<String> = GrammarProposer::new(seed)
        .propose_initial(10, 0)
        .into_iter()
        .flatten()
        .map(|l| render(&l))
        .collect();
    (200, chat(&format!("<answer>\n{}\n</answer>", files.join("\n\n"))))
}

fn remote_search(cfg: &SearchConfig, ctx: &SearchContext, remote: RemoteConfig, ledger: &Path) {
    let p = Proposer::new(ProposerKind::Remote(remote)).unwrap();
    run_search(cfg, ctx, &p, ledger).unwrap();
}

#[test]
fn replayed_remote_search_is_byte_identical() {
    let cfg = SearchConfig {
        seed: 4,
        proposer: ProposerChoice::Remote,
        schedule: Schedule { initial: 4, rounds: Schedule::parse_rounds("2:2").unwrap() },
        ..SearchConfig::default()
    };
    let ctx = SearchContext::build(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let tape = dir.path().join("tape.jsonl");
    let s = stub(grammar_stub);
    remote_search(&cfg, &ctx, RemoteConfig { record: Some(tape.clone()), ..config(&s.url) }, &dir.path().join("live.jsonl"));
    assert_eq!(s.seen.lock().unwrap().len(), 2 * 3);

    let replay = RemoteConfig { replay: Some(tape), ..config("http://127.0.0.1:9/unused") };
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    remote_search(&cfg, &ctx, replay.clone(), &a);
    remote_search(&cfg, &ctx, replay, &b);
    let bytes = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_eq!(bytes(&a), bytes(&dir.path().join("live.jsonl")));
    assert_eq!(std::fs::read_to_string(&a).unwrap().lines().count(), 1 + 8);
}
