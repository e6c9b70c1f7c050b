//! Chat-completions client that asks a language model for loss files.
//!
//! Each batch is one two-phase exchange: a high-temperature reasoning turn,
//! then a low-temperature turn that must return an `<answer>` block of DSL
//! loss files. Transport failures and non-2xx replies are retried with
//! exponential backoff and then abort the run; malformed replies only fail
//! the slots they were meant to fill.

use std::collections::HashMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{Feedback, ProposerError, SlotOutcome};
use crate::dsl::{canonicalize, parse_raw, render, repair, Rejection};

pub const THINKING_PRESETS: [u32; 4] = [512, 1024, 2048, 4096];
pub const DEFAULT_THINKING_TOKENS: u32 = 4096;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

pub const ENV_ENDPOINT: &str = "UNLEARN_SEARCH_ENDPOINT";
pub const ENV_API_KEY: &str = "UNLEARN_SEARCH_API_KEY";
pub const ENV_MODEL: &str = "UNLEARN_SEARCH_MODEL";
pub const ENV_MAX_IN_FLIGHT: &str = "UNLEARN_SEARCH_MAX_IN_FLIGHT";
pub const ENV_THINKING_TOKENS: &str = "UNLEARN_SEARCH_THINKING_TOKENS";

#[derive(Clone, PartialEq)]
pub struct RemoteConfig {
    /// Full chat-completions URL.
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub think_temperature: f64,
    pub answer_temperature: f64,
    pub thinking_tokens: u32,
    pub answer_tokens: u32,
    pub max_in_flight: usize,
    pub retries: u32,
    pub backoff: Duration,
    pub timeout: Duration,
    /// Serve responses from this JSONL file instead of the network.
    pub replay: Option<PathBuf>,
    /// Append every live exchange to this JSONL file.
    pub record: Option<PathBuf>,
    /// Extra exchanges allowed to fill slots left empty by invalid output.
    /// Zero keeps fixed-slot accounting.
    pub refill_rounds: u32,
}

impl Default for RemoteConfig {
    fn default() -> RemoteConfig {
        RemoteConfig {
            endpoint: String::new(),
            api_key: None,
            model: "default".into(),
            think_temperature: 0.6,
            answer_temperature: 0.2,
            thinking_tokens: DEFAULT_THINKING_TOKENS,
            answer_tokens: 1024,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            retries: 3,
            backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(300),
            replay: None,
            record: None,
            refill_rounds: 0,
        }
    }
}

impl fmt::Debug for RemoteConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteConfig")
            .field("endpoint", &self.endpoint)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("model", &self.model)
            .field("think_temperature", &self.think_temperature)
            .field("answer_temperature", &self.answer_temperature)
            .field("thinking_tokens", &self.thinking_tokens)
            .field("answer_tokens", &self.answer_tokens)
            .field("max_in_flight", &self.max_in_flight)
            .field("retries", &self.retries)
            .field("replay", &self.replay)
            .field("record", &self.record)
            .field("refill_rounds", &self.refill_rounds)
            .finish()
    }
}

impl RemoteConfig {
    /// Reads the endpoint variables from the process environment.
    pub fn from_env() -> Result<RemoteConfig, ProposerError> {
        RemoteConfig::from_lookup(|k| std::env::var(k).ok())
    }

    /// Builds a config from any variable source. The endpoint may be absent
    /// only when a replay file is set later.
    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<RemoteConfig, ProposerError> {
        let mut cfg = RemoteConfig::default();
        let get = |k: &str| get(k).filter(|v| !v.trim().is_empty());
        if let Some(url) = get(ENV_ENDPOINT) {
            cfg.endpoint = url.trim().to_string();
        }
        cfg.api_key = get(ENV_API_KEY);
        if let Some(m) = get(ENV_MODEL) {
            cfg.model = m;
        }
        if let Some(n) = get(ENV_MAX_IN_FLIGHT) {
            cfg.max_in_flight = n
                .trim()
                .parse()
                .ok()
                .filter(|&n: &usize| n >= 1)
                .ok_or_else(|| ProposerError::Config(format!("{ENV_MAX_IN_FLIGHT} must be a positive integer, got {n:?}")))?;
        }
        if let Some(t) = get(ENV_THINKING_TOKENS) {
            cfg.thinking_tokens = t
                .trim()
                .parse()
                .ok()
                .filter(|&t: &u32| t >= 1)
                .ok_or_else(|| ProposerError::Config(format!("{ENV_THINKING_TOKENS} must be a positive integer, got {t:?}")))?;
        }
        Ok(cfg)
    }

    fn check(&self) -> Result<(), ProposerError> {
        if self.replay.is_none() && self.endpoint.is_empty() {
            return Err(ProposerError::Config(format!("{ENV_ENDPOINT} is not set")));
        }
        if self.max_in_flight == 0 {
            return Err(ProposerError::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }
}

/// Hex SHA-256 of a request body: the replay-file key.
pub fn request_hash(body: &str) -> String {
    hex::encode(Sha256::digest(body.as_bytes()))
}

#[derive(Debug, Serialize, Deserialize)]
struct ReplayRecord {
    request: String,
    response: String,
}

/// Reads a replay file into a hash → response map.
pub fn load_replay(path: &Path) -> Result<HashMap<String, String>, ProposerError> {
    let io = |e: std::io::Error| ProposerError::Io(format!("{}: {e}", path.display()));
    let mut map = HashMap::new();
    for (i, line) in BufReader::new(File::open(path).map_err(io)?).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ReplayRecord = serde_json::from_str(&line)
            .map_err(|e| ProposerError::Io(format!("{} line {}: {e}", path.display(), i + 1)))?;
        map.insert(rec.request, rec.response);
    }
    Ok(map)
}

enum Transport {
    Http { agent: ureq::Agent, record: Option<Mutex<File>> },
    Replay(HashMap<String, String>),
}

impl fmt::Debug for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transport::Http { record, .. } => write!(f, "Http {{ recording: {} }}", record.is_some()),
            Transport::Replay(m) => write!(f, "Replay({} records)", m.len()),
        }
    }
}

#[derive(Debug)]
pub struct RemoteProposer {
    cfg: RemoteConfig,
    transport: Transport,
}

/// What came back from one two-phase exchange.
enum Reply {
    Answer(String),
    /// The endpoint answered, but not with something usable.
    Unusable(String),
}

impl RemoteProposer {
    pub fn new(cfg: RemoteConfig) -> Result<RemoteProposer, ProposerError> {
        cfg.check()?;
        let transport = match &cfg.replay {
            Some(path) => Transport::Replay(load_replay(path)?),
            None => {
                let agent: ureq::Agent = ureq::Agent::config_builder()
                    .timeout_global(Some(cfg.timeout))
                    .http_status_as_error(false)
                    .build()
                    .into();
                let record = match &cfg.record {
                    Some(p) => Some(Mutex::new(
                        OpenOptions::new()
                            .create(true)
                            .append(true)
                            .open(p)
                            .map_err(|e| ProposerError::Io(format!("{}: {e}", p.display())))?,
                    )),
                    None => None,
                };
                Transport::Http { agent, record }
            }
        };
        Ok(RemoteProposer { cfg, transport })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.cfg
    }

    fn send(&self, body: &str) -> Result<String, ProposerError> {
        match &self.transport {
            Transport::Replay(map) => {
                let hash = request_hash(body);
                map.get(&hash).cloned().ok_or(ProposerError::ReplayMiss { hash })
            }
            Transport::Http { agent, record } => {
                let text = self.post_with_retry(agent, body)?;
                if let Some(file) = record {
                    let line = serde_json::to_string(&ReplayRecord {
                        request: request_hash(body),
                        response: text.clone(),
                    })
                    .expect("record serializes");
                    let mut f = file.lock().unwrap_or_else(|p| p.into_inner());
                    writeln!(f, "{line}").map_err(|e| ProposerError::Io(e.to_string()))?;
                }
                Ok(text)
            }
        }
    }

    fn post_with_retry(&self, agent: &ureq::Agent, body: &str) -> Result<String, ProposerError> {
        let mut attempt = 0;
        loop {
            let err = match self.post_once(agent, body) {
                Ok(text) => return Ok(text),
                Err(e) => e,
            };
            let retryable = match &err {
                ProposerError::Transport { .. } => true,
                ProposerError::Status { code, .. } => *code == 429 || *code >= 500,
                _ => false,
            };
            if !retryable || attempt >= self.cfg.retries {
                return Err(err);
            }
            let wait = self.cfg.backoff * 2u32.pow(attempt);
            log::warn!("proposer request failed ({err}); retrying in {wait:?}");
            std::thread::sleep(wait);
            attempt += 1;
        }
    }

    fn post_once(&self, agent: &ureq::Agent, body: &str) -> Result<String, ProposerError> {
        let transport = |e: ureq::Error| ProposerError::Transport {
            endpoint: self.cfg.endpoint.clone(),
            msg: e.to_string(),
        };
        let mut req = agent.post(&self.cfg.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.cfg.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(transport)?;
        let code = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(transport)?;
        if !(200..300).contains(&code) {
            let mut body = text;
            body.truncate(512);
            return Err(ProposerError::Status { code, body });
        }
        Ok(text)
    }

    fn request_body(&self, messages: &[Value], temperature: f64, max_tokens: u32) -> String {
        json!({
            "model": self.cfg.model,
            "messages": messages,
            "temperature": temperature,
            "max_tokens": max_tokens,
        })
        .to_string()
    }

    /// Reasoning turn, then answer turn. Only transport-level failures are
    /// errors; anything the model says comes back as a [`Reply`].
    fn exchange(&self, task: String) -> Result<Reply, ProposerError> {
        let mut messages = vec![
            json!({"role": "system", "content": SYSTEM_PROMPT}),
            json!({"role": "user", "content": task}),
            json!({"role": "user", "content": THINK_INSTRUCTION}),
        ];
        let body = self.request_body(&messages, self.cfg.think_temperature, self.cfg.thinking_tokens);
        let reasoning = match message_content(&self.send(&body)?) {
            Ok(t) => t,
            Err(why) => return Ok(Reply::Unusable(why)),
        };
        messages.push(json!({"role": "assistant", "content": reasoning}));
        messages.push(json!({"role": "user", "content": ANSWER_INSTRUCTION}));
        let body = self.request_body(&messages, self.cfg.answer_temperature, self.cfg.answer_tokens);
        let text = match message_content(&self.send(&body)?) {
            Ok(t) => t,
            Err(why) => return Ok(Reply::Unusable(why)),
        };
        Ok(match extract_answer(&text) {
            Some(a) => Reply::Answer(a.to_string()),
            None => Reply::Unusable("reply has no <answer> block".into()),
        })
    }

    /// Runs one exchange and turns its answer into `n` slot outcomes.
    fn batch(&self, task: String, n: usize) -> Result<Vec<SlotOutcome>, ProposerError> {
        Ok(match self.exchange(task)? {
            Reply::Unusable(why) => vec![Err(rejection(why)); n],
            Reply::Answer(answer) => {
                let mut out: Vec<SlotOutcome> = split_loss_texts(&answer).into_iter().take(n).map(|t| parse_loss(&t)).collect();
                let got = out.len();
                out.extend((got..n).map(|_| Err(rejection(format!("answer held {got} loss files, {n} requested")))));
                out
            }
        })
    }

    pub fn propose_initial(&self, n: usize) -> Result<Vec<SlotOutcome>, ProposerError> {
        let mut slots = dedup(self.batch(initial_prompt(n), n)?, &[]);
        for round in 0..self.cfg.refill_rounds {
            let missing: Vec<usize> = (0..n).filter(|&i| slots[i].is_err()).collect();
            if missing.is_empty() {
                break;
            }
            log::info!("refill round {}: {} empty slots", round + 1, missing.len());
            let fresh = self.batch(initial_prompt(missing.len()), missing.len())?;
            let taken: Vec<String> = slots.iter().flatten().map(render).collect();
            for (slot, outcome) in missing.into_iter().zip(dedup(fresh, &taken)) {
                if outcome.is_ok() {
                    slots[slot] = outcome;
                }
            }
        }
        Ok(slots)
    }

    fn mutate_one(&self, fb: &Feedback, c: usize) -> Result<Vec<SlotOutcome>, ProposerError> {
        let parent = vec![render(&fb.parent.loss)];
        let mut slots = dedup(self.batch(refine_prompt(fb, c), c)?, &parent);
        for _ in 0..self.cfg.refill_rounds {
            let missing: Vec<usize> = (0..c).filter(|&i| slots[i].is_err()).collect();
            if missing.is_empty() {
                break;
            }
            let fresh = self.batch(refine_prompt(fb, missing.len()), missing.len())?;
            let mut taken = parent.clone();
            taken.extend(slots.iter().flatten().map(render));
            for (slot, outcome) in missing.into_iter().zip(dedup(fresh, &taken)) {
                if outcome.is_ok() {
                    slots[slot] = outcome;
                }
            }
        }
        Ok(slots)
    }

    /// Children for each `(feedback, c)` request, at most `max_in_flight`
    /// exchanges at a time; results keep request order.
    pub fn mutate_many(&self, requests: &[(Feedback, usize)]) -> Result<Vec<Vec<SlotOutcome>>, ProposerError> {
        let mut out = Vec::with_capacity(requests.len());
        for chunk in requests.chunks(self.cfg.max_in_flight.max(1)) {
            let results: Vec<_> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|(fb, c)| s.spawn(move || self.mutate_one(fb, *c))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(ProposerError::Io("proposer worker panicked".into()))))
                    .collect()
            });
            for r in results {
                out.push(r?);
            }
        }
        Ok(out)
    }
}

fn rejection(reason: String) -> Rejection {
    Rejection { reason, probe: None }
}

/// Marks repeats (of each other or of `taken`) as failed slots.
fn dedup(slots: Vec<SlotOutcome>, taken: &[String]) -> Vec<SlotOutcome> {
    let mut seen: Vec<String> = taken.to_vec();
    slots
        .into_iter()
        .map(|s| {
            let loss = s?;
            let key = render(&loss);
            if seen.contains(&key) {
                return Err(rejection(format!("duplicate proposal {key:?}")));
            }
            seen.push(key);
            Ok(loss)
        })
        .collect()
}

fn parse_loss(text: &str) -> SlotOutcome {
    let raw = parse_raw(text).map_err(|e| rejection(format!("unparseable loss file: {e}")))?;
    repair(&raw).map(|l| canonicalize(&l))
}

/// Content of the first choice of a chat-completions response.
fn message_content(body: &str) -> Result<String, String> {
    let v: Value = serde_json::from_str(body).map_err(|e| format!("malformed response JSON: {e}"))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| "response has no choices[0].message.content".to_string())
}

/// Text between the last `<answer>` and the following `</answer>`.
pub fn extract_answer(text: &str) -> Option<&str> {
    let start = text.rfind("<answer>")? + "<answer>".len();
    let end = text[start..].find("</answer>")? + start;
    Some(text[start..end].trim())
}

/// Splits an answer block into loss files, one per `epochs:` header.
/// Code fences are dropped; text before the first header belongs to the
/// first file.
pub fn split_loss_texts(answer: &str) -> Vec<String> {
    let mut files: Vec<String> = Vec::new();
    let mut current = String::new();
    let mut has_header = false;
    for line in answer.lines() {
        let t = line.trim();
        if t.starts_with("```") {
            continue;
        }
        if t.starts_with("epochs:") && has_header {
            files.push(std::mem::take(&mut current));
        }
        has_header |= t.starts_with("epochs:");
        current.push_str(line);
        current.push('\n');
    }
    if !current.trim().is_empty() {
        files.push(current);
    }
    files
}

const SYSTEM_PROMPT: &str = "You design loss functions for machine unlearning: a model must forget \
one set of question/answer pairs (the forget set) while keeping its knowledge of another (the retain set).

A loss file has a header line `epochs: K` (K an integer from 1 to 10, the number of optimisation epochs) \
followed by one s-expression `(mean BODY)`. The loss is minimised.

BODY may use only these per-example statistics:
  zf      average log-probability of a forget answer under the current model
  zr      average log-probability of a retain answer under the current model
  zf_ref  the same forget statistic under the frozen original model
  zr_ref  the same retain statistic under the frozen original model
and numeric constants, combined with:
  (add a b) (sub a b) (mul a b) (div a b) (neg a) (scale k a)
  (exp a) (log a) (log_shifted a) (softplus a) (sigmoid a)
  (abs a) (square a) (relu a)
  (clamp_max c a) (clamp_min c a) (min c a) (max c a)
where `div` adds a small epsilon to its denominator's magnitude and `log_shifted a` is log(exp(a) + 1e-6).
Trees are limited to depth 12 and 64 nodes. Logs of quantities that can reach zero must be stabilised. \
Increasing zf lowers forgetting; decreasing zr harms utility.";

const THINK_INSTRUCTION: &str = "Think step by step about which loss shapes would work and why. \
Do not write the final loss files yet.";

const ANSWER_INSTRUCTION: &str = "CRITICAL OUTPUT FORMAT: reply with a single <answer>...</answer> block \
containing only the loss files, each starting with its `epochs: K` line, and nothing else.";

fn initial_prompt(n: usize) -> String {
    format!(
        "Propose {n} diverse, distinct candidate unlearning losses, each with its own epoch budget. \
Include simple baselines (gradient ascent on the forget set, gradient difference) as well as \
bounded or reference-relative forms."
    )
}

fn refine_prompt(fb: &Feedback, c: usize) -> String {
    let (f, u) = (fb.score.forget, fb.score.utility);
    let mut advice = Vec::new();
    if f < super::mutate::FEEDBACK_THRESHOLD {
        advice.push("Forgetting is too weak: increase forgetting pressure (larger forget coefficients, more epochs, or a stronger forget term).");
    }
    if u < super::mutate::FEEDBACK_THRESHOLD {
        advice.push("Utility is too low: protect the retain set (stronger retain term, reference anchoring, bounded forget term, or fewer epochs).");
    }
    if advice.is_empty() {
        advice.push("Both objectives are acceptable: make small refinements to coefficients, margins or nonlinearities.");
    }
    let history: Vec<String> = fb.history.iter().map(|h| format!("{h:.6}")).collect();
    let metrics = serde_json::to_string(&fb.metrics).unwrap_or_default();
    format!(
        "Here is a loss that was already evaluated.\n\nLoss file:\n{loss}\n\nEpoch budget: {epochs}\n\
Per-epoch training loss: [{history}]\nEvaluation metrics: {metrics}\n\
Selection score {score:.6} (forget {f:.6}, utility {u:.6}).\n\n{advice}\n\n\
Propose {c} distinct improved variants. You may adjust coefficients, margins or nonlinearities, \
add or remove reference-model terms, and change the epoch budget.",
        loss = render(&fb.parent.loss),
        epochs = fb.parent.loss.epochs,
        history = history.join(", "),
        score = fb.score.score,
        advice = advice.join(" "),
    )
}
