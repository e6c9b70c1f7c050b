//! Where candidate losses come from: a deterministic grammar engine, or a
//! chat-completions endpoint that writes DSL text.
//!
//! Both paths produce one outcome per requested slot. A slot either holds
//! a repaired, validated, canonical loss or the reason it could not be
//! filled; the search ledgers the latter as `generation_failed`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{canonicalize, render, repair, CandidateLoss, Loss, LossExpr, RawLoss, Rejection, Source};
use crate::metrics::{MetricsReport, SelectionScore};

pub mod grammar;
pub mod mutate;
pub mod remote;

pub use mutate::MutationKind;
pub use remote::{extract_answer, split_loss_texts, RemoteConfig, RemoteProposer, THINKING_PRESETS};

/// Everything the proposer sees about an evaluated parent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub parent: CandidateLoss,
    pub history: Vec<f64>,
    pub metrics: MetricsReport,
    pub score: SelectionScore,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProposerKind {
    Grammar { seed: u64 },
    Remote(RemoteConfig),
}

/// Failures that abort a run (as opposed to a single unfilled slot).
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProposerError {
    #[error("transport error talking to {endpoint}: {msg}")]
    Transport { endpoint: String, msg: String },
    #[error("endpoint returned HTTP {code}: {body}")]
    Status { code: u16, body: String },
    #[error("no recorded response for request {hash}")]
    ReplayMiss { hash: String },
    #[error("proposer configuration: {0}")]
    Config(String),
    #[error("proposer i/o: {0}")]
    Io(String),
}

/// One proposal slot: a ready loss, or why none was produced.
pub type SlotOutcome = Result<Loss, Rejection>;

/// Attempts per grammar slot before it is given up as failed.
const GRAMMAR_ATTEMPTS: usize = 64;
/// Attempts per mutation slot before it is given up as failed.
const MUTATION_ATTEMPTS: usize = 16;

/// Mixes integers into one well-spread 64-bit seed (splitmix64 steps).
pub fn stream_seed(parts: &[u64]) -> u64 {
    let mut x: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        x ^= p;
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x = z ^ (z >> 31);
    }
    x
}

/// Repair, validate and canonicalize a draft.
pub(crate) fn finish(expr: crate::dsl::Expr, epochs: Option<i64>) -> SlotOutcome {
    let raw = RawLoss {
        epochs,
        roots: vec![expr],
    };
    repair(&raw).map(|l| canonicalize(&l))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrammarProposer {
    pub seed: u64,
}

impl GrammarProposer {
    pub fn new(seed: u64) -> GrammarProposer {
        GrammarProposer { seed }
    }

    /// `n` distinct valid losses; slot `i` draws from its own stream, so a
    /// longer request extends a shorter one.
    pub fn propose_initial(&self, n: usize, stream: u64) -> Vec<SlotOutcome> {
        let mut seen = Vec::<String>::new();
        (0..n)
            .map(|slot| {
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[self.seed, stream, slot as u64]));
                for _ in 0..GRAMMAR_ATTEMPTS {
                    let body = grammar::sample_body(&mut rng);
                    let epochs = grammar::sample_epochs(&mut rng);
                    if let Ok(loss) = finish(body, Some(epochs as i64)) {
                        let key = render(&loss);
                        if !seen.contains(&key) {
                            seen.push(key);
                            return Ok(loss);
                        }
                    }
                }
                Err(Rejection {
                    reason: format!("no new valid sample after {GRAMMAR_ATTEMPTS} attempts"),
                    probe: None,
                })
            })
            .collect()
    }

    /// `c` children of `fb.parent`, each different from the parent and
    /// from its earlier siblings.
    pub fn mutate(&self, fb: &Feedback, c: usize, stream: u64) -> Vec<SlotOutcome> {
        let parent = canonicalize(&fb.parent.loss);
        let mut taken = vec![render(&parent)];
        (0..c)
            .map(|slot| {
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[
                    self.seed,
                    stream,
                    fb.parent.id,
                    slot as u64,
                ]));
                let mut last = String::from("no applicable mutation");
                for _ in 0..MUTATION_ATTEMPTS {
                    let kind = mutate::sample_kind(&mut rng, Some(fb));
                    let Some((mut body, mut epochs)) = mutate::apply(kind, &parent, &mut rng) else {
                        continue;
                    };
                    if rand::Rng::gen_bool(&mut rng, 0.3) {
                        if let Ok(expr) = LossExpr::new(body.clone()) {
                            let tmp = Loss { expr, epochs };
                            let second = mutate::sample_kind(&mut rng, Some(fb));
                            if let Some(d) = mutate::apply(second, &tmp, &mut rng) {
                                (body, epochs) = d;
                            }
                        }
                    }
                    match finish(body, Some(epochs as i64)) {
                        Ok(child) => {
                            let key = render(&child);
                            if !taken.contains(&key) {
                                taken.push(key);
                                return Ok(child);
                            }
                            last = "repeats the parent or a sibling".into();
                        }
                        Err(r) => last = r.to_string(),
                    }
                }
                Err(Rejection {
                    reason: format!("no valid child after {MUTATION_ATTEMPTS} attempts ({last})"),
                    probe: None,
                })
            })
            .collect()
    }
}

/// A ready-to-use proposer.
#[derive(Debug)]
pub enum Proposer {
    Grammar(GrammarProposer),
    Remote(RemoteProposer),
}

impl Proposer {
    pub fn new(kind: ProposerKind) -> Result<Proposer, ProposerError> {
        Ok(match kind {
            ProposerKind::Grammar { seed } => Proposer::Grammar(GrammarProposer::new(seed)),
            ProposerKind::Remote(cfg) => Proposer::Remote(RemoteProposer::new(cfg)?),
        })
    }

    pub fn source(&self) -> Source {
        match self {
            Proposer::Grammar(_) => Source::Grammar,
            Proposer::Remote(_) => Source::Remote,
        }
    }

    /// Short description for run headers; never includes credentials.
    pub fn describe(&self) -> String {
        match self {
            Proposer::Grammar(g) => format!("grammar(seed={})", g.seed),
            Proposer::Remote(r) => format!("remote(model={})", r.config().model),
        }
    }

    pub fn propose_initial(&self, n: usize, stream: u64) -> Result<Vec<SlotOutcome>, ProposerError> {
        match self {
            Proposer::Grammar(g) => Ok(g.propose_initial(n, stream)),
            Proposer::Remote(r) => r.propose_initial(n),
        }
    }

    /// Children for several parents; remote requests run concurrently up to
    /// the configured in-flight limit, results come back in request order.
    pub fn mutate_many(
        &self,
        requests: &[(Feedback, usize)],
        stream: u64,
    ) -> Result<Vec<Vec<SlotOutcome>>, ProposerError> {
        match self {
            Proposer::Grammar(g) => Ok(requests.iter().map(|(fb, c)| g.mutate(fb, *c, stream)).collect()),
            Proposer::Remote(r) => r.mutate_many(requests),
        }
    }
}
