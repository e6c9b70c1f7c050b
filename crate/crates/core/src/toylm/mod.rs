//! The unlearning target: a bigram softmax language model over a synthetic
//! question-answer corpus.
//!
//! Every parameter is one entry of a `V x V` logit table (row = previous
//! token, column = next token), so the Jacobian of a sequence's average
//! log-probability is available in closed form and the whole
//! loss → log-probability → logit chain is exact.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalgrad::EvalError;

mod task;
mod train;

pub use task::{synth_task, QARecord, TaskConfig, UnlearnTask};
pub use train::{
    batch_logprobs, fit_nll, generate_greedy, mean_answer_prob, pipeline_gradient, relearn,
    retrain_baseline, seq_logprob, token_logprobs, train_base, tune_lr, unlearn, TrainReport,
    DEFAULT_BASE_EPOCHS, DEFAULT_BASE_LR, DEFAULT_RELEARN_LR, DEFAULT_UNLEARN_LR,
};

pub type Token = u32;

pub const BOS: Token = 0;
pub const EOS: Token = 1;
/// Question marker that opens every prompt.
pub const QUESTION: Token = 2;
/// Markers used to build the extraction-attack rewrites of a prompt.
pub const EXTRACT: [Token; 3] = [3, 4, 5];
/// Number of reserved tokens before the subject tokens.
pub const RESERVED: usize = 6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ToyError {
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: Token, vocab: usize },
    #[error("empty {0}")]
    EmptySequence(&'static str),
    #[error("task configuration infeasible: {0}")]
    Infeasible(String),
    #[error("training diverged at epoch {epoch}: {what}")]
    Diverged { epoch: usize, what: String },
    #[error("loss evaluation failed at epoch {epoch}: {source}")]
    Eval { epoch: usize, source: EvalError },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Bigram softmax model. `logits` is row-major, `V * V` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub vocab_size: usize,
    pub logits: Vec<f64>,
}

impl ToyModel {
    /// All logits zero: every row is the uniform distribution.
    pub fn uniform(vocab_size: usize) -> ToyModel {
        assert!(vocab_size >= 4, "vocabulary needs BOS, EOS and content");
        ToyModel {
            vocab_size,
            logits: vec![0.0; vocab_size * vocab_size],
        }
    }

    pub fn from_logits(vocab_size: usize, logits: Vec<f64>) -> Result<ToyModel, ToyError> {
        if vocab_size < 4 {
            return Err(ToyError::InvalidArgument(format!("vocab_size {vocab_size} < 4")));
        }
        if logits.len() != vocab_size * vocab_size {
            return Err(ToyError::InvalidArgument(format!(
                "expected {} logits, got {}",
                vocab_size * vocab_size,
                logits.len()
            )));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(ToyError::InvalidArgument("non-finite logit".into()));
        }
        Ok(ToyModel { vocab_size, logits })
    }

    pub fn row(&self, context: Token) -> &[f64] {
        let v = self.vocab_size;
        let a = context as usize;
        &self.logits[a * v..(a + 1) * v]
    }

    pub fn logit_mut(&mut self, context: Token, next: Token) -> &mut f64 {
        let v = self.vocab_size;
        &mut self.logits[context as usize * v + next as usize]
    }

    /// Log-softmax of one row.
    pub fn log_probs(&self, context: Token) -> Vec<f64> {
        log_softmax(self.row(context))
    }

    /// Softmax of one row.
    pub fn probs(&self, context: Token) -> Vec<f64> {
        self.log_probs(context).into_iter().map(f64::exp).collect()
    }

    pub(crate) fn check_tokens(&self, seq: &[Token]) -> Result<(), ToyError> {
        match seq.iter().find(|&&t| t as usize >= self.vocab_size) {
            Some(&token) => Err(ToyError::TokenOutOfRange {
                token,
                vocab: self.vocab_size,
            }),
            None => Ok(()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.logits.iter().all(|x| x.is_finite())
    }
}

pub(crate) fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Log-softmax of every row, computed once per training step.
pub(crate) struct LogProbTable {
    v: usize,
    table: Vec<f64>,
}

impl LogProbTable {
    pub(crate) fn new(m: &ToyModel) -> LogProbTable {
        let v = m.vocab_size;
        let mut table = Vec::with_capacity(v * v);
        for a in 0..v {
            table.extend(log_softmax(m.row(a as Token)));
        }
        LogProbTable { v, table }
    }

    pub(crate) fn get(&self, context: Token, next: Token) -> f64 {
        self.table[context as usize * self.v + next as usize]
    }

    pub(crate) fn row(&self, context: Token) -> &[f64] {
        let a = context as usize;
        &self.table[a * self.v..(a + 1) * self.v]
    }
}
