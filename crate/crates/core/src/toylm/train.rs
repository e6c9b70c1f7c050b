use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LogProbTable, QARecord, Token, ToyError, ToyModel, UnlearnTask, BOS, EOS};
use crate::dsl::{Loss, LossExpr, ProbeBatch};
use crate::evalgrad;

/// Base-model step size: `tune_lr` halving from 1024 on the default task
/// stops here (the first rate with a monotone loss history).
pub const DEFAULT_BASE_LR: f64 = 64.0;
pub const DEFAULT_BASE_EPOCHS: usize = 300;
/// Unlearning step size. Large steps let forget-side terms overshoot and
/// drag shared bigrams down with them; 2 keeps builtin losses well-behaved.
pub const DEFAULT_UNLEARN_LR: f64 = 2.0;
pub const DEFAULT_RELEARN_LR: f64 = 1.0;

/// Per-epoch loss values `H(L)` and the resulting model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub per_epoch_loss: Vec<f64>,
    pub epochs_run: usize,
    pub final_model: ToyModel,
}

fn context_of(prompt: &[Token]) -> Token {
    prompt.last().copied().unwrap_or(BOS)
}

fn check_pair(m: &ToyModel, prompt: &[Token], answer: &[Token]) -> Result<(), ToyError> {
    if answer.is_empty() {
        return Err(ToyError::EmptySequence("answer"));
    }
    m.check_tokens(prompt)?;
    m.check_tokens(answer)
}

/// Log-probability of each answer token given its predecessor.
pub fn token_logprobs(m: &ToyModel, prompt: &[Token], answer: &[Token]) -> Result<Vec<f64>, ToyError> {
    if prompt.is_empty() {
        return Err(ToyError::EmptySequence("prompt"));
    }
    check_pair(m, prompt, answer)?;
    let mut prev = context_of(prompt);
    Ok(answer
        .iter()
        .map(|&b| {
            let lp = m.log_probs(prev)[b as usize];
            prev = b;
            lp
        })
        .collect())
}

/// Average per-token log-probability of `answer` after `prompt`.
pub fn seq_logprob(m: &ToyModel, prompt: &[Token], answer: &[Token]) -> Result<f64, ToyError> {
    if prompt.is_empty() {
        return Err(ToyError::EmptySequence("prompt"));
    }
    check_pair(m, prompt, answer)?;
    Ok(seq_logprob_table(&LogProbTable::new(m), prompt, answer))
}

fn seq_logprob_table(t: &LogProbTable, prompt: &[Token], answer: &[Token]) -> f64 {
    let mut prev = context_of(prompt);
    let mut sum = 0.0;
    for &b in answer {
        sum += t.get(prev, b);
        prev = b;
    }
    sum / answer.len() as f64
}

/// Adds `weight * d seq_logprob / d logits` into `grad`.
fn add_seq_grad(t: &LogProbTable, prompt: &[Token], answer: &[Token], weight: f64, grad: &mut [f64]) {
    let w = weight / answer.len() as f64;
    if w == 0.0 {
        return;
    }
    let v = t.v;
    let mut prev = context_of(prompt);
    for &b in answer {
        let base = prev as usize * v;
        for (j, lp) in t.row(prev).iter().enumerate() {
            grad[base + j] -= w * lp.exp();
        }
        grad[base + b as usize] += w;
        prev = b;
    }
}

fn check_records(m: &ToyModel, records: &[QARecord], what: &'static str) -> Result<(), ToyError> {
    if records.is_empty() {
        return Err(ToyError::EmptySequence(what));
    }
    for r in records {
        if r.prompt.is_empty() {
            return Err(ToyError::EmptySequence("prompt"));
        }
        check_pair(m, &r.prompt, &r.answer)?;
    }
    Ok(())
}

fn logprobs_of(t: &LogProbTable, records: &[QARecord]) -> Vec<f64> {
    records
        .iter()
        .map(|r| seq_logprob_table(t, &r.prompt, &r.answer))
        .collect()
}

/// The four statistic vectors for one step: current-model log-probabilities
/// of the forget and retain batches, and the same under `m_ref`.
pub fn batch_logprobs(
    m: &ToyModel,
    m_ref: &ToyModel,
    forget: &[QARecord],
    retain: &[QARecord],
) -> Result<ProbeBatch, ToyError> {
    check_records(m, forget, "forget batch")?;
    check_records(m, retain, "retain batch")?;
    check_records(m_ref, forget, "forget batch")?;
    check_records(m_ref, retain, "retain batch")?;
    let t = LogProbTable::new(m);
    let t_ref = LogProbTable::new(m_ref);
    let batch = ProbeBatch {
        zf: logprobs_of(&t, forget),
        zr: logprobs_of(&t, retain),
        zf_ref: logprobs_of(&t_ref, forget),
        zr_ref: logprobs_of(&t_ref, retain),
    };
    Ok(batch)
}

/// Loss value and `dL/dlogits` for `m`, with the reference statistics
/// already computed.
fn loss_and_grad(
    m: &ToyModel,
    zf_ref: &[f64],
    zr_ref: &[f64],
    forget: &[QARecord],
    retain: &[QARecord],
    expr: &LossExpr,
) -> Result<(f64, Vec<f64>), evalgrad::EvalError> {
    let t = LogProbTable::new(m);
    let batch = ProbeBatch {
        zf: logprobs_of(&t, forget),
        zr: logprobs_of(&t, retain),
        zf_ref: zf_ref.to_vec(),
        zr_ref: zr_ref.to_vec(),
    };
    let g = evalgrad::gradient(expr, &batch)?;
    let mut grad = vec![0.0; m.logits.len()];
    for (r, &d) in forget.iter().zip(&g.d_zf) {
        add_seq_grad(&t, &r.prompt, &r.answer, d, &mut grad);
    }
    for (r, &d) in retain.iter().zip(&g.d_zr) {
        add_seq_grad(&t, &r.prompt, &r.answer, d, &mut grad);
    }
    Ok((g.value, grad))
}

/// Loss value and its exact gradient with respect to every logit of `m`,
/// chained through the batch log-probabilities.
pub fn pipeline_gradient(
    m: &ToyModel,
    m_ref: &ToyModel,
    forget: &[QARecord],
    retain: &[QARecord],
    expr: &LossExpr,
) -> Result<(f64, Vec<f64>), ToyError> {
    let refs = batch_logprobs(m_ref, m_ref, forget, retain)?;
    check_records(m, forget, "forget batch")?;
    check_records(m, retain, "retain batch")?;
    loss_and_grad(m, &refs.zf, &refs.zr, forget, retain, expr)
        .map_err(|source| ToyError::Eval { epoch: 0, source })
}

/// Full-batch gradient descent on the mean negative average
/// log-likelihood of `records`. Returns the model and the loss before each
/// step.
pub fn fit_nll(
    init: ToyModel,
    records: &[&QARecord],
    lr: f64,
    epochs: usize,
) -> Result<(ToyModel, Vec<f64>), ToyError> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(ToyError::InvalidArgument(format!("learning rate {lr}")));
    }
    if records.is_empty() {
        return Err(ToyError::EmptySequence("training set"));
    }
    for r in records {
        check_pair(&init, &r.prompt, &r.answer)?;
    }
    let mut m = init;
    let mut history = Vec::with_capacity(epochs);
    let weight = 1.0 / records.len() as f64;
    for epoch in 0..epochs {
        let t = LogProbTable::new(&m);
        let mut grad = vec![0.0; m.logits.len()];
        let mut loss = 0.0;
        for r in records {
            loss -= weight * seq_logprob_table(&t, &r.prompt, &r.answer);
            add_seq_grad(&t, &r.prompt, &r.answer, weight, &mut grad);
        }
        if !loss.is_finite() {
            return Err(ToyError::Diverged {
                epoch,
                what: format!("loss {loss}"),
            });
        }
        history.push(loss);
        // ascent on log-likelihood = descent on the negative
        for (x, g) in m.logits.iter_mut().zip(&grad) {
            *x += lr * g;
        }
        if !m.is_finite() {
            return Err(ToyError::Diverged {
                epoch,
                what: "non-finite logits".into(),
            });
        }
    }
    Ok((m, history))
}

/// The original model: trained on forget, retain and background data.
///
/// Full-batch descent from the uniform model consumes no randomness; the
/// seed is accepted so every training entry point has the same signature.
pub fn train_base(task: &UnlearnTask, seed: u64, lr: f64, epochs: usize) -> Result<ToyModel, ToyError> {
    let _ = seed;
    let init = ToyModel::uniform(task.vocab_size());
    fit_nll(init, &task.base_corpus(), lr, epochs).map(|(m, _)| m)
}

/// Retrain-from-scratch baseline: as [`train_base`] without the forget set.
pub fn retrain_baseline(task: &UnlearnTask, seed: u64, lr: f64, epochs: usize) -> Result<ToyModel, ToyError> {
    let _ = seed;
    let init = ToyModel::uniform(task.vocab_size());
    fit_nll(init, &task.retain_corpus(), lr, epochs).map(|(m, _)| m)
}

/// Halves `lr` until base training on `task` has a non-increasing loss
/// history, giving up below `1e-6`.
pub fn tune_lr(task: &UnlearnTask, mut lr: f64, epochs: usize) -> Result<f64, ToyError> {
    let corpus = task.base_corpus();
    while lr >= 1e-6 {
        if let Ok((_, h)) = fit_nll(ToyModel::uniform(task.vocab_size()), &corpus, lr, epochs) {
            if h.windows(2).all(|w| w[1] <= w[0]) {
                return Ok(lr);
            }
        }
        lr /= 2.0;
    }
    Err(ToyError::Diverged {
        epoch: 0,
        what: "no monotone learning rate found".into(),
    })
}

/// Applies a candidate loss to `base` for `loss.epochs` full-batch steps.
///
/// The reference statistics come from `base` and stay fixed for the whole
/// run. Any non-finite loss, gradient or parameter ends training with an
/// error, which the search turns into a zero score.
pub fn unlearn(
    base: &ToyModel,
    task: &UnlearnTask,
    loss: &Loss,
    lr: f64,
    seed: u64,
) -> Result<TrainReport, ToyError> {
    // Full-batch steps are deterministic; see `train_base`.
    let _ = seed;
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(ToyError::InvalidArgument(format!("learning rate {lr}")));
    }
    let refs = batch_logprobs(base, base, &task.forget, &task.retain)?;
    let mut m = base.clone();
    let epochs = loss.epochs as usize;
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let (value, grad) = loss_and_grad(&m, &refs.zf, &refs.zr, &task.forget, &task.retain, &loss.expr)
            .map_err(|source| ToyError::Eval { epoch, source })?;
        history.push(value);
        for (x, g) in m.logits.iter_mut().zip(&grad) {
            *x -= lr * g;
        }
        if !m.is_finite() {
            return Err(ToyError::Diverged {
                epoch,
                what: "non-finite logits".into(),
            });
        }
    }
    Ok(TrainReport {
        per_epoch_loss: history,
        epochs_run: epochs,
        final_model: m,
    })
}

/// Argmax decoding from the last prompt token; stops after EOS or
/// `max_len` tokens. Ties go to the lowest token id.
pub fn generate_greedy(m: &ToyModel, prompt: &[Token], max_len: usize) -> Vec<Token> {
    let mut prev = context_of(prompt);
    let mut out = Vec::new();
    while out.len() < max_len {
        let row = m.row(prev);
        let mut best = 0;
        for (j, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = j;
            }
        }
        let next = best as Token;
        out.push(next);
        if next == EOS {
            break;
        }
        prev = next;
    }
    out
}

/// Mean length-normalized answer probability over `records`.
pub fn mean_answer_prob(m: &ToyModel, records: &[QARecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let t = LogProbTable::new(m);
    records
        .iter()
        .map(|r| seq_logprob_table(&t, &r.prompt, &r.answer).exp())
        .sum::<f64>()
        / records.len() as f64
}

/// Fine-tunes on a random `fraction` of the forget set and records the mean
/// forget-answer probability (over the whole forget set) at step 0 and then
/// every `interval` steps.
pub fn relearn(
    unlearned: &ToyModel,
    task: &UnlearnTask,
    fraction: f64,
    steps: usize,
    lr: f64,
    seed: u64,
    interval: usize,
) -> Result<Vec<(usize, f64)>, ToyError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(ToyError::InvalidArgument(format!("fraction {fraction} not in (0, 1]")));
    }
    if steps == 0 {
        return Err(ToyError::InvalidArgument("steps must be at least 1".into()));
    }
    if interval == 0 || interval > steps {
        return Err(ToyError::InvalidArgument(format!("interval {interval} not in 1..={steps}")));
    }
    if task.forget.is_empty() {
        return Err(ToyError::EmptySequence("forget set"));
    }
    let mut order: Vec<usize> = (0..task.forget.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ((fraction * task.forget.len() as f64).ceil() as usize).clamp(1, task.forget.len());
    let subset: Vec<&QARecord> = order[..n].iter().map(|&i| &task.forget[i]).collect();

    let mut m = unlearned.clone();
    let mut points = Vec::with_capacity(steps / interval + 1);
    points.push((0, mean_answer_prob(&m, &task.forget)));
    let mut done = 0;
    while done < steps {
        let chunk = interval.min(steps - done);
        m = fit_nll(m, &subset, lr, chunk)?.0;
        done += chunk;
        if done % interval == 0 {
            points.push((done, mean_answer_prob(&m, &task.forget)));
        }
    }
    Ok(points)
}
