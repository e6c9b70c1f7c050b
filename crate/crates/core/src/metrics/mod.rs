//! The evaluation battery `m(L)` and the scalar selection score `s(L)`.
//!
//! Forgetting is measured on the forget split (answer probability, greedy
//! ROUGE-L recall, best-of-K extraction). Utility is the harmonic mean of
//! nine values: probability, truth-ratio score and ROUGE-L on the retain
//! split and two background slices. Membership leakage uses the Min-K%
//! Prob attack and a rank-based AUC against the retrain baseline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::toylm::{self, generate_greedy, token_logprobs, QARecord, Token, ToyError, ToyModel, UnlearnTask};

mod report;

pub use report::{
    ForgetMetrics, ForgetTerms, MetricsReport, MuseMetrics, SelectionScore, SliceMetrics,
    UtilitySlices,
};

pub const DEFAULT_K_PERCENT: f64 = 40.0;
/// Greedy generations stop after this many tokens.
pub const DEFAULT_MAX_GEN_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error(transparent)]
    Model(#[from] ToyError),
    #[error("{0} is not finite")]
    NonFinite(&'static str),
    #[error("record has no {0}")]
    Missing(&'static str),
    #[error("k_percent {0} not in (0, 100]")]
    BadK(f64),
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[Token], b: &[Token]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `LCS(reference, candidate) / |reference|`; an empty reference scores 0.
pub fn rouge_l_recall(reference: &[Token], candidate: &[Token]) -> f64 {
    if reference.is_empty() {
        return 0.0;
    }
    lcs_len(reference, candidate) as f64 / reference.len() as f64
}

/// Geometric-mean per-token probability of the answer.
pub fn answer_prob(m: &ToyModel, rec: &QARecord) -> Result<f64, MetricError> {
    Ok(toylm::seq_logprob(m, &rec.prompt, &rec.answer)?.exp())
}

/// Geometric mean of the perturbed answers' normalized likelihoods over
/// the paraphrase's (the answer itself when no paraphrase exists).
pub fn truth_ratio(m: &ToyModel, rec: &QARecord) -> Result<f64, MetricError> {
    if rec.perturbed.is_empty() {
        return Err(MetricError::Missing("perturbed answers"));
    }
    let correct = rec.paraphrase.as_ref().unwrap_or(&rec.answer);
    let denom = toylm::seq_logprob(m, &rec.prompt, correct)?;
    let mut num = 0.0;
    for p in &rec.perturbed {
        num += toylm::seq_logprob(m, &rec.prompt, p)?;
    }
    num /= rec.perturbed.len() as f64;
    // ratio of probabilities, taken in log space
    let r = (num - denom).exp();
    if !r.is_finite() {
        return Err(MetricError::NonFinite("truth ratio"));
    }
    Ok(r)
}

/// Best-of-K attacker: the largest normalized answer likelihood over the
/// extraction prompts.
pub fn extraction_strength(m: &ToyModel, rec: &QARecord) -> Result<f64, MetricError> {
    if rec.extraction_prompts.is_empty() {
        return Err(MetricError::Missing("extraction prompts"));
    }
    let mut best: f64 = 0.0;
    for q in &rec.extraction_prompts {
        best = best.max(toylm::seq_logprob(m, q, &rec.answer)?.exp());
    }
    Ok(best)
}

/// Harmonic mean; 0 as soon as any value is 0 (its limit).
pub fn model_utility(values: &[f64]) -> f64 {
    if values.is_empty() || values.iter().any(|&v| v <= 0.0) {
        return 0.0;
    }
    values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>()
}

/// Verbatim overlap of the greedy continuation with the answer.
pub fn verbmem(m: &ToyModel, rec: &QARecord, max_len: usize) -> f64 {
    rouge_l_recall(&rec.answer, &generate_greedy(m, &rec.prompt, max_len))
}

/// Fraction of records whose greedy continuation contains the answer's
/// content span contiguously.
pub fn knowmem(m: &ToyModel, records: &[QARecord], max_len: usize) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let hits = records
        .iter()
        .filter(|r| {
            let span = r.content();
            let out = generate_greedy(m, &r.prompt, max_len);
            !span.is_empty() && out.windows(span.len()).any(|w| w == span)
        })
        .count();
    hits as f64 / records.len() as f64
}

/// Mean of the lowest `ceil(k% * n)` values.
pub fn min_k_of(logprobs: &[f64], k_percent: f64) -> Result<f64, MetricError> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(MetricError::BadK(k_percent));
    }
    if logprobs.is_empty() {
        return Err(MetricError::Missing("tokens"));
    }
    let mut sorted = logprobs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = ((k_percent * sorted.len() as f64 / 100.0).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[..n].iter().sum::<f64>() / n as f64)
}

/// Min-K% Prob membership score of `answer` after `prompt`.
pub fn min_k_prob(m: &ToyModel, prompt: &[Token], answer: &[Token], k_percent: f64) -> Result<f64, MetricError> {
    min_k_of(&token_logprobs(m, prompt, answer)?, k_percent)
}

/// Probability that a random member outscores a random non-member, ties
/// counting one half (Mann-Whitney U over mid-ranks).
pub fn auc(members: &[f64], nonmembers: &[f64]) -> f64 {
    assert!(!members.is_empty() && !nonmembers.is_empty(), "auc needs both groups");
    let mut all: Vec<(f64, bool)> = members
        .iter()
        .map(|&x| (x, true))
        .chain(nonmembers.iter().map(|&x| (x, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // rank sums doubled so tied mid-ranks stay integral
    let mut rank2_members: u64 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j share the mid-rank (i+1+j)/2
        let mid2 = (i + 1 + j) as u64;
        let count = all[i..j].iter().filter(|(_, m)| *m).count() as u64;
        rank2_members += mid2 * count;
        i = j;
    }
    let n1 = members.len() as u64;
    let n2 = nonmembers.len() as u64;
    let u2 = rank2_members - n1 * (n1 + 1);
    u2 as f64 / 2.0 / (n1 * n2) as f64
}

/// Relative AUC gap between two models' member/non-member separation.
pub fn privleak_from_scores(
    unlearn_members: &[f64],
    unlearn_nonmembers: &[f64],
    retrain_members: &[f64],
    retrain_nonmembers: &[f64],
) -> f64 {
    let a_u = auc(unlearn_members, unlearn_nonmembers);
    let a_r = auc(retrain_members, retrain_nonmembers);
    debug_assert!(a_r > 0.0);
    (a_u - a_r) / a_r
}

fn min_k_scores(m: &ToyModel, records: &[QARecord], k_percent: f64) -> Result<Vec<f64>, MetricError> {
    records
        .iter()
        .map(|r| min_k_prob(m, &r.prompt, &r.answer, k_percent))
        .collect()
}

/// PrivLeak with forget-set members and holdout non-members.
pub fn privleak(
    unlearned: &ToyModel,
    retrained: &ToyModel,
    task: &UnlearnTask,
    k_percent: f64,
) -> Result<f64, MetricError> {
    if task.holdout.is_empty() || task.forget.is_empty() {
        return Err(MetricError::Missing("holdout or forget records"));
    }
    Ok(privleak_from_scores(
        &min_k_scores(unlearned, &task.forget, k_percent)?,
        &min_k_scores(unlearned, &task.holdout, k_percent)?,
        &min_k_scores(retrained, &task.forget, k_percent)?,
        &min_k_scores(retrained, &task.holdout, k_percent)?,
    ))
}

fn mean(xs: impl IntoIterator<Item = Result<f64, MetricError>>) -> Result<f64, MetricError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for x in xs {
        sum += x?;
        n += 1;
    }
    if n == 0 {
        return Err(MetricError::Missing("records"));
    }
    Ok(sum / n as f64)
}

/// Knobs for [`evaluate_model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub k_percent: f64,
    pub max_gen_len: usize,
    pub forget_terms: ForgetTerms,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            k_percent: DEFAULT_K_PERCENT,
            max_gen_len: DEFAULT_MAX_GEN_LEN,
            forget_terms: ForgetTerms::All,
        }
    }
}

fn slice_metrics(m: &ToyModel, records: &[QARecord], max_len: usize) -> Result<SliceMetrics, MetricError> {
    Ok(SliceMetrics {
        rouge: mean(records.iter().map(|r| Ok(verbmem(m, r, max_len))))?,
        prob: mean(records.iter().map(|r| answer_prob(m, r)))?,
        truth_ratio: mean(records.iter().map(|r| truth_ratio(m, r)))?,
    })
}

/// Runs the full battery on an unlearned model.
pub fn evaluate_model(
    m: &ToyModel,
    retrained: &ToyModel,
    task: &UnlearnTask,
    opts: &EvalOptions,
) -> Result<MetricsReport, MetricError> {
    let max_len = opts.max_gen_len;
    let forget = ForgetMetrics {
        one_minus_rouge: 1.0 - mean(task.forget.iter().map(|r| Ok(verbmem(m, r, max_len))))?,
        one_minus_prob: 1.0 - mean(task.forget.iter().map(|r| answer_prob(m, r)))?,
        one_minus_extraction: 1.0 - mean(task.forget.iter().map(|r| extraction_strength(m, r)))?,
    };
    // background slices may be absent from hand-written tasks; fall back to retain
    let neighbors = if task.neighbors.is_empty() { &task.retain } else { &task.neighbors };
    let facts = if task.facts.is_empty() { &task.retain } else { &task.facts };
    let utility_slices = UtilitySlices {
        retain: slice_metrics(m, &task.retain, max_len)?,
        neighbors: slice_metrics(m, neighbors, max_len)?,
        facts: slice_metrics(m, facts, max_len)?,
    };
    let mu = model_utility(&utility_slices.components());
    let muse = MuseMetrics {
        verbmem_f: mean(task.forget.iter().map(|r| Ok(verbmem(m, r, max_len))))?,
        knowmem_f: knowmem(m, &task.forget, max_len),
        knowmem_r: knowmem(m, &task.retain, max_len),
        privleak: privleak(m, retrained, task, opts.k_percent)?,
    };
    let report = MetricsReport {
        forget,
        utility_slices,
        mu,
        muse: Some(muse),
        failure_flag: false,
    };
    if !report.all_finite() {
        return Err(MetricError::NonFinite("metric"));
    }
    Ok(report)
}

/// Equal-weight average of utility and the available forgetting terms;
/// zero for a failed candidate.
pub fn selection_score(r: &MetricsReport, terms: ForgetTerms) -> SelectionScore {
    if r.failure_flag {
        return SelectionScore {
            utility: 0.0,
            forget: 0.0,
            score: 0.0,
        };
    }
    let f = &r.forget;
    let forget = match terms {
        ForgetTerms::All => (f.one_minus_rouge + f.one_minus_prob + f.one_minus_extraction) / 3.0,
        ForgetTerms::RougeAndProb => (f.one_minus_rouge + f.one_minus_prob) / 2.0,
    };
    SelectionScore::new(r.mu, forget)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rouge_examples() {
        // "the cat sat" vs "the cat ran"
        assert_eq!(rouge_l_recall(&[10, 11, 12], &[10, 11, 13]), 2.0 / 3.0);
        assert_eq!(rouge_l_recall(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(rouge_l_recall(&[1, 2, 3], &[4, 5]), 0.0);
        assert_eq!(rouge_l_recall(&[1, 2], &[]), 0.0);
    }

    #[test]
    fn utility_examples() {
        assert!((model_utility(&[0.62; 9]) - 0.62).abs() < 1e-12);
        let mut v = [0.5; 9];
        v[4] = 0.25;
        assert!((model_utility(&v) - 0.45).abs() < 1e-15);
        v[4] = 0.0;
        assert_eq!(model_utility(&v), 0.0);
    }

    #[test]
    fn min_k_examples() {
        assert_eq!(min_k_of(&[-1.0, -2.0, -3.0, -4.0], 50.0).unwrap(), -3.5);
        assert_eq!(min_k_of(&[-1.0, -2.0, -3.0, -4.0], 100.0).unwrap(), -2.5);
        assert_eq!(min_k_of(&[-0.7], 10.0).unwrap(), -0.7);
        assert!(min_k_of(&[-1.0], 0.0).is_err());
        assert!(min_k_of(&[-1.0], 101.0).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8], &[0.1, 0.2]), 1.0);
        assert_eq!(auc(&[0.1, 0.2], &[0.9, 0.8]), 0.0);
        assert_eq!(auc(&[0.3, 0.7], &[0.5, 0.5]), 0.5);
        assert_eq!(auc(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]), 0.5);
    }

    #[test]
    fn selection_examples() {
        let s = SelectionScore::new(0.6, 0.8);
        assert_eq!(s.score, 0.7);
        let mut r = MetricsReport::failed();
        r.mu = 0.9;
        r.failure_flag = true;
        assert_eq!(selection_score(&r, ForgetTerms::All).score, 0.0);
    }

    #[test]
    fn retain_row_arithmetic() {
        let r = MetricsReport {
            forget: ForgetMetrics {
                one_minus_rouge: 0.61,
                one_minus_prob: 0.85,
                one_minus_extraction: 0.93,
            },
            mu: 0.62,
            ..MetricsReport::failed_with(false)
        };
        let s = selection_score(&r, ForgetTerms::All);
        assert!((s.forget - 0.7967).abs() < 1e-4);
        assert!((s.score - 0.7083).abs() < 1e-4);
        let s2 = selection_score(&r, ForgetTerms::RougeAndProb);
        assert!((s2.forget - 0.73).abs() < 1e-12);
    }
}
