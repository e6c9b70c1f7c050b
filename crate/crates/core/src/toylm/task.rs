use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Token, ToyError, EOS, EXTRACT, QUESTION, RESERVED};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QARecord {
    pub prompt: Vec<Token>,
    pub answer: Vec<Token>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paraphrase: Option<Vec<Token>>,
    pub perturbed: Vec<Vec<Token>>,
    pub extraction_prompts: Vec<Vec<Token>>,
}

impl QARecord {
    /// The answer without its terminating EOS.
    pub fn content(&self) -> &[Token] {
        match self.answer.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.answer,
        }
    }
}

/// Forget, retain and holdout splits, plus two background slices that are
/// trained on by both the base and the retrain model and serve as the extra
/// utility slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnTask {
    pub vocab: Vec<String>,
    pub forget: Vec<QARecord>,
    pub retain: Vec<QARecord>,
    pub holdout: Vec<QARecord>,
    #[serde(default)]
    pub neighbors: Vec<QARecord>,
    #[serde(default)]
    pub facts: Vec<QARecord>,
}

impl UnlearnTask {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Everything the original model is trained on.
    pub fn base_corpus(&self) -> Vec<&QARecord> {
        self.forget.iter().chain(self.retain_corpus()).collect()
    }

    /// Everything the retrain-from-scratch baseline is trained on.
    pub fn retain_corpus(&self) -> Vec<&QARecord> {
        self.retain
            .iter()
            .chain(&self.neighbors)
            .chain(&self.facts)
            .collect()
    }

    /// Structural checks after loading a task from disk.
    pub fn check(&self) -> Result<(), ToyError> {
        let v = self.vocab_size();
        if v < 4 {
            return Err(ToyError::InvalidArgument("vocabulary smaller than 4".into()));
        }
        if self.forget.is_empty() || self.retain.is_empty() || self.holdout.is_empty() {
            return Err(ToyError::InvalidArgument("forget, retain and holdout must be non-empty".into()));
        }
        let all = self
            .forget
            .iter()
            .chain(&self.retain)
            .chain(&self.holdout)
            .chain(&self.neighbors)
            .chain(&self.facts);
        for rec in all {
            if rec.answer.is_empty() || rec.prompt.is_empty() {
                return Err(ToyError::EmptySequence("prompt or answer"));
            }
            let seqs = std::iter::once(&rec.prompt)
                .chain(std::iter::once(&rec.answer))
                .chain(&rec.perturbed)
                .chain(&rec.extraction_prompts)
                .chain(rec.paraphrase.iter());
            for seq in seqs {
                if let Some(&token) = seq.iter().find(|&&t| t as usize >= v) {
                    return Err(ToyError::TokenOutOfRange { token, vocab: v });
                }
            }
        }
        let forget: BTreeSet<_> = self.forget.iter().collect();
        if self.retain.iter().chain(&self.holdout).any(|r| forget.contains(r))
            || self.retain.iter().any(|r| self.holdout.contains(r))
        {
            return Err(ToyError::InvalidArgument("splits overlap".into()));
        }
        Ok(())
    }
}

impl PartialOrd for QARecord {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for QARecord {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (&self.prompt, &self.answer).cmp(&(&other.prompt, &other.answer))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub n_forget: usize,
    pub n_retain: usize,
    pub n_holdout: usize,
    pub n_neighbors: usize,
    pub n_facts: usize,
    /// Number of content (answer) tokens shared by every split.
    pub n_content: usize,
    pub min_answer_len: usize,
    pub max_answer_len: usize,
    /// Probability that an answer follows the dominant successor of its
    /// previous content token; this is what entangles the splits.
    pub dominant_prob: f64,
    pub n_perturbed: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            n_forget: 8,
            n_retain: 32,
            n_holdout: 8,
            n_neighbors: 8,
            n_facts: 8,
            n_content: 24,
            min_answer_len: 3,
            max_answer_len: 5,
            dominant_prob: 0.8,
            n_perturbed: 4,
        }
    }
}

impl TaskConfig {
    fn total(&self) -> usize {
        self.n_forget + self.n_retain + self.n_holdout + self.n_neighbors + self.n_facts
    }

    fn check(&self) -> Result<(), ToyError> {
        let infeasible = |m: String| Err(ToyError::Infeasible(m));
        for (name, n) in [
            ("n_forget", self.n_forget),
            ("n_retain", self.n_retain),
            ("n_holdout", self.n_holdout),
        ] {
            if n < 4 {
                return infeasible(format!("{name} = {n} < 4"));
            }
        }
        if self.n_content < 2 {
            return infeasible("need at least 2 content tokens".into());
        }
        if self.min_answer_len == 0 || self.min_answer_len > self.max_answer_len {
            return infeasible(format!(
                "answer length range {}..={}",
                self.min_answer_len, self.max_answer_len
            ));
        }
        if !(0.0..=1.0).contains(&self.dominant_prob) {
            return infeasible(format!("dominant_prob {}", self.dominant_prob));
        }
        // distinct answers are required, so the content space must be big enough
        let capacity: f64 = (self.min_answer_len..=self.max_answer_len)
            .map(|l| (self.n_content as f64).powi(l as i32))
            .sum();
        if (self.total() as f64) > capacity / 2.0 {
            return infeasible(format!(
                "{} records exceed half of the {capacity} distinct answers",
                self.total()
            ));
        }
        Ok(())
    }
}

/// Builds a deterministic task from `seed`.
///
/// Each record asks about its own subject token (`[Q, subject]`), and its
/// answer is a walk through the content tokens that usually follows a
/// shared dominant-successor chain, then EOS. Subject-to-answer bigrams are
/// record-specific; content-to-content bigrams are shared across splits.
pub fn synth_task(seed: u64, config: &TaskConfig) -> Result<UnlearnTask, ToyError> {
    config.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_subjects = config.total();
    let first_content = RESERVED + n_subjects;
    let content = |i: usize| (first_content + i) as Token;

    // dominant successor: a random derangement of the content tokens
    let mut successor: Vec<usize> = (0..config.n_content).collect();
    loop {
        successor.shuffle(&mut rng);
        if successor.iter().enumerate().all(|(i, &s)| i != s) {
            break;
        }
    }

    let mut seen = BTreeSet::new();
    let mut records = Vec::with_capacity(n_subjects);
    for s in 0..n_subjects {
        let subject = (RESERVED + s) as Token;
        let mut answer;
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > 10_000 {
                return Err(ToyError::Infeasible("could not draw a distinct answer".into()));
            }
            let len = rng.gen_range(config.min_answer_len..=config.max_answer_len);
            let mut cur = rng.gen_range(0..config.n_content);
            let mut walk = vec![cur];
            while walk.len() < len {
                cur = if rng.gen_bool(config.dominant_prob) {
                    successor[cur]
                } else {
                    rng.gen_range(0..config.n_content)
                };
                walk.push(cur);
            }
            answer = walk.into_iter().map(content).collect::<Vec<_>>();
            if seen.insert(answer.clone()) {
                break;
            }
        }
        answer.push(EOS);

        let perturbed = (0..config.n_perturbed)
            .map(|_| {
                let mut p = answer.clone();
                let pos = rng.gen_range(0..p.len() - 1);
                let old = p[pos];
                let mut new = old;
                while new == old {
                    new = content(rng.gen_range(0..config.n_content));
                }
                p[pos] = new;
                p
            })
            .collect();
        let prompt = vec![QUESTION, subject];
        let extraction_prompts = vec![
            vec![EXTRACT[0], QUESTION, subject],
            vec![EXTRACT[1], QUESTION, subject],
            vec![QUESTION, subject, EXTRACT[2]],
        ];
        records.push(QARecord {
            prompt,
            answer,
            paraphrase: None,
            perturbed,
            extraction_prompts,
        });
    }

    let mut vocab: Vec<String> = ["<bos>", "<eos>", "<q>", "<x0>", "<x1>", "<x2>"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    vocab.extend((0..n_subjects).map(|s| format!("s{s}")));
    vocab.extend((0..config.n_content).map(|c| format!("c{c}")));

    let mut it = records.into_iter();
    let mut take = |n: usize| it.by_ref().take(n).collect::<Vec<_>>();
    let forget = take(config.n_forget);
    let retain = take(config.n_retain);
    let holdout = take(config.n_holdout);
    let neighbors = take(config.n_neighbors);
    let facts = take(config.n_facts);
    Ok(UnlearnTask {
        vocab,
        forget,
        retain,
        holdout,
        neighbors,
        facts,
    })
}
