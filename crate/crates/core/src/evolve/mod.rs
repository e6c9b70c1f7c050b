//! The search loop: propose, unlearn, evaluate, score, keep the best and
//! refine the top of each generation.
//!
//! Every evaluation slot ends up as one ledger line, including slots the
//! proposer could not fill. Generations are evaluated in parallel and
//! committed in id order, so the ledger does not depend on thread count.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dsl::{render, CandidateLoss, Lineage, Loss, Source};
use crate::metrics::{
    evaluate_model, selection_score, EvalOptions, ForgetTerms, MetricsReport, SelectionScore, DEFAULT_K_PERCENT,
    DEFAULT_MAX_GEN_LEN,
};
use crate::proposer::{Feedback, Proposer, ProposerError, SlotOutcome};
use crate::toylm::{
    retrain_baseline, synth_task, train_base, unlearn, TaskConfig, ToyError, ToyModel, TrainReport, UnlearnTask,
    DEFAULT_BASE_EPOCHS, DEFAULT_BASE_LR, DEFAULT_UNLEARN_LR,
};

mod ledger;

pub use ledger::{
    append_entries, generation_curve_csv, running_best, score_vs_n_csv, summary_csv, write_header, BestSoFar, Ledger,
    LedgerEntry, LedgerHeader, Status, ARTIFACT_VERSION,
};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Proposer(#[from] ProposerError),
    #[error("{path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },
    #[error("{path} line {line}: {msg}")]
    Corrupt { path: PathBuf, line: usize, msg: String },
    #[error("run seed {requested} does not match the ledger's seed {ledger}")]
    SeedMismatch { ledger: u64, requested: u64 },
    #[error("configuration differs from the ledger's: {0}")]
    ConfigMismatch(String),
    #[error("{0} already exists; resume it or choose another path")]
    AlreadyExists(PathBuf),
    #[error("invalid search configuration: {0}")]
    Config(String),
    #[error("task preparation failed: {0}")]
    Task(#[from] ToyError),
}

impl SearchError {
    pub(crate) fn io(path: &Path, err: std::io::Error) -> SearchError {
        SearchError::Io {
            path: path.to_path_buf(),
            err,
        }
    }
}

/// One refinement round: the best `parents` of the previous generation
/// each receive `children` mutations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Round {
    pub parents: usize,
    pub children: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub initial: usize,
    pub rounds: Vec<Round>,
}

impl Default for Schedule {
    /// 10 initial losses, then 5 parents x 5 children, then 3 x 10: 65.
    fn default() -> Schedule {
        Schedule {
            initial: 10,
            rounds: vec![
                Round {
                    parents: 5,
                    children: 5,
                },
                Round {
                    parents: 3,
                    children: 10,
                },
            ],
        }
    }
}

impl Schedule {
    /// Random sampling only: `n` initial losses, no refinement.
    pub fn sampling_only(n: usize) -> Schedule {
        Schedule {
            initial: n,
            rounds: Vec::new(),
        }
    }

    /// Slot count when every round finds its full quota of parents.
    pub fn total(&self) -> usize {
        self.initial + self.rounds.iter().map(|r| r.parents * r.children).sum::<usize>()
    }

    /// Parses rounds written as `K:C,K:C`; `0` or an empty string means
    /// no rounds.
    pub fn parse_rounds(spec: &str) -> Result<Vec<Round>, String> {
        let spec = spec.trim();
        if spec.is_empty() || spec == "0" {
            return Ok(Vec::new());
        }
        spec.split(',')
            .map(|part| {
                let (k, c) = part
                    .trim()
                    .split_once(':')
                    .ok_or_else(|| format!("round {part:?} is not of the form K:C"))?;
                let num = |s: &str| {
                    s.trim()
                        .parse::<usize>()
                        .ok()
                        .filter(|&n| n >= 1)
                        .ok_or_else(|| format!("round {part:?}: {s:?} is not a positive integer"))
                };
                Ok(Round {
                    parents: num(k)?,
                    children: num(c)?,
                })
            })
            .collect()
    }

    pub fn check(&self) -> Result<(), String> {
        if self.initial == 0 {
            return Err("initial population must be at least 1".into());
        }
        if self.rounds.iter().any(|r| r.parents == 0 || r.children == 0) {
            return Err("every round needs K >= 1 and C >= 1".into());
        }
        Ok(())
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.initial)?;
        for r in &self.rounds {
            write!(f, " -> {}:{}", r.parents, r.children)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposerChoice {
    Grammar,
    Remote,
}

impl FromStr for ProposerChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<ProposerChoice, String> {
        match s {
            "grammar" => Ok(ProposerChoice::Grammar),
            "remote" => Ok(ProposerChoice::Remote),
            _ => Err(format!("unknown proposer {s:?} (expected grammar or remote)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub seed: u64,
    pub task_seed: u64,
    pub schedule: Schedule,
    /// Unlearning learning rate.
    pub lr: f64,
    pub k_percent: f64,
    pub forget_terms: ForgetTerms,
    pub proposer: ProposerChoice,
    pub base_lr: f64,
    pub base_epochs: usize,
    pub max_gen_len: usize,
    pub task: TaskConfig,
    /// Evaluation threads; 0 uses every core. Does not affect results.
    #[serde(skip)]
    pub jobs: usize,
}

impl Default for SearchConfig {
    fn default() -> SearchConfig {
        SearchConfig {
            seed: 0,
            task_seed: 0,
            schedule: Schedule::default(),
            lr: DEFAULT_UNLEARN_LR,
            k_percent: DEFAULT_K_PERCENT,
            forget_terms: ForgetTerms::All,
            proposer: ProposerChoice::Grammar,
            base_lr: DEFAULT_BASE_LR,
            base_epochs: DEFAULT_BASE_EPOCHS,
            max_gen_len: DEFAULT_MAX_GEN_LEN,
            task: TaskConfig::default(),
            jobs: 0,
        }
    }
}

impl SearchConfig {
    pub fn check(&self) -> Result<(), SearchError> {
        self.schedule.check().map_err(SearchError::Config)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(SearchError::Config(format!("learning rate {}", self.lr)));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(SearchError::Config(format!("base learning rate {}", self.base_lr)));
        }
        if !(self.k_percent > 0.0 && self.k_percent <= 100.0) {
            return Err(SearchError::Config(format!("k_percent {} outside (0, 100]", self.k_percent)));
        }
        if self.max_gen_len == 0 {
            return Err(SearchError::Config("max_gen_len must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the result-determining fields.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            k_percent: self.k_percent,
            max_gen_len: self.max_gen_len,
            forget_terms: self.forget_terms,
        }
    }
}

/// The task and the two fixed models every candidate is judged against.
#[derive(Debug, Clone)]
pub struct SearchContext {
    pub task: UnlearnTask,
    pub base: ToyModel,
    pub retrained: ToyModel,
    pub lr: f64,
    pub opts: EvalOptions,
}

/// Outcome of training and scoring one loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub history: Vec<f64>,
    pub metrics: MetricsReport,
    pub score: SelectionScore,
    pub status: Status,
    pub detail: Option<String>,
}

impl SearchContext {
    pub fn build(cfg: &SearchConfig) -> Result<SearchContext, SearchError> {
        cfg.check()?;
        let task = synth_task(cfg.task_seed, &cfg.task)?;
        let base = train_base(&task, cfg.task_seed, cfg.base_lr, cfg.base_epochs)?;
        let retrained = retrain_baseline(&task, cfg.task_seed, cfg.base_lr, cfg.base_epochs)?;
        Ok(SearchContext::from_parts(task, base, retrained, cfg))
    }

    pub fn from_parts(task: UnlearnTask, base: ToyModel, retrained: ToyModel, cfg: &SearchConfig) -> SearchContext {
        SearchContext {
            task,
            base,
            retrained,
            lr: cfg.lr,
            opts: cfg.eval_options(),
        }
    }

    pub fn unlearn(&self, loss: &Loss) -> Result<TrainReport, ToyError> {
        unlearn(&self.base, &self.task, loss, self.lr, 0)
    }

    /// Unlearns from the base model and scores the result. Failures give a
    /// zero score with the matching status rather than an error.
    pub fn evaluate(&self, loss: &Loss) -> Evaluation {
        let failed = |status, detail: String, history| Evaluation {
            history,
            metrics: MetricsReport::failed(),
            score: SelectionScore::zero(),
            status,
            detail: Some(detail),
        };
        let report = match self.unlearn(loss) {
            Ok(r) => r,
            Err(e) => return failed(Status::TrainingFailed, e.to_string(), Vec::new()),
        };
        match evaluate_model(&report.final_model, &self.retrained, &self.task, &self.opts) {
            Ok(metrics) => Evaluation {
                score: selection_score(&metrics, self.opts.forget_terms),
                history: report.per_epoch_loss,
                metrics,
                status: Status::Ok,
                detail: None,
            },
            Err(e) => failed(Status::EvaluationFailed, e.to_string(), report.per_epoch_loss),
        }
    }
}

/// The `k` best `ok` entries, best first, ties to the lower id.
pub fn select_top_k(entries: &[LedgerEntry], k: usize) -> Vec<&LedgerEntry> {
    let mut ok: Vec<&LedgerEntry> = entries.iter().filter(|e| e.is_ok()).collect();
    ok.sort_by(|a, b| b.score.score.total_cmp(&a.score.score).then(a.id.cmp(&b.id)));
    ok.truncate(k);
    ok
}

pub fn feedback_for(entry: &LedgerEntry) -> Option<Feedback> {
    Some(Feedback {
        parent: entry.candidate.clone()?,
        history: entry.history.clone(),
        metrics: entry.metrics.clone(),
        score: entry.score,
    })
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best: Option<BestSoFar>,
    pub entries: Vec<LedgerEntry>,
    /// Entries evaluated by this call (0 for a resumed, finished run).
    pub evaluated: usize,
    /// A generation had no successful candidate to refine.
    pub stopped_early: bool,
}

/// Starts a new run, writing the ledger to `path`.
pub fn run_search(
    cfg: &SearchConfig,
    ctx: &SearchContext,
    proposer: &Proposer,
    path: &Path,
) -> Result<SearchOutcome, SearchError> {
    cfg.check()?;
    check_proposer(cfg, proposer)?;
    if path.exists() && std::fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false) {
        return Err(SearchError::AlreadyExists(path.to_path_buf()));
    }
    write_header(path, &LedgerHeader::new(cfg))?;
    drive(cfg, ctx, proposer, path, Vec::new())
}

/// Continues the run recorded in `path`; finished generations are kept
/// as they are.
pub fn resume(
    cfg: &SearchConfig,
    ctx: &SearchContext,
    proposer: &Proposer,
    path: &Path,
) -> Result<SearchOutcome, SearchError> {
    let ledger = Ledger::read(path)?;
    if ledger.header.run_seed != cfg.seed {
        return Err(SearchError::SeedMismatch {
            ledger: ledger.header.run_seed,
            requested: cfg.seed,
        });
    }
    if ledger.header.config_hash != cfg.hash() {
        return Err(SearchError::ConfigMismatch(format!(
            "ledger config hash {}, requested {}",
            ledger.header.config_hash,
            cfg.hash()
        )));
    }
    check_proposer(cfg, proposer)?;
    drive(cfg, ctx, proposer, path, ledger.entries)
}

fn check_proposer(cfg: &SearchConfig, proposer: &Proposer) -> Result<(), SearchError> {
    let matches = matches!(
        (cfg.proposer, proposer),
        (ProposerChoice::Grammar, Proposer::Grammar(_)) | (ProposerChoice::Remote, Proposer::Remote(_))
    );
    if !matches {
        return Err(SearchError::Config(format!(
            "configuration asks for the {:?} proposer but got {}",
            cfg.proposer,
            proposer.describe()
        )));
    }
    Ok(())
}

/// A filled or failed slot, before evaluation.
struct Planned {
    lineage: Option<Lineage>,
    loss: Option<Loss>,
    /// Why the slot is not evaluated; duplicates keep their loss.
    failure: Option<String>,
}

impl Planned {
    fn new(lineage: Option<Lineage>, outcome: SlotOutcome) -> Planned {
        match outcome {
            Ok(loss) => Planned {
                lineage,
                loss: Some(loss),
                failure: None,
            },
            Err(r) => Planned {
                lineage,
                loss: None,
                failure: Some(r.to_string()),
            },
        }
    }
}

fn drive(
    cfg: &SearchConfig,
    ctx: &SearchContext,
    proposer: &Proposer,
    path: &Path,
    mut entries: Vec<LedgerEntry>,
) -> Result<SearchOutcome, SearchError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| SearchError::Config(format!("thread pool: {e}")))?;
    let mut evaluated = 0;
    let mut stopped_early = false;
    for generation in 0..=cfg.schedule.rounds.len() as u32 {
        let plan = if generation == 0 {
            proposer
                .propose_initial(cfg.schedule.initial, 0)?
                .into_iter()
                .map(|o| Planned::new(None, o))
                .collect()
        } else {
            let round = cfg.schedule.rounds[generation as usize - 1];
            let previous: Vec<LedgerEntry> =
                entries.iter().filter(|e| e.generation == generation - 1).cloned().collect();
            let parents = select_top_k(&previous, round.parents);
            if parents.is_empty() {
                log::warn!("generation {} has no successful candidate; stopping", generation - 1);
                stopped_early = true;
                break;
            }
            let requests: Vec<(Feedback, usize)> = parents
                .iter()
                .map(|p| (feedback_for(p).expect("ok entries carry a candidate"), round.children))
                .collect();
            let children = proposer.mutate_many(&requests, generation as u64)?;
            let mut plan = Vec::new();
            for (parent, kids) in parents.iter().zip(children) {
                for o in kids {
                    let lineage = Lineage {
                        parent: parent.id,
                        generation: parent.generation,
                    };
                    plan.push(Planned::new(Some(lineage), o));
                }
            }
            plan
        };
        let plan = dedup_generation(plan);

        let first_id = entries.iter().filter(|e| e.generation < generation).count() as u64;
        let done = entries.iter().filter(|e| e.generation == generation).count();
        if done > plan.len() {
            return Err(SearchError::Corrupt {
                path: path.to_path_buf(),
                line: 0,
                msg: format!("generation {generation} has {done} entries but only {} slots", plan.len()),
            });
        }
        if done == plan.len() {
            continue;
        }
        if entries.len() as u64 != first_id + done as u64 {
            return Err(SearchError::Corrupt {
                path: path.to_path_buf(),
                line: 0,
                msg: format!("ledger ends inside an earlier generation than {generation}"),
            });
        }
        log::info!(
            "generation {generation}: evaluating {} of {} slots",
            plan.len() - done,
            plan.len()
        );
        let source = proposer.source();
        let fresh: Vec<LedgerEntry> = pool.install(|| {
            plan.par_iter()
                .enumerate()
                .skip(done)
                .map(|(slot, p)| make_entry(ctx, first_id + slot as u64, generation, source, p))
                .collect()
        });
        append_entries(path, &fresh)?;
        evaluated += fresh.len();
        entries.extend(fresh);
    }
    Ok(SearchOutcome {
        best: BestSoFar::scan(&entries),
        entries,
        evaluated,
        stopped_early,
    })
}

/// Later copies of a loss already proposed in this generation become
/// failed slots.
fn dedup_generation(plan: Vec<Planned>) -> Vec<Planned> {
    let mut seen: Vec<String> = Vec::new();
    plan.into_iter()
        .map(|mut p| {
            match (&p.loss, &p.failure) {
                (Some(loss), None) => {
                    let key = render(loss);
                    if let Some(i) = seen.iter().position(|k| *k == key) {
                        p.failure = Some(format!("duplicate of slot {i} in this generation"));
                    }
                    seen.push(key);
                }
                _ => seen.push(String::new()),
            }
            p
        })
        .collect()
}

fn make_entry(ctx: &SearchContext, id: u64, generation: u32, source: Source, p: &Planned) -> LedgerEntry {
    let eval = match (&p.loss, &p.failure) {
        (Some(loss), None) => ctx.evaluate(loss),
        (_, why) => Evaluation {
            history: Vec::new(),
            metrics: MetricsReport::failed(),
            score: SelectionScore::zero(),
            status: Status::GenerationFailed,
            detail: why.clone(),
        },
    };
    let candidate = p.loss.as_ref().map(|loss| {
        let c = CandidateLoss::new(id, loss.clone(), source);
        match p.lineage {
            Some(l) => c.with_lineage(l),
            None => c,
        }
    });
    LedgerEntry {
        id,
        generation,
        source,
        lineage: p.lineage,
        candidate,
        history: eval.history,
        metrics: eval.metrics,
        score: eval.score,
        status: eval.status,
        detail: eval.detail,
    }
}
