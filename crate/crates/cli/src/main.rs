//! `unlearn-search`: run loss searches, score single losses, probe
//! relearning and export results.
//!
//! Machine-readable results go to stdout, diagnostics to stderr.
//! Exit codes: 0 success, 1 configuration or usage error, 2 proposer
//! failure, 3 I/O failure, 4 invalid loss.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use unlearn_search::dsl::{builtin, builtin_library, parse, render, standard_probes, validate, Loss, Verdict};
use unlearn_search::evolve::{
    generation_curve_csv, resume, run_search, score_vs_n_csv, summary_csv, Ledger, ProposerChoice, Schedule,
    SearchConfig, SearchContext, SearchError, SearchOutcome, ARTIFACT_VERSION,
};
use unlearn_search::metrics::ForgetTerms;
use unlearn_search::proposer::{Proposer, ProposerError, ProposerKind, RemoteConfig};
use unlearn_search::toylm::{relearn, synth_task, ToyModel, UnlearnTask, DEFAULT_RELEARN_LR};

const LEDGER: &str = "ledger.jsonl";
const MANIFEST: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(name = "unlearn-search", version, about = "Evolutionary search for unlearning losses on a toy model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a new search into a fresh run directory.
    Search(SearchArgs),
    /// Continue an interrupted search.
    Resume(ResumeArgs),
    /// Unlearn with one loss file and print its metrics.
    Evaluate(EvaluateArgs),
    /// Fine-tune a checkpoint on part of the forget set and trace recovery.
    Relearn(RelearnArgs),
    /// Write plotting tables or the builtin loss library.
    Export(ExportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProposerArg {
    Grammar,
    Remote,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ForgetTermsArg {
    All,
    RougeAndProb,
}

impl From<ForgetTermsArg> for ForgetTerms {
    fn from(a: ForgetTermsArg) -> ForgetTerms {
        match a {
            ForgetTermsArg::All => ForgetTerms::All,
            ForgetTermsArg::RougeAndProb => ForgetTerms::RougeAndProb,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct TaskArgs {
    #[arg(long, default_value_t = 0)]
    task_seed: u64,
    /// Unlearning learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    k_percent: Option<f64>,
    #[arg(long, value_enum)]
    forget_terms: Option<ForgetTermsArg>,
}

impl TaskArgs {
    fn apply(&self, cfg: &mut SearchConfig) {
        cfg.task_seed = self.task_seed;
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        if let Some(k) = self.k_percent {
            cfg.k_percent = k;
        }
        if let Some(t) = self.forget_terms {
            cfg.forget_terms = t.into();
        }
    }
}

#[derive(Args, Debug)]
struct RemoteArgs {
    /// Serve proposer responses from a recorded JSONL file.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Record live proposer exchanges to a JSONL file.
    #[arg(long, conflicts_with = "replay")]
    record: Option<PathBuf>,
    /// Extra proposer exchanges to fill invalid slots (remote only).
    #[arg(long, default_value_t = 0)]
    refill: u32,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value_t = 10)]
    initial: usize,
    /// Refinement rounds as `K:C,K:C`; `0` for sampling only.
    #[arg(long, default_value = "5:5,3:10")]
    rounds: String,
    #[arg(long, value_enum, default_value = "grammar")]
    proposer: ProposerArg,
    /// Concurrent candidate evaluations (0: all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    remote: RemoteArgs,
}

#[derive(Args, Debug)]
struct ResumeArgs {
    /// Run directory written by `search`.
    #[arg(long)]
    out: PathBuf,
    /// Must match the run's seed when given.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    #[command(flatten)]
    remote: RemoteArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Loss file to evaluate.
    #[arg(required_unless_present = "builtin", conflicts_with = "builtin")]
    loss: Option<PathBuf>,
    /// Evaluate a builtin loss by name instead of a file.
    #[arg(long)]
    builtin: Option<String>,
    #[command(flatten)]
    task: TaskArgs,
    /// Also write the unlearned model to this file.
    #[arg(long)]
    save_model: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RelearnArgs {
    /// Model checkpoint (JSON) to relearn from.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Task JSON; generated from --task-seed when absent.
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    task_seed: u64,
    #[arg(long, default_value_t = 0.2)]
    fraction: f64,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    steps: u64,
    /// Steps between trajectory points.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    interval: u64,
    #[arg(long, default_value_t = DEFAULT_RELEARN_LR)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ExportFormat {
    /// Ledger summary and score curves as CSV.
    Csv,
    /// The builtin loss library, one file per loss.
    Losses,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long, value_enum, default_value = "csv")]
    format: ExportFormat,
    /// Run directory (required for csv).
    #[arg(long)]
    run: Option<PathBuf>,
    /// Destination directory; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Error tagged with its exit code.
#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Proposer(anyhow::Error),
    Io(anyhow::Error),
    InvalidLoss(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Proposer(_) => 2,
            Failure::Io(_) => 3,
            Failure::InvalidLoss(_) => 4,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Proposer(e) | Failure::Io(e) | Failure::InvalidLoss(e) => e,
        }
    }
}

impl From<SearchError> for Failure {
    fn from(e: SearchError) -> Failure {
        match e {
            SearchError::Proposer(p) => Failure::from(p),
            e @ (SearchError::Io { .. } | SearchError::Corrupt { .. }) => Failure::Io(e.into()),
            e => Failure::Config(e.into()),
        }
    }
}

impl From<ProposerError> for Failure {
    fn from(e: ProposerError) -> Failure {
        match e {
            ProposerError::Config(_) => Failure::Config(e.into()),
            _ => Failure::Proposer(e.into()),
        }
    }
}

fn io_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Io(e.into())
}

type CliResult<T> = Result<T, Failure>;

/// Written once per run directory.
#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    artifact_version: String,
    tool_version: String,
    out_dir: PathBuf,
    config: SearchConfig,
    config_hash: String,
    proposer: String,
    created_at: String,
    updated_at: String,
    completed: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Search(a) => cmd_search(a),
        Command::Resume(a) => cmd_resume(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Relearn(a) => cmd_relearn(a),
        Command::Export(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Io(e.into()))?;
    std::fs::write(path, text + "\n")
        .with_context(|| format!("writing {}", path.display()))
        .map_err(io_err)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(io_err)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(io_err)
}

fn make_proposer(choice: ProposerChoice, seed: u64, remote: &RemoteArgs) -> CliResult<Proposer> {
    let kind = match choice {
        ProposerChoice::Grammar => ProposerKind::Grammar { seed },
        ProposerChoice::Remote => {
            let mut cfg = RemoteConfig::from_env()?;
            cfg.replay = remote.replay.clone();
            cfg.record = remote.record.clone();
            cfg.refill_rounds = remote.refill;
            log::debug!("remote proposer: {cfg:?}");
            ProposerKind::Remote(cfg)
        }
    };
    Ok(Proposer::new(kind)?)
}

fn cmd_search(a: SearchArgs) -> CliResult<()> {
    let rounds = Schedule::parse_rounds(&a.rounds).map_err(|e| Failure::Config(anyhow!(e)))?;
    let mut cfg = SearchConfig {
        seed: a.seed,
        schedule: Schedule {
            initial: a.initial,
            rounds,
        },
        proposer: match a.proposer {
            ProposerArg::Grammar => ProposerChoice::Grammar,
            ProposerArg::Remote => ProposerChoice::Remote,
        },
        jobs: a.jobs,
        ..SearchConfig::default()
    };
    a.task.apply(&mut cfg);
    cfg.check()?;
    let ledger = a.out.join(LEDGER);
    if ledger.exists() {
        return Err(Failure::Config(anyhow!(
            "{} already holds a run; use `resume --out {}`",
            a.out.display(),
            a.out.display()
        )));
    }
    let proposer = make_proposer(cfg.proposer, cfg.seed, &a.remote)?;
    std::fs::create_dir_all(&a.out)
        .with_context(|| format!("creating {}", a.out.display()))
        .map_err(io_err)?;

    log::info!("preparing task {} and reference models", cfg.task_seed);
    let ctx = SearchContext::build(&cfg)?;
    write_json(&a.out.join("task.json"), &ctx.task)?;
    write_json(&a.out.join("base_model.json"), &ctx.base)?;
    write_json(&a.out.join("retrain_model.json"), &ctx.retrained)?;
    let mut manifest = RunManifest {
        artifact_version: ARTIFACT_VERSION.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        out_dir: a.out.clone(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        proposer: proposer.describe(),
        created_at: now(),
        updated_at: now(),
        completed: false,
    };
    write_json(&a.out.join(MANIFEST), &manifest)?;

    log::info!("searching: schedule {}, proposer {}", cfg.schedule, proposer.describe());
    let outcome = run_search(&cfg, &ctx, &proposer, &ledger)?;
    finish_run(&a.out, &ctx, &outcome, &mut manifest)
}

fn cmd_resume(a: ResumeArgs) -> CliResult<()> {
    let mut manifest: RunManifest = read_json(&a.out.join(MANIFEST))?;
    let ledger = Ledger::read(&a.out.join(LEDGER))?;
    let mut cfg = ledger.header.config.clone();
    cfg.jobs = a.jobs;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let proposer = make_proposer(cfg.proposer, cfg.seed, &a.remote)?;
    let task: UnlearnTask = read_json(&a.out.join("task.json"))?;
    let base: ToyModel = read_json(&a.out.join("base_model.json"))?;
    let retrained: ToyModel = read_json(&a.out.join("retrain_model.json"))?;
    let ctx = SearchContext::from_parts(task, base, retrained, &cfg);
    let outcome = resume(&cfg, &ctx, &proposer, &ledger.path)?;
    log::info!("resume evaluated {} new entries", outcome.evaluated);
    finish_run(&a.out, &ctx, &outcome, &mut manifest)
}

/// Writes the best loss, its model and the summary; prints a JSON digest.
fn finish_run(dir: &Path, ctx: &SearchContext, outcome: &SearchOutcome, manifest: &mut RunManifest) -> CliResult<()> {
    std::fs::write(dir.join("summary.csv"), summary_csv(&outcome.entries))
        .context("writing summary.csv")
        .map_err(io_err)?;
    let best = outcome.best.as_ref();
    if let Some(b) = best {
        let loss = &b.candidate().loss;
        std::fs::write(dir.join("best_loss.txt"), render(loss))
            .context("writing best_loss.txt")
            .map_err(io_err)?;
        match ctx.unlearn(loss) {
            Ok(report) => write_json(&dir.join("best_model.json"), &report.final_model)?,
            Err(e) => log::warn!("could not rebuild the best model: {e}"),
        }
    }
    manifest.updated_at = now();
    manifest.completed = true;
    write_json(&dir.join(MANIFEST), manifest)?;
    let digest = json!({
        "run_dir": dir,
        "entries": outcome.entries.len(),
        "evaluated": outcome.evaluated,
        "stopped_early": outcome.stopped_early,
        "best_id": best.map(|b| b.entry.id),
        "best_score": best.map(|b| b.score()),
        "best_loss": best.map(|b| render(&b.candidate().loss)),
    });
    println!("{digest}");
    Ok(())
}

fn load_loss(a: &EvaluateArgs) -> CliResult<Loss> {
    let loss = match (&a.builtin, &a.loss) {
        (Some(name), _) => builtin(name).ok_or_else(|| Failure::Config(anyhow!("unknown builtin loss {name:?}")))?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(io_err)?;
            parse(&text)
                .with_context(|| format!("{} is not a valid loss file", path.display()))
                .map_err(Failure::InvalidLoss)?
        }
        (None, None) => return Err(Failure::Config(anyhow!("no loss given"))),
    };
    if let Verdict::Invalid { probe, reason } = validate(&loss, &standard_probes()) {
        return Err(Failure::InvalidLoss(anyhow!("loss fails on the {probe} probe: {reason}")));
    }
    Ok(loss)
}

fn cmd_evaluate(a: EvaluateArgs) -> CliResult<()> {
    let loss = load_loss(&a)?;
    let mut cfg = SearchConfig::default();
    a.task.apply(&mut cfg);
    let ctx = SearchContext::build(&cfg)?;
    let eval = ctx.evaluate(&loss);
    if let Some(path) = &a.save_model {
        let model = ctx.unlearn(&loss).map_err(|e| Failure::Config(e.into()))?.final_model;
        write_json(path, &model)?;
    }
    let out = json!({
        "loss": render(&loss),
        "status": eval.status,
        "detail": eval.detail,
        "history": eval.history,
        "metrics": eval.metrics,
        "score": eval.score,
    });
    println!("{out}");
    Ok(())
}

fn cmd_relearn(a: RelearnArgs) -> CliResult<()> {
    if a.interval > a.steps {
        return Err(Failure::Config(anyhow!("--interval {} exceeds --steps {}", a.interval, a.steps)));
    }
    let model: ToyModel = read_json(&a.checkpoint)?;
    let task = match &a.task {
        Some(p) => read_json(p)?,
        None => synth_task(a.task_seed, &Default::default()).map_err(|e| Failure::Config(e.into()))?,
    };
    if model.vocab_size != task.vocab_size() {
        return Err(Failure::Config(anyhow!(
            "checkpoint vocabulary {} does not match the task's {}",
            model.vocab_size,
            task.vocab_size()
        )));
    }
    let points = relearn(&model, &task, a.fraction, a.steps as usize, a.lr, a.seed, a.interval as usize)
        .map_err(|e| Failure::Config(e.into()))?;
    let mut out = String::from("step,forget_prob\n");
    for (step, p) in points {
        out.push_str(&format!("{step},{p}\n"));
    }
    print!("{out}");
    Ok(())
}

fn cmd_export(a: ExportArgs) -> CliResult<()> {
    match a.format {
        ExportFormat::Csv => {
            let run = a
                .run
                .as_ref()
                .ok_or_else(|| Failure::Config(anyhow!("--run is required for csv export")))?;
            let ledger = Ledger::read(&run.join(LEDGER))?;
            let out = a.out.clone().unwrap_or_else(|| run.clone());
            std::fs::create_dir_all(&out).map_err(io_err)?;
            let files = [
                ("summary.csv", summary_csv(&ledger.entries)),
                ("generations.csv", generation_curve_csv(&ledger.entries)),
                ("score_vs_n.csv", score_vs_n_csv(&ledger.entries)),
            ];
            for (name, body) in &files {
                std::fs::write(out.join(name), body)
                    .with_context(|| format!("writing {name}"))
                    .map_err(io_err)?;
            }
            println!("{}", json!({"out": out, "files": files.map(|(n, _)| n), "rows": ledger.entries.len()}));
        }
        ExportFormat::Losses => {
            let out = a
                .out
                .as_ref()
                .ok_or_else(|| Failure::Config(anyhow!("--out is required for losses export")))?;
            std::fs::create_dir_all(out)
                .with_context(|| format!("creating {}", out.display()))
                .map_err(io_err)?;
            let mut names = Vec::new();
            for (name, loss) in builtin_library() {
                std::fs::write(out.join(format!("{name}.loss")), render(&loss))
                    .with_context(|| format!("writing {name}.loss"))
                    .map_err(io_err)?;
                names.push(name);
            }
            println!("{}", json!({"out": out, "losses": names}));
        }
    }
    Ok(())
}
