//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so the report is always printed; exits non-zero if any fails.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use unlearn_search::dsl::{builtin, builtin_library, render, standard_probes, ProbeBatch};
use unlearn_search::evalgrad::{evaluate, finite_diff_check};
use unlearn_search::evolve::{running_best, Ledger, SearchConfig, SearchContext};
use unlearn_search::metrics::{
    auc, min_k_prob, model_utility, privleak, privleak_from_scores, rouge_l_recall, selection_score, MetricsReport,
    SelectionScore,
};
use unlearn_search::proposer::remote::request_hash;
use unlearn_search::proposer::GrammarProposer;
use unlearn_search::toylm::{batch_logprobs, mean_answer_prob, pipeline_gradient, seq_logprob, QARecord, ToyModel};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

struct Bench {
    dir: tempfile::TempDir,
    ctx: SearchContext,
}

impl Bench {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn cli(&self, args: &[&str]) -> Result<String, String> {
        let out = Command::new(env!("CARGO_BIN_EXE_unlearn-search"))
            .args(args)
            .env("RUST_LOG", "warn")
            .env_remove("UNLEARN_SEARCH_ENDPOINT")
            .env_remove("UNLEARN_SEARCH_MODEL")
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()));
        }
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    }

    /// Runs `search` into a fresh directory and returns the ledger.
    fn search(&self, name: &str, extra: &[&str]) -> Result<(Ledger, Duration), String> {
        let dir = self.path(name);
        let mut args = vec!["search", "--out", dir.to_str().unwrap()];
        args.extend_from_slice(extra);
        let t = Instant::now();
        self.cli(&args)?;
        let took = t.elapsed();
        Ok((Ledger::read(&dir.join("ledger.jsonl")).map_err(|e| e.to_string())?, took))
    }
}

fn best(ledger: &Ledger) -> f64 {
    ledger.best().map(|b| b.score()).unwrap_or(0.0)
}

// 1
fn gradient_correctness(_: &Bench) -> Check {
    let start = Instant::now();
    let probes = standard_probes();
    let mut worst: f64 = 0.0;
    let mut losses: Vec<_> = builtin_library().into_values().collect();
    let sampled = GrammarProposer::new(11).propose_initial(50, 0);
    ensure(sampled.iter().all(|s| s.is_ok()), "grammar left a slot empty")?;
    losses.extend(sampled.into_iter().flatten());
    for l in &losses {
        for p in &probes {
            worst = worst.max(finite_diff_check(&l.expr, &p.batch, 1e-5));
        }
    }
    ensure(worst <= 1e-5, format!("loss-level error {worst:.2e} > 1e-5"))?;

    let rec = |s: u32, a: &[u32]| QARecord {
        prompt: vec![2, s],
        answer: a.to_vec(),
        paraphrase: None,
        perturbed: vec![],
        extraction_prompts: vec![],
    };
    let forget = vec![rec(3, &[4, 5, 1]), rec(4, &[5, 1])];
    let retain = vec![rec(5, &[3, 4, 1]), rec(3, &[5, 4, 1])];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut model = || ToyModel::from_logits(6, (0..36).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let (m, m_ref) = (model(), model());
    let value = |m: &ToyModel, name: &str| {
        let live = batch_logprobs(m, m, &forget, &retain).unwrap();
        let refs = batch_logprobs(&m_ref, &m_ref, &forget, &retain).unwrap();
        evaluate(&builtin(name).unwrap().expr, &ProbeBatch::new(live.zf, live.zr, refs.zf, refs.zr).unwrap()).unwrap()
    };
    let mut pipe: f64 = 0.0;
    for name in ["tofu5", "graddiff", "muse_books", "nonsense_10"] {
        let (_, g) = pipeline_gradient(&m, &m_ref, &forget, &retain, &builtin(name).unwrap().expr)
            .map_err(|e| e.to_string())?;
        for i in 0..36 {
            let (mut up, mut down) = (m.clone(), m.clone());
            up.logits[i] += 1e-6;
            down.logits[i] -= 1e-6;
            let fd = (value(&up, name) - value(&down, name)) / 2e-6;
            pipe = pipe.max((g[i] - fd).abs() / fd.abs().max(1.0));
        }
    }
    ensure(pipe <= 1e-4, format!("pipeline error {pipe:.2e} > 1e-4"))?;
    let took = start.elapsed();
    ensure(took <= Duration::from_secs(10), format!("took {took:?}"))?;
    Ok(format!("{} losses, max error {worst:.1e}; 6x6 pipeline {pipe:.1e}; {took:.1?}", losses.len()))
}

// 2
fn golden_values(_: &Bench) -> Check {
    let b = ProbeBatch::new(vec![-1.0, -2.0], vec![-0.5], vec![-1.5, -1.5], vec![-1.0]).unwrap();
    let oracle = 1.2 * ((-1.0 - -1.5) + (-2.0 - -1.5)) / 2.0 + (-1.0 - -0.5);
    let tofu = evaluate(&builtin("tofu5").unwrap().expr, &b).map_err(|e| e.to_string())?;
    ensure((tofu - oracle).abs() < 1e-12 && (oracle + 0.5).abs() < 1e-15, format!("tofu5 {tofu}"))?;
    let b = ProbeBatch::new(vec![0.5], vec![-2.0], vec![0.0], vec![0.0]).unwrap();
    let news = evaluate(&builtin("muse_news").unwrap().expr, &b).map_err(|e| e.to_string())?;
    ensure(news == 0.35 * f64::min(2.5, 1.0) && news == 0.35, format!("muse_news {news}"))?;
    let zero = ProbeBatch::new(vec![0.0; 4], vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]).unwrap();
    for name in ["tofu5", "ga", "graddiff", "initial_1"] {
        let v = evaluate(&builtin(name).unwrap().expr, &zero).map_err(|e| e.to_string())?;
        ensure(v == 0.0, format!("{name} on zeros: {v}"))?;
    }
    Ok(format!("tofu5 {tofu}, muse_news {news}, affine builtins 0 on zeros"))
}

fn lcs_brute(a: &[u32], b: &[u32]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<u32> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
        let mut it = b.iter();
        if sub.len() > best && sub.iter().all(|x| it.any(|y| y == x)) {
            best = sub.len();
        }
    }
    best
}

// 3
fn metric_oracles(b: &Bench) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let x: Vec<u32> = (0..rng.gen_range(1..10)).map(|_| rng.gen_range(0..5)).collect();
        let y: Vec<u32> = (0..rng.gen_range(0..12)).map(|_| rng.gen_range(0..5)).collect();
        let oracle = lcs_brute(&x, &y) as f64 / x.len() as f64;
        ensure(rouge_l_recall(&x, &y) == oracle, format!("rouge {x:?} {y:?}"))?;
    }
    for _ in 0..200 {
        let m: Vec<f64> = (0..rng.gen_range(1..10)).map(|_| rng.gen_range(0..5) as f64).collect();
        let n: Vec<f64> = (0..rng.gen_range(1..10)).map(|_| rng.gen_range(0..5) as f64).collect();
        let mut wins = 0.0;
        for a in &m {
            for c in &n {
                wins += if a > c { 1.0 } else if a == c { 0.5 } else { 0.0 };
            }
        }
        let oracle = wins / (m.len() * n.len()) as f64;
        ensure(auc(&m, &n) == oracle, format!("auc {m:?} {n:?}"))?;
    }
    for v in [0.2, 0.62, 0.9] {
        ensure((model_utility(&[v; 9]) - v).abs() <= 1e-12, format!("harmonic mean of {v}"))?;
    }
    let mut worst: f64 = 0.0;
    for r in b.ctx.task.forget.iter().chain(&b.ctx.task.holdout) {
        let full = min_k_prob(&b.ctx.base, &r.prompt, &r.answer, 100.0).map_err(|e| e.to_string())?;
        worst = worst.max((full - seq_logprob(&b.ctx.base, &r.prompt, &r.answer).unwrap()).abs());
    }
    ensure(worst <= 1e-12, format!("min-k(100) off by {worst:.1e}"))?;
    Ok(format!("200 rouge pairs, 200 auc sets exact; min-k(100) error {worst:.0e}"))
}

// 4
fn privleak_identity(b: &Bench) -> Check {
    let c = &b.ctx;
    let same = privleak(&c.retrained, &c.retrained, &c.task, 40.0).map_err(|e| e.to_string())?;
    ensure(same == 0.0, format!("privleak(retrained, retrained) = {same}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let mut draw = || (0..10).map(|_| rng.gen_range(-6.0..0.0)).collect::<Vec<f64>>();
        let (um, un, rm, rn) = (draw(), draw(), draw(), draw());
        let v = privleak_from_scores(&um, &un, &rm, &rn);
        let t = |s: &[f64]| s.iter().map(|x| (2.0 * x).exp() + 3.0).collect::<Vec<_>>();
        ensure(privleak_from_scores(&t(&um), &t(&un), &t(&rm), &t(&rn)) == v, "not rank invariant")?;
    }
    Ok("identity 0 exactly; invariant under 100 monotone rescalings".into())
}

// 5
fn selection_score_rule(b: &Bench) -> Check {
    let s = SelectionScore::new(0.6, 0.8).score;
    ensure(s == 0.7, format!("0.5*0.6 + 0.5*0.8 gave {s}"))?;
    ensure(selection_score(&MetricsReport::failed(), Default::default()).score == 0.0, "failure not zeroed")?;
    let mut checked = 0;
    for entry in std::fs::read_dir(b.dir.path()).map_err(|e| e.to_string())? {
        let ledger_path = entry.map_err(|e| e.to_string())?.path().join("ledger.jsonl");
        if !ledger_path.exists() {
            continue;
        }
        let l = Ledger::read(&ledger_path).map_err(|e| e.to_string())?;
        for e in &l.entries {
            if !e.is_ok() {
                ensure(e.score.score == 0.0, format!("failed entry {} scored", e.id))?;
            }
            if let Some(p) = e.parent() {
                ensure(l.entries[p as usize].is_ok(), format!("entry {} descends from failed {p}", e.id))?;
            }
        }
        checked += 1;
    }
    ensure(checked >= 5, "no ledgers to inspect")?;
    Ok(format!("0.7 exact; failures score 0; no failed parents in {checked} ledgers"))
}

// 6
fn search_accounting(b: &Bench) -> Check {
    let (l, _) = b.search("acct-default", &["--seed", "0"])?;
    ensure(l.entries.len() == 65, format!("default run has {} entries", l.entries.len()))?;
    for n in [1, 10, 15, 25, 50] {
        let ns = n.to_string();
        let (l, _) = b.search(&format!("acct-n{n}"), &["--seed", "0", "--rounds", "0", "--initial", &ns])?;
        ensure(l.entries.len() == n, format!("--initial {n} gave {}", l.entries.len()))?;
    }
    Ok("65 = 10 + 5*5 + 3*10; sampling-only N in {1,10,15,25,50}".into())
}

// 7 and 9 share these runs
fn evolution_runs(b: &Bench) -> Result<Vec<(Ledger, Duration)>, String> {
    (0..5).map(|s| b.search(&format!("evo-{s}"), &["--seed", &s.to_string()])).collect()
}

fn best_so_far(b: &Bench) -> Check {
    let mut slowest = Duration::ZERO;
    for (s, (l, took)) in evolution_runs(b)?.iter().enumerate() {
        let curve = running_best(&l.entries);
        ensure(curve.windows(2).all(|w| w[1] >= w[0]), format!("seed {s} running best decreases"))?;
        ensure(*took <= Duration::from_secs(60), format!("seed {s} took {took:?}"))?;
        slowest = slowest.max(*took);
    }
    Ok(format!("monotone on 5 seeds; slowest run {slowest:.1?}"))
}

// 8
fn forgetting_direction(b: &Bench) -> Check {
    let c = &b.ctx;
    let t = &c.task;
    let run = |n: &str| c.unlearn(&builtin(n).unwrap()).map(|r| r.final_model).map_err(|e| e.to_string());
    let (ga, tofu) = (run("ga")?, run("tofu5")?);
    let base_f = mean_answer_prob(&c.base, &t.forget);
    let (ga_f, ga_r) = (mean_answer_prob(&ga, &t.forget), mean_answer_prob(&ga, &t.retain));
    let (tofu_f, tofu_r) = (mean_answer_prob(&tofu, &t.forget), mean_answer_prob(&tofu, &t.retain));
    ensure(ga_f < base_f, format!("GA forget {ga_f} vs base {base_f}"))?;
    ensure(tofu_f < base_f, format!("tofu5 forget {tofu_f} vs base {base_f}"))?;
    ensure(tofu_r > ga_r, format!("tofu5 retain {tofu_r} vs GA {ga_r}"))?;
    // frozen from the first oracle run on task 0
    let frozen = [(base_f, 0.433150997934), (ga_f, 0.424190312445), (tofu_f, 0.343302104277), (ga_r, 0.450803792361), (tofu_r, 0.461185155996)];
    for (got, want) in frozen {
        ensure((got - want).abs() < 1e-9, format!("fixture drift: {got} vs {want}"))?;
    }
    Ok(format!("forget base {base_f:.4} > GA {ga_f:.4}, tofu5 {tofu_f:.4}; retain tofu5 {tofu_r:.4} > GA {ga_r:.4}"))
}

// 9
fn evolution_beats_sampling(b: &Bench) -> Check {
    let mut evo = Vec::new();
    let mut random = Vec::new();
    for s in 0..5 {
        evo.push(best(&Ledger::read(&b.path(&format!("evo-{s}")).join("ledger.jsonl")).map_err(|e| e.to_string())?));
        let (l, _) = b.search(&format!("rand-{s}"), &["--seed", &s.to_string(), "--rounds", "0", "--initial", "65"])?;
        ensure(l.entries.len() == 65, "random budget")?;
        random.push(best(&l));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (e, r) = (mean(&evo), mean(&random));
    ensure(e >= r, format!("evolution {e:.4} < random {r:.4}"))?;
    Ok(format!("mean best: evolution {e:.4} >= random {r:.4}"))
}

// 10
fn nonsense_exclusion(b: &Bench) -> Check {
    let ga = b.ctx.evaluate(&builtin("ga").unwrap()).score.score;
    let mut parts = vec![format!("ga {ga:.4}")];
    for name in ["nonsense_10", "nonsense_20"] {
        let s = b.ctx.evaluate(&builtin(name).unwrap()).score.score;
        ensure(s < ga, format!("{name} {s} >= ga {ga}"))?;
        parts.push(format!("{name} {s:.4}"));
    }
    Ok(parts.join(", "))
}

// 11
fn relearning_direction(b: &Bench) -> Check {
    let model = b.path("tofu5_model.json");
    b.cli(&["evaluate", "--builtin", "tofu5", "--save-model", model.to_str().unwrap()])?;
    let csv = b.cli(&["relearn", "--checkpoint", model.to_str().unwrap(), "--steps", "100", "--interval", "10"])?;
    let rows: Vec<(u64, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let (s, p) = l.split_once(',').unwrap();
            (s.parse().unwrap(), p.parse().unwrap())
        })
        .collect();
    let steps: Vec<u64> = rows.iter().map(|r| r.0).collect();
    ensure(steps == (0..=100).step_by(10).collect::<Vec<_>>(), format!("steps {steps:?}"))?;
    let (first, last) = (rows[0].1, rows.last().unwrap().1);
    ensure(last >= first, format!("forget prob fell from {first} to {last}"))?;
    Ok(format!("{} points; forget prob {first:.4} -> {last:.4}", rows.len()))
}

/// One-shot HTTP stub answering with grammar samples keyed by request hash.
fn serve_stub() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    std::thread::spawn(move || {
        for conn in listener.incoming().flatten() {
            let mut conn = conn;
            let mut reader = BufReader::new(conn.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                }
            }
            let mut body = vec![0; len];
            if reader.read_exact(&mut body).is_err() {
                continue;
            }
            let req: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
            let content = if req["temperature"] == 0.6 {
                "Balance forgetting against retain likelihood.".to_string()
            } else {
                let seed = u64::from_str_radix(&request_hash(&String::from_utf8_lossy(&body))[..16], 16).unwrap();
                let files: Vec<String> =
                    GrammarProposer::new(seed).propose_initial(10, 0).into_iter().flatten().map(|l| render(&l)).collect();
                format!("<answer>\n{}\n</answer>", files.join("\n"))
            };
            let text = json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string();
            let reply = format!(
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                text.len()
            );
            let _ = conn.write_all(reply.as_bytes());
        }
    });
    url
}

// 12
fn determinism(b: &Bench) -> Check {
    let bytes = |name: &str| std::fs::read(b.path(name).join("ledger.jsonl")).map_err(|e| e.to_string());
    b.search("det-a", &["--seed", "0"])?;
    ensure(bytes("det-a")? == bytes("acct-default")?, "grammar ledgers differ")?;

    let tape = b.path("tape.jsonl");
    let tape_s = tape.to_str().unwrap();
    let url = serve_stub();
    let small = ["--seed", "2", "--proposer", "remote", "--initial", "6", "--rounds", "2:3"];
    let live = b.path("remote-live");
    let out = Command::new(env!("CARGO_BIN_EXE_unlearn-search"))
        .args(["search", "--out", live.to_str().unwrap(), "--record", tape_s])
        .args(small)
        .env("RUST_LOG", "warn")
        .env("UNLEARN_SEARCH_ENDPOINT", &url)
        .env_remove("UNLEARN_SEARCH_MODEL")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), String::from_utf8_lossy(&out.stderr).to_string())?;
    let mut replay = small.to_vec();
    replay.extend(["--replay", tape_s]);
    b.search("remote-a", &replay)?;
    b.search("remote-b", &replay)?;
    ensure(bytes("remote-a")? == bytes("remote-b")?, "replayed ledgers differ")?;
    ensure(bytes("remote-a")? == bytes("remote-live")?, "replay differs from the live run")?;
    let n = Ledger::read(&b.path("remote-a").join("ledger.jsonl")).map_err(|e| e.to_string())?.entries.len();
    Ok(format!("grammar ledgers identical; remote replay identical ({n} entries)"))
}

fn report(n: usize, name: &str, r: &Check) -> bool {
    match r {
        Ok(detail) => println!("criterion {n:>2}: PASS  {name} — {detail}"),
        Err(why) => println!("criterion {n:>2}: FAIL  {name} — {why}"),
    }
    r.is_ok()
}

fn main() {
    let bench = Bench {
        dir: tempfile::tempdir().expect("temp dir"),
        ctx: SearchContext::build(&SearchConfig::default()).expect("fixture task"),
    };
    // order matters: 5 inspects the ledgers written by 6 and 7, 9 reuses 7's
    // runs and 12 compares against 6's default run
    type Criterion = fn(&Bench) -> Check;
    let plan: [(usize, &str, Criterion); 12] = [
        (1, "gradient correctness", gradient_correctness),
        (2, "golden loss values", golden_values),
        (3, "metric oracles", metric_oracles),
        (4, "privleak identity", privleak_identity),
        (6, "search accounting", search_accounting),
        (7, "best-so-far monotonicity", best_so_far),
        (5, "selection score", selection_score_rule),
        (8, "forgetting direction", forgetting_direction),
        (9, "evolution beats random sampling", evolution_beats_sampling),
        (10, "nonsense exclusion", nonsense_exclusion),
        (11, "relearning direction", relearning_direction),
        (12, "determinism", determinism),
    ];
    let mut results: Vec<(usize, &str, Check)> = plan.iter().map(|(n, name, f)| (*n, *name, f(&bench))).collect();
    results.sort_by_key(|r| r.0);
    let passed = results.iter().filter(|(n, name, r)| report(*n, name, r)).count();
    println!("acceptance: {passed}/12 criteria passed");
    if passed != 12 {
        std::process::exit(1);
    }
}
