//! Reference losses: the discovered objectives, the robustness-run
//! objectives, the ten initial proposals, two known-pathological proposals,
//! and the GA / GradDiff baselines.

use std::collections::BTreeMap;

use super::{parse, Loss};

const LIBRARY: &[(&str, &str)] = &[
    // discovered objectives, one per benchmark
    (
        "tofu5",
        "epochs: 7\n(mean (add (scale 1.2 (sub zf zf_ref)) (sub zr_ref zr)))",
    ),
    (
        "tofu10",
        "epochs: 8\n(mean (sub (exp (sub zf zf_ref)) (scale 2 (scale 0.3 (exp (sub zr zr_ref))))))",
    ),
    (
        "muse_books",
        "epochs: 8\n(mean (add (sub (scale 0.7 zf) zr) (scale 0.3 (max 0 (sub zr_ref zr)))))",
    ),
    ("muse_news", "epochs: 8\n(mean (scale 0.35 (min 1 (sub zf zr))))"),
    // 300 optimizer steps in the original; the toy budget is capped at 10 epochs
    (
        "wmdp",
        "epochs: 10\n(mean (sub (scale 1.5 (sub zf zf_ref)) (sub zr zr_ref)))",
    ),
    // robustness runs
    (
        "robust_17",
        "epochs: 7\n(mean (add (sub (max -10 zf) (scale 0.4 zr)) (scale 0.6 (max 0 (sub zf zf_ref)))))",
    ),
    ("robust_10", "epochs: 5\n(mean (sub zf (min 0.4 zr)))"),
    (
        "robust_2",
        "epochs: 2\n(mean (add (scale 1.2 (sub (log_shifted zf) (log_shifted zf_ref))) (sub (log_shifted zr_ref) (log_shifted zr))))",
    ),
    (
        "robust_5",
        "epochs: 5\n(mean (sub (add (neg zr) (scale 0.6 (min 0 zf))) (scale 0.2 (max 0 (sub zr zr_ref)))))",
    ),
    (
        "robust_9",
        "epochs: 3\n(mean (add (scale 1.5 (sub (log_shifted zf) (log_shifted zf_ref))) (sub (log_shifted zr_ref) (log_shifted zr))))",
    ),
    // initial proposals
    ("initial_1", "epochs: 1\n(mean (add (neg zr) (scale 0.7 zf)))"),
    ("initial_2", "epochs: 2\n(mean (max 0 (add (neg zr) (scale 0.5 zf))))"),
    ("initial_3", "epochs: 3\n(mean (add (neg zr) (scale 0.8 (min 0 zf))))"),
    (
        "initial_4",
        "epochs: 4\n(mean (add (neg zr) (scale 0.6 (max 0 (sub zf zf_ref)))))",
    ),
    ("initial_5", "epochs: 5\n(mean (add (neg zr) (scale 0.9 (exp zf))))"),
    (
        "initial_6",
        "epochs: 6\n(mean (add (neg zr) (scale 0.4 (sigmoid (sub zf zf_ref)))))",
    ),
    (
        "initial_7",
        "epochs: 7\n(mean (add (neg zr) (scale 0.3 (abs (sub zf zf_ref)))))",
    ),
    (
        "initial_8",
        "epochs: 8\n(mean (add (neg zr) (scale 0.2 (square (sub zf zf_ref)))))",
    ),
    // log(1 + delta) is undefined for delta <= -1; stored in repaired form
    (
        "initial_9",
        "epochs: 9\n(mean (add (neg zr) (scale 0.1 (log (add 0.000001 (relu (add 1 (sub zf zf_ref))))))))",
    ),
    (
        "initial_10",
        "epochs: 10\n(mean (add (neg zr) (scale 0.5 (exp (sub zf zf_ref)))))",
    ),
    // pathological: both reward forget likelihood
    (
        "nonsense_10",
        "epochs: 10\n(mean (scale 0.95 (exp (neg (sub zf zf_ref)))))",
    ),
    (
        "nonsense_20",
        "epochs: 10\n(mean (scale 0.5 (softplus (neg (sub zf zf_ref)))))",
    ),
    // baselines: likelihood ascent on the forget set, and ascent minus retain descent
    ("ga", "epochs: 1\n(mean zf)"),
    ("graddiff", "epochs: 1\n(mean (sub zf zr))"),
];

/// Names of every builtin, in library order.
pub const BUILTIN_NAMES: [&str; 24] = [
    "tofu5",
    "tofu10",
    "muse_books",
    "muse_news",
    "wmdp",
    "robust_17",
    "robust_10",
    "robust_2",
    "robust_5",
    "robust_9",
    "initial_1",
    "initial_2",
    "initial_3",
    "initial_4",
    "initial_5",
    "initial_6",
    "initial_7",
    "initial_8",
    "initial_9",
    "initial_10",
    "nonsense_10",
    "nonsense_20",
    "ga",
    "graddiff",
];

pub fn builtin(name: &str) -> Option<Loss> {
    LIBRARY
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, src)| parse(src).expect("builtin loss parses"))
}

pub fn builtin_library() -> BTreeMap<&'static str, Loss> {
    LIBRARY
        .iter()
        .map(|(n, src)| (*n, parse(src).expect("builtin loss parses")))
        .collect()
}
