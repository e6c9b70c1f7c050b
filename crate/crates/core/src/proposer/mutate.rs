//! Local edits to a parent loss, chosen with feedback-dependent weights.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grammar::{self, coef};
use super::Feedback;
use crate::dsl::{BinaryOp, Expr, Input, Loss, ParamOp, UnaryOp, EPOCH_RANGE, STABILIZER_EPS};

pub const JITTER_FACTORS: [f64; 4] = [0.5, 0.8, 1.25, 2.0];
pub const EPOCH_DELTAS: [i32; 4] = [-2, -1, 1, 2];
/// Forget or utility below this counts as "too weak" / "too low".
pub const FEEDBACK_THRESHOLD: f64 = 0.6;

const SWAPPABLE: [UnaryOp; 7] = [
    UnaryOp::Exp,
    UnaryOp::Sigmoid,
    UnaryOp::Softplus,
    UnaryOp::Abs,
    UnaryOp::Square,
    UnaryOp::Relu,
    UnaryOp::LogShifted,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationKind {
    ConstJitter,
    NonlinSwap,
    Graft,
    RefToggle,
    EpochDelta,
    IncreaseForget,
    ProtectRetain,
}

impl MutationKind {
    pub const ALL: [MutationKind; 7] = [
        MutationKind::ConstJitter,
        MutationKind::NonlinSwap,
        MutationKind::Graft,
        MutationKind::RefToggle,
        MutationKind::EpochDelta,
        MutationKind::IncreaseForget,
        MutationKind::ProtectRetain,
    ];
}

/// Sampling weights per mutation kind. Weak forgetting with acceptable
/// utility favours forgetting pressure; low utility with adequate
/// forgetting favours retain protection.
pub fn kind_weights(fb: Option<&Feedback>) -> [(MutationKind, u32); 7] {
    let (mut more_forget, mut protect) = (2, 2);
    if let Some(fb) = fb {
        let (f, u) = (fb.score.forget, fb.score.utility);
        if f < FEEDBACK_THRESHOLD && u >= FEEDBACK_THRESHOLD {
            more_forget = 8;
            protect = 1;
        } else if u < FEEDBACK_THRESHOLD && f >= FEEDBACK_THRESHOLD {
            more_forget = 1;
            protect = 8;
        }
    }
    [
        (MutationKind::ConstJitter, 3),
        (MutationKind::NonlinSwap, 2),
        (MutationKind::Graft, 2),
        (MutationKind::RefToggle, 1),
        (MutationKind::EpochDelta, 2),
        (MutationKind::IncreaseForget, more_forget),
        (MutationKind::ProtectRetain, protect),
    ]
}

pub fn sample_kind(rng: &mut ChaCha8Rng, fb: Option<&Feedback>) -> MutationKind {
    let weights = kind_weights(fb);
    let total: u32 = weights.iter().map(|(_, w)| w).sum();
    let mut r = rng.gen_range(0..total);
    for (k, w) in weights {
        if r < w {
            return k;
        }
        r -= w;
    }
    unreachable!()
}

/// Rounds to ten significant digits so jittered constants stay readable.
pub fn round_sig(x: f64) -> f64 {
    format!("{x:.9e}").parse().unwrap_or(x)
}

/// A mutated loss body plus its epoch budget, before repair.
pub type Draft = (Expr, u32);

fn indices(e: &Expr, pred: impl Fn(&Expr) -> bool) -> Vec<usize> {
    let mut out = Vec::new();
    let mut i = 0;
    e.walk(&mut |n| {
        if pred(n) {
            out.push(i);
        }
        i += 1;
    });
    out
}

fn choose<T: Copy>(rng: &mut ChaCha8Rng, items: &[T]) -> Option<T> {
    if items.is_empty() {
        None
    } else {
        Some(items[rng.gen_range(0..items.len())])
    }
}

fn forget_only(e: &Expr) -> bool {
    (e.uses(Input::Forget) || e.uses(Input::ForgetRef)) && !e.uses(Input::Retain) && !e.uses(Input::RetainRef)
}

fn retain_only(e: &Expr) -> bool {
    (e.uses(Input::Retain) || e.uses(Input::RetainRef)) && !e.uses(Input::Forget) && !e.uses(Input::ForgetRef)
}

/// Multiplies one constant by `factor`.
pub fn jitter_at(body: &Expr, index: usize, factor: f64) -> Option<Expr> {
    let mut out = body.clone();
    match out.node_mut(index)? {
        Expr::Const(c) => {
            *c = round_sig(*c * factor);
            Some(out)
        }
        _ => None,
    }
}

fn jitterable(e: &Expr) -> Vec<usize> {
    indices(e, |n| matches!(n, Expr::Const(c) if *c != STABILIZER_EPS && *c != 0.0))
}

/// Shifts the epoch budget, clamped to the allowed range.
pub fn epoch_delta(epochs: u32, delta: i32) -> u32 {
    (epochs as i64 + delta as i64).clamp(*EPOCH_RANGE.start() as i64, *EPOCH_RANGE.end() as i64) as u32
}

fn is_ref_pair(e: &Expr) -> bool {
    matches!(e, Expr::Binary(BinaryOp::Sub, a, b)
        if matches!((&**a, &**b), (Expr::Input(Input::Forget), Expr::Input(Input::ForgetRef))
            | (Expr::Input(Input::Retain), Expr::Input(Input::RetainRef))))
}

fn ref_toggle(body: &Expr, rng: &mut ChaCha8Rng) -> Option<Expr> {
    let pairs = indices(body, is_ref_pair);
    // leaves that are the left operand of an existing pair are not candidates
    let inside: Vec<usize> = pairs.iter().map(|i| i + 1).collect();
    let leaves: Vec<usize> = indices(body, |n| matches!(n, Expr::Input(Input::Forget | Input::Retain)))
        .into_iter()
        .filter(|i| !inside.contains(i))
        .collect();
    let insert = !leaves.is_empty() && (pairs.is_empty() || rng.gen_bool(0.5));
    let mut out = body.clone();
    if insert {
        let i = choose(rng, &leaves)?;
        let node = out.node_mut(i)?;
        let Expr::Input(z) = *node else { return None };
        let r = if z == Input::Forget { Input::ForgetRef } else { Input::RetainRef };
        *node = Expr::sub(Expr::Input(z), Expr::Input(r));
    } else {
        let i = choose(rng, &pairs)?;
        let node = out.node_mut(i)?;
        let Expr::Binary(_, a, _) = node else { return None };
        *node = (**a).clone();
    }
    Some(out)
}

/// Inserts a reference delta at one `zf`/`zr` leaf (or removes one if none
/// can be inserted). Exposed for the operator postcondition tests.
pub fn toggle_reference(body: &Expr, rng: &mut ChaCha8Rng) -> Option<Expr> {
    ref_toggle(body, rng)
}

fn nonlin_swap(body: &Expr, rng: &mut ChaCha8Rng) -> Option<Expr> {
    let sites = indices(body, |n| match n {
        Expr::Unary(op, _) => SWAPPABLE.contains(op),
        Expr::Param(..) => true,
        _ => false,
    });
    let i = choose(rng, &sites)?;
    let mut out = body.clone();
    match out.node_mut(i)? {
        Expr::Unary(op, _) => {
            let others: Vec<UnaryOp> = SWAPPABLE.iter().copied().filter(|o| o != op).collect();
            *op = choose(rng, &others)?;
        }
        Expr::Param(op, _, _) => {
            let others: Vec<ParamOp> = ParamOp::ALL.iter().copied().filter(|o| o != op).collect();
            *op = choose(rng, &others)?;
        }
        _ => return None,
    }
    Some(out)
}

fn graft(body: &Expr, rng: &mut ChaCha8Rng) -> Option<Expr> {
    let sites: Vec<usize> = indices(body, |n| forget_only(n) || retain_only(n))
        .into_iter()
        .filter(|&i| i > 0)
        .collect();
    let i = choose(rng, &sites)?;
    let mut out = body.clone();
    let node = out.node_mut(i)?;
    *node = if forget_only(node) {
        grammar::forget_term(rng)
    } else {
        grammar::retain_term(rng)
    };
    Some(out)
}

/// Scaled forget-only terms `scale(k, f)`: the knobs for forgetting pressure.
fn forget_coefs(body: &Expr) -> Vec<usize> {
    indices(body, |n| {
        matches!(n, Expr::Binary(BinaryOp::Mul, c, x) if matches!(**c, Expr::Const(k) if k > 0.0) && forget_only(x))
    })
}

fn rescale_mul(body: &Expr, index: usize, factor: f64) -> Option<Expr> {
    // the constant is the first child, one step after the mul in pre-order
    jitter_at(body, index + 1, factor)
}

fn increase_forget(loss: &Loss, rng: &mut ChaCha8Rng) -> Option<Draft> {
    let body = loss.expr.body();
    let coefs = forget_coefs(body);
    match rng.gen_range(0..3) {
        0 if !coefs.is_empty() => {
            let i = choose(rng, &coefs)?;
            let f = if rng.gen_bool(0.5) { 1.25 } else { 2.0 };
            Some((rescale_mul(body, i, f)?, loss.epochs))
        }
        1 if loss.epochs < *EPOCH_RANGE.end() => Some((body.clone(), epoch_delta(loss.epochs, 1))),
        _ => {
            // hinge on forget likelihood above the reference
            let hinge = Expr::param(
                ParamOp::MaxScalar,
                0.0,
                Expr::sub(Expr::Input(Input::Forget), Expr::Input(Input::ForgetRef)),
            );
            Some((Expr::add(body.clone(), Expr::scale(coef(rng), hinge)), loss.epochs))
        }
    }
}

fn protect_retain(loss: &Loss, rng: &mut ChaCha8Rng) -> Option<Draft> {
    let body = loss.expr.body();
    let coefs = forget_coefs(body);
    match rng.gen_range(0..4) {
        0 if !coefs.is_empty() => {
            let i = choose(rng, &coefs)?;
            let f = if rng.gen_bool(0.5) { 0.8 } else { 0.5 };
            Some((rescale_mul(body, i, f)?, loss.epochs))
        }
        1 if loss.epochs > *EPOCH_RANGE.start() => Some((body.clone(), epoch_delta(loss.epochs, -1))),
        2 => {
            let reward = Expr::neg(Expr::Input(Input::Retain));
            Some((Expr::add(body.clone(), Expr::scale(coef(rng), reward)), loss.epochs))
        }
        _ => {
            let guard = Expr::param(
                ParamOp::MaxScalar,
                0.0,
                Expr::sub(Expr::Input(Input::RetainRef), Expr::Input(Input::Retain)),
            );
            Some((Expr::add(body.clone(), Expr::scale(coef(rng), guard)), loss.epochs))
        }
    }
}

/// Applies one mutation. `None` when the kind has no site in this loss.
pub fn apply(kind: MutationKind, loss: &Loss, rng: &mut ChaCha8Rng) -> Option<Draft> {
    let body = loss.expr.body();
    match kind {
        MutationKind::ConstJitter => {
            let i = choose(rng, &jitterable(body))?;
            let f = JITTER_FACTORS[rng.gen_range(0..JITTER_FACTORS.len())];
            Some((jitter_at(body, i, f)?, loss.epochs))
        }
        MutationKind::NonlinSwap => Some((nonlin_swap(body, rng)?, loss.epochs)),
        MutationKind::Graft => Some((graft(body, rng)?, loss.epochs)),
        MutationKind::RefToggle => Some((ref_toggle(body, rng)?, loss.epochs)),
        MutationKind::EpochDelta => {
            let d = EPOCH_DELTAS[rng.gen_range(0..EPOCH_DELTAS.len())];
            Some((body.clone(), epoch_delta(loss.epochs, d)))
        }
        MutationKind::IncreaseForget => increase_forget(loss, rng),
        MutationKind::ProtectRetain => protect_retain(loss, rng),
    }
}
