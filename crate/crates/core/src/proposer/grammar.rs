//! Weighted production grammar over loss bodies.
//!
//! ```text
//! body    := add(retain, scale(c, forget))                     (6)
//!          | max(t, add(retain, scale(c, forget)))              (1)
//!          | add(add(retain, scale(c, forget)), scale(c, guard)) (2)
//!          | sub(scale(c, forget), scale(c, dr))                (1)
//! forget  := shape(df)          df := zf | sub(zf, zf_ref)
//! retain  := neg(zr) | sub(zr_ref, zr) | softplus(sub(zr_ref, zr))
//!          | scale(c, square(sub(zr, zr_ref))) | scale(c, guard) ...
//! guard   := max(0, sub(zr_ref, zr))
//! ```
//!
//! `c` ranges over `0.1, 0.2, ..., 2.0` and `t` over a small threshold
//! pool. Every DSL node kind is reachable.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dsl::{BinaryOp, Expr, Input, ParamOp, UnaryOp, STABILIZER_EPS};

/// Coefficient `k / 10` for `k` in `1..=20`.
pub fn coefficient_pool() -> Vec<f64> {
    (1..=20).map(|k| k as f64 / 10.0).collect()
}

/// Thresholds for `min`/`max`/`clamp_*` nodes.
pub const THRESHOLD_POOL: [f64; 8] = [-10.0, -2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0];

fn pick<T: Copy>(rng: &mut ChaCha8Rng, items: &[(T, u32)]) -> T {
    let total: u32 = items.iter().map(|(_, w)| w).sum();
    let mut r = rng.gen_range(0..total);
    for &(item, w) in items {
        if r < w {
            return item;
        }
        r -= w;
    }
    unreachable!("weights sum to total")
}

pub(crate) fn coef(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(1..=20) as f64 / 10.0
}

pub(crate) fn threshold(rng: &mut ChaCha8Rng) -> f64 {
    THRESHOLD_POOL[rng.gen_range(0..THRESHOLD_POOL.len())]
}

fn zf() -> Expr {
    Expr::Input(Input::Forget)
}
fn zr() -> Expr {
    Expr::Input(Input::Retain)
}
fn zf_ref() -> Expr {
    Expr::Input(Input::ForgetRef)
}
fn zr_ref() -> Expr {
    Expr::Input(Input::RetainRef)
}

pub(crate) fn delta_f(rng: &mut ChaCha8Rng) -> Expr {
    if rng.gen_bool(0.6) {
        Expr::sub(zf(), zf_ref())
    } else {
        zf()
    }
}

fn delta_r(rng: &mut ChaCha8Rng) -> Expr {
    if rng.gen_bool(0.6) {
        Expr::sub(zr(), zr_ref())
    } else {
        zr()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Shape {
    Identity,
    Unary(UnaryOp),
    Param(ParamOp),
    LogOnePlus,
    Ratio,
    Gated,
}

const SHAPES: [(Shape, u32); 15] = [
    (Shape::Identity, 4),
    (Shape::Unary(UnaryOp::Exp), 2),
    (Shape::Unary(UnaryOp::Sigmoid), 2),
    (Shape::Unary(UnaryOp::Softplus), 3),
    (Shape::Unary(UnaryOp::Abs), 1),
    (Shape::Unary(UnaryOp::Square), 1),
    (Shape::Unary(UnaryOp::Relu), 2),
    (Shape::Unary(UnaryOp::LogShifted), 1),
    (Shape::Param(ParamOp::MinScalar), 2),
    (Shape::Param(ParamOp::MaxScalar), 2),
    (Shape::Param(ParamOp::ClampMax), 1),
    (Shape::Param(ParamOp::ClampMin), 1),
    (Shape::LogOnePlus, 1),
    (Shape::Ratio, 1),
    (Shape::Gated, 1),
];

/// `log(eps + relu(1 + x))`: the stabilized `log(1 + x)`.
pub(crate) fn log_one_plus(x: Expr) -> Expr {
    Expr::unary(
        UnaryOp::Log,
        Expr::add(
            Expr::Const(STABILIZER_EPS),
            Expr::unary(UnaryOp::Relu, Expr::add(Expr::Const(1.0), x)),
        ),
    )
}

pub(crate) fn apply_shape(shape: Shape, x: Expr, rng: &mut ChaCha8Rng) -> Expr {
    match shape {
        Shape::Identity => x,
        Shape::Unary(op) => Expr::unary(op, x),
        Shape::Param(op) => Expr::param(op, threshold(rng), x),
        Shape::LogOnePlus => log_one_plus(x),
        Shape::Ratio => Expr::binary(BinaryOp::DivEps, x, Expr::unary(UnaryOp::Abs, zf_ref())),
        Shape::Gated => Expr::binary(BinaryOp::Mul, Expr::unary(UnaryOp::Sigmoid, x.clone()), x),
    }
}

/// A forget-side term; larger when forget likelihood is higher.
pub(crate) fn forget_term(rng: &mut ChaCha8Rng) -> Expr {
    let shape = pick(rng, &SHAPES);
    let x = delta_f(rng);
    apply_shape(shape, x, rng)
}

fn guard() -> Expr {
    Expr::param(ParamOp::MaxScalar, 0.0, Expr::sub(zr_ref(), zr()))
}

#[derive(Clone, Copy)]
enum RetainForm {
    Neg,
    RefGap,
    SoftRefGap,
    Anchor,
    Guard,
}

/// A retain-side term; smaller when retain likelihood is higher.
pub(crate) fn retain_term(rng: &mut ChaCha8Rng) -> Expr {
    let form = pick(
        rng,
        &[
            (RetainForm::Neg, 5),
            (RetainForm::RefGap, 2),
            (RetainForm::SoftRefGap, 1),
            (RetainForm::Anchor, 1),
            (RetainForm::Guard, 1),
        ],
    );
    match form {
        RetainForm::Neg => Expr::neg(zr()),
        RetainForm::RefGap => Expr::sub(zr_ref(), zr()),
        RetainForm::SoftRefGap => Expr::unary(UnaryOp::Softplus, Expr::sub(zr_ref(), zr())),
        RetainForm::Anchor => Expr::scale(
            coef(rng),
            Expr::unary(UnaryOp::Square, Expr::sub(zr(), zr_ref())),
        ),
        RetainForm::Guard => Expr::add(Expr::neg(zr()), Expr::scale(coef(rng), guard())),
    }
}

#[derive(Clone, Copy)]
enum BodyForm {
    Sum,
    Hinge,
    Guarded,
    Difference,
}

/// Samples one loss body.
pub fn sample_body(rng: &mut ChaCha8Rng) -> Expr {
    let form = pick(
        rng,
        &[
            (BodyForm::Sum, 6),
            (BodyForm::Hinge, 1),
            (BodyForm::Guarded, 2),
            (BodyForm::Difference, 1),
        ],
    );
    let sum = |rng: &mut ChaCha8Rng| {
        let r = retain_term(rng);
        let c = coef(rng);
        Expr::add(r, Expr::scale(c, forget_term(rng)))
    };
    match form {
        BodyForm::Sum => sum(rng),
        BodyForm::Hinge => {
            let t = if rng.gen_bool(0.5) { 0.0 } else { threshold(rng) };
            let inner = sum(rng);
            Expr::param(ParamOp::MaxScalar, t, inner)
        }
        BodyForm::Guarded => {
            let inner = sum(rng);
            Expr::add(inner, Expr::scale(coef(rng), guard()))
        }
        BodyForm::Difference => {
            let f = Expr::scale(coef(rng), forget_term(rng));
            let c = coef(rng);
            Expr::sub(f, Expr::scale(c, delta_r(rng)))
        }
    }
}

pub fn sample_epochs(rng: &mut ChaCha8Rng) -> u32 {
    rng.gen_range(1..=10)
}

// ---- recognizer -----------------------------------------------------------

fn in_pool(c: f64) -> bool {
    (1..=20).any(|k| k as f64 / 10.0 == c)
}

fn is_input(e: &Expr, i: Input) -> bool {
    matches!(e, Expr::Input(x) if *x == i)
}

fn is_sub_of(e: &Expr, a: Input, b: Input) -> bool {
    matches!(e, Expr::Binary(BinaryOp::Sub, x, y) if is_input(x, a) && is_input(y, b))
}

fn is_delta_f(e: &Expr) -> bool {
    is_input(e, Input::Forget) || is_sub_of(e, Input::Forget, Input::ForgetRef)
}

fn is_delta_r(e: &Expr) -> bool {
    is_input(e, Input::Retain) || is_sub_of(e, Input::Retain, Input::RetainRef)
}

fn is_forget(e: &Expr) -> bool {
    if is_delta_f(e) {
        return true;
    }
    match e {
        Expr::Unary(op, x) if *op != UnaryOp::Neg && *op != UnaryOp::Log => is_delta_f(x),
        Expr::Param(_, t, x) => THRESHOLD_POOL.contains(t) && is_delta_f(x),
        Expr::Unary(UnaryOp::Log, x) => match &**x {
            Expr::Binary(BinaryOp::Add, eps, r) => {
                matches!(**eps, Expr::Const(c) if c == STABILIZER_EPS)
                    && matches!(&**r, Expr::Unary(UnaryOp::Relu, s)
                        if matches!(&**s, Expr::Binary(BinaryOp::Add, one, d)
                            if matches!(**one, Expr::Const(c) if c == 1.0) && is_delta_f(d)))
            }
            _ => false,
        },
        Expr::Binary(BinaryOp::DivEps, x, d) => {
            is_delta_f(x) && matches!(&**d, Expr::Unary(UnaryOp::Abs, r) if is_input(r, Input::ForgetRef))
        }
        Expr::Binary(BinaryOp::Mul, g, x) => {
            matches!(&**g, Expr::Unary(UnaryOp::Sigmoid, y) if y == x) && is_delta_f(x)
        }
        _ => false,
    }
}

fn is_scaled(e: &Expr, inner: impl Fn(&Expr) -> bool) -> bool {
    matches!(e, Expr::Binary(BinaryOp::Mul, c, x) if matches!(**c, Expr::Const(k) if in_pool(k)) && inner(x))
}

fn is_guard(e: &Expr) -> bool {
    matches!(e, Expr::Param(ParamOp::MaxScalar, t, x) if *t == 0.0 && is_sub_of(x, Input::RetainRef, Input::Retain))
}

fn is_retain(e: &Expr) -> bool {
    match e {
        Expr::Unary(UnaryOp::Neg, x) => is_input(x, Input::Retain),
        Expr::Unary(UnaryOp::Softplus, x) => is_sub_of(x, Input::RetainRef, Input::Retain),
        Expr::Binary(BinaryOp::Add, a, b) => {
            (is_retain_neg(a) && is_scaled(b, is_guard)) || (is_retain_neg(b) && is_scaled(a, is_guard))
        }
        _ => {
            is_sub_of(e, Input::RetainRef, Input::Retain)
                || is_scaled(e, |x| {
                    matches!(x, Expr::Unary(UnaryOp::Square, d) if is_sub_of(d, Input::Retain, Input::RetainRef))
                })
        }
    }
}

fn is_retain_neg(e: &Expr) -> bool {
    matches!(e, Expr::Unary(UnaryOp::Neg, x) if is_input(x, Input::Retain))
}

fn either(a: &Expr, b: &Expr, p: impl Fn(&Expr) -> bool, q: impl Fn(&Expr) -> bool) -> bool {
    (p(a) && q(b)) || (p(b) && q(a))
}

fn is_sum(e: &Expr) -> bool {
    matches!(e, Expr::Binary(BinaryOp::Add, a, b) if either(a, b, is_retain, |x| is_scaled(x, is_forget)))
}

/// True when the grammar can produce `body` exactly as written (either
/// child order of `add`).
pub fn derives(body: &Expr) -> bool {
    if is_sum(body) {
        return true;
    }
    match body {
        Expr::Param(ParamOp::MaxScalar, t, inner) => THRESHOLD_POOL.contains(t) && is_sum(inner),
        Expr::Binary(BinaryOp::Add, a, b) => either(a, b, is_sum, |x| is_scaled(x, is_guard)),
        Expr::Binary(BinaryOp::Sub, f, r) => is_scaled(f, is_forget) && is_scaled(r, is_delta_r),
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::{builtin, canonicalize, Loss, LossExpr};
    use rand::SeedableRng;

    #[test]
    fn pool_spans_range() {
        let pool = coefficient_pool();
        assert_eq!(pool.len(), 20);
        assert_eq!(pool[0], 0.1);
        assert_eq!(pool[19], 2.0);
        assert!(pool.contains(&0.7));
    }

    #[test]
    fn samples_are_derivable_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let b = sample_body(&mut rng);
            assert!(derives(&b), "{b}");
            assert!(LossExpr::new(b).is_ok());
        }
    }

    #[test]
    fn every_node_kind_reachable() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut names = std::collections::BTreeSet::new();
        for _ in 0..2000 {
            sample_body(&mut rng).walk(&mut |n| {
                let name = match n {
                    Expr::Input(i) => i.name(),
                    Expr::Const(_) => "const",
                    Expr::Unary(op, _) => op.name(),
                    Expr::Binary(op, _, _) => op.name(),
                    Expr::Param(op, _, _) => op.name(),
                };
                names.insert(name);
            });
        }
        for op in UnaryOp::ALL {
            assert!(names.contains(op.name()), "{}", op.name());
        }
        for op in BinaryOp::ALL {
            assert!(names.contains(op.name()), "{}", op.name());
        }
        for op in ParamOp::ALL {
            assert!(names.contains(op.name()), "{}", op.name());
        }
        for i in Input::ALL {
            assert!(names.contains(i.name()));
        }
    }

    #[test]
    fn initial_losses_derivable() {
        for k in 1..=10 {
            let loss = builtin(&format!("initial_{k}")).unwrap();
            assert!(derives(loss.expr.body()), "initial_{k}");
            let canon: Loss = canonicalize(&loss);
            assert!(derives(canon.expr.body()), "canonical initial_{k}");
        }
    }

    #[test]
    fn rejects_foreign_shapes() {
        let b = builtin("nonsense_10").unwrap();
        assert!(!derives(b.expr.body()));
        let ga = builtin("ga").unwrap();
        assert!(!derives(ga.expr.body()));
    }
}
