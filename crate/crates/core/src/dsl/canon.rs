use std::cmp::Ordering;

use super::{render_expr, BinaryOp, Expr, Loss, LossExpr};

/// Canonical form used for rendering and duplicate detection.
///
/// Children of `add`/`mul` are sorted (constants first by value, then
/// everything else by rendered bytes), `-0` becomes `0`, and the identities
/// `1*x`, `x+0`, `x-0` are folded. Every rewrite is exact in floating
/// point, so canonical twins evaluate bit-identically.
pub fn canonicalize(loss: &Loss) -> Loss {
    let body = canonicalize_expr(loss.expr.body());
    // Canonicalization never grows a tree, so the caps still hold.
    let expr = LossExpr::new(body).expect("canonical form within limits");
    Loss {
        expr,
        epochs: loss.epochs,
    }
}

pub(crate) fn canonicalize_expr(e: &Expr) -> Expr {
    match e {
        Expr::Input(i) => Expr::Input(*i),
        Expr::Const(c) => Expr::Const(normalize(*c)),
        Expr::Unary(op, a) => Expr::unary(*op, canonicalize_expr(a)),
        Expr::Param(op, c, a) => Expr::param(*op, normalize(*c), canonicalize_expr(a)),
        Expr::Binary(op, a, b) => {
            let a = canonicalize_expr(a);
            let b = canonicalize_expr(b);
            match op {
                BinaryOp::Mul if is_const(&a, 1.0) => b,
                BinaryOp::Mul if is_const(&b, 1.0) => a,
                BinaryOp::Add if is_const(&a, 0.0) => b,
                BinaryOp::Add | BinaryOp::Sub if is_const(&b, 0.0) => a,
                _ if op.is_commutative() => {
                    if order(&a, &b) == Ordering::Greater {
                        Expr::binary(*op, b, a)
                    } else {
                        Expr::binary(*op, a, b)
                    }
                }
                _ => Expr::binary(*op, a, b),
            }
        }
    }
}

fn normalize(c: f64) -> f64 {
    if c == 0.0 {
        0.0
    } else {
        c
    }
}

fn is_const(e: &Expr, v: f64) -> bool {
    matches!(e, Expr::Const(c) if *c == v)
}

fn order(a: &Expr, b: &Expr) -> Ordering {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => x.total_cmp(y),
        (Expr::Const(_), _) => Ordering::Less,
        (_, Expr::Const(_)) => Ordering::Greater,
        _ => render_expr(a).cmp(&render_expr(b)),
    }
}
