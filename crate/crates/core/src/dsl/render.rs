use super::{canonicalize, BinaryOp, Expr, Loss};

/// Shortest decimal that parses back to the same `f64`.
pub fn format_constant(c: f64) -> String {
    // `Display` for f64 already prints the shortest round-trip digits; it
    // only needs help with negative zero.
    if c == 0.0 {
        "0".to_string()
    } else {
        format!("{c}")
    }
}

/// Renders an expression exactly as stored (no canonicalization).
pub fn render_expr(e: &Expr) -> String {
    let mut out = String::new();
    write_expr(e, &mut out);
    out
}

fn write_expr(e: &Expr, out: &mut String) {
    match e {
        Expr::Input(i) => out.push_str(i.name()),
        Expr::Const(c) => out.push_str(&format_constant(*c)),
        Expr::Unary(op, a) => {
            out.push('(');
            out.push_str(op.name());
            out.push(' ');
            write_expr(a, out);
            out.push(')');
        }
        Expr::Binary(BinaryOp::Mul, a, b) if matches!(**a, Expr::Const(_)) => {
            let Expr::Const(k) = **a else { unreachable!() };
            out.push_str("(scale ");
            out.push_str(&format_constant(k));
            out.push(' ');
            write_expr(b, out);
            out.push(')');
        }
        Expr::Binary(op, a, b) => {
            out.push('(');
            out.push_str(op.name());
            out.push(' ');
            write_expr(a, out);
            out.push(' ');
            write_expr(b, out);
            out.push(')');
        }
        Expr::Param(op, c, a) => {
            out.push('(');
            out.push_str(op.name());
            out.push(' ');
            out.push_str(&format_constant(*c));
            out.push(' ');
            write_expr(a, out);
            out.push(')');
        }
    }
}

/// Renders a loss file in canonical form.
pub fn render(loss: &Loss) -> String {
    let canonical = canonicalize(loss);
    format!("epochs: {}\n{}\n", canonical.epochs, canonical.expr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::{parse, Input};

    #[test]
    fn constants_use_shortest_decimal() {
        assert_eq!(format_constant(0.5), "0.5");
        assert_eq!(format_constant(1.2), "1.2");
        assert_eq!(format_constant(1.0), "1");
        assert_eq!(format_constant(-0.0), "0");
        assert_eq!(format_constant(1e-6), "0.000001");
        for c in [0.1 + 0.2, 1.0 / 3.0, -7.25e-9, 6.02e23] {
            assert_eq!(format_constant(c).parse::<f64>().unwrap(), c);
        }
    }

    #[test]
    fn scale_sugar() {
        let e = Expr::scale(0.5, Expr::Input(Input::Forget));
        assert_eq!(render_expr(&e), "(scale 0.5 zf)");
        let e = Expr::binary(BinaryOp::Mul, Expr::Input(Input::Forget), Expr::Const(0.5));
        assert_eq!(render_expr(&e), "(mul zf 0.5)");
    }

    #[test]
    fn render_is_idempotent_through_parse() {
        let src = "epochs: 4\n(mean (add (mul zf 0.7) (neg zr)))";
        let once = render(&parse(src).unwrap());
        let twice = render(&parse(&once).unwrap());
        assert_eq!(once, twice);
        assert_eq!(once, "epochs: 4\n(mean (add (neg zr) (scale 0.7 zf)))\n");
    }
}
