//! Value and exact gradient of a loss on one batch.
//!
//! The root mean is distributed over the linear skeleton of the body
//! (`add`, `sub`, `neg`, and multiplication by a constant). Each remaining
//! term is averaged over the batch side it reads: forget-only terms over
//! the forget batch, retain-only terms over the retain batch. Terms that
//! mix both sides pair entries index by index; a side of length one is
//! broadcast, otherwise both sides are trimmed to the shorter length. When
//! the two batch lengths agree this is the plain per-example mean.
//!
//! Gradients flow to `zf` and `zr` only; reference vectors are constants.
//! At the kink of a piecewise-linear node the derivative is the midpoint of
//! the one-sided derivatives (`relu'(0) = 0.5`, `abs'(0) = 0`), which is
//! what a central difference sees.

use thiserror::Error;

use crate::dsl::{BinaryOp, DslError, Expr, Input, LossExpr, ParamOp, ProbeBatch, UnaryOp};
use crate::dsl::STABILIZER_EPS;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("loss value is not finite ({0})")]
    NonFiniteValue(f64),
    #[error("gradient is not finite")]
    NonFiniteGradient,
    #[error(transparent)]
    Batch(#[from] DslError),
}

/// Loss value plus its gradient with respect to `zf` and `zr`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub value: f64,
    pub d_zf: Vec<f64>,
    pub d_zr: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Domain {
    Constant,
    Forget,
    Retain,
    Joint,
}

struct Term<'a> {
    coef: f64,
    expr: &'a Expr,
    domain: Domain,
}

fn domain_of(e: &Expr) -> Domain {
    let mut forget = false;
    let mut retain = false;
    e.walk(&mut |n| {
        if let Expr::Input(i) = n {
            if i.is_forget_side() {
                forget = true;
            } else {
                retain = true;
            }
        }
    });
    match (forget, retain) {
        (false, false) => Domain::Constant,
        (true, false) => Domain::Forget,
        (false, true) => Domain::Retain,
        (true, true) => Domain::Joint,
    }
}

fn linearize<'a>(e: &'a Expr, coef: f64, out: &mut Vec<Term<'a>>) {
    match e {
        Expr::Binary(BinaryOp::Add, a, b) => {
            linearize(a, coef, out);
            linearize(b, coef, out);
        }
        Expr::Binary(BinaryOp::Sub, a, b) => {
            linearize(a, coef, out);
            linearize(b, -coef, out);
        }
        Expr::Unary(UnaryOp::Neg, a) => linearize(a, -coef, out),
        Expr::Binary(BinaryOp::Mul, a, b) if matches!(**a, Expr::Const(_)) => {
            let Expr::Const(k) = **a else { unreachable!() };
            linearize(b, coef * k, out);
        }
        Expr::Binary(BinaryOp::Mul, a, b) if matches!(**b, Expr::Const(_)) => {
            let Expr::Const(k) = **b else { unreachable!() };
            linearize(a, coef * k, out);
        }
        _ => out.push(Term {
            coef,
            expr: e,
            domain: domain_of(e),
        }),
    }
}

/// How a term's elements map onto batch indices.
#[derive(Clone, Copy)]
struct Layout {
    n: usize,
    forget_len: usize,
    retain_len: usize,
}

impl Layout {
    fn new(domain: Domain, forget_len: usize, retain_len: usize) -> Layout {
        let n = match domain {
            Domain::Constant => 1,
            Domain::Forget => forget_len,
            Domain::Retain => retain_len,
            Domain::Joint if forget_len == retain_len => forget_len,
            Domain::Joint if forget_len == 1 => retain_len,
            Domain::Joint if retain_len == 1 => forget_len,
            Domain::Joint => forget_len.min(retain_len),
        };
        Layout {
            n,
            forget_len,
            retain_len,
        }
    }

    fn index(&self, input: Input, j: usize) -> usize {
        let len = if input.is_forget_side() {
            self.forget_len
        } else {
            self.retain_len
        };
        if len == 1 {
            0
        } else {
            j
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Instr {
    Leaf(Input),
    Const(f64),
    Unary(UnaryOp, usize),
    Binary(BinaryOp, usize, usize),
    Param(ParamOp, f64, usize),
}

/// Postfix program for one term.
fn compile(e: &Expr, code: &mut Vec<Instr>) -> usize {
    let instr = match e {
        Expr::Input(i) => Instr::Leaf(*i),
        Expr::Const(c) => Instr::Const(*c),
        Expr::Unary(op, a) => Instr::Unary(*op, compile(a, code)),
        Expr::Param(op, c, a) => Instr::Param(*op, *c, compile(a, code)),
        Expr::Binary(op, a, b) => {
            let a = compile(a, code);
            let b = compile(b, code);
            Instr::Binary(*op, a, b)
        }
    };
    code.push(instr);
    code.len() - 1
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Derivative of `max(x, c)` with the midpoint convention at `x == c`.
fn step_above(x: f64, c: f64) -> f64 {
    if x > c {
        1.0
    } else if x < c {
        0.0
    } else {
        0.5
    }
}

fn unary_value(op: UnaryOp, x: f64) -> f64 {
    match op {
        UnaryOp::Neg => -x,
        UnaryOp::Exp => x.exp(),
        UnaryOp::Log => x.ln(),
        UnaryOp::Softplus => softplus(x),
        UnaryOp::Sigmoid => sigmoid(x),
        UnaryOp::Abs => x.abs(),
        UnaryOp::Square => x * x,
        UnaryOp::Relu => x.max(0.0),
        UnaryOp::LogShifted => {
            let log_eps = STABILIZER_EPS.ln();
            log_eps + softplus(x - log_eps)
        }
    }
}

fn unary_deriv(op: UnaryOp, x: f64, y: f64) -> f64 {
    match op {
        UnaryOp::Neg => -1.0,
        UnaryOp::Exp => y,
        UnaryOp::Log => 1.0 / x,
        UnaryOp::Softplus => sigmoid(x),
        UnaryOp::Sigmoid => y * (1.0 - y),
        UnaryOp::Abs => sign0(x),
        UnaryOp::Square => 2.0 * x,
        UnaryOp::Relu => step_above(x, 0.0),
        UnaryOp::LogShifted => sigmoid(x - STABILIZER_EPS.ln()),
    }
}

fn param_value(op: ParamOp, c: f64, x: f64) -> f64 {
    if op.is_upper() {
        x.min(c)
    } else {
        x.max(c)
    }
}

fn param_deriv(op: ParamOp, c: f64, x: f64) -> f64 {
    if op.is_upper() {
        1.0 - step_above(x, c)
    } else {
        step_above(x, c)
    }
}

fn forward(code: &[Instr], batch: &ProbeBatch, layout: &Layout, j: usize, vals: &mut Vec<f64>) {
    vals.clear();
    for instr in code {
        let v = match *instr {
            Instr::Leaf(i) => batch.get(i)[layout.index(i, j)],
            Instr::Const(c) => c,
            Instr::Unary(op, a) => unary_value(op, vals[a]),
            Instr::Param(op, c, a) => param_value(op, c, vals[a]),
            Instr::Binary(op, a, b) => {
                let (x, y) = (vals[a], vals[b]);
                match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                    BinaryOp::DivEps => x / (y.abs() + STABILIZER_EPS),
                }
            }
        };
        vals.push(v);
    }
}

#[allow(clippy::too_many_arguments)]
fn backward(
    code: &[Instr],
    vals: &[f64],
    seed: f64,
    layout: &Layout,
    j: usize,
    adj: &mut Vec<f64>,
    d_zf: &mut [f64],
    d_zr: &mut [f64],
) {
    adj.clear();
    adj.resize(code.len(), 0.0);
    *adj.last_mut().unwrap() = seed;
    for k in (0..code.len()).rev() {
        let g = adj[k];
        match code[k] {
            Instr::Leaf(i) => match i {
                Input::Forget => d_zf[layout.index(i, j)] += g,
                Input::Retain => d_zr[layout.index(i, j)] += g,
                Input::ForgetRef | Input::RetainRef => {}
            },
            Instr::Const(_) => {}
            Instr::Unary(op, a) => adj[a] += g * unary_deriv(op, vals[a], vals[k]),
            Instr::Param(op, c, a) => adj[a] += g * param_deriv(op, c, vals[a]),
            Instr::Binary(op, a, b) => {
                let (x, y) = (vals[a], vals[b]);
                match op {
                    BinaryOp::Add => {
                        adj[a] += g;
                        adj[b] += g;
                    }
                    BinaryOp::Sub => {
                        adj[a] += g;
                        adj[b] -= g;
                    }
                    BinaryOp::Mul => {
                        adj[a] += g * y;
                        adj[b] += g * x;
                    }
                    BinaryOp::DivEps => {
                        let den = y.abs() + STABILIZER_EPS;
                        adj[a] += g / den;
                        adj[b] += g * (-x * sign0(y) / (den * den));
                    }
                }
            }
        }
    }
}

fn run(expr: &LossExpr, batch: &ProbeBatch, want_grad: bool) -> Result<GradientBundle, EvalError> {
    batch.check()?;
    let (bf, br) = (batch.forget_len(), batch.retain_len());
    let mut terms = Vec::new();
    linearize(expr.body(), 1.0, &mut terms);

    let mut value = 0.0;
    let mut d_zf = vec![0.0; if want_grad { bf } else { 0 }];
    let mut d_zr = vec![0.0; if want_grad { br } else { 0 }];
    let mut code = Vec::new();
    let mut vals = Vec::new();
    let mut adj = Vec::new();
    for term in &terms {
        code.clear();
        compile(term.expr, &mut code);
        let layout = Layout::new(term.domain, bf, br);
        let weight = term.coef / layout.n as f64;
        let mut sum = 0.0;
        for j in 0..layout.n {
            forward(&code, batch, &layout, j, &mut vals);
            sum += *vals.last().unwrap();
            if want_grad {
                backward(&code, &vals, weight, &layout, j, &mut adj, &mut d_zf, &mut d_zr);
            }
        }
        value += term.coef * (sum / layout.n as f64);
    }
    if !value.is_finite() {
        return Err(EvalError::NonFiniteValue(value));
    }
    if d_zf.iter().chain(&d_zr).any(|g| !g.is_finite()) {
        return Err(EvalError::NonFiniteGradient);
    }
    Ok(GradientBundle { value, d_zf, d_zr })
}

/// The scalar loss on `batch`.
pub fn evaluate(expr: &LossExpr, batch: &ProbeBatch) -> Result<f64, EvalError> {
    run(expr, batch, false).map(|b| b.value)
}

/// Loss value and exact gradient with respect to `zf` and `zr`.
pub fn gradient(expr: &LossExpr, batch: &ProbeBatch) -> Result<GradientBundle, EvalError> {
    run(expr, batch, true)
}

/// Per-element values of every term, for difference quotients that
/// subtract before summing.
fn term_values(expr: &LossExpr, batch: &ProbeBatch) -> Vec<(f64, Vec<f64>)> {
    let (bf, br) = (batch.forget_len(), batch.retain_len());
    let mut terms = Vec::new();
    linearize(expr.body(), 1.0, &mut terms);
    let mut code = Vec::new();
    let mut vals = Vec::new();
    terms
        .iter()
        .map(|term| {
            code.clear();
            compile(term.expr, &mut code);
            let layout = Layout::new(term.domain, bf, br);
            let weight = term.coef / layout.n as f64;
            let elems = (0..layout.n)
                .map(|j| {
                    forward(&code, batch, &layout, j, &mut vals);
                    *vals.last().unwrap()
                })
                .collect();
            (weight, elems)
        })
        .collect()
}

/// Largest relative disagreement between the analytic gradient and central
/// differences with step `h`, over every entry of `zf` and `zr`.
///
/// Each difference is taken element by element before summation, so a
/// large unrelated term in the loss cannot swamp it. The error for one
/// coordinate is `|analytic - numeric| / max(1, |numeric|)`. Returns
/// infinity if the loss cannot be differentiated on `batch`.
pub fn finite_diff_check(expr: &LossExpr, batch: &ProbeBatch, h: f64) -> f64 {
    debug_assert!((1e-7..=1e-3).contains(&h), "step {h} outside [1e-7, 1e-3]");
    let h = h.clamp(1e-7, 1e-3);
    let analytic = match gradient(expr, batch) {
        Ok(g) => g,
        Err(_) => return f64::INFINITY,
    };
    let mut worst: f64 = 0.0;
    for (input, grads) in [(Input::Forget, &analytic.d_zf), (Input::Retain, &analytic.d_zr)] {
        for (i, &a) in grads.iter().enumerate() {
            let mut plus = batch.clone();
            let mut minus = batch.clone();
            plus.get_mut(input)[i] += h;
            minus.get_mut(input)[i] -= h;
            let numeric: f64 = term_values(expr, &plus)
                .into_iter()
                .zip(term_values(expr, &minus))
                .map(|((w, p), (_, m))| {
                    w * p.iter().zip(&m).map(|(p, m)| p - m).sum::<f64>() / (2.0 * h)
                })
                .sum();
            if !numeric.is_finite() {
                return f64::INFINITY;
            }
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    worst
}
