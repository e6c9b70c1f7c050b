//! The loss expression language.
//!
//! A candidate unlearning loss is a scalar function of four per-example
//! statistic vectors: the average answer log-probabilities on the forget
//! batch (`zf`) and the retain batch (`zr`) under the model being trained,
//! and the same quantities under the frozen reference model (`zf_ref`,
//! `zr_ref`). The root of every loss is an implicit mean reduction, so the
//! tree stored in [`LossExpr`] is the per-example body.
//!
//! Text format (one loss per file):
//!
//! ```text
//! # optional comment lines
//! epochs: 7
//! (mean (add (scale 1.2 (sub zf zf_ref)) (sub zr_ref zr)))
//! ```

mod builtins;
mod canon;
mod parse;
mod render;
mod validate;

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use builtins::{builtin, builtin_library, BUILTIN_NAMES};
pub use canon::canonicalize;
pub use parse::{parse, parse_expr, parse_raw, RawLoss};
pub use render::{format_constant, render, render_expr};
pub use validate::{
    repair, standard_probes, validate, Rejection, StandardProbe, Verdict, STABILIZER_EPS,
};

/// Maximum tree depth, counting the root mean.
pub const MAX_DEPTH: usize = 12;
/// Maximum node count, counting the root mean.
pub const MAX_NODES: usize = 64;
/// Allowed range for a loss's epoch budget.
pub const EPOCH_RANGE: std::ops::RangeInclusive<u32> = 1..=10;
/// Budget assigned by [`repair`] when the proposer omitted one.
pub const DEFAULT_EPOCHS: u32 = 5;

/// One of the four statistic vectors a loss may read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Input {
    Forget,
    Retain,
    ForgetRef,
    RetainRef,
}

impl Input {
    pub const ALL: [Input; 4] = [Input::Forget, Input::Retain, Input::ForgetRef, Input::RetainRef];

    pub fn name(self) -> &'static str {
        match self {
            Input::Forget => "zf",
            Input::Retain => "zr",
            Input::ForgetRef => "zf_ref",
            Input::RetainRef => "zr_ref",
        }
    }

    pub fn from_name(name: &str) -> Option<Input> {
        Input::ALL.into_iter().find(|i| i.name() == name)
    }

    /// Whether the input is read from the forget side of the batch.
    pub fn is_forget_side(self) -> bool {
        matches!(self, Input::Forget | Input::ForgetRef)
    }

    pub fn is_reference(self) -> bool {
        matches!(self, Input::ForgetRef | Input::RetainRef)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Neg,
    Exp,
    /// Natural log with no stabilization; undefined for non-positive input.
    Log,
    /// `log(1 + exp(x))`.
    Softplus,
    Sigmoid,
    Abs,
    Square,
    Relu,
    /// `log(exp(x) + eps)` with `eps = STABILIZER_EPS`.
    LogShifted,
}

impl UnaryOp {
    pub const ALL: [UnaryOp; 9] = [
        UnaryOp::Neg,
        UnaryOp::Exp,
        UnaryOp::Log,
        UnaryOp::Softplus,
        UnaryOp::Sigmoid,
        UnaryOp::Abs,
        UnaryOp::Square,
        UnaryOp::Relu,
        UnaryOp::LogShifted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Softplus => "softplus",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Abs => "abs",
            UnaryOp::Square => "square",
            UnaryOp::Relu => "relu",
            UnaryOp::LogShifted => "log_shifted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    /// `x / (|y| + eps)`.
    DivEps,
}

impl BinaryOp {
    pub const ALL: [BinaryOp; 4] = [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::DivEps];

    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::DivEps => "div",
        }
    }

    pub fn is_commutative(self) -> bool {
        matches!(self, BinaryOp::Add | BinaryOp::Mul)
    }
}

/// Operators carrying a scalar threshold. `ClampMax`/`MinScalar` both
/// compute `min(x, c)` and `ClampMin`/`MaxScalar` compute `max(x, c)`; the
/// two spellings are kept apart so a loss renders the way it was written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamOp {
    ClampMax,
    ClampMin,
    MinScalar,
    MaxScalar,
}

impl ParamOp {
    pub const ALL: [ParamOp; 4] = [
        ParamOp::ClampMax,
        ParamOp::ClampMin,
        ParamOp::MinScalar,
        ParamOp::MaxScalar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamOp::ClampMax => "clamp_max",
            ParamOp::ClampMin => "clamp_min",
            ParamOp::MinScalar => "min",
            ParamOp::MaxScalar => "max",
        }
    }

    /// True when the operator caps from above (`min(x, c)`).
    pub fn is_upper(self) -> bool {
        matches!(self, ParamOp::ClampMax | ParamOp::MinScalar)
    }
}

/// A node of the per-example loss body.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Input(Input),
    Const(f64),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
    Param(ParamOp, f64, Box<Expr>),
}

impl Expr {
    pub fn input(i: Input) -> Expr {
        Expr::Input(i)
    }

    pub fn constant(c: f64) -> Expr {
        Expr::Const(c)
    }

    pub fn unary(op: UnaryOp, a: Expr) -> Expr {
        Expr::Unary(op, Box::new(a))
    }

    pub fn binary(op: BinaryOp, a: Expr, b: Expr) -> Expr {
        Expr::Binary(op, Box::new(a), Box::new(b))
    }

    pub fn param(op: ParamOp, c: f64, a: Expr) -> Expr {
        Expr::Param(op, c, Box::new(a))
    }

    /// `scale(k, x)` sugar, stored as `Mul(Const(k), x)`.
    pub fn scale(k: f64, a: Expr) -> Expr {
        Expr::binary(BinaryOp::Mul, Expr::Const(k), a)
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        Expr::binary(BinaryOp::Add, a, b)
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        Expr::binary(BinaryOp::Sub, a, b)
    }

    pub fn neg(a: Expr) -> Expr {
        Expr::unary(UnaryOp::Neg, a)
    }

    /// Number of nodes in this subtree.
    pub fn size(&self) -> usize {
        match self {
            Expr::Input(_) | Expr::Const(_) => 1,
            Expr::Unary(_, a) | Expr::Param(_, _, a) => 1 + a.size(),
            Expr::Binary(_, a, b) => 1 + a.size() + b.size(),
        }
    }

    /// Depth of this subtree; a leaf has depth 1.
    pub fn depth(&self) -> usize {
        match self {
            Expr::Input(_) | Expr::Const(_) => 1,
            Expr::Unary(_, a) | Expr::Param(_, _, a) => 1 + a.depth(),
            Expr::Binary(_, a, b) => 1 + a.depth().max(b.depth()),
        }
    }

    pub fn uses(&self, input: Input) -> bool {
        match self {
            Expr::Input(i) => *i == input,
            Expr::Const(_) => false,
            Expr::Unary(_, a) | Expr::Param(_, _, a) => a.uses(input),
            Expr::Binary(_, a, b) => a.uses(input) || b.uses(input),
        }
    }

    pub fn uses_reference(&self) -> bool {
        self.uses(Input::ForgetRef) || self.uses(Input::RetainRef)
    }

    /// Pre-order traversal.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a Expr)) {
        f(self);
        match self {
            Expr::Input(_) | Expr::Const(_) => {}
            Expr::Unary(_, a) | Expr::Param(_, _, a) => a.walk(f),
            Expr::Binary(_, a, b) => {
                a.walk(f);
                b.walk(f);
            }
        }
    }

    /// Mutable reference to the `index`-th node in pre-order.
    pub fn node_mut(&mut self, index: usize) -> Option<&mut Expr> {
        fn go<'a>(e: &'a mut Expr, index: &mut usize) -> Option<&'a mut Expr> {
            if *index == 0 {
                return Some(e);
            }
            *index -= 1;
            match e {
                Expr::Input(_) | Expr::Const(_) => None,
                Expr::Unary(_, a) | Expr::Param(_, _, a) => go(a, index),
                Expr::Binary(_, a, b) => {
                    if let Some(found) = go(a, index) {
                        return Some(found);
                    }
                    go(b, index)
                }
            }
        }
        let mut index = index;
        go(self, &mut index)
    }

    /// The `index`-th node in pre-order.
    pub fn node(&self, index: usize) -> Option<&Expr> {
        let mut found = None;
        let mut i = 0usize;
        self.walk(&mut |e| {
            if i == index {
                found = Some(e);
            }
            i += 1;
        });
        found
    }

    fn all_constants_finite(&self) -> bool {
        let mut ok = true;
        self.walk(&mut |e| match e {
            Expr::Const(c) | Expr::Param(_, c, _) if !c.is_finite() => ok = false,
            _ => {}
        });
        ok
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_expr(self))
    }
}

/// A whole loss: the body under the root mean reduction.
///
/// Construction goes through [`LossExpr::new`], which enforces the depth and
/// size caps and the finiteness of every constant.
#[derive(Debug, Clone, PartialEq)]
pub struct LossExpr {
    body: Expr,
}

impl LossExpr {
    pub fn new(body: Expr) -> Result<LossExpr, DslError> {
        let depth = body.depth() + 1;
        if depth > MAX_DEPTH {
            return Err(DslError::TooDeep { depth });
        }
        let nodes = body.size() + 1;
        if nodes > MAX_NODES {
            return Err(DslError::TooLarge { nodes });
        }
        if !body.all_constants_finite() {
            return Err(DslError::NonFiniteConstant);
        }
        Ok(LossExpr { body })
    }

    pub fn body(&self) -> &Expr {
        &self.body
    }

    pub fn into_body(self) -> Expr {
        self.body
    }

    /// Depth including the root mean.
    pub fn depth(&self) -> usize {
        self.body.depth() + 1
    }

    /// Node count including the root mean.
    pub fn size(&self) -> usize {
        self.body.size() + 1
    }
}

impl fmt::Display for LossExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(mean {})", render_expr(&self.body))
    }
}

/// The content of a loss file: an expression plus its epoch budget.
#[derive(Debug, Clone, PartialEq)]
pub struct Loss {
    pub expr: LossExpr,
    pub epochs: u32,
}

impl Loss {
    pub fn new(expr: LossExpr, epochs: u32) -> Result<Loss, DslError> {
        if !EPOCH_RANGE.contains(&epochs) {
            return Err(DslError::EpochsOutOfRange(epochs as i64));
        }
        Ok(Loss { expr, epochs })
    }
}

impl Serialize for Loss {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&render(self))
    }
}

impl<'de> Deserialize<'de> for Loss {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Loss, D::Error> {
        let text = String::deserialize(d)?;
        parse(&text).map_err(serde::de::Error::custom)
    }
}

/// Where a candidate came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Builtin,
    Grammar,
    Remote,
    Seeded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub parent: u64,
    pub generation: u32,
}

/// A loss under consideration by the search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateLoss {
    pub id: u64,
    pub loss: Loss,
    pub lineage: Option<Lineage>,
    pub source: Source,
}

impl CandidateLoss {
    pub fn new(id: u64, loss: Loss, source: Source) -> CandidateLoss {
        CandidateLoss {
            id,
            loss,
            lineage: None,
            source,
        }
    }

    pub fn with_lineage(mut self, lineage: Lineage) -> CandidateLoss {
        self.lineage = Some(lineage);
        self
    }

    pub fn epochs(&self) -> u32 {
        self.loss.epochs
    }

    pub fn expr(&self) -> &LossExpr {
        &self.loss.expr
    }

    /// Byte key under which duplicates collide.
    pub fn dedup_key(&self) -> String {
        render(&self.loss)
    }
}

/// The four statistic vectors for one optimization step.
///
/// `zf`/`zf_ref` share the forget batch length and `zr`/`zr_ref` share the
/// retain batch length; the two lengths may differ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeBatch {
    pub zf: Vec<f64>,
    pub zr: Vec<f64>,
    pub zf_ref: Vec<f64>,
    pub zr_ref: Vec<f64>,
}

impl ProbeBatch {
    pub fn new(
        zf: Vec<f64>,
        zr: Vec<f64>,
        zf_ref: Vec<f64>,
        zr_ref: Vec<f64>,
    ) -> Result<ProbeBatch, DslError> {
        let batch = ProbeBatch {
            zf,
            zr,
            zf_ref,
            zr_ref,
        };
        batch.check()?;
        Ok(batch)
    }

    pub fn check(&self) -> Result<(), DslError> {
        if self.zf.is_empty() || self.zr.is_empty() {
            return Err(DslError::BadBatch("empty forget or retain vector".into()));
        }
        if self.zf.len() != self.zf_ref.len() || self.zr.len() != self.zr_ref.len() {
            return Err(DslError::BadBatch(format!(
                "reference lengths differ: zf {} / zf_ref {}, zr {} / zr_ref {}",
                self.zf.len(),
                self.zf_ref.len(),
                self.zr.len(),
                self.zr_ref.len()
            )));
        }
        let all = [&self.zf, &self.zr, &self.zf_ref, &self.zr_ref];
        if all.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(DslError::BadBatch("non-finite entry".into()));
        }
        Ok(())
    }

    pub fn forget_len(&self) -> usize {
        self.zf.len()
    }

    pub fn retain_len(&self) -> usize {
        self.zr.len()
    }

    pub fn get(&self, input: Input) -> &[f64] {
        match input {
            Input::Forget => &self.zf,
            Input::Retain => &self.zr,
            Input::ForgetRef => &self.zf_ref,
            Input::RetainRef => &self.zr_ref,
        }
    }

    pub fn get_mut(&mut self, input: Input) -> &mut Vec<f64> {
        match input {
            Input::Forget => &mut self.zf,
            Input::Retain => &mut self.zr,
            Input::ForgetRef => &mut self.zf_ref,
            Input::RetainRef => &mut self.zr_ref,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DslError {
    #[error("syntax error at line {line}, column {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("unknown node `{name}` at line {line}, column {col}")]
    UnknownNode { name: String, line: usize, col: usize },
    #[error("`{name}` at line {line}, column {col} takes {expected} argument(s), got {found}")]
    Arity {
        name: String,
        expected: usize,
        found: usize,
        line: usize,
        col: usize,
    },
    #[error("missing `epochs: K` header")]
    MissingEpochs,
    #[error("epochs {0} outside [1, 10]")]
    EpochsOutOfRange(i64),
    #[error("tree depth {depth} exceeds {MAX_DEPTH}")]
    TooDeep { depth: usize },
    #[error("node count {nodes} exceeds {MAX_NODES}")]
    TooLarge { nodes: usize },
    #[error("constant is not finite")]
    NonFiniteConstant,
    #[error("loss must be a single `(mean ...)` root")]
    MissingMean,
    #[error("`mean` may only appear at the root (line {line}, column {col})")]
    NestedMean { line: usize, col: usize },
    #[error("expected one expression, found {0}")]
    RootCount(usize),
    #[error("bad batch: {0}")]
    BadBatch(String),
}
