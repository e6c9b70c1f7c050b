use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    BinaryOp, Expr, Loss, LossExpr, ProbeBatch, RawLoss, UnaryOp, DEFAULT_EPOCHS, EPOCH_RANGE,
};
use crate::evalgrad;

/// The epsilon used by `div`, `log_shifted`, and log repair.
pub const STABILIZER_EPS: f64 = 1e-6;

const PROBE_LEN: usize = 6;
const MIXED_PROBE_SEED: u64 = 0x5eed_0001;

#[derive(Debug, Clone, PartialEq)]
pub struct StandardProbe {
    pub name: &'static str,
    pub batch: ProbeBatch,
}

/// The three probes every candidate must survive: all zeros, seeded
/// mixed-sign values, and alternating ±50 entries.
pub fn standard_probes() -> Vec<StandardProbe> {
    let zeros = vec![0.0; PROBE_LEN];
    let mut rng = ChaCha8Rng::seed_from_u64(MIXED_PROBE_SEED);
    let mut mixed = || -> Vec<f64> { (0..PROBE_LEN).map(|_| rng.gen_range(-4.0..4.0)).collect() };
    let (mf, mr, mfr, mrr) = (mixed(), mixed(), mixed(), mixed());
    let alt = |phase: usize| -> Vec<f64> {
        (0..PROBE_LEN)
            .map(|i| if (i / (phase + 1)) % 2 == 0 { 50.0 } else { -50.0 })
            .collect()
    };
    let neg = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| -x).collect() };
    vec![
        StandardProbe {
            name: "zeros",
            batch: ProbeBatch::new(zeros.clone(), zeros.clone(), zeros.clone(), zeros).unwrap(),
        },
        StandardProbe {
            name: "mixed",
            batch: ProbeBatch::new(mf, mr, mfr, mrr).unwrap(),
        },
        StandardProbe {
            name: "large",
            batch: ProbeBatch::new(alt(0), neg(alt(0)), alt(1), neg(alt(1))).unwrap(),
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Valid,
    Invalid { probe: String, reason: String },
}

impl Verdict {
    pub fn is_valid(&self) -> bool {
        matches!(self, Verdict::Valid)
    }
}

/// Valid iff the loss value and its gradient are finite on every probe.
pub fn validate(loss: &Loss, probes: &[StandardProbe]) -> Verdict {
    for probe in probes {
        if let Err(e) = evalgrad::gradient(&loss.expr, &probe.batch) {
            return Verdict::Invalid {
                probe: probe.name.to_string(),
                reason: e.to_string(),
            };
        }
    }
    Verdict::Valid
}

/// Why [`repair`] gave up on a proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub reason: String,
    pub probe: Option<String>,
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.probe {
            Some(p) => write!(f, "{} (probe `{p}`)", self.reason),
            None => f.write_str(&self.reason),
        }
    }
}

impl std::error::Error for Rejection {}

/// Turns raw proposer output into a valid loss, or explains why not.
///
/// Several roots are averaged into one, a missing epoch budget becomes
/// [`DEFAULT_EPOCHS`] (out-of-range budgets are clamped), and every `log`
/// whose operand is not a positive constant is stabilized: `log(exp(u))`
/// becomes `log_shifted(u)` and any other `log(x)` becomes
/// `log(eps + relu(x))`.
pub fn repair(raw: &RawLoss) -> Result<Loss, Rejection> {
    let reject = |reason: String| Rejection {
        reason,
        probe: None,
    };
    let n = raw.roots.len();
    let body = match n {
        0 => return Err(reject("no expression found".into())),
        1 => raw.roots[0].clone(),
        _ => {
            let mut iter = raw.roots.iter().cloned();
            let first = iter.next().unwrap();
            let sum = iter.fold(first, Expr::add);
            Expr::scale(1.0 / n as f64, sum)
        }
    };
    let body = stabilize_logs(body);
    let expr = LossExpr::new(body).map_err(|e| reject(e.to_string()))?;
    let epochs = match raw.epochs {
        None => DEFAULT_EPOCHS,
        Some(k) => k.clamp(*EPOCH_RANGE.start() as i64, *EPOCH_RANGE.end() as i64) as u32,
    };
    let loss = Loss { expr, epochs };
    match validate(&loss, &standard_probes()) {
        Verdict::Valid => Ok(loss),
        Verdict::Invalid { probe, reason } => Err(Rejection {
            reason,
            probe: Some(probe),
        }),
    }
}

fn stabilize_logs(e: Expr) -> Expr {
    match e {
        Expr::Unary(UnaryOp::Log, a) => match *a {
            Expr::Const(c) if c > 0.0 => Expr::unary(UnaryOp::Log, Expr::Const(c)),
            Expr::Unary(UnaryOp::Exp, u) => Expr::unary(UnaryOp::LogShifted, stabilize_logs(*u)),
            other => Expr::unary(
                UnaryOp::Log,
                Expr::add(
                    Expr::Const(STABILIZER_EPS),
                    Expr::unary(UnaryOp::Relu, stabilize_logs(other)),
                ),
            ),
        },
        Expr::Input(_) | Expr::Const(_) => e,
        Expr::Unary(op, a) => Expr::unary(op, stabilize_logs(*a)),
        Expr::Param(op, c, a) => Expr::param(op, c, stabilize_logs(*a)),
        Expr::Binary(op, a, b) => Expr::binary(op, stabilize_logs(*a), stabilize_logs(*b)),
    }
}

/// Used by tests and the grammar: true when the tree contains `op`.
#[allow(dead_code)]
pub(crate) fn contains_unary(e: &Expr, op: UnaryOp) -> bool {
    let mut found = false;
    e.walk(&mut |n| {
        if matches!(n, Expr::Unary(o, _) if *o == op) {
            found = true;
        }
    });
    found
}

#[allow(dead_code)]
pub(crate) fn contains_binary(e: &Expr, op: BinaryOp) -> bool {
    let mut found = false;
    e.walk(&mut |n| {
        if matches!(n, Expr::Binary(o, _, _) if *o == op) {
            found = true;
        }
    });
    found
}
