use super::{
    BinaryOp, DslError, Expr, Input, Loss, LossExpr, ParamOp, UnaryOp, EPOCH_RANGE, MAX_DEPTH,
};

/// Hard nesting bound for the reader; trees deeper than this cannot be
/// valid anyway and are rejected before recursion gets expensive.
const READER_NESTING_LIMIT: usize = 4 * MAX_DEPTH;

/// Lenient parse result: everything a proposer emitted, before repair.
#[derive(Debug, Clone, PartialEq)]
pub struct RawLoss {
    pub epochs: Option<i64>,
    /// Expression roots with every `mean` wrapper removed.
    pub roots: Vec<Expr>,
}

#[derive(Debug, Clone)]
enum SExpr {
    Atom { text: String, line: usize, col: usize },
    List { items: Vec<SExpr>, line: usize, col: usize },
}

impl SExpr {
    fn pos(&self) -> (usize, usize) {
        match self {
            SExpr::Atom { line, col, .. } | SExpr::List { line, col, .. } => (*line, *col),
        }
    }
}

struct Reader<'a> {
    chars: std::iter::Peekable<std::str::CharIndices<'a>>,
    src: &'a str,
    line: usize,
    col: usize,
}

impl<'a> Reader<'a> {
    fn new(src: &'a str, first_line: usize) -> Reader<'a> {
        Reader {
            chars: src.char_indices().peekable(),
            src,
            line: first_line,
            col: 1,
        }
    }

    fn bump(&mut self) -> Option<char> {
        let (_, c) = self.chars.next()?;
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn skip_ws(&mut self) {
        while let Some(&(_, c)) = self.chars.peek() {
            if c == '#' && self.col == 1 {
                while let Some(&(_, c)) = self.chars.peek() {
                    if c == '\n' {
                        break;
                    }
                    self.bump();
                }
            } else if c.is_whitespace() {
                self.bump();
            } else {
                break;
            }
        }
    }

    fn error(&self, msg: impl Into<String>) -> DslError {
        DslError::Syntax {
            line: self.line,
            col: self.col,
            msg: msg.into(),
        }
    }

    fn read_all(&mut self) -> Result<Vec<SExpr>, DslError> {
        let mut out = Vec::new();
        loop {
            self.skip_ws();
            match self.chars.peek() {
                None => return Ok(out),
                Some(&(_, ')')) => return Err(self.error("unbalanced `)`")),
                Some(_) => out.push(self.read(0)?),
            }
        }
    }

    fn read(&mut self, nesting: usize) -> Result<SExpr, DslError> {
        if nesting > READER_NESTING_LIMIT {
            return Err(DslError::TooDeep { depth: nesting });
        }
        self.skip_ws();
        let (line, col) = (self.line, self.col);
        match self.chars.peek() {
            None => Err(self.error("unexpected end of input")),
            Some(&(_, '(')) => {
                self.bump();
                let mut items = Vec::new();
                loop {
                    self.skip_ws();
                    match self.chars.peek() {
                        None => {
                            return Err(DslError::Syntax {
                                line,
                                col,
                                msg: "unclosed `(`".into(),
                            })
                        }
                        Some(&(_, ')')) => {
                            self.bump();
                            return Ok(SExpr::List { items, line, col });
                        }
                        Some(_) => items.push(self.read(nesting + 1)?),
                    }
                }
            }
            Some(&(start, _)) => {
                let mut end = start;
                while let Some(&(i, c)) = self.chars.peek() {
                    if c.is_whitespace() || c == '(' || c == ')' {
                        break;
                    }
                    end = i + c.len_utf8();
                    self.bump();
                }
                Ok(SExpr::Atom {
                    text: self.src[start..end].to_string(),
                    line,
                    col,
                })
            }
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum MeanMode {
    /// `mean` is illegal below the root.
    Reject,
    /// `mean` wrappers are dropped wherever they appear.
    Strip,
}

fn number(text: &str) -> Option<f64> {
    let first = text.chars().next()?;
    if !(first.is_ascii_digit() || first == '-' || first == '+' || first == '.') {
        return None;
    }
    text.parse::<f64>().ok()
}

fn literal(s: &SExpr) -> Option<f64> {
    match s {
        SExpr::Atom { text, .. } => number(text),
        SExpr::List { .. } => None,
    }
}

fn finite(c: f64) -> Result<f64, DslError> {
    if c.is_finite() {
        Ok(c)
    } else {
        Err(DslError::NonFiniteConstant)
    }
}

fn build(s: &SExpr, mode: MeanMode) -> Result<Expr, DslError> {
    match s {
        SExpr::Atom { text, line, col } => {
            if let Some(input) = Input::from_name(text) {
                return Ok(Expr::Input(input));
            }
            if let Some(c) = number(text) {
                return Ok(Expr::Const(finite(c)?));
            }
            Err(DslError::UnknownNode {
                name: text.clone(),
                line: *line,
                col: *col,
            })
        }
        SExpr::List { items, line, col } => {
            let (line, col) = (*line, *col);
            let Some((head, args)) = items.split_first() else {
                return Err(DslError::Syntax {
                    line,
                    col,
                    msg: "empty list".into(),
                });
            };
            let SExpr::Atom { text: name, .. } = head else {
                return Err(DslError::Syntax {
                    line,
                    col,
                    msg: "list head must be a node name".into(),
                });
            };
            let arity = |expected: usize| -> Result<(), DslError> {
                if args.len() == expected {
                    Ok(())
                } else {
                    Err(DslError::Arity {
                        name: name.clone(),
                        expected,
                        found: args.len(),
                        line,
                        col,
                    })
                }
            };
            if name == "mean" {
                arity(1)?;
                return match mode {
                    MeanMode::Strip => build(&args[0], mode),
                    MeanMode::Reject => Err(DslError::NestedMean { line, col }),
                };
            }
            if name == "const" {
                arity(1)?;
                return match literal(&args[0]) {
                    Some(c) => Ok(Expr::Const(finite(c)?)),
                    None => Err(DslError::Syntax {
                        line,
                        col,
                        msg: "`const` takes a numeric literal".into(),
                    }),
                };
            }
            if name == "scale" {
                arity(2)?;
                let Some(k) = literal(&args[0]) else {
                    return Err(DslError::Syntax {
                        line,
                        col,
                        msg: "`scale` takes a numeric literal first".into(),
                    });
                };
                return Ok(Expr::scale(finite(k)?, build(&args[1], mode)?));
            }
            if let Some(op) = UnaryOp::ALL.into_iter().find(|op| op.name() == name) {
                arity(1)?;
                return Ok(Expr::unary(op, build(&args[0], mode)?));
            }
            if let Some(op) = BinaryOp::ALL.into_iter().find(|op| op.name() == name) {
                arity(2)?;
                return Ok(Expr::binary(
                    op,
                    build(&args[0], mode)?,
                    build(&args[1], mode)?,
                ));
            }
            if let Some(op) = ParamOp::ALL.into_iter().find(|op| op.name() == name) {
                arity(2)?;
                let (c, arg) = match (literal(&args[0]), literal(&args[1])) {
                    (Some(c), _) => (c, &args[1]),
                    (None, Some(c)) => (c, &args[0]),
                    (None, None) => {
                        return Err(DslError::Syntax {
                            line,
                            col,
                            msg: format!("`{name}` needs a numeric threshold"),
                        })
                    }
                };
                return Ok(Expr::param(op, finite(c)?, build(arg, mode)?));
            }
            let (hl, hc) = head.pos();
            Err(DslError::UnknownNode {
                name: name.clone(),
                line: hl,
                col: hc,
            })
        }
    }
}

fn strict_root(s: &SExpr) -> Result<LossExpr, DslError> {
    match s {
        SExpr::List { items, line, col } => match items.split_first() {
            Some((SExpr::Atom { text, .. }, args)) if text == "mean" => {
                if args.len() != 1 {
                    return Err(DslError::Arity {
                        name: "mean".into(),
                        expected: 1,
                        found: args.len(),
                        line: *line,
                        col: *col,
                    });
                }
                LossExpr::new(build(&args[0], MeanMode::Reject)?)
            }
            _ => Err(DslError::MissingMean),
        },
        SExpr::Atom { .. } => Err(DslError::MissingMean),
    }
}

/// Extracts the value of an `epochs: K` line, tolerating the docstring
/// quoting proposers tend to add.
fn epochs_line(line: &str) -> Option<Result<i64, DslError>> {
    let t = line.trim().trim_matches(|c| c == '"' || c == '\'').trim();
    let rest = t.strip_prefix("epochs")?;
    let rest = rest.trim_start().strip_prefix(':')?;
    let value = rest.trim().trim_matches(|c| c == '"' || c == '\'').trim();
    Some(value.parse::<i64>().map_err(|_| DslError::Syntax {
        line: 0,
        col: 0,
        msg: format!("bad epochs value `{value}`"),
    }))
}

/// Splits header from body. Returns the epochs value (if any) and the byte
/// offset and line number where the expression text begins.
fn split_header(text: &str) -> Result<(Option<i64>, usize, usize), DslError> {
    let mut offset = 0;
    for (n, line) in text.split_inclusive('\n').enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            offset += line.len();
            continue;
        }
        return match epochs_line(trimmed) {
            Some(Ok(k)) => Ok((Some(k), offset + line.len(), n + 2)),
            Some(Err(DslError::Syntax { msg, .. })) => Err(DslError::Syntax {
                line: n + 1,
                col: 1,
                msg,
            }),
            Some(Err(e)) => Err(e),
            None => Ok((None, offset, n + 1)),
        };
    }
    Ok((None, offset, 1))
}

/// Parses a loss file strictly: `epochs: K` header, then exactly one
/// `(mean ...)` expression.
pub fn parse(text: &str) -> Result<Loss, DslError> {
    let (epochs, offset, first_line) = split_header(text)?;
    let epochs = epochs.ok_or(DslError::MissingEpochs)?;
    if epochs < *EPOCH_RANGE.start() as i64 || epochs > *EPOCH_RANGE.end() as i64 {
        return Err(DslError::EpochsOutOfRange(epochs));
    }
    let forms = Reader::new(&text[offset..], first_line).read_all()?;
    if forms.len() != 1 {
        return Err(DslError::RootCount(forms.len()));
    }
    let expr = strict_root(&forms[0])?;
    Loss::new(expr, epochs as u32)
}

/// Parses a bare `(mean ...)` expression with no header.
pub fn parse_expr(text: &str) -> Result<LossExpr, DslError> {
    let forms = Reader::new(text, 1).read_all()?;
    if forms.len() != 1 {
        return Err(DslError::RootCount(forms.len()));
    }
    strict_root(&forms[0])
}

/// Lenient parse for proposer output. Accepts a missing header, several
/// expressions, and `mean` anywhere. Size caps are not enforced here; that
/// happens after [`repair`](super::repair) assembles the final tree.
pub fn parse_raw(text: &str) -> Result<RawLoss, DslError> {
    let (epochs, offset, first_line) = split_header(text)?;
    let forms = Reader::new(&text[offset..], first_line).read_all()?;
    let roots = forms
        .iter()
        .map(|f| build(f, MeanMode::Strip))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RawLoss { epochs, roots })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_discovered_tofu_loss() {
        let loss = parse("epochs: 7\n(mean (add (scale 1.2 (sub zf zf_ref)) (sub zr_ref zr)))")
            .unwrap();
        assert_eq!(loss.epochs, 7);
        let expected = Expr::add(
            Expr::scale(1.2, Expr::sub(Expr::Input(Input::Forget), Expr::Input(Input::ForgetRef))),
            Expr::sub(Expr::Input(Input::RetainRef), Expr::Input(Input::Retain)),
        );
        assert_eq!(loss.expr.body(), &expected);
    }

    #[test]
    fn single_leaf() {
        let loss = parse("epochs: 1\n(mean zf)").unwrap();
        assert_eq!(loss.expr.body(), &Expr::Input(Input::Forget));
    }

    #[test]
    fn epochs_out_of_range() {
        assert_eq!(
            parse("epochs: 11\n(mean zf)"),
            Err(DslError::EpochsOutOfRange(11))
        );
        assert_eq!(
            parse("epochs: 0\n(mean zf)"),
            Err(DslError::EpochsOutOfRange(0))
        );
    }

    #[test]
    fn missing_header() {
        assert_eq!(parse("(mean zf)"), Err(DslError::MissingEpochs));
    }

    #[test]
    fn comments_are_skipped() {
        let loss = parse("# a comment\nepochs: 3\n# another\n(mean (neg zr))\n").unwrap();
        assert_eq!(loss.epochs, 3);
    }

    #[test]
    fn syntax_error_reports_position() {
        match parse("epochs: 2\n(mean (add zf zr)") {
            Err(DslError::Syntax { line, col, .. }) => assert_eq!((line, col), (2, 1)),
            other => panic!("unexpected {other:?}"),
        }
        match parse("epochs: 2\n(mean (add zf zr)))") {
            Err(DslError::Syntax { line, col, .. }) => assert_eq!((line, col), (2, 19)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_node_reports_position() {
        match parse("epochs: 2\n(mean (tanh zf))") {
            Err(DslError::UnknownNode { name, line, col }) => {
                assert_eq!(name, "tanh");
                assert_eq!((line, col), (2, 8));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse("epochs: 2\n(mean zq)"),
            Err(DslError::UnknownNode { .. })
        ));
    }

    #[test]
    fn arity_checked() {
        assert!(matches!(
            parse("epochs: 2\n(mean (add zf))"),
            Err(DslError::Arity { expected: 2, found: 1, .. })
        ));
    }

    #[test]
    fn nested_mean_rejected_strictly_but_stripped_leniently() {
        assert!(matches!(
            parse("epochs: 2\n(mean (sub (mean zf) zr))"),
            Err(DslError::NestedMean { .. })
        ));
        let raw = parse_raw("(sub (mean zf) (mean zr))").unwrap();
        assert_eq!(raw.epochs, None);
        assert_eq!(
            raw.roots,
            vec![Expr::sub(Expr::Input(Input::Forget), Expr::Input(Input::Retain))]
        );
    }

    #[test]
    fn depth_limit() {
        // root mean + 10 neg + leaf = 12 levels: accepted
        let ok = format!("epochs: 1\n(mean {}zf{})", "(neg ".repeat(10), ")".repeat(10));
        assert!(parse(&ok).is_ok());
        // 13 levels: rejected
        let deep = format!("epochs: 1\n(mean {}zf{})", "(neg ".repeat(11), ")".repeat(11));
        assert_eq!(parse(&deep), Err(DslError::TooDeep { depth: 13 }));
    }

    #[test]
    fn size_limit() {
        // a balanced chain of adds with 33 leaves is 65 body nodes + root
        let mut e = "zf".to_string();
        for _ in 0..32 {
            e = format!("(add {e} zr)");
        }
        assert!(matches!(
            parse(&format!("epochs: 1\n(mean {e})")),
            Err(DslError::TooDeep { .. }) | Err(DslError::TooLarge { .. })
        ));
        let wide = "(add (add (add (add zf zf) (add zf zf)) (add (add zf zf) (add zf zf))) (add (add (add zf zf) (add zf zf)) (add (add zf zf) (add zf zf))))";
        // 31 + 31 + 1 body nodes + root = 64: accepted
        assert!(parse(&format!("epochs: 1\n(mean (add {wide} {wide}))")).is_ok());
        // 1 + 31 + (1 + 31 + 1) body nodes + root = 66: rejected
        assert_eq!(
            parse(&format!("epochs: 1\n(mean (add {wide} (add {wide} zf)))")),
            Err(DslError::TooLarge { nodes: 66 })
        );
    }

    #[test]
    fn non_finite_constant_rejected() {
        assert_eq!(
            parse("epochs: 1\n(mean (scale 1e999 zf))"),
            Err(DslError::NonFiniteConstant)
        );
        assert!(parse("epochs: 1\n(mean (scale inf zf))").is_err());
    }

    #[test]
    fn param_threshold_either_side() {
        let a = parse("epochs: 8\n(mean (min 1 (sub zf zr)))").unwrap();
        let b = parse("epochs: 8\n(mean (min (sub zf zr) 1))").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lenient_header_forms() {
        let raw = parse_raw("\"\"\"epochs: 4\"\"\"\n(mean zf)\n(mean zr)").unwrap();
        assert_eq!(raw.epochs, Some(4));
        assert_eq!(raw.roots.len(), 2);
    }
}
