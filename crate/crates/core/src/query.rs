//! Behavior-pattern queries over weighted DAGs.
//!
//! Grammar (conjunctions only):
//!
//! ```text
//! query     := predicate ( "&&" predicate )*
//! predicate := "mass" "(" node ")" cmp number
//!            | "count" "(" "level" "=" L [ "," "min_mass" "=" T ] ")" cmp integer
//!            | "top" "(" "level" "=" L ")" "==" node
//!            | "split" "(" node "," node [ "," "tol" "=" T ] [ "," "min_mass" "=" T ] ")"
//!            | "entropy" "(" "level" "=" L ")" cmp number
//! cmp       := "<" | "<=" | "==" | ">=" | ">"
//! node      := bare-token | "quoted string"
//! ```
//!
//! All predicates read aggregated values. Entropies are in bits.

use std::fmt;

use crate::dag::{AbstractionDag, NodeIx};
use crate::error::QueryError;
use crate::metrics::{argmax_at_level, EntropyBase};
use crate::propagate::WeightedDag;

pub const DEFAULT_MIN_MASS: f64 = 0.1;
pub const DEFAULT_SPLIT_TOLERANCE: f64 = 0.05;

pub const CMP_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cmp {
    Lt,
    Le,
    Eq,
    Ge,
    Gt,
}

impl Cmp {
    /// Values within `CMP_EPS` compare equal, so sums like 0.4+0.3+0.2+0.1 match 1.
    pub fn holds(self, lhs: f64, rhs: f64) -> bool {
        let eq = (lhs - rhs).abs() <= CMP_EPS;
        match self {
            Cmp::Lt => lhs < rhs && !eq,
            Cmp::Le => lhs < rhs || eq,
            Cmp::Eq => eq,
            Cmp::Ge => lhs > rhs || eq,
            Cmp::Gt => lhs > rhs && !eq,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Cmp::Lt => "<",
            Cmp::Le => "<=",
            Cmp::Eq => "==",
            Cmp::Ge => ">=",
            Cmp::Gt => ">",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Predicate {
    Mass { node: NodeIx, cmp: Cmp, threshold: f64 },
    Count { level: u32, min_mass: f64, cmp: Cmp, count: u64 },
    Top { level: u32, node: NodeIx },
    Split { a: NodeIx, b: NodeIx, tolerance: f64, min_mass: f64 },
    Entropy { level: u32, cmp: Cmp, bits: f64 },
}

/// A validated conjunction of predicates bound to one DAG.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternQuery {
    pub predicates: Vec<Predicate>,
    canonical: String,
}

/// Values used when a predicate leaves `min_mass` or `tol` out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryDefaults {
    pub min_mass: f64,
    pub tolerance: f64,
}

impl Default for QueryDefaults {
    fn default() -> Self {
        QueryDefaults {
            min_mass: DEFAULT_MIN_MASS,
            tolerance: DEFAULT_SPLIT_TOLERANCE,
        }
    }
}

impl PatternQuery {
    pub fn parse(text: &str, dag: &AbstractionDag) -> Result<Self, QueryError> {
        Self::parse_with(text, dag, QueryDefaults::default())
    }

    pub fn parse_with(text: &str, dag: &AbstractionDag, defaults: QueryDefaults) -> Result<Self, QueryError> {
        let tokens = lex(text)?;
        let mut parser = Parser {
            tokens,
            pos: 0,
            dag,
            end: text.chars().count() + 1,
            defaults,
        };
        let mut predicates = vec![parser.predicate()?];
        while parser.peek().is_some() {
            parser.expect(&Tok::And, "`&&`")?;
            predicates.push(parser.predicate()?);
        }
        let canonical = predicates
            .iter()
            .map(|p| render(p, dag))
            .collect::<Vec<_>>()
            .join(" && ");
        Ok(PatternQuery { predicates, canonical })
    }

    /// Normalized text with every default spelled out.
    pub fn canonical(&self) -> &str {
        &self.canonical
    }

    pub fn evaluate(&self, wd: &WeightedDag, dag: &AbstractionDag) -> bool {
        self.predicates.iter().all(|p| holds(p, wd, dag))
    }
}

impl fmt::Display for PatternQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical)
    }
}

fn holds(p: &Predicate, wd: &WeightedDag, dag: &AbstractionDag) -> bool {
    match *p {
        Predicate::Mass { node, cmp, threshold } => cmp.holds(wd.aggregate(node), threshold),
        Predicate::Count {
            level,
            min_mass,
            cmp,
            count,
        } => {
            let n = if min_mass <= 0.0 {
                dag.nodes_at_level(level).map(|n| n.len()).unwrap_or(0)
            } else {
                wd.aggregates()
                    .iter()
                    .filter(|&&(ix, v)| dag.level(ix) == level && Cmp::Ge.holds(v, min_mass))
                    .count()
            };
            cmp.holds(n as f64, count as f64)
        }
        Predicate::Top { level, node } => argmax_at_level(wd, dag, level).is_ok_and(|top| top == node),
        Predicate::Split {
            a,
            b,
            tolerance,
            min_mass,
        } => {
            let (va, vb) = (wd.aggregate(a), wd.aggregate(b));
            Cmp::Le.holds((va - vb).abs(), tolerance)
                && Cmp::Ge.holds(va, min_mass)
                && Cmp::Ge.holds(vb, min_mass)
                && !dag.are_related(a, b)
        }
        Predicate::Entropy { level, cmp, bits } => {
            let h = crate::metrics::level_entropy(wd, dag, level, EntropyBase::Two).unwrap_or(0.0);
            cmp.holds(h, bits)
        }
    }
}

fn render(p: &Predicate, dag: &AbstractionDag) -> String {
    let node = |ix: NodeIx| {
        let id = dag.id(ix).as_str();
        if id.chars().all(is_bare) {
            id.to_string()
        } else {
            format!("{id:?}")
        }
    };
    match *p {
        Predicate::Mass { node: n, cmp, threshold } => format!("mass({}) {} {threshold}", node(n), cmp.as_str()),
        Predicate::Count {
            level,
            min_mass,
            cmp,
            count,
        } => format!("count(level={level}, min_mass={min_mass}) {} {count}", cmp.as_str()),
        Predicate::Top { level, node: n } => format!("top(level={level}) == {}", node(n)),
        Predicate::Split {
            a,
            b,
            tolerance,
            min_mass,
        } => format!("split({}, {}, tol={tolerance}, min_mass={min_mass})", node(a), node(b)),
        Predicate::Entropy { level, cmp, bits } => format!("entropy(level={level}) {} {bits}", cmp.as_str()),
    }
}

/// Matches of one query over a collection, ids sorted.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct FilterResult {
    pub query: String,
    pub matches: Vec<String>,
    pub total: usize,
    pub fraction: f64,
}

pub fn filter_instances(query: &PatternQuery, wds: &[WeightedDag], dag: &AbstractionDag) -> FilterResult {
    let mut matches: Vec<String> = wds
        .iter()
        .filter(|wd| query.evaluate(wd, dag))
        .map(|wd| wd.instance_id.clone())
        .collect();
    matches.sort();
    let fraction = if wds.is_empty() {
        0.0
    } else {
        matches.len() as f64 / wds.len() as f64
    };
    FilterResult {
        query: query.canonical().to_string(),
        matches,
        total: wds.len(),
        fraction,
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    LParen,
    RParen,
    Comma,
    Assign,
    And,
    Cmp(Cmp),
    Word(String),
    Quoted(String),
}

fn is_bare(c: char) -> bool {
    !c.is_whitespace() && !matches!(c, '(' | ')' | ',' | '=' | '<' | '>' | '&' | '!' | '"')
}

/// Tokens paired with 1-based character positions.
fn lex(text: &str) -> Result<Vec<(usize, Tok)>, QueryError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let pos = i + 1;
        let next = chars.get(i + 1).copied();
        let (tok, width) = match c {
            c if c.is_whitespace() => {
                i += 1;
                continue;
            }
            '(' => (Tok::LParen, 1),
            ')' => (Tok::RParen, 1),
            ',' => (Tok::Comma, 1),
            '&' if next == Some('&') => (Tok::And, 2),
            '=' if next == Some('=') => (Tok::Cmp(Cmp::Eq), 2),
            '=' => (Tok::Assign, 1),
            '<' if next == Some('=') => (Tok::Cmp(Cmp::Le), 2),
            '<' => (Tok::Cmp(Cmp::Lt), 1),
            '>' if next == Some('=') => (Tok::Cmp(Cmp::Ge), 2),
            '>' => (Tok::Cmp(Cmp::Gt), 1),
            '"' => {
                let mut s = String::new();
                let mut j = i + 1;
                loop {
                    match chars.get(j) {
                        None => {
                            return Err(QueryError::Syntax {
                                pos,
                                message: "unterminated string".into(),
                            })
                        }
                        Some('"') => break,
                        Some('\\') if j + 1 < chars.len() => {
                            s.push(chars[j + 1]);
                            j += 2;
                        }
                        Some(&ch) => {
                            s.push(ch);
                            j += 1;
                        }
                    }
                }
                (Tok::Quoted(s), j + 1 - i)
            }
            c if is_bare(c) => {
                let len = chars[i..].iter().take_while(|&&ch| is_bare(ch)).count();
                (Tok::Word(chars[i..i + len].iter().collect()), len)
            }
            other => {
                return Err(QueryError::Syntax {
                    pos,
                    message: format!("unexpected character `{other}`"),
                })
            }
        };
        out.push((pos, tok));
        i += width;
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<(usize, Tok)>,
    pos: usize,
    dag: &'a AbstractionDag,
    end: usize,
    defaults: QueryDefaults,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&(usize, Tok)> {
        self.tokens.get(self.pos)
    }

    fn here(&self) -> usize {
        self.peek().map(|t| t.0).unwrap_or(self.end)
    }

    fn syntax(&self, message: impl Into<String>) -> QueryError {
        QueryError::Syntax {
            pos: self.here(),
            message: message.into(),
        }
    }

    fn next(&mut self) -> Option<(usize, Tok)> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expect(&mut self, tok: &Tok, what: &str) -> Result<usize, QueryError> {
        match self.peek() {
            Some((pos, t)) if t == tok => {
                let pos = *pos;
                self.pos += 1;
                Ok(pos)
            }
            _ => Err(self.syntax(format!("expected {what}"))),
        }
    }

    fn word(&mut self, what: &str) -> Result<(usize, String), QueryError> {
        match self.peek() {
            Some((pos, Tok::Word(w))) => {
                let r = (*pos, w.clone());
                self.pos += 1;
                Ok(r)
            }
            _ => Err(self.syntax(format!("expected {what}"))),
        }
    }

    fn node(&mut self) -> Result<NodeIx, QueryError> {
        let (pos, id) = match self.peek() {
            Some((pos, Tok::Word(w))) | Some((pos, Tok::Quoted(w))) => (*pos, w.clone()),
            _ => return Err(self.syntax("expected a node id")),
        };
        self.pos += 1;
        self.dag.get(&id).ok_or(QueryError::UnknownNode { pos, id })
    }

    fn number(&mut self) -> Result<(usize, f64), QueryError> {
        let (pos, w) = self.word("a number")?;
        w.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(|v| (pos, v))
            .ok_or(QueryError::Syntax {
                pos,
                message: format!("`{w}` is not a number"),
            })
    }

    fn cmp(&mut self) -> Result<Cmp, QueryError> {
        match self.peek() {
            Some((_, Tok::Cmp(c))) => {
                let c = *c;
                self.pos += 1;
                Ok(c)
            }
            _ => Err(self.syntax("expected a comparator (<, <=, ==, >=, >)")),
        }
    }

    fn level(&self, pos: usize, value: f64) -> Result<u32, QueryError> {
        if value.fract() != 0.0 || value < 1.0 || value > u32::MAX as f64 {
            return Err(QueryError::Syntax {
                pos,
                message: "level must be a positive integer".into(),
            });
        }
        let level = value as u32;
        if !self.dag.has_level(level) {
            return Err(QueryError::UnknownLevel { pos, level });
        }
        Ok(level)
    }

    fn unit_interval(pos: usize, name: &str, v: f64) -> Result<f64, QueryError> {
        if !(0.0..=1.0).contains(&v) {
            return Err(QueryError::InvalidThreshold {
                pos,
                message: format!("{name} must lie in [0, 1], got {v}"),
            });
        }
        Ok(v)
    }

    /// `name=value` pairs up to the closing parenthesis (consumed).
    fn named_args(&mut self, allowed: &[&str]) -> Result<Vec<(usize, String, f64)>, QueryError> {
        let mut args: Vec<(usize, String, f64)> = Vec::new();
        loop {
            let (pos, name) = self.word("an argument name")?;
            if !allowed.contains(&name.as_str()) {
                return Err(QueryError::Syntax {
                    pos,
                    message: format!("unexpected argument `{name}` (expected one of {})", allowed.join(", ")),
                });
            }
            if args.iter().any(|a| a.1 == name) {
                return Err(QueryError::Syntax {
                    pos,
                    message: format!("argument `{name}` given twice"),
                });
            }
            self.expect(&Tok::Assign, "`=`")?;
            let (vpos, v) = self.number()?;
            args.push((vpos, name, v));
            match self.next() {
                Some((_, Tok::Comma)) => continue,
                Some((_, Tok::RParen)) => return Ok(args),
                _ => {
                    self.pos -= 1;
                    return Err(self.syntax("expected `,` or `)`"));
                }
            }
        }
    }

    fn predicate(&mut self) -> Result<Predicate, QueryError> {
        let start = self.here();
        let (_, name) = self.word("a predicate (mass, count, top, split, entropy)")?;
        self.expect(&Tok::LParen, "`(`")?;
        let arg = |args: &[(usize, String, f64)], key: &str| args.iter().find(|a| a.1 == key).map(|a| (a.0, a.2));
        match name.as_str() {
            "mass" => {
                let node = self.node()?;
                self.expect(&Tok::RParen, "`)`")?;
                let cmp = self.cmp()?;
                let (pos, threshold) = self.number()?;
                let threshold = Self::unit_interval(pos, "mass threshold", threshold)?;
                Ok(Predicate::Mass { node, cmp, threshold })
            }
            "count" => {
                let args = self.named_args(&["level", "min_mass"])?;
                let (lpos, lv) = arg(&args, "level").ok_or(QueryError::Syntax {
                    pos: start,
                    message: "count needs level=L".into(),
                })?;
                let level = self.level(lpos, lv)?;
                let min_mass = match arg(&args, "min_mass") {
                    Some((pos, v)) => Self::unit_interval(pos, "min_mass", v)?,
                    None => self.defaults.min_mass,
                };
                let cmp = self.cmp()?;
                let (pos, k) = self.number()?;
                if k < 0.0 || k.fract() != 0.0 {
                    return Err(QueryError::Syntax {
                        pos,
                        message: "count must be compared with a non-negative integer".into(),
                    });
                }
                Ok(Predicate::Count {
                    level,
                    min_mass,
                    cmp,
                    count: k as u64,
                })
            }
            "top" => {
                let args = self.named_args(&["level"])?;
                let (lpos, lv) = arg(&args, "level").ok_or(QueryError::Syntax {
                    pos: start,
                    message: "top needs level=L".into(),
                })?;
                let level = self.level(lpos, lv)?;
                let cmp = self.cmp()?;
                if cmp != Cmp::Eq {
                    return Err(QueryError::Syntax {
                        pos: self.tokens[self.pos - 1].0,
                        message: "top(...) only supports ==".into(),
                    });
                }
                let node = self.node()?;
                Ok(Predicate::Top { level, node })
            }
            "split" => {
                let a = self.node()?;
                self.expect(&Tok::Comma, "`,`")?;
                let b = self.node()?;
                let args = match self.next() {
                    Some((_, Tok::RParen)) => Vec::new(),
                    Some((_, Tok::Comma)) => self.named_args(&["tol", "min_mass"])?,
                    _ => {
                        self.pos -= 1;
                        return Err(self.syntax("expected `,` or `)`"));
                    }
                };
                let tolerance = match arg(&args, "tol") {
                    Some((pos, v)) if v < 0.0 => {
                        return Err(QueryError::InvalidThreshold {
                            pos,
                            message: format!("tol must be non-negative, got {v}"),
                        })
                    }
                    Some((_, v)) => v,
                    None => self.defaults.tolerance,
                };
                let min_mass = match arg(&args, "min_mass") {
                    Some((pos, v)) => Self::unit_interval(pos, "min_mass", v)?,
                    None => self.defaults.min_mass,
                };
                Ok(Predicate::Split {
                    a,
                    b,
                    tolerance,
                    min_mass,
                })
            }
            "entropy" => {
                let args = self.named_args(&["level"])?;
                let (lpos, lv) = arg(&args, "level").ok_or(QueryError::Syntax {
                    pos: start,
                    message: "entropy needs level=L".into(),
                })?;
                let level = self.level(lpos, lv)?;
                let cmp = self.cmp()?;
                let (pos, bits) = self.number()?;
                if bits < 0.0 {
                    return Err(QueryError::InvalidThreshold {
                        pos,
                        message: "entropy threshold must be non-negative".into(),
                    });
                }
                Ok(Predicate::Entropy { level, cmp, bits })
            }
            other => Err(QueryError::Syntax {
                pos: start,
                message: format!("unknown predicate `{other}`"),
            }),
        }
    }
}
