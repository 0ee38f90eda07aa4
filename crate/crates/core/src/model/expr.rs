//! Rate expressions over empirical-measure features.
//!
//! Grammar:
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := base ('^' integer)?
//! base   := number | 'p(' int ',' int ')' | 'tail(' int ')' | 'mean()'
//!         | '(' expr ')' | '-' base
//! ```
//!
//! Denominators with magnitude below [`DIV_GUARD`] are replaced by
//! `DIV_GUARD` (carrying the denominator's sign), so every expression is
//! finite on the simplex.

use std::fmt;

use crate::error::{Error, Result};
use crate::state_space::{tail_masses, LevelPhaseLayout};

/// Denominator guard `ε_div`.
pub const DIV_GUARD: f64 = 1e-9;

/// Features of a (possibly unnormalized) vector that expressions may read.
#[derive(Debug, Clone)]
pub struct Features<'a> {
    layout: &'a LevelPhaseLayout,
    values: &'a [f64],
    tails: Vec<f64>,
    mean: f64,
}

impl<'a> Features<'a> {
    pub fn new(layout: &'a LevelPhaseLayout, values: &'a [f64]) -> Self {
        let tails = tail_masses(layout, values);
        let mean = (1..layout.num_levels()).map(|k| tails[k]).sum();
        Self {
            layout,
            values,
            tails,
            mean,
        }
    }

    pub fn layout(&self) -> &LevelPhaseLayout {
        self.layout
    }

    pub fn values(&self) -> &[f64] {
        self.values
    }

    /// `p(k, j)`, phase 1-based; zero outside the layout.
    pub fn component(&self, level: usize, phase: usize) -> f64 {
        self.layout
            .flatten_index(level, phase)
            .map(|i| self.values[i])
            .unwrap_or(0.0)
    }

    /// `T_k`; zero above `L + 1`.
    pub fn tail(&self, k: usize) -> f64 {
        self.tails.get(k).copied().unwrap_or(0.0)
    }

    pub fn tails(&self) -> &[f64] {
        &self.tails
    }

    /// `sum_k k p_k · 1`, computed as `sum_{k >= 1} T_k`.
    pub fn mean(&self) -> f64 {
        self.mean
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Component(usize, usize),
    Tail(usize),
    Mean,
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, i32),
}

/// A parsed rate expression.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExpression {
    root: Node,
}

impl FeatureExpression {
    pub fn parse(text: &str) -> Result<Self> {
        let mut parser = Parser {
            src: text.as_bytes(),
            pos: 0,
        };
        let root = parser.expr()?;
        parser.skip_ws();
        if parser.pos != parser.src.len() {
            return Err(parser.error("unexpected trailing input"));
        }
        Ok(Self { root })
    }

    pub fn constant(value: f64) -> Self {
        Self {
            root: Node::Num(value),
        }
    }

    /// True when the expression reads no features.
    pub fn is_constant(&self) -> bool {
        fn walk(n: &Node) -> bool {
            match n {
                Node::Num(_) => true,
                Node::Component(..) | Node::Tail(_) | Node::Mean => false,
                Node::Neg(a) | Node::Pow(a, _) => walk(a),
                Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
                    walk(a) && walk(b)
                }
            }
        }
        walk(&self.root)
    }

    /// The value of a constant expression, if it is one.
    pub fn constant_value(&self) -> Option<f64> {
        match self.root {
            Node::Num(v) => Some(v),
            _ if self.is_constant() => {
                let layout = LevelPhaseLayout::uniform(1, 1).expect("static layout");
                Some(self.eval(&Features::new(&layout, &[1.0, 0.0])))
            }
            _ => None,
        }
    }

    /// Checks that every referenced feature exists on `layout`.
    pub fn validate(&self, layout: &LevelPhaseLayout) -> Result<()> {
        fn walk(n: &Node, layout: &LevelPhaseLayout) -> Result<()> {
            match n {
                Node::Num(_) | Node::Mean => Ok(()),
                Node::Component(k, j) => layout.flatten_index(*k, *j).map(|_| ()),
                Node::Tail(k) if *k > layout.num_levels() => Err(Error::Index {
                    level: *k,
                    phase: 0,
                }),
                Node::Tail(_) => Ok(()),
                Node::Neg(a) | Node::Pow(a, _) => walk(a, layout),
                Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
                    walk(a, layout)?;
                    walk(b, layout)
                }
            }
        }
        walk(&self.root, layout)
    }

    pub fn eval(&self, f: &Features<'_>) -> f64 {
        eval_node(&self.root, f)
    }
}

fn guard(den: f64) -> f64 {
    if den.abs() >= DIV_GUARD {
        den
    } else if den < 0.0 {
        -DIV_GUARD
    } else {
        DIV_GUARD
    }
}

fn eval_node(n: &Node, f: &Features<'_>) -> f64 {
    match n {
        Node::Num(v) => *v,
        Node::Component(k, j) => f.component(*k, *j),
        Node::Tail(k) => f.tail(*k),
        Node::Mean => f.mean(),
        Node::Neg(a) => -eval_node(a, f),
        Node::Add(a, b) => eval_node(a, f) + eval_node(b, f),
        Node::Sub(a, b) => eval_node(a, f) - eval_node(b, f),
        Node::Mul(a, b) => eval_node(a, f) * eval_node(b, f),
        Node::Div(a, b) => eval_node(a, f) / guard(eval_node(b, f)),
        Node::Pow(a, e) => {
            let base = eval_node(a, f);
            if *e >= 0 {
                base.powi(*e)
            } else {
                1.0 / guard(base.powi(-*e))
            }
        }
    }
}

impl fmt::Display for FeatureExpression {
    fn fmt(&self, out: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn w(n: &Node, out: &mut fmt::Formatter<'_>) -> fmt::Result {
            match n {
                Node::Num(v) => write!(out, "{v:?}"),
                Node::Component(k, j) => write!(out, "p({k},{j})"),
                Node::Tail(k) => write!(out, "tail({k})"),
                Node::Mean => write!(out, "mean()"),
                Node::Neg(a) => {
                    write!(out, "-(")?;
                    w(a, out)?;
                    write!(out, ")")
                }
                Node::Pow(a, e) => {
                    write!(out, "(")?;
                    w(a, out)?;
                    write!(out, ")^{e}")
                }
                Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
                    let op = match n {
                        Node::Add(..) => '+',
                        Node::Sub(..) => '-',
                        Node::Mul(..) => '*',
                        _ => '/',
                    };
                    write!(out, "(")?;
                    w(a, out)?;
                    write!(out, " {op} ")?;
                    w(b, out)?;
                    write!(out, ")")
                }
            }
        }
        w(&self.root, out)
    }
}

struct Parser<'s> {
    src: &'s [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: &str) -> Error {
        Error::Syntax {
            position: self.pos,
            message: message.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(&format!("expected `{}`", c as char)))
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    lhs = Node::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(b'-') => {
                    self.pos += 1;
                    lhs = Node::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    lhs = Node::Mul(Box::new(lhs), Box::new(self.factor()?));
                }
                Some(b'/') => {
                    self.pos += 1;
                    lhs = Node::Div(Box::new(lhs), Box::new(self.factor()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Node> {
        let base = self.base()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            let negative = if self.peek() == Some(b'-') {
                self.pos += 1;
                true
            } else {
                false
            };
            let e = self.integer()?;
            let e = i32::try_from(e).map_err(|_| self.error("exponent too large"))?;
            return Ok(Node::Pow(Box::new(base), if negative { -e } else { e }));
        }
        Ok(base)
    }

    fn integer(&mut self) -> Result<usize> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error("expected an integer"));
        }
        std::str::from_utf8(&self.src[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Syntax {
                position: start,
                message: "integer out of range".into(),
            })
    }

    fn number(&mut self) -> Result<Node> {
        let start = self.pos;
        let bytes = self.src;
        let mut i = self.pos;
        while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
            i += 1;
        }
        if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
            let mut j = i + 1;
            if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                j += 1;
            }
            if j < bytes.len() && bytes[j].is_ascii_digit() {
                while j < bytes.len() && bytes[j].is_ascii_digit() {
                    j += 1;
                }
                i = j;
            }
        }
        let text = std::str::from_utf8(&bytes[start..i]).expect("ascii number");
        let value: f64 = text.parse().map_err(|_| Error::Syntax {
            position: start,
            message: format!("malformed number `{text}`"),
        })?;
        self.pos = i;
        Ok(Node::Num(value))
    }

    fn base(&mut self) -> Result<Node> {
        match self.peek() {
            None => Err(self.error("unexpected end of input")),
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                self.expect(b')')?;
                Ok(inner)
            }
            Some(b'-') => {
                self.pos += 1;
                Ok(Node::Neg(Box::new(self.base()?)))
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                let start = self.pos;
                while self.pos < self.src.len()
                    && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
                {
                    self.pos += 1;
                }
                let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii ident");
                match name {
                    "p" => {
                        self.expect(b'(')?;
                        let k = self.integer()?;
                        self.expect(b',')?;
                        let j = self.integer()?;
                        self.expect(b')')?;
                        Ok(Node::Component(k, j))
                    }
                    "tail" => {
                        self.expect(b'(')?;
                        let k = self.integer()?;
                        self.expect(b')')?;
                        Ok(Node::Tail(k))
                    }
                    "mean" => {
                        self.expect(b'(')?;
                        self.expect(b')')?;
                        Ok(Node::Mean)
                    }
                    other => Err(Error::UnknownFeature(other.to_string())),
                }
            }
            Some(c) => Err(self.error(&format!("unexpected character `{}`", c as char))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn features(values: &[f64]) -> (LevelPhaseLayout, Vec<f64>) {
        (
            LevelPhaseLayout::uniform(values.len() - 1, 1).unwrap(),
            values.to_vec(),
        )
    }

    #[test]
    fn constant() {
        let e = FeatureExpression::parse("2.0").unwrap();
        assert!(e.is_constant());
        assert_eq!(e.constant_value(), Some(2.0));
    }

    #[test]
    fn tail_difference() {
        let e = FeatureExpression::parse("tail(1)^2 - tail(2)^2").unwrap();
        let (l, v) = features(&[0.5, 0.25, 0.25]);
        assert_abs_diff_eq!(e.eval(&Features::new(&l, &v)), 0.1875, epsilon = 1e-15);
        assert!(!e.is_constant());
    }

    #[test]
    fn guarded_division() {
        let e = FeatureExpression::parse("1/(p(0,1))").unwrap();
        let (l, v) = features(&[0.0, 1.0]);
        assert_eq!(e.eval(&Features::new(&l, &v)), 1.0 / DIV_GUARD);
        let e = FeatureExpression::parse("p(1,1)^-1").unwrap();
        let (l, v) = features(&[1.0, 0.0]);
        assert!(e.eval(&Features::new(&l, &v)).is_finite());
    }

    #[test]
    fn precedence_and_mean() {
        let (l, v) = features(&[0.5, 0.25, 0.25]);
        let f = Features::new(&l, &v);
        let e = FeatureExpression::parse("1 + 2 * 3 ^ 2 - 4 / 2").unwrap();
        assert_eq!(e.eval(&f), 17.0);
        let e = FeatureExpression::parse("mean() * (1 - -1)").unwrap();
        assert_abs_diff_eq!(e.eval(&f), 2.0 * 0.75, epsilon = 1e-15);
        let e = FeatureExpression::parse("1.5e-1 * p(2, 1)").unwrap();
        assert_abs_diff_eq!(e.eval(&f), 0.0375, epsilon = 1e-15);
    }

    #[test]
    fn errors_carry_position() {
        match FeatureExpression::parse("1 + * 2") {
            Err(Error::Syntax { position, .. }) => assert_eq!(position, 4),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            FeatureExpression::parse("foo(1)"),
            Err(Error::UnknownFeature(name)) if name == "foo"
        ));
        assert!(FeatureExpression::parse("(1 + 2").is_err());
        assert!(FeatureExpression::parse("1 2").is_err());
        assert!(FeatureExpression::parse("tail(1)^x").is_err());
    }

    #[test]
    fn validation_against_layout() {
        let l = LevelPhaseLayout::uniform(2, 1).unwrap();
        assert!(FeatureExpression::parse("p(2,1)").unwrap().validate(&l).is_ok());
        assert!(FeatureExpression::parse("p(3,1)").unwrap().validate(&l).is_err());
        assert!(FeatureExpression::parse("tail(3)").unwrap().validate(&l).is_ok());
        assert!(FeatureExpression::parse("tail(5)").unwrap().validate(&l).is_err());
    }

    #[test]
    fn display_reparses_to_same_value() {
        let (l, v) = features(&[0.2, 0.3, 0.5]);
        let f = Features::new(&l, &v);
        for text in ["tail(1)^2 - tail(2)^2", "-(p(0,1)) / (1 + mean())", "0.1 * 3 ^ -2"] {
            let e = FeatureExpression::parse(text).unwrap();
            let again = FeatureExpression::parse(&e.to_string()).unwrap();
            assert_eq!(e.eval(&f), again.eval(&f));
        }
    }
}
