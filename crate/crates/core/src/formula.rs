//! The modal language: formulas in negation normal form, their concrete
//! syntax, dualisation, modal depth and subformula bookkeeping.
//!
//! Concrete syntax:
//!
//! ```text
//! formula := disj
//! disj    := conj ("|" conj)*
//! conj    := unary ("&" unary)*
//! unary   := "<>" unary | "[]" unary | "~" atom | atom | "(" formula ")"
//! atom    := [a-z][a-zA-Z0-9_]*
//! ```
//!
//! Negation is only allowed directly in front of an atom, so every value of
//! [`ModalFormula`] is in negation normal form by construction.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// A modal formula in negation normal form.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModalFormula {
    Prop(String),
    NegProp(String),
    Or(Box<ModalFormula>, Box<ModalFormula>),
    And(Box<ModalFormula>, Box<ModalFormula>),
    Diamond(Box<ModalFormula>),
    Box(Box<ModalFormula>),
}

impl ModalFormula {
    pub fn prop(name: impl Into<String>) -> Self {
        Self::Prop(name.into())
    }

    pub fn neg_prop(name: impl Into<String>) -> Self {
        Self::NegProp(name.into())
    }

    pub fn or(left: Self, right: Self) -> Self {
        Self::Or(Box::new(left), Box::new(right))
    }

    pub fn and(left: Self, right: Self) -> Self {
        Self::And(Box::new(left), Box::new(right))
    }

    pub fn diamond(inner: Self) -> Self {
        Self::Diamond(Box::new(inner))
    }

    pub fn boxed(inner: Self) -> Self {
        Self::Box(Box::new(inner))
    }

    /// `inner` prefixed with `count` diamonds.
    pub fn diamonds(count: usize, inner: Self) -> Self {
        (0..count).fold(inner, |f, _| Self::diamond(f))
    }

    /// `inner` prefixed with `count` boxes.
    pub fn boxes(count: usize, inner: Self) -> Self {
        (0..count).fold(inner, |f, _| Self::boxed(f))
    }

    /// The NNF dual of the formula.
    pub fn negate(&self) -> Self {
        match self {
            Self::Prop(p) => Self::NegProp(p.clone()),
            Self::NegProp(p) => Self::Prop(p.clone()),
            Self::Or(l, r) => Self::and(l.negate(), r.negate()),
            Self::And(l, r) => Self::or(l.negate(), r.negate()),
            Self::Diamond(f) => Self::boxed(f.negate()),
            Self::Box(f) => Self::diamond(f.negate()),
        }
    }

    pub fn modal_depth(&self) -> usize {
        match self {
            Self::Prop(_) | Self::NegProp(_) => 0,
            Self::Or(l, r) | Self::And(l, r) => l.modal_depth().max(r.modal_depth()),
            Self::Diamond(f) | Self::Box(f) => f.modal_depth() + 1,
        }
    }

    /// Number of syntax tree nodes.
    pub fn size(&self) -> usize {
        match self {
            Self::Prop(_) | Self::NegProp(_) => 1,
            Self::Or(l, r) | Self::And(l, r) => 1 + l.size() + r.size(),
            Self::Diamond(f) | Self::Box(f) => 1 + f.size(),
        }
    }

    pub fn is_modal(&self) -> bool {
        matches!(self, Self::Diamond(_) | Self::Box(_))
    }

    /// Immediate subformulas.
    pub fn children(&self) -> Vec<&ModalFormula> {
        match self {
            Self::Prop(_) | Self::NegProp(_) => vec![],
            Self::Or(l, r) | Self::And(l, r) => vec![l, r],
            Self::Diamond(f) | Self::Box(f) => vec![f],
        }
    }

    /// All subformulas in pre-order, repetitions included.
    pub fn subformulas(&self) -> Vec<&ModalFormula> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(f) = stack.pop() {
            out.push(f);
            let children = f.children();
            stack.extend(children.into_iter().rev());
        }
        out
    }

    /// Proposition names occurring in the formula.
    pub fn props(&self) -> BTreeSet<String> {
        self.subformulas()
            .into_iter()
            .filter_map(|f| match f {
                Self::Prop(p) | Self::NegProp(p) => Some(p.clone()),
                _ => None,
            })
            .collect()
    }

    /// Proposition names occurring positively and negatively, respectively.
    pub fn polarities(&self) -> (BTreeSet<String>, BTreeSet<String>) {
        let mut pos = BTreeSet::new();
        let mut neg = BTreeSet::new();
        for f in self.subformulas() {
            match f {
                Self::Prop(p) => {
                    pos.insert(p.clone());
                }
                Self::NegProp(p) => {
                    neg.insert(p.clone());
                }
                _ => {}
            }
        }
        (pos, neg)
    }

    /// Modal subformulas `ψ` with `md(self) - md(ψ) = depth`.
    pub fn modal_subformulas_at_depth(&self, depth: usize) -> BTreeSet<ModalFormula> {
        let md = self.modal_depth();
        self.subformulas()
            .into_iter()
            .filter(|f| f.is_modal() && md - f.modal_depth() == depth)
            .cloned()
            .collect()
    }

    fn precedence(&self) -> u8 {
        match self {
            Self::Or(..) => 1,
            Self::And(..) => 2,
            _ => 3,
        }
    }
}

impl fmt::Display for ModalFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn operand(
            f: &mut fmt::Formatter<'_>,
            sub: &ModalFormula,
            parens: bool,
        ) -> fmt::Result {
            if parens {
                write!(f, "({sub})")
            } else {
                write!(f, "{sub}")
            }
        }
        match self {
            Self::Prop(p) => write!(f, "{p}"),
            Self::NegProp(p) => write!(f, "~{p}"),
            Self::Or(l, r) | Self::And(l, r) => {
                let prec = self.precedence();
                let op = if prec == 1 { "|" } else { "&" };
                operand(f, l, l.precedence() < prec)?;
                write!(f, " {op} ")?;
                operand(f, r, r.precedence() <= prec)
            }
            Self::Diamond(sub) => {
                write!(f, "<>")?;
                operand(f, sub, sub.precedence() < 3)
            }
            Self::Box(sub) => {
                write!(f, "[]")?;
                operand(f, sub, sub.precedence() < 3)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("syntax error at position {pos}: {message}")]
pub struct ParseError {
    pub pos: usize,
    pub message: String,
}

impl FromStr for ModalFormula {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_formula(s)
    }
}

pub fn parse_formula(text: &str) -> Result<ModalFormula, ParseError> {
    let mut parser = Parser { src: text.as_bytes(), pos: 0 };
    let f = parser.disjunction()?;
    parser.skip_ws();
    if parser.pos < parser.src.len() {
        return Err(parser.error("unexpected trailing input"));
    }
    Ok(f)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: &str) -> ParseError {
        ParseError { pos: self.pos, message: message.to_string() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn eat(&mut self, token: &str) -> bool {
        self.skip_ws();
        if self.src[self.pos..].starts_with(token.as_bytes()) {
            self.pos += token.len();
            true
        } else {
            false
        }
    }

    fn disjunction(&mut self) -> Result<ModalFormula, ParseError> {
        let mut left = self.conjunction()?;
        while self.eat("|") {
            let right = self.conjunction()?;
            left = ModalFormula::or(left, right);
        }
        Ok(left)
    }

    fn conjunction(&mut self) -> Result<ModalFormula, ParseError> {
        let mut left = self.unary()?;
        while self.eat("&") {
            let right = self.unary()?;
            left = ModalFormula::and(left, right);
        }
        Ok(left)
    }

    fn unary(&mut self) -> Result<ModalFormula, ParseError> {
        if self.eat("<>") {
            return Ok(ModalFormula::diamond(self.unary()?));
        }
        if self.eat("[]") {
            return Ok(ModalFormula::boxed(self.unary()?));
        }
        if self.eat("~") {
            self.skip_ws();
            return match self.atom() {
                Some(name) => Ok(ModalFormula::NegProp(name)),
                None => Err(self.error("negation may only be applied to an atom")),
            };
        }
        if self.eat("(") {
            let inner = self.disjunction()?;
            if !self.eat(")") {
                return Err(self.error("expected ')'"));
            }
            return Ok(inner);
        }
        self.skip_ws();
        match self.atom() {
            Some(name) => Ok(ModalFormula::Prop(name)),
            None if self.pos >= self.src.len() => Err(self.error("unexpected end of input")),
            None => Err(self.error("expected a formula")),
        }
    }

    fn atom(&mut self) -> Option<String> {
        let start = self.pos;
        match self.src.get(self.pos) {
            Some(c) if c.is_ascii_lowercase() => self.pos += 1,
            _ => return None,
        }
        while let Some(c) = self.src.get(self.pos) {
            if c.is_ascii_alphanumeric() || *c == b'_' {
                self.pos += 1;
            } else {
                break;
            }
        }
        Some(String::from_utf8_lossy(&self.src[start..self.pos]).into_owned())
    }
}

/// Distinct subformulas of a root formula with stable ordinals (pre-order of
/// first occurrence).
#[derive(Clone, Debug)]
pub struct SubformulaIndex {
    list: Vec<ModalFormula>,
    index: HashMap<ModalFormula, usize>,
}

impl SubformulaIndex {
    pub fn new(root: &ModalFormula) -> Self {
        let mut list = Vec::new();
        let mut index = HashMap::new();
        for f in root.subformulas() {
            if !index.contains_key(f) {
                index.insert(f.clone(), list.len());
                list.push(f.clone());
            }
        }
        SubformulaIndex { list, index }
    }

    pub fn len(&self) -> usize {
        self.list.len()
    }

    pub fn is_empty(&self) -> bool {
        self.list.is_empty()
    }

    pub fn get(&self, ordinal: usize) -> &ModalFormula {
        &self.list[ordinal]
    }

    pub fn ordinal(&self, f: &ModalFormula) -> Option<usize> {
        self.index.get(f).copied()
    }

    pub fn contains(&self, f: &ModalFormula) -> bool {
        self.index.contains_key(f)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ModalFormula> {
        self.list.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> ModalFormula {
        parse_formula(s).unwrap()
    }

    #[test]
    fn parses_examples() {
        assert_eq!(
            p("<>p & []~p"),
            ModalFormula::and(
                ModalFormula::diamond(ModalFormula::prop("p")),
                ModalFormula::boxed(ModalFormula::neg_prop("p"))
            )
        );
        assert_eq!(
            p("p | (q & r)"),
            ModalFormula::or(
                ModalFormula::prop("p"),
                ModalFormula::and(ModalFormula::prop("q"), ModalFormula::prop("r"))
            )
        );
    }

    #[test]
    fn rejects_negated_compound() {
        let err = parse_formula("~(p&q)").unwrap_err();
        assert_eq!(err.pos, 1);
        assert!(parse_formula("p &").is_err());
        assert!(parse_formula("(p").is_err());
        assert!(parse_formula("P").is_err());
        assert!(parse_formula("p q").is_err());
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(p("p | q & r"), p("p | (q & r)"));
        assert_eq!(p("p & q & r"), p("(p & q) & r"));
        assert_eq!(p("<>p & q"), p("(<>p) & q"));
        assert_eq!(p("p&(q&r)").to_string(), "p & (q & r)");
        assert_eq!(p("(p|q)&r").to_string(), "(p | q) & r");
        assert_eq!(p("<>(p|q)").to_string(), "<>(p | q)");
        assert_eq!(p("[]<>~p").to_string(), "[]<>~p");
    }

    #[test]
    fn negation_clauses() {
        assert_eq!(p("<>p").negate(), p("[]~p"));
        assert_eq!(p("p & q").negate(), p("~p | ~q"));
        assert_eq!(p("[](p | ~q)").negate(), p("<>(~p & q)"));
    }

    #[test]
    fn modal_depth_examples() {
        assert_eq!(p("p").modal_depth(), 0);
        assert_eq!(p("~p").modal_depth(), 0);
        assert_eq!(p("<>(p & []q)").modal_depth(), 2);
        assert_eq!(p("<>p | [][]q").modal_depth(), 2);
    }

    #[test]
    fn modal_subformulas_by_depth() {
        let f = p("<>[]p");
        assert_eq!(f.modal_subformulas_at_depth(0), [p("<>[]p")].into());
        assert_eq!(f.modal_subformulas_at_depth(1), [p("[]p")].into());
        assert!(f.modal_subformulas_at_depth(2).is_empty());
        assert!(p("p").modal_subformulas_at_depth(0).is_empty());
        assert!(p("p").modal_subformulas_at_depth(3).is_empty());
    }

    #[test]
    fn subformula_index_dedups() {
        let f = p("<>p & <>p");
        let idx = SubformulaIndex::new(&f);
        assert_eq!(idx.len(), 3);
        assert_eq!(idx.ordinal(&f), Some(0));
        assert!(idx.contains(&p("p")));
        assert!(!idx.contains(&p("~p")));
    }
}
