//! Typed functional language for differentiable programs.
//!
//! A program is a tree of combinators (`COMP`, `CAT`, `FILTER`, `MAP`,
//! `FOLD`) over two trainable primitives: `nn`, a small dense network
//! `Tensor(n) -> Tensor(1)`, and `pred`, the per-variable causal gate
//! `ListOf(Tensor(1), n) -> ListOf(Tensor(1), n)`.
//!
//! A data row of `n` variables enters a program as `ListOf(Tensor(1), n)`,
//! one scalar per variable. Typing is input-directed: [`type_of`] pushes
//! the input type through the tree and either returns the program's
//! function type or a [`TypeError`] pointing at the offending subterm.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Monomorphic type of a DSL value or program.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DslType {
    Tensor(usize),
    ListOf(Box<DslType>, usize),
    Fn(Box<DslType>, Box<DslType>),
}

impl DslType {
    pub fn tensor(dim: usize) -> Self {
        DslType::Tensor(dim)
    }

    pub fn list(elem: DslType, len: usize) -> Self {
        DslType::ListOf(Box::new(elem), len)
    }

    pub fn func(arg: DslType, ret: DslType) -> Self {
        DslType::Fn(Box::new(arg), Box::new(ret))
    }

    /// The type a data row of `n_vars` variables has when it enters a program.
    pub fn row(n_vars: usize) -> Self {
        DslType::list(DslType::Tensor(1), n_vars)
    }

    /// Goal signature of regression and hazard programs.
    pub fn scalar_goal(n_vars: usize) -> Self {
        DslType::func(DslType::row(n_vars), DslType::Tensor(1))
    }

    /// Checks the size invariants (dimensions and list lengths at least 1).
    pub fn is_valid(&self) -> bool {
        match self {
            DslType::Tensor(d) => *d >= 1,
            DslType::ListOf(e, n) => *n >= 1 && e.is_valid(),
            DslType::Fn(a, r) => a.is_valid() && r.is_valid(),
        }
    }
}

impl fmt::Display for DslType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DslType::Tensor(d) => write!(f, "Tensor({d})"),
            DslType::ListOf(e, n) => write!(f, "ListOf({e}, {n})"),
            DslType::Fn(a, r) => write!(f, "({a} -> {r})"),
        }
    }
}

/// Trainable primitive kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PrimKind {
    Nn,
    Pred,
}

impl PrimKind {
    pub fn name(self) -> &'static str {
        match self {
            PrimKind::Nn => "nn",
            PrimKind::Pred => "pred",
        }
    }

    /// Declared signature for programs over `n_vars` input variables.
    pub fn signature(self, n_vars: usize) -> PrimSignature {
        let (arg, ret) = match self {
            PrimKind::Nn => (DslType::Tensor(n_vars), DslType::Tensor(1)),
            PrimKind::Pred => (DslType::row(n_vars), DslType::row(n_vars)),
        };
        PrimSignature {
            kind: self,
            ty: DslType::func(arg, ret),
            differentiable: true,
            trainable: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrimSignature {
    pub kind: PrimKind,
    pub ty: DslType,
    pub differentiable: bool,
    pub trainable: bool,
}

/// Identifier of a primitive instance; each instance owns its own parameters.
pub type InstanceId = u32;

/// Program AST.
///
/// `Cat`, `Filter`, `Map` and `Fold` each wrap one inner program:
/// `Cat(t)` concatenates the list produced by `t`, `Filter(p)` gates a list
/// with a predicate program, `Map(f)` applies `f` elementwise and
/// `Fold(f, z)` reduces a list left to right with `f` applied to the pair
/// `[acc, x]`, starting from a constant `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Term {
    Prim { kind: PrimKind, id: InstanceId },
    Comp(Box<Term>, Box<Term>),
    Cat(Box<Term>),
    Filter(Box<Term>),
    Map(Box<Term>),
    Fold(Box<Term>, f64),
}

impl Term {
    pub fn nn() -> Self {
        Term::Prim { kind: PrimKind::Nn, id: 0 }
    }

    pub fn pred() -> Self {
        Term::Prim { kind: PrimKind::Pred, id: 0 }
    }

    /// `COMP(outer, inner)`: apply `inner` first.
    pub fn comp(outer: Term, inner: Term) -> Self {
        Term::Comp(Box::new(outer), Box::new(inner)).canonical()
    }

    pub fn cat(inner: Term) -> Self {
        Term::Cat(Box::new(inner)).canonical()
    }

    pub fn filter(inner: Term) -> Self {
        Term::Filter(Box::new(inner)).canonical()
    }

    pub fn map(inner: Term) -> Self {
        Term::Map(Box::new(inner)).canonical()
    }

    pub fn fold(inner: Term) -> Self {
        Term::Fold(Box::new(inner), 0.0).canonical()
    }

    /// `COMP(nn, CAT(FILTER(pred)))`, the default causal program.
    pub fn default_program() -> Self {
        Term::comp(Term::nn(), Term::cat(Term::filter(Term::pred())))
    }

    /// Renumbers primitive instances in preorder, starting at 0.
    pub fn canonical(mut self) -> Self {
        let mut next = 0;
        self.renumber(&mut next);
        self
    }

    fn renumber(&mut self, next: &mut InstanceId) {
        match self {
            Term::Prim { id, .. } => {
                *id = *next;
                *next += 1;
            }
            Term::Comp(outer, inner) => {
                outer.renumber(next);
                inner.renumber(next);
            }
            Term::Cat(t) | Term::Filter(t) | Term::Map(t) | Term::Fold(t, _) => t.renumber(next),
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            Term::Prim { .. } => 1,
            Term::Comp(a, b) => 1 + a.node_count() + b.node_count(),
            Term::Cat(t) | Term::Filter(t) | Term::Map(t) | Term::Fold(t, _) => 1 + t.node_count(),
        }
    }

    /// Primitive instances in preorder.
    pub fn prims(&self) -> Vec<(PrimKind, InstanceId)> {
        let mut out = Vec::new();
        self.collect_prims(&mut out);
        out
    }

    fn collect_prims(&self, out: &mut Vec<(PrimKind, InstanceId)>) {
        match self {
            Term::Prim { kind, id } => out.push((*kind, *id)),
            Term::Comp(a, b) => {
                a.collect_prims(out);
                b.collect_prims(out);
            }
            Term::Cat(t) | Term::Filter(t) | Term::Map(t) | Term::Fold(t, _) => {
                t.collect_prims(out)
            }
        }
    }

    /// True when primitive instance ids are pairwise distinct.
    pub fn has_unique_ids(&self) -> bool {
        let mut ids: Vec<_> = self.prims().into_iter().map(|(_, id)| id).collect();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        ids.len() == n
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Prim { kind, .. } => f.write_str(kind.name()),
            Term::Comp(a, b) => write!(f, "COMP({a}, {b})"),
            Term::Cat(t) => write!(f, "CAT({t})"),
            Term::Filter(t) => write!(f, "FILTER({t})"),
            Term::Map(t) => write!(f, "MAP({t})"),
            Term::Fold(t, z) if *z == 0.0 => write!(f, "FOLD({t})"),
            Term::Fold(t, z) => write!(f, "FOLD({t}, {z:?})"),
        }
    }
}

/// Number of trainable primitives (`nn` and `pred` instances).
pub fn trainable_size(term: &Term) -> usize {
    term.prims().len()
}

/// Canonical textual form, e.g. `COMP(nn, CAT(FILTER(pred)))`.
pub fn pretty_print(term: &Term) -> String {
    term.to_string()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DslError {
    #[error("type error in `{subterm}`: expected {expected}, found {found}")]
    Type {
        subterm: String,
        expected: DslType,
        found: DslType,
    },
    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("program must have at least one input variable")]
    NoVariables,
}

pub type TypeError = DslError;

/// Types `term` applied to a row of `n_vars` variables.
pub fn type_of(term: &Term, n_vars: usize) -> Result<DslType, DslError> {
    if n_vars == 0 {
        return Err(DslError::NoVariables);
    }
    let input = DslType::row(n_vars);
    let output = infer(term, &input, n_vars)?;
    Ok(DslType::func(input, output))
}

/// Checks `term` against a full function type.
pub fn check(term: &Term, goal: &DslType, n_vars: usize) -> Result<(), DslError> {
    let DslType::Fn(arg, ret) = goal else {
        return Err(DslError::Type {
            subterm: term.to_string(),
            expected: goal.clone(),
            found: DslType::func(DslType::row(n_vars), DslType::Tensor(1)),
        });
    };
    let out = infer(term, arg, n_vars)?;
    if &out == ret.as_ref() {
        Ok(())
    } else {
        Err(DslError::Type {
            subterm: term.to_string(),
            expected: ret.as_ref().clone(),
            found: out,
        })
    }
}

/// Output type of `term` when fed a value of type `input`.
pub fn infer(term: &Term, input: &DslType, n_vars: usize) -> Result<DslType, DslError> {
    let mismatch = |expected: DslType| DslError::Type {
        subterm: term.to_string(),
        expected,
        found: input.clone(),
    };
    match term {
        Term::Prim { kind, .. } => {
            let DslType::Fn(arg, ret) = kind.signature(n_vars).ty else {
                unreachable!("primitive signatures are function types")
            };
            if input == arg.as_ref() {
                Ok(*ret)
            } else {
                Err(mismatch(*arg))
            }
        }
        Term::Comp(outer, inner) => {
            let mid = infer(inner, input, n_vars)?;
            infer(outer, &mid, n_vars)
        }
        Term::Cat(inner) => match infer(inner, input, n_vars)? {
            DslType::ListOf(elem, len) if *elem == DslType::Tensor(1) => Ok(DslType::Tensor(len)),
            found => Err(DslError::Type {
                subterm: inner.to_string(),
                expected: DslType::list(DslType::Tensor(1), list_len(&found)),
                found,
            }),
        },
        Term::Filter(p) => match input {
            DslType::ListOf(elem, _) if **elem == DslType::Tensor(1) => {
                let out = infer(p, input, n_vars)?;
                if &out == input {
                    Ok(out)
                } else {
                    Err(DslError::Type {
                        subterm: p.to_string(),
                        expected: input.clone(),
                        found: out,
                    })
                }
            }
            _ => Err(mismatch(DslType::row(n_vars))),
        },
        Term::Map(f) => match input {
            DslType::ListOf(elem, len) => {
                let out = infer(f, elem, n_vars)?;
                Ok(DslType::list(out, *len))
            }
            _ => Err(mismatch(DslType::list(input.clone(), 1))),
        },
        Term::Fold(f, _) => match input {
            DslType::ListOf(elem, _) => {
                let pair = DslType::list(elem.as_ref().clone(), 2);
                let out = infer(f, &pair, n_vars)?;
                if &out == elem.as_ref() {
                    Ok(out)
                } else {
                    Err(DslError::Type {
                        subterm: f.to_string(),
                        expected: elem.as_ref().clone(),
                        found: out,
                    })
                }
            }
            _ => Err(mismatch(DslType::list(input.clone(), 1))),
        },
    }
}

fn list_len(ty: &DslType) -> usize {
    match ty {
        DslType::ListOf(_, n) => *n,
        DslType::Tensor(d) => *d,
        DslType::Fn(..) => 1,
    }
}

/// Parses the textual program syntax produced by [`pretty_print`].
pub fn parse(src: &str) -> Result<Term, DslError> {
    let mut p = Parser { src: src.as_bytes(), pos: 0 };
    let term = p.term()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.error("trailing input"));
    }
    Ok(term.canonical())
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, msg: &str) -> DslError {
        DslError::Parse {
            pos: self.pos,
            msg: msg.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn expect(&mut self, c: u8) -> Result<(), DslError> {
        self.skip_ws();
        if self.src.get(self.pos) == Some(&c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(&format!("expected `{}`", c as char)))
        }
    }

    fn ident(&mut self) -> Result<&str, DslError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphabetic() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error("expected identifier"));
        }
        Ok(std::str::from_utf8(&self.src[start..self.pos]).expect("ascii"))
    }

    fn number(&mut self) -> Result<f64, DslError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len()
            && matches!(self.src[self.pos], b'0'..=b'9' | b'.' | b'-' | b'+' | b'e' | b'E')
        {
            self.pos += 1;
        }
        std::str::from_utf8(&self.src[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.error("expected number"))
    }

    fn term(&mut self) -> Result<Term, DslError> {
        let start = self.pos;
        let name = self.ident()?.to_string();
        let term = match name.as_str() {
            "nn" => Term::nn(),
            "pred" => Term::pred(),
            "COMP" => {
                self.expect(b'(')?;
                let outer = self.term()?;
                self.expect(b',')?;
                let inner = self.term()?;
                self.expect(b')')?;
                Term::Comp(Box::new(outer), Box::new(inner))
            }
            "CAT" | "FILTER" | "MAP" => {
                self.expect(b'(')?;
                let inner = Box::new(self.term()?);
                self.expect(b')')?;
                match name.as_str() {
                    "CAT" => Term::Cat(inner),
                    "FILTER" => Term::Filter(inner),
                    _ => Term::Map(inner),
                }
            }
            "FOLD" => {
                self.expect(b'(')?;
                let inner = Box::new(self.term()?);
                self.skip_ws();
                let init = if self.src.get(self.pos) == Some(&b',') {
                    self.pos += 1;
                    self.number()?
                } else {
                    0.0
                };
                self.expect(b')')?;
                Term::Fold(inner, init)
            }
            _ => {
                self.pos = start;
                return Err(self.error(&format!("unknown symbol `{name}`")));
            }
        };
        Ok(term)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_program_types_as_scalar_goal() {
        let t = Term::default_program();
        assert_eq!(type_of(&t, 4).unwrap(), DslType::scalar_goal(4));
    }

    #[test]
    fn filter_of_nn_is_a_type_error() {
        let t = Term::filter(Term::nn());
        match type_of(&t, 4) {
            Err(DslError::Type { subterm, expected, .. }) => {
                assert_eq!(subterm, "nn");
                assert_eq!(expected, DslType::Tensor(4));
            }
            other => panic!("expected type error, got {other:?}"),
        }
    }

    #[test]
    fn pred_alone_keeps_row_type() {
        assert_eq!(
            type_of(&Term::pred(), 3).unwrap(),
            DslType::func(DslType::row(3), DslType::row(3))
        );
    }

    #[test]
    fn zero_variables_rejected() {
        assert_eq!(type_of(&Term::pred(), 0), Err(DslError::NoVariables));
    }

    #[test]
    fn trainable_size_counts_leaves() {
        assert_eq!(trainable_size(&Term::default_program()), 2);
        assert_eq!(trainable_size(&Term::pred()), 1);
        let t = Term::comp(
            Term::nn(),
            Term::comp(Term::cat(Term::filter(Term::pred())), Term::map(Term::pred())),
        );
        assert_eq!(trainable_size(&t), 3);
        assert!(t.has_unique_ids());
    }

    #[test]
    fn wrapping_does_not_change_trainable_size() {
        let t = Term::default_program();
        for wrapped in [Term::cat(t.clone()), Term::map(t.clone()), Term::filter(t.clone())] {
            assert_eq!(trainable_size(&wrapped), trainable_size(&t));
        }
    }

    #[test]
    fn pretty_print_matches_canonical_syntax() {
        assert_eq!(pretty_print(&Term::default_program()), "COMP(nn, CAT(FILTER(pred)))");
        assert_eq!(pretty_print(&Term::pred()), "pred");
        assert_eq!(pretty_print(&Term::fold(Term::nn())), "FOLD(nn)");
    }

    #[test]
    fn parser_reports_errors() {
        assert!(matches!(parse("COMP(nn"), Err(DslError::Parse { .. })));
        assert!(matches!(parse("MAP(relu)"), Err(DslError::Parse { .. })));
        assert!(matches!(parse("nn pred"), Err(DslError::Parse { .. })));
        assert_eq!(parse(" COMP( nn ,CAT(FILTER(pred)) ) ").unwrap(), Term::default_program());
    }

    #[test]
    fn fold_with_pairwise_nn_types_for_two_variables() {
        // FOLD(COMP(nn, CAT(pred))) over ListOf(Tensor(1), 2): nn sees [acc, x].
        let t = Term::comp(Term::fold(Term::comp(Term::nn(), Term::cat(Term::pred()))), Term::pred());
        assert_eq!(type_of(&t, 2).unwrap(), DslType::scalar_goal(2));
        assert!(type_of(&t, 3).is_err());
    }

    pub(crate) fn arb_term() -> impl Strategy<Value = Term> {
        let leaf = prop_oneof![Just(Term::nn()), Just(Term::pred())];
        leaf.prop_recursive(5, 24, 2, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone())
                    .prop_map(|(a, b)| Term::Comp(Box::new(a), Box::new(b))),
                inner.clone().prop_map(|t| Term::Cat(Box::new(t))),
                inner.clone().prop_map(|t| Term::Filter(Box::new(t))),
                inner.clone().prop_map(|t| Term::Map(Box::new(t))),
                (inner, prop_oneof![Just(0.0), -3.0f64..3.0])
                    .prop_map(|(t, z)| Term::Fold(Box::new(t), z)),
            ]
        })
        .prop_map(Term::canonical)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn parse_roundtrips_pretty_print(t in arb_term()) {
            prop_assert_eq!(parse(&pretty_print(&t)).unwrap(), t);
        }

        #[test]
        fn type_of_is_deterministic(t in arb_term(), n in 1usize..5) {
            prop_assert_eq!(type_of(&t, n), type_of(&t, n));
        }
    }
}
