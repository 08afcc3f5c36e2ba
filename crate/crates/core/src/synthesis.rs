//! Size-bounded enumeration and ranking of candidate programs.
//!
//! Terms are produced by iterative deepening on AST node count. Within a
//! node count the root kinds come in the order Prim, Comp, Cat, Filter,
//! Map, Fold; `COMP` splits its budget with the outer child growing first.
//! Fold initial values are always 0 during enumeration.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::EnvDataset;
use crate::dsl::{check, parse, pretty_print, trainable_size, DslType, PrimKind, Term};
use crate::learner::{evaluate_loss, run_with_params, LearnerConfig, LearnerError, Prepared, RunResult};
use crate::stats::{jaccard, mean_std, IndexSet};

/// Largest subtree node count kept in memory; bigger subtrees are streamed.
const MEMO_NODES: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisBudget {
    pub max_trainable_size: usize,
    pub max_ast_nodes: usize,
    pub goal_type: DslType,
}

impl SynthesisBudget {
    pub fn new(max_trainable_size: usize, n_vars: usize) -> Self {
        SynthesisBudget {
            max_trainable_size,
            max_ast_nodes: 9,
            goal_type: DslType::scalar_goal(n_vars),
        }
    }

    pub fn with_nodes(mut self, max_ast_nodes: usize) -> Self {
        self.max_ast_nodes = max_ast_nodes;
        self
    }

    /// Number of input variables implied by the goal type.
    pub fn n_vars(&self) -> usize {
        match &self.goal_type {
            DslType::Fn(arg, _) => match arg.as_ref() {
                DslType::ListOf(_, n) => *n,
                DslType::Tensor(d) => *d,
                DslType::Fn(..) => 0,
            },
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_trainable_size < 1 {
            return Err("max_trainable_size must be at least 1".into());
        }
        if self.max_ast_nodes < 1 {
            return Err("max_ast_nodes must be at least 1".into());
        }
        if !self.goal_type.is_valid() || self.n_vars() == 0 {
            return Err(format!("invalid goal type {}", self.goal_type));
        }
        Ok(())
    }
}

fn leaves(t: &Term) -> usize {
    trainable_size(t)
}

struct Grammar {
    /// `memo[k]` holds every term with exactly `k` nodes, for `k <= MEMO_NODES`.
    memo: Vec<Vec<Term>>,
}

impl Grammar {
    fn build(max_nodes: usize) -> Arc<Grammar> {
        let top = max_nodes.min(MEMO_NODES);
        let mut g = Arc::new(Grammar { memo: vec![Vec::new(); top + 1] });
        for k in 1..=top {
            let terms: Vec<Term> = exact_nodes(Arc::clone(&g), k, usize::MAX).collect();
            Arc::get_mut(&mut g).expect("grammar is uniquely owned while building").memo[k] = terms;
        }
        g
    }
}

fn prim(kind: PrimKind) -> Term {
    Term::Prim { kind, id: 0 }
}

type Terms = Box<dyn Iterator<Item = Term>>;

/// Every term with exactly `k` nodes and at most `s` leaves.
fn exact_nodes(g: Arc<Grammar>, k: usize, s: usize) -> Terms {
    if k == 0 || s == 0 {
        return Box::new(std::iter::empty());
    }
    if k < g.memo.len() && !g.memo[k].is_empty() {
        return Box::new((0..g.memo[k].len()).filter_map(move |i| {
            let t = &g.memo[k][i];
            (leaves(t) <= s).then(|| t.clone())
        }));
    }
    if k == 1 {
        return Box::new([prim(PrimKind::Nn), prim(PrimKind::Pred)].into_iter());
    }
    let gc = Arc::clone(&g);
    let comps = (1..k - 1).flat_map(move |a| {
        let b = k - 1 - a;
        let gi = Arc::clone(&gc);
        exact_nodes(Arc::clone(&gc), a, s).flat_map(move |outer| {
            let rest = s.saturating_sub(leaves(&outer));
            exact_nodes(Arc::clone(&gi), b, rest).map(move |inner| Term::Comp(Box::new(outer.clone()), Box::new(inner)))
        })
    });
    let unary = |wrap: fn(Term) -> Term| exact_nodes(Arc::clone(&g), k - 1, s).map(wrap);
    Box::new(
        comps
            .chain(unary(|t| Term::Cat(Box::new(t))))
            .chain(unary(|t| Term::Filter(Box::new(t))))
            .chain(unary(|t| Term::Map(Box::new(t))))
            .chain(unary(|t| Term::Fold(Box::new(t), 0.0))),
    )
}

/// Streams every well-formed term within the budget, each exactly once.
pub fn enumerate_generic(budget: &SynthesisBudget) -> impl Iterator<Item = Term> {
    let grammar = Grammar::build(budget.max_ast_nodes);
    let s = budget.max_trainable_size;
    (1..=budget.max_ast_nodes).flat_map(move |k| exact_nodes(Arc::clone(&grammar), k, s).map(Term::canonical))
}

/// The subset of [`enumerate_generic`] that type-checks at the goal type.
pub fn enumerate_typesafe(budget: &SynthesisBudget) -> impl Iterator<Item = Term> {
    let goal = budget.goal_type.clone();
    let n = budget.n_vars();
    enumerate_generic(budget).filter(move |t| check(t, &goal, n).is_ok())
}

/// Candidate counts for one trainable size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeCount {
    pub size: usize,
    pub generic_count: u64,
    pub typesafe_count: u64,
    pub elapsed_seconds: f64,
}

/// Counts generic and type-safe candidates with `max_trainable_size = size`.
/// `elapsed_seconds` is only measured when `timing` is set.
pub fn count_candidates(budget: &SynthesisBudget, timing: bool) -> SizeCount {
    let start = Instant::now();
    let goal = &budget.goal_type;
    let n = budget.n_vars();
    let (mut generic, mut typesafe) = (0u64, 0u64);
    for t in enumerate_generic(budget) {
        generic += 1;
        if check(&t, goal, n).is_ok() {
            typesafe += 1;
        }
    }
    SizeCount {
        size: budget.max_trainable_size,
        generic_count: generic,
        typesafe_count: typesafe,
        elapsed_seconds: if timing { start.elapsed().as_secs_f64() } else { 0.0 },
    }
}

/// One ranked candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub program: String,
    pub trainable_size: usize,
    pub score: f64,
    pub std: f64,
    /// Mean score after each warm-up epoch, when the task has a known causal set.
    pub curve: Vec<(f64, f64)>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CandidateRanking {
    pub entries: Vec<RankedCandidate>,
}

/// Number of gates not wrapped by exactly one `FILTER`, counting each extra
/// or missing wrapper.
pub fn gate_wrapping_defect(term: &Term) -> usize {
    fn walk(t: &Term, depth: usize) -> usize {
        match t {
            Term::Prim { kind: PrimKind::Pred, .. } => depth.abs_diff(1),
            Term::Prim { .. } => 0,
            Term::Filter(inner) => walk(inner, depth + 1),
            Term::Comp(a, b) => walk(a, 0) + walk(b, 0),
            Term::Cat(inner) | Term::Map(inner) | Term::Fold(inner, _) => walk(inner, 0),
        }
    }
    walk(term, 0)
}

impl CandidateRanking {
    /// Sorts by score descending, then smaller trainable size. Remaining ties
    /// prefer programs whose gates sit under exactly one `FILTER`, then
    /// program text.
    pub fn from_entries(mut entries: Vec<RankedCandidate>) -> Self {
        let defect = |p: &str| parse(p).map_or(usize::MAX, |t| gate_wrapping_defect(&t));
        entries.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.trainable_size.cmp(&b.trainable_size))
                .then_with(|| defect(&a.program).cmp(&defect(&b.program)))
                .then_with(|| a.program.cmp(&b.program))
        });
        CandidateRanking { entries }
    }

    pub fn top(&self, k: usize) -> &[RankedCandidate] {
        &self.entries[..k.min(self.entries.len())]
    }
}

/// One dataset to rank candidates on. With a known causal set candidates
/// are scored by Jaccard similarity; without one, by `exp(-loss)` on every
/// fifth row of each environment, held out from training.
#[derive(Debug, Clone)]
pub struct RankTask {
    pub data: EnvDataset,
    pub truth: Option<IndexSet>,
}

const HOLDOUT_EVERY: usize = 5;

enum Prep {
    Full(Prepared),
    Split(Prepared, Prepared),
}

fn mask_set(mask: &[bool]) -> IndexSet {
    mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect()
}

struct Outcome {
    score: f64,
    /// Jaccard similarity after every epoch; empty without a causal set.
    curve: Vec<f64>,
}

fn run_one(term: &Term, prep: &Prep, truth: Option<&IndexSet>, config: &LearnerConfig, seed: u64) -> Result<Outcome, LearnerError> {
    match (prep, truth) {
        (Prep::Full(p), Some(truth)) => {
            let (r, _): (RunResult, _) = run_with_params(term, p, config, seed)?;
            Ok(Outcome {
                score: jaccard(&r.s_pred, truth),
                curve: r.mask_trace.iter().map(|m| jaccard(&mask_set(m), truth)).collect(),
            })
        }
        (Prep::Split(train, test), _) => {
            let (_, params) = run_with_params(term, train, config, seed)?;
            let loss = evaluate_loss(term, &params, test)?;
            Ok(Outcome {
                score: if loss.is_finite() { (-loss).exp() } else { 0.0 },
                curve: Vec::new(),
            })
        }
        (Prep::Full(_), None) => unreachable!("tasks without a causal set are split"),
    }
}

/// Trains every term `repeats` times on every task and ranks them by mean
/// score. Repeat `r` uses seed `config.seed + r`. A failed run scores 0 and
/// is counted in `failures`.
pub fn rank_on_tasks(terms: &[Term], tasks: &[RankTask], config: &LearnerConfig, repeats: usize) -> Result<CandidateRanking, LearnerError> {
    config.validate().map_err(LearnerError::Config)?;
    let preps: Vec<Prep> = tasks
        .iter()
        .map(|t| {
            let p = Prepared::new(&t.data)?;
            Ok(match t.truth {
                Some(_) => Prep::Full(p),
                None => {
                    let (a, b) = p.holdout_split(HOLDOUT_EVERY);
                    Prep::Split(a, b)
                }
            })
        })
        .collect::<Result<_, LearnerError>>()?;
    let jobs: Vec<(usize, usize, usize)> = (0..terms.len())
        .flat_map(|i| (0..tasks.len()).flat_map(move |k| (0..repeats).map(move |r| (i, k, r))))
        .collect();
    let outcomes: Vec<Option<Outcome>> = jobs
        .par_iter()
        .map(|&(i, k, r)| run_one(&terms[i], &preps[k], tasks[k].truth.as_ref(), config, config.seed + r as u64).ok())
        .collect();

    let per_term = tasks.len() * repeats;
    let entries = terms
        .iter()
        .enumerate()
        .map(|(i, term)| {
            let runs = &outcomes[i * per_term..(i + 1) * per_term];
            let scores: Vec<f64> = runs.iter().map(|o| o.as_ref().map_or(0.0, |o| o.score)).collect();
            let (score, std) = mean_std(&scores);
            RankedCandidate {
                program: pretty_print(term),
                trainable_size: trainable_size(term),
                score,
                std,
                curve: mean_curve(runs.iter().flatten().map(|o| o.curve.as_slice())),
                failures: runs.iter().filter(|o| o.is_none()).count(),
            }
        })
        .collect();
    Ok(CandidateRanking::from_entries(entries))
}

/// [`rank_on_tasks`] on a single dataset.
pub fn rank_candidates(
    terms: &[Term],
    data: &EnvDataset,
    truth: Option<&IndexSet>,
    config: &LearnerConfig,
    repeats: usize,
) -> Result<CandidateRanking, LearnerError> {
    let task = RankTask {
        data: data.clone(),
        truth: truth.cloned(),
    };
    rank_on_tasks(terms, &[task], config, repeats)
}

/// Mean and standard deviation per epoch. Shorter curves are extended with
/// their last value.
pub(crate) fn mean_curve<'a>(curves: impl Iterator<Item = &'a [f64]>) -> Vec<(f64, f64)> {
    let curves: Vec<&[f64]> = curves.filter(|c| !c.is_empty()).collect();
    let len = curves.iter().map(|c| c.len()).max().unwrap_or(0);
    (0..len)
        .map(|e| {
            let col: Vec<f64> = curves.iter().map(|c| c[e.min(c.len() - 1)]).collect();
            mean_std(&col)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::dsl::type_of;

    fn names(it: impl Iterator<Item = Term>) -> Vec<String> {
        it.map(|t| pretty_print(&t)).collect()
    }

    #[test]
    fn size_one_single_node_is_the_two_primitives() {
        let b = SynthesisBudget::new(1, 3).with_nodes(1);
        assert_eq!(names(enumerate_generic(&b)), vec!["nn", "pred"]);
        // A row enters as a list, so `nn` alone does not type-check either.
        assert!(names(enumerate_typesafe(&b)).is_empty());
    }

    #[test]
    fn node_count_levels_match_recurrence() {
        // T(1) = 2, T(k) = 4 T(k-1) + sum_{a+b=k-1} T(a) T(b).
        let mut t = vec![0u64, 2];
        for k in 2..=6 {
            let mut v = 4 * t[k - 1];
            for a in 1..k - 1 {
                v += t[a] * t[k - 1 - a];
            }
            t.push(v);
        }
        let b = SynthesisBudget::new(usize::MAX, 3).with_nodes(6);
        let mut per_level = [0u64; 7];
        for term in enumerate_generic(&b) {
            per_level[term.node_count()] += 1;
        }
        assert_eq!(&per_level[1..], &t[1..]);
    }

    #[test]
    fn default_program_is_typesafe_at_size_three() {
        let b = SynthesisBudget::new(3, 3);
        let target = pretty_print(&Term::default_program());
        assert!(enumerate_typesafe(&b).any(|t| pretty_print(&t) == target));
    }

    #[test]
    fn golden_counts() {
        let got: Vec<(u64, u64)> = (1..=3)
            .map(|s| {
                let c = count_candidates(&SynthesisBudget::new(s, 3).with_nodes(7), false);
                (c.generic_count, c.typesafe_count)
            })
            .collect();
        assert_eq!(got, GOLDEN_SMALL);
    }

    const GOLDEN_SMALL: [(u64, u64); 3] = [(10922, 0), (29278, 4), (33454, 14)];

    #[test]
    fn typesafe_is_subset_and_sizes_are_monotone() {
        let small = SynthesisBudget::new(2, 3).with_nodes(6);
        let large = SynthesisBudget::new(3, 3).with_nodes(6);
        let g_small: HashSet<String> = names(enumerate_generic(&small)).into_iter().collect();
        let g_large: HashSet<String> = names(enumerate_generic(&large)).into_iter().collect();
        let t_small: HashSet<String> = names(enumerate_typesafe(&small)).into_iter().collect();
        let t_large: HashSet<String> = names(enumerate_typesafe(&large)).into_iter().collect();
        assert!(t_small.is_subset(&g_small));
        assert!(t_large.is_subset(&g_large));
        assert!(g_small.is_subset(&g_large));
        assert!(t_small.is_subset(&t_large));
    }

    #[test]
    fn no_duplicates_and_deterministic() {
        let b = SynthesisBudget::new(3, 3).with_nodes(7);
        let first = names(enumerate_generic(&b));
        let set: HashSet<&String> = first.iter().collect();
        assert_eq!(set.len(), first.len());
        assert_eq!(first, names(enumerate_generic(&b)));
    }

    #[test]
    fn every_typesafe_term_types() {
        let b = SynthesisBudget::new(4, 3).with_nodes(8);
        let goal = DslType::scalar_goal(3);
        for t in enumerate_typesafe(&b) {
            assert_eq!(type_of(&t, 3).unwrap(), goal, "{t}");
            assert!(t.has_unique_ids());
        }
    }

    #[test]
    fn ranking_breaks_ties_by_size_then_text() {
        let entry = |p: &str, size, score| RankedCandidate {
            program: p.into(),
            trainable_size: size,
            score,
            std: 0.0,
            curve: vec![],
            failures: 0,
        };
        let r = CandidateRanking::from_entries(vec![
            entry("COMP(nn, CAT(pred))", 2, 0.9),
            entry("COMP(nn, CAT(FILTER(FILTER(pred))))", 2, 0.9),
            entry("COMP(nn, CAT(FILTER(pred)))", 2, 0.9),
            entry("COMP(nn, CAT(MAP(pred)))", 3, 0.9),
            entry("nn", 1, 0.1),
            entry("COMP(nn, pred)", 2, 0.95),
        ]);
        let order: Vec<&str> = r.entries.iter().map(|e| e.program.as_str()).collect();
        assert_eq!(
            order,
            vec![
                "COMP(nn, pred)",
                "COMP(nn, CAT(FILTER(pred)))",
                "COMP(nn, CAT(FILTER(FILTER(pred))))",
                "COMP(nn, CAT(pred))",
                "COMP(nn, CAT(MAP(pred)))",
                "nn"
            ]
        );
    }
}
