use autoci::dsl::{parse, pretty_print, Term};
use autoci::learner::LearnerConfig;
use autoci::scm::{gen_survival_cohort, make_finite_setting, random_scm, ScmParams, SurvivalCohortSpec};
use autoci::synthesis::*;

/// Terms with exactly `k` nodes and `l` leaves: a leaf is `nn` or `pred`,
/// four combinators wrap one child and `COMP` joins two.
fn shape_counts(max_nodes: usize) -> Vec<Vec<u64>> {
    let mut c = vec![vec![0u64; max_nodes + 1]; max_nodes + 1];
    c[1][1] = 2;
    for k in 2..=max_nodes {
        for l in 1..=k {
            let mut v = 4 * c[k - 1][l];
            for a in 1..k - 1 {
                for la in 1..l {
                    v += c[a][la] * c[k - 1 - a][l - la];
                }
            }
            c[k][l] = v;
        }
    }
    c
}

#[test]
fn nine_node_counts_for_three_variables() {
    let shapes = shape_counts(9);
    let mut got = Vec::new();
    for size in 1..=5 {
        let c = count_candidates(&SynthesisBudget::new(size, 3), false);
        let expected_generic: u64 = (1..=9).flat_map(|k| (1..=size.min(k)).map(move |l| (k, l))).map(|(k, l)| shapes[k][l]).sum();
        assert_eq!(c.generic_count, expected_generic, "size {size}");
        assert_eq!(c.elapsed_seconds, 0.0);
        got.push((c.generic_count, c.typesafe_count));
    }
    assert_eq!(
        got,
        [(174762, 0), (737886, 6), (1064622, 46), (1102782, 90), (1103230, 90)]
    );
}

#[test]
fn size_three_contains_the_default_program_and_is_much_smaller() {
    let b = SynthesisBudget::new(3, 4);
    let safe: Vec<String> = enumerate_typesafe(&b).map(|t| pretty_print(&t)).collect();
    assert!(safe.iter().any(|p| p == "COMP(nn, CAT(FILTER(pred)))"));
    assert!(!safe.iter().any(|p| p == "pred"));
    let c = count_candidates(&b, false);
    assert!(c.typesafe_count < c.generic_count);
}

fn terms(src: &[&str]) -> Vec<Term> {
    src.iter().map(|s| parse(s).unwrap()).collect()
}

fn toy_tasks(n: u64) -> Vec<RankTask> {
    (0..n)
        .map(|k| {
            let scm = random_scm(&ScmParams::new(5, 0.5, false), k);
            RankTask {
                data: make_finite_setting(&scm, k),
                truth: Some(scm.causal_set()),
            }
        })
        .collect()
}

#[test]
fn toy_suite_ranking() {
    let candidates = terms(&[
        "COMP(nn, CAT(pred))",
        "COMP(nn, CAT(FILTER(FILTER(pred))))",
        "COMP(nn, CAT(COMP(FILTER(pred), FILTER(pred))))",
        "COMP(COMP(nn, CAT(FILTER(pred))), FILTER(pred))",
        "COMP(nn, CAT(FILTER(pred)))",
    ]);
    let r = rank_on_tasks(&candidates, &toy_tasks(50), &LearnerConfig::toy(), 1).unwrap();
    let score = |p: &str| r.entries.iter().find(|e| e.program == p).unwrap().score;
    let pos = |p: &str| r.entries.iter().position(|e| e.program == p).unwrap();

    // Single gates with any FILTER wrapping train identically; the plain
    // FILTER form wins the tie.
    let single = score("COMP(nn, CAT(FILTER(pred)))");
    assert!(single > 0.85, "{r:#?}");
    assert_eq!(single, score("COMP(nn, CAT(pred))"));
    assert_eq!(single, score("COMP(nn, CAT(FILTER(FILTER(pred))))"));
    assert!(pos("COMP(nn, CAT(FILTER(pred)))") < pos("COMP(nn, CAT(pred))"));
    assert!(pos("COMP(nn, CAT(FILTER(pred)))") < pos("COMP(nn, CAT(FILTER(FILTER(pred))))"));

    // Two chained gates are the same function however they are nested.
    assert_eq!(
        score("COMP(nn, CAT(COMP(FILTER(pred), FILTER(pred))))"),
        score("COMP(COMP(nn, CAT(FILTER(pred))), FILTER(pred))")
    );
    for e in &r.entries {
        assert_eq!(e.failures, 0);
        // Warm-up epochs plus at least one fine-tune epoch per variable.
        assert!(e.curve.len() >= 8 + 4);
        assert!(e.curve.iter().all(|(m, s)| (0.0..=1.0).contains(m) && *s >= 0.0));
    }
}

#[test]
fn single_term_duplicates_and_failures() {
    let tasks = toy_tasks(2);
    let cfg = LearnerConfig::toy();
    let one = rank_on_tasks(&terms(&["COMP(nn, CAT(FILTER(pred)))"]), &tasks, &cfg, 2).unwrap();
    assert_eq!(one.entries.len(), 1);
    assert!((0.0..=1.0).contains(&one.entries[0].score));

    let two = rank_on_tasks(&terms(&["COMP(nn, CAT(FILTER(pred)))", "COMP(nn, CAT(FILTER(pred)))"]), &tasks, &cfg, 2).unwrap();
    assert_eq!(two.entries[0], two.entries[1]);
    assert_eq!(two.entries[0], one.entries[0]);

    // No gate: every run fails and the term scores 0.
    let bad = rank_on_tasks(&terms(&["COMP(nn, CAT(pred))", "nn"]), &tasks, &cfg, 2).unwrap();
    let last = bad.entries.last().unwrap();
    assert_eq!((last.program.as_str(), last.score, last.failures), ("nn", 0.0, 4));
    assert!(last.curve.is_empty());
}

#[test]
fn survival_candidates_are_scored_on_held_out_rows() {
    let spec = SurvivalCohortSpec {
        n_per_trial: [300, 300],
        ..SurvivalCohortSpec::default()
    };
    let data = gen_survival_cohort(&spec, 4);
    let cfg = LearnerConfig {
        runs: 1,
        ..LearnerConfig::survival()
    };
    let r = rank_candidates(&terms(&["COMP(nn, CAT(FILTER(pred)))"]), &data, None, &cfg, 1).unwrap();
    let e = &r.entries[0];
    assert_eq!(e.failures, 0);
    assert!(e.score > 0.0 && e.score < 1.0, "{e:?}");
    assert!(e.curve.is_empty());
}
