mod common;

use common::{curated_suite, f, q};
use quasik::chase::{chase_explore, database, BranchStatus, Budget, ChaseBranch};
use quasik::decision::{decide, sat, verify_certificate, DecisionBudget, DecisionVerdict, SatVerdict};
use quasik::formula::ModalFormula;
use quasik::instance::Instance;
use quasik::kripke::{brute_force_sat, force, QdpSet};
use quasik::template::{check_follows, reverify, search_template, SearchOutcome, Template, TemplateSearchBudget};

/// Instances along a branch: the database, then one per trace entry.
fn prefixes(g: &ModalFormula, branch: &ChaseBranch) -> Vec<Instance> {
    let mut cur = database(g);
    let mut out = vec![cur.clone()];
    for e in &branch.trace {
        for a in &e.added {
            cur.insert(a.clone());
        }
        out.push(cur.clone());
    }
    out
}

fn find_template(g: &ModalFormula, p: &QdpSet) -> Option<Template> {
    match search_template(g, p, &TemplateSearchBudget::for_formula(g)) {
        SearchOutcome::Found(t, _) => Some(*t),
        _ => None,
    }
}

#[test]
fn replayed_branch_follows_template() {
    let cases = [("<>p & <>~p", ""), ("[]p & <>q", ""), ("<>p", "1->2"), ("<>(p & <>q) & []<>r", ""), ("<>p", "2->3")];
    for (s, ps) in cases {
        let (g, p) = (f(s), q(ps));
        let t = find_template(&g, &p).unwrap_or_else(|| panic!("no template for {s}"));
        reverify(&t, &g, &p).unwrap();
        let res = chase_explore(&g, &p, Budget { max_steps: 200, max_branches: 64 });
        let followed = res.branches.iter().filter(|b| b.status != BranchStatus::Contradictory).any(|b| {
            let final_instance = &b.instance;
            let steps = prefixes(&g, b);
            assert_eq!(steps.last().unwrap(), final_instance, "trace of branch {} does not replay", b.id);
            steps.iter().all(|i| check_follows(i, &t).is_some())
        });
        assert!(followed, "no branch of {s} under {{{ps}}} follows its template");
        for b in res.branches.iter().filter(|b| b.status == BranchStatus::Contradictory) {
            assert!(check_follows(&b.instance, &t).is_none(), "contradictory branch follows template for {s}");
        }
    }
}

#[test]
fn refuted_formulas_have_no_template() {
    for (s, ps) in [("p & ~p", ""), ("<>p & []~p", "1->2"), ("<>p & [][]~p", "1->2")] {
        let (g, p) = (f(s), q(ps));
        assert!(find_template(&g, &p).is_none(), "{s}");
    }
}

#[test]
fn sat_outcomes_agree_with_oracle() {
    let budget = DecisionBudget::default();
    for (s, ps) in curated_suite() {
        let (g, p) = (f(s), q(ps));
        let out = sat(&g, &p, &budget);
        let small = brute_force_sat(&g, &p, 3);
        if let Some(pm) = &small {
            assert!(force(&pm.model, pm.world, &g));
            assert_eq!(out.verdict, SatVerdict::Satisfiable, "{s} under {{{ps}}}");
        }
        match out.verdict {
            SatVerdict::Satisfiable | SatVerdict::Unsatisfiable => {
                verify_certificate(&out.certificate, &g, &p).unwrap();
            }
            _ => {}
        }
        if out.verdict == SatVerdict::Unsatisfiable {
            assert!(small.is_none());
        }
    }
}

#[test]
fn theorem_iff_negation_unsatisfiable() {
    let budget = DecisionBudget::default();
    for (s, ps) in [("p | ~p", ""), ("[]~p | <><>p", "1->2"), ("<>p", ""), ("[]~p | <><>p", "")] {
        let (g, p) = (f(s), q(ps));
        let d = decide(&g, &p, &budget);
        let n = sat(&g.negate(), &p, &budget);
        assert_eq!(d.negation, g.negate());
        match d.verdict {
            DecisionVerdict::Theorem => assert_eq!(n.verdict, SatVerdict::Unsatisfiable),
            DecisionVerdict::NonTheorem => assert_eq!(n.verdict, SatVerdict::Satisfiable),
            DecisionVerdict::Unknown => panic!("{s} undecided"),
        }
        verify_certificate(&d.certificate, &d.negation, &p).unwrap();
    }
}
