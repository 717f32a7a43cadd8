mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{random_dag, random_hom_target};
use proptest::prelude::*;
use quasik::chase::{chase_explore, check_e_path_bound, extract_model, Budget, Verdict};
use quasik::formula::{parse_formula, ModalFormula};
use quasik::instance::{
    classify_shape, core, depths, find_homomorphism, find_isomorphism, is_homomorphism, is_isomorphic, Instance,
    Shape, Term, TermMap,
};
use quasik::kripke::{brute_force_sat, force, k_tree_sat, KripkeModel, QdpSet};
use quasik::treeops::{trim, trim_kept, unfold, unravel, unravel_literal};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn formula(depth: u32) -> impl Strategy<Value = ModalFormula> {
    let leaf = prop_oneof![
        prop::sample::select(vec!["p", "q", "r"]).prop_map(ModalFormula::prop),
        prop::sample::select(vec!["p", "q", "r"]).prop_map(ModalFormula::neg_prop),
    ];
    leaf.prop_recursive(depth, 12, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| ModalFormula::and(a, b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| ModalFormula::or(a, b)),
            inner.clone().prop_map(ModalFormula::diamond),
            inner.prop_map(ModalFormula::boxed),
        ]
    })
}

fn small_formula() -> impl Strategy<Value = ModalFormula> {
    formula(4).prop_filter("md at most 2", |f| f.modal_depth() <= 2)
}

fn model() -> impl Strategy<Value = KripkeModel> {
    (1usize..=4).prop_flat_map(|n| {
        (
            prop::collection::vec(any::<bool>(), n * n),
            prop::collection::vec(prop::collection::vec(any::<bool>(), n), 3),
        )
            .prop_map(move |(edges, vals)| {
                let rel = (0..n * n).filter(|i| edges[*i]).map(|i| (i / n, i % n));
                let val: BTreeMap<String, BTreeSet<usize>> = ["p", "q", "r"]
                    .iter()
                    .zip(vals)
                    .map(|(p, v)| (p.to_string(), (0..n).filter(|w| v[*w]).collect()))
                    .collect();
                KripkeModel::with_size(n, rel, val).unwrap()
            })
    })
}

fn dag(seed: u64, n: usize) -> Instance {
    random_dag(&mut ChaCha8Rng::seed_from_u64(seed), n, &["A", "B"])
}

/// Existence of a homomorphism by trying every map.
fn brute_hom(src: &Instance, dst: &Instance, injective: bool) -> bool {
    let s: Vec<Term> = src.terms().cloned().collect();
    let d: Vec<Term> = dst.terms().cloned().collect();
    fn go(i: usize, s: &[Term], d: &[Term], h: &mut TermMap, src: &Instance, dst: &Instance, inj: bool) -> bool {
        if i == s.len() {
            return is_homomorphism(src, dst, h);
        }
        let options: Vec<&Term> =
            if s[i].is_constant() { d.iter().filter(|t| **t == s[i]).collect() } else { d.iter().collect() };
        for t in options {
            if inj && h.values().any(|v| v == t) {
                continue;
            }
            h.insert(s[i].clone(), t.clone());
            if go(i + 1, s, d, h, src, dst, inj) {
                return true;
            }
            h.remove(&s[i]);
        }
        false
    }
    go(0, &s, &d, &mut TermMap::new(), src, dst, injective)
}

/// Every root path of a rooted DAG, as term sequences.
fn root_paths(inst: &Instance, root: &Term) -> Vec<Vec<Term>> {
    let mut out = Vec::new();
    let mut stack = vec![vec![root.clone()]];
    while let Some(path) = stack.pop() {
        let last = path.last().unwrap().clone();
        out.push(path.clone());
        for s in inst.successors(&last).keys() {
            let mut p = path.clone();
            p.push(s.clone());
            stack.push(p);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn negation_is_an_involution(f in formula(4)) {
        prop_assert_eq!(f.negate().negate(), f.clone());
        prop_assert_eq!(f.negate().modal_depth(), f.modal_depth());
    }

    #[test]
    fn print_parse_round_trip(f in formula(4)) {
        prop_assert_eq!(parse_formula(&f.to_string()).unwrap(), f);
    }

    #[test]
    fn bivalence(f in formula(3), m in model()) {
        for w in 0..m.world_count() {
            prop_assert_ne!(force(&m, w, &f), force(&m, w, &f.negate()));
        }
    }

    #[test]
    fn oracle_agrees_with_tableau(f in small_formula()) {
        // K has the finite model property, and these formulas need at most
        // a handful of worlds only when satisfiable with small branching,
        // so the oracle is checked one-sidedly.
        if let Some(pm) = brute_force_sat(&f, &QdpSet::empty(), 3) {
            prop_assert!(force(&pm.model, pm.world, &f));
            prop_assert!(k_tree_sat(&f));
        }
        if !k_tree_sat(&f) {
            prop_assert!(brute_force_sat(&f, &QdpSet::empty(), 3).is_none());
        }
    }

    #[test]
    fn chase_agrees_with_tableau(f in small_formula()) {
        let res = chase_explore(&f, &QdpSet::empty(), Budget::default());
        match res.verdict {
            Verdict::Witness(_) => {
                prop_assert!(k_tree_sat(&f));
                prop_assert!(extract_model(res.witness().unwrap(), &f, &QdpSet::empty()).is_ok());
            }
            Verdict::AllContradictory => prop_assert!(!k_tree_sat(&f)),
            Verdict::BudgetExhausted => prop_assert!(false, "the chase terminates without properties"),
        }
        for b in &res.branches {
            prop_assert!(classify_shape(&b.instance).root().is_some());
            prop_assert!(check_e_path_bound(&b.instance, f.modal_depth()));
        }
    }

    #[test]
    fn hom_search_is_complete(a in any::<u64>(), b in any::<u64>(), n in 1usize..=4, m in 1usize..=4) {
        let src = dag(a, n);
        let dst = dag(b, m);
        prop_assert_eq!(find_homomorphism(&src, &dst, None).is_some(), brute_hom(&src, &dst, false));
        if let Some(h) = find_homomorphism(&src, &dst, None) {
            prop_assert!(is_homomorphism(&src, &dst, &h));
        }
    }

    #[test]
    fn isomorphism_matches_brute_force(a in any::<u64>(), b in any::<u64>(), n in 1usize..=4) {
        let x = dag(a, n);
        let y = dag(b, n);
        let brute = x.len() == y.len() && x.term_count() == y.term_count() && brute_hom(&x, &y, true);
        prop_assert_eq!(is_isomorphic(&x, &y), brute);
        let mut ids: Vec<u32> = (700..700 + x.term_count() as u32).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(a ^ b));
        let rename: TermMap = x
            .terms()
            .zip(ids)
            .map(|(t, id)| (t.clone(), if t.is_constant() { t.clone() } else { Term::fresh(id) }))
            .collect();
        let renamed = x.map_terms(&rename);
        let iso = find_isomorphism(&x, &renamed);
        prop_assert!(iso.is_some());
        prop_assert!(is_homomorphism(&x, &renamed, &iso.unwrap()));
    }

    #[test]
    fn shapes_and_depths(a in any::<u64>(), n in 1usize..=6) {
        let inst = dag(a, n);
        let shape = classify_shape(&inst);
        prop_assert!(shape.root().is_some());
        let d = depths(&inst).unwrap();
        let root = shape.root().unwrap().clone();
        let paths = root_paths(&inst, &root);
        for t in inst.terms() {
            let shortest = paths.iter().filter(|p| p.last() == Some(t)).map(|p| p.len() - 1).min().unwrap();
            prop_assert_eq!(d[t], shortest);
            if shape.is_multi_tree() {
                prop_assert_eq!(paths.iter().filter(|p| p.last() == Some(t)).count(), 1);
            }
        }
        if matches!(shape, Shape::Tree(_)) {
            prop_assert!(shape.is_multi_tree());
        }
        let u = unfold(&inst).unwrap();
        prop_assert!(classify_shape(&u).is_multi_tree());
        prop_assert_eq!(u.term_count(), paths.len());
    }

    #[test]
    fn trim_keeps_root_and_is_downward_closed(a in any::<u64>(), n in 1usize..=6, i in 0usize..4) {
        let u = unfold(&dag(a, n)).unwrap();
        let kept = trim_kept(&u, i).unwrap();
        let root = classify_shape(&u).root().unwrap().clone();
        prop_assert!(kept.contains(&root));
        for t in &kept {
            for p in u.predecessors(t).keys() {
                prop_assert!(kept.contains(p));
            }
        }
        prop_assert!(classify_shape(&trim(&u, i).unwrap()).is_multi_tree());
    }

    #[test]
    fn unravel_routes_agree(a in any::<u64>(), b in any::<u64>(), n in 1usize..=6, i in 0usize..4, j in 0usize..3) {
        let inst = dag(a, n);
        let fast = unravel(&inst, i).unwrap();
        prop_assert!(is_isomorphic(&fast, &unravel_literal(&inst, i).unwrap()));
        prop_assert!(is_isomorphic(&core(&fast), &fast));
        let mut rng = ChaCha8Rng::seed_from_u64(b);
        let (target, _) = random_hom_target(&mut rng, &inst, &["A", "B"]);
        prop_assert!(find_homomorphism(&fast, &unravel(&target, i + j).unwrap(), None).is_some());
    }
}
