#![allow(dead_code)]

use quasik::formula::{parse_formula, ModalFormula};
use quasik::instance::{Atom, Instance, Term, TermMap};
use quasik::kripke::QdpSet;
use rand::seq::SliceRandom;
use rand::Rng;

pub fn f(s: &str) -> ModalFormula {
    parse_formula(s).unwrap()
}

pub fn q(s: &str) -> QdpSet {
    s.parse().unwrap()
}

/// Random NNF formula of modal depth at most `md` over the first `atoms`
/// of p, q, r, with roughly `size` connectives.
pub fn random_formula(rng: &mut impl Rng, md: usize, atoms: usize, size: usize) -> ModalFormula {
    const NAMES: [&str; 3] = ["p", "q", "r"];
    if size == 0 {
        let name = NAMES[rng.gen_range(0..atoms)];
        return if rng.gen_bool(0.5) { ModalFormula::prop(name) } else { ModalFormula::neg_prop(name) };
    }
    let choice = rng.gen_range(0..if md > 0 { 4 } else { 2 });
    match choice {
        0 | 1 => {
            let left = rng.gen_range(0..size);
            let l = random_formula(rng, md, atoms, left);
            let r = random_formula(rng, md, atoms, size - 1 - left);
            if choice == 0 {
                ModalFormula::and(l, r)
            } else {
                ModalFormula::or(l, r)
            }
        }
        2 => ModalFormula::diamond(random_formula(rng, md - 1, atoms, size - 1)),
        _ => ModalFormula::boxed(random_formula(rng, md - 1, atoms, size - 1)),
    }
}

pub fn term(i: usize) -> Term {
    if i == 0 {
        Term::constant("a")
    } else {
        Term::fresh(i as u32)
    }
}

/// Random DAG rooted at `a` over `n` terms: every non-root term gets an
/// edge from an earlier term; extra forward edges and labels are random.
pub fn random_dag(rng: &mut impl Rng, n: usize, labels: &[&str]) -> Instance {
    let mut inst = Instance::new();
    inst.insert(Atom::unary(labels[0], term(0)));
    for i in 1..n {
        let parent = rng.gen_range(0..i);
        add_edge(rng, &mut inst, term(parent), term(i));
        for j in 0..i {
            if j != parent && rng.gen_bool(0.2) {
                add_edge(rng, &mut inst, term(j), term(i));
            }
        }
    }
    for i in 0..n {
        for l in labels {
            if rng.gen_bool(0.3) {
                inst.insert(Atom::unary(l, term(i)));
            }
        }
    }
    inst
}

fn add_edge(rng: &mut impl Rng, inst: &mut Instance, s: Term, t: Term) {
    match rng.gen_range(0..4) {
        0 => {
            inst.insert(Atom::e(s.clone(), t.clone()));
            inst.insert(Atom::r(s, t));
        }
        1 => {
            inst.insert(Atom::e(s, t));
        }
        _ => {
            inst.insert(Atom::r(s, t));
        }
    }
}

/// Whether `t` is reachable from `s`.
fn reaches(inst: &Instance, s: &Term, t: &Term) -> bool {
    let mut stack = vec![s.clone()];
    let mut seen = std::collections::BTreeSet::new();
    while let Some(x) = stack.pop() {
        if &x == t {
            return true;
        }
        if seen.insert(x.clone()) {
            stack.extend(inst.successors(&x).keys().cloned());
        }
    }
    false
}

/// A rooted DAG `J` with a homomorphism `I → J`: two incomparable terms
/// may be merged, random atoms are added and terms are renamed.
pub fn random_hom_target(rng: &mut impl Rng, inst: &Instance, labels: &[&str]) -> (Instance, TermMap) {
    let terms: Vec<Term> = inst.terms().cloned().collect();
    let mut h: TermMap = terms.iter().map(|t| (t.clone(), t.clone())).collect();
    let pairs: Vec<(Term, Term)> = terms
        .iter()
        .flat_map(|x| terms.iter().map(move |y| (x.clone(), y.clone())))
        .filter(|(x, y)| x < y && !reaches(inst, x, y) && !reaches(inst, y, x))
        .collect();
    if let Some((x, y)) = pairs.choose(rng) {
        h.insert(y.clone(), x.clone());
    }
    let mut j = inst.map_terms(&h);
    let jt: Vec<Term> = j.terms().cloned().collect();
    for t in &jt {
        if rng.gen_bool(0.2) {
            j.insert(Atom::unary(labels[rng.gen_range(0..labels.len())], t.clone()));
        }
    }
    let extra = Term::fresh(1000);
    if rng.gen_bool(0.5) {
        j.insert(Atom::r(jt[rng.gen_range(0..jt.len())].clone(), extra));
    }
    let mut rename: TermMap = TermMap::new();
    let mut ids: Vec<u32> = (500..500 + j.term_count() as u32).collect();
    ids.shuffle(rng);
    for (t, id) in j.terms().zip(ids) {
        let image = if t.is_constant() { t.clone() } else { Term::fresh(id) };
        rename.insert(t.clone(), image);
    }
    let j = j.map_terms(&rename);
    let h = h.into_iter().map(|(k, v)| (k, rename[&v].clone())).collect();
    (j, h)
}

/// Curated formulas with the property sets they are checked under.
pub fn curated_suite() -> Vec<(&'static str, &'static str)> {
    vec![
        ("p", ""),
        ("p & ~p", ""),
        ("<>p", ""),
        ("<>p & []~p", ""),
        ("<>p & <>~p", ""),
        ("[]p & <>q", ""),
        ("<>(p | q) & []~p & []~q", ""),
        ("<>(p & ~q) & [](~p | q)", ""),
        ("<><>p & [][]~p", ""),
        ("<>[]p & []<>~p", ""),
        ("[]p", ""),
        ("<>p & <>q & [](~p | ~q)", ""),
        ("<>p & [][]~p", "1->2"),
        ("<>p & [][][]~p", "1->3"),
        ("<><>p & [][][]~p", "2->3"),
        ("<>p & [][][]~p", "2->3"),
        ("<><>p & [][][]~p", "1->3"),
        ("p | ~p", "1->2"),
        ("[]p", "1->2"),
        ("[]p & []~p", "1->2"),
        ("<>p & []~p", "1->2"),
        ("<>p", "2->3"),
        ("<>p & <>q", "2->3"),
        ("<>(p & <>q) & [][]~q", "1->2"),
        ("<>(p & []~p)", "1->2"),
        ("<>(p & ~q) & [](~p | q)", "2->3"),
        ("<><>p & [][]~p", "1->2,2->3"),
        ("<>p & [][][]~p", "1->2,1->3"),
        ("[]<>p & <>[]~p", "2->3"),
        ("<>q & [](p | ~q) & []<>~p", "1->3"),
    ]
}
