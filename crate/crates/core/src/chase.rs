//! Budgeted exploration of the restricted disjunctive chase.
//!
//! Branches are explored depth first. Within a branch, triggers wait in
//! per-tier FIFO queues ordered by discovery time and are re-checked for
//! activity when dequeued. Tiers put the rules that can only fire finitely
//! often on the current terms (contradiction, conjunction, box, disjunction)
//! ahead of the term-creating ones, so every trigger is eventually either
//! applied or satisfied.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::ops::ControlFlow;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::formula::ModalFormula;
use crate::instance::{Atom, Instance, Term, TermMap, EDGE_E};
use crate::kripke::{check_qdps, force, KripkeModel, PointedModel, QdpSet};
use crate::rules::{build_rule_set, disjunct_atoms, for_each_trigger, is_active, Rule, Trigger};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Budget {
    /// Trigger applications allowed along one branch, counted from the root.
    pub max_steps: usize,
    /// Total number of branches that may be created.
    pub max_branches: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Budget { max_steps: 5000, max_branches: 512 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchStatus {
    Open,
    Saturated,
    Contradictory,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub step: usize,
    pub branch: usize,
    pub rule: String,
    pub at: Vec<Term>,
    pub disjunct: usize,
    pub added: Vec<Atom>,
}

impl fmt::Display for TraceEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let at: Vec<String> = self.at.iter().map(Term::to_string).collect();
        let added: Vec<String> = self.added.iter().map(Atom::to_string).collect();
        write!(
            f,
            "step={} branch={} rule={} at={} disjunct={} added={}",
            self.step,
            self.branch,
            self.rule,
            at.join(","),
            self.disjunct,
            added.join(";")
        )
    }
}

#[derive(Clone, Debug)]
pub struct ChaseBranch {
    pub id: usize,
    pub instance: Instance,
    pub status: BranchStatus,
    pub trace: Vec<TraceEntry>,
    pub step_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    AllContradictory,
    /// Index into `ChaseResult::branches` of a saturated, contradiction-free branch.
    Witness(usize),
    BudgetExhausted,
}

#[derive(Clone, Debug)]
pub struct ChaseResult {
    /// Leaf branches in exploration order.
    pub branches: Vec<ChaseBranch>,
    pub verdict: Verdict,
    pub total_steps: usize,
    pub branches_created: usize,
}

impl ChaseResult {
    pub fn witness(&self) -> Option<&ChaseBranch> {
        match self.verdict {
            Verdict::Witness(i) => Some(&self.branches[i]),
            _ => None,
        }
    }

    pub fn trace_lines(&self) -> Vec<String> {
        self.branches.iter().flat_map(|b| b.trace.iter().map(|e| e.to_string())).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChaseError {
    #[error("branch {0} is not saturated")]
    NotSaturated(usize),
    #[error("extracted model fails verification: {0}")]
    ModelCheck(String),
}

/// Read-only view of a branch handed to chase observers after every step.
pub struct StepView<'a> {
    pub branch: usize,
    pub step: usize,
    pub instance: &'a Instance,
}

/// The database `{P_φ(a)}`.
pub fn database(f: &ModalFormula) -> Instance {
    [Atom::label(f, Term::constant("a"))].into_iter().collect()
}

pub fn chase_explore(f: &ModalFormula, p: &QdpSet, budget: Budget) -> ChaseResult {
    chase_observed(f, p, budget, |_| ControlFlow::Continue(()))
}

/// Like [`chase_explore`], calling `observe` after every applied step. A
/// `Break` stops the exploration with a budget-exhausted verdict.
pub fn chase_observed(
    f: &ModalFormula,
    p: &QdpSet,
    budget: Budget,
    observe: impl FnMut(&StepView<'_>) -> ControlFlow<()>,
) -> ChaseResult {
    let rules = build_rule_set(f, p);
    chase_from(&database(f), &rules, budget, observe)
}

#[derive(Clone)]
struct BranchState {
    id: usize,
    inst: Instance,
    next_fresh: u32,
    queues: [VecDeque<Trigger>; 5],
    seen: HashSet<(usize, Vec<Term>)>,
    steps: usize,
    trace: Vec<TraceEntry>,
}

struct Engine<'r> {
    rules: &'r [Arc<Rule>],
    /// For each predicate, (rule index, body atom index) pairs mentioning it.
    by_pred: HashMap<crate::instance::Pred, Vec<(usize, usize)>>,
}

impl<'r> Engine<'r> {
    fn new(rules: &'r [Arc<Rule>]) -> Self {
        let mut by_pred: HashMap<_, Vec<_>> = HashMap::new();
        for (ri, r) in rules.iter().enumerate() {
            for (ai, a) in r.body.iter().enumerate() {
                by_pred.entry(a.pred.clone()).or_default().push((ri, ai));
            }
        }
        Engine { rules, by_pred }
    }

    fn enqueue(&self, st: &mut BranchState, ri: usize, seed: Option<&TermMap>) {
        let rule = &self.rules[ri];
        let mut found = Vec::new();
        for_each_trigger(&st.inst, rule, seed, |t| {
            found.push(t);
            ControlFlow::Continue(())
        });
        for t in found {
            let key = (ri, t.assignment.values().cloned().collect());
            if st.seen.insert(key) {
                st.queues[rule.tag.tier() as usize].push_back(t);
            }
        }
    }

    /// Adds atoms and discovers the triggers whose body image uses them.
    fn add_atoms(&self, st: &mut BranchState, atoms: &[Atom]) -> Vec<Atom> {
        let mut added = Vec::new();
        for a in atoms {
            if st.inst.insert(a.clone()) {
                added.push(a.clone());
            }
        }
        for a in &added {
            let Some(uses) = self.by_pred.get(&a.pred) else { continue };
            for &(ri, ai) in uses {
                let pattern = &self.rules[ri].body[ai];
                let mut seed = TermMap::new();
                let unifies = pattern.args.iter().zip(&a.args).all(|(v, t)| match seed.get(v) {
                    Some(prev) => prev == t,
                    None => {
                        seed.insert(v.clone(), t.clone());
                        true
                    }
                });
                if unifies {
                    self.enqueue(st, ri, Some(&seed));
                }
            }
        }
        added
    }

    fn apply(&self, st: &mut BranchState, trig: &Trigger, d: usize, at: &[Term]) {
        let mut next = st.next_fresh;
        let atoms = disjunct_atoms(trig, d, &mut next);
        st.next_fresh = next;
        let added = self.add_atoms(st, &atoms);
        st.steps += 1;
        st.trace.push(TraceEntry {
            step: st.steps,
            branch: st.id,
            rule: trig.rule.tag.to_string(),
            at: at.to_vec(),
            disjunct: d,
            added,
        });
    }

    fn next_active(&self, st: &mut BranchState) -> Option<Trigger> {
        for tier in 0..st.queues.len() {
            while let Some(t) = st.queues[tier].pop_front() {
                if is_active(&st.inst, &t) {
                    return Some(t);
                }
            }
        }
        None
    }
}

/// Runs the chase from an arbitrary start instance.
pub fn chase_from(
    start: &Instance,
    rules: &[Arc<Rule>],
    budget: Budget,
    mut observe: impl FnMut(&StepView<'_>) -> ControlFlow<()>,
) -> ChaseResult {
    let engine = Engine::new(rules);
    let mut root = BranchState {
        id: 0,
        inst: Instance::new(),
        next_fresh: start.max_fresh().map_or(1, |m| m + 1),
        queues: Default::default(),
        seen: HashSet::new(),
        steps: 0,
        trace: Vec::new(),
    };
    let start_atoms: Vec<Atom> = start.atoms().cloned().collect();
    engine.add_atoms(&mut root, &start_atoms);

    let mut leaves = Vec::new();
    let mut stack = vec![root];
    let mut created = 1;
    let mut total_steps = 0;
    let mut exhausted = false;
    let mut witness = None;

    'branches: while let Some(mut st) = stack.pop() {
        loop {
            if st.inst.has_contr() {
                leaves.push(finish(st, BranchStatus::Contradictory));
                continue 'branches;
            }
            let Some(trig) = engine.next_active(&mut st) else {
                witness = Some(leaves.len());
                leaves.push(finish(st, BranchStatus::Saturated));
                break 'branches;
            };
            if st.steps >= budget.max_steps {
                exhausted = true;
                leaves.push(finish(st, BranchStatus::Open));
                break 'branches;
            }
            let arity = trig.rule.head.len();
            if arity > 1 && created + arity - 1 > budget.max_branches {
                exhausted = true;
                leaves.push(finish(st, BranchStatus::Open));
                break 'branches;
            }
            let at: Vec<Term> = trig.assignment.values().cloned().collect();
            let mut others: Vec<BranchState> = Vec::with_capacity(arity - 1);
            for d in 1..arity {
                let mut child = st.clone();
                child.id = created;
                created += 1;
                engine.apply(&mut child, &trig, d, &at);
                others.push(child);
            }
            engine.apply(&mut st, &trig, 0, &at);
            total_steps += 1;
            while let Some(c) = others.pop() {
                stack.push(c);
            }
            let view = StepView { branch: st.id, step: st.steps, instance: &st.inst };
            if observe(&view).is_break() {
                exhausted = true;
                leaves.push(finish(st, BranchStatus::Open));
                break 'branches;
            }
        }
    }

    let verdict = match witness {
        Some(i) => Verdict::Witness(i),
        None if exhausted => Verdict::BudgetExhausted,
        None => Verdict::AllContradictory,
    };
    ChaseResult { branches: leaves, verdict, total_steps, branches_created: created }
}

fn finish(st: BranchState, status: BranchStatus) -> ChaseBranch {
    ChaseBranch { id: st.id, instance: st.inst, status, trace: st.trace, step_count: st.steps }
}

/// Whether every path of `E` atoms has at most `n` atoms.
pub fn check_e_path_bound(inst: &Instance, n: usize) -> bool {
    fn longest(inst: &Instance, t: &Term, memo: &mut BTreeMap<Term, Option<usize>>) -> Option<usize> {
        if let Some(v) = memo.get(t) {
            return *v; // None while on the stack signals a cycle
        }
        memo.insert(t.clone(), None);
        let mut best = 0;
        for (s, bits) in inst.successors(t) {
            if bits & EDGE_E != 0 {
                best = best.max(longest(inst, s, memo)? + 1);
            }
        }
        memo.insert(t.clone(), Some(best));
        Some(best)
    }
    let mut memo = BTreeMap::new();
    inst.terms().all(|t| longest(inst, t, &mut memo).is_some_and(|l| l <= n))
}

/// The model read off a saturated branch: worlds are terms, `R` is read
/// from `R` atoms and `V(p) = {t | P_p(t)}`. The result is re-checked
/// against `f` and `p`.
pub fn extract_model(branch: &ChaseBranch, f: &ModalFormula, p: &QdpSet) -> Result<PointedModel, ChaseError> {
    if branch.status != BranchStatus::Saturated {
        return Err(ChaseError::NotSaturated(branch.id));
    }
    let model = instance_model(&branch.instance, f);
    let root = model.world_index("a").map_err(|e| ChaseError::ModelCheck(e.to_string()))?;
    if !force(&model, root, f) {
        return Err(ChaseError::ModelCheck(format!("formula not forced at a: {f}")));
    }
    if !check_qdps(&model, p) {
        return Err(ChaseError::ModelCheck("frame condition violated".into()));
    }
    Ok(PointedModel { model, world: root })
}

/// Kripke structure of an instance: worlds are terms, `R` from `R` atoms,
/// propositions from the `P_p` labels of the propositions of `f`.
pub fn instance_model(inst: &Instance, f: &ModalFormula) -> KripkeModel {
    let terms: Vec<&Term> = inst.terms().collect();
    let index: BTreeMap<&Term, usize> = terms.iter().enumerate().map(|(i, t)| (*t, i)).collect();
    let mut rel = Vec::new();
    for t in &terms {
        for (s, bits) in inst.successors(t) {
            if bits & crate::instance::EDGE_R != 0 {
                rel.push((index[t], index[s]));
            }
        }
    }
    let val = f
        .props()
        .into_iter()
        .map(|name| {
            let label = crate::instance::label_name(&ModalFormula::Prop(name.clone()));
            let ws = inst
                .terms_with_label(&label)
                .map(|s| s.iter().map(|t| index[t]).collect())
                .unwrap_or_default();
            (name, ws)
        })
        .collect();
    let worlds = if terms.is_empty() { vec!["a".to_string()] } else { terms.iter().map(|t| t.to_string()).collect() };
    KripkeModel::new(worlds, rel, val).expect("instance model is well formed")
}

/// Replays the traces of an all-contradictory result: every leaf trace must
/// be a valid restricted derivation from `{P_φ(a)}` ending in `contr`, and
/// every disjunctive step must have a leaf for each of its disjuncts.
pub fn verify_refutation(f: &ModalFormula, p: &QdpSet, result: &ChaseResult) -> Result<(), String> {
    if result.verdict != Verdict::AllContradictory {
        return Err("result is not a refutation".into());
    }
    let rules = build_rule_set(f, p);
    let by_tag: HashMap<String, &Arc<Rule>> = rules.iter().map(|r| (r.tag.to_string(), r)).collect();
    // prefix of chosen steps -> (next step, its arity, disjuncts taken)
    type Step = (String, Vec<Term>);
    let mut choices: HashMap<Vec<(Step, usize)>, (Step, usize, HashSet<usize>)> = HashMap::new();
    for leaf in &result.branches {
        let mut inst = database(f);
        let mut prefix: Vec<(Step, usize)> = Vec::new();
        for entry in &leaf.trace {
            let rule = by_tag.get(&entry.rule).ok_or_else(|| format!("unknown rule {}", entry.rule))?;
            let vars = rule.body_vars();
            if vars.len() != entry.at.len() {
                return Err(format!("bad assignment at step {}", entry.step));
            }
            let assignment: TermMap = vars.into_iter().zip(entry.at.iter().cloned()).collect();
            let trig = Trigger { rule: (*rule).clone(), assignment };
            let body_maps = rule.body.iter().all(|a| inst.contains(&a.map(|t| trig.assignment[t].clone())));
            if !body_maps || !is_active(&inst, &trig) {
                return Err(format!("step {} applies an inactive trigger", entry.step));
            }
            if entry.disjunct >= rule.head.len() {
                return Err(format!("step {} names a missing disjunct", entry.step));
            }
            let mut next = inst.max_fresh().map_or(1, |m| m + 1);
            let atoms = disjunct_atoms(&trig, entry.disjunct, &mut next);
            if !entry.added.iter().all(|a| atoms.contains(a)) {
                return Err(format!("step {} records atoms outside the chosen disjunct", entry.step));
            }
            for a in atoms {
                inst.insert(a);
            }
            let step: Step = (entry.rule.clone(), entry.at.clone());
            let slot = choices
                .entry(prefix.clone())
                .or_insert_with(|| (step.clone(), rule.head.len(), HashSet::new()));
            if slot.0 != step {
                return Err(format!("branches diverge without a disjunctive step at step {}", entry.step));
            }
            slot.2.insert(entry.disjunct);
            prefix.push((step, entry.disjunct));
        }
        if !inst.has_contr() {
            return Err(format!("branch {} does not derive contr", leaf.id));
        }
    }
    for (prefix, (_, arity, seen)) in &choices {
        if seen.len() != *arity {
            return Err(format!("disjunctive step after {} steps lacks branches", prefix.len()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formula::parse_formula;
    use crate::instance::classify_shape;

    fn pf(s: &str) -> ModalFormula {
        parse_formula(s).unwrap()
    }

    #[test]
    fn contradiction_closes() {
        let f = pf("p & ~p");
        let r = chase_explore(&f, &QdpSet::empty(), Budget::default());
        assert_eq!(r.verdict, Verdict::AllContradictory);
        assert!(r.branches[0].step_count <= 3);
        verify_refutation(&f, &QdpSet::empty(), &r).unwrap();
    }

    #[test]
    fn atom_saturates_immediately() {
        let f = pf("p");
        let r = chase_explore(&f, &QdpSet::empty(), Budget::default());
        assert_eq!(r.verdict, Verdict::Witness(0));
        assert_eq!(r.branches[0].step_count, 0);
        let m = extract_model(&r.branches[0], &f, &QdpSet::empty()).unwrap();
        assert_eq!(m.model.world_count(), 1);
    }

    #[test]
    fn density_keeps_chase_open() {
        let f = pf("<>p");
        let p: QdpSet = "1->2".parse().unwrap();
        let r = chase_explore(&f, &p, Budget { max_steps: 60, max_branches: 8 });
        assert_eq!(r.verdict, Verdict::BudgetExhausted);
    }

    #[test]
    fn diamond_model() {
        let f = pf("<>p");
        let r = chase_explore(&f, &QdpSet::empty(), Budget::default());
        let b = r.witness().unwrap();
        let m = extract_model(b, &f, &QdpSet::empty()).unwrap();
        assert_eq!(m.model.world_count(), 2);
        assert!(check_e_path_bound(&b.instance, 1));
    }

    #[test]
    fn disjunction_branches() {
        let f = pf("(p | q) & ~p & ~q");
        let r = chase_explore(&f, &QdpSet::empty(), Budget::default());
        assert_eq!(r.verdict, Verdict::AllContradictory);
        assert_eq!(r.branches.len(), 2);
        verify_refutation(&f, &QdpSet::empty(), &r).unwrap();

        let f = pf("(p | q) & ~p");
        let r = chase_explore(&f, &QdpSet::empty(), Budget::default());
        let Verdict::Witness(i) = r.verdict else { panic!() };
        assert_eq!(r.branches[i].trace.iter().filter(|e| e.rule.starts_with("disj")).count(), 1);
    }

    #[test]
    fn density_refutation() {
        let f = pf("<>p & [][]~p");
        let p: QdpSet = "1->2".parse().unwrap();
        let r = chase_explore(&f, &p, Budget::default());
        assert_eq!(r.verdict, Verdict::AllContradictory);
        verify_refutation(&f, &p, &r).unwrap();
        assert!(verify_refutation(&f, &QdpSet::empty(), &r).is_err());
    }

    #[test]
    fn extract_requires_saturation() {
        let f = pf("p & ~p");
        let r = chase_explore(&f, &QdpSet::empty(), Budget::default());
        assert!(extract_model(&r.branches[0], &f, &QdpSet::empty()).is_err());
    }

    #[test]
    fn per_step_invariants() {
        let f = pf("<>(p & <>q) & [](<>~q | p)");
        let p: QdpSet = "1->2".parse().unwrap();
        let mut ok = true;
        chase_observed(&f, &p, Budget { max_steps: 200, max_branches: 16 }, |v| {
            ok &= classify_shape(v.instance).root() == Some(&Term::constant("a"));
            ok &= check_e_path_bound(v.instance, 2);
            ControlFlow::Continue(())
        });
        assert!(ok);
    }

    #[test]
    fn deterministic_traces() {
        let f = pf("<>(p | q) & [](~p | <>q)");
        let p: QdpSet = "2->3".parse().unwrap();
        let b = Budget { max_steps: 300, max_branches: 16 };
        assert_eq!(chase_explore(&f, &p, b).trace_lines(), chase_explore(&f, &p, b).trace_lines());
    }

    #[test]
    fn trace_line_format() {
        let f = pf("<>p");
        let r = chase_explore(&f, &QdpSet::empty(), Budget::default());
        assert_eq!(
            r.trace_lines(),
            vec!["step=1 branch=0 rule=dia[<>p] at=a disjunct=0 added=R(a,f1);E(a,f1);P_p(f1)"]
        );
    }
}
