//! Disjunctive existential rules: the formula rule set, quasi-density rules,
//! triggers, activity and trigger application.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::ControlFlow;
use std::sync::Arc;

use thiserror::Error;

use crate::formula::{ModalFormula, SubformulaIndex};
use crate::instance::{
    find_homomorphism, for_each_homomorphism, Atom, HomOptions, Instance, Pred, Sym, Term, TermMap,
};
use crate::kripke::{Qdp, QdpSet};

/// Origin of a rule.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RuleTag {
    /// `P_{ψ∧χ}(x) → P_ψ(x) ∧ P_χ(x)`
    Conj(ModalFormula),
    /// `P_{ψ∨χ}(x) → P_ψ(x) ∨ P_χ(x)`
    Disj(ModalFormula),
    /// `P_{□ψ}(x) ∧ R(x,y) → P_ψ(y)`
    Box(ModalFormula),
    /// `P_{◇ψ}(x) → ∃y R(x,y) ∧ E(x,y) ∧ P_ψ(y)`
    Diamond(ModalFormula),
    /// `P_ψ(x) ∧ P_{¬̇ψ}(x) → contr`
    Contr(ModalFormula),
    Qdp(Qdp),
}

impl RuleTag {
    /// Scheduling tier: rules that can only fire finitely often on a fixed
    /// term set come first.
    pub fn tier(&self) -> u8 {
        match self {
            RuleTag::Contr(_) => 0,
            RuleTag::Conj(_) | RuleTag::Box(_) => 1,
            RuleTag::Disj(_) => 2,
            RuleTag::Diamond(_) => 3,
            RuleTag::Qdp(_) => 4,
        }
    }

    pub fn is_qdp(&self) -> bool {
        matches!(self, RuleTag::Qdp(_))
    }
}

impl fmt::Display for RuleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RuleTag::Conj(g) => write!(f, "conj[{g}]"),
            RuleTag::Disj(g) => write!(f, "disj[{g}]"),
            RuleTag::Box(g) => write!(f, "box[{g}]"),
            RuleTag::Diamond(g) => write!(f, "dia[{g}]"),
            RuleTag::Contr(g) => write!(f, "contr[{g}]"),
            RuleTag::Qdp(q) => write!(f, "qdp[{q}]"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Disjunct {
    pub atoms: Vec<Atom>,
    pub existentials: Vec<Term>,
}

/// A rule `body → ⋁ ∃z_i head_i` over variable terms.
#[derive(Clone, Debug)]
pub struct Rule {
    pub body: Vec<Atom>,
    pub head: Vec<Disjunct>,
    pub tag: RuleTag,
    body_inst: Instance,
    /// `body ∪ head_i` per disjunct, for activity checks.
    extended: Vec<Instance>,
    names: BTreeMap<u32, String>,
}

impl PartialEq for Rule {
    fn eq(&self, other: &Self) -> bool {
        self.tag == other.tag && self.body == other.body && self.head == other.head
    }
}

impl Eq for Rule {}

impl Rule {
    fn new(body: Vec<Atom>, head: Vec<Disjunct>, tag: RuleTag, names: BTreeMap<u32, String>) -> Rule {
        let body_inst: Instance = body.iter().cloned().collect();
        let extended = head
            .iter()
            .map(|d| body.iter().chain(&d.atoms).cloned().collect())
            .collect();
        Rule { body, head, tag, body_inst, extended, names }
    }

    pub fn body_instance(&self) -> &Instance {
        &self.body_inst
    }

    /// Body variables in numbering order.
    pub fn body_vars(&self) -> Vec<Term> {
        self.body_inst.terms().cloned().collect()
    }

    pub fn is_datalog(&self) -> bool {
        self.head.iter().all(|d| d.existentials.is_empty())
    }

    pub fn predicates(&self) -> impl Iterator<Item = &Pred> {
        self.body.iter().chain(self.head.iter().flat_map(|d| &d.atoms)).map(|a| &a.pred)
    }

    fn term_name(&self, t: &Term) -> String {
        match t.syms() {
            [Sym::Var(v)] => self.names.get(v).cloned().unwrap_or_else(|| t.to_string()),
            _ => t.to_string(),
        }
    }

    fn atom_text(&self, a: &Atom) -> String {
        if a.args.is_empty() {
            return a.pred.to_string();
        }
        let args: Vec<String> = a.args.iter().map(|t| self.term_name(t)).collect();
        format!("{}({})", a.pred, args.join(","))
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let body: Vec<String> = self.body.iter().map(|a| self.atom_text(a)).collect();
        let head: Vec<String> = self
            .head
            .iter()
            .map(|d| {
                let atoms: Vec<String> = d.atoms.iter().map(|a| self.atom_text(a)).collect();
                if d.existentials.is_empty() {
                    atoms.join(", ")
                } else {
                    let vars: Vec<String> = d.existentials.iter().map(|t| self.term_name(t)).collect();
                    format!("exists {}. {}", vars.join(","), atoms.join(", "))
                }
            })
            .collect();
        write!(f, "{} -> {}.", body.join(", "), head.join(" | "))
    }
}

fn xy_names() -> BTreeMap<u32, String> {
    BTreeMap::from([(0, "x".to_string()), (1, "y".to_string())])
}

/// The rule set `R_φ` in subformula order.
pub fn build_formula_rules(f: &ModalFormula) -> Vec<Rule> {
    let x = Term::var(0);
    let y = Term::var(1);
    let index = SubformulaIndex::new(f);
    let mut rules = Vec::new();
    let single = |atoms: Vec<Atom>| Disjunct { atoms, existentials: vec![] };
    for g in index.iter() {
        let at = |h: &ModalFormula, t: &Term| Atom::label(h, t.clone());
        match g {
            ModalFormula::And(l, r) => rules.push(Rule::new(
                vec![at(g, &x)],
                vec![single(vec![at(l, &x), at(r, &x)])],
                RuleTag::Conj(g.clone()),
                xy_names(),
            )),
            ModalFormula::Or(l, r) => rules.push(Rule::new(
                vec![at(g, &x)],
                vec![single(vec![at(l, &x)]), single(vec![at(r, &x)])],
                RuleTag::Disj(g.clone()),
                xy_names(),
            )),
            ModalFormula::Box(h) => rules.push(Rule::new(
                vec![at(g, &x), Atom::r(x.clone(), y.clone())],
                vec![single(vec![at(h, &y)])],
                RuleTag::Box(g.clone()),
                xy_names(),
            )),
            ModalFormula::Diamond(h) => rules.push(Rule::new(
                vec![at(g, &x)],
                vec![Disjunct {
                    atoms: vec![Atom::r(x.clone(), y.clone()), Atom::e(x.clone(), y.clone()), at(h, &y)],
                    existentials: vec![y.clone()],
                }],
                RuleTag::Diamond(g.clone()),
                xy_names(),
            )),
            ModalFormula::Prop(_) | ModalFormula::NegProp(_) => {}
        }
    }
    for g in index.iter() {
        let neg = g.negate();
        if let (Some(i), Some(j)) = (index.ordinal(g), index.ordinal(&neg)) {
            if i < j {
                rules.push(Rule::new(
                    vec![Atom::label(g, x.clone()), Atom::label(&neg, x.clone())],
                    vec![single(vec![Atom::contr()])],
                    RuleTag::Contr(g.clone()),
                    xy_names(),
                ));
            }
        }
    }
    rules
}

/// The R-chain rule for a quasi-density property.
pub fn qdp_to_rule(q: &Qdp) -> Rule {
    let k = q.k as u32;
    let kp = q.k_plus as u32;
    let mut names = xy_names();
    // body chain x = b_0, b_1, ..., b_k = y
    let body_nodes: Vec<Term> = (0..=k)
        .map(|i| match i {
            0 => Term::var(0),
            i if i == k => Term::var(1),
            i => {
                names.insert(1 + i, if k == 2 { "y1".into() } else { format!("y{i}") });
                Term::var(1 + i)
            }
        })
        .collect();
    let base = k + 1;
    let head_nodes: Vec<Term> = (0..=kp)
        .map(|i| match i {
            0 => Term::var(0),
            i if i == kp => Term::var(1),
            i => {
                let name = if kp == 2 { "z".to_string() } else { format!("z{i}") };
                names.insert(base + i, name);
                Term::var(base + i)
            }
        })
        .collect();
    let chain = |nodes: &[Term]| -> Vec<Atom> {
        nodes.windows(2).map(|w| Atom::r(w[0].clone(), w[1].clone())).collect()
    };
    Rule::new(
        chain(&body_nodes),
        vec![Disjunct { atoms: chain(&head_nodes), existentials: head_nodes[1..kp as usize].to_vec() }],
        RuleTag::Qdp(*q),
        names,
    )
}

/// `R_φ ∪ R_P`.
pub fn build_rule_set(f: &ModalFormula, p: &QdpSet) -> Vec<Arc<Rule>> {
    build_formula_rules(f)
        .into_iter()
        .chain(p.iter().map(qdp_to_rule))
        .map(Arc::new)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trigger {
    pub rule: Arc<Rule>,
    /// Images of the body variables.
    pub assignment: TermMap,
}

impl Trigger {
    /// Terms assigned to the body variables, in variable order.
    pub fn terms(&self) -> Vec<&Term> {
        self.assignment.values().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuleError {
    #[error("trigger for {0} is not active")]
    Inactive(String),
}

/// Whether some head disjunct already extends the trigger into `inst`.
pub fn is_satisfied(inst: &Instance, trig: &Trigger) -> bool {
    trig.rule
        .extended
        .iter()
        .any(|ext| find_homomorphism(ext, inst, Some(&trig.assignment)).is_some())
}

pub fn is_active(inst: &Instance, trig: &Trigger) -> bool {
    !is_satisfied(inst, trig)
}

/// Every body homomorphism of `rule` into `inst`, optionally seeded.
pub fn for_each_trigger(
    inst: &Instance,
    rule: &Arc<Rule>,
    seed: Option<&TermMap>,
    mut visit: impl FnMut(Trigger) -> ControlFlow<()>,
) {
    for_each_homomorphism(&rule.body_inst, inst, HomOptions { seed, ..Default::default() }, |h| {
        visit(Trigger { rule: rule.clone(), assignment: h.clone() })
    });
}

/// All active triggers ordered by rule tag, then assigned terms.
pub fn find_active_triggers(inst: &Instance, rules: &[Arc<Rule>]) -> Vec<Trigger> {
    let mut out = Vec::new();
    for rule in rules {
        for_each_trigger(inst, rule, None, |t| {
            if is_active(inst, &t) {
                out.push(t);
            }
            ControlFlow::Continue(())
        });
    }
    out.sort_by(|a, b| {
        (&a.rule.tag, a.terms()).cmp(&(&b.rule.tag, b.terms()))
    });
    out
}

/// Atoms added by choosing `disjunct`, with existentials mapped to fresh
/// terms numbered from `*next_fresh` onwards.
pub fn disjunct_atoms(trig: &Trigger, disjunct: usize, next_fresh: &mut u32) -> Vec<Atom> {
    let d = &trig.rule.head[disjunct];
    let mut h = trig.assignment.clone();
    for z in &d.existentials {
        h.insert(z.clone(), Term::fresh(*next_fresh));
        *next_fresh += 1;
    }
    d.atoms.iter().map(|a| a.map(|t| h[t].clone())).collect()
}

/// One result per head disjunct; fresh terms continue after the largest
/// fresh symbol of `inst`.
pub fn apply_trigger(inst: &Instance, trig: &Trigger) -> Result<Vec<Instance>, RuleError> {
    if !is_active(inst, trig) {
        return Err(RuleError::Inactive(trig.rule.tag.to_string()));
    }
    let start = inst.max_fresh().map_or(1, |m| m + 1);
    Ok((0..trig.rule.head.len())
        .map(|d| {
            let mut next = start;
            let mut out = inst.clone();
            for a in disjunct_atoms(trig, d, &mut next) {
                out.insert(a);
            }
            out
        })
        .collect())
}
