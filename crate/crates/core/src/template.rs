//! Templates: finite multi-trees that are unravel fixpoints, P-compliant up
//! to depth `2n`, models of `R_φ` and labeled with `P_φ` at the root.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::ops::ControlFlow;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chase::{chase_observed, BranchStatus, Budget, ChaseBranch, Verdict};
use crate::formula::{ModalFormula, SubformulaIndex};
use crate::instance::{
    bfs_depths, classify_shape, find_homomorphism_with, is_homomorphism, is_isomorphic, label_name, HomOptions,
    Instance, InstanceJson, Term, TermMap, EDGE_E, EDGE_R,
};
use crate::kripke::{Qdp, QdpSet};
use crate::rules::{build_formula_rules, find_active_triggers, Rule};
use crate::treeops::{
    check_compliance, embed, is_partial_isomorphism, is_proper_embedding_literal, r_descendants, source,
    subtree_terms, tree_isomorphism, unravel_id, unravel_in, unravel_literal, ComplianceWitness, NodeId,
    Parameters, TreeArena, TreeNode,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Error)]
#[error("property {property}: {detail}")]
pub struct Violation {
    pub property: u8,
    pub detail: String,
}

impl Violation {
    fn new(property: u8, detail: impl Into<String>) -> Self {
        Violation { property, detail: detail.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Certificate {
    /// Isomorphism from the tree onto its `unravel_N`.
    pub fixpoint_iso: TermMap,
    /// Witnesses for every term at depth at most `2n` and every property.
    pub compliance: Vec<ComplianceWitness>,
    /// Number of rules of `R_φ` checked to have no active trigger.
    pub rules_checked: usize,
    pub root: Term,
    pub root_label: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    pub tree: Instance,
    pub params: Parameters,
    pub certificate: Certificate,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("branch {0} is not saturated")]
    NotSaturated(usize),
    #[error("unravel failed: {0}")]
    Unravel(String),
    #[error("{0}")]
    Violation(Violation),
    #[error("invalid template JSON: {0}")]
    Json(String),
}

fn formula_rules(f: &ModalFormula) -> Vec<Arc<Rule>> {
    build_formula_rules(f).into_iter().map(Arc::new).collect()
}

fn check_rules(tree: &Instance, f: &ModalFormula) -> Result<usize, Violation> {
    let rules = formula_rules(f);
    if let Some(t) = find_active_triggers(tree, &rules).first() {
        let at: Vec<String> = t.terms().iter().map(|x| x.to_string()).collect();
        return Err(Violation::new(3, format!("active trigger of {} at {}", t.rule.tag, at.join(","))));
    }
    Ok(rules.len())
}

fn check_root_label(tree: &Instance, root: &Term, f: &ModalFormula) -> Result<String, Violation> {
    let label = label_name(f);
    if tree.has_label(root, &label) {
        Ok(label.to_string())
    } else {
        Err(Violation::new(4, format!("root {root} lacks {label}")))
    }
}

fn check_fixpoint(tree: &Instance, root: &Term, big_n: usize) -> Result<TermMap, Violation> {
    let mut arena = TreeArena::new();
    let target = arena.shape_id(tree, root);
    let u = unravel_in(tree, big_n, &mut arena).map_err(|e| Violation::new(1, e.to_string()))?;
    if u.id != Some(target) {
        return Err(Violation::new(
            1,
            format!(
                "unravel_{big_n} has {} terms and {} atoms, not isomorphic to the tree ({} terms, {} atoms)",
                u.instance.term_count(),
                u.instance.len(),
                tree.term_count(),
                tree.len()
            ),
        ));
    }
    tree_isomorphism(tree, &u.instance).ok_or_else(|| Violation::new(1, "isomorphism construction failed"))
}

fn check_compliance_to_depth(
    tree: &Instance,
    root: &Term,
    p: &QdpSet,
    max_depth: usize,
) -> Result<Vec<ComplianceWitness>, Violation> {
    let mut out = Vec::new();
    if p.is_empty() {
        return Ok(out);
    }
    let depths = bfs_depths(tree, root);
    for (t, d) in &depths {
        if *d > max_depth {
            continue;
        }
        for q in p.iter() {
            match check_compliance(tree, t, q) {
                Some(ws) => out.extend(ws),
                None => return Err(Violation::new(2, format!("term {t} is not compliant with {q}"))),
            }
        }
    }
    Ok(out)
}

/// Checks the multi-tree shape and then properties 1 to 4 in order.
pub fn verify_template(tree: &Instance, f: &ModalFormula, p: &QdpSet) -> Result<Template, Violation> {
    let params = Parameters::new(f, p);
    if tree.term_count() == 0 || !classify_shape(tree).is_multi_tree() {
        return Err(Violation::new(1, "not a multi-tree"));
    }
    let root = source(tree).map_err(|e| Violation::new(1, e.to_string()))?;
    let fixpoint_iso = check_fixpoint(tree, &root, params.big_n)?;
    let compliance = check_compliance_to_depth(tree, &root, p, 2 * params.n)?;
    let rules_checked = check_rules(tree, f)?;
    let root_label = check_root_label(tree, &root, f)?;
    Ok(Template {
        tree: tree.clone(),
        params,
        certificate: Certificate { fixpoint_iso, compliance, rules_checked, root, root_label },
    })
}

/// Cheap properties first; used to filter search candidates.
fn verify_candidate(tree: &Instance, f: &ModalFormula, p: &QdpSet) -> Option<Template> {
    let root = source(tree).ok()?;
    if tree.has_contr() || check_root_label(tree, &root, f).is_err() || check_rules(tree, f).is_err() {
        return None;
    }
    verify_template(tree, f, p).ok()
}

/// Re-checks a certificate through independent routes: the literal
/// unravel with the generic core and isomorphism test, and literal
/// properness checks for every compliance witness.
pub fn reverify(template: &Template, f: &ModalFormula, p: &QdpSet) -> Result<(), String> {
    let tree = &template.tree;
    let params = Parameters::new(f, p);
    if params != template.params {
        return Err(format!("parameters {:?} do not match {:?}", template.params, params));
    }
    if !classify_shape(tree).is_multi_tree() {
        return Err("not a multi-tree".into());
    }
    let cert = &template.certificate;
    let root = source(tree).map_err(|e| e.to_string())?;
    if root != cert.root {
        return Err(format!("certificate root {} is not the tree root {root}", cert.root));
    }

    let lit = unravel_literal(tree, params.big_n).map_err(|e| e.to_string())?;
    if !is_isomorphic(&lit, tree) {
        return Err("literal unravel is not isomorphic to the tree".into());
    }
    let fused = unravel_in(tree, params.big_n, &mut TreeArena::new()).map_err(|e| e.to_string())?.instance;
    let iso = &cert.fixpoint_iso;
    let image: BTreeSet<&Term> = iso.values().collect();
    if iso.len() != tree.term_count()
        || image.len() != iso.len()
        || fused.term_count() != tree.term_count()
        || fused.len() != tree.len()
        || !is_homomorphism(tree, &fused, iso)
    {
        return Err("fixpoint isomorphism does not check".into());
    }

    if !p.is_empty() {
        let depths = bfs_depths(tree, &root);
        for (t, d) in &depths {
            if *d > 2 * params.n {
                continue;
            }
            for q in p.iter() {
                for t_prime in r_descendants(tree, t, q.k) {
                    let w = cert
                        .compliance
                        .iter()
                        .find(|w| w.qdp == *q && &w.t == t && w.t_prime == t_prime)
                        .ok_or_else(|| format!("no witness for {t}, {q}, {t_prime}"))?;
                    if !r_descendants(tree, t, q.k_plus).contains(&w.t_plus) {
                        return Err(format!("{} is not at distance {} from {t}", w.t_plus, q.k_plus));
                    }
                    if !is_partial_isomorphism(tree, &w.iso)
                        || embed(tree, &w.t_prime, &w.t_plus, &w.iso).is_err()
                        || !is_proper_embedding_literal(tree, &w.t_prime, &w.t_plus, &w.iso)
                    {
                        return Err(format!("witness for {t}, {q}, {t_prime} is not a proper embedding"));
                    }
                }
            }
        }
    }

    let rules = formula_rules(f);
    if !find_active_triggers(tree, &rules).is_empty() {
        return Err("an R_φ trigger is active".into());
    }
    if !tree.has_label(&root, &label_name(f)) {
        return Err("root lacks the formula label".into());
    }
    Ok(())
}

/// `unravel_N` of a saturated branch, verified as a template.
pub fn template_from_chase(branch: &ChaseBranch, f: &ModalFormula, p: &QdpSet) -> Result<Template, TemplateError> {
    if branch.status != BranchStatus::Saturated {
        return Err(TemplateError::NotSaturated(branch.id));
    }
    let params = Parameters::new(f, p);
    let u = unravel_in(&branch.instance, params.big_n, &mut TreeArena::new())
        .map_err(|e| TemplateError::Unravel(e.to_string()))?;
    verify_template(&u.instance, f, p).map_err(TemplateError::Violation)
}

/// A homomorphism from `unravel_n(inst)` into the template tree that maps
/// all copies of a source term to terms with equal labels.
pub fn check_follows(inst: &Instance, template: &Template) -> Option<TermMap> {
    let u = unravel_in(inst, template.params.n, &mut TreeArena::new()).ok()?;
    let mut classes: BTreeMap<&Term, Vec<Term>> = BTreeMap::new();
    for (w, src) in &u.origin {
        classes.entry(src).or_default().push(w.clone());
    }
    let classes: Vec<Vec<Term>> = classes.into_values().filter(|c| c.len() > 1).collect();
    find_homomorphism_with(
        &u.instance,
        &template.tree,
        HomOptions { classes: Some(&classes), ..Default::default() },
    )
}

// ---------------------------------------------------------------------------
// JSON

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WitnessJson {
    pub qdp: String,
    pub t: String,
    pub t_prime: String,
    pub t_plus: String,
    pub iso: Vec<(String, String)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CertificateJson {
    pub fixpoint_iso: Vec<(String, String)>,
    pub compliance: Vec<WitnessJson>,
    pub rules_checked: usize,
    pub root: String,
    pub root_label: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TemplateJson {
    #[serde(flatten)]
    pub instance: InstanceJson,
    pub params: Parameters,
    pub certificate: CertificateJson,
}

fn map_json(m: &TermMap) -> Vec<(String, String)> {
    m.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
}

fn map_from_json(v: &[(String, String)]) -> Result<TermMap, TemplateError> {
    let term = |s: &str| Term::parse(s).map_err(|e| TemplateError::Json(e.to_string()));
    v.iter().map(|(a, b)| Ok((term(a)?, term(b)?))).collect()
}

impl Template {
    pub fn to_json_value(&self) -> TemplateJson {
        let c = &self.certificate;
        TemplateJson {
            instance: self.tree.to_json_value(),
            params: self.params,
            certificate: CertificateJson {
                fixpoint_iso: map_json(&c.fixpoint_iso),
                compliance: c
                    .compliance
                    .iter()
                    .map(|w| WitnessJson {
                        qdp: w.qdp.to_string(),
                        t: w.t.to_string(),
                        t_prime: w.t_prime.to_string(),
                        t_plus: w.t_plus.to_string(),
                        iso: map_json(&w.iso),
                    })
                    .collect(),
                rules_checked: c.rules_checked,
                root: c.root.to_string(),
                root_label: c.root_label.clone(),
            },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_json_value()).expect("serializable")
    }

    pub fn from_json_value(v: &TemplateJson) -> Result<Template, TemplateError> {
        let err = |e: String| TemplateError::Json(e);
        let tree = Instance::from_json_value(&v.instance).map_err(|e| err(e.to_string()))?;
        let term = |s: &str| Term::parse(s).map_err(|e| err(e.to_string()));
        let compliance = v
            .certificate
            .compliance
            .iter()
            .map(|w| {
                Ok(ComplianceWitness {
                    qdp: w.qdp.parse::<Qdp>().map_err(|e| err(e.to_string()))?,
                    t: term(&w.t)?,
                    t_prime: term(&w.t_prime)?,
                    t_plus: term(&w.t_plus)?,
                    iso: map_from_json(&w.iso)?,
                })
            })
            .collect::<Result<Vec<_>, TemplateError>>()?;
        Ok(Template {
            tree,
            params: v.params,
            certificate: Certificate {
                fixpoint_iso: map_from_json(&v.certificate.fixpoint_iso)?,
                compliance,
                rules_checked: v.certificate.rules_checked,
                root: term(&v.certificate.root)?,
                root_label: v.certificate.root_label.clone(),
            },
        })
    }

    pub fn from_json(text: &str) -> Result<Template, TemplateError> {
        let v: TemplateJson = serde_json::from_str(text).map_err(|e| TemplateError::Json(e.to_string()))?;
        Template::from_json_value(&v)
    }
}

// ---------------------------------------------------------------------------
// Search

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TemplateSearchBudget {
    /// Maximal number of children per node in enumerated trees.
    pub max_branching: usize,
    /// Work units (enumeration steps and candidate checks) for the
    /// enumeration stage.
    pub max_candidates: usize,
    /// Depth cap; `None` means `N + n`. Larger values are clamped.
    pub depth_cap: Option<usize>,
    /// Budget of the chase that supplies prefix candidates.
    pub chase: Budget,
    /// Steps between two prefix checkpoints of that chase.
    pub checkpoint_every: usize,
}

impl TemplateSearchBudget {
    /// Default branching cap: `2^s` with `s` the number of unary
    /// predicates of `R_φ`.
    pub fn for_formula(f: &ModalFormula) -> Self {
        TemplateSearchBudget {
            max_branching: default_branching(f),
            max_candidates: 200_000,
            depth_cap: None,
            chase: Budget { max_steps: 2000, max_branches: 64 },
            checkpoint_every: 32,
        }
    }

    pub fn depth(&self, f: &ModalFormula, p: &QdpSet) -> usize {
        let params = Parameters::new(f, p);
        let bound = params.big_n + params.n;
        self.depth_cap.map_or(bound, |d| d.min(bound))
    }
}

pub fn default_branching(f: &ModalFormula) -> usize {
    let s = SubformulaIndex::new(f).len();
    1usize << s.min(20)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStage {
    LocalFeasibility,
    ChasePrefix,
    Enumeration,
}

#[derive(Clone, Debug)]
pub enum SearchOutcome {
    Found(Box<Template>, SearchStage),
    /// No template exists within the bounded space; the stage that showed it.
    Exhausted(SearchStage),
    BudgetExhausted,
}

impl SearchOutcome {
    pub fn template(&self) -> Option<&Template> {
        match self {
            SearchOutcome::Found(t, _) => Some(t),
            _ => None,
        }
    }
}

pub fn search_template(f: &ModalFormula, p: &QdpSet, budget: &TemplateSearchBudget) -> SearchOutcome {
    let depth = budget.depth(f, p);
    if !locally_feasible(f, depth) {
        return SearchOutcome::Exhausted(SearchStage::LocalFeasibility);
    }
    match prefix_stage(f, p, budget) {
        Some(out) => out,
        None => enumerate_stage(f, p, budget, depth),
    }
}

/// Whether a tree of height at most `depth` exists whose labels are closed
/// under the rules of `R_φ`, contain no complementary pair and put `P_φ` at
/// the root. Every contr-free template is such a tree.
pub fn locally_feasible(f: &ModalFormula, depth: usize) -> bool {
    let index = SubformulaIndex::new(f);
    let mut memo = HashMap::new();
    let root: BTreeSet<usize> = [index.ordinal(f).expect("root")].into();
    feasible(&index, root, depth, &mut memo)
}

fn feasible(
    index: &SubformulaIndex,
    required: BTreeSet<usize>,
    h: usize,
    memo: &mut HashMap<(BTreeSet<usize>, usize), bool>,
) -> bool {
    if let Some(&r) = memo.get(&(required.clone(), h)) {
        return r;
    }
    let mut result = false;
    for closed in closures(index, &required) {
        let boxes: BTreeSet<usize> = closed
            .iter()
            .filter_map(|&i| match index.get(i) {
                ModalFormula::Box(g) => index.ordinal(g),
                _ => None,
            })
            .collect();
        let diamonds: Vec<usize> = closed
            .iter()
            .filter_map(|&i| match index.get(i) {
                ModalFormula::Diamond(g) => index.ordinal(g),
                _ => None,
            })
            .collect();
        let ok = diamonds.iter().all(|&g| {
            h > 0 && {
                let mut child = boxes.clone();
                child.insert(g);
                feasible(index, child, h - 1, memo)
            }
        });
        if ok {
            result = true;
            break;
        }
    }
    memo.insert((required, h), result);
    result
}

/// Minimal consistent supersets closed under conjunction and (by choice)
/// disjunction.
fn closures(index: &SubformulaIndex, required: &BTreeSet<usize>) -> Vec<BTreeSet<usize>> {
    fn go(index: &SubformulaIndex, set: BTreeSet<usize>, todo: Vec<usize>, out: &mut Vec<BTreeSet<usize>>) {
        let mut set = set;
        let mut todo = todo;
        while let Some(i) = todo.pop() {
            let g = index.get(i);
            if let Some(j) = index.ordinal(&g.negate()) {
                if set.contains(&j) {
                    return;
                }
            }
            match g {
                ModalFormula::And(l, r) => {
                    for h in [l, r] {
                        let j = index.ordinal(h).expect("subformula");
                        if set.insert(j) {
                            todo.push(j);
                        }
                    }
                }
                ModalFormula::Or(l, r) => {
                    let (a, b) = (index.ordinal(l).expect("subformula"), index.ordinal(r).expect("subformula"));
                    if set.contains(&a) || set.contains(&b) {
                        continue;
                    }
                    for j in [a, b] {
                        let mut s = set.clone();
                        s.insert(j);
                        let mut t = todo.clone();
                        t.push(j);
                        go(index, s, t, out);
                    }
                    return;
                }
                _ => {}
            }
        }
        out.push(set);
    }
    let mut out = Vec::new();
    go(index, required.clone(), required.iter().copied().collect(), &mut out);
    out
}

fn prefix_stage(f: &ModalFormula, p: &QdpSet, budget: &TemplateSearchBudget) -> Option<SearchOutcome> {
    let params = Parameters::new(f, p);
    let mut arena = TreeArena::new();
    let mut seen: HashSet<NodeId> = HashSet::new();
    let mut found = None;
    let every = budget.checkpoint_every.max(1);
    let result = chase_observed(f, p, budget.chase, |view| {
        let s = view.step;
        if view.instance.has_contr() || !(s.is_power_of_two() || s % every == 0) {
            return ControlFlow::Continue(());
        }
        let Ok(id) = unravel_id(view.instance, params.big_n, &mut arena) else {
            return ControlFlow::Continue(());
        };
        if !seen.insert(id) {
            return ControlFlow::Continue(());
        }
        let Ok(u) = unravel_in(view.instance, params.big_n, &mut arena) else {
            return ControlFlow::Continue(());
        };
        match verify_candidate(&u.instance, f, p) {
            Some(t) => {
                found = Some(t);
                ControlFlow::Break(())
            }
            None => ControlFlow::Continue(()),
        }
    });
    if let Some(t) = found {
        return Some(SearchOutcome::Found(Box::new(t), SearchStage::ChasePrefix));
    }
    match result.verdict {
        Verdict::Witness(_) => {
            let branch = result.witness().expect("witness");
            template_from_chase(branch, f, p)
                .ok()
                .map(|t| SearchOutcome::Found(Box::new(t), SearchStage::ChasePrefix))
        }
        Verdict::AllContradictory => Some(SearchOutcome::Exhausted(SearchStage::ChasePrefix)),
        Verdict::BudgetExhausted => None,
    }
}

/// Closed, consistent label sets as bit masks over subformula ordinals.
fn closed_label_sets(index: &SubformulaIndex) -> Option<Vec<u32>> {
    let s = index.len();
    if s > 20 {
        return None;
    }
    let ord = |g: &ModalFormula| index.ordinal(g).map(|i| 1u32 << i);
    let mut out = Vec::new();
    'masks: for mask in 0u32..(1 << s) {
        for i in 0..s {
            if mask & (1 << i) == 0 {
                continue;
            }
            let g = index.get(i);
            if let Some(n) = ord(&g.negate()) {
                if mask & n != 0 {
                    continue 'masks;
                }
            }
            let ok = match g {
                ModalFormula::And(l, r) => {
                    let both = ord(l).unwrap() | ord(r).unwrap();
                    mask & both == both
                }
                ModalFormula::Or(l, r) => mask & (ord(l).unwrap() | ord(r).unwrap()) != 0,
                _ => true,
            };
            if !ok {
                continue 'masks;
            }
        }
        out.push(mask);
    }
    Some(out)
}

struct Enumerator<'a> {
    f: &'a ModalFormula,
    p: &'a QdpSet,
    index: SubformulaIndex,
    arena: TreeArena,
    masks: HashMap<NodeId, u32>,
    heights: HashMap<NodeId, usize>,
    work: usize,
    budget: &'a TemplateSearchBudget,
}

enum Halt {
    Found(Template),
    Budget,
}

impl Enumerator<'_> {
    fn tick(&mut self) -> Result<(), Halt> {
        self.work += 1;
        if self.work > self.budget.max_candidates {
            Err(Halt::Budget)
        } else {
            Ok(())
        }
    }

    fn boxes(&self, mask: u32) -> u32 {
        self.modal_targets(mask, true)
    }

    fn modal_targets(&self, mask: u32, boxes: bool) -> u32 {
        let mut out = 0;
        for i in 0..self.index.len() {
            if mask & (1 << i) == 0 {
                continue;
            }
            match (self.index.get(i), boxes) {
                (ModalFormula::Box(g), true) | (ModalFormula::Diamond(g), false) => {
                    out |= 1 << self.index.ordinal(g).unwrap();
                }
                _ => {}
            }
        }
        out
    }

    fn intern(&mut self, mask: u32, children: Vec<(u8, NodeId)>, height: usize) -> NodeId {
        let labels = (0..self.index.len() as u32).filter(|i| mask & (1 << i) != 0).collect();
        let id = self.arena.intern(TreeNode { labels, children });
        self.masks.insert(id, mask);
        self.heights.insert(id, height);
        id
    }

    /// Antichains of `items` (by index) that satisfy the diamond demands.
    #[allow(clippy::too_many_arguments)]
    fn antichains(
        &mut self,
        items: &[(u8, NodeId)],
        start: usize,
        chosen: &mut Vec<(u8, NodeId)>,
        demands: u32,
        need_height: usize,
        out: &mut Vec<Vec<(u8, NodeId)>>,
    ) -> Result<(), Halt> {
        self.tick()?;
        let covered = chosen
            .iter()
            .filter(|(b, _)| *b == EDGE_R | EDGE_E)
            .fold(0u32, |acc, (_, c)| acc | self.masks[c]);
        let tall = chosen.iter().any(|(_, c)| self.heights[c] + 1 == need_height);
        if demands & !covered == 0 && tall {
            out.push(chosen.clone());
        }
        if chosen.len() == self.budget.max_branching {
            return Ok(());
        }
        for j in start..items.len() {
            let (b, c) = items[j];
            let mut compatible = true;
            for &(b2, c2) in chosen.iter() {
                if (b & b2 == b && self.arena.hom(c, c2)) || (b & b2 == b2 && self.arena.hom(c2, c)) {
                    compatible = false;
                    break;
                }
            }
            if !compatible {
                continue;
            }
            chosen.push((b, c));
            self.antichains(items, j + 1, chosen, demands, need_height, out)?;
            chosen.pop();
        }
        Ok(())
    }

    fn check_root(&mut self, id: NodeId, root_bit: u32) -> Result<(), Halt> {
        if self.masks[&id] & root_bit == 0 {
            return Ok(());
        }
        self.tick()?;
        let mut tree = Instance::new();
        let mut next = 1;
        self.arena.materialize(id, &Term::constant("a"), &mut next, &mut tree);
        match verify_template(&tree, self.f, self.p) {
            Ok(t) => Err(Halt::Found(t)),
            Err(_) => Ok(()),
        }
    }

    fn run(&mut self, depth: usize) -> Result<(), Halt> {
        let Some(sets) = closed_label_sets(&self.index) else {
            return Err(Halt::Budget);
        };
        let root_bit = 1u32 << self.index.ordinal(self.f).unwrap();
        let mut all: Vec<NodeId> = Vec::new();
        for &m in &sets {
            if self.modal_targets(m, false) == 0 {
                let id = self.intern(m, Vec::new(), 0);
                all.push(id);
                self.check_root(id, root_bit)?;
            }
        }
        for h in 1..=depth {
            let mut level = Vec::new();
            for &m in &sets {
                if h == depth && m & root_bit == 0 {
                    continue;
                }
                let boxes = self.boxes(m);
                let demands = self.modal_targets(m, false);
                let mut items = Vec::new();
                for &c in &all {
                    for bits in [EDGE_R | EDGE_E, EDGE_R, EDGE_E] {
                        if bits & EDGE_R != 0 && self.masks[&c] & boxes != boxes {
                            continue;
                        }
                        items.push((bits, c));
                    }
                }
                let mut found = Vec::new();
                self.antichains(&items, 0, &mut Vec::new(), demands, h, &mut found)?;
                for children in found {
                    let id = self.intern(m, children, h);
                    level.push(id);
                    self.check_root(id, root_bit)?;
                }
            }
            all.extend(level);
        }
        Ok(())
    }
}

fn enumerate_stage(f: &ModalFormula, p: &QdpSet, budget: &TemplateSearchBudget, depth: usize) -> SearchOutcome {
    let index = SubformulaIndex::new(f);
    let mut arena = TreeArena::new();
    for g in index.iter() {
        arena.label_id(&label_name(g));
    }
    let mut e = Enumerator {
        f,
        p,
        index,
        arena,
        masks: HashMap::new(),
        heights: HashMap::new(),
        work: 0,
        budget,
    };
    match e.run(depth) {
        Ok(()) => SearchOutcome::Exhausted(SearchStage::Enumeration),
        Err(Halt::Found(t)) => SearchOutcome::Found(Box::new(t), SearchStage::Enumeration),
        Err(Halt::Budget) => SearchOutcome::BudgetExhausted,
    }
}

/// Terms of the subtree at `t` in a template (re-exported for callers that
/// inspect compliance witnesses).
pub fn witness_subtree(template: &Template, t: &Term) -> BTreeSet<Term> {
    subtree_terms(&template.tree, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chase::chase_explore;
    use crate::formula::parse_formula;
    use crate::instance::Atom;

    fn f(s: &str) -> ModalFormula {
        parse_formula(s).unwrap()
    }

    fn t(s: &str) -> Term {
        Term::parse(s).unwrap()
    }

    #[test]
    fn single_node_template() {
        let tree: Instance = [Atom::unary("P_p", t("a"))].into_iter().collect();
        let tpl = verify_template(&tree, &f("p"), &QdpSet::empty()).unwrap();
        assert_eq!(tpl.params.big_n, 0);
        reverify(&tpl, &f("p"), &QdpSet::empty()).unwrap();
    }

    #[test]
    fn missing_diamond_witness() {
        let tree: Instance = [Atom::unary("P_<>p", t("a"))].into_iter().collect();
        let v = verify_template(&tree, &f("<>p"), &QdpSet::empty()).unwrap_err();
        assert_eq!(v.property, 3);
    }

    #[test]
    fn density_needs_compliance() {
        let p: QdpSet = "1->2".parse().unwrap();
        let tree: Instance = [
            Atom::unary("P_<>p", t("a")),
            Atom::r(t("a"), t("a.f1")),
            Atom::e(t("a"), t("a.f1")),
            Atom::unary("P_p", t("a.f1")),
        ]
        .into_iter()
        .collect();
        assert_eq!(verify_template(&tree, &f("<>p"), &p).unwrap_err().property, 2);
        match search_template(&f("<>p"), &p, &TemplateSearchBudget::for_formula(&f("<>p"))) {
            SearchOutcome::Found(tpl, _) => reverify(&tpl, &f("<>p"), &p).unwrap(),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn from_chase_round_trip() {
        for (s, p) in [("p", ""), ("<>p", ""), ("<>p & [](q | r)", ""), ("<>p", "2->3")] {
            let p: QdpSet = p.parse().unwrap();
            let res = chase_explore(&f(s), &p, Budget::default());
            let tpl = template_from_chase(res.witness().unwrap(), &f(s), &p).unwrap();
            reverify(&tpl, &f(s), &p).unwrap();
            let back = Template::from_json(&tpl.to_json()).unwrap();
            assert_eq!(back, tpl);
        }
        let res = chase_explore(&f("<>p"), &QdpSet::empty(), Budget::default());
        assert_eq!(res.witness().unwrap().instance.term_count(), 2);
    }

    #[test]
    fn contradictory_branch_rejected() {
        let res = chase_explore(&f("p & ~p"), &QdpSet::empty(), Budget::default());
        assert!(matches!(
            template_from_chase(&res.branches[0], &f("p & ~p"), &QdpSet::empty()),
            Err(TemplateError::NotSaturated(_))
        ));
    }

    #[test]
    fn search_examples() {
        let k = QdpSet::empty();
        for s in ["p & ~p", "<>p & []~p"] {
            let g = f(s);
            assert!(matches!(
                search_template(&g, &k, &TemplateSearchBudget::for_formula(&g)),
                SearchOutcome::Exhausted(_)
            ));
        }
        let g = f("p");
        assert!(search_template(&g, &k, &TemplateSearchBudget::for_formula(&g)).template().is_some());
    }

    #[test]
    fn enumeration_finds_small_templates() {
        let g = f("<>p & <>~p");
        let k = QdpSet::empty();
        let budget = TemplateSearchBudget::for_formula(&g);
        match enumerate_stage(&g, &k, &budget, budget.depth(&g, &k)) {
            SearchOutcome::Found(tpl, SearchStage::Enumeration) => reverify(&tpl, &g, &k).unwrap(),
            other => panic!("{other:?}"),
        }
        let g = f("p & ~p");
        let budget = TemplateSearchBudget::for_formula(&g);
        assert!(matches!(
            enumerate_stage(&g, &k, &budget, budget.depth(&g, &k)),
            SearchOutcome::Exhausted(SearchStage::Enumeration)
        ));
        let g = f("<>(p & ~p)");
        let budget = TemplateSearchBudget { max_branching: 2, ..TemplateSearchBudget::for_formula(&g) };
        assert!(matches!(
            enumerate_stage(&g, &k, &budget, 2),
            SearchOutcome::Exhausted(SearchStage::Enumeration)
        ));
    }

    #[test]
    fn follows_database_and_class_condition() {
        let g = f("<>p");
        let k = QdpSet::empty();
        let res = chase_explore(&g, &k, Budget::default());
        let tpl = template_from_chase(res.witness().unwrap(), &g, &k).unwrap();
        let db = crate::chase::database(&g);
        let h = check_follows(&db, &tpl).unwrap();
        assert_eq!(h[&t("a")], t("a"));

        // the two copies of d reach targets with different labels
        let g = f("<>(q & <>s) & <>(r & <>~s)");
        let res = chase_explore(&g, &k, Budget::default());
        let tpl = template_from_chase(res.witness().unwrap(), &g, &k).unwrap();
        let inst: Instance = [
            Atom::label(&g, t("a")),
            Atom::r(t("a"), t("b")),
            Atom::r(t("a"), t("c")),
            Atom::unary("P_q", t("b")),
            Atom::unary("P_r", t("c")),
            Atom::r(t("b"), t("d")),
            Atom::r(t("c"), t("d")),
        ]
        .into_iter()
        .collect();
        let u = crate::treeops::unravel(&inst, 2).unwrap();
        assert!(crate::instance::find_homomorphism(&u, &tpl.tree, None).is_some());
        assert!(check_follows(&inst, &tpl).is_none());
    }
}
