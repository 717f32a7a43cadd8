//! Unfolding, trimming and unraveling of rooted instances, embeddings and
//! compliance with quasi-density properties.
//!
//! Two routes compute `unravel_i = core ∘ trim_i ∘ unfold`:
//!
//! * [`unravel`] fuses the three steps. Nodes of the trimmed unfolding are
//!   identified by `(source term, depth)` (or "below the trim depth on an
//!   `E` chain"), and every such node is hash-consed into a [`TreeArena`]
//!   after coring its children. Cyclic inputs are fine as long as no `E`
//!   cycle is reachable, since the trimmed unfolding stays finite.
//! * [`unravel_literal`] materializes the unfolding word by word, trims it
//!   and runs the generic core. It is used to re-check certificates.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use thiserror::Error;

use crate::formula::ModalFormula;
use crate::instance::{classify_shape, core, Atom, Instance, Shape, Term, TermMap, EDGE_E, EDGE_R};
use crate::kripke::{Qdp, QdpSet};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TreeError {
    #[error("instance is not a rooted DAG")]
    NotRootedDag,
    #[error("instance has no unique root")]
    NoRoot,
    #[error("instance is not a multi-tree")]
    NotMultiTree,
    #[error("an infinite E-path is reachable")]
    InfiniteEPath,
    #[error("map is not a partial isomorphism: {0}")]
    NotPartialIso(String),
    #[error("term {0} does not occur")]
    MissingTerm(String),
}

/// `n = md(φ)`, `K = max k_plus`, `N = 4n + K`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Parameters {
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N")]
    pub big_n: usize,
}

impl Parameters {
    pub fn new(f: &ModalFormula, p: &QdpSet) -> Self {
        let n = f.modal_depth();
        let k = p.max_k_plus();
        Parameters { n, k, big_n: 4 * n + k }
    }
}

/// The unique term without incoming atoms.
pub fn source(inst: &Instance) -> Result<Term, TreeError> {
    let mut it = inst.terms().filter(|t| inst.predecessors(t).is_empty());
    match (it.next(), it.next()) {
        (Some(r), None) => Ok(r.clone()),
        _ => Err(TreeError::NoRoot),
    }
}

fn with_contr(mut inst: Instance, from: &Instance) -> Instance {
    if from.has_contr() {
        inst.insert(Atom::contr());
    }
    inst
}

fn copy_labels(inst: &Instance, from: &Term, to: &Term, out: &mut Instance) {
    for l in inst.labels(from) {
        out.insert(Atom::unary(l, to.clone()));
    }
}

fn edge_atoms(bits: u8, s: &Term, t: &Term, out: &mut Instance) {
    if bits & EDGE_R != 0 {
        out.insert(Atom::r(s.clone(), t.clone()));
    }
    if bits & EDGE_E != 0 {
        out.insert(Atom::e(s.clone(), t.clone()));
    }
}

/// Literal unfolding of a rooted DAG: terms are the words of root paths.
pub fn unfold(inst: &Instance) -> Result<Instance, TreeError> {
    if inst.term_count() == 0 {
        return Ok(inst.clone());
    }
    let root = match classify_shape(inst) {
        Shape::Other => return Err(TreeError::NotRootedDag),
        s => s.root().cloned().expect("rooted shape"),
    };
    let mut out = Instance::new();
    let mut stack = vec![(root.clone(), root.clone())];
    copy_labels(inst, &root, &root, &mut out);
    while let Some((t, word)) = stack.pop() {
        for (s, bits) in inst.successors(&t) {
            let child = word.concat(s);
            copy_labels(inst, s, &child, &mut out);
            edge_atoms(*bits, &word, &child, &mut out);
            stack.push((s.clone(), child));
        }
    }
    Ok(with_contr(out, inst))
}

/// Depth of every term of a multi-tree (its unique path length).
fn tree_depths(tree: &Instance) -> Result<(Term, BTreeMap<Term, usize>), TreeError> {
    if tree.term_count() == 0 {
        return Err(TreeError::NotMultiTree);
    }
    let shape = classify_shape(tree);
    if !shape.is_multi_tree() {
        return Err(TreeError::NotMultiTree);
    }
    let root = shape.root().cloned().expect("rooted");
    let depths = crate::instance::bfs_depths(tree, &root);
    Ok((root, depths))
}

/// Terms kept by `trim_i`: depth at most `i`, or reachable by an `E`-path
/// from such a term.
pub fn trim_kept(tree: &Instance, i: usize) -> Result<BTreeSet<Term>, TreeError> {
    let (root, depths) = tree_depths(tree)?;
    let mut kept = BTreeSet::new();
    let mut stack = vec![root];
    while let Some(t) = stack.pop() {
        kept.insert(t.clone());
        for (s, bits) in tree.successors(&t) {
            if depths[s] <= i || bits & EDGE_E != 0 {
                stack.push(s.clone());
            }
        }
    }
    Ok(kept)
}

/// `trim_i`: atoms whose terms are all kept.
pub fn trim(tree: &Instance, i: usize) -> Result<Instance, TreeError> {
    if tree.term_count() == 0 {
        return Ok(tree.clone());
    }
    let kept = trim_kept(tree, i)?;
    Ok(tree.restrict(|t| kept.contains(t)))
}

/// `trim_i ∘ unfold` computed lazily, so that it is also defined for
/// rooted instances with cycles (as long as no `E` cycle is reachable).
pub fn unfold_trimmed(inst: &Instance, i: usize) -> Result<Instance, TreeError> {
    if inst.term_count() == 0 {
        return Ok(inst.clone());
    }
    let root = source(inst)?;
    let mut out = Instance::new();
    copy_labels(inst, &root, &root, &mut out);
    // (source term, word, depth, on an E chain below the trim depth, E-chain terms)
    let mut stack = vec![(root.clone(), root.clone(), 0usize, Vec::<Term>::new())];
    while let Some((t, word, d, chain)) = stack.pop() {
        for (s, bits) in inst.successors(&t) {
            let below = d + 1 > i;
            if below && bits & EDGE_E == 0 {
                continue;
            }
            let mut chain = if below { chain.clone() } else { Vec::new() };
            if below {
                if chain.contains(s) {
                    return Err(TreeError::InfiniteEPath);
                }
                chain.push(s.clone());
            }
            let child = word.concat(s);
            copy_labels(inst, s, &child, &mut out);
            edge_atoms(*bits, &word, &child, &mut out);
            stack.push((s.clone(), child, d + 1, chain));
        }
    }
    Ok(with_contr(out, inst))
}

/// `unravel_i` by the literal composition with the generic core.
pub fn unravel_literal(inst: &Instance, i: usize) -> Result<Instance, TreeError> {
    let trimmed = if classify_shape(inst) == Shape::Other {
        unfold_trimmed(inst, i)?
    } else {
        trim(&unfold(inst)?, i)?
    };
    Ok(core(&trimmed))
}

// ---------------------------------------------------------------------------
// Hash-consed trees

pub type NodeId = u32;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TreeNode {
    /// Sorted label ids.
    pub labels: Vec<u32>,
    /// Sorted `(edge bits, child)` pairs.
    pub children: Vec<(u8, NodeId)>,
}

/// Arena of hash-consed rooted multi-trees with memoized homomorphism tests.
#[derive(Default, Debug)]
pub struct TreeArena {
    label_ids: HashMap<Arc<str>, u32>,
    label_names: Vec<Arc<str>>,
    nodes: Vec<TreeNode>,
    index: HashMap<TreeNode, NodeId>,
    hom_memo: HashMap<(NodeId, NodeId), bool>,
    size_memo: HashMap<NodeId, usize>,
}

impl TreeArena {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn label_id(&mut self, name: &Arc<str>) -> u32 {
        if let Some(&id) = self.label_ids.get(name) {
            return id;
        }
        let id = self.label_names.len() as u32;
        self.label_ids.insert(name.clone(), id);
        self.label_names.push(name.clone());
        id
    }

    pub fn label_name(&self, id: u32) -> &Arc<str> {
        &self.label_names[id as usize]
    }

    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id as usize]
    }

    pub fn intern(&mut self, mut node: TreeNode) -> NodeId {
        node.labels.sort_unstable();
        node.labels.dedup();
        node.children.sort_unstable();
        if let Some(&id) = self.index.get(&node) {
            return id;
        }
        let id = self.nodes.len() as NodeId;
        self.nodes.push(node.clone());
        self.index.insert(node, id);
        id
    }

    /// Root-preserving homomorphism from tree `a` into tree `b`.
    pub fn hom(&mut self, a: NodeId, b: NodeId) -> bool {
        if a == b {
            return true;
        }
        if let Some(&r) = self.hom_memo.get(&(a, b)) {
            return r;
        }
        let (na, nb) = (self.node(a).clone(), self.node(b).clone());
        let mut ok = is_sorted_subset(&na.labels, &nb.labels);
        if ok {
            for &(bits, c) in &na.children {
                let mut found = false;
                for &(bbits, d) in &nb.children {
                    if bits & bbits == bits && self.hom(c, d) {
                        found = true;
                        break;
                    }
                }
                if !found {
                    ok = false;
                    break;
                }
            }
        }
        self.hom_memo.insert((a, b), ok);
        ok
    }

    /// Indices of the children that survive coring: not dominated by a
    /// different child, first occurrence among duplicates.
    pub fn maximal_children(&mut self, children: &[(u8, NodeId)]) -> Vec<usize> {
        let mut keep = Vec::new();
        'outer: for (j, &(bj, cj)) in children.iter().enumerate() {
            for (k, &(bk, ck)) in children.iter().enumerate() {
                if k == j {
                    continue;
                }
                if (bk, ck) == (bj, cj) {
                    if k < j {
                        continue 'outer;
                    }
                    continue;
                }
                if bj & bk == bj && self.hom(cj, ck) {
                    continue 'outer;
                }
            }
            keep.push(j);
        }
        keep
    }

    /// Interns a node after coring its (already cored) children.
    pub fn intern_core(&mut self, labels: Vec<u32>, children: Vec<(u8, NodeId)>) -> NodeId {
        let keep = self.maximal_children(&children);
        let children = keep.into_iter().map(|j| children[j]).collect();
        self.intern(TreeNode { labels, children })
    }

    /// Number of nodes of the tree.
    pub fn size(&mut self, id: NodeId) -> usize {
        if let Some(&s) = self.size_memo.get(&id) {
            return s;
        }
        let children = self.node(id).children.clone();
        let s = 1 + children.iter().map(|&(_, c)| self.size(c)).sum::<usize>();
        self.size_memo.insert(id, s);
        s
    }

    pub fn height(&self, id: NodeId) -> usize {
        self.node(id).children.iter().map(|&(_, c)| 1 + self.height(c)).max().unwrap_or(0)
    }

    /// Canonical id of a multi-tree as is (children kept as a multiset).
    pub fn shape_id(&mut self, tree: &Instance, root: &Term) -> NodeId {
        let labels = tree.labels(root).iter().map(|l| self.label_id(l)).collect();
        let children = tree
            .successors(root)
            .iter()
            .map(|(s, bits)| (*bits, self.shape_id(tree, s)))
            .collect();
        self.intern(TreeNode { labels, children })
    }

    /// Materializes a tree; children are named `parent.f<k>` with `k`
    /// counting up from `*next`.
    pub fn materialize(&self, id: NodeId, root: &Term, next: &mut u32, out: &mut Instance) {
        for &l in &self.node(id).labels {
            out.insert(Atom::unary(self.label_name(l), root.clone()));
        }
        for &(bits, c) in &self.node(id).children {
            let child = root.concat(&Term::fresh(*next));
            *next += 1;
            edge_atoms(bits, root, &child, out);
            self.materialize(c, &child, next, out);
        }
    }
}

fn is_sorted_subset(a: &[u32], b: &[u32]) -> bool {
    let mut j = 0;
    for x in a {
        while j < b.len() && b[j] < *x {
            j += 1;
        }
        if j == b.len() || b[j] != *x {
            return false;
        }
        j += 1;
    }
    true
}

// ---------------------------------------------------------------------------
// Fused unravel

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Mode {
    Depth(usize),
    EChain,
}

#[derive(Clone, Debug)]
struct StateInfo {
    id: NodeId,
    kept: Vec<(u8, Term, Mode)>,
}

struct Unraveler<'a> {
    inst: &'a Instance,
    limit: usize,
    arena: &'a mut TreeArena,
    memo: HashMap<(Term, Mode), StateInfo>,
    active: HashSet<(Term, Mode)>,
}

impl Unraveler<'_> {
    fn state(&mut self, t: &Term, mode: Mode) -> Result<NodeId, TreeError> {
        let key = (t.clone(), mode);
        if let Some(info) = self.memo.get(&key) {
            return Ok(info.id);
        }
        if !self.active.insert(key.clone()) {
            return Err(TreeError::InfiniteEPath);
        }
        let mut cands = Vec::new();
        for (s, bits) in self.inst.successors(t) {
            let child_mode = match mode {
                Mode::Depth(d) if d < self.limit => Mode::Depth(d + 1),
                _ if bits & EDGE_E != 0 => Mode::EChain,
                _ => continue,
            };
            let id = self.state(s, child_mode)?;
            cands.push((*bits, s.clone(), child_mode, id));
        }
        let pairs: Vec<(u8, NodeId)> = cands.iter().map(|c| (c.0, c.3)).collect();
        let keep = self.arena.maximal_children(&pairs);
        let labels = self.inst.labels(t).iter().map(|l| self.arena.label_id(l)).collect();
        let children = keep.iter().map(|&j| pairs[j]).collect();
        let id = self.arena.intern(TreeNode { labels, children });
        let kept = keep.into_iter().map(|j| (cands[j].0, cands[j].1.clone(), cands[j].2)).collect();
        self.active.remove(&key);
        self.memo.insert(key, StateInfo { id, kept });
        Ok(id)
    }
}

/// Result of the fused unravel.
#[derive(Clone, Debug)]
pub struct Unraveled {
    pub instance: Instance,
    /// Source term of every term of `instance`.
    pub origin: BTreeMap<Term, Term>,
    pub root: Option<Term>,
    /// Hash-consed id of the result in the arena used.
    pub id: Option<NodeId>,
}

/// Cored id of `unravel_i(inst)` in `arena`, without materializing it.
pub fn unravel_id(inst: &Instance, i: usize, arena: &mut TreeArena) -> Result<NodeId, TreeError> {
    let root = source(inst)?;
    let mut u = Unraveler { inst, limit: i, arena, memo: HashMap::new(), active: HashSet::new() };
    u.state(&root, Mode::Depth(0))
}

/// `unravel_i(inst)`: terms are root-path words over the source terms.
pub fn unravel_in(inst: &Instance, i: usize, arena: &mut TreeArena) -> Result<Unraveled, TreeError> {
    if inst.term_count() == 0 {
        return Ok(Unraveled { instance: inst.clone(), origin: BTreeMap::new(), root: None, id: None });
    }
    let root = source(inst)?;
    let mut u = Unraveler { inst, limit: i, arena, memo: HashMap::new(), active: HashSet::new() };
    let id = u.state(&root, Mode::Depth(0))?;
    let mut out = Instance::new();
    let mut origin = BTreeMap::new();
    copy_labels(inst, &root, &root, &mut out);
    origin.insert(root.clone(), root.clone());
    let mut stack = vec![(root.clone(), Mode::Depth(0), root.clone())];
    while let Some((t, mode, word)) = stack.pop() {
        let info = u.memo[&(t.clone(), mode)].clone();
        for (bits, s, m) in info.kept {
            let child = word.concat(&s);
            copy_labels(inst, &s, &child, &mut out);
            edge_atoms(bits, &word, &child, &mut out);
            origin.insert(child.clone(), s.clone());
            stack.push((s, m, child));
        }
    }
    Ok(Unraveled { instance: with_contr(out, inst), origin, root: Some(root), id: Some(id) })
}

pub fn unravel(inst: &Instance, i: usize) -> Result<Instance, TreeError> {
    Ok(unravel_in(inst, i, &mut TreeArena::new())?.instance)
}

/// Isomorphism between two multi-trees with the same canonical shape,
/// built by matching children with equal ids.
pub fn tree_isomorphism(a: &Instance, b: &Instance) -> Option<TermMap> {
    if a.has_contr() != b.has_contr() {
        return None;
    }
    if a.term_count() == 0 || b.term_count() == 0 {
        return (a.term_count() == b.term_count()).then(TermMap::new);
    }
    let (ra, rb) = (source(a).ok()?, source(b).ok()?);
    if !classify_shape(a).is_multi_tree() || !classify_shape(b).is_multi_tree() {
        return None;
    }
    let mut arena = TreeArena::new();
    if arena.shape_id(a, &ra) != arena.shape_id(b, &rb) {
        return None;
    }
    let mut map = TermMap::new();
    let mut stack = vec![(ra, rb)];
    while let Some((x, y)) = stack.pop() {
        let mut pool: Vec<(u8, NodeId, Term)> =
            b.successors(&y).iter().map(|(s, bits)| (*bits, arena.shape_id(b, s), s.clone())).collect();
        for (s, bits) in a.successors(&x) {
            let id = arena.shape_id(a, s);
            let pos = pool.iter().position(|(bb, bid, _)| *bb == *bits && *bid == id)?;
            let (_, _, t) = pool.swap_remove(pos);
            stack.push((s.clone(), t));
        }
        map.insert(x, y);
    }
    Some(map)
}

// ---------------------------------------------------------------------------
// Subtrees, embeddings and compliance

/// Terms of the subtree rooted at `t` (including `t`).
pub fn subtree_terms(tree: &Instance, t: &Term) -> BTreeSet<Term> {
    let mut out = BTreeSet::new();
    let mut stack = vec![t.clone()];
    while let Some(x) = stack.pop() {
        if out.insert(x.clone()) {
            stack.extend(tree.successors(&x).keys().cloned());
        }
    }
    out
}

pub fn subtree(tree: &Instance, t: &Term) -> Instance {
    let terms = subtree_terms(tree, t);
    tree.restrict(|x| terms.contains(x))
}

/// Length of the longest path (in atoms) of an acyclic instance.
pub fn max_path_length(inst: &Instance) -> usize {
    fn go(inst: &Instance, t: &Term, memo: &mut BTreeMap<Term, usize>) -> usize {
        if let Some(&v) = memo.get(t) {
            return v;
        }
        let v = inst.successors(t).keys().map(|s| 1 + go(inst, s, memo)).max().unwrap_or(0);
        memo.insert(t.clone(), v);
        v
    }
    let mut memo = BTreeMap::new();
    inst.terms().map(|t| go(inst, t, &mut memo)).max().unwrap_or(0)
}

/// Descendants of `t` reachable by exactly `k` atoms carrying `R`.
pub fn r_descendants(tree: &Instance, t: &Term, k: usize) -> BTreeSet<Term> {
    let mut layer = BTreeSet::from([t.clone()]);
    for _ in 0..k {
        layer = layer
            .iter()
            .flat_map(|x| tree.successors(x).iter().filter(|(_, b)| *b & EDGE_R != 0).map(|(s, _)| s.clone()))
            .collect();
    }
    layer
}

/// Whether `f` is an isomorphism between the sub-instances of `tree`
/// induced by its domain and by its image.
pub fn is_partial_isomorphism(tree: &Instance, f: &TermMap) -> bool {
    let image: BTreeSet<&Term> = f.values().collect();
    if image.len() != f.len() {
        return false;
    }
    for (x, y) in f {
        if !tree.contains_term(x) || !tree.contains_term(y) || tree.labels(x) != tree.labels(y) {
            return false;
        }
        for (x2, y2) in f {
            if tree.edge(x, x2) != tree.edge(y, y2) {
                return false;
            }
        }
    }
    true
}

/// `embed(T, t', t_+, f)`: the image of `tree` under `f` extended by the
/// identity.
pub fn embed(tree: &Instance, t_prime: &Term, t_plus: &Term, f: &TermMap) -> Result<Instance, TreeError> {
    for t in [t_prime, t_plus] {
        if !tree.contains_term(t) {
            return Err(TreeError::MissingTerm(t.to_string()));
        }
    }
    let from = subtree_terms(tree, t_plus);
    let to = subtree_terms(tree, t_prime);
    if let Some((x, _)) = f.iter().find(|(x, y)| !from.contains(*x) || !to.contains(*y)) {
        return Err(TreeError::NotPartialIso(format!("{x} is outside the embedded subtrees")));
    }
    if !is_partial_isomorphism(tree, f) {
        return Err(TreeError::NotPartialIso("labels or edges differ".into()));
    }
    Ok(tree.map_terms(f))
}

/// Properness of an embedding: `unravel_ℓ(embed(T, t', t_+, f)) ≅ T` with
/// `ℓ` the maximal path length of `T`.
pub fn is_proper_embedding(tree: &Instance, t_prime: &Term, t_plus: &Term, f: &TermMap) -> bool {
    let Ok(embedded) = embed(tree, t_prime, t_plus, f) else { return false };
    let Ok(root) = source(tree) else { return false };
    let ell = max_path_length(tree);
    let mut arena = TreeArena::new();
    let target = arena.shape_id(tree, &root);
    matches!(unravel_id(&embedded, ell, &mut arena), Ok(id) if id == target)
}

/// Literal re-check of properness through [`unravel_literal`] and the
/// generic isomorphism test.
pub fn is_proper_embedding_literal(tree: &Instance, t_prime: &Term, t_plus: &Term, f: &TermMap) -> bool {
    let Ok(embedded) = embed(tree, t_prime, t_plus, f) else { return false };
    let ell = max_path_length(tree);
    match unravel_literal(&embedded, ell) {
        Ok(u) => crate::instance::is_isomorphic(&u, tree),
        Err(_) => false,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComplianceWitness {
    pub qdp: Qdp,
    pub t: Term,
    pub t_prime: Term,
    pub t_plus: Term,
    pub iso: TermMap,
}

/// Compliance of `t` with `q`: one witness for every descendant `t'` at
/// distance `k`, or `None` if some `t'` has none.
///
/// Candidate partial isomorphisms send `t_+` to `t'` and are defined on a
/// subtree containing `t_+`; maximal extensions are tried first.
pub fn check_compliance(tree: &Instance, t: &Term, q: &Qdp) -> Option<Vec<ComplianceWitness>> {
    let root = source(tree).ok()?;
    let ell = max_path_length(tree);
    let mut arena = TreeArena::new();
    let target = arena.shape_id(tree, &root);
    let plus: Vec<Term> = r_descendants(tree, t, q.k_plus).into_iter().collect();
    let mut out = Vec::new();
    for t_prime in r_descendants(tree, t, q.k) {
        let mut found = None;
        for t_plus in &plus {
            let mut proper = |f: &TermMap| {
                let embedded = tree.map_terms(f);
                matches!(unravel_id(&embedded, ell, &mut arena), Ok(id) if id == target)
            };
            if let Some(f) = search_embedding(tree, t_plus, &t_prime, &mut proper) {
                found = Some(ComplianceWitness {
                    qdp: *q,
                    t: t.clone(),
                    t_prime: t_prime.clone(),
                    t_plus: t_plus.clone(),
                    iso: f,
                });
                break;
            }
        }
        out.push(found?);
    }
    Some(out)
}

/// Backtracking over subtree-rooted partial isomorphisms `f` with
/// `f(from) = to`, returning the first accepted by `accept`.
fn search_embedding(
    tree: &Instance,
    from: &Term,
    to: &Term,
    accept: &mut dyn FnMut(&TermMap) -> bool,
) -> Option<TermMap> {
    if tree.labels(from) != tree.labels(to) {
        return None;
    }
    let mut f = TermMap::from([(from.clone(), to.clone())]);
    let mut used: BTreeSet<Term> = BTreeSet::from([to.clone()]);
    // frontier of (source, image) pairs whose children are still undecided
    let pending: Vec<(Term, Term)> = vec![(from.clone(), to.clone())];
    let mut result = None;
    extend(tree, pending, &mut f, &mut used, accept, &mut result);
    result
}

fn extend(
    tree: &Instance,
    mut pending: Vec<(Term, Term)>,
    f: &mut TermMap,
    used: &mut BTreeSet<Term>,
    accept: &mut dyn FnMut(&TermMap) -> bool,
    result: &mut Option<TermMap>,
) -> bool {
    // children of the first pending pair, decided one at a time
    let Some((x, y)) = pending.pop() else {
        if accept(f) {
            *result = Some(f.clone());
            return true;
        }
        return false;
    };
    let children: Vec<(Term, u8)> = tree.successors(&x).iter().map(|(s, b)| (s.clone(), *b)).collect();
    decide_children(tree, &children, 0, &y, pending, f, used, accept, result)
}

#[allow(clippy::too_many_arguments)]
fn decide_children(
    tree: &Instance,
    children: &[(Term, u8)],
    idx: usize,
    parent_image: &Term,
    pending: Vec<(Term, Term)>,
    f: &mut TermMap,
    used: &mut BTreeSet<Term>,
    accept: &mut dyn FnMut(&TermMap) -> bool,
    result: &mut Option<TermMap>,
) -> bool {
    let Some((c, bits)) = children.get(idx) else {
        return extend(tree, pending, f, used, accept, result);
    };
    if f.contains_key(c) {
        // already mapped through another path (not in trees)
        return decide_children(tree, children, idx + 1, parent_image, pending, f, used, accept, result);
    }
    let options: Vec<Term> = tree
        .successors(parent_image)
        .iter()
        .filter(|(d, b)| *b == bits && !used.contains(*d) && tree.labels(d) == tree.labels(c))
        .map(|(d, _)| d.clone())
        .collect();
    for d in options {
        f.insert(c.clone(), d.clone());
        used.insert(d.clone());
        let mut next = pending.clone();
        next.push((c.clone(), d.clone()));
        if decide_children(tree, children, idx + 1, parent_image, next, f, used, accept, result) {
            return true;
        }
        f.remove(c);
        used.remove(&d);
    }
    // leave `c` (and its subtree) outside the domain
    decide_children(tree, children, idx + 1, parent_image, pending, f, used, accept, result)
}

/// Compliance with every property of `p`.
pub fn check_compliance_all(tree: &Instance, t: &Term, p: &QdpSet) -> Result<Vec<ComplianceWitness>, Qdp> {
    let mut out = Vec::new();
    for q in p.iter() {
        match check_compliance(tree, t, q) {
            Some(ws) => out.extend(ws),
            None => return Err(*q),
        }
    }
    Ok(out)
}
