//! Instances over word-structured terms, homomorphism search, cores and
//! shape recognition.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fmt;
use std::ops::ControlFlow;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formula::ModalFormula;

/// Edge bit for `R` in an adjacency entry.
pub const EDGE_R: u8 = 1;
/// Edge bit for `E` in an adjacency entry.
pub const EDGE_E: u8 = 2;

/// A base symbol of a term word.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sym {
    Const(Arc<str>),
    Fresh(u32),
    /// Rule variable; only appears in rule bodies and heads.
    Var(u32),
}

impl fmt::Display for Sym {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sym::Const(c) => write!(f, "{c}"),
            Sym::Fresh(n) => write!(f, "f{n}"),
            Sym::Var(n) => write!(f, "?{n}"),
        }
    }
}

/// A finite word over base symbols.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Term(Arc<[Sym]>);

impl Term {
    pub fn epsilon() -> Self {
        Term(Arc::from(Vec::new()))
    }

    pub fn constant(name: &str) -> Self {
        Term(Arc::from(vec![Sym::Const(Arc::from(name))]))
    }

    pub fn fresh(id: u32) -> Self {
        Term(Arc::from(vec![Sym::Fresh(id)]))
    }

    pub fn var(id: u32) -> Self {
        Term(Arc::from(vec![Sym::Var(id)]))
    }

    pub fn from_syms(syms: Vec<Sym>) -> Self {
        Term(Arc::from(syms))
    }

    pub fn syms(&self) -> &[Sym] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Word concatenation `self • other`.
    pub fn concat(&self, other: &Term) -> Term {
        let mut syms = Vec::with_capacity(self.len() + other.len());
        syms.extend_from_slice(&self.0);
        syms.extend_from_slice(&other.0);
        Term(Arc::from(syms))
    }

    /// Constants are single-symbol words over a named constant. They are
    /// fixed by every homomorphism.
    pub fn is_constant(&self) -> bool {
        matches!(&*self.0, [Sym::Const(_)])
    }

    pub fn max_fresh(&self) -> Option<u32> {
        self.0
            .iter()
            .filter_map(|s| match s {
                Sym::Fresh(n) => Some(*n),
                _ => None,
            })
            .max()
    }

    /// Parses the dot-joined serialization. `f<digits>` is a fresh symbol,
    /// any other identifier a constant.
    pub fn parse(text: &str) -> Result<Term, InstanceError> {
        let mut syms = Vec::new();
        for piece in text.split('.') {
            let ok_ident = !piece.is_empty()
                && piece.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
                && piece.chars().next().is_some_and(|c| c.is_ascii_alphabetic());
            if !ok_ident {
                return Err(InstanceError::BadTerm(text.to_string()));
            }
            let fresh = piece
                .strip_prefix('f')
                .filter(|d| !d.is_empty() && d.chars().all(|c| c.is_ascii_digit()))
                .and_then(|d| d.parse().ok());
            syms.push(match fresh {
                Some(n) => Sym::Fresh(n),
                None => Sym::Const(Arc::from(piece)),
            });
        }
        Ok(Term(Arc::from(syms)))
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "ε");
        }
        for (i, s) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ".")?;
            }
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

/// Predicate symbols of the signature.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pred {
    Contr,
    R,
    E,
    Unary(Arc<str>),
}

impl Pred {
    /// The unary predicate `P_ψ` for a subformula.
    pub fn label(f: &ModalFormula) -> Pred {
        Pred::Unary(label_name(f))
    }

    pub fn arity(&self) -> usize {
        match self {
            Pred::Contr => 0,
            Pred::R | Pred::E => 2,
            Pred::Unary(_) => 1,
        }
    }

    pub fn parse(name: &str) -> Pred {
        match name {
            "contr" => Pred::Contr,
            "R" => Pred::R,
            "E" => Pred::E,
            other => Pred::Unary(Arc::from(other)),
        }
    }

    fn edge_bit(&self) -> u8 {
        match self {
            Pred::R => EDGE_R,
            Pred::E => EDGE_E,
            _ => 0,
        }
    }
}

impl fmt::Display for Pred {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pred::Contr => write!(f, "contr"),
            Pred::R => write!(f, "R"),
            Pred::E => write!(f, "E"),
            Pred::Unary(n) => write!(f, "{n}"),
        }
    }
}

/// Name of the unary predicate for a subformula.
pub fn label_name(f: &ModalFormula) -> Arc<str> {
    Arc::from(format!("P_{f}"))
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Atom {
    pub pred: Pred,
    pub args: Vec<Term>,
}

impl Atom {
    pub fn contr() -> Atom {
        Atom { pred: Pred::Contr, args: vec![] }
    }

    pub fn unary(name: &str, t: Term) -> Atom {
        Atom { pred: Pred::Unary(Arc::from(name)), args: vec![t] }
    }

    pub fn label(f: &ModalFormula, t: Term) -> Atom {
        Atom { pred: Pred::label(f), args: vec![t] }
    }

    pub fn r(s: Term, t: Term) -> Atom {
        Atom { pred: Pred::R, args: vec![s, t] }
    }

    pub fn e(s: Term, t: Term) -> Atom {
        Atom { pred: Pred::E, args: vec![s, t] }
    }

    pub fn new(pred: Pred, args: Vec<Term>) -> Result<Atom, InstanceError> {
        if pred.arity() != args.len() {
            return Err(InstanceError::Arity(pred.to_string(), args.len()));
        }
        if args.iter().any(Term::is_empty) {
            return Err(InstanceError::BadTerm("ε".into()));
        }
        Ok(Atom { pred, args })
    }

    pub fn map(&self, f: impl Fn(&Term) -> Term) -> Atom {
        Atom { pred: self.pred.clone(), args: self.args.iter().map(f).collect() }
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.args.is_empty() {
            return write!(f, "{}", self.pred);
        }
        write!(f, "{}(", self.pred)?;
        for (i, a) in self.args.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{a}")?;
        }
        write!(f, ")")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InstanceError {
    #[error("malformed term {0:?}")]
    BadTerm(String),
    #[error("predicate {0} used with {1} arguments")]
    Arity(String, usize),
    #[error("term {0} does not occur in the instance")]
    MissingTerm(String),
    #[error("instance is not a rooted DAG")]
    NotRootedDag,
    #[error("invalid instance JSON: {0}")]
    Json(String),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct TermData {
    labels: BTreeSet<Arc<str>>,
    out: BTreeMap<Term, u8>,
    inc: BTreeMap<Term, u8>,
}

static NO_LABELS: BTreeSet<Arc<str>> = BTreeSet::new();
static NO_EDGES: BTreeMap<Term, u8> = BTreeMap::new();

/// A finite set of atoms with term, label and adjacency caches.
#[derive(Clone, Debug, Default)]
pub struct Instance {
    atoms: BTreeSet<Atom>,
    contr: bool,
    terms: BTreeMap<Term, TermData>,
    by_label: BTreeMap<Arc<str>, BTreeSet<Term>>,
}

impl PartialEq for Instance {
    fn eq(&self, other: &Self) -> bool {
        self.atoms == other.atoms
    }
}

impl Eq for Instance {}

impl FromIterator<Atom> for Instance {
    fn from_iter<I: IntoIterator<Item = Atom>>(iter: I) -> Self {
        let mut inst = Instance::new();
        for a in iter {
            inst.insert(a);
        }
        inst
    }
}

impl Instance {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an atom; returns whether it was new.
    pub fn insert(&mut self, atom: Atom) -> bool {
        if self.atoms.contains(&atom) {
            return false;
        }
        match (&atom.pred, atom.args.as_slice()) {
            (Pred::Contr, _) => self.contr = true,
            (Pred::Unary(name), [t]) => {
                self.terms.entry(t.clone()).or_default().labels.insert(name.clone());
                self.by_label.entry(name.clone()).or_default().insert(t.clone());
            }
            (p, [s, t]) => {
                let bit = p.edge_bit();
                *self.terms.entry(s.clone()).or_default().out.entry(t.clone()).or_insert(0) |= bit;
                *self.terms.entry(t.clone()).or_default().inc.entry(s.clone()).or_insert(0) |= bit;
            }
            _ => unreachable!("atom arity checked at construction"),
        }
        self.atoms.insert(atom);
        true
    }

    pub fn contains(&self, atom: &Atom) -> bool {
        self.atoms.contains(atom)
    }

    pub fn atoms(&self) -> impl Iterator<Item = &Atom> {
        self.atoms.iter()
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn has_contr(&self) -> bool {
        self.contr
    }

    pub fn terms(&self) -> impl Iterator<Item = &Term> {
        self.terms.keys()
    }

    pub fn term_count(&self) -> usize {
        self.terms.len()
    }

    pub fn contains_term(&self, t: &Term) -> bool {
        self.terms.contains_key(t)
    }

    pub fn labels(&self, t: &Term) -> &BTreeSet<Arc<str>> {
        self.terms.get(t).map_or(&NO_LABELS, |d| &d.labels)
    }

    pub fn has_label(&self, t: &Term, label: &str) -> bool {
        self.labels(t).contains(label)
    }

    /// Successors of `t` with the edge bits of the connecting atoms.
    pub fn successors(&self, t: &Term) -> &BTreeMap<Term, u8> {
        self.terms.get(t).map_or(&NO_EDGES, |d| &d.out)
    }

    pub fn predecessors(&self, t: &Term) -> &BTreeMap<Term, u8> {
        self.terms.get(t).map_or(&NO_EDGES, |d| &d.inc)
    }

    /// Edge bits of the atoms from `s` to `t` (0 when none).
    pub fn edge(&self, s: &Term, t: &Term) -> u8 {
        self.successors(s).get(t).copied().unwrap_or(0)
    }

    pub fn terms_with_label(&self, label: &str) -> Option<&BTreeSet<Term>> {
        self.by_label.get(label)
    }

    pub fn label_names(&self) -> impl Iterator<Item = &Arc<str>> {
        self.by_label.keys()
    }

    /// Largest fresh symbol occurring in any term.
    pub fn max_fresh(&self) -> Option<u32> {
        self.terms.keys().filter_map(Term::max_fresh).max()
    }

    /// The atoms whose arguments all satisfy `keep` (nullary atoms are kept).
    pub fn restrict(&self, keep: impl Fn(&Term) -> bool) -> Instance {
        self.atoms.iter().filter(|a| a.args.iter().all(&keep)).cloned().collect()
    }

    /// Image of the instance under `h`, identity outside its domain.
    pub fn map_terms(&self, h: &TermMap) -> Instance {
        self.atoms
            .iter()
            .map(|a| a.map(|t| h.get(t).cloned().unwrap_or_else(|| t.clone())))
            .collect()
    }

    pub fn union(&self, other: &Instance) -> Instance {
        let mut out = self.clone();
        for a in other.atoms() {
            out.insert(a.clone());
        }
        out
    }

    pub fn is_subset(&self, other: &Instance) -> bool {
        self.atoms.is_subset(&other.atoms)
    }

    /// Number of binary atoms.
    pub fn edge_atom_count(&self) -> usize {
        self.atoms.iter().filter(|a| a.args.len() == 2).count()
    }

    pub fn to_json_value(&self) -> InstanceJson {
        InstanceJson {
            atoms: self
                .atoms
                .iter()
                .map(|a| AtomJson {
                    pred: a.pred.to_string(),
                    args: a.args.iter().map(Term::to_string).collect(),
                })
                .collect(),
        }
    }

    pub fn from_json_value(v: &InstanceJson) -> Result<Instance, InstanceError> {
        let mut inst = Instance::new();
        for a in &v.atoms {
            let args = a.args.iter().map(|t| Term::parse(t)).collect::<Result<Vec<_>, _>>()?;
            inst.insert(Atom::new(Pred::parse(&a.pred), args)?);
        }
        Ok(inst)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_json_value()).expect("instance serializes")
    }

    pub fn from_json(text: &str) -> Result<Instance, InstanceError> {
        let v: InstanceJson =
            serde_json::from_str(text).map_err(|e| InstanceError::Json(e.to_string()))?;
        Self::from_json_value(&v)
    }
}

impl fmt::Display for Instance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, a) in self.atoms.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{a}")?;
        }
        write!(f, "}}")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomJson {
    pub pred: String,
    pub args: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceJson {
    pub atoms: Vec<AtomJson>,
}

// ---------------------------------------------------------------------------
// Shapes

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Shape {
    /// Every non-root term has exactly one incoming atom.
    Tree(Term),
    /// Every non-root term has exactly one predecessor term.
    MultiTree(Term),
    RootedDag(Term),
    Other,
}

impl Shape {
    pub fn root(&self) -> Option<&Term> {
        match self {
            Shape::Tree(r) | Shape::MultiTree(r) | Shape::RootedDag(r) => Some(r),
            Shape::Other => None,
        }
    }

    pub fn is_multi_tree(&self) -> bool {
        matches!(self, Shape::Tree(_) | Shape::MultiTree(_))
    }
}

pub fn classify_shape(inst: &Instance) -> Shape {
    let sources: Vec<&Term> =
        inst.terms().filter(|t| inst.predecessors(t).is_empty()).collect();
    let [root] = sources.as_slice() else {
        return Shape::Other;
    };
    // Kahn's algorithm; with a single source every term of an acyclic
    // instance is reachable from it.
    let mut indeg: BTreeMap<&Term, usize> =
        inst.terms().map(|t| (t, inst.predecessors(t).len())).collect();
    let mut queue = VecDeque::from([*root]);
    let mut seen = 0;
    while let Some(t) = queue.pop_front() {
        seen += 1;
        for s in inst.successors(t).keys() {
            let d = indeg.get_mut(s).expect("successor is a term");
            *d -= 1;
            if *d == 0 {
                queue.push_back(s);
            }
        }
    }
    if seen != inst.term_count() {
        return Shape::Other;
    }
    let root = (*root).clone();
    let mut tree = true;
    for t in inst.terms() {
        if *t == root {
            continue;
        }
        let preds = inst.predecessors(t);
        if preds.len() != 1 {
            return Shape::RootedDag(root);
        }
        let bits = *preds.values().next().unwrap();
        if bits.count_ones() != 1 {
            tree = false;
        }
    }
    if tree {
        Shape::Tree(root)
    } else {
        Shape::MultiTree(root)
    }
}

/// Minimal path length from the root of every term of a rooted DAG.
pub fn depths(inst: &Instance) -> Result<BTreeMap<Term, usize>, InstanceError> {
    let shape = classify_shape(inst);
    let root = shape.root().ok_or(InstanceError::NotRootedDag)?;
    Ok(bfs_depths(inst, root))
}

pub(crate) fn bfs_depths(inst: &Instance, root: &Term) -> BTreeMap<Term, usize> {
    let mut depth = BTreeMap::new();
    depth.insert(root.clone(), 0);
    let mut queue = VecDeque::from([root.clone()]);
    while let Some(t) = queue.pop_front() {
        let d = depth[&t];
        for s in inst.successors(&t).keys() {
            if !depth.contains_key(s) {
                depth.insert(s.clone(), d + 1);
                queue.push_back(s.clone());
            }
        }
    }
    depth
}

pub fn depth_of(inst: &Instance, t: &Term) -> Result<usize, InstanceError> {
    if !inst.contains_term(t) {
        return Err(InstanceError::MissingTerm(t.to_string()));
    }
    Ok(depths(inst)?[t])
}

// ---------------------------------------------------------------------------
// Homomorphisms

pub type TermMap = BTreeMap<Term, Term>;

/// Options for homomorphism search.
#[derive(Clone, Copy, Debug, Default)]
pub struct HomOptions<'a> {
    /// Fixed images for some source terms.
    pub seed: Option<&'a TermMap>,
    /// Require the map to be injective.
    pub injective: bool,
    /// Groups of source terms that must be mapped to terms with equal label
    /// sets.
    pub classes: Option<&'a [Vec<Term>]>,
}

pub fn find_homomorphism(src: &Instance, dst: &Instance, seed: Option<&TermMap>) -> Option<TermMap> {
    find_homomorphism_with(src, dst, HomOptions { seed, ..Default::default() })
}

pub fn find_homomorphism_with(src: &Instance, dst: &Instance, opts: HomOptions<'_>) -> Option<TermMap> {
    let mut found = None;
    for_each_homomorphism(src, dst, opts, |h| {
        found = Some(h.clone());
        ControlFlow::Break(())
    });
    found
}

/// Calls `visit` on every homomorphism (restricted by `opts`) until it breaks.
pub fn for_each_homomorphism(
    src: &Instance,
    dst: &Instance,
    opts: HomOptions<'_>,
    mut visit: impl FnMut(&TermMap) -> ControlFlow<()>,
) {
    if src.has_contr() && !dst.has_contr() {
        return;
    }
    let Some(mut search) = Search::new(src, dst, opts) else {
        return;
    };
    let _ = search.run(0, &mut visit);
}

/// Atom-by-atom check that `h` (total on the terms of `src`) maps `src` into
/// `dst` and fixes constants.
pub fn is_homomorphism(src: &Instance, dst: &Instance, h: &TermMap) -> bool {
    for t in src.terms() {
        match h.get(t) {
            None => return false,
            Some(img) if t.is_constant() && img != t => return false,
            _ => {}
        }
    }
    src.atoms().all(|a| dst.contains(&a.map(|t| h[t].clone())))
}

pub fn find_isomorphism(a: &Instance, b: &Instance) -> Option<TermMap> {
    if a.len() != b.len() || a.term_count() != b.term_count() || a.has_contr() != b.has_contr() {
        return None;
    }
    find_homomorphism_with(a, b, HomOptions { injective: true, ..Default::default() })
}

pub fn is_isomorphic(a: &Instance, b: &Instance) -> bool {
    find_isomorphism(a, b).is_some()
}

/// Core by repeated folding: while some term `x` can be avoided by an
/// endomorphism, replace the instance by the image of such a map.
pub fn core(inst: &Instance) -> Instance {
    let mut j = inst.clone();
    'outer: loop {
        let candidates: Vec<Term> = j.terms().filter(|t| !t.is_constant()).cloned().collect();
        for x in candidates {
            let without = j.restrict(|t| *t != x);
            if let Some(h) = find_homomorphism(&j, &without, None) {
                j = j.map_terms(&h);
                continue 'outer;
            }
        }
        return j;
    }
}

#[derive(Clone, Debug)]
enum End {
    Var(usize),
    Fixed(Term),
}

#[derive(Clone, Debug)]
struct Link {
    other: End,
    /// The edge goes from this variable to `other`.
    outgoing: bool,
    bits: u8,
}

struct Search<'a> {
    dst: &'a Instance,
    vars: Vec<Term>,
    labels: Vec<Vec<Arc<str>>>,
    links: Vec<Vec<Link>>,
    class_of: Vec<Option<usize>>,
    injective: bool,
    image: Vec<Option<Term>>,
    fixed: TermMap,
    used: HashSet<Term>,
    out: TermMap,
}

impl<'a> Search<'a> {
    fn new(src: &Instance, dst: &'a Instance, opts: HomOptions<'_>) -> Option<Search<'a>> {
        let mut fixed = TermMap::new();
        if let Some(seed) = opts.seed {
            fixed.extend(seed.iter().map(|(k, v)| (k.clone(), v.clone())));
        }
        for t in src.terms() {
            if t.is_constant() {
                match fixed.get(t) {
                    Some(img) if img != t => return None,
                    _ => {
                        fixed.insert(t.clone(), t.clone());
                    }
                }
            }
        }
        let mut used = HashSet::new();
        if opts.injective {
            for img in fixed.values() {
                if !used.insert(img.clone()) {
                    return None;
                }
            }
        }
        // Fixed terms must already carry their atoms.
        for (t, img) in &fixed {
            if !src.contains_term(t) {
                continue;
            }
            if !src.labels(t).is_subset(dst.labels(img)) {
                return None;
            }
            for (s, bits) in src.successors(t) {
                if let Some(simg) = fixed.get(s) {
                    if dst.edge(img, simg) & bits != *bits {
                        return None;
                    }
                }
            }
        }

        let free: Vec<&Term> = src.terms().filter(|t| !fixed.contains_key(*t)).collect();
        let order = Self::order(src, &free, &fixed);
        let pos: BTreeMap<&Term, usize> = order.iter().enumerate().map(|(i, t)| (*t, i)).collect();
        let mut links = vec![Vec::new(); order.len()];
        for (i, t) in order.iter().enumerate() {
            for (s, bits) in src.successors(t) {
                if let Some(img) = fixed.get(s) {
                    links[i].push(Link { other: End::Fixed(img.clone()), outgoing: true, bits: *bits });
                } else if pos[s] < i {
                    links[i].push(Link { other: End::Var(pos[s]), outgoing: true, bits: *bits });
                } else if pos[s] == i {
                    links[i].push(Link { other: End::Var(i), outgoing: true, bits: *bits });
                }
            }
            for (s, bits) in src.predecessors(t) {
                if let Some(img) = fixed.get(s) {
                    links[i].push(Link { other: End::Fixed(img.clone()), outgoing: false, bits: *bits });
                } else if pos[s] < i {
                    links[i].push(Link { other: End::Var(pos[s]), outgoing: false, bits: *bits });
                }
            }
        }
        let mut class_of = vec![None; order.len()];
        if let Some(classes) = opts.classes {
            for (c, members) in classes.iter().enumerate() {
                for m in members {
                    if let Some(&i) = pos.get(m) {
                        class_of[i] = Some(c);
                    }
                }
            }
        }
        let labels = order
            .iter()
            .map(|t| {
                let mut ls: Vec<Arc<str>> = src.labels(t).iter().cloned().collect();
                ls.sort_by_key(|l| dst.terms_with_label(l).map_or(0, BTreeSet::len));
                ls
            })
            .collect();
        let n = order.len();
        Some(Search {
            dst,
            vars: order.into_iter().cloned().collect(),
            labels,
            links,
            class_of,
            injective: opts.injective,
            image: vec![None; n],
            fixed,
            used,
            out: TermMap::new(),
        })
    }

    /// Greedy static order: most links to already placed terms first, then
    /// higher degree.
    fn order<'t>(src: &Instance, free: &[&'t Term], fixed: &TermMap) -> Vec<&'t Term> {
        let degree = |t: &Term| src.successors(t).len() + src.predecessors(t).len();
        let mut placed: BTreeSet<&Term> = BTreeSet::new();
        let mut remaining: Vec<&Term> = free.to_vec();
        let mut order = Vec::with_capacity(free.len());
        let mut score: BTreeMap<&Term, usize> = remaining
            .iter()
            .map(|t| {
                let s = src
                    .successors(t)
                    .keys()
                    .chain(src.predecessors(t).keys())
                    .filter(|s| fixed.contains_key(*s))
                    .count();
                (*t, s)
            })
            .collect();
        while !remaining.is_empty() {
            let (idx, _) = remaining
                .iter()
                .enumerate()
                .max_by(|(i, a), (j, b)| {
                    (score[*a], src.labels(a).len(), degree(a), std::cmp::Reverse(*i))
                        .cmp(&(score[*b], src.labels(b).len(), degree(b), std::cmp::Reverse(*j)))
                })
                .expect("nonempty");
            let t = remaining.swap_remove(idx);
            // swap_remove perturbs ties; restore source order for determinism
            remaining.sort();
            placed.insert(t);
            for s in src.successors(t).keys().chain(src.predecessors(t).keys()) {
                if let Some(v) = score.get_mut(s) {
                    *v += 1;
                }
            }
            order.push(t);
        }
        order
    }

    fn resolve<'s>(&'s self, end: &'s End) -> Option<&'s Term> {
        match end {
            End::Fixed(t) => Some(t),
            End::Var(i) => self.image[*i].as_ref(),
        }
    }

    fn candidates(&self, i: usize) -> Vec<Term> {
        for link in &self.links[i] {
            if matches!(link.other, End::Var(j) if j == i) {
                continue;
            }
            let Some(img) = self.resolve(&link.other) else { continue };
            let adj = if link.outgoing { self.dst.predecessors(img) } else { self.dst.successors(img) };
            return adj
                .iter()
                .filter(|(_, b)| *b & link.bits == link.bits)
                .map(|(t, _)| t.clone())
                .collect();
        }
        if let Some(first) = self.labels[i].first() {
            return self
                .dst
                .terms_with_label(first)
                .map(|s| s.iter().cloned().collect())
                .unwrap_or_default();
        }
        self.dst.terms().cloned().collect()
    }

    fn consistent(&self, i: usize, c: &Term) -> bool {
        if self.injective && self.used.contains(c) {
            return false;
        }
        let dl = self.dst.labels(c);
        if !self.labels[i].iter().all(|l| dl.contains(l)) {
            return false;
        }
        for link in &self.links[i] {
            let other = match &link.other {
                End::Var(j) if *j == i => c,
                e => match self.resolve(e) {
                    Some(t) => t,
                    None => continue,
                },
            };
            let have = if link.outgoing { self.dst.edge(c, other) } else { self.dst.edge(other, c) };
            if have & link.bits != link.bits {
                return false;
            }
        }
        if let Some(cls) = self.class_of[i] {
            for j in 0..i {
                if self.class_of[j] == Some(cls) {
                    let other = self.image[j].as_ref().expect("earlier vars assigned");
                    if self.dst.labels(other) != dl {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn run(&mut self, i: usize, visit: &mut impl FnMut(&TermMap) -> ControlFlow<()>) -> ControlFlow<()> {
        if i == self.vars.len() {
            self.out.clear();
            self.out.extend(self.fixed.iter().map(|(k, v)| (k.clone(), v.clone())));
            for (v, img) in self.vars.iter().zip(&self.image) {
                self.out.insert(v.clone(), img.clone().expect("complete assignment"));
            }
            return visit(&self.out);
        }
        for c in self.candidates(i) {
            if !self.consistent(i, &c) {
                continue;
            }
            if self.injective {
                self.used.insert(c.clone());
            }
            self.image[i] = Some(c.clone());
            let flow = self.run(i + 1, visit);
            self.image[i] = None;
            if self.injective {
                self.used.remove(&c);
            }
            flow?;
        }
        ControlFlow::Continue(())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn t(s: &str) -> Term {
        Term::parse(s).unwrap()
    }

    pub fn x(n: u32) -> Term {
        Term::fresh(n)
    }

    #[test]
    fn term_roundtrip_and_concat() {
        let w = t("a.f1.f22");
        assert_eq!(w.to_string(), "a.f1.f22");
        assert_eq!(w.len(), 3);
        assert!(t("a").is_constant());
        assert!(!t("f3").is_constant());
        assert_eq!(t("a").concat(&t("f1")), t("a.f1"));
        assert_eq!(Term::epsilon().concat(&w), w);
        assert!(Term::parse("a..b").is_err());
        assert!(Term::parse("").is_err());
    }

    #[test]
    fn hom_examples() {
        let src: Instance = [Atom::unary("A", x(1))].into_iter().collect();
        let dst: Instance = [Atom::unary("A", t("a"))].into_iter().collect();
        assert_eq!(find_homomorphism(&src, &dst, None).unwrap()[&x(1)], t("a"));

        let src: Instance = [Atom::unary("A", t("a"))].into_iter().collect();
        let dst: Instance = [Atom::unary("A", t("b"))].into_iter().collect();
        assert!(find_homomorphism(&src, &dst, None).is_none());

        let src: Instance = [Atom::r(x(1), x(2)), Atom::r(x(2), x(3))].into_iter().collect();
        let dst: Instance = [Atom::r(x(9), x(9))].into_iter().collect();
        let h = find_homomorphism(&src, &dst, None).unwrap();
        assert!(h.values().all(|v| *v == x(9)));
        assert!(is_homomorphism(&src, &dst, &h));
    }

    #[test]
    fn seeded_and_injective() {
        let src: Instance = [Atom::r(x(1), x(2))].into_iter().collect();
        let dst: Instance = [Atom::r(x(5), x(6)), Atom::r(x(6), x(6))].into_iter().collect();
        let seed = TermMap::from([(x(1), x(6))]);
        let h = find_homomorphism(&src, &dst, Some(&seed)).unwrap();
        assert_eq!(h[&x(2)], x(6));
        let inj = find_homomorphism_with(
            &src,
            &dst,
            HomOptions { seed: Some(&seed), injective: true, classes: None },
        );
        assert!(inj.is_none());
    }

    #[test]
    fn core_examples() {
        let i: Instance = [Atom::r(t("a"), x(1)), Atom::r(t("a"), x(2))].into_iter().collect();
        let c = core(&i);
        assert_eq!(c.len(), 1);
        let i: Instance = [
            Atom::r(t("a"), x(1)),
            Atom::r(t("a"), x(2)),
            Atom::unary("P", x(1)),
            Atom::unary("Q", x(2)),
        ]
        .into_iter()
        .collect();
        assert_eq!(core(&i), i);
    }

    #[test]
    fn shapes() {
        let i: Instance = [Atom::r(t("a"), x(1)), Atom::r(x(1), t("a"))].into_iter().collect();
        assert_eq!(classify_shape(&i), Shape::Other);
        let i: Instance =
            [Atom::r(t("a"), x(1)), Atom::e(t("a"), x(1)), Atom::r(x(1), x(2))].into_iter().collect();
        assert_eq!(classify_shape(&i), Shape::MultiTree(t("a")));
        let i: Instance = [
            Atom::r(t("a"), x(1)),
            Atom::r(t("a"), x(2)),
            Atom::r(x(1), x(3)),
            Atom::r(x(2), x(3)),
        ]
        .into_iter()
        .collect();
        assert_eq!(classify_shape(&i), Shape::RootedDag(t("a")));
        let i: Instance = [Atom::unary("P", t("a"))].into_iter().collect();
        assert_eq!(classify_shape(&i), Shape::Tree(t("a")));
    }

    #[test]
    fn depth_examples() {
        let i: Instance =
            [Atom::r(t("a"), x(1)), Atom::r(x(1), x(2)), Atom::r(t("a"), x(2))].into_iter().collect();
        assert_eq!(depth_of(&i, &t("a")).unwrap(), 0);
        assert_eq!(depth_of(&i, &x(2)).unwrap(), 1);
        assert!(depth_of(&i, &x(7)).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let i: Instance = [
            Atom::r(t("a"), t("a.f1")),
            Atom::unary("P_<>p", t("a")),
            Atom::contr(),
        ]
        .into_iter()
        .collect();
        let back = Instance::from_json(&i.to_json()).unwrap();
        assert_eq!(back, i);
        assert!(back.has_contr());
        assert!(Instance::from_json(r#"{"atoms":[{"pred":"R","args":["a"]}]}"#).is_err());
    }
}
