//! Finite Kripke models, forcing, quasi-density frame conditions and two
//! independent satisfiability oracles.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formula::ModalFormula;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KripkeError {
    #[error("invalid quasi-density property {0:?}: expected k->n with 0 < k < n")]
    BadQdp(String),
    #[error("model has no worlds")]
    NoWorlds,
    #[error("world index {0} out of range")]
    WorldOutOfRange(usize),
    #[error("unknown world {0:?}")]
    UnknownWorld(String),
    #[error("invalid model JSON: {0}")]
    Json(String),
}

/// A quasi-density property `k -> k_plus`: every `R^k` pair is an `R^k_plus` pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Qdp {
    pub k: usize,
    pub k_plus: usize,
}

impl Qdp {
    pub fn new(k: usize, k_plus: usize) -> Result<Qdp, KripkeError> {
        if 0 < k && k < k_plus {
            Ok(Qdp { k, k_plus })
        } else {
            Err(KripkeError::BadQdp(format!("{k}->{k_plus}")))
        }
    }

    /// The axiom `◇^k p → ◇^k_plus p` in negation normal form.
    pub fn axiom(&self, prop: &str) -> ModalFormula {
        ModalFormula::or(
            ModalFormula::boxes(self.k, ModalFormula::neg_prop(prop)),
            ModalFormula::diamonds(self.k_plus, ModalFormula::prop(prop)),
        )
    }
}

impl fmt::Display for Qdp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.k, self.k_plus)
    }
}

impl FromStr for Qdp {
    type Err = KripkeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || KripkeError::BadQdp(s.to_string());
        let (k, n) = s.split_once("->").ok_or_else(bad)?;
        let k = k.trim().parse().map_err(|_| bad())?;
        let n = n.trim().parse().map_err(|_| bad())?;
        Qdp::new(k, n).map_err(|_| bad())
    }
}

/// A finite set of quasi-density properties; empty means plain K.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct QdpSet(BTreeSet<Qdp>);

impl QdpSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Qdp> {
        self.0.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// `K`: the largest `k_plus`, 0 for the empty set.
    pub fn max_k_plus(&self) -> usize {
        self.0.iter().map(|q| q.k_plus).max().unwrap_or(0)
    }
}

impl FromIterator<Qdp> for QdpSet {
    fn from_iter<I: IntoIterator<Item = Qdp>>(iter: I) -> Self {
        QdpSet(iter.into_iter().collect())
    }
}

impl FromStr for QdpSet {
    type Err = KripkeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split(',')
            .map(str::trim)
            .filter(|item| !item.is_empty())
            .map(Qdp::from_str)
            .collect()
    }
}

impl fmt::Display for QdpSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, q) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{q}")?;
        }
        Ok(())
    }
}

/// A finite Kripke model `(W, R, V)`; worlds are indices into `worlds`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KripkeModel {
    worlds: Vec<String>,
    rel: BTreeSet<(usize, usize)>,
    val: BTreeMap<String, BTreeSet<usize>>,
    succ: Vec<Vec<usize>>,
}

impl KripkeModel {
    pub fn new(
        worlds: Vec<String>,
        rel: impl IntoIterator<Item = (usize, usize)>,
        val: BTreeMap<String, BTreeSet<usize>>,
    ) -> Result<Self, KripkeError> {
        if worlds.is_empty() {
            return Err(KripkeError::NoWorlds);
        }
        let n = worlds.len();
        let rel: BTreeSet<(usize, usize)> = rel.into_iter().collect();
        for &(a, b) in &rel {
            if a >= n || b >= n {
                return Err(KripkeError::WorldOutOfRange(a.max(b)));
            }
        }
        if let Some(&w) = val.values().flatten().find(|&&w| w >= n) {
            return Err(KripkeError::WorldOutOfRange(w));
        }
        let mut succ = vec![Vec::new(); n];
        for &(a, b) in &rel {
            succ[a].push(b);
        }
        Ok(KripkeModel { worlds, rel, val, succ })
    }

    /// Model with worlds named `w0, w1, ...`.
    pub fn with_size(
        n: usize,
        rel: impl IntoIterator<Item = (usize, usize)>,
        val: BTreeMap<String, BTreeSet<usize>>,
    ) -> Result<Self, KripkeError> {
        Self::new((0..n).map(|i| format!("w{i}")).collect(), rel, val)
    }

    pub fn world_count(&self) -> usize {
        self.worlds.len()
    }

    pub fn world_names(&self) -> &[String] {
        &self.worlds
    }

    pub fn relation(&self) -> &BTreeSet<(usize, usize)> {
        &self.rel
    }

    pub fn valuation(&self) -> &BTreeMap<String, BTreeSet<usize>> {
        &self.val
    }

    pub fn successors(&self, w: usize) -> &[usize] {
        &self.succ[w]
    }

    pub fn holds(&self, p: &str, w: usize) -> bool {
        self.val.get(p).is_some_and(|s| s.contains(&w))
    }

    /// Resolves a world by name, falling back to a numeric index.
    pub fn world_index(&self, name: &str) -> Result<usize, KripkeError> {
        if let Some(i) = self.worlds.iter().position(|w| w == name) {
            return Ok(i);
        }
        match name.parse::<usize>() {
            Ok(i) if i < self.worlds.len() => Ok(i),
            _ => Err(KripkeError::UnknownWorld(name.to_string())),
        }
    }

    pub fn to_json_value(&self) -> ModelJson {
        ModelJson {
            worlds: self.worlds.iter().cloned().map(serde_json::Value::String).collect(),
            rel: self.rel.iter().map(|&(a, b)| [a, b]).collect(),
            val: self.val.iter().map(|(k, v)| (k.clone(), v.iter().copied().collect())).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_json_value()).expect("model serializes")
    }

    pub fn from_json_value(v: &ModelJson) -> Result<Self, KripkeError> {
        let worlds = v
            .worlds
            .iter()
            .map(|w| match w {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            })
            .collect();
        let val = v.val.iter().map(|(k, ws)| (k.clone(), ws.iter().copied().collect())).collect();
        Self::new(worlds, v.rel.iter().map(|&[a, b]| (a, b)), val)
    }

    pub fn from_json(text: &str) -> Result<Self, KripkeError> {
        let v: ModelJson =
            serde_json::from_str(text).map_err(|e| KripkeError::Json(e.to_string()))?;
        Self::from_json_value(&v)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelJson {
    pub worlds: Vec<serde_json::Value>,
    pub rel: Vec<[usize; 2]>,
    #[serde(default)]
    pub val: BTreeMap<String, Vec<usize>>,
}

/// Square boolean matrix with rows stored as bitsets.
#[derive(Clone, Debug, PartialEq, Eq)]
struct BoolMatrix {
    n: usize,
    rows: Vec<Vec<u64>>,
}

impl BoolMatrix {
    fn of_relation(m: &KripkeModel) -> Self {
        let n = m.world_count();
        let words = n.div_ceil(64);
        let mut rows = vec![vec![0u64; words]; n];
        for &(a, b) in m.relation() {
            rows[a][b / 64] |= 1 << (b % 64);
        }
        BoolMatrix { n, rows }
    }

    fn compose(&self, other: &BoolMatrix) -> BoolMatrix {
        let words = self.n.div_ceil(64);
        let mut rows = vec![vec![0u64; words]; self.n];
        for (i, row) in rows.iter_mut().enumerate() {
            for j in 0..self.n {
                if self.rows[i][j / 64] >> (j % 64) & 1 == 1 {
                    for (r, o) in row.iter_mut().zip(&other.rows[j]) {
                        *r |= o;
                    }
                }
            }
        }
        BoolMatrix { n: self.n, rows }
    }

    fn is_subset(&self, other: &BoolMatrix) -> bool {
        self.rows.iter().zip(&other.rows).all(|(a, b)| a.iter().zip(b).all(|(x, y)| x & !y == 0))
    }
}

/// Memoized powers `R^ℓ` of a model's relation.
struct Powers {
    base: BoolMatrix,
    memo: HashMap<usize, BoolMatrix>,
}

impl Powers {
    fn new(m: &KripkeModel) -> Self {
        let base = BoolMatrix::of_relation(m);
        let memo = HashMap::from([(1, base.clone())]);
        Powers { base, memo }
    }

    fn get(&mut self, len: usize) -> BoolMatrix {
        if let Some(m) = self.memo.get(&len) {
            return m.clone();
        }
        let prev = self.get(len - 1);
        let m = prev.compose(&self.base);
        self.memo.insert(len, m.clone());
        m
    }
}

pub fn check_qdp(m: &KripkeModel, q: &Qdp) -> bool {
    let mut powers = Powers::new(m);
    let a = powers.get(q.k);
    let b = powers.get(q.k_plus);
    a.is_subset(&b)
}

pub fn check_qdps(m: &KripkeModel, p: &QdpSet) -> bool {
    let mut powers = Powers::new(m);
    p.iter().all(|q| powers.get(q.k).is_subset(&powers.get(q.k_plus)))
}

/// The forcing relation `m, w ⊩ f`.
pub fn force(m: &KripkeModel, w: usize, f: &ModalFormula) -> bool {
    match f {
        ModalFormula::Prop(p) => m.holds(p, w),
        ModalFormula::NegProp(p) => !m.holds(p, w),
        ModalFormula::Or(l, r) => force(m, w, l) || force(m, w, r),
        ModalFormula::And(l, r) => force(m, w, l) && force(m, w, r),
        ModalFormula::Diamond(g) => m.successors(w).iter().any(|&u| force(m, u, g)),
        ModalFormula::Box(g) => m.successors(w).iter().all(|&u| force(m, u, g)),
    }
}

/// A model together with the world at which the formula is forced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PointedModel {
    pub model: KripkeModel,
    pub world: usize,
}

/// Exhaustive finite-model search over models with at most `max_worlds`
/// worlds. Returns the first witness in canonical enumeration order.
///
/// Only point-generated frames rooted at world 0 are enumerated, one per
/// isomorphism class of frames fixing the root. Valuations range over worlds
/// within modal depth of the root; propositions of a single polarity get
/// their most favourable extension.
pub fn brute_force_sat(f: &ModalFormula, p: &QdpSet, max_worlds: usize) -> Option<PointedModel> {
    assert!(max_worlds >= 1, "max_worlds must be positive");
    assert!(max_worlds <= 8, "exhaustive search supports at most 8 worlds");
    let md = f.modal_depth();
    let (pos, neg) = f.polarities();
    let mixed: Vec<String> = pos.intersection(&neg).cloned().collect();
    let prop_ids: BTreeMap<&str, usize> =
        pos.union(&neg).enumerate().map(|(i, name)| (name.as_str(), i)).collect();
    let compiled = Compiled::new(f, &prop_ids);
    for n in 1..=max_worlds {
        let found = frames(n)
            .into_par_iter()
            .filter(|adj| frame_ok(adj, n, md, p))
            .find_map_first(|adj| {
                let depth = frame_depths(&adj, n);
                let mut fixed_t = vec![0u64; prop_ids.len()];
                let mut fixed_f = vec![0u64; prop_ids.len()];
                let all = (1u64 << n) - 1;
                for (name, &id) in &prop_ids {
                    if !neg.contains(*name) {
                        fixed_t[id] = all;
                    } else if !pos.contains(*name) {
                        fixed_f[id] = all;
                    } else {
                        for (w, d) in depth.iter().enumerate() {
                            if *d > md {
                                fixed_f[id] |= 1 << w;
                            }
                        }
                    }
                }
                let mut vars = Vec::new();
                for (w, d) in depth.iter().enumerate() {
                    if *d <= md {
                        for name in &mixed {
                            vars.push((prop_ids[name.as_str()], w));
                        }
                    }
                }
                let mut search = ValSearch { adj: &adj, n, compiled: &compiled, t: fixed_t, f: fixed_f };
                if search.solve(&vars, 0) {
                    Some(build_model(n, &adj, &prop_ids, &search.t))
                } else {
                    None
                }
            });
        if let Some(model) = found {
            debug_assert!(force(&model, 0, f) && check_qdps(&model, p));
            return Some(PointedModel { model, world: 0 });
        }
    }
    None
}

fn build_model(n: usize, adj: &[u64], props: &BTreeMap<&str, usize>, truth: &[u64]) -> KripkeModel {
    let mut rel = Vec::new();
    for (a, row) in adj.iter().enumerate() {
        for b in 0..n {
            if row >> b & 1 == 1 {
                rel.push((a, b));
            }
        }
    }
    let val = props
        .iter()
        .map(|(name, &id)| {
            let ws = (0..n).filter(|w| truth[id] >> w & 1 == 1).collect();
            (name.to_string(), ws)
        })
        .collect();
    KripkeModel::with_size(n, rel, val).expect("enumerated model is well formed")
}

/// All frames on `n` worlds (adjacency bitmasks) in which every world is
/// reachable from 0 and that are lexicographically minimal among their
/// relabelings fixing 0.
fn frames(n: usize) -> Vec<Vec<u64>> {
    let bits = n * n;
    let perms = permutations_fixing_zero(n);
    let mut out = Vec::new();
    for code in 0u64..(1u64 << bits) {
        let adj: Vec<u64> = (0..n).map(|i| (code >> (i * n)) & ((1 << n) - 1)).collect();
        if frame_depths(&adj, n).contains(&usize::MAX) {
            continue;
        }
        let canonical = perms.iter().all(|perm| encode(&permute(&adj, perm, n), n) >= code);
        if canonical {
            out.push(adj);
        }
    }
    out
}

fn encode(adj: &[u64], n: usize) -> u64 {
    adj.iter().enumerate().fold(0, |acc, (i, row)| acc | row << (i * n))
}

fn permute(adj: &[u64], perm: &[usize], n: usize) -> Vec<u64> {
    let mut out = vec![0u64; n];
    for (a, row) in adj.iter().enumerate() {
        for b in 0..n {
            if row >> b & 1 == 1 {
                out[perm[a]] |= 1 << perm[b];
            }
        }
    }
    out
}

fn permutations_fixing_zero(n: usize) -> Vec<Vec<usize>> {
    fn rec(rest: &mut Vec<usize>, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if rest.is_empty() {
            out.push(cur.clone());
            return;
        }
        for i in 0..rest.len() {
            let x = rest.remove(i);
            cur.push(x);
            rec(rest, cur, out);
            cur.pop();
            rest.insert(i, x);
        }
    }
    let mut out = Vec::new();
    rec(&mut (1..n).collect(), &mut vec![0], &mut out);
    out
}

fn frame_depths(adj: &[u64], n: usize) -> Vec<usize> {
    let mut depth = vec![usize::MAX; n];
    depth[0] = 0;
    let mut frontier = 1u64;
    let mut seen = 1u64;
    let mut d = 0;
    while frontier != 0 {
        d += 1;
        let mut next = 0u64;
        for (w, row) in adj.iter().enumerate() {
            if frontier >> w & 1 == 1 {
                next |= row;
            }
        }
        next &= !seen;
        seen |= next;
        for (w, slot) in depth.iter_mut().enumerate() {
            if next >> w & 1 == 1 {
                *slot = d;
            }
        }
        frontier = next;
    }
    depth
}

fn frame_ok(adj: &[u64], n: usize, md: usize, p: &QdpSet) -> bool {
    if p.is_empty() {
        // Without frame conditions worlds beyond the modal depth are never
        // needed: cutting them keeps the formula true at the root.
        return frame_depths(adj, n).iter().all(|&d| d <= md);
    }
    let model = KripkeModel::with_size(n, (0..n).flat_map(|a| (0..n).filter(move |&b| adj[a] >> b & 1 == 1).map(move |b| (a, b))), BTreeMap::new())
        .expect("enumerated frame is well formed");
    check_qdps(&model, p)
}

/// Formula compiled to a flat node array for mask evaluation.
enum Node {
    Prop(usize),
    Neg(usize),
    And(usize, usize),
    Or(usize, usize),
    Dia(usize),
    Box(usize),
}

struct Compiled {
    nodes: Vec<Node>,
}

impl Compiled {
    fn new(f: &ModalFormula, props: &BTreeMap<&str, usize>) -> Self {
        fn go(f: &ModalFormula, props: &BTreeMap<&str, usize>, nodes: &mut Vec<Node>) -> usize {
            let node = match f {
                ModalFormula::Prop(p) => Node::Prop(props[p.as_str()]),
                ModalFormula::NegProp(p) => Node::Neg(props[p.as_str()]),
                ModalFormula::And(l, r) => Node::And(go(l, props, nodes), go(r, props, nodes)),
                ModalFormula::Or(l, r) => Node::Or(go(l, props, nodes), go(r, props, nodes)),
                ModalFormula::Diamond(g) => Node::Dia(go(g, props, nodes)),
                ModalFormula::Box(g) => Node::Box(go(g, props, nodes)),
            };
            nodes.push(node);
            nodes.len() - 1
        }
        let mut nodes = Vec::new();
        go(f, props, &mut nodes);
        Compiled { nodes }
    }

    /// Three-valued evaluation at every world: masks of worlds where the
    /// root is certainly true and certainly false under a partial valuation.
    fn eval(&self, adj: &[u64], n: usize, t: &[u64], f: &[u64]) -> (u64, u64) {
        let mut vals: Vec<(u64, u64)> = Vec::with_capacity(self.nodes.len());
        let all = (1u64 << n) - 1;
        for node in &self.nodes {
            let v = match *node {
                Node::Prop(p) => (t[p], f[p]),
                Node::Neg(p) => (f[p], t[p]),
                Node::And(a, b) => (vals[a].0 & vals[b].0, vals[a].1 | vals[b].1),
                Node::Or(a, b) => (vals[a].0 | vals[b].0, vals[a].1 & vals[b].1),
                Node::Dia(g) | Node::Box(g) => {
                    let (gt, gf) = vals[g];
                    let mut yes = 0u64;
                    let mut no = 0u64;
                    for (w, row) in adj.iter().enumerate() {
                        let (some_t, all_t) = (row & gt != 0, row & !gt == 0);
                        let (some_f, all_f) = (row & gf != 0, row & !gf == 0);
                        let (y, z) = if matches!(node, Node::Dia(_)) { (some_t, all_f) } else { (all_t, some_f) };
                        yes |= (y as u64) << w;
                        no |= (z as u64) << w;
                    }
                    (yes & all, no & all)
                }
            };
            vals.push(v);
        }
        *vals.last().expect("formula has a node")
    }
}

struct ValSearch<'a> {
    adj: &'a [u64],
    n: usize,
    compiled: &'a Compiled,
    t: Vec<u64>,
    f: Vec<u64>,
}

impl ValSearch<'_> {
    /// Branches on the remaining variables; on success `t` holds a total
    /// valuation (unassigned variables false) forcing the root.
    fn solve(&mut self, vars: &[(usize, usize)], i: usize) -> bool {
        let (yes, no) = self.compiled.eval(self.adj, self.n, &self.t, &self.f);
        if no & 1 == 1 {
            return false;
        }
        if yes & 1 == 1 {
            return true;
        }
        let Some(&(p, w)) = vars.get(i) else {
            return false;
        };
        let bit = 1u64 << w;
        self.t[p] |= bit;
        if self.solve(vars, i + 1) {
            return true;
        }
        self.t[p] &= !bit;
        self.f[p] |= bit;
        if self.solve(vars, i + 1) {
            return true;
        }
        self.f[p] &= !bit;
        false
    }
}

/// Complete K-satisfiability check by a tableau over formula sets.
pub fn k_tree_sat(f: &ModalFormula) -> bool {
    let mut memo = HashMap::new();
    tableau(vec![f.clone()], &mut memo)
}

fn tableau(set: Vec<ModalFormula>, memo: &mut HashMap<Vec<ModalFormula>, bool>) -> bool {
    let mut set = set;
    set.sort();
    set.dedup();
    if let Some(&r) = memo.get(&set) {
        return r;
    }
    let result = expand(set.clone(), memo);
    memo.insert(set, result);
    result
}

fn expand(mut set: Vec<ModalFormula>, memo: &mut HashMap<Vec<ModalFormula>, bool>) -> bool {
    if let Some(i) = set.iter().position(|g| matches!(g, ModalFormula::And(..))) {
        let ModalFormula::And(l, r) = set.swap_remove(i) else { unreachable!() };
        set.push(*l);
        set.push(*r);
        return tableau(set, memo);
    }
    if let Some(i) = set.iter().position(|g| matches!(g, ModalFormula::Or(..))) {
        let ModalFormula::Or(l, r) = set.swap_remove(i) else { unreachable!() };
        let mut left = set.clone();
        left.push(*l);
        if tableau(left, memo) {
            return true;
        }
        set.push(*r);
        return tableau(set, memo);
    }
    for g in &set {
        if let ModalFormula::Prop(p) = g {
            if set.contains(&ModalFormula::NegProp(p.clone())) {
                return false;
            }
        }
    }
    let boxed: Vec<ModalFormula> = set
        .iter()
        .filter_map(|g| match g {
            ModalFormula::Box(h) => Some((**h).clone()),
            _ => None,
        })
        .collect();
    set.iter().all(|g| match g {
        ModalFormula::Diamond(h) => {
            let mut child = boxed.clone();
            child.push((**h).clone());
            tableau(child, memo)
        }
        _ => true,
    })
}
