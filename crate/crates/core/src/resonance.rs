//! Bi-characteristics, the shift sets of the leading convolution operator,
//! and the resonance graph they induce.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::validate_support;
use crate::lattice::{ModeIndex, TruncBox, DEFAULT_BOX_CAP};

/// Which component of the `u ⊕ v` system a lattice node lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    U,
    V,
}

impl Block {
    pub fn flip(self) -> Self {
        match self {
            Block::U => Block::V,
            Block::V => Block::U,
        }
    }
}

pub type Node = (ModeIndex, Block);

pub fn node_label(x: &Node) -> String {
    let tag = match x.1 {
        Block::U => 'u',
        Block::V => 'v',
    };
    format!("{tag}{}", x.0)
}

/// One factorization of a shift: the multiset of `(k, k')` pairs and, for the
/// mixed sets, the pair `(kappa, kappa')`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GammaWitness {
    pub pairs: Vec<(usize, usize)>,
    pub kappa: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSupports {
    pub b: usize,
    pub d: usize,
    pub p: u32,
    pub gpp: BTreeMap<ModeIndex, GammaWitness>,
    pub gpm: BTreeMap<ModeIndex, GammaWitness>,
    pub gmp: BTreeMap<ModeIndex, GammaWitness>,
}

impl GammaSupports {
    pub fn gpp_nonzero(&self) -> impl Iterator<Item = &ModeIndex> {
        self.gpp.keys().filter(|x| !x.is_zero())
    }
}

/// `(-e_k + e_k', j_k - j_k')`.
pub(crate) fn pair_shift(j_list: &[Vec<i64>], k: usize, kp: usize) -> ModeIndex {
    let b = j_list.len();
    let mut n = vec![0; b];
    n[k] -= 1;
    n[kp] += 1;
    ModeIndex::new(n, j_list[k].iter().zip(&j_list[kp]).map(|(a, c)| a - c).collect())
}

/// `(-e_kappa - e_kappa', j_kappa + j_kappa')`.
pub(crate) fn kappa_shift(j_list: &[Vec<i64>], k: usize, kp: usize) -> ModeIndex {
    let b = j_list.len();
    let mut n = vec![0; b];
    n[k] -= 1;
    n[kp] -= 1;
    ModeIndex::new(n, j_list[k].iter().zip(&j_list[kp]).map(|(a, c)| a + c).collect())
}

fn gpp_up_to(j_list: &[Vec<i64>], levels: u32) -> BTreeMap<ModeIndex, GammaWitness> {
    let b = j_list.len();
    let d = j_list[0].len();
    let mut out = BTreeMap::new();
    out.insert(
        ModeIndex::zero(b, d),
        GammaWitness {
            pairs: Vec::new(),
            kappa: None,
        },
    );
    let mut frontier: Vec<ModeIndex> = vec![ModeIndex::zero(b, d)];
    for _ in 0..levels {
        let mut next = Vec::new();
        for x in &frontier {
            let base = out[x].pairs.clone();
            for k in 0..b {
                for kp in 0..b {
                    if k == kp {
                        continue;
                    }
                    let y = x + &pair_shift(j_list, k, kp);
                    if !out.contains_key(&y) {
                        let mut pairs = base.clone();
                        pairs.push((k, kp));
                        out.insert(y.clone(), GammaWitness { pairs, kappa: None });
                        next.push(y);
                    }
                }
            }
        }
        frontier = next;
    }
    out
}

/// Exhaustive enumeration of the shift sets, deduplicated by value.
pub fn gamma_supports(j_list: &[Vec<i64>], p: u32) -> Result<GammaSupports> {
    let d = validate_support(j_list)?;
    if p == 0 {
        return Err(Error::InvalidArgument("p must be at least 1".into()));
    }
    let b = j_list.len();
    let gpp = gpp_up_to(j_list, p);
    let inner = gpp_up_to(j_list, p - 1);
    let mut gpm = BTreeMap::new();
    for k in 0..b {
        for kp in k..b {
            let ks = kappa_shift(j_list, k, kp);
            for (x, w) in &inner {
                gpm.entry(x + &ks).or_insert_with(|| GammaWitness {
                    pairs: w.pairs.clone(),
                    kappa: Some((k, kp)),
                });
            }
        }
    }
    let gmp = gpm.iter().map(|(x, w)| (-x, w.clone())).collect();
    Ok(GammaSupports { b, d, p, gpp, gpm, gmp })
}

/// Points of the (optionally thickened) bi-characteristics inside a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiCharSet {
    pub plus: BTreeSet<ModeIndex>,
    pub minus: BTreeSet<ModeIndex>,
    pub mu: i64,
    pub omega0: Vec<i64>,
}

impl BiCharSet {
    pub fn len(&self) -> usize {
        self.plus.len() + self.minus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plus.is_empty() && self.minus.is_empty()
    }

    pub fn empty(omega0: Vec<i64>, mu: i64) -> Self {
        Self {
            plus: BTreeSet::new(),
            minus: BTreeSet::new(),
            mu,
            omega0,
        }
    }

    pub fn contains(&self, x: &Node) -> bool {
        match x.1 {
            Block::U => self.plus.contains(&x.0),
            Block::V => self.minus.contains(&x.0),
        }
    }
}

fn n_box(b: usize, radius: i64) -> Result<Vec<Vec<i64>>> {
    let side = (2 * radius + 1) as u128;
    let count = side.saturating_pow(b as u32);
    if count > DEFAULT_BOX_CAP {
        return Err(Error::Capacity {
            what: "frequency box",
            needed: count,
            limit: DEFAULT_BOX_CAP,
        });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut cur = vec![-radius; b];
    loop {
        out.push(cur.clone());
        let mut pos = b;
        loop {
            if pos == 0 {
                return Ok(out);
            }
            pos -= 1;
            if cur[pos] < radius {
                cur[pos] += 1;
                cur[pos + 1..].iter_mut().for_each(|c| *c = -radius);
                break;
            }
            cur[pos] = -radius;
        }
    }
}

/// Exact scan of `|±n·omega0 + j^2| <= mu` over the box.
///
/// Frequencies are bucketed by `n·omega0`, so each spatial index costs one
/// range lookup instead of a sweep over the frequency box.
pub fn bicharacteristics(omega0: &[i64], d: usize, bx: &TruncBox, mu: i64) -> Result<BiCharSet> {
    if omega0.is_empty() || d == 0 {
        return Err(Error::InvalidArgument("b and d must be at least 1".into()));
    }
    if omega0.iter().any(|&w| w <= 0) {
        return Err(Error::InvalidArgument("omega0 entries must be positive".into()));
    }
    if mu < 0 || bx.n_radius < 0 || bx.j_radius < 0 {
        return Err(Error::InvalidArgument("mu and box radii must be non-negative".into()));
    }
    let b = omega0.len();
    let mut freq: Vec<(i64, Vec<i64>)> = n_box(b, bx.n_radius)?
        .into_iter()
        .map(|n| (n.iter().zip(omega0).map(|(a, w)| a * w).sum(), n))
        .collect();
    freq.sort_unstable();
    let range = |lo: i64, hi: i64| {
        let s = freq.partition_point(|e| e.0 < lo);
        let e = freq.partition_point(|e| e.0 <= hi);
        &freq[s..e]
    };
    let js = n_box(d, bx.j_radius)?;
    let mut out = BiCharSet::empty(omega0.to_vec(), mu);
    for j in js {
        let s: i64 = j.iter().map(|x| x * x).sum();
        for (nw, n) in range(-s - mu, -s + mu) {
            let minus_too = (s - nw).abs() <= mu;
            if !minus_too || n[0] <= 0 {
                out.plus.insert(ModeIndex::new(n.clone(), j.clone()));
            } else {
                out.minus.insert(ModeIndex::new(n.clone(), j.clone()));
            }
        }
        for (nw, n) in range(s - mu, s + mu) {
            if (nw + s).abs() <= mu {
                continue;
            }
            out.minus.insert(ModeIndex::new(n.clone(), j.clone()));
        }
    }
    Ok(out)
}

/// Nodes of the bi-characteristics joined when the leading operator couples them.
#[derive(Debug, Clone)]
pub struct ResonanceGraph {
    pub nodes: Vec<Node>,
    pub adjacency: Vec<Vec<usize>>,
    /// Components as sorted node-index lists, ordered by their smallest index.
    pub components: Vec<Vec<usize>>,
    pub component_of: Vec<usize>,
}

pub(crate) struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    pub(crate) fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub(crate) fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Shifts `s` such that node `x` is joined to `x - s` in the target block.
pub(crate) fn shifts_from(g: &GammaSupports, from: Block) -> Vec<(ModeIndex, Block)> {
    let mixed = match from {
        Block::U => &g.gpm,
        Block::V => &g.gmp,
    };
    g.gpp_nonzero()
        .map(|s| (s.clone(), from))
        .chain(mixed.keys().map(|s| (s.clone(), from.flip())))
        .collect()
}

pub fn build_graph(c: &BiCharSet, g: &GammaSupports) -> ResonanceGraph {
    let nodes: Vec<Node> = c
        .plus
        .iter()
        .map(|x| (x.clone(), Block::U))
        .chain(c.minus.iter().map(|x| (x.clone(), Block::V)))
        .collect();
    let index: HashMap<&Node, usize> = nodes.iter().enumerate().map(|(i, x)| (x, i)).collect();
    let from_u = shifts_from(g, Block::U);
    let from_v = shifts_from(g, Block::V);
    let adjacency: Vec<Vec<usize>> = nodes
        .par_iter()
        .map(|(x, tag)| {
            let shifts = if *tag == Block::U { &from_u } else { &from_v };
            let mut nb: Vec<usize> = shifts
                .iter()
                .filter_map(|(s, to)| index.get(&(x - s, *to)).copied())
                .collect();
            nb.sort_unstable();
            nb.dedup();
            nb
        })
        .collect();
    let mut uf = UnionFind::new(nodes.len());
    for (i, nb) in adjacency.iter().enumerate() {
        for &k in nb {
            uf.union(i, k);
        }
    }
    let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut first_of_root: HashMap<usize, usize> = HashMap::new();
    for i in 0..nodes.len() {
        let r = uf.find(i);
        let first = *first_of_root.entry(r).or_insert(i);
        by_root.entry(first).or_default().push(i);
    }
    let components: Vec<Vec<usize>> = by_root.into_values().collect();
    let mut component_of = vec![0; nodes.len()];
    for (ci, comp) in components.iter().enumerate() {
        for &i in comp {
            component_of[i] = ci;
        }
    }
    ResonanceGraph {
        nodes,
        adjacency,
        components,
        component_of,
    }
}

impl ResonanceGraph {
    pub fn max_component(&self) -> usize {
        self.components.iter().map(|c| c.len()).max().unwrap_or(0)
    }

    pub fn component_nodes(&self, ci: usize) -> Vec<&Node> {
        self.components[ci].iter().map(|&i| &self.nodes[i]).collect()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(|a| a.len()).sum::<usize>() / 2
    }

    pub fn is_symmetric(&self) -> bool {
        self.adjacency
            .iter()
            .enumerate()
            .all(|(i, nb)| nb.iter().all(|&k| self.adjacency[k].binary_search(&i).is_ok()))
    }
}

/// `max(2b, d + 2)`.
pub fn component_bound(b: usize, d: usize) -> usize {
    (2 * b).max(d + 2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentEntry {
    pub size: usize,
    pub nodes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub node_count: usize,
    pub edge_count: usize,
    pub component_count: usize,
    pub max_size: usize,
    pub bound: usize,
    pub pass: bool,
    /// Every component of size at least two; singletons are only counted.
    pub components: Vec<ComponentEntry>,
    pub violations: Vec<ComponentEntry>,
}

pub fn component_report(graph: &ResonanceGraph, b: usize, d: usize) -> ComponentReport {
    let bound = component_bound(b, d);
    let entry = |ci: usize| ComponentEntry {
        size: graph.components[ci].len(),
        nodes: graph.component_nodes(ci).into_iter().map(node_label).collect(),
    };
    let components: Vec<ComponentEntry> =
        (0..graph.components.len()).filter(|&ci| graph.components[ci].len() > 1).map(entry).collect();
    let violations: Vec<ComponentEntry> = components.iter().filter(|c| c.size > bound).cloned().collect();
    ComponentReport {
        node_count: graph.nodes.len(),
        edge_count: graph.edge_count(),
        component_count: graph.components.len(),
        max_size: graph.max_component(),
        bound,
        pass: violations.is_empty(),
        components,
        violations,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CubicCase {
    CaseA,
    CaseB,
    None,
}

fn dot(a: &[i64], b: &[i64]) -> i64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Classifies a pair of bi-characteristic nodes of the cubic equation by
/// the quadratic identity their coupling forces.
///
/// After moving `x` to the u-block (a v-node `z` is the mirror of the
/// u-node `-z`), a u–u pair with `x - y = (-e_k + e_k', j_k - j_k')` is
/// `CaseA` when `(j_k - j_k')·(j - j_k) = 0`, and a u–v pair with
/// `x - y = (-e_k - e_k', j_k + j_k')` is `CaseB` when
/// `(j - j_k)·(j - j_k') = 0`. Nodes off the bi-characteristics give `None`.
pub fn cubic_classifier(j_list: &[Vec<i64>], p: u32, x: &Node, y: &Node) -> Result<CubicCase> {
    if p != 1 {
        return Err(Error::InvalidArgument(format!("cubic classifier needs p = 1, got {p}")));
    }
    validate_support(j_list)?;
    let b = j_list.len();
    let (x, y) = match x.1 {
        Block::U => (x.clone(), y.clone()),
        Block::V => ((-&x.0, Block::U), (-&y.0, y.1.flip())),
    };
    let omega0: Vec<i64> = j_list.iter().map(|j| dot(j, j)).collect();
    if x.0.n_dot_int(&omega0) + x.0.j_sq() != 0 {
        return Ok(CubicCase::None);
    }
    let diff = &x.0 - &y.0;
    let jx = &x.0.j;
    let sub = |a: &[i64], c: &[i64]| a.iter().zip(c).map(|(u, v)| u - v).collect::<Vec<_>>();
    match y.1 {
        Block::U => {
            for k in 0..b {
                for kp in 0..b {
                    if k != kp
                        && diff == pair_shift(j_list, k, kp)
                        && dot(&sub(&j_list[k], &j_list[kp]), &sub(jx, &j_list[k])) == 0
                    {
                        return Ok(CubicCase::CaseA);
                    }
                }
            }
        }
        Block::V => {
            for k in 0..b {
                for kp in k..b {
                    if diff == kappa_shift(j_list, k, kp) && dot(&sub(jx, &j_list[k]), &sub(jx, &j_list[kp])) == 0 {
                        return Ok(CubicCase::CaseB);
                    }
                }
            }
        }
    }
    Ok(CubicCase::None)
}

/// Spatial indices of nodes carrying at least one case-b coupling inside the graph.
pub fn cubic_case_b_j_set(j_list: &[Vec<i64>], graph: &ResonanceGraph) -> Result<BTreeSet<Vec<i64>>> {
    let mut out = BTreeSet::new();
    for (i, nb) in graph.adjacency.iter().enumerate() {
        for &k in nb {
            if cubic_classifier(j_list, 1, &graph.nodes[i], &graph.nodes[k])? == CubicCase::CaseB {
                out.insert(graph.nodes[i].0.j.clone());
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mi(n: &[i64], j: &[i64]) -> ModeIndex {
        ModeIndex::new(n.to_vec(), j.to_vec())
    }

    #[test]
    fn gamma_one_mode() {
        let g = gamma_supports(&[vec![3]], 1).unwrap();
        assert_eq!(g.gpp.keys().cloned().collect::<Vec<_>>(), vec![mi(&[0], &[0])]);
        assert_eq!(g.gpm.keys().cloned().collect::<Vec<_>>(), vec![mi(&[-2], &[6])]);
        assert_eq!(g.gmp.keys().cloned().collect::<Vec<_>>(), vec![mi(&[2], &[-6])]);
    }

    #[test]
    fn gamma_two_modes() {
        let g = gamma_supports(&[vec![1], vec![3]], 1).unwrap();
        let want: BTreeSet<ModeIndex> = [mi(&[0, 0], &[0]), mi(&[-1, 1], &[-2]), mi(&[1, -1], &[2])].into();
        assert_eq!(g.gpp.keys().cloned().collect::<BTreeSet<_>>(), want);
        // gpm: kappa pairs (1,1), (1,2), (2,2)
        let want: BTreeSet<ModeIndex> = [mi(&[-2, 0], &[2]), mi(&[-1, -1], &[4]), mi(&[0, -2], &[6])].into();
        assert_eq!(g.gpm.keys().cloned().collect::<BTreeSet<_>>(), want);
        for (x, _) in &g.gpm {
            assert!(g.gmp.contains_key(&-x));
        }
    }

    #[test]
    fn gamma_witness_reproduces_shift() {
        let j = vec![vec![1, 2], vec![-2, 1], vec![0, 3]];
        let g = gamma_supports(&j, 2).unwrap();
        for (x, w) in &g.gpp {
            let mut acc = ModeIndex::zero(3, 2);
            for &(k, kp) in &w.pairs {
                acc = &acc + &pair_shift(&j, k, kp);
            }
            assert_eq!(&acc, x);
            assert!(w.pairs.len() <= 2);
        }
        for (x, w) in &g.gpm {
            let (k, kp) = w.kappa.unwrap();
            let mut acc = kappa_shift(&j, k, kp);
            for &(a, c) in &w.pairs {
                acc = &acc + &pair_shift(&j, a, c);
            }
            assert_eq!(&acc, x);
            assert!(w.pairs.len() <= 1);
        }
    }

    #[test]
    fn bichar_scan() {
        let c = bicharacteristics(&[1], 1, &TruncBox::new(4, 2), 0).unwrap();
        for x in [mi(&[-1], &[1]), mi(&[-1], &[-1]), mi(&[-4], &[2]), mi(&[-4], &[-2]), mi(&[0], &[0])] {
            assert!(c.plus.contains(&x), "{x}");
        }
        assert!(c.minus.contains(&mi(&[1], &[1])));
        assert!(c.plus.is_disjoint(&c.minus));
        // brute force
        for n in -4..=4i64 {
            for j in -2..=2i64 {
                let x = mi(&[n], &[j]);
                let on = n + j * j == 0 || -n + j * j == 0;
                assert_eq!(on, c.plus.contains(&x) || c.minus.contains(&x));
            }
        }
        let c = bicharacteristics(&[4], 1, &TruncBox::new(2, 3), 0).unwrap();
        assert!(c.plus.contains(&mi(&[-1], &[2])));
    }

    #[test]
    fn thickening_tie_break() {
        let c = bicharacteristics(&[2, 3], 2, &TruncBox::new(3, 2), 2).unwrap();
        assert!(c.plus.is_disjoint(&c.minus));
        for x in c.plus.iter().chain(&c.minus) {
            let nw = x.n_dot_int(&[2, 3]);
            let s = x.j_sq();
            let pc = (nw + s).abs() <= 2;
            let mc = (-nw + s).abs() <= 2;
            if pc && mc {
                assert_eq!(c.plus.contains(x), x.n[0] <= 0);
            }
        }
    }

    #[test]
    fn one_mode_graph() {
        let j = vec![vec![1]];
        let c = bicharacteristics(&[1], 1, &TruncBox::new(4, 2), 0).unwrap();
        let g = gamma_supports(&j, 1).unwrap();
        let graph = build_graph(&c, &g);
        assert!(graph.is_symmetric());
        let idx = |x: Node| graph.nodes.iter().position(|y| *y == x).unwrap();
        let a = idx((mi(&[-1], &[1]), Block::U));
        let b = idx((mi(&[1], &[-1]), Block::V));
        let iso = idx((mi(&[-1], &[-1]), Block::U));
        assert_eq!(graph.component_of[a], graph.component_of[b]);
        assert_eq!(graph.components[graph.component_of[a]].len(), 2);
        assert_eq!(graph.components[graph.component_of[iso]].len(), 1);
        let rep = component_report(&graph, 1, 1);
        assert_eq!(rep.max_size, 2);
        assert_eq!(rep.bound, 3);
        assert!(rep.pass);
    }

    #[test]
    fn empty_graph() {
        let c = BiCharSet::empty(vec![1], 0);
        let g = gamma_supports(&[vec![1]], 1).unwrap();
        let graph = build_graph(&c, &g);
        assert!(graph.nodes.is_empty() && graph.components.is_empty());
    }

    #[test]
    fn cubic_one_mode() {
        let j = vec![vec![1]];
        let mut u_side = BTreeSet::new();
        let mut v_side = BTreeSet::new();
        for n in -6..=6i64 {
            for jj in -5..=5i64 {
                for (tag, set) in [(Block::U, &mut u_side), (Block::V, &mut v_side)] {
                    let x = (mi(&[n], &[jj]), tag);
                    for m in -6..=6i64 {
                        for jy in -12..=12i64 {
                            let y = (mi(&[m], &[jy]), tag.flip());
                            if cubic_classifier(&j, 1, &x, &y).unwrap() == CubicCase::CaseB {
                                set.insert(jj);
                            }
                        }
                    }
                }
            }
        }
        assert_eq!(v_side, BTreeSet::from([-1]));
        assert_eq!(u_side, BTreeSet::from([1]));
    }

    #[test]
    fn cubic_rectangle() {
        let j = vec![vec![1, 0], vec![0, 1]];
        let x = (mi(&[-1, -1], &[1, 1]), Block::U);
        let y = (mi(&[0, 0], &[0, 0]), Block::V);
        assert_eq!(cubic_classifier(&j, 1, &x, &y).unwrap(), CubicCase::CaseB);
        // (j - j_1)·(j - j_2) = (0,1)·(1,0) = 0, a rectangle with corners 0, j_1, j_2, j
        let far = (mi(&[3, 0], &[5, 5]), Block::V);
        assert_eq!(cubic_classifier(&j, 1, &x, &far).unwrap(), CubicCase::None);
        assert!(cubic_classifier(&j, 2, &x, &y).is_err());
    }

    #[test]
    fn cubic_case_a() {
        let j = vec![vec![1, 0], vec![0, 1]];
        // x = (-e_1, j_1) and y = x - (-e_1 + e_2, j_1 - j_2) = (-e_2, j_2)
        let x = (mi(&[-1, 0], &[1, 0]), Block::U);
        let y = (mi(&[0, -1], &[0, 1]), Block::U);
        assert_eq!(cubic_classifier(&j, 1, &x, &y).unwrap(), CubicCase::CaseA);
        let xv = (mi(&[1, 0], &[-1, 0]), Block::V);
        let yv = (mi(&[0, 1], &[0, -1]), Block::V);
        assert_eq!(cubic_classifier(&j, 1, &xv, &yv).unwrap(), CubicCase::CaseA);
    }

    #[test]
    fn cubic_d1_graph_set() {
        let j = vec![vec![2], vec![-5], vec![3]];
        let omega0: Vec<i64> = j.iter().map(|v| v[0] * v[0]).collect();
        let c = bicharacteristics(&omega0, 1, &TruncBox::new(3, 8), 0).unwrap();
        let graph = build_graph(&c, &gamma_supports(&j, 1).unwrap());
        let got = cubic_case_b_j_set(&j, &graph).unwrap();
        let want: BTreeSet<Vec<i64>> = j.iter().flat_map(|v| [v.clone(), vec![-v[0]]]).collect();
        assert_eq!(got, want);
    }
}
