//! The linearized operator `F' = D + A` on a finite node set, its Schur
//! reduction onto the near-resonant nodes, block structure and inverse
//! diagnostics.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{convolve, diagonal_symbol, FourierSeq, ProductPowers, SolverState, TailSpec};
use crate::lattice::{box_enumerate_capped, ModeIndex, TruncBox, DEFAULT_BOX_CAP};
use crate::resonance::{node_label, Block, Node, ResonanceGraph, UnionFind};

/// Largest node set handed to a dense factorization.
pub const DENSE_LIMIT: usize = 4000;

/// Kernel entries below this fraction of the largest one are dropped.
const KERNEL_PRUNE: f64 = 1e-17;

/// Convolution kernels of the linearization: row block u sees `uu` and `uv`,
/// row block v sees `vu` and `uu`.
#[derive(Debug, Clone)]
pub struct Kernels {
    pub uu: FourierSeq,
    pub uv: FourierSeq,
    pub vu: FourierSeq,
}

impl Kernels {
    fn entries(&self, row: Block) -> [(&FourierSeq, Block); 2] {
        match row {
            Block::U => [(&self.uu, Block::U), (&self.uv, Block::V)],
            Block::V => [(&self.vu, Block::U), (&self.uu, Block::V)],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.uu.is_empty() && self.uv.is_empty() && self.vu.is_empty()
    }
}

fn real(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

fn pruned(mut f: FourierSeq) -> FourierSeq {
    let top = f.sup_norm();
    f.prune(top * KERNEL_PRUNE);
    f
}

/// Exact derivative kernels of the nonlinearity, tail included.
pub fn kernels(state: &SolverState, tail: &TailSpec) -> Result<Kernels> {
    let (b, d) = (state.u.b(), state.u.d());
    if state.u.is_empty() {
        let z = FourierSeq::zero(b, d);
        return Ok(Kernels {
            uu: z.clone(),
            uv: z.clone(),
            vu: z,
        });
    }
    let p = state.p;
    let pw = ProductPowers::new(state, tail)?;
    let uu_sq = convolve(&state.u, &state.u)?;
    let vv_sq = convolve(&state.v, &state.v)?;
    let c0 = state.coupling();
    let mut uu = pw.get(p).scale(real(c0 * (p + 1) as f64));
    let mut uv = convolve(pw.get(p - 1), &uu_sq)?.scale(real(c0 * p as f64));
    let mut vu = convolve(pw.get(p - 1), &vv_sq)?.scale(real(c0 * p as f64));
    for (m, alpha) in tail.alphas.iter().enumerate() {
        if alpha.is_empty() {
            continue;
        }
        let q = p + m as u32 + 1;
        let c = state.delta.powi(2 * q as i32);
        let a_pq = convolve(alpha, pw.get(q))?;
        let a_pq1 = convolve(alpha, pw.get(q - 1))?;
        uu = uu.add(&a_pq.scale(real(c * (q + 1) as f64)));
        uv = uv.add(&convolve(&a_pq1, &uu_sq)?.scale(real(c * q as f64)));
        vu = vu.add(&convolve(&a_pq1, &vv_sq)?.scale(real(c * q as f64)));
    }
    Ok(Kernels {
        uu: pruned(uu),
        uv: pruned(uv),
        vu: pruned(vu),
    })
}

/// `F'` restricted to an ordered node list: diagonal plus sparse convolution rows.
#[derive(Debug, Clone)]
pub struct OperatorMatrix {
    pub basis: Vec<Node>,
    pub index: HashMap<Node, usize>,
    pub diag: Vec<f64>,
    /// Row-wise off-diagonal and diagonal convolution entries `(column, value)`.
    pub conv: Vec<Vec<(usize, Complex64)>>,
    pub theta: f64,
    pub delta: f64,
    pub p: u32,
}

pub fn box_nodes(bx: &TruncBox, b: usize, d: usize) -> Result<Vec<Node>> {
    let pts = box_enumerate_capped(bx, b, d, DEFAULT_BOX_CAP / 2)?;
    Ok(pts
        .iter()
        .map(|x| (x.clone(), Block::U))
        .chain(pts.iter().map(|x| (x.clone(), Block::V)))
        .collect())
}

/// Assembles `F'` over every node of the box, with `+theta` on the u-block
/// diagonal and `-theta` on the v-block.
pub fn assemble(state: &SolverState, tail: &TailSpec, bx: &TruncBox, theta: f64) -> Result<OperatorMatrix> {
    let nodes = box_nodes(bx, state.u.b(), state.d())?;
    assemble_on(state, tail, nodes, theta)
}

pub fn assemble_on(state: &SolverState, tail: &TailSpec, nodes: Vec<Node>, theta: f64) -> Result<OperatorMatrix> {
    let k = kernels(state, tail)?;
    Ok(assemble_with(state, &k, nodes, theta))
}

pub fn assemble_with(state: &SolverState, k: &Kernels, nodes: Vec<Node>, theta: f64) -> OperatorMatrix {
    let index: HashMap<Node, usize> = nodes.iter().enumerate().map(|(i, x)| (x.clone(), i)).collect();
    let w0 = state.omega0();
    let diag: Vec<f64> = nodes
        .iter()
        .map(|(x, blk)| {
            let conj = *blk == Block::V;
            diagonal_symbol(x, &w0, &state.omega_shift, state.phase, conj) + if conj { -theta } else { theta }
        })
        .collect();
    let conv: Vec<Vec<(usize, Complex64)>> = nodes
        .par_iter()
        .map(|(x, blk)| {
            let mut row = Vec::new();
            for (kern, col_blk) in k.entries(*blk) {
                for (s, c) in kern.iter() {
                    if let Some(&j) = index.get(&(x - s, col_blk)) {
                        row.push((j, *c));
                    }
                }
            }
            row.sort_by_key(|e| e.0);
            row
        })
        .collect();
    OperatorMatrix {
        basis: nodes,
        index,
        diag,
        conv,
        theta,
        delta: state.delta,
        p: state.p,
    }
}

impl OperatorMatrix {
    pub fn len(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        let c = self.conv[i]
            .binary_search_by_key(&j, |e| e.0)
            .map(|pos| self.conv[i][pos].1)
            .unwrap_or_default();
        if i == j {
            c + self.diag[i]
        } else {
            c
        }
    }

    pub fn to_dense(&self) -> DMatrix<Complex64> {
        self.submatrix(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Dense restriction to the listed rows and columns, in that order.
    pub fn submatrix(&self, idx: &[usize]) -> DMatrix<Complex64> {
        let pos: HashMap<usize, usize> = idx.iter().enumerate().map(|(a, &i)| (i, a)).collect();
        let mut m = DMatrix::zeros(idx.len(), idx.len());
        for (a, &i) in idx.iter().enumerate() {
            m[(a, a)] += self.diag[i];
            for &(j, c) in &self.conv[i] {
                if let Some(&bcol) = pos.get(&j) {
                    m[(a, bcol)] += c;
                }
            }
        }
        m
    }

    pub fn matvec(&self, x: &[Complex64]) -> Vec<Complex64> {
        (0..self.len())
            .into_par_iter()
            .map(|i| self.diag[i] * x[i] + self.conv[i].iter().map(|&(j, c)| c * x[j]).sum::<Complex64>())
            .collect()
    }

    /// `max |M - M^†|` over stored entries.
    pub fn hermitian_deviation(&self) -> f64 {
        (0..self.len())
            .into_par_iter()
            .map(|i| {
                self.conv[i]
                    .iter()
                    .map(|&(j, _)| (self.get(i, j) - self.get(j, i).conj()).norm())
                    .fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max)
    }

    /// Connected components of the sparsity graph, each sorted, ordered by smallest index.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut uf = UnionFind::new(self.len());
        for (i, row) in self.conv.iter().enumerate() {
            for &(j, c) in row {
                if c != Complex64::default() {
                    uf.union(i, j);
                }
            }
        }
        let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut first: HashMap<usize, usize> = HashMap::new();
        for i in 0..self.len() {
            let r = uf.find(i);
            let f = *first.entry(r).or_insert(i);
            by_root.entry(f).or_default().push(i);
        }
        by_root.into_values().collect()
    }

    /// Nodes whose unperturbed symbol `±n·omega0 + |j|^2 + phase` is within `mu` of zero.
    pub fn resonant_mask(&self, omega0: &[i64], phase: f64, mu: f64) -> Vec<bool> {
        let zero = vec![0.0; omega0.len()];
        self.basis
            .iter()
            .map(|(x, blk)| diagonal_symbol(x, omega0, &zero, phase, *blk == Block::V).abs() <= mu)
            .collect()
    }
}

/// Nodes reachable from `seeds` through the kernel supports, never leaving
/// `bx` and never entering `exclude`.
pub fn reachable(
    k: &Kernels,
    seeds: impl IntoIterator<Item = Node>,
    bx: &TruncBox,
    exclude: &HashSet<Node>,
    cap: usize,
) -> Result<Vec<Node>> {
    let mut seen: HashSet<Node> = HashSet::new();
    let mut queue = VecDeque::new();
    for s in seeds {
        if bx.contains(&s.0) && !exclude.contains(&s) && seen.insert(s.clone()) {
            queue.push_back(s);
        }
    }
    let neg = |f: &FourierSeq| f.support().map(|s| -s).collect::<Vec<_>>();
    // columns reached from a row: y = x - s; rows reached from a column: x = y + s
    let out_u: Vec<(ModeIndex, Block)> = k
        .uu
        .support()
        .map(|s| (s.clone(), Block::U))
        .chain(k.uv.support().map(|s| (s.clone(), Block::V)))
        .chain(neg(&k.uu).into_iter().map(|s| (s, Block::U)))
        .chain(neg(&k.vu).into_iter().map(|s| (s, Block::V)))
        .collect();
    let out_v: Vec<(ModeIndex, Block)> = k
        .vu
        .support()
        .map(|s| (s.clone(), Block::U))
        .chain(k.uu.support().map(|s| (s.clone(), Block::V)))
        .chain(neg(&k.uv).into_iter().map(|s| (s, Block::U)))
        .chain(neg(&k.uu).into_iter().map(|s| (s, Block::V)))
        .collect();
    while let Some((x, blk)) = queue.pop_front() {
        let shifts = if blk == Block::U { &out_u } else { &out_v };
        for (s, to) in shifts {
            let y = (&x - s, *to);
            if bx.contains(&y.0) && !exclude.contains(&y) && seen.insert(y.clone()) {
                if seen.len() > cap {
                    return Err(Error::Capacity {
                        what: "reachable node set",
                        needed: seen.len() as u128,
                        limit: cap as u128,
                    });
                }
                queue.push_back(y);
            }
        }
    }
    let mut out: Vec<Node> = seen.into_iter().collect();
    out.sort();
    Ok(out)
}

/// Hermitian eigenvalues, ascending.
fn all_finite(m: &DMatrix<Complex64>) -> bool {
    m.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// Eigenvalues in ascending order; NaN entries give a NaN spectrum.
pub fn hermitian_eigenvalues(m: &DMatrix<Complex64>) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    if !all_finite(m) {
        return vec![f64::NAN; m.nrows()];
    }
    let mut ev: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn min_singular_value(m: &DMatrix<Complex64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    if !all_finite(m) {
        return f64::NAN;
    }
    m.singular_values().iter().copied().fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone)]
pub struct SchurReduction {
    /// Nodes of the P-space, as indices into the operator basis.
    pub p_nodes: Vec<usize>,
    pub h: DMatrix<Complex64>,
    /// Spectral norm of `P F' P^c (P^c F' P^c - lambda)^{-1} P^c F' P`.
    pub correction_norm: f64,
}

/// `H = P F' P - lambda - P F' P^c (P^c F' P^c - lambda)^{-1} P^c F' P`.
pub fn schur_reduce(op: &OperatorMatrix, lambda: f64, p_mask: &[bool]) -> Result<SchurReduction> {
    if p_mask.len() != op.len() {
        return Err(Error::DimensionMismatch(format!(
            "P mask has {} entries for {} nodes",
            p_mask.len(),
            op.len()
        )));
    }
    let p_idx: Vec<usize> = (0..op.len()).filter(|&i| p_mask[i]).collect();
    let q_idx: Vec<usize> = (0..op.len()).filter(|&i| !p_mask[i]).collect();
    let full = op.to_dense();
    let pick = |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |a, b| full[(rows[a], cols[b])]);
    let mut h = pick(&p_idx, &p_idx);
    for i in 0..p_idx.len() {
        h[(i, i)] -= lambda;
    }
    if q_idx.is_empty() || p_idx.is_empty() {
        return Ok(SchurReduction {
            p_nodes: p_idx,
            h,
            correction_norm: 0.0,
        });
    }
    let mut qq = pick(&q_idx, &q_idx);
    for i in 0..q_idx.len() {
        qq[(i, i)] -= lambda;
    }
    let qp = pick(&q_idx, &p_idx);
    let pq = pick(&p_idx, &q_idx);
    let lu = qq.clone().lu();
    let sol = lu.solve(&qp).ok_or_else(|| Error::Singular {
        context: "P^c block of the Schur reduction".into(),
        sigma_min: min_singular_value(&qq),
        null_vector: None,
    })?;
    let corr = &pq * sol;
    let correction_norm = if corr.nrows() == 0 { 0.0 } else { corr.clone().singular_values().max() };
    h -= corr;
    Ok(SchurReduction {
        p_nodes: p_idx,
        h,
        correction_norm,
    })
}

#[derive(Debug, Clone)]
pub struct BlockDecomposition {
    /// `(operator indices, dense submatrix)` per block of the P-space.
    pub blocks: Vec<(Vec<usize>, DMatrix<Complex64>)>,
    pub p_nodes: Vec<usize>,
    pub max_off_block: f64,
}

impl BlockDecomposition {
    pub fn sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.0.len()).collect()
    }

    pub fn determinants(&self) -> Vec<Complex64> {
        self.blocks.iter().map(|b| b.1.clone().determinant()).collect()
    }
}

pub const OFF_BLOCK_TOL: f64 = 1e-14;

/// Splits the P-space along the components of `graph`; P-nodes absent from
/// the graph become singleton blocks.
pub fn block_decompose(op: &OperatorMatrix, p_mask: &[bool], graph: &ResonanceGraph) -> Result<BlockDecomposition> {
    let p_nodes: Vec<usize> = (0..op.len()).filter(|&i| p_mask[i]).collect();
    let mut block_of: HashMap<usize, usize> = HashMap::new();
    let mut blocks_idx: Vec<Vec<usize>> = Vec::new();
    for comp in &graph.components {
        let idx: Vec<usize> = comp
            .iter()
            .filter_map(|&g| op.index.get(&graph.nodes[g]).copied())
            .filter(|&i| p_mask[i])
            .collect();
        if idx.is_empty() {
            continue;
        }
        for &i in &idx {
            block_of.insert(i, blocks_idx.len());
        }
        blocks_idx.push(idx);
    }
    for &i in &p_nodes {
        if let std::collections::hash_map::Entry::Vacant(e) = block_of.entry(i) {
            e.insert(blocks_idx.len());
            blocks_idx.push(vec![i]);
        }
    }
    let mut max_off = 0.0f64;
    for &i in &p_nodes {
        for &(j, c) in &op.conv[i] {
            if p_mask[j] && block_of[&i] != block_of[&j] {
                max_off = max_off.max(c.norm());
            }
        }
    }
    if max_off > OFF_BLOCK_TOL {
        return Err(Error::Structure(format!(
            "P-space entry of size {max_off:e} couples two graph components"
        )));
    }
    let blocks = blocks_idx.into_iter().map(|idx| {
        let m = op.submatrix(&idx);
        (idx, m)
    });
    Ok(BlockDecomposition {
        blocks: blocks.collect(),
        p_nodes,
        max_off_block: max_off,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InverseDiagnostics {
    pub inv_norm: f64,
    pub sigma_min: f64,
    /// Largest grid value `beta` with `|inv(x,y)| <= delta^(beta |x-y|)` for all `|x-y| > 1/beta^2`,
    /// counting a `beta` with no pair beyond `1/beta^2` as satisfied.
    pub beta_hat: Option<f64>,
    /// Same, over the `beta` values that test at least one pair.
    pub beta_tested: Option<f64>,
    /// Pairs beyond `1/beta_hat^2`.
    pub tested_pairs: usize,
    /// `max |inv(x,y)| / delta^(beta |x-y|)` over the tested pairs at `beta_tested`.
    pub max_ratio: f64,
    pub nodes: usize,
    pub largest_component: usize,
}

pub const BETA_GRID: [f64; 19] = [
    0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45, 0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95,
];

fn node_distance(a: &Node, b: &Node) -> f64 {
    (&a.0 - &b.0).norm()
}

/// Inverse norm and off-diagonal decay of `F' - lambda`, computed exactly
/// per connected component.
pub fn inverse_diagnostics(op: &OperatorMatrix, lambda: f64) -> Result<InverseDiagnostics> {
    let comps = op.components();
    let largest = comps.iter().map(|c| c.len()).max().unwrap_or(0);
    if largest > DENSE_LIMIT {
        return Err(Error::Capacity {
            what: "dense component for inverse diagnostics",
            needed: largest as u128,
            limit: DENSE_LIMIT as u128,
        });
    }
    struct Part {
        sigma_min: f64,
        // (distance, |inv|) for off-diagonal pairs
        pairs: Vec<(f64, f64)>,
    }
    let parts: Vec<Result<Part>> = comps
        .par_iter()
        .map(|idx| {
            let mut m = op.submatrix(idx);
            for i in 0..idx.len() {
                m[(i, i)] -= lambda;
            }
            let smin = min_singular_value(&m);
            let inv = m.clone().try_inverse().filter(|_| smin > 0.0).ok_or_else(|| Error::Singular {
                context: format!("component of {} nodes at lambda = {lambda}", idx.len()),
                sigma_min: smin,
                null_vector: Some(null_vector(&m)),
            })?;
            let mut pairs = Vec::new();
            for a in 0..idx.len() {
                for b in 0..idx.len() {
                    if a != b {
                        pairs.push((node_distance(&op.basis[idx[a]], &op.basis[idx[b]]), inv[(a, b)].norm()));
                    }
                }
            }
            Ok(Part { sigma_min: smin, pairs })
        })
        .collect();
    let mut sigma_min = f64::INFINITY;
    let mut pairs = Vec::new();
    for p in parts {
        let p = p?;
        sigma_min = sigma_min.min(p.sigma_min);
        pairs.extend(p.pairs);
    }
    let fit = fit_decay(&pairs, op.delta);
    Ok(InverseDiagnostics {
        inv_norm: 1.0 / sigma_min,
        sigma_min,
        beta_hat: fit.beta_hat,
        beta_tested: fit.beta_tested,
        tested_pairs: fit.tested_pairs,
        max_ratio: fit.max_ratio,
        nodes: op.len(),
        largest_component: largest,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub beta_hat: Option<f64>,
    pub beta_tested: Option<f64>,
    pub tested_pairs: usize,
    pub max_ratio: f64,
}

/// Grid search for the decay exponent over `(distance, |inv|)` pairs.
pub fn fit_decay(pairs: &[(f64, f64)], delta: f64) -> DecayFit {
    let mut fit = DecayFit {
        beta_hat: None,
        beta_tested: None,
        tested_pairs: 0,
        max_ratio: 0.0,
    };
    for &beta in &BETA_GRID {
        let r0 = 1.0 / (beta * beta);
        let tested: Vec<f64> = pairs
            .iter()
            .filter(|(r, _)| *r > r0)
            .map(|(r, v)| v / delta.powf(beta * r))
            .collect();
        let worst = tested.iter().copied().fold(0.0, f64::max);
        if worst > 1.0 {
            continue;
        }
        fit.beta_hat = Some(beta);
        fit.tested_pairs = tested.len();
        if !tested.is_empty() {
            fit.beta_tested = Some(beta);
            fit.max_ratio = worst;
        }
    }
    fit
}

fn null_vector(m: &DMatrix<Complex64>) -> Vec<(f64, f64)> {
    let svd = m.clone().svd(false, true);
    let Some(vt) = svd.v_t else {
        return Vec::new();
    };
    let k = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    vt.row(k).iter().map(|c| (c.re, -c.im)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThetaSweep {
    pub thetas: usize,
    pub threshold: f64,
    pub bad: usize,
    pub bad_fraction: f64,
    pub worst_theta: f64,
    pub worst_inv_norm: f64,
}

/// Inverse norm of `F'(theta)` along a theta grid; `theta` counts as bad when
/// the norm exceeds `threshold`.
pub fn theta_sweep(state: &SolverState, tail: &TailSpec, bx: &TruncBox, thetas: &[f64], threshold: f64) -> Result<ThetaSweep> {
    if thetas.is_empty() {
        return Err(Error::InvalidArgument("theta grid is empty".into()));
    }
    let base = assemble(state, tail, bx, 0.0)?;
    let comps = base.components();
    let largest = comps.iter().map(|c| c.len()).max().unwrap_or(0);
    if largest > DENSE_LIMIT / 4 {
        return Err(Error::Capacity {
            what: "dense component for theta sweep",
            needed: largest as u128,
            limit: (DENSE_LIMIT / 4) as u128,
        });
    }
    let mats: Vec<(DMatrix<Complex64>, Vec<f64>)> = comps
        .iter()
        .map(|idx| {
            let sign = idx.iter().map(|&i| if base.basis[i].1 == Block::U { 1.0 } else { -1.0 }).collect();
            (base.submatrix(idx), sign)
        })
        .collect();
    let smin_at = |k: usize, th: f64| {
        let (m, sign) = &mats[k];
        let mut mt = m.clone();
        for (i, s) in sign.iter().enumerate() {
            mt[(i, i)] += s * th;
        }
        hermitian_eigenvalues(&mt).iter().map(|x| x.abs()).fold(f64::INFINITY, f64::min)
    };
    // The smallest |eigenvalue| of each block is 1-Lipschitz in theta, so exact
    // values at anchor points bound it nearby and prune most blocks.
    const ANCHOR_SPACING: f64 = 0.01;
    let (lo, hi) = thetas.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &t| (a.min(t), b.max(t)));
    let n_anchor = ((hi - lo) / ANCHOR_SPACING).ceil() as usize + 1;
    let anchors: Vec<f64> = (0..n_anchor).map(|i| lo + i as f64 * ANCHOR_SPACING).collect();
    let at_anchor: Vec<Vec<f64>> = anchors
        .par_iter()
        .map(|&a| (0..mats.len()).map(|k| smin_at(k, a)).collect())
        .collect();
    let norms: Vec<f64> = thetas
        .par_iter()
        .map(|&th| {
            let ai = (((th - lo) / ANCHOR_SPACING).round() as usize).min(n_anchor - 1);
            let dist = (th - anchors[ai]).abs();
            let base_s = &at_anchor[ai];
            let upper = base_s.iter().fold(f64::INFINITY, |m, &s| m.min(s + dist));
            let smin = (0..mats.len())
                .filter(|&k| base_s[k] - dist <= upper)
                .map(|k| smin_at(k, th))
                .fold(f64::INFINITY, f64::min);
            1.0 / smin
        })
        .collect();
    let bad = norms.iter().filter(|&&n| n > threshold).count();
    let (wi, wn) = norms
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, &n)| (i, n))
        .expect("non-empty grid");
    Ok(ThetaSweep {
        thetas: thetas.len(),
        threshold,
        bad,
        bad_fraction: bad as f64 / thetas.len() as f64,
        worst_theta: thetas[wi],
        worst_inv_norm: wn,
    })
}

/// Writes every nonzero entry as `row<TAB>column<TAB>re<TAB>im`, nodes as `u[n|j]` / `v[n|j]`.
pub fn export_triplets(op: &OperatorMatrix, out: &mut impl Write) -> Result<()> {
    for i in 0..op.len() {
        let mut cols: Vec<usize> = op.conv[i].iter().map(|e| e.0).collect();
        if !cols.contains(&i) {
            cols.push(i);
        }
        cols.sort_unstable();
        for j in cols {
            let c = op.get(i, j);
            if c != Complex64::default() {
                writeln!(
                    out,
                    "{}\t{}\t{:e}\t{:e}",
                    node_label(&op.basis[i]),
                    node_label(&op.basis[j]),
                    c.re,
                    c.im
                )?;
            }
        }
    }
    Ok(())
}

pub fn parse_node(s: &str) -> Result<Node> {
    let bad = || Error::InvalidArgument(format!("malformed node label {s:?}"));
    let blk = match s.chars().next() {
        Some('u') => Block::U,
        Some('v') => Block::V,
        _ => return Err(bad()),
    };
    let body = s[1..].strip_prefix('[').and_then(|r| r.strip_suffix(']')).ok_or_else(bad)?;
    let (n, j) = body.split_once('|').ok_or_else(bad)?;
    let ints = |t: &str| -> Result<Vec<i64>> { t.split_whitespace().map(|x| x.parse().map_err(|_| bad())).collect() };
    Ok((ModeIndex::new(ints(n)?, ints(j)?), blk))
}

pub fn parse_triplets(input: impl BufRead) -> Result<Vec<(Node, Node, Complex64)>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::InvalidArgument(format!("expected 4 tab-separated fields: {line:?}")));
        }
        let num = |t: &str| -> Result<f64> {
            t.parse().map_err(|_| Error::InvalidArgument(format!("bad number {t:?}")))
        };
        out.push((parse_node(f[0])?, parse_node(f[1])?, Complex64::new(num(f[2])?, num(f[3])?)));
    }
    Ok(out)
}

/// Solves `M x = r` on the listed operator, densely.
pub fn dense_solve(op: &OperatorMatrix, rhs: &[Complex64]) -> Result<Vec<Complex64>> {
    let m = op.to_dense();
    let b = DVector::from_column_slice(rhs);
    let lu = m.clone().lu();
    match lu.solve(&b) {
        Some(x) if x.iter().all(|c| c.is_finite()) => Ok(x.iter().copied().collect()),
        _ => Err(Error::Singular {
            context: format!("dense P-step system of {} nodes", op.len()),
            sigma_min: min_singular_value(&m),
            null_vector: Some(null_vector(&m)),
        }),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockSolveInfo {
    pub iterations: usize,
    pub resonant_blocks: usize,
    pub largest_block: usize,
    pub min_block_sigma: f64,
    pub relative_residual: f64,
}

/// Block Jacobi solve: dense blocks on clusters of near-resonant nodes
/// (`|diag| <= 1/2`), scalar diagonal elsewhere.
pub fn block_solve(op: &OperatorMatrix, rhs: &[Complex64], tol: f64, max_iter: usize) -> Result<(Vec<Complex64>, BlockSolveInfo)> {
    let n = op.len();
    let resonant: Vec<bool> = op.diag.iter().map(|d| d.abs() <= 0.5).collect();
    let mut uf = UnionFind::new(n);
    for i in (0..n).filter(|&i| resonant[i]) {
        for &(j, c) in &op.conv[i] {
            if resonant[j] && c != Complex64::default() {
                uf.union(i, j);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let key = if resonant[i] { uf.find(i) } else { i };
        groups.entry(key).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = groups.into_values().collect();
    let largest = groups.iter().map(|g| g.len()).max().unwrap_or(0);
    if largest > DENSE_LIMIT {
        return Err(Error::Capacity {
            what: "resonant cluster",
            needed: largest as u128,
            limit: DENSE_LIMIT as u128,
        });
    }
    enum Local {
        Scalar(usize, Complex64),
        Dense(Vec<usize>, nalgebra::LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>),
    }
    let mut min_sigma = f64::INFINITY;
    let mut resonant_blocks = 0;
    let mut locals = Vec::with_capacity(groups.len());
    for g in groups {
        if g.len() == 1 && !resonant[g[0]] {
            let i = g[0];
            locals.push(Local::Scalar(i, op.get(i, i)));
            continue;
        }
        resonant_blocks += 1;
        let m = op.submatrix(&g);
        let s = min_singular_value(&m);
        min_sigma = min_sigma.min(s);
        if !(s > 0.0) {
            return Err(Error::Singular {
                context: format!("resonant block of {} nodes", g.len()),
                sigma_min: s,
                null_vector: Some(null_vector(&m)),
            });
        }
        locals.push(Local::Dense(g, m.lu()));
    }
    for l in &locals {
        if let Local::Scalar(i, d) = l {
            if d.norm() == 0.0 {
                return Err(Error::Singular {
                    context: format!("zero diagonal at {}", node_label(&op.basis[*i])),
                    sigma_min: 0.0,
                    null_vector: None,
                });
            }
        }
    }
    let rnorm = rhs.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    let mut x = vec![Complex64::default(); n];
    if rnorm == 0.0 {
        return Ok((
            x,
            BlockSolveInfo {
                iterations: 0,
                resonant_blocks,
                largest_block: largest,
                min_block_sigma: min_sigma,
                relative_residual: 0.0,
            },
        ));
    }
    let mut rel = f64::INFINITY;
    for it in 1..=max_iter {
        let mx = op.matvec(&x);
        let r: Vec<Complex64> = rhs.iter().zip(&mx).map(|(a, b)| a - b).collect();
        rel = r.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt() / rnorm;
        if rel <= tol {
            return Ok((
                x,
                BlockSolveInfo {
                    iterations: it - 1,
                    resonant_blocks,
                    largest_block: largest,
                    min_block_sigma: min_sigma,
                    relative_residual: rel,
                },
            ));
        }
        if !rel.is_finite() || rel > 1e12 {
            break;
        }
        // block correction: x_B += M_BB^{-1} r_B
        let updates: Vec<(Vec<usize>, Vec<Complex64>)> = locals
            .par_iter()
            .map(|l| match l {
                Local::Scalar(i, d) => (vec![*i], vec![r[*i] / d]),
                Local::Dense(g, lu) => {
                    let rb = DVector::from_iterator(g.len(), g.iter().map(|&i| r[i]));
                    let dx = lu.solve(&rb).expect("nonsingular block");
                    (g.clone(), dx.iter().copied().collect())
                }
            })
            .collect();
        for (g, dx) in updates {
            for (i, v) in g.into_iter().zip(dx) {
                x[i] += v;
            }
        }
    }
    Err(Error::Excised {
        step: 0,
        test: crate::error::ExcisionTest::Divergence,
        detail: format!("block iteration stalled at relative residual {rel:e}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::build_initial;
    use crate::resonance::{bicharacteristics, build_graph, gamma_supports};

    fn mi(n: &[i64], j: &[i64]) -> ModeIndex {
        ModeIndex::new(n.to_vec(), j.to_vec())
    }

    #[test]
    fn zero_amplitude_is_diagonal() {
        let mut s = build_initial(&[0.5], &[vec![1]], 0.1, 1).unwrap();
        s.u = FourierSeq::zero(1, 1);
        s.v = FourierSeq::zero(1, 1);
        let op = assemble(&s, &TailSpec::none(), &TruncBox::new(2, 2), 0.0).unwrap();
        assert!(op.conv.iter().all(|r| r.is_empty()));
        let m = op.to_dense();
        for i in 0..op.len() {
            assert_eq!(m[(i, i)].re, op.diag[i]);
        }
    }

    #[test]
    fn one_mode_block() {
        let (a, delta) = (0.6, 0.1);
        let s = build_initial(&[a], &[vec![1]], delta, 1).unwrap();
        let op = assemble(&s, &TailSpec::none(), &TruncBox::new(4, 2), 0.0).unwrap();
        let iu = op.index[&(mi(&[-1], &[1]), Block::U)];
        let iv = op.index[&(mi(&[1], &[-1]), Block::V)];
        let c = delta * delta;
        let a2 = a * a;
        assert!((op.get(iu, iu).re - op.diag[iu] - 2.0 * c * a2).abs() < 1e-15);
        assert!((op.get(iu, iv) - Complex64::new(c * a2, 0.0)).norm() < 1e-15);
        assert!((op.get(iv, iu) - Complex64::new(c * a2, 0.0)).norm() < 1e-15);
        let mut blk = op.submatrix(&[iu, iv]);
        for i in 0..2 {
            blk[(i, i)] -= op.diag[[iu, iv][i]];
        }
        let ev = hermitian_eigenvalues(&(blk / Complex64::new(c, 0.0)));
        assert!((ev[0] - a2).abs() < 1e-12 && (ev[1] - 3.0 * a2).abs() < 1e-12);
        assert!(op.hermitian_deviation() < 1e-12);
    }

    #[test]
    fn theta_sweep_matches_dense() {
        let s = build_initial(&[0.6, 0.3], &[vec![1], vec![-2]], 0.3, 1).unwrap();
        let bx = TruncBox::new(1, 3);
        let thetas: Vec<f64> = (0..=40).map(|i| i as f64 * 0.025).collect();
        let sw = theta_sweep(&s, &TailSpec::none(), &bx, &thetas, 5.0).unwrap();
        let mut worst: f64 = 0.0;
        let mut bad = 0;
        for &th in &thetas {
            let m = assemble(&s, &TailSpec::none(), &bx, th).unwrap().to_dense();
            let smin = hermitian_eigenvalues(&m).iter().map(|x| x.abs()).fold(f64::INFINITY, f64::min);
            worst = worst.max(1.0 / smin);
            bad += (1.0 / smin > 5.0) as usize;
        }
        assert_eq!(sw.bad, bad);
        assert!((sw.worst_inv_norm - worst).abs() <= 1e-9 * worst);
    }

    #[test]
    fn theta_shifts_diagonal() {
        let s = build_initial(&[0.4, 0.7], &[vec![1, 0], vec![0, 2]], 0.1, 1).unwrap();
        let bx = TruncBox::new(1, 1);
        let a = assemble(&s, &TailSpec::none(), &bx, 0.0).unwrap();
        let b = assemble(&s, &TailSpec::none(), &bx, 0.3).unwrap();
        for (i, (_, blk)) in a.basis.iter().enumerate() {
            let want = if *blk == Block::U { 0.3 } else { -0.3 };
            assert!((b.diag[i] - a.diag[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn hermitian_with_tail() {
        let alpha = FourierSeq::from_pairs(
            2,
            1,
            [
                (mi(&[0, 0], &[0]), Complex64::new(0.5, 0.0)),
                (mi(&[0, 0], &[1]), Complex64::new(0.1, 0.05)),
                (mi(&[0, 0], &[-1]), Complex64::new(0.1, -0.05)),
            ],
        );
        let tail = TailSpec::new(vec![alpha], 1.0, 1.0).unwrap();
        let s = build_initial(&[0.5, 0.3], &[vec![1], vec![-2]], 0.2, 2).unwrap();
        let op = assemble(&s, &tail, &TruncBox::new(3, 5), 0.1).unwrap();
        assert!(op.hermitian_deviation() < 1e-12);
    }

    #[test]
    fn schur_decoupled() {
        let mut s = build_initial(&[0.5], &[vec![1]], 0.1, 1).unwrap();
        s.u = FourierSeq::zero(1, 1);
        s.v = FourierSeq::zero(1, 1);
        let op = assemble(&s, &TailSpec::none(), &TruncBox::new(2, 2), 0.0).unwrap();
        let mask = op.resonant_mask(&s.omega0(), 0.0, 0.0);
        let r = schur_reduce(&op, 0.1, &mask).unwrap();
        assert_eq!(r.correction_norm, 0.0);
        for (a, &i) in r.p_nodes.iter().enumerate() {
            assert!((r.h[(a, a)].re - (op.diag[i] - 0.1)).abs() < 1e-15);
        }
    }

    #[test]
    fn schur_correction_is_small() {
        let delta = 0.1;
        let s = build_initial(&[0.5], &[vec![1]], delta, 1).unwrap();
        let op = assemble(&s, &TailSpec::none(), &TruncBox::new(4, 3), 0.0).unwrap();
        let mask = op.resonant_mask(&s.omega0(), 0.0, 0.0);
        let r = schur_reduce(&op, 0.0, &mask).unwrap();
        assert!(r.correction_norm <= 10.0 * delta.powi(4), "{}", r.correction_norm);
    }

    #[test]
    fn block_decomposition_one_mode() {
        let a = 0.5;
        let s = build_initial(&[a], &[vec![1]], 0.1, 1).unwrap();
        let bx = TruncBox::new(4, 2);
        let op = assemble(&s, &TailSpec::none(), &bx, 0.0).unwrap();
        let mask = op.resonant_mask(&s.omega0(), 0.0, 0.0);
        let c = bicharacteristics(&s.omega0(), 1, &bx, 0).unwrap();
        let g = gamma_supports(&s.j_support, 1).unwrap();
        let graph = build_graph(&c, &g);
        let bd = block_decompose(&op, &mask, &graph).unwrap();
        let mut sizes = bd.sizes();
        sizes.sort_unstable();
        assert_eq!(*sizes.last().unwrap(), 2);
        let iu = op.index[&(mi(&[-1], &[1]), Block::U)];
        let blk = bd.blocks.iter().find(|b| b.0.contains(&iu)).unwrap();
        // the block minus its diagonal symbol is c * [[2a^2, a^2], [a^2, 2a^2]]
        let mut m = blk.1.clone();
        for (k, &i) in blk.0.iter().enumerate() {
            m[(k, k)] -= op.diag[i];
        }
        let c2 = 0.01;
        let det = m.determinant() / Complex64::new(c2 * c2, 0.0);
        assert!((det.re - 3.0 * a.powi(4)).abs() < 1e-12);
    }

    #[test]
    fn block_decomposition_detects_mismatch() {
        let s = build_initial(&[0.5], &[vec![1]], 0.1, 1).unwrap();
        let bx = TruncBox::new(4, 2);
        let op = assemble(&s, &TailSpec::none(), &bx, 0.0).unwrap();
        let mask = op.resonant_mask(&s.omega0(), 0.0, 0.0);
        let c = bicharacteristics(&s.omega0(), 1, &bx, 0).unwrap();
        let g = gamma_supports(&s.j_support, 1).unwrap();
        let mut graph = build_graph(&c, &g);
        // split every component into singletons
        graph.components = (0..graph.nodes.len()).map(|i| vec![i]).collect();
        assert!(matches!(block_decompose(&op, &mask, &graph), Err(Error::Structure(_))));
    }

    #[test]
    fn diagonal_inverse_diagnostics() {
        let mut s = build_initial(&[0.5], &[vec![1]], 0.1, 1).unwrap();
        s.u = FourierSeq::zero(1, 1);
        s.v = FourierSeq::zero(1, 1);
        s.phase = 0.5;
        let op = assemble(&s, &TailSpec::none(), &TruncBox::new(1, 1), 0.0).unwrap();
        let nodes: Vec<Node> = op.basis.iter().filter(|(x, _)| x.j_sq() + 1 != 0).cloned().collect();
        let op = assemble_with(&s, &kernels(&s, &TailSpec::none()).unwrap(), nodes, 0.0);
        let diag = inverse_diagnostics(&op, 0.0).unwrap();
        assert!(diag.beta_tested.is_none());
        assert_eq!(diag.beta_hat, Some(0.95));
        assert_eq!(diag.tested_pairs, 0);
        let dmin = op.diag.iter().map(|d| d.abs()).fold(f64::INFINITY, f64::min);
        assert!((diag.inv_norm - 1.0 / dmin).abs() < 1e-12);
    }

    #[test]
    fn singular_reports_null_vector() {
        let mut s = build_initial(&[0.5], &[vec![1]], 0.1, 1).unwrap();
        s.u = FourierSeq::zero(1, 1);
        s.v = FourierSeq::zero(1, 1);
        let op = assemble(&s, &TailSpec::none(), &TruncBox::new(2, 2), 0.0).unwrap();
        // (0,0) has a zero symbol and no coupling
        match inverse_diagnostics(&op, 0.0) {
            Err(Error::Singular { null_vector: Some(v), .. }) => assert!(!v.is_empty()),
            other => panic!("expected singular, got {other:?}"),
        }
    }

    #[test]
    fn triplets_round_trip() {
        let s = build_initial(&[0.5, 0.25], &[vec![1], vec![2]], 0.3, 1).unwrap();
        let op = assemble(&s, &TailSpec::none(), &TruncBox::new(1, 2), 0.0).unwrap();
        let mut buf = Vec::new();
        export_triplets(&op, &mut buf).unwrap();
        let parsed = parse_triplets(std::io::Cursor::new(buf)).unwrap();
        let dense = op.to_dense();
        let nnz = dense.iter().filter(|c| **c != Complex64::default()).count();
        assert_eq!(parsed.len(), nnz);
        for (r, c, v) in parsed {
            let (i, j) = (op.index[&r], op.index[&c]);
            assert!((dense[(i, j)] - v).norm() <= 1e-15 * v.norm().max(1.0));
        }
        assert!(parse_node("w[1|2]").is_err());
    }

    #[test]
    fn block_solve_matches_dense() {
        let mut s = build_initial(&[0.5, 0.8], &[vec![1], vec![-2]], 0.1, 1).unwrap();
        s.omega_shift = vec![0.0123, 0.0217];
        let bx = TruncBox::new(3, 4);
        let op = assemble(&s, &TailSpec::none(), &bx, 0.0).unwrap();
        let keep: Vec<Node> = op.basis.iter().filter(|(x, _)| !x.is_zero()).cloned().collect();
        let op = assemble_on(&s, &TailSpec::none(), keep, 0.0).unwrap();
        let rhs: Vec<Complex64> = (0..op.len()).map(|i| Complex64::new((i as f64).sin(), (i as f64 * 0.3).cos())).collect();
        let xd = dense_solve(&op, &rhs).unwrap();
        let (xb, info) = block_solve(&op, &rhs, 1e-14, 500).unwrap();
        let err = xd.iter().zip(&xb).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        let scale = xd.iter().map(|c| c.norm()).fold(0.0, f64::max);
        assert!(err <= 1e-8 * scale, "err {err:e} after {} iterations", info.iterations);
    }

    #[test]
    fn reachable_respects_box_and_exclusion() {
        let s = build_initial(&[0.5], &[vec![1]], 0.1, 1).unwrap();
        let k = kernels(&s, &TailSpec::none()).unwrap();
        let bx = TruncBox::new(6, 6);
        let seed = (mi(&[-3], &[3]), Block::U);
        let ex: HashSet<Node> = [(mi(&[-1], &[1]), Block::U)].into();
        let r = reachable(&k, [seed.clone()], &bx, &ex, 1000).unwrap();
        assert!(r.contains(&seed));
        assert!(r.iter().all(|(x, _)| bx.contains(x)));
        assert!(!r.iter().any(|n| ex.contains(n)));
        // u*u sits at (-2, 2), joining u[-3|3] to v[-1|1]
        assert_eq!(r, vec![seed, (mi(&[-1], &[1]), Block::V)]);
    }
}
