//! The P/Q iteration: Newton corrections off the tangential sites, exact
//! frequency updates on them, Diophantine monitoring and the multiscale
//! truncation schedule.

use std::collections::HashSet;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, ExcisionTest, Result};
use crate::field::{build_initial, nonlinear_part, residual_full, FourierSeq, ProductPowers, SolverState, TailSpec};
use crate::genericity::{check_genericity, GenericityOptions, GenericityReport, Verdict};
use crate::lattice::{weighted_norm, ModeIndex, TruncBox, Weight};
use crate::linop::{assemble_with, block_solve, dense_solve, kernels, min_singular_value, reachable, OperatorMatrix};
use crate::resonance::{Block, Node};

/// Coefficients at or below this modulus are dropped after each correction.
pub const STATE_PRUNE: f64 = 1e-22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverPath {
    #[default]
    Auto,
    Dense,
    Block,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PStepOptions {
    pub path: SolverPath,
    /// Unknown count above which `Auto` switches to the block path.
    pub dense_max: usize,
    pub reach_cap: usize,
    pub block_tol: f64,
    pub block_max_iter: usize,
    pub weight: Weight,
}

impl Default for PStepOptions {
    fn default() -> Self {
        Self {
            path: SolverPath::Auto,
            dense_max: 1500,
            reach_cap: 400_000,
            block_tol: 1e-14,
            block_max_iter: 400,
            weight: Weight::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PStep {
    pub state: SolverState,
    pub delta_u: FourierSeq,
    pub du_flat: f64,
    pub du_weighted: f64,
    pub unknowns: usize,
    pub path: SolverPath,
    /// Inverse norm of the block-diagonal part: resonant clusters and the scalar diagonal.
    pub block_inv_norm: f64,
}

fn tangential_nodes(state: &SolverState) -> HashSet<Node> {
    state
        .u_sites()
        .into_iter()
        .map(|x| (x, Block::U))
        .chain(state.v_sites().into_iter().map(|x| (x, Block::V)))
        .collect()
}

/// Inverse norm of the block-diagonal part of `op` (clusters of nodes with `|diag| <= 1/2`).
fn block_inverse_norm(op: &OperatorMatrix) -> f64 {
    let mut uf = crate::resonance::UnionFind::new(op.len());
    let resonant: Vec<bool> = op.diag.iter().map(|d| d.abs() <= 0.5).collect();
    for i in (0..op.len()).filter(|&i| resonant[i]) {
        for &(j, c) in &op.conv[i] {
            if resonant[j] && c != Complex64::default() {
                uf.union(i, j);
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    let mut smin = f64::INFINITY;
    for i in 0..op.len() {
        if resonant[i] {
            groups.entry(uf.find(i)).or_default().push(i);
        } else {
            smin = smin.min(op.get(i, i).norm());
        }
    }
    let g: Vec<Vec<usize>> = groups.into_values().collect();
    let s = g
        .par_iter()
        .map(|idx| min_singular_value(&op.submatrix(idx)))
        .reduce(|| f64::INFINITY, f64::min);
    1.0 / smin.min(s)
}

/// One Newton correction on the box minus the tangential sites.
pub fn p_step(state: &SolverState, tail: &TailSpec, bx: &TruncBox, opts: &PStepOptions) -> Result<PStep> {
    let (fu, fv) = residual_full(state, tail)?;
    let excl = tangential_nodes(state);
    let seeds: Vec<Node> = fu
        .iter()
        .filter(|(_, c)| c.norm() > 0.0)
        .map(|(x, _)| (x.clone(), Block::U))
        .chain(fv.iter().filter(|(_, c)| c.norm() > 0.0).map(|(x, _)| (x.clone(), Block::V)))
        .filter(|n| bx.contains(&n.0) && !excl.contains(n))
        .collect();
    let (b, d) = (state.u.b(), state.d());
    if seeds.is_empty() {
        return Ok(PStep {
            state: state.clone(),
            delta_u: FourierSeq::zero(b, d),
            du_flat: 0.0,
            du_weighted: 0.0,
            unknowns: 0,
            path: opts.path,
            block_inv_norm: 0.0,
        });
    }
    let k = kernels(state, tail)?;
    let nodes = reachable(&k, seeds, bx, &excl, opts.reach_cap)?;
    let op = assemble_with(state, &k, nodes, 0.0);
    let rhs: Vec<Complex64> = op
        .basis
        .iter()
        .map(|(x, blk)| -match blk {
            Block::U => fu.get(x),
            Block::V => fv.get(x),
        })
        .collect();
    let path = match opts.path {
        SolverPath::Auto if op.len() <= opts.dense_max => SolverPath::Dense,
        SolverPath::Auto => SolverPath::Block,
        p => p,
    };
    let sol = match path {
        SolverPath::Dense => dense_solve(&op, &rhs)?,
        _ => block_solve(&op, &rhs, opts.block_tol, opts.block_max_iter)?.0,
    };
    let block_inv_norm = block_inverse_norm(&op);
    let mut du = FourierSeq::zero(b, d);
    let mut dv = FourierSeq::zero(b, d);
    for ((x, blk), c) in op.basis.iter().zip(&sol) {
        match blk {
            Block::U => du.set(x.clone(), *c),
            Block::V => dv.set(x.clone(), *c),
        }
    }
    let mut next = state.clone();
    next.u = state.u.add(&du);
    next.v = state.v.add(&dv);
    next.symmetrize();
    next.u.prune(STATE_PRUNE);
    next.v.prune(STATE_PRUNE);
    let delta_u = next.u.sub(&state.u);
    Ok(PStep {
        du_flat: delta_u.l2_norm(),
        du_weighted: weighted_norm(&delta_u, &opts.weight),
        delta_u,
        state: next,
        unknowns: op.len(),
        path,
        block_inv_norm,
    })
}

#[derive(Debug, Clone)]
pub struct QUpdate {
    pub state: SolverState,
    pub domega: Vec<f64>,
    /// Largest imaginary part of the extracted tangential terms, divided by `a_k`.
    pub imag_defect: f64,
}

/// Solves the Q-equations for `omega`: `omega_k = |j_k|^2 + phase + Re N_k / a_k`,
/// with `N_k` the nonlinear part of `F_u` at `(-e_k, j_k)`.
pub fn q_update(state: &SolverState, tail: &TailSpec) -> Result<QUpdate> {
    if let Some(k) = state.a.iter().position(|&a| a == 0.0) {
        return Err(Error::ZeroAmplitude(k));
    }
    let pw = ProductPowers::new(state, tail)?;
    let nl = nonlinear_part(&state.u, &pw, tail, state.delta, state.p)?;
    let mut next = state.clone();
    let mut imag = 0.0f64;
    for (k, x) in state.u_sites().iter().enumerate() {
        let val = nl.get(x) / state.a[k];
        imag = imag.max(val.im.abs());
        next.omega_shift[k] = state.phase + val.re;
    }
    let domega = next.omega_shift.iter().zip(&state.omega_shift).map(|(a, b)| a - b).collect();
    Ok(QUpdate {
        state: next,
        domega,
        imag_defect: imag,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiophantineParams {
    pub kappa: f64,
    pub gamma_exp: f64,
    pub n_check: i64,
}

impl DiophantineParams {
    pub fn new(kappa: f64, gamma_exp: f64, n_check: i64, b: usize) -> Result<Self> {
        if !(kappa > 0.0) {
            return Err(Error::InvalidArgument(format!("kappa must be positive, got {kappa}")));
        }
        if !(gamma_exp > 2.0 * b as f64 + 1.0) {
            return Err(Error::InvalidArgument(format!(
                "gamma_exp must exceed 2b+1 = {}, got {gamma_exp}",
                2 * b + 1
            )));
        }
        if n_check < 1 {
            return Err(Error::InvalidArgument("n_check must be at least 1".into()));
        }
        Ok(Self {
            kappa,
            gamma_exp,
            n_check,
        })
    }

    pub fn default_gamma(b: usize) -> f64 {
        2.0 * b as f64 + 1.5
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiophantineResult {
    pub pass: bool,
    pub worst_n: Vec<i64>,
    /// `min_n dist(n·omega, Z) |n|^gamma / (kappa delta^(2p))`; the check passes iff this is at least 1.
    pub margin: f64,
    pub worst_dist: f64,
}

fn dist_to_int(x: f64) -> f64 {
    (x - x.round()).abs()
}

/// Scans `0 < |n|_inf <= n_check` for the worst ratio `dist(n·omega, Z) |n|^gamma`.
/// Ties go to the lexicographically smallest `n` with a positive first nonzero entry.
fn worst_ratio(omega: &[f64], gamma: f64, n_check: i64) -> (Vec<i64>, f64, f64) {
    let b = omega.len();
    let side = 2 * n_check + 1;
    let total = (side as u64).pow(b as u32);
    let decode = |mut idx: u64| -> Vec<i64> {
        let mut n = vec![0i64; b];
        for slot in n.iter_mut().rev() {
            *slot = (idx % side as u64) as i64 - n_check;
            idx /= side as u64;
        }
        n
    };
    let best = (0..total)
        .into_par_iter()
        .filter_map(|idx| {
            let n = decode(idx);
            let first = n.iter().copied().find(|&v| v != 0)?;
            if first < 0 {
                return None;
            }
            let dot: f64 = n.iter().zip(omega).map(|(&a, w)| a as f64 * w).sum();
            let mag: f64 = n.iter().zip(omega).map(|(&a, w)| (a as f64 * w).abs()).sum();
            // distances inside the rounding error of n·omega count as exact resonances
            let dist = dist_to_int(dot);
            let dist = if dist <= 8.0 * f64::EPSILON * mag { 0.0 } else { dist };
            let norm = (n.iter().map(|v| (v * v) as f64).sum::<f64>()).sqrt();
            Some((dist * norm.powf(gamma), n, dist))
        })
        .reduce_with(|a, b| match a.0.total_cmp(&b.0) {
            std::cmp::Ordering::Less => a,
            std::cmp::Ordering::Greater => b,
            std::cmp::Ordering::Equal => {
                if a.1 <= b.1 {
                    a
                } else {
                    b
                }
            }
        });
    match best {
        Some((r, n, dist)) => (n, r, dist),
        None => (vec![0; b], f64::INFINITY, f64::INFINITY),
    }
}

/// `dist(n·omega, Z) >= kappa delta^(2p) / |n|^gamma` for every `0 < |n|_inf <= n_check`.
pub fn diophantine_check(omega: &[f64], dp: &DiophantineParams, delta: f64, p: u32) -> DiophantineResult {
    let (worst_n, r, worst_dist) = worst_ratio(omega, dp.gamma_exp, dp.n_check);
    let margin = r / (dp.kappa * delta.powi(2 * p as i32));
    DiophantineResult {
        pass: margin >= 1.0,
        worst_n,
        margin,
        worst_dist,
    }
}

pub const KAPPA_FLOOR: f64 = 1e-9;

/// Half the observed margin, floored.
pub fn calibrate_kappa(omega: &[f64], gamma_exp: f64, n_check: i64, delta: f64, p: u32) -> f64 {
    let (_, r, _) = worst_ratio(omega, gamma_exp, n_check);
    (0.5 * r / delta.powi(2 * p as i32)).max(KAPPA_FLOOR)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AmplitudeJacobian {
    /// `d omega / d a` in the rescaled amplitudes `a`.
    pub matrix: Vec<Vec<f64>>,
    pub det: f64,
    /// Determinant with respect to the physical amplitudes `delta a`.
    pub det_physical: f64,
    pub det_over_delta_2p: f64,
    /// Relative change between the `h` and `h/2` difference quotients.
    pub halving_discrepancy: f64,
}

pub const HALVING_TOL: f64 = 1e-4;

/// `omega^(1)(a)`: the frequencies after the first Q-update from `u^(0)`.
pub fn omega_first(a: &[f64], j_list: &[Vec<i64>], delta: f64, p: u32, tail: &TailSpec, phase: f64) -> Result<Vec<f64>> {
    Ok(first_q(a, j_list, delta, p, tail, phase)?.omega())
}

fn first_q(a: &[f64], j_list: &[Vec<i64>], delta: f64, p: u32, tail: &TailSpec, phase: f64) -> Result<SolverState> {
    let mut s = build_initial(a, j_list, delta, p)?;
    s.phase = phase;
    Ok(q_update(&s, tail)?.state)
}

fn det_lu(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    nalgebra::DMatrix::from_fn(n, n, |i, j| m[i][j]).determinant()
}

/// Central differences of `omega^(1)` in each `a_k`, with step `h` and a halving check.
pub fn amplitude_jacobian(
    a: &[f64],
    j_list: &[Vec<i64>],
    delta: f64,
    p: u32,
    tail: &TailSpec,
    h: f64,
) -> Result<AmplitudeJacobian> {
    let b = a.len();
    if !(h > 0.0) {
        return Err(Error::InvalidArgument("h must be positive".into()));
    }
    if a.iter().any(|&ak| ak - h <= 0.0 || ak + h > 1.0) {
        return Err(Error::InvalidArgument(format!("a ± h must stay inside (0,1], h = {h}")));
    }
    let jac = |step: f64| -> Result<Vec<Vec<f64>>> {
        let mut m = vec![vec![0.0; b]; b];
        for k in 0..b {
            let mut ap = a.to_vec();
            let mut am = a.to_vec();
            ap[k] += step;
            am[k] -= step;
            let wp = first_q(&ap, j_list, delta, p, tail, 0.0)?.omega_shift;
            let wm = first_q(&am, j_list, delta, p, tail, 0.0)?.omega_shift;
            for i in 0..b {
                m[i][k] = (wp[i] - wm[i]) / (2.0 * step);
            }
        }
        Ok(m)
    };
    let m1 = jac(h)?;
    let m2 = jac(h / 2.0)?;
    let scale = m2.iter().flatten().map(|x| x.abs()).fold(0.0, f64::max);
    let diff = m1.iter().flatten().zip(m2.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let disc = if scale > 0.0 { diff / scale } else { 0.0 };
    if disc > HALVING_TOL {
        return Err(Error::StepTooLarge(disc));
    }
    let det = det_lu(&m2);
    Ok(AmplitudeJacobian {
        det_physical: det / delta.powi(b as i32),
        det_over_delta_2p: det / delta.powi(2 * p as i32),
        matrix: m2,
        det,
        halving_discrepancy: disc,
    })
}

/// `d omega_k / d a_m = delta^2 (4 a_m - 2 a_k [k = m])` for `H = 0`, `p = 1`.
pub fn amplitude_jacobian_cubic(a: &[f64], delta: f64) -> Vec<Vec<f64>> {
    let b = a.len();
    let c = delta * delta;
    (0..b)
        .map(|k| (0..b).map(|m| c * (4.0 * a[m] - if k == m { 2.0 * a[k] } else { 0.0 })).collect())
        .collect()
}

/// First step from `u^(0)`: Q-update, one P-step, and a second Q-update.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FirstStep {
    pub delta: f64,
    /// `||Δu^(1)||` in rescaled units; the physical size is `delta` times this.
    pub du_flat: f64,
    pub du_weighted: f64,
    /// `||F||` before and after the step, rescaled units.
    pub residual_before: f64,
    pub residual_after: f64,
    /// `||omega^(1) - omega^(0)||`.
    pub domega_norm: f64,
    pub unknowns: usize,
}

pub fn first_step(
    a: &[f64],
    j_list: &[Vec<i64>],
    delta: f64,
    p: u32,
    tail: &TailSpec,
    bx: &TruncBox,
    opts: &PStepOptions,
) -> Result<FirstStep> {
    let s0 = build_initial(a, j_list, delta, p)?;
    let q1 = q_update(&s0, tail)?;
    let before = residual_full(&q1.state, tail)?.0.restrict(bx).l2_norm();
    let ps = p_step(&q1.state, tail, bx, opts)?;
    let q2 = q_update(&ps.state, tail)?;
    let after = residual_full(&q2.state, tail)?.0.restrict(bx).l2_norm();
    Ok(FirstStep {
        delta,
        du_flat: ps.du_flat,
        du_weighted: ps.du_weighted,
        residual_before: before,
        residual_after: after,
        domega_norm: q1.domega.iter().map(|x| x * x).sum::<f64>().sqrt(),
        unknowns: ps.unknowns,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum KappaMode {
    /// Half the margin observed after the first Q-update.
    Calibrate,
    Fixed(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterateOptions {
    pub n0_scale: i64,
    pub s: f64,
    pub ratio: i64,
    pub max_steps: usize,
    pub residual_tol: f64,
    pub kappa_mode: KappaMode,
    pub gamma_exp: Option<f64>,
    pub n_check: i64,
    pub require_generic: bool,
    pub genericity: GenericityOptions,
    pub pstep: PStepOptions,
    /// Also solve each P-step on the other path and record the discrepancy.
    pub cross_check: bool,
}

impl Default for IterateOptions {
    fn default() -> Self {
        Self {
            n0_scale: 4,
            s: 2.0,
            ratio: 2,
            max_steps: 6,
            residual_tol: 1e-12,
            kappa_mode: KappaMode::Calibrate,
            gamma_exp: None,
            n_check: 100,
            require_generic: true,
            genericity: GenericityOptions::default(),
            pstep: PStepOptions::default(),
            cross_check: false,
        }
    }
}

/// `N_t = max(n0, ceil(|log10 delta|^s)) ratio^t`.
pub fn scale_at(delta: f64, opts: &IterateOptions, t: usize) -> i64 {
    let base = delta.log10().abs().powf(opts.s).ceil() as i64;
    opts.n0_scale.max(base) * opts.ratio.pow(t as u32)
}

/// Box of step `t`: `|n|_inf <= N_t`, `|j|_inf <= N_t + max |j_k|_inf`.
pub fn box_at(delta: f64, j_list: &[Vec<i64>], opts: &IterateOptions, t: usize) -> TruncBox {
    let n = scale_at(delta, opts, t);
    let jmax = j_list.iter().flatten().map(|x| x.abs()).max().unwrap_or(0);
    TruncBox::new(n, n + jmax)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub scale: i64,
    pub residual_flat: f64,
    pub residual_weighted: f64,
    pub du_flat: f64,
    pub du_weighted: f64,
    pub omega: Vec<f64>,
    pub domega_norm: f64,
    pub dio_margin: f64,
    pub dio_pass: bool,
    pub inv_norm: f64,
    pub unknowns: usize,
    pub path: SolverPath,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_check: Option<f64>,
    pub q_imag_defect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum Outcome {
    Converged,
    MaxSteps,
    Excised { step: usize, test: ExcisionTest, detail: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationTrace {
    pub records: Vec<StepRecord>,
    pub outcome: Outcome,
    pub kappa: f64,
    pub gamma_exp: f64,
    pub final_state: SolverState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genericity: Option<GenericityReport>,
}

impl IterationTrace {
    pub fn converged(&self) -> bool {
        self.outcome == Outcome::Converged
    }

    pub fn final_residual(&self) -> f64 {
        self.records.last().map_or(f64::INFINITY, |r| r.residual_flat)
    }

    /// Number of P-steps taken.
    pub fn newton_steps(&self) -> usize {
        self.records.iter().filter(|r| r.step > 0).count()
    }
}

#[derive(Debug, Clone)]
pub struct Problem {
    pub j_list: Vec<Vec<i64>>,
    pub a: Vec<f64>,
    pub delta: f64,
    pub p: u32,
    pub tail: TailSpec,
    pub phase: f64,
}

fn residual_norms(state: &SolverState, tail: &TailSpec, bx: &TruncBox, w: &Weight) -> Result<(f64, f64)> {
    let f = residual_full(state, tail)?.0.restrict(bx);
    Ok((f.l2_norm(), weighted_norm(&f, w)))
}

fn excise_of(err: Error, step: usize) -> std::result::Result<Outcome, Error> {
    match err {
        Error::Singular { context, sigma_min, .. } => Ok(Outcome::Excised {
            step,
            test: ExcisionTest::BlockDeterminant,
            detail: format!("{context}, sigma_min = {sigma_min:e}"),
        }),
        Error::Excised { test, detail, .. } => Ok(Outcome::Excised { step, test, detail }),
        other => Err(other),
    }
}

/// Runs the P/Q iteration over the growing box schedule.
pub fn iterate(problem: &Problem, opts: &IterateOptions) -> Result<IterationTrace> {
    let b = problem.j_list.len();
    problem.tail.validate()?;
    let genericity = if opts.require_generic {
        let rep = check_genericity(&problem.j_list, problem.p, &opts.genericity)?;
        match rep.verdict {
            Verdict::Generic => {}
            Verdict::NonGeneric => {
                return Err(Error::NotGeneric(format!("conditions failed: {}", rep.failed().join(", "))))
            }
            Verdict::Truncated => {
                return Err(Error::NotGeneric("genericity undecided: search budget exhausted".into()))
            }
        }
        Some(rep)
    } else {
        None
    };
    let gamma_exp = opts.gamma_exp.unwrap_or_else(|| DiophantineParams::default_gamma(b));
    let (delta, p) = (problem.delta, problem.p);
    // omega0 is integral, so the Diophantine test only sees the shift
    let mut state = build_initial(&problem.a, &problem.j_list, delta, p)?;
    state.phase = problem.phase;
    let shift0 = state.omega_shift.clone();
    let q = q_update(&state, &problem.tail)?;
    state = q.state;
    let kappa = match opts.kappa_mode {
        KappaMode::Calibrate => calibrate_kappa(&state.omega_shift, gamma_exp, opts.n_check, delta, p),
        KappaMode::Fixed(k) => k,
    };
    let dp = DiophantineParams::new(kappa, gamma_exp, opts.n_check, b)?;
    let w = opts.pstep.weight;
    let bx0 = box_at(delta, &problem.j_list, opts, 0);
    let (rf, rw) = residual_norms(&state, &problem.tail, &bx0, &w)?;
    let dio = diophantine_check(&state.omega_shift, &dp, delta, p);
    let mut records = vec![StepRecord {
        step: 0,
        scale: bx0.n_radius,
        residual_flat: rf,
        residual_weighted: rw,
        du_flat: 0.0,
        du_weighted: 0.0,
        omega: state.omega(),
        domega_norm: state.omega_shift.iter().zip(&shift0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(),
        dio_margin: dio.margin,
        dio_pass: dio.pass,
        inv_norm: 0.0,
        unknowns: 0,
        path: opts.pstep.path,
        cross_check: None,
        q_imag_defect: q.imag_defect,
    }];
    let finish = |records, outcome, state| IterationTrace {
        records,
        outcome,
        kappa,
        gamma_exp,
        final_state: state,
        genericity: genericity.clone(),
    };
    if !dio.pass {
        let detail = format!("n = {:?}, margin {:e}", dio.worst_n, dio.margin);
        return Ok(finish(
            records,
            Outcome::Excised {
                step: 0,
                test: ExcisionTest::Diophantine,
                detail,
            },
            state,
        ));
    }
    if rf < opts.residual_tol {
        return Ok(finish(records, Outcome::Converged, state));
    }
    for t in 0..opts.max_steps {
        let step = t + 1;
        let bx = box_at(delta, &problem.j_list, opts, t);
        let ps = match p_step(&state, &problem.tail, &bx, &opts.pstep) {
            Ok(ps) => ps,
            Err(e) => return Ok(finish(records, excise_of(e, step)?, state)),
        };
        let cross = if opts.cross_check && ps.unknowns > 0 {
            let other = PStepOptions {
                path: if ps.path == SolverPath::Dense { SolverPath::Block } else { SolverPath::Dense },
                ..opts.pstep.clone()
            };
            match p_step(&state, &problem.tail, &bx, &other) {
                Ok(alt) => Some(alt.state.u.max_abs_diff(&ps.state.u) / ps.du_flat.max(f64::MIN_POSITIVE)),
                Err(_) => None,
            }
        } else {
            None
        };
        let prev_shift = ps.state.omega_shift.clone();
        let q = q_update(&ps.state, &problem.tail)?;
        state = q.state;
        let (rf, rw) = residual_norms(&state, &problem.tail, &bx, &w)?;
        let dio = diophantine_check(&state.omega_shift, &dp, delta, p);
        records.push(StepRecord {
            step,
            scale: bx.n_radius,
            residual_flat: rf,
            residual_weighted: rw,
            du_flat: ps.du_flat,
            du_weighted: ps.du_weighted,
            omega: state.omega(),
            domega_norm: state.omega_shift.iter().zip(&prev_shift).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(),
            dio_margin: dio.margin,
            dio_pass: dio.pass,
            inv_norm: ps.block_inv_norm,
            unknowns: ps.unknowns,
            path: ps.path,
            cross_check: cross,
            q_imag_defect: q.imag_defect,
        });
        if !dio.pass {
            let detail = format!("n = {:?}, margin {:e}", dio.worst_n, dio.margin);
            return Ok(finish(
                records,
                Outcome::Excised {
                    step,
                    test: ExcisionTest::Diophantine,
                    detail,
                },
                state,
            ));
        }
        if !rf.is_finite() {
            return Ok(finish(
                records,
                Outcome::Excised {
                    step,
                    test: ExcisionTest::Divergence,
                    detail: "residual is not finite".into(),
                },
                state,
            ));
        }
        if rf < opts.residual_tol {
            return Ok(finish(records, Outcome::Converged, state));
        }
    }
    Ok(finish(records, Outcome::MaxSteps, state))
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        None
    } else {
        Some(sxy / sxx)
    }
}

/// Tangential residual `F_u(-e_k, j_k)`, for checking the Q-update.
pub fn tangential_residual(state: &SolverState, tail: &TailSpec) -> Result<Vec<Complex64>> {
    let (fu, _) = residual_full(state, tail)?;
    Ok(state.u_sites().iter().map(|x: &ModeIndex| fu.get(x)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn q_update_one_mode() {
        let s = build_initial(&[0.5], &[vec![2]], 0.1, 1).unwrap();
        let q = q_update(&s, &TailSpec::none()).unwrap();
        assert!((q.domega[0] - 0.0025).abs() < 1e-15);
        let r = tangential_residual(&q.state, &TailSpec::none()).unwrap();
        assert!(r[0].norm() < 1e-14);
    }

    #[test]
    fn q_update_zero_amplitude() {
        let mut s = build_initial(&[0.5, 0.5], &[vec![1], vec![2]], 0.1, 1).unwrap();
        s.a[1] = 0.0;
        assert!(matches!(q_update(&s, &TailSpec::none()), Err(Error::ZeroAmplitude(1))));
    }

    #[test]
    fn exact_solution_is_fixed_by_p_step() {
        let s = build_initial(&[0.7], &[vec![1]], 0.1, 2).unwrap();
        let q = q_update(&s, &TailSpec::none()).unwrap();
        let ps = p_step(&q.state, &TailSpec::none(), &TruncBox::new(4, 5), &PStepOptions::default()).unwrap();
        assert!(ps.du_flat <= 1e-13);
    }

    #[test]
    fn diophantine_integer_frequencies_fail() {
        let dp = DiophantineParams::new(1.0, 5.5, 10, 2).unwrap();
        let r = diophantine_check(&[1.0, 4.0], &dp, 0.1, 1);
        assert!(!r.pass);
        assert_eq!(r.margin, 0.0);
    }

    #[test]
    fn diophantine_golden_ratio() {
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        // kappa delta^2 = 1e-4 with delta = 0.1
        let dp = DiophantineParams::new(1e-2, 4.0, 1000, 1).unwrap();
        let r = diophantine_check(&[phi], &dp, 0.1, 1);
        assert!(r.pass);
        // the worst ratio sits at n = 1, where dist = 2 - phi
        assert_eq!(r.worst_n, vec![1]);
        assert!((r.worst_dist - (2.0 - phi)).abs() < 1e-12);
    }

    #[test]
    fn diophantine_params_validated() {
        assert!(DiophantineParams::new(1.0, 5.0, 10, 2).is_err());
        assert!(DiophantineParams::new(0.0, 6.0, 10, 2).is_err());
        assert!(DiophantineParams::new(1.0, 6.0, 0, 2).is_err());
    }

    #[test]
    fn worst_n_periodic_in_omega() {
        let om = [std::f64::consts::FRAC_1_PI, std::f64::consts::FRAC_1_SQRT_2];
        let dp = DiophantineParams::new(1e-3, 5.5, 30, 2).unwrap();
        let a = diophantine_check(&om, &dp, 0.1, 1);
        let b = diophantine_check(&[om[0] + 3.0, om[1] - 2.0], &dp, 0.1, 1);
        assert_eq!(a.worst_n, b.worst_n);
    }

    #[test]
    fn jacobian_one_mode() {
        let j = amplitude_jacobian(&[0.5], &[vec![1]], 0.1, 1, &TailSpec::none(), 1e-3).unwrap();
        assert!((j.matrix[0][0] - 0.01).abs() < 1e-12);
    }

    #[test]
    fn jacobian_closed_form() {
        let a = [0.4, 0.7, 0.55];
        let fd = amplitude_jacobian(&a, &[vec![1], vec![-2], vec![3]], 0.05, 1, &TailSpec::none(), 1e-4).unwrap();
        let cf = amplitude_jacobian_cubic(&a, 0.05);
        for (r1, r2) in fd.matrix.iter().zip(&cf) {
            for (x, y) in r1.iter().zip(r2) {
                assert!((x - y).abs() <= 1e-6 * y.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn jacobian_rejects_boundary_step() {
        assert!(amplitude_jacobian(&[0.9995], &[vec![1]], 0.1, 1, &TailSpec::none(), 1e-3).is_err());
    }

    #[test]
    fn slope_of_power_law() {
        let x = [1e-1, 1e-2, 1e-3];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powi(3)).collect();
        assert!((loglog_slope(&x, &y).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn one_mode_converges_immediately() {
        let prob = Problem {
            j_list: vec![vec![1, -1]],
            a: vec![0.8],
            delta: 0.01,
            p: 2,
            tail: TailSpec::none(),
            phase: 0.0,
        };
        let tr = iterate(&prob, &IterateOptions::default()).unwrap();
        assert!(tr.converged());
        assert!(tr.newton_steps() <= 3);
        let want = 2.0 + 0.01f64.powi(4) * 0.8f64.powi(4);
        assert!((tr.final_state.omega()[0] - want).abs() < 1e-10);
    }

    #[test]
    fn non_generic_is_refused() {
        let prob = Problem {
            j_list: vec![vec![1], vec![3]],
            a: vec![0.5, 0.5],
            delta: 0.01,
            p: 1,
            tail: TailSpec::none(),
            phase: 0.0,
        };
        assert!(matches!(iterate(&prob, &IterateOptions::default()), Err(Error::NotGeneric(_))));
    }
}
