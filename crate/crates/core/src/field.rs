//! Finitely supported Fourier sequences on `Z^b x Z^d`, the convolution
//! algebra they form, and the nonlinear residual of the rescaled system.

use std::collections::{BTreeMap, HashMap};

use num_complex::Complex64;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::lattice::{ModeIndex, TruncBox};

/// Default cap on the support size a single convolution may produce.
pub const DEFAULT_SUPPORT_CAP: u128 = 20_000_000;

/// Tolerance used when comparing `F_v` against the reflected conjugate of `F_u`.
pub const CONJUGACY_TOL: f64 = 1e-12;

/// A finitely supported map `ModeIndex -> C` with no stored zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierSeq {
    b: usize,
    d: usize,
    coeffs: BTreeMap<ModeIndex, Complex64>,
}

impl FourierSeq {
    pub fn zero(b: usize, d: usize) -> Self {
        Self {
            b,
            d,
            coeffs: BTreeMap::new(),
        }
    }

    /// The convolution identity `{(0,0) -> 1}`.
    pub fn delta0(b: usize, d: usize) -> Self {
        let mut s = Self::zero(b, d);
        s.coeffs.insert(ModeIndex::zero(b, d), Complex64::new(1.0, 0.0));
        s
    }

    /// Builds a sequence, summing repeated indices and dropping exact zeros.
    pub fn from_pairs(b: usize, d: usize, pairs: impl IntoIterator<Item = (ModeIndex, Complex64)>) -> Self {
        let mut s = Self::zero(b, d);
        for (x, c) in pairs {
            s.add_at(x, c);
        }
        s
    }

    pub fn b(&self) -> usize {
        self.b
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn get(&self, x: &ModeIndex) -> Complex64 {
        self.coeffs.get(x).copied().unwrap_or_default()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ModeIndex, &Complex64)> {
        self.coeffs.iter()
    }

    pub fn support(&self) -> impl Iterator<Item = &ModeIndex> {
        self.coeffs.keys()
    }

    pub fn contains(&self, x: &ModeIndex) -> bool {
        self.coeffs.contains_key(x)
    }

    /// Overwrites the coefficient at `x` (removing it when `c == 0`).
    pub fn set(&mut self, x: ModeIndex, c: Complex64) {
        debug_assert_eq!((x.b(), x.d()), (self.b, self.d));
        if c == Complex64::default() {
            self.coeffs.remove(&x);
        } else {
            self.coeffs.insert(x, c);
        }
    }

    pub fn add_at(&mut self, x: ModeIndex, c: Complex64) {
        let cur = self.get(&x);
        self.set(x, cur + c);
    }

    pub fn scale(&self, s: Complex64) -> Self {
        Self::from_pairs(self.b, self.d, self.iter().map(|(x, c)| (x.clone(), c * s)))
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (x, c) in other.iter() {
            out.add_at(x.clone(), *c);
        }
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (x, c) in other.iter() {
            out.add_at(x.clone(), -*c);
        }
        out
    }

    /// `x -> conj f(-x)`: the Fourier coefficients of the complex conjugate function.
    pub fn conj_reflect(&self) -> Self {
        Self {
            b: self.b,
            d: self.d,
            coeffs: self.iter().map(|(x, c)| (-x, c.conj())).collect(),
        }
    }

    pub fn restrict(&self, bx: &TruncBox) -> Self {
        Self {
            b: self.b,
            d: self.d,
            coeffs: self.iter().filter(|(x, _)| bx.contains(x)).map(|(x, c)| (x.clone(), *c)).collect(),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.coeffs.values().map(|c| c.norm_sqr()).fold(0.0, |s, x| s + x).sqrt()
    }

    pub fn l1_norm(&self) -> f64 {
        self.coeffs.values().map(|c| c.norm()).fold(0.0, |s, x| s + x)
    }

    pub fn sup_norm(&self) -> f64 {
        self.coeffs.values().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// Largest coefficient-wise deviation `max |f(x) - g(x)|` over the union of supports.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let a = self.iter().map(|(x, c)| (c - other.get(x)).norm());
        let b = other.iter().filter(|(x, _)| !self.contains(x)).map(|(_, c)| c.norm());
        a.chain(b).fold(0.0, f64::max)
    }

    /// Drops coefficients with modulus at most `tol`.
    pub fn prune(&mut self, tol: f64) {
        self.coeffs.retain(|_, c| c.norm() > tol);
    }

    fn check_dims(&self, other: &Self) -> Result<()> {
        if (self.b, self.d) != (other.b, other.d) {
            return Err(Error::DimensionMismatch(format!(
                "(b,d) = ({},{}) vs ({},{})",
                self.b, self.d, other.b, other.d
            )));
        }
        Ok(())
    }
}

// Convolution runs on packed integer keys: 16 bits per coordinate in a u128.
// Lattices that do not fit fall back to ModeIndex keys.
const PACK_BITS: u32 = 16;
const PACK_OFFSET: i64 = 1 << (PACK_BITS - 1);

fn packable(s: &FourierSeq) -> bool {
    s.b + s.d <= (128 / PACK_BITS) as usize
        && s.support().all(|x| x.n_sup() < PACK_OFFSET / 2 && x.j_sup() < PACK_OFFSET / 2)
}

fn pack(x: &ModeIndex) -> u128 {
    x.n.iter()
        .chain(&x.j)
        .enumerate()
        .fold(0u128, |acc, (i, &v)| acc | (((v + PACK_OFFSET) as u128) << (PACK_BITS * i as u32)))
}

fn unpack(key: u128, b: usize, d: usize) -> ModeIndex {
    let mask = (1u128 << PACK_BITS) - 1;
    let coord = |i: usize| ((key >> (PACK_BITS * i as u32)) & mask) as i64 - PACK_OFFSET;
    ModeIndex::new((0..b).map(coord).collect(), (b..b + d).map(coord).collect())
}

/// `(f * g)(x) = sum_y f(y) g(x - y)`, exact on supports.
pub fn convolve(f: &FourierSeq, g: &FourierSeq) -> Result<FourierSeq> {
    convolve_capped(f, g, DEFAULT_SUPPORT_CAP)
}

pub fn convolve_capped(f: &FourierSeq, g: &FourierSeq, cap: u128) -> Result<FourierSeq> {
    f.check_dims(g)?;
    let (b, d) = (f.b, f.d);
    let bound = f.len() as u128 * g.len() as u128;
    if bound > cap.saturating_mul(64) {
        return Err(Error::Capacity {
            what: "convolution work",
            needed: bound,
            limit: cap.saturating_mul(64),
        });
    }
    let out: BTreeMap<ModeIndex, Complex64> = if packable(f) && packable(g) {
        // Packed addition is exact because every coordinate keeps its own
        // offset bias; subtract the extra bias once per sum.
        let bias = pack(&ModeIndex::zero(b, d));
        let gk: Vec<(u128, Complex64)> = g.iter().map(|(x, c)| (pack(x), *c)).collect();
        let mut acc: HashMap<u128, Complex64> = HashMap::with_capacity((bound as usize).min(1 << 20));
        for (x, cf) in f.iter() {
            let kx = pack(x);
            for &(ky, cg) in &gk {
                *acc.entry(kx + ky - bias).or_default() += cf * cg;
            }
            if acc.len() as u128 > cap {
                return Err(Error::Capacity {
                    what: "convolution support",
                    needed: acc.len() as u128,
                    limit: cap,
                });
            }
        }
        acc.into_iter()
            .filter(|(_, c)| *c != Complex64::default())
            .map(|(k, c)| (unpack(k, b, d), c))
            .collect()
    } else {
        let mut acc: HashMap<ModeIndex, Complex64> = HashMap::new();
        for (x, cf) in f.iter() {
            for (y, cg) in g.iter() {
                *acc.entry(x + y).or_default() += cf * cg;
            }
            if acc.len() as u128 > cap {
                return Err(Error::Capacity {
                    what: "convolution support",
                    needed: acc.len() as u128,
                    limit: cap,
                });
            }
        }
        acc.into_iter().filter(|(_, c)| *c != Complex64::default()).collect()
    };
    Ok(FourierSeq { b, d, coeffs: out })
}

/// k-fold convolution power; `k = 0` gives the identity `delta0`.
pub fn conv_power(f: &FourierSeq, k: u32) -> Result<FourierSeq> {
    let mut acc = FourierSeq::delta0(f.b, f.d);
    for _ in 0..k {
        acc = convolve(&acc, f)?;
    }
    Ok(acc)
}

#[derive(Serialize, Deserialize)]
struct CoeffRecord {
    n: Vec<i64>,
    j: Vec<i64>,
    re: f64,
    im: f64,
}

#[derive(Serialize, Deserialize)]
struct SeqRecord {
    b: usize,
    d: usize,
    coeffs: Vec<CoeffRecord>,
}

impl Serialize for FourierSeq {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        SeqRecord {
            b: self.b,
            d: self.d,
            coeffs: self
                .iter()
                .map(|(x, c)| CoeffRecord {
                    n: x.n.clone(),
                    j: x.j.clone(),
                    re: c.re,
                    im: c.im,
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for FourierSeq {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let rec = SeqRecord::deserialize(de)?;
        let mut out = FourierSeq::zero(rec.b, rec.d);
        for c in rec.coeffs {
            if c.n.len() != rec.b || c.j.len() != rec.d {
                return Err(D::Error::custom("coefficient index has wrong dimension"));
            }
            let x = ModeIndex::new(c.n, c.j);
            if out.contains(&x) {
                return Err(D::Error::custom(format!("duplicate coefficient at {x}")));
            }
            out.set(x, Complex64::new(c.re, c.im));
        }
        Ok(out)
    }
}

/// Higher-order analytic tail `sum_m alpha_m(x) |u|^(2p+2m) u`, truncated at `alphas.len()`.
///
/// Each `alpha_m` is stored through its spatial Fourier coefficients on
/// `n = 0` modes; the functions must be real-valued, so the coefficients are
/// conjugate-symmetric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailSpec {
    pub alphas: Vec<FourierSeq>,
    /// Amplitude constant `C'` of the decay bound.
    pub decay_amp: f64,
    /// Rate `c'` of the decay bound.
    pub decay_rate: f64,
}

impl TailSpec {
    /// `H = 0`.
    pub fn none() -> Self {
        Self {
            alphas: Vec::new(),
            decay_amp: 1.0,
            decay_rate: 1.0,
        }
    }

    pub fn new(alphas: Vec<FourierSeq>, decay_amp: f64, decay_rate: f64) -> Result<Self> {
        let t = Self {
            alphas,
            decay_amp,
            decay_rate,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn m_max(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_none(&self) -> bool {
        self.alphas.iter().all(|a| a.is_empty())
    }

    /// Checks the `n = 0` support, the exponential decay bound and reality of every `alpha_m`.
    pub fn validate(&self) -> Result<()> {
        if !(self.decay_amp > 0.0 && self.decay_rate > 0.0) {
            return Err(Error::InvalidArgument("tail decay constants must be positive".into()));
        }
        for (m, alpha) in self.alphas.iter().enumerate() {
            for (x, c) in alpha.iter() {
                if x.n.iter().any(|&v| v != 0) {
                    return Err(Error::InvalidArgument(format!("alpha_{} has a coefficient off n = 0 at {x}", m + 1)));
                }
                let jn = (x.j_sq() as f64).sqrt();
                let bound = self.decay_amp * (-self.decay_rate * jn).exp();
                if c.norm() > bound * (1.0 + 1e-12) {
                    return Err(Error::InvalidArgument(format!(
                        "alpha_{} violates decay bound at {x}: |c| = {} > {}",
                        m + 1,
                        c.norm(),
                        bound
                    )));
                }
            }
            let dev = alpha.max_abs_diff(&alpha.conj_reflect());
            if dev > 1e-14 {
                return Err(Error::InvalidArgument(format!(
                    "alpha_{} is not real-valued (conjugate symmetry off by {dev:e})",
                    m + 1
                )));
            }
        }
        Ok(())
    }
}

/// The full iterate of the Newton scheme in rescaled variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverState {
    pub u: FourierSeq,
    pub v: FourierSeq,
    /// `omega - omega0`, kept apart from the integer part so that small
    /// frequency shifts keep full relative precision.
    pub omega_shift: Vec<f64>,
    pub a: Vec<f64>,
    pub delta: f64,
    pub p: u32,
    pub j_support: Vec<Vec<i64>>,
    /// Overall phase constant added to both diagonals.
    #[serde(default)]
    pub phase: f64,
}

impl SolverState {
    pub fn b(&self) -> usize {
        self.j_support.len()
    }

    pub fn d(&self) -> usize {
        self.u.d()
    }

    /// Tangential u-sites `(-e_k, j_k)`.
    pub fn u_sites(&self) -> Vec<ModeIndex> {
        let b = self.b();
        self.j_support.iter().enumerate().map(|(k, j)| ModeIndex::tangential(b, k, j)).collect()
    }

    /// Tangential v-sites `(e_k, -j_k)`.
    pub fn v_sites(&self) -> Vec<ModeIndex> {
        self.u_sites().iter().map(|x| -x).collect()
    }

    pub fn omega0(&self) -> Vec<i64> {
        self.j_support.iter().map(|j| j.iter().map(|x| x * x).sum()).collect()
    }

    /// `omega0 + omega_shift`.
    pub fn omega(&self) -> Vec<f64> {
        self.omega0().iter().zip(&self.omega_shift).map(|(&w, s)| w as f64 + s).collect()
    }

    /// `delta^(2p)`.
    pub fn coupling(&self) -> f64 {
        self.delta.powi(2 * self.p as i32)
    }

    /// `max |v(x) - conj u(-x)|`.
    pub fn conjugacy_deviation(&self) -> f64 {
        self.v.max_abs_diff(&self.u.conj_reflect())
    }

    /// Replaces `(u, v)` by the nearest conjugate-consistent pair.
    pub fn symmetrize(&mut self) {
        let mean = self.u.add(&self.v.conj_reflect()).scale(Complex64::new(0.5, 0.0));
        self.v = mean.conj_reflect();
        self.u = mean;
    }

    /// Largest deviation of `u` from the amplitudes on the tangential sites.
    pub fn gauge_deviation(&self) -> f64 {
        self.u_sites()
            .iter()
            .zip(&self.a)
            .map(|(x, &a)| (self.u.get(x) - Complex64::new(a, 0.0)).norm())
            .fold(0.0, f64::max)
    }
}

/// Validates the support data `j_1..j_b` (non-empty, equal dimension, nonzero, distinct).
pub fn validate_support(j_list: &[Vec<i64>]) -> Result<usize> {
    let Some(first) = j_list.first() else {
        return Err(Error::InvalidArgument("j_list must be non-empty".into()));
    };
    let d = first.len();
    if d == 0 {
        return Err(Error::InvalidArgument("spatial dimension must be at least 1".into()));
    }
    for (k, j) in j_list.iter().enumerate() {
        if j.len() != d {
            return Err(Error::DimensionMismatch(format!("j_{} has length {}, expected {d}", k + 1, j.len())));
        }
        if j.iter().all(|&x| x == 0) {
            return Err(Error::InvalidArgument(format!("j_{} is zero", k + 1)));
        }
        if j_list[..k].contains(j) {
            return Err(Error::InvalidArgument(format!("j_{} repeats an earlier wave vector", k + 1)));
        }
    }
    Ok(d)
}

/// The linear solution `u0 = sum a_k e^{-i j_k^2 t} e^{i j_k x}` with `omega = omega0 = (|j_k|^2)`.
pub fn build_initial(a: &[f64], j_list: &[Vec<i64>], delta: f64, p: u32) -> Result<SolverState> {
    let d = validate_support(j_list)?;
    let b = j_list.len();
    if a.len() != b {
        return Err(Error::DimensionMismatch(format!("{} amplitudes for {b} sites", a.len())));
    }
    if let Some(bad) = a.iter().find(|&&x| !(x > 0.0 && x <= 1.0)) {
        return Err(Error::InvalidArgument(format!("amplitude {bad} outside (0,1]")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta {delta} outside (0,1)")));
    }
    if p == 0 {
        return Err(Error::InvalidArgument("p must be at least 1".into()));
    }
    let u = FourierSeq::from_pairs(
        b,
        d,
        j_list
            .iter()
            .zip(a)
            .enumerate()
            .map(|(k, (j, &ak))| (ModeIndex::tangential(b, k, j), Complex64::new(ak, 0.0))),
    );
    let v = u.conj_reflect();
    Ok(SolverState {
        u,
        v,
        omega_shift: vec![0.0; b],
        a: a.to_vec(),
        delta,
        p,
        j_support: j_list.to_vec(),
        phase: 0.0,
    })
}

/// Powers `(u*v)^{*k}` for `k = p-1 ..= p + m_max`, computed once and shared by
/// the residual and the linearization.
pub(crate) struct ProductPowers {
    /// `powers[i] = (u*v)^{*(p - 1 + i)}`
    powers: Vec<FourierSeq>,
    p: u32,
}

impl ProductPowers {
    pub(crate) fn new(state: &SolverState, tail: &TailSpec) -> Result<Self> {
        Self::from_pair(&state.u, &state.v, state.p, tail.m_max())
    }

    pub(crate) fn from_pair(u: &FourierSeq, v: &FourierSeq, p: u32, m_max: usize) -> Result<Self> {
        let w = convolve(u, v)?;
        let mut powers = vec![conv_power(&w, p - 1)?];
        for _ in 0..=m_max {
            let next = convolve(powers.last().expect("non-empty"), &w)?;
            powers.push(next);
        }
        Ok(Self { powers, p })
    }

    /// `(u*v)^{*k}`
    pub(crate) fn get(&self, k: u32) -> &FourierSeq {
        &self.powers[(k + 1 - self.p) as usize]
    }
}

/// Nonlinear part of one component: `delta^{2p} (u*v)^p * z + sum_m delta^{2p+2m} alpha_m * (u*v)^{p+m} * z`.
pub(crate) fn nonlinear_part(
    z: &FourierSeq,
    pw: &ProductPowers,
    tail: &TailSpec,
    delta: f64,
    p: u32,
) -> Result<FourierSeq> {
    let mut out = convolve(pw.get(p), z)?.scale(Complex64::new(delta.powi(2 * p as i32), 0.0));
    for (m, alpha) in tail.alphas.iter().enumerate() {
        if alpha.is_empty() {
            continue;
        }
        let m = m as u32 + 1;
        let term = convolve(&convolve(alpha, pw.get(p + m))?, z)?;
        out = out.add(&term.scale(Complex64::new(delta.powi(2 * (p + m) as i32), 0.0)));
    }
    Ok(out)
}

/// Diagonal symbol `n.omega + |j|^2 + phase` (u-block) or `-n.omega + |j|^2 + phase` (v-block),
/// with `omega = omega0 + shift` and the integer part summed exactly.
pub fn diagonal_symbol(x: &ModeIndex, omega0: &[i64], shift: &[f64], phase: f64, conj_block: bool) -> f64 {
    let (ni, nf) = (x.n_dot_int(omega0), x.n_dot(shift));
    let (ni, nf) = if conj_block { (-ni, -nf) } else { (ni, nf) };
    (ni + x.j_sq()) as f64 + nf + phase
}

fn linear_part(z: &FourierSeq, state: &SolverState, conj_block: bool) -> FourierSeq {
    let w0 = state.omega0();
    FourierSeq::from_pairs(
        z.b(),
        z.d(),
        z.iter()
            .map(|(x, c)| (x.clone(), c * diagonal_symbol(x, &w0, &state.omega_shift, state.phase, conj_block))),
    )
}

/// Unrestricted residual pair `(F_u, F_v)` of the rescaled system.
pub fn residual_full(state: &SolverState, tail: &TailSpec) -> Result<(FourierSeq, FourierSeq)> {
    if state.u.is_empty() && state.v.is_empty() {
        let z = FourierSeq::zero(state.u.b(), state.u.d());
        return Ok((z.clone(), z));
    }
    let pw = ProductPowers::new(state, tail)?;
    let fu = linear_part(&state.u, state, false).add(&nonlinear_part(
        &state.u,
        &pw,
        tail,
        state.delta,
        state.p,
    )?);
    let fv = linear_part(&state.v, state, true).add(&nonlinear_part(
        &state.v,
        &pw,
        tail,
        state.delta,
        state.p,
    )?);
    Ok((fu, fv))
}

/// Residual `(F_u, F_v)` computed with exact convolutions and then restricted to `bx`.
///
/// `F_v` is computed on its own path and compared against the reflected
/// conjugate of `F_u`; a mismatch means the state is not conjugate-consistent.
pub fn residual_f(state: &SolverState, tail: &TailSpec, bx: &TruncBox) -> Result<(FourierSeq, FourierSeq)> {
    let (fu, fv) = residual_full(state, tail)?;
    let scale = fu.sup_norm().max(1.0);
    let dev = fv.max_abs_diff(&fu.conj_reflect());
    if dev > CONJUGACY_TOL * scale {
        return Err(Error::ConjugacyMismatch { deviation: dev });
    }
    Ok((fu.restrict(bx), fv.restrict(bx)))
}

/// Direct evaluation of `u(t,x) = sum u(n,j) e^{i n.omega t} e^{i j.x}` on a grid; rows are times.
pub fn eval_physical(state: &SolverState, t_grid: &[f64], x_grid: &[Vec<f64>]) -> Vec<Vec<Complex64>> {
    eval_series(&state.u, &state.omega(), t_grid, x_grid)
}

pub(crate) fn eval_series(
    f: &FourierSeq,
    omega: &[f64],
    t_grid: &[f64],
    x_grid: &[Vec<f64>],
) -> Vec<Vec<Complex64>> {
    t_grid
        .iter()
        .map(|&t| {
            x_grid
                .iter()
                .map(|x| {
                    f.iter()
                        .map(|(m, c)| {
                            let phase = m.n_dot(omega) * t + m.j.iter().zip(x).map(|(&j, xi)| j as f64 * xi).sum::<f64>();
                            c * Complex64::from_polar(1.0, phase)
                        })
                        .sum()
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn mi(n: &[i64], j: &[i64]) -> ModeIndex {
        ModeIndex::new(n.to_vec(), j.to_vec())
    }

    #[test]
    fn single_point_supports_add() {
        let a = 0.7;
        let f = FourierSeq::from_pairs(1, 1, [(mi(&[-1], &[1]), c(a))]);
        let g = FourierSeq::from_pairs(1, 1, [(mi(&[1], &[-1]), c(a))]);
        let h = convolve(&f, &g).unwrap();
        assert_eq!(h.len(), 1);
        assert_eq!(h.get(&mi(&[0], &[0])), c(a * a));
    }

    #[test]
    fn delta0_is_identity() {
        let f = FourierSeq::from_pairs(
            2,
            1,
            [(mi(&[1, 0], &[3]), Complex64::new(0.2, 0.5)), (mi(&[-2, 1], &[-1]), c(1.5))],
        );
        assert_eq!(convolve(&f, &FourierSeq::delta0(2, 1)).unwrap(), f);
    }

    #[test]
    fn two_mode_product_support() {
        let (a1, a2) = (0.3, 0.8);
        let st = build_initial(&[a1, a2], &[vec![1], vec![4]], 0.1, 1).unwrap();
        let w = convolve(&st.u, &st.v).unwrap();
        // hand enumeration of the 2x2 products u(-e_k, j_k) v(e_k', -j_k')
        assert_eq!(w.len(), 3);
        assert!((w.get(&mi(&[0, 0], &[0])) - c(a1 * a1 + a2 * a2)).norm() < 1e-15);
        assert!((w.get(&mi(&[-1, 1], &[-3])) - c(a1 * a2)).norm() < 1e-15);
        assert!((w.get(&mi(&[1, -1], &[3])) - c(a1 * a2)).norm() < 1e-15);
    }

    #[test]
    fn powers() {
        let f = FourierSeq::from_pairs(1, 2, [(mi(&[0], &[0, 0]), Complex64::new(0.5, 0.5))]);
        assert_eq!(conv_power(&f, 0).unwrap(), FourierSeq::delta0(1, 2));
        assert_eq!(conv_power(&f, 1).unwrap(), f);
        let z = Complex64::new(0.5, 0.5);
        assert!((conv_power(&f, 3).unwrap().get(&ModeIndex::zero(1, 2)) - z * z * z).norm() < 1e-15);
    }

    #[test]
    fn build_initial_examples() {
        let st = build_initial(&[0.5], &[vec![2]], 0.1, 1).unwrap();
        assert_eq!(st.u.get(&mi(&[-1], &[2])), c(0.5));
        assert_eq!(st.u.len(), 1);
        assert_eq!(st.v.get(&mi(&[1], &[-2])), c(0.5));
        assert_eq!(st.omega(), vec![4.0]);

        let st = build_initial(&[0.5, 0.5], &[vec![1, 0], vec![0, 1]], 0.1, 1).unwrap();
        assert_eq!(st.omega(), vec![1.0, 1.0]);

        assert!(build_initial(&[0.5, 0.5], &[vec![1], vec![1]], 0.1, 1).is_err());
        assert!(build_initial(&[0.5], &[vec![0]], 0.1, 1).is_err());
        assert!(build_initial(&[1.5], &[vec![1]], 0.1, 1).is_err());
        assert!(build_initial(&[0.0], &[vec![1]], 0.1, 1).is_err());
    }

    #[test]
    fn exact_one_mode_residual_vanishes() {
        let (a, delta) = (0.5, 0.1);
        let mut st = build_initial(&[a], &[vec![2]], delta, 1).unwrap();
        st.omega_shift = vec![delta * delta * a * a];
        let (fu, fv) = residual_f(&st, &TailSpec::none(), &TruncBox::isotropic(6)).unwrap();
        assert!(fu.sup_norm() < 1e-15, "{fu:?}");
        assert!(fv.sup_norm() < 1e-15);

        // dyadic data makes every operation exact
        let mut st = build_initial(&[0.5], &[vec![2]], 0.5, 1).unwrap();
        st.omega_shift = vec![0.0625];
        let (fu, fv) = residual_f(&st, &TailSpec::none(), &TruncBox::isotropic(6)).unwrap();
        assert!(fu.is_empty() && fv.is_empty());
    }

    #[test]
    fn unmodulated_one_mode_residual() {
        let st = build_initial(&[0.5], &[vec![2]], 0.1, 1).unwrap();
        let (fu, _) = residual_f(&st, &TailSpec::none(), &TruncBox::isotropic(6)).unwrap();
        assert_eq!(fu.len(), 1);
        // delta^2 a^3
        assert!((fu.get(&mi(&[-1], &[2])) - c(1.25e-3)).norm() < 1e-17);
    }

    #[test]
    fn zero_state_residual() {
        let mut st = build_initial(&[0.5], &[vec![2]], 0.1, 1).unwrap();
        st.u = FourierSeq::zero(1, 1);
        st.v = FourierSeq::zero(1, 1);
        let (fu, fv) = residual_f(&st, &TailSpec::none(), &TruncBox::isotropic(3)).unwrap();
        assert!(fu.is_empty() && fv.is_empty());
    }

    #[test]
    fn corrupted_state_is_rejected() {
        let mut st = build_initial(&[0.5, 0.3], &[vec![2], vec![-1]], 0.1, 1).unwrap();
        st.v.set(mi(&[1, 0], &[-2]), c(0.9));
        let err = residual_f(&st, &TailSpec::none(), &TruncBox::isotropic(6)).unwrap_err();
        assert!(matches!(err, Error::ConjugacyMismatch { .. }));
    }

    #[test]
    fn eval_physical_single_mode() {
        let st = build_initial(&[0.6], &[vec![1, 2]], 0.1, 1).unwrap();
        let vals = eval_physical(&st, &[0.0], &[vec![0.0, 0.0]]);
        assert!((vals[0][0] - c(0.6)).norm() < 1e-15);
        let ts = [0.3, 1.7, 12.5];
        let xs = vec![vec![0.1, 0.2], vec![3.0, -1.0]];
        for row in eval_physical(&st, &ts, &xs) {
            for z in row {
                assert!((z.norm() - 0.6).abs() < 1e-14);
            }
        }
        let mut empty = st.clone();
        empty.u = FourierSeq::zero(1, 2);
        assert!(eval_physical(&empty, &ts, &xs).iter().flatten().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn json_roundtrip_is_bit_exact() {
        let f = FourierSeq::from_pairs(
            2,
            1,
            [
                (mi(&[1, 0], &[3]), Complex64::new(0.1 + 0.2, -1.0 / 3.0)),
                (mi(&[-2, 1], &[-1]), Complex64::new(1e-300, std::f64::consts::PI)),
            ],
        );
        let s = serde_json::to_string(&f).unwrap();
        let g: FourierSeq = serde_json::from_str(&s).unwrap();
        for (x, c) in f.iter() {
            let d = g.get(x);
            assert_eq!(c.re.to_bits(), d.re.to_bits());
            assert_eq!(c.im.to_bits(), d.im.to_bits());
        }
        assert_eq!(f, g);
    }

    #[test]
    fn tail_validation() {
        let ok = FourierSeq::from_pairs(1, 1, [(mi(&[0], &[1]), c(0.1)), (mi(&[0], &[-1]), c(0.1))]);
        assert!(TailSpec::new(vec![ok.clone()], 1.0, 1.0).is_ok());
        let off_n = FourierSeq::from_pairs(1, 1, [(mi(&[1], &[0]), c(0.1))]);
        assert!(TailSpec::new(vec![off_n], 1.0, 1.0).is_err());
        let too_big = FourierSeq::from_pairs(1, 1, [(mi(&[0], &[3]), c(0.5)), (mi(&[0], &[-3]), c(0.5))]);
        assert!(TailSpec::new(vec![too_big], 1.0, 1.0).is_err());
        let complex = FourierSeq::from_pairs(1, 1, [(mi(&[0], &[1]), Complex64::new(0.0, 0.1))]);
        assert!(TailSpec::new(vec![complex], 1.0, 1.0).is_err());
    }
}
