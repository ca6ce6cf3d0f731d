//! Exact integer verification of the genericity conditions on the support
//! `j_1..j_b` of the unperturbed solution.
//!
//! Conditions (i) and (iv) are scalar non-vanishing tests. Conditions (ii)
//! and (iii) ask that no `(d+1)`-set of rows `(2Δj, J)` be singular; they
//! are decided by grouping rows into the hyperplanes they span instead of
//! visiting every subset.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use num_bigint::BigInt;
use num_traits::{Signed, Zero};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::ModeIndex;
use crate::resonance::{gamma_supports, GammaSupports};

pub const DEFAULT_A_CAP: usize = 1_000_000;
pub const DEFAULT_BUDGET: u128 = 50_000_000;
pub const MAX_WITNESSES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaKind {
    Gpp,
    Gpm,
    Gmp,
}

/// Which `(d+1)`-sets of rows count as degenerate in (ii) and (iii).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetRule {
    /// `det(2Δj, J) = 0`.
    #[default]
    Literal,
    /// Singular and the system `2Δj·j + J = 0` has a real solution, i.e.
    /// the last unit vector is not in the row span.
    Solvable,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenericityOptions {
    pub mu: i64,
    pub a_cap: usize,
    /// Upper bound on hyperplane-search work, counted in row subsets.
    pub budget: u128,
    pub rule: DetRule,
    /// Permutes row order before the searches; verdicts must not depend on it.
    pub permutation_seed: Option<u64>,
}

impl Default for GenericityOptions {
    fn default() -> Self {
        Self {
            mu: 0,
            a_cap: DEFAULT_A_CAP,
            budget: DEFAULT_BUDGET,
            rule: DetRule::Literal,
            permutation_seed: None,
        }
    }
}

/// `(d+2)`-fold sums of shifts with `|#gpm - #gmp| <= 1`, keyed by value and
/// tag `#gpm - #gmp`.
#[derive(Debug, Clone)]
pub struct ASet {
    pub d: usize,
    pub elements: BTreeMap<(ModeIndex, i8), Vec<(GammaKind, ModeIndex)>>,
}

impl ASet {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn contains_value(&self, x: &ModeIndex) -> bool {
        (-1..=1).any(|t| self.elements.contains_key(&(x.clone(), t)))
    }

    pub fn values(&self) -> BTreeSet<ModeIndex> {
        self.elements.keys().map(|(x, _)| x.clone()).collect()
    }
}

pub fn build_a(g: &GammaSupports, cap: usize) -> Result<ASet> {
    let d = g.d;
    let factors = d + 2;
    let shifts: Vec<(GammaKind, &ModeIndex, i8)> = g
        .gpp_nonzero()
        .map(|s| (GammaKind::Gpp, s, 0))
        .chain(g.gpm.keys().map(|s| (GammaKind::Gpm, s, 1)))
        .chain(g.gmp.keys().map(|s| (GammaKind::Gmp, s, -1)))
        .collect();
    let mut all: BTreeMap<(ModeIndex, i8), Vec<(GammaKind, ModeIndex)>> = BTreeMap::new();
    all.insert((ModeIndex::zero(g.b, d), 0), Vec::new());
    let mut frontier = vec![(ModeIndex::zero(g.b, d), 0i8)];
    for step in 0..factors {
        let remaining = (factors - step - 1) as i8;
        let mut next = Vec::new();
        for key in &frontier {
            let base = all[key].clone();
            for (kind, s, dt) in &shifts {
                let tag = key.1 + dt;
                if tag.abs() > 1 + remaining {
                    continue;
                }
                let nk = (&key.0 + s, tag);
                if all.contains_key(&nk) {
                    continue;
                }
                let mut w = base.clone();
                w.push((*kind, (*s).clone()));
                all.insert(nk.clone(), w);
                next.push(nk);
                if all.len() > cap {
                    return Err(Error::Capacity {
                        what: "A-set",
                        needed: all.len() as u128,
                        limit: cap as u128,
                    });
                }
            }
        }
        frontier = next;
    }
    all.retain(|(_, t), _| t.abs() <= 1);
    Ok(ASet { d, elements: all })
}

/// Values of `k`-fold sums of `gpp`.
pub fn gpp_sums(g: &GammaSupports, k: usize) -> BTreeSet<ModeIndex> {
    let mut all: BTreeSet<ModeIndex> = g.gpp.keys().cloned().collect();
    let mut frontier: Vec<ModeIndex> = all.iter().cloned().collect();
    for _ in 1..k {
        let mut next = Vec::new();
        for x in &frontier {
            for s in g.gpp_nonzero() {
                let y = x + s;
                if all.insert(y.clone()) {
                    next.push(y);
                }
            }
        }
        frontier = next;
    }
    all
}

/// `(prod_d gpp) gpm`: values with one mixed factor.
pub fn mixed_sums(g: &GammaSupports) -> BTreeSet<ModeIndex> {
    let base = gpp_sums(g, g.d);
    let mut out = BTreeSet::new();
    for x in &base {
        for s in g.gpm.keys() {
            out.insert(x + s);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Truncated,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Witness {
    Sigma {
        element: String,
        tag: i8,
        sign: char,
        value: i64,
    },
    Determinant {
        /// The element `(a, a')` whose `a'` enters `J`, for condition (iii).
        reading: Option<String>,
        sigma: Vec<String>,
        det: String,
    },
    Rank {
        sigma: Vec<String>,
        note: String,
    },
    F {
        m: usize,
        shift: String,
        f: i64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionResult {
    pub status: Status,
    /// Number of elements, rows or subsets examined.
    pub checked: u128,
    pub witnesses: Vec<Witness>,
    /// Degenerate sets excused by a side clause of the condition.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exempt: Vec<Witness>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl ConditionResult {
    fn from_witnesses(checked: u128, mut w: Vec<Witness>) -> Self {
        w.sort();
        w.truncate(MAX_WITNESSES);
        Self {
            status: if w.is_empty() { Status::Pass } else { Status::Fail },
            checked,
            witnesses: w,
            exempt: Vec::new(),
            note: None,
        }
    }

    fn truncated(needed: u128, budget: u128) -> Self {
        Self {
            status: Status::Truncated,
            checked: 0,
            witnesses: Vec::new(),
            exempt: Vec::new(),
            note: Some(format!("search needs {needed} subsets, budget is {budget}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Generic,
    NonGeneric,
    Truncated,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenericityReport {
    pub b: usize,
    pub d: usize,
    pub p: u32,
    pub j_list: Vec<Vec<i64>>,
    pub omega0: Vec<i64>,
    pub mu: i64,
    pub rule: DetRule,
    pub a_size: usize,
    pub cond_i: ConditionResult,
    pub cond_ii: ConditionResult,
    pub cond_iii: ConditionResult,
    pub cond_iv: ConditionResult,
    pub verdict: Verdict,
}

impl GenericityReport {
    pub fn pass_i(&self) -> bool {
        self.cond_i.status == Status::Pass
    }

    pub fn pass_ii(&self) -> bool {
        self.cond_ii.status == Status::Pass
    }

    pub fn pass_iii(&self) -> bool {
        self.cond_iii.status == Status::Pass
    }

    pub fn pass_iv(&self) -> bool {
        self.cond_iv.status == Status::Pass
    }

    pub fn is_generic(&self) -> bool {
        self.verdict == Verdict::Generic
    }

    /// Names of the conditions that failed outright.
    pub fn failed(&self) -> Vec<&'static str> {
        [
            ("i", &self.cond_i),
            ("ii", &self.cond_ii),
            ("iii", &self.cond_iii),
            ("iv", &self.cond_iv),
        ]
        .into_iter()
        .filter(|(_, c)| c.status == Status::Fail)
        .map(|(n, _)| n)
        .collect()
    }
}

fn dot(a: &[i64], b: &[i64]) -> i64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn omega0_of(j_list: &[Vec<i64>]) -> Vec<i64> {
    j_list.iter().map(|j| dot(j, j)).collect()
}

/// Condition (i): `|Δj|^2 ± Δn·omega0` avoids `[-mu, mu]` on `A \ 0`.
pub fn check_i(a: &ASet, omega0: &[i64], mu: i64) -> ConditionResult {
    let mut w = Vec::new();
    let mut checked = 0u128;
    for (x, tag) in a.elements.keys() {
        if x.is_zero() {
            continue;
        }
        checked += 1;
        let js = x.j_sq();
        let nw = x.n_dot_int(omega0);
        for (sign, v) in [('+', js + nw), ('-', js - nw)] {
            if v.abs() <= mu {
                w.push(Witness::Sigma {
                    element: x.to_string(),
                    tag: *tag,
                    sign,
                    value: v,
                });
            }
        }
    }
    ConditionResult::from_witnesses(checked, w)
}

/// Condition (iv): `Δn·omega0 + 2 j_m·Δj + |Δj|^2` avoids `[-mu, mu]` off the excluded shifts.
pub fn check_iv(g: &GammaSupports, omega0: &[i64], j_list: &[Vec<i64>], mu: i64) -> ConditionResult {
    let b = j_list.len();
    let mut w = Vec::new();
    let mut checked = 0u128;
    for (m, jm) in j_list.iter().enumerate() {
        let excluded: HashSet<ModeIndex> = (0..b)
            .map(|kp| {
                let mut n = vec![0; b];
                n[kp] -= 1;
                n[m] += 1;
                ModeIndex::new(n, j_list[kp].iter().zip(jm).map(|(a, c)| a - c).collect())
            })
            .collect();
        for x in g.gpp.keys() {
            if excluded.contains(x) {
                continue;
            }
            checked += 1;
            let f = x.n_dot_int(omega0) + 2 * dot(jm, &x.j) + x.j_sq();
            if f.abs() <= mu {
                w.push(Witness::F {
                    m: m + 1,
                    shift: x.to_string(),
                    f,
                });
            }
        }
    }
    ConditionResult::from_witnesses(checked, w)
}

// ---------- exact linear algebra on small integer matrices ----------

fn det_i128(m: &[Vec<i128>]) -> Option<i128> {
    let n = m.len();
    if n == 0 {
        return Some(1);
    }
    let mut a: Vec<Vec<i128>> = m.to_vec();
    let mut sign = 1i128;
    let mut prev = 1i128;
    for k in 0..n - 1 {
        if a[k][k] == 0 {
            let Some(piv) = (k + 1..n).find(|&i| a[i][k] != 0) else {
                return Some(0);
            };
            a.swap(k, piv);
            sign = -sign;
        }
        for i in k + 1..n {
            for j in k + 1..n {
                let v = a[i][j].checked_mul(a[k][k])?.checked_sub(a[i][k].checked_mul(a[k][j])?)?;
                a[i][j] = v / prev;
            }
        }
        prev = a[k][k];
    }
    a[n - 1][n - 1].checked_mul(sign)
}

/// Exact determinant by fraction-free (Bareiss) elimination.
pub fn det_big(m: &[Vec<BigInt>]) -> BigInt {
    let n = m.len();
    if n == 0 {
        return BigInt::from(1);
    }
    let mut a: Vec<Vec<BigInt>> = m.to_vec();
    let mut negate = false;
    let mut prev = BigInt::from(1);
    for k in 0..n - 1 {
        if a[k][k].is_zero() {
            let Some(piv) = (k + 1..n).find(|&i| !a[i][k].is_zero()) else {
                return BigInt::zero();
            };
            a.swap(k, piv);
            negate = !negate;
        }
        for i in k + 1..n {
            for j in k + 1..n {
                let v = &a[i][j] * &a[k][k] - &a[i][k] * &a[k][j];
                a[i][j] = v / &prev;
            }
        }
        prev = a[k][k].clone();
    }
    let r = a[n - 1][n - 1].clone();
    if negate {
        -r
    } else {
        r
    }
}

fn to_big(m: &[Vec<i128>]) -> Vec<Vec<BigInt>> {
    m.iter().map(|r| r.iter().map(|&x| BigInt::from(x)).collect()).collect()
}

fn det_exact(m: &[Vec<i128>]) -> BigInt {
    match det_i128(m) {
        Some(v) => BigInt::from(v),
        None => det_big(&to_big(m)),
    }
}

/// Rank over Q by fraction-free elimination.
fn rank_big(rows: &[Vec<BigInt>]) -> usize {
    let mut a: Vec<Vec<BigInt>> = rows.to_vec();
    let cols = a.first().map_or(0, |r| r.len());
    let mut rank = 0;
    for c in 0..cols {
        let Some(piv) = (rank..a.len()).find(|&i| !a[i][c].is_zero()) else {
            continue;
        };
        a.swap(rank, piv);
        for i in rank + 1..a.len() {
            if a[i][c].is_zero() {
                continue;
            }
            let (p, q) = (a[rank][c].clone(), a[i][c].clone());
            for j in c..cols {
                a[i][j] = &a[i][j] * &p - &a[rank][j] * &q;
            }
        }
        rank += 1;
    }
    rank
}

/// Whether `det(2Δj, J + t) = 0` for some real `t` with `|t_i| <= mu`.
///
/// The determinant is linear in the `J` column, so this holds iff
/// `|D| <= mu * sum |C_i|` with `C_i` the cofactors along that column.
fn thick_degenerate(rows: &[&Vec<i128>], mu: i64) -> bool {
    let n = rows.len();
    let m: Vec<Vec<i128>> = rows.iter().map(|r| (*r).clone()).collect();
    let d0 = det_exact(&m).abs();
    let mut spread = BigInt::zero();
    for i in 0..n {
        let minor: Vec<Vec<i128>> = (0..n).filter(|&k| k != i).map(|k| m[k][..n - 1].to_vec()).collect();
        spread += det_exact(&minor).abs();
    }
    d0 <= spread * BigInt::from(mu)
}

fn degenerate_mu(rows: &[&Vec<i128>], rule: DetRule, mu: i64) -> bool {
    if mu > 0 {
        thick_degenerate(rows, mu)
    } else {
        degenerate(rows, rule)
    }
}

fn degenerate(rows: &[&Vec<i128>], rule: DetRule) -> bool {
    let m: Vec<Vec<i128>> = rows.iter().map(|r| (*r).clone()).collect();
    match rule {
        DetRule::Literal => det_exact(&m).is_zero(),
        DetRule::Solvable => {
            let big = to_big(&m);
            let r = rank_big(&big);
            let mut ext = big;
            let w = ext[0].len();
            let mut e = vec![BigInt::zero(); w];
            e[w - 1] = BigInt::from(1);
            ext.push(e);
            r < rows.len() && rank_big(&ext) > r
        }
    }
}

/// Primitive normal of the hyperplane spanned by `d` rows of width `d+1`;
/// `None` when the rows are dependent.
fn normal(rows: &[&Vec<i128>]) -> Result<Option<Vec<i128>>> {
    let w = rows[0].len();
    let mut nu = Vec::with_capacity(w);
    for c in 0..w {
        let minor: Vec<Vec<i128>> = rows
            .iter()
            .map(|r| r.iter().enumerate().filter(|(i, _)| *i != c).map(|(_, &x)| x).collect())
            .collect();
        let v = det_exact(&minor);
        let v = if c % 2 == 0 { v } else { -v };
        nu.push(v);
    }
    if nu.iter().all(|x| x.is_zero()) {
        return Ok(None);
    }
    let g = nu.iter().fold(BigInt::zero(), |acc, x| num_integer_gcd(&acc, x));
    let first_neg = nu.iter().find(|x| !x.is_zero()).is_some_and(|x| x.is_negative());
    let out: Option<Vec<i128>> = nu
        .iter()
        .map(|x| {
            let q = x / &g;
            let q = if first_neg { -q } else { q };
            i128::try_from(q).ok()
        })
        .collect();
    out.map(Some).ok_or(Error::Capacity {
        what: "hyperplane normal width",
        needed: 128,
        limit: 127,
    })
}

fn num_integer_gcd(a: &BigInt, b: &BigInt) -> BigInt {
    let (mut a, mut b) = (a.abs(), b.abs());
    while !b.is_zero() {
        let r = &a % &b;
        a = b;
        b = r;
    }
    a
}

fn binom(n: u128, k: u128) -> u128 {
    if k > n {
        return 0;
    }
    let mut r: u128 = 1;
    for i in 0..k {
        r = r.saturating_mul(n - i) / (i + 1);
    }
    r
}

struct Scan {
    /// Normals of hyperplanes holding at least `d+1` rows.
    planes: BTreeSet<Vec<i128>>,
    /// Dependent `d`-subsets, as sorted row indices.
    deficient: BTreeSet<Vec<usize>>,
}

fn for_each_combination(start: usize, n: usize, k: usize, prefix: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
    if k == 0 {
        f(prefix);
        return;
    }
    for i in start..n {
        if n - i < k {
            break;
        }
        prefix.push(i);
        for_each_combination(i + 1, n, k - 1, prefix, f);
        prefix.pop();
    }
}

/// Finds every hyperplane through 0 carrying `d+1` rows and every dependent `d`-subset.
///
/// Anchors are `(d-1)`-subsets; each anchor groups the normals it spans
/// with every later row, and a normal seen twice marks a crowded hyperplane.
fn hyperplane_scan(rows: &[Vec<i128>], d: usize) -> Result<Scan> {
    let n = rows.len();
    let per_first: Vec<Result<Scan>> = (0..n.max(1))
        .into_par_iter()
        .map(|first| {
            let mut local = Scan {
                planes: BTreeSet::new(),
                deficient: BTreeSet::new(),
            };
            let mut err = None;
            let mut visit = |anchor: &[usize]| {
                if err.is_some() {
                    return;
                }
                let start = anchor.last().map_or(0, |&l| l + 1);
                let mut counts: HashMap<Vec<i128>, u32> = HashMap::new();
                for k in start..n {
                    let mut t: Vec<&Vec<i128>> = anchor.iter().map(|&i| &rows[i]).collect();
                    t.push(&rows[k]);
                    match normal(&t) {
                        Ok(Some(nu)) => *counts.entry(nu).or_default() += 1,
                        Ok(None) => {
                            let mut s = anchor.to_vec();
                            s.push(k);
                            local.deficient.insert(s);
                        }
                        Err(e) => {
                            err = Some(e);
                            return;
                        }
                    }
                }
                local.planes.extend(counts.into_iter().filter(|(_, c)| *c >= 2).map(|(k, _)| k));
            };
            if d == 1 {
                if first == 0 {
                    visit(&[]);
                }
            } else if first < n {
                let mut prefix = vec![first];
                for_each_combination(first + 1, n, d - 2, &mut prefix, &mut visit);
            }
            match err {
                Some(e) => Err(e),
                None => Ok(local),
            }
        })
        .collect();
    let mut out = Scan {
        planes: BTreeSet::new(),
        deficient: BTreeSet::new(),
    };
    for s in per_first {
        let s = s?;
        out.planes.extend(s.planes);
        out.deficient.extend(s.deficient);
    }
    Ok(out)
}

fn on_plane(nu: &[i128], r: &[i128]) -> bool {
    nu.iter().zip(r).map(|(a, b)| BigInt::from(*a) * BigInt::from(*b)).sum::<BigInt>().is_zero()
}

/// One candidate row: its element, the row `(2Δj, J)` and whether it lies outside the difference set.
#[derive(Debug, Clone)]
struct RowEntry {
    value: ModeIndex,
    row: Vec<i128>,
    outside_diff: bool,
}

fn row_of(x: &ModeIndex, tag: i8, omega0: &[i64], a_prime: Option<&[i64]>) -> Vec<i128> {
    let js = x.j_sq() as i128;
    let nw = x.n_dot_int(omega0) as i128;
    let jv = match a_prime {
        Some(ap) if tag.abs() == 1 => js + 2 * dot(ap, &x.j) as i128 - nw,
        _ => js + nw,
    };
    x.j.iter().map(|&v| 2 * v as i128).chain(std::iter::once(jv)).collect()
}

/// The `(d+1) x (d+1)` determinant with rows `(2Δj, J)`.
///
/// `J = |Δj|^2 + Δn·omega0`, or `|Δj|^2 + 2a'·Δj - Δn·omega0` for rows with
/// an odd tag when `a_prime` is given.
pub fn det_d(sigma: &[ModeIndex], omega0: &[i64], a_prime: Option<&[i64]>, odd: &[bool]) -> Result<BigInt> {
    let Some(first) = sigma.first() else {
        return Err(Error::DimensionMismatch("empty sigma".into()));
    };
    let d = first.d();
    if sigma.len() != d + 1 || odd.len() != sigma.len() {
        return Err(Error::DimensionMismatch(format!(
            "sigma needs {} rows with matching parity flags, got {} and {}",
            d + 1,
            sigma.len(),
            odd.len()
        )));
    }
    if let Some(ap) = a_prime {
        if ap.len() != d {
            return Err(Error::DimensionMismatch(format!("a' has length {}, expected {d}", ap.len())));
        }
    }
    let m: Vec<Vec<i128>> = sigma
        .iter()
        .zip(odd)
        .map(|(x, &o)| row_of(x, if o { 1 } else { 0 }, omega0, a_prime))
        .collect();
    Ok(det_exact(&m))
}

fn diff_set(j_list: &[Vec<i64>]) -> HashSet<Vec<i64>> {
    let b = j_list.len();
    let mut s = HashSet::new();
    for k in 0..b {
        for kp in 0..b {
            if k != kp {
                s.insert(j_list[k].iter().zip(&j_list[kp]).map(|(a, c)| a - c).collect());
            }
        }
    }
    s
}

fn sum_set(j_list: &[Vec<i64>]) -> HashSet<Vec<i64>> {
    let mut s = HashSet::new();
    for a in j_list {
        for c in j_list {
            s.insert(a.iter().zip(c).map(|(x, y)| x + y).collect());
        }
    }
    s
}

fn label(x: &ModeIndex, tag: i8) -> String {
    match tag {
        0 => x.to_string(),
        t => format!("{x}{}", if t > 0 { "+" } else { "-" }),
    }
}

fn permute<T>(v: &mut [T], seed: Option<u64>) {
    if let Some(s) = seed {
        v.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    }
}

/// Condition (ii) over `(d+1)`-sets drawn from the nonzero `(d+1)`-fold `gpp` sums.
pub fn check_ii(
    g: &GammaSupports,
    omega0: &[i64],
    j_list: &[Vec<i64>],
    opts: &GenericityOptions,
) -> Result<ConditionResult> {
    let d = g.d;
    let diffs = diff_set(j_list);
    let mut entries: Vec<RowEntry> = gpp_sums(g, d + 1)
        .into_iter()
        .filter(|x| x.j.iter().any(|&v| v != 0))
        .map(|x| RowEntry {
            row: row_of(&x, 0, omega0, None),
            outside_diff: !diffs.contains(&x.j),
            value: x,
        })
        .collect();
    permute(&mut entries, opts.permutation_seed);
    let n = entries.len() as u128;
    let work = if opts.mu > 0 { binom(n, d as u128 + 1) } else { binom(n, d as u128) };
    if work > opts.budget {
        return Ok(ConditionResult::truncated(work, opts.budget));
    }
    if entries.len() < d + 1 {
        return Ok(ConditionResult::from_witnesses(0, Vec::new()));
    }
    let rows: Vec<Vec<i128>> = entries.iter().map(|e| e.row.clone()).collect();
    if opts.mu > 0 {
        let mut fails = Vec::new();
        for_each_combination(0, entries.len(), d + 1, &mut Vec::new(), &mut |c: &[usize]| {
            if !c.iter().any(|&i| entries[i].outside_diff) {
                return;
            }
            let r: Vec<&Vec<i128>> = c.iter().map(|&i| &rows[i]).collect();
            if thick_degenerate(&r, opts.mu) {
                let m: Vec<Vec<i128>> = r.iter().map(|x| (*x).clone()).collect();
                let mut sigma: Vec<String> = c.iter().map(|&i| entries[i].value.to_string()).collect();
                sigma.sort();
                fails.push(Witness::Determinant {
                    reading: None,
                    sigma,
                    det: det_exact(&m).to_string(),
                });
            }
        });
        return Ok(ConditionResult::from_witnesses(work, fails));
    }
    let scan = hyperplane_scan(&rows, d)?;
    let mut fails = Vec::new();
    let mut exempt = Vec::new();
    let canon = |idx: &mut Vec<usize>| -> Vec<String> {
        idx.sort_by(|&a, &b| entries[a].value.cmp(&entries[b].value));
        idx.iter().map(|&i| entries[i].value.to_string()).collect()
    };
    for nu in &scan.planes {
        if opts.rule == DetRule::Solvable && *nu.last().expect("width d+1") == 0 {
            continue;
        }
        let mut on: Vec<usize> = (0..entries.len()).filter(|&i| on_plane(nu, &rows[i])).collect();
        on.sort_by(|&a, &b| entries[a].value.cmp(&entries[b].value));
        let pick = |on: &[usize]| -> Option<Vec<usize>> {
            let app = on.iter().position(|&i| entries[i].outside_diff)?;
            let mut s: Vec<usize> = on.iter().copied().filter(|&i| i != on[app]).take(d).collect();
            s.push(on[app]);
            Some(s)
        };
        match pick(&on) {
            Some(mut s) => fails.push(Witness::Determinant {
                reading: None,
                sigma: canon(&mut s),
                det: "0".into(),
            }),
            None => {
                let mut s: Vec<usize> = on.iter().copied().take(d + 1).collect();
                exempt.push(Witness::Determinant {
                    reading: None,
                    sigma: canon(&mut s),
                    det: "0".into(),
                })
            }
        }
    }
    for t in &scan.deficient {
        let t_rows: Vec<&Vec<i128>> = t.iter().map(|&i| &rows[i]).collect();
        let t_app = t.iter().any(|&i| entries[i].outside_diff);
        let mut best: Option<Vec<usize>> = None;
        let mut exempt_hit: Option<Vec<usize>> = None;
        for x in 0..entries.len() {
            if t.contains(&x) {
                continue;
            }
            let mut r = t_rows.clone();
            r.push(&rows[x]);
            if !degenerate(&r, opts.rule) {
                continue;
            }
            let mut s = t.clone();
            s.push(x);
            if t_app || entries[x].outside_diff {
                best = Some(s);
                break;
            } else if exempt_hit.is_none() {
                exempt_hit = Some(s);
            }
        }
        if let Some(mut s) = best {
            fails.push(Witness::Rank {
                sigma: canon(&mut s),
                note: "dependent d-subset".into(),
            });
        } else if let Some(mut s) = exempt_hit {
            exempt.push(Witness::Rank {
                sigma: canon(&mut s),
                note: "dependent d-subset inside the difference set".into(),
            });
        }
    }
    let mut res = ConditionResult::from_witnesses(work, fails);
    exempt.sort();
    exempt.dedup();
    exempt.truncate(MAX_WITNESSES);
    res.exempt = exempt;
    Ok(res)
}

/// Condition (iii): `(d+2)`-sets containing an element `(a, a')` of the
/// mixed set, with `J` read through `a'` on odd-tag rows.
///
/// A set fails when every applicable reading `(a, a')` it contains gives a
/// degenerate determinant.
pub fn check_iii(
    a_set: &ASet,
    g: &GammaSupports,
    omega0: &[i64],
    j_list: &[Vec<i64>],
    opts: &GenericityOptions,
) -> Result<ConditionResult> {
    let d = g.d;
    let diffs = diff_set(j_list);
    let sums = sum_set(j_list);
    let g_d1 = gpp_sums(g, d + 1);
    let mixed = mixed_sums(g);
    let mut elems: Vec<(ModeIndex, i8)> = a_set
        .elements
        .keys()
        .filter(|(x, _)| x.j.iter().any(|&v| v != 0))
        .cloned()
        .collect();
    permute(&mut elems, opts.permutation_seed);
    let readings: Vec<(ModeIndex, i8)> =
        elems.iter().filter(|(x, t)| *t == 1 && mixed.contains(x)).cloned().collect();
    let n = elems.len() as u128;
    let k = if opts.mu > 0 { d as u128 + 1 } else { d as u128 };
    let work = binom(n.saturating_sub(1), k).saturating_mul(readings.len() as u128);
    if work > opts.budget {
        return Ok(ConditionResult::truncated(work, opts.budget));
    }
    if elems.len() < d + 2 {
        return Ok(ConditionResult::from_witnesses(0, Vec::new()));
    }
    let is_reading = |x: &(ModeIndex, i8)| x.1 == 1 && mixed.contains(&x.0);
    let applicable = |ap: &ModeIndex, sigma: &[&(ModeIndex, i8)]| {
        !sums.contains(&ap.j) || sigma.iter().any(|e| !diffs.contains(&e.0.j))
    };
    let (rule, mu) = (opts.rule, opts.mu);
    // Checks a full (d+2)-set given as element keys, reading `alpha` known degenerate.
    let set_fails = |alpha: &(ModeIndex, i8), rest: &[&(ModeIndex, i8)]| -> bool {
        let mut all: Vec<&(ModeIndex, i8)> = rest.to_vec();
        all.push(alpha);
        let values: BTreeSet<&ModeIndex> = all.iter().map(|e| &e.0).collect();
        if values.len() != all.len() {
            return false;
        }
        if all.iter().filter(|e| g_d1.contains(&e.0)).count() > d {
            return false;
        }
        if !applicable(&alpha.0, &all) {
            return false;
        }
        for beta in rest.iter().filter(|e| is_reading(e)) {
            if !applicable(&beta.0, &all) {
                continue;
            }
            let others: Vec<Vec<i128>> = all
                .iter()
                .filter(|e| **e != *beta)
                .map(|e| row_of(&e.0, e.1, omega0, Some(&beta.0.j)))
                .collect();
            let refs: Vec<&Vec<i128>> = others.iter().collect();
            if !degenerate_mu(&refs, rule, mu) {
                return false;
            }
        }
        true
    };
    let per_reading: Vec<Result<Vec<Witness>>> = readings
        .par_iter()
        .map(|alpha| {
            let entries: Vec<&(ModeIndex, i8)> = elems.iter().filter(|e| e.0 != alpha.0).collect();
            let rows: Vec<Vec<i128>> = entries.iter().map(|e| row_of(&e.0, e.1, omega0, Some(&alpha.0.j))).collect();
            let mut seen: HashSet<Vec<usize>> = HashSet::new();
            let mut found = Vec::new();
            let mut record = |idx: &[usize], found: &mut Vec<Witness>| {
                let mut s: Vec<usize> = idx.to_vec();
                s.sort_unstable();
                if !seen.insert(s.clone()) {
                    return;
                }
                let rest: Vec<&(ModeIndex, i8)> = s.iter().map(|&i| entries[i]).collect();
                let r: Vec<&Vec<i128>> = s.iter().map(|&i| &rows[i]).collect();
                if !degenerate_mu(&r, rule, mu) {
                    return;
                }
                if set_fails(alpha, &rest) {
                    let mut sigma: Vec<String> = rest.iter().map(|e| label(&e.0, e.1)).collect();
                    sigma.sort();
                    found.push(Witness::Determinant {
                        reading: Some(label(&alpha.0, alpha.1)),
                        sigma,
                        det: "0".into(),
                    });
                }
            };
            if mu > 0 {
                for_each_combination(0, rows.len(), d + 1, &mut Vec::new(), &mut |c: &[usize]| {
                    if found.len() < MAX_WITNESSES {
                        record(c, &mut found);
                    }
                });
                return Ok(found);
            }
            let scan = hyperplane_scan(&rows, d)?;
            for nu in &scan.planes {
                if rule == DetRule::Solvable && *nu.last().expect("width d+1") == 0 {
                    continue;
                }
                let on: Vec<usize> = (0..rows.len()).filter(|&i| on_plane(nu, &rows[i])).collect();
                let mut visit = |c: &[usize]| {
                    if found.len() < MAX_WITNESSES {
                        let idx: Vec<usize> = c.iter().map(|&i| on[i]).collect();
                        record(&idx, &mut found);
                    }
                };
                for_each_combination(0, on.len(), d + 1, &mut Vec::new(), &mut visit);
            }
            for t in &scan.deficient {
                for x in 0..rows.len() {
                    if found.len() >= MAX_WITNESSES {
                        break;
                    }
                    if !t.contains(&x) {
                        let mut s = t.clone();
                        s.push(x);
                        record(&s, &mut found);
                    }
                }
            }
            Ok(found)
        })
        .collect();
    let mut fails = Vec::new();
    for r in per_reading {
        fails.extend(r?);
    }
    Ok(ConditionResult::from_witnesses(work, fails))
}

/// Runs (i)–(iv) for the support `j_list` and nonlinearity power `p`.
pub fn check_genericity(j_list: &[Vec<i64>], p: u32, opts: &GenericityOptions) -> Result<GenericityReport> {
    let g = gamma_supports(j_list, p)?;
    let omega0 = omega0_of(j_list);
    let a_set = build_a(&g, opts.a_cap)?;
    let cond_i = check_i(&a_set, &omega0, opts.mu);
    let cond_iv = check_iv(&g, &omega0, j_list, opts.mu);
    let cond_ii = check_ii(&g, &omega0, j_list, opts)?;
    let cond_iii = check_iii(&a_set, &g, &omega0, j_list, opts)?;
    let statuses = [cond_i.status, cond_ii.status, cond_iii.status, cond_iv.status];
    let verdict = if statuses.contains(&Status::Fail) {
        Verdict::NonGeneric
    } else if statuses.contains(&Status::Truncated) {
        Verdict::Truncated
    } else {
        Verdict::Generic
    };
    Ok(GenericityReport {
        b: g.b,
        d: g.d,
        p,
        j_list: j_list.to_vec(),
        omega0,
        mu: opts.mu,
        rule: opts.rule,
        a_size: a_set.len(),
        cond_i,
        cond_ii,
        cond_iii,
        cond_iv,
        verdict,
    })
}

/// Uniformly random support of `b` distinct nonzero vectors in `[-range, range]^d`.
pub fn random_support(rng: &mut impl Rng, b: usize, d: usize, range: i64) -> Vec<Vec<i64>> {
    let mut out: Vec<Vec<i64>> = Vec::with_capacity(b);
    while out.len() < b {
        let j: Vec<i64> = (0..d).map(|_| rng.random_range(-range..=range)).collect();
        if j.iter().any(|&x| x != 0) && !out.contains(&j) {
            out.push(j);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NongenericSample {
    pub trials: usize,
    pub failing: usize,
    pub truncated: usize,
    /// `failing / (trials - truncated)`.
    pub fraction: f64,
}

pub fn sample_nongeneric_measure(
    b: usize,
    d: usize,
    p: u32,
    range: i64,
    trials: usize,
    seed: u64,
    opts: &GenericityOptions,
) -> Result<NongenericSample> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    if range < 1 {
        return Err(Error::InvalidArgument("range must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let supports: Vec<Vec<Vec<i64>>> = (0..trials).map(|_| random_support(&mut rng, b, d, range)).collect();
    let verdicts: Vec<Verdict> = supports
        .par_iter()
        .map(|j| check_genericity(j, p, opts).map(|r| r.verdict))
        .collect::<Result<_>>()?;
    let failing = verdicts.iter().filter(|v| **v == Verdict::NonGeneric).count();
    let truncated = verdicts.iter().filter(|v| **v == Verdict::Truncated).count();
    let decided = trials - truncated;
    Ok(NongenericSample {
        trials,
        failing,
        truncated,
        fraction: if decided == 0 { f64::NAN } else { failing as f64 / decided as f64 },
    })
}

pub fn scale_support(j_list: &[Vec<i64>], k: i64) -> Vec<Vec<i64>> {
    j_list.iter().map(|j| j.iter().map(|x| x * k).collect()).collect()
}
