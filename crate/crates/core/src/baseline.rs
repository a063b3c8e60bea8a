//! Classical precoders and beam selectors.
//!
//! Rates are in nats (natural log). Interference enters the SINR as squared
//! magnitudes `|h_k^H p_i|^2`.
//!
//! The WMMSE updates follow the standard derivation: with the receive scalar
//! `u_k` applied as `u_k * y_k`,
//!
//! ```text
//! u_k = conj(h_k^H p_k) / (sum_i |h_k^H p_i|^2 + sigma^2)
//! w_k = 1 / (1 - u_k h_k^H p_k)
//! p_k = (sum_j w_j |u_j|^2 h_j h_j^H + lambda I)^-1  w_k conj(u_k) h_k
//! ```
//!
//! with one multiplier `lambda >= 0` for the sum-power constraint.

use serde::{Deserialize, Serialize};

use crate::numerics::{dot_h, hermitian_eigen, CMatrix, Lu, C64, ONE, ZERO};
use crate::{Error, Result};

/// Ordered, duplicate-free list of selected beam indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SelectionSet {
    pub beams: Vec<usize>,
}

impl SelectionSet {
    pub fn new(beams: Vec<usize>) -> Self {
        SelectionSet { beams }
    }

    pub fn len(&self) -> usize {
        self.beams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beams.is_empty()
    }

    pub fn validate(&self, m_s: usize) -> Result<()> {
        let mut seen = vec![false; m_s];
        for &b in &self.beams {
            if b >= m_s {
                return Err(Error::OutOfRange { index: b, m_s });
            }
            if seen[b] {
                return Err(Error::DuplicateBeam(b));
            }
            seen[b] = true;
        }
        Ok(())
    }
}

/// 0/1 routing matrix `F` (`M_s x N_RF`), column `j` selecting beam `beams[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMatrix {
    pub f: CMatrix,
    beams: Vec<usize>,
}

impl SelectionMatrix {
    pub fn beams(&self) -> &[usize] {
        &self.beams
    }

    /// Checks column sums = 1, row sums <= 1 and `F^T F = I` on the integer
    /// structure of `F`.
    pub fn satisfies_constraints(&self) -> bool {
        let (m_s, n_rf) = self.f.shape();
        let mut as_int = vec![0i64; m_s * n_rf];
        for r in 0..m_s {
            for c in 0..n_rf {
                let z = self.f[(r, c)];
                if z.im != 0.0 || (z.re != 0.0 && z.re != 1.0) {
                    return false;
                }
                as_int[r * n_rf + c] = z.re as i64;
            }
        }
        let cols_ok = (0..n_rf).all(|c| (0..m_s).map(|r| as_int[r * n_rf + c]).sum::<i64>() == 1);
        let rows_ok = (0..m_s).all(|r| as_int[r * n_rf..(r + 1) * n_rf].iter().sum::<i64>() <= 1);
        let gram_ok = (0..n_rf).all(|a| {
            (0..n_rf).all(|b| {
                let g: i64 = (0..m_s).map(|r| as_int[r * n_rf + a] * as_int[r * n_rf + b]).sum();
                g == i64::from(a == b)
            })
        });
        cols_ok && rows_ok && gram_ok
    }

    /// `Hbar = F^T H`, the `N_RF x K` equivalent channel.
    pub fn equivalent_channel(&self, h: &CMatrix) -> CMatrix {
        h.select_rows(&self.beams)
    }
}

pub fn selection_to_matrix(sel: &SelectionSet, m_s: usize, n_rf: usize) -> Result<SelectionMatrix> {
    if sel.len() != n_rf {
        return Err(Error::ShapeMismatch(format!("{} beams selected for {n_rf} RF chains", sel.len())));
    }
    sel.validate(m_s)?;
    let mut f = CMatrix::zeros(m_s, n_rf);
    for (j, &b) in sel.beams.iter().enumerate() {
        f[(b, j)] = ONE;
    }
    Ok(SelectionMatrix { f, beams: sel.beams.clone() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Precoder {
    /// `N_RF x K`, column `k` is user `k`'s precoding vector.
    pub p: CMatrix,
    pub power_budget: f64,
}

impl Precoder {
    pub fn power(&self) -> f64 {
        self.p.frobenius_norm_sqr()
    }
}

/// Per-user rates in nats for equivalent channel `hbar` (`N x K`) and precoder `p` (`N x K`).
pub fn user_rates(hbar: &CMatrix, p: &CMatrix, sigma2: f64) -> Result<Vec<f64>> {
    if hbar.rows() != p.rows() || hbar.cols() != p.cols() {
        return Err(Error::ShapeMismatch(format!("channel {:?} vs precoder {:?}", hbar.shape(), p.shape())));
    }
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidConfig(format!("noise variance {sigma2}")));
    }
    let gains = hbar.adjoint_mul(p)?;
    let k = hbar.cols();
    Ok((0..k)
        .map(|u| {
            let signal = gains[(u, u)].norm_sqr();
            let interference: f64 = (0..k).filter(|&i| i != u).map(|i| gains[(u, i)].norm_sqr()).sum();
            (1.0 + signal / (interference + sigma2)).ln()
        })
        .collect())
}

/// Sum-rate in nats for equivalent channel and precoder.
pub fn sum_rate_equivalent(hbar: &CMatrix, p: &CMatrix, sigma2: f64) -> Result<f64> {
    Ok(user_rates(hbar, p, sigma2)?.iter().sum())
}

/// Sum-rate of `(H, F, P)`; `f = None` means fully digital (`F = I`).
pub fn sum_rate(h: &CMatrix, f: Option<&SelectionMatrix>, p: &Precoder, sigma2: f64) -> Result<f64> {
    match f {
        Some(f) => {
            if f.f.rows() != h.rows() {
                return Err(Error::ShapeMismatch(format!("F has {} rows, H has {}", f.f.rows(), h.rows())));
            }
            sum_rate_equivalent(&f.equivalent_channel(h), &p.p, sigma2)
        }
        None => sum_rate_equivalent(h, &p.p, sigma2),
    }
}

pub fn nats_to_bits(x: f64) -> f64 {
    x / std::f64::consts::LN_2
}

/// Scales `p_raw` so that `Tr(P P^H) = ps`.
pub fn normalize_power(p_raw: &CMatrix, ps: f64) -> Result<Precoder> {
    if !(ps > 0.0) {
        return Err(Error::InvalidConfig(format!("power budget {ps}")));
    }
    let tr = p_raw.frobenius_norm_sqr();
    if !(tr > 0.0) {
        return Err(Error::ZeroPrecoder);
    }
    Ok(Precoder { p: p_raw.scale_real(ps.sqrt() / tr.sqrt()), power_budget: ps })
}

pub fn zf_precoder(hbar: &CMatrix, ps: f64) -> Result<Precoder> {
    let gram = hbar.adjoint_mul(hbar)?;
    let lu = Lu::factor(&gram).map_err(|e| Error::RankDeficient(e.to_string()))?;
    let inv = lu.solve(&CMatrix::identity(gram.rows()))?;
    normalize_power(&hbar.matmul(&inv)?, ps)
}

/// Normalised matched filter, the WMMSE starting point.
pub fn matched_filter(hbar: &CMatrix, ps: f64) -> Result<Precoder> {
    normalize_power(hbar, ps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WmmseState {
    pub u: Vec<C64>,
    pub w: Vec<f64>,
    pub p: CMatrix,
    pub lambda: f64,
}

impl WmmseState {
    pub fn from_precoder(p: CMatrix) -> Self {
        let k = p.cols();
        WmmseState { u: vec![ZERO; k], w: vec![1.0; k], p, lambda: 0.0 }
    }
}

pub fn wmmse_update_u(state: &WmmseState, hbar: &CMatrix, sigma2: f64) -> Result<Vec<C64>> {
    let gains = hbar.adjoint_mul(&state.p)?;
    Ok((0..hbar.cols())
        .map(|k| {
            let total: f64 = (0..hbar.cols()).map(|i| gains[(k, i)].norm_sqr()).sum::<f64>() + sigma2;
            gains[(k, k)].conj() / total
        })
        .collect())
}

pub fn wmmse_update_w(state: &WmmseState, hbar: &CMatrix) -> Result<Vec<f64>> {
    (0..hbar.cols())
        .map(|k| {
            let g = dot_h(&hbar.col(k), &state.p.col(k));
            let denom = ONE - state.u[k] * g;
            if denom.norm() < 1e-12 {
                return Err(Error::WDegenerate(k));
            }
            Ok(1.0 / denom.re)
        })
        .collect()
}

/// `sum_j w_j |u_j|^2 h_j h_j^H`.
pub fn weighted_covariance(hbar: &CMatrix, u: &[C64], w: &[f64]) -> CMatrix {
    let n = hbar.rows();
    let mut b = CMatrix::zeros(n, n);
    for j in 0..hbar.cols() {
        let a = w[j] * u[j].norm_sqr();
        if a == 0.0 {
            continue;
        }
        for r in 0..n {
            let hr = hbar[(r, j)] * a;
            for c in 0..n {
                b[(r, c)] += hr * hbar[(c, j)].conj();
            }
        }
    }
    b
}

/// Right-hand sides `w_k conj(u_k) h_k` as columns.
pub fn mmse_targets(hbar: &CMatrix, u: &[C64], w: &[f64]) -> CMatrix {
    CMatrix::from_fn(hbar.rows(), hbar.cols(), |r, k| hbar[(r, k)] * u[k].conj() * w[k])
}

/// Precoder update with a fixed per-user multiplier and a direct solve:
/// `p_k = (B + lambda_k I)^-1 w_k conj(u_k) h_k`.
pub fn wmmse_p_fixed_lambda(hbar: &CMatrix, u: &[C64], w: &[f64], lambdas: &[f64]) -> Result<CMatrix> {
    let b = weighted_covariance(hbar, u, w);
    let v = mmse_targets(hbar, u, w);
    let mut p = CMatrix::zeros(hbar.rows(), hbar.cols());
    for k in 0..hbar.cols() {
        let mut a = b.clone();
        for i in 0..a.rows() {
            a[(i, i)] += lambdas[k];
        }
        p.set_col(k, &Lu::factor(&a)?.solve_vec(&v.col(k))?);
    }
    Ok(p)
}

/// Maximum number of bracket doublings and bisection steps.
const BISECTION_MAX_ITERS: usize = 200;

/// Exact precoder update: solves the sum-power constrained subproblem with a
/// single multiplier found by bisection. Returns `(P, lambda)`.
pub fn wmmse_update_p(state: &WmmseState, hbar: &CMatrix, ps: f64) -> Result<(CMatrix, f64)> {
    let (n, k) = hbar.shape();
    let b = weighted_covariance(hbar, &state.u, &state.w);
    let targets = mmse_targets(hbar, &state.u, &state.w);
    let (d, v) = hermitian_eigen(&b)?;
    let d_max = d.iter().copied().fold(0.0, f64::max);
    let mut phi = v.adjoint_mul(&targets)?;
    // targets lie in range(B); drop numerical residue on the null space
    let null_tol = 1e-12 * d_max;
    let live: Vec<bool> = d.iter().map(|&x| d_max > 0.0 && x > null_tol).collect();
    for (i, &alive) in live.iter().enumerate() {
        if !alive {
            for c in 0..k {
                phi[(i, c)] = ZERO;
            }
        }
    }
    if !live.iter().any(|&x| x) {
        return Ok((CMatrix::zeros(n, k), 0.0));
    }
    let weights: Vec<f64> = (0..n).map(|i| (0..k).map(|c| phi[(i, c)].norm_sqr()).sum()).collect();
    let power = |lambda: f64| -> f64 {
        (0..n).filter(|&i| live[i]).map(|i| weights[i] / (d[i] + lambda).powi(2)).sum()
    };
    let lambda = if power(0.0) <= ps {
        0.0
    } else {
        let mut lo = 0.0;
        let mut hi = d_max.max(f64::MIN_POSITIVE);
        let mut doublings = 0;
        while power(hi) > ps {
            lo = hi;
            hi *= 2.0;
            doublings += 1;
            if doublings > BISECTION_MAX_ITERS || !hi.is_finite() {
                return Err(Error::BisectionFail(format!("no bracket after {doublings} doublings")));
            }
        }
        for _ in 0..BISECTION_MAX_ITERS {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if power(mid) > ps {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    };
    let scaled = CMatrix::from_fn(n, k, |i, c| if live[i] { phi[(i, c)] / (d[i] + lambda) } else { ZERO });
    Ok((v.matmul(&scaled)?, lambda))
}

/// Mean-square error of user `k` with receive scalar `u_k`.
pub fn mse(hbar: &CMatrix, p: &CMatrix, k: usize, u_k: C64, sigma2: f64) -> f64 {
    let hk = hbar.col(k);
    let own = u_k * dot_h(&hk, &p.col(k));
    let interference: f64 =
        (0..p.cols()).filter(|&i| i != k).map(|i| (u_k * dot_h(&hk, &p.col(i))).norm_sqr()).sum();
    own.norm_sqr() - 2.0 * own.re + 1.0 + sigma2 * u_k.norm_sqr() + interference
}

/// Weighted-MSE objective `sum_k w_k e_k - ln w_k`.
pub fn wmmse_objective(hbar: &CMatrix, state: &WmmseState, sigma2: f64) -> f64 {
    (0..hbar.cols())
        .map(|k| state.w[k] * mse(hbar, &state.p, k, state.u[k], sigma2) - state.w[k].ln())
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WmmseOptions {
    pub max_iters: usize,
    /// Stop when the objective changes by less than `tol` in one iteration.
    pub tol: f64,
}

impl Default for WmmseOptions {
    fn default() -> Self {
        WmmseOptions { max_iters: 100, tol: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct WmmseOutcome {
    pub precoder: Precoder,
    pub state: WmmseState,
    /// Sum-rate after each iteration, starting with the initial precoder.
    pub rate_trace: Vec<f64>,
    /// Weighted-MSE objective after each iteration.
    pub objective_trace: Vec<f64>,
}

/// One `u -> w -> p` sweep.
pub fn wmmse_iteration(state: &mut WmmseState, hbar: &CMatrix, ps: f64, sigma2: f64) -> Result<()> {
    state.u = wmmse_update_u(state, hbar, sigma2)?;
    state.w = wmmse_update_w(state, hbar)?;
    let (p, lambda) = wmmse_update_p(state, hbar, ps)?;
    state.p = p;
    state.lambda = lambda;
    Ok(())
}

pub fn wmmse_solve(hbar: &CMatrix, ps: f64, sigma2: f64, opts: WmmseOptions) -> Result<WmmseOutcome> {
    let init = matched_filter(hbar, ps)?;
    let mut state = WmmseState::from_precoder(init.p);
    let mut rate_trace = vec![sum_rate_equivalent(hbar, &state.p, sigma2)?];
    let mut objective_trace = Vec::new();
    for _ in 0..opts.max_iters {
        wmmse_iteration(&mut state, hbar, ps, sigma2)?;
        let obj = wmmse_objective(hbar, &state, sigma2);
        rate_trace.push(sum_rate_equivalent(hbar, &state.p, sigma2)?);
        let done = objective_trace.last().is_some_and(|&prev: &f64| (prev - obj).abs() < opts.tol);
        objective_trace.push(obj);
        if done {
            break;
        }
    }
    if !state.p.is_finite() {
        return Err(Error::NonFinite("WMMSE precoder".into()));
    }
    Ok(WmmseOutcome { precoder: Precoder { p: state.p.clone(), power_budget: ps }, state, rate_trace, objective_trace })
}

fn top_by_score(scores: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps lower index first on ties
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx.truncate(n);
    idx
}

/// Maximum-magnitude selection: the `n_rf` rows of largest norm, returned in
/// ascending index order. Ties go to the lower index.
pub fn mm_select(h: &CMatrix, n_rf: usize) -> Result<SelectionSet> {
    if n_rf > h.rows() {
        return Err(Error::InvalidConfig(format!("N_RF={n_rf} exceeds M_s={}", h.rows())));
    }
    let energy: Vec<f64> = (0..h.rows()).map(|r| h.row_norm_sqr(r)).collect();
    let mut beams = top_by_score(&energy, n_rf);
    beams.sort_unstable();
    Ok(SelectionSet::new(beams))
}

/// Per-beam SINR proxy `sum_k |h_jk|^2 / (sum_{i != k} |h_ji|^2 + sigma^2)`.
pub fn sinr_proxy(row: &[C64], sigma2: f64) -> f64 {
    let total: f64 = row.iter().map(|z| z.norm_sqr()).sum();
    row.iter()
        .map(|z| {
            let s = z.norm_sqr();
            s / (total - s + sigma2)
        })
        .sum()
}

/// Maximum-SINR selection: greedily adds the unselected beam with the largest
/// SINR proxy. Returned in the order beams were added.
pub fn ms_select(h: &CMatrix, n_rf: usize, sigma2: f64) -> Result<SelectionSet> {
    if n_rf > h.rows() {
        return Err(Error::InvalidConfig(format!("N_RF={n_rf} exceeds M_s={}", h.rows())));
    }
    let proxy: Vec<f64> = (0..h.rows()).map(|r| sinr_proxy(h.row(r), sigma2)).collect();
    let mut taken = vec![false; h.rows()];
    let mut beams = Vec::with_capacity(n_rf);
    for _ in 0..n_rf {
        let mut best: Option<usize> = None;
        for j in 0..h.rows() {
            if !taken[j] && best.is_none_or(|b| proxy[j] > proxy[b]) {
                best = Some(j);
            }
        }
        let j = best.expect("n_rf <= M_s");
        taken[j] = true;
        beams.push(j);
    }
    Ok(SelectionSet::new(beams))
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i as u128 + 1))
}

/// Lexicographic k-combinations of `0..n`.
pub struct Combinations {
    n: usize,
    cur: Option<Vec<usize>>,
}

impl Combinations {
    pub fn new(n: usize, k: usize) -> Self {
        Combinations { n, cur: (k <= n).then(|| (0..k).collect()) }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let out = self.cur.clone()?;
        let k = out.len();
        let mut next = out.clone();
        let mut i = k;
        loop {
            if i == 0 {
                self.cur = None;
                break;
            }
            i -= 1;
            if next[i] < self.n - k + i {
                next[i] += 1;
                for j in i + 1..k {
                    next[j] = next[j - 1] + 1;
                }
                self.cur = Some(next);
                break;
            }
        }
        Some(out)
    }
}

pub const ENUMERATION_CAP: u128 = 1_000_000;

/// Exhaustive beam-selection oracle. Candidates whose equivalent channel the
/// precoder rejects as rank-deficient are skipped. Ties keep the
/// lexicographically first selection.
pub fn exhaustive_select<F>(
    h: &CMatrix,
    n_rf: usize,
    sigma2: f64,
    cap: u128,
    mut precoder_fn: F,
) -> Result<(SelectionSet, f64)>
where
    F: FnMut(&CMatrix) -> Result<Precoder>,
{
    let m_s = h.rows();
    if n_rf > m_s {
        return Err(Error::InvalidConfig(format!("N_RF={n_rf} exceeds M_s={m_s}")));
    }
    let candidates = binomial(m_s, n_rf);
    if candidates > cap {
        return Err(Error::TooLarge { candidates, cap });
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for combo in Combinations::new(m_s, n_rf) {
        let hbar = h.select_rows(&combo);
        let p = match precoder_fn(&hbar) {
            Ok(p) => p,
            Err(Error::RankDeficient(_)) | Err(Error::ZeroPrecoder) => continue,
            Err(e) => return Err(e),
        };
        let rate = sum_rate_equivalent(&hbar, &p.p, sigma2)?;
        if best.as_ref().is_none_or(|(_, r)| rate > *r) {
            best = Some((combo, rate));
        }
    }
    let (beams, rate) = best.ok_or_else(|| Error::RankDeficient("no candidate selection admits a precoder".into()))?;
    Ok((SelectionSet::new(beams), rate))
}
