//! Beam-selection MDP.
//!
//! An episode selects `N_RF` beams one at a time from the `M_bar` strongest
//! beams of a channel. The state is a `3 x M_bar x K` tensor: real part,
//! imaginary part, and an availability indicator whose row `i` is zeroed once
//! beam `i` is taken. Selecting an unavailable beam earns the penalty and
//! leaves the selection unchanged, but still advances `t`, so every episode has
//! exactly `N_RF` steps. Episodes ending with fewer than `N_RF` distinct beams
//! are invalid and receive no sum-rate reward.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::baseline::{sinr_proxy, sum_rate_equivalent, Precoder, SelectionSet};
use crate::numerics::CMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub energy: f64,
    pub sinr: f64,
    pub fairness: f64,
    pub terminal: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights { energy: 1.0, sinr: 1.0, fairness: 1.0, terminal: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub m_s: usize,
    pub m_bar: usize,
    pub k: usize,
    pub n_rf: usize,
    pub sigma2: f64,
    pub ps: f64,
    pub penalty: f64,
    pub fairness_eps: f64,
    pub weights: RewardWeights,
    pub fairness_start_step: usize,
}

impl EnvConfig {
    pub fn new(m_s: usize, n_rf: usize, k: usize, ps: f64, sigma2: f64) -> Self {
        EnvConfig {
            m_s,
            m_bar: m_s.min((2 * n_rf).max(32)),
            k,
            n_rf,
            sigma2,
            ps,
            penalty: -50.0,
            fairness_eps: 1e-6,
            weights: RewardWeights::default(),
            fairness_start_step: n_rf.div_ceil(2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k >= 1 && self.k <= self.n_rf && self.n_rf <= self.m_bar && self.m_bar <= self.m_s) {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= K <= N_RF <= M_bar <= M_s, got K={}, N_RF={}, M_bar={}, M_s={}",
                self.k, self.n_rf, self.m_bar, self.m_s
            )));
        }
        if !(self.penalty < 0.0) {
            return Err(Error::InvalidConfig(format!("penalty {} must be negative", self.penalty)));
        }
        if !(self.sigma2 > 0.0 && self.ps > 0.0 && self.fairness_eps > 0.0) {
            return Err(Error::InvalidConfig("sigma2, Ps and fairness epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Length of the flattened state tensor.
    pub fn state_len(&self) -> usize {
        3 * self.m_bar * self.k
    }
}

/// Keeps the `m_bar` rows of largest norm in their original order. Ties go to
/// the lower index.
pub fn reduce_dimension(h: &CMatrix, m_bar: usize) -> Result<(CMatrix, Vec<usize>)> {
    if m_bar > h.rows() {
        return Err(Error::InvalidConfig(format!("M_bar={m_bar} exceeds M_s={}", h.rows())));
    }
    let energy: Vec<f64> = (0..h.rows()).map(|r| h.row_norm_sqr(r)).collect();
    let mut idx: Vec<usize> = (0..h.rows()).collect();
    idx.sort_by(|&a, &b| energy[b].total_cmp(&energy[a]));
    idx.truncate(m_bar);
    idx.sort_unstable();
    Ok((h.select_rows(&idx), idx))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    /// Reduced channel `M_bar x K`.
    pub reduced: CMatrix,
    /// Availability per reduced beam; the indicator tensor repeats it across users.
    pub available: Vec<bool>,
    pub t: usize,
    /// Reduced indices in selection order.
    pub selected: Vec<usize>,
    pub index_map: Vec<usize>,
    /// Fairness threshold for this episode.
    pub delta: f64,
    pub repeats: usize,
    pub n_rf: usize,
}

impl EnvState {
    /// Flattened `3 x M_bar x K` tensor, channel-major then row-major.
    pub fn tensor(&self) -> Vec<f64> {
        let (m, k) = self.reduced.shape();
        let mut out = vec![0.0; 3 * m * k];
        for r in 0..m {
            for c in 0..k {
                let z = self.reduced[(r, c)];
                out[r * k + c] = z.re;
                out[m * k + r * k + c] = z.im;
                out[2 * m * k + r * k + c] = if self.available[r] { 1.0 } else { 0.0 };
            }
        }
        out
    }

    pub fn is_terminal(&self) -> bool {
        self.t >= self.n_rf
    }

    pub fn is_valid(&self) -> bool {
        self.selected.len() == self.n_rf
    }

    /// Selected beams as original indices, in selection order.
    pub fn original_selection(&self) -> SelectionSet {
        SelectionSet::new(self.selected.iter().map(|&i| self.index_map[i]).collect())
    }

    /// `Hbar` built from the selected reduced rows, in selection order.
    pub fn equivalent_channel(&self) -> CMatrix {
        self.reduced.select_rows(&self.selected)
    }

    /// Per-user energy `||h~_k||^2` over the selected beams.
    pub fn user_energy(&self) -> Vec<f64> {
        (0..self.reduced.cols())
            .map(|c| self.selected.iter().map(|&r| self.reduced[(r, c)].norm_sqr()).sum())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: usize,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub terminal: bool,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn env_reset(cfg: &EnvConfig, h: &CMatrix) -> Result<EnvState> {
    if h.shape() != (cfg.m_s, cfg.k) {
        return Err(Error::ShapeMismatch(format!("channel {:?}, expected ({}, {})", h.shape(), cfg.m_s, cfg.k)));
    }
    let (reduced, index_map) = reduce_dimension(h, cfg.m_bar)?;
    let user_energy: Vec<f64> = (0..cfg.k).map(|c| reduced.col_norm_sqr(c)).collect();
    Ok(EnvState {
        reduced,
        available: vec![true; cfg.m_bar],
        t: 0,
        selected: Vec::new(),
        index_map,
        delta: median(&user_energy) / 4.0,
        repeats: 0,
        n_rf: cfg.n_rf,
    })
}

fn sign_inclusive(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Fairness reward for adding `new_beam` to the current selection.
pub fn fairness_term(state: &EnvState, new_beam: usize, eps: f64) -> f64 {
    let before = state.user_energy();
    (0..state.reduced.cols())
        .map(|c| {
            let prev = before[c];
            let now = prev + state.reduced[(new_beam, c)].norm_sqr();
            (now - prev) / (now + eps) * (sign_inclusive(state.delta - prev) + 1.0)
        })
        .sum()
}

/// Applies `action`; on the final step calls `precoder_fn` on the selected
/// equivalent channel when the episode is valid. Returns the transition and
/// the terminal sum-rate (nats) when one was computed.
pub fn env_step<F>(
    cfg: &EnvConfig,
    state: &mut EnvState,
    action: usize,
    mut precoder_fn: F,
) -> Result<(Transition, Option<f64>)>
where
    F: FnMut(&CMatrix) -> Result<Precoder>,
{
    if state.is_terminal() {
        return Err(Error::EpisodeOver);
    }
    if action >= cfg.m_bar {
        return Err(Error::OutOfRange { index: action, m_s: cfg.m_bar });
    }
    let s = state.tensor();
    let mut terminal_rate = None;
    let r = if !state.available[action] {
        state.repeats += 1;
        state.t += 1;
        cfg.penalty
    } else {
        let row = state.reduced.row(action);
        let mut r = cfg.weights.energy * state.reduced.row_norm_sqr(action).sqrt();
        let t_next = state.t + 1;
        if t_next < cfg.n_rf {
            r += cfg.weights.sinr * sinr_proxy(row, cfg.sigma2);
        }
        if t_next >= cfg.fairness_start_step && cfg.weights.fairness != 0.0 {
            r += cfg.weights.fairness * fairness_term(state, action, cfg.fairness_eps);
        }
        state.available[action] = false;
        state.selected.push(action);
        state.t = t_next;
        r
    };
    let mut r = r;
    if state.is_terminal() && state.is_valid() {
        let hbar = state.equivalent_channel();
        let p = precoder_fn(&hbar)?;
        let rate = sum_rate_equivalent(&hbar, &p.p, cfg.sigma2)?;
        terminal_rate = Some(rate);
        // a repeat on the last step already left the episode invalid
        r += cfg.weights.terminal * rate;
    }
    let transition = Transition { s, a: action, r, s_next: state.tensor(), terminal: state.is_terminal() };
    Ok((transition, terminal_rate))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub seed: u64,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub terminal_sum_rate: Option<f64>,
    pub selected_beams: Vec<usize>,
}

pub fn write_episode_logs<W: Write>(out: &mut W, logs: &[EpisodeLog]) -> Result<()> {
    for log in logs {
        serde_json::to_writer(&mut *out, log)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::{normalize_power, zf_precoder};
    use crate::numerics::C64;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn column(values: &[f64]) -> CMatrix {
        CMatrix::from_columns(values.len(), &[values.iter().map(|&v| c(v, 0.0)).collect()])
    }

    #[test]
    fn reduce_keeps_strongest_rows_in_order() {
        let h = column(&[2.0, 1.0, 3f64.sqrt(), 2f64.sqrt()]);
        let (red, map) = reduce_dimension(&h, 2).unwrap();
        assert_eq!(map, vec![0, 2]);
        assert_eq!(red[(1, 0)], c(3f64.sqrt(), 0.0));
        let (_, all) = reduce_dimension(&h, 4).unwrap();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    fn cfg_for(m: usize, n_rf: usize, k: usize) -> EnvConfig {
        let mut cfg = EnvConfig::new(m, n_rf, k, 1.0, 1.0);
        cfg.m_bar = m;
        cfg
    }

    #[test]
    fn reset_is_fresh_and_repeatable() {
        let h = CMatrix::from_fn(4, 2, |r, cc| c(r as f64 + 1.0, cc as f64));
        let cfg = cfg_for(4, 2, 2);
        let a = env_reset(&cfg, &h).unwrap();
        assert_eq!(a.tensor()[16..].iter().sum::<f64>(), 8.0);
        let mut b = env_reset(&cfg, &h).unwrap();
        assert_eq!(a, b);
        env_step(&cfg, &mut b, 1, |hb| normalize_power(hb, 1.0)).unwrap();
        assert_ne!(a, b);
        assert_eq!(env_reset(&cfg, &h).unwrap(), a);
        assert!(matches!(env_reset(&cfg, &CMatrix::zeros(3, 2)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn repeat_gets_penalty_and_keeps_selection() {
        let h = CMatrix::from_fn(4, 1, |r, _| c(r as f64 + 1.0, 0.0));
        let cfg = cfg_for(4, 3, 1);
        let mut st = env_reset(&cfg, &h).unwrap();
        env_step(&cfg, &mut st, 2, |hb| normalize_power(hb, 1.0)).unwrap();
        let before = st.tensor();
        let (tr, _) = env_step(&cfg, &mut st, 2, |hb| normalize_power(hb, 1.0)).unwrap();
        assert_eq!(tr.r, -50.0);
        assert_eq!(st.selected, vec![2]);
        assert_eq!(st.t, 2);
        assert_eq!(&before[..8], &st.tensor()[..8]);
        assert_eq!(before[8..], st.tensor()[8..]);
        let (last, rate) = env_step(&cfg, &mut st, 0, |hb| normalize_power(hb, 1.0)).unwrap();
        assert!(last.terminal);
        assert!(rate.is_none());
        assert!(!st.is_valid());
        assert!(matches!(env_step(&cfg, &mut st, 1, |hb| normalize_power(hb, 1.0)), Err(Error::EpisodeOver)));
    }

    #[test]
    fn single_user_energy_and_sinr_reward() {
        let h = column(&[0.5, 2.0, 1.0]);
        let mut cfg = cfg_for(3, 2, 1);
        cfg.weights = RewardWeights { energy: 1.0, sinr: 1.0, fairness: 0.0, terminal: 0.0 };
        let mut st = env_reset(&cfg, &h).unwrap();
        let (tr, _) = env_step(&cfg, &mut st, 1, |hb| normalize_power(hb, 1.0)).unwrap();
        assert!((tr.r - (2.0 + 4.0)).abs() < 1e-12);
    }

    #[test]
    fn fairness_gating_cases() {
        let h = CMatrix::from_fn(3, 2, |r, cc| c(if r == cc { 1.0 } else { 0.1 }, 0.0));
        let cfg = cfg_for(3, 2, 2);
        let mut st = env_reset(&cfg, &h).unwrap();
        let eps = cfg.fairness_eps;
        // first beam: both users below delta, h~^0 = 0
        let first = fairness_term(&st, 0, eps);
        let e0 = 1.0f64;
        let e1 = 0.01f64;
        let expect = 2.0 * e0 / (e0 + eps) + 2.0 * e1 / (e1 + eps);
        assert!((first - expect).abs() < 1e-12);
        st.delta = 0.5;
        st.selected.push(0);
        st.available[0] = false;
        // user 0 now above delta: only user 1 contributes
        let second = fairness_term(&st, 1, eps);
        let prev1 = 0.01;
        let now1 = 1.01;
        assert!((second - (now1 - prev1) / (now1 + eps) * 2.0).abs() < 1e-12);
    }

    #[test]
    fn terminal_reward_is_sum_rate_of_selection() {
        let h = CMatrix::from_fn(6, 2, |r, cc| c((r as f64 * 0.7 + cc as f64).sin(), (r as f64 + 2.0 * cc as f64).cos()));
        let mut cfg = cfg_for(6, 2, 2);
        cfg.weights = RewardWeights { energy: 0.0, sinr: 0.0, fairness: 0.0, terminal: 1.0 };
        let mut st = env_reset(&cfg, &h).unwrap();
        let mut total = 0.0;
        for a in [4, 1] {
            let (tr, _) = env_step(&cfg, &mut st, a, |hb| zf_precoder(hb, 1.0)).unwrap();
            total += tr.r;
        }
        let hbar = h.select_rows(&[4, 1]);
        let p = zf_precoder(&hbar, 1.0).unwrap();
        assert!((total - sum_rate_equivalent(&hbar, &p.p, 1.0).unwrap()).abs() < 1e-12);
        assert_eq!(st.original_selection().beams, vec![4, 1]);
    }

    #[test]
    fn episode_log_lines() {
        let log = EpisodeLog { seed: 3, actions: vec![1, 0], rewards: vec![1.0, 2.0], terminal_sum_rate: Some(2.0), selected_beams: vec![5, 2] };
        let mut buf = Vec::new();
        write_episode_logs(&mut buf, &[log.clone(), log.clone()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(serde_json::from_str::<EpisodeLog>(lines[0]).unwrap(), log);
    }
}
