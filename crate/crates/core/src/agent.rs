//! Dueling double-DQN for beam selection.
//!
//! The Q-network reads the `3 x M_bar x K` state as a small image: a 3x3
//! convolution stem, residual blocks of (3x3 conv, 1x1 conv, PReLU, per-sample
//! normalization) with identity skips, then separate value and advantage heads
//! combined as `Q = V + A - mean(A)`. The two channel planes are divided by
//! their per-sample RMS before the stem; the entry magnitudes and the log of
//! the removed scale are appended as extra planes. The value head is fully connected over the whole feature
//! map; the advantage head is one small MLP applied to each beam row's features
//! (plus features pooled over the selected and over the available rows) with
//! weights shared across rows.
//!
//! All weights live in one flat vector; gradients are computed by hand.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::baseline::Precoder;
use crate::env::{env_reset, env_step, EnvConfig, EnvState, Transition};
use crate::numerics::CMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QNetConfig {
    pub m_bar: usize,
    pub k: usize,
    pub channels: usize,
    pub blocks: usize,
    /// Width of the hidden layer in each head.
    pub hidden: usize,
}

impl QNetConfig {
    pub fn new(m_bar: usize, k: usize) -> Self {
        QNetConfig { m_bar, k, channels: 32, blocks: 2, hidden: 64 }
    }

    fn cells(&self) -> usize {
        self.m_bar * self.k
    }

    fn flat(&self) -> usize {
        self.channels * self.cells()
    }
}

const PRELU_INIT: f64 = 0.25;
/// Re, Im, availability indicator, magnitude, log-magnitude, magnitude
/// relative to the user's strongest beam, log of the removed RMS scale.
const INPUT_PLANES: usize = 7;
/// Floor inside the log-magnitude plane, relative to the RMS entry power.
const LOG_FLOOR: f64 = 1e-6;
const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
struct BlockLayout {
    c3_w: usize,
    c3_b: usize,
    c1_w: usize,
    c1_b: usize,
    slope: usize,
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct HeadLayout {
    /// Rows the head is applied to (weights shared across rows).
    rows: usize,
    inp: usize,
    w1: usize,
    b1: usize,
    slope: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    stem_w: usize,
    stem_b: usize,
    stem_slope: usize,
    blocks: Vec<BlockLayout>,
    value: HeadLayout,
    advantage: HeadLayout,
    total: usize,
}

impl Layout {
    fn new(cfg: &QNetConfig) -> Layout {
        let c = cfg.channels;
        let mut at = 0;
        let mut take = |n: usize| {
            let start = at;
            at += n;
            start
        };
        let stem_w = take(c * INPUT_PLANES * 9);
        let stem_b = take(c);
        let stem_slope = take(c);
        let blocks = (0..cfg.blocks)
            .map(|_| BlockLayout {
                c3_w: take(c * c * 9),
                c3_b: take(c),
                c1_w: take(c * c),
                c1_b: take(c),
                slope: take(c),
                gain: take(c),
                bias: take(c),
            })
            .collect();
        let mut head = |rows: usize, inp: usize| HeadLayout {
            rows,
            inp,
            w1: take(cfg.hidden * inp),
            b1: take(cfg.hidden),
            slope: take(cfg.hidden),
            w2: take(cfg.hidden),
            b2: take(1),
        };
        let value = head(1, cfg.flat());
        let advantage = head(cfg.m_bar, 4 * c * cfg.k);
        Layout { stem_w, stem_b, stem_slope, blocks, value, advantage, total: at }
    }
}

/// `out[m x n] += a[m x k] * b[k x n]`.
fn gemm(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m x n] += a[m x k] * b[n x k]^T`.
fn gemm_bt(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[m x n] += a[k x m]^T * b[k x n]`.
fn gemm_at(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// 3x3 'same' patches: rows `(ci, dy, dx)`, columns cells.
fn im2col(input: &[f64], ch: usize, h: usize, w: usize) -> Vec<f64> {
    let cells = h * w;
    let mut col = vec![0.0; ch * 9 * cells];
    for c in 0..ch {
        for dy in 0..3 {
            for dx in 0..3 {
                let row = (c * 9 + dy * 3 + dx) * cells;
                for y in 0..h {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + dx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        col[row + y * w + x] = input[c * cells + sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], ch: usize, h: usize, w: usize) -> Vec<f64> {
    let cells = h * w;
    let mut out = vec![0.0; ch * cells];
    for c in 0..ch {
        for dy in 0..3 {
            for dx in 0..3 {
                let row = (c * 9 + dy * 3 + dx) * cells;
                for y in 0..h {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + dx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        out[c * cells + sy as usize * w + sx as usize] += col[row + y * w + x];
                    }
                }
            }
        }
    }
    out
}

/// Pool slot of row `r` (0 = selected, 1 = available) and that pool's size.
fn pool_slot(avail: &[bool], r: usize) -> (usize, f64) {
    let n_avail = avail.iter().filter(|&&a| a).count();
    if avail[r] {
        (1, n_avail as f64)
    } else {
        (0, (avail.len() - n_avail) as f64)
    }
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], cells: usize) {
    for (c, b) in bias.iter().enumerate() {
        out[c * cells..(c + 1) * cells].iter_mut().for_each(|x| *x += b);
    }
}

fn prelu(z: &[f64], slopes: &[f64], group: usize) -> Vec<f64> {
    z.iter().enumerate().map(|(i, &v)| if v > 0.0 { v } else { slopes[i / group] * v }).collect()
}

/// Backward of PReLU with one slope per `group` consecutive entries.
fn prelu_backward(z: &[f64], slopes: &[f64], group: usize, dout: &[f64], dslope: &mut [f64]) -> Vec<f64> {
    z.iter()
        .zip(dout)
        .enumerate()
        .map(|(i, (&v, &d))| {
            if v > 0.0 {
                d
            } else {
                dslope[i / group] += d * v;
                d * slopes[i / group]
            }
        })
        .collect()
}

struct BlockCache {
    input: Vec<f64>,
    col: Vec<f64>,
    z3: Vec<f64>,
    z1: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: f64,
}

struct HeadCache {
    input: Vec<f64>,
    z1: Vec<f64>,
    h: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for backprop.
pub struct ForwardCache {
    stem_col: Vec<f64>,
    stem_z: Vec<f64>,
    blocks: Vec<BlockCache>,
    value: HeadCache,
    advantage: HeadCache,
    avail: Vec<bool>,
    pool_arg: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNetwork {
    pub cfg: QNetConfig,
    pub weights: Vec<f64>,
}

impl QNetwork {
    pub fn new(cfg: QNetConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.m_bar == 0 || cfg.k == 0 || cfg.channels == 0 || cfg.hidden == 0 {
            return Err(Error::InvalidConfig(format!("network dimensions {cfg:?}")));
        }
        let layout = Layout::new(&cfg);
        let mut w = vec![0.0; layout.total];
        let c = cfg.channels;
        let mut fill = |w: &mut [f64], start: usize, len: usize, fan_in: usize, gain: f64| {
            let normal = Normal::new(0.0, gain * (2.0 / fan_in as f64).sqrt()).expect("finite std");
            for x in &mut w[start..start + len] {
                *x = normal.sample(rng);
            }
        };
        let stem_in = INPUT_PLANES * 9;
        fill(&mut w, layout.stem_w, c * stem_in, stem_in, 1.0);
        w[layout.stem_slope..layout.stem_slope + c].fill(PRELU_INIT);
        for b in &layout.blocks {
            fill(&mut w, b.c3_w, c * c * 9, c * 9, 1.0);
            fill(&mut w, b.c1_w, c * c, c, 1.0);
            w[b.slope..b.slope + c].fill(PRELU_INIT);
            w[b.gain..b.gain + c].fill(1.0);
        }
        for head in [layout.value, layout.advantage] {
            fill(&mut w, head.w1, cfg.hidden * head.inp, head.inp, 1.0);
            w[head.slope..head.slope + cfg.hidden].fill(PRELU_INIT);
            fill(&mut w, head.w2, cfg.hidden, cfg.hidden, 0.1);
        }
        Ok(QNetwork { cfg, weights: w })
    }

    pub fn num_params(&self) -> usize {
        self.weights.len()
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.cfg)
    }

    fn check_state(&self, state: &[f64]) -> Result<()> {
        let need = 3 * self.cfg.cells();
        if state.len() != need {
            return Err(Error::ShapeMismatch(format!("state of length {}, expected {need}", state.len())));
        }
        Ok(())
    }

    /// Divides the two channel planes by their RMS and appends the scaled
    /// magnitude plane and a constant `ln(rms)` plane; the indicator is untouched.
    fn preprocess(&self, state: &[f64]) -> Vec<f64> {
        let cells = self.cfg.cells();
        let ms = state[..2 * cells].iter().map(|x| x * x).sum::<f64>() / (2 * cells) as f64;
        let scale = if ms > 0.0 { 1.0 / ms.sqrt() } else { 1.0 };
        let mut x = Vec::with_capacity(INPUT_PLANES * cells);
        x.extend(state[..2 * cells].iter().map(|v| v * scale));
        x.extend_from_slice(&state[2 * cells..3 * cells]);
        x.extend((0..cells).map(|i| scale * state[i].hypot(state[cells + i])));
        x.extend((0..cells).map(|i| (scale * scale * (state[i].powi(2) + state[cells + i].powi(2)) + LOG_FLOOR).ln() / 4.0));
        let k = self.cfg.k;
        let mag = |i: usize| state[i].hypot(state[cells + i]);
        let col_max: Vec<f64> = (0..k).map(|u| (0..self.cfg.m_bar).map(|r| mag(r * k + u)).fold(0.0, f64::max)).collect();
        x.extend((0..cells).map(|i| if col_max[i % k] > 0.0 { mag(i) / col_max[i % k] } else { 0.0 }));
        x.extend(std::iter::repeat_n(-scale.ln(), cells));
        x
    }

    pub fn q_values(&self, state: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(state)?.0)
    }

    /// Q-values and the value-head output `V(s)`.
    pub fn q_and_value(&self, state: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (q, cache) = self.forward(state)?;
        let v = self.head_output(&self.layout().value, &cache.value)[0];
        Ok((q, v))
    }

    /// One scalar per head row.
    fn head_output(&self, head: &HeadLayout, cache: &HeadCache) -> Vec<f64> {
        let w = &self.weights;
        let hid = self.cfg.hidden;
        let mut out = vec![w[head.b2]; head.rows];
        gemm(&mut out, &cache.h, &w[head.w2..head.w2 + hid], head.rows, hid, 1);
        out
    }

    /// `input` is `rows x inp`, row-major.
    fn head_forward(&self, head: &HeadLayout, input: Vec<f64>) -> HeadCache {
        let w = &self.weights;
        let hid = self.cfg.hidden;
        let mut z1: Vec<f64> = (0..head.rows).flat_map(|_| w[head.b1..head.b1 + hid].iter().copied()).collect();
        gemm_bt(&mut z1, &input, &w[head.w1..head.w1 + hid * head.inp], head.rows, head.inp, hid);
        let slopes = &w[head.slope..head.slope + hid];
        let h = z1.iter().enumerate().map(|(i, &v)| if v > 0.0 { v } else { slopes[i % hid] * v }).collect();
        HeadCache { input, z1, h }
    }

    /// Each beam row's `channels x K` features followed by three pooled
    /// summaries: the mean over selected rows, the mean over available rows and
    /// the maximum over available rows. Also returns the arg-max rows.
    fn row_features(&self, flat: &[f64], avail: &[bool]) -> (Vec<f64>, Vec<usize>) {
        let (c, k, m, cells) = (self.cfg.channels, self.cfg.k, self.cfg.m_bar, self.cfg.cells());
        let ck = c * k;
        let mut pooled = vec![0.0; 3 * ck];
        let mut arg = vec![usize::MAX; ck];
        for r in 0..m {
            let (off, n) = pool_slot(avail, r);
            for i in 0..ck {
                let v = flat[(i / k) * cells + r * k + i % k];
                pooled[off * ck + i] += v / n;
                if avail[r] && (arg[i] == usize::MAX || v > pooled[2 * ck + i]) {
                    pooled[2 * ck + i] = v;
                    arg[i] = r;
                }
            }
        }
        let mut out = Vec::with_capacity(4 * flat.len());
        for r in 0..m {
            for ch in 0..c {
                out.extend_from_slice(&flat[ch * cells + r * k..ch * cells + (r + 1) * k]);
            }
            out.extend_from_slice(&pooled);
        }
        (out, arg)
    }

    fn scatter_row_features(&self, rows: &[f64], avail: &[bool], arg: &[usize]) -> Vec<f64> {
        let (c, k, m, cells) = (self.cfg.channels, self.cfg.k, self.cfg.m_bar, self.cfg.cells());
        let ck = c * k;
        let mut dpooled = vec![0.0; 3 * ck];
        let mut flat = vec![0.0; c * cells];
        for r in 0..m {
            let base = r * 4 * ck;
            for i in 0..ck {
                flat[(i / k) * cells + r * k + i % k] += rows[base + i];
            }
            dpooled.iter_mut().zip(&rows[base + ck..base + 4 * ck]).for_each(|(d, g)| *d += g);
        }
        for r in 0..m {
            let (off, n) = pool_slot(avail, r);
            for i in 0..ck {
                flat[(i / k) * cells + r * k + i % k] += dpooled[off * ck + i] / n;
            }
        }
        for (i, &r) in arg.iter().enumerate() {
            if r != usize::MAX {
                flat[(i / k) * cells + r * k + i % k] += dpooled[2 * ck + i];
            }
        }
        flat
    }

    pub fn forward(&self, state: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_state(state)?;
        let cfg = &self.cfg;
        let lay = self.layout();
        let w = &self.weights;
        let (c, cells) = (cfg.channels, cfg.cells());
        let x = self.preprocess(state);
        let stem_in = INPUT_PLANES * 9;
        let stem_col = im2col(&x, INPUT_PLANES, cfg.m_bar, cfg.k);
        let mut stem_z = vec![0.0; c * cells];
        gemm(&mut stem_z, &w[lay.stem_w..lay.stem_w + c * stem_in], &stem_col, c, stem_in, cells);
        add_channel_bias(&mut stem_z, &w[lay.stem_b..lay.stem_b + c], cells);
        let mut h = prelu(&stem_z, &w[lay.stem_slope..lay.stem_slope + c], cells);
        let mut blocks = Vec::with_capacity(lay.blocks.len());
        for b in &lay.blocks {
            let col = im2col(&h, c, cfg.m_bar, cfg.k);
            let mut z3 = vec![0.0; c * cells];
            gemm(&mut z3, &w[b.c3_w..b.c3_w + c * c * 9], &col, c, c * 9, cells);
            add_channel_bias(&mut z3, &w[b.c3_b..b.c3_b + c], cells);
            let mut z1 = vec![0.0; c * cells];
            gemm(&mut z1, &w[b.c1_w..b.c1_w + c * c], &z3, c, c, cells);
            add_channel_bias(&mut z1, &w[b.c1_b..b.c1_b + c], cells);
            let p = prelu(&z1, &w[b.slope..b.slope + c], cells);
            let n = p.len() as f64;
            let mean = p.iter().sum::<f64>() / n;
            let var = p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv_std = 1.0 / (var + NORM_EPS).sqrt();
            let xhat: Vec<f64> = p.iter().map(|v| (v - mean) * inv_std).collect();
            let out: Vec<f64> = (0..c * cells)
                .map(|i| h[i] + w[b.gain + i / cells] * xhat[i] + w[b.bias + i / cells])
                .collect();
            blocks.push(BlockCache { input: std::mem::replace(&mut h, out), col, z3, z1, xhat, inv_std });
        }
        let avail = available_actions(state, cfg.m_bar, cfg.k);
        let (rows, pool_arg) = self.row_features(&h, &avail);
        let advantage = self.head_forward(&lay.advantage, rows);
        let value = self.head_forward(&lay.value, h);
        let cache = ForwardCache { stem_col, stem_z, blocks, value, advantage, avail, pool_arg };
        let v = self.head_output(&lay.value, &cache.value)[0];
        let a = self.head_output(&lay.advantage, &cache.advantage);
        let mean_a = a.iter().sum::<f64>() / a.len() as f64;
        Ok((a.iter().map(|ai| v + ai - mean_a).collect(), cache))
    }

    /// Returns the gradient with respect to the head input (`rows x inp`).
    fn head_backward(&self, head: &HeadLayout, cache: &HeadCache, dout: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let w = &self.weights;
        let (hid, rows, inp) = (self.cfg.hidden, head.rows, head.inp);
        gemm_at(&mut grad[head.w2..head.w2 + hid], &cache.h, dout, hid, rows, 1);
        grad[head.b2] += dout.iter().sum::<f64>();
        let w2 = &w[head.w2..head.w2 + hid];
        let slopes = &w[head.slope..head.slope + hid];
        let mut dz1 = vec![0.0; rows * hid];
        for r in 0..rows {
            for j in 0..hid {
                let i = r * hid + j;
                let dh = dout[r] * w2[j];
                if cache.z1[i] > 0.0 {
                    dz1[i] = dh;
                } else {
                    grad[head.slope + j] += dh * cache.z1[i];
                    dz1[i] = dh * slopes[j];
                }
                grad[head.b1 + j] += dz1[i];
            }
        }
        gemm_at(&mut grad[head.w1..head.w1 + hid * inp], &dz1, &cache.input, hid, rows, inp);
        let mut dinput = vec![0.0; rows * inp];
        gemm(&mut dinput, &dz1, &w[head.w1..head.w1 + hid * inp], rows, hid, inp);
        dinput
    }

    /// Accumulates `sum_a dq[a] * dQ(s, a)/dθ` into `grad`.
    pub fn backward(&self, cache: &ForwardCache, dq: &[f64], grad: &mut [f64]) {
        let cfg = &self.cfg;
        let lay = self.layout();
        let w = &self.weights;
        let (c, cells) = (cfg.channels, cfg.cells());
        let dv = [dq.iter().sum::<f64>()];
        let mean_dq = dv[0] / dq.len() as f64;
        let da: Vec<f64> = dq.iter().map(|d| d - mean_dq).collect();
        let mut dh = self.head_backward(&lay.value, &cache.value, &dv, grad);
        let d_rows = self.head_backward(&lay.advantage, &cache.advantage, &da, grad);
        let from_adv = self.scatter_row_features(&d_rows, &cache.avail, &cache.pool_arg);
        dh.iter_mut().zip(&from_adv).for_each(|(a, b)| *a += b);
        for (b, bc) in lay.blocks.iter().zip(&cache.blocks).rev() {
            let n = (c * cells) as f64;
            let mut dxhat = vec![0.0; c * cells];
            for i in 0..c * cells {
                let ch = i / cells;
                grad[b.gain + ch] += dh[i] * bc.xhat[i];
                grad[b.bias + ch] += dh[i];
                dxhat[i] = dh[i] * w[b.gain + ch];
            }
            let mean_d = dxhat.iter().sum::<f64>() / n;
            let mean_dx = dxhat.iter().zip(&bc.xhat).map(|(d, x)| d * x).sum::<f64>() / n;
            let dp: Vec<f64> =
                dxhat.iter().zip(&bc.xhat).map(|(d, x)| bc.inv_std * (d - mean_d - x * mean_dx)).collect();
            let mut dslope = vec![0.0; c];
            let dz1 = prelu_backward(&bc.z1, &w[b.slope..b.slope + c], cells, &dp, &mut dslope);
            for (g, d) in grad[b.slope..b.slope + c].iter_mut().zip(&dslope) {
                *g += d;
            }
            gemm_bt(&mut grad[b.c1_w..b.c1_w + c * c], &dz1, &bc.z3, c, cells, c);
            for ch in 0..c {
                grad[b.c1_b + ch] += dz1[ch * cells..(ch + 1) * cells].iter().sum::<f64>();
            }
            let mut dz3 = vec![0.0; c * cells];
            gemm_at(&mut dz3, &w[b.c1_w..b.c1_w + c * c], &dz1, c, c, cells);
            gemm_bt(&mut grad[b.c3_w..b.c3_w + c * c * 9], &dz3, &bc.col, c, cells, c * 9);
            for ch in 0..c {
                grad[b.c3_b + ch] += dz3[ch * cells..(ch + 1) * cells].iter().sum::<f64>();
            }
            let mut dcol = vec![0.0; c * 9 * cells];
            gemm_at(&mut dcol, &w[b.c3_w..b.c3_w + c * c * 9], &dz3, c * 9, c, cells);
            let dinput = col2im(&dcol, c, cfg.m_bar, cfg.k);
            // the skip connection passes dh through unchanged
            dh.iter_mut().zip(&dinput).for_each(|(a, b)| *a += b);
            debug_assert_eq!(bc.input.len(), dh.len());
        }
        let mut dslope = vec![0.0; c];
        let dz = prelu_backward(&cache.stem_z, &w[lay.stem_slope..lay.stem_slope + c], cells, &dh, &mut dslope);
        for (g, d) in grad[lay.stem_slope..lay.stem_slope + c].iter_mut().zip(&dslope) {
            *g += d;
        }
        let stem_in = INPUT_PLANES * 9;
        gemm_bt(&mut grad[lay.stem_w..lay.stem_w + c * stem_in], &dz, &cache.stem_col, c, cells, stem_in);
        for ch in 0..c {
            grad[lay.stem_b + ch] += dz[ch * cells..(ch + 1) * cells].iter().sum::<f64>();
        }
    }

    /// Copy with additive Gaussian noise on every weight.
    pub fn perturbed(&self, std: f64, rng: &mut impl Rng) -> Result<QNetwork> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut out = self.clone();
        out.weights.iter_mut().for_each(|w| *w += normal.sample(rng));
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint { format: CHECKPOINT_FORMAT.into(), version: CHECKPOINT_VERSION, network: self.clone() };
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut out, &ckpt)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint {} v{}", ckpt.format, ckpt.version)));
        }
        if ckpt.network.weights.len() != Layout::new(&ckpt.network.cfg).total {
            return Err(Error::ArchMismatch);
        }
        Ok(ckpt.network)
    }
}

const CHECKPOINT_FORMAT: &str = "lensmimo-qnet";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    network: QNetwork,
}

/// Hard copy of the main weights into the target.
pub fn sync_target(main: &QNetwork, target: &mut QNetwork) -> Result<()> {
    if main.cfg != target.cfg || main.weights.len() != target.weights.len() {
        return Err(Error::ArchMismatch);
    }
    target.weights.copy_from_slice(&main.weights);
    Ok(())
}

/// Index of the largest value among allowed entries; ties go to the lowest index.
pub fn argmax(values: &[f64], allowed: Option<&[bool]>) -> usize {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if allowed.is_some_and(|m| !m[i]) {
            continue;
        }
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best.unwrap_or(0)
}

/// Available actions read off the indicator plane of a state tensor.
pub fn available_actions(state: &[f64], m_bar: usize, k: usize) -> Vec<bool> {
    let base = 2 * m_bar * k;
    (0..m_bar).map(|r| state[base + r * k] > 0.5).collect()
}

/// Epsilon-greedy action. With `allowed`, both branches stay within it.
pub fn act(net: &QNetwork, state: &[f64], epsilon: f64, allowed: Option<&[bool]>, rng: &mut impl Rng) -> Result<usize> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidConfig(format!("epsilon {epsilon}")));
    }
    let m = net.cfg.m_bar;
    if rng.random::<f64>() < epsilon {
        return Ok(match allowed {
            Some(mask) => {
                let options: Vec<usize> = (0..m).filter(|&i| mask[i]).collect();
                if options.is_empty() {
                    rng.random_range(0..m)
                } else {
                    options[rng.random_range(0..options.len())]
                }
            }
            None => rng.random_range(0..m),
        });
    }
    Ok(argmax(&net.q_values(state)?, allowed))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrioritizedReplay {
    pub capacity: usize,
    pub alpha: f64,
    entries: VecDeque<(Transition, f64)>,
    max_priority: f64,
}

impl PrioritizedReplay {
    pub fn new(capacity: usize, alpha: f64) -> Result<Self> {
        if capacity == 0 || !(alpha >= 0.0) {
            return Err(Error::InvalidConfig(format!("replay capacity {capacity}, alpha {alpha}")));
        }
        Ok(PrioritizedReplay { capacity, alpha, entries: VecDeque::with_capacity(capacity), max_priority: 1.0 })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stores with the largest priority seen so far; evicts the oldest entry when full.
    pub fn push(&mut self, t: Transition) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((t, self.max_priority));
    }

    pub fn push_with_priority(&mut self, t: Transition, priority: f64) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.max_priority = self.max_priority.max(priority);
        self.entries.push_back((t, priority));
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.entries[i].0
    }

    pub fn priority(&self, i: usize) -> f64 {
        self.entries[i].1
    }

    pub fn set_priority(&mut self, i: usize, p: f64) {
        self.entries[i].1 = p;
        self.max_priority = self.max_priority.max(p);
    }

    /// Draws `n` indices with probability proportional to `priority^alpha`,
    /// with importance weights `(N P(i))^-beta` normalised by their maximum
    /// over the whole buffer.
    pub fn sample(&self, n: usize, beta: f64, rng: &mut impl Rng) -> Result<(Vec<usize>, Vec<f64>)> {
        if self.entries.len() < n {
            return Err(Error::InsufficientSamples { have: self.entries.len(), need: n });
        }
        let mut cumulative = Vec::with_capacity(self.entries.len());
        let mut total = 0.0;
        let mut min_p = f64::INFINITY;
        for (_, p) in &self.entries {
            let x = p.powf(self.alpha);
            total += x;
            min_p = min_p.min(x);
            cumulative.push(total);
        }
        let len = self.entries.len() as f64;
        let max_weight = (len * min_p / total).powf(-beta);
        let mut idx = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for _ in 0..n {
            let u = rng.random::<f64>() * total;
            let i = cumulative.partition_point(|&c| c <= u).min(self.entries.len() - 1);
            let prob = self.entries[i].1.powf(self.alpha) / total;
            idx.push(i);
            weights.push((len * prob).powf(-beta) / max_weight);
        }
        Ok((idx, weights))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub gamma: f64,
    pub batch: usize,
    /// Learn every `replay_period` episodes.
    pub replay_period: usize,
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of the episode budget over which epsilon decays.
    pub eps_decay_fraction: f64,
    /// Hard target sync every this many learn steps.
    pub target_sync: usize,
    pub replay_capacity: usize,
    pub alpha: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub priority_floor: f64,
    /// Gradient steps per learn phase.
    pub updates_per_learn: usize,
    /// Standard deviation of exploration noise on weights; 0 disables it.
    pub weight_noise: f64,
    /// Ablation: restrict actions and targets to available beams.
    pub mask_invalid: bool,
    pub seed: u64,
    pub channels: usize,
    pub blocks: usize,
    pub hidden: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            gamma: 0.9,
            batch: 40,
            replay_period: 10,
            lr: 1e-3,
            momentum: 0.9,
            clip_norm: 10.0,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay_fraction: 0.6,
            target_sync: 50,
            replay_capacity: 16000,
            alpha: 0.6,
            beta_start: 0.4,
            beta_end: 1.0,
            priority_floor: 1e-3,
            updates_per_learn: 1,
            weight_noise: 0.0,
            mask_invalid: false,
            seed: 0,
            channels: 32,
            blocks: 2,
            hidden: 64,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidConfig(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if self.batch == 0 || self.batch > self.replay_capacity {
            return Err(Error::InvalidConfig(format!("batch {} vs capacity {}", self.batch, self.replay_capacity)));
        }
        if self.replay_period == 0 || self.target_sync == 0 || self.updates_per_learn == 0 {
            return Err(Error::InvalidConfig("periods must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eps_start) || !(0.0..=1.0).contains(&self.eps_end) || self.eps_end > self.eps_start {
            return Err(Error::InvalidConfig("epsilon schedule".into()));
        }
        if !(self.priority_floor > 0.0) {
            return Err(Error::InvalidConfig("priority floor must be positive".into()));
        }
        Ok(())
    }

    pub fn net_config(&self, m_bar: usize, k: usize) -> QNetConfig {
        QNetConfig { m_bar, k, channels: self.channels, blocks: self.blocks, hidden: self.hidden }
    }

    /// Exponential decay from `eps_start` to `eps_end` over the first
    /// `eps_decay_fraction` of `total` episodes, then flat.
    pub fn epsilon(&self, episode: usize, total: usize) -> f64 {
        let horizon = (self.eps_decay_fraction * total as f64).max(1.0);
        let frac = (episode as f64 / horizon).min(1.0);
        if self.eps_end <= 0.0 {
            return self.eps_start * (1.0 - frac);
        }
        self.eps_start * (self.eps_end / self.eps_start).powf(frac)
    }

    pub fn beta(&self, episode: usize, total: usize) -> f64 {
        let frac = if total == 0 { 1.0 } else { (episode as f64 / total as f64).min(1.0) };
        self.beta_start + (self.beta_end - self.beta_start) * frac
    }
}

/// Double-Q targets: the main net picks the next action, the target net values it.
pub fn td_targets(main: &QNetwork, target: &QNetwork, batch: &[&Transition], gamma: f64, mask_invalid: bool) -> Result<Vec<f64>> {
    batch
        .iter()
        .map(|t| {
            if t.terminal {
                return Ok(t.r);
            }
            let mask = mask_invalid.then(|| available_actions(&t.s_next, main.cfg.m_bar, main.cfg.k));
            let a_star = argmax(&main.q_values(&t.s_next)?, mask.as_deref());
            Ok(t.r + gamma * target.q_values(&t.s_next)?[a_star])
        })
        .collect()
}

/// Momentum SGD with gradient-norm clipping on a flat weight vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sgd {
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(n: usize) -> Self {
        Sgd { velocity: vec![0.0; n] }
    }

    pub fn step(&mut self, weights: &mut [f64], grad: &mut [f64], lr: f64, momentum: f64, clip: f64) -> Result<()> {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Diverged(format!("gradient norm {norm}")));
        }
        if clip > 0.0 && norm > clip {
            grad.iter_mut().for_each(|g| *g *= clip / norm);
        }
        for ((w, v), g) in weights.iter_mut().zip(&mut self.velocity).zip(grad.iter()) {
            *v = momentum * *v + g;
            *w -= lr * *v;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearnOutcome {
    pub loss: f64,
    pub mean_abs_td: f64,
}

/// One prioritized double-DQN update of `main`.
pub fn learn_step(
    main: &mut QNetwork,
    target: &QNetwork,
    replay: &mut PrioritizedReplay,
    opt: &mut Sgd,
    cfg: &AgentConfig,
    beta: f64,
    rng: &mut impl Rng,
) -> Result<LearnOutcome> {
    let (idx, weights) = replay.sample(cfg.batch, beta, rng)?;
    let batch: Vec<&Transition> = idx.iter().map(|&i| replay.get(i)).collect();
    let targets = td_targets(main, target, &batch, cfg.gamma, cfg.mask_invalid)?;
    let mut grad = vec![0.0; main.num_params()];
    let mut loss = 0.0;
    let mut td = Vec::with_capacity(batch.len());
    let n = batch.len() as f64;
    for ((t, y), w) in batch.iter().zip(&targets).zip(&weights) {
        let (q, cache) = main.forward(&t.s)?;
        let err = y - q[t.a];
        loss += w * err * err / n;
        let mut dq = vec![0.0; q.len()];
        dq[t.a] = -2.0 * w * err / n;
        main.backward(&cache, &dq, &mut grad);
        td.push(err);
    }
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("TD loss {loss}")));
    }
    opt.step(&mut main.weights, &mut grad, cfg.lr, cfg.momentum, cfg.clip_norm)?;
    for (&i, e) in idx.iter().zip(&td) {
        replay.set_priority(i, e.abs() + cfg.priority_floor);
    }
    let mean_abs_td = td.iter().map(|e| e.abs()).sum::<f64>() / n;
    Ok(LearnOutcome { loss, mean_abs_td })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub reward: f64,
    /// Repeated selections in the exploring training episode.
    pub violations: usize,
    /// Repeated selections when the current policy acts greedily on the same channel.
    pub greedy_violations: usize,
    pub loss: Option<f64>,
    pub sum_rate: Option<f64>,
}

/// Result of running one selection episode.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub state: EnvState,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub transitions: Vec<Transition>,
    pub terminal_rate: Option<f64>,
}

/// Runs one episode with the given network and exploration rate.
pub fn rollout<F>(
    env_cfg: &EnvConfig,
    net: &QNetwork,
    h: &CMatrix,
    epsilon: f64,
    mask_invalid: bool,
    rng: &mut impl Rng,
    mut precoder_fn: F,
) -> Result<Rollout>
where
    F: FnMut(&CMatrix) -> Result<Precoder>,
{
    let mut state = env_reset(env_cfg, h)?;
    let mut out = Rollout { state: state.clone(), actions: vec![], rewards: vec![], transitions: vec![], terminal_rate: None };
    while !state.is_terminal() {
        let s = state.tensor();
        let mask = mask_invalid.then(|| state.available.clone());
        let a = act(net, &s, epsilon, mask.as_deref(), rng)?;
        let (tr, rate) = env_step(env_cfg, &mut state, a, &mut precoder_fn)?;
        out.actions.push(a);
        out.rewards.push(tr.r);
        out.transitions.push(tr);
        if rate.is_some() {
            out.terminal_rate = rate;
        }
    }
    out.state = state;
    Ok(out)
}

/// Greedy selection by `net`; ignores the precoder (terminal rewards are not needed).
pub fn greedy_selection(env_cfg: &EnvConfig, net: &QNetwork, h: &CMatrix, mask_invalid: bool) -> Result<EnvState> {
    let mut state = env_reset(env_cfg, h)?;
    let mut cfg = env_cfg.clone();
    cfg.weights.terminal = 0.0;
    while !state.is_terminal() {
        let mask = mask_invalid.then(|| state.available.clone());
        let a = argmax(&net.q_values(&state.tensor())?, mask.as_deref());
        // with a zero terminal weight the precoder is still evaluated for valid
        // episodes; a zero matrix keeps that cheap
        env_step(&cfg, &mut state, a, |hb| Ok(Precoder { p: CMatrix::zeros(hb.rows(), hb.cols()), power_budget: 1.0 }))?;
    }
    Ok(state)
}

/// Algorithm state for collecting episodes and learning, shared by the DRL
/// trainer and the joint trainer.
pub struct DrlTrainer {
    pub env_cfg: EnvConfig,
    pub cfg: AgentConfig,
    pub main: QNetwork,
    pub target: QNetwork,
    pub replay: PrioritizedReplay,
    pub opt: Sgd,
    pub rng: ChaCha8Rng,
    pub learn_steps: usize,
    pub total_episodes: usize,
}

impl DrlTrainer {
    pub fn new(env_cfg: EnvConfig, cfg: AgentConfig, total_episodes: usize) -> Result<Self> {
        env_cfg.validate()?;
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let main = QNetwork::new(cfg.net_config(env_cfg.m_bar, env_cfg.k), &mut rng)?;
        let target = main.clone();
        let replay = PrioritizedReplay::new(cfg.replay_capacity, cfg.alpha)?;
        let opt = Sgd::new(main.num_params());
        Ok(DrlTrainer { env_cfg, cfg, main, target, replay, opt, rng, learn_steps: 0, total_episodes })
    }

    /// Collects one exploring episode into the replay buffer.
    pub fn collect<F>(&mut self, episode: usize, h: &CMatrix, precoder_fn: F) -> Result<Rollout>
    where
        F: FnMut(&CMatrix) -> Result<Precoder>,
    {
        let eps = self.cfg.epsilon(episode, self.total_episodes);
        let out = if self.cfg.weight_noise > 0.0 {
            let noisy = self.main.perturbed(self.cfg.weight_noise, &mut self.rng)?;
            rollout(&self.env_cfg, &noisy, h, eps, self.cfg.mask_invalid, &mut self.rng, precoder_fn)?
        } else {
            rollout(&self.env_cfg, &self.main, h, eps, self.cfg.mask_invalid, &mut self.rng, precoder_fn)?
        };
        for t in &out.transitions {
            self.replay.push(t.clone());
        }
        Ok(out)
    }

    /// `updates_per_learn` gradient steps; `None` while the buffer is too small.
    pub fn learn_phase(&mut self, episode: usize) -> Result<Option<f64>> {
        if self.replay.len() < self.cfg.batch {
            return Ok(None);
        }
        let beta = self.cfg.beta(episode, self.total_episodes);
        let mut total = 0.0;
        for _ in 0..self.cfg.updates_per_learn {
            let out = learn_step(&mut self.main, &self.target, &mut self.replay, &mut self.opt, &self.cfg, beta, &mut self.rng)?;
            total += out.loss;
            self.learn_steps += 1;
            if self.learn_steps % self.cfg.target_sync == 0 {
                sync_target(&self.main, &mut self.target)?;
            }
        }
        Ok(Some(total / self.cfg.updates_per_learn as f64))
    }

    /// Repeats made by the greedy policy on `h`.
    pub fn greedy_violations(&self, h: &CMatrix) -> Result<usize> {
        Ok(greedy_selection(&self.env_cfg, &self.main, h, self.cfg.mask_invalid)?.repeats)
    }
}

#[derive(Debug, Clone)]
pub struct DrlOutcome {
    pub net: QNetwork,
    pub history: Vec<EpisodeRecord>,
}

/// Trains for `episodes` episodes; `channel_fn(e)` supplies episode `e`'s channel.
pub fn train_drl<C, F>(
    env_cfg: &EnvConfig,
    cfg: &AgentConfig,
    episodes: usize,
    mut channel_fn: C,
    mut precoder_fn: F,
) -> Result<DrlOutcome>
where
    C: FnMut(usize) -> Result<CMatrix>,
    F: FnMut(&CMatrix) -> Result<Precoder>,
{
    let mut trainer = DrlTrainer::new(env_cfg.clone(), cfg.clone(), episodes)?;
    let mut history = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let h = channel_fn(e)?;
        let out = trainer.collect(e, &h, &mut precoder_fn)?;
        let loss = if (e + 1) % cfg.replay_period == 0 { trainer.learn_phase(e)? } else { None };
        history.push(EpisodeRecord {
            episode: e,
            reward: out.rewards.iter().sum(),
            violations: out.state.repeats,
            greedy_violations: trainer.greedy_violations(&h)?,
            loss,
            sum_rate: out.terminal_rate,
        });
    }
    Ok(DrlOutcome { net: trainer.main, history })
}

pub fn write_history_csv(path: &Path, history: &[EpisodeRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "episode,reward,violations,greedy_violations,loss,sum_rate")?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in history {
        writeln!(out, "{},{},{},{},{},{}", r.episode, r.reward, r.violations, r.greedy_violations, opt(r.loss), opt(r.sum_rate))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn tiny() -> QNetConfig {
        QNetConfig { m_bar: 3, k: 2, channels: 2, blocks: 2, hidden: 3 }
    }

    fn random_state(rng: &mut ChaCha8Rng, cfg: &QNetConfig) -> Vec<f64> {
        let cells = cfg.m_bar * cfg.k;
        let mut s: Vec<f64> = (0..2 * cells).map(|_| rng.random_range(-1.0..1.0)).collect();
        for _ in 0..cfg.m_bar {
            let v = if rng.random::<bool>() { 1.0 } else { 0.0 };
            s.extend(std::iter::repeat_n(v, cfg.k));
        }
        s
    }

    #[test]
    fn dueling_advantages_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = QNetwork::new(QNetConfig::new(8, 4), &mut rng).unwrap();
        for _ in 0..5 {
            let s = random_state(&mut rng, &net.cfg);
            let (q, v) = net.q_and_value(&s).unwrap();
            assert!(q.iter().map(|x| x - v).sum::<f64>().abs() < 1e-6);
            assert_eq!(net.q_values(&s).unwrap(), q);
        }
        assert!(matches!(net.q_values(&[0.0; 5]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn equal_advantages_give_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = QNetwork::new(tiny(), &mut rng).unwrap();
        let lay = net.layout();
        let adv = lay.advantage;
        net.weights[adv.w2..adv.w2 + net.cfg.hidden].fill(0.0);
        net.weights[adv.b2] = 0.7;
        let s = random_state(&mut rng, &net.cfg);
        let (q, v) = net.q_and_value(&s).unwrap();
        assert!(q.iter().all(|x| (x - v).abs() < 1e-12));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = QNetwork::new(tiny(), &mut rng).unwrap();
        let s = random_state(&mut rng, &net.cfg);
        let dq: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, cache) = net.forward(&s).unwrap();
        let mut grad = vec![0.0; net.num_params()];
        net.backward(&cache, &dq, &mut grad);
        let f = |w: &[f64]| {
            let n = QNetwork { cfg: net.cfg, weights: w.to_vec() };
            n.q_values(&s).unwrap().iter().zip(&dq).map(|(q, d)| q * d).sum::<f64>()
        };
        let report = grad_check(f, &grad, &net.weights, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
    }

    #[test]
    fn act_greedy_and_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = QNetwork::new(QNetConfig { m_bar: 8, ..tiny() }, &mut rng).unwrap();
        let s = random_state(&mut rng, &net.cfg);
        let q = net.q_values(&s).unwrap();
        assert_eq!(act(&net, &s, 0.0, None, &mut rng).unwrap(), argmax(&q, None));
        let mut only5 = [false; 8];
        only5[5] = true;
        assert_eq!(act(&net, &s, 0.0, Some(&only5), &mut rng).unwrap(), 5);
        let mut counts = [0usize; 8];
        let draws = 10_000;
        for _ in 0..draws {
            counts[act(&net, &s, 1.0, None, &mut rng).unwrap()] += 1;
        }
        let expect = draws as f64 / 8.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        // 7 degrees of freedom, 0.999 quantile
        assert!(chi2 < 24.32, "chi2 {chi2}");
    }

    fn transition(r: f64, terminal: bool, m: usize, k: usize) -> Transition {
        Transition { s: vec![0.5; 3 * m * k], a: 1, r, s_next: vec![0.25; 3 * m * k], terminal }
    }

    #[test]
    fn td_target_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let main = QNetwork::new(tiny(), &mut rng).unwrap();
        let target = QNetwork::new(tiny(), &mut rng).unwrap();
        let t_term = transition(2.0, true, 3, 2);
        let t_mid = transition(1.5, false, 3, 2);
        let y = td_targets(&main, &target, &[&t_term, &t_mid], 0.9, false).unwrap();
        assert_eq!(y[0], 2.0);
        let a_star = argmax(&main.q_values(&t_mid.s_next).unwrap(), None);
        let expect = 1.5 + 0.9 * target.q_values(&t_mid.s_next).unwrap()[a_star];
        assert!((y[1] - expect).abs() < 1e-12);
        let y0 = td_targets(&main, &target, &[&t_mid], 1e-300, false).unwrap();
        assert!((y0[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn sync_is_deep_copy() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut main = QNetwork::new(tiny(), &mut rng).unwrap();
        let mut target = QNetwork::new(tiny(), &mut rng).unwrap();
        sync_target(&main, &mut target).unwrap();
        let s = random_state(&mut rng, &main.cfg);
        assert_eq!(main.q_values(&s).unwrap(), target.q_values(&s).unwrap());
        sync_target(&main, &mut target).unwrap();
        assert_eq!(main, target);
        main.weights[0] += 1.0;
        assert_ne!(main.weights[0], target.weights[0]);
        let mut other = QNetwork::new(QNetConfig { hidden: 4, ..tiny() }, &mut rng).unwrap();
        assert!(matches!(sync_target(&main, &mut other), Err(Error::ArchMismatch)));
    }

    #[test]
    fn replay_eviction_and_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut replay = PrioritizedReplay::new(3, 1.0).unwrap();
        for i in 0..5 {
            replay.push(transition(i as f64, true, 1, 1));
        }
        assert_eq!(replay.len(), 3);
        assert_eq!(replay.get(0).r, 2.0);
        assert!(matches!(replay.sample(4, 0.4, &mut rng), Err(Error::InsufficientSamples { have: 3, need: 4 })));

        let mut uniform = PrioritizedReplay::new(10, 0.6).unwrap();
        for i in 0..10 {
            uniform.push(transition(i as f64, true, 1, 1));
        }
        let mut counts = [0usize; 10];
        for _ in 0..1000 {
            let (idx, w) = uniform.sample(10, 0.4, &mut rng).unwrap();
            idx.iter().for_each(|&i| counts[i] += 1);
            assert!(w.iter().all(|&x| (x - 1.0).abs() < 1e-12));
        }
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - 1000.0).powi(2) / 1000.0).sum();
        assert!(chi2 < 27.88, "chi2 {chi2}");

        let mut skewed = PrioritizedReplay::new(10, 1.0).unwrap();
        for i in 0..10 {
            skewed.push_with_priority(transition(i as f64, true, 1, 1), if i == 3 { 1e6 } else { 1.0 });
        }
        let hits = (0..1000).filter(|_| skewed.sample(1, 0.4, &mut rng).unwrap().0[0] == 3).count();
        assert!(hits >= 990, "{hits}");
    }

    #[test]
    fn zero_td_error_leaves_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut main = QNetwork::new(tiny(), &mut rng).unwrap();
        let target = main.clone();
        let s = random_state(&mut rng, &main.cfg);
        let q = main.q_values(&s).unwrap();
        let mut replay = PrioritizedReplay::new(4, 0.6).unwrap();
        replay.push(Transition { s: s.clone(), a: 2, r: q[2], s_next: s.clone(), terminal: true });
        let cfg = AgentConfig { batch: 1, ..Default::default() };
        let before = main.weights.clone();
        let mut opt = Sgd::new(main.num_params());
        let out = learn_step(&mut main, &target, &mut replay, &mut opt, &cfg, 0.4, &mut rng).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(main.weights, before);
        assert_eq!(replay.priority(0), cfg.priority_floor);
    }

    #[test]
    fn epsilon_schedule() {
        let cfg = AgentConfig::default();
        assert_eq!(cfg.epsilon(0, 100), 1.0);
        assert!((cfg.epsilon(60, 100) - 0.05).abs() < 1e-12);
        assert!((cfg.epsilon(99, 100) - 0.05).abs() < 1e-12);
        assert!(cfg.epsilon(30, 100) < 1.0 && cfg.epsilon(30, 100) > 0.05);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = QNetwork::new(tiny(), &mut rng).unwrap();
        let path = std::env::temp_dir().join(format!("lensmimo-qnet-{}.json", std::process::id()));
        net.save(&path).unwrap();
        assert_eq!(QNetwork::load(&path).unwrap(), net);
        std::fs::remove_file(&path).unwrap();
    }
}
