//! Unfolded WMMSE precoding network.
//!
//! Each of the first `L - 1` layers runs the WMMSE receive/weight updates and
//! replaces the precoder's matrix inverse by a trainable surrogate
//!
//! ```text
//! A_k = sum_j w_j |u_j|^2 h_j h_j^H + lambda_k I
//! p_k = (A_k^dr X_k + A_k Y_k + Z_k) w_k conj(u_k) h_k + O_k
//! ```
//!
//! where `A^dr` is [`diag_reciprocal`]. The last layer applies the exact update
//! `p_k = A_k^-1 w_k conj(u_k) h_k` with a direct solve. Every layer output is
//! projected onto the power ball, and the final output is scaled to full power.
//!
//! Gradients use the convention `G = dL/dRe + i dL/dIm` for every complex
//! quantity, so a first-order change is `dL = Re tr(G^H dZ)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::{sum_rate_equivalent, user_rates, Precoder};
use crate::numerics::{diag_reciprocal, dot_h, CMatrix, Lu, C64, ZERO};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// `X = I`, `Y = Z = 0`, `O = 0`, `lambda = sigma^2 K / Ps`.
    DiagonalWmmse,
}

/// Trainable tensors of one layer, indexed by user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub x: Vec<CMatrix>,
    pub y: Vec<CMatrix>,
    pub z: Vec<CMatrix>,
    pub o: Vec<Vec<C64>>,
    pub lambda: Vec<f64>,
}

/// Parameters of an `L`-layer network. The last layer only uses `lambda`;
/// its `X, Y, Z, O` are kept so every layer has the same layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnfoldingParams {
    pub n_rf: usize,
    pub k: usize,
    pub seed: u64,
    pub init: InitScheme,
    pub layers: Vec<LayerParams>,
}

impl UnfoldingParams {
    pub fn new(num_layers: usize, n_rf: usize, k: usize, ps: f64, sigma2: f64, seed: u64) -> Result<Self> {
        if num_layers == 0 || n_rf == 0 || k == 0 {
            return Err(Error::InvalidConfig(format!("L={num_layers}, N_RF={n_rf}, K={k}")));
        }
        if !(ps > 0.0) || !(sigma2 > 0.0) {
            return Err(Error::InvalidConfig(format!("Ps={ps}, sigma2={sigma2}")));
        }
        let lambda0 = sigma2 * k as f64 / ps;
        let layer = LayerParams {
            x: vec![CMatrix::identity(n_rf); k],
            y: vec![CMatrix::zeros(n_rf, n_rf); k],
            z: vec![CMatrix::zeros(n_rf, n_rf); k],
            o: vec![vec![ZERO; n_rf]; k],
            lambda: vec![lambda0; k],
        };
        Ok(UnfoldingParams { n_rf, k, seed, init: InitScheme::DiagonalWmmse, layers: vec![layer; num_layers] })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.map_values(|_| 0.0);
        out
    }

    /// Number of real scalars in [`Self::to_vec`].
    pub fn len(&self) -> usize {
        let per_user = 2 * (3 * self.n_rf * self.n_rf + self.n_rf) + 1;
        self.layers.len() * self.k * per_user
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattens to reals: per layer, per user: `X, Y, Z` row-major then `O`,
    /// each complex entry as `(re, im)`, then `lambda`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for layer in &self.layers {
            for k in 0..self.k {
                for m in [&layer.x[k], &layer.y[k], &layer.z[k]] {
                    for z in m.as_slice() {
                        out.push(z.re);
                        out.push(z.im);
                    }
                }
                for z in &layer.o[k] {
                    out.push(z.re);
                    out.push(z.im);
                }
                out.push(layer.lambda[k]);
            }
        }
        out
    }

    pub fn from_vec(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.len() {
            return Err(Error::ShapeMismatch(format!("{} values for {} parameters", values.len(), self.len())));
        }
        let mut out = self.clone();
        let mut it = values.iter().copied();
        out.map_values(|_| it.next().expect("length checked"));
        Ok(out)
    }

    /// Applies `f` to every real scalar in [`Self::to_vec`] order.
    fn map_values(&mut self, mut f: impl FnMut(f64) -> f64) {
        for layer in &mut self.layers {
            for k in 0..self.k {
                for m in [&mut layer.x[k], &mut layer.y[k], &mut layer.z[k]] {
                    for z in m.as_mut_slice() {
                        z.re = f(z.re);
                        z.im = f(z.im);
                    }
                }
                for z in &mut layer.o[k] {
                    z.re = f(z.re);
                    z.im = f(z.im);
                }
                layer.lambda[k] = f(layer.lambda[k]);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|x| x.is_finite())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for v in [self.num_layers() as u64, self.n_rf as u64, self.k as u64, self.seed] {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&[self.init as u8])?;
        for v in self.to_vec() {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut input = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not an unfolding parameter file".into()));
        }
        let mut b4 = [0u8; 4];
        input.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut header = [0u64; 4];
        let mut b8 = [0u8; 8];
        for h in &mut header {
            input.read_exact(&mut b8)?;
            *h = u64::from_le_bytes(b8);
        }
        let mut init = [0u8; 1];
        input.read_exact(&mut init)?;
        if init[0] != InitScheme::DiagonalWmmse as u8 {
            return Err(Error::Format(format!("unknown init scheme {}", init[0])));
        }
        let [layers, n_rf, k, seed] = header;
        let template = UnfoldingParams::new(layers as usize, n_rf as usize, k as usize, 1.0, 1.0, seed)?;
        let mut values = Vec::with_capacity(template.len());
        for _ in 0..template.len() {
            input.read_exact(&mut b8)?;
            values.push(f64::from_le_bytes(b8));
        }
        if input.read(&mut init)? != 0 {
            return Err(Error::Format("trailing bytes after parameters".into()));
        }
        template.from_vec(&values)
    }
}

const MAGIC: &[u8; 4] = b"LMUF";
const FORMAT_VERSION: u32 = 1;

/// Operation classes recorded per layer, used to audit layer complexity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Elementwise,
    DiagReciprocal,
    Solve,
    Projection,
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub p_in: CMatrix,
    /// `H^H P_in`.
    pub gains: CMatrix,
    /// Total received power plus noise per user.
    pub total: Vec<f64>,
    pub u: Vec<C64>,
    pub w: Vec<f64>,
    pub a: Vec<CMatrix>,
    /// `A_k^dr` (surrogate layers only).
    pub d: Vec<CMatrix>,
    /// Columns `w_k conj(u_k) h_k`.
    pub v: CMatrix,
    /// Layer output before projection.
    pub p_raw: CMatrix,
    pub p_out: CMatrix,
    pub exact: bool,
    pub ops: Vec<OpKind>,
}

#[derive(Debug, Clone)]
pub struct UnfoldingForwardTrace {
    pub layers: Vec<LayerTrace>,
    /// Projected output of the last layer, before scaling to full power.
    pub p_projected: CMatrix,
    pub p_final: CMatrix,
}

/// Eq.-style projection onto `Tr(P P^H) <= ps`.
pub fn project_power(p_raw: &CMatrix, ps: f64) -> CMatrix {
    let tr = p_raw.frobenius_norm_sqr();
    if tr <= ps {
        p_raw.clone()
    } else {
        p_raw.scale_real(ps.sqrt() / tr.sqrt())
    }
}

/// Backward of `P = sqrt(ps) Q / ||Q||`.
fn scale_to_norm_backward(q: &CMatrix, g_out: &CMatrix, ps: f64) -> CMatrix {
    let n = q.frobenius_norm();
    if n == 0.0 {
        return CMatrix::zeros(q.rows(), q.cols());
    }
    let s = ps.sqrt();
    let inner = g_out.real_inner(q);
    CMatrix::from_fn(q.rows(), q.cols(), |r, c| g_out[(r, c)] * (s / n) - q[(r, c)] * (s * inner / (n * n * n)))
}

fn project_power_backward(q: &CMatrix, g_out: &CMatrix, ps: f64) -> CMatrix {
    if q.frobenius_norm_sqr() <= ps {
        g_out.clone()
    } else {
        scale_to_norm_backward(q, g_out, ps)
    }
}

fn scale_to_norm(p: &CMatrix, ps: f64) -> CMatrix {
    let n = p.frobenius_norm();
    if n == 0.0 {
        p.clone()
    } else {
        p.scale_real(ps.sqrt() / n)
    }
}

fn check_shapes(params: &UnfoldingParams, hbar: &CMatrix) -> Result<()> {
    if hbar.shape() != (params.n_rf, params.k) {
        return Err(Error::ShapeMismatch(format!(
            "channel {:?} for a network built for ({}, {})",
            hbar.shape(),
            params.n_rf,
            params.k
        )));
    }
    Ok(())
}

pub fn unfold_forward(
    params: &UnfoldingParams,
    hbar: &CMatrix,
    ps: f64,
    sigma2: f64,
) -> Result<(Precoder, UnfoldingForwardTrace)> {
    check_shapes(params, hbar)?;
    let (n, k) = hbar.shape();
    // normalised matched filter; a zero channel starts from a zero precoder
    let mut p = scale_to_norm(hbar, ps);
    let num_layers = params.num_layers();
    let mut layers = Vec::with_capacity(num_layers);
    for (l, lp) in params.layers.iter().enumerate() {
        let exact = l + 1 == num_layers;
        let mut ops = vec![OpKind::MatMul];
        let gains = hbar.adjoint_mul(&p)?;
        let total: Vec<f64> = (0..k).map(|r| (0..k).map(|i| gains[(r, i)].norm_sqr()).sum::<f64>() + sigma2).collect();
        let u: Vec<C64> = (0..k).map(|r| gains[(r, r)].conj() / total[r]).collect();
        let w: Vec<f64> = (0..k).map(|r| total[r] / (total[r] - gains[(r, r)].norm_sqr())).collect();
        ops.push(OpKind::Elementwise);
        let b = crate::baseline::weighted_covariance(hbar, &u, &w);
        let v = crate::baseline::mmse_targets(hbar, &u, &w);
        ops.push(OpKind::MatMul);
        let mut a_all = Vec::with_capacity(k);
        let mut d_all = Vec::with_capacity(k);
        let mut p_raw = CMatrix::zeros(n, k);
        for user in 0..k {
            let mut a = b.clone();
            for i in 0..n {
                a[(i, i)] += lp.lambda[user];
            }
            let vk = v.col(user);
            if exact {
                p_raw.set_col(user, &Lu::factor(&a)?.solve_vec(&vk)?);
            } else {
                let d = diag_reciprocal(&a)?;
                let m = &(&(&d * &lp.x[user]) + &(&a * &lp.y[user])) + &lp.z[user];
                let mut q = m.mul_vec(&vk)?;
                for (qi, oi) in q.iter_mut().zip(&lp.o[user]) {
                    *qi += oi;
                }
                p_raw.set_col(user, &q);
                d_all.push(d);
            }
            a_all.push(a);
        }
        if exact {
            ops.push(OpKind::Solve);
        } else {
            ops.extend([OpKind::DiagReciprocal, OpKind::MatMul]);
        }
        let p_out = project_power(&p_raw, ps);
        ops.push(OpKind::Projection);
        layers.push(LayerTrace {
            p_in: p,
            gains,
            total,
            u,
            w,
            a: a_all,
            d: d_all,
            v,
            p_raw,
            p_out: p_out.clone(),
            exact,
            ops,
        });
        p = p_out;
    }
    let p_final = scale_to_norm(&p, ps);
    if !p_final.is_finite() {
        return Err(Error::NonFinite("unfolding output".into()));
    }
    let precoder = Precoder { p: p_final.clone(), power_budget: ps };
    Ok((precoder, UnfoldingForwardTrace { layers, p_projected: p, p_final }))
}

/// Negative mean sum-rate (nats) over a batch of `(Hbar, P)` pairs.
pub fn unfold_loss(batch: &[(CMatrix, Precoder)], sigma2: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let mut total = 0.0;
    for (hbar, p) in batch {
        total += sum_rate_equivalent(hbar, &p.p, sigma2)?;
    }
    Ok(-total / batch.len() as f64)
}

/// `G = dR/dP` of the sum-rate with respect to the precoder, times `upstream`.
pub fn sum_rate_grad(hbar: &CMatrix, p: &CMatrix, sigma2: f64, upstream: f64) -> Result<CMatrix> {
    let gains = hbar.adjoint_mul(p)?;
    let k = hbar.cols();
    let mut g = CMatrix::zeros(k, k);
    for r in 0..k {
        let total: f64 = (0..k).map(|i| gains[(r, i)].norm_sqr()).sum::<f64>() + sigma2;
        let interference = total - gains[(r, r)].norm_sqr();
        for i in 0..k {
            let coef = if i == r { 1.0 / total } else { 1.0 / total - 1.0 / interference };
            g[(r, i)] = gains[(r, i)] * (2.0 * coef * upstream);
        }
    }
    hbar.matmul(&g)
}

/// Reverse-mode gradient of `upstream * sum_rate(Hbar, P_final)` with respect
/// to every parameter, from a trace produced by [`unfold_forward`].
pub fn unfold_backward(
    params: &UnfoldingParams,
    trace: &UnfoldingForwardTrace,
    hbar: &CMatrix,
    ps: f64,
    sigma2: f64,
    upstream: f64,
) -> Result<UnfoldingParams> {
    check_shapes(params, hbar)?;
    if trace.layers.len() != params.num_layers() {
        return Err(Error::ShapeMismatch("trace does not match parameters".into()));
    }
    let (n, k) = hbar.shape();
    let mut grad = params.zeros_like();
    let g_final = sum_rate_grad(hbar, &trace.p_final, sigma2, upstream)?;
    let mut g_p = scale_to_norm_backward(&trace.p_projected, &g_final, ps);
    for (l, lt) in trace.layers.iter().enumerate().rev() {
        let lp = &params.layers[l];
        let gl = &mut grad.layers[l];
        let g_raw = project_power_backward(&lt.p_raw, &g_p, ps);
        let mut g_b = CMatrix::zeros(n, n);
        let mut g_v = CMatrix::zeros(n, k);
        for user in 0..k {
            let g_q = g_raw.col(user);
            let a = &lt.a[user];
            let mut g_a;
            if lt.exact {
                let p_k = lt.p_raw.col(user);
                let r = Lu::factor(&a.adjoint())?.solve_vec(&g_q)?;
                g_a = CMatrix::from_fn(n, n, |i, j| -(r[i] * p_k[j].conj()));
                g_v.set_col(user, &r);
            } else {
                let vk = lt.v.col(user);
                let d = &lt.d[user];
                let g_m = CMatrix::from_fn(n, n, |i, j| g_q[i] * vk[j].conj());
                let m = &(&(d * &lp.x[user]) + &(a * &lp.y[user])) + &lp.z[user];
                g_v.set_col(user, &m.adjoint_mul_vec(&g_q)?);
                gl.o[user] = g_q.clone();
                gl.x[user] = d.adjoint_mul(&g_m)?;
                gl.y[user] = a.adjoint_mul(&g_m)?;
                gl.z[user] = g_m.clone();
                g_a = g_m.matmul(&lp.y[user].adjoint())?;
                let g_d = g_m.matmul(&lp.x[user].adjoint())?;
                for i in 0..n {
                    let aii = a[(i, i)];
                    g_a[(i, i)] -= (aii * aii).inv().conj() * g_d[(i, i)];
                }
            }
            gl.lambda[user] = g_a.trace().re;
            g_b += &g_a;
        }
        // back through B = sum_j w_j |u_j|^2 h_j h_j^H and v_k = w_k conj(u_k) h_k
        let mut g_w = vec![0.0; k];
        let mut g_u = vec![ZERO; k];
        for j in 0..k {
            let h = hbar.col(j);
            let beta = dot_h(&h, &g_b.mul_vec(&h)?).re;
            g_w[j] += lt.u[j].norm_sqr() * beta;
            g_u[j] += lt.u[j] * (2.0 * lt.w[j] * beta);
            let c = dot_h(&g_v.col(j), &h);
            g_w[j] += (lt.u[j].conj() * c).re;
            g_u[j] += c * lt.w[j];
        }
        // back through u_k = conj(g_kk) / T_k and w_k = T_k / (T_k - S_k)
        let mut g_g = CMatrix::zeros(k, k);
        for r in 0..k {
            let t = lt.total[r];
            let gkk = lt.gains[(r, r)];
            let s = gkk.norm_sqr();
            let j = t - s;
            let d_t = -s / (j * j) * g_w[r] - (g_u[r] * gkk).re / (t * t);
            let d_s = t / (j * j) * g_w[r];
            for i in 0..k {
                g_g[(r, i)] += lt.gains[(r, i)] * (2.0 * d_t);
            }
            g_g[(r, r)] += gkk * (2.0 * d_s) + g_u[r].conj() / t;
        }
        g_p = hbar.matmul(&g_g)?;
    }
    Ok(grad)
}

/// Mean loss and gradient over a batch of equivalent channels.
pub fn batch_loss_and_grad(
    params: &UnfoldingParams,
    batch: &[&CMatrix],
    ps: f64,
    sigma2: f64,
) -> Result<(f64, UnfoldingParams)> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for hbar in batch {
        let (pre, trace) = unfold_forward(params, hbar, ps, sigma2)?;
        loss -= sum_rate_equivalent(hbar, &pre.p, sigma2)? * scale;
        let g = unfold_backward(params, &trace, hbar, ps, sigma2, -scale)?;
        for (acc, x) in grad.iter_mut().zip(g.to_vec()) {
            *acc += x;
        }
    }
    Ok((loss, params.from_vec(&grad)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnfoldTrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
    /// Lower bound applied to every `lambda` after each step.
    pub lambda_floor: f64,
}

impl Default for UnfoldTrainConfig {
    fn default() -> Self {
        UnfoldTrainConfig { lr: 1e-3, momentum: 0.9, batch: 50, epochs: 10, seed: 0, clip_norm: 10.0, lambda_floor: 1e-9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

/// Momentum SGD state for [`UnfoldingParams`].
#[derive(Debug, Clone)]
pub struct UnfoldOptimizer {
    velocity: Vec<f64>,
    pub steps: usize,
}

impl UnfoldOptimizer {
    pub fn new(params: &UnfoldingParams) -> Self {
        UnfoldOptimizer { velocity: vec![0.0; params.len()], steps: 0 }
    }

    pub fn step(&mut self, params: &mut UnfoldingParams, grad: &UnfoldingParams, cfg: &UnfoldTrainConfig) -> Result<()> {
        let mut g = grad.to_vec();
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Diverged(format!("gradient norm {norm}")));
        }
        if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            g.iter_mut().for_each(|x| *x *= cfg.clip_norm / norm);
        }
        let mut theta = params.to_vec();
        for ((t, v), gi) in theta.iter_mut().zip(&mut self.velocity).zip(&g) {
            *v = cfg.momentum * *v + gi;
            *t -= cfg.lr * *v;
        }
        *params = params.from_vec(&theta)?;
        for layer in &mut params.layers {
            for lam in &mut layer.lambda {
                *lam = lam.max(cfg.lambda_floor);
            }
        }
        self.steps += 1;
        Ok(())
    }
}

/// One pass over `data` in a seeded shuffled order; returns per-step losses.
pub fn unfold_epoch(
    params: &mut UnfoldingParams,
    opt: &mut UnfoldOptimizer,
    data: &[CMatrix],
    cfg: &UnfoldTrainConfig,
    rng: &mut ChaCha8Rng,
    ps: f64,
    sigma2: f64,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("empty unfolding dataset".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::InvalidConfig("batch size 0".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut losses = Vec::new();
    for chunk in order.chunks(cfg.batch) {
        let batch: Vec<&CMatrix> = chunk.iter().map(|&i| &data[i]).collect();
        let (loss, grad) = batch_loss_and_grad(params, &batch, ps, sigma2)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("loss {loss} at step {}", opt.steps)));
        }
        opt.step(params, &grad, cfg)?;
        losses.push(loss);
    }
    Ok(losses)
}

pub fn unfold_train(
    params: &UnfoldingParams,
    data: &[CMatrix],
    cfg: &UnfoldTrainConfig,
    ps: f64,
    sigma2: f64,
) -> Result<(UnfoldingParams, Vec<LossRecord>)> {
    let mut trained = params.clone();
    let mut opt = UnfoldOptimizer::new(params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        for loss in unfold_epoch(&mut trained, &mut opt, data, cfg, &mut rng, ps, sigma2)? {
            history.push(LossRecord { step: history.len(), epoch, loss });
        }
    }
    Ok((trained, history))
}

pub fn write_loss_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "step,epoch,loss")?;
    for r in history {
        writeln!(out, "{},{},{}", r.step, r.epoch, r.loss)?;
    }
    out.flush()?;
    Ok(())
}

/// Mean sum-rate (nats) of the network over a set of equivalent channels.
pub fn mean_sum_rate(params: &UnfoldingParams, data: &[CMatrix], ps: f64, sigma2: f64) -> Result<f64> {
    let mut total = 0.0;
    for h in data {
        let (p, _) = unfold_forward(params, h, ps, sigma2)?;
        total += user_rates(h, &p.p, sigma2)?.iter().sum::<f64>();
    }
    Ok(total / data.len().max(1) as f64)
}
