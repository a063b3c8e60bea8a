//! Beamspace channel generation for a lens-array base station.
//!
//! Each user's spatial channel is one LoS ray plus `l_paths` NLoS rays,
//! `g_k = sum_l rho_l a(phi_l)`, and the beamspace channel is `h_k = U g_k`
//! where the rows of `U` are the conjugated steering vectors of the `M_s`
//! orthogonal DFT directions.
//!
//! Random draws for one channel happen in a fixed order: for each user, the
//! LoS gain (re, im), the LoS angle, then gain and angle of each NLoS ray.
//! Datasets give sample `n` its own ChaCha stream (`set_stream(n)`) on the
//! dataset seed, so any sample can be regenerated independently.

use std::f64::consts::PI;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::{CMatrix, C64, ZERO};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub m_s: usize,
    pub k: usize,
    pub l_paths: usize,
    pub los_gain_var: f64,
    pub nlos_gain_var: f64,
    pub angle_range: (f64, f64),
    pub seed: u64,
}

impl ChannelParams {
    /// Ray statistics used throughout the experiments: one LoS ray with
    /// CN(0, 1) gain, three NLoS rays with CN(0, 0.1), angles uniform on [-1, 1].
    pub fn standard(m_s: usize, k: usize, seed: u64) -> Self {
        ChannelParams {
            m_s,
            k,
            l_paths: 3,
            los_gain_var: 1.0,
            nlos_gain_var: 0.1,
            angle_range: (-1.0, 1.0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.m_s < self.k {
            return Err(Error::InvalidConfig(format!("need M_s >= K >= 1, got M_s={} K={}", self.m_s, self.k)));
        }
        if !(self.los_gain_var > 0.0 && self.nlos_gain_var > 0.0) {
            return Err(Error::InvalidConfig("gain variances must be positive".into()));
        }
        if !(self.angle_range.0 < self.angle_range.1) {
            return Err(Error::InvalidConfig(format!("empty angle range {:?}", self.angle_range)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub gain: C64,
    pub angle: f64,
    pub is_los: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamspaceChannel {
    /// `M_s x K` beamspace channel; column `k` is user `k`, row `m` is beam `m`.
    pub h: CMatrix,
    /// Per-user rays, LoS first. Empty when the channel was built from a bare matrix.
    pub rays: Vec<Vec<Ray>>,
}

impl BeamspaceChannel {
    /// Wraps a bare matrix; angle-error injection is unavailable on such channels.
    pub fn from_matrix(h: CMatrix) -> Self {
        BeamspaceChannel { h, rays: Vec::new() }
    }

    pub fn m_s(&self) -> usize {
        self.h.rows()
    }

    pub fn k(&self) -> usize {
        self.h.cols()
    }

    /// Rebuilds `H` from ray metadata.
    pub fn from_rays(m_s: usize, rays: Vec<Vec<Ray>>) -> Self {
        let u = dft_matrix(m_s);
        let columns: Vec<Vec<C64>> = rays
            .iter()
            .map(|user| {
                let mut g = vec![ZERO; m_s];
                for ray in user {
                    for (gi, a) in g.iter_mut().zip(steering_vector(ray.angle, m_s)) {
                        *gi += ray.gain * a;
                    }
                }
                u.mul_vec(&g).expect("steering vector length matches M_s")
            })
            .collect();
        BeamspaceChannel { h: CMatrix::from_columns(m_s, &columns), rays }
    }
}

/// Array steering vector `a(phi)` with entries `exp(-j 2 pi phi i) / sqrt(M_s)`
/// for element positions `i = n - (M_s - 1)/2`.
pub fn steering_vector(phi: f64, m_s: usize) -> Vec<C64> {
    let norm = 1.0 / (m_s as f64).sqrt();
    let centre = (m_s as f64 - 1.0) / 2.0;
    (0..m_s)
        .map(|n| {
            let i = n as f64 - centre;
            C64::from_polar(norm, -2.0 * PI * phi * i)
        })
        .collect()
}

/// Normalised direction of DFT beam `m` (0-based): `(m - (M_s - 1)/2) / M_s`.
pub fn beam_direction(m: usize, m_s: usize) -> f64 {
    (m as f64 - (m_s as f64 - 1.0) / 2.0) / m_s as f64
}

/// The `M_s x M_s` DFT matrix whose row `m` is `a(phi_m)^H`. Unitary.
pub fn dft_matrix(m_s: usize) -> CMatrix {
    let mut u = CMatrix::zeros(m_s, m_s);
    for m in 0..m_s {
        let a = steering_vector(beam_direction(m, m_s), m_s);
        for (i, z) in a.into_iter().enumerate() {
            u[(m, i)] = z.conj();
        }
    }
    u
}

fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> C64 {
    let n = Normal::new(0.0, (var / 2.0).sqrt()).expect("positive variance");
    C64::new(n.sample(rng), n.sample(rng))
}

pub fn sample_channel<R: Rng + ?Sized>(params: &ChannelParams, rng: &mut R) -> Result<BeamspaceChannel> {
    params.validate()?;
    let (lo, hi) = params.angle_range;
    let rays = (0..params.k)
        .map(|_| {
            let mut user = Vec::with_capacity(params.l_paths + 1);
            let gain = complex_gaussian(rng, params.los_gain_var);
            user.push(Ray { gain, angle: rng.random_range(lo..hi), is_los: true });
            for _ in 0..params.l_paths {
                let gain = complex_gaussian(rng, params.nlos_gain_var);
                user.push(Ray { gain, angle: rng.random_range(lo..hi), is_los: false });
            }
            user
        })
        .collect();
    Ok(BeamspaceChannel::from_rays(params.m_s, rays))
}

/// RNG for sample `index` of a dataset drawn with `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws `count` channels, sample `n` from stream `n` of `params.seed`.
pub fn generate_dataset(params: &ChannelParams, count: usize) -> Result<Vec<BeamspaceChannel>> {
    (0..count).map(|n| sample_channel(params, &mut sample_rng(params.seed, n as u64))).collect()
}

/// Which rays receive the angular error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorTarget {
    #[default]
    LosOnly,
    AllRays,
}

/// Perturbs ray angles by `+-err_fraction / M_s` (fraction of the beam
/// spacing), sign uniform per ray, and regenerates `H`.
pub fn inject_angle_error<R: Rng + ?Sized>(
    ch: &BeamspaceChannel,
    err_fraction: f64,
    target: ErrorTarget,
    rng: &mut R,
) -> Result<BeamspaceChannel> {
    if ch.rays.is_empty() {
        return Err(Error::MissingRays);
    }
    if !(err_fraction >= 0.0) {
        return Err(Error::InvalidConfig(format!("angle error fraction {err_fraction}")));
    }
    if err_fraction == 0.0 {
        return Ok(ch.clone());
    }
    let delta = err_fraction / ch.m_s() as f64;
    let rays = ch
        .rays
        .iter()
        .map(|user| {
            user.iter()
                .map(|ray| {
                    let hit = ray.is_los || target == ErrorTarget::AllRays;
                    if !hit {
                        return *ray;
                    }
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    Ray { angle: ray.angle + sign * delta, ..*ray }
                })
                .collect()
        })
        .collect();
    Ok(BeamspaceChannel::from_rays(ch.m_s(), rays))
}

/// On-disk channel dataset. Only rays are stored; `H` is regenerated on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelDataset {
    pub format: String,
    pub version: u32,
    pub m_s: usize,
    pub k: usize,
    pub l_paths: usize,
    pub seed: u64,
    pub params: ChannelParams,
    pub samples: Vec<Vec<Vec<Ray>>>,
}

pub const DATASET_FORMAT: &str = "lensmimo-channels";
pub const DATASET_VERSION: u32 = 1;

impl ChannelDataset {
    pub fn new(params: &ChannelParams, channels: &[BeamspaceChannel]) -> Self {
        ChannelDataset {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            m_s: params.m_s,
            k: params.k,
            l_paths: params.l_paths,
            seed: params.seed,
            params: params.clone(),
            samples: channels.iter().map(|c| c.rays.clone()).collect(),
        }
    }

    pub fn channels(&self) -> Vec<BeamspaceChannel> {
        self.samples.iter().map(|rays| BeamspaceChannel::from_rays(self.m_s, rays.clone())).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let w = BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = BufReader::new(std::fs::File::open(path)?);
        let ds: ChannelDataset = serde_json::from_reader(r)?;
        if ds.format != DATASET_FORMAT || ds.version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset {} v{}", ds.format, ds.version)));
        }
        if ds.samples.iter().any(|s| s.len() != ds.k || s.iter().any(|u| u.len() != ds.l_paths + 1)) {
            return Err(Error::Format("ray lists do not match header".into()));
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::norm_sqr;

    #[test]
    fn steering_vector_small_cases() {
        let a = steering_vector(0.7, 1);
        assert_eq!(a.len(), 1);
        assert!((a[0] - C64::new(1.0, 0.0)).norm() < 1e-15);

        let a = steering_vector(0.0, 2);
        for z in &a {
            assert!((z - C64::new(1.0 / 2f64.sqrt(), 0.0)).norm() < 1e-15);
        }

        let a = steering_vector(0.25, 4);
        for (n, z) in a.iter().enumerate() {
            let i = n as f64 - 1.5;
            let expect = C64::new(0.0, -PI * i / 2.0).exp() * 0.5;
            assert!((z - expect).norm() < 1e-15);
        }
        assert!((norm_sqr(&a) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn beam_directions() {
        let dirs: Vec<f64> = (0..4).map(|m| beam_direction(m, 4)).collect();
        assert_eq!(dirs, vec![-0.375, -0.125, 0.125, 0.375]);
        assert_eq!(dft_matrix(1)[(0, 0)], C64::new(1.0, 0.0));
    }

    #[test]
    fn dft_is_unitary() {
        let u = dft_matrix(8);
        let g = u.adjoint_mul(&u).unwrap();
        assert!((&g - &CMatrix::identity(8)).frobenius_norm() < 1e-12);
    }

    #[test]
    fn on_grid_los_maps_to_basis_column() {
        let m_s = 16;
        let m = 5;
        let rays = vec![vec![Ray { gain: C64::new(1.0, 0.0), angle: beam_direction(m, m_s), is_los: true }]];
        let ch = BeamspaceChannel::from_rays(m_s, rays);
        for r in 0..m_s {
            let expect = if r == m { 1.0 } else { 0.0 };
            assert!((ch.h[(r, 0)] - C64::new(expect, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_norm_preserving() {
        let p = ChannelParams::standard(16, 2, 99);
        let a = sample_channel(&p, &mut sample_rng(p.seed, 0)).unwrap();
        let b = sample_channel(&p, &mut sample_rng(p.seed, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rays.len(), 2);
        assert!(a.rays.iter().all(|u| u.len() == 4 && u[0].is_los && u[1..].iter().all(|r| !r.is_los)));
        for (k, user) in a.rays.iter().enumerate() {
            let mut g = vec![ZERO; 16];
            for ray in user {
                for (gi, s) in g.iter_mut().zip(steering_vector(ray.angle, 16)) {
                    *gi += ray.gain * s;
                }
            }
            assert!((norm_sqr(&g) - a.h.col_norm_sqr(k)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_error_is_identity() {
        let p = ChannelParams::standard(16, 3, 1);
        let ch = sample_channel(&p, &mut sample_rng(1, 0)).unwrap();
        let mut rng = sample_rng(2, 0);
        let same = inject_angle_error(&ch, 0.0, ErrorTarget::LosOnly, &mut rng).unwrap();
        assert_eq!(same.h, ch.h);
    }

    #[test]
    fn error_moves_only_los_by_exact_amount() {
        let p = ChannelParams::standard(256, 4, 5);
        let ch = sample_channel(&p, &mut sample_rng(5, 0)).unwrap();
        let mut rng = sample_rng(6, 0);
        let noisy = inject_angle_error(&ch, 0.04, ErrorTarget::LosOnly, &mut rng).unwrap();
        for (u0, u1) in ch.rays.iter().zip(&noisy.rays) {
            assert!(((u1[0].angle - u0[0].angle).abs() - 0.04 / 256.0).abs() < 1e-15);
            assert_eq!(u1[0].gain, u0[0].gain);
            assert_eq!(&u1[1..], &u0[1..]);
        }
    }

    #[test]
    fn error_needs_rays() {
        let ch = BeamspaceChannel::from_matrix(CMatrix::identity(2));
        let mut rng = sample_rng(0, 0);
        assert!(matches!(inject_angle_error(&ch, 0.1, ErrorTarget::LosOnly, &mut rng), Err(Error::MissingRays)));
    }

    #[test]
    fn params_validation() {
        assert!(ChannelParams::standard(2, 3, 0).validate().is_err());
        assert!(ChannelParams::standard(4, 0, 0).validate().is_err());
        assert!(ChannelParams { nlos_gain_var: 0.0, ..ChannelParams::standard(4, 2, 0) }.validate().is_err());
    }
}
