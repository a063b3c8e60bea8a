//! The compared schemes. Each one turns a (possibly mis-estimated) channel
//! into a beam selection and a precoder; rates are then measured on the true
//! channel.

use std::path::{Path, PathBuf};

use lensmimo::agent::{greedy_selection, QNetwork};
use lensmimo::baseline::{
    exhaustive_select, mm_select, ms_select, normalize_power, sum_rate_equivalent, wmmse_solve, zf_precoder, Precoder, WmmseOptions,
};
use lensmimo::channel::sample_rng;
use lensmimo::env::EnvConfig;
use lensmimo::unfolding::{unfold_forward, UnfoldingParams};
use lensmimo::CMatrix;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SolverConfig, SweepVariable, SystemConfig};
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    JointNn,
    MmWmmse,
    MsZf,
    FdZf,
    FdWmmse,
    RandomSelect,
    ExhaustiveOracle,
}

impl Scheme {
    pub fn id(&self) -> &'static str {
        match self {
            Scheme::JointNn => "joint-nn",
            Scheme::MmWmmse => "mm-wmmse",
            Scheme::MsZf => "ms-zf",
            Scheme::FdZf => "fd-zf",
            Scheme::FdWmmse => "fd-wmmse",
            Scheme::RandomSelect => "random-select",
            Scheme::ExhaustiveOracle => "exhaustive-oracle",
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, Scheme::JointNn)
    }

    /// Whether the precoder is WMMSE or its unfolded approximation.
    pub fn is_wmmse_based(&self) -> bool {
        matches!(self, Scheme::JointNn | Scheme::MmWmmse | Scheme::FdWmmse | Scheme::RandomSelect | Scheme::ExhaustiveOracle)
    }

    pub fn selects_beams(&self) -> bool {
        !matches!(self, Scheme::FdZf | Scheme::FdWmmse)
    }

    /// Asymptotic cost per instance (selection + precoding, `M_s >> N_RF >= K`).
    /// `I_w`: WMMSE iterations, `I_n`: unfolding layers, `C`: conv channels.
    pub fn complexity(&self) -> &'static str {
        match self {
            Scheme::JointNn => "O(sum_l Q_l^2 S_l^2 C_{l-1} C_l + I_n (K^2 N_RF^2 + K N_RF^2.37))",
            Scheme::MmWmmse => "O(M_s log M_s + I_w K N_RF^3)",
            Scheme::MsZf => "O(N_RF K M_s^2)",
            Scheme::FdZf => "O(M_s K^2)",
            Scheme::FdWmmse => "O(I_w K M_s^3)",
            Scheme::RandomSelect => "O(N_RF + I_w K N_RF^3)",
            Scheme::ExhaustiveOracle => "O(C(M_s, N_RF) I_w K N_RF^3)",
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

/// Trained agent and unfolding network for one system size.
#[derive(Debug, Clone)]
pub struct LearnedModel {
    pub net: QNetwork,
    pub unfolding: UnfoldingParams,
    pub mask_invalid: bool,
}

pub const AGENT_FILE: &str = "agent.json";
pub const UNFOLD_FILE: &str = "unfold.bin";

impl LearnedModel {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        self.net.save(&dir.join(AGENT_FILE))?;
        self.unfolding.save(&dir.join(UNFOLD_FILE))?;
        Ok(())
    }

    /// Loads from `dir`, checking the dimensions against `sys`.
    pub fn load(dir: &Path, sys: &SystemConfig, mask_invalid: bool) -> Result<Option<LearnedModel>> {
        let (a, u) = (dir.join(AGENT_FILE), dir.join(UNFOLD_FILE));
        if !a.exists() || !u.exists() {
            return Ok(None);
        }
        let net = QNetwork::load(&a)?;
        let unfolding = UnfoldingParams::load(&u)?;
        let fits = net.cfg.m_bar == sys.m_bar && net.cfg.k == sys.k && unfolding.n_rf == sys.n_rf && unfolding.k == sys.k;
        Ok(fits.then_some(LearnedModel { net, unfolding, mask_invalid }))
    }
}

/// `checkpoint_dir`, defaulting to `<output_dir>/checkpoints`.
pub fn checkpoint_root(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint_dir.clone().unwrap_or_else(|| cfg.output_dir.join("checkpoints"))
}

/// Checkpoint directory for one sweep point: `<dir>/<variable>-<value>` if it
/// holds a matching model, else `<dir>` itself.
pub fn find_model(cfg: &RunConfig, variable: SweepVariable, value: f64, sys: &SystemConfig) -> Result<LearnedModel> {
    let dir = checkpoint_root(cfg);
    let point: PathBuf = dir.join(format!("{}-{}", variable.label(), value));
    for candidate in [&point, &dir] {
        if let Some(m) = LearnedModel::load(candidate, sys, cfg.agent.mask_invalid)? {
            return Ok(m);
        }
    }
    Err(HarnessError::MissingCheckpoint { scheme: Scheme::JointNn.id().into(), path: point })
}

/// What a scheme decided for one channel. `beams` is `None` for fully digital
/// precoding (all beams used).
#[derive(Debug, Clone)]
pub struct Decision {
    pub beams: Option<Vec<usize>>,
    pub precoder: Precoder,
}

impl Decision {
    /// Equivalent channel of `h` under this decision.
    pub fn equivalent(&self, h: &CMatrix) -> CMatrix {
        match &self.beams {
            Some(b) => h.select_rows(b),
            None => h.clone(),
        }
    }

    /// Sum-rate (nats) on the true channel `h`.
    pub fn rate(&self, h: &CMatrix, sigma2: f64) -> Result<f64> {
        Ok(sum_rate_equivalent(&self.equivalent(h), &self.precoder.p, sigma2)?)
    }
}

pub struct SchemeContext<'a> {
    pub sys: SystemConfig,
    pub env: EnvConfig,
    pub solvers: SolverConfig,
    pub model: Option<&'a LearnedModel>,
}

/// Iterative WMMSE, rescaled to the full power budget (the multiplier search
/// can stop marginally inside it; scaling up never lowers the sum-rate).
fn wmmse(hbar: &CMatrix, ctx: &SchemeContext) -> Result<Precoder> {
    Ok(wmmse_full_power(hbar, &ctx.solvers, ctx.sys.ps, ctx.sys.sigma2())?)
}

pub fn wmmse_full_power(hbar: &CMatrix, solvers: &SolverConfig, ps: f64, sigma2: f64) -> lensmimo::Result<Precoder> {
    let opts = WmmseOptions { max_iters: solvers.wmmse_iters, tol: solvers.wmmse_tol };
    let p = wmmse_solve(hbar, ps, sigma2, opts)?.precoder;
    normalize_power(&p.p, ps)
}

/// Runs `scheme` on the channel estimate `h`. `Ok(None)` marks an instance
/// the scheme cannot serve (a rank-deficient selection under ZF, or a learned
/// policy that repeated a beam); such instances score zero.
pub fn decide(scheme: Scheme, ctx: &SchemeContext, h: &CMatrix, index: u64) -> Result<Option<Decision>> {
    let (ps, s2, n_rf) = (ctx.sys.ps, ctx.sys.sigma2(), ctx.sys.n_rf);
    let selected = |beams: Vec<usize>, p: Precoder| Some(Decision { beams: Some(beams), precoder: p });
    let out = match scheme {
        Scheme::FdZf => match zf_precoder(h, ps) {
            Ok(p) => Some(Decision { beams: None, precoder: p }),
            Err(lensmimo::Error::RankDeficient(_)) => None,
            Err(e) => return Err(e.into()),
        },
        Scheme::FdWmmse => Some(Decision { beams: None, precoder: wmmse(h, ctx)? }),
        Scheme::MmWmmse => {
            let sel = mm_select(h, n_rf)?;
            let p = wmmse(&h.select_rows(&sel.beams), ctx)?;
            selected(sel.beams, p)
        }
        Scheme::MsZf => {
            let sel = ms_select(h, n_rf, s2)?;
            match zf_precoder(&h.select_rows(&sel.beams), ps) {
                Ok(p) => selected(sel.beams, p),
                Err(lensmimo::Error::RankDeficient(_)) => None,
                Err(e) => return Err(e.into()),
            }
        }
        Scheme::RandomSelect => {
            let mut rng = sample_rng(ctx.solvers.random_seed, index);
            let mut beams = sample(&mut rng, h.rows(), n_rf).into_vec();
            beams.sort_unstable();
            let p = wmmse(&h.select_rows(&beams), ctx)?;
            selected(beams, p)
        }
        Scheme::ExhaustiveOracle => {
            let (sel, _) = exhaustive_select(h, n_rf, s2, ctx.solvers.exhaustive_cap as u128, |hb| wmmse_full_power(hb, &ctx.solvers, ps, s2))?;
            let p = wmmse(&h.select_rows(&sel.beams), ctx)?;
            selected(sel.beams, p)
        }
        Scheme::JointNn => {
            let model = ctx.model.ok_or_else(|| HarnessError::MissingCheckpoint {
                scheme: scheme.id().into(),
                path: PathBuf::from("<none loaded>"),
            })?;
            let state = greedy_selection(&ctx.env, &model.net, h, model.mask_invalid)?;
            if !state.is_valid() {
                None
            } else {
                let (p, _) = unfold_forward(&model.unfolding, &state.equivalent_channel(), ps, s2)?;
                selected(state.original_selection().beams, p)
            }
        }
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use lensmimo::channel::{sample_channel, ChannelParams};

    fn ctx(sys: SystemConfig) -> SchemeContext<'static> {
        let mut env = EnvConfig::new(sys.m_s, sys.n_rf, sys.k, sys.ps, sys.sigma2());
        env.m_bar = sys.m_bar;
        SchemeContext { sys, env, solvers: SolverConfig::default(), model: None }
    }

    #[test]
    fn serde_ids_match() {
        for s in [Scheme::JointNn, Scheme::MmWmmse, Scheme::MsZf, Scheme::FdZf, Scheme::FdWmmse, Scheme::RandomSelect, Scheme::ExhaustiveOracle] {
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.id()));
        }
    }

    #[test]
    fn fd_zf_is_passthrough() {
        let sys = SystemConfig { m_s: 16, m_bar: 8, k: 4, n_rf: 4, snr_db: 20.0, ps: 1.0 };
        let h = sample_channel(&ChannelParams::standard(16, 4, 5), &mut sample_rng(5, 0)).unwrap().h;
        let d = decide(Scheme::FdZf, &ctx(sys), &h, 0).unwrap().unwrap();
        let direct = zf_precoder(&h, 1.0).unwrap();
        let r = sum_rate_equivalent(&h, &direct.p, sys.sigma2()).unwrap();
        assert_eq!(d.rate(&h, sys.sigma2()).unwrap(), r);
    }

    #[test]
    fn selectors_respect_constraints() {
        let sys = SystemConfig { m_s: 16, m_bar: 8, k: 4, n_rf: 4, snr_db: 30.0, ps: 1.0 };
        let c = ctx(sys);
        let h = sample_channel(&ChannelParams::standard(16, 4, 6), &mut sample_rng(6, 1)).unwrap().h;
        for s in [Scheme::MmWmmse, Scheme::RandomSelect, Scheme::ExhaustiveOracle] {
            let d = decide(s, &c, &h, 3).unwrap().unwrap();
            let mut b = d.beams.clone().unwrap();
            b.sort_unstable();
            b.dedup();
            assert_eq!(b.len(), 4, "{s}");
            assert!((d.precoder.power() - 1.0).abs() <= 1e-9, "{s}");
        }
        assert!(matches!(decide(Scheme::JointNn, &c, &h, 0), Err(HarnessError::MissingCheckpoint { .. })));
    }
}
