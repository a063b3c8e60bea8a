//! Run configuration: one TOML document per run, plus `key.path=value`
//! overrides from the command line.

use std::path::{Path, PathBuf};

use lensmimo::agent::AgentConfig;
use lensmimo::channel::{ChannelParams, ErrorTarget};
use lensmimo::env::{EnvConfig, RewardWeights};
use lensmimo::joint::JointConfig;
use lensmimo::unfolding::UnfoldTrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::schemes::Scheme;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub name: String,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub system: SystemConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub env: EnvSection,
    #[serde(default)]
    pub agent: AgentConfig,
    #[serde(default)]
    pub unfold: UnfoldSection,
    #[serde(default)]
    pub drl: DrlSection,
    #[serde(default)]
    pub joint: JointSection,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub robustness: RobustnessConfig,
    #[serde(default)]
    pub timing: TimingConfig,
    #[serde(default)]
    pub solvers: SolverConfig,
    /// Directory holding `agent.json` / `unfold.bin`; per-point checkpoints
    /// live in `<dir>/<variable>-<value>/`.
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub m_s: usize,
    pub m_bar: usize,
    pub k: usize,
    pub n_rf: usize,
    /// `Ps / sigma^2` in dB; `sigma^2` follows from `ps`.
    pub snr_db: f64,
    pub ps: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig { m_s: 32, m_bar: 16, k: 6, n_rf: 8, snr_db: 40.0, ps: 1.0 }
    }
}

impl SystemConfig {
    pub fn sigma2(&self) -> f64 {
        self.ps / 10f64.powf(self.snr_db / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.k >= 1 && self.k <= self.n_rf && self.n_rf <= self.m_bar && self.m_bar <= self.m_s;
        if !ok {
            return Err(HarnessError::Config(format!(
                "need 1 <= K <= N_RF <= M_bar <= M_s, got K={}, N_RF={}, M_bar={}, M_s={}",
                self.k, self.n_rf, self.m_bar, self.m_s
            )));
        }
        if !(self.ps > 0.0) || !self.snr_db.is_finite() {
            return Err(HarnessError::Config("ps must be positive and snr_db finite".into()));
        }
        Ok(())
    }

    /// The same system with `variable` set to `value`. `M_bar` is clamped into
    /// `[N_RF, M_s]`.
    pub fn at(&self, variable: SweepVariable, value: f64) -> Result<SystemConfig> {
        let mut s = *self;
        let count = || -> Result<usize> {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(HarnessError::Config(format!("{variable:?} grid value {value} is not a positive integer")))
            }
        };
        match variable {
            SweepVariable::None => {}
            SweepVariable::NRf => s.n_rf = count()?,
            SweepVariable::K => s.k = count()?,
            SweepVariable::MS => s.m_s = count()?,
            SweepVariable::SnrDb => s.snr_db = value,
        }
        s.m_bar = s.m_bar.clamp(s.n_rf, s.m_s.max(s.n_rf));
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_seed: u64,
    pub test_seed: u64,
    pub train: usize,
    pub test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { train_seed: 1, test_seed: 2, train: 2000, test: 500 }
    }
}

/// MDP settings that are not fixed by the system dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub penalty: f64,
    pub fairness_eps: f64,
    pub weights: RewardWeights,
    /// Defaults to `ceil(N_RF / 2)`.
    pub fairness_start_step: Option<usize>,
}

impl Default for EnvSection {
    fn default() -> Self {
        let base = EnvConfig::new(16, 4, 4, 1.0, 1.0);
        EnvSection { penalty: base.penalty, fairness_eps: base.fairness_eps, weights: base.weights, fairness_start_step: None }
    }
}

// `flatten` rules out `deny_unknown_fields` here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnfoldSection {
    pub layers: usize,
    #[serde(flatten)]
    pub train: UnfoldTrainConfig,
    /// Selector producing the equivalent channels for `train-unfold`.
    pub selector: UnfoldSelector,
}

impl Default for UnfoldSection {
    fn default() -> Self {
        UnfoldSection { layers: 4, train: UnfoldTrainConfig::default(), selector: UnfoldSelector::ExhaustiveZf }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnfoldSelector {
    ExhaustiveZf,
    Mm,
}

/// Agent-only training (`train-drl`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrlSection {
    pub episodes: usize,
}

impl Default for DrlSection {
    fn default() -> Self {
        DrlSection { episodes: 3000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointSection {
    pub episodes: usize,
    /// Alternation period; defaults to the agent's replay period.
    pub period: Option<usize>,
    pub unfold_buffer: usize,
    pub eval_every: usize,
    pub plateau_window: usize,
    pub plateau_tol: f64,
    /// Unfolding parameters to start from (e.g. the output of `train-unfold`)
    /// instead of the WMMSE-like initialization.
    pub unfold_init: Option<PathBuf>,
    /// Held-out channels used for the training-time evaluation.
    pub eval_channels: usize,
}

impl Default for JointSection {
    fn default() -> Self {
        JointSection {
            episodes: 2000,
            period: None,
            unfold_buffer: 500,
            eval_every: 100,
            plateau_window: 0,
            plateau_tol: 1e-3,
            unfold_init: None,
            eval_channels: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepVariable {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "n_rf")]
    NRf,
    #[serde(rename = "k")]
    K,
    #[serde(rename = "m_s")]
    MS,
    #[serde(rename = "snr_db")]
    SnrDb,
}

impl SweepVariable {
    pub fn label(&self) -> &'static str {
        match self {
            SweepVariable::None => "none",
            SweepVariable::NRf => "n_rf",
            SweepVariable::K => "k",
            SweepVariable::MS => "m_s",
            SweepVariable::SnrDb => "snr_db",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub schemes: Vec<Scheme>,
    pub variable: SweepVariable,
    pub grid: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            schemes: vec![Scheme::MmWmmse, Scheme::MsZf, Scheme::FdZf, Scheme::FdWmmse],
            variable: SweepVariable::None,
            grid: vec![0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessConfig {
    /// Angular errors as fractions of the beam spacing `1/M_s`.
    pub errors: Vec<f64>,
    pub target: ErrorTarget,
    pub seed: u64,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        RobustnessConfig { errors: vec![0.0, 0.01, 0.02, 0.04], target: ErrorTarget::LosOnly, seed: 7 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConfig {
    pub samples: usize,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig { samples: 500 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub wmmse_iters: usize,
    pub wmmse_tol: f64,
    pub exhaustive_cap: u64,
    pub random_seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { wmmse_iters: 100, wmmse_tol: 1e-8, exhaustive_cap: lensmimo::baseline::ENUMERATION_CAP as u64, random_seed: 11 }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<RunConfig> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(HarnessError::Config(format!("config version {} unsupported (expected {CONFIG_VERSION})", self.version)));
        }
        self.system.validate()?;
        if self.sweep.schemes.is_empty() || self.sweep.grid.is_empty() {
            return Err(HarnessError::Config("sweep schemes and grid must be nonempty".into()));
        }
        if self.robustness.errors.iter().any(|e| !(*e >= 0.0)) {
            return Err(HarnessError::Config("angular errors must be non-negative".into()));
        }
        if self.data.test == 0 {
            return Err(HarnessError::Config("test set must be nonempty".into()));
        }
        if self.unfold.layers == 0 {
            return Err(HarnessError::Config("unfolding needs at least one layer".into()));
        }
        self.agent.validate()?;
        Ok(())
    }

    pub fn env_config(&self, sys: &SystemConfig) -> EnvConfig {
        let mut env = EnvConfig::new(sys.m_s, sys.n_rf, sys.k, sys.ps, sys.sigma2());
        env.m_bar = sys.m_bar;
        env.penalty = self.env.penalty;
        env.fairness_eps = self.env.fairness_eps;
        env.weights = self.env.weights;
        if let Some(t) = self.env.fairness_start_step {
            env.fairness_start_step = t;
        }
        env
    }

    pub fn joint_config(&self, sys: &SystemConfig) -> JointConfig {
        let mut cfg = JointConfig::new(self.env_config(sys), self.agent.clone(), self.joint.episodes);
        cfg.unfold = self.unfold.train;
        cfg.layers = self.unfold.layers;
        cfg.period = self.joint.period.unwrap_or(self.agent.replay_period);
        cfg.unfold_buffer = self.joint.unfold_buffer;
        cfg.eval_every = self.joint.eval_every;
        cfg.plateau_window = self.joint.plateau_window;
        cfg.plateau_tol = self.joint.plateau_tol;
        cfg
    }

    pub fn train_params(&self, sys: &SystemConfig) -> ChannelParams {
        ChannelParams::standard(sys.m_s, sys.k, self.data.train_seed)
    }

    pub fn test_params(&self, sys: &SystemConfig) -> ChannelParams {
        ChannelParams::standard(sys.m_s, sys.k, self.data.test_seed)
    }
}

/// Sets `a.b.c=value` in `table`. The value is parsed as a TOML value and
/// falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override `{assignment}` is not key=value")))?;
    let value: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| HarnessError::Config(format!("override path `{key}` crosses a non-table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "version = 1\nname = \"t\"\noutput_dir = \"out\"\n";

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = RunConfig::from_toml_str(MINIMAL, &[]).unwrap();
        assert_eq!(cfg.system, SystemConfig::default());
        assert!((cfg.system.sigma2() - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn overrides_apply() {
        let o = vec!["system.n_rf=6".to_string(), "sweep.schemes=[\"fd-zf\"]".to_string(), "name=other".to_string()];
        let cfg = RunConfig::from_toml_str(MINIMAL, &o).unwrap();
        assert_eq!(cfg.system.n_rf, 6);
        assert_eq!(cfg.sweep.schemes, vec![Scheme::FdZf]);
        assert_eq!(cfg.name, "other");
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(RunConfig::from_toml_str("version = 2\nname = \"t\"\noutput_dir = \"o\"", &[]).is_err());
        assert!(RunConfig::from_toml_str(MINIMAL, &["system.k=9".into()]).is_err());
        assert!(RunConfig::from_toml_str(MINIMAL, &["sweep.schemes=[\"nope\"]".into()]).is_err());
        assert!(RunConfig::from_toml_str(MINIMAL, &["bogus=1".into()]).is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::from_toml_str(MINIMAL, &["robustness.errors=[0.0, 0.04]".into()]).unwrap();
        let again = RunConfig::from_toml_str(&cfg.to_toml_string(), &[]).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn sweep_points() {
        let sys = SystemConfig::default();
        assert_eq!(sys.at(SweepVariable::NRf, 12.0).unwrap().n_rf, 12);
        assert_eq!(sys.at(SweepVariable::NRf, 20.0).unwrap().m_bar, 20);
        assert!(sys.at(SweepVariable::K, 2.5).is_err());
        assert_eq!(sys.at(SweepVariable::SnrDb, 10.0).unwrap().snr_db, 10.0);
    }
}
