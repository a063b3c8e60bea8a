//! Alternating training of the beam-selection agent and the unfolding
//! precoder.
//!
//! Each episode the agent selects beams on one training channel and the
//! terminal reward is computed with the current unfolding network. Valid
//! episodes feed their equivalent channel into a bounded buffer. Every
//! `period` episodes the agent runs one learn phase and the unfolding network
//! one epoch over the buffer.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{greedy_selection, rollout, AgentConfig, DrlTrainer, EpisodeRecord, QNetwork};
use crate::baseline::{sum_rate_equivalent, Precoder};
use crate::env::EnvConfig;
use crate::numerics::CMatrix;
use crate::unfolding::{unfold_epoch, unfold_forward, UnfoldOptimizer, UnfoldTrainConfig, UnfoldingParams};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointConfig {
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub unfold: UnfoldTrainConfig,
    pub layers: usize,
    /// Alternation period in episodes.
    pub period: usize,
    pub episodes: usize,
    /// Most recent equivalent channels kept for unfolding training.
    pub unfold_buffer: usize,
    pub eval_every: usize,
    /// Evaluations compared by the plateau rule; 0 disables early stopping.
    pub plateau_window: usize,
    /// Relative spread of the evaluated sum-rate and of the agent loss under
    /// which both count as flat.
    pub plateau_tol: f64,
    pub train_agent: bool,
    pub train_unfolding: bool,
}

impl JointConfig {
    pub fn new(env: EnvConfig, agent: AgentConfig, episodes: usize) -> Self {
        let period = agent.replay_period;
        JointConfig {
            env,
            agent,
            unfold: UnfoldTrainConfig::default(),
            layers: 6,
            period,
            episodes,
            unfold_buffer: 500,
            eval_every: 100,
            plateau_window: 0,
            plateau_tol: 1e-3,
            train_agent: true,
            train_unfolding: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.agent.validate()?;
        if self.layers == 0 || self.period == 0 || self.eval_every == 0 || self.unfold_buffer == 0 {
            return Err(Error::InvalidConfig("layers, period, eval cadence and buffer must be positive".into()));
        }
        if self.unfold.batch == 0 {
            return Err(Error::InvalidConfig("unfolding batch 0".into()));
        }
        Ok(())
    }
}

/// One evaluation checkpoint. Window quantities cover the episodes since the
/// previous checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointMetric {
    pub episode: usize,
    /// Mean held-out sum-rate (nats) of greedy selection + unfolding precoder.
    pub pipeline_rate: f64,
    /// Held-out channels on which the greedy policy repeated a beam.
    pub test_invalid: usize,
    pub mean_reward: f64,
    pub violations: usize,
    pub greedy_violations: usize,
    pub agent_loss: Option<f64>,
    pub unfold_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct JointOutcome {
    pub net: QNetwork,
    pub unfolding: UnfoldingParams,
    pub history: Vec<EpisodeRecord>,
    /// `(episode, mean loss)` per unfolding epoch.
    pub unfold_losses: Vec<(usize, f64)>,
    pub metrics: Vec<JointMetric>,
    pub stopped_early: bool,
}

/// Greedy selection followed by the unfolding precoder, averaged over `test`.
/// A channel on which the policy repeats a beam scores 0. Returns the mean
/// sum-rate in nats and the number of such channels.
pub fn pipeline_rate(env: &EnvConfig, net: &QNetwork, params: &UnfoldingParams, mask_invalid: bool, test: &[CMatrix]) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut invalid = 0;
    for h in test {
        let state = greedy_selection(env, net, h, mask_invalid)?;
        if !state.is_valid() {
            invalid += 1;
            continue;
        }
        let hbar = state.equivalent_channel();
        let (p, _) = unfold_forward(params, &hbar, env.ps, env.sigma2)?;
        total += sum_rate_equivalent(&hbar, &p.p, env.sigma2)?;
    }
    Ok((total / test.len().max(1) as f64, invalid))
}

pub struct JointTrainer {
    pub cfg: JointConfig,
    pub drl: DrlTrainer,
    pub unfolding: UnfoldingParams,
    unfold_opt: UnfoldOptimizer,
    unfold_rng: ChaCha8Rng,
    pub buffer: VecDeque<CMatrix>,
}

impl JointTrainer {
    pub fn new(cfg: JointConfig) -> Result<Self> {
        cfg.validate()?;
        let drl = DrlTrainer::new(cfg.env.clone(), cfg.agent.clone(), cfg.episodes)?;
        let unfolding = UnfoldingParams::new(cfg.layers, cfg.env.n_rf, cfg.env.k, cfg.env.ps, cfg.env.sigma2, cfg.unfold.seed)?;
        let unfold_opt = UnfoldOptimizer::new(&unfolding);
        let unfold_rng = ChaCha8Rng::seed_from_u64(cfg.unfold.seed);
        Ok(JointTrainer { cfg, drl, unfolding, unfold_opt, unfold_rng, buffer: VecDeque::new() })
    }

    /// Replaces the unfolding network (for example with a pre-trained one).
    pub fn set_unfolding(&mut self, params: UnfoldingParams) -> Result<()> {
        if params.n_rf != self.cfg.env.n_rf || params.k != self.cfg.env.k {
            return Err(Error::ArchMismatch);
        }
        self.unfold_opt = UnfoldOptimizer::new(&params);
        self.unfolding = params;
        Ok(())
    }

    /// Replaces both agent networks.
    pub fn set_agent(&mut self, net: QNetwork) -> Result<()> {
        if net.cfg != self.drl.main.cfg {
            return Err(Error::ArchMismatch);
        }
        self.drl.target = net.clone();
        self.drl.main = net;
        Ok(())
    }

    fn push_channel(&mut self, hbar: CMatrix) {
        if self.buffer.len() == self.cfg.unfold_buffer {
            self.buffer.pop_front();
        }
        self.buffer.push_back(hbar);
    }

    fn unfold_phase(&mut self) -> Result<Option<f64>> {
        if !self.cfg.train_unfolding || self.buffer.len() < self.cfg.unfold.batch {
            return Ok(None);
        }
        let data: Vec<CMatrix> = self.buffer.iter().cloned().collect();
        let (ps, s2) = (self.cfg.env.ps, self.cfg.env.sigma2);
        let losses = unfold_epoch(&mut self.unfolding, &mut self.unfold_opt, &data, &self.cfg.unfold, &mut self.unfold_rng, ps, s2)?;
        Ok(Some(losses.iter().sum::<f64>() / losses.len() as f64))
    }

    /// Runs the alternation over `train` (cycled) and evaluates on `test`.
    pub fn run(mut self, train: &[CMatrix], test: &[CMatrix]) -> Result<JointOutcome> {
        if train.is_empty() {
            return Err(Error::InvalidConfig("empty training set".into()));
        }
        let cfg = self.cfg.clone();
        let mut history: Vec<EpisodeRecord> = Vec::with_capacity(cfg.episodes);
        let mut unfold_losses = Vec::new();
        let mut metrics = Vec::new();
        let mut agent_losses: Vec<f64> = Vec::new();
        let mut window_start = 0;
        let mut stopped_early = false;
        for e in 0..cfg.episodes {
            let h = &train[e % train.len()];
            let params = &self.unfolding;
            let precoder = |hb: &CMatrix| -> Result<Precoder> { Ok(unfold_forward(params, hb, cfg.env.ps, cfg.env.sigma2)?.0) };
            let out = if cfg.train_agent {
                self.drl.collect(e, h, precoder)?
            } else {
                rollout(&cfg.env, &self.drl.main, h, 0.0, cfg.agent.mask_invalid, &mut self.drl.rng, precoder)?
            };
            if out.state.is_valid() {
                self.push_channel(out.state.equivalent_channel());
            }
            let mut loss = None;
            if (e + 1) % cfg.period == 0 {
                if cfg.train_agent {
                    loss = self.drl.learn_phase(e)?;
                    agent_losses.extend(loss);
                }
                if let Some(l) = self.unfold_phase()? {
                    unfold_losses.push((e, l));
                }
            }
            history.push(EpisodeRecord {
                episode: e,
                reward: out.rewards.iter().sum(),
                violations: out.state.repeats,
                greedy_violations: self.drl.greedy_violations(h)?,
                loss,
                sum_rate: out.terminal_rate,
            });
            if (e + 1) % cfg.eval_every == 0 || e + 1 == cfg.episodes {
                let (rate, invalid) = pipeline_rate(&cfg.env, &self.drl.main, &self.unfolding, cfg.agent.mask_invalid, test)?;
                let window = &history[window_start..];
                let n = window.len() as f64;
                let losses: Vec<f64> = window.iter().filter_map(|r| r.loss).collect();
                let ulosses: Vec<f64> = unfold_losses.iter().filter(|(ep, _)| *ep >= window_start).map(|x| x.1).collect();
                let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
                metrics.push(JointMetric {
                    episode: e + 1,
                    pipeline_rate: rate,
                    test_invalid: invalid,
                    mean_reward: window.iter().map(|r| r.reward).sum::<f64>() / n,
                    violations: window.iter().map(|r| r.violations).sum(),
                    greedy_violations: window.iter().map(|r| r.greedy_violations).sum(),
                    agent_loss: mean(&losses),
                    unfold_loss: mean(&ulosses),
                });
                window_start = e + 1;
                if plateaued(&metrics, cfg.plateau_window, cfg.plateau_tol) {
                    stopped_early = e + 1 < cfg.episodes;
                    break;
                }
            }
        }
        Ok(JointOutcome { net: self.drl.main, unfolding: self.unfolding, history, unfold_losses, metrics, stopped_early })
    }
}

fn relative_spread(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::MIN, f64::max);
    let min = values.iter().cloned().fold(f64::MAX, f64::min);
    let scale = values.iter().map(|v| v.abs()).sum::<f64>() / values.len() as f64;
    if scale == 0.0 {
        0.0
    } else {
        (max - min) / scale
    }
}

/// Both the evaluated sum-rate and the agent loss stayed within `tol`
/// (relative) over the last `window` checkpoints.
fn plateaued(metrics: &[JointMetric], window: usize, tol: f64) -> bool {
    if window == 0 || metrics.len() < window {
        return false;
    }
    let recent = &metrics[metrics.len() - window..];
    let rates: Vec<f64> = recent.iter().map(|m| m.pipeline_rate).collect();
    let Some(losses) = recent.iter().map(|m| m.agent_loss).collect::<Option<Vec<f64>>>() else {
        return false;
    };
    relative_spread(&rates) < tol && relative_spread(&losses) < tol
}

pub fn joint_train(cfg: JointConfig, train: &[CMatrix], test: &[CMatrix]) -> Result<JointOutcome> {
    JointTrainer::new(cfg)?.run(train, test)
}

pub fn write_metrics_csv(path: &Path, metrics: &[JointMetric]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "episode,pipeline_rate_bits,test_invalid,mean_reward,violations,greedy_violations,agent_loss,unfold_loss")?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for m in metrics {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            m.episode,
            m.pipeline_rate / std::f64::consts::LN_2,
            m.test_invalid,
            m.mean_reward,
            m.violations,
            m.greedy_violations,
            opt(m.agent_loss),
            opt(m.unfold_loss)
        )?;
    }
    out.flush()?;
    Ok(())
}
