//! Channel generation and the three training verbs.
//!
//! Datasets are regenerated from their seeds on every run (generation is
//! deterministic), so the files written by `gen-channels` are for inspection
//! and external tools; training never depends on them being present.

use lensmimo::agent::{train_drl as core_train_drl, EpisodeRecord, QNetwork};
use lensmimo::baseline::{exhaustive_select, mm_select, zf_precoder, Precoder};
use lensmimo::channel::{generate_dataset, ChannelDataset};
use lensmimo::joint::{JointOutcome, JointTrainer};
use lensmimo::unfolding::{mean_sum_rate, unfold_train, LossRecord, UnfoldTrainConfig, UnfoldingParams};
use lensmimo::CMatrix;

use crate::config::{RunConfig, SystemConfig, UnfoldSelector};
use crate::error::{HarnessError, Result};
use crate::output::{f, write_outputs, Artifacts, PlotSpec, Table};
use crate::schemes::{checkpoint_root, wmmse_full_power, LearnedModel, AGENT_FILE, UNFOLD_FILE};

const LN2: f64 = std::f64::consts::LN_2;

pub struct Datasets {
    pub train: Vec<CMatrix>,
    pub test: Vec<CMatrix>,
}

pub fn datasets(cfg: &RunConfig, sys: &SystemConfig) -> Result<Datasets> {
    let train = generate_dataset(&cfg.train_params(sys), cfg.data.train)?;
    let test = generate_dataset(&cfg.test_params(sys), cfg.data.test)?;
    Ok(Datasets { train: train.into_iter().map(|c| c.h).collect(), test: test.into_iter().map(|c| c.h).collect() })
}

/// Writes `<name>_train.channels.json` and `<name>_test.channels.json`.
pub fn gen_channels(cfg: &RunConfig) -> Result<Vec<std::path::PathBuf>> {
    let sys = cfg.system;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| HarnessError::io(&cfg.output_dir, e))?;
    let mut written = Vec::new();
    for (tag, params, count) in [("train", cfg.train_params(&sys), cfg.data.train), ("test", cfg.test_params(&sys), cfg.data.test)] {
        let channels = generate_dataset(&params, count)?;
        let path = cfg.output_dir.join(format!("{}_{tag}.channels.json", cfg.name));
        ChannelDataset::new(&params, &channels).save(&path)?;
        written.push(path);
    }
    Ok(written)
}

/// Equivalent channels produced by the configured selector; instances with
/// no admissible selection are skipped.
pub fn equivalent_channels(cfg: &RunConfig, sys: &SystemConfig, channels: &[CMatrix], selector: UnfoldSelector) -> Result<Vec<CMatrix>> {
    let mut out = Vec::with_capacity(channels.len());
    for h in channels {
        let beams = match selector {
            UnfoldSelector::Mm => mm_select(h, sys.n_rf)?.beams,
            UnfoldSelector::ExhaustiveZf => {
                match exhaustive_select(h, sys.n_rf, sys.sigma2(), cfg.solvers.exhaustive_cap as u128, |hb| zf_precoder(hb, sys.ps)) {
                    Ok((sel, _)) => sel.beams,
                    Err(lensmimo::Error::RankDeficient(_)) => continue,
                    Err(e) => return Err(e.into()),
                }
            }
        };
        out.push(h.select_rows(&beams));
    }
    Ok(out)
}

pub struct UnfoldReport {
    pub params: UnfoldingParams,
    pub history: Vec<LossRecord>,
    /// Held-out mean sum-rate (bits) of the trained network and of converged WMMSE.
    pub test_rate_bits: f64,
    pub wmmse_rate_bits: f64,
    pub artifacts: Artifacts,
}

fn train_unfolding_on(cfg: &RunConfig, sys: &SystemConfig, data: &[CMatrix], train: &UnfoldTrainConfig) -> Result<(UnfoldingParams, Vec<LossRecord>)> {
    let init = UnfoldingParams::new(cfg.unfold.layers, sys.n_rf, sys.k, sys.ps, sys.sigma2(), train.seed)?;
    Ok(unfold_train(&init, data, train, sys.ps, sys.sigma2())?)
}

/// Trains the unfolding network alone on selector-induced equivalent channels
/// and saves `unfold.bin` under the checkpoint directory.
pub fn train_unfold(cfg: &RunConfig) -> Result<UnfoldReport> {
    let sys = cfg.system;
    let data = datasets(cfg, &sys)?;
    let train = equivalent_channels(cfg, &sys, &data.train, cfg.unfold.selector)?;
    let test = equivalent_channels(cfg, &sys, &data.test, cfg.unfold.selector)?;
    let (params, history) = train_unfolding_on(cfg, &sys, &train, &cfg.unfold.train)?;
    let test_rate = mean_sum_rate(&params, &test, sys.ps, sys.sigma2())?;
    let mut wmmse_total = 0.0;
    for hb in &test {
        let p = wmmse_full_power(hb, &cfg.solvers, sys.ps, sys.sigma2())?;
        wmmse_total += lensmimo::baseline::sum_rate_equivalent(hb, &p.p, sys.sigma2())?;
    }
    let dir = checkpoint_root(cfg);
    std::fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    params.save(&dir.join(UNFOLD_FILE))?;

    let mut t = Table::new(&["step", "epoch", "loss"]);
    for r in &history {
        t.push(vec![r.step.to_string(), r.epoch.to_string(), f(r.loss)]);
    }
    let plot = PlotSpec { kind: "line".into(), x: "step".into(), y: "loss".into(), series: String::new(), error: None, title: "unfolding training loss".into() };
    let artifacts = write_outputs(cfg, "train_unfold", &t, &plot)?;
    Ok(UnfoldReport {
        params,
        history,
        test_rate_bits: test_rate / LN2,
        wmmse_rate_bits: wmmse_total / test.len().max(1) as f64 / LN2,
        artifacts,
    })
}

pub struct DrlReport {
    pub net: QNetwork,
    pub history: Vec<EpisodeRecord>,
    pub artifacts: Artifacts,
}

/// Trains the agent alone with a converged-WMMSE terminal reward and saves
/// `agent.json`. Episodes cycle through the training set.
pub fn train_drl(cfg: &RunConfig) -> Result<DrlReport> {
    let sys = cfg.system;
    let data = datasets(cfg, &sys)?;
    if data.train.is_empty() {
        return Err(HarnessError::Config("training set is empty".into()));
    }
    let env = cfg.env_config(&sys);
    let solvers = cfg.solvers;
    let precoder = |hb: &CMatrix| -> lensmimo::Result<Precoder> { wmmse_full_power(hb, &solvers, sys.ps, sys.sigma2()) };
    let out = core_train_drl(&env, &cfg.agent, cfg.drl.episodes, |e| Ok(data.train[e % data.train.len()].clone()), precoder)?;
    let dir = checkpoint_root(cfg);
    std::fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    out.net.save(&dir.join(AGENT_FILE))?;

    let mut t = Table::new(&["episode", "reward", "violations", "greedy_violations", "loss", "sum_rate_bits"]);
    let opt = |x: Option<f64>| x.map(f).unwrap_or_default();
    for r in &out.history {
        t.push(vec![
            r.episode.to_string(),
            f(r.reward),
            r.violations.to_string(),
            r.greedy_violations.to_string(),
            opt(r.loss),
            opt(r.sum_rate.map(|x| x / LN2)),
        ]);
    }
    let plot = PlotSpec { kind: "line".into(), x: "episode".into(), y: "reward".into(), series: String::new(), error: None, title: "agent training".into() };
    let artifacts = write_outputs(cfg, "train_drl", &t, &plot)?;
    Ok(DrlReport { net: out.net, history: out.history, artifacts })
}

pub struct JointReport {
    pub outcome: JointOutcome,
    pub model: LearnedModel,
    pub artifacts: Artifacts,
}

/// Alternating agent / unfolding training, optionally starting from saved
/// unfolding parameters. The held-out evaluation uses at most
/// `eval_channels` test channels.
pub fn train_joint(cfg: &RunConfig) -> Result<JointReport> {
    let sys = cfg.system;
    let data = datasets(cfg, &sys)?;
    let mut trainer = JointTrainer::new(cfg.joint_config(&sys))?;
    if let Some(path) = &cfg.joint.unfold_init {
        if !path.exists() {
            return Err(HarnessError::MissingCheckpoint { scheme: "unfolding".into(), path: path.clone() });
        }
        let params = UnfoldingParams::load(path)?;
        if params.num_layers() != cfg.unfold.layers {
            return Err(HarnessError::Config(format!("{} has {} layers, config asks for {}", path.display(), params.num_layers(), cfg.unfold.layers)));
        }
        trainer.set_unfolding(params)?;
    }
    let eval = &data.test[..data.test.len().min(cfg.joint.eval_channels)];
    let outcome = trainer.run(&data.train, eval)?;
    let model = LearnedModel { net: outcome.net.clone(), unfolding: outcome.unfolding.clone(), mask_invalid: cfg.agent.mask_invalid };
    model.save(&checkpoint_root(cfg))?;

    let mut t = Table::new(&[
        "episode",
        "pipeline_rate_bits",
        "test_invalid",
        "mean_reward",
        "violations",
        "greedy_violations",
        "agent_loss",
        "unfold_loss",
    ]);
    let opt = |x: Option<f64>| x.map(f).unwrap_or_default();
    for m in &outcome.metrics {
        t.push(vec![
            m.episode.to_string(),
            f(m.pipeline_rate / LN2),
            m.test_invalid.to_string(),
            f(m.mean_reward),
            m.violations.to_string(),
            m.greedy_violations.to_string(),
            opt(m.agent_loss),
            opt(m.unfold_loss),
        ]);
    }
    let plot = PlotSpec {
        kind: "line".into(),
        x: "episode".into(),
        y: "pipeline_rate_bits".into(),
        series: String::new(),
        error: None,
        title: "joint training".into(),
    };
    let artifacts = write_outputs(cfg, "train_joint", &t, &plot)?;
    Ok(JointReport { outcome, model, artifacts })
}
