//! Sweeps, fairness table, CSI-error robustness and timing.
//!
//! Instances are evaluated one after another on the calling thread; with a
//! single writer this is also the reference order for reproducibility.

use std::collections::HashMap;
use std::time::Instant;

use lensmimo::channel::{generate_dataset, inject_angle_error, sample_rng, BeamspaceChannel};
use lensmimo::CMatrix;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SweepVariable, SystemConfig};
use crate::error::Result;
use crate::output::{f, write_outputs, Artifacts, PlotSpec, Table};
use crate::schemes::{decide, find_model, LearnedModel, Scheme, SchemeContext};

const LN2: f64 = std::f64::consts::LN_2;

/// One scheme at one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scheme: Scheme,
    pub variable: SweepVariable,
    pub point: f64,
    pub samples: usize,
    /// Instances the scheme could not serve (scored 0).
    pub failures: usize,
    pub mean_rate_bits: f64,
    pub std_rate_bits: f64,
    /// Mean `||column k of H_bar||` per user.
    pub user_energy: Vec<f64>,
    pub seconds_per_instance: f64,
    pub seed: u64,
}

impl MetricsRecord {
    /// Smallest over largest mean user energy.
    pub fn fairness_index(&self) -> f64 {
        let max = self.user_energy.iter().cloned().fold(0.0, f64::max);
        let min = self.user_energy.iter().cloned().fold(f64::INFINITY, f64::min);
        if max > 0.0 {
            min / max
        } else {
            0.0
        }
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn column_norms(hbar: &CMatrix) -> Vec<f64> {
    (0..hbar.cols()).map(|k| (0..hbar.rows()).map(|r| hbar[(r, k)].norm_sqr()).sum::<f64>().sqrt()).collect()
}

/// Per-instance outcome of one scheme.
struct Outcome {
    rate: f64,
    energy: Vec<f64>,
    seconds: f64,
    failed: bool,
}

/// Decides on `estimate`, scores on `truth`.
fn run_instance(scheme: Scheme, ctx: &SchemeContext, truth: &CMatrix, estimate: &CMatrix, index: u64) -> Result<Outcome> {
    let t0 = Instant::now();
    let decision = decide(scheme, ctx, estimate, index)?;
    let seconds = t0.elapsed().as_secs_f64();
    Ok(match decision {
        Some(d) => Outcome { rate: d.rate(truth, ctx.sys.sigma2())?, energy: column_norms(&d.equivalent(truth)), seconds, failed: false },
        None => Outcome { rate: 0.0, energy: vec![0.0; truth.cols()], seconds, failed: true },
    })
}

fn summarize(scheme: Scheme, variable: SweepVariable, point: f64, seed: u64, outcomes: &[Outcome]) -> MetricsRecord {
    let bits: Vec<f64> = outcomes.iter().map(|o| o.rate / LN2).collect();
    let (mean, std) = mean_std(&bits);
    let k = outcomes.first().map_or(0, |o| o.energy.len());
    let n = outcomes.len().max(1) as f64;
    let user_energy = (0..k).map(|u| outcomes.iter().map(|o| o.energy[u]).sum::<f64>() / n).collect();
    MetricsRecord {
        scheme,
        variable,
        point,
        samples: outcomes.len(),
        failures: outcomes.iter().filter(|o| o.failed).count(),
        mean_rate_bits: mean,
        std_rate_bits: std,
        user_energy,
        seconds_per_instance: outcomes.iter().map(|o| o.seconds).sum::<f64>() / n,
        seed,
    }
}

struct Point {
    value: f64,
    sys: SystemConfig,
    test: Vec<BeamspaceChannel>,
    model: Option<LearnedModel>,
}

fn points(cfg: &RunConfig, count: usize) -> Result<Vec<Point>> {
    let variable = cfg.sweep.variable;
    let grid = if variable == SweepVariable::None { vec![0.0] } else { cfg.sweep.grid.clone() };
    let needs_model = cfg.sweep.schemes.iter().any(|s| s.is_learned());
    grid.into_iter()
        .map(|value| {
            let sys = cfg.system.at(variable, value)?;
            let test = generate_dataset(&cfg.test_params(&sys), count)?;
            let model = if needs_model { Some(find_model(cfg, variable, value, &sys)?) } else { None };
            Ok(Point { value, sys, test, model })
        })
        .collect()
}

fn context<'a>(cfg: &RunConfig, p: &'a Point) -> SchemeContext<'a> {
    SchemeContext { sys: p.sys, env: cfg.env_config(&p.sys), solvers: cfg.solvers, model: p.model.as_ref() }
}

/// Mean sum-rate of every scheme at every sweep point on clean channels.
pub fn sweep_records(cfg: &RunConfig) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for p in points(cfg, cfg.data.test)? {
        let ctx = context(cfg, &p);
        for &scheme in &cfg.sweep.schemes {
            let outcomes = p
                .test
                .iter()
                .enumerate()
                .map(|(i, ch)| run_instance(scheme, &ctx, &ch.h, &ch.h, i as u64))
                .collect::<Result<Vec<_>>>()?;
            out.push(summarize(scheme, cfg.sweep.variable, p.value, cfg.data.test_seed, &outcomes));
        }
    }
    Ok(out)
}

pub fn sweep_table(records: &[MetricsRecord]) -> Table {
    let mut t = Table::new(&["scheme", "variable", "point", "samples", "failures", "mean_rate_bits", "std_rate_bits", "test_seed"]);
    for r in records {
        t.push(vec![
            r.scheme.id().into(),
            r.variable.label().into(),
            f(r.point),
            r.samples.to_string(),
            r.failures.to_string(),
            f(r.mean_rate_bits),
            f(r.std_rate_bits),
            r.seed.to_string(),
        ]);
    }
    t
}

pub fn run_sweep(cfg: &RunConfig) -> Result<(Vec<MetricsRecord>, Artifacts)> {
    let records = sweep_records(cfg)?;
    let plot = PlotSpec {
        kind: "line".into(),
        x: "point".into(),
        y: "mean_rate_bits".into(),
        series: "scheme".into(),
        error: Some("std_rate_bits".into()),
        title: format!("sum-rate vs {}", cfg.sweep.variable.label()),
    };
    let art = write_outputs(cfg, "sweep", &sweep_table(&records), &plot)?;
    Ok((records, art))
}

/// Per-user selected-beam energy at the base system (sweep grid ignored).
pub fn run_fairness(cfg: &RunConfig) -> Result<(Vec<MetricsRecord>, Artifacts)> {
    let mut base = cfg.clone();
    base.sweep.variable = SweepVariable::None;
    let records = sweep_records(&base)?;
    let k = cfg.system.k;
    let mut header: Vec<String> = vec!["scheme".into(), "samples".into()];
    header.extend((0..k).map(|u| format!("energy_user_{u}")));
    header.push("fairness_index".into());
    let mut t = Table { header, rows: Vec::new() };
    for r in &records {
        let mut row = vec![r.scheme.id().to_string(), r.samples.to_string()];
        row.extend(r.user_energy.iter().map(|&e| f(e)));
        row.push(f(r.fairness_index()));
        t.push(row);
    }
    let plot = PlotSpec {
        kind: "bar".into(),
        x: "user".into(),
        y: "energy_user_*".into(),
        series: "scheme".into(),
        error: None,
        title: "selected beam energy per user".into(),
    };
    let art = write_outputs(cfg, "fairness", &t, &plot)?;
    Ok((records, art))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRecord {
    pub scheme: Scheme,
    /// Angular error as a fraction of the beam spacing.
    pub error: f64,
    pub samples: usize,
    pub failures: usize,
    pub mean_rate_bits: f64,
    pub std_rate_bits: f64,
    pub clean_rate_bits: f64,
    /// `1 - mean_rate / clean_rate` over the same instances.
    pub degradation: f64,
}

/// Schemes decide on angle-perturbed estimates and are scored on the true
/// channels. Instance `i` draws its perturbation from stream `i` of the
/// robustness seed, so every scheme sees the same estimates.
pub fn robustness_records(cfg: &RunConfig) -> Result<Vec<RobustnessRecord>> {
    let mut base = cfg.clone();
    base.sweep.variable = SweepVariable::None;
    let p = points(&base, cfg.data.test)?.remove(0);
    let ctx = context(&base, &p);
    let mut out = Vec::new();
    for &scheme in &cfg.sweep.schemes {
        let clean: Vec<f64> = p
            .test
            .iter()
            .enumerate()
            .map(|(i, ch)| Ok(run_instance(scheme, &ctx, &ch.h, &ch.h, i as u64)?.rate))
            .collect::<Result<_>>()?;
        let clean_mean = clean.iter().sum::<f64>() / clean.len() as f64;
        for &err in &cfg.robustness.errors {
            let outcomes = p
                .test
                .iter()
                .enumerate()
                .map(|(i, ch)| {
                    let est = inject_angle_error(ch, err, cfg.robustness.target, &mut sample_rng(cfg.robustness.seed, i as u64))?;
                    run_instance(scheme, &ctx, &ch.h, &est.h, i as u64)
                })
                .collect::<Result<Vec<_>>>()?;
            let nats: Vec<f64> = outcomes.iter().map(|o| o.rate).collect();
            let (mean, std) = mean_std(&nats);
            out.push(RobustnessRecord {
                scheme,
                error: err,
                samples: outcomes.len(),
                failures: outcomes.iter().filter(|o| o.failed).count(),
                mean_rate_bits: mean / LN2,
                std_rate_bits: std / LN2,
                clean_rate_bits: clean_mean / LN2,
                degradation: if clean_mean > 0.0 { 1.0 - mean / clean_mean } else { 0.0 },
            });
        }
    }
    Ok(out)
}

pub fn run_robustness(cfg: &RunConfig) -> Result<(Vec<RobustnessRecord>, Artifacts)> {
    let records = robustness_records(cfg)?;
    let mut t = Table::new(&["scheme", "error", "samples", "failures", "mean_rate_bits", "std_rate_bits", "clean_rate_bits", "degradation"]);
    for r in &records {
        t.push(vec![
            r.scheme.id().into(),
            f(r.error),
            r.samples.to_string(),
            r.failures.to_string(),
            f(r.mean_rate_bits),
            f(r.std_rate_bits),
            f(r.clean_rate_bits),
            f(r.degradation),
        ]);
    }
    let plot = PlotSpec {
        kind: "line".into(),
        x: "error".into(),
        y: "mean_rate_bits".into(),
        series: "scheme".into(),
        error: Some("std_rate_bits".into()),
        title: "sum-rate vs angular CSI error".into(),
    };
    let art = write_outputs(cfg, "robustness", &t, &plot)?;
    Ok((records, art))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub scheme: Scheme,
    pub variable: SweepVariable,
    pub point: f64,
    pub samples: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    pub complexity: String,
}

/// Wall-clock per instance of each scheme's decision (selection + precoder),
/// averaged over `timing.samples` channels per sweep point.
pub fn timing_records(cfg: &RunConfig) -> Result<Vec<TimingRecord>> {
    let mut out = Vec::new();
    for p in points(cfg, cfg.timing.samples)? {
        let ctx = context(cfg, &p);
        for &scheme in &cfg.sweep.schemes {
            let mut secs = Vec::with_capacity(p.test.len());
            for (i, ch) in p.test.iter().enumerate() {
                let t0 = Instant::now();
                let d = decide(scheme, &ctx, &ch.h, i as u64)?;
                secs.push(t0.elapsed().as_secs_f64());
                std::hint::black_box(d);
            }
            let (mean, std) = mean_std(&secs);
            out.push(TimingRecord {
                scheme,
                variable: cfg.sweep.variable,
                point: p.value,
                samples: secs.len(),
                mean_seconds: mean,
                std_seconds: std,
                complexity: scheme.complexity().into(),
            });
        }
    }
    Ok(out)
}

pub fn run_timing(cfg: &RunConfig) -> Result<(Vec<TimingRecord>, Artifacts)> {
    let records = timing_records(cfg)?;
    let mut t = Table::new(&["scheme", "variable", "point", "samples", "mean_seconds", "std_seconds", "complexity"]);
    for r in &records {
        t.push(vec![
            r.scheme.id().into(),
            r.variable.label().into(),
            f(r.point),
            r.samples.to_string(),
            f(r.mean_seconds),
            f(r.std_seconds),
            r.complexity.clone(),
        ]);
    }
    let plot = PlotSpec {
        kind: "line".into(),
        x: "point".into(),
        y: "mean_seconds".into(),
        series: "scheme".into(),
        error: Some("std_seconds".into()),
        title: format!("inference time vs {}", cfg.sweep.variable.label()),
    };
    let art = write_outputs(cfg, "timing", &t, &plot)?;
    Ok((records, art))
}

/// Mean rate per scheme, keyed by scheme id.
pub fn by_scheme(records: &[MetricsRecord]) -> HashMap<Scheme, f64> {
    records.iter().map(|r| (r.scheme, r.mean_rate_bits)).collect()
}
