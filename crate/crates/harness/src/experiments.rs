//! Experiment drivers and their extra tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use rayon::prelude::*;

use xgm_core::dynamics::{rate_eval, OdeConfig};
use xgm_core::metrics::{destabilisation, TransitionMatrix, DESTABILISATION_DELTA_SIGMA};
use xgm_core::mixture::MixtureSpec;
use xgm_core::schedule::Protocol;
use xgm_core::state::controlled_with_free_unit;

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::output::{self, fmt_real, Column, Table};
use crate::runs::{self, RunOutcome};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub workers: usize,
    pub reproducible: bool,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub outcomes: Vec<RunOutcome>,
    pub extra: Vec<Table>,
}

impl ExperimentReport {
    pub fn failures(&self) -> usize {
        self.outcomes.iter().filter(|o| o.result.is_err()).count()
    }
}

fn col(name: &str, doc: &str) -> Column {
    Column {
        name: name.to_string(),
        doc: doc.to_string(),
    }
}

/// Runs the whole experiment and, if an output directory is set, writes it.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentReport> {
    cfg.validate()?;
    if cfg.kind == ExperimentKind::RateHeatmap {
        let table = rates_table(&rate_grid(cfg, opts.workers)?);
        let report = ExperimentReport {
            outcomes: Vec::new(),
            extra: vec![table],
        };
        write_report(cfg, opts, &report)?;
        return Ok(report);
    }
    let specs = runs::expand(cfg);
    let outcomes = runs::execute_all(cfg, &specs, opts.workers);
    let mut extra = Vec::new();
    match cfg.kind {
        ExperimentKind::ControlledTheta => extra.push(controlled_table(&outcomes)),
        ExperimentKind::Destabilisation => extra.push(transitions_table(&transitions(&outcomes)?)),
        _ => {}
    }
    if cfg.dump_schedules {
        extra.push(schedules_table(cfg, &specs)?);
    }
    let report = ExperimentReport { outcomes, extra };
    write_report(cfg, opts, &report)?;
    Ok(report)
}

fn write_report(cfg: &ExperimentConfig, opts: &RunOptions, report: &ExperimentReport) -> Result<()> {
    let Some(dir) = &opts.out else { return Ok(()) };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut files: Vec<(String, Vec<Column>)> = Vec::new();
    if cfg.kind != ExperimentKind::RateHeatmap {
        let traj = output::write_trajectories(dir, cfg, &report.outcomes)?;
        files.push((output::TRAJECTORIES.to_string(), traj));
        let summary = output::summary_table(cfg, &report.outcomes, opts.reproducible);
        summary.write(dir)?;
        files.push((summary.file.clone(), summary.columns.clone()));
    }
    for t in &report.extra {
        t.write(dir)?;
        files.push((t.file.clone(), t.columns.clone()));
    }
    let refs: Vec<(&str, &[Column])> = files.iter().map(|(n, c)| (n.as_str(), c.as_slice())).collect();
    output::write_manifest(dir, cfg, &report.outcomes, &refs, opts.reproducible)
}

/// Per (σ, protocol, ρ₁, θ₁) aggregates of the controlled sweep. The free
/// unit starts near `+μ₁`, the centroid no other unit covers.
pub fn controlled_table(outcomes: &[RunOutcome]) -> Table {
    let mut t = Table::new(
        "controlled.csv",
        vec![
            col("sigma", "noise level"),
            col("protocol", "protocol"),
            col("rho1", "initial relevant share of unit 1"),
            col("theta1", "initial angle of unit 1 to mu_1 (rad)"),
            col("n_runs", "successful runs"),
            col("frac_m11_positive", "fraction of runs with final M_11 > 0"),
            col("mean_m11", "mean final M_11"),
            col("se_m11", "standard error of mean_m11"),
            col("mean_rho1", "mean final rho of unit 1"),
            col("frac_leftout_covered", "fraction of runs covering +mu_1"),
        ],
    );
    let mut groups: BTreeMap<usize, (f64, Protocol, f64, f64, Vec<(f64, f64, bool)>)> = BTreeMap::new();
    for o in outcomes {
        let Ok(r) = &o.result else { continue };
        let p = &o.spec.point;
        let (theta, rho) = (p.theta1.unwrap_or(0.0), p.rho1.unwrap_or(0.0));
        let g = groups
            .entry(o.spec.config_index)
            .or_insert_with(|| (p.sigma, p.protocol, rho, theta, Vec::new()));
        let rho_final = r.final_geometry.first().map_or(f64::NAN, |g| g.0);
        g.4.push((r.final_state.m[(0, 0)], rho_final, r.covered[0]));
    }
    for (sigma, protocol, rho, theta, xs) in groups.into_values() {
        let n = xs.len() as f64;
        let m: Vec<f64> = xs.iter().map(|x| x.0).collect();
        let (mean, se) = mean_se(&m);
        t.push(vec![
            fmt_real(sigma),
            protocol.name().to_string(),
            fmt_real(rho),
            fmt_real(theta),
            xs.len().to_string(),
            fmt_real(xs.iter().filter(|x| x.0 > 0.0).count() as f64 / n),
            fmt_real(mean),
            fmt_real(se),
            fmt_real(xs.iter().map(|x| x.1).sum::<f64>() / n),
            fmt_real(xs.iter().filter(|x| x.2).count() as f64 / n),
        ]);
    }
    t
}

/// Sample mean and its standard error (`NaN` SE below two samples).
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// One cell of the rate grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateCell {
    pub sigma: f64,
    pub rho1: f64,
    pub m12: f64,
    pub m11: f64,
    pub phi: f64,
    pub dm11: f64,
    pub drho1: f64,
    /// `dm11` minus its value at `φ = 1` in the same cell.
    pub boost_dm11: f64,
    pub boost_drho1: f64,
}

fn rate_config(cfg: &ExperimentConfig) -> OdeConfig {
    OdeConfig {
        eta_tilde: cfg.eta_tilde,
        mc_samples: cfg.mc_samples,
        weight_decay: cfg.weight_decay[0],
        decay_both_layers: cfg.decay_both_layers,
        seed: cfg.seeds[0],
        dt: 1.0,
        base_jitter: cfg.base_jitter,
        ..OdeConfig::default()
    }
}

/// Instantaneous rates over σ × ρ₁ × M₁₂ × M₁₁ × φ.
///
/// The free unit has `Q₁₁ = (M₁₁² + M₁₂²) / ρ₁`. All cells reuse the same
/// Monte Carlo seed, so boosts are common-random-number differences.
pub fn rate_grid(cfg: &ExperimentConfig, workers: usize) -> Result<Vec<RateCell>> {
    let ode = rate_config(cfg);
    let mut phis = cfg.rate_phi.clone();
    if !phis.contains(&1.0) {
        phis.insert(0, 1.0);
    }
    let mut cells = Vec::new();
    for &sigma in &cfg.sigma {
        for &rho1 in &cfg.rho1 {
            for &m12 in &cfg.rate_m12 {
                for &m11 in &cfg.rate_m11 {
                    cells.push((sigma, rho1, m12, m11));
                }
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build()?;
    let rows: Vec<Vec<RateCell>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(sigma, rho1, m12, m11)| rate_row(&ode, &phis, &cfg.rate_phi, sigma, rho1, m12, m11))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(rows.into_iter().flatten().collect())
}

fn rate_row(
    ode: &OdeConfig,
    phis: &[f64],
    wanted: &[f64],
    sigma: f64,
    rho1: f64,
    m12: f64,
    m11: f64,
) -> Result<Vec<RateCell>> {
    let q11 = (m11 * m11 + m12 * m12) / rho1;
    let state = controlled_with_free_unit(m11, m12, q11)?;
    let mut at = Vec::with_capacity(phis.len());
    for &phi in phis {
        let r = if q11 > 0.0 {
            let spec = MixtureSpec::new(sigma, phi)?;
            let r = rate_eval(&state, &spec, ode)?;
            (r.dm11, r.drho1)
        } else {
            (f64::NAN, f64::NAN)
        };
        at.push((phi, r));
    }
    let base = at.iter().find(|a| a.0 == 1.0).map(|a| a.1).expect("phi = 1 is always evaluated");
    Ok(at
        .into_iter()
        .filter(|a| wanted.contains(&a.0))
        .map(|(phi, (dm11, drho1))| RateCell {
            sigma,
            rho1,
            m12,
            m11,
            phi,
            dm11,
            drho1,
            boost_dm11: dm11 - base.0,
            boost_drho1: drho1 - base.1,
        })
        .collect())
}

pub fn rates_table(cells: &[RateCell]) -> Table {
    let mut t = Table::new(
        "rates.csv",
        vec![
            col("sigma", "noise level"),
            col("rho1", "relevant share of the free unit"),
            col("m12", "M_12 of the free unit"),
            col("m11", "M_11 of the free unit"),
            col("phi", "fading factor"),
            col("dm11", "dM_11/dt"),
            col("drho1", "drho_1/dt"),
            col("boost_dm11", "dm11 minus its value at phi = 1"),
            col("boost_drho1", "drho1 minus its value at phi = 1"),
        ],
    );
    for c in cells {
        t.push(
            [c.sigma, c.rho1, c.m12, c.m11, c.phi, c.dm11, c.drho1, c.boost_dm11, c.boost_drho1]
                .into_iter()
                .map(fmt_real)
                .collect(),
        );
    }
    t
}

/// A transition matrix for one (σ, K, protocol) group.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionGroup {
    pub k: usize,
    pub protocol: Protocol,
    pub matrix: TransitionMatrix,
}

/// Pairs runs at `σ` and `σ + Δσ` that share everything but σ.
pub fn transitions(outcomes: &[RunOutcome]) -> Result<Vec<TransitionGroup>> {
    // Grid points other than σ, keyed by their debug form, plus the seed.
    let key = |o: &RunOutcome| {
        let mut p = o.spec.point;
        p.sigma = 0.0;
        (format!("{p:?}"), o.spec.seed)
    };
    let mut by_key: BTreeMap<(String, u64), Vec<(f64, u8)>> = BTreeMap::new();
    for o in outcomes {
        if let Ok(r) = &o.result {
            by_key.entry(key(o)).or_default().push((o.spec.point.sigma, r.last().coverage));
        }
    }
    let mut pairs: BTreeMap<(String, u64), (usize, Protocol, Vec<u8>, Vec<u8>)> = BTreeMap::new();
    for o in outcomes {
        let Ok(r) = &o.result else { continue };
        let from = o.spec.point.sigma;
        let to = from + DESTABILISATION_DELTA_SIGMA;
        let Some(&(_, c_to)) = by_key[&key(o)].iter().find(|(s, _)| *s == to) else { continue };
        let group = pairs
            .entry((key(o).0, from.to_bits()))
            .or_insert_with(|| (o.spec.point.k, o.spec.point.protocol, Vec::new(), Vec::new()));
        group.2.push(r.last().coverage);
        group.3.push(c_to);
    }
    let mut out = Vec::new();
    for ((_, bits), (k, protocol, from, to)) in pairs {
        out.push(TransitionGroup {
            k,
            protocol,
            matrix: destabilisation(&from, &to, f64::from_bits(bits))?,
        });
    }
    out.sort_by(|a, b| {
        a.k.cmp(&b.k)
            .then(a.matrix.sigma_from.total_cmp(&b.matrix.sigma_from))
            .then(a.protocol.name().cmp(b.protocol.name()))
    });
    Ok(out)
}

pub fn transitions_table(groups: &[TransitionGroup]) -> Table {
    let mut t = Table::new(
        "transitions.csv",
        vec![
            col("k", "hidden units"),
            col("protocol", "protocol"),
            col("sigma_from", "lower noise level"),
            col("sigma_to", "raised noise level"),
            col("from", "final coverage at sigma_from"),
            col("to", "final coverage at sigma_to"),
            col("count_from", "runs with coverage `from` at sigma_from"),
            col("probability", "fraction of those runs ending at coverage `to`"),
        ],
    );
    for g in groups {
        for i in 0..5 {
            for j in 0..5 {
                t.push(vec![
                    g.k.to_string(),
                    g.protocol.name().to_string(),
                    fmt_real(g.matrix.sigma_from),
                    fmt_real(g.matrix.sigma_to),
                    i.to_string(),
                    j.to_string(),
                    g.matrix.counts[i].to_string(),
                    fmt_real(g.matrix.probs[i][j]),
                ]);
            }
        }
    }
    t
}

/// The expanded difficulty sequence of every run, for auditing.
pub fn schedules_table(cfg: &ExperimentConfig, specs: &[runs::RunSpec]) -> Result<Table> {
    let mut t = Table::new(
        "schedules.csv",
        vec![
            col("run_id", "run identifier"),
            col("step", "step index"),
            col("difficulty", "fading factor or noise level used at this step"),
        ],
    );
    for s in specs {
        let sched = runs::schedule_for(cfg, s)?;
        for (i, &v) in sched.values().iter().enumerate() {
            t.push(vec![s.run_id.clone(), i.to_string(), fmt_real(v)]);
        }
    }
    Ok(t)
}
