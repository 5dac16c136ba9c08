//! CSV and manifest writers.
//!
//! Reals are written with 17 significant digits. A run with fewer neurons
//! than the widest run in the file leaves the surplus per-neuron columns empty.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde_json::{json, Value};

use xgm_core::state::OrderState;

use crate::config::ExperimentConfig;
use crate::runs::{RunOutcome, RunResult};
use crate::VERSION;

pub const TRAJECTORIES: &str = "trajectories.csv";
pub const SUMMARY: &str = "summary.csv";
pub const MANIFEST: &str = "manifest.json";

/// Formats a real with 17 significant digits.
pub fn fmt_real(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_real).unwrap_or_default()
}

/// A column name with its manifest description.
#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub doc: String,
}

fn col(name: impl Into<String>, doc: impl Into<String>) -> Column {
    Column {
        name: name.into(),
        doc: doc.into(),
    }
}

/// Header plus rows, written in one go.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub file: String,
    pub columns: Vec<Column>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(file: &str, columns: Vec<Column>) -> Self {
        Table {
            file: file.to_string(),
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(&self.file);
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
        w.write_record(self.columns.iter().map(|c| c.name.as_str()))?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn state_columns(k: usize) -> Vec<Column> {
    OrderState::flat_names(k)
        .into_iter()
        .map(|n| {
            let doc = match n.chars().next() {
                Some('Q') => "first-layer overlap Q_ij = w_i.w_j",
                Some('M') => "teacher overlap M_ia = w_i.mu_a",
                Some('v') => "readout weight v_i",
                _ => "bias b_i",
            };
            col(n, doc)
        })
        .collect()
}

fn geometry_columns(k: usize) -> Vec<Column> {
    (1..=k)
        .flat_map(|i| {
            [
                col(format!("rho_{i}"), "relevant-norm share of neuron i"),
                col(format!("theta_{i}"), "angle of neuron i to mu_1 in the relevant plane (rad)"),
            ]
        })
        .collect()
}

/// Column layout of `trajectories.csv` for this config.
pub fn trajectory_columns(cfg: &ExperimentConfig) -> Vec<Column> {
    let mut cols = vec![
        col("run_id", "run identifier c<config_index>-s<seed>"),
        col("config_index", "index of the grid point"),
        col("seed", "run seed"),
        col("step", "number of completed steps"),
        col("time", "ODE time, step * dt"),
        col("difficulty", "schedule value used by the next step"),
        col("loss", "population loss at phi = 1"),
        col("loss_se", "Monte Carlo standard error of loss"),
        col("zero_noise_error", "classification error on the four centroids"),
        col("coverage", "number of covered centroids"),
        col("gram_min_eig", "smallest eigenvalue of the joint Gram matrix"),
        col("jitter", "largest Cholesky jitter used since the last row"),
    ];
    if cfg.records_state() {
        cols.extend(state_columns(cfg.max_k()));
        cols.extend(geometry_columns(cfg.max_k()));
    }
    cols
}

/// Streams every recorded row of every successful run.
pub fn write_trajectories(dir: &Path, cfg: &ExperimentConfig, outcomes: &[RunOutcome]) -> Result<Vec<Column>> {
    let columns = trajectory_columns(cfg);
    let path = dir.join(TRAJECTORIES);
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(columns.iter().map(|c| c.name.as_str()))?;
    let max_k = cfg.max_k();
    let state_width = OrderState::flat_names(max_k).len();
    for o in outcomes {
        let Ok(res) = &o.result else { continue };
        for r in &res.rows {
            let mut rec = vec![
                o.spec.run_id.clone(),
                o.spec.config_index.to_string(),
                o.spec.seed.to_string(),
                r.step.to_string(),
                fmt_real(r.time),
                fmt_real(r.difficulty),
                fmt_real(r.loss),
                fmt_real(r.loss_se),
                fmt_real(r.zero_noise_error),
                r.coverage.to_string(),
                fmt_real(r.gram_min_eig),
                fmt_real(r.jitter),
            ];
            if let (Some(state), Some(geom)) = (&r.state, &r.geometry) {
                let k = o.spec.point.k;
                rec.extend(padded_state(state, k, max_k));
                debug_assert_eq!(rec.len(), 12 + state_width);
                for i in 0..max_k {
                    match geom.get(i) {
                        Some(&(rho, theta)) => rec.extend([fmt_real(rho), fmt_real(theta)]),
                        None => rec.extend([String::new(), String::new()]),
                    }
                }
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(columns)
}

/// Places a K-neuron flat state into the layout of `max_k` neurons.
fn padded_state(flat: &[f64], k: usize, max_k: usize) -> Vec<String> {
    let names = OrderState::flat_names(k);
    let all = OrderState::flat_names(max_k);
    let mut out = vec![String::new(); all.len()];
    for (name, &x) in names.iter().zip(flat) {
        if let Some(pos) = all.iter().position(|n| n == name) {
            out[pos] = fmt_real(x);
        }
    }
    out
}

/// Which centroids are covered, as four 0/1 digits for `+mu1, -mu1, +mu2, -mu2`.
pub fn covered_mask(covered: &[bool; 4]) -> String {
    covered.iter().map(|&c| if c { '1' } else { '0' }).collect()
}

fn joined(xs: impl Iterator<Item = f64>) -> String {
    xs.map(fmt_real).collect::<Vec<_>>().join(";")
}

pub fn summary_columns() -> Vec<Column> {
    vec![
        col("run_id", "run identifier"),
        col("config_index", "index of the grid point"),
        col("config_hash", "SHA-256 of the resolved config"),
        col("seed", "run seed"),
        col("init_seed", "seed of the initial condition"),
        col("engine", "ode or sgd"),
        col("k", "hidden units"),
        col("sigma", "base noise level"),
        col("protocol", "curriculum, random-order or no-fading"),
        col("channel", "difficulty channel"),
        col("ramp", "difficulty ramp"),
        col("tau", "coverage threshold"),
        col("weight_decay", "L2 strength"),
        col("theta1", "controlled initial angle of neuron 1 (empty for random init)"),
        col("rho1", "controlled initial relevant share of neuron 1 (empty for random init)"),
        col("steps", "number of steps"),
        col("final_loss", "population loss at the final step"),
        col("final_loss_se", "standard error of final_loss"),
        col("final_zero_noise_error", "centroid error at the final step"),
        col("final_coverage", "covered centroids at the final step"),
        col("covered_mask", "coverage of +mu1,-mu1,+mu2,-mu2 as four digits"),
        col("final_m11", "final M_11"),
        col("final_m12", "final M_12"),
        col("final_q11", "final Q_11"),
        col("final_v1", "final v_1"),
        col("rho", "final per-neuron rho, ';'-separated"),
        col("theta", "final per-neuron theta, ';'-separated"),
        col("max_jitter", "largest Cholesky jitter over the run"),
        col("min_gram_eig", "smallest recorded Gram eigenvalue"),
        col("wall_clock_s", "run time in seconds (0 with --reproducible)"),
    ]
}

/// One row per successful run.
pub fn summary_table(cfg: &ExperimentConfig, outcomes: &[RunOutcome], reproducible: bool) -> Table {
    let mut t = Table::new(SUMMARY, summary_columns());
    let hash = cfg.hash();
    for o in outcomes {
        let Ok(res) = &o.result else { continue };
        t.push(summary_row(cfg, &hash, o, res, reproducible));
    }
    t
}

fn summary_row(cfg: &ExperimentConfig, hash: &str, o: &RunOutcome, res: &RunResult, reproducible: bool) -> Vec<String> {
    let p = &o.spec.point;
    let last = res.last();
    let s = &res.final_state;
    vec![
        o.spec.run_id.clone(),
        o.spec.config_index.to_string(),
        hash.to_string(),
        o.spec.seed.to_string(),
        o.spec.init_seed(cfg).to_string(),
        cfg.engine.name().to_string(),
        p.k.to_string(),
        fmt_real(p.sigma),
        p.protocol.name().to_string(),
        p.channel.to_string(),
        p.ramp.to_string(),
        fmt_real(p.tau),
        fmt_real(p.weight_decay),
        fmt_opt(p.theta1),
        fmt_opt(p.rho1),
        cfg.steps.to_string(),
        fmt_real(last.loss),
        fmt_real(last.loss_se),
        fmt_real(last.zero_noise_error),
        last.coverage.to_string(),
        covered_mask(&res.covered),
        fmt_real(s.m[(0, 0)]),
        fmt_real(s.m[(0, 1)]),
        fmt_real(s.q[(0, 0)]),
        fmt_real(s.v[0]),
        joined(res.final_geometry.iter().map(|g| g.0)),
        joined(res.final_geometry.iter().map(|g| g.1)),
        fmt_real(res.max_jitter),
        fmt_real(res.min_gram_eig),
        fmt_real(if reproducible { 0.0 } else { o.wall_clock_s }),
    ]
}

fn columns_json(cols: &[Column]) -> Value {
    Value::Array(cols.iter().map(|c| json!({ "name": c.name, "description": c.doc })).collect())
}

/// Writes `manifest.json`; `files` lists every CSV with its columns.
pub fn write_manifest(
    dir: &Path,
    cfg: &ExperimentConfig,
    outcomes: &[RunOutcome],
    files: &[(&str, &[Column])],
    reproducible: bool,
) -> Result<()> {
    let runs: Vec<Value> = outcomes
        .iter()
        .map(|o| {
            json!({
                "run_id": o.spec.run_id,
                "config_index": o.spec.config_index,
                "seed": o.spec.seed,
                "init_seed": o.spec.init_seed(cfg),
                "status": if o.result.is_ok() { "ok" } else { "failed" },
                "wall_clock_s": if reproducible { 0.0 } else { o.wall_clock_s },
            })
        })
        .collect();
    let failures: Vec<Value> = outcomes
        .iter()
        .filter_map(|o| {
            o.result.as_ref().err().map(|e| {
                json!({
                    "run_id": o.spec.run_id,
                    "config_index": o.spec.config_index,
                    "seed": o.spec.seed,
                    "init_seed": o.spec.init_seed(cfg),
                    "error": e,
                })
            })
        })
        .collect();
    let columns: serde_json::Map<String, Value> =
        files.iter().map(|(name, cols)| (name.to_string(), columns_json(cols))).collect();
    let manifest = json!({
        "software": { "name": "xgm", "version": VERSION },
        "kind": cfg.kind.name(),
        "engine": cfg.engine.name(),
        "config_hash": cfg.hash(),
        "config": cfg.resolved(),
        "seeds": cfg.seeds,
        "reproducible": reproducible,
        "n_runs": outcomes.len(),
        "n_failed": failures.len(),
        "columns": columns,
        "runs": runs,
        "failures": failures,
    });
    let path = dir.join(MANIFEST);
    let mut f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    writeln!(f)?;
    Ok(())
}
