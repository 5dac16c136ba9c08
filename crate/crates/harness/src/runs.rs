//! Grid expansion and execution of individual runs.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::Rng;
use rand_pcg::Pcg64;
use rayon::prelude::*;

use xgm_core::dynamics::{integrate, snapshot, spec_at, OdeConfig, TrajectoryRow};
use xgm_core::finite_net::{FiniteNet, SgdConfig};
use xgm_core::metrics::{coverage, DESTABILISATION_DELTA_SIGMA};
use xgm_core::mixture::{fill_input, random_cluster, MixtureSpec};
use xgm_core::schedule::{DifficultyChannel, Protocol, Ramp, Schedule, ScheduleSpec};
use xgm_core::state::{controlled_init, random_init, OrderState};
use xgm_core::Error;

use crate::config::{Engine, ExperimentConfig, ExperimentKind, InitKind};

const INIT_STREAM: u128 = 11;
const PERMUTATION_STREAM: u128 = 12;
const SAMPLE_STREAM: u128 = 13;

/// One cell of the experiment grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub k: usize,
    pub sigma: f64,
    pub protocol: Protocol,
    pub tau: f64,
    pub weight_decay: f64,
    pub channel: DifficultyChannel,
    pub ramp: Ramp,
    pub theta1: Option<f64>,
    pub rho1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub run_id: String,
    pub config_index: usize,
    pub seed: u64,
    pub point: GridPoint,
}

impl RunSpec {
    /// Seed of the initial condition; shared by every run with this seed.
    pub fn init_seed(&self, cfg: &ExperimentConfig) -> u64 {
        cfg.init_seed.unwrap_or(self.seed)
    }
}

/// Noise levels actually simulated; destabilisation adds `σ + Δσ` for each `σ`.
pub fn simulated_sigmas(cfg: &ExperimentConfig) -> Vec<f64> {
    if cfg.kind == ExperimentKind::Destabilisation {
        cfg.sigma.iter().flat_map(|&s| [s, s + DESTABILISATION_DELTA_SIGMA]).collect()
    } else {
        cfg.sigma.clone()
    }
}

/// Grid points in a fixed order: K, σ, protocol, weight decay, τ, channel,
/// ramp, then θ₁ and ρ₁ for controlled runs.
pub fn grid(cfg: &ExperimentConfig) -> Vec<GridPoint> {
    let controlled = cfg.init == InitKind::Controlled;
    let thetas: Vec<Option<f64>> = if controlled { cfg.theta1.iter().map(|&t| Some(t)).collect() } else { vec![None] };
    let rhos: Vec<Option<f64>> = if controlled { cfg.rho1.iter().map(|&r| Some(r)).collect() } else { vec![None] };
    let mut out = Vec::new();
    for &k in &cfg.k {
        for sigma in simulated_sigmas(cfg) {
            for &protocol in &cfg.protocol {
                for &weight_decay in &cfg.weight_decay {
                    for &tau in &cfg.tau {
                        for &channel in &cfg.channel {
                            for &ramp in &cfg.ramp {
                                for &rho1 in &rhos {
                                    for &theta1 in &thetas {
                                        out.push(GridPoint {
                                            k,
                                            sigma,
                                            protocol,
                                            tau,
                                            weight_decay,
                                            channel,
                                            ramp,
                                            theta1,
                                            rho1,
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Every run of the experiment, ordered by (config index, seed).
pub fn expand(cfg: &ExperimentConfig) -> Vec<RunSpec> {
    let mut specs = Vec::new();
    for (config_index, point) in grid(cfg).into_iter().enumerate() {
        for &seed in &cfg.seeds {
            specs.push(RunSpec {
                run_id: format!("c{config_index:04}-s{seed}"),
                config_index,
                seed,
                point,
            });
        }
    }
    specs
}

pub fn schedule_for(cfg: &ExperimentConfig, spec: &RunSpec) -> Result<Schedule, Error> {
    let p = &spec.point;
    let perm_seed = Pcg64::new(spec.seed as u128, PERMUTATION_STREAM).next_u64();
    let base = match p.channel {
        DifficultyChannel::Fading => ScheduleSpec::fading(p.protocol, cfg.phi_max, cfg.alpha, cfg.steps, perm_seed),
        DifficultyChannel::Noise => ScheduleSpec::noise(p.protocol, cfg.sigma_easy, p.sigma, cfg.alpha, cfg.steps, perm_seed),
    }
    .with_ramp(p.ramp);
    match cfg.easy_steps {
        Some(n) => base.with_easy_steps(n).build(),
        None => base.build(),
    }
}

pub fn initial_state(cfg: &ExperimentConfig, spec: &RunSpec) -> Result<OrderState, Error> {
    match cfg.init {
        InitKind::Random => {
            let mut rng = Pcg64::new(spec.init_seed(cfg) as u128, INIT_STREAM);
            random_init(spec.point.k, cfg.d0, &mut rng)
        }
        InitKind::Controlled => controlled_init(spec.point.theta1.unwrap_or(0.0), spec.point.rho1.unwrap_or(0.0)),
    }
}

pub fn ode_config(cfg: &ExperimentConfig, spec: &RunSpec) -> OdeConfig {
    OdeConfig {
        eta_tilde: cfg.eta_tilde,
        mc_samples: cfg.mc_samples,
        weight_decay: spec.point.weight_decay,
        decay_both_layers: cfg.decay_both_layers,
        steps: cfg.steps,
        record_every: cfg.record_every,
        seed: spec.seed,
        dt: cfg.dt,
        base_jitter: cfg.base_jitter,
        loss_samples: cfg.loss_samples,
        tau: spec.point.tau,
        psd_tolerance: cfg.psd_tolerance,
    }
}

/// A recorded row, with the state kept only when requested.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub step: usize,
    pub time: f64,
    pub difficulty: f64,
    pub loss: f64,
    pub loss_se: f64,
    pub zero_noise_error: f64,
    pub coverage: u8,
    pub gram_min_eig: f64,
    pub jitter: f64,
    pub state: Option<Vec<f64>>,
    pub geometry: Option<Vec<(f64, f64)>>,
}

impl Row {
    fn from_trajectory(r: TrajectoryRow, keep_state: bool) -> Self {
        Row {
            step: r.step,
            time: r.time,
            difficulty: r.difficulty,
            loss: r.loss,
            loss_se: r.loss_se,
            zero_noise_error: r.zero_noise_error,
            coverage: r.coverage,
            gram_min_eig: r.gram_min_eig,
            jitter: r.jitter,
            state: keep_state.then(|| r.state.to_flat()),
            geometry: keep_state.then_some(r.geometry),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub rows: Vec<Row>,
    pub final_state: OrderState,
    /// Final per-neuron `(ρ, θ)` relative to `μ₁`.
    pub final_geometry: Vec<(f64, f64)>,
    /// Which of `+μ₁, −μ₁, +μ₂, −μ₂` end up covered.
    pub covered: [bool; 4],
    pub max_jitter: f64,
    pub min_gram_eig: f64,
}

impl RunResult {
    pub fn last(&self) -> &Row {
        self.rows.last().expect("every run records its initial row")
    }

    fn from_rows(rows: Vec<TrajectoryRow>, max_jitter: f64, keep_state: bool, tau: f64) -> Result<Self, Error> {
        let last = rows.last().expect("every run records its initial row");
        let final_state = last.state.clone();
        let final_geometry = last.geometry.clone();
        let report = coverage(&final_state, tau)?;
        let min_gram_eig = rows.iter().map(|r| r.gram_min_eig).fold(f64::INFINITY, f64::min);
        let covered = report.per_centroid.map(|c| c.is_some());
        Ok(RunResult {
            rows: rows.into_iter().map(|r| Row::from_trajectory(r, keep_state)).collect(),
            final_state,
            final_geometry,
            covered,
            max_jitter,
            min_gram_eig,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub spec: RunSpec,
    pub result: Result<RunResult, String>,
    pub wall_clock_s: f64,
}

/// Runs one trajectory with the configured engine.
pub fn run_one(cfg: &ExperimentConfig, spec: &RunSpec) -> Result<RunResult, Error> {
    let state0 = initial_state(cfg, spec)?;
    let schedule = schedule_for(cfg, spec)?;
    let base = MixtureSpec::new(spec.point.sigma, 1.0)?;
    let ode = ode_config(cfg, spec);
    let keep = cfg.records_state();
    match cfg.engine {
        Engine::Ode => {
            let rec = integrate(&state0, &base, &schedule, &ode)?;
            RunResult::from_rows(rec.rows, rec.max_jitter, keep, ode.tau)
        }
        Engine::Sgd => {
            let rows = sgd_trajectory(&state0, &base, &schedule, &ode, cfg.sgd_d, spec.seed)?;
            RunResult::from_rows(rows, 0.0, keep, ode.tau)
        }
    }
}

/// Finite-d SGD from `state0` embedded in `d` dimensions.
///
/// Each step presents `round(dt · d)` samples at step size `η̃ / d`, which is
/// one ODE step of length `dt`. Rows hold the measured order parameters.
pub fn sgd_trajectory(
    state0: &OrderState,
    base: &MixtureSpec,
    schedule: &Schedule,
    ode: &OdeConfig,
    d: usize,
    seed: u64,
) -> Result<Vec<TrajectoryRow>, Error> {
    ode.validate()?;
    let mut net = FiniteNet::embed(state0, d)?;
    let sgd = SgdConfig {
        decay_both_layers: ode.decay_both_layers,
        ..SgdConfig::ode_matched(ode.eta_tilde, ode.weight_decay, d)?
    };
    let per_step = ((ode.dt * d as f64).round() as usize).max(1);
    let eval_spec = match schedule.channel() {
        DifficultyChannel::Fading => base.with_fading(1.0)?,
        DifficultyChannel::Noise => MixtureSpec::new(schedule.spec().base_value, 1.0)?,
    };
    let mut sample_rng = Pcg64::new(seed as u128, SAMPLE_STREAM);
    let mut eval_rng = Pcg64::new(seed as u128, SAMPLE_STREAM + 1);
    let mut buf = vec![0.0; d];
    let first = schedule.values().first().copied().unwrap_or(schedule.spec().base_value);
    let mut rows = vec![snapshot(0, first, state0, &eval_spec, ode, 0.0, &mut eval_rng)?];
    for t in 0..ode.steps {
        let value = schedule.difficulty_at(t)?;
        let spec = spec_at(base, schedule.channel(), value)?;
        for _ in 0..per_step {
            let cluster = random_cluster(&mut sample_rng);
            fill_input(&mut buf, &spec, cluster, &mut sample_rng)?;
            net.step(&buf, cluster.label(), &sgd).map_err(|e| e.at_step(t))?;
        }
        let done = t + 1;
        if done % ode.record_every == 0 || done == ode.steps {
            let state = net.measure_order_params();
            if !state.to_flat().iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite("state").at_step(done));
            }
            let next = schedule.difficulty_at(done).unwrap_or(value);
            rows.push(snapshot(done, next, &state, &eval_spec, ode, 0.0, &mut eval_rng).map_err(|e| e.at_step(done))?);
        }
    }
    Ok(rows)
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "unknown panic".to_string()
    }
}

/// Runs `spec`, turning errors and panics into a failed outcome.
pub fn execute(cfg: &ExperimentConfig, spec: &RunSpec) -> RunOutcome {
    let t0 = Instant::now();
    let result = match catch_unwind(AssertUnwindSafe(|| run_one(cfg, spec))) {
        Ok(Ok(r)) => Ok(r),
        Ok(Err(e)) => Err(e.to_string()),
        Err(p) => Err(format!("panic: {}", panic_message(p))),
    };
    RunOutcome {
        spec: spec.clone(),
        result,
        wall_clock_s: t0.elapsed().as_secs_f64(),
    }
}

/// Executes every run on `workers` threads; outcomes keep the order of `specs`.
pub fn execute_all(cfg: &ExperimentConfig, specs: &[RunSpec], workers: usize) -> Vec<RunOutcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| specs.par_iter().map(|s| execute(cfg, s)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ExperimentKind) -> ExperimentConfig {
        ExperimentConfig {
            steps: 20,
            record_every: 10,
            mc_samples: 200,
            loss_samples: 200,
            seeds: vec![0, 1],
            d0: 100,
            ..ExperimentConfig::defaults(kind)
        }
    }

    #[test]
    fn grid_row_count() {
        let cfg = ExperimentConfig {
            seeds: (0..100).collect(),
            ..ExperimentConfig::defaults(ExperimentKind::ProtocolCompare)
        };
        assert_eq!(expand(&cfg).len(), 300);
        let d = ExperimentConfig::defaults(ExperimentKind::Destabilisation);
        assert_eq!(grid(&d).len(), 6);
    }

    #[test]
    fn run_ids_are_unique_and_ordered() {
        let cfg = small(ExperimentKind::LotterySweep);
        let specs = expand(&cfg);
        let mut ids: Vec<&str> = specs.iter().map(|s| s.run_id.as_str()).collect();
        assert!(specs.windows(2).all(|w| (w[0].config_index, w[0].seed) < (w[1].config_index, w[1].seed)));
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), specs.len());
    }

    #[test]
    fn protocols_share_the_initial_state() {
        let cfg = small(ExperimentKind::ProtocolCompare);
        let specs = expand(&cfg);
        let same_seed: Vec<&RunSpec> = specs.iter().filter(|s| s.seed == 1).collect();
        let s0 = initial_state(&cfg, same_seed[0]).unwrap();
        for s in &same_seed[1..] {
            assert_eq!(initial_state(&cfg, s).unwrap(), s0);
        }
    }

    #[test]
    fn failures_are_isolated() {
        let mut cfg = small(ExperimentKind::ProtocolCompare);
        // A negative noise level slips past validation here and fails inside the run.
        cfg.sigma = vec![0.4, -1.0];
        let specs = expand(&cfg);
        let out = execute_all(&cfg, &specs, 2);
        assert_eq!(out.len(), specs.len());
        for o in &out {
            assert_eq!(o.result.is_err(), o.spec.point.sigma < 0.0, "{}", o.spec.run_id);
        }
    }

    #[test]
    fn sgd_engine_shares_the_row_schema() {
        let mut cfg = small(ExperimentKind::ProtocolCompare);
        cfg.engine = Engine::Sgd;
        cfg.sgd_d = 200;
        let spec = &expand(&cfg)[0];
        let r = run_one(&cfg, spec).unwrap();
        assert_eq!(r.rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 10, 20]);
        assert_eq!(r.rows[0].state.as_ref().unwrap().len(), OrderState::flat_names(4).len());
    }
}
