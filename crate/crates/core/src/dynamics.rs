//! Euler integration of the order-parameter ODE.
//!
//! One step of unit length advances the state by
//!
//! ```text
//! dQ_kl = η̃ (v_k A_kl + v_l A_lk) + η̃² v_k v_l B_kl − 2 η̃ λ Q_kl
//! dM_kα = η̃ v_k A_k,K+α − η̃ λ M_kα
//! dv_k  = η̃ D_k
//! db_k  = η̃ v_k E_k
//! ```
//!
//! where `λ` is the first-layer weight decay. A step of length `dt` scales
//! every increment by `dt`.

use nalgebra::{DMatrix, DVector};
use rand_pcg::Pcg64;

use crate::error::{Error, Result};
use crate::metrics::{coverage, population_loss, zero_noise_error, DEFAULT_TAU};
use crate::mixture::{Axis, MixtureSpec};
use crate::moments::{estimate_expectations, EstimatorOptions, ExpectationSet, DEFAULT_BASE_JITTER};
use crate::schedule::{DifficultyChannel, Schedule};
use crate::state::OrderState;

/// Default ODE time per step. Unit steps are unstable at `η̃ = 2.5`, `φ = 3`.
pub const DEFAULT_DT: f64 = 0.02;

/// Integrator and evaluation settings for one trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeConfig {
    pub eta_tilde: f64,
    /// Monte-Carlo samples per step for `A, B, D, E`.
    pub mc_samples: usize,
    pub weight_decay: f64,
    pub decay_both_layers: bool,
    pub steps: usize,
    pub record_every: usize,
    pub seed: u64,
    /// Time advanced per step.
    pub dt: f64,
    pub base_jitter: f64,
    /// Monte-Carlo samples for the population loss at each record.
    pub loss_samples: usize,
    pub tau: f64,
    /// Recorded states whose Gram matrix has an eigenvalue below `−psd_tolerance` fail the run.
    pub psd_tolerance: f64,
}

impl Default for OdeConfig {
    fn default() -> Self {
        OdeConfig {
            eta_tilde: 2.5,
            mc_samples: 4000,
            weight_decay: 0.0,
            decay_both_layers: false,
            steps: 10_000,
            record_every: 50,
            seed: 0,
            dt: DEFAULT_DT,
            base_jitter: DEFAULT_BASE_JITTER,
            loss_samples: 4000,
            tau: DEFAULT_TAU,
            psd_tolerance: 1e-6,
        }
    }
}

impl OdeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_tilde > 0.0 && self.eta_tilde.is_finite()) {
            return Err(Error::param("eta_tilde", "must be positive"));
        }
        if self.mc_samples == 0 {
            return Err(Error::param("mc_samples", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::param("weight_decay", "must be >= 0"));
        }
        if self.record_every == 0 {
            return Err(Error::param("record_every", "must be positive"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::param("dt", "must be positive"));
        }
        if self.loss_samples == 0 {
            return Err(Error::param("loss_samples", "must be positive"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::param("tau", "must be positive"));
        }
        if !(self.psd_tolerance >= 0.0) {
            return Err(Error::param("psd_tolerance", "must be >= 0"));
        }
        Ok(())
    }

    fn estimator(&self) -> EstimatorOptions {
        EstimatorOptions {
            base_jitter: self.base_jitter,
            ..EstimatorOptions::new(self.mc_samples)
        }
    }
}

/// The change of every order parameter over one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StateIncrement {
    pub dq: DMatrix<f64>,
    pub dm: DMatrix<f64>,
    pub dv: DVector<f64>,
    pub db: DVector<f64>,
}

impl StateIncrement {
    pub fn apply(&self, state: &OrderState) -> OrderState {
        let mut q = &state.q + &self.dq;
        let qt = q.transpose();
        q = (q + qt) * 0.5;
        OrderState {
            q,
            m: &state.m + &self.dm,
            v: &state.v + &self.dv,
            b: &state.b + &self.db,
            t: state.t,
        }
    }
}

/// Increment of one Euler step, without committing it.
pub fn ode_increment(state: &OrderState, exp: &ExpectationSet, cfg: &OdeConfig) -> Result<StateIncrement> {
    let k = state.k();
    if exp.k() != k {
        return Err(Error::DimensionMismatch { expected: k, got: exp.k() });
    }
    if !exp.all_finite() {
        return Err(Error::NonFinite("expectations"));
    }
    let eta = cfg.eta_tilde * cfg.dt;
    let eta2 = cfg.eta_tilde * cfg.eta_tilde * cfg.dt;
    let decay = cfg.eta_tilde * cfg.weight_decay * cfg.dt;
    let v = &state.v;
    let dq = DMatrix::from_fn(k, k, |i, j| {
        eta * (v[i] * exp.a[(i, j)] + v[j] * exp.a[(j, i)]) + eta2 * v[i] * v[j] * exp.b[(i, j)]
            - 2.0 * decay * state.q[(i, j)]
    });
    let dm = DMatrix::from_fn(k, 2, |i, a| eta * v[i] * exp.a[(i, k + a)] - decay * state.m[(i, a)]);
    let mut dv = &exp.d * eta;
    if cfg.decay_both_layers {
        dv -= v * decay;
    }
    let db = DVector::from_fn(k, |i, _| eta * v[i] * exp.e[i]);
    Ok(StateIncrement { dq, dm, dv, db })
}

/// One explicit Euler step.
pub fn ode_step(state: &OrderState, exp: &ExpectationSet, cfg: &OdeConfig) -> Result<OrderState> {
    Ok(ode_increment(state, exp, cfg)?.apply(state))
}

/// Mixture in force at a given schedule value.
pub fn spec_at(base: &MixtureSpec, channel: DifficultyChannel, value: f64) -> Result<MixtureSpec> {
    match channel {
        DifficultyChannel::Fading => base.with_fading(value),
        DifficultyChannel::Noise => base.with_sigma(value),
    }
}

/// One recorded snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub step: usize,
    pub time: f64,
    /// Schedule value used for the step that starts here (the last one for the final row).
    pub difficulty: f64,
    pub state: OrderState,
    pub loss: f64,
    pub loss_se: f64,
    pub zero_noise_error: f64,
    pub coverage: u8,
    /// Per-neuron `(ρ, θ)` relative to `μ₁`; NaN for a zero-norm neuron.
    pub geometry: Vec<(f64, f64)>,
    pub gram_min_eig: f64,
    /// Largest covariance jitter used since the previous row.
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub rows: Vec<TrajectoryRow>,
    /// Largest jitter used anywhere along the trajectory.
    pub max_jitter: f64,
}

impl TrajectoryRecord {
    pub fn last(&self) -> &TrajectoryRow {
        self.rows.last().expect("a trajectory always holds its initial row")
    }
}

/// Evaluates the recorded metrics of `state`. Test metrics use `φ = 1`.
pub fn snapshot<R: rand::Rng + ?Sized>(
    step: usize,
    difficulty: f64,
    state: &OrderState,
    eval_spec: &MixtureSpec,
    cfg: &OdeConfig,
    jitter: f64,
    rng: &mut R,
) -> Result<TrajectoryRow> {
    let l = population_loss(state, eval_spec, cfg.loss_samples, cfg.base_jitter, rng)?;
    let geometry = (0..state.k())
        .map(|k| match state.neuron_geometry(k, Axis::One) {
            Ok(g) => (g.rho, g.theta),
            Err(_) => (f64::NAN, f64::NAN),
        })
        .collect();
    Ok(TrajectoryRow {
        step,
        time: step as f64 * cfg.dt,
        difficulty,
        state: state.clone(),
        loss: l.mean,
        loss_se: l.se,
        zero_noise_error: zero_noise_error(state),
        coverage: coverage(state, cfg.tau)?.covered,
        geometry,
        gram_min_eig: state.gram_min_eigenvalue(),
        jitter,
    })
}

/// Stream selectors for the per-run random generators.
const DYNAMICS_STREAM: u128 = 1;
const EVAL_STREAM: u128 = 2;

/// Integrates `cfg.steps` Euler steps under `schedule`.
///
/// `base` supplies the noise level for the fading channel and the
/// evaluation distribution for both channels; the evaluation always uses
/// `φ = 1`. Dynamics and evaluation draw from separate streams, so the
/// recording cadence never changes the trajectory.
pub fn integrate(state0: &OrderState, base: &MixtureSpec, schedule: &Schedule, cfg: &OdeConfig) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    if schedule.len() < cfg.steps {
        return Err(Error::param(
            "schedule",
            format!("holds {} steps but {} were requested", schedule.len(), cfg.steps),
        ));
    }
    let eval_spec = match schedule.channel() {
        DifficultyChannel::Fading => base.with_fading(1.0)?,
        DifficultyChannel::Noise => MixtureSpec::new(schedule.spec().base_value, 1.0)?,
    };
    let mut dyn_rng = Pcg64::new(cfg.seed as u128, DYNAMICS_STREAM);
    let mut eval_rng = Pcg64::new(cfg.seed as u128, EVAL_STREAM);
    let opts = cfg.estimator();

    let first_difficulty = schedule.values().first().copied().unwrap_or(schedule.spec().base_value);
    let mut rows = vec![snapshot(0, first_difficulty, state0, &eval_spec, cfg, 0.0, &mut eval_rng)?];
    let mut state = state0.clone();
    let mut window_jitter = 0.0f64;
    let mut max_jitter = 0.0f64;

    for t in 0..cfg.steps {
        let value = schedule.difficulty_at(t)?;
        let spec = spec_at(base, schedule.channel(), value).map_err(|e| e.at_step(t))?;
        let exp = estimate_expectations(&state, &spec, &opts, &mut dyn_rng).map_err(|e| e.at_step(t))?;
        window_jitter = window_jitter.max(exp.jitter);
        max_jitter = max_jitter.max(exp.jitter);
        state = ode_step(&state, &exp, cfg).map_err(|e| e.at_step(t))?;
        if !state.to_flat().iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("state").at_step(t + 1));
        }
        let done = t + 1;
        if done % cfg.record_every == 0 || done == cfg.steps {
            let next = schedule.difficulty_at(done).unwrap_or(value);
            let row = snapshot(done, next, &state, &eval_spec, cfg, window_jitter, &mut eval_rng).map_err(|e| e.at_step(done))?;
            if row.gram_min_eig < -cfg.psd_tolerance {
                let msg = format!("Gram matrix eigenvalue {:.3e} below -{:.1e}", row.gram_min_eig, cfg.psd_tolerance);
                return Err(Error::NotRealisable(msg).at_step(done));
            }
            rows.push(row);
            window_jitter = 0.0;
        }
    }
    Ok(TrajectoryRecord { rows, max_jitter })
}

/// Instantaneous growth of the free neuron's alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct RateEval {
    pub dm11: f64,
    pub drho1: f64,
    pub increment: StateIncrement,
}

/// One-step rates of `M₁₁` and `ρ₁` at `state`, under `spec`.
pub fn rate_eval(state: &OrderState, spec: &MixtureSpec, cfg: &OdeConfig) -> Result<RateEval> {
    let q11 = state.q[(0, 0)];
    if !(q11 > 0.0) {
        return Err(Error::ZeroNorm(0));
    }
    let mut rng = Pcg64::new(cfg.seed as u128, DYNAMICS_STREAM);
    let exp = estimate_expectations(state, spec, &cfg.estimator(), &mut rng)?;
    let increment = ode_increment(state, &exp, cfg)?;
    Ok(rates_from_increment(state, increment))
}

/// Chain rule for `ρ₁ = (M₁₁² + M₁₂²) / Q₁₁`.
pub fn rates_from_increment(state: &OrderState, increment: StateIncrement) -> RateEval {
    let q11 = state.q[(0, 0)];
    let (m11, m12) = (state.m[(0, 0)], state.m[(0, 1)]);
    let rho = (m11 * m11 + m12 * m12) / q11;
    let (dm11, dm12) = (increment.dm[(0, 0)], increment.dm[(0, 1)]);
    let drho1 = (2.0 * m11 * dm11 + 2.0 * m12 * dm12) / q11 - rho * increment.dq[(0, 0)] / q11;
    RateEval { dm11, drho1, increment }
}
