//! Difficulty schedules: curriculum, random order and no-fading.
//!
//! A schedule is expanded once into its full per-step sequence of
//! difficulty values (a fading factor or a noise level) and is immutable
//! afterwards.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_pcg::Pcg64Mcg;

use crate::error::{Error, Result};

/// What the schedule's values control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DifficultyChannel {
    /// Fading factor `φ` on the centroid means (base value 1).
    Fading,
    /// Noise level `σ` (base value `σ_hard`).
    Noise,
}

/// Shape of the easy-to-base ramp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ramp {
    Linear,
    /// `levels` equal-duration stages inside the easy window, evenly spaced
    /// from the easy value towards the base value.
    Discrete { levels: usize },
}

/// Presentation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Protocol {
    Curriculum,
    RandomOrder,
    NoFading,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Curriculum, Protocol::RandomOrder, Protocol::NoFading];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Curriculum => "curriculum",
            Protocol::RandomOrder => "random-order",
            Protocol::NoFading => "no-fading",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "curriculum" | "c" => Ok(Protocol::Curriculum),
            "random-order" | "random" | "rand" => Ok(Protocol::RandomOrder),
            "no-fading" | "nf" => Ok(Protocol::NoFading),
            other => Err(Error::param("protocol", format!("unknown protocol `{other}`"))),
        }
    }
}

impl fmt::Display for Ramp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ramp::Linear => f.write_str("linear"),
            Ramp::Discrete { levels } => write!(f, "discrete{levels}"),
        }
    }
}

impl FromStr for Ramp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "linear" {
            return Ok(Ramp::Linear);
        }
        if let Some(n) = s.strip_prefix("discrete") {
            let levels = n
                .parse::<usize>()
                .map_err(|_| Error::param("ramp", format!("bad level count in `{s}`")))?;
            if levels == 0 {
                return Err(Error::param("ramp", "discrete ramp needs at least one level"));
            }
            return Ok(Ramp::Discrete { levels });
        }
        Err(Error::param("ramp", format!("unknown ramp `{s}`")))
    }
}

impl fmt::Display for DifficultyChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DifficultyChannel::Fading => "fading",
            DifficultyChannel::Noise => "noise",
        })
    }
}

impl FromStr for DifficultyChannel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fading" | "norm" => Ok(DifficultyChannel::Fading),
            "noise" | "variance" => Ok(DifficultyChannel::Noise),
            other => Err(Error::param("channel", format!("unknown channel `{other}`"))),
        }
    }
}

/// Everything needed to build a schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSpec {
    pub protocol: Protocol,
    pub channel: DifficultyChannel,
    pub ramp: Ramp,
    /// Value at the start of the curriculum (`φ_max`, or `σ_easy`).
    pub easy_value: f64,
    /// Value outside the easy window (1 for fading, `σ_hard` for noise).
    pub base_value: f64,
    /// Fraction of steps in the easy window, in `(0, 1]`.
    pub alpha: f64,
    pub total_steps: usize,
    /// Permutation seed, used by random order only.
    pub seed: u64,
}

impl ScheduleSpec {
    /// Fading-factor schedule with `φ_max` ramped down to 1.
    pub fn fading(protocol: Protocol, phi_max: f64, alpha: f64, total_steps: usize, seed: u64) -> Self {
        ScheduleSpec {
            protocol,
            channel: DifficultyChannel::Fading,
            ramp: Ramp::Linear,
            easy_value: phi_max,
            base_value: 1.0,
            alpha,
            total_steps,
            seed,
        }
    }

    /// Noise-level schedule with `σ_easy` ramped up to `σ_hard`.
    pub fn noise(protocol: Protocol, sigma_easy: f64, sigma_hard: f64, alpha: f64, total_steps: usize, seed: u64) -> Self {
        ScheduleSpec {
            protocol,
            channel: DifficultyChannel::Noise,
            ramp: Ramp::Linear,
            easy_value: sigma_easy,
            base_value: sigma_hard,
            alpha,
            total_steps,
            seed,
        }
    }

    pub fn with_ramp(mut self, ramp: Ramp) -> Self {
        self.ramp = ramp;
        self
    }

    /// The same schedule with `alpha = easy_steps / total_steps`.
    pub fn with_easy_steps(mut self, easy_steps: usize) -> Self {
        self.alpha = easy_steps as f64 / self.total_steps.max(1) as f64;
        self
    }

    pub fn build(&self) -> Result<Schedule> {
        Schedule::new(*self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    spec: ScheduleSpec,
    values: Vec<f64>,
}

impl Schedule {
    pub fn new(spec: ScheduleSpec) -> Result<Self> {
        if !(spec.alpha > 0.0 && spec.alpha <= 1.0) {
            return Err(Error::param("alpha", format!("must lie in (0, 1], got {}", spec.alpha)));
        }
        if !spec.easy_value.is_finite() || !spec.base_value.is_finite() {
            return Err(Error::param("schedule", "difficulty values must be finite"));
        }
        if spec.easy_value < 0.0 || spec.base_value < 0.0 {
            return Err(Error::param("schedule", "difficulty values must be >= 0"));
        }
        let values = match spec.protocol {
            Protocol::NoFading => vec![spec.base_value; spec.total_steps],
            Protocol::Curriculum => curriculum_values(&spec),
            Protocol::RandomOrder => {
                let mut v = curriculum_values(&spec);
                let mut rng = Pcg64Mcg::seed_from_u64(spec.seed);
                v.shuffle(&mut rng);
                v
            }
        };
        Ok(Schedule { spec, values })
    }

    /// A constant schedule at the base value.
    pub fn constant(value: f64, total_steps: usize, channel: DifficultyChannel) -> Self {
        Schedule {
            spec: ScheduleSpec {
                protocol: Protocol::NoFading,
                channel,
                ramp: Ramp::Linear,
                easy_value: value,
                base_value: value,
                alpha: 1.0,
                total_steps,
                seed: 0,
            },
            values: vec![value; total_steps],
        }
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    pub fn channel(&self) -> DifficultyChannel {
        self.spec.channel
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn difficulty_at(&self, step: usize) -> Result<f64> {
        self.values.get(step).copied().ok_or(Error::StepOutOfRange {
            step,
            len: self.values.len(),
        })
    }

    /// Number of steps inside the easy window.
    pub fn easy_steps(&self) -> usize {
        easy_window(&self.spec)
    }
}

fn easy_window(spec: &ScheduleSpec) -> usize {
    ((spec.alpha * spec.total_steps as f64).round() as usize).min(spec.total_steps)
}

fn curriculum_values(spec: &ScheduleSpec) -> Vec<f64> {
    let window = easy_window(spec);
    let (easy, base) = (spec.easy_value, spec.base_value);
    (0..spec.total_steps)
        .map(|t| {
            if t >= window {
                return base;
            }
            let frac = match spec.ramp {
                Ramp::Linear => t as f64 / window as f64,
                Ramp::Discrete { levels } => (t * levels / window) as f64 / levels as f64,
            };
            easy + (base - easy) * frac
        })
        .collect()
}

/// True iff both schedules present exactly the same multiset of values.
pub fn multiset_check(a: &Schedule, b: &Schedule) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut x = a.values.clone();
    let mut y = b.values.clone();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits())
}
