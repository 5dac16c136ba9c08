//! Flat `key = value` experiment configuration.
//!
//! One entry per line, `#` starts a comment, lists are comma-separated and
//! integer lists also accept a half-open range `a..b`. Keys mirror the
//! fields of [`ExperimentConfig`]; unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use xgm_core::schedule::{DifficultyChannel, Protocol, Ramp};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: key `{key}` given twice (first on line {first})")]
    Duplicate { key: String, line: usize, first: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },
    #[error("line {line}: key `{key}`: {msg}")]
    BadValue { key: String, line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read {path}: {msg}")]
    Io { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    LotterySweep,
    ProtocolCompare,
    ControlledTheta,
    RateHeatmap,
    Interplay,
    Regularisation,
    DifficultyVariants,
    Destabilisation,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::LotterySweep => "lottery-sweep",
            ExperimentKind::ProtocolCompare => "protocol-compare",
            ExperimentKind::ControlledTheta => "controlled-theta",
            ExperimentKind::RateHeatmap => "rate-heatmap",
            ExperimentKind::Interplay => "interplay",
            ExperimentKind::Regularisation => "regularisation",
            ExperimentKind::DifficultyVariants => "difficulty-variants",
            ExperimentKind::Destabilisation => "destabilisation",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "lottery-sweep" => ExperimentKind::LotterySweep,
            "protocol-compare" => ExperimentKind::ProtocolCompare,
            "controlled-theta" => ExperimentKind::ControlledTheta,
            "rate-heatmap" => ExperimentKind::RateHeatmap,
            "interplay" => ExperimentKind::Interplay,
            "regularisation" => ExperimentKind::Regularisation,
            "difficulty-variants" => ExperimentKind::DifficultyVariants,
            "destabilisation" => ExperimentKind::Destabilisation,
            other => return Err(format!("unknown experiment kind `{other}`")),
        })
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which learner a run simulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Engine {
    Ode,
    Sgd,
}

impl Engine {
    pub fn name(self) -> &'static str {
        match self {
            Engine::Ode => "ode",
            Engine::Sgd => "sgd",
        }
    }
}

impl FromStr for Engine {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ode" => Ok(Engine::Ode),
            "sgd" => Ok(Engine::Sgd),
            other => Err(format!("unknown engine `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    Random,
    Controlled,
}

impl FromStr for InitKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "random" => Ok(InitKind::Random),
            "controlled" => Ok(InitKind::Controlled),
            other => Err(format!("unknown init `{other}`")),
        }
    }
}

/// A fully resolved experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub engine: Engine,

    // Grid axes.
    pub k: Vec<usize>,
    pub sigma: Vec<f64>,
    #[serde(serialize_with = "ser_display_list")]
    pub protocol: Vec<Protocol>,
    pub tau: Vec<f64>,
    pub weight_decay: Vec<f64>,
    #[serde(serialize_with = "ser_display_list")]
    pub channel: Vec<DifficultyChannel>,
    #[serde(serialize_with = "ser_display_list")]
    pub ramp: Vec<Ramp>,
    pub theta1: Vec<f64>,
    pub rho1: Vec<f64>,
    pub seeds: Vec<u64>,

    // Schedule.
    pub phi_max: f64,
    pub sigma_easy: f64,
    pub alpha: f64,
    pub easy_steps: Option<usize>,

    // Initialisation.
    pub init: InitKind,
    pub d0: usize,
    pub init_seed: Option<u64>,

    // Integrator.
    pub eta_tilde: f64,
    pub mc_samples: usize,
    pub loss_samples: usize,
    pub steps: usize,
    pub record_every: usize,
    pub dt: f64,
    pub base_jitter: f64,
    pub psd_tolerance: f64,
    pub decay_both_layers: bool,

    // Finite-d reference runs.
    pub sgd_d: usize,

    // Rate heatmap grid.
    pub rate_phi: Vec<f64>,
    pub rate_m11: Vec<f64>,
    pub rate_m12: Vec<f64>,

    // Outputs.
    pub record_state: Option<bool>,
    pub dump_schedules: bool,
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

fn ser_display_list<T: fmt::Display, S: serde::Serializer>(v: &[T], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|x| x.to_string()))
}

impl ExperimentConfig {
    /// Defaults for a given experiment kind.
    pub fn defaults(kind: ExperimentKind) -> Self {
        let mut c = ExperimentConfig {
            kind,
            engine: Engine::Ode,
            k: vec![4],
            sigma: vec![0.4],
            protocol: vec![Protocol::NoFading],
            tau: vec![xgm_core::metrics::DEFAULT_TAU],
            weight_decay: vec![0.0],
            channel: vec![DifficultyChannel::Fading],
            ramp: vec![Ramp::Linear],
            theta1: vec![0.0],
            rho1: vec![0.1],
            seeds: (0..10).collect(),
            phi_max: 3.0,
            sigma_easy: 0.1,
            alpha: 0.1,
            easy_steps: None,
            init: InitKind::Random,
            d0: 100_000,
            init_seed: None,
            eta_tilde: 2.5,
            mc_samples: 4000,
            loss_samples: 4000,
            steps: 10_000,
            record_every: 50,
            dt: DEFAULT_DT,
            base_jitter: xgm_core::moments::DEFAULT_BASE_JITTER,
            psd_tolerance: 1e-6,
            decay_both_layers: false,
            sgd_d: 4000,
            rate_phi: linspace(1.0, 3.0, 21),
            rate_m11: linspace(0.0, 1.0, 21),
            rate_m12: vec![0.1, 0.8],
            record_state: None,
            dump_schedules: false,
            out: None,
        };
        match kind {
            ExperimentKind::LotterySweep => {
                c.k = vec![4, 8, 16];
                c.sigma = vec![0.3, 0.4, 0.5];
            }
            ExperimentKind::ProtocolCompare | ExperimentKind::Destabilisation => {
                c.protocol = Protocol::ALL.to_vec();
            }
            ExperimentKind::ControlledTheta => {
                c.init = InitKind::Controlled;
                c.sigma = vec![1.0];
                c.protocol = vec![Protocol::Curriculum, Protocol::RandomOrder];
                c.theta1 = linspace(0.0, std::f64::consts::PI, 16);
            }
            ExperimentKind::RateHeatmap => {
                c.sigma = vec![1.0];
                c.rho1 = vec![0.8];
            }
            ExperimentKind::Interplay => {
                c.k = vec![4, 64];
                c.protocol = vec![Protocol::Curriculum, Protocol::NoFading];
                c.easy_steps = Some(1000);
            }
            ExperimentKind::Regularisation => {
                c.protocol = vec![Protocol::Curriculum, Protocol::NoFading];
                c.weight_decay = vec![0.0, 1e-4, 1e-3, 1e-2];
            }
            ExperimentKind::DifficultyVariants => {
                c.protocol = vec![Protocol::Curriculum, Protocol::NoFading];
                c.ramp = vec![Ramp::Linear, Ramp::Discrete { levels: 1 }, Ramp::Discrete { levels: 2 }];
            }
        }
        c
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::load(text, &[], ExperimentKind::ProtocolCompare)
    }

    /// Parses `text`, then applies `key=value` overrides (reported as line 0),
    /// using `default_kind` when neither names a kind.
    pub fn load(text: &str, overrides: &[String], default_kind: ExperimentKind) -> Result<Self, ConfigError> {
        let mut raw = RawConfig::parse(text)?;
        for o in overrides {
            let Some((key, value)) = o.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: 0,
                    msg: format!("override `{o}` is not `key=value`"),
                });
            };
            raw.entries.insert(
                key.trim().to_string(),
                Entry {
                    value: value.trim().to_string(),
                    line: 0,
                },
            );
        }
        let kind = match raw.get("kind") {
            Some(e) => e.value.parse().map_err(|msg| e.bad("kind", msg))?,
            None => default_kind,
        };
        let mut c = ExperimentConfig::defaults(kind);
        for (key, e) in &raw.entries {
            c.set(key, e)?;
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, key: &str, e: &Entry) -> Result<(), ConfigError> {
        let v = e.value.as_str();
        let bad = |msg: String| e.bad(key, msg);
        match key {
            "kind" => {}
            "engine" => self.engine = v.parse().map_err(bad)?,
            "k" => self.k = parse_int_list(v).map_err(bad)?,
            "sigma" => self.sigma = parse_list(v).map_err(bad)?,
            "protocol" => self.protocol = parse_list_with(v, |s| s.parse::<Protocol>().map_err(|e| e.to_string())).map_err(bad)?,
            "tau" => self.tau = parse_list(v).map_err(bad)?,
            "weight_decay" => self.weight_decay = parse_list(v).map_err(bad)?,
            "channel" => {
                self.channel = parse_list_with(v, |s| s.parse::<DifficultyChannel>().map_err(|e| e.to_string())).map_err(bad)?
            }
            "ramp" => self.ramp = parse_list_with(v, |s| s.parse::<Ramp>().map_err(|e| e.to_string())).map_err(bad)?,
            "theta1" => self.theta1 = parse_grid(v).map_err(bad)?,
            "rho1" => self.rho1 = parse_list(v).map_err(bad)?,
            "seeds" => self.seeds = parse_int_list(v).map_err(bad)?,
            "n_seeds" => self.seeds = (0..parse_one::<u64>(v).map_err(bad)?).collect(),
            "phi_max" => self.phi_max = parse_one(v).map_err(bad)?,
            "sigma_easy" => self.sigma_easy = parse_one(v).map_err(bad)?,
            "alpha" => self.alpha = parse_one(v).map_err(bad)?,
            "easy_steps" => self.easy_steps = Some(parse_one(v).map_err(bad)?),
            "init" => self.init = v.parse().map_err(bad)?,
            "d0" => self.d0 = parse_one(v).map_err(bad)?,
            "init_seed" => self.init_seed = Some(parse_one(v).map_err(bad)?),
            "eta_tilde" => self.eta_tilde = parse_one(v).map_err(bad)?,
            "mc_samples" => self.mc_samples = parse_one(v).map_err(bad)?,
            "loss_samples" => self.loss_samples = parse_one(v).map_err(bad)?,
            "steps" => self.steps = parse_one(v).map_err(bad)?,
            "record_every" => self.record_every = parse_one(v).map_err(bad)?,
            "dt" => self.dt = parse_one(v).map_err(bad)?,
            "base_jitter" => self.base_jitter = parse_one(v).map_err(bad)?,
            "psd_tolerance" => self.psd_tolerance = parse_one(v).map_err(bad)?,
            "decay_both_layers" => self.decay_both_layers = parse_one(v).map_err(bad)?,
            "sgd_d" => self.sgd_d = parse_one(v).map_err(bad)?,
            "rate_phi" => self.rate_phi = parse_grid(v).map_err(bad)?,
            "rate_m11" => self.rate_m11 = parse_grid(v).map_err(bad)?,
            "rate_m12" => self.rate_m12 = parse_list(v).map_err(bad)?,
            "record_state" => self.record_state = Some(parse_one(v).map_err(bad)?),
            "dump_schedules" => self.dump_schedules = parse_one(v).map_err(bad)?,
            "out" => self.out = Some(PathBuf::from(v)),
            _ => {
                return Err(ConfigError::UnknownKey {
                    key: key.to_string(),
                    line: e.line,
                })
            }
        }
        Ok(())
    }

    /// Checks every value against its documented range.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        for (name, empty) in [
            ("k", self.k.is_empty()),
            ("sigma", self.sigma.is_empty()),
            ("protocol", self.protocol.is_empty()),
            ("tau", self.tau.is_empty()),
            ("weight_decay", self.weight_decay.is_empty()),
            ("channel", self.channel.is_empty()),
            ("ramp", self.ramp.is_empty()),
            ("seeds", self.seeds.is_empty()),
        ] {
            if empty {
                return fail(format!("`{name}` must not be empty"));
            }
        }
        if self.k.contains(&0) {
            return fail("every K must be >= 1".into());
        }
        if self.sigma.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return fail("every sigma must be finite and >= 0".into());
        }
        if self.tau.iter().any(|&t| !(t > 0.0)) {
            return fail("every tau must be > 0".into());
        }
        if self.weight_decay.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return fail("every weight_decay must be >= 0".into());
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return fail(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if let Some(n) = self.easy_steps {
            if n == 0 || n > self.steps {
                return fail(format!("easy_steps must lie in 1..={}, got {n}", self.steps));
            }
        }
        if !(self.phi_max >= 1.0) {
            return fail("phi_max must be >= 1".into());
        }
        if !(self.sigma_easy >= 0.0) {
            return fail("sigma_easy must be >= 0".into());
        }
        if !(self.eta_tilde > 0.0) || !(self.dt > 0.0) {
            return fail("eta_tilde and dt must be > 0".into());
        }
        if self.mc_samples == 0 || self.loss_samples == 0 || self.record_every == 0 {
            return fail("mc_samples, loss_samples and record_every must be >= 1".into());
        }
        if self.theta1.iter().any(|&t| !(0.0..=std::f64::consts::PI + 1e-12).contains(&t)) {
            return fail("theta1 values must lie in [0, pi]".into());
        }
        if self.rho1.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
            return fail("rho1 values must lie in [0, 1]".into());
        }
        if self.init == InitKind::Controlled && self.k.iter().any(|&k| k != 4) {
            return fail("the controlled initialisation needs K = 4".into());
        }
        if self.init == InitKind::Random && self.k.iter().any(|&k| self.d0 < 10 * k) {
            return fail(format!("d0 = {} is below 10 K for some K", self.d0));
        }
        if self.engine == Engine::Sgd && self.sgd_d < 100 {
            return fail("sgd_d must be >= 100".into());
        }
        Ok(())
    }

    /// Key/value view of the resolved config, in key order.
    pub fn resolved(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }

    /// SHA-256 over the canonical JSON of the resolved config.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(&self.resolved()).expect("config serialises");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn max_k(&self) -> usize {
        self.k.iter().copied().max().unwrap_or(0)
    }

    /// Whether trajectory rows carry the full order parameters.
    pub fn records_state(&self) -> bool {
        self.record_state.unwrap_or(self.max_k() <= 16)
    }
}

pub use xgm_core::dynamics::DEFAULT_DT;

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![a],
        _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    value: String,
    line: usize,
}

impl Entry {
    fn bad(&self, key: &str, msg: String) -> ConfigError {
        ConfigError::BadValue {
            key: key.to_string(),
            line: self.line,
            msg,
        }
    }
}

#[derive(Debug, Default)]
struct RawConfig {
    entries: BTreeMap<String, Entry>,
}

impl RawConfig {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    msg: format!("expected `key = value`, got `{content}`"),
                });
            };
            let key = key.trim();
            if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(ConfigError::Syntax {
                    line,
                    msg: format!("invalid key `{key}`"),
                });
            }
            if let Some(first) = entries.get(key) {
                return Err(ConfigError::Duplicate {
                    key: key.to_string(),
                    line,
                    first: first.line,
                });
            }
            entries.insert(
                key.to_string(),
                Entry {
                    value: value.trim().to_string(),
                    line,
                },
            );
        }
        Ok(RawConfig { entries })
    }

    fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.get(key)
    }
}

fn parse_one<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    s.trim().parse::<T>().map_err(|e| format!("cannot parse `{}`: {e}", s.trim()))
}

fn parse_list_with<T>(s: &str, f: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, String> {
    let items: Vec<&str> = s.split(',').map(str::trim).collect();
    if items.iter().any(|x| x.is_empty()) {
        return Err("empty list element".into());
    }
    items.into_iter().map(f).collect()
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    parse_list_with(s, parse_one)
}

/// Integer list; elements may be half-open ranges `a..b`.
fn parse_int_list<T>(s: &str) -> Result<Vec<T>, String>
where
    T: FromStr + TryFrom<u64>,
    T::Err: fmt::Display,
{
    let mut out = Vec::new();
    for item in s.split(',').map(str::trim) {
        if let Some((a, b)) = item.split_once("..") {
            let (a, b): (u64, u64) = (parse_one(a)?, parse_one(b)?);
            if b < a {
                return Err(format!("empty range `{item}`"));
            }
            for x in a..b {
                out.push(T::try_from(x).map_err(|_| format!("{x} out of range"))?);
            }
        } else if item.is_empty() {
            return Err("empty list element".into());
        } else {
            out.push(parse_one(item)?);
        }
    }
    Ok(out)
}

/// Real list, or `linspace(a, b, n)`.
/// A real, or `pi`.
fn parse_real(s: &str) -> Result<f64, String> {
    match s.trim() {
        "pi" => Ok(std::f64::consts::PI),
        t => parse_one(t),
    }
}

fn parse_grid(s: &str) -> Result<Vec<f64>, String> {
    let t = s.trim();
    if let Some(inner) = t.strip_prefix("linspace(").and_then(|r| r.strip_suffix(')')) {
        let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err("linspace takes (start, stop, count)".into());
        }
        let n: usize = parse_one(parts[2])?;
        return Ok(linspace(parse_real(parts[0])?, parse_real(parts[1])?, n));
    }
    parse_list_with(t, parse_real)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_lists_ranges_and_comments() {
        let c = ExperimentConfig::parse(
            "kind = lottery-sweep  # overparameterisation sweep\n\
             k = 4, 8\n\
             sigma = 0.3,0.5\n\
             seeds = 0..3, 10\n\
             protocol = no-fading, curriculum\n\
             theta1 = linspace(0, 1, 3)\n",
        )
        .unwrap();
        assert_eq!(c.kind, ExperimentKind::LotterySweep);
        assert_eq!(c.k, vec![4, 8]);
        assert_eq!(c.sigma, vec![0.3, 0.5]);
        assert_eq!(c.seeds, vec![0, 1, 2, 10]);
        assert_eq!(c.protocol, vec![Protocol::NoFading, Protocol::Curriculum]);
        assert_eq!(c.theta1, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn errors_carry_line_and_key() {
        assert_eq!(
            ExperimentConfig::parse("k = 4\nbogus = 1\n").unwrap_err(),
            ConfigError::UnknownKey { key: "bogus".into(), line: 2 }
        );
        assert!(matches!(
            ExperimentConfig::parse("\n\nsigma = 0.1, x\n").unwrap_err(),
            ConfigError::BadValue { line: 3, ref key, .. } if key == "sigma"
        ));
        assert!(matches!(ExperimentConfig::parse("k 4\n").unwrap_err(), ConfigError::Syntax { line: 1, .. }));
        assert!(matches!(
            ExperimentConfig::parse("k = 4\nk = 8\n").unwrap_err(),
            ConfigError::Duplicate { line: 2, first: 1, .. }
        ));
        assert!(matches!(ExperimentConfig::parse("alpha = 0\n").unwrap_err(), ConfigError::Invalid(_)));
        assert!(matches!(ExperimentConfig::parse("k = 0\n").unwrap_err(), ConfigError::Invalid(_)));
    }

    #[test]
    fn hash_ignores_layout_and_order() {
        let a = ExperimentConfig::parse("k = 4\nsigma = 0.4\n").unwrap();
        let b = ExperimentConfig::parse("# comment\nsigma=0.40\n\n   k =4 \n").unwrap();
        let c = ExperimentConfig::parse("k = 4\nsigma = 0.5\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn kind_sets_defaults() {
        let c = ExperimentConfig::parse("kind = controlled-theta\n").unwrap();
        assert_eq!(c.init, InitKind::Controlled);
        assert_eq!(c.theta1.len(), 16);
        assert!(ExperimentConfig::parse("kind = controlled-theta\nk = 8\n").is_err());
    }
}
