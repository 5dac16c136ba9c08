//! Evaluation quantities computed from an [`OrderState`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::finite_net::{loss, relu};
use crate::mixture::{Axis, ClusterId, MixtureSpec};
use crate::moments::FieldSampler;
use crate::state::OrderState;

/// Default alignment threshold for coverage.
pub const DEFAULT_TAU: f64 = 0.5;

/// Noise increment between the paired ensembles of a transition matrix.
pub const DESTABILISATION_DELTA_SIGMA: f64 = 0.15;

/// Population loss with its Monte-Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossEstimate {
    pub mean: f64,
    pub se: f64,
}

/// Cross-entropy averaged over the four clusters of `spec`.
///
/// Uses antithetic, cluster-stratified draws; `n_mc` is rounded up to a
/// multiple of 8. Pass a spec with `fading = 1` for the test distribution.
pub fn population_loss<R: Rng + ?Sized>(
    state: &OrderState,
    spec: &MixtureSpec,
    n_mc: usize,
    base_jitter: f64,
    rng: &mut R,
) -> Result<LossEstimate> {
    if n_mc == 0 {
        return Err(Error::param("n_mc", "must be positive"));
    }
    let k = state.k();
    let p = k + 2;
    let pairs = n_mc.div_ceil(8);
    let inv_sqrt_k = 1.0 / (k as f64).sqrt();
    let mut plus = vec![0.0; p];
    let mut minus = vec![0.0; p];
    let mut means = [0.0; 4];
    let mut var = 0.0;
    for (ci, cluster) in ClusterId::ALL.into_iter().enumerate() {
        let mut sampler = FieldSampler::new(state, cluster, spec, base_jitter)?;
        let y = cluster.label() as f64;
        if sampler.random_fields().iter().all(|&i| i >= k) {
            // The unit fields, and hence the loss, are deterministic.
            sampler.draw_pair(rng, &mut plus, &mut minus);
            means[ci] = loss(y, logit_of(state, &plus, inv_sqrt_k));
            continue;
        }
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..pairs {
            sampler.draw_pair(rng, &mut plus, &mut minus);
            let u = 0.5 * (loss(y, logit_of(state, &plus, inv_sqrt_k)) + loss(y, logit_of(state, &minus, inv_sqrt_k)));
            s += u;
            s2 += u * u;
        }
        let n = pairs as f64;
        let m = s / n;
        let sample_var = if pairs > 1 { ((s2 / n - m * m) * n / (n - 1.0)).max(0.0) } else { 0.0 };
        means[ci] = m;
        var += sample_var / n / 16.0;
    }
    // Pairwise, so that four equal cluster values average exactly.
    let mean = 0.25 * ((means[0] + means[1]) + (means[2] + means[3]));
    Ok(LossEstimate { mean, se: var.sqrt() })
}

fn logit_of(state: &OrderState, lam: &[f64], inv_sqrt_k: f64) -> f64 {
    let mut z = 0.0;
    for k in 0..state.k() {
        z += state.v[k] * relu(lam[k] + state.b[k]);
    }
    z * inv_sqrt_k
}

/// Logit at the noiseless centroid `sign · μ_axis`.
pub fn centroid_logit(state: &OrderState, cluster: ClusterId) -> f64 {
    let a = cluster.axis.index();
    let s = cluster.sign.value();
    let mut z = 0.0;
    for k in 0..state.k() {
        z += state.v[k] * relu(s * state.m[(k, a)] + state.b[k]);
    }
    z / (state.k() as f64).sqrt()
}

/// Misclassification rate on the four centroids; a zero logit costs ½.
pub fn zero_noise_error(state: &OrderState) -> f64 {
    let mut err = 0.0;
    for c in ClusterId::ALL {
        let z = centroid_logit(state, c);
        err += if z == 0.0 {
            0.5
        } else if (z > 0.0) == (c.label() == 1) {
            0.0
        } else {
            1.0
        };
    }
    err / 4.0
}

/// The neuron that covers a centroid, if any.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CentroidCover {
    pub neuron: usize,
    /// Normalised alignment `s · M_kα / √Q_kk`.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub covered: u8,
    /// Best qualifying neuron per centroid, in [`ClusterId::ALL`] order.
    pub per_centroid: [Option<CentroidCover>; 4],
    pub tau: f64,
}

/// Counts centroids with a specialised, correctly signed neuron.
pub fn coverage(state: &OrderState, tau: f64) -> Result<CoverageReport> {
    if !(tau > 0.0) {
        return Err(Error::param("tau", format!("must be positive, got {tau}")));
    }
    let mut per_centroid: [Option<CentroidCover>; 4] = [None; 4];
    for k in 0..state.k() {
        let qkk = state.q[(k, k)];
        if !(qkk > 0.0) {
            continue;
        }
        let norm = qkk.sqrt();
        let scores = ClusterId::ALL.map(|c| c.sign.value() * state.m[(k, c.axis.index())] / norm);
        for (ci, c) in ClusterId::ALL.iter().enumerate() {
            let score = scores[ci];
            let specialised = scores.iter().enumerate().all(|(o, &s)| o == ci || score > s);
            let signed = match c.axis {
                Axis::One => state.v[k] > 0.0,
                Axis::Two => state.v[k] < 0.0,
            };
            if score >= tau && specialised && signed && per_centroid[ci].is_none_or(|best| score > best.score) {
                per_centroid[ci] = Some(CentroidCover { neuron: k, score });
            }
        }
    }
    let covered = per_centroid.iter().filter(|c| c.is_some()).count() as u8;
    Ok(CoverageReport {
        covered,
        per_centroid,
        tau,
    })
}

/// Norm of each neuron's component inside the span of `μ₁, μ₂`.
pub fn relevant_norms(state: &OrderState) -> Vec<f64> {
    (0..state.k()).map(|k| state.m[(k, 0)].hypot(state.m[(k, 1)])).collect()
}

/// Probability, under the input mixture, that neuron `k` is active.
pub fn activation_probability(state: &OrderState, k: usize, spec: &MixtureSpec) -> f64 {
    let sd = spec.sigma * state.q[(k, k)].max(0.0).sqrt();
    ClusterId::ALL
        .iter()
        .map(|c| {
            let mu = c.sign.value() * spec.fading * state.m[(k, c.axis.index())] + state.b[k];
            if sd > 0.0 {
                0.5 * libm::erfc(-mu / (sd * std::f64::consts::SQRT_2))
            } else if mu > 0.0 {
                1.0
            } else {
                0.0
            }
        })
        .sum::<f64>()
        / 4.0
}

/// A neuron is muted when it is inactive on more than 99% of inputs.
pub fn is_muted(state: &OrderState, k: usize, spec: &MixtureSpec) -> bool {
    activation_probability(state, k, spec) < 0.01
}

/// Seed-paired coverage transitions between two noise levels.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    /// Row `i`, column `j`: fraction of row-`i` runs that end at coverage `j`.
    pub probs: [[f64; 5]; 5],
    pub counts: [usize; 5],
    pub sigma_from: f64,
    pub sigma_to: f64,
    pub delta_sigma: f64,
}

impl TransitionMatrix {
    /// Fraction of fully covering runs that stay fully covering.
    pub fn retained_full(&self) -> Option<f64> {
        (self.counts[4] > 0).then_some(self.probs[4][4])
    }
}

pub fn destabilisation(from: &[u8], to: &[u8], sigma_from: f64) -> Result<TransitionMatrix> {
    if from.len() != to.len() {
        return Err(Error::DimensionMismatch {
            expected: from.len(),
            got: to.len(),
        });
    }
    let mut raw = [[0usize; 5]; 5];
    for (&i, &j) in from.iter().zip(to) {
        if i > 4 || j > 4 {
            return Err(Error::param("coverage", format!("levels lie in 0..=4, got {i} -> {j}")));
        }
        raw[i as usize][j as usize] += 1;
    }
    let mut probs = [[0.0; 5]; 5];
    let mut counts = [0usize; 5];
    for i in 0..5 {
        counts[i] = raw[i].iter().sum();
        if counts[i] > 0 {
            for j in 0..5 {
                probs[i][j] = raw[i][j] as f64 / counts[i] as f64;
            }
        }
    }
    Ok(TransitionMatrix {
        probs,
        counts,
        sigma_from,
        sigma_to: sigma_from + DESTABILISATION_DELTA_SIGMA,
        delta_sigma: DESTABILISATION_DELTA_SIGMA,
    })
}
