//! The XOR-like Gaussian mixture.
//!
//! Four isotropic clusters sit at `±φ·μ₁` (label 1) and `±φ·μ₂` (label 0),
//! with `μ₁ = e₁` and `μ₂ = e₂`. Every other input coordinate is pure noise.

use nalgebra::{DMatrix, DVector, Matrix2};
use rand::{Rng, RngExt};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::state::OrderState;

/// Which centroid pair a cluster belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Axis {
    One,
    Two,
}

impl Axis {
    /// Zero-based column of `M` (and of `T`) for this axis.
    pub fn index(self) -> usize {
        match self {
            Axis::One => 0,
            Axis::Two => 1,
        }
    }

    pub fn other(self) -> Axis {
        match self {
            Axis::One => Axis::Two,
            Axis::Two => Axis::One,
        }
    }

    /// Class label carried by clusters on this axis.
    pub fn label(self) -> u8 {
        match self {
            Axis::One => 1,
            Axis::Two => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

/// One of the four signed centroids `sign · μ_axis`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClusterId {
    pub axis: Axis,
    pub sign: Sign,
}

impl ClusterId {
    /// All four clusters in a fixed order: `+μ₁, −μ₁, +μ₂, −μ₂`.
    pub const ALL: [ClusterId; 4] = [
        ClusterId::new(Axis::One, Sign::Plus),
        ClusterId::new(Axis::One, Sign::Minus),
        ClusterId::new(Axis::Two, Sign::Plus),
        ClusterId::new(Axis::Two, Sign::Minus),
    ];

    pub const fn new(axis: Axis, sign: Sign) -> Self {
        ClusterId { axis, sign }
    }

    pub fn label(self) -> u8 {
        self.axis.label()
    }
}

/// Parameters of the mixture at a given difficulty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureSpec {
    /// Per-coordinate noise standard deviation.
    pub sigma: f64,
    /// Fading factor multiplying the centroid means.
    pub fading: f64,
    /// Centroid overlaps `T = μᵀμ`; the identity for this task.
    pub centroid_overlap: Matrix2<f64>,
}

impl MixtureSpec {
    pub fn new(sigma: f64, fading: f64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::param("sigma", format!("must be finite and >= 0, got {sigma}")));
        }
        if !(fading >= 0.0) || !fading.is_finite() {
            return Err(Error::param("fading", format!("must be finite and >= 0, got {fading}")));
        }
        Ok(MixtureSpec {
            sigma,
            fading,
            centroid_overlap: Matrix2::identity(),
        })
    }

    pub fn with_sigma(self, sigma: f64) -> Result<Self> {
        MixtureSpec::new(sigma, self.fading)
    }

    pub fn with_fading(self, fading: f64) -> Result<Self> {
        MixtureSpec::new(self.sigma, fading)
    }
}

/// A single labelled input.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub label: u8,
    pub cluster: ClusterId,
    pub fading_used: f64,
}

/// Mean and covariance of the `K + 2` local fields `(W·X, μ₁·X, μ₂·X)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldMoments {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// Draws a cluster uniformly over the four signed centroids.
pub fn random_cluster<R: Rng + ?Sized>(rng: &mut R) -> ClusterId {
    ClusterId::ALL[rng.random_range(0..4)]
}

/// Draws one sample in `d` dimensions.
pub fn sample_input<R: Rng + ?Sized>(d: usize, spec: &MixtureSpec, rng: &mut R) -> Result<Sample> {
    let cluster = random_cluster(rng);
    sample_from_cluster(d, spec, cluster, rng)
}

/// Draws one sample in `d` dimensions from a fixed cluster.
pub fn sample_from_cluster<R: Rng + ?Sized>(
    d: usize,
    spec: &MixtureSpec,
    cluster: ClusterId,
    rng: &mut R,
) -> Result<Sample> {
    let mut input = vec![0.0; d];
    fill_input(&mut input, spec, cluster, rng)?;
    Ok(Sample {
        input,
        label: cluster.label(),
        cluster,
        fading_used: spec.fading,
    })
}

/// Writes `sign·φ·μ_axis + z` into `buf`, reusing its storage.
pub fn fill_input<R: Rng + ?Sized>(
    buf: &mut [f64],
    spec: &MixtureSpec,
    cluster: ClusterId,
    rng: &mut R,
) -> Result<()> {
    if buf.len() < 2 {
        return Err(Error::DimensionTooSmall(buf.len()));
    }
    let sigma = spec.sigma;
    for x in buf.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *x = sigma * z;
    }
    buf[cluster.axis.index()] += cluster.sign.value() * spec.fading;
    Ok(())
}

/// Exact joint moments of the local fields for a given cluster.
///
/// The fading factor shifts the mean only; the covariance is
/// `σ² [[Q, M], [Mᵀ, T]]` regardless of `φ`.
pub fn field_moments(state: &OrderState, cluster: ClusterId, spec: &MixtureSpec) -> FieldMoments {
    let k = state.k();
    let p = k + 2;
    let a = cluster.axis.index();
    let shift = cluster.sign.value() * spec.fading;

    let mut mean = DVector::zeros(p);
    for i in 0..k {
        mean[i] = shift * state.m[(i, a)];
    }
    for beta in 0..2 {
        mean[k + beta] = shift * state.t[(beta, a)];
    }

    let s2 = spec.sigma * spec.sigma;
    let mut covariance = DMatrix::zeros(p, p);
    for i in 0..k {
        for j in 0..k {
            covariance[(i, j)] = s2 * state.q[(i, j)];
        }
        for beta in 0..2 {
            covariance[(i, k + beta)] = s2 * state.m[(i, beta)];
            covariance[(k + beta, i)] = s2 * state.m[(i, beta)];
        }
    }
    for alpha in 0..2 {
        for beta in 0..2 {
            covariance[(k + alpha, k + beta)] = s2 * state.t[(alpha, beta)];
        }
    }
    FieldMoments { mean, covariance }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;
    use rand::SeedableRng;
    use rand_pcg::Pcg64Mcg;

    fn k1_state() -> OrderState {
        OrderState::from_parts(
            dmatrix![1.0],
            dmatrix![0.3, 0.4],
            DVector::from_element(1, 1.0),
            DVector::zeros(1),
        )
        .unwrap()
    }

    #[test]
    fn zero_noise_sample_sits_on_centroid() {
        let mut rng = Pcg64Mcg::seed_from_u64(1);
        let spec = MixtureSpec::new(0.0, 1.0).unwrap();
        let s = sample_from_cluster(4, &spec, ClusterId::new(Axis::One, Sign::Plus), &mut rng).unwrap();
        assert_eq!(s.input, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(s.label, 1);

        let spec = MixtureSpec::new(0.0, 3.0).unwrap();
        let s = sample_from_cluster(4, &spec, ClusterId::new(Axis::Two, Sign::Minus), &mut rng).unwrap();
        assert_eq!(s.input, vec![0.0, -3.0, 0.0, 0.0]);
        assert_eq!(s.label, 0);
        assert_eq!(s.fading_used, 3.0);
    }

    #[test]
    fn rejects_one_dimensional_inputs() {
        let mut rng = Pcg64Mcg::seed_from_u64(1);
        let spec = MixtureSpec::new(0.4, 1.0).unwrap();
        assert_eq!(sample_input(1, &spec, &mut rng), Err(Error::DimensionTooSmall(1)));
    }

    #[test]
    fn rejects_negative_parameters() {
        assert!(MixtureSpec::new(-0.1, 1.0).is_err());
        assert!(MixtureSpec::new(0.1, -1.0).is_err());
        assert!(MixtureSpec::new(f64::NAN, 1.0).is_err());
        assert!(MixtureSpec::new(0.0, 0.0).is_ok());
    }

    #[test]
    fn label_follows_axis() {
        for c in ClusterId::ALL {
            let expected = if c.axis == Axis::One { 1 } else { 0 };
            assert_eq!(c.label(), expected);
        }
    }

    #[test]
    fn field_moments_direct_substitution() {
        let state = k1_state();
        let spec = MixtureSpec::new(0.5, 1.0).unwrap();
        let fm = field_moments(&state, ClusterId::new(Axis::One, Sign::Plus), &spec);
        assert_eq!(fm.mean.as_slice(), &[0.3, 1.0, 0.0]);
        let expected = dmatrix![1.0, 0.3, 0.4; 0.3, 1.0, 0.0; 0.4, 0.0, 1.0] * 0.25;
        assert_abs_diff_eq!(fm.covariance, expected, epsilon = 1e-15);

        let spec3 = MixtureSpec::new(0.5, 3.0).unwrap();
        let fm2 = field_moments(&state, ClusterId::new(Axis::Two, Sign::Minus), &spec3);
        assert_abs_diff_eq!(fm2.mean.as_slice()[0], -1.2, epsilon = 1e-15);
        assert_eq!(&fm2.mean.as_slice()[1..], &[0.0, -3.0]);
        assert_abs_diff_eq!(fm2.covariance, expected, epsilon = 1e-15);
    }

    #[test]
    fn zero_network_has_deterministic_fields() {
        let state = OrderState::zeros(3, DVector::from_vec(vec![1.0, -2.0, 0.5]));
        let spec = MixtureSpec::new(0.7, 2.0).unwrap();
        for c in ClusterId::ALL {
            let fm = field_moments(&state, c, &spec);
            for i in 0..3 {
                assert_eq!(fm.mean[i], 0.0);
                for j in 0..3 {
                    assert_eq!(fm.covariance[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn cluster_frequencies_are_balanced() {
        let mut rng = Pcg64Mcg::seed_from_u64(7);
        let n = 40_000usize;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let c = random_cluster(&mut rng);
            counts[ClusterId::ALL.iter().position(|x| *x == c).unwrap()] += 1;
        }
        let sd = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 / 4.0).abs() <= 3.0 * sd, "{counts:?}");
        }
    }
}
