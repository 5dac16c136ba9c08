//! Order parameters of the learner and their initialisers.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::finite_net::FiniteNet;
use crate::mixture::Axis;

/// Macroscopic state of a `K`-unit network.
///
/// `q` is `WWᵀ`, `m` is `W[μ₁ μ₂]`, `t` the centroid overlaps.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderState {
    pub q: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub v: DVector<f64>,
    pub b: DVector<f64>,
    pub t: Matrix2<f64>,
}

/// Position of one neuron relative to the relevant manifold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeuronGeometry {
    /// Fraction of the squared norm lying in `span(μ₁, μ₂)`.
    pub rho: f64,
    /// In-manifold angle to the target centroid, folded into `[0, π]`.
    pub theta: f64,
}

impl OrderState {
    pub fn from_parts(q: DMatrix<f64>, m: DMatrix<f64>, v: DVector<f64>, b: DVector<f64>) -> Result<Self> {
        let k = q.nrows();
        if k == 0 {
            return Err(Error::param("K", "need at least one hidden unit"));
        }
        if q.ncols() != k {
            return Err(Error::DimensionMismatch { expected: k, got: q.ncols() });
        }
        if m.nrows() != k || m.ncols() != 2 {
            return Err(Error::DimensionMismatch { expected: k * 2, got: m.nrows() * m.ncols() });
        }
        if v.len() != k {
            return Err(Error::DimensionMismatch { expected: k, got: v.len() });
        }
        if b.len() != k {
            return Err(Error::DimensionMismatch { expected: k, got: b.len() });
        }
        let asym = (&q - q.transpose()).amax();
        if asym > 1e-12 * (1.0 + q.amax()) {
            return Err(Error::NotRealisable(format!("Q is not symmetric (max asymmetry {asym:e})")));
        }
        Ok(OrderState {
            q,
            m,
            v,
            b,
            t: Matrix2::identity(),
        })
    }

    /// The all-zero first layer with the given readout.
    pub fn zeros(k: usize, v: DVector<f64>) -> Self {
        assert_eq!(v.len(), k);
        OrderState {
            q: DMatrix::zeros(k, k),
            m: DMatrix::zeros(k, 2),
            v,
            b: DVector::zeros(k),
            t: Matrix2::identity(),
        }
    }

    pub fn k(&self) -> usize {
        self.q.nrows()
    }

    /// The `(K+2)×(K+2)` Gram matrix `[[Q, M], [Mᵀ, T]]`.
    pub fn gram(&self) -> DMatrix<f64> {
        let k = self.k();
        let mut g = DMatrix::zeros(k + 2, k + 2);
        g.view_mut((0, 0), (k, k)).copy_from(&self.q);
        g.view_mut((0, k), (k, 2)).copy_from(&self.m);
        g.view_mut((k, 0), (2, k)).copy_from(&self.m.transpose());
        for a in 0..2 {
            for b in 0..2 {
                g[(k + a, k + b)] = self.t[(a, b)];
            }
        }
        g
    }

    /// Smallest eigenvalue of the symmetrised Gram matrix.
    pub fn gram_min_eigenvalue(&self) -> f64 {
        let g = self.gram();
        let sym = (&g + g.transpose()) * 0.5;
        sym.symmetric_eigenvalues().min()
    }

    /// Checks that some finite `W` realises this state, allowing negative
    /// Gram eigenvalues down to `-jitter` and `ρ_k ≤ 1 + jitter`.
    pub fn check_realisable(&self, jitter: f64) -> Result<()> {
        if self.q.iter().chain(self.m.iter()).chain(self.v.iter()).chain(self.b.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NotRealisable("non-finite entry".into()));
        }
        let asym = (&self.q - self.q.transpose()).amax();
        if asym > jitter {
            return Err(Error::NotRealisable(format!("Q asymmetry {asym:e}")));
        }
        for k in 0..self.k() {
            let rel = self.m[(k, 0)].powi(2) + self.m[(k, 1)].powi(2);
            if rel > self.q[(k, k)] + jitter {
                return Err(Error::NotRealisable(format!(
                    "neuron {k}: relevant norm {rel} exceeds Q_kk = {}",
                    self.q[(k, k)]
                )));
            }
        }
        let lmin = self.gram_min_eigenvalue();
        if lmin < -jitter {
            return Err(Error::NotRealisable(format!("Gram eigenvalue {lmin:e} below -{jitter:e}")));
        }
        Ok(())
    }

    pub fn neuron_geometry(&self, k: usize, target: Axis) -> Result<NeuronGeometry> {
        let qkk = self.q[(k, k)];
        if !(qkk > 0.0) {
            return Err(Error::ZeroNorm(k));
        }
        let along = self.m[(k, target.index())];
        let orth = self.m[(k, target.other().index())].abs();
        Ok(NeuronGeometry {
            rho: (along * along + orth * orth) / qkk,
            theta: orth.atan2(along),
        })
    }

    /// Row-major `Q`, row-major `M`, then `v`, then `b`.
    pub fn to_flat(&self) -> Vec<f64> {
        let k = self.k();
        let mut out = Vec::with_capacity(k * k + 4 * k);
        for i in 0..k {
            for j in 0..k {
                out.push(self.q[(i, j)]);
            }
        }
        for i in 0..k {
            out.push(self.m[(i, 0)]);
            out.push(self.m[(i, 1)]);
        }
        out.extend(self.v.iter());
        out.extend(self.b.iter());
        out
    }

    /// Column names matching [`OrderState::to_flat`], 1-based like the maths.
    pub fn flat_names(k: usize) -> Vec<String> {
        let mut out = Vec::with_capacity(k * k + 4 * k);
        for i in 1..=k {
            for j in 1..=k {
                out.push(format!("Q_{i}_{j}"));
            }
        }
        for i in 1..=k {
            out.push(format!("M_{i}_1"));
            out.push(format!("M_{i}_2"));
        }
        out.extend((1..=k).map(|i| format!("v_{i}")));
        out.extend((1..=k).map(|i| format!("b_{i}")));
        out
    }

    pub fn from_flat(k: usize, flat: &[f64]) -> Result<Self> {
        let expected = k * k + 4 * k;
        if flat.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: flat.len() });
        }
        let q = DMatrix::from_row_slice(k, k, &flat[..k * k]);
        let m = DMatrix::from_row_slice(k, 2, &flat[k * k..k * k + 2 * k]);
        let v = DVector::from_column_slice(&flat[k * k + 2 * k..k * k + 3 * k]);
        let b = DVector::from_column_slice(&flat[k * k + 3 * k..]);
        OrderState::from_parts(q, m, v, b)
    }
}

/// Lottery-ticket initialisation: order parameters measured from a random
/// network in `d0` dimensions (`W` std `1/√d0`, `v` standard normal, `b = 0`).
pub fn random_init<R: Rng + ?Sized>(k: usize, d0: usize, rng: &mut R) -> Result<OrderState> {
    if k == 0 {
        return Err(Error::param("K", "need at least one hidden unit"));
    }
    if d0 < 2 {
        return Err(Error::DimensionTooSmall(d0));
    }
    if d0 < 10 * k {
        return Err(Error::param("d0", format!("must be at least 10*K = {} (got {d0})", 10 * k)));
    }
    Ok(FiniteNet::random(k, d0, rng)?.measure_order_params())
}

/// Controlled four-unit start: units 2..4 sit on `−μ₁, +μ₂, −μ₂` with unit
/// norm, unit 1 has unit norm with relevant fraction `rho1` at angle
/// `theta1` from `+μ₁`. Readout `v = (1, 1, −1, −1)`, biases zero.
pub fn controlled_init(theta1: f64, rho1: f64) -> Result<OrderState> {
    if !(0.0..=PI).contains(&theta1) {
        return Err(Error::param("theta1", format!("must lie in [0, π], got {theta1}")));
    }
    if !(0.0..=1.0).contains(&rho1) {
        return Err(Error::param("rho1", format!("must lie in [0, 1], got {rho1}")));
    }
    let r = rho1.sqrt();
    controlled_with_free_unit(r * theta1.cos(), r * theta1.sin(), 1.0)
}

/// Controlled setup with an arbitrary free unit `(M₁₁, M₁₂, Q₁₁)`.
pub fn controlled_with_free_unit(m11: f64, m12: f64, q11: f64) -> Result<OrderState> {
    if !(q11 >= m11 * m11 + m12 * m12 - 1e-12) {
        return Err(Error::NotRealisable(format!(
            "free unit has relevant norm {} above Q11 = {q11}",
            m11 * m11 + m12 * m12
        )));
    }
    let m = DMatrix::from_row_slice(4, 2, &[m11, m12, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
    // Off-manifold parts are mutually orthogonal, so overlaps come from M alone.
    let mut q = &m * m.transpose();
    q[(0, 0)] = q11;
    let v = DVector::from_vec(vec![1.0, 1.0, -1.0, -1.0]);
    OrderState::from_parts(q, m, v, DVector::zeros(4))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_pcg::Pcg64Mcg;

    fn with_row(m1: f64, m2: f64, qkk: f64) -> OrderState {
        OrderState::from_parts(
            DMatrix::from_element(1, 1, qkk),
            DMatrix::from_row_slice(1, 2, &[m1, m2]),
            DVector::from_element(1, 1.0),
            DVector::zeros(1),
        )
        .unwrap()
    }

    #[test]
    fn geometry_examples() {
        let g = with_row(0.6, 0.8, 2.0).neuron_geometry(0, Axis::One).unwrap();
        assert_abs_diff_eq!(g.rho, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(g.theta, 0.927_295_218, epsilon = 1e-8);

        let g = with_row(-1.0, 0.0, 1.0).neuron_geometry(0, Axis::One).unwrap();
        assert_abs_diff_eq!(g.theta, PI, epsilon = 1e-15);
        assert_abs_diff_eq!(g.rho, 1.0, epsilon = 1e-15);

        let g = with_row(0.3, 0.4, 1.0).neuron_geometry(0, Axis::Two).unwrap();
        assert_abs_diff_eq!(g.theta, 0.643_501_109, epsilon = 1e-8);
        assert_abs_diff_eq!(g.rho, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn geometry_of_zero_neuron_is_an_error() {
        assert_eq!(with_row(0.0, 0.0, 0.0).neuron_geometry(0, Axis::One), Err(Error::ZeroNorm(0)));
    }

    #[test]
    fn controlled_examples() {
        let s = controlled_init(0.0, 1.0).unwrap();
        assert_abs_diff_eq!(s.m[(0, 0)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.m[(0, 1)], 0.0, epsilon = 1e-15);
        assert_eq!(s.q[(0, 0)], 1.0);

        let s = controlled_init(PI / 2.0, 0.1).unwrap();
        assert_abs_diff_eq!(s.m[(0, 0)], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.m[(0, 1)], 0.316_227_766, epsilon = 1e-8);

        let s = controlled_init(1.234, 0.0).unwrap();
        assert_eq!(s.m[(0, 0)], 0.0);
        assert_eq!(s.m[(0, 1)], 0.0);
        for k in 1..4 {
            assert_eq!(s.q[(0, k)], 0.0);
        }
        s.check_realisable(1e-8).unwrap();
        assert_eq!(s.v.as_slice(), &[1.0, 1.0, -1.0, -1.0]);
        assert_eq!(s.b.as_slice(), &[0.0; 4]);
    }

    #[test]
    fn controlled_rejects_out_of_range() {
        assert!(controlled_init(-0.1, 0.5).is_err());
        assert!(controlled_init(3.2, 0.5).is_err());
        assert!(controlled_init(1.0, 1.1).is_err());
        assert!(controlled_init(1.0, -0.1).is_err());
    }

    #[test]
    fn controlled_gram_is_psd_on_a_grid() {
        for i in 0..=20 {
            for j in 0..=20 {
                let s = controlled_init(PI * i as f64 / 20.0, j as f64 / 20.0).unwrap();
                s.check_realisable(1e-8).unwrap();
            }
        }
    }

    #[test]
    fn flat_roundtrip() {
        let s = controlled_init(0.3, 0.4).unwrap();
        let flat = s.to_flat();
        assert_eq!(flat.len(), OrderState::flat_names(4).len());
        assert_eq!(OrderState::from_flat(4, &flat).unwrap(), s);
    }

    #[test]
    fn random_init_scaling() {
        let mut rng = Pcg64Mcg::seed_from_u64(3);
        let draws = 1000;
        let mut m_sum = 0.0;
        let mut m_sq = 0.0;
        let mut in_band = 0usize;
        for _ in 0..draws {
            let s = random_init(4, 1000, &mut rng).unwrap();
            assert!(s.b.iter().all(|&b| b == 0.0));
            if (0..4).all(|k| (0.8..=1.2).contains(&s.q[(k, k)])) {
                in_band += 1;
            }
            for x in s.m.iter() {
                m_sum += x;
                m_sq += x * x;
            }
        }
        assert!(in_band as f64 / draws as f64 > 0.99);
        let n = (draws * 8) as f64;
        let mean = m_sum / n;
        let sd = (m_sq / n - mean * mean).sqrt();
        let target = 1.0 / 1000f64.sqrt();
        assert!(mean.abs() < 3.0 * target / n.sqrt(), "mean {mean}");
        assert!((sd - target).abs() < 0.1 * target, "sd {sd}");
    }

    #[test]
    fn random_init_rho_at_large_d0() {
        let mut rng = Pcg64Mcg::seed_from_u64(5);
        let mut small = 0;
        for _ in 0..200 {
            let s = random_init(1, 1_000_000, &mut rng).unwrap();
            if s.neuron_geometry(0, Axis::One).unwrap().rho < 1e-3 {
                small += 1;
            }
        }
        assert!(small as f64 / 200.0 > 0.99);
    }

    #[test]
    fn random_init_mean_rho_is_two_over_d0() {
        let mut rng = Pcg64Mcg::seed_from_u64(11);
        for d0 in [100usize, 10_000] {
            let draws = 1000;
            let rhos: Vec<f64> = (0..draws)
                .map(|_| random_init(1, d0, &mut rng).unwrap().neuron_geometry(0, Axis::One).unwrap().rho)
                .collect();
            let mean = rhos.iter().sum::<f64>() / draws as f64;
            let var = rhos.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
            let se = (var / draws as f64).sqrt();
            // ρ is Beta(1, (d0 − 2)/2) distributed, with mean exactly 2/d0.
            let target = 2.0 / d0 as f64;
            assert!((mean - target).abs() < 3.0 * se, "d0 {d0}: {mean} vs {target} (se {se})");
        }
    }

    #[test]
    fn random_init_rejects_small_d0() {
        let mut rng = Pcg64Mcg::seed_from_u64(1);
        assert_eq!(random_init(1, 1, &mut rng), Err(Error::DimensionTooSmall(1)));
        assert!(random_init(4, 20, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn geometry_is_scale_invariant(m1 in -2.0f64..2.0, m2 in -2.0f64..2.0, extra in 0.01f64..3.0, c in 0.01f64..100.0) {
            let qkk = m1 * m1 + m2 * m2 + extra;
            let g0 = with_row(m1, m2, qkk).neuron_geometry(0, Axis::One).unwrap();
            let g1 = with_row(c * m1, c * m2, c * c * qkk).neuron_geometry(0, Axis::One).unwrap();
            prop_assert!((g0.rho - g1.rho).abs() < 1e-12);
            prop_assert!((g0.theta - g1.theta).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&g0.rho));
            prop_assert!((0.0..=PI).contains(&g0.theta));
        }
    }
}
