//! Explicit finite-dimensional 2-layer network trained by one-pass SGD.
//!
//! `ŷ = (1/√K) Σ_k v_k g(W_k·X + b_k)` with `g` the rectifier, trained on the
//! logistic loss. This is the ground truth the order-parameter ODE describes.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::mixture::Sample;
use crate::moments::factorize;
use crate::state::OrderState;

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Rectifier derivative with the convention `g'(0) = 0`.
#[inline]
pub fn relu_prime(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + eˣ)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Cross-entropy `−y·ŷ + log(1 + e^ŷ)`.
pub fn loss(y: f64, logit: f64) -> f64 {
    // softplus(x) − x = softplus(−x) keeps the confident-correct case exact.
    if y == 0.0 {
        softplus(logit)
    } else if y == 1.0 {
        softplus(-logit)
    } else {
        softplus(logit) - y * logit
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    /// Per-sample step size applied to the `√K`-rescaled gradient.
    pub eta_tilde: f64,
    /// L2 strength on the first layer.
    pub weight_decay: f64,
    /// Also decay the readout weights.
    pub decay_both_layers: bool,
}

impl SgdConfig {
    pub fn new(eta_tilde: f64, weight_decay: f64) -> Result<Self> {
        if !(eta_tilde > 0.0) || !eta_tilde.is_finite() {
            return Err(Error::param("eta_tilde", format!("must be > 0, got {eta_tilde}")));
        }
        if !(weight_decay >= 0.0) || !weight_decay.is_finite() {
            return Err(Error::param("weight_decay", format!("must be >= 0, got {weight_decay}")));
        }
        Ok(SgdConfig {
            eta_tilde,
            weight_decay,
            decay_both_layers: false,
        })
    }

    /// Step size that makes `d` samples equal one unit of ODE time at
    /// rescaled rate `eta_tilde`.
    pub fn ode_matched(eta_tilde: f64, weight_decay: f64, d: usize) -> Result<Self> {
        SgdConfig::new(eta_tilde / d as f64, weight_decay)
    }
}

/// Gradient of the loss with respect to every parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteNet {
    k: usize,
    d: usize,
    /// Row-major `K × d`.
    w: Vec<f64>,
    b: Vec<f64>,
    v: Vec<f64>,
}

impl FiniteNet {
    pub fn new(k: usize, d: usize, w: Vec<f64>, b: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if k == 0 {
            return Err(Error::param("K", "need at least one hidden unit"));
        }
        if d < 2 {
            return Err(Error::DimensionTooSmall(d));
        }
        if w.len() != k * d {
            return Err(Error::DimensionMismatch { expected: k * d, got: w.len() });
        }
        if b.len() != k {
            return Err(Error::DimensionMismatch { expected: k, got: b.len() });
        }
        if v.len() != k {
            return Err(Error::DimensionMismatch { expected: k, got: v.len() });
        }
        if w.iter().chain(&b).chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::param("weights", "all entries must be finite"));
        }
        Ok(FiniteNet { k, d, w, b, v })
    }

    /// `W` entries with std `1/√d`, standard-normal `v`, zero biases.
    pub fn random<R: Rng + ?Sized>(k: usize, d: usize, rng: &mut R) -> Result<Self> {
        if d < 2 {
            return Err(Error::DimensionTooSmall(d));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let w = (0..k * d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                scale * z
            })
            .collect();
        let v = (0..k).map(|_| StandardNormal.sample(rng)).collect();
        FiniteNet::new(k, d, w, vec![0.0; k], v)
    }

    /// Builds a network in `d` dimensions whose measured order parameters
    /// equal `state` (up to factorisation jitter). The irrelevant parts of
    /// the rows are placed on `e₃, e₄, …`.
    pub fn embed(state: &OrderState, d: usize) -> Result<Self> {
        let k = state.k();
        if d < k + 2 {
            return Err(Error::param("d", format!("must be at least K + 2 = {} to embed", k + 2)));
        }
        let perp = &state.q - &state.m * state.m.transpose();
        let perp = (&perp + perp.transpose()) * 0.5;
        let factor = factorize(&perp, 1e-14)?;
        let mut w = vec![0.0; k * d];
        for i in 0..k {
            let row = &mut w[i * d..(i + 1) * d];
            row[0] = state.m[(i, 0)];
            row[1] = state.m[(i, 1)];
            for j in 0..=i {
                row[2 + j] = factor.lower[(i, j)];
            }
        }
        FiniteNet::new(k, d, w, state.b.iter().copied().collect(), state.v.iter().copied().collect())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn w_row(&self, k: usize) -> &[f64] {
        &self.w[k * self.d..(k + 1) * self.d]
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn params_mut(&mut self) -> (&mut [f64], &mut [f64], &mut [f64]) {
        (&mut self.w, &mut self.b, &mut self.v)
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.d {
            return Err(Error::DimensionMismatch { expected: self.d, got: input.len() });
        }
        Ok(())
    }

    /// Pre-activations `W_k·X + b_k`.
    pub fn preactivations(&self, input: &[f64]) -> Vec<f64> {
        (0..self.k).map(|k| dot(self.w_row(k), input) + self.b[k]).collect()
    }

    fn logit_from_pre(&self, pre: &[f64]) -> f64 {
        let s: f64 = pre.iter().zip(&self.v).map(|(&p, &v)| v * relu(p)).sum();
        s / (self.k as f64).sqrt()
    }

    pub fn forward(&self, input: &[f64]) -> Result<f64> {
        self.check_input(input)?;
        Ok(self.logit_from_pre(&self.preactivations(input)))
    }

    pub fn sample_loss(&self, input: &[f64], label: u8) -> Result<f64> {
        Ok(loss(label as f64, self.forward(input)?))
    }

    /// Analytic gradient of the loss at one sample.
    pub fn gradient(&self, input: &[f64], label: u8) -> Result<Gradient> {
        self.check_input(input)?;
        let pre = self.preactivations(input);
        let delta = label as f64 - sigmoid(self.logit_from_pre(&pre));
        let norm = 1.0 / (self.k as f64).sqrt();
        let mut w = vec![0.0; self.k * self.d];
        let mut b = vec![0.0; self.k];
        let mut v = vec![0.0; self.k];
        for k in 0..self.k {
            let gp = relu_prime(pre[k]);
            let c = -delta * self.v[k] * gp * norm;
            for (g, x) in w[k * self.d..(k + 1) * self.d].iter_mut().zip(input) {
                *g = c * x;
            }
            b[k] = c;
            v[k] = -delta * relu(pre[k]) * norm;
        }
        Ok(Gradient { w, b, v })
    }

    /// One in-place SGD step. Returns the error signal `Δ = y − sigmoid(ŷ)`.
    ///
    /// The step is `−η̃√K ∇L` (the `√K` cancels the readout normalisation),
    /// minus `η̃·λ` times the decayed weights.
    pub fn step(&mut self, input: &[f64], label: u8, cfg: &SgdConfig) -> Result<f64> {
        self.check_input(input)?;
        let pre = self.preactivations(input);
        let delta = label as f64 - sigmoid(self.logit_from_pre(&pre));
        let eta = cfg.eta_tilde;
        let shrink = 1.0 - eta * cfg.weight_decay;
        let d = self.d;
        for k in 0..self.k {
            let c = eta * delta * self.v[k] * relu_prime(pre[k]);
            let row = &mut self.w[k * d..(k + 1) * d];
            if shrink != 1.0 {
                for (w, &x) in row.iter_mut().zip(input) {
                    *w = shrink * *w + c * x;
                }
            } else if c != 0.0 {
                for (w, &x) in row.iter_mut().zip(input) {
                    *w += c * x;
                }
            }
            self.b[k] += c;
        }
        let v_shrink = if cfg.decay_both_layers { shrink } else { 1.0 };
        for k in 0..self.k {
            self.v[k] = v_shrink * self.v[k] + eta * delta * relu(pre[k]);
        }
        Ok(delta)
    }

    /// Order parameters with the centroids `μ₁ = e₁`, `μ₂ = e₂`.
    pub fn measure_order_params(&self) -> OrderState {
        let d = self.d;
        let mut e1 = vec![0.0; d];
        let mut e2 = vec![0.0; d];
        e1[0] = 1.0;
        e2[1] = 1.0;
        self.measure_with_centroids(&e1, &e2)
            .expect("basis centroids match the network dimension")
    }

    /// Order parameters against arbitrary orthonormal centroids.
    pub fn measure_with_centroids(&self, mu1: &[f64], mu2: &[f64]) -> Result<OrderState> {
        self.check_input(mu1)?;
        self.check_input(mu2)?;
        let k = self.k;
        let mut q = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..=i {
                let x = dot(self.w_row(i), self.w_row(j));
                q[(i, j)] = x;
                q[(j, i)] = x;
            }
        }
        let mut m = DMatrix::zeros(k, 2);
        for i in 0..k {
            m[(i, 0)] = dot(self.w_row(i), mu1);
            m[(i, 1)] = dot(self.w_row(i), mu2);
        }
        OrderState::from_parts(
            q,
            m,
            DVector::from_column_slice(&self.v),
            DVector::from_column_slice(&self.b),
        )
    }
}

/// Pure form of [`FiniteNet::step`].
pub fn sgd_step(net: &FiniteNet, sample: &Sample, cfg: &SgdConfig) -> Result<FiniteNet> {
    let mut next = net.clone();
    next.step(&sample.input, sample.label, cfg)?;
    Ok(next)
}

/// Dot product with four independent accumulators.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{sample_input, MixtureSpec};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_pcg::Pcg64Mcg;

    fn net_with_pre(v: Vec<f64>, pre: &[f64]) -> (FiniteNet, Vec<f64>) {
        // W = I on the first K coordinates, so the input equals the pre-activations.
        let k = v.len();
        let d = k.max(2);
        let mut w = vec![0.0; k * d];
        for i in 0..k {
            w[i * d + i] = 1.0;
        }
        let mut input = vec![0.0; d];
        input[..k].copy_from_slice(pre);
        (FiniteNet::new(k, d, w, vec![0.0; k], v).unwrap(), input)
    }

    #[test]
    fn forward_examples() {
        let (net, x) = net_with_pre(vec![2.0], &[0.8]);
        assert_abs_diff_eq!(net.forward(&x).unwrap(), 1.6, epsilon = 1e-15);

        let (net, x) = net_with_pre(vec![1.0, -1.0, 1.0, -1.0], &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(net.forward(&x).unwrap(), 0.0);

        let zero = FiniteNet::new(3, 5, vec![0.0; 15], vec![0.0; 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(zero.forward(&[0.3, -1.0, 2.0, 5.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let zero = FiniteNet::new(1, 3, vec![0.0; 3], vec![0.0], vec![1.0]).unwrap();
        assert!(matches!(zero.forward(&[1.0, 2.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn loss_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert_abs_diff_eq!(loss(0.0, 0.0), ln2, epsilon = 1e-15);
        assert_abs_diff_eq!(loss(1.0, 0.0), ln2, epsilon = 1e-15);
        let l = loss(1.0, 700.0);
        assert!(l.is_finite() && l >= 0.0 && l <= 1e-300, "{l}");
        assert!(loss(0.0, 1000.0).is_finite());
        assert_abs_diff_eq!(loss(0.0, 1000.0), 1000.0, epsilon = 1e-9);
        assert!(loss(1.0, -1000.0).is_finite());
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert_abs_diff_eq!(sigmoid(0.0), 0.5, epsilon = 0.0);
    }

    #[test]
    fn zero_network_is_a_fixed_point() {
        let mut rng = Pcg64Mcg::seed_from_u64(2);
        let spec = MixtureSpec::new(0.4, 1.0).unwrap();
        let net = FiniteNet::new(2, 10, vec![0.0; 20], vec![0.0; 2], vec![0.7, -1.3]).unwrap();
        let cfg = SgdConfig::new(2.5, 0.0).unwrap();
        for _ in 0..20 {
            let s = sample_input(10, &spec, &mut rng).unwrap();
            assert_eq!(sgd_step(&net, &s, &cfg).unwrap(), net);
        }
    }

    #[test]
    fn pure_decay_when_error_is_saturated() {
        // Logit is hugely positive on a label-1 input, so Δ underflows to 0.
        let mut w = vec![0.0; 2 * 4];
        w[0] = 1.0;
        w[4 + 2] = 0.5;
        let mut net = FiniteNet::new(2, 4, w.clone(), vec![0.0; 2], vec![1e6, 0.0]).unwrap();
        let cfg = SgdConfig::new(2.5, 0.01).unwrap();
        let delta = net.step(&[1000.0, 0.0, 0.0, 0.0], 1, &cfg).unwrap();
        assert_eq!(delta, 0.0);
        for (a, b) in net.w().iter().zip(&w) {
            assert_eq!(*a, b * (1.0 - 0.025));
        }
    }

    #[test]
    fn measure_examples() {
        let net = FiniteNet::new(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0], vec![0.0; 2], vec![1.0, 1.0]).unwrap();
        let s = net.measure_order_params();
        assert_eq!(s.q, DMatrix::identity(2, 2));
        assert_eq!(s.m, DMatrix::identity(2, 2));

        let zero = FiniteNet::new(2, 3, vec![0.0; 6], vec![0.0; 2], vec![1.0, 1.0]).unwrap();
        let s = zero.measure_order_params();
        assert_eq!(s.q, DMatrix::zeros(2, 2));
        assert_eq!(s.m, DMatrix::zeros(2, 2));
    }

    #[test]
    fn init_scaling_puts_diagonal_of_q_near_one() {
        let mut rng = Pcg64Mcg::seed_from_u64(9);
        let d = 1000;
        let draws = 100;
        // Q_kk = χ²_d / d: mean 1, variance 2/d.
        let sd = (2.0 / d as f64).sqrt();
        let mean: f64 = (0..draws)
            .map(|_| FiniteNet::random(1, d, &mut rng).unwrap().measure_order_params().q[(0, 0)])
            .sum::<f64>()
            / draws as f64;
        assert!((mean - 1.0).abs() < 5.0 * sd / (draws as f64).sqrt(), "{mean}");
    }

    #[test]
    fn embed_reproduces_order_parameters() {
        let mut rng = Pcg64Mcg::seed_from_u64(4);
        let s = crate::state::random_init(4, 200, &mut rng).unwrap();
        let net = FiniteNet::embed(&s, 50).unwrap();
        let back = net.measure_order_params();
        assert_abs_diff_eq!(back.q, s.q, epsilon = 1e-10);
        assert_abs_diff_eq!(back.m, s.m, epsilon = 1e-12);
        assert_eq!(back.v, s.v);
    }

    #[test]
    fn single_step_order_parameter_algebra() {
        // Q' = Q + c_k λ_l + c_l λ_k + c_k c_l |X|², M' = M + c_k X·μ.
        let mut rng = Pcg64Mcg::seed_from_u64(21);
        let spec = MixtureSpec::new(0.5, 1.5).unwrap();
        let cfg = SgdConfig::new(0.3, 0.0).unwrap();
        for _ in 0..50 {
            let mut net = FiniteNet::random(3, 40, &mut rng).unwrap();
            net.b = vec![0.1, -0.2, 0.05];
            let before = net.measure_order_params();
            let s = sample_input(40, &spec, &mut rng).unwrap();
            let pre = net.preactivations(&s.input);
            let lam: Vec<f64> = (0..3).map(|k| pre[k] - net.b[k]).collect();
            let delta = s.label as f64 - sigmoid(net.forward(&s.input).unwrap());
            let c: Vec<f64> = (0..3).map(|k| cfg.eta_tilde * delta * net.v[k] * relu_prime(pre[k])).collect();
            let x2 = dot(&s.input, &s.input);
            net.step(&s.input, s.label, &cfg).unwrap();
            let after = net.measure_order_params();
            for k in 0..3 {
                for l in 0..3 {
                    let expect = before.q[(k, l)] + c[k] * lam[l] + c[l] * lam[k] + c[k] * c[l] * x2;
                    assert_abs_diff_eq!(after.q[(k, l)], expect, epsilon = 1e-12);
                }
                for a in 0..2 {
                    let expect = before.m[(k, a)] + c[k] * s.input[a];
                    assert_abs_diff_eq!(after.m[(k, a)], expect, epsilon = 1e-13);
                }
                assert_abs_diff_eq!(after.b[k], before.b[k] + c[k], epsilon = 1e-15);
                let expect_v = before.v[k] + cfg.eta_tilde * delta * relu(pre[k]);
                assert_abs_diff_eq!(after.v[k], expect_v, epsilon = 1e-15);
            }
        }
    }
}
