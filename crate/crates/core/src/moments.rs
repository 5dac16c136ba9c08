//! Monte-Carlo estimation of the expectations that drive the order-parameter
//! ODE.
//!
//! For a state and a mixture spec, the `K + 2` local fields are Gaussian
//! within each cluster. We draw them from a Cholesky factor of the field
//! covariance, evaluate the network's error signal `Δ = y − sigmoid(ŷ)`, and
//! average
//!
//! * `A[k, i] = E[λ_i g'(λ_k + b_k) Δ]` for `i` over all `K + 2` fields,
//! * `B[k, l] = σ² E[g'(λ_k + b_k) g'(λ_l + b_l) Δ²]`,
//! * `D[k] = E[g(λ_k + b_k) Δ]`, `E[k] = E[g'(λ_k + b_k) Δ]`.
//!
//! Sampling is stratified (equal counts per cluster) and antithetic (each
//! draw `ξ` is paired with `−ξ`). The row index of `A` is the unit whose
//! derivative appears, which is the indexing the ODE consumes.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::finite_net::{relu, sigmoid};
use crate::mixture::{field_moments, ClusterId, MixtureSpec};
use crate::state::OrderState;

/// Default smallest jitter tried when a covariance is singular.
pub const DEFAULT_BASE_JITTER: f64 = 1e-12;

/// Lower-triangular factor of a (possibly jittered) covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedCovariance {
    pub lower: DMatrix<f64>,
    /// Diagonal jitter that was added before factorising (0 if none).
    pub jitter: f64,
}

/// Cholesky factorisation with geometric jitter escalation.
///
/// Tries the plain matrix first, then `base_jitter`, `10·base_jitter`, …
/// up to `max(base_jitter, 1e-4·trace(C)/n)`.
pub fn factorize(c: &DMatrix<f64>, base_jitter: f64) -> Result<FactorizedCovariance> {
    let n = c.nrows();
    if c.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, got: c.ncols() });
    }
    if !(base_jitter > 0.0) {
        return Err(Error::param("base_jitter", "must be > 0"));
    }
    let scale = 1.0 + c.amax();
    if (c - c.transpose()).amax() > 1e-12 * scale {
        return Err(Error::param("covariance", "must be symmetric"));
    }
    if let Some(ch) = Cholesky::new(c.clone()) {
        return Ok(FactorizedCovariance {
            lower: ch.unpack(),
            jitter: 0.0,
        });
    }
    let cap = base_jitter.max(1e-4 * c.trace() / n as f64);
    let mut jitter = base_jitter;
    while jitter <= cap * (1.0 + 1e-12) {
        let mut shifted = c.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(shifted) {
            return Ok(FactorizedCovariance {
                lower: ch.unpack(),
                jitter,
            });
        }
        jitter *= 10.0;
    }
    Err(Error::NotFactorisable { max_jitter: cap })
}

/// Draws antithetic pairs of field vectors for one cluster.
///
/// Fields with zero variance (a zero-norm unit, or `σ = 0`) are held exactly
/// at their mean; only the remaining block is factorised.
#[derive(Debug, Clone)]
pub struct FieldSampler {
    p: usize,
    mean: Vec<f64>,
    /// Indices of the random fields.
    active: Vec<usize>,
    /// Row-major lower factor over `active`.
    lower: Vec<f64>,
    lower_mat: DMatrix<f64>,
    jitter: f64,
    xi: Vec<f64>,
}

impl FieldSampler {
    pub fn new(state: &OrderState, cluster: ClusterId, spec: &MixtureSpec, base_jitter: f64) -> Result<Self> {
        let fm = field_moments(state, cluster, spec);
        let p = fm.mean.len();
        let active: Vec<usize> = (0..p).filter(|&i| fm.covariance[(i, i)] > 0.0).collect();
        let r = active.len();
        let (lower, lower_mat, jitter) = if r == 0 {
            (Vec::new(), DMatrix::zeros(0, 0), 0.0)
        } else {
            let sub = DMatrix::from_fn(r, r, |i, j| {
                let (a, b) = (active[i], active[j]);
                0.5 * (fm.covariance[(a, b)] + fm.covariance[(b, a)])
            });
            let f = factorize(&sub, base_jitter)?;
            let mut flat = vec![0.0; r * r];
            for i in 0..r {
                for j in 0..=i {
                    flat[i * r + j] = f.lower[(i, j)];
                }
            }
            (flat, f.lower, f.jitter)
        };
        Ok(FieldSampler {
            p,
            mean: fm.mean.iter().copied().collect(),
            active,
            lower,
            lower_mat,
            jitter,
            xi: vec![0.0; r],
        })
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Indices of the fields with nonzero variance.
    pub fn random_fields(&self) -> &[usize] {
        &self.active
    }

    /// Fills `plus` with `mean + Lξ` and `minus` with `mean − Lξ`.
    pub fn draw_pair<R: Rng + ?Sized>(&mut self, rng: &mut R, plus: &mut [f64], minus: &mut [f64]) {
        plus.copy_from_slice(&self.mean);
        minus.copy_from_slice(&self.mean);
        let r = self.active.len();
        for x in self.xi.iter_mut() {
            *x = StandardNormal.sample(rng);
        }
        for (i, &idx) in self.active.iter().enumerate() {
            let row = &self.lower[i * r..i * r + i + 1];
            let y = crate::finite_net::dot(row, &self.xi[..=i]);
            plus[idx] += y;
            minus[idx] -= y;
        }
    }
}

impl FieldSampler {
    /// Draws `pairs` antithetic pairs as the columns of a `p × 2·pairs`
    /// matrix, all `+` draws first. Consumes `rng` exactly like `pairs`
    /// calls to [`FieldSampler::draw_pair`].
    pub fn draw_block<R: Rng + ?Sized>(&self, rng: &mut R, pairs: usize) -> DMatrix<f64> {
        let r = self.active.len();
        let xi = DMatrix::<f64>::from_iterator(r, pairs, (0..r * pairs).map(|_| StandardNormal.sample(&mut *rng)));
        let y = &self.lower_mat * xi;
        let mut out = DMatrix::zeros(self.p, 2 * pairs);
        for c in 0..pairs {
            for (i, m) in self.mean.iter().enumerate() {
                out[(i, c)] = *m;
                out[(i, c + pairs)] = *m;
            }
            for (i, &idx) in self.active.iter().enumerate() {
                out[(idx, c)] += y[(i, c)];
                out[(idx, c + pairs)] -= y[(i, c)];
            }
        }
        out
    }
}

/// Monte-Carlo standard errors of an [`ExpectationSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectationErrors {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub d: DVector<f64>,
    pub e: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpectationSet {
    /// `K × (K+2)`; row = unit carrying `g'`, column = field.
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub d: DVector<f64>,
    pub e: DVector<f64>,
    pub n_samples: usize,
    /// Present when requested through [`EstimatorOptions::with_errors`].
    pub errors: Option<ExpectationErrors>,
    /// Largest jitter any cluster needed.
    pub jitter: f64,
}

impl ExpectationSet {
    pub fn zeros(k: usize) -> Self {
        ExpectationSet {
            a: DMatrix::zeros(k, k + 2),
            b: DMatrix::zeros(k, k),
            d: DVector::zeros(k),
            e: DVector::zeros(k),
            n_samples: 0,
            errors: None,
            jitter: 0.0,
        }
    }

    pub fn k(&self) -> usize {
        self.d.len()
    }

    pub fn all_finite(&self) -> bool {
        self.a.iter().chain(self.b.iter()).chain(self.d.iter()).chain(self.e.iter()).all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorOptions {
    /// Total samples over all four clusters; rounded up to a multiple of 8.
    pub n_samples: usize,
    pub with_errors: bool,
    pub base_jitter: f64,
}

impl EstimatorOptions {
    pub fn new(n_samples: usize) -> Self {
        EstimatorOptions {
            n_samples,
            with_errors: false,
            base_jitter: DEFAULT_BASE_JITTER,
        }
    }

    pub fn with_errors(mut self) -> Self {
        self.with_errors = true;
        self
    }

    fn pairs_per_cluster(&self) -> usize {
        self.n_samples.div_ceil(8).max(1)
    }
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        EstimatorOptions::new(4000)
    }
}

/// Running sums for one cluster (or one antithetic pair).
struct Accum {
    k: usize,
    p: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    d: Vec<f64>,
    e: Vec<f64>,
}

impl Accum {
    fn new(k: usize) -> Self {
        let p = k + 2;
        Accum {
            k,
            p,
            a: vec![0.0; k * p],
            b: vec![0.0; k * k],
            d: vec![0.0; k],
            e: vec![0.0; k],
        }
    }

    fn clear(&mut self) {
        self.a.iter_mut().for_each(|x| *x = 0.0);
        self.b.iter_mut().for_each(|x| *x = 0.0);
        self.d.iter_mut().for_each(|x| *x = 0.0);
        self.e.iter_mut().for_each(|x| *x = 0.0);
    }

    /// Adds one field vector's integrands. `b` is filled on its lower triangle.
    #[inline]
    fn add(&mut self, lam: &[f64], bias: &[f64], readout: &[f64], label: f64, inv_sqrt_k: f64, on: &mut Vec<usize>) {
        let k = self.k;
        let p = self.p;
        on.clear();
        let mut logit = 0.0;
        for j in 0..k {
            let pre = lam[j] + bias[j];
            if pre > 0.0 {
                on.push(j);
                logit += readout[j] * pre;
            }
        }
        let delta = label - sigmoid(logit * inv_sqrt_k);
        if delta == 0.0 {
            return;
        }
        let d2 = delta * delta;
        for (n, &j) in on.iter().enumerate() {
            let pre = lam[j] + bias[j];
            self.d[j] += relu(pre) * delta;
            self.e[j] += delta;
            let row = &mut self.a[j * p..(j + 1) * p];
            for (a, &l) in row.iter_mut().zip(lam) {
                *a += l * delta;
            }
            let brow = &mut self.b[j * k..(j + 1) * k];
            for &l in &on[..=n] {
                brow[l] += d2;
            }
        }
    }

    /// Adds the integrands of every column of `fields`. Same sums as
    /// calling [`Accum::add`] per column, with `A` and `B` as products
    /// `GΛᵀ` and `GGᵀ` where `G[k, n] = g'(λ_k + b_k) Δ_n`.
    fn add_block(&mut self, fields: &DMatrix<f64>, bias: &[f64], readout: &[f64], label: f64, inv_sqrt_k: f64) {
        let k = self.k;
        let p = self.p;
        let n = fields.ncols();
        let mut g = DMatrix::<f64>::zeros(k, n);
        for c in 0..n {
            let lam = &fields.as_slice()[c * p..(c + 1) * p];
            let mut logit = 0.0;
            for j in 0..k {
                let pre = lam[j] + bias[j];
                if pre > 0.0 {
                    logit += readout[j] * pre;
                }
            }
            let delta = label - sigmoid(logit * inv_sqrt_k);
            if delta == 0.0 {
                continue;
            }
            for j in 0..k {
                let pre = lam[j] + bias[j];
                if pre > 0.0 {
                    g[(j, c)] = delta;
                    self.d[j] += pre * delta;
                    self.e[j] += delta;
                }
            }
        }
        let a = &g * fields.transpose();
        let b = &g * g.transpose();
        for j in 0..k {
            for i in 0..p {
                self.a[j * p + i] += a[(j, i)];
            }
            for l in 0..k {
                self.b[j * k + l] += b[(j, l)];
            }
        }
    }

    fn add_scaled(&mut self, other: &Accum, c: f64) {
        for (x, y) in self.a.iter_mut().zip(&other.a) {
            *x += c * y;
        }
        for (x, y) in self.b.iter_mut().zip(&other.b) {
            *x += c * y;
        }
        for (x, y) in self.d.iter_mut().zip(&other.d) {
            *x += c * y;
        }
        for (x, y) in self.e.iter_mut().zip(&other.e) {
            *x += c * y;
        }
    }

    fn add_squares(&mut self, other: &Accum, c: f64) {
        for (x, y) in self.a.iter_mut().zip(&other.a) {
            *x += c * y * y;
        }
        for (x, y) in self.b.iter_mut().zip(&other.b) {
            *x += c * y * y;
        }
        for (x, y) in self.d.iter_mut().zip(&other.d) {
            *x += c * y * y;
        }
        for (x, y) in self.e.iter_mut().zip(&other.e) {
            *x += c * y * y;
        }
    }

    fn flat(&self) -> impl Iterator<Item = &f64> {
        self.a.iter().chain(&self.b).chain(&self.d).chain(&self.e)
    }

    fn flat_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.a.iter_mut().chain(self.b.iter_mut()).chain(self.d.iter_mut()).chain(self.e.iter_mut())
    }
}

/// Estimates `A, B, D, E` at `state` under `spec`.
pub fn estimate_expectations<R: Rng + ?Sized>(
    state: &OrderState,
    spec: &MixtureSpec,
    opts: &EstimatorOptions,
    rng: &mut R,
) -> Result<ExpectationSet> {
    let k = state.k();
    let p = k + 2;
    let pairs = opts.pairs_per_cluster();
    let inv_sqrt_k = 1.0 / (k as f64).sqrt();
    let bias: Vec<f64> = state.b.iter().copied().collect();
    let readout: Vec<f64> = state.v.iter().copied().collect();

    let mut total = Accum::new(k);
    let mut cluster_sum = Accum::new(k);
    let mut total_var = Accum::new(k);
    let mut pair = Accum::new(k);
    let mut cluster_sq = Accum::new(k);
    let mut plus = vec![0.0; p];
    let mut minus = vec![0.0; p];
    let mut on = Vec::with_capacity(k);
    let mut jitter = 0.0f64;

    for cluster in ClusterId::ALL {
        let mut sampler = FieldSampler::new(state, cluster, spec, opts.base_jitter)?;
        jitter = jitter.max(sampler.jitter());
        let label = cluster.label() as f64;
        cluster_sum.clear();
        if opts.with_errors {
            cluster_sq.clear();
        }
        if opts.with_errors {
            for _ in 0..pairs {
                sampler.draw_pair(rng, &mut plus, &mut minus);
                pair.clear();
                pair.add(&plus, &bias, &readout, label, inv_sqrt_k, &mut on);
                pair.add(&minus, &bias, &readout, label, inv_sqrt_k, &mut on);
                cluster_sum.add_scaled(&pair, 1.0);
                cluster_sq.add_squares(&pair, 1.0);
            }
        } else {
            let fields = sampler.draw_block(rng, pairs);
            cluster_sum.add_block(&fields, &bias, &readout, label, inv_sqrt_k);
        }
        // Cluster mean over 2·pairs evaluations; clusters weigh 1/4 each.
        let per_eval = 1.0 / (2 * pairs) as f64;
        total.add_scaled(&cluster_sum, 0.25 * per_eval);
        if opts.with_errors {
            // Pair units u = (f₊ + f₋)/2 are i.i.d.; sums here are of 2u.
            let n = pairs as f64;
            let mut var = Accum::new(k);
            for ((v, s), q) in var.flat_mut().zip(cluster_sum.flat()).zip(cluster_sq.flat()) {
                let mean_u = 0.5 * s / n;
                let mean_u2 = 0.25 * q / n;
                let sample_var = (mean_u2 - mean_u * mean_u).max(0.0) * n / (n - 1.0).max(1.0);
                *v = sample_var / n;
            }
            total_var.add_scaled(&var, 1.0 / 16.0);
        }
    }

    let s2 = spec.sigma * spec.sigma;
    let a = DMatrix::from_row_slice(k, p, &total.a);
    let mut b = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..=i {
            let x = s2 * total.b[i * k + j];
            b[(i, j)] = x;
            b[(j, i)] = x;
        }
    }
    let errors = opts.with_errors.then(|| {
        let mut eb = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..=i {
                let x = s2 * total_var.b[i * k + j].sqrt();
                eb[(i, j)] = x;
                eb[(j, i)] = x;
            }
        }
        ExpectationErrors {
            a: DMatrix::from_row_slice(k, p, &total_var.a).map(f64::sqrt),
            b: eb,
            d: DVector::from_column_slice(&total_var.d).map(f64::sqrt),
            e: DVector::from_column_slice(&total_var.e).map(f64::sqrt),
        }
    });
    Ok(ExpectationSet {
        a,
        b,
        d: DVector::from_column_slice(&total.d),
        e: DVector::from_column_slice(&total.e),
        n_samples: pairs * 8,
        errors,
        jitter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;
    use rand::SeedableRng;
    use rand_distr::StandardNormal;
    use rand_pcg::Pcg64Mcg;

    #[test]
    fn identity_factorises_without_jitter() {
        let f = factorize(&DMatrix::identity(3, 3), 1e-12).unwrap();
        assert_eq!(f.lower, DMatrix::identity(3, 3));
        assert_eq!(f.jitter, 0.0);
    }

    #[test]
    fn zero_matrix_gets_base_jitter() {
        let f = factorize(&DMatrix::zeros(4, 4), 1e-10).unwrap();
        assert_eq!(f.jitter, 1e-10);
        assert_abs_diff_eq!(f.lower, DMatrix::identity(4, 4) * 1e-5, epsilon = 1e-20);
    }

    #[test]
    fn indefinite_matrix_fails_permanently() {
        let c = dmatrix![1.0, 0.0; 0.0, -1.0];
        assert!(matches!(factorize(&c, 1e-12), Err(Error::NotFactorisable { .. })));
        let asym = dmatrix![1.0, 0.5; 0.0, 1.0];
        assert!(factorize(&asym, 1e-12).is_err());
    }

    #[test]
    fn rank_deficient_gram_factorises_and_reconstructs() {
        let mut rng = Pcg64Mcg::seed_from_u64(8);
        for _ in 0..20 {
            let g: DMatrix<f64> = DMatrix::from_fn(6, 3, |_, _| StandardNormal.sample(&mut rng));
            let c = &g * g.transpose();
            let c = (&c + c.transpose()) * 0.5;
            let f = factorize(&c, 1e-14).unwrap();
            assert!(f.jitter <= 1e-8, "jitter {}", f.jitter);
            let mut target = c.clone();
            for i in 0..6 {
                target[(i, i)] += f.jitter;
            }
            let back = &f.lower * f.lower.transpose();
            assert!((back - target).amax() <= 1e-10 * (1.0 + c.amax()));
        }
    }

    #[test]
    fn zero_state_gives_exactly_zero_expectations() {
        let state = OrderState::zeros(3, DVector::from_vec(vec![0.4, -1.0, 2.0]));
        let spec = MixtureSpec::new(0.6, 1.5).unwrap();
        let mut rng = Pcg64Mcg::seed_from_u64(1);
        let ex = estimate_expectations(&state, &spec, &EstimatorOptions::new(800), &mut rng).unwrap();
        assert!(ex.a.iter().all(|&x| x == 0.0));
        assert!(ex.b.iter().all(|&x| x == 0.0));
        assert!(ex.d.iter().all(|&x| x == 0.0));
        assert!(ex.e.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sample_count_rounds_to_stratified_pairs() {
        let state = OrderState::zeros(1, DVector::from_element(1, 1.0));
        let spec = MixtureSpec::new(0.3, 1.0).unwrap();
        let mut rng = Pcg64Mcg::seed_from_u64(1);
        let ex = estimate_expectations(&state, &spec, &EstimatorOptions::new(4001), &mut rng).unwrap();
        assert_eq!(ex.n_samples, 4008);
    }

    #[test]
    fn common_seed_is_reproducible() {
        let state = crate::state::controlled_init(0.7, 0.3).unwrap();
        let spec = MixtureSpec::new(0.5, 2.0).unwrap();
        let opts = EstimatorOptions::new(2000);
        let a = estimate_expectations(&state, &spec, &opts, &mut Pcg64Mcg::seed_from_u64(5)).unwrap();
        let b = estimate_expectations(&state, &spec, &opts, &mut Pcg64Mcg::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn b_is_symmetric_and_scales_with_sigma_squared_at_zero_state() {
        // At a zero first layer with nonzero bias every unit is always on and
        // Δ = y − sigmoid(const), so B = σ²·E[Δ²] exactly for all σ.
        let mut state = OrderState::zeros(2, DVector::from_vec(vec![1.0, -0.5]));
        state.b = DVector::from_vec(vec![0.3, 0.2]);
        let mut rng = Pcg64Mcg::seed_from_u64(3);
        let logit = (1.0 * 0.3 - 0.5 * 0.2) / 2f64.sqrt();
        let s = sigmoid(logit);
        let mean_d2 = 0.5 * (1.0 - s).powi(2) + 0.5 * s * s;
        for sigma in [0.2, 0.4, 0.8] {
            let spec = MixtureSpec::new(sigma, 1.0).unwrap();
            let ex = estimate_expectations(&state, &spec, &EstimatorOptions::new(80), &mut rng).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    assert_abs_diff_eq!(ex.b[(i, j)], sigma * sigma * mean_d2, epsilon = 1e-14);
                }
            }
        }
    }

    #[test]
    fn block_path_matches_pairwise_path() {
        let mut rng = Pcg64Mcg::seed_from_u64(21);
        let mut state = crate::state::random_init(5, 50, &mut rng).unwrap();
        state.b = DVector::from_vec(vec![0.1, -0.2, 0.0, 0.3, -0.05]);
        let spec = MixtureSpec::new(0.6, 2.0).unwrap();
        let run = |opts: EstimatorOptions| {
            let mut rng = Pcg64Mcg::seed_from_u64(3);
            estimate_expectations(&state, &spec, &opts, &mut rng).unwrap()
        };
        let block = run(EstimatorOptions::new(2000));
        let pairwise = run(EstimatorOptions::new(2000).with_errors());
        assert_abs_diff_eq!(block.a, pairwise.a, epsilon = 1e-12);
        assert_abs_diff_eq!(block.b, pairwise.b, epsilon = 1e-12);
        assert_abs_diff_eq!(block.d, pairwise.d, epsilon = 1e-12);
        assert_abs_diff_eq!(block.e, pairwise.e, epsilon = 1e-12);
    }
}
