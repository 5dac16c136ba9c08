//! Independent oracles shared by the core tests and the acceptance target.
//!
//! Nothing here calls the estimator or the analytic gradient it checks.

#![allow(dead_code)]

use rand::{Rng, RngExt};
use xgm_core::finite_net::FiniteNet;
use xgm_core::mixture::{ClusterId, MixtureSpec};
use xgm_core::state::OrderState;

/// Gauss–Legendre nodes and weights on `[-1, 1]` (Newton on `P_n`), `n ≥ 2`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 2);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for j in 2..=n {
                let p2 = ((2 * j - 1) as f64 * z * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Nodes and weights on `[a, b]`.
fn rule_on(a: f64, b: f64, base: &(Vec<f64>, Vec<f64>)) -> Vec<(f64, f64)> {
    let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
    base.0.iter().zip(&base.1).map(|(&x, &w)| (mid + half * x, half * w)).collect()
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn cholesky3(c: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut l = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let s: f64 = (0..j).map(|m| l[i][m] * l[j][m]).sum();
            if i == j {
                l[i][i] = (c[i][i] - s).max(0.0).sqrt();
            } else {
                l[i][j] = if l[j][j] > 0.0 { (c[i][j] - s) / l[j][j] } else { 0.0 };
            }
        }
    }
    l
}

/// `A (1×3), B, D, E` for a single ReLU unit by tensor Gauss–Legendre
/// quadrature over the whitened fields, `n` nodes per axis on `[-8, 8]`.
/// The first axis starts at the ReLU kink, below which every integrand is 0.
pub fn single_unit_expectations(state: &OrderState, spec: &MixtureSpec, n: usize) -> ([f64; 3], f64, f64, f64) {
    assert_eq!(state.k(), 1, "the quadrature oracle handles K = 1");
    let (q, m1, m2) = (state.q[(0, 0)], state.m[(0, 0)], state.m[(0, 1)]);
    let (v, b) = (state.v[0], state.b[0]);
    let s2 = spec.sigma * spec.sigma;
    let cov = [[s2 * q, s2 * m1, s2 * m2], [s2 * m1, s2, 0.0], [s2 * m2, 0.0, s2]];
    let l = cholesky3(&cov);
    let base = gauss_legendre(n);
    let r = 8.0;
    let full = rule_on(-r, r, &base);
    let mut a = [0.0; 3];
    let (mut bb, mut d, mut e) = (0.0, 0.0, 0.0);
    for cluster in ClusterId::ALL {
        let s = cluster.sign.value() * spec.fading;
        let (ax, y) = (cluster.axis.index(), cluster.label() as f64);
        let mean = [s * [m1, m2][ax], if ax == 0 { s } else { 0.0 }, if ax == 1 { s } else { 0.0 }];
        // λ₀ = mean₀ + l₀₀ z₀ + b > 0  ⇔  z₀ > kink.
        let first = if l[0][0] > 0.0 {
            let kink = (-(mean[0] + b) / l[0][0]).max(-r);
            if kink >= r {
                continue;
            }
            rule_on(kink, r, &base)
        } else if mean[0] + b > 0.0 {
            full.clone()
        } else {
            continue;
        };
        for &(z0, w0) in &first {
            let p0 = w0 * std_normal_pdf(z0);
            for &(z1, w1) in &full {
                let p1 = p0 * w1 * std_normal_pdf(z1);
                for &(z2, w2) in &full {
                    let wt = 0.25 * p1 * w2 * std_normal_pdf(z2);
                    let lam = [
                        mean[0] + l[0][0] * z0,
                        mean[1] + l[1][0] * z0 + l[1][1] * z1,
                        mean[2] + l[2][0] * z0 + l[2][1] * z1 + l[2][2] * z2,
                    ];
                    let pre = lam[0] + b;
                    if pre <= 0.0 {
                        continue;
                    }
                    let delta = y - 1.0 / (1.0 + (-v * pre).exp());
                    for i in 0..3 {
                        a[i] += wt * lam[i] * delta;
                    }
                    bb += wt * delta * delta;
                    d += wt * pre * delta;
                    e += wt * delta;
                }
            }
        }
    }
    (a, s2 * bb, d, e)
}

/// Flat `(W, b, v)` of a network.
pub fn params(net: &FiniteNet) -> Vec<f64> {
    net.w().iter().chain(net.b()).chain(net.v()).copied().collect()
}

fn with_params(net: &FiniteNet, p: &[f64]) -> FiniteNet {
    let (k, d) = (net.k(), net.d());
    FiniteNet::new(k, d, p[..k * d].to_vec(), p[k * d..k * d + k].to_vec(), p[k * d + k..].to_vec())
        .expect("same shape")
}

/// Central finite-difference gradient of the sample loss.
pub fn fd_gradient(net: &FiniteNet, x: &[f64], label: u8, h: f64) -> Vec<f64> {
    let p = params(net);
    (0..p.len())
        .map(|i| {
            let mut up = p.clone();
            let mut dn = p.clone();
            up[i] += h;
            dn[i] -= h;
            let lu = with_params(net, &up).sample_loss(x, label).unwrap();
            let ld = with_params(net, &dn).sample_loss(x, label).unwrap();
            (lu - ld) / (2.0 * h)
        })
        .collect()
}

/// One random gradient-check instance. Returns the relative max-norm gap
/// between the SGD update and `−η̃√K` times the finite-difference gradient,
/// or `None` when a pre-activation sits within `kink_margin` of the kink.
pub fn gradient_check_instance<R: Rng + ?Sized>(rng: &mut R, h: f64, kink_margin: f64) -> Option<f64> {
    let k = rng.random_range(1..=6usize);
    let d = rng.random_range(2..=12usize);
    let mut u = |s: f64| s * (2.0 * rng.random::<f64>() - 1.0);
    let w: Vec<f64> = (0..k * d).map(|_| u(1.0)).collect();
    let b: Vec<f64> = (0..k).map(|_| u(0.5)).collect();
    let v: Vec<f64> = (0..k).map(|_| u(2.0)).collect();
    let x: Vec<f64> = (0..d).map(|_| u(2.0)).collect();
    let label = u8::from(u(1.0) > 0.0);
    let net = FiniteNet::new(k, d, w, b, v).unwrap();
    if net.preactivations(&x).iter().any(|p| p.abs() < kink_margin) {
        return None;
    }
    let eta = 0.3;
    let cfg = xgm_core::finite_net::SgdConfig::new(eta, 0.0).unwrap();
    let mut stepped = net.clone();
    stepped.step(&x, label, &cfg).unwrap();
    let update: Vec<f64> = params(&stepped).iter().zip(params(&net)).map(|(a, b)| a - b).collect();
    let fd = fd_gradient(&net, &x, label, h);
    let scale = -eta * (k as f64).sqrt();
    let expected: Vec<f64> = fd.iter().map(|g| scale * g).collect();
    let gap = update.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let norm = expected.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-12);
    Some(gap / norm)
}
