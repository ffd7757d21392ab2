//! Expected log-likelihoods under a Gaussian marginal `f ~ N(a, b²)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;
const SQRT_PI: f64 = 1.772_453_850_905_516;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LikelihoodSpec {
    /// `log σ_d` per output, or a single shared entry when tied.
    Gaussian { log_noise: Vec<f64> },
    /// Log link: rate `exp(f)`.
    Poisson,
}

impl LikelihoodSpec {
    pub fn gaussian(d: usize, noise_std: f64, tied: bool) -> Result<Self> {
        if !(noise_std > 0.0 && noise_std.is_finite()) {
            return Err(Error::InvalidParameter(format!("noise std must be positive, got {noise_std}")));
        }
        let n = if tied { 1 } else { d };
        Ok(LikelihoodSpec::Gaussian { log_noise: vec![noise_std.ln(); n] })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LikelihoodSpec::Gaussian { .. } => "gaussian",
            LikelihoodSpec::Poisson => "poisson",
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            LikelihoodSpec::Gaussian { log_noise } => log_noise,
            LikelihoodSpec::Poisson => &[],
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            LikelihoodSpec::Gaussian { log_noise } => log_noise,
            LikelihoodSpec::Poisson => &mut [],
        }
    }

    pub fn is_tied(&self) -> bool {
        matches!(self, LikelihoodSpec::Gaussian { log_noise } if log_noise.len() == 1)
    }

    /// Index into [`LikelihoodSpec::params`] used by output `d`.
    pub fn noise_index(&self, d: usize) -> Option<usize> {
        match self {
            LikelihoodSpec::Gaussian { log_noise } if log_noise.len() == 1 => Some(0),
            LikelihoodSpec::Gaussian { log_noise } => (d < log_noise.len()).then_some(d),
            LikelihoodSpec::Poisson => None,
        }
    }

    /// `σ_d²` for a trained output under the Gaussian likelihood.
    pub fn noise_var(&self, d: usize) -> Option<f64> {
        let i = self.noise_index(d)?;
        Some((2.0 * self.params()[i]).exp())
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if let LikelihoodSpec::Gaussian { log_noise } = self {
            if log_noise.len() != 1 && log_noise.len() != d {
                return Err(Error::dim("Gaussian noise parameters", d, log_noise.len()));
            }
            if log_noise.iter().any(|v| !((2.0 * v).exp().is_finite() && (2.0 * v).exp() > 0.0)) {
                return Err(Error::InvalidParameter("Gaussian noise must be finite and positive".into()));
            }
        }
        Ok(())
    }

    /// Expected log-likelihood and its derivatives
    /// `(ℓ, ∂ℓ/∂a, ∂ℓ/∂b², ∂ℓ/∂log σ_d)` for one observation of output `d`.
    pub(crate) fn expected(&self, y: f64, a: f64, b2: f64, d: usize, rule: &GhRule) -> (f64, f64, f64, f64) {
        match self {
            LikelihoodSpec::Gaussian { log_noise } => {
                let ln = log_noise[if log_noise.len() == 1 { 0 } else { d }];
                let s2 = (2.0 * ln).exp();
                let r = y - a;
                let quad = r * r + b2;
                let l = -0.5 * LN_2PI - ln - quad / (2.0 * s2);
                (l, r / s2, -0.5 / s2, -1.0 + quad / s2)
            }
            LikelihoodSpec::Poisson => poisson_expected(y, a, b2.max(0.0).sqrt(), rule),
        }
    }
}

/// Gauss-Hermite nodes and weights for the weight function `e^{-x²}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GhRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GhRule {
    pub fn n(&self) -> usize {
        self.nodes.len()
    }
}

/// Golub-Welsch: nodes are the eigenvalues of the Jacobi matrix of the Hermite
/// recurrence. Each node is then polished by Newton steps on the orthonormal
/// polynomial and weighted by the Christoffel function, which is more accurate
/// than the squared eigenvector components for large `n`. Nodes and weights are
/// symmetrised so that odd moments vanish to rounding.
pub fn gh_rule(n: usize) -> Result<GhRule> {
    if !(1..=200).contains(&n) {
        return Err(Error::InvalidParameter(format!("Gauss-Hermite degree must be in 1..=200, got {n}")));
    }
    let mut jac = DMatrix::zeros(n, n);
    for k in 1..n {
        let off = (k as f64 / 2.0).sqrt();
        jac[(k, k - 1)] = off;
        jac[(k - 1, k)] = off;
    }
    let mut nodes: Vec<f64> = SymmetricEigen::new(jac).eigenvalues.iter().copied().collect();
    nodes.sort_by(f64::total_cmp);
    for x in nodes.iter_mut() {
        for _ in 0..3 {
            let (p, dp, _) = orthonormal_hermite(n, *x);
            if dp == 0.0 {
                break;
            }
            *x -= p / dp;
        }
    }
    let mut weights: Vec<f64> = nodes.iter().map(|&x| 1.0 / orthonormal_hermite(n, x).2).collect();
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let x = 0.5 * (nodes[j] - nodes[i]);
        nodes[i] = -x;
        nodes[j] = x;
        let w = 0.5 * (weights[i] + weights[j]);
        weights[i] = w;
        weights[j] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    Ok(GhRule { nodes, weights })
}

/// Returns `(p_n(x), p_n'(x), Σ_{k<n} p_k(x)²)` for the polynomials
/// orthonormal under `e^{-x²}`.
fn orthonormal_hermite(n: usize, x: f64) -> (f64, f64, f64) {
    let mut prev = 0.0;
    let mut cur = PI.powf(-0.25);
    let mut christoffel = 0.0;
    for k in 0..n {
        christoffel += cur * cur;
        let next = (2.0 / (k as f64 + 1.0)).sqrt() * x * cur - (k as f64 / (k as f64 + 1.0)).sqrt() * prev;
        prev = cur;
        cur = next;
    }
    // p_n' = sqrt(2n) p_{n-1}
    (cur, (2.0 * n as f64).sqrt() * prev, christoffel)
}

/// `E_{f~N(a, b2)}[log N(y | f, noise2)]`.
pub fn expected_loglik_gaussian(y: f64, a: f64, b2: f64, noise2: f64) -> Result<f64> {
    if !(noise2 > 0.0) {
        return Err(Error::InvalidParameter(format!("noise variance must be positive, got {noise2}")));
    }
    if b2 < 0.0 {
        return Err(Error::InvalidParameter(format!("marginal variance must be nonnegative, got {b2}")));
    }
    Ok(-0.5 * (LN_2PI + noise2.ln()) - ((y - a) * (y - a) + b2) / (2.0 * noise2))
}

/// `Σ_i w_i π^{-1/2} loglik(y, a + √2 b x_i)`.
pub fn gauss_hermite_expected_loglik(y: f64, a: f64, b: f64, loglik: impl Fn(f64, f64) -> f64, rule: &GhRule) -> f64 {
    if b == 0.0 {
        return loglik(y, a);
    }
    let s = std::f64::consts::SQRT_2 * b;
    rule.nodes
        .iter()
        .zip(&rule.weights)
        .map(|(x, w)| w * loglik(y, a + s * x))
        .sum::<f64>()
        / SQRT_PI
}

/// `y f - exp(f) - log y!`.
pub fn poisson_loglik(y: f64, f: f64) -> Result<f64> {
    if !(y >= 0.0 && y.fract() == 0.0 && y.is_finite()) {
        return Err(Error::InvalidParameter(format!("Poisson observations must be nonnegative integers, got {y}")));
    }
    Ok(poisson_loglik_unchecked(y, f))
}

pub(crate) fn poisson_loglik_unchecked(y: f64, f: f64) -> f64 {
    y * f - f.exp() - ln_factorial(y)
}

/// Exact through the `u64` factorial range, log-gamma beyond it.
fn ln_factorial(y: f64) -> f64 {
    if y <= 20.0 {
        ((2..=y as u64).product::<u64>() as f64).ln()
    } else {
        ln_gamma(y + 1.0)
    }
}

/// GH expected Poisson log-likelihood with derivatives in `a`, `b²`.
///
/// `∂/∂b²` uses `Σ w x (y - e^{f}) / (√2 b) = -e^a Σ w x² expm1(√2 b x)/(√2 b x)`,
/// valid because the rule's odd moments vanish; it stays accurate as `b → 0`.
fn poisson_expected(y: f64, a: f64, b: f64, rule: &GhRule) -> (f64, f64, f64, f64) {
    let s = std::f64::consts::SQRT_2 * b;
    let ea = a.exp();
    let (mut l, mut da, mut db2) = (0.0, 0.0, 0.0);
    for (x, w) in rule.nodes.iter().zip(&rule.weights) {
        let t = s * x;
        let rate = ea * t.exp();
        l += w * (y * (a + t) - rate);
        da += w * (y - rate);
        let ratio = if t == 0.0 { 1.0 } else { t.exp_m1() / t };
        db2 -= w * x * x * ratio;
    }
    (l / SQRT_PI - ln_factorial(y), da / SQRT_PI, ea * db2 / SQRT_PI, 0.0)
}
