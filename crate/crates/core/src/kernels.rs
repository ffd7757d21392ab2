//! Stationary kernels on the input and latent spaces.
//!
//! All hyperparameters live in log space. Two lengthscale conventions are in
//! use:
//!
//! * `SeArd` divides squared differences by `l_i` itself,
//!   `σ² exp(-½ Σ (x_i - x'_i)² / l_i)`, so that its analytic expectations
//!   under Gaussian inputs stay in the same symbols as the derivation they come
//!   from.
//! * The Matérn family and the periodic product use the usual
//!   `r = sqrt(Σ (x_i - x'_i)² / l_i²)`.
//!
//! The periodic kernel is the product of an exp-sine-squared factor and a
//! unit-scale Matérn-5/2, sharing the per-dimension lengthscales.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    SeArd,
    Matern12,
    Matern32,
    Matern52,
    PeriodicMatern52,
}

impl KernelFamily {
    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::SeArd => "se-ard",
            KernelFamily::Matern12 => "matern12",
            KernelFamily::Matern32 => "matern32",
            KernelFamily::Matern52 => "matern52",
            KernelFamily::PeriodicMatern52 => "periodic-matern52",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "se-ard" | "se" | "rbf" => KernelFamily::SeArd,
            "matern12" => KernelFamily::Matern12,
            "matern32" => KernelFamily::Matern32,
            "matern52" => KernelFamily::Matern52,
            "periodic-matern52" => KernelFamily::PeriodicMatern52,
            _ => return None,
        })
    }
}

/// A kernel family together with its log-space hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub log_outputscale: f64,
    pub log_lengthscales: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_period: Option<f64>,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, outputscale: f64, lengthscales: &[f64], period: Option<f64>) -> Result<Self> {
        if !(outputscale > 0.0 && outputscale.is_finite()) {
            return Err(Error::InvalidParameter(format!("outputscale must be positive, got {outputscale}")));
        }
        if lengthscales.is_empty() {
            return Err(Error::InvalidParameter("at least one lengthscale is required".into()));
        }
        if let Some(l) = lengthscales.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidParameter(format!("lengthscales must be positive, got {l}")));
        }
        let log_period = match (family, period) {
            (KernelFamily::PeriodicMatern52, Some(p)) if p > 0.0 && p.is_finite() => Some(p.ln()),
            (KernelFamily::PeriodicMatern52, _) => {
                return Err(Error::InvalidParameter("periodic kernel needs a positive period".into()))
            }
            (_, Some(_)) => {
                return Err(Error::InvalidParameter(format!(
                    "{} kernel takes no period",
                    family.name()
                )))
            }
            (_, None) => None,
        };
        Ok(Self {
            family,
            log_outputscale: outputscale.ln(),
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
            log_period,
        })
    }

    /// Same lengthscale on every one of `dim` dimensions.
    pub fn isotropic(family: KernelFamily, outputscale: f64, lengthscale: f64, dim: usize, period: Option<f64>) -> Result<Self> {
        Self::new(family, outputscale, &vec![lengthscale; dim], period)
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn outputscale(&self) -> f64 {
        self.log_outputscale.exp()
    }

    pub fn n_params(&self) -> usize {
        1 + self.log_lengthscales.len() + usize::from(self.log_period.is_some())
    }

    /// Log hyperparameters in the order outputscale, lengthscales, period.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        p.push(self.log_outputscale);
        p.extend_from_slice(&self.log_lengthscales);
        if let Some(lp) = self.log_period {
            p.push(lp);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::dim("kernel parameters", self.n_params(), p.len()));
        }
        self.log_outputscale = p[0];
        let d = self.log_lengthscales.len();
        self.log_lengthscales.copy_from_slice(&p[1..1 + d]);
        if self.log_period.is_some() {
            self.log_period = Some(p[1 + d]);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.params().iter().all(|v| v.is_finite() && v.exp().is_finite() && v.exp() > 0.0);
        if !ok {
            return Err(Error::InvalidParameter(format!("{} kernel has non-finite hyperparameters", self.family.name())));
        }
        if (self.family == KernelFamily::PeriodicMatern52) != self.log_period.is_some() {
            return Err(Error::InvalidParameter("period must be present exactly for the periodic family".into()));
        }
        Ok(())
    }

    pub(crate) fn prepare(&self) -> PreparedKernel {
        PreparedKernel::new(self)
    }

    pub fn eval(&self, x1: &[f64], x2: &[f64]) -> Result<f64> {
        self.check_dim(x1)?;
        self.check_dim(x2)?;
        Ok(self.prepare().value(x1, x2))
    }

    /// Value, gradient with respect to `x1` (the gradient with respect to `x2`
    /// is its negative) and gradient with respect to [`KernelSpec::params`].
    pub fn eval_with_grad(&self, x1: &[f64], x2: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        self.check_dim(x1)?;
        self.check_dim(x2)?;
        let mut gx = vec![0.0; self.dim()];
        let mut gp = vec![0.0; self.n_params()];
        let v = self.prepare().value_grad(x1, x2, 1.0, &mut gx, &mut gp);
        Ok((v, gx, gp))
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::dim(format!("{} kernel input", self.family.name()), self.dim(), x.len()));
        }
        Ok(())
    }
}

/// Gram matrix with entry `(i, j) = k(x1[i], x2[j])`.
pub fn gram(spec: &KernelSpec, x1: &[Vec<f64>], x2: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    for x in x1.iter().chain(x2) {
        spec.check_dim(x)?;
    }
    let k = spec.prepare();
    Ok(DMatrix::from_fn(x1.len(), x2.len(), |i, j| k.value(&x1[i], &x2[j])))
}

/// Kernel with the exponentiated hyperparameters cached for inner loops.
#[derive(Debug, Clone)]
pub(crate) struct PreparedKernel {
    family: KernelFamily,
    outputscale: f64,
    /// `1/l_i` for SE-ARD, `1/l_i²` otherwise.
    inv_scale: Vec<f64>,
    period: f64,
}

const SQRT3: f64 = 1.732_050_807_568_877_2;
const SQRT5: f64 = 2.236_067_977_499_79;

impl PreparedKernel {
    fn new(spec: &KernelSpec) -> Self {
        let inv_scale = spec
            .log_lengthscales
            .iter()
            .map(|t| match spec.family {
                KernelFamily::SeArd => (-t).exp(),
                _ => (-2.0 * t).exp(),
            })
            .collect();
        Self {
            family: spec.family,
            outputscale: spec.log_outputscale.exp(),
            inv_scale,
            period: spec.log_period.map_or(1.0, f64::exp),
        }
    }

    /// `k(x, x)`; every family here is stationary with unit correlation at zero lag.
    pub(crate) fn diag(&self) -> f64 {
        self.outputscale
    }

    fn scaled_sq_dist(&self, x1: &[f64], x2: &[f64]) -> f64 {
        x1.iter()
            .zip(x2)
            .zip(&self.inv_scale)
            .map(|((a, b), w)| (a - b) * (a - b) * w)
            .sum()
    }

    pub(crate) fn value(&self, x1: &[f64], x2: &[f64]) -> f64 {
        let s = self.outputscale;
        match self.family {
            KernelFamily::SeArd => s * (-0.5 * self.scaled_sq_dist(x1, x2)).exp(),
            KernelFamily::Matern12 => s * (-self.scaled_sq_dist(x1, x2).sqrt()).exp(),
            KernelFamily::Matern32 => {
                let r = self.scaled_sq_dist(x1, x2).sqrt();
                s * (1.0 + SQRT3 * r) * (-SQRT3 * r).exp()
            }
            KernelFamily::Matern52 => s * matern52_unit(self.scaled_sq_dist(x1, x2)),
            KernelFamily::PeriodicMatern52 => {
                let r2 = self.scaled_sq_dist(x1, x2);
                s * matern52_unit(r2) * self.periodic_factor(x1, x2)
            }
        }
    }

    fn periodic_factor(&self, x1: &[f64], x2: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((a, b), w) in x1.iter().zip(x2).zip(&self.inv_scale) {
            let s = (PI * (a - b) / self.period).sin();
            acc += s * s * w;
        }
        (-2.0 * acc).exp()
    }

    /// Returns `k(x1, x2)` and accumulates `scale · ∂k/∂x1` into `gx` and
    /// `scale · ∂k/∂θ` into `gp` (`θ` ordered as in [`KernelSpec::params`]).
    pub(crate) fn value_grad(&self, x1: &[f64], x2: &[f64], scale: f64, gx: &mut [f64], gp: &mut [f64]) -> f64 {
        let s = self.outputscale;
        let d = self.inv_scale.len();
        match self.family {
            KernelFamily::SeArd => {
                let k = s * (-0.5 * self.scaled_sq_dist(x1, x2)).exp();
                let ks = k * scale;
                gp[0] += ks;
                for i in 0..d {
                    let delta = x1[i] - x2[i];
                    let w = self.inv_scale[i];
                    gx[i] -= ks * delta * w;
                    gp[1 + i] += ks * 0.5 * delta * delta * w;
                }
                k
            }
            KernelFamily::Matern12 | KernelFamily::Matern32 | KernelFamily::Matern52 => {
                let r2 = self.scaled_sq_dist(x1, x2);
                let r = r2.sqrt();
                // k and g = (dk/dr) / r
                let (k, g) = match self.family {
                    KernelFamily::Matern12 => {
                        let e = (-r).exp();
                        (s * e, if r > 0.0 { -s * e / r } else { 0.0 })
                    }
                    KernelFamily::Matern32 => {
                        let e = (-SQRT3 * r).exp();
                        (s * (1.0 + SQRT3 * r) * e, -3.0 * s * e)
                    }
                    _ => {
                        let e = (-SQRT5 * r).exp();
                        (
                            s * (1.0 + SQRT5 * r + 5.0 / 3.0 * r2) * e,
                            -5.0 / 3.0 * s * (1.0 + SQRT5 * r) * e,
                        )
                    }
                };
                gp[0] += scale * k;
                let gs = g * scale;
                for i in 0..d {
                    let delta = x1[i] - x2[i];
                    let w = self.inv_scale[i];
                    gx[i] += gs * delta * w;
                    gp[1 + i] -= gs * delta * delta * w;
                }
                k
            }
            KernelFamily::PeriodicMatern52 => {
                let r2 = self.scaled_sq_dist(x1, x2);
                let r = r2.sqrt();
                let e = (-SQRT5 * r).exp();
                let m = (1.0 + SQRT5 * r + 5.0 / 3.0 * r2) * e;
                let gm = -5.0 / 3.0 * (1.0 + SQRT5 * r) * e;
                let p = self.periodic_factor(x1, x2);
                let k = s * m * p;
                gp[0] += scale * k;
                let omega = 2.0 * PI / self.period;
                let mut gperiod = 0.0;
                for i in 0..d {
                    let delta = x1[i] - x2[i];
                    let w = self.inv_scale[i];
                    let sin_half = (0.5 * omega * delta).sin();
                    let sin_full = (omega * delta).sin();
                    // periodic factor: dP/dx1 = -P w ω sin(ω Δ), dP/dlog l = 4 P w sin²(ωΔ/2)
                    let dp_dx = -p * w * omega * sin_full;
                    let dp_dl = 4.0 * p * w * sin_half * sin_half;
                    gperiod += p * w * omega * delta * sin_full;
                    let dm_dx = gm * delta * w;
                    let dm_dl = -gm * delta * delta * w;
                    gx[i] += scale * s * (m * dp_dx + p * dm_dx);
                    gp[1 + i] += scale * s * (m * dp_dl + p * dm_dl);
                }
                gp[1 + d] += scale * s * m * gperiod;
                k
            }
        }
    }
}

fn matern52_unit(r2: f64) -> f64 {
    let r = r2.sqrt();
    (1.0 + SQRT5 * r + 5.0 / 3.0 * r2) * (-SQRT5 * r).exp()
}
