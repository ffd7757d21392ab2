//! Predictive distributions at a latent point estimate or moment-matched over
//! `q(H_d)`, and the predictive NLPD.
//!
//! With `v = K_uu⁻¹ M_u` and `R = K_uu⁻¹ (Σ_u - K_uu) K_uu⁻¹`, the conditional
//! moments given `H` are `λ(H) = k(H)ᵀ v` and `γ(H) = k_ff + k(H)ᵀ R k(H)`.
//! Moment matching returns `m = E[λ]` and `v = E[λ²] + E[γ] - m²`, both of
//! which need only `E[k]` and `E[k kᵀ]`.

use std::cell::OnceCell;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{mse, nlpd_dataset, smse, Dataset, SmseReport, Split};
use crate::elbo::{sample_noise, seard_statistics, Prepared, SeArdStatistics};
use crate::error::{Error, Result};
use crate::inducing::KuuFactor;
use crate::kernels::KernelFamily;
use crate::likelihood::{poisson_loglik_unchecked, GhRule, LikelihoodSpec};
use crate::model::{LikelihoodKind, ModelState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictiveDist {
    pub mean: f64,
    /// Variance of the latent function value.
    pub variance_f: f64,
    /// Variance of a new observation; Gaussian likelihood on a trained output only.
    pub variance_y: Option<f64>,
}

/// Which latent vectors to predict with.
#[derive(Debug, Clone, PartialEq)]
pub enum LatentQuery {
    /// A trained output: its variational means.
    Output(usize),
    /// Explicit latent vectors, one per `q`, for an output without training data.
    Coords(Vec<Vec<f64>>),
}

/// Latent samples used when the latent kernels have no analytic statistics.
pub const DEFAULT_MC_SAMPLES: usize = 4096;

/// Prediction for many queries sharing one factorisation of `K_uu`.
pub struct Predictor<'a> {
    prep: Prepared<'a>,
    pub mc_samples: usize,
    moments: OnceCell<MomentCache>,
}

enum MomentCache {
    /// `P_H = L_H⁻ᵀ Σ₀H L_H⁻¹` and `K_H⁻¹`.
    Factored { ph: DMatrix<f64>, kh_inv: DMatrix<f64> },
    /// `v = L⁻ᵀ M₀` and dense `R`.
    Dense { v: DVector<f64>, r: DMatrix<f64> },
}

impl<'a> Predictor<'a> {
    pub fn new(state: &'a ModelState) -> Result<Self> {
        state.validate()?;
        Ok(Self { prep: Prepared::new(state)?, mc_samples: DEFAULT_MC_SAMPLES, moments: OnceCell::new() })
    }

    fn state(&self) -> &ModelState {
        self.prep.state
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        let q_x = self.state().config.q_x;
        if x.len() != q_x {
            return Err(Error::dim("query input", q_x, x.len()));
        }
        Ok(())
    }

    fn check_output(&self, d: usize) -> Result<()> {
        let n = self.state().config.d;
        if d >= n {
            return Err(Error::OutOfRange { context: "trained output (supply latent coordinates to extrapolate)".into(), index: d, size: n });
        }
        Ok(())
    }

    fn noise_var(&self, d: usize) -> Option<f64> {
        self.state().likelihood.noise_var(d)
    }

    fn finish(&self, mean: f64, var: f64, d: Option<usize>) -> Result<PredictiveDist> {
        if !(mean.is_finite() && var.is_finite()) {
            return Err(Error::NonFinite { block: "prediction".into(), detail: format!("mean {mean}, variance {var}") });
        }
        let variance_f = var.max(0.0);
        let variance_y = d.and_then(|d| self.noise_var(d)).map(|s2| variance_f + s2);
        Ok(PredictiveDist { mean, variance_f, variance_y })
    }

    pub fn at_means(&self, query: &LatentQuery, x: &[f64]) -> Result<PredictiveDist> {
        self.check_x(x)?;
        let c = &self.state().config;
        let (h, d) = match query {
            LatentQuery::Output(d) => {
                self.check_output(*d)?;
                let lv = &self.state().latent;
                ((0..c.q).flat_map(|q| lv.mean(*d, q).to_vec()).collect::<Vec<f64>>(), Some(*d))
            }
            LatentQuery::Coords(v) => {
                if v.len() != c.q {
                    return Err(Error::dim("latent coordinates", c.q, v.len()));
                }
                if let Some(h) = v.iter().find(|h| h.len() != c.q_h) {
                    return Err(Error::dim("latent coordinate vector", c.q_h, h.len()));
                }
                (v.concat(), None)
            }
        };
        let ic = self.prep.input_cache(x);
        let s = self.prep.sample_forward(&ic, &h);
        self.finish(s.a, s.b2, d)
    }

    /// Gaussian approximation to the prediction integrated over `q(H_d)`.
    /// Analytic for SE-ARD latent kernels; otherwise a fixed-seed Monte-Carlo
    /// average over `mc_samples` latent draws.
    pub fn moment_matched(&self, d: usize, x: &[f64]) -> Result<PredictiveDist> {
        self.check_x(x)?;
        self.check_output(d)?;
        let st = self.state();
        if st.kernels_h.iter().all(|k| k.family == KernelFamily::SeArd) {
            self.moment_matched_analytic(d, x)
        } else {
            self.moment_matched_mc(d, x)
        }
    }

    fn latent_statistics(&self, d: usize) -> Result<Vec<SeArdStatistics>> {
        let st = self.state();
        (0..st.config.q)
            .map(|q| {
                let s: Vec<f64> = st.latent.std(d, q).iter().map(|v| v * v).collect();
                seard_statistics(st.latent.mean(d, q), &s, &st.inducing.h_list(q), &st.kernels_h[q])
            })
            .collect()
    }

    fn moment_cache(&self) -> &MomentCache {
        self.moments.get_or_init(|| {
            let wp = &self.state().posterior;
            match &self.prep.factor {
                KuuFactor::Factored { lh, .. } => {
                    let n = lh.dim();
                    let linv = lh.l.solve_lower_triangular(&DMatrix::identity(n, n)).expect("nonsingular Cholesky factor");
                    let ph = linv.transpose() * wp.s0h() * &linv;
                    let kh_inv = linv.tr_mul(&linv);
                    MomentCache::Factored { ph, kh_inv }
                }
                KuuFactor::Dense { l } => {
                    let n = l.dim();
                    let linv = l.l.solve_lower_triangular(&DMatrix::identity(n, n)).expect("nonsingular Cholesky factor");
                    let s0 = wp.s0h().kronecker(&wp.s0x()) - DMatrix::identity(n, n);
                    let r = linv.transpose() * s0 * &linv;
                    let v = self.prep.factor.solve_upper(wp.m0.as_slice());
                    MomentCache::Dense { v, r }
                }
            }
        })
    }

    fn moment_matched_analytic(&self, d: usize, x: &[f64]) -> Result<PredictiveDist> {
        let stats = self.latent_statistics(d)?;
        let ic = self.prep.input_cache(x);
        let kff = self.prep.kff;
        let (mh, mx) = (self.state().config.m_h, self.state().config.m_x);
        let (mean, var) = match (self.moment_cache(), &self.prep.factor) {
            (MomentCache::Factored { ph, kh_inv }, KuuFactor::Factored { lh, lx }) => {
                // w = L_H⁻ᵀ M₀mat L_X⁻¹ k_X, so that λ = k_Hᵀ w
                let l0x = &self.state().posterior.l0x;
                let mut ax = ic.kx[0].clone();
                crate::kron::forward_substitute(&lx.l, ax.as_mut_slice());
                let bx = l0x.tr_mul(&ax);
                let mut w = &self.prep.m0mat * &ax;
                crate::kron::back_substitute_transposed(&lh.l, w.as_mut_slice());
                let s = &stats[0];
                let mean = s.psi_vec.dot(&w);
                let e_lambda2 = (&s.phi * &w).dot(&w);
                let e_gamma = kff + bx.norm_squared() * (ph * &s.phi).trace() - ax.norm_squared() * (kh_inv * &s.phi).trace();
                (mean, e_lambda2 + e_gamma - mean * mean)
            }
            (MomentCache::Dense { v, r }, _) => {
                let vmat = DMatrix::from_row_slice(mh, mx, v.as_slice());
                let mut mu = DVector::zeros(mh * mx);
                for (q, s) in stats.iter().enumerate() {
                    for i in 0..mh {
                        for a in 0..mx {
                            mu[i * mx + a] += s.psi_vec[i] * ic.kx[q][a];
                        }
                    }
                }
                let mean = mu.dot(v);
                let mut var = kff + (r * &mu).dot(&mu);
                for (q, s) in stats.iter().enumerate() {
                    let c = &s.phi - &s.psi_vec * s.psi_vec.transpose();
                    let w = &vmat * &ic.kx[q];
                    var += (&c * &w).dot(&w);
                    let kx = &ic.kx[q];
                    for i in 0..mh {
                        for jj in 0..mh {
                            let cij = c[(i, jj)];
                            if cij == 0.0 {
                                continue;
                            }
                            let block = r.view((jj * mx, i * mx), (mx, mx));
                            var += cij * (block * kx).dot(kx);
                        }
                    }
                }
                (mean, var)
            }
            _ => unreachable!("moment cache matches the factor kind"),
        };
        self.finish(mean, var, Some(d))
    }

    fn moment_matched_mc(&self, d: usize, x: &[f64]) -> Result<PredictiveDist> {
        let st = self.state();
        let c = &st.config;
        let n = self.mc_samples.max(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ d as u64);
        let noise = sample_noise(n, 1, c.q, c.q_h, &mut rng);
        let ic = self.prep.input_cache(x);
        let per = c.q * c.q_h;
        let mut h = vec![0.0; per];
        let (mut sa, mut sa2, mut sb2) = (0.0, 0.0, 0.0);
        for j in 0..n {
            st.latent.sample_into(d, &noise[j * per..(j + 1) * per], &mut h);
            let s = self.prep.sample_forward(&ic, &h);
            sa += s.a;
            sa2 += s.a * s.a;
            sb2 += s.b2.max(0.0);
        }
        let nf = n as f64;
        let mean = sa / nf;
        self.finish(mean, sb2 / nf + sa2 / nf - mean * mean, Some(d))
    }
}

pub fn predict_at_means(state: &ModelState, query: &LatentQuery, x: &[f64]) -> Result<PredictiveDist> {
    Predictor::new(state)?.at_means(query, x)
}

pub fn predict_moment_matched(state: &ModelState, d: usize, x: &[f64]) -> Result<PredictiveDist> {
    Predictor::new(state)?.moment_matched(d, x)
}

/// Negative log predictive density of `y`. Gaussian uses the closed form with
/// `variance_y`; Poisson takes the log of the Gauss-Hermite mixture of
/// Poisson masses over the latent Gaussian.
pub fn predictive_nlpd(dist: &PredictiveDist, y: f64, kind: LikelihoodKind, rule: &GhRule) -> Result<f64> {
    match kind {
        LikelihoodKind::Gaussian => {
            let vy = dist
                .variance_y
                .ok_or_else(|| Error::Precondition("Gaussian NLPD needs an observation variance, which extrapolated outputs lack".into()))?;
            if !(vy > 0.0) {
                return Err(Error::InvalidParameter(format!("observation variance must be positive, got {vy}")));
            }
            let r = y - dist.mean;
            Ok(0.5 * (2.0 * std::f64::consts::PI * vy).ln() + r * r / (2.0 * vy))
        }
        LikelihoodKind::Poisson => {
            if !(y >= 0.0 && y.fract() == 0.0) {
                return Err(Error::InvalidParameter(format!("Poisson target {y} is not a count")));
            }
            let sd = (2.0 * dist.variance_f.max(0.0)).sqrt();
            let terms: Vec<f64> = rule
                .nodes
                .iter()
                .zip(&rule.weights)
                .map(|(x, w)| w.ln() - 0.5 * std::f64::consts::PI.ln() + poisson_loglik_unchecked(y, dist.mean + sd * x))
                .collect();
            let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            Ok(-(top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln()))
        }
    }
}

/// Predictive NLPD for a state's likelihood.
pub fn state_nlpd(state: &ModelState, dist: &PredictiveDist, y: f64) -> Result<f64> {
    let kind = match state.likelihood {
        LikelihoodSpec::Gaussian { .. } => LikelihoodKind::Gaussian,
        LikelihoodSpec::Poisson => LikelihoodKind::Poisson,
    };
    predictive_nlpd(dist, y, kind, state.rule())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    AtMeans,
    MomentMatched,
}

/// One scored test point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointPrediction {
    pub d: usize,
    pub n: usize,
    pub y: f64,
    pub dist: PredictiveDist,
    pub nlpd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mse: f64,
    pub rmse: f64,
    pub smse: SmseReport,
    /// Absent when some scored point has no predictive density.
    pub nlpd: Option<f64>,
    pub per_output_mse: Vec<Option<f64>>,
    pub per_output_nlpd: Vec<Option<f64>>,
    pub points: Vec<PointPrediction>,
}

/// Scores every test point of outputs the model knows. SMSE normalises by the
/// output's training mean, or by its test mean when it has no training data.
pub fn evaluate(state: &ModelState, data: &Dataset, mode: PredictMode) -> Result<EvalReport> {
    let pr = Predictor::new(state)?;
    let d_eval = data.d();
    if d_eval > state.config.d {
        return Err(Error::dim("dataset outputs", state.config.d, d_eval));
    }
    let mut points = Vec::new();
    let mut preds = vec![Vec::new(); d_eval];
    let mut targets = vec![Vec::new(); d_eval];
    let mut refs = vec![0.0; d_eval];
    for (d, o) in data.outputs.iter().enumerate() {
        let test = o.indices(Split::Test);
        if test.is_empty() {
            continue;
        }
        refs[d] = o.mean_of(Split::Train).or_else(|| o.mean_of(Split::Test)).unwrap_or(0.0);
        for n in test {
            let dist = match mode {
                PredictMode::AtMeans => pr.at_means(&LatentQuery::Output(d), &o.x[n])?,
                PredictMode::MomentMatched => pr.moment_matched(d, &o.x[n])?,
            };
            let nlpd = state_nlpd(state, &dist, o.y[n]).ok();
            preds[d].push(dist.mean);
            targets[d].push(o.y[n]);
            points.push(PointPrediction { d, n, y: o.y[n], dist, nlpd });
        }
    }
    if points.is_empty() {
        return Err(Error::Precondition("dataset has no test points".into()));
    }
    let all_p: Vec<f64> = points.iter().map(|p| p.dist.mean).collect();
    let all_t: Vec<f64> = points.iter().map(|p| p.y).collect();
    let mse_all = mse(&all_p, &all_t)?;
    let smse_r = smse(&preds, &targets, &refs)?;
    let nl: Option<Vec<f64>> = points.iter().map(|p| p.nlpd).collect();
    let nlpd = nl.map(|v| nlpd_dataset(&v)).transpose()?;
    let per_output_mse = (0..d_eval).map(|d| mse(&preds[d], &targets[d]).ok()).collect();
    let per_output_nlpd = (0..d_eval)
        .map(|d| {
            let v: Option<Vec<f64>> = points.iter().filter(|p| p.d == d).map(|p| p.nlpd).collect();
            v.and_then(|v| nlpd_dataset(&v).ok())
        })
        .collect();
    Ok(EvalReport { mse: mse_all, rmse: mse_all.sqrt(), smse: smse_r, nlpd, per_output_mse, per_output_nlpd, points })
}
