//! Doubly stochastic ELBO with exact reverse-mode gradients, plus the
//! closed-form expected log-likelihood and analytic SE-ARD statistics used to
//! verify it.
//!
//! For a point with latent sample `H` and input `x`, with `k = Σ_q k^H_q ⊗ k^X_q`,
//! `α = L⁻¹ k` and `S₀ = Σ₀H ⊗ Σ₀X`:
//!
//! ```text
//! a  = αᵀ M₀
//! b² = k_ff - αᵀα + αᵀ S₀ α
//! ```
//!
//! With a single Kronecker term `α = α_H ⊗ α_X`, so every quantity factorises
//! and no `M_H·M_X` matrix is ever formed. With several terms `L` is the dense
//! Cholesky factor of the summed covariance.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::inducing::{compute_kuu_with_jitter, kl_u, kl_u_grad, tri_pack_grad, KuuFactor};
use crate::kernels::{KernelFamily, KernelSpec, PreparedKernel};
use crate::kron::{back_substitute_transposed, cholesky_backward, forward_substitute, JitterPolicy};
use crate::latent::{kl_latent_grad, kl_latent_unchecked};
use crate::likelihood::LikelihoodSpec;
use crate::model::{ModelState, ParamRole};

/// Training pairs `(d, n)` with their estimator weights.
///
/// The estimate is `Σ_i data_weights[i]·(1/J)·Σ_j ℓ_ij - KL_u - Σ_k w_k·KL_{d_k}`
/// over `kl_weights = [(d_k, w_k)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub pairs: Vec<(usize, usize)>,
    pub data_weights: Vec<f64>,
    pub kl_weights: Vec<(usize, f64)>,
}

impl MiniBatch {
    /// Every training pair once, every output's KL once.
    pub fn full(data: &Dataset, d_model: usize) -> Self {
        let pairs = data.train_pairs();
        let data_weights = vec![1.0; pairs.len()];
        Self { pairs, data_weights, kl_weights: (0..d_model).map(|d| (d, 1.0)).collect() }
    }

    /// Weights for `pairs` drawn uniformly with replacement from all training
    /// pairs. Each draw also carries `N/(m_b·N_d)` of its output's KL so that
    /// the KL sum is unbiased for heterotopic data; outputs without training
    /// data contribute their KL exactly.
    pub fn flat_from_pairs(data: &Dataset, pairs: Vec<(usize, usize)>, d_model: usize) -> Self {
        let n_obs = data.n_train() as f64;
        let m_b = pairs.len() as f64;
        let counts: Vec<usize> = (0..d_model).map(|d| data.outputs.get(d).map_or(0, |o| o.count(Split::Train))).collect();
        let data_weights = vec![n_obs / m_b; pairs.len()];
        let mut kl_weights: Vec<(usize, f64)> = pairs.iter().map(|&(d, _)| (d, n_obs / (m_b * counts[d] as f64))).collect();
        kl_weights.extend((0..d_model).filter(|&d| counts[d] == 0).map(|d| (d, 1.0)));
        Self { pairs, data_weights, kl_weights }
    }

    pub fn sample_flat<R: Rng + ?Sized>(data: &Dataset, m_b: usize, d_model: usize, rng: &mut R) -> Result<Self> {
        let all = data.train_pairs();
        if all.is_empty() || m_b == 0 {
            return Err(Error::Precondition("cannot sample a mini-batch without training pairs".into()));
        }
        let pairs = (0..m_b).map(|_| all[rng.random_range(0..all.len())]).collect();
        Ok(Self::flat_from_pairs(data, pairs, d_model))
    }

    /// `B_O` outputs without replacement among those with training data, then
    /// `min(B_X, N_d)` of each one's training points without replacement.
    /// Weights `(D'/B_O)(N_d/B_X)` on data and `D'/B_O` on the sampled outputs'
    /// KL keep the estimator unbiased for heterotopic data.
    pub fn sample_structured<R: Rng + ?Sized>(data: &Dataset, b_o: usize, b_x: usize, d_model: usize, rng: &mut R) -> Result<Self> {
        let observed: Vec<usize> = (0..data.d()).filter(|&d| data.outputs[d].count(Split::Train) > 0).collect();
        if observed.is_empty() || b_o == 0 || b_x == 0 {
            return Err(Error::Precondition("cannot sample a mini-batch without training pairs".into()));
        }
        let b_o = b_o.min(observed.len());
        let scale_o = observed.len() as f64 / b_o as f64;
        let mut pairs = Vec::new();
        let mut data_weights = Vec::new();
        let mut kl_weights = Vec::new();
        for k in sample(rng, observed.len(), b_o) {
            let d = observed[k];
            let idx = data.outputs[d].indices(Split::Train);
            let take = b_x.min(idx.len());
            let w = scale_o * idx.len() as f64 / take as f64;
            for j in sample(rng, idx.len(), take) {
                pairs.push((d, idx[j]));
                data_weights.push(w);
            }
            kl_weights.push((d, scale_o));
        }
        let has_data: Vec<bool> = (0..d_model).map(|d| observed.binary_search(&d).is_ok()).collect();
        kl_weights.extend((0..d_model).filter(|&d| !has_data[d]).map(|d| (d, 1.0)));
        Ok(Self { pairs, data_weights, kl_weights })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Standard-normal draws for a batch, laid out `[entry][J][Q][Q_H]`.
pub fn sample_noise<R: Rng + ?Sized>(entries: usize, j: usize, q: usize, q_h: usize, rng: &mut R) -> Vec<f64> {
    (0..entries * j * q * q_h).map(|_| rng.sample(StandardNormal)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalMoments {
    pub a: f64,
    pub b2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    pub data: f64,
    pub kl_u: f64,
    pub kl_latent: f64,
    pub elbo: f64,
}

/// Everything about the state that does not depend on the query point.
pub(crate) struct Prepared<'a> {
    pub(crate) state: &'a ModelState,
    pub(crate) kh: Vec<PreparedKernel>,
    pub(crate) kx: Vec<PreparedKernel>,
    /// Jittered factor Grams `K^H_q + εI`, `K^X_q + εI`.
    pub(crate) gram_h: Vec<DMatrix<f64>>,
    pub(crate) gram_x: Vec<DMatrix<f64>>,
    pub(crate) factor: KuuFactor,
    pub(crate) m0mat: DMatrix<f64>,
    pub(crate) kff_terms: Vec<f64>,
    pub(crate) kff: f64,
}

/// Per-input quantities shared by every latent sample of one batch entry.
pub(crate) struct InputCache {
    pub(crate) kx: Vec<DVector<f64>>,
    // factored path only
    alpha_x: DVector<f64>,
    beta_x: DVector<f64>,
    nax: f64,
    nbx: f64,
    p: DVector<f64>,
}

pub(crate) struct SampleCache {
    pub(crate) kh: Vec<DVector<f64>>,
    pub(crate) a: f64,
    pub(crate) b2: f64,
    // factored path
    alpha_h: DVector<f64>,
    beta_h: DVector<f64>,
    // dense path
    alpha: DVector<f64>,
    amat: DMatrix<f64>,
    bmat: DMatrix<f64>,
}

impl<'a> Prepared<'a> {
    pub(crate) fn new(state: &'a ModelState) -> Result<Self> {
        let c = &state.config;
        let kuu = compute_kuu_with_jitter(&state.kernels_h, &state.kernels_x, &state.inducing, c.kuu_jitter)?;
        let factor = KuuFactor::new(&kuu, &JitterPolicy::default())?;
        let gram_h = kuu.terms().iter().map(|t| t.left().clone()).collect();
        let gram_x = kuu.terms().iter().map(|t| t.right().clone()).collect();
        let kh: Vec<PreparedKernel> = state.kernels_h.iter().map(KernelSpec::prepare).collect();
        let kx: Vec<PreparedKernel> = state.kernels_x.iter().map(KernelSpec::prepare).collect();
        let kff_terms: Vec<f64> = kh.iter().zip(&kx).map(|(h, x)| h.diag() * x.diag()).collect();
        let kff = kff_terms.iter().sum();
        Ok(Self { state, kh, kx, gram_h, gram_x, factor, m0mat: state.posterior.m0_mat(), kff_terms, kff })
    }

    fn factored(&self) -> Option<(&DMatrix<f64>, &DMatrix<f64>)> {
        match &self.factor {
            KuuFactor::Factored { lh, lx } => Some((&lh.l, &lx.l)),
            KuuFactor::Dense { .. } => None,
        }
    }

    pub(crate) fn input_cache(&self, x: &[f64]) -> InputCache {
        let ip = &self.state.inducing;
        let kx: Vec<DVector<f64>> = self.kx.iter().map(|k| DVector::from_fn(ip.m_x, |a, _| k.value(x, ip.x(a)))).collect();
        if let Some((_, lx)) = self.factored() {
            let mut alpha_x = kx[0].clone();
            forward_substitute(lx, alpha_x.as_mut_slice());
            let beta_x = self.state.posterior.l0x.tr_mul(&alpha_x);
            let p = &self.m0mat * &alpha_x;
            InputCache { nax: alpha_x.norm_squared(), nbx: beta_x.norm_squared(), kx, alpha_x, beta_x, p }
        } else {
            let e = DVector::zeros(0);
            InputCache { kx, alpha_x: e.clone(), beta_x: e.clone(), nax: 0.0, nbx: 0.0, p: e }
        }
    }

    /// `h` holds the `Q` latent vectors of one sample, concatenated.
    pub(crate) fn sample_forward(&self, ic: &InputCache, h: &[f64]) -> SampleCache {
        let ip = &self.state.inducing;
        let q_h = ip.q_h;
        let kh: Vec<DVector<f64>> = self
            .kh
            .iter()
            .enumerate()
            .map(|(q, k)| DVector::from_fn(ip.m_h, |i, _| k.value(&h[q * q_h..(q + 1) * q_h], ip.h(q, i))))
            .collect();
        let wp = &self.state.posterior;
        let empty_v = DVector::zeros(0);
        let empty_m = DMatrix::zeros(0, 0);
        if let Some((lh, _)) = self.factored() {
            let mut alpha_h = kh[0].clone();
            forward_substitute(lh, alpha_h.as_mut_slice());
            let beta_h = wp.l0h.tr_mul(&alpha_h);
            let a = alpha_h.dot(&ic.p);
            let b2 = self.kff - alpha_h.norm_squared() * ic.nax + beta_h.norm_squared() * ic.nbx;
            SampleCache { kh, a, b2, alpha_h, beta_h, alpha: empty_v, amat: empty_m.clone(), bmat: empty_m }
        } else {
            let (mh, mx) = (ip.m_h, ip.m_x);
            let mut k = vec![0.0; mh * mx];
            for q in 0..kh.len() {
                for i in 0..mh {
                    let hi = kh[q][i];
                    let row = &mut k[i * mx..(i + 1) * mx];
                    for (r, xa) in row.iter_mut().zip(ic.kx[q].iter()) {
                        *r += hi * xa;
                    }
                }
            }
            let alpha = self.factor.solve_lower(&k);
            let amat = DMatrix::from_row_slice(mh, mx, alpha.as_slice());
            let bmat = wp.l0h.tr_mul(&amat) * &wp.l0x;
            let a = alpha.dot(&wp.m0);
            let b2 = self.kff - alpha.norm_squared() + bmat.norm_squared();
            SampleCache { kh, a, b2, alpha_h: empty_v.clone(), beta_h: empty_v, alpha, amat, bmat }
        }
    }
}

/// Negative variances within this relative tolerance of zero are round-off.
fn clamp_variance(b2: f64, kff: f64) -> Result<(f64, bool)> {
    if b2 >= 0.0 {
        Ok((b2, false))
    } else if b2 > -1e-10 * kff.max(1.0) {
        Ok((0.0, true))
    } else {
        Err(Error::NonFinite {
            block: "marginal variance".into(),
            detail: format!("b² = {b2:e} is negative beyond round-off"),
        })
    }
}

/// Moments of `q(f)` at input `x` with latent vectors `h[q]`.
pub fn marginal_moments(state: &ModelState, x: &[f64], h: &[Vec<f64>]) -> Result<MarginalMoments> {
    let c = &state.config;
    if x.len() != c.q_x {
        return Err(Error::dim("query input", c.q_x, x.len()));
    }
    if h.len() != c.q {
        return Err(Error::dim("latent vectors", c.q, h.len()));
    }
    if let Some(v) = h.iter().find(|v| v.len() != c.q_h) {
        return Err(Error::dim("latent vector", c.q_h, v.len()));
    }
    let prep = Prepared::new(state)?;
    let ic = prep.input_cache(x);
    let s = prep.sample_forward(&ic, &h.concat());
    let (b2, _) = clamp_variance(s.b2, prep.kff)?;
    if !s.a.is_finite() {
        return Err(Error::NonFinite { block: "predictive mean".into(), detail: format!("a = {}", s.a) });
    }
    Ok(MarginalMoments { a: s.a, b2 })
}

fn check_batch(state: &ModelState, data: &Dataset, batch: &MiniBatch, j: usize, noise: &[f64]) -> Result<()> {
    let c = &state.config;
    if batch.is_empty() {
        return Err(Error::Precondition("mini-batch is empty".into()));
    }
    if j == 0 {
        return Err(Error::InvalidParameter("latent sample count J must be positive".into()));
    }
    if batch.data_weights.len() != batch.pairs.len() {
        return Err(Error::dim("mini-batch weights", batch.pairs.len(), batch.data_weights.len()));
    }
    if data.q_x != c.q_x {
        return Err(Error::dim("dataset input dimension", c.q_x, data.q_x));
    }
    let per = j * c.q * c.q_h;
    if noise.len() != batch.len() * per {
        return Err(Error::dim("latent noise", batch.len() * per, noise.len()));
    }
    for &(d, n) in &batch.pairs {
        if d >= c.d || d >= data.d() {
            return Err(Error::OutOfRange { context: "mini-batch output".into(), index: d, size: c.d.min(data.d()) });
        }
        let o = &data.outputs[d];
        if n >= o.len() {
            return Err(Error::OutOfRange { context: format!("observations of output {d}"), index: n, size: o.len() });
        }
        if o.split[n] != Split::Train {
            return Err(Error::Precondition(format!("pair ({d}, {n}) is not a training observation")));
        }
        if matches!(state.likelihood, LikelihoodSpec::Poisson) && (o.y[n] < 0.0 || o.y[n].fract() != 0.0) {
            return Err(Error::InvalidParameter(format!("Poisson target at ({d}, {n}) is not a count")));
        }
    }
    if let Some(&(d, _)) = batch.kl_weights.iter().find(|(d, _)| *d >= c.d) {
        return Err(Error::OutOfRange { context: "KL output".into(), index: d, size: c.d });
    }
    Ok(())
}

pub fn elbo_estimate(state: &ModelState, data: &Dataset, batch: &MiniBatch, j: usize, noise: &[f64]) -> Result<ElboTerms> {
    evaluate(state, data, batch, j, noise, false).map(|(t, _)| t)
}

/// ELBO estimate and its exact gradient in the flat layout of [`ModelState::pack`].
pub fn elbo_and_gradient(state: &ModelState, data: &Dataset, batch: &MiniBatch, j: usize, noise: &[f64]) -> Result<(ElboTerms, Vec<f64>)> {
    evaluate(state, data, batch, j, noise, true).map(|(t, g)| (t, g.expect("requested")))
}

/// Adjoint accumulators, one per parameter block.
struct Grads {
    means: Vec<f64>,
    log_stds: Vec<f64>,
    zx: Vec<f64>,
    zh: Vec<f64>,
    m0: DVector<f64>,
    l0h: DMatrix<f64>,
    l0x: DMatrix<f64>,
    kern: Vec<f64>,
    noise: Vec<f64>,
    // adjoints of the Kuu factor
    lh_bar: DMatrix<f64>,
    lx_bar: DMatrix<f64>,
    // dense path: columns of L⁻ᵀᾱ and α, so that L̄ = -K̄ Aᵀ
    kbar_cols: Vec<f64>,
    alpha_cols: Vec<f64>,
}

fn evaluate(state: &ModelState, data: &Dataset, batch: &MiniBatch, j: usize, noise: &[f64], want_grad: bool) -> Result<(ElboTerms, Option<Vec<f64>>)> {
    check_batch(state, data, batch, j, noise)?;
    let prep = Prepared::new(state)?;
    let c = &state.config;
    let ip = &state.inducing;
    let wp = &state.posterior;
    let layout = state.layout();
    let (mh, mx, q_h, q_x, nq) = (c.m_h, c.m_x, c.q_h, c.q_x, c.q);
    let per = nq * q_h;
    let factored = prep.factored().is_some();

    let mut g = Grads {
        means: vec![0.0; state.latent.means.len()],
        log_stds: vec![0.0; state.latent.log_stds.len()],
        zx: vec![0.0; ip.z_x.len()],
        zh: vec![0.0; ip.z_h.len()],
        m0: DVector::zeros(mh * mx),
        l0h: DMatrix::zeros(mh, mh),
        l0x: DMatrix::zeros(mx, mx),
        kern: vec![0.0; layout.range(ParamRole::KernelLogParams).len()],
        noise: vec![0.0; state.likelihood.params().len()],
        lh_bar: DMatrix::zeros(if factored { mh } else { 0 }, if factored { mh } else { 0 }),
        lx_bar: DMatrix::zeros(if factored { mx } else { 0 }, if factored { mx } else { 0 }),
        kbar_cols: Vec::new(),
        alpha_cols: Vec::new(),
    };
    let kh_off = layout.kernel_h_offsets.clone();
    let kx_off = layout.kernel_x_offsets.clone();
    let nph: Vec<usize> = state.kernels_h.iter().map(KernelSpec::n_params).collect();
    let npx: Vec<usize> = state.kernels_x.iter().map(KernelSpec::n_params).collect();

    let inv_j = 1.0 / j as f64;
    let mut data_term = 0.0;
    let mut h = vec![0.0; per];
    let mut tmp_h = vec![0.0; q_h];
    let mut tmp_x = vec![0.0; q_x];

    for (e, &(d, n)) in batch.pairs.iter().enumerate() {
        let o = &data.outputs[d];
        let x = &o.x[n];
        let y = o.y[n];
        let w = batch.data_weights[e] * inv_j;
        let ic = prep.input_cache(x);
        let lat_off = state.latent.offset(d, 0);
        let noise_idx = state.likelihood.noise_index(d);

        // factored-path accumulators for the input side
        let mut c1 = DVector::<f64>::zeros(if factored { mh } else { 0 });
        let mut c2 = 0.0;
        let mut c3 = 0.0;
        // dense-path accumulator: Σ_j K̄matᵀ k^H_q per q
        let mut kx_bar: Vec<DVector<f64>> = vec![DVector::zeros(mx); nq];

        for s in 0..j {
            let eps = &noise[(e * j + s) * per..(e * j + s + 1) * per];
            state.latent.sample_into(d, eps, &mut h);
            let sc = prep.sample_forward(&ic, &h);
            let (b2, clamped) = clamp_variance(sc.b2, prep.kff)?;
            let (l, da, db2, dn) = state.likelihood.expected(y, sc.a, b2, d, &state.rule);
            data_term += w * l;
            if !want_grad {
                continue;
            }
            let abar = w * da;
            let bbar = if clamped { 0.0 } else { w * db2 };
            if let Some(i) = noise_idx {
                g.noise[i] += w * dn;
            }
            // k_ff = Σ_q σ²_{H,q} σ²_{X,q}
            for q in 0..nq {
                let v = bbar * prep.kff_terms[q];
                g.kern[kh_off[q]] += v;
                g.kern[kx_off[q]] += v;
            }

            // adjoint of k^H_q, one vector per q
            let mut kh_bar: Vec<DVector<f64>> = Vec::with_capacity(nq);
            if factored {
                let nah = sc.alpha_h.norm_squared();
                let nbh = sc.beta_h.norm_squared();
                let mut ah_bar = &ic.p * abar + &sc.alpha_h * (-2.0 * bbar * ic.nax) + (&wp.l0h * &sc.beta_h) * (2.0 * bbar * ic.nbx);
                c1.axpy(abar, &sc.alpha_h, 1.0);
                c2 += bbar * nah;
                c3 += bbar * nbh;
                g.l0h.ger(2.0 * bbar * ic.nbx, &sc.alpha_h, &sc.beta_h, 1.0);
                let (lh, _) = prep.factored().expect("factored");
                back_substitute_transposed(lh, ah_bar.as_mut_slice());
                g.lh_bar.ger(-1.0, &ah_bar, &sc.alpha_h, 1.0);
                kh_bar.push(ah_bar);
            } else {
                let cmat = &wp.l0h * &sc.bmat * wp.l0x.transpose();
                let mut a_bar = &wp.m0 * abar - &sc.alpha * (2.0 * bbar);
                for i in 0..mh {
                    for a in 0..mx {
                        a_bar[i * mx + a] += 2.0 * bbar * cmat[(i, a)];
                    }
                }
                g.m0.axpy(abar, &sc.alpha, 1.0);
                if bbar != 0.0 {
                    g.l0h += (&sc.amat * (&wp.l0x * sc.bmat.transpose())) * (2.0 * bbar);
                    g.l0x += (sc.amat.transpose() * (&wp.l0h * &sc.bmat)) * (2.0 * bbar);
                }
                let k_bar = prep.factor.solve_upper(a_bar.as_slice());
                g.kbar_cols.extend_from_slice(k_bar.as_slice());
                g.alpha_cols.extend_from_slice(sc.alpha.as_slice());
                let kbar_mat = DMatrix::from_row_slice(mh, mx, k_bar.as_slice());
                for q in 0..nq {
                    kh_bar.push(&kbar_mat * &ic.kx[q]);
                    kx_bar[q] += kbar_mat.tr_mul(&sc.kh[q]);
                }
            }

            // through k^H_q(h_q, z_{q,i}) into h, Z_H and the latent kernel
            for q in 0..nq {
                let hq = &h[q * q_h..(q + 1) * q_h];
                let gp = &mut g.kern[kh_off[q]..kh_off[q] + nph[q]];
                let mut gh = vec![0.0; q_h];
                for i in 0..mh {
                    let sbar = kh_bar[q][i];
                    if sbar == 0.0 {
                        continue;
                    }
                    tmp_h.iter_mut().for_each(|v| *v = 0.0);
                    prep.kh[q].value_grad(hq, ip.h(q, i), sbar, &mut tmp_h, gp);
                    let zo = ip.h_offset(q, i);
                    for t in 0..q_h {
                        gh[t] += tmp_h[t];
                        g.zh[zo + t] -= tmp_h[t];
                    }
                }
                let o = lat_off + q * q_h;
                for t in 0..q_h {
                    g.means[o + t] += gh[t];
                    g.log_stds[o + t] += gh[t] * state.latent.log_stds[o + t].exp() * eps[q * q_h + t];
                }
            }
        }
        if !want_grad {
            continue;
        }

        // adjoint of k^X_q for this entry
        let mut kx_bar_final: Vec<DVector<f64>> = Vec::with_capacity(nq);
        if factored {
            let mut ax_bar = prep.m0mat.tr_mul(&c1) - &ic.alpha_x * (2.0 * c2) + (&wp.l0x * &ic.beta_x) * (2.0 * c3);
            for i in 0..mh {
                for a in 0..mx {
                    g.m0[i * mx + a] += c1[i] * ic.alpha_x[a];
                }
            }
            g.l0x.ger(2.0 * c3, &ic.alpha_x, &ic.beta_x, 1.0);
            let (_, lx) = prep.factored().expect("factored");
            back_substitute_transposed(lx, ax_bar.as_mut_slice());
            g.lx_bar.ger(-1.0, &ax_bar, &ic.alpha_x, 1.0);
            kx_bar_final.push(ax_bar);
        } else {
            kx_bar_final = kx_bar;
        }
        for q in 0..nq {
            let gp = &mut g.kern[kx_off[q]..kx_off[q] + npx[q]];
            for a in 0..mx {
                let sbar = kx_bar_final[q][a];
                if sbar == 0.0 {
                    continue;
                }
                tmp_x.iter_mut().for_each(|v| *v = 0.0);
                prep.kx[q].value_grad(x, ip.x(a), sbar, &mut tmp_x, gp);
                for t in 0..q_x {
                    g.zx[a * q_x + t] -= tmp_x[t];
                }
            }
        }
    }

    let kl_u_val = kl_u(wp)?;
    let mut kl_lat = 0.0;
    for &(d, wk) in &batch.kl_weights {
        kl_lat += wk * kl_latent_unchecked(&state.latent, &state.prior, d);
    }
    let terms = ElboTerms { data: data_term, kl_u: kl_u_val, kl_latent: kl_lat, elbo: data_term - kl_u_val - kl_lat };
    if !terms.elbo.is_finite() {
        let block = state.non_finite_block().map_or("objective", ParamRole::name);
        return Err(Error::NonFinite { block: block.into(), detail: format!("ELBO terms {terms:?}") });
    }
    if !want_grad {
        return Ok((terms, None));
    }

    for &(d, wk) in &batch.kl_weights {
        kl_latent_grad(&state.latent, &state.prior, d, -wk, &mut g.means, &mut g.log_stds);
    }
    let (gm0, gl0h, gl0x) = kl_u_grad(wp);
    g.m0 -= gm0;
    g.l0h -= gl0h;
    g.l0x -= gl0x;

    // back through the Cholesky factor(s) of K_uu into the inducing Grams
    match &prep.factor {
        KuuFactor::Factored { lh, lx } => {
            let kh_bar = cholesky_backward(&lh.l, &g.lh_bar);
            let kx_bar = cholesky_backward(&lx.l, &g.lx_bar);
            gram_backward(&prep.kh[0], ip.m_h, |i| ip.h(0, i), &kh_bar, &mut g.kern[kh_off[0]..kh_off[0] + nph[0]], &mut g.zh[..ip.m_h * q_h], q_h);
            gram_backward(&prep.kx[0], ip.m_x, |a| ip.x(a), &kx_bar, &mut g.kern[kx_off[0]..kx_off[0] + npx[0]], &mut g.zx, q_x);
        }
        KuuFactor::Dense { l } => {
            let m = mh * mx;
            let cols = g.alpha_cols.len() / m;
            let kb = DMatrix::from_column_slice(m, cols, &g.kbar_cols);
            let al = DMatrix::from_column_slice(m, cols, &g.alpha_cols);
            let l_bar = -(kb * al.transpose());
            let k_bar = cholesky_backward(&l.l, &l_bar);
            for q in 0..nq {
                let mut gh_bar = DMatrix::zeros(mh, mh);
                let mut gx_bar = DMatrix::zeros(mx, mx);
                for i in 0..mh {
                    for jj in 0..mh {
                        let khij = prep.gram_h[q][(i, jj)];
                        let mut acc = 0.0;
                        for a in 0..mx {
                            for b in 0..mx {
                                let kb = k_bar[(i * mx + a, jj * mx + b)];
                                acc += kb * prep.gram_x[q][(a, b)];
                                gx_bar[(a, b)] += kb * khij;
                            }
                        }
                        gh_bar[(i, jj)] = acc;
                    }
                }
                let zo = q * ip.m_h * q_h;
                gram_backward(&prep.kh[q], ip.m_h, |i| ip.h(q, i), &gh_bar, &mut g.kern[kh_off[q]..kh_off[q] + nph[q]], &mut g.zh[zo..zo + ip.m_h * q_h], q_h);
                gram_backward(&prep.kx[q], ip.m_x, |a| ip.x(a), &gx_bar, &mut g.kern[kx_off[q]..kx_off[q] + npx[q]], &mut g.zx, q_x);
            }
        }
    }

    let mut flat = Vec::with_capacity(layout.total());
    flat.extend_from_slice(&g.means);
    flat.extend_from_slice(&g.log_stds);
    flat.extend_from_slice(&g.zx);
    flat.extend_from_slice(&g.zh);
    flat.extend_from_slice(g.m0.as_slice());
    flat.extend(tri_pack_grad(&wp.l0h, &g.l0h));
    flat.extend(tri_pack_grad(&wp.l0x, &g.l0x));
    flat.extend_from_slice(&g.kern);
    flat.extend_from_slice(&g.noise);
    debug_assert_eq!(flat.len(), layout.total());
    if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
        let block = layout.role_of(i).map_or("unknown", ParamRole::name);
        return Err(Error::NonFinite { block: block.into(), detail: format!("gradient entry {i} is {}", flat[i]) });
    }
    Ok((terms, Some(flat)))
}

/// Accumulates `Σ_ij K̄_ij ∂K_ij` of a Gram `K_ij = k(z_i, z_j)` into the
/// kernel parameters and locations.
fn gram_backward<'z>(
    k: &PreparedKernel,
    m: usize,
    z: impl Fn(usize) -> &'z [f64],
    k_bar: &DMatrix<f64>,
    gp: &mut [f64],
    gz: &mut [f64],
    dim: usize,
) {
    let mut tmp = vec![0.0; dim];
    for i in 0..m {
        for j in 0..m {
            let s = k_bar[(i, j)];
            if s == 0.0 {
                continue;
            }
            tmp.iter_mut().for_each(|v| *v = 0.0);
            k.value_grad(z(i), z(j), s, &mut tmp, gp);
            for t in 0..dim {
                gz[i * dim + t] += tmp[t];
                gz[j * dim + t] -= tmp[t];
            }
        }
    }
}

/// Expectations of the SE-ARD latent kernel under `h ~ N(m, diag(S))`, with
/// `S` holding variances.
#[derive(Debug, Clone, PartialEq)]
pub struct SeArdStatistics {
    /// `E[k(h, h)] = σ²`.
    pub psi: f64,
    /// `E[k(h, z_i)]`.
    pub psi_vec: DVector<f64>,
    /// `E[k(h, z_i) k(h, z_j)]`.
    pub phi: DMatrix<f64>,
    /// `(2π)^{Q_H/2} σ² Π l_i^{1/2}`, the normaliser written as `c` in the derivation.
    pub c: f64,
}

pub fn seard_statistics(m: &[f64], s: &[f64], z: &[Vec<f64>], spec: &KernelSpec) -> Result<SeArdStatistics> {
    if spec.family != KernelFamily::SeArd {
        return Err(Error::Unsupported(format!("analytic statistics need an SE-ARD kernel, got {}", spec.family.name())));
    }
    let q_h = spec.dim();
    if m.len() != q_h {
        return Err(Error::dim("latent mean", q_h, m.len()));
    }
    if s.len() != q_h {
        return Err(Error::dim("latent variance", q_h, s.len()));
    }
    if s.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidParameter("latent variances must be nonnegative".into()));
    }
    if let Some(zi) = z.iter().find(|zi| zi.len() != q_h) {
        return Err(Error::dim("latent inducing location", q_h, zi.len()));
    }
    let sigma2 = spec.outputscale();
    let l: Vec<f64> = spec.log_lengthscales.iter().map(|t| t.exp()).collect();
    let c = (2.0 * std::f64::consts::PI).powf(q_h as f64 / 2.0) * sigma2 * l.iter().map(|v| v.sqrt()).product::<f64>();
    let pre1: f64 = l.iter().zip(s).map(|(l, s)| (l / (l + s)).sqrt()).product();
    let pre2: f64 = l.iter().zip(s).map(|(l, s)| (l / (l + 2.0 * s)).sqrt()).product();
    let nz = z.len();
    let psi_vec = DVector::from_fn(nz, |i, _| {
        let e: f64 = (0..q_h).map(|t| (z[i][t] - m[t]).powi(2) / (l[t] + s[t])).sum();
        sigma2 * pre1 * (-0.5 * e).exp()
    });
    let phi = DMatrix::from_fn(nz, nz, |i, j| {
        let mut e = 0.0;
        for t in 0..q_h {
            let diff = z[i][t] - z[j][t];
            let mid = 0.5 * (z[i][t] + z[j][t]);
            e += diff * diff / (4.0 * l[t]) + (mid - m[t]).powi(2) / (l[t] + 2.0 * s[t]);
        }
        sigma2 * sigma2 * pre2 * (-e).exp()
    });
    Ok(SeArdStatistics { psi: sigma2, psi_vec, phi, c })
}

/// Exact `Σ_{d,n} E_{q(H)}[E_{q(f)} log N(y_dn | f, σ²)]` over all training
/// points, for one Kronecker term, a tied Gaussian noise, an SE-ARD latent
/// kernel and isotopic training inputs. Suitable only for small problems.
#[allow(non_snake_case)]
pub fn closed_form_F(state: &ModelState, data: &Dataset) -> Result<f64> {
    let c = &state.config;
    if c.q != 1 {
        return Err(Error::Unsupported("closed-form expected log-likelihood needs Q = 1".into()));
    }
    let noise2 = match &state.likelihood {
        LikelihoodSpec::Gaussian { log_noise } if log_noise.iter().all(|v| *v == log_noise[0]) => (2.0 * log_noise[0]).exp(),
        _ => return Err(Error::Unsupported("closed-form expected log-likelihood needs a shared Gaussian noise".into())),
    };
    if state.kernels_h[0].family != KernelFamily::SeArd {
        return Err(Error::Unsupported("closed-form expected log-likelihood needs an SE-ARD latent kernel".into()));
    }
    if !data.is_isotopic_train() {
        return Err(Error::Unsupported("closed-form expected log-likelihood needs isotopic training data".into()));
    }
    let prep = Prepared::new(state)?;
    let ip = &state.inducing;
    let (mh, mx) = (ip.m_h, ip.m_x);
    let kinv = prep.factor.inverse();
    let l = prep.factor.dense_l();
    let m_u = &l * &state.posterior.m0;
    let s0 = state.posterior.s0h().kronecker(&state.posterior.s0x());
    let sigma_u = &l * s0 * l.transpose();
    let second = &m_u * m_u.transpose() + sigma_u;
    let kx = &prep.kx[0];
    let zh = ip.h_list(0);
    let mut total = 0.0;
    for d in 0..data.d() {
        let o = &data.outputs[d];
        let idx = o.indices(Split::Train);
        if idx.is_empty() {
            continue;
        }
        let n = idx.len() as f64;
        let y = DVector::from_iterator(idx.len(), idx.iter().map(|&k| o.y[k]));
        let kfu_x = DMatrix::from_fn(idx.len(), mx, |r, a| kx.value(&o.x[idx[r]], ip.x(a)));
        let m = state.latent.mean(d, 0);
        let s: Vec<f64> = state.latent.std(d, 0).iter().map(|v| v * v).collect();
        let st = seard_statistics(m, &s, &zh, &state.kernels_h[0])?;
        // Ψ_d = Ψ^Hᵀ ⊗ K^X_fu (N × M), Φ_d = Φ^H ⊗ K^X_uf K^X_fu
        let psi_d = DMatrix::from_fn(idx.len(), mh * mx, |r, col| st.psi_vec[col / mx] * kfu_x[(r, col % mx)]);
        let phi_d = st.phi.kronecker(&(kfu_x.transpose() * &kfu_x));
        let psi_tr = n * st.psi * kx.diag();
        let kphi = &kinv * &phi_d;
        let t1 = (&kphi * &kinv * &second).trace();
        let t2 = (y.transpose() * &psi_d * &kinv * &m_u)[(0, 0)];
        total += -0.5 * n * (2.0 * std::f64::consts::PI * noise2).ln() - y.norm_squared() / (2.0 * noise2) - t1 / (2.0 * noise2)
            + t2 / noise2
            - (psi_tr - kphi.trace()) / (2.0 * noise2);
    }
    Ok(total)
}
