//! Per-output latent coregionalisation variables `h_{d,q}`.
//!
//! Storage is flat with index `(d·Q + q)·Q_H + i`, so one parameter block
//! holds every latent mean and another every log standard deviation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPrior {
    pub d: usize,
    pub q: usize,
    pub q_h: usize,
    /// Unit variance per dimension; only the means vary.
    pub means: Vec<f64>,
}

impl LatentPrior {
    pub fn zeros(d: usize, q: usize, q_h: usize) -> Self {
        Self { d, q, q_h, means: vec![0.0; d * q * q_h] }
    }

    /// Prior means from per-output coordinates, replicated over the `Q` terms.
    pub fn from_coordinates(coords: &[Vec<f64>], q: usize) -> Result<Self> {
        let q_h = coords.first().map_or(0, Vec::len);
        if q_h == 0 {
            return Err(Error::InvalidParameter("coordinate prior needs at least one output and one dimension".into()));
        }
        let mut means = Vec::with_capacity(coords.len() * q * q_h);
        for c in coords {
            if c.len() != q_h {
                return Err(Error::dim("prior coordinates", q_h, c.len()));
            }
            for _ in 0..q {
                means.extend_from_slice(c);
            }
        }
        Ok(Self { d: coords.len(), q, q_h, means })
    }

    pub fn mean(&self, d: usize, q: usize) -> &[f64] {
        let o = (d * self.q + q) * self.q_h;
        &self.means[o..o + self.q_h]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVariational {
    pub d: usize,
    pub q: usize,
    pub q_h: usize,
    pub means: Vec<f64>,
    pub log_stds: Vec<f64>,
}

impl LatentVariational {
    pub fn new(d: usize, q: usize, q_h: usize, means: Vec<f64>, log_stds: Vec<f64>) -> Result<Self> {
        let n = d * q * q_h;
        if means.len() != n {
            return Err(Error::dim("latent means", n, means.len()));
        }
        if log_stds.len() != n {
            return Err(Error::dim("latent log stds", n, log_stds.len()));
        }
        let lv = Self { d, q, q_h, means, log_stds };
        lv.validate()?;
        Ok(lv)
    }

    /// Means start at the prior means plus standard-normal draws when the prior
    /// is zero, or at the prior means themselves for coordinate priors; log stds
    /// are `½·N(0, 1)`.
    pub fn init<R: Rng + ?Sized>(prior: &LatentPrior, rng: &mut R) -> Self {
        let n = prior.means.len();
        let zero_prior = prior.means.iter().all(|m| *m == 0.0);
        let means = prior
            .means
            .iter()
            .map(|m| if zero_prior { rng.sample::<f64, _>(StandardNormal) } else { *m })
            .collect();
        let log_stds = (0..n).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        Self { d: prior.d, q: prior.q, q_h: prior.q_h, means, log_stds }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.log_stds.iter().position(|s| !(s.exp().is_finite() && s.exp() > 0.0)) {
            return Err(Error::InvalidParameter(format!("latent log std {} is {}", i, self.log_stds[i])));
        }
        if let Some(i) = self.means.iter().position(|m| !m.is_finite()) {
            return Err(Error::InvalidParameter(format!("latent mean {} is {}", i, self.means[i])));
        }
        Ok(())
    }

    pub fn offset(&self, d: usize, q: usize) -> usize {
        (d * self.q + q) * self.q_h
    }

    pub fn mean(&self, d: usize, q: usize) -> &[f64] {
        let o = self.offset(d, q);
        &self.means[o..o + self.q_h]
    }

    pub fn std(&self, d: usize, q: usize) -> Vec<f64> {
        let o = self.offset(d, q);
        self.log_stds[o..o + self.q_h].iter().map(|s| s.exp()).collect()
    }

    pub(crate) fn check_output(&self, d: usize) -> Result<()> {
        if d >= self.d {
            return Err(Error::OutOfRange { context: "latent outputs".into(), index: d, size: self.d });
        }
        Ok(())
    }

    pub(crate) fn check_prior(&self, prior: &LatentPrior) -> Result<()> {
        if (prior.d, prior.q, prior.q_h) != (self.d, self.q, self.q_h) {
            return Err(Error::Precondition(format!(
                "latent prior shape ({}, {}, {}) differs from posterior ({}, {}, {})",
                prior.d, prior.q, prior.q_h, self.d, self.q, self.q_h
            )));
        }
        Ok(())
    }

    /// Writes `m + exp(log_std) ⊙ ε` for output `d`, all `q`, into `out`
    /// (`Q·Q_H` entries), reading `ε` from `noise` of the same length.
    pub(crate) fn sample_into(&self, d: usize, noise: &[f64], out: &mut [f64]) {
        let o = self.offset(d, 0);
        let n = self.q * self.q_h;
        for k in 0..n {
            out[k] = self.means[o + k] + self.log_stds[o + k].exp() * noise[k];
        }
    }
}

/// `J` reparametrised draws of `H_d`; `noise` is laid out `[J][Q][Q_H]`.
/// Returns `samples[j][q]`, a vector of length `Q_H`.
pub fn sample_latent(lv: &LatentVariational, d: usize, j: usize, noise: &[f64]) -> Result<Vec<Vec<Vec<f64>>>> {
    lv.check_output(d)?;
    if j == 0 {
        return Err(Error::InvalidParameter("sample count must be at least 1".into()));
    }
    let per = lv.q * lv.q_h;
    if noise.len() != j * per {
        return Err(Error::dim("latent noise", j * per, noise.len()));
    }
    let mut buf = vec![0.0; per];
    Ok((0..j)
        .map(|s| {
            lv.sample_into(d, &noise[s * per..(s + 1) * per], &mut buf);
            buf.chunks(lv.q_h).map(<[f64]>::to_vec).collect()
        })
        .collect())
}

/// `Σ_q KL(q(h_{d,q}) ‖ N(μ_{d,q}, I))`.
pub fn kl_latent(lv: &LatentVariational, prior: &LatentPrior, d: usize) -> Result<f64> {
    lv.check_output(d)?;
    lv.check_prior(prior)?;
    Ok(kl_latent_unchecked(lv, prior, d))
}

pub(crate) fn kl_latent_unchecked(lv: &LatentVariational, prior: &LatentPrior, d: usize) -> f64 {
    let o = lv.offset(d, 0);
    let n = lv.q * lv.q_h;
    let mut kl = 0.0;
    for k in o..o + n {
        let ls = lv.log_stds[k];
        let s2 = (2.0 * ls).exp();
        let dm = lv.means[k] - prior.means[k];
        kl += s2 + dm * dm - 1.0 - 2.0 * ls;
    }
    0.5 * kl
}

/// Accumulates `scale · ∂KL_d/∂(m, log_std)` into flat gradient buffers laid
/// out like [`LatentVariational::means`].
pub(crate) fn kl_latent_grad(
    lv: &LatentVariational,
    prior: &LatentPrior,
    d: usize,
    scale: f64,
    g_means: &mut [f64],
    g_log_stds: &mut [f64],
) {
    let o = lv.offset(d, 0);
    for k in o..o + lv.q * lv.q_h {
        g_means[k] += scale * (lv.means[k] - prior.means[k]);
        g_log_stds[k] += scale * ((2.0 * lv.log_stds[k]).exp() - 1.0);
    }
}

/// Public form of the KL gradient for a single output.
pub fn kl_latent_gradient(lv: &LatentVariational, prior: &LatentPrior, d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    lv.check_output(d)?;
    lv.check_prior(prior)?;
    let mut gm = vec![0.0; lv.means.len()];
    let mut gs = vec![0.0; lv.means.len()];
    kl_latent_grad(lv, prior, d, 1.0, &mut gm, &mut gs);
    Ok((gm, gs))
}
