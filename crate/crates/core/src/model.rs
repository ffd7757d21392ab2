//! Model configuration, full parameter state and the flat parameter registry.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inducing::{tri_pack, tri_unpack, InducingPoints, WhitenedPosterior};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::latent::{LatentPrior, LatentVariational};
use crate::likelihood::{gh_rule, GhRule, LikelihoodSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LikelihoodKind {
    Gaussian,
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of outputs `D`.
    pub d: usize,
    pub q: usize,
    pub q_h: usize,
    pub q_x: usize,
    pub m_h: usize,
    pub m_x: usize,
    /// One family per `q` for the latent kernels.
    pub kernels_h: Vec<KernelFamily>,
    /// One family per `q` for the input kernels.
    pub kernels_x: Vec<KernelFamily>,
    pub likelihood: LikelihoodKind,
    pub tie_noise: bool,
    /// Added to the diagonal of every inducing Gram factor.
    pub kuu_jitter: f64,
    pub gh_degree: usize,
    pub init: InitConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub outputscale_h: f64,
    pub lengthscale_h: f64,
    pub outputscale_x: f64,
    pub lengthscale_x: f64,
    pub period_x: f64,
    pub noise_std: f64,
    /// `L0H = L0X = whitened_scale · I` at start.
    pub whitened_scale: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            outputscale_h: 1.0,
            lengthscale_h: 1.0,
            outputscale_x: 1.0,
            lengthscale_x: 1.0,
            period_x: 1.0,
            noise_std: 0.1,
            whitened_scale: 0.1,
        }
    }
}

impl ModelConfig {
    /// SE-ARD latent kernels, Matérn-5/2 input kernels, Gaussian likelihood.
    pub fn new(d: usize, q: usize, q_h: usize, q_x: usize, m_h: usize, m_x: usize) -> Self {
        Self {
            d,
            q,
            q_h,
            q_x,
            m_h,
            m_x,
            kernels_h: vec![KernelFamily::SeArd; q],
            kernels_x: vec![KernelFamily::Matern52; q],
            likelihood: LikelihoodKind::Gaussian,
            tie_noise: false,
            kuu_jitter: 1e-6,
            gh_degree: 20,
            init: InitConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [("d", self.d), ("q", self.q), ("q_h", self.q_h), ("q_x", self.q_x), ("m_h", self.m_h), ("m_x", self.m_x)];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidParameter(format!("{name} must be positive")));
            }
        }
        if self.kernels_h.len() != self.q {
            return Err(Error::dim("latent kernel families", self.q, self.kernels_h.len()));
        }
        if self.kernels_x.len() != self.q {
            return Err(Error::dim("input kernel families", self.q, self.kernels_x.len()));
        }
        if !(self.kuu_jitter >= 0.0 && self.kuu_jitter.is_finite()) {
            return Err(Error::InvalidParameter("kuu_jitter must be finite and nonnegative".into()));
        }
        if !(1..=200).contains(&self.gh_degree) {
            return Err(Error::InvalidParameter(format!("gh_degree must be in 1..=200, got {}", self.gh_degree)));
        }
        let i = &self.init;
        for (name, v) in [
            ("outputscale_h", i.outputscale_h),
            ("lengthscale_h", i.lengthscale_h),
            ("outputscale_x", i.outputscale_x),
            ("lengthscale_x", i.lengthscale_x),
            ("period_x", i.period_x),
            ("noise_std", i.noise_std),
            ("whitened_scale", i.whitened_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("initial {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    LatentMeans,
    LatentLogStds,
    InducingZX,
    InducingZH,
    WhitenedM0,
    WhitenedL0H,
    WhitenedL0X,
    KernelLogParams,
    LikelihoodLogNoise,
}

impl ParamRole {
    pub const ALL: [ParamRole; 9] = [
        ParamRole::LatentMeans,
        ParamRole::LatentLogStds,
        ParamRole::InducingZX,
        ParamRole::InducingZH,
        ParamRole::WhitenedM0,
        ParamRole::WhitenedL0H,
        ParamRole::WhitenedL0X,
        ParamRole::KernelLogParams,
        ParamRole::LikelihoodLogNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamRole::LatentMeans => "latent_means",
            ParamRole::LatentLogStds => "latent_log_stds",
            ParamRole::InducingZX => "inducing_Z_X",
            ParamRole::InducingZH => "inducing_Z_H",
            ParamRole::WhitenedM0 => "whitened_M0",
            ParamRole::WhitenedL0H => "whitened_L0H",
            ParamRole::WhitenedL0X => "whitened_L0X",
            ParamRole::KernelLogParams => "kernel_log_params",
            ParamRole::LikelihoodLogNoise => "likelihood_log_noise",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == s)
    }
}

/// A named slice of the flat parameter (or gradient) vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub role: ParamRole,
    pub values: Vec<f64>,
}

/// Offsets of every block inside the flat vector, in [`ParamRole::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    ranges: Vec<(ParamRole, Range<usize>)>,
    /// Start of each kernel inside the kernel block: latent kernels first, then input kernels.
    pub(crate) kernel_h_offsets: Vec<usize>,
    pub(crate) kernel_x_offsets: Vec<usize>,
}

impl ParamLayout {
    pub fn range(&self, role: ParamRole) -> Range<usize> {
        self.ranges.iter().find(|(r, _)| *r == role).map(|(_, r)| r.clone()).expect("every role has a range")
    }

    pub fn total(&self) -> usize {
        self.ranges.last().map_or(0, |(_, r)| r.end)
    }

    pub fn blocks(&self, flat: &[f64]) -> Vec<ParamBlock> {
        self.ranges
            .iter()
            .map(|(role, r)| ParamBlock { name: role.name().into(), role: *role, values: flat[r.clone()].to_vec() })
            .collect()
    }

    /// Block containing flat index `i`.
    pub fn role_of(&self, i: usize) -> Option<ParamRole> {
        self.ranges.iter().find(|(_, r)| r.contains(&i)).map(|(role, _)| *role)
    }
}

#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub prior: LatentPrior,
    pub latent: LatentVariational,
    pub inducing: InducingPoints,
    pub posterior: WhitenedPosterior,
    pub kernels_h: Vec<KernelSpec>,
    pub kernels_x: Vec<KernelSpec>,
    pub likelihood: LikelihoodSpec,
    pub(crate) rule: GhRule,
}

impl PartialEq for ModelState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.prior == other.prior && self.pack() == other.pack()
    }
}

impl ModelState {
    /// Assembles a state from explicit parts, checking every shape.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        config: ModelConfig,
        prior: LatentPrior,
        latent: LatentVariational,
        inducing: InducingPoints,
        posterior: WhitenedPosterior,
        kernels_h: Vec<KernelSpec>,
        kernels_x: Vec<KernelSpec>,
        likelihood: LikelihoodSpec,
    ) -> Result<Self> {
        config.validate()?;
        let rule = gh_rule(config.gh_degree)?;
        let s = Self { config, prior, latent, inducing, posterior, kernels_h, kernels_x, likelihood, rule };
        s.validate()?;
        Ok(s)
    }

    /// Initial state: kernels from the configured initial hyperparameters,
    /// latents from the prior, inducing points placed by
    /// [`InducingPoints::init`] and the whitened posterior at `M₀ = 0`.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, data: &Dataset, prior: Option<LatentPrior>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if data.q_x != config.q_x {
            return Err(Error::dim("dataset input dimension", config.q_x, data.q_x));
        }
        if data.d() > config.d {
            return Err(Error::dim("dataset outputs", config.d, data.d()));
        }
        let prior = prior.unwrap_or_else(|| LatentPrior::zeros(config.d, config.q, config.q_h));
        let latent = LatentVariational::init(&prior, rng);
        let inputs = data.train_inputs();
        let coord_prior = prior.means.iter().any(|m| *m != 0.0);
        let pool: Vec<&[f64]> = if coord_prior {
            (0..prior.d).map(|d| prior.mean(d, 0)).collect()
        } else {
            Vec::new()
        };
        let inducing = InducingPoints::init(
            &inputs,
            config.m_x,
            config.q,
            config.m_h,
            config.q_h,
            coord_prior.then_some(pool.as_slice()),
            rng,
        )?;
        let posterior = WhitenedPosterior::init(config.m_h, config.m_x, config.init.whitened_scale);
        let i = &config.init;
        let kernels_h = config
            .kernels_h
            .iter()
            .map(|f| KernelSpec::isotropic(*f, i.outputscale_h, i.lengthscale_h, config.q_h, periodic(*f, i.period_x)))
            .collect::<Result<Vec<_>>>()?;
        let kernels_x = config
            .kernels_x
            .iter()
            .map(|f| KernelSpec::isotropic(*f, i.outputscale_x, i.lengthscale_x, config.q_x, periodic(*f, i.period_x)))
            .collect::<Result<Vec<_>>>()?;
        let likelihood = match config.likelihood {
            LikelihoodKind::Gaussian => LikelihoodSpec::gaussian(config.d, i.noise_std, config.tie_noise)?,
            LikelihoodKind::Poisson => LikelihoodSpec::Poisson,
        };
        Self::from_parts(config, prior, latent, inducing, posterior, kernels_h, kernels_x, likelihood)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        if (self.prior.d, self.prior.q, self.prior.q_h) != (c.d, c.q, c.q_h) {
            return Err(Error::Precondition("latent prior shape disagrees with the configuration".into()));
        }
        self.latent.check_prior(&self.prior)?;
        self.latent.validate()?;
        let ip = &self.inducing;
        if (ip.q, ip.m_h, ip.q_h, ip.m_x, ip.q_x) != (c.q, c.m_h, c.q_h, c.m_x, c.q_x) {
            return Err(Error::Precondition("inducing point shapes disagree with the configuration".into()));
        }
        if (self.posterior.m_h(), self.posterior.m_x()) != (c.m_h, c.m_x) {
            return Err(Error::Precondition("whitened posterior shape disagrees with the configuration".into()));
        }
        for (name, specs, fams, dim) in [("latent", &self.kernels_h, &c.kernels_h, c.q_h), ("input", &self.kernels_x, &c.kernels_x, c.q_x)] {
            if specs.len() != c.q {
                return Err(Error::dim(format!("{name} kernels"), c.q, specs.len()));
            }
            for (k, f) in specs.iter().zip(fams) {
                if k.family != *f {
                    return Err(Error::Precondition(format!("{name} kernel family {} differs from configured {}", k.family.name(), f.name())));
                }
                if k.dim() != dim {
                    return Err(Error::dim(format!("{name} kernel lengthscales"), dim, k.dim()));
                }
                k.validate()?;
            }
        }
        match (&self.likelihood, c.likelihood) {
            (LikelihoodSpec::Gaussian { .. }, LikelihoodKind::Gaussian) | (LikelihoodSpec::Poisson, LikelihoodKind::Poisson) => {}
            _ => return Err(Error::Precondition("likelihood disagrees with the configuration".into())),
        }
        self.likelihood.validate(c.d)?;
        if c.likelihood == LikelihoodKind::Gaussian && self.likelihood.is_tied() != c.tie_noise && c.d > 1 {
            return Err(Error::Precondition("noise tying disagrees with the configuration".into()));
        }
        Ok(())
    }

    pub fn rule(&self) -> &GhRule {
        &self.rule
    }

    pub fn layout(&self) -> ParamLayout {
        let mut ranges = Vec::with_capacity(9);
        let mut at = 0;
        let mut push = |role: ParamRole, len: usize, ranges: &mut Vec<(ParamRole, Range<usize>)>| {
            ranges.push((role, at..at + len));
            at += len;
        };
        let mh = self.config.m_h;
        let mx = self.config.m_x;
        push(ParamRole::LatentMeans, self.latent.means.len(), &mut ranges);
        push(ParamRole::LatentLogStds, self.latent.log_stds.len(), &mut ranges);
        push(ParamRole::InducingZX, self.inducing.z_x.len(), &mut ranges);
        push(ParamRole::InducingZH, self.inducing.z_h.len(), &mut ranges);
        push(ParamRole::WhitenedM0, mh * mx, &mut ranges);
        push(ParamRole::WhitenedL0H, mh * (mh + 1) / 2, &mut ranges);
        push(ParamRole::WhitenedL0X, mx * (mx + 1) / 2, &mut ranges);
        let mut kernel_h_offsets = Vec::new();
        let mut kernel_x_offsets = Vec::new();
        let mut k = 0;
        for s in &self.kernels_h {
            kernel_h_offsets.push(k);
            k += s.n_params();
        }
        for s in &self.kernels_x {
            kernel_x_offsets.push(k);
            k += s.n_params();
        }
        push(ParamRole::KernelLogParams, k, &mut ranges);
        push(ParamRole::LikelihoodLogNoise, self.likelihood.params().len(), &mut ranges);
        ParamLayout { ranges, kernel_h_offsets, kernel_x_offsets }
    }

    /// Every trainable scalar, in [`ParamRole::ALL`] block order.
    pub fn pack(&self) -> Vec<f64> {
        let mut p = Vec::new();
        p.extend_from_slice(&self.latent.means);
        p.extend_from_slice(&self.latent.log_stds);
        p.extend_from_slice(&self.inducing.z_x);
        p.extend_from_slice(&self.inducing.z_h);
        p.extend_from_slice(self.posterior.m0.as_slice());
        p.extend(tri_pack(&self.posterior.l0h));
        p.extend(tri_pack(&self.posterior.l0x));
        for k in self.kernels_h.iter().chain(&self.kernels_x) {
            p.extend(k.params());
        }
        p.extend_from_slice(self.likelihood.params());
        p
    }

    pub fn unpack(&mut self, p: &[f64]) -> Result<()> {
        let layout = self.layout();
        if p.len() != layout.total() {
            return Err(Error::dim("parameter vector", layout.total(), p.len()));
        }
        let get = |role| &p[layout.range(role)];
        self.latent.means.copy_from_slice(get(ParamRole::LatentMeans));
        self.latent.log_stds.copy_from_slice(get(ParamRole::LatentLogStds));
        self.inducing.z_x.copy_from_slice(get(ParamRole::InducingZX));
        self.inducing.z_h.copy_from_slice(get(ParamRole::InducingZH));
        self.posterior.m0.as_mut_slice().copy_from_slice(get(ParamRole::WhitenedM0));
        self.posterior.l0h = tri_unpack(get(ParamRole::WhitenedL0H), self.config.m_h)?;
        self.posterior.l0x = tri_unpack(get(ParamRole::WhitenedL0X), self.config.m_x)?;
        let kp = get(ParamRole::KernelLogParams);
        let mut at = 0;
        for k in self.kernels_h.iter_mut().chain(self.kernels_x.iter_mut()) {
            let n = k.n_params();
            k.set_params(&kp[at..at + n])?;
            at += n;
        }
        self.likelihood.params_mut().copy_from_slice(get(ParamRole::LikelihoodLogNoise));
        Ok(())
    }

    pub fn blocks(&self) -> Vec<ParamBlock> {
        self.layout().blocks(&self.pack())
    }

    /// First block holding a non-finite value, if any.
    pub fn non_finite_block(&self) -> Option<ParamRole> {
        let layout = self.layout();
        let p = self.pack();
        p.iter().position(|v| !v.is_finite()).and_then(|i| layout.role_of(i))
    }
}

fn periodic(f: KernelFamily, period: f64) -> Option<f64> {
    (f == KernelFamily::PeriodicMatern52).then_some(period)
}
