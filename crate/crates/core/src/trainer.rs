//! Adam on the ELBO, the training loop and the finite-difference gradient check.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{gen_synthetic, Dataset, SyntheticOptions};
use crate::elbo::{elbo_and_gradient, elbo_estimate, sample_noise, MiniBatch};
use crate::error::{Error, Result};
use crate::latent::LatentPrior;
use crate::model::{LikelihoodKind, ModelConfig, ModelState, ParamBlock, ParamRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Sampler {
    /// `m_b` pairs uniformly with replacement.
    Flat { m_b: usize },
    /// `b_o` outputs, then `b_x` points per output.
    Structured { b_o: usize, b_x: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub sampler: Sampler,
    /// Latent samples per batch entry.
    pub j: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { iterations: 1000, learning_rate: 0.01, sampler: Sampler::Structured { b_o: 100, b_x: 10 }, j: 1, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.j == 0 {
            return Err(Error::InvalidParameter("j must be positive".into()));
        }
        match self.sampler {
            Sampler::Flat { m_b: 0 } => Err(Error::InvalidParameter("m_b must be positive".into())),
            Sampler::Structured { b_o, b_x } if b_o == 0 || b_x == 0 => Err(Error::InvalidParameter("b_o and b_x must be positive".into())),
            _ => Ok(()),
        }
    }

    pub fn sample_batch(&self, data: &Dataset, d_model: usize, rng: &mut ChaCha8Rng) -> Result<MiniBatch> {
        match self.sampler {
            Sampler::Flat { m_b } => MiniBatch::sample_flat(data, m_b, d_model, rng),
            Sampler::Structured { b_o, b_x } => MiniBatch::sample_structured(data, b_o, b_x, d_model, rng),
        }
    }
}

/// First and second moment estimates; `t` counts completed steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam step of gradient ascent.
pub fn adam_step(params: &mut [f64], grads: &[f64], st: &mut AdamState, lr: f64) -> Result<()> {
    let n = params.len();
    if grads.len() != n {
        return Err(Error::dim("gradient", n, grads.len()));
    }
    if st.m.len() != n || st.v.len() != n {
        return Err(Error::dim("Adam moments", n, st.m.len().min(st.v.len())));
    }
    st.t += 1;
    let c1 = 1.0 - BETA1.powf(st.t as f64);
    let c2 = 1.0 - BETA2.powf(st.t as f64);
    for i in 0..n {
        let g = grads[i];
        st.m[i] = BETA1 * st.m[i] + (1.0 - BETA1) * g;
        st.v[i] = BETA2 * st.v[i] + (1.0 - BETA2) * g * g;
        params[i] += lr * (st.m[i] / c1) / ((st.v[i] / c2).sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// ELBO gradient split into named parameter blocks.
pub fn gradient(state: &ModelState, data: &Dataset, batch: &MiniBatch, j: usize, noise: &[f64]) -> Result<Vec<ParamBlock>> {
    let (_, g) = elbo_and_gradient(state, data, batch, j, noise)?;
    Ok(state.layout().blocks(&g))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub iteration: usize,
    /// Negative ELBO per observed training point.
    pub loss: f64,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub trajectory: Vec<TrainRecord>,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
}

/// Initialises from `seed` and trains. The same stream drives initialisation,
/// batch sampling and latent noise, so equal seeds give bitwise-equal runs.
pub fn train(data: &Dataset, model: ModelConfig, prior: Option<LatentPrior>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(data, model, prior, cfg, |_| {})
}

pub fn train_with(
    data: &Dataset,
    model: ModelConfig,
    prior: Option<LatentPrior>,
    cfg: &TrainConfig,
    on_iteration: impl FnMut(&TrainRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.validate()?;
    if data.n_train() == 0 {
        return Err(Error::Precondition("dataset has no training points".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let state = ModelState::init(model, data, prior, &mut rng)?;
    let adam = AdamState::new(state.layout().total());
    resume(data, state, adam, rng, cfg, on_iteration)
}

/// Continues from an explicit state, optimiser and stream.
pub fn resume(
    data: &Dataset,
    mut state: ModelState,
    mut adam: AdamState,
    mut rng: ChaCha8Rng,
    cfg: &TrainConfig,
    mut on_iteration: impl FnMut(&TrainRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n_obs = data.n_train() as f64;
    let c = state.config.clone();
    let mut params = state.pack();
    let start = Instant::now();
    let mut trajectory = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let batch = cfg.sample_batch(data, c.d, &mut rng)?;
        let noise = sample_noise(batch.len(), cfg.j, c.q, c.q_h, &mut rng);
        let (terms, g) = elbo_and_gradient(&state, data, &batch, cfg.j, &noise).map_err(|e| at_iteration(e, it))?;
        let rec = TrainRecord { iteration: it, loss: -terms.elbo / n_obs, elapsed_ms: start.elapsed().as_secs_f64() * 1e3 };
        on_iteration(&rec);
        trajectory.push(rec);
        adam_step(&mut params, &g, &mut adam, cfg.learning_rate)?;
        state.unpack(&params)?;
        if let Some(role) = state.non_finite_block() {
            return Err(Error::NonFinite { block: role.name().into(), detail: format!("after the update at iteration {it}") });
        }
    }
    Ok(TrainOutcome { state, trajectory, adam, rng })
}

fn at_iteration(e: Error, it: usize) -> Error {
    match e {
        Error::NonFinite { block, detail } => Error::NonFinite { block, detail: format!("{detail} at iteration {it}") },
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockCheck {
    pub role: ParamRole,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub blocks: Vec<BlockCheck>,
    pub threshold: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_error <= self.threshold)
    }

    pub fn worst(&self) -> Option<&BlockCheck> {
        self.blocks.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Central-difference step.
pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_THRESHOLD: f64 = 1e-4;
/// Denominator floor of the relative error, so that entries whose true
/// gradient vanishes are judged on absolute agreement.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient with central differences under fixed noise.
/// `corrupt` may alter the analytic gradient before comparison.
pub fn gradcheck(
    state: &ModelState,
    data: &Dataset,
    batch: &MiniBatch,
    j: usize,
    noise: &[f64],
    corrupt: Option<&dyn Fn(&mut [f64], &ModelState)>,
) -> Result<GradcheckReport> {
    let (_, mut g) = elbo_and_gradient(state, data, batch, j, noise)?;
    if let Some(f) = corrupt {
        f(&mut g, state);
    }
    let layout = state.layout();
    let p0 = state.pack();
    let mut probe = state.clone();
    let mut blocks = Vec::new();
    for role in ParamRole::ALL {
        let r = layout.range(role);
        let mut worst = BlockCheck { role, max_rel_error: 0.0, worst_index: r.start, analytic: 0.0, numeric: 0.0 };
        for i in r {
            let mut p = p0.clone();
            p[i] = p0[i] + GRADCHECK_STEP;
            probe.unpack(&p)?;
            let fp = elbo_estimate(&probe, data, batch, j, noise)?.elbo;
            p[i] = p0[i] - GRADCHECK_STEP;
            probe.unpack(&p)?;
            let fm = elbo_estimate(&probe, data, batch, j, noise)?.elbo;
            let fd = (fp - fm) / (2.0 * GRADCHECK_STEP);
            let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(GRADCHECK_FLOOR);
            if rel > worst.max_rel_error || !rel.is_finite() {
                worst = BlockCheck { role, max_rel_error: rel, worst_index: i, analytic: g[i], numeric: fd };
            }
        }
        blocks.push(worst);
    }
    Ok(GradcheckReport { blocks, threshold: GRADCHECK_THRESHOLD })
}

/// A gradient-check problem: synthetic data on `D ≤ 5` outputs with `N ≤ 6`
/// points each, and a state perturbed away from its symmetric initialisation.
#[derive(Debug, Clone)]
pub struct TinyProblem {
    pub state: ModelState,
    pub data: Dataset,
    pub batch: MiniBatch,
    pub j: usize,
    pub noise: Vec<f64>,
}

/// Tiny bounds for the gradient check.
pub const TINY_MAX_D: usize = 5;
pub const TINY_MAX_N: usize = 6;
pub const TINY_MAX_M: usize = 4;

/// Builds the problem from `model`, whose sizes must respect the tiny bounds.
/// Poisson targets are rounded synthetic magnitudes.
pub fn tiny_problem(model: &ModelConfig, n: usize, seed: u64) -> Result<TinyProblem> {
    if model.d > TINY_MAX_D || n > TINY_MAX_N || model.m_h > TINY_MAX_M || model.m_x > TINY_MAX_M {
        return Err(Error::InvalidParameter(format!(
            "tiny instances need D ≤ {TINY_MAX_D}, N ≤ {TINY_MAX_N}, M_H, M_X ≤ {TINY_MAX_M}"
        )));
    }
    if model.q_x != 1 {
        return Err(Error::InvalidParameter("tiny synthetic instances have one input dimension".into()));
    }
    let (mut data, _) = gen_synthetic(seed, &SyntheticOptions { d: model.d, n, train_fraction: 1.0, noise_std: None });
    if model.likelihood == LikelihoodKind::Poisson {
        for o in &mut data.outputs {
            for y in &mut o.y {
                *y = (1.5 * y.abs()).round();
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut state = ModelState::init(model.clone(), &data, None, &mut rng)?;
    let mut p = state.pack();
    for v in p.iter_mut() {
        *v += 0.2 * (rand::Rng::random::<f64>(&mut rng) - 0.5);
    }
    state.unpack(&p)?;
    let batch = MiniBatch::full(&data, model.d);
    let j = 2;
    let noise = sample_noise(batch.len(), j, model.q, model.q_h, &mut rng);
    Ok(TinyProblem { state, data, batch, j, noise })
}
