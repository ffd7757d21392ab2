//! Versioned JSON checkpoints.
//!
//! A checkpoint holds the model configuration, the latent prior, the kernel
//! and likelihood definitions, every parameter block by name, and
//! optionally the optimiser moments and the exact position of the random
//! stream. Floats are written with shortest round-trip formatting, so loading
//! reproduces the state bitwise.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inducing::{InducingPoints, WhitenedPosterior};
use crate::kernels::KernelSpec;
use crate::latent::{LatentPrior, LatentVariational};
use crate::likelihood::LikelihoodSpec;
use crate::model::{ModelConfig, ModelState, ParamBlock, ParamRole};
use crate::trainer::{AdamState, TrainConfig};

pub const FORMAT: &str = "gs-lvmogp-checkpoint";
pub const VERSION: u32 = 1;

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal, since JSON numbers cannot hold 128 bits exactly.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self.word_pos.parse().map_err(|_| Error::Checkpoint(format!("bad RNG word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub prior: LatentPrior,
    pub kernels_h: Vec<KernelSpec>,
    pub kernels_x: Vec<KernelSpec>,
    pub likelihood: LikelihoodSpec,
    pub blocks: Vec<ParamBlock>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub iterations_done: usize,
    #[serde(default)]
    pub adam: Option<AdamState>,
    #[serde(default)]
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn from_state(state: &ModelState) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            config: state.config.clone(),
            prior: state.prior.clone(),
            kernels_h: state.kernels_h.clone(),
            kernels_x: state.kernels_x.clone(),
            likelihood: state.likelihood.clone(),
            blocks: state.blocks(),
            train: None,
            iterations_done: 0,
            adam: None,
            rng: None,
        }
    }

    /// Rebuilds the state, checking every block against the layout.
    pub fn state(&self) -> Result<ModelState> {
        if self.format != FORMAT {
            return Err(Error::Checkpoint(format!("unrecognised format {:?}", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {} (expected {VERSION})", self.version)));
        }
        let c = &self.config;
        let n_lat = c.d * c.q * c.q_h;
        let latent = LatentVariational::new(c.d, c.q, c.q_h, vec![0.0; n_lat], vec![0.0; n_lat])?;
        let inducing = InducingPoints::new(vec![vec![0.0; c.q_x]; c.m_x], vec![vec![vec![0.0; c.q_h]; c.m_h]; c.q])?;
        let posterior = WhitenedPosterior::init(c.m_h, c.m_x, 1.0);
        let mut state = ModelState::from_parts(
            c.clone(),
            self.prior.clone(),
            latent,
            inducing,
            posterior,
            self.kernels_h.clone(),
            self.kernels_x.clone(),
            self.likelihood.clone(),
        )
        .map_err(|e| Error::Checkpoint(format!("inconsistent model: {e}")))?;
        let layout = state.layout();
        if self.blocks.len() != ParamRole::ALL.len() {
            return Err(Error::Checkpoint(format!("expected {} parameter blocks, found {}", ParamRole::ALL.len(), self.blocks.len())));
        }
        let mut flat = Vec::with_capacity(layout.total());
        for (b, role) in self.blocks.iter().zip(ParamRole::ALL) {
            if b.role != role || b.name != role.name() {
                return Err(Error::Checkpoint(format!("block {:?} found where {} was expected", b.name, role.name())));
            }
            let want = layout.range(role).len();
            if b.values.len() != want {
                return Err(Error::Checkpoint(format!("block {} has {} values, expected {want}", b.name, b.values.len())));
            }
            flat.extend_from_slice(&b.values);
        }
        state.unpack(&flat)?;
        state.validate().map_err(|e| Error::Checkpoint(format!("invalid parameters: {e}")))?;
        if let Some(a) = &self.adam {
            if a.m.len() != flat.len() || a.v.len() != flat.len() {
                return Err(Error::Checkpoint("optimiser moments do not match the parameter count".into()));
            }
        }
        Ok(state)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(b) = self.blocks.iter().find(|b| b.values.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite { block: b.name.clone(), detail: "cannot checkpoint non-finite parameters".into() });
        }
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), line: e.line(), message: e.to_string() })
    }
}
