//! Self-describing JSON checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::optimizer::AdamState;
use super::TrainConfig;
use crate::encoders::Dims;
use crate::objective::{ModelParams, PARAM_NAMES};

pub const CHECKPOINT_FORMAT: &str = "weakpair-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a valid checkpoint: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: checkpoint version {found}, this build reads version {expected}")]
    Version { path: PathBuf, found: u32, expected: u32 },
}

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// 128-bit word position, as decimal text.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, String> {
        use rand::SeedableRng;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| format!("bad rng word position '{}': {e}", self.word_pos))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Everything needed to continue a run bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub dims: Dims,
    /// Tensor names in the order of `params` and the optimizer moments.
    pub param_names: Vec<String>,
    pub params: ModelParams,
    pub optimizer: AdamState,
    pub rng: RngState,
    /// Optimizer steps taken.
    pub step: usize,
    /// Identity order of the epoch in progress.
    pub epoch_plan: Vec<u32>,
}

impl Checkpoint {
    pub fn new(
        config: TrainConfig,
        dims: Dims,
        params: ModelParams,
        optimizer: AdamState,
        rng: RngState,
        step: usize,
        epoch_plan: Vec<u32>,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config,
            dims,
            param_names: PARAM_NAMES.iter().map(|s| s.to_string()).collect(),
            params,
            optimizer,
            rng,
            step,
            epoch_plan,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self, CheckpointError> {
        let fmt_err = |msg: String| CheckpointError::Format {
            path: path.to_path_buf(),
            msg,
        };
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| fmt_err(e.to_string()))?;
        if value.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Err(fmt_err(format!("missing format tag '{CHECKPOINT_FORMAT}'")));
        }
        let version = value
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| fmt_err("missing version".into()))?;
        if version != u64::from(CHECKPOINT_VERSION) {
            return Err(CheckpointError::Version {
                path: path.to_path_buf(),
                found: version as u32,
                expected: CHECKPOINT_VERSION,
            });
        }
        let ck: Checkpoint = serde_json::from_value(value).map_err(|e| fmt_err(e.to_string()))?;
        ck.check_shapes().map_err(fmt_err)?;
        Ok(ck)
    }

    fn check_shapes(&self) -> Result<(), String> {
        let tensors = self.params.tensors();
        if self.optimizer.m.len() != tensors.len() || self.optimizer.v.len() != tensors.len() {
            return Err("optimizer moments do not match parameter count".into());
        }
        for (k, p) in tensors.iter().enumerate() {
            if self.optimizer.m[k].shape() != p.shape() || self.optimizer.v[k].shape() != p.shape() {
                return Err(format!("moment shape mismatch for {}", PARAM_NAMES[k]));
            }
        }
        let d = &self.dims;
        let expect = [
            (self.params.image.w1.shape(), [d.raw_image, d.hidden]),
            (self.params.image.w2.shape(), [d.hidden, d.embed]),
            (self.params.text.w1.shape(), [d.raw_text, d.hidden]),
            (self.params.text.w2.shape(), [d.hidden, d.embed]),
            (self.params.head.w1.shape(), [3 * d.embed, d.head_hidden]),
            (self.params.head.w2.shape(), [d.head_hidden, 1]),
        ];
        for (got, want) in expect {
            if got != want {
                return Err(format!("weight shape {got:?} disagrees with recorded dims {want:?}"));
            }
        }
        self.rng.restore().map(|_| ())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_json()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text, path)
    }
}
