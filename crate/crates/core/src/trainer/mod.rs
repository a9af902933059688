//! Deterministic training loop.
//!
//! An epoch visits every training identity once in a shuffled order, in
//! batches of distinct identities. For each identity one record is drawn as
//! the anchor and a weak counterpart is drawn among its other records. All
//! randomness comes from one ChaCha8 stream seeded by the config, and its
//! position is stored in checkpoints, so a resumed run continues exactly
//! where it stopped.

mod checkpoint;
mod optimizer;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError, RngState, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use optimizer::{step_lr, AdamState};

use crate::datagen::DatasetManifest;
use crate::encoders::Dims;
use crate::kernel::{Graph, Tensor};
use crate::losses::{LossReport, LossWeights, UncertaintyMapping};
use crate::mining::{sample_weak, MiningConfig, MiningError, MiningMode};
use crate::objective::{
    build_objective, AblationMode, BatchInputs, ModelParams, ObjectiveConfig, ObjectiveError, PARAM_NAMES,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub mining: MiningMode,
    /// Required for `mining = "custom"`; must agree with the mode otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub negatives_k: Option<usize>,
    pub mapping: UncertaintyMapping,
    pub ablation_mode: AblationMode,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub head_hidden_dim: usize,
    pub tau_init: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            base_lr: 1e-3,
            warmup_steps: 20,
            weight_decay: 0.01,
            seed: 0,
            alpha: 0.5,
            beta: 0.1,
            mining: MiningMode::Neg3v6,
            negatives_k: None,
            mapping: UncertaintyMapping::Exponential,
            ablation_mode: AblationMode::UitcGitm,
            hidden_dim: 64,
            embed_dim: 32,
            head_hidden_dim: 32,
            tau_init: 0.07,
        }
    }
}

impl TrainConfig {
    pub fn mining_config(&self) -> Result<MiningConfig, TrainError> {
        let cfg = match (self.mining, self.negatives_k) {
            (MiningMode::Neg3v4, k) => MiningConfig {
                k: k.unwrap_or(1),
                ..MiningConfig::neg3v4()
            },
            (MiningMode::Neg3v6, k) => MiningConfig {
                k: k.unwrap_or(2),
                ..MiningConfig::neg3v6()
            },
            (MiningMode::Custom, Some(k)) => MiningConfig::custom(k),
            (MiningMode::Custom, None) => {
                return Err(TrainError::Config("mining = \"custom\" requires negatives_k".into()))
            }
        };
        cfg.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn objective(&self) -> Result<ObjectiveConfig, TrainError> {
        Ok(ObjectiveConfig {
            mode: self.ablation_mode,
            weights: self.weights(),
            mining: self.mining_config()?,
            mapping: self.mapping,
        })
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.alpha.is_finite() && self.beta.is_finite() && self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be non-negative");
        }
        if !(self.tau_init > 0.0 && self.tau_init.is_finite()) {
            return bad("tau_init must be positive");
        }
        if self.hidden_dim == 0 || self.embed_dim == 0 || self.head_hidden_dim == 0 {
            return bad("layer widths must be at least 1");
        }
        self.mining_config().map(|_| ())
    }

    pub fn dims(&self, data: &DatasetManifest) -> Dims {
        Dims {
            raw_image: data.gen_config.raw_dim_image,
            raw_text: data.gen_config.raw_dim_text,
            hidden: self.hidden_dim,
            embed: self.embed_dim,
            head_hidden: self.head_hidden_dim,
        }
    }
}

/// Snapshot written when a run aborts on a non-finite value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub step: usize,
    pub lr: f64,
    pub message: String,
    pub last_report: Option<LossReport>,
    pub tau: f64,
    pub gamma: f64,
    /// `(name, max |entry|, all finite)` per parameter tensor.
    pub params: Vec<(String, f64, bool)>,
}

impl Diagnostic {
    fn new(step: usize, lr: f64, message: String, last_report: Option<LossReport>, p: &ModelParams) -> Self {
        let params = p
            .tensors()
            .iter()
            .zip(PARAM_NAMES)
            .map(|(t, n)| {
                let max = t.data().iter().fold(0.0f64, |a, &x| a.max(x.abs()));
                (n.to_string(), max, t.data().iter().all(|x| x.is_finite()))
            })
            .collect();
        Self {
            step,
            lr,
            message,
            last_report,
            tau: p.tau(),
            gamma: p.gamma(),
            params,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset unusable for training: {0}")]
    Data(String),
    #[error("step {step}: {source}")]
    Mining {
        step: usize,
        #[source]
        source: MiningError,
    },
    #[error("step {}: non-finite value, training aborted ({})", .0.step, .0.message)]
    NonFinite(Box<Diagnostic>),
    #[error("checkpoint does not match this dataset: {0}")]
    Mismatch(String),
}

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub report: LossReport,
    pub min_u_w: f64,
    pub max_u_w: f64,
    /// Match probabilities pinned by the log clamp during this step.
    pub clamp_hits: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    pub elapsed: Duration,
}

pub const LOG_HEADER: &str =
    "step,epoch,lr,itc,uitc,itm,gitm_txt,gitm_img,total,mean_s_w,mean_u_w,min_u_w,max_u_w,clamp_hits";

impl TrainLog {
    /// One CSV row per step, without wall time.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for e in &self.entries {
            let r = &e.report;
            writeln!(
                out,
                "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{}",
                e.step,
                e.epoch,
                e.lr,
                r.itc,
                r.uitc,
                r.itm,
                r.gitm_txt,
                r.gitm_img,
                r.total,
                r.mean_s_w,
                r.mean_u_w,
                e.min_u_w,
                e.max_u_w,
                e.clamp_hits
            )
            .expect("writing to a String");
        }
        out
    }
}

/// Resumable training state over one dataset.
#[derive(Debug, Clone)]
pub struct Trainer<'d> {
    cfg: TrainConfig,
    objective: ObjectiveConfig,
    data: &'d DatasetManifest,
    pool: BTreeMap<u32, Vec<usize>>,
    identities: Vec<u32>,
    dims: Dims,
    params: ModelParams,
    adam: AdamState,
    rng: ChaCha8Rng,
    step: usize,
    plan: Vec<u32>,
    log: TrainLog,
}

impl<'d> Trainer<'d> {
    /// Fresh run: parameters seeded from `cfg.seed`, step 0.
    pub fn new(cfg: TrainConfig, data: &'d DatasetManifest) -> Result<Self, TrainError> {
        let dims = cfg.dims(data);
        let params = ModelParams::init(cfg.seed, &dims, cfg.tau_init);
        let adam = AdamState::zeros_like(&params.tensors());
        // separate stream from the one used for initialization
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Self::assemble(cfg, data, params, adam, rng, 0, Vec::new())
    }

    /// Continues from a checkpoint. The dataset must be the one it was
    /// trained on.
    pub fn resume(ck: &Checkpoint, data: &'d DatasetManifest) -> Result<Self, TrainError> {
        let dims = ck.config.dims(data);
        if dims != ck.dims {
            return Err(TrainError::Mismatch(format!(
                "checkpoint dims {:?}, dataset implies {:?}",
                ck.dims, dims
            )));
        }
        let rng = ck.rng.restore().map_err(TrainError::Mismatch)?;
        Self::assemble(
            ck.config.clone(),
            data,
            ck.params.clone(),
            ck.optimizer.clone(),
            rng,
            ck.step,
            ck.epoch_plan.clone(),
        )
    }

    fn assemble(
        cfg: TrainConfig,
        data: &'d DatasetManifest,
        params: ModelParams,
        adam: AdamState,
        rng: ChaCha8Rng,
        step: usize,
        plan: Vec<u32>,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        let objective = cfg.objective()?;
        let pool = data.by_identity();
        let identities: Vec<u32> = pool.keys().copied().collect();
        if identities.len() < 2 {
            return Err(TrainError::Data(format!(
                "{} identit{} found, at least 2 are needed",
                identities.len(),
                if identities.len() == 1 { "y" } else { "ies" }
            )));
        }
        let dims = cfg.dims(data);
        if let Some(r) = data
            .records
            .iter()
            .find(|r| r.image_raw.len() != dims.raw_image || r.text_raw.len() != dims.raw_text)
        {
            return Err(TrainError::Data(format!(
                "record (identity {}, view {}) has raw dims {}/{}, header says {}/{}",
                r.identity,
                r.view,
                r.image_raw.len(),
                r.text_raw.len(),
                dims.raw_image,
                dims.raw_text
            )));
        }
        let t = Self {
            cfg,
            objective,
            data,
            pool,
            identities,
            dims,
            params,
            adam,
            rng,
            step,
            plan,
            log: TrainLog::default(),
        };
        let needed = if t.objective.mode.uses_gitm() {
            t.objective.mining.k
        } else {
            1
        };
        if t.batch_len() < needed + 1 {
            return Err(TrainError::Config(format!(
                "batches hold {} identities, but {} hard negatives per anchor need at least {}",
                t.batch_len(),
                needed,
                needed + 1
            )));
        }
        Ok(t)
    }

    /// Distinct identities per batch.
    pub fn batch_len(&self) -> usize {
        self.cfg.batch_size.min(self.identities.len())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.identities.len().div_ceil(self.batch_len())
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.epochs * self.steps_per_epoch()
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn into_log(self) -> TrainLog {
        self.log
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            self.cfg.clone(),
            self.dims,
            self.params.clone(),
            self.adam.clone(),
            RngState::capture(&self.rng),
            self.step,
            self.plan.clone(),
        )
    }

    fn next_batch(&mut self) -> Result<BatchInputs, TrainError> {
        let spe = self.steps_per_epoch();
        let pos = self.step % spe;
        if pos == 0 {
            self.plan = self.identities.clone();
            self.plan.shuffle(&mut self.rng);
        }
        let b = self.batch_len();
        let start = pos * b;
        let end = (start + b).min(self.plan.len());
        let mut ids: Vec<u32> = self.plan[start..end].to_vec();
        // the last batch of an epoch is topped up from the front of the order
        let mut k = 0;
        while ids.len() < b {
            ids.push(self.plan[k]);
            k += 1;
        }

        let records = &self.data.records;
        let mut anchors = Vec::with_capacity(b);
        let mut weaks = Vec::with_capacity(b);
        for id in &ids {
            let members = &self.pool[id];
            let anchor = members[self.rng.random_range(0..members.len())];
            let sel = sample_weak(anchor, records, &self.pool, &mut self.rng).map_err(|source| TrainError::Mining {
                step: self.step,
                source,
            })?;
            anchors.push(anchor);
            weaks.push(sel.weak);
        }
        let gather = |rows: &[usize], image: bool| -> Tensor {
            let width = if image { self.dims.raw_image } else { self.dims.raw_text };
            let mut data = Vec::with_capacity(rows.len() * width);
            for &r in rows {
                let rec = &records[r];
                data.extend_from_slice(if image { &rec.image_raw } else { &rec.text_raw });
            }
            Tensor::matrix(rows.len(), width, data).expect("dataset values are finite")
        };
        Ok(BatchInputs {
            image_raw: gather(&anchors, true),
            text_raw: gather(&anchors, false),
            weak_image_raw: gather(&weaks, true),
            weak_text_raw: gather(&weaks, false),
            identities: ids,
        })
    }

    fn abort(&self, lr: f64, message: String) -> TrainError {
        let last = self.log.entries.last().map(|e| e.report);
        TrainError::NonFinite(Box::new(Diagnostic::new(self.step, lr, message, last, &self.params)))
    }

    /// One optimizer step. Returns the logged entry.
    pub fn step(&mut self) -> Result<&LogEntry, TrainError> {
        let started = Instant::now();
        let total = self.total_steps();
        let lr = step_lr(self.step, self.cfg.warmup_steps, total, self.cfg.base_lr);
        let batch = self.next_batch()?;

        let mut g = Graph::new();
        let nodes = self.params.register(&mut g);
        let obj = match build_objective(&mut g, &nodes, &batch, &self.objective, None) {
            Ok(o) => o,
            Err(ObjectiveError::Mining(source)) => {
                return Err(TrainError::Mining {
                    step: self.step,
                    source,
                })
            }
            Err(e) => return Err(self.abort(lr, e.to_string())),
        };
        let report = obj.report(&g);
        if ![
            report.total,
            report.itc,
            report.itm,
            report.uitc,
            report.gitm_txt,
            report.gitm_img,
        ]
        .iter()
        .all(|v| v.is_finite())
        {
            return Err(self.abort(lr, format!("loss report {report:?}")));
        }
        let grads = g.backward(obj.total).map_err(|e| self.abort(lr, e.to_string()))?;
        let ids = nodes.ids();
        let mut tensors = self.params.tensors();
        let grad_list: Vec<Tensor> = ids
            .iter()
            .zip(&tensors)
            .map(|(&id, t)| grads.get_or_zeros(id, t))
            .collect();
        if let Some(k) = grad_list.iter().position(|t| !t.data().iter().all(|x| x.is_finite())) {
            return Err(self.abort(lr, format!("gradient of {} is not finite", PARAM_NAMES[k])));
        }
        let decay: Vec<bool> = PARAM_NAMES.iter().map(|n| !n.starts_with("log_")).collect();
        self.adam
            .update(&mut tensors, &grad_list, &decay, lr, self.cfg.weight_decay);
        if let Some(k) = tensors.iter().position(|t| !t.data().iter().all(|x| x.is_finite())) {
            return Err(self.abort(lr, format!("{} became non-finite after the update", PARAM_NAMES[k])));
        }
        self.params = ModelParams::from_tensors(tensors).expect("fourteen tensors");
        assert!(self.params.tau() > 0.0 && self.params.gamma() > 0.0);

        let u = obj.u_values(&g);
        let entry = LogEntry {
            step: self.step,
            epoch: self.step / self.steps_per_epoch(),
            lr,
            report,
            min_u_w: u.iter().copied().fold(f64::INFINITY, f64::min),
            max_u_w: u.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            clamp_hits: g.clamp_hits(),
        };
        self.step += 1;
        self.log.elapsed += started.elapsed();
        self.log.entries.push(entry);
        Ok(self.log.entries.last().expect("just pushed"))
    }

    /// Steps until `step_index() == target` or the run ends.
    pub fn run_until(&mut self, target: usize) -> Result<(), TrainError> {
        let end = target.min(self.total_steps());
        while self.step < end {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<(), TrainError> {
        self.run_until(self.total_steps())
    }
}

/// Trains from scratch to completion.
pub fn train(cfg: &TrainConfig, data: &DatasetManifest) -> Result<(Checkpoint, TrainLog), TrainError> {
    let mut t = Trainer::new(cfg.clone(), data)?;
    t.run()?;
    let ck = t.checkpoint();
    Ok((ck, t.into_log()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, GenConfig};

    fn small_data(ids: usize) -> DatasetManifest {
        generate(&GenConfig {
            num_identities: ids,
            views_per_identity: 3,
            latent_dim: 6,
            raw_dim_image: 10,
            raw_dim_text: 8,
            ..GenConfig::default()
        })
        .unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 5,
            hidden_dim: 8,
            embed_dim: 4,
            head_hidden_dim: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = small_data(6);
        let cfg = TrainConfig {
            epochs: 0,
            ..small_cfg()
        };
        let (ck, log) = train(&cfg, &data).unwrap();
        assert!(log.entries.is_empty());
        let init = ModelParams::init(cfg.seed, &cfg.dims(&data), cfg.tau_init);
        assert_eq!(ck.params, init);
    }

    #[test]
    fn step_count_and_epochs() {
        let data = small_data(12);
        let (ck, log) = train(&small_cfg(), &data).unwrap();
        // ceil(12 / 5) = 3 steps per epoch
        assert_eq!(log.entries.len(), 6);
        assert_eq!(ck.step, 6);
        assert_eq!(
            log.entries.iter().map(|e| e.epoch).collect::<Vec<_>>(),
            [0, 0, 0, 1, 1, 1]
        );
    }

    #[test]
    fn resume_is_bit_identical() {
        let data = small_data(12);
        let cfg = TrainConfig {
            epochs: 3,
            ..small_cfg()
        };
        let (full, _) = train(&cfg, &data).unwrap();
        for cut in [1, 3, 4] {
            let mut a = Trainer::new(cfg.clone(), &data).unwrap();
            a.run_until(cut).unwrap();
            let text = a.checkpoint().to_json();
            let ck = Checkpoint::from_json(&text, std::path::Path::new("mem")).unwrap();
            let mut b = Trainer::resume(&ck, &data).unwrap();
            b.run().unwrap();
            assert_eq!(b.checkpoint().to_json(), full.to_json(), "cut at {cut}");
        }
    }

    #[test]
    fn starvation_is_rejected_up_front() {
        let data = small_data(2);
        let err = Trainer::new(small_cfg(), &data).unwrap_err();
        assert!(matches!(err, TrainError::Config(_)), "{err}");
        let cfg = TrainConfig {
            mining: MiningMode::Neg3v4,
            ..small_cfg()
        };
        assert!(Trainer::new(cfg, &data).is_ok());
    }

    #[test]
    fn baseline_log_leaves_weak_terms_zero() {
        let data = small_data(6);
        let cfg = TrainConfig {
            ablation_mode: AblationMode::Baseline,
            ..small_cfg()
        };
        let (_, log) = train(&cfg, &data).unwrap();
        for e in &log.entries {
            assert_eq!((e.report.uitc, e.report.gitm_txt, e.report.gitm_img), (0.0, 0.0, 0.0));
        }
        assert!(log.to_csv().lines().nth(1).unwrap().split(',').count() == 14);
    }

    #[test]
    fn mining_config_consistency() {
        let mut cfg = small_cfg();
        cfg.mining = MiningMode::Neg3v4;
        cfg.negatives_k = Some(2);
        assert!(cfg.validate().is_err());
        cfg.mining = MiningMode::Custom;
        assert_eq!(cfg.mining_config().unwrap().k, 2);
        cfg.negatives_k = None;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn corrupted_checkpoint_is_a_format_error() {
        let data = small_data(6);
        let ck = Trainer::new(small_cfg(), &data).unwrap().checkpoint();
        let text = ck.to_json();
        let p = std::path::Path::new("mem");
        assert!(matches!(
            Checkpoint::from_json(&text[..text.len() / 2], p),
            Err(CheckpointError::Format { .. })
        ));
        let bumped = text.replacen("\"version\": 1", "\"version\": 99", 1);
        assert!(matches!(
            Checkpoint::from_json(&bumped, p),
            Err(CheckpointError::Version { .. })
        ));
        assert_eq!(Checkpoint::from_json(&text, p).unwrap(), ck);
    }
}
