//! Training stack: AdaBelief updates, adaptive gradient clipping (AGC),
//! cosine-annealed learning rates, and the two-phase trainer (projection
//! warm-up with frozen towers, then full fine-tuning) with best-eval-loss
//! checkpointing. Fully deterministic given seeds: shuffling, augmentation,
//! and initialization all derive from explicit streams.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{augment_pipeline, AugmentConfig, RasterImage};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::encoders::{
    encode_image, encode_text, EncoderError, FreezeFlags, ModelParams, TokenizedCaption, Vocab,
};
use crate::loss::{clip_loss, LossConfig};
use crate::tape::Tape;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    Config(String),
    #[error("train data: {0}")]
    Data(String),
    #[error("non-finite loss at step {step} (phase {phase}): aborting")]
    NonFinite { step: u64, phase: u8 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

// ── AGC ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct AGCConfig {
    /// Maximum allowed ‖g‖ / ‖W‖ ratio per weight array.
    pub clip_ratio: f64,
    /// Norm floor substituted for near-zero parameter groups.
    pub norm_floor: f64,
}

impl Default for AGCConfig {
    fn default() -> Self {
        AGCConfig {
            clip_ratio: 0.01,
            norm_floor: 1e-3,
        }
    }
}

impl AGCConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.clip_ratio <= 0.0 || !self.clip_ratio.is_finite() {
            return Err(TrainError::Config(format!(
                "agc clip_ratio {} must be positive",
                self.clip_ratio
            )));
        }
        if self.norm_floor < 0.0 {
            return Err(TrainError::Config("agc norm_floor negative".into()));
        }
        Ok(())
    }
}

fn euclidean_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Clip one gradient array against its weight array:
/// `g' = g · min(1, λ · max(‖W‖, ε_w) / ‖g‖)`; a zero gradient passes
/// through unchanged, as does any gradient already inside the bound.
pub fn agc_clip(grad: &[f64], param: &[f64], cfg: &AGCConfig) -> Result<Vec<f64>, TrainError> {
    if grad.len() != param.len() {
        return Err(TrainError::Config(format!(
            "agc shape mismatch: grad {} vs param {}",
            grad.len(),
            param.len()
        )));
    }
    let g_norm = euclidean_norm(grad);
    if g_norm == 0.0 {
        return Ok(grad.to_vec());
    }
    let w_norm = euclidean_norm(param).max(cfg.norm_floor);
    let limit = cfg.clip_ratio * w_norm;
    if g_norm <= limit {
        return Ok(grad.to_vec());
    }
    let factor = limit / g_norm;
    Ok(grad.iter().map(|g| g * factor).collect())
}

// ── AdaBelief ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaBeliefConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdaBeliefConfig {
    fn default() -> Self {
        AdaBeliefConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-array first moment and belief second moment, aligned with the
/// model's canonical weight-array order.
#[derive(Debug, Clone)]
pub struct AdaBeliefState {
    pub cfg: AdaBeliefConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    s: Vec<Vec<f64>>,
}

impl AdaBeliefState {
    pub fn new(params: &ModelParams, cfg: AdaBeliefConfig) -> Self {
        let m = params
            .arrays()
            .iter()
            .map(|a| vec![0.0; a.tensor.len()])
            .collect();
        let s = params
            .arrays()
            .iter()
            .map(|a| vec![0.0; a.tensor.len()])
            .collect();
        AdaBeliefState {
            cfg,
            step: 0,
            m,
            s,
        }
    }

    pub fn snapshot(&self, params: &ModelParams) -> OptimizerSnapshot {
        OptimizerSnapshot {
            step: self.step,
            beta1: self.cfg.beta1,
            beta2: self.cfg.beta2,
            epsilon: self.cfg.epsilon,
            moments: params
                .arrays()
                .iter()
                .zip(self.m.iter().zip(&self.s))
                .map(|(a, (m, s))| MomentEntry {
                    name: a.name.to_string(),
                    m: m.clone(),
                    s: s.clone(),
                })
                .collect(),
        }
    }

    /// Elementwise minimum of the belief second moment (non-negativity probe).
    pub fn min_second_moment(&self) -> f64 {
        self.s
            .iter()
            .flat_map(|v| v.iter())
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Serialized optimizer state embedded in checkpoints for exact resume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub moments: Vec<MomentEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentEntry {
    pub name: String,
    pub m: Vec<f64>,
    pub s: Vec<f64>,
}

/// One AdaBelief update over all weight arrays. `grads[i]` is the (already
/// AGC-clipped) gradient for array `i`, or `None` when no gradient flowed
/// (frozen or unused). Frozen groups are never touched, gradient or not.
pub fn adabelief_step(
    params: &mut ModelParams,
    grads: &[Option<Vec<f64>>],
    state: &mut AdaBeliefState,
    lr: f64,
) -> Result<(), TrainError> {
    if lr < 0.0 || !lr.is_finite() {
        return Err(TrainError::Config(format!("learning rate {lr} negative")));
    }
    if grads.len() != params.arrays().len() {
        return Err(TrainError::Config(format!(
            "gradient list {} does not match array count {}",
            grads.len(),
            params.arrays().len()
        )));
    }
    state.step += 1;
    let t = state.step;
    let AdaBeliefConfig {
        beta1,
        beta2,
        epsilon,
    } = state.cfg;
    let bias1 = 1.0 - beta1.powi(t as i32);
    let bias2 = 1.0 - beta2.powi(t as i32);
    let frozen: Vec<bool> = params
        .arrays()
        .iter()
        .map(|a| params.freeze.is_frozen(a.group))
        .collect();
    for (i, grad) in grads.iter().enumerate() {
        let Some(g) = grad else { continue };
        if frozen[i] {
            continue;
        }
        let mut theta = params.arrays()[i].tensor.data().to_vec();
        if g.len() != theta.len() {
            return Err(TrainError::Config(format!(
                "gradient length {} does not match array {}",
                g.len(),
                params.arrays()[i].name
            )));
        }
        let m = &mut state.m[i];
        let s = &mut state.s[i];
        for j in 0..theta.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            let diff = g[j] - m[j];
            s[j] = beta2 * s[j] + (1.0 - beta2) * diff * diff + epsilon;
            let m_hat = m[j] / bias1;
            let s_hat = s[j] / bias2;
            theta[j] -= lr * m_hat / (s_hat.sqrt() + epsilon);
        }
        params.set_array_data(i, theta)?;
    }
    Ok(())
}

// ── Cosine schedule ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub eta_max: f64,
    pub eta_min: f64,
    pub total_steps: u64,
    /// True for the projection warm-up phase (towers frozen).
    pub warmup: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            eta_max: 1e-3,
            eta_min: 1e-6,
            total_steps: 200,
            warmup: true,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.eta_max >= self.eta_min && self.eta_min >= 0.0) {
            return Err(TrainError::Config(format!(
                "schedule wants eta_max >= eta_min >= 0, got {} / {}",
                self.eta_max, self.eta_min
            )));
        }
        if self.total_steps < 1 {
            return Err(TrainError::Config("schedule total_steps < 1".into()));
        }
        Ok(())
    }
}

/// `η(t) = η_min + ½(η_max − η_min)(1 + cos(π t / T))`; `t > T` clamps
/// to `η_min`.
pub fn cosine_lr(step: u64, cfg: &ScheduleConfig) -> f64 {
    if step > cfg.total_steps {
        return cfg.eta_min;
    }
    let ratio = step as f64 / cfg.total_steps as f64;
    cfg.eta_min + 0.5 * (cfg.eta_max - cfg.eta_min) * (1.0 + (std::f64::consts::PI * ratio).cos())
}

/// The two training phases: warm-up (towers frozen) then full fine-tuning.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct TwoPhaseSchedule {
    pub phase1: ScheduleConfig,
    pub phase2: ScheduleConfig,
}

impl Default for TwoPhaseSchedule {
    fn default() -> Self {
        TwoPhaseSchedule {
            phase1: ScheduleConfig {
                eta_max: 1e-3,
                eta_min: 1e-6,
                total_steps: 200,
                warmup: true,
            },
            phase2: ScheduleConfig {
                eta_max: 1e-4,
                eta_min: 1e-6,
                total_steps: 1000,
                warmup: false,
            },
        }
    }
}

// ── Train configuration ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum EvalCadence {
    /// Evaluate after every N epochs.
    Epochs(u64),
    /// Evaluate after every N optimizer steps.
    Steps(u64),
}

impl Default for EvalCadence {
    fn default() -> Self {
        EvalCadence::Epochs(15)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub eval_cadence: EvalCadence,
    /// Phase 1 stops after this many consecutive evaluations whose relative
    /// improvement falls below `phase1_min_rel_improvement`.
    pub phase1_patience: u32,
    pub phase1_min_rel_improvement: f64,
    pub shuffle_seed: u64,
    pub augment_seed: u64,
    pub checkpoint_dir: PathBuf,
    pub loss: LossConfig,
    pub optimizer: AdaBeliefConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            eval_cadence: EvalCadence::default(),
            phase1_patience: 3,
            phase1_min_rel_improvement: 1e-4,
            shuffle_seed: 0,
            augment_seed: 0,
            checkpoint_dir: PathBuf::from("checkpoints"),
            loss: LossConfig::default(),
            optimizer: AdaBeliefConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(TrainError::Config(format!(
                "batch_size {} < 2 (contrastive training needs in-batch negatives)",
                self.batch_size
            )));
        }
        match self.eval_cadence {
            EvalCadence::Epochs(0) | EvalCadence::Steps(0) => {
                return Err(TrainError::Config("eval cadence must be >= 1".into()))
            }
            _ => {}
        }
        if self.phase1_patience == 0 {
            return Err(TrainError::Config("phase1_patience must be >= 1".into()));
        }
        self.loss.validate().map_err(|_| {
            TrainError::Config(format!(
                "logit_scale {} must be a finite non-negative value",
                self.loss.logit_scale
            ))
        })?;
        Ok(())
    }
}

/// One image-caption training pair.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub id: String,
    pub image: RasterImage,
    pub tokens: TokenizedCaption,
}

/// One line of the append-only metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub phase: u8,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub checkpoint_path: Option<String>,
}

#[derive(Debug, Clone)]
pub struct EvalPoint {
    pub step: u64,
    pub phase: u8,
    pub eval_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub best_eval_loss: f64,
    pub best_checkpoint: PathBuf,
    pub init_checkpoint: PathBuf,
    pub phase1_end_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub evaluations: Vec<EvalPoint>,
    pub initial_eval_loss: f64,
    pub final_step: u64,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CKPT_INIT: &str = "ckpt_init.json";
pub const CKPT_BEST: &str = "ckpt_best.json";
pub const CKPT_PHASE1_END: &str = "ckpt_phase1_end.json";

// ── Trainer ─────────────────────────────────────────────────────────────

struct TrainRun<'a> {
    params: &'a mut ModelParams,
    vocab: &'a Vocab,
    train_items: &'a [TrainItem],
    eval_items: &'a [TrainItem],
    cfg: &'a TrainConfig,
    agc: &'a AGCConfig,
    augment: &'a AugmentConfig,
    log: BufWriter<File>,
    global_step: u64,
    aug_draws: u64,
    best_eval: f64,
    evaluations: Vec<EvalPoint>,
    best_path: PathBuf,
}

/// Two-phase training: phase 1 freezes both towers and trains the
/// projections until the eval loss stops improving (patience) or the phase
/// step budget runs out; phase 2 unfreezes everything. The checkpoint with
/// the best evaluation loss across both phases is returned. Deterministic
/// given (config, seeds, data), including shuffling and augmentation.
pub fn train(
    params: &mut ModelParams,
    vocab: &Vocab,
    train_items: &[TrainItem],
    eval_items: &[TrainItem],
    cfg: &TrainConfig,
    schedule: &TwoPhaseSchedule,
    agc: &AGCConfig,
    augment: &AugmentConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    agc.validate()?;
    schedule.phase1.validate()?;
    schedule.phase2.validate()?;
    augment
        .validate()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    if eval_items.is_empty() {
        return Err(TrainError::Config("eval split is empty".into()));
    }
    if train_items.len() < cfg.batch_size {
        return Err(TrainError::Config(format!(
            "batch_size {} exceeds train set size {}",
            cfg.batch_size,
            train_items.len()
        )));
    }
    std::fs::create_dir_all(&cfg.checkpoint_dir)?;
    let metrics_path = cfg.checkpoint_dir.join(METRICS_FILE);
    let log = BufWriter::new(File::create(&metrics_path)?);

    let mut run = TrainRun {
        params,
        vocab,
        train_items,
        eval_items,
        cfg,
        agc,
        augment,
        log,
        global_step: 0,
        aug_draws: 0,
        best_eval: f64::INFINITY,
        evaluations: Vec::new(),
        best_path: cfg.checkpoint_dir.join(CKPT_BEST),
    };

    // initial snapshot and baseline evaluation
    let init_path = cfg.checkpoint_dir.join(CKPT_INIT);
    run.save_checkpoint(&init_path, None)?;
    let initial_eval = run.evaluate()?;
    run.record_eval(1, cosine_lr(0, &schedule.phase1), initial_eval)?;

    // phase 1: towers frozen, projections learn
    run.params.set_frozen(FreezeFlags::towers_only());
    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(cfg.shuffle_seed);
    run.run_phase(1, &schedule.phase1, true, &mut shuffle_rng)?;
    let phase1_end_path = cfg.checkpoint_dir.join(CKPT_PHASE1_END);
    run.save_checkpoint(&phase1_end_path, None)?;

    // phase 2: everything unfrozen, fresh optimizer state
    run.params.set_frozen(FreezeFlags::none());
    run.run_phase(2, &schedule.phase2, false, &mut shuffle_rng)?;

    run.log.flush()?;
    let best_eval_loss = run.best_eval;
    let evaluations = std::mem::take(&mut run.evaluations);
    let final_step = run.global_step;
    Ok(TrainReport {
        best_eval_loss,
        best_checkpoint: cfg.checkpoint_dir.join(CKPT_BEST),
        init_checkpoint: init_path,
        phase1_end_checkpoint: phase1_end_path,
        metrics_path,
        evaluations,
        initial_eval_loss: initial_eval,
        final_step,
    })
}

impl<'a> TrainRun<'a> {
    fn run_phase(
        &mut self,
        phase: u8,
        sched: &ScheduleConfig,
        use_patience: bool,
        shuffle_rng: &mut ChaCha12Rng,
    ) -> Result<(), TrainError> {
        let mut state = AdaBeliefState::new(self.params, self.cfg.optimizer);
        let mut step_in_phase: u64 = 0;
        let mut epoch: u64 = 0;
        let mut prev_eval: Option<f64> = None;
        let mut stale: u32 = 0;
        let mut indices: Vec<usize> = (0..self.train_items.len()).collect();

        'phase: while step_in_phase < sched.total_steps {
            indices.shuffle(shuffle_rng);
            for chunk in batch_ranges(indices.len(), self.cfg.batch_size) {
                if step_in_phase >= sched.total_steps {
                    break;
                }
                let lr = cosine_lr(step_in_phase, sched);
                let batch = &indices[chunk];
                let loss = self.train_step(batch, &mut state, lr, phase)?;
                step_in_phase += 1;
                self.global_step += 1;
                self.write_record(MetricsRecord {
                    step: self.global_step,
                    phase,
                    lr,
                    train_loss: Some(loss),
                    eval_loss: None,
                    checkpoint_path: None,
                })?;
                if let EvalCadence::Steps(k) = self.cfg.eval_cadence {
                    if step_in_phase % k == 0 {
                        let eval = self.evaluate()?;
                        self.record_eval(phase, lr, eval)?;
                        if use_patience && self.update_patience(&mut prev_eval, &mut stale, eval) {
                            break 'phase;
                        }
                    }
                }
            }
            epoch += 1;
            if let EvalCadence::Epochs(k) = self.cfg.eval_cadence {
                if epoch % k == 0 {
                    let lr = cosine_lr(step_in_phase.min(sched.total_steps), sched);
                    let eval = self.evaluate()?;
                    self.record_eval(phase, lr, eval)?;
                    if use_patience && self.update_patience(&mut prev_eval, &mut stale, eval) {
                        break 'phase;
                    }
                }
            }
        }

        // close the phase with a fresh evaluation if steps ran since the last
        if self
            .evaluations
            .last()
            .map(|e| e.step != self.global_step)
            .unwrap_or(true)
        {
            let lr = cosine_lr(step_in_phase.min(sched.total_steps), sched);
            let eval = self.evaluate()?;
            self.record_eval(phase, lr, eval)?;
        }
        Ok(())
    }

    fn update_patience(&self, prev: &mut Option<f64>, stale: &mut u32, eval: f64) -> bool {
        if let Some(p) = *prev {
            let rel = (p - eval) / p.abs().max(1e-12);
            if rel < self.cfg.phase1_min_rel_improvement {
                *stale += 1;
            } else {
                *stale = 0;
            }
        }
        *prev = Some(eval);
        *stale >= self.cfg.phase1_patience
    }

    fn train_step(
        &mut self,
        batch: &[usize],
        state: &mut AdaBeliefState,
        lr: f64,
        phase: u8,
    ) -> Result<f64, TrainError> {
        let mut tape = Tape::new();
        let taped = self.params.watch(&mut tape);
        let mut image_rows = Vec::with_capacity(batch.len());
        let mut text_rows = Vec::with_capacity(batch.len());
        for &idx in batch {
            let item = &self.train_items[idx];
            let augmented = augment_pipeline(
                &item.image,
                self.augment,
                self.cfg.augment_seed,
                self.aug_draws,
            );
            self.aug_draws += 1;
            image_rows.push(encode_image(&mut tape, &taped, &self.params.config, &augmented)?);
            text_rows.push(encode_text(&mut tape, &taped, &item.tokens)?);
        }
        let image_mat = tape.concat_rows(&image_rows)?;
        let text_mat = tape.concat_rows(&text_rows)?;
        let loss = clip_loss(&mut tape, &image_mat, &text_mat, &self.cfg.loss)?;
        let loss_value = loss.scalar_value()?;
        if !loss_value.is_finite() {
            return Err(TrainError::NonFinite {
                step: self.global_step + 1,
                phase,
            });
        }
        tape.backward(&loss)?;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(taped.arrays().len());
        for (i, watched) in taped.arrays().iter().enumerate() {
            match tape.grad(watched) {
                Some(g) => {
                    let clipped =
                        agc_clip(g.data(), self.params.arrays()[i].tensor.data(), self.agc)?;
                    grads.push(Some(clipped));
                }
                None => grads.push(None),
            }
        }
        adabelief_step(self.params, &grads, state, lr)?;
        Ok(loss_value)
    }

    /// Mean evaluation loss over the eval split, in manifest order, without
    /// augmentation, batched like training with per-batch losses weighted by
    /// batch size.
    fn evaluate(&mut self) -> Result<f64, TrainError> {
        let mut total = 0.0;
        let mut count = 0usize;
        let n = self.eval_items.len();
        for range in batch_ranges(n, self.cfg.batch_size.min(n)) {
            let mut tape = Tape::new();
            let taped = self.params.watch_inference(&mut tape);
            let mut image_rows = Vec::new();
            let mut text_rows = Vec::new();
            for item in &self.eval_items[range.clone()] {
                image_rows.push(encode_image(&mut tape, &taped, &self.params.config, &item.image)?);
                text_rows.push(encode_text(&mut tape, &taped, &item.tokens)?);
            }
            let image_mat = tape.concat_rows(&image_rows)?;
            let text_mat = tape.concat_rows(&text_rows)?;
            let loss = clip_loss(&mut tape, &image_mat, &text_mat, &self.cfg.loss)?;
            total += loss.scalar_value()? * range.len() as f64;
            count += range.len();
        }
        Ok(total / count as f64)
    }

    fn record_eval(&mut self, phase: u8, lr: f64, eval: f64) -> Result<(), TrainError> {
        let mut checkpoint_path = None;
        if eval < self.best_eval {
            self.best_eval = eval;
            let path = self.best_path.clone();
            self.save_checkpoint(&path, None)?;
            checkpoint_path = Some(CKPT_BEST.to_string());
        }
        self.evaluations.push(EvalPoint {
            step: self.global_step,
            phase,
            eval_loss: eval,
        });
        self.write_record(MetricsRecord {
            step: self.global_step,
            phase,
            lr,
            train_loss: None,
            eval_loss: Some(eval),
            checkpoint_path,
        })
    }

    fn save_checkpoint(
        &mut self,
        path: &Path,
        optimizer: Option<OptimizerSnapshot>,
    ) -> Result<(), TrainError> {
        Checkpoint::from_model(self.params, self.vocab, optimizer).save(path)?;
        Ok(())
    }

    fn write_record(&mut self, record: MetricsRecord) -> Result<(), TrainError> {
        serde_json::to_writer(&mut self.log, &record)
            .map_err(|e| TrainError::Data(e.to_string()))?;
        self.log.write_all(b"\n")?;
        Ok(())
    }
}

/// Contiguous batch ranges over `n` items; a trailing singleton is merged
/// into the previous batch so every contrastive batch has at least 2 rows
/// (when `n >= 2`).
fn batch_ranges(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    assert!(batch_size >= 1);
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        out.push(start..end);
        start = end;
    }
    if out.len() >= 2 && out.last().map(|r| r.len()) == Some(1) {
        let last = out.pop().unwrap();
        let prev = out.pop().unwrap();
        out.push(prev.start..last.end);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::ModelConfig;

    #[test]
    fn agc_no_clip_branch_returns_grad_unchanged() {
        let cfg = AGCConfig::default();
        let param = vec![1.0, 0.0, 0.0];
        let grad = vec![0.001, 0.002, -0.003];
        let out = agc_clip(&grad, &param, &cfg).unwrap();
        assert_eq!(out, grad, "bitwise unchanged inside the bound");
    }

    #[test]
    fn agc_clips_to_ratio_times_weight_norm() {
        let cfg = AGCConfig {
            clip_ratio: 0.01,
            norm_floor: 1e-3,
        };
        let param = vec![1.0, 0.0];
        let grad = vec![0.3, 0.4]; // ‖g‖ = 0.5
        let out = agc_clip(&grad, &param, &cfg).unwrap();
        let norm = euclidean_norm(&out);
        assert!((norm - 0.01).abs() < 1e-12, "‖g'‖ = {norm}");
    }

    #[test]
    fn agc_zero_weights_use_floor() {
        let cfg = AGCConfig {
            clip_ratio: 0.01,
            norm_floor: 1e-3,
        };
        let param = vec![0.0, 0.0];
        let grad = vec![0.6, 0.8]; // ‖g‖ = 1
        let out = agc_clip(&grad, &param, &cfg).unwrap();
        let norm = euclidean_norm(&out);
        assert!((norm - 0.01 * 1e-3).abs() < 1e-15, "‖g'‖ = {norm}");
    }

    #[test]
    fn agc_zero_gradient_passes_through() {
        let cfg = AGCConfig::default();
        let out = agc_clip(&[0.0, 0.0], &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        let cfg = ScheduleConfig {
            eta_max: 0.1,
            eta_min: 0.001,
            total_steps: 100,
            warmup: false,
        };
        assert!((cosine_lr(0, &cfg) - 0.1).abs() < 1e-18);
        assert!((cosine_lr(100, &cfg) - 0.001).abs() < 1e-18);
        assert!((cosine_lr(50, &cfg) - 0.0505).abs() < 1e-12);
        assert_eq!(cosine_lr(101, &cfg), 0.001, "past the end clamps");
    }

    #[test]
    fn cosine_schedule_monotone_non_increasing() {
        let cfg = ScheduleConfig {
            eta_max: 1e-3,
            eta_min: 1e-6,
            total_steps: 57,
            warmup: true,
        };
        let mut prev = f64::INFINITY;
        for t in 0..=57 {
            let lr = cosine_lr(t, &cfg);
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    fn tiny_params() -> ModelParams {
        let cfg = ModelConfig {
            embed_dim: 4,
            patch_size: 2,
            image_size: 4,
            vocab_size: 6,
            max_tokens: 8,
            hidden_dim: 3,
            seed: 5,
        };
        ModelParams::init(&cfg).unwrap()
    }

    #[test]
    fn adabelief_zero_gradient_barely_moves_params() {
        let mut params = tiny_params();
        let before: Vec<Vec<f64>> = params
            .arrays()
            .iter()
            .map(|a| a.tensor.data().to_vec())
            .collect();
        let mut state = AdaBeliefState::new(&params, AdaBeliefConfig::default());
        let lr = 0.001;
        let grads: Vec<Option<Vec<f64>>> = params
            .arrays()
            .iter()
            .map(|a| Some(vec![0.0; a.tensor.len()]))
            .collect();
        adabelief_step(&mut params, &grads, &mut state, lr).unwrap();
        for (a, b) in params.arrays().iter().zip(&before) {
            for (x, y) in a.tensor.data().iter().zip(b) {
                assert!((x - y).abs() < lr * 1e-3, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn adabelief_scalar_hand_example() {
        // one update line by line: g=1, defaults, t=1, lr=0.001
        let mut params = tiny_params();
        // drive a single array; examine its first element
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; params.arrays().len()];
        let len = params.arrays()[0].tensor.len();
        let mut g = vec![0.0; len];
        g[0] = 1.0;
        grads[0] = Some(g);
        let theta0 = params.arrays()[0].tensor.data()[0];
        let mut state = AdaBeliefState::new(&params, AdaBeliefConfig::default());
        adabelief_step(&mut params, &grads, &mut state, 0.001).unwrap();
        let delta = params.arrays()[0].tensor.data()[0] - theta0;
        // hand evaluation of the five update lines
        let m: f64 = 0.1; // 0.9·0 + 0.1·1
        let s: f64 = 0.001 * (1.0 - m) * (1.0 - m) + 1e-8;
        let m_hat = m / (1.0 - 0.9);
        let s_hat = s / (1.0 - 0.999);
        let expect = -0.001 * m_hat / (s_hat.sqrt() + 1e-8);
        assert!((delta - expect).abs() < 1e-9, "delta {delta} expect {expect}");
        assert!((delta - (-1.1111e-3)).abs() < 1e-6, "delta {delta}");
    }

    #[test]
    fn adabelief_second_moment_nonnegative() {
        use rand::Rng;
        let mut params = tiny_params();
        let mut state = AdaBeliefState::new(&params, AdaBeliefConfig::default());
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for _ in 0..50 {
            let grads: Vec<Option<Vec<f64>>> = params
                .arrays()
                .iter()
                .map(|a| {
                    Some(
                        (0..a.tensor.len())
                            .map(|_| rng.gen_range(-1.0..1.0))
                            .collect(),
                    )
                })
                .collect();
            adabelief_step(&mut params, &grads, &mut state, 1e-3).unwrap();
            assert!(state.min_second_moment() >= 0.0);
        }
    }

    #[test]
    fn frozen_groups_stay_bit_identical() {
        let mut params = tiny_params();
        params.set_frozen(FreezeFlags {
            image_tower: true,
            text_tower: true,
            image_proj: false,
            text_proj: false,
        });
        let before: Vec<Vec<f64>> = params
            .arrays()
            .iter()
            .map(|a| a.tensor.data().to_vec())
            .collect();
        let mut state = AdaBeliefState::new(&params, AdaBeliefConfig::default());
        for _ in 0..100 {
            let grads: Vec<Option<Vec<f64>>> = params
                .arrays()
                .iter()
                .map(|a| Some(vec![0.5; a.tensor.len()]))
                .collect();
            adabelief_step(&mut params, &grads, &mut state, 1e-3).unwrap();
        }
        for (i, (arr, orig)) in params.arrays().iter().zip(&before).enumerate() {
            let frozen = params.freeze.is_frozen(arr.group);
            let unchanged = arr.tensor.data() == orig.as_slice();
            assert_eq!(unchanged, frozen, "array {i} ({})", arr.name);
        }
    }

    #[test]
    fn negative_lr_rejected() {
        let mut params = tiny_params();
        let grads: Vec<Option<Vec<f64>>> = vec![None; params.arrays().len()];
        let mut state = AdaBeliefState::new(&params, AdaBeliefConfig::default());
        assert!(matches!(
            adabelief_step(&mut params, &grads, &mut state, -1.0),
            Err(TrainError::Config(_))
        ));
    }

    #[test]
    fn batch_ranges_merge_trailing_singleton() {
        let r = batch_ranges(9, 4);
        assert_eq!(r, vec![0..4, 4..9]);
        let r = batch_ranges(8, 4);
        assert_eq!(r, vec![0..4, 4..8]);
        let r = batch_ranges(1, 4);
        assert_eq!(r, vec![0..1]);
        let r = batch_ranges(5, 2);
        assert_eq!(r, vec![0..2, 2..5]);
    }
}
