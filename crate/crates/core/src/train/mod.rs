//! Deterministic mini-batch training for the two-stream attention model.
//!
//! One run is a pure function of (model config, train config, data): epoch
//! shuffles come from a counter-based generator seeded by the run seed, and
//! batch gradients are accumulated video by video inside fixed-size chunks
//! whose partial sums are reduced in chunk order. Chunks run in parallel but
//! the partition and every summation order are fixed, so the resulting
//! parameters are bit-identical regardless of thread count.

mod loss;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::VideoSample;
use crate::error::{Error, Result};
use crate::labels::{kd_targets, DenseLabels, KdTargets, TeacherLogits};
use crate::metrics::{
    ave_gt_classes, ave_infer, evaluate_corpus, EvalOpts, MetricsReport, Prediction,
};
use crate::model::{build_forward, forward, save_checkpoint, ModelConfig, ParamSet};
use crate::tensor::graph::{Graph, TensorId};
use crate::tensor::optim::{adamw_step, clip_param_grads, AdamWConfig, OptimizerState};
use crate::tensor::schedule::{lr_at, LrSchedule};

pub use loss::{
    build_loss, LossInputs, LossMode, LossOpts, LossParts, ModalityLoss, TemporalReduction,
};

/// Videos per parallel gradient chunk. Fixing this constant (rather than
/// deriving it from the worker count) is what keeps runs bit-identical
/// across thread counts.
const GRAD_CHUNK: usize = 8;

/// Hyperparameters for one optimization run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss_mode: LossMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub smoothing: f64,
    pub temporal_reduction: TemporalReduction,
    pub seed: u64,
    /// Save a parameter snapshot every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::standard()
    }
}

impl TrainConfig {
    /// Recipe for the single-layer 512-wide model.
    pub fn standard() -> Self {
        TrainConfig {
            loss_mode: LossMode::Base,
            epochs: 60,
            batch_size: 64,
            peak_lr: 1e-4,
            min_lr: 1e-6,
            warmup_epochs: 10,
            beta1: 0.5,
            beta2: 0.999,
            weight_decay: 1e-3,
            grad_clip: 1.0,
            smoothing: 0.1,
            temporal_reduction: TemporalReduction::Mean,
            seed: 0,
            checkpoint_every: 0,
        }
    }

    /// Recipe for the four-layer 256-wide model: same run, higher rates.
    pub fn variant() -> Self {
        TrainConfig {
            peak_lr: 3e-4,
            min_lr: 3e-6,
            ..Self::standard()
        }
    }

    /// Recipe for the background-extended head: small batches, long run,
    /// per-segment terms summed over time.
    pub fn ave() -> Self {
        TrainConfig {
            loss_mode: LossMode::Weak,
            epochs: 120,
            batch_size: 16,
            peak_lr: 3e-4,
            min_lr: 3e-6,
            temporal_reduction: TemporalReduction::Sum,
            ..Self::standard()
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak_lr: self.peak_lr,
            min_lr: self.min_lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.epochs > 0 {
            self.schedule().validate()?;
        }
        if !(self.grad_clip > 0.0) || !self.grad_clip.is_finite() {
            return Err(Error::Config(format!(
                "gradient clip must be positive, got {}",
                self.grad_clip
            )));
        }
        if !(0.0..=0.5).contains(&self.smoothing) {
            return Err(Error::Config(format!(
                "smoothing {} outside [0, 0.5]",
                self.smoothing
            )));
        }
        self.adamw().validate()
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }

    fn loss_opts(&self, ave_mode: bool) -> LossOpts {
        LossOpts {
            smoothing: self.smoothing,
            reduction: self.temporal_reduction,
            ave_mode,
        }
    }

    /// Renders as `key = value` lines, one per field.
    pub fn to_text(&self) -> String {
        format!(
            "loss = {}\nepochs = {}\nbatch_size = {}\npeak_lr = {}\nmin_lr = {}\n\
             warmup_epochs = {}\nbeta1 = {}\nbeta2 = {}\nweight_decay = {}\ngrad_clip = {}\n\
             smoothing = {}\ntemporal_reduction = {}\nseed = {}\ncheckpoint_every = {}\n",
            self.loss_mode,
            self.epochs,
            self.batch_size,
            self.peak_lr,
            self.min_lr,
            self.warmup_epochs,
            self.beta1,
            self.beta2,
            self.weight_decay,
            self.grad_clip,
            self.smoothing,
            self.temporal_reduction.as_str(),
            self.seed,
            self.checkpoint_every,
        )
    }

    /// Parses the `to_text` format starting from the standard recipe.
    /// Unknown keys are errors; `#` starts a comment.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::standard();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_string(),
                line: Some(ln + 1),
                msg,
            };
            let Some((key, value)) = line.split_once('=') else {
                return Err(err(format!("expected key = value, got {line:?}")));
            };
            let (key, value) = (key.trim(), value.trim());
            let parse_usize = || -> Result<usize> {
                value.parse().map_err(|_| err(format!("{key} needs an integer, got {value:?}")))
            };
            let parse_f64 = || -> Result<f64> {
                value.parse().map_err(|_| err(format!("{key} needs a number, got {value:?}")))
            };
            match key {
                "loss" => cfg.loss_mode = LossMode::parse(value).map_err(|e| err(e.to_string()))?,
                "epochs" => cfg.epochs = parse_usize()?,
                "batch_size" => cfg.batch_size = parse_usize()?,
                "peak_lr" => cfg.peak_lr = parse_f64()?,
                "min_lr" => cfg.min_lr = parse_f64()?,
                "warmup_epochs" => cfg.warmup_epochs = parse_usize()?,
                "beta1" => cfg.beta1 = parse_f64()?,
                "beta2" => cfg.beta2 = parse_f64()?,
                "weight_decay" => cfg.weight_decay = parse_f64()?,
                "grad_clip" => cfg.grad_clip = parse_f64()?,
                "smoothing" => cfg.smoothing = parse_f64()?,
                "temporal_reduction" => {
                    cfg.temporal_reduction =
                        TemporalReduction::parse(value).map_err(|e| err(e.to_string()))?
                }
                "seed" => {
                    cfg.seed = value
                        .parse()
                        .map_err(|_| err(format!("seed needs an integer, got {value:?}")))?
                }
                "checkpoint_every" => cfg.checkpoint_every = parse_usize()?,
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-video auxiliary targets, keyed by video id. Only the maps a loss
/// mode actually consults need to be populated.
#[derive(Debug, Clone, Default)]
pub struct TrainAux {
    /// Per-segment labels over the real classes (elaborated or ground truth).
    pub dense: BTreeMap<String, DenseLabels>,
    /// Per-segment teacher distributions for distillation.
    pub teachers: BTreeMap<String, KdTargets>,
}

impl TrainAux {
    pub fn add_dense(&mut self, video_id: impl Into<String>, labels: DenseLabels) {
        self.dense.insert(video_id.into(), labels);
    }

    /// Converts raw teacher logits into per-row distributions and stores
    /// them under each video id.
    pub fn add_teacher_logits(&mut self, logits: &[TeacherLogits]) -> Result<()> {
        for l in logits {
            self.teachers.insert(l.video_id.clone(), kd_targets(l)?);
        }
        Ok(())
    }
}

/// One epoch's aggregate numbers. Losses are means over the epoch's videos;
/// components a mode does not have stay at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_video: f64,
    pub loss_audio: f64,
    pub loss_visual: f64,
    /// Validation score after this epoch, when a validation set was given:
    /// segment-level Type score for the plain head, segment accuracy (x100)
    /// for the background-extended one.
    pub val_metric: Option<f64>,
}

/// Summary of a finished run. Contains no wall-clock information, so two
/// runs with equal inputs serialize identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_mode: String,
    pub seed: u64,
    pub param_count: usize,
    /// What picked the returned parameters: `segment_type_at_av`,
    /// `segment_accuracy`, or `final_epoch` when no validation set exists.
    pub selection: String,
    pub best_epoch: Option<usize>,
    pub best_val_metric: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    /// Full evaluation of the returned parameters on the validation set
    /// (plain head only).
    pub val_report: Option<MetricsReport>,
}

/// Trained parameters plus the run summary. `params` is the best validation
/// snapshot when a validation set was given, the final state otherwise.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub report: TrainReport,
}

/// Runs the full optimization loop. `aux` must hold per-segment labels for
/// every training video when the mode uses them, and teacher distributions
/// likewise; validation videos need dense ground truth.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[VideoSample],
    val_set: &[VideoSample],
    aux: &TrainAux,
    snapshot_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    check_mode(model_cfg.ave_mode, cfg.loss_mode)?;
    if train_set.is_empty() {
        return Err(Error::Usage("training needs at least one video".into()));
    }
    check_aux(cfg.loss_mode, train_set, aux)?;
    for v in val_set {
        if v.dense_gt.is_none() {
            return Err(Error::Usage(format!(
                "validation video {} has no dense ground truth",
                v.video_id
            )));
        }
    }

    let mut params = ParamSet::init(model_cfg, cfg.seed)?;
    let mut state = OptimizerState::new();
    let adamw = cfg.adamw();
    let opts = cfg.loss_opts(model_cfg.ave_mode);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamSet)> = None;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(&cfg.schedule(), epoch)?;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut sums = ComponentSums::default();
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let videos: Vec<&VideoSample> = batch.iter().map(|&i| &train_set[i]).collect();
            let (grads, stats) =
                batch_gradients(&params, &videos, cfg.loss_mode, &opts, aux).map_err(|e| {
                    match e {
                        Error::NonFinite(msg) => {
                            Error::NonFinite(format!("epoch {epoch}, batch {bi}: {msg}"))
                        }
                        other => other,
                    }
                })?;
            let tensors = params.tensors_mut();
            for (t, g) in tensors.iter_mut().zip(grads) {
                t.grad = Some(g);
            }
            clip_param_grads(tensors, cfg.grad_clip)?;
            adamw_step(tensors, &mut state, &adamw, lr)?;
            sums.add(&stats);
        }

        let mean = sums.mean(train_set.len());
        if !mean.total.is_finite() {
            return Err(Error::NonFinite(format!("mean loss after epoch {epoch}")));
        }
        let val_metric = if val_set.is_empty() {
            None
        } else {
            Some(validation_metric(model_cfg, &params, val_set)?)
        };
        if let Some(m) = val_metric {
            if best.as_ref().is_none_or(|(_, b, _)| m > *b) {
                best = Some((epoch, m, params.clone()));
            }
        }
        records.push(EpochRecord {
            epoch,
            lr,
            loss_total: mean.total,
            loss_video: mean.video,
            loss_audio: mean.audio,
            loss_visual: mean.visual,
            val_metric,
        });
        if let Some(dir) = snapshot_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                save_checkpoint(&dir.join(format!("epoch_{:04}.ckpt", epoch + 1)), &params)?;
            }
        }
    }

    let (selected, best_epoch, best_val_metric) = match best {
        Some((e, m, p)) => (p, Some(e), Some(m)),
        None => (params, None, None),
    };
    let selection = if val_set.is_empty() {
        "final_epoch"
    } else if model_cfg.ave_mode {
        "segment_accuracy"
    } else {
        "segment_type_at_av"
    };
    let val_report = if val_set.is_empty() || model_cfg.ave_mode {
        None
    } else {
        Some(validation_report(&selected, val_set)?)
    };
    let report = TrainReport {
        loss_mode: cfg.loss_mode.to_string(),
        seed: cfg.seed,
        param_count: selected.param_count(),
        selection: selection.to_string(),
        best_epoch,
        best_val_metric,
        epochs: records,
        val_report,
    };
    Ok(TrainOutcome { params: selected, report })
}

fn check_mode(ave_mode: bool, mode: LossMode) -> Result<()> {
    match (ave_mode, mode) {
        (true, LossMode::Weak | LossMode::Valor) => Ok(()),
        (true, other) => Err(Error::Usage(format!(
            "loss mode {other} is not defined for the background-extended head; use weak or valor"
        ))),
        (false, LossMode::Weak) => Err(Error::Usage(
            "loss mode weak applies only to the background-extended head".into(),
        )),
        (false, _) => Ok(()),
    }
}

fn check_aux(mode: LossMode, videos: &[VideoSample], aux: &TrainAux) -> Result<()> {
    if mode.requires_dense() {
        for v in videos {
            if !aux.dense.contains_key(&v.video_id) {
                return Err(Error::Usage(format!(
                    "loss mode {mode} needs per-segment labels for every training video, missing {}",
                    v.video_id
                )));
            }
        }
    }
    if mode.requires_teacher() {
        for v in videos {
            if !aux.teachers.contains_key(&v.video_id) {
                return Err(Error::Usage(format!(
                    "loss mode {mode} needs teacher distributions for every training video, missing {}",
                    v.video_id
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
struct ComponentSums {
    total: f64,
    video: f64,
    audio: f64,
    visual: f64,
}

impl ComponentSums {
    fn add(&mut self, other: &ComponentSums) {
        self.total += other.total;
        self.video += other.video;
        self.audio += other.audio;
        self.visual += other.visual;
    }

    fn mean(&self, videos: usize) -> ComponentSums {
        let n = videos as f64;
        ComponentSums {
            total: self.total / n,
            video: self.video / n,
            audio: self.audio / n,
            visual: self.visual / n,
        }
    }
}

/// Mean gradient over one batch plus summed loss components.
///
/// Videos are processed in fixed chunks of `GRAD_CHUNK`; each chunk sums its
/// gradients sequentially in batch order and the chunk sums are then reduced
/// in chunk order, so the result does not depend on how rayon schedules the
/// chunks.
fn batch_gradients(
    params: &ParamSet,
    videos: &[&VideoSample],
    mode: LossMode,
    opts: &LossOpts,
    aux: &TrainAux,
) -> Result<(Vec<Vec<f64>>, ComponentSums)> {
    let chunks: Vec<(Vec<Vec<f64>>, ComponentSums)> = videos
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| chunk_gradients(params, chunk, mode, opts, aux))
        .collect::<Result<_>>()?;

    let mut acc: Vec<Vec<f64>> =
        params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    let mut stats = ComponentSums::default();
    for (grads, s) in &chunks {
        for (a, g) in acc.iter_mut().zip(grads) {
            for (x, &y) in a.iter_mut().zip(g) {
                *x += y;
            }
        }
        stats.add(s);
    }
    let scale = 1.0 / videos.len() as f64;
    for a in &mut acc {
        for x in a.iter_mut() {
            *x *= scale;
        }
    }
    Ok((acc, stats))
}

fn chunk_gradients(
    params: &ParamSet,
    chunk: &[&VideoSample],
    mode: LossMode,
    opts: &LossOpts,
    aux: &TrainAux,
) -> Result<(Vec<Vec<f64>>, ComponentSums)> {
    let mut acc: Vec<Vec<f64>> =
        params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    let mut stats = ComponentSums::default();
    for v in chunk {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, true);
        let h = build_forward(&mut g, &bound, &v.feats_audio, &v.feats_visual)?;
        let inputs = LossInputs {
            weak: &v.weak,
            dense: aux.dense.get(&v.video_id),
            teacher: aux.teachers.get(&v.video_id),
        };
        let parts = build_loss(&mut g, &h, mode, &inputs, opts)?;
        let total = g.value(parts.total).data()[0];
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("loss for video {}", v.video_id)));
        }
        g.backward(parts.total)?;
        for (i, &id) in bound.ids().iter().enumerate() {
            // Parameters outside the mode's compute path (for example the
            // pooling heads under the weak video objective) keep zero grads.
            if let Some(grad) = g.grad(id) {
                for (a, &x) in acc[i].iter_mut().zip(grad) {
                    *a += x;
                }
            }
        }
        stats.total += total;
        stats.video += part_value(&g, parts.video);
        stats.audio += part_value(&g, parts.audio);
        stats.visual += part_value(&g, parts.visual);
    }
    Ok((acc, stats))
}

fn part_value(g: &Graph, id: Option<TensorId>) -> f64 {
    id.map_or(0.0, |id| g.value(id).data()[0])
}

/// Validation score used for snapshot selection.
fn validation_metric(
    model_cfg: &ModelConfig,
    params: &ParamSet,
    val_set: &[VideoSample],
) -> Result<f64> {
    if model_cfg.ave_mode {
        let counts: Vec<(usize, usize)> = val_set
            .par_iter()
            .map(|v| -> Result<(usize, usize)> {
                let out = forward(params, &v.feats_audio, &v.feats_visual)?;
                let pred = ave_infer(&out.probs_audio, &out.probs_visual)?;
                let gt = ave_gt_classes(v.dense_gt.as_ref().expect("validated"))?;
                let hits = pred.iter().zip(&gt).filter(|(a, b)| a == b).count();
                Ok((hits, gt.len()))
            })
            .collect::<Result<_>>()?;
        let (hits, total) = counts
            .iter()
            .fold((0, 0), |(h, t), &(hh, tt)| (h + hh, t + tt));
        if total == 0 {
            return Err(Error::Validation("validation set has zero segments".into()));
        }
        Ok(100.0 * hits as f64 / total as f64)
    } else {
        Ok(validation_report(params, val_set)?.segment.type_at_av)
    }
}

fn validation_report(params: &ParamSet, val_set: &[VideoSample]) -> Result<MetricsReport> {
    let preds: Vec<DenseLabels> = val_set
        .par_iter()
        .map(|v| -> Result<DenseLabels> {
            let out = forward(params, &v.feats_audio, &v.feats_visual)?;
            let pred = Prediction::from_probs(
                v.video_id.clone(),
                out.probs_audio,
                out.probs_visual,
                0.5,
            )?;
            Ok(pred.labels)
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<(&DenseLabels, &DenseLabels)> = preds
        .iter()
        .zip(val_set)
        .map(|(p, v)| (p, v.dense_gt.as_ref().expect("validated")))
        .collect();
    evaluate_corpus(&pairs, &EvalOpts::default())
}
