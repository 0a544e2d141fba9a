//! Training objectives assembled on the autodiff tape.
//!
//! Every builder appends nodes to an existing graph that already holds a
//! forward pass and returns the scalar node ids, so one backward call yields
//! gradients for the whole objective. Targets enter as constants; gradients
//! flow only through the model outputs.

use std::fmt;

use crate::error::{Error, Result};
use crate::labels::{extend_background, smooth_labels, DenseLabels, KdTargets, WeakLabel};
use crate::model::ForwardHandles;
use crate::tensor::graph::{Graph, TensorId};

/// How per-segment losses collapse over time: `Sum` adds the per-segment
/// means, `Mean` averages them. `Sum` weights long clips more heavily.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TemporalReduction {
    Sum,
    #[default]
    Mean,
}

impl TemporalReduction {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(TemporalReduction::Sum),
            "mean" => Ok(TemporalReduction::Mean),
            other => Err(Error::Config(format!(
                "unknown temporal reduction {other:?}, expected sum or mean"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TemporalReduction::Sum => "sum",
            TemporalReduction::Mean => "mean",
        }
    }
}

/// Objective for one modality branch when modes are mixed per modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModalityLoss {
    /// Video-level target, label-smoothed.
    Base,
    /// Per-segment distillation against teacher distributions.
    Kd,
    /// Per-segment targets from elaborated labels.
    Valor,
}

impl ModalityLoss {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(ModalityLoss::Base),
            "kd" => Ok(ModalityLoss::Kd),
            "valor" => Ok(ModalityLoss::Valor),
            other => Err(Error::Config(format!(
                "unknown modality loss {other:?}, expected base, kd, or valor"
            ))),
        }
    }

    fn as_str(&self) -> &'static str {
        match self {
            ModalityLoss::Base => "base",
            ModalityLoss::Kd => "kd",
            ModalityLoss::Valor => "valor",
        }
    }
}

/// Which objective drives an optimization run.
///
/// `Base`, `Kd`, `Valor`, and `Mixed` pair a video-level term with one
/// guidance term per modality and require the plain label space. `Weak` is
/// the video-level objective for the background-extended head, and `Valor`
/// doubles as its per-segment counterpart there.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    Base,
    Kd,
    Valor,
    Weak,
    Mixed { audio: ModalityLoss, visual: ModalityLoss },
}

impl LossMode {
    /// Parses the command-line token: `base`, `kd`, `valor`, `weak`, or
    /// `mixed:audio=<m>,visual=<m>` with both branches named exactly once.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "base" => return Ok(LossMode::Base),
            "kd" => return Ok(LossMode::Kd),
            "valor" => return Ok(LossMode::Valor),
            "weak" => return Ok(LossMode::Weak),
            _ => {}
        }
        let Some(body) = s.strip_prefix("mixed:") else {
            return Err(Error::Config(format!(
                "unknown loss mode {s:?}, expected base, kd, valor, weak, or mixed:audio=<m>,visual=<m>"
            )));
        };
        let mut audio = None;
        let mut visual = None;
        for part in body.split(',') {
            let Some((key, value)) = part.split_once('=') else {
                return Err(Error::Config(format!(
                    "mixed loss part {part:?} is not of the form audio=<m> or visual=<m>"
                )));
            };
            let slot = match key {
                "audio" => &mut audio,
                "visual" => &mut visual,
                other => {
                    return Err(Error::Config(format!(
                        "mixed loss names branch {other:?}, expected audio or visual"
                    )))
                }
            };
            if slot.replace(ModalityLoss::parse(value)?).is_some() {
                return Err(Error::Config(format!("mixed loss sets {key} twice")));
            }
        }
        match (audio, visual) {
            (Some(a), Some(v)) => Ok(LossMode::Mixed { audio: a, visual: v }),
            _ => Err(Error::Config(
                "mixed loss must set both audio=<m> and visual=<m>".into(),
            )),
        }
    }

    pub fn requires_dense(&self) -> bool {
        match self {
            LossMode::Valor => true,
            LossMode::Mixed { audio, visual } => {
                *audio == ModalityLoss::Valor || *visual == ModalityLoss::Valor
            }
            _ => false,
        }
    }

    pub fn requires_teacher(&self) -> bool {
        match self {
            LossMode::Kd => true,
            LossMode::Mixed { audio, visual } => {
                *audio == ModalityLoss::Kd || *visual == ModalityLoss::Kd
            }
            _ => false,
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossMode::Base => f.write_str("base"),
            LossMode::Kd => f.write_str("kd"),
            LossMode::Valor => f.write_str("valor"),
            LossMode::Weak => f.write_str("weak"),
            LossMode::Mixed { audio, visual } => {
                write!(f, "mixed:audio={},visual={}", audio.as_str(), visual.as_str())
            }
        }
    }
}

/// Settings shared by every objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOpts {
    /// Label smoothing for the modality-level video targets, in [0, 0.5].
    pub smoothing: f64,
    /// Reduction over segments for per-segment objectives.
    pub reduction: TemporalReduction,
    /// True when the head carries a trailing background class.
    pub ave_mode: bool,
}

impl Default for LossOpts {
    fn default() -> Self {
        LossOpts {
            smoothing: 0.1,
            reduction: TemporalReduction::Mean,
            ave_mode: false,
        }
    }
}

/// Per-video targets. `weak` always covers the real classes only; `dense`
/// and `teacher` are consulted only by modes that need them.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub weak: &'a WeakLabel,
    pub dense: Option<&'a DenseLabels>,
    pub teacher: Option<&'a KdTargets>,
}

/// Scalar nodes of one assembled objective. `total` is always set; the
/// component ids are present only when that mode has the component.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: TensorId,
    pub video: Option<TensorId>,
    pub audio: Option<TensorId>,
    pub visual: Option<TensorId>,
}

/// Assembles the objective for one video on top of a forward pass.
pub fn build_loss(
    g: &mut Graph,
    h: &ForwardHandles,
    mode: LossMode,
    inputs: &LossInputs,
    opts: &LossOpts,
) -> Result<LossParts> {
    match (opts.ave_mode, mode) {
        (true, LossMode::Weak) => ave_weak(g, h, inputs.weak),
        (true, LossMode::Valor) => {
            ave_valor(g, h, need_dense(inputs)?, opts.reduction)
        }
        (true, other) => Err(Error::Usage(format!(
            "loss mode {other} is not defined for the background-extended head; use weak or valor"
        ))),
        (false, LossMode::Weak) => Err(Error::Usage(
            "loss mode weak applies only to the background-extended head".into(),
        )),
        (false, LossMode::Base) => {
            weak_guided(g, h, ModalityLoss::Base, ModalityLoss::Base, inputs, opts)
        }
        (false, LossMode::Kd) => {
            weak_guided(g, h, ModalityLoss::Kd, ModalityLoss::Kd, inputs, opts)
        }
        (false, LossMode::Valor) => {
            weak_guided(g, h, ModalityLoss::Valor, ModalityLoss::Valor, inputs, opts)
        }
        (false, LossMode::Mixed { audio, visual }) => {
            weak_guided(g, h, audio, visual, inputs, opts)
        }
    }
}

fn need_dense<'a>(inputs: &LossInputs<'a>) -> Result<&'a DenseLabels> {
    inputs
        .dense
        .ok_or_else(|| Error::Usage("this loss mode needs per-segment labels".into()))
}

fn need_teacher<'a>(inputs: &LossInputs<'a>) -> Result<&'a KdTargets> {
    inputs
        .teacher
        .ok_or_else(|| Error::Usage("this loss mode needs teacher distributions".into()))
}

/// Video-level term plus one guidance term per modality.
fn weak_guided(
    g: &mut Graph,
    h: &ForwardHandles,
    audio_mode: ModalityLoss,
    visual_mode: ModalityLoss,
    inputs: &LossInputs,
    opts: &LossOpts,
) -> Result<LossParts> {
    let video = g.bce(h.video, &inputs.weak.to_tensor())?;
    let audio = branch_term(g, h, true, audio_mode, inputs, opts)?;
    let visual = branch_term(g, h, false, visual_mode, inputs, opts)?;
    let total = g.add_n(&[video, audio, visual])?;
    Ok(LossParts {
        total,
        video: Some(video),
        audio: Some(audio),
        visual: Some(visual),
    })
}

fn branch_term(
    g: &mut Graph,
    h: &ForwardHandles,
    is_audio: bool,
    mode: ModalityLoss,
    inputs: &LossInputs,
    opts: &LossOpts,
) -> Result<TensorId> {
    let (pooled, logits, probs) = if is_audio {
        (h.modality_audio, h.logits_audio, h.probs_audio)
    } else {
        (h.modality_visual, h.logits_visual, h.probs_visual)
    };
    match mode {
        ModalityLoss::Base => {
            let smoothed = smooth_labels(inputs.weak, opts.smoothing)?;
            g.bce(pooled, &smoothed)
        }
        ModalityLoss::Kd => {
            let targets = need_teacher(inputs)?;
            let teacher = if is_audio { &targets.audio } else { &targets.visual };
            let student = g.softmax(logits, 1)?;
            g.kl_div(teacher, student)
        }
        ModalityLoss::Valor => {
            let dense = need_dense(inputs)?;
            let target = if is_audio { &dense.audio } else { &dense.visual };
            segment_term(g, probs, &target.to_tensor(), opts.reduction)
        }
    }
}

/// Cross entropy of per-segment probabilities against a [T, C] target,
/// reduced over segments as configured. The graph's `bce` node is the mean
/// over all T*C cells, so the sum over segments is that mean scaled by T.
fn segment_term(
    g: &mut Graph,
    probs: TensorId,
    target: &crate::Tensor,
    reduction: TemporalReduction,
) -> Result<TensorId> {
    let cell_mean = g.bce(probs, target)?;
    Ok(match reduction {
        TemporalReduction::Mean => cell_mean,
        TemporalReduction::Sum => g.scale(cell_mean, target.rows() as f64),
    })
}

/// Video-level objective for the background-extended head: logits averaged
/// over segments and modalities, squashed, scored against the weak label
/// extended with an always-on background bit.
fn ave_weak(g: &mut Graph, h: &ForwardHandles, weak: &WeakLabel) -> Result<LossParts> {
    let target = weak.extended(true).to_tensor();
    let sum_audio = g.sum_rows(h.logits_audio)?;
    let sum_visual = g.sum_rows(h.logits_visual)?;
    let summed = g.add(sum_audio, sum_visual)?;
    let mean = g.scale(summed, 1.0 / (2.0 * h.segments as f64));
    let squashed = g.sigmoid(mean);
    let video = g.bce(squashed, &target)?;
    Ok(LossParts {
        total: video,
        video: Some(video),
        audio: None,
        visual: None,
    })
}

/// Per-segment objective for the background-extended head. Targets gain a
/// background column that is on exactly where no real class is, and the two
/// modality terms replace the video-level term entirely.
fn ave_valor(
    g: &mut Graph,
    h: &ForwardHandles,
    dense: &DenseLabels,
    reduction: TemporalReduction,
) -> Result<LossParts> {
    let extended = extend_background(dense);
    let audio = segment_term(g, h.probs_audio, &extended.audio.to_tensor(), reduction)?;
    let visual = segment_term(g, h.probs_visual, &extended.visual.to_tensor(), reduction)?;
    let total = g.add(audio, visual)?;
    Ok(LossParts {
        total,
        video: None,
        audio: Some(audio),
        visual: Some(visual),
    })
}
