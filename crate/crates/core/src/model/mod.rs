//! Two-stream attention model over per-segment audio and visual features.
//!
//! Each stream is projected to a shared hidden width, refined by stacked
//! layers of self- plus cross-attention with a feed-forward block, and read
//! out by a shared per-segment classifier. Attention-weighted pooling turns
//! the per-segment probabilities into per-modality and per-video ones: a
//! temporal softmax per modality and class, then a two-way modality softmax.
//!
//! Parameters live in a [`ParamSet`]: a flat, deterministically ordered list
//! of named tensors. The order is the contract for optimizer state and for
//! the checkpoint format in [`checkpoint`].

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};
pub use forward::{
    build_forward, export_model_logits, forward, han_layer, ForwardHandles, ForwardOutput,
};

use crate::error::{Error, Result};
use crate::tensor::graph::{AttnParams, Graph, TensorId};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Architecture hyper-parameters. `num_classes` counts real event classes;
/// with `ave_mode` every head gains one extra background column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_classes: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub audio_feat_dim: usize,
    pub visual_feat_dim: usize,
    pub ave_mode: bool,
    /// Normalize before attention/FFN instead of after the residual adds.
    pub pre_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::standard()
    }
}

impl ModelConfig {
    /// Wide single-layer preset.
    pub fn standard() -> Self {
        ModelConfig {
            hidden_dim: 512,
            num_layers: 1,
            num_classes: 25,
            heads: 4,
            ffn_dim: 1024,
            audio_feat_dim: 128,
            visual_feat_dim: 512,
            ave_mode: false,
            pre_norm: false,
        }
    }

    /// Thinner four-layer preset; ffn width chosen so the trainable
    /// parameter count stays within 2% of [`ModelConfig::standard`].
    pub fn variant() -> Self {
        ModelConfig {
            hidden_dim: 256,
            num_layers: 4,
            heads: 4,
            ffn_dim: 576,
            ..ModelConfig::standard()
        }
    }

    /// Standard architecture with a background column on every head, for
    /// corpora where each segment carries at most one event.
    pub fn ave() -> Self {
        ModelConfig { num_classes: 28, ave_mode: true, ..ModelConfig::standard() }
    }

    /// Columns produced by the classifier and pooling heads.
    pub fn logit_cols(&self) -> usize {
        self.num_classes + usize::from(self.ave_mode)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_classes", self.num_classes),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("audio_feat_dim", self.audio_feat_dim),
            ("visual_feat_dim", self.visual_feat_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model {name} must be positive")));
            }
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide hidden_dim {}",
                self.heads, self.hidden_dim
            )));
        }
        Ok(())
    }

    /// Total trainable scalars across the layout.
    pub fn param_count(&self) -> usize {
        layout(self).iter().map(|(_, shape)| shape.iter().product::<usize>()).sum()
    }

    /// Renders as `key = value` lines, one per field.
    pub fn to_text(&self) -> String {
        format!(
            "hidden_dim = {}\nnum_layers = {}\nnum_classes = {}\nheads = {}\n\
             ffn_dim = {}\naudio_feat_dim = {}\nvisual_feat_dim = {}\n\
             ave_mode = {}\npre_norm = {}\n",
            self.hidden_dim,
            self.num_layers,
            self.num_classes,
            self.heads,
            self.ffn_dim,
            self.audio_feat_dim,
            self.visual_feat_dim,
            self.ave_mode,
            self.pre_norm,
        )
    }

    /// Parses `key = value` lines over the standard preset's defaults.
    /// `#` starts a comment; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::standard();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse {
                    path: "<model config>".into(),
                    line: Some(ln + 1),
                    msg: format!("expected key = value, got {raw:?}"),
                }
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |msg: String| Error::Parse {
                path: "<model config>".into(),
                line: Some(ln + 1),
                msg,
            };
            let parse_usize = || -> Result<usize> {
                value.parse().map_err(|_| bad(format!("bad integer for {key}: {value:?}")))
            };
            match key {
                "hidden_dim" => cfg.hidden_dim = parse_usize()?,
                "num_layers" => cfg.num_layers = parse_usize()?,
                "num_classes" => cfg.num_classes = parse_usize()?,
                "heads" => cfg.heads = parse_usize()?,
                "ffn_dim" => cfg.ffn_dim = parse_usize()?,
                "audio_feat_dim" => cfg.audio_feat_dim = parse_usize()?,
                "visual_feat_dim" => cfg.visual_feat_dim = parse_usize()?,
                "ave_mode" => {
                    cfg.ave_mode = value
                        .parse()
                        .map_err(|_| bad(format!("bad bool for ave_mode: {value:?}")))?
                }
                "pre_norm" => {
                    cfg.pre_norm = value
                        .parse()
                        .map_err(|_| bad(format!("bad bool for pre_norm: {value:?}")))?
                }
                other => return Err(bad(format!("unknown model config key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) const MODALITIES: [&str; 2] = ["audio", "visual"];

/// Ordered (name, shape) pairs for every trainable tensor of a config.
/// This order is load-bearing: initialization draws, optimizer moments, and
/// checkpoint blobs all follow it.
pub fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.hidden_dim;
    let h = config.ffn_dim;
    let k = config.logit_cols();
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    out.push(("proj.audio.w".into(), vec![config.audio_feat_dim, d]));
    out.push(("proj.audio.b".into(), vec![d]));
    out.push(("proj.visual.w".into(), vec![config.visual_feat_dim, d]));
    out.push(("proj.visual.b".into(), vec![d]));
    for l in 0..config.num_layers {
        for m in MODALITIES {
            for block in ["self", "cross"] {
                for w in ["wq", "wk", "wv", "wo"] {
                    out.push((format!("layer{l}.{m}.{block}.{w}"), vec![d, d]));
                }
                out.push((format!("layer{l}.{m}.{block}.bo"), vec![d]));
            }
            out.push((format!("layer{l}.{m}.norm1.gain"), vec![d]));
            out.push((format!("layer{l}.{m}.norm1.bias"), vec![d]));
            out.push((format!("layer{l}.{m}.norm2.gain"), vec![d]));
            out.push((format!("layer{l}.{m}.norm2.bias"), vec![d]));
            out.push((format!("layer{l}.{m}.ffn.w1"), vec![d, h]));
            out.push((format!("layer{l}.{m}.ffn.b1"), vec![h]));
            out.push((format!("layer{l}.{m}.ffn.w2"), vec![h, d]));
            out.push((format!("layer{l}.{m}.ffn.b2"), vec![d]));
        }
    }
    out.push(("head.classify.w".into(), vec![d, k]));
    out.push(("head.classify.b".into(), vec![k]));
    for m in MODALITIES {
        out.push((format!("head.select.{m}.w"), vec![d, k]));
        out.push((format!("head.select.{m}.b"), vec![k]));
    }
    out.push(("head.modality.w".into(), vec![d, k]));
    out.push(("head.modality.b".into(), vec![k]));
    out
}

/// Named model parameters in layout order.
#[derive(Debug, Clone)]
pub struct ParamSet {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    /// Fresh parameters from one sequential random stream: rank-2 weights
    /// are uniform with a fan-in bound sqrt(6 / rows), norm gains start at
    /// one, all biases at zero. Same (config, seed) gives identical bits.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in layout(config) {
            let t = if shape.len() == 2 {
                let bound = (6.0 / shape[0] as f64).sqrt();
                let data =
                    (0..shape[0] * shape[1]).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::from_vec(shape, data)?
            } else if name.ends_with(".gain") {
                Tensor::full(shape, 1.0)
            } else {
                Tensor::zeros(shape)
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(ParamSet { config: config.clone(), names, tensors })
    }

    /// Rebuilds a set from stored tensors, checking them against the
    /// config's layout name-by-name and shape-by-shape.
    pub fn from_parts(
        config: ModelConfig,
        names: Vec<String>,
        tensors: Vec<Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        let expect = layout(&config);
        if names.len() != expect.len() || tensors.len() != expect.len() {
            return Err(Error::Validation(format!(
                "parameter set has {} tensors, layout expects {}",
                tensors.len().min(names.len()),
                expect.len()
            )));
        }
        for (i, (name, shape)) in expect.iter().enumerate() {
            if &names[i] != name {
                return Err(Error::Validation(format!(
                    "parameter {i} is named {:?}, layout expects {name:?}",
                    names[i]
                )));
            }
            if tensors[i].shape() != shape.as_slice() {
                return Err(Error::dim(
                    format!("parameter {name}"),
                    format!("{shape:?}"),
                    format!("{:?}", tensors[i].shape()),
                ));
            }
        }
        Ok(ParamSet { config, names, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Registers every tensor on a graph, as gradient-accumulating leaves
    /// when `trainable`, and returns handles bound to this set's layout.
    pub fn bind<'p>(&'p self, g: &mut Graph, trainable: bool) -> BoundParams<'p> {
        let ids = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.leaf(t.clone().with_grad())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        BoundParams { set: self, ids }
    }

    /// Binds pre-registered graph ids (one per layout slot, in order).
    /// Used when an external harness owns leaf registration.
    pub fn bind_existing<'p>(&'p self, ids: &[TensorId]) -> Result<BoundParams<'p>> {
        if ids.len() != self.tensors.len() {
            return Err(Error::Usage(format!(
                "bind_existing got {} ids for {} parameters",
                ids.len(),
                self.tensors.len()
            )));
        }
        Ok(BoundParams { set: self, ids: ids.to_vec() })
    }
}

/// A [`ParamSet`] registered on some graph: layout names resolved to ids.
pub struct BoundParams<'p> {
    set: &'p ParamSet,
    ids: Vec<TensorId>,
}

impl BoundParams<'_> {
    pub fn config(&self) -> &ModelConfig {
        &self.set.config
    }

    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }

    /// Internal names always resolve; a miss is a layout bug.
    pub(crate) fn id(&self, name: &str) -> TensorId {
        let i = self
            .set
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        self.ids[i]
    }

    pub(crate) fn attn(&self, layer: usize, modality: &str, block: &str) -> AttnParams {
        AttnParams {
            wq: self.id(&format!("layer{layer}.{modality}.{block}.wq")),
            wk: self.id(&format!("layer{layer}.{modality}.{block}.wk")),
            wv: self.id(&format!("layer{layer}.{modality}.{block}.wv")),
            wo: self.id(&format!("layer{layer}.{modality}.{block}.wo")),
            bo: self.id(&format!("layer{layer}.{modality}.{block}.bo")),
        }
    }
}
