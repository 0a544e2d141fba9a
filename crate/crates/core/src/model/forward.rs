//! Forward pass: projection, stacked attention layers, classifier, pooling.

use super::{BoundParams, ModelConfig, ParamSet};
use crate::corpus::VideoSample;
use crate::error::{Error, Result};
use crate::labels::TeacherLogits;
use crate::tensor::graph::{multi_head_attention, Graph, TensorId};
use crate::tensor::Tensor;
use rayon::prelude::*;

/// Graph handles for every model output, usable as loss inputs.
#[derive(Debug, Clone, Copy)]
pub struct ForwardHandles {
    pub segments: usize,
    pub logit_cols: usize,
    pub logits_audio: TensorId,
    pub logits_visual: TensorId,
    pub probs_audio: TensorId,
    pub probs_visual: TensorId,
    pub alpha_audio: TensorId,
    pub alpha_visual: TensorId,
    pub beta_audio: TensorId,
    pub beta_visual: TensorId,
    pub modality_audio: TensorId,
    pub modality_visual: TensorId,
    pub video: TensorId,
}

/// Detached forward results. Dense tensors are [T, K]; pooled ones are [K].
///
/// `modality_audio`/`modality_visual` are convex combinations of per-segment
/// probabilities and stay within [0, 1]. `video` combines both streams with
/// weights that sum to one only on average: per class it is bounded by the
/// two modality values' sum (so by two), and the loss clamp absorbs any
/// excess over one.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits_audio: Tensor,
    pub logits_visual: Tensor,
    pub probs_audio: Tensor,
    pub probs_visual: Tensor,
    pub alpha_audio: Tensor,
    pub alpha_visual: Tensor,
    pub beta_audio: Tensor,
    pub beta_visual: Tensor,
    pub modality_audio: Tensor,
    pub modality_visual: Tensor,
    pub video: Tensor,
}

/// One attention layer over both streams.
///
/// Post-norm (default): each stream adds its self- and cross-attention to
/// the input, is normalized, and is normalized again around the FFN:
/// `h = LN1(f + self(f) + cross(f, other)); out = LN2(h + FFN(h))`.
/// Pre-norm: attention and FFN read normalized copies instead, residuals
/// stay unnormalized: `t = f + self(n) + cross(n, n_other); out = t +
/// FFN(LN2(t))` with `n = LN1(f)`.
pub fn han_layer(
    g: &mut Graph,
    audio: TensorId,
    visual: TensorId,
    p: &BoundParams<'_>,
    layer: usize,
) -> Result<(TensorId, TensorId)> {
    let cfg = p.config();
    let heads = cfg.heads;
    let mut out = [audio, visual];
    let inputs = [audio, visual];
    if cfg.pre_norm {
        let mut normed = [audio, visual];
        for (i, m) in super::MODALITIES.iter().enumerate() {
            let gain = p.id(&format!("layer{layer}.{m}.norm1.gain"));
            let bias = p.id(&format!("layer{layer}.{m}.norm1.bias"));
            normed[i] = g.layer_norm(inputs[i], gain, bias)?;
        }
        for (i, m) in super::MODALITIES.iter().enumerate() {
            let own = normed[i];
            let other = normed[1 - i];
            let sa = multi_head_attention(g, own, own, own, heads, &p.attn(layer, m, "self"))?;
            let ca = multi_head_attention(g, own, other, other, heads, &p.attn(layer, m, "cross"))?;
            let t = g.add_n(&[inputs[i], sa, ca])?;
            let gain2 = p.id(&format!("layer{layer}.{m}.norm2.gain"));
            let bias2 = p.id(&format!("layer{layer}.{m}.norm2.bias"));
            let n2 = g.layer_norm(t, gain2, bias2)?;
            let f = ffn(g, n2, p, layer, m)?;
            out[i] = g.add(t, f)?;
        }
    } else {
        let mut hidden = [audio, visual];
        for (i, m) in super::MODALITIES.iter().enumerate() {
            let own = inputs[i];
            let other = inputs[1 - i];
            let sa = multi_head_attention(g, own, own, own, heads, &p.attn(layer, m, "self"))?;
            let ca = multi_head_attention(g, own, other, other, heads, &p.attn(layer, m, "cross"))?;
            let t = g.add_n(&[own, sa, ca])?;
            let gain = p.id(&format!("layer{layer}.{m}.norm1.gain"));
            let bias = p.id(&format!("layer{layer}.{m}.norm1.bias"));
            hidden[i] = g.layer_norm(t, gain, bias)?;
        }
        for (i, m) in super::MODALITIES.iter().enumerate() {
            let h = hidden[i];
            let f = ffn(g, h, p, layer, m)?;
            let res = g.add(h, f)?;
            let gain2 = p.id(&format!("layer{layer}.{m}.norm2.gain"));
            let bias2 = p.id(&format!("layer{layer}.{m}.norm2.bias"));
            out[i] = g.layer_norm(res, gain2, bias2)?;
        }
    }
    Ok((out[0], out[1]))
}

fn ffn(
    g: &mut Graph,
    x: TensorId,
    p: &BoundParams<'_>,
    layer: usize,
    modality: &str,
) -> Result<TensorId> {
    let w1 = p.id(&format!("layer{layer}.{modality}.ffn.w1"));
    let b1 = p.id(&format!("layer{layer}.{modality}.ffn.b1"));
    let w2 = p.id(&format!("layer{layer}.{modality}.ffn.w2"));
    let b2 = p.id(&format!("layer{layer}.{modality}.ffn.b2"));
    let a = g.matmul(x, w1)?;
    let a = g.add_row_bias(a, b1)?;
    let a = g.relu(a);
    let b = g.matmul(a, w2)?;
    g.add_row_bias(b, b2)
}

/// Builds the full forward computation for one video on `g` and returns
/// handles to every output. Features enter the graph as constants.
pub fn build_forward(
    g: &mut Graph,
    p: &BoundParams<'_>,
    feats_audio: &Tensor,
    feats_visual: &Tensor,
) -> Result<ForwardHandles> {
    let cfg = p.config();
    check_features(cfg, feats_audio, feats_visual)?;
    let t = feats_audio.rows();
    let k = cfg.logit_cols();

    let fa = g.constant(feats_audio.clone());
    let fv = g.constant(feats_visual.clone());
    let wa = p.id("proj.audio.w");
    let ba = p.id("proj.audio.b");
    let wv = p.id("proj.visual.w");
    let bv = p.id("proj.visual.b");
    let mut audio = g.matmul(fa, wa)?;
    audio = g.add_row_bias(audio, ba)?;
    let mut visual = g.matmul(fv, wv)?;
    visual = g.add_row_bias(visual, bv)?;

    for layer in 0..cfg.num_layers {
        (audio, visual) = han_layer(g, audio, visual, p, layer)?;
    }

    let wc = p.id("head.classify.w");
    let bc = p.id("head.classify.b");
    let classify = |g: &mut Graph, f: TensorId| -> Result<TensorId> {
        let z = g.matmul(f, wc)?;
        g.add_row_bias(z, bc)
    };
    let logits_audio = classify(g, audio)?;
    let logits_visual = classify(g, visual)?;
    let probs_audio = g.sigmoid(logits_audio);
    let probs_visual = g.sigmoid(logits_visual);

    // Temporal pooling: per-class softmax over segments, then a weighted
    // sum of the per-segment probabilities.
    let select = |g: &mut Graph, f: TensorId, m: &str| -> Result<TensorId> {
        let s = g.matmul(f, p.id(&format!("head.select.{m}.w")))?;
        let s = g.add_row_bias(s, p.id(&format!("head.select.{m}.b")))?;
        g.softmax(s, 0)
    };
    let alpha_audio = select(g, audio, "audio")?;
    let alpha_visual = select(g, visual, "visual")?;
    let weighted_audio = g.mul(alpha_audio, probs_audio)?;
    let weighted_visual = g.mul(alpha_visual, probs_visual)?;
    let modality_audio = g.sum_rows(weighted_audio)?;
    let modality_visual = g.sum_rows(weighted_visual)?;

    // Modality pooling: a shared head scores both streams and a two-way
    // softmax across the stacked scores splits the weight per (t, class).
    let wm = p.id("head.modality.w");
    let bm = p.id("head.modality.b");
    let score = |g: &mut Graph, f: TensorId| -> Result<TensorId> {
        let s = g.matmul(f, wm)?;
        g.add_row_bias(s, bm)
    };
    let score_audio = score(g, audio)?;
    let score_visual = score(g, visual)?;
    let stacked = g.stack2(score_audio, score_visual)?;
    let split = g.softmax(stacked, 0)?;
    let beta_audio = g.unstack2(split, 0)?;
    let beta_visual = g.unstack2(split, 1)?;
    let video_audio = g.mul(beta_audio, weighted_audio)?;
    let video_visual = g.mul(beta_visual, weighted_visual)?;
    let combined = g.add(video_audio, video_visual)?;
    let video = g.sum_rows(combined)?;

    Ok(ForwardHandles {
        segments: t,
        logit_cols: k,
        logits_audio,
        logits_visual,
        probs_audio,
        probs_visual,
        alpha_audio,
        alpha_visual,
        beta_audio,
        beta_visual,
        modality_audio,
        modality_visual,
        video,
    })
}

fn check_features(cfg: &ModelConfig, feats_audio: &Tensor, feats_visual: &Tensor) -> Result<()> {
    for (name, f, dim) in [
        ("audio features", feats_audio, cfg.audio_feat_dim),
        ("visual features", feats_visual, cfg.visual_feat_dim),
    ] {
        if f.rank() != 2 || f.cols() != dim {
            return Err(Error::dim(name, format!("[T, {dim}]"), format!("{:?}", f.shape())));
        }
    }
    if feats_audio.rows() != feats_visual.rows() {
        return Err(Error::dim(
            "feature segments",
            format!("{}", feats_audio.rows()),
            format!("{}", feats_visual.rows()),
        ));
    }
    if feats_audio.rows() == 0 {
        return Err(Error::Validation("forward needs at least one segment".into()));
    }
    Ok(())
}

/// Evaluation-mode forward: runs on a throwaway graph, no gradients.
pub fn forward(
    params: &ParamSet,
    feats_audio: &Tensor,
    feats_visual: &Tensor,
) -> Result<ForwardOutput> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let h = build_forward(&mut g, &bound, feats_audio, feats_visual)?;
    let take = |id: TensorId| g.value(id).clone();
    Ok(ForwardOutput {
        logits_audio: take(h.logits_audio),
        logits_visual: take(h.logits_visual),
        probs_audio: take(h.probs_audio),
        probs_visual: take(h.probs_visual),
        alpha_audio: take(h.alpha_audio),
        alpha_visual: take(h.alpha_visual),
        beta_audio: take(h.beta_audio),
        beta_visual: take(h.beta_visual),
        modality_audio: take(h.modality_audio),
        modality_visual: take(h.modality_visual),
        video: take(h.video),
    })
}

/// Runs the model over a corpus and packages its per-segment logits in the
/// external-teacher container, rounded to serialized (f32) precision so the
/// in-memory values match what a consumer reads back from disk.
pub fn export_model_logits(
    params: &ParamSet,
    videos: &[VideoSample],
) -> Result<Vec<TeacherLogits>> {
    videos
        .par_iter()
        .map(|v| {
            let out = forward(params, &v.feats_audio, &v.feats_visual)?;
            TeacherLogits::new(v.video_id.clone(), snap_f32(&out.logits_visual), snap_f32(&out.logits_audio))
        })
        .collect()
}

fn snap_f32(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| v as f32 as f64).collect();
    Tensor::from_vec(t.shape().to_vec(), data).expect("shape preserved")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{elaborate, ElaborateOpts, Thresholds, WeakLabel};
    use crate::tensor::gradcheck::check_loss_grads;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            hidden_dim: 8,
            num_layers: 2,
            num_classes: 3,
            heads: 2,
            ffn_dim: 12,
            audio_feat_dim: 5,
            visual_feat_dim: 7,
            ave_mode: false,
            pre_norm: false,
        }
    }

    fn random_feats(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Tensor {
        Tensor::matrix(t, d, (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    // ----- independent scalar reference -------------------------------

    type Mat = Vec<Vec<f64>>;

    fn mat_of(t: &Tensor) -> Mat {
        (0..t.rows()).map(|i| (0..t.cols()).map(|j| t.at(i, j)).collect()).collect()
    }

    fn matmul_ref(a: &Mat, b: &Mat) -> Mat {
        let (n, k, m) = (a.len(), b.len(), b[0].len());
        let mut out = vec![vec![0.0; m]; n];
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i][p] * b[p][j];
                }
                out[i][j] = s;
            }
        }
        out
    }

    fn add_bias_ref(a: &Mat, b: &[f64]) -> Mat {
        a.iter().map(|row| row.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
    }

    fn softmax_row_ref(row: &[f64]) -> Vec<f64> {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.iter().map(|e| e / sum).collect()
    }

    fn attention_ref(p: &ParamSet, prefix: &str, q: &Mat, kv: &Mat, heads: usize) -> Mat {
        let get = |suffix: &str| mat_of(p.get(&format!("{prefix}.{suffix}")).unwrap());
        let bo: Vec<f64> = p.get(&format!("{prefix}.bo")).unwrap().data().to_vec();
        let (qp, kp, vp) =
            (matmul_ref(q, &get("wq")), matmul_ref(kv, &get("wk")), matmul_ref(kv, &get("wv")));
        let d = qp[0].len();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut merged = vec![vec![0.0; d]; q.len()];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..q.len() {
                let scores: Vec<f64> = (0..kv.len())
                    .map(|j| {
                        cols.clone().map(|c| qp[i][c] * kp[j][c]).sum::<f64>() * scale
                    })
                    .collect();
                let w = softmax_row_ref(&scores);
                for (ci, c) in cols.clone().enumerate() {
                    merged[i][c] = (0..kv.len()).map(|j| w[j] * vp[j][h * dh + ci]).sum();
                }
            }
        }
        add_bias_ref(&matmul_ref(&merged, &get("wo")), &bo)
    }

    fn layer_norm_ref(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
        x.iter()
            .map(|row| {
                let d = row.len() as f64;
                let mean = row.iter().sum::<f64>() / d;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                let inv = 1.0 / (var + 1e-5).sqrt();
                row.iter()
                    .zip(gain.iter().zip(bias))
                    .map(|(v, (g, b))| (v - mean) * inv * g + b)
                    .collect()
            })
            .collect()
    }

    fn ffn_ref(p: &ParamSet, prefix: &str, x: &Mat) -> Mat {
        let w1 = mat_of(p.get(&format!("{prefix}.w1")).unwrap());
        let b1: Vec<f64> = p.get(&format!("{prefix}.b1")).unwrap().data().to_vec();
        let w2 = mat_of(p.get(&format!("{prefix}.w2")).unwrap());
        let b2: Vec<f64> = p.get(&format!("{prefix}.b2")).unwrap().data().to_vec();
        let mut hidden = add_bias_ref(&matmul_ref(x, &w1), &b1);
        for row in &mut hidden {
            for v in row {
                *v = v.max(0.0);
            }
        }
        add_bias_ref(&matmul_ref(&hidden, &w2), &b2)
    }

    fn add_ref(a: &Mat, b: &Mat) -> Mat {
        a.iter()
            .zip(b)
            .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect())
            .collect()
    }

    struct RefOutput {
        logits: [Mat; 2],
        probs: [Mat; 2],
        alpha: [Mat; 2],
        beta: [Mat; 2],
        modality: [Vec<f64>; 2],
        video: Vec<f64>,
    }

    /// Plain-loop reimplementation of the whole forward pass; shares no
    /// code with the graph path beyond the parameter tensors themselves.
    fn reference_forward(p: &ParamSet, feats_audio: &Tensor, feats_visual: &Tensor) -> RefOutput {
        let cfg = p.config();
        let vec_of = |name: &str| -> Vec<f64> { p.get(name).unwrap().data().to_vec() };
        let mut streams = [
            add_bias_ref(
                &matmul_ref(&mat_of(feats_audio), &mat_of(p.get("proj.audio.w").unwrap())),
                &vec_of("proj.audio.b"),
            ),
            add_bias_ref(
                &matmul_ref(&mat_of(feats_visual), &mat_of(p.get("proj.visual.w").unwrap())),
                &vec_of("proj.visual.b"),
            ),
        ];
        for l in 0..cfg.num_layers {
            let names = ["audio", "visual"];
            if cfg.pre_norm {
                let normed: Vec<Mat> = (0..2)
                    .map(|i| {
                        layer_norm_ref(
                            &streams[i],
                            &vec_of(&format!("layer{l}.{}.norm1.gain", names[i])),
                            &vec_of(&format!("layer{l}.{}.norm1.bias", names[i])),
                        )
                    })
                    .collect();
                let mut next = streams.clone();
                for i in 0..2 {
                    let m = names[i];
                    let sa = attention_ref(p, &format!("layer{l}.{m}.self"), &normed[i], &normed[i], cfg.heads);
                    let ca = attention_ref(p, &format!("layer{l}.{m}.cross"), &normed[i], &normed[1 - i], cfg.heads);
                    let t = add_ref(&add_ref(&streams[i], &sa), &ca);
                    let n2 = layer_norm_ref(
                        &t,
                        &vec_of(&format!("layer{l}.{m}.norm2.gain")),
                        &vec_of(&format!("layer{l}.{m}.norm2.bias")),
                    );
                    next[i] = add_ref(&t, &ffn_ref(p, &format!("layer{l}.{m}.ffn"), &n2));
                }
                streams = next;
            } else {
                let mut hidden = streams.clone();
                for i in 0..2 {
                    let m = names[i];
                    let sa = attention_ref(p, &format!("layer{l}.{m}.self"), &streams[i], &streams[i], cfg.heads);
                    let ca = attention_ref(p, &format!("layer{l}.{m}.cross"), &streams[i], &streams[1 - i], cfg.heads);
                    let t = add_ref(&add_ref(&streams[i], &sa), &ca);
                    hidden[i] = layer_norm_ref(
                        &t,
                        &vec_of(&format!("layer{l}.{m}.norm1.gain")),
                        &vec_of(&format!("layer{l}.{m}.norm1.bias")),
                    );
                }
                for i in 0..2 {
                    let m = names[i];
                    let f = ffn_ref(p, &format!("layer{l}.{m}.ffn"), &hidden[i]);
                    streams[i] = layer_norm_ref(
                        &add_ref(&hidden[i], &f),
                        &vec_of(&format!("layer{l}.{m}.norm2.gain")),
                        &vec_of(&format!("layer{l}.{m}.norm2.bias")),
                    );
                }
            }
        }
        let t = streams[0].len();
        let k = cfg.logit_cols();
        let wc = mat_of(p.get("head.classify.w").unwrap());
        let bc = vec_of("head.classify.b");
        let logits: Vec<Mat> = (0..2).map(|i| add_bias_ref(&matmul_ref(&streams[i], &wc), &bc)).collect();
        let probs: Vec<Mat> = logits
            .iter()
            .map(|m| m.iter().map(|r| r.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect()).collect())
            .collect();
        let mut alpha = Vec::new();
        for (i, m) in ["audio", "visual"].iter().enumerate() {
            let s = add_bias_ref(
                &matmul_ref(&streams[i], &mat_of(p.get(&format!("head.select.{m}.w")).unwrap())),
                &vec_of(&format!("head.select.{m}.b")),
            );
            // Column-wise softmax over segments.
            let mut a = vec![vec![0.0; k]; t];
            for c in 0..k {
                let col: Vec<f64> = (0..t).map(|r| s[r][c]).collect();
                let sm = softmax_row_ref(&col);
                for r in 0..t {
                    a[r][c] = sm[r];
                }
            }
            alpha.push(a);
        }
        let wm = mat_of(p.get("head.modality.w").unwrap());
        let bm = vec_of("head.modality.b");
        let scores: Vec<Mat> = (0..2).map(|i| add_bias_ref(&matmul_ref(&streams[i], &wm), &bm)).collect();
        let mut beta = vec![vec![vec![0.0; k]; t]; 2];
        for r in 0..t {
            for c in 0..k {
                let sm = softmax_row_ref(&[scores[0][r][c], scores[1][r][c]]);
                beta[0][r][c] = sm[0];
                beta[1][r][c] = sm[1];
            }
        }
        let mut modality = [vec![0.0; k], vec![0.0; k]];
        let mut video = vec![0.0; k];
        for i in 0..2 {
            for r in 0..t {
                for c in 0..k {
                    modality[i][c] += alpha[i][r][c] * probs[i][r][c];
                    video[c] += beta[i][r][c] * alpha[i][r][c] * probs[i][r][c];
                }
            }
        }
        RefOutput {
            logits: [logits[0].clone(), logits[1].clone()],
            probs: [probs[0].clone(), probs[1].clone()],
            alpha: [alpha[0].clone(), alpha[1].clone()],
            beta: [beta[0].clone(), beta[1].clone()],
            modality,
            video,
        }
    }

    fn assert_close_mat(got: &Tensor, want: &Mat, tol: f64, what: &str) {
        assert_eq!(got.rows(), want.len(), "{what} rows");
        for i in 0..got.rows() {
            for j in 0..got.cols() {
                let (a, b) = (got.at(i, j), want[i][j]);
                assert!(
                    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0),
                    "{what}[{i},{j}]: {a} vs {b}"
                );
            }
        }
    }

    fn assert_close_vec(got: &Tensor, want: &[f64], tol: f64, what: &str) {
        assert_eq!(got.numel(), want.len(), "{what} len");
        for (j, (&a, &b)) in got.data().iter().zip(want).enumerate() {
            assert!(
                (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0),
                "{what}[{j}]: {a} vs {b}"
            );
        }
    }

    #[test]
    fn forward_matches_scalar_reference_both_norm_orders() {
        for pre_norm in [false, true] {
            let cfg = ModelConfig { pre_norm, ..tiny_config() };
            let params = ParamSet::init(&cfg, 11).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let fa = random_feats(&mut rng, 3, cfg.audio_feat_dim);
            let fv = random_feats(&mut rng, 3, cfg.visual_feat_dim);
            let got = forward(&params, &fa, &fv).unwrap();
            let want = reference_forward(&params, &fa, &fv);
            let tol = 1e-6;
            assert_close_mat(&got.logits_audio, &want.logits[0], tol, "logits_audio");
            assert_close_mat(&got.logits_visual, &want.logits[1], tol, "logits_visual");
            assert_close_mat(&got.probs_audio, &want.probs[0], tol, "probs_audio");
            assert_close_mat(&got.probs_visual, &want.probs[1], tol, "probs_visual");
            assert_close_mat(&got.alpha_audio, &want.alpha[0], tol, "alpha_audio");
            assert_close_mat(&got.alpha_visual, &want.alpha[1], tol, "alpha_visual");
            assert_close_mat(&got.beta_audio, &want.beta[0], tol, "beta_audio");
            assert_close_mat(&got.beta_visual, &want.beta[1], tol, "beta_visual");
            assert_close_vec(&got.modality_audio, &want.modality[0], tol, "modality_audio");
            assert_close_vec(&got.modality_visual, &want.modality[1], tol, "modality_visual");
            assert_close_vec(&got.video, &want.video, tol, "video");
        }
    }

    #[test]
    fn pooling_identity_recomputed_from_own_outputs() {
        let cfg = tiny_config();
        let params = ParamSet::init(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let out = forward(
            &params,
            &random_feats(&mut rng, 4, cfg.audio_feat_dim),
            &random_feats(&mut rng, 4, cfg.visual_feat_dim),
        )
        .unwrap();
        let k = cfg.logit_cols();
        for c in 0..k {
            let mut pa = 0.0;
            let mut pv = 0.0;
            let mut p = 0.0;
            for t in 0..4 {
                pa += out.alpha_audio.at(t, c) * out.probs_audio.at(t, c);
                pv += out.alpha_visual.at(t, c) * out.probs_visual.at(t, c);
                p += out.beta_audio.at(t, c) * out.alpha_audio.at(t, c) * out.probs_audio.at(t, c)
                    + out.beta_visual.at(t, c)
                        * out.alpha_visual.at(t, c)
                        * out.probs_visual.at(t, c);
            }
            assert!((out.modality_audio.data()[c] - pa).abs() < 1e-6);
            assert!((out.modality_visual.data()[c] - pv).abs() < 1e-6);
            assert!((out.video.data()[c] - p).abs() < 1e-6);
        }
    }

    #[test]
    fn pooling_invariants_hold_over_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for draw in 0..250 {
            let heads = [1, 2, 4][draw % 3];
            let cfg = ModelConfig {
                hidden_dim: 8,
                num_layers: 1 + draw % 2,
                num_classes: 1 + draw % 4,
                heads,
                ffn_dim: 10,
                audio_feat_dim: 4,
                visual_feat_dim: 6,
                ave_mode: draw % 5 == 0,
                pre_norm: draw % 7 == 0,
            };
            let params = ParamSet::init(&cfg, draw as u64).unwrap();
            let t = 1 + draw % 5;
            let out = forward(
                &params,
                &random_feats(&mut rng, t, cfg.audio_feat_dim),
                &random_feats(&mut rng, t, cfg.visual_feat_dim),
            )
            .unwrap();
            let k = cfg.logit_cols();
            for c in 0..k {
                let sa: f64 = (0..t).map(|r| out.alpha_audio.at(r, c)).sum();
                let sv: f64 = (0..t).map(|r| out.alpha_visual.at(r, c)).sum();
                assert!((sa - 1.0).abs() < 1e-5, "draw {draw}: alpha audio sums to {sa}");
                assert!((sv - 1.0).abs() < 1e-5, "draw {draw}: alpha visual sums to {sv}");
            }
            for r in 0..t {
                for c in 0..k {
                    let b = out.beta_audio.at(r, c) + out.beta_visual.at(r, c);
                    assert!((b - 1.0).abs() < 1e-5, "draw {draw}: beta sums to {b}");
                }
            }
            for probs in [&out.probs_audio, &out.probs_visual] {
                assert!(probs.data().iter().all(|p| (0.0..=1.0).contains(p)));
            }
            // Per-modality pooling is a convex combination, so it stays in
            // [0, 1] up to summation rounding. The video combination's
            // weights sum to one only on average: its sharp per-class bound
            // is the sum of the two modality values (at most two).
            for pooled in [&out.modality_audio, &out.modality_visual] {
                for &p in pooled.data() {
                    assert!((-1e-12..=1.0 + 1e-12).contains(&p), "draw {draw}: pooled {p}");
                }
            }
            for c in 0..k {
                let v = out.video.data()[c];
                let cap = out.modality_audio.data()[c] + out.modality_visual.data()[c];
                assert!(
                    -1e-12 <= v && v <= cap + 1e-12,
                    "draw {draw}: video {v} above modality sum {cap}"
                );
            }
        }
    }

    #[test]
    fn single_segment_collapses_pooling() {
        let cfg = tiny_config();
        let params = ParamSet::init(&cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let out = forward(
            &params,
            &random_feats(&mut rng, 1, cfg.audio_feat_dim),
            &random_feats(&mut rng, 1, cfg.visual_feat_dim),
        )
        .unwrap();
        for c in 0..cfg.logit_cols() {
            assert_eq!(out.alpha_audio.at(0, c), 1.0);
            assert_eq!(out.alpha_visual.at(0, c), 1.0);
            assert_eq!(out.modality_audio.data()[c], out.probs_audio.at(0, c));
            assert_eq!(out.modality_visual.data()[c], out.probs_visual.at(0, c));
        }
        assert!(out.logits_audio.is_finite() && out.logits_visual.is_finite());
    }

    #[test]
    fn identical_streams_split_modality_weight_evenly() {
        // Same features, same projection, and identical per-modality
        // parameters force the two streams equal, so the two-way softmax
        // must sit at exactly one half.
        let cfg = ModelConfig { audio_feat_dim: 6, visual_feat_dim: 6, ..tiny_config() };
        let mut params = ParamSet::init(&cfg, 4).unwrap();
        let names = params.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            if let Some(counterpart) = name
                .contains(".visual.")
                .then(|| name.replace(".visual.", ".audio."))
                .or_else(|| name.starts_with("proj.visual").then(|| name.replace("visual", "audio")))
                .or_else(|| (name == "head.select.visual.w").then(|| "head.select.audio.w".to_string()))
                .or_else(|| (name == "head.select.visual.b").then(|| "head.select.audio.b".to_string()))
            {
                let src = params.get(&counterpart).unwrap().clone();
                params.tensors_mut()[i] = src;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let feats = random_feats(&mut rng, 3, 6);
        let out = forward(&params, &feats, &feats).unwrap();
        for r in 0..3 {
            for c in 0..cfg.logit_cols() {
                assert_eq!(out.beta_audio.at(r, c), 0.5, "beta not exactly half");
                assert_eq!(out.beta_visual.at(r, c), 0.5);
            }
        }
    }

    #[test]
    fn swapping_streams_and_parameter_sets_swaps_outputs_exactly() {
        let cfg = ModelConfig { audio_feat_dim: 6, visual_feat_dim: 6, ..tiny_config() };
        let base = ParamSet::init(&cfg, 21).unwrap();
        let swap_name = |n: &str| -> String {
            if n.contains("audio") {
                n.replace("audio", "visual")
            } else {
                n.replace("visual", "audio")
            }
        };
        let mut swapped = base.clone();
        let names = base.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            if name.contains("audio") || name.contains("visual") {
                let src = base.get(&swap_name(name)).unwrap().clone();
                swapped.tensors_mut()[i] = src;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let fa = random_feats(&mut rng, 3, 6);
        let fv = random_feats(&mut rng, 3, 6);
        let one = forward(&base, &fa, &fv).unwrap();
        let two = forward(&swapped, &fv, &fa).unwrap();
        assert_eq!(one.logits_audio.data(), two.logits_visual.data());
        assert_eq!(one.logits_visual.data(), two.logits_audio.data());
        assert_eq!(one.alpha_audio.data(), two.alpha_visual.data());
        assert_eq!(one.beta_audio.data(), two.beta_visual.data());
        assert_eq!(one.modality_audio.data(), two.modality_visual.data());
        assert_eq!(one.video.data(), two.video.data());
    }

    #[test]
    fn permuting_segments_permutes_dense_outputs_and_fixes_pooled_ones() {
        let cfg = tiny_config();
        let params = ParamSet::init(&cfg, 14).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let t = 5;
        let fa = random_feats(&mut rng, t, cfg.audio_feat_dim);
        let fv = random_feats(&mut rng, t, cfg.visual_feat_dim);
        let perm = [3usize, 0, 4, 1, 2];
        let permute = |f: &Tensor| {
            let mut data = Vec::new();
            for &r in &perm {
                for c in 0..f.cols() {
                    data.push(f.at(r, c));
                }
            }
            Tensor::matrix(t, f.cols(), data).unwrap()
        };
        let base = forward(&params, &fa, &fv).unwrap();
        let shuf = forward(&params, &permute(&fa), &permute(&fv)).unwrap();
        for (i, &r) in perm.iter().enumerate() {
            for c in 0..cfg.logit_cols() {
                assert!((shuf.logits_audio.at(i, c) - base.logits_audio.at(r, c)).abs() < 1e-9);
                assert!((shuf.alpha_visual.at(i, c) - base.alpha_visual.at(r, c)).abs() < 1e-9);
                assert!((shuf.beta_audio.at(i, c) - base.beta_audio.at(r, c)).abs() < 1e-9);
            }
        }
        for (a, b) in [
            (&base.modality_audio, &shuf.modality_audio),
            (&base.modality_visual, &shuf.modality_visual),
            (&base.video, &shuf.video),
        ] {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn repeated_forward_is_bitwise_stable() {
        let cfg = tiny_config();
        let params = ParamSet::init(&cfg, 33).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let fa = random_feats(&mut rng, 4, cfg.audio_feat_dim);
        let fv = random_feats(&mut rng, 4, cfg.visual_feat_dim);
        let a = forward(&params, &fa, &fv).unwrap();
        let b = forward(&params, &fa, &fv).unwrap();
        assert_eq!(a.video.data(), b.video.data());
        assert_eq!(a.logits_audio.data(), b.logits_audio.data());
    }

    #[test]
    fn feature_validation_errors() {
        let cfg = tiny_config();
        let params = ParamSet::init(&cfg, 1).unwrap();
        let fa = Tensor::zeros(vec![3, cfg.audio_feat_dim]);
        let fv_bad = Tensor::zeros(vec![3, cfg.visual_feat_dim + 1]);
        let err = forward(&params, &fa, &fv_bad).unwrap_err().to_string();
        assert!(err.contains("visual features"), "{err}");
        let fv = Tensor::zeros(vec![2, cfg.visual_feat_dim]);
        assert!(forward(&params, &fa, &fv).is_err());
        let empty_a = Tensor::zeros(vec![0, cfg.audio_feat_dim]);
        let empty_v = Tensor::zeros(vec![0, cfg.visual_feat_dim]);
        let err = forward(&params, &empty_a, &empty_v).unwrap_err().to_string();
        assert!(err.contains("at least one segment"), "{err}");
    }

    #[test]
    fn ave_mode_widens_every_head_output() {
        let cfg = ModelConfig { ave_mode: true, ..tiny_config() };
        let params = ParamSet::init(&cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let out = forward(
            &params,
            &random_feats(&mut rng, 2, cfg.audio_feat_dim),
            &random_feats(&mut rng, 2, cfg.visual_feat_dim),
        )
        .unwrap();
        let k = cfg.num_classes + 1;
        assert_eq!(out.logits_audio.cols(), k);
        assert_eq!(out.alpha_visual.cols(), k);
        assert_eq!(out.video.numel(), k);
    }

    #[test]
    fn full_forward_gradients_match_finite_differences() {
        for pre_norm in [false, true] {
            let cfg = ModelConfig {
                hidden_dim: 4,
                num_layers: 1,
                num_classes: 2,
                heads: 2,
                ffn_dim: 6,
                audio_feat_dim: 3,
                visual_feat_dim: 4,
                ave_mode: false,
                pre_norm,
            };
            let params = ParamSet::init(&cfg, 19).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let fa = random_feats(&mut rng, 2, cfg.audio_feat_dim);
            let fv = random_feats(&mut rng, 2, cfg.visual_feat_dim);
            let leaves: Vec<Tensor> = params.tensors().to_vec();
            let report = check_loss_grads(&leaves, 1e-5, |g, ids| {
                let bound = params.bind_existing(ids)?;
                let h = build_forward(g, &bound, &fa, &fv)?;
                // Touch every output family so all paths carry gradient.
                let v = g.sum_all(h.video);
                let ma = g.sum_all(h.modality_audio);
                let pa = g.sum_all(h.probs_visual);
                let al = g.sum_all(h.alpha_audio);
                let be = g.sum_all(h.beta_visual);
                let vs = g.scale(v, 1.0);
                let s1 = g.add(vs, ma)?;
                let s2 = g.add(s1, pa)?;
                let s3 = g.add(s2, al)?;
                g.add(s3, be)
            })
            .unwrap();
            assert!(
                report.max_rel_err < 1e-3,
                "pre_norm {pre_norm}: rel err {} at {:?}",
                report.max_rel_err,
                report.worst
            );
        }
    }

    #[test]
    fn exported_logits_round_trip_and_binarize_like_signs() {
        let cfg = tiny_config();
        let params = ParamSet::init(&cfg, 23).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let videos: Vec<VideoSample> = (0..3)
            .map(|i| VideoSample {
                video_id: format!("vid_{i:05}"),
                feats_audio: random_feats(&mut rng, 4, cfg.audio_feat_dim),
                feats_visual: random_feats(&mut rng, 4, cfg.visual_feat_dim),
                weak: WeakLabel::zeros(cfg.num_classes),
                dense_gt: None,
            })
            .collect();
        let exported = export_model_logits(&params, &videos).unwrap();
        assert_eq!(exported.len(), 3);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("teacher_logits.bin");
        crate::labels::io::write_teacher_logits(&path, &exported).unwrap();
        let back = crate::labels::io::read_teacher_logits(&path).unwrap();
        for (a, b) in exported.iter().zip(&back) {
            assert_eq!(a.video_id, b.video_id);
            assert_eq!(a.visual.data(), b.visual.data(), "visual logits drifted on disk");
            assert_eq!(a.audio.data(), b.audio.data());
        }

        // Zero thresholds, no filtering: labels are exactly the logit signs.
        let weak = WeakLabel::new(vec![1; cfg.num_classes]).unwrap();
        let thresholds = Thresholds::uniform(cfg.num_classes, 0.0);
        let opts = ElaborateOpts { video_filter: false, ..ElaborateOpts::default() };
        for (lg, video) in back.iter().zip(&videos) {
            let dense = elaborate(lg, &thresholds, &weak, &opts).unwrap();
            let raw = forward(&params, &video.feats_audio, &video.feats_visual).unwrap();
            for t in 0..4 {
                for c in 0..cfg.num_classes {
                    assert_eq!(
                        dense.audio.get(t, c),
                        raw.logits_audio.at(t, c) > 0.0,
                        "audio sign mismatch at ({t}, {c})"
                    );
                    assert_eq!(dense.visual.get(t, c), raw.logits_visual.at(t, c) > 0.0);
                }
            }
        }
    }
}
