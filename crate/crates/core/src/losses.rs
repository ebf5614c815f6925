//! Training objectives.
//!
//! Each loss has a kernel over raw planar slices that returns the value and
//! its gradient with respect to the predicted values, so the trainer can seed
//! the autodiff tape directly. The public functions on domain types wrap the
//! kernels and discard the gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, PoolKind, Tensor, Var};
use crate::types::{one_hot, FeatureEmbedding, ProbabilityMap, SegmentationMask};

/// Probability clamp applied before every logarithm.
pub const PROB_CLAMP: f64 = 1e-7;
/// Smoothing term of the soft dice and clDice ratios.
pub const DICE_EPS: f64 = 1e-6;

/// Pixel term mixed with clDice in the baseline loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClDiceMix {
    /// `alpha (1 - clDice) + (1 - alpha) focal`.
    #[default]
    Focal,
    /// `beta (1 - clDice) + (1 - beta) (1 - softDice)`.
    SoftDice,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_weight: f64,
    pub focal_weight: f64,
    /// `None` selects 0.5 for a single foreground class and 0.2 otherwise.
    pub cldice_alpha: Option<f64>,
    pub cldice_beta: f64,
    pub cldice_mix: ClDiceMix,
    pub skeleton_iters: usize,
    /// Multipliers on the three unified-loss terms, 1 for the plain sum.
    pub tex_weight: f64,
    pub bce_weight: f64,
    pub triplet_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            dice_weight: 0.5,
            focal_weight: 0.5,
            cldice_alpha: None,
            cldice_beta: 0.0,
            cldice_mix: ClDiceMix::Focal,
            skeleton_iters: 10,
            tex_weight: 1.0,
            bce_weight: 1.0,
            triplet_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        for (name, v) in [
            ("focal_gamma", self.focal_gamma),
            ("dice_weight", self.dice_weight),
            ("focal_weight", self.focal_weight),
            ("tex_weight", self.tex_weight),
            ("bce_weight", self.bce_weight),
            ("triplet_weight", self.triplet_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be non-negative, got {v}"));
            }
        }
        for (name, v) in [
            ("focal_alpha", Some(self.focal_alpha)),
            ("cldice_alpha", self.cldice_alpha),
            ("cldice_beta", Some(self.cldice_beta)),
        ] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return fail(format!("{name} must lie in [0, 1], got {v}"));
                }
            }
        }
        Ok(())
    }

    pub fn cldice_alpha_for(&self, num_classes: usize) -> f64 {
        self.cldice_alpha
            .unwrap_or(if num_classes == 1 { 0.5 } else { 0.2 })
    }
}

/// A scalar loss and its gradient with respect to the predicted values.
#[derive(Debug, Clone, PartialEq)]
pub struct Graded {
    pub value: f64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletTerms {
    pub loss: f64,
    pub d_pos: f64,
    pub d_neg: f64,
    pub grad_anchor: Vec<f64>,
    pub grad_pos: Vec<f64>,
    pub grad_neg: Vec<f64>,
}

/// Mean over positions of the channel-vector distance, plus its gradient
/// with respect to `a` (the gradient for `b` is the negation).
fn mean_distance(a: &[f64], b: &[f64], channels: usize) -> (f64, Vec<f64>) {
    let hw = a.len() / channels;
    let mut total = 0.0;
    let mut grad = vec![0.0; a.len()];
    for i in 0..hw {
        let norm = (0..channels)
            .map(|k| (a[k * hw + i] - b[k * hw + i]).powi(2))
            .sum::<f64>()
            .sqrt();
        total += norm;
        // subgradient 0 where the vectors coincide
        if norm > 0.0 {
            for k in 0..channels {
                grad[k * hw + i] = (a[k * hw + i] - b[k * hw + i]) / (norm * hw as f64);
            }
        }
    }
    (total / hw as f64, grad)
}

/// Hinge triplet loss on planar `[channels, positions]` embeddings.
pub fn triplet_terms(anchor: &[f64], pos: &[f64], neg: &[f64], channels: usize, tau: f64) -> TripletTerms {
    assert!(channels > 0 && anchor.len() % channels == 0);
    assert!(anchor.len() == pos.len() && anchor.len() == neg.len());
    let (d_pos, g_pos) = mean_distance(anchor, pos, channels);
    let (d_neg, g_neg) = mean_distance(anchor, neg, channels);
    let raw = d_pos - d_neg + tau;
    let n = anchor.len();
    if raw <= 0.0 {
        return TripletTerms {
            loss: 0.0,
            d_pos,
            d_neg,
            grad_anchor: vec![0.0; n],
            grad_pos: vec![0.0; n],
            grad_neg: vec![0.0; n],
        };
    }
    TripletTerms {
        loss: raw,
        d_pos,
        d_neg,
        grad_anchor: g_pos.iter().zip(&g_neg).map(|(p, q)| p - q).collect(),
        grad_pos: g_pos.iter().map(|g| -g).collect(),
        grad_neg: g_neg,
    }
}

fn check_embeddings(a: &FeatureEmbedding, p: &FeatureEmbedding, n: &FeatureEmbedding) -> Result<()> {
    for other in [p, n] {
        if other.shape() != a.shape() {
            return Err(Error::shape(format!("{:?}", a.shape()), format!("{:?}", other.shape())));
        }
    }
    Ok(())
}

/// `max(d+ - d- + tau, 0)` where `d+`/`d-` are mean per-position Euclidean
/// distances from the anchor to the positive/negative embedding.
pub fn triplet_loss(
    anchor: &FeatureEmbedding,
    pos: &FeatureEmbedding,
    neg: &FeatureEmbedding,
    tau: f64,
) -> Result<f64> {
    check_embeddings(anchor, pos, neg)?;
    Ok(triplet_terms(anchor.data(), pos.data(), neg.data(), anchor.channels(), tau).loss)
}

fn clamp_prob(p: f64) -> (f64, bool) {
    if p < PROB_CLAMP {
        (PROB_CLAMP, true)
    } else if p > 1.0 - PROB_CLAMP {
        (1.0 - PROB_CLAMP, true)
    } else {
        (p, false)
    }
}

/// Mean of `-alpha (1 - p_t)^gamma ln p_t` over pixels, where `p_t` is the
/// probability of the labeled class in planar `probs`.
pub fn focal_graded(probs: &[f64], labels: &[u8], gamma: f64, alpha: f64) -> Graded {
    let hw = labels.len();
    let mut grad = vec![0.0; probs.len()];
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let idx = l as usize * hw + i;
        let (p, clamped) = clamp_prob(probs[idx]);
        let q = 1.0 - p;
        total += -alpha * q.powf(gamma) * p.ln();
        if !clamped {
            let d = if gamma == 0.0 {
                -alpha / p
            } else {
                alpha * gamma * q.powf(gamma - 1.0) * p.ln() - alpha * q.powf(gamma) / p
            };
            grad[idx] = d / hw as f64;
        }
    }
    Graded {
        value: total / hw as f64,
        grad,
    }
}

/// `1 - (2 sum pg + eps) / (sum p + sum g + eps)`, averaged over the
/// foreground channels `1..channels`.
pub fn soft_dice_graded(probs: &[f64], labels: &[u8], channels: usize) -> Graded {
    let hw = labels.len();
    let classes = channels - 1;
    let mut grad = vec![0.0; probs.len()];
    let mut total = 0.0;
    for k in 1..channels {
        let plane = &probs[k * hw..(k + 1) * hw];
        let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
        for (i, &p) in plane.iter().enumerate() {
            let g = f64::from(u8::from(labels[i] as usize == k));
            inter += p * g;
            sp += p;
            sg += g;
        }
        let num = 2.0 * inter + DICE_EPS;
        let den = sp + sg + DICE_EPS;
        total += 1.0 - num / den;
        for i in 0..hw {
            let g = f64::from(u8::from(labels[i] as usize == k));
            grad[k * hw + i] = -(2.0 * g * den - num) / (den * den) / classes as f64;
        }
    }
    Graded {
        value: total / classes as f64,
        grad,
    }
}

/// Mean binary cross-entropy of `p` against `target > 0`.
pub fn bce_graded(p: &[f64], labels: &[u8]) -> Graded {
    let n = labels.len();
    let mut grad = vec![0.0; n];
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let (q, clamped) = clamp_prob(p[i]);
        if l > 0 {
            total -= q.ln();
            if !clamped {
                grad[i] = -1.0 / (q * n as f64);
            }
        } else {
            total -= (1.0 - q).ln();
            if !clamped {
                grad[i] = 1.0 / ((1.0 - q) * n as f64);
            }
        }
    }
    Graded {
        value: total / n as f64,
        grad,
    }
}

fn soft_open(g: &mut Graph, x: Var) -> Var {
    let e = g.pool3(x, PoolKind::MinCross);
    g.pool3(e, PoolKind::MaxSquare)
}

/// Differentiable soft skeleton: iterated soft erosion, with the residue of
/// each soft opening accumulated into the skeleton.
pub fn soft_skeleton(g: &mut Graph, x: Var, iters: usize) -> Var {
    let opened = soft_open(g, x);
    let diff = g.sub(x, opened);
    let mut skel = g.relu(diff);
    let mut img = x;
    for _ in 0..iters {
        img = g.pool3(img, PoolKind::MinCross);
        let opened = soft_open(g, img);
        let diff = g.sub(img, opened);
        let delta = g.relu(diff);
        let overlap = g.mul(skel, delta);
        let fresh = g.sub(delta, overlap);
        let fresh = g.relu(fresh);
        skel = g.add(skel, fresh);
    }
    skel
}

/// Soft skeleton of a constant `[C, H, W]` map.
pub fn soft_skeleton_of(values: Tensor, iters: usize) -> Tensor {
    let mut g = Graph::new();
    let x = g.constant(values);
    let s = soft_skeleton(&mut g, x, iters);
    g.value(s).clone()
}

/// `1 - clDice` between planar `probs` and the one-hot target, pooled over
/// all foreground channels, with its gradient through the soft skeleton.
pub fn cl_dice_graded(probs: &[f64], target: &[f64], channels: usize, height: usize, width: usize, iters: usize) -> Graded {
    let hw = height * width;
    let shape = vec![channels, height, width];
    let target_skel = soft_skeleton_of(Tensor::new(shape.clone(), target.to_vec()), iters);
    let mut g = Graph::new();
    let x = g.input(Tensor::new(shape.clone(), probs.to_vec()));
    let skel_var = soft_skeleton(&mut g, x, iters);
    let sp = g.value(skel_var).data();
    let sl = target_skel.data();
    let fg = hw..channels * hw;
    let (mut sp_vl, mut sp_sum, mut sl_vp, mut sl_sum) = (0.0, 0.0, 0.0, 0.0);
    for i in fg.clone() {
        sp_vl += sp[i] * target[i];
        sp_sum += sp[i];
        sl_vp += sl[i] * probs[i];
        sl_sum += sl[i];
    }
    let tprec = (sp_vl + DICE_EPS) / (sp_sum + DICE_EPS);
    let tsens = (sl_vp + DICE_EPS) / (sl_sum + DICE_EPS);
    let cl = 2.0 * tprec * tsens / (tprec + tsens);
    let dcl_dprec = 2.0 * tsens * tsens / (tprec + tsens).powi(2);
    let dcl_dsens = 2.0 * tprec * tprec / (tprec + tsens).powi(2);
    let mut seed_skel = vec![0.0; channels * hw];
    let mut direct = vec![0.0; channels * hw];
    for i in fg {
        let dprec = (target[i] * (sp_sum + DICE_EPS) - (sp_vl + DICE_EPS)) / (sp_sum + DICE_EPS).powi(2);
        seed_skel[i] = -dcl_dprec * dprec;
        direct[i] = -dcl_dsens * sl[i] / (sl_sum + DICE_EPS);
    }
    let mut grads = g.backward(vec![(skel_var, Tensor::new(shape, seed_skel))]);
    let mut grad = grads.take(x).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; channels * hw]);
    for (a, b) in grad.iter_mut().zip(&direct) {
        *a += b;
    }
    Graded {
        value: 1.0 - cl,
        grad,
    }
}

fn check_pred(pred: &ProbabilityMap, target: &SegmentationMask) -> Result<()> {
    if pred.height() != target.height() || pred.width() != target.width() {
        return Err(Error::shape(
            format!("{}x{}", target.height(), target.width()),
            format!("{}x{}", pred.height(), pred.width()),
        ));
    }
    if pred.channels() != target.num_classes() + 1 {
        return Err(Error::shape(
            format!("{} channels", target.num_classes() + 1),
            format!("{} channels", pred.channels()),
        ));
    }
    Ok(())
}

pub fn focal_loss(pred: &ProbabilityMap, target: &SegmentationMask, gamma: f64, alpha: f64) -> Result<f64> {
    check_pred(pred, target)?;
    Ok(focal_graded(pred.data(), target.labels(), gamma, alpha).value)
}

pub fn soft_dice_loss(pred: &ProbabilityMap, target: &SegmentationMask) -> Result<f64> {
    check_pred(pred, target)?;
    Ok(soft_dice_graded(pred.data(), target.labels(), pred.channels()).value)
}

/// Binary cross-entropy of a single-channel map against the binarized target.
pub fn bce_loss(p_top: &ProbabilityMap, target: &SegmentationMask) -> Result<f64> {
    check_top(p_top, target)?;
    Ok(bce_graded(p_top.data(), target.labels()).value)
}

fn check_top(p_top: &ProbabilityMap, target: &SegmentationMask) -> Result<()> {
    if p_top.channels() != 1 || p_top.height() != target.height() || p_top.width() != target.width() {
        return Err(Error::shape(
            format!("1x{}x{}", target.height(), target.width()),
            format!("{}x{}x{}", p_top.channels(), p_top.height(), p_top.width()),
        ));
    }
    Ok(())
}

/// Texture loss `dice_weight * softDice + focal_weight * focal`.
pub fn texture_graded(probs: &[f64], labels: &[u8], channels: usize, cfg: &LossConfig) -> Graded {
    let dice = soft_dice_graded(probs, labels, channels);
    let focal = focal_graded(probs, labels, cfg.focal_gamma, cfg.focal_alpha);
    Graded {
        value: cfg.dice_weight * dice.value + cfg.focal_weight * focal.value,
        grad: dice
            .grad
            .iter()
            .zip(&focal.grad)
            .map(|(d, f)| cfg.dice_weight * d + cfg.focal_weight * f)
            .collect(),
    }
}

/// Baseline loss mixing `1 - clDice` with focal loss (or with `1 - softDice`
/// under [`ClDiceMix::SoftDice`]).
pub fn cl_dice_graded_mix(
    probs: &[f64],
    target: &SegmentationMask,
    cfg: &LossConfig,
) -> Result<Graded> {
    let onehot = one_hot(target)?;
    let (h, w, c) = (target.height(), target.width(), onehot.channels());
    let labels = target.labels();
    let (weight, pixel) = match cfg.cldice_mix {
        ClDiceMix::Focal => (
            cfg.cldice_alpha_for(target.num_classes()),
            focal_graded(probs, labels, cfg.focal_gamma, cfg.focal_alpha),
        ),
        ClDiceMix::SoftDice => (cfg.cldice_beta, soft_dice_graded(probs, labels, c)),
    };
    if weight == 0.0 {
        return Ok(pixel);
    }
    let cl = cl_dice_graded(probs, onehot.data(), c, h, w, cfg.skeleton_iters);
    Ok(Graded {
        value: weight * cl.value + (1.0 - weight) * pixel.value,
        grad: cl
            .grad
            .iter()
            .zip(&pixel.grad)
            .map(|(a, b)| weight * a + (1.0 - weight) * b)
            .collect(),
    })
}

pub fn cl_dice_focal_loss(pred: &ProbabilityMap, target: &SegmentationMask, cfg: &LossConfig) -> Result<f64> {
    check_pred(pred, target)?;
    Ok(cl_dice_graded_mix(pred.data(), target, cfg)?.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub tex: f64,
    pub bce: f64,
    pub tri: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.tex.is_finite() && self.bce.is_finite() && self.tri.is_finite() && self.total.is_finite()
    }
}

/// Loss breakdown with gradients for each network output.
#[derive(Debug, Clone)]
pub struct UnifiedGrads {
    pub breakdown: LossBreakdown,
    pub p_tex: Vec<f64>,
    pub p_top: Vec<f64>,
    pub anchor: Vec<f64>,
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
}

/// Raw views of one training sample's network outputs.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs<'a> {
    pub p_tex: &'a [f64],
    pub p_top: &'a [f64],
    pub anchor: &'a [f64],
    pub pos: &'a [f64],
    pub neg: &'a [f64],
    pub tex_channels: usize,
    pub emb_channels: usize,
}

/// `L_tex + L_BCE + L_tri` with per-term multipliers from `cfg`.
pub fn unified_graded(out: HeadOutputs<'_>, labels: &[u8], cfg: &LossConfig) -> UnifiedGrads {
    let tex = texture_graded(out.p_tex, labels, out.tex_channels, cfg);
    let bce = bce_graded(out.p_top, labels);
    let tri = if cfg.triplet_weight > 0.0 {
        triplet_terms(out.anchor, out.pos, out.neg, out.emb_channels, cfg.tau)
    } else {
        let n = out.anchor.len();
        TripletTerms {
            loss: 0.0,
            d_pos: 0.0,
            d_neg: 0.0,
            grad_anchor: vec![0.0; n],
            grad_pos: vec![0.0; n],
            grad_neg: vec![0.0; n],
        }
    };
    let scaled = |g: Vec<f64>, s: f64| g.into_iter().map(|v| v * s).collect::<Vec<_>>();
    let breakdown = LossBreakdown {
        tex: tex.value,
        bce: bce.value,
        tri: tri.loss,
        total: cfg.tex_weight * tex.value + cfg.bce_weight * bce.value + cfg.triplet_weight * tri.loss,
    };
    UnifiedGrads {
        breakdown,
        p_tex: scaled(tex.grad, cfg.tex_weight),
        p_top: scaled(bce.grad, cfg.bce_weight),
        anchor: scaled(tri.grad_anchor, cfg.triplet_weight),
        pos: scaled(tri.grad_pos, cfg.triplet_weight),
        neg: scaled(tri.grad_neg, cfg.triplet_weight),
    }
}

/// Unified loss on domain types; `target` is the multi-class ground truth,
/// binarized internally for the topology head.
pub fn unified_loss(
    p_tex: &ProbabilityMap,
    p_top: &ProbabilityMap,
    anchor: &FeatureEmbedding,
    pos: &FeatureEmbedding,
    neg: &FeatureEmbedding,
    target: &SegmentationMask,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    check_pred(p_tex, target)?;
    check_top(p_top, target)?;
    check_embeddings(anchor, pos, neg)?;
    let out = HeadOutputs {
        p_tex: p_tex.data(),
        p_top: p_top.data(),
        anchor: anchor.data(),
        pos: pos.data(),
        neg: neg.data(),
        tex_channels: p_tex.channels(),
        emb_channels: anchor.channels(),
    };
    Ok(unified_graded(out, target.labels(), cfg).breakdown)
}
