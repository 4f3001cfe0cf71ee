//! Sampled-softmax losses for the three user towers, the adaptive
//! consistency weight, and the combined objective.
//!
//! Every loss is the batch mean of per-example terms
//! `-log( e^{z_p} / (e^{z_p} + sum_j e^{z_j}) )` with logits
//! `z = (u . v) / tau`, evaluated through a max-shifted log-sum-exp so large
//! logits stay finite. The basic loss runs over RTG and ITG positives, the
//! incremental loss over ITG positives with the request's RTG items added as
//! extra negatives and weighted by the consistency weight, and the alignment
//! loss over exposed (ETG) positives.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::event_log::RequestContext;
use crate::mat::{axpy, dot};
use crate::model_core::{
    item_forward, user_backward, user_forward, GradientBuffer, ModelParams, Tower,
};
use crate::sample_builder::{SampleGroup, TrainingExample};

/// Fixed fan-out for parallel gradient accumulation. Chunks are merged in
/// index order, so results are bit-identical for any thread count.
const GRAD_CHUNKS: usize = 16;

/// One sampled-softmax evaluation: the loss and its gradient with respect to
/// the logits, `[positive, negatives...]`.
#[derive(Debug, Clone)]
pub struct SoftmaxTerm {
    pub loss: f64,
    pub dlogits: Vec<f64>,
    pub pos_logit: f64,
    pub max_neg_logit: f64,
}

/// Loss and dlogits for a logit vector with the positive in slot 0.
fn softmax_term_from_logits(logits: &[f64]) -> Result<SoftmaxTerm> {
    if logits.len() < 2 {
        return Err(Error::EmptyNegatives);
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite("logit"));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|z| (z - m).exp()).sum();
    let lse = m + sum_exp.ln();
    let loss = lse - logits[0];
    let mut dlogits: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    dlogits[0] -= 1.0;
    let max_neg = logits[1..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(SoftmaxTerm {
        loss,
        dlogits,
        pos_logit: logits[0],
        max_neg_logit: max_neg,
    })
}

/// Contrastive term for one (user, positive, negatives) triple.
pub fn sample_softmax_logits(
    user: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    tau: f64,
) -> Vec<f64> {
    let mut logits = Vec::with_capacity(1 + negatives.len());
    logits.push(dot(user, positive) / tau);
    for v in negatives {
        logits.push(dot(user, v) / tau);
    }
    logits
}

/// The spec-level operation: loss plus dloss/dlogits for one example.
pub fn sampled_softmax_term(
    user: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    tau: f64,
) -> Result<SoftmaxTerm> {
    if negatives.is_empty() {
        return Err(Error::EmptyNegatives);
    }
    softmax_term_from_logits(&sample_softmax_logits(user, positive, negatives, tau))
}

/// Per-example diagnostics kept alongside each loss value.
#[derive(Debug, Clone, Copy)]
pub struct TermDiag {
    pub group: SampleGroup,
    pub pos_logit: f64,
    pub max_neg_logit: f64,
    pub alpha: f64,
}

/// Value (batch mean), gradients, and per-example diagnostics of one loss.
#[derive(Debug)]
pub struct LossOutput {
    pub value: f64,
    pub grads: GradientBuffer,
    pub diags: Vec<TermDiag>,
}

impl LossOutput {
    fn empty(params: &ModelParams) -> Self {
        LossOutput {
            value: 0.0,
            grads: GradientBuffer::new(&params.dims),
            diags: Vec::new(),
        }
    }
}

struct Spec<'a> {
    ctx: &'a RequestContext,
    group: SampleGroup,
    positive: u32,
    negatives: &'a [u32],
    extra_negatives: &'a [u32],
    /// alpha * weight * coefficient; multiplies both the term value and its
    /// gradients.
    scale: f64,
    alpha: f64,
}

/// Shared engine: mean of scaled sampled-softmax terms under one user tower,
/// with analytic gradients into that tower, the item tower, and the touched
/// embedding rows.
fn batch_loss(
    params: &ModelParams,
    tower: Tower,
    specs: &[Spec<'_>],
    feats: &[Vec<u32>],
    tau: f64,
) -> Result<LossOutput> {
    if specs.is_empty() {
        return Ok(LossOutput::empty(params));
    }
    let n = specs.len();
    let inv_n = 1.0 / n as f64;
    let chunk_size = n.div_ceil(GRAD_CHUNKS);
    let chunks: Vec<(f64, GradientBuffer, Vec<TermDiag>)> = specs
        .par_chunks(chunk_size)
        .map(|chunk| -> Result<(f64, GradientBuffer, Vec<TermDiag>)> {
            let mut buf = GradientBuffer::new(&params.dims);
            let mut sum = 0.0;
            let mut diags = Vec::with_capacity(chunk.len());
            for spec in chunk {
                let (contrib, diag) = example_term(params, tower, spec, feats, tau, inv_n, &mut buf)?;
                sum += contrib;
                diags.push(diag);
            }
            Ok((sum, buf, diags))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut grads = GradientBuffer::new(&params.dims);
    let mut sum = 0.0;
    let mut diags = Vec::with_capacity(n);
    for (s, buf, d) in chunks {
        sum += s;
        grads.merge(&buf);
        diags.extend(d);
    }
    Ok(LossOutput {
        value: sum * inv_n,
        grads,
        diags,
    })
}

fn example_term(
    params: &ModelParams,
    tower: Tower,
    spec: &Spec<'_>,
    feats: &[Vec<u32>],
    tau: f64,
    inv_n: f64,
    buf: &mut GradientBuffer,
) -> Result<(f64, TermDiag)> {
    let (user, user_tape) = user_forward(params, tower, spec.ctx)?;
    let n_items = 1 + spec.negatives.len() + spec.extra_negatives.len();
    let mut vectors = Vec::with_capacity(n_items);
    let mut tapes = Vec::with_capacity(n_items);
    for &item in std::iter::once(&spec.positive)
        .chain(spec.negatives.iter())
        .chain(spec.extra_negatives.iter())
    {
        let (v, tape) = item_forward(params, item, &feats[item as usize])?;
        vectors.push(v);
        tapes.push(tape);
    }
    let logits: Vec<f64> = vectors.iter().map(|v| dot(&user, v) / tau).collect();
    let term = softmax_term_from_logits(&logits)?;
    let diag = TermDiag {
        group: spec.group,
        pos_logit: term.pos_logit,
        max_neg_logit: term.max_neg_logit,
        alpha: spec.alpha,
    };
    let contrib = spec.scale * term.loss;

    // d(mean)/dlogit_k, including the per-example scale.
    let s = spec.scale * inv_n;
    if s != 0.0 {
        let d = params.dims.d;
        let mut du = vec![0.0; d];
        for (k, (&dl, v)) in term.dlogits.iter().zip(&vectors).enumerate() {
            let g = dl * s / tau;
            axpy(&mut du, v, g);
            let mut dv = vec![0.0; d];
            axpy(&mut dv, &user, g);
            crate::model_core::item_backward(params, &tapes[k], &dv, buf);
        }
        user_backward(params, &user_tape, &du, buf);
    }
    Ok((contrib, diag))
}

/// Basic-tower loss over RTG and ITG positives against random negatives.
/// `itg_weight` is 1.0 normally; the boosted ablation amplifies ITG terms.
pub fn loss_basic(
    params: &ModelParams,
    contexts: &[RequestContext],
    feats: &[Vec<u32>],
    batch: &[&TrainingExample],
    tau: f64,
    itg_weight: f64,
    coefficient: f64,
) -> Result<LossOutput> {
    let specs: Vec<Spec<'_>> = batch
        .iter()
        .map(|ex| {
            if ex.group == SampleGroup::Etg {
                return Err(Error::WrongSampleGroup {
                    expected: "RTG|ITG",
                    found: "ETG",
                });
            }
            let weight = if ex.group == SampleGroup::Itg {
                itg_weight
            } else {
                1.0
            };
            Ok(Spec {
                ctx: &contexts[ex.request_idx],
                group: ex.group,
                positive: ex.positive,
                negatives: &ex.negatives,
                extra_negatives: &[],
                scale: weight * coefficient,
                alpha: 1.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    batch_loss(params, Tower::Basic, &specs, feats, tau)
}

/// Incremental-tower loss over ITG positives: the request's RTG items are
/// appended to the negatives and each term is weighted by its consistency
/// weight. Alphas carry no gradient.
pub fn loss_incremental(
    params: &ModelParams,
    contexts: &[RequestContext],
    feats: &[Vec<u32>],
    batch: &[&TrainingExample],
    rtg_negatives: &[&[u32]],
    alphas: &[f64],
    tau: f64,
    coefficient: f64,
) -> Result<LossOutput> {
    assert_eq!(batch.len(), rtg_negatives.len());
    assert_eq!(batch.len(), alphas.len());
    let specs: Vec<Spec<'_>> = batch
        .iter()
        .zip(rtg_negatives)
        .zip(alphas)
        .map(|((ex, &rtg), &alpha)| {
            if ex.group != SampleGroup::Itg {
                return Err(Error::WrongSampleGroup {
                    expected: "ITG",
                    found: ex.group.name(),
                });
            }
            if alpha < 0.0 {
                return Err(Error::NegativeAlpha(alpha));
            }
            Ok(Spec {
                ctx: &contexts[ex.request_idx],
                group: ex.group,
                positive: ex.positive,
                negatives: &ex.negatives,
                extra_negatives: rtg,
                scale: alpha * coefficient,
                alpha,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    batch_loss(params, Tower::Incremental, &specs, feats, tau)
}

/// Alignment-tower loss over exposed (ETG) positives against random negatives.
pub fn loss_align(
    params: &ModelParams,
    contexts: &[RequestContext],
    feats: &[Vec<u32>],
    batch: &[&TrainingExample],
    tau: f64,
    coefficient: f64,
) -> Result<LossOutput> {
    let specs: Vec<Spec<'_>> = batch
        .iter()
        .map(|ex| {
            if ex.group != SampleGroup::Etg {
                return Err(Error::WrongSampleGroup {
                    expected: "ETG",
                    found: ex.group.name(),
                });
            }
            Ok(Spec {
                ctx: &contexts[ex.request_idx],
                group: ex.group,
                positive: ex.positive,
                negatives: &ex.negatives,
                extra_negatives: &[],
                scale: coefficient,
                alpha: 1.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    batch_loss(params, Tower::Align, &specs, feats, tau)
}

/// How a raw consistency inner product maps onto a nonnegative weight.
/// Clamping is the default; softplus keeps low-signal samples alive while
/// the alignment tower is still warming up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlphaRange {
    #[default]
    Clamp,
    Softplus,
}

impl AlphaRange {
    fn apply(self, raw: f64) -> f64 {
        match self {
            AlphaRange::Clamp => raw.max(0.0),
            // ln(1 + e^raw), evaluated stably on both tails
            AlphaRange::Softplus => {
                if raw > 30.0 {
                    raw
                } else {
                    raw.exp().ln_1p()
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AlphaRange::Clamp => "clamp",
            AlphaRange::Softplus => "softplus",
        }
    }

    pub fn from_name(s: &str) -> Option<AlphaRange> {
        match s {
            "clamp" => Some(AlphaRange::Clamp),
            "softplus" => Some(AlphaRange::Softplus),
            _ => None,
        }
    }
}

/// How the consistency weight of an ITG example is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaMode {
    /// Match the most similar exposed item by item-vector inner product,
    /// then weight by the alignment user's affinity to that exposed item.
    Matched,
    /// Weight by the alignment user's affinity to the ITG item itself.
    Direct,
    /// Constant 1 (alignment transfer disabled).
    One,
}

impl AlphaMode {
    pub fn name(self) -> &'static str {
        match self {
            AlphaMode::Matched => "increc",
            AlphaMode::Direct => "increc-ori",
            AlphaMode::One => "none",
        }
    }

    pub fn from_name(s: &str) -> Option<AlphaMode> {
        match s {
            "increc" => Some(AlphaMode::Matched),
            "increc-ori" => Some(AlphaMode::Direct),
            "none" => Some(AlphaMode::One),
            _ => None,
        }
    }
}

/// Consistency weight of one ITG example before batch normalization.
#[derive(Debug, Clone)]
pub struct ConsistencyWeight {
    /// Clamped weight, `max(0, raw)`; 1.0 for the empty-ETG fallback.
    pub alpha: f64,
    /// Inner product before clamping (1.0 for the empty-ETG fallback).
    pub raw: f64,
    /// The matched exposed item, if matching applies.
    pub matched: Option<u32>,
    /// Whether this example takes part in positive-mean normalization.
    normalizable: bool,
}

/// Pre-normalization weight for a single ITG item (matched mode): pick the
/// exposed item most similar to it (ties to the smallest item id), then take
/// the alignment user's inner product with that exposed item, clamped at 0.
/// An empty exposed set falls back to weight 1.
pub fn consistency_weight(
    params: &ModelParams,
    item: u32,
    ctx: &RequestContext,
    feats: &[Vec<u32>],
    mode: AlphaMode,
) -> Result<ConsistencyWeight> {
    consistency_weight_ranged(params, item, ctx, feats, mode, AlphaRange::Clamp)
}

pub fn consistency_weight_ranged(
    params: &ModelParams,
    item: u32,
    ctx: &RequestContext,
    feats: &[Vec<u32>],
    mode: AlphaMode,
    range: AlphaRange,
) -> Result<ConsistencyWeight> {
    match mode {
        AlphaMode::One => Ok(ConsistencyWeight {
            alpha: 1.0,
            raw: 1.0,
            matched: None,
            normalizable: false,
        }),
        AlphaMode::Direct => {
            let (u_align, _) = user_forward(params, Tower::Align, ctx)?;
            let (v, _) = item_forward(params, item, &feats[item as usize])?;
            let raw = dot(&u_align, &v);
            Ok(ConsistencyWeight {
                alpha: range.apply(raw),
                raw,
                matched: None,
                normalizable: true,
            })
        }
        AlphaMode::Matched => {
            if ctx.exposed.is_empty() {
                return Ok(ConsistencyWeight {
                    alpha: 1.0,
                    raw: 1.0,
                    matched: None,
                    normalizable: false,
                });
            }
            let (u_align, _) = user_forward(params, Tower::Align, ctx)?;
            let (v_item, _) = item_forward(params, item, &feats[item as usize])?;
            let mut best: Option<(f64, u32, Vec<f64>)> = None;
            // ctx.exposed is sorted ascending, so strict improvement keeps
            // the smallest id on ties.
            for &e in &ctx.exposed {
                let (v_e, _) = item_forward(params, e, &feats[e as usize])?;
                let sim = dot(&v_item, &v_e);
                if best.as_ref().map_or(true, |(s, _, _)| sim > *s) {
                    best = Some((sim, e, v_e));
                }
            }
            let (_, matched, v_matched) = best.expect("non-empty exposed set");
            let raw = dot(&u_align, &v_matched);
            Ok(ConsistencyWeight {
                alpha: range.apply(raw),
                raw,
                matched: Some(matched),
                normalizable: true,
            })
        }
    }
}

/// Batch consistency weights: per-example pre-normalization weights divided
/// by the batch mean of the positive ones (divisor 1.0 when there are none).
/// Weights are constants; no gradient flows through them.
pub fn consistency_weights(
    params: &ModelParams,
    contexts: &[RequestContext],
    feats: &[Vec<u32>],
    batch: &[&TrainingExample],
    mode: AlphaMode,
) -> Result<Vec<ConsistencyWeight>> {
    consistency_weights_ranged(params, contexts, feats, batch, mode, AlphaRange::Clamp)
}

pub fn consistency_weights_ranged(
    params: &ModelParams,
    contexts: &[RequestContext],
    feats: &[Vec<u32>],
    batch: &[&TrainingExample],
    mode: AlphaMode,
    range: AlphaRange,
) -> Result<Vec<ConsistencyWeight>> {
    let mut weights = Vec::with_capacity(batch.len());
    for ex in batch {
        weights.push(consistency_weight_ranged(
            params,
            ex.positive,
            &contexts[ex.request_idx],
            feats,
            mode,
            range,
        )?);
    }
    let positives: Vec<f64> = weights
        .iter()
        .filter(|w| w.normalizable && w.alpha > 0.0)
        .map(|w| w.alpha)
        .collect();
    if !positives.is_empty() {
        let mean = positives.iter().sum::<f64>() / positives.len() as f64;
        for w in &mut weights {
            if w.normalizable {
                w.alpha /= mean;
            }
        }
    }
    Ok(weights)
}

/// Per-step loss breakdown; `l_total` is always the exact sum of the parts.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub l_basic: f64,
    pub l_inc: f64,
    pub l_align: f64,
    pub l_total: f64,
    pub mean_alpha: f64,
    pub diags: Vec<TermDiag>,
}

/// Batches for one optimization step. Alphas are computed by the caller
/// (fresh each step) and treated as constants here.
pub struct StepBatches<'a> {
    pub basic: &'a [&'a TrainingExample],
    pub incremental: &'a [&'a TrainingExample],
    pub inc_rtg: &'a [&'a [u32]],
    pub alphas: &'a [f64],
    pub align: &'a [&'a TrainingExample],
}

#[derive(Debug, Clone)]
pub struct LossConfig {
    pub tau: f64,
    pub itg_weight: f64,
    /// Coefficients on the basic, incremental, and alignment terms.
    pub coefficients: [f64; 3],
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 1.0,
            itg_weight: 1.0,
            coefficients: [1.0, 1.0, 1.0],
        }
    }
}

/// The combined objective: basic + incremental + alignment, with merged
/// gradients (item-tower and embedding contributions accumulate across the
/// three parts).
pub fn total_loss(
    params: &ModelParams,
    contexts: &[RequestContext],
    feats: &[Vec<u32>],
    batches: &StepBatches<'_>,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, GradientBuffer)> {
    let basic = loss_basic(
        params,
        contexts,
        feats,
        batches.basic,
        cfg.tau,
        cfg.itg_weight,
        cfg.coefficients[0],
    )?;
    let inc = loss_incremental(
        params,
        contexts,
        feats,
        batches.incremental,
        batches.inc_rtg,
        batches.alphas,
        cfg.tau,
        cfg.coefficients[1],
    )?;
    let align = loss_align(
        params,
        contexts,
        feats,
        batches.align,
        cfg.tau,
        cfg.coefficients[2],
    )?;

    let mut grads = basic.grads;
    grads.merge(&inc.grads);
    grads.merge(&align.grads);

    let mean_alpha = if batches.alphas.is_empty() {
        0.0
    } else {
        batches.alphas.iter().sum::<f64>() / batches.alphas.len() as f64
    };
    let mut diags = basic.diags;
    diags.extend(inc.diags);
    diags.extend(align.diags);
    Ok((
        LossBreakdown {
            l_basic: basic.value,
            l_inc: inc.value,
            l_align: align.value,
            l_total: basic.value + inc.value + align.value,
            mean_alpha,
            diags,
        },
        grads,
    ))
}
