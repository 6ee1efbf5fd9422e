//! Contrastive phrase alignment plus span segmentation training.
//!
//! Each batch holds sentence pairs, up to `max_pairs_per_sentence` phrase
//! pairs drawn from each, and labeled spans on both sides. Source sentences
//! are encoded under mask `z`, target sentences under `z'`; the scores
//! `h^z_x . h^z'_y / temperature` feed a softmax over all K target phrases in
//! both directions. The segmentation term reuses the same forward passes.

use std::collections::HashMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::SentencePair;
use crate::encoder::{
    align_head_backward, align_head_forward, backward_trunk, forward_trunk, seg_head_backward, seg_head_logits,
    AlignHeadCache, DropoutMask, EncoderParams, HiddenStates, Lexicon, Scalar, TrunkCache,
};
use crate::error::{Error, Result};
use crate::extract::{segmentation_examples, PhrasePair, Span};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub dropout: f64,
    /// Sentence pairs per batch.
    pub batch_size: usize,
    pub steps: usize,
    /// Weight of the segmentation loss.
    pub beta: f64,
    pub max_pairs_per_sentence: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Longest span sampled as a segmentation negative.
    pub max_span_len: usize,
    /// Use `z` (instead of `z'`) for the target phrases in the softmax
    /// denominator, as the objective is literally printed.
    pub literal_denominator: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-5,
            dropout: 0.2,
            batch_size: 64,
            steps: 20_000,
            beta: 1.0,
            max_pairs_per_sentence: 4,
            temperature: 1.0,
            seed: 0,
            max_span_len: 8,
            literal_denominator: false,
        }
    }
}

impl TrainConfig {
    /// Settings for training the desk-size encoder from scratch on one CPU.
    /// Without a pretrained trunk the segmentation term needs a larger
    /// weight to hold its own against the contrastive term.
    pub fn desk() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            steps: 2_000,
            beta: 5.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.beta >= 0.0) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.learning_rate >= 0.0) {
            return bad(format!("learning rate must be >= 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.batch_size == 0 || self.max_pairs_per_sentence == 0 || self.max_span_len == 0 {
            return bad("batch_size, max_pairs_per_sentence and max_span_len must be >= 1".into());
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            beta: self.beta,
            temperature: self.temperature,
            literal_denominator: self.literal_denominator,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSentence {
    pub pair_id: u64,
    pub src_lang: String,
    pub tgt_lang: String,
    pub x: Vec<u32>,
    pub y: Vec<u32>,
}

impl BatchSentence {
    fn ids(&self, side: Side) -> &[u32] {
        match side {
            Side::Source => &self.x,
            Side::Target => &self.y,
        }
    }
}

/// A positive phrase pair; `sent` indexes `TrainingBatch::sentences`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPhrase {
    pub sent: usize,
    pub src: Span,
    pub tgt: Span,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSpan {
    pub sent: usize,
    pub side: Side,
    pub span: Span,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrainingBatch {
    pub sentences: Vec<BatchSentence>,
    pub phrases: Vec<BatchPhrase>,
    pub seg_spans: Vec<BatchSpan>,
}

/// The two independently seeded masks of one step. Every sentence gets its
/// own derived stream so no two sentences share a dropout pattern.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchMasks {
    pub z: DropoutMask,
    pub z_prime: DropoutMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum MaskKind {
    Z,
    ZPrime,
}

impl BatchMasks {
    pub fn none() -> Self {
        BatchMasks {
            z: DropoutMask::none(),
            z_prime: DropoutMask::none(),
        }
    }

    pub fn for_step(rate: f64, seed: u64, step: u64) -> Self {
        let base = DropoutMask::new(rate, seed).derive(step);
        BatchMasks {
            z: base.derive(0),
            z_prime: base.derive(1),
        }
    }

    /// Mask used for sentence `sent`, side `side` under `z` or `z'`.
    pub fn sentence_mask(&self, sent: usize, side: Side, prime: bool) -> DropoutMask {
        let base = if prime { self.z_prime } else { self.z };
        base.derive(2 * sent as u64 + (side == Side::Target) as u64)
    }

    fn mask(&self, key: EncKey) -> DropoutMask {
        self.sentence_mask(key.sent, key.side, key.kind == MaskKind::ZPrime)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub beta: f64,
    pub temperature: f64,
    pub literal_denominator: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        TrainConfig::default().loss_config()
    }
}

/// Per-step loss values, also the metrics-log line format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub l_align: f64,
    pub l_seg: f64,
    pub l_total: f64,
}

/// Both directions of the in-batch softmax loss for a K x K score matrix
/// `scores[i][j] = h_{x_i} . h_{y_j}`, with the gradient wrt the scores.
#[derive(Debug, Clone)]
pub struct InBatchLoss {
    pub l_xy: f64,
    pub l_yx: f64,
    pub grad: Array2<f64>,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Cross-entropy of row `i` against target column `i`, averaged over rows,
/// with its gradient accumulated into `grad` scaled by `scale`.
fn row_softmax_ce(scores: &Array2<f64>, positives: Option<&[f64]>, grad: &mut Array2<f64>, scale: f64) -> f64 {
    let k = scores.nrows();
    let mut total = 0.0;
    for i in 0..k {
        let row = scores.row(i);
        let lse = log_sum_exp(row.iter().copied());
        let pos = positives.map_or(scores[[i, i]], |p| p[i]);
        total += lse - pos;
        for j in 0..k {
            grad[[i, j]] += scale * (row[j] - lse).exp() / k as f64;
        }
        if positives.is_none() {
            grad[[i, i]] -= scale / k as f64;
        }
    }
    total / k as f64
}

pub fn in_batch_softmax_loss(scores: &Array2<f64>) -> Result<InBatchLoss> {
    let k = scores.nrows();
    if k == 0 || scores.ncols() != k {
        return Err(Error::Config(format!("score matrix must be square and non-empty, got {:?}", scores.dim())));
    }
    if !scores.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("alignment scores".into()));
    }
    let mut grad = Array2::zeros((k, k));
    let l_xy = row_softmax_ce(scores, None, &mut grad, 1.0);
    let mut grad_t = Array2::zeros((k, k));
    let l_yx = row_softmax_ce(&scores.t().to_owned(), None, &mut grad_t, 1.0);
    grad += &grad_t.t();
    Ok(InBatchLoss { l_xy, l_yx, grad })
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`,
/// plus the gradient wrt each logit (zero where the clamp is active).
pub fn binary_cross_entropy(logits: &[f64], labels: &[bool]) -> (f64, Vec<f64>) {
    const LO: f64 = 1e-7;
    let n = logits.len().max(1) as f64;
    let mut loss = 0.0;
    let grads = logits
        .iter()
        .zip(labels)
        .map(|(&x, &t)| {
            let p = 1.0 / (1.0 + (-x).exp());
            let clamped = p.clamp(LO, 1.0 - LO);
            loss -= if t { clamped.ln() } else { (1.0 - clamped).ln() };
            if clamped != p {
                0.0
            } else {
                (p - t as u8 as f64) / n
            }
        })
        .collect();
    (loss / n, grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct EncKey {
    sent: usize,
    side: Side,
    kind: MaskKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_xy: f64,
    pub l_yx: f64,
    pub l_align: f64,
    pub l_seg: f64,
    pub l_total: f64,
}

#[derive(Clone, Copy)]
struct Terms {
    align: bool,
    seg: bool,
}

struct Slot<F: Scalar> {
    enc: usize,
    cache: AlignHeadCache<F>,
    vec: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn score_matrix(a: &[&Slot<impl Scalar>], b: &[&Slot<impl Scalar>], tau: f64) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| dot(&a[i].vec, &b[j].vec) / tau)
}

/// `grad_a[i] += Σ_j g[i][j] b_j / tau` and `grad_b[j] += Σ_i g[i][j] a_i / tau`.
fn spread(g: &Array2<f64>, a: (&[&Slot<impl Scalar>], &mut [Vec<f64>]), b: (&[&Slot<impl Scalar>], &mut [Vec<f64>]), tau: f64) {
    let (av, ag) = a;
    let (bv, bg) = b;
    for ((i, j), &w) in g.indexed_iter() {
        if w == 0.0 {
            continue;
        }
        let w = w / tau;
        for (d, &v) in ag[i].iter_mut().zip(&bv[j].vec) {
            *d += w * v;
        }
        for (d, &v) in bg[j].iter_mut().zip(&av[i].vec) {
            *d += w * v;
        }
    }
}

const GRAD_CHUNK: usize = 8;

fn evaluate<F: Scalar>(
    batch: &TrainingBatch,
    params: &EncoderParams<F>,
    masks: &BatchMasks,
    lc: &LossConfig,
    terms: Terms,
    want_grads: bool,
) -> Result<(LossBreakdown, Option<EncoderParams<F>>)> {
    let k = batch.phrases.len();
    if terms.align && k == 0 {
        return Err(Error::Config("alignment loss needs at least one phrase pair".into()));
    }
    if terms.seg && batch.seg_spans.is_empty() {
        return Err(Error::Config("segmentation loss needs at least one labeled span".into()));
    }
    let literal = terms.align && lc.literal_denominator;

    let mut keys = Vec::new();
    for sent in 0..batch.sentences.len() {
        keys.push(EncKey { sent, side: Side::Source, kind: MaskKind::Z });
        keys.push(EncKey { sent, side: Side::Target, kind: MaskKind::ZPrime });
        if literal {
            keys.push(EncKey { sent, side: Side::Source, kind: MaskKind::ZPrime });
            keys.push(EncKey { sent, side: Side::Target, kind: MaskKind::Z });
        }
    }
    let key_index: HashMap<EncKey, usize> = keys.iter().enumerate().map(|(i, &k)| (k, i)).collect();
    let encoded: Vec<(HiddenStates<F>, TrunkCache<F>)> = keys
        .par_iter()
        .map(|&key| forward_trunk(batch.sentences[key.sent].ids(key.side), params, &masks.mask(key)))
        .collect::<Result<_>>()?;

    // Phrase-head evaluations, grouped as slot lists per role.
    let mut slots: Vec<Slot<F>> = Vec::new();
    let mut make_slot = |sent: usize, side: Side, kind: MaskKind, span: Span| -> Result<usize> {
        let enc = key_index[&EncKey { sent, side, kind }];
        let (v, cache) = align_head_forward(&encoded[enc].0, span.s, span.e, params)?;
        slots.push(Slot {
            enc,
            cache,
            vec: v.iter().map(|x| x.as_f64()).collect(),
        });
        Ok(slots.len() - 1)
    };
    let mut roles: Vec<Vec<usize>> = Vec::new();
    if terms.align {
        let mut role = |side: Side, kind: MaskKind| {
            batch
                .phrases
                .iter()
                .map(|p| make_slot(p.sent, side, kind, if side == Side::Source { p.src } else { p.tgt }))
                .collect::<Result<Vec<usize>>>()
        };
        roles.push(role(Side::Source, MaskKind::Z)?);
        roles.push(role(Side::Target, MaskKind::ZPrime)?);
        if literal {
            roles.push(role(Side::Source, MaskKind::ZPrime)?);
            roles.push(role(Side::Target, MaskKind::Z)?);
        }
    }

    let tau = lc.temperature;
    let mut slot_grads: Vec<Vec<f64>> = slots.iter().map(|s| vec![0.0; s.vec.len()]).collect();
    let (mut l_xy, mut l_yx) = (0.0, 0.0);
    if terms.align {
        let pick = |r: usize| roles[r].iter().map(|&i| &slots[i]).collect::<Vec<_>>();
        let (x, y) = (pick(0), pick(1));
        // Separate gradient buffers per role, folded into slot_grads below.
        let mut role_grads: Vec<Vec<Vec<f64>>> =
            roles.iter().map(|r| r.iter().map(|&i| vec![0.0; slots[i].vec.len()]).collect()).collect();
        if !literal {
            let loss = in_batch_softmax_loss(&score_matrix(&x, &y, tau))?;
            l_xy = loss.l_xy;
            l_yx = loss.l_yx;
            let (gx, rest) = role_grads.split_at_mut(1);
            spread(&loss.grad, (&x, &mut gx[0]), (&y, &mut rest[0]), tau);
        } else {
            let (xp, yz) = (pick(2), pick(3));
            let positives: Vec<f64> = x.iter().zip(&y).map(|(a, b)| dot(&a.vec, &b.vec) / tau).collect();
            let d = score_matrix(&x, &yz, tau);
            let d_rev = score_matrix(&y, &xp, tau);
            if !d.iter().chain(d_rev.iter()).chain(&positives).all(|v| v.is_finite()) {
                return Err(Error::NonFinite("alignment scores".into()));
            }
            let mut gd = Array2::zeros((k, k));
            let mut gd_rev = Array2::zeros((k, k));
            l_xy = row_softmax_ce(&d, Some(&positives), &mut gd, 1.0);
            l_yx = row_softmax_ce(&d_rev, Some(&positives), &mut gd_rev, 1.0);
            let gpos = Array2::from_diag(&ndarray::Array1::from_elem(k, -2.0 / k as f64));
            let [g0, g1, g2, g3] = &mut role_grads[..] else { unreachable!() };
            spread(&gpos, (&x, g0), (&y, g1), tau);
            spread(&gd, (&x, g0), (&yz, g3), tau);
            spread(&gd_rev, (&y, g1), (&xp, g2), tau);
        }
        for (role, grads) in roles.iter().zip(role_grads) {
            for (&slot, g) in role.iter().zip(grads) {
                slot_grads[slot] = g;
            }
        }
    }
    let l_align = l_xy + l_yx;

    // Segmentation spans grouped by the encoding that scores them.
    let mut seg_by_enc: Vec<(Vec<(usize, usize)>, Vec<bool>)> = vec![(Vec::new(), Vec::new()); keys.len()];
    let mut l_seg = 0.0;
    let mut seg_dlogits: Vec<Vec<f64>> = vec![Vec::new(); keys.len()];
    if terms.seg {
        for sp in &batch.seg_spans {
            let kind = if sp.side == Side::Source { MaskKind::Z } else { MaskKind::ZPrime };
            let enc = key_index[&EncKey { sent: sp.sent, side: sp.side, kind }];
            seg_by_enc[enc].0.push((sp.span.s, sp.span.e));
            seg_by_enc[enc].1.push(sp.label);
        }
        let mut logits = Vec::new();
        let mut labels = Vec::new();
        for (enc, (spans, lab)) in seg_by_enc.iter().enumerate() {
            if !spans.is_empty() {
                logits.extend(seg_head_logits(&encoded[enc].0, spans, params)?.into_iter().map(|v| v.as_f64()));
                labels.extend_from_slice(lab);
            }
        }
        let (loss, grads) = binary_cross_entropy(&logits, &labels);
        l_seg = loss;
        let weight = if terms.align { lc.beta } else { 1.0 };
        let mut it = grads.into_iter();
        for (enc, (spans, _)) in seg_by_enc.iter().enumerate() {
            seg_dlogits[enc] = it.by_ref().take(spans.len()).map(|g| g * weight).collect();
        }
    }
    let l_total = match (terms.align, terms.seg) {
        (true, true) => l_align + lc.beta * l_seg,
        (true, false) => l_align,
        _ => l_seg,
    };
    if !l_total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let breakdown = LossBreakdown {
        l_xy,
        l_yx,
        l_align,
        l_seg,
        l_total,
    };
    if !want_grads {
        return Ok((breakdown, None));
    }

    let mut slots_by_enc: Vec<Vec<usize>> = vec![Vec::new(); keys.len()];
    for (i, s) in slots.iter().enumerate() {
        slots_by_enc[s.enc].push(i);
    }
    let backward_one = |enc: usize, grads: &mut EncoderParams<F>| {
        let (h, cache) = &encoded[enc];
        let mut dh = Array2::zeros((h.rows(), h.dim()));
        for &i in &slots_by_enc[enc] {
            let g: Vec<F> = slot_grads[i].iter().map(|&v| F::lit(v)).collect();
            align_head_backward(&slots[i].cache, &g, params, grads, &mut dh);
        }
        let (spans, _) = &seg_by_enc[enc];
        if !spans.is_empty() {
            let g: Vec<F> = seg_dlogits[enc].iter().map(|&v| F::lit(v)).collect();
            seg_head_backward(h, spans, &g, params, grads, &mut dh);
        }
        backward_trunk(cache, params, &dh, grads);
    };
    // Fixed-size chunks reduced in order keep the sum independent of the
    // thread count.
    let encs: Vec<usize> = (0..keys.len()).collect();
    let partial: Vec<EncoderParams<F>> = encs
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = params.zeros_like();
            for &enc in chunk {
                backward_one(enc, &mut g);
            }
            g
        })
        .collect();
    let mut grads = params.zeros_like();
    for p in &partial {
        grads.add_scaled(p, F::one());
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradients".into()));
    }
    Ok((breakdown, Some(grads)))
}

/// `L_align = L_{x->y} + L_{y->x}`.
pub fn alignment_loss<F: Scalar>(
    batch: &TrainingBatch,
    params: &EncoderParams<F>,
    masks: &BatchMasks,
    lc: &LossConfig,
) -> Result<LossBreakdown> {
    evaluate(batch, params, masks, lc, Terms { align: true, seg: false }, false).map(|(l, _)| l)
}

/// Mean BCE over the batch's labeled spans. Source spans are read under `z`,
/// target spans under `z'`.
pub fn segmentation_loss<F: Scalar>(batch: &TrainingBatch, params: &EncoderParams<F>, masks: &BatchMasks) -> Result<f64> {
    evaluate(batch, params, masks, &LossConfig::default(), Terms { align: false, seg: true }, false).map(|(l, _)| l.l_seg)
}

/// `L = L_align + beta * L_seg` and its gradient wrt every parameter.
pub fn loss_and_grads<F: Scalar>(
    batch: &TrainingBatch,
    params: &EncoderParams<F>,
    masks: &BatchMasks,
    lc: &LossConfig,
) -> Result<(LossBreakdown, EncoderParams<F>)> {
    let terms = Terms {
        align: true,
        seg: !batch.seg_spans.is_empty(),
    };
    let (loss, grads) = evaluate(batch, params, masks, lc, terms, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

/// Adam moments, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F: Scalar = f32> {
    pub m: EncoderParams<F>,
    pub v: EncoderParams<F>,
    pub step: u64,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<F: Scalar> OptimizerState<F> {
    pub fn new(params: &EncoderParams<F>) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn apply(&mut self, params: &mut EncoderParams<F>, grads: &EncoderParams<F>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (F::lit(ADAM_B1), F::lit(ADAM_B2));
        let c1 = F::lit(1.0 - ADAM_B1.powi(t));
        let c2 = F::lit(1.0 - ADAM_B2.powi(t));
        let (lr, eps) = (F::lit(lr), F::lit(ADAM_EPS));
        let mut ms = self.m.tensors_mut();
        let mut vs = self.v.tensors_mut();
        for (i, (p, g)) in params.tensors_mut().into_iter().zip(grads.tensors()).enumerate() {
            let (m, v) = (&mut ms[i], &mut vs[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (F::one() - b1) * g[j];
                v[j] = b2 * v[j] + (F::one() - b2) * g[j] * g[j];
                let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                p[j] -= update;
            }
        }
    }
}

/// One optimisation step on `params`. On error (e.g. non-finite gradients)
/// neither the parameters nor the optimizer state are touched.
pub fn train_step(
    batch: &TrainingBatch,
    params: &mut EncoderParams<f32>,
    opt: &mut OptimizerState<f32>,
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    let step = opt.step;
    let masks = BatchMasks::for_step(cfg.dropout, cfg.seed, step);
    let (loss, grads) = loss_and_grads(batch, params, &masks, &cfg.loss_config())?;
    opt.apply(params, &grads, cfg.learning_rate);
    Ok(StepMetrics {
        step: step + 1,
        l_align: loss.l_align,
        l_seg: loss.l_seg,
        l_total: loss.l_total,
    })
}

/// Runs `cfg.steps` steps, calling `on_step` after each one.
pub fn train<I, C>(
    params: &mut EncoderParams<f32>,
    opt: &mut OptimizerState<f32>,
    batches: I,
    cfg: &TrainConfig,
    mut on_step: C,
) -> Result<Vec<StepMetrics>>
where
    I: IntoIterator<Item = TrainingBatch>,
    C: FnMut(&StepMetrics) -> Result<()>,
{
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.steps);
    for batch in batches.into_iter().take(cfg.steps) {
        let m = train_step(&batch, params, opt, cfg)?;
        on_step(&m)?;
        out.push(m);
    }
    Ok(out)
}

/// Endless, seed-determined stream of shuffled batches. Sentence pairs from
/// every language pair in `corpus` are mixed; pairs without any phrase pair
/// are skipped.
pub struct BatchStream<'a> {
    corpus: &'a [SentencePair],
    by_pair: Vec<Vec<PhrasePair>>,
    lexicon: &'a Lexicon,
    max_positions: usize,
    cfg: TrainConfig,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

pub fn make_batches<'a>(
    corpus: &'a [SentencePair],
    phrases: &[PhrasePair],
    lexicon: &'a Lexicon,
    max_positions: usize,
    cfg: &TrainConfig,
) -> BatchStream<'a> {
    let mut by_pair = vec![Vec::new(); corpus.len()];
    for pp in phrases {
        if pp.src.e < max_positions && pp.tgt.e < max_positions {
            by_pair[pp.pair_index].push(*pp);
        }
    }
    let order = (0..corpus.len()).filter(|&i| !by_pair[i].is_empty()).collect();
    BatchStream {
        corpus,
        by_pair,
        lexicon,
        max_positions,
        cfg: cfg.clone(),
        order,
        pos: usize::MAX,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    }
}

impl BatchStream<'_> {
    /// Number of sentence pairs that can contribute to a batch.
    pub fn eligible(&self) -> usize {
        self.order.len()
    }

    fn ids(&self, tokens: &crate::corpus::Sentence) -> Vec<u32> {
        let mut ids = self.lexicon.encode(tokens);
        ids.truncate(self.max_positions);
        ids
    }

    fn add_sentence<R: Rng>(&self, batch: &mut TrainingBatch, index: usize, rng: &mut R) {
        let pair = &self.corpus[index];
        let sent = batch.sentences.len();
        let x = self.ids(&pair.x);
        let y = self.ids(&pair.y);
        let all = &self.by_pair[index];
        let drawn: Vec<&PhrasePair> = all.choose_multiple(rng, self.cfg.max_pairs_per_sentence).collect();
        batch
            .phrases
            .extend(drawn.iter().map(|pp| BatchPhrase { sent, src: pp.src, tgt: pp.tgt }));
        for (side, len) in [(Side::Source, x.len()), (Side::Target, y.len())] {
            let positives: Vec<Span> = all
                .iter()
                .map(|pp| if side == Side::Source { pp.src } else { pp.tgt })
                .collect();
            for ls in segmentation_examples(&positives, len, self.cfg.max_span_len, rng) {
                batch.seg_spans.push(BatchSpan {
                    sent,
                    side,
                    span: ls.span,
                    label: ls.is_phrase,
                });
            }
        }
        batch.sentences.push(BatchSentence {
            pair_id: pair.id,
            src_lang: pair.x.language.clone(),
            tgt_lang: pair.y.language.clone(),
            x,
            y,
        });
    }
}

impl Iterator for BatchStream<'_> {
    type Item = TrainingBatch;

    fn next(&mut self) -> Option<TrainingBatch> {
        if self.order.is_empty() {
            return None;
        }
        let mut batch = TrainingBatch::default();
        let size = self.cfg.batch_size.min(self.order.len());
        let mut rng = self.rng.clone();
        while batch.sentences.len() < size {
            if self.pos >= self.order.len() {
                self.order.shuffle(&mut rng);
                self.pos = 0;
            }
            let index = self.order[self.pos];
            self.pos += 1;
            self.add_sentence(&mut batch, index, &mut rng);
        }
        self.rng = rng;
        Some(batch)
    }
}
