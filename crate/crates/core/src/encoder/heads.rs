//! Span heads over the shared trunk states.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};

use super::trunk::{gelu, gelu_grad};
use super::{EncoderParams, HiddenStates, PhraseVector, Scalar};
use crate::error::{Error, Result};

fn check_span<F: Scalar>(h: &HiddenStates<F>, s: usize, e: usize) -> Result<()> {
    if s > e || e >= h.rows() {
        return Err(Error::SpanOutOfRange { s, e, len: h.rows() });
    }
    Ok(())
}

fn boundary<F: Scalar>(h: &HiddenStates<F>, s: usize, e: usize) -> Array1<F> {
    concatenate(Axis(0), &[h.0.row(s), h.0.row(e)]).expect("equal widths")
}

fn outer_add<F: Scalar>(dst: &mut Array2<F>, a: ArrayView1<F>, b: ArrayView1<F>) {
    ndarray::linalg::general_mat_mul(F::one(), &a.insert_axis(Axis(1)), &b.insert_axis(Axis(0)), F::one(), dst);
}

/// Activations of one phrase-head evaluation.
#[derive(Debug, Clone)]
pub struct AlignHeadCache<F: Scalar> {
    s: usize,
    e: usize,
    input: Array1<F>,
    pre: Option<Array1<F>>,
}

pub fn align_head_forward<F: Scalar>(
    h: &HiddenStates<F>,
    s: usize,
    e: usize,
    params: &EncoderParams<F>,
) -> Result<(PhraseVector<F>, AlignHeadCache<F>)> {
    check_span(h, s, e)?;
    let input = boundary(h, s, e);
    let (out, pre) = if params.config.align_hidden {
        let pre = input.dot(&params.align_w1) + &params.align_b1;
        let act = pre.mapv(gelu);
        (act.dot(&params.align_w2) + &params.align_b2, Some(pre))
    } else {
        (input.dot(&params.align_w2) + &params.align_b2, None)
    };
    Ok((out.to_vec(), AlignHeadCache { s, e, input, pre }))
}

/// Accumulates head-weight gradients into `grads` and boundary-state
/// gradients into `dh`.
pub fn align_head_backward<F: Scalar>(
    cache: &AlignHeadCache<F>,
    dout: &[F],
    params: &EncoderParams<F>,
    grads: &mut EncoderParams<F>,
    dh: &mut Array2<F>,
) {
    let dout = ArrayView1::from(dout);
    grads.align_b2 += &dout;
    let din = match &cache.pre {
        Some(pre) => {
            let act = pre.mapv(gelu);
            outer_add(&mut grads.align_w2, act.view(), dout);
            let mut dpre = params.align_w2.dot(&dout);
            dpre.zip_mut_with(pre, |g, &z| *g = *g * gelu_grad(z));
            outer_add(&mut grads.align_w1, cache.input.view(), dpre.view());
            grads.align_b1 += &dpre;
            params.align_w1.dot(&dpre)
        }
        None => {
            outer_add(&mut grads.align_w2, cache.input.view(), dout);
            params.align_w2.dot(&dout)
        }
    };
    let d = dh.ncols();
    let mut row = dh.row_mut(cache.s);
    row += &din.slice(s![..d]);
    let mut row = dh.row_mut(cache.e);
    row += &din.slice(s![d..]);
}

/// `MLP_align([H_s; H_e])`.
pub fn phrase_rep<F: Scalar>(h: &HiddenStates<F>, s: usize, e: usize, params: &EncoderParams<F>) -> Result<PhraseVector<F>> {
    align_head_forward(h, s, e, params).map(|(v, _)| v)
}

/// Raw segmentation logit `MLP_seg([H_i; H_j])`.
pub fn span_logit<F: Scalar>(h: &HiddenStates<F>, i: usize, j: usize, params: &EncoderParams<F>) -> Result<F> {
    check_span(h, i, j)?;
    let input = boundary(h, i, j);
    let last = if params.config.seg_hidden > 0 {
        (input.dot(&params.seg_w1) + &params.seg_b1).mapv(gelu)
    } else {
        input
    };
    Ok(last.dot(&params.seg_w) + params.seg_b[0])
}

/// Sigmoid with a guard that keeps the result strictly inside (0, 1).
pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    let p = if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let ex = x.exp();
        ex / (F::one() + ex)
    };
    let eps = F::epsilon();
    p.max(eps).min(F::one() - eps)
}

/// `P(T = 1)` for span `(i, j)`.
pub fn span_prob<F: Scalar>(h: &HiddenStates<F>, i: usize, j: usize, params: &EncoderParams<F>) -> Result<F> {
    span_logit(h, i, j, params).map(sigmoid)
}

/// Start and end projections of every row. The first layer of the head is
/// split into a start half and an end half, so each row is projected once
/// and a span only costs an add.
fn seg_projections<F: Scalar>(h: &HiddenStates<F>, params: &EncoderParams<F>) -> (Array2<F>, Array2<F>) {
    let d = h.dim();
    if params.config.seg_hidden > 0 {
        (h.0.dot(&params.seg_w1.slice(s![..d, ..])), h.0.dot(&params.seg_w1.slice(s![d.., ..])))
    } else {
        let col = |w: ArrayView1<F>| h.0.dot(&w).insert_axis(Axis(1));
        (col(params.seg_w.slice(s![..d])), col(params.seg_w.slice(s![d..])))
    }
}

/// Hidden pre-activation for span `(i, j)`, or the logit itself when the head
/// is linear.
fn seg_pre<F: Scalar>(start: &Array2<F>, end: &Array2<F>, i: usize, j: usize, params: &EncoderParams<F>) -> Array1<F> {
    let mut z = &start.row(i) + &end.row(j);
    if params.config.seg_hidden > 0 {
        z += &params.seg_b1;
    }
    z
}

/// Logits for many spans of one sentence.
pub fn seg_head_logits<F: Scalar>(h: &HiddenStates<F>, spans: &[(usize, usize)], params: &EncoderParams<F>) -> Result<Vec<F>> {
    let (start, end) = seg_projections(h, params);
    spans
        .iter()
        .map(|&(i, j)| {
            check_span(h, i, j)?;
            let z = seg_pre(&start, &end, i, j, params);
            let out = if params.config.seg_hidden > 0 {
                z.mapv(gelu).dot(&params.seg_w)
            } else {
                z[0]
            };
            Ok(out + params.seg_b[0])
        })
        .collect()
}

/// Backward of [`seg_head_logits`] given per-span logit gradients.
pub fn seg_head_backward<F: Scalar>(
    h: &HiddenStates<F>,
    spans: &[(usize, usize)],
    dlogits: &[F],
    params: &EncoderParams<F>,
    grads: &mut EncoderParams<F>,
    dh: &mut Array2<F>,
) {
    let d = h.dim();
    let (start, end) = seg_projections(h, params);
    let width = start.ncols();
    let mut dstart = Array2::<F>::zeros((h.rows(), width));
    let mut dend = Array2::<F>::zeros((h.rows(), width));
    for (&(i, j), &g) in spans.iter().zip(dlogits) {
        if g == F::zero() {
            continue;
        }
        grads.seg_b[0] += g;
        let dz = if params.config.seg_hidden > 0 {
            let z = seg_pre(&start, &end, i, j, params);
            grads.seg_w.scaled_add(g, &z.mapv(gelu));
            let mut dz = &params.seg_w * g;
            dz.zip_mut_with(&z, |v, &x| *v = *v * gelu_grad(x));
            grads.seg_b1 += &dz;
            dz
        } else {
            Array1::from_elem(1, g)
        };
        dstart.row_mut(i).scaled_add(F::one(), &dz);
        dend.row_mut(j).scaled_add(F::one(), &dz);
    }
    let mm = |a: &ndarray::ArrayView2<F>, b: &ndarray::ArrayView2<F>, c: &mut ndarray::ArrayViewMut2<F>| {
        ndarray::linalg::general_mat_mul(F::one(), a, b, F::one(), c)
    };
    if params.config.seg_hidden > 0 {
        let (ws, we) = (params.seg_w1.slice(s![..d, ..]), params.seg_w1.slice(s![d.., ..]));
        mm(&h.0.t(), &dstart.view(), &mut grads.seg_w1.slice_mut(s![..d, ..]));
        mm(&h.0.t(), &dend.view(), &mut grads.seg_w1.slice_mut(s![d.., ..]));
        mm(&dstart.view(), &ws.t(), &mut dh.view_mut());
        mm(&dend.view(), &we.t(), &mut dh.view_mut());
    } else {
        let (ds, de) = (dstart.column(0), dend.column(0));
        grads.seg_w.slice_mut(s![..d]).scaled_add(F::one(), &h.0.t().dot(&ds));
        grads.seg_w.slice_mut(s![d..]).scaled_add(F::one(), &h.0.t().dot(&de));
        outer_add(dh, ds, params.seg_w.slice(s![..d]));
        outer_add(dh, de, params.seg_w.slice(s![d..]));
    }
}
