//! Pre-LN Transformer trunk with explicit forward caches and backward pass.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::dropout::Site;
use super::{DropoutMask, EncoderParams, HiddenStates, LayerParams, Scalar};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

struct LnCache<F: Scalar> {
    xhat: Array2<F>,
    rstd: Array1<F>,
}

fn layer_norm<F: Scalar>(x: &Array2<F>, g: &Array1<F>, b: &Array1<F>) -> (Array2<F>, LnCache<F>) {
    let d = F::lit(x.ncols() as f64);
    let eps = F::lit(LN_EPS);
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<F>() / d;
        *r = F::one() / (var + eps).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward<F: Scalar>(
    dy: &Array2<F>,
    cache: &LnCache<F>,
    g: &Array1<F>,
    dg: &mut Array1<F>,
    db: &mut Array1<F>,
) -> Array2<F> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let d = F::lit(dy.ncols() as f64);
    let mut dx = dy * g;
    for ((mut row, xh), &r) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.rstd) {
        let mean_d = row.sum() / d;
        let mean_dx = row.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>() / d;
        Zip::from(&mut row).and(&xh).for_each(|v, &h| *v = r * (*v - mean_d - h * mean_dx));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub(crate) fn gelu<F: Scalar>(u: F) -> F {
    let c = F::lit(GELU_C);
    let k = F::lit(0.044715);
    let half = F::lit(0.5);
    half * u * (F::one() + (c * (u + k * u * u * u)).tanh())
}

pub(crate) fn gelu_grad<F: Scalar>(u: F) -> F {
    let c = F::lit(GELU_C);
    let k = F::lit(0.044715);
    let half = F::lit(0.5);
    let t = (c * (u + k * u * u * u)).tanh();
    half * (F::one() + t) + half * u * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * k * u * u)
}

fn linear<F: Scalar>(x: &Array2<F>, w: &Array2<F>, b: &Array1<F>) -> Array2<F> {
    x.dot(w) + b
}

/// Accumulates weight/bias gradients of `y = x W + b` and returns dx.
fn linear_backward<F: Scalar>(
    x: &Array2<F>,
    w: &Array2<F>,
    dy: &Array2<F>,
    dw: &mut Array2<F>,
    db: &mut Array1<F>,
) -> Array2<F> {
    ndarray::linalg::general_mat_mul(F::one(), &x.t(), dy, F::one(), dw);
    *db += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

struct LayerCache<F: Scalar> {
    ln1: LnCache<F>,
    a: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// Per head: softmax output before dropout, and the dropout multiplier.
    probs: Vec<(Array2<F>, Option<Array2<F>>)>,
    ctx: Array2<F>,
    ln2: LnCache<F>,
    b: Array2<F>,
    u: Array2<F>,
    g: Array2<F>,
    ffn_mask: Option<Array2<F>>,
}

/// Everything the backward pass needs from one forward pass.
pub struct TrunkCache<F: Scalar> {
    ids: Vec<u32>,
    emb_mask: Option<Array2<F>>,
    layers: Vec<LayerCache<F>>,
    lnf: LnCache<F>,
}

impl<F: Scalar> TrunkCache<F> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn softmax_rows<F: Scalar>(s: &mut Array2<F>) {
    for mut row in s.rows_mut() {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn check_ids<F: Scalar>(ids: &[u32], params: &EncoderParams<F>) -> Result<()> {
    let cfg = &params.config;
    if ids.is_empty() {
        return Err(Error::Config("cannot encode an empty sequence".into()));
    }
    if ids.len() > cfg.max_positions {
        return Err(Error::SequenceTooLong {
            len: ids.len(),
            max: cfg.max_positions,
        });
    }
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id: bad as usize,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

fn layer_forward<F: Scalar>(
    x: &Array2<F>,
    p: &LayerParams<F>,
    layer: usize,
    heads: usize,
    mask: &DropoutMask,
) -> (Array2<F>, LayerCache<F>) {
    let n = x.nrows();
    let d = x.ncols();
    let dh = d / heads;
    let scale = F::lit(1.0 / (dh as f64).sqrt());

    let (a, ln1) = layer_norm(x, &p.ln1_g, &p.ln1_b);
    let q = linear(&a, &p.wq, &p.bq);
    let k = linear(&a, &p.wk, &p.bk);
    let v = linear(&a, &p.wv, &p.bv);
    let mut ctx = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut sc = q.slice(cols).dot(&k.slice(cols).t());
        sc.mapv_inplace(|v| v * scale);
        softmax_rows(&mut sc);
        let m = mask.site::<F>(Site::Attention { layer, head: h }, n, n);
        let out = match &m {
            Some(m) => (&sc * m).dot(&v.slice(cols)),
            None => sc.dot(&v.slice(cols)),
        };
        ctx.slice_mut(cols).assign(&out);
        probs.push((sc, m));
    }
    let x1 = x + &linear(&ctx, &p.wo, &p.bo);
    let (b, ln2) = layer_norm(&x1, &p.ln2_g, &p.ln2_b);
    let u = linear(&b, &p.w1, &p.b1);
    let g = u.mapv(gelu);
    let mut f = linear(&g, &p.w2, &p.b2);
    let ffn_mask = mask.site::<F>(Site::FeedForward { layer }, n, d);
    if let Some(m) = &ffn_mask {
        f *= m;
    }
    let out = x1 + f;
    (
        out,
        LayerCache {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            ctx,
            ln2,
            b,
            u,
            g,
            ffn_mask,
        },
    )
}

fn layer_backward<F: Scalar>(
    dout: Array2<F>,
    c: &LayerCache<F>,
    p: &LayerParams<F>,
    gp: &mut LayerParams<F>,
    heads: usize,
) -> Array2<F> {
    let d = dout.ncols();
    let dh = d / heads;
    let scale = F::lit(1.0 / (dh as f64).sqrt());

    // Feed-forward branch.
    let mut df = dout.clone();
    if let Some(m) = &c.ffn_mask {
        df *= m;
    }
    let mut dg = linear_backward(&c.g, &p.w2, &df, &mut gp.w2, &mut gp.b2);
    Zip::from(&mut dg).and(&c.u).for_each(|g, &u| *g = *g * gelu_grad(u));
    let db = linear_backward(&c.b, &p.w1, &dg, &mut gp.w1, &mut gp.b1);
    let mut dx1 = dout;
    dx1 += &layer_norm_backward(&db, &c.ln2, &p.ln2_g, &mut gp.ln2_g, &mut gp.ln2_b);

    // Attention branch.
    let dctx = linear_backward(&c.ctx, &p.wo, &dx1, &mut gp.wo, &mut gp.bo);
    let n = dctx.nrows();
    let mut dq = Array2::zeros((n, d));
    let mut dk = Array2::zeros((n, d));
    let mut dv = Array2::zeros((n, d));
    for (h, (probs, m)) in c.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dctx_h: ArrayView2<F> = dctx.slice(cols);
        let dropped;
        let pd = match m {
            Some(m) => {
                dropped = probs * m;
                &dropped
            }
            None => probs,
        };
        dv.slice_mut(cols).assign(&pd.t().dot(&dctx_h));
        let mut dp = dctx_h.dot(&c.v.slice(cols).t());
        if let Some(m) = m {
            dp *= m;
        }
        // Softmax backward, row by row.
        for (mut drow, prow) in dp.rows_mut().into_iter().zip(probs.rows()) {
            let dot = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum::<F>();
            Zip::from(&mut drow).and(&prow).for_each(|ds, &pv| *ds = pv * (*ds - dot) * scale);
        }
        dq.slice_mut(cols).assign(&dp.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&dp.t().dot(&c.q.slice(cols)));
    }
    let mut da = linear_backward(&c.a, &p.wq, &dq, &mut gp.wq, &mut gp.bq);
    da += &linear_backward(&c.a, &p.wk, &dk, &mut gp.wk, &mut gp.bk);
    da += &linear_backward(&c.a, &p.wv, &dv, &mut gp.wv, &mut gp.bv);
    dx1 + layer_norm_backward(&da, &c.ln1, &p.ln1_g, &mut gp.ln1_g, &mut gp.ln1_b)
}

/// Encodes one token-id sequence, keeping the activations for backprop.
pub fn forward_trunk<F: Scalar>(
    ids: &[u32],
    params: &EncoderParams<F>,
    mask: &DropoutMask,
) -> Result<(HiddenStates<F>, TrunkCache<F>)> {
    check_ids(ids, params)?;
    let n = ids.len();
    let d = params.config.d_model;
    let mut x = Array2::zeros((n, d));
    for (t, &id) in ids.iter().enumerate() {
        let mut row = x.row_mut(t);
        row.assign(&params.tok_emb.row(id as usize));
        row += &params.pos_emb.row(t);
    }
    let emb_mask = mask.site::<F>(Site::Embedding, n, d);
    if let Some(m) = &emb_mask {
        x *= m;
    }
    let mut layers = Vec::with_capacity(params.layers.len());
    for (l, p) in params.layers.iter().enumerate() {
        let (out, cache) = layer_forward(&x, p, l, params.config.heads, mask);
        x = out;
        layers.push(cache);
    }
    let (h, lnf) = layer_norm(&x, &params.lnf_g, &params.lnf_b);
    Ok((
        HiddenStates(h),
        TrunkCache {
            ids: ids.to_vec(),
            emb_mask,
            layers,
            lnf,
        },
    ))
}

/// `ContextEncoder(x, z)`: contextual states for one sequence.
pub fn encode_context<F: Scalar>(ids: &[u32], params: &EncoderParams<F>, mask: &DropoutMask) -> Result<HiddenStates<F>> {
    forward_trunk(ids, params, mask).map(|(h, _)| h)
}

/// Backpropagates `dh` (same shape as the hidden states) through the trunk,
/// accumulating into `grads`.
pub fn backward_trunk<F: Scalar>(
    cache: &TrunkCache<F>,
    params: &EncoderParams<F>,
    dh: &Array2<F>,
    grads: &mut EncoderParams<F>,
) {
    let mut dx = layer_norm_backward(dh, &cache.lnf, &params.lnf_g, &mut grads.lnf_g, &mut grads.lnf_b);
    for ((c, p), gp) in cache.layers.iter().zip(&params.layers).zip(&mut grads.layers).rev() {
        dx = layer_backward(dx, c, p, gp, params.config.heads);
    }
    if let Some(m) = &cache.emb_mask {
        dx *= m;
    }
    for (t, &id) in cache.ids.iter().enumerate() {
        let row = dx.row(t);
        let mut te = grads.tok_emb.row_mut(id as usize);
        te += &row;
        let mut pe = grads.pos_emb.row_mut(t);
        pe += &row;
    }
}
