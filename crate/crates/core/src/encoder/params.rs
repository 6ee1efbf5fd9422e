use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{EncoderConfig, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F: Scalar> {
    pub ln1_g: Array1<F>,
    pub ln1_b: Array1<F>,
    pub wq: Array2<F>,
    pub bq: Array1<F>,
    pub wk: Array2<F>,
    pub bk: Array1<F>,
    pub wv: Array2<F>,
    pub bv: Array1<F>,
    pub wo: Array2<F>,
    pub bo: Array1<F>,
    pub ln2_g: Array1<F>,
    pub ln2_b: Array1<F>,
    pub w1: Array2<F>,
    pub b1: Array1<F>,
    pub w2: Array2<F>,
    pub b2: Array1<F>,
}

/// All trainable weights. The same struct doubles as the gradient buffer and
/// as optimizer moment storage.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<F: Scalar = f32> {
    pub config: EncoderConfig,
    pub tok_emb: Array2<F>,
    pub pos_emb: Array2<F>,
    pub layers: Vec<LayerParams<F>>,
    pub lnf_g: Array1<F>,
    pub lnf_b: Array1<F>,
    /// Hidden layer of the phrase head; empty (0x0) when `align_hidden` is off.
    pub align_w1: Array2<F>,
    pub align_b1: Array1<F>,
    pub align_w2: Array2<F>,
    pub align_b2: Array1<F>,
    /// Hidden layer of the segmentation head; empty when `seg_hidden` is 0.
    pub seg_w1: Array2<F>,
    pub seg_b1: Array1<F>,
    pub seg_w: Array1<F>,
    pub seg_b: Array1<F>,
}

fn gaussian<F: Scalar, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<F> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn((rows, cols), |_| F::lit(dist.sample(rng)))
}

impl<F: Scalar> EncoderParams<F> {
    pub fn zeros(config: &EncoderConfig) -> Self {
        let d = config.d_model;
        let z2 = |r, c| Array2::zeros((r, c));
        let z1 = |n| Array1::zeros(n);
        let hidden = if config.align_hidden { 2 * d } else { 0 };
        let align_in = if config.align_hidden { hidden } else { 2 * d };
        EncoderParams {
            config: config.clone(),
            tok_emb: z2(config.vocab_size, d),
            pos_emb: z2(config.max_positions, d),
            layers: (0..config.layers)
                .map(|_| LayerParams {
                    ln1_g: z1(d),
                    ln1_b: z1(d),
                    wq: z2(d, d),
                    bq: z1(d),
                    wk: z2(d, d),
                    bk: z1(d),
                    wv: z2(d, d),
                    bv: z1(d),
                    wo: z2(d, d),
                    bo: z1(d),
                    ln2_g: z1(d),
                    ln2_b: z1(d),
                    w1: z2(d, config.ffn_dim),
                    b1: z1(config.ffn_dim),
                    w2: z2(config.ffn_dim, d),
                    b2: z1(d),
                })
                .collect(),
            lnf_g: z1(d),
            lnf_b: z1(d),
            align_w1: z2(if config.align_hidden { 2 * d } else { 0 }, hidden),
            align_b1: z1(hidden),
            align_w2: z2(align_in, config.out_dim),
            align_b2: z1(config.out_dim),
            seg_w1: z2(if config.seg_hidden > 0 { 2 * d } else { 0 }, config.seg_hidden),
            seg_b1: z1(config.seg_hidden),
            seg_w: z1(if config.seg_hidden > 0 { config.seg_hidden } else { 2 * d }),
            seg_b: z1(1),
        }
    }

    /// Random initialisation: N(0, 0.02) embeddings, N(0, 1/fan_in) linear
    /// weights, zero biases, unit LayerNorm gains.
    pub fn init<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let d = config.d_model;
        let scaled = |rng: &mut R, r: usize, c: usize| gaussian::<F, R>(rng, r, c, (1.0 / r.max(1) as f64).sqrt());
        p.tok_emb = gaussian(rng, config.vocab_size, d, 0.02);
        p.pos_emb = gaussian(rng, config.max_positions, d, 0.02);
        for layer in &mut p.layers {
            layer.ln1_g.fill(F::one());
            layer.ln2_g.fill(F::one());
            layer.wq = scaled(rng, d, d);
            layer.wk = scaled(rng, d, d);
            layer.wv = scaled(rng, d, d);
            layer.wo = scaled(rng, d, d);
            layer.w1 = scaled(rng, d, config.ffn_dim);
            layer.w2 = scaled(rng, config.ffn_dim, d);
        }
        p.lnf_g.fill(F::one());
        if config.align_hidden {
            p.align_w1 = scaled(rng, 2 * d, 2 * d);
        }
        let (r, c) = p.align_w2.dim();
        p.align_w2 = scaled(rng, r, c);
        if config.seg_hidden > 0 {
            p.seg_w1 = scaled(rng, 2 * d, config.seg_hidden);
        }
        p.seg_w = scaled(rng, p.seg_w.len(), 1).column(0).to_owned();
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// `(name, shape)` of every tensor, in a fixed order.
    pub fn tensor_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.shape().to_vec()),
            ("pos_emb".to_string(), self.pos_emb.shape().to_vec()),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            let named: [(&str, &[usize]); 16] = [
                ("ln1_g", layer.ln1_g.shape()),
                ("ln1_b", layer.ln1_b.shape()),
                ("wq", layer.wq.shape()),
                ("bq", layer.bq.shape()),
                ("wk", layer.wk.shape()),
                ("bk", layer.bk.shape()),
                ("wv", layer.wv.shape()),
                ("bv", layer.bv.shape()),
                ("wo", layer.wo.shape()),
                ("bo", layer.bo.shape()),
                ("ln2_g", layer.ln2_g.shape()),
                ("ln2_b", layer.ln2_b.shape()),
                ("w1", layer.w1.shape()),
                ("b1", layer.b1.shape()),
                ("w2", layer.w2.shape()),
                ("b2", layer.b2.shape()),
            ];
            out.extend(named.iter().map(|(n, s)| (format!("layers.{l}.{n}"), s.to_vec())));
        }
        let tail: [(&str, &[usize]); 10] = [
            ("lnf_g", self.lnf_g.shape()),
            ("lnf_b", self.lnf_b.shape()),
            ("align_w1", self.align_w1.shape()),
            ("align_b1", self.align_b1.shape()),
            ("align_w2", self.align_w2.shape()),
            ("align_b2", self.align_b2.shape()),
            ("seg_w1", self.seg_w1.shape()),
            ("seg_b1", self.seg_b1.shape()),
            ("seg_w", self.seg_w.shape()),
            ("seg_b", self.seg_b.shape()),
        ];
        out.extend(tail.iter().map(|(n, s)| (n.to_string(), s.to_vec())));
        out
    }

    /// Flat views of every tensor in [`tensor_specs`](Self::tensor_specs) order.
    pub fn tensors(&self) -> Vec<&[F]> {
        let mut out: Vec<&[F]> = vec![slice2(&self.tok_emb), slice2(&self.pos_emb)];
        for l in &self.layers {
            out.extend([
                slice1(&l.ln1_g),
                slice1(&l.ln1_b),
                slice2(&l.wq),
                slice1(&l.bq),
                slice2(&l.wk),
                slice1(&l.bk),
                slice2(&l.wv),
                slice1(&l.bv),
                slice2(&l.wo),
                slice1(&l.bo),
                slice1(&l.ln2_g),
                slice1(&l.ln2_b),
                slice2(&l.w1),
                slice1(&l.b1),
                slice2(&l.w2),
                slice1(&l.b2),
            ]);
        }
        out.extend([
            slice1(&self.lnf_g),
            slice1(&self.lnf_b),
            slice2(&self.align_w1),
            slice1(&self.align_b1),
            slice2(&self.align_w2),
            slice1(&self.align_b2),
            slice2(&self.seg_w1),
            slice1(&self.seg_b1),
            slice1(&self.seg_w),
            slice1(&self.seg_b),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = vec![slice2_mut(&mut self.tok_emb), slice2_mut(&mut self.pos_emb)];
        for l in &mut self.layers {
            out.extend([
                slice1_mut(&mut l.ln1_g),
                slice1_mut(&mut l.ln1_b),
                slice2_mut(&mut l.wq),
                slice1_mut(&mut l.bq),
                slice2_mut(&mut l.wk),
                slice1_mut(&mut l.bk),
                slice2_mut(&mut l.wv),
                slice1_mut(&mut l.bv),
                slice2_mut(&mut l.wo),
                slice1_mut(&mut l.bo),
                slice1_mut(&mut l.ln2_g),
                slice1_mut(&mut l.ln2_b),
                slice2_mut(&mut l.w1),
                slice1_mut(&mut l.b1),
                slice2_mut(&mut l.w2),
                slice1_mut(&mut l.b2),
            ]);
        }
        out.extend([
            slice1_mut(&mut self.lnf_g),
            slice1_mut(&mut self.lnf_b),
            slice2_mut(&mut self.align_w1),
            slice1_mut(&mut self.align_b1),
            slice2_mut(&mut self.align_w2),
            slice1_mut(&mut self.align_b2),
            slice2_mut(&mut self.seg_w1),
            slice1_mut(&mut self.seg_b1),
            slice1_mut(&mut self.seg_w),
            slice1_mut(&mut self.seg_b),
        ]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += other * scale`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: F) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y * scale;
            }
        }
    }

    pub fn cast<G: Scalar>(&self) -> EncoderParams<G> {
        let mut out = EncoderParams::<G>::zeros(&self.config);
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = G::lit(s.as_f64());
            }
        }
        out
    }

    /// Rebuilds parameters from flat tensors in spec order, checking shapes.
    pub fn from_tensors(config: &EncoderConfig, tensors: Vec<Vec<F>>) -> Result<Self> {
        let mut p = Self::zeros(config);
        let specs = p.tensor_specs();
        if specs.len() != tensors.len() {
            return Err(Error::Config(format!("expected {} tensors, got {}", specs.len(), tensors.len())));
        }
        for ((dst, src), (name, _)) in p.tensors_mut().into_iter().zip(&tensors).zip(&specs) {
            if dst.len() != src.len() {
                return Err(Error::DimensionMismatch {
                    expected: dst.len(),
                    got: src.len(),
                })
                .map_err(|e| Error::Config(format!("tensor {name}: {e}")));
            }
            dst.copy_from_slice(src);
        }
        Ok(p)
    }
}

fn slice1<F>(a: &Array1<F>) -> &[F] {
    a.as_slice().expect("contiguous")
}

fn slice2<F>(a: &Array2<F>) -> &[F] {
    a.as_slice().expect("contiguous")
}

fn slice1_mut<F>(a: &mut Array1<F>) -> &mut [F] {
    a.as_slice_mut().expect("contiguous")
}

fn slice2_mut<F>(a: &mut Array2<F>) -> &mut [F] {
    a.as_slice_mut().expect("contiguous")
}
