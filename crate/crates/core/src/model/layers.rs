//! Layer kernels with hand-written backward passes.
//!
//! Attention and feed-forward layers route every row through the weight set
//! bound to its segment tag; attention scores are still computed jointly over
//! the whole concatenated sequence.

use std::collections::BTreeMap;

use super::linalg::{add_into, dot, gelu, gelu_grad, softmax_in_place, Matrix};
use super::ModelError;

pub const LN_EPS: f64 = 1e-5;

/// Attention and FFN weights used by one routing tag. Shapes are (out, in).
#[derive(Debug, Clone, PartialEq)]
pub struct TagWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
}

impl TagWeights {
    pub fn zeros_like(other: &TagWeights) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows, m.cols);
        Self {
            wq: z(&other.wq),
            wk: z(&other.wk),
            wv: z(&other.wv),
            wo: z(&other.wo),
            w1: z(&other.w1),
            w2: z(&other.w2),
        }
    }

    pub fn d_model(&self) -> usize {
        self.wq.rows
    }

    pub fn role(&self, role: &str) -> &Matrix {
        match role {
            "wq" => &self.wq,
            "wk" => &self.wk,
            "wv" => &self.wv,
            "wo" => &self.wo,
            "w1" => &self.w1,
            "w2" => &self.w2,
            _ => panic!("unknown weight role {role}"),
        }
    }
}

/// Per-tag weight sets of one layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecoupledLayerWeights {
    pub per_tag: BTreeMap<String, TagWeights>,
}

/// Hidden states of one segment, rows of width `d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenSegment {
    pub tag: String,
    pub states: Matrix,
}

fn bind_segments<'a>(
    segments: &[HiddenSegment],
    weights: &'a DecoupledLayerWeights,
) -> Result<(Matrix, Vec<usize>, Vec<&'a TagWeights>), ModelError> {
    let mut tags: Vec<&str> = Vec::new();
    let mut bound: Vec<&TagWeights> = Vec::new();
    let mut rows = Vec::new();
    for seg in segments {
        let tw = weights
            .per_tag
            .get(&seg.tag)
            .ok_or_else(|| ModelError::UnknownTag(seg.tag.clone()))?;
        if seg.states.cols != tw.d_model() {
            return Err(ModelError::WidthMismatch {
                expected: tw.d_model(),
                got: seg.states.cols,
            });
        }
        let idx = match tags.iter().position(|t| *t == seg.tag) {
            Some(i) => i,
            None => {
                tags.push(&seg.tag);
                bound.push(tw);
                tags.len() - 1
            }
        };
        rows.extend(std::iter::repeat_n(idx, seg.states.rows));
    }
    let x = Matrix::vstack(&segments.iter().map(|s| s.states.clone()).collect::<Vec<_>>());
    Ok((x, rows, bound))
}

fn resplit(out: Matrix, segments: &[HiddenSegment]) -> Vec<HiddenSegment> {
    let mut start = 0;
    segments
        .iter()
        .map(|s| {
            let end = start + s.states.rows;
            let seg = HiddenSegment {
                tag: s.tag.clone(),
                states: out.slice_rows(start, end),
            };
            start = end;
            seg
        })
        .collect()
}

/// Multi-head attention with per-tag Q/K/V/O projections over a segmented sequence.
pub fn decoupled_attention(
    segments: &[HiddenSegment],
    weights: &DecoupledLayerWeights,
    n_heads: usize,
    causal: bool,
) -> Result<Vec<HiddenSegment>, ModelError> {
    let (x, rows, bound) = bind_segments(segments, weights)?;
    check_heads(x.cols, n_heads)?;
    let (out, _) = attention_forward(&x, &rows, &bound, n_heads, causal);
    Ok(resplit(out, segments))
}

/// Per-tag feed-forward `w2 · gelu(w1 · x)`, applied row by row.
pub fn decoupled_ffn(
    segments: &[HiddenSegment],
    weights: &DecoupledLayerWeights,
) -> Result<Vec<HiddenSegment>, ModelError> {
    let (x, rows, bound) = bind_segments(segments, weights)?;
    let (out, _) = ffn_forward(&x, &rows, &bound);
    Ok(resplit(out, segments))
}

pub(crate) fn check_heads(d_model: usize, n_heads: usize) -> Result<(), ModelError> {
    if n_heads == 0 || d_model % n_heads != 0 {
        return Err(ModelError::Config(format!(
            "d_model {d_model} not divisible by n_heads {n_heads}"
        )));
    }
    Ok(())
}

pub(crate) struct AttnCache {
    input: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Per head, row-major (L × L) attention probabilities.
    probs: Vec<Matrix>,
    o: Matrix,
}

pub(crate) fn attention_forward(
    x: &Matrix,
    rows: &[usize],
    bound: &[&TagWeights],
    n_heads: usize,
    causal: bool,
) -> (Matrix, AttnCache) {
    let len = x.rows;
    let d = x.cols;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut q = Matrix::zeros(len, d);
    let mut k = Matrix::zeros(len, d);
    let mut v = Matrix::zeros(len, d);
    for r in 0..len {
        let w = bound[rows[r]];
        let xr = x.row(r);
        q.row_mut(r).copy_from_slice(&w.wq.matvec(xr));
        k.row_mut(r).copy_from_slice(&w.wk.matvec(xr));
        v.row_mut(r).copy_from_slice(&w.wv.matvec(xr));
    }
    let mut o = Matrix::zeros(len, d);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        let mut p = Matrix::zeros(len, len);
        for i in 0..len {
            let visible = if causal { i + 1 } else { len };
            let qi = &q.row(i)[cols.clone()];
            let mut scores: Vec<f64> = (0..visible)
                .map(|j| dot(qi, &k.row(j)[cols.clone()]) * scale)
                .collect();
            softmax_in_place(&mut scores);
            p.row_mut(i)[..visible].copy_from_slice(&scores);
            let oi = &mut o.row_mut(i)[cols.clone()];
            for (j, &a) in scores.iter().enumerate() {
                for (dst, &vj) in oi.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *dst += a * vj;
                }
            }
        }
        probs.push(p);
    }
    let mut out = Matrix::zeros(len, d);
    for r in 0..len {
        out.row_mut(r)
            .copy_from_slice(&bound[rows[r]].wo.matvec(o.row(r)));
    }
    let cache = AttnCache {
        input: x.clone(),
        q,
        k,
        v,
        probs,
        o,
    };
    (out, cache)
}

pub(crate) fn attention_backward(
    dout: &Matrix,
    cache: &AttnCache,
    rows: &[usize],
    bound: &[&TagWeights],
    grads: &mut [TagWeights],
    n_heads: usize,
) -> Matrix {
    let len = dout.rows;
    let d = dout.cols;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut d_o = Matrix::zeros(len, d);
    for r in 0..len {
        let b = rows[r];
        grads[b].wo.add_outer(dout.row(r), cache.o.row(r), 1.0);
        d_o.row_mut(r)
            .copy_from_slice(&bound[b].wo.matvec_t(dout.row(r)));
    }
    let mut dq = Matrix::zeros(len, d);
    let mut dk = Matrix::zeros(len, d);
    let mut dv = Matrix::zeros(len, d);
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        let p = &cache.probs[h];
        for i in 0..len {
            let doi: Vec<f64> = d_o.row(i)[cols.clone()].to_vec();
            // Masked entries carry zero probability and contribute nothing.
            let mut dp = vec![0.0; len];
            for j in 0..len {
                let a = p.at(i, j);
                if a == 0.0 {
                    continue;
                }
                dp[j] = dot(&doi, &cache.v.row(j)[cols.clone()]);
                for (dst, &g) in dv.row_mut(j)[cols.clone()].iter_mut().zip(&doi) {
                    *dst += a * g;
                }
            }
            let weighted: f64 = (0..len).map(|j| p.at(i, j) * dp[j]).sum();
            for j in 0..len {
                let a = p.at(i, j);
                if a == 0.0 {
                    continue;
                }
                let ds = a * (dp[j] - weighted) * scale;
                let kj: Vec<f64> = cache.k.row(j)[cols.clone()].to_vec();
                let qi: Vec<f64> = cache.q.row(i)[cols.clone()].to_vec();
                for (dst, kv) in dq.row_mut(i)[cols.clone()].iter_mut().zip(&kj) {
                    *dst += ds * kv;
                }
                for (dst, qv) in dk.row_mut(j)[cols.clone()].iter_mut().zip(&qi) {
                    *dst += ds * qv;
                }
            }
        }
    }
    let mut dx = Matrix::zeros(len, d);
    for r in 0..len {
        let b = rows[r];
        let xr = cache.input.row(r);
        grads[b].wq.add_outer(dq.row(r), xr, 1.0);
        grads[b].wk.add_outer(dk.row(r), xr, 1.0);
        grads[b].wv.add_outer(dv.row(r), xr, 1.0);
        let w = bound[b];
        let dxr = dx.row_mut(r);
        add_into(dxr, &w.wq.matvec_t(dq.row(r)));
        add_into(dxr, &w.wk.matvec_t(dk.row(r)));
        add_into(dxr, &w.wv.matvec_t(dv.row(r)));
    }
    dx
}

pub(crate) struct FfnCache {
    input: Matrix,
    pre: Matrix,
    act: Matrix,
}

pub(crate) fn ffn_forward(x: &Matrix, rows: &[usize], bound: &[&TagWeights]) -> (Matrix, FfnCache) {
    let len = x.rows;
    let d_ff = bound.first().map_or(0, |w| w.w1.rows);
    let mut pre = Matrix::zeros(len, d_ff);
    let mut act = Matrix::zeros(len, d_ff);
    let mut out = Matrix::zeros(len, x.cols);
    for r in 0..len {
        let w = bound[rows[r]];
        let u = w.w1.matvec(x.row(r));
        let g: Vec<f64> = u.iter().map(|&v| gelu(v)).collect();
        out.row_mut(r).copy_from_slice(&w.w2.matvec(&g));
        pre.row_mut(r).copy_from_slice(&u);
        act.row_mut(r).copy_from_slice(&g);
    }
    (
        out,
        FfnCache {
            input: x.clone(),
            pre,
            act,
        },
    )
}

pub(crate) fn ffn_backward(
    dout: &Matrix,
    cache: &FfnCache,
    rows: &[usize],
    bound: &[&TagWeights],
    grads: &mut [TagWeights],
) -> Matrix {
    let mut dx = Matrix::zeros(dout.rows, dout.cols);
    for r in 0..dout.rows {
        let b = rows[r];
        let w = bound[b];
        grads[b].w2.add_outer(dout.row(r), cache.act.row(r), 1.0);
        let dg = w.w2.matvec_t(dout.row(r));
        let du: Vec<f64> = dg
            .iter()
            .zip(cache.pre.row(r))
            .map(|(g, &u)| g * gelu_grad(u))
            .collect();
        grads[b].w1.add_outer(&du, cache.input.row(r), 1.0);
        dx.row_mut(r).copy_from_slice(&w.w1.matvec_t(&du));
    }
    dx
}

pub(crate) struct LnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_forward(x: &Matrix, gain: &[f64], bias: &[f64]) -> (Matrix, LnCache) {
    let d = x.cols as f64;
    let mut out = Matrix::zeros(x.rows, x.cols);
    let mut xhat = Matrix::zeros(x.rows, x.cols);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for c in 0..x.cols {
            let h = (row[c] - mean) * is;
            xhat.data[r * x.cols + c] = h;
            out.data[r * x.cols + c] = h * gain[c] + bias[c];
        }
    }
    (out, LnCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward(
    dy: &Matrix,
    cache: &LnCache,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Matrix {
    let n = dy.cols as f64;
    let mut dx = Matrix::zeros(dy.rows, dy.cols);
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let dxh: Vec<f64> = dyr.iter().zip(gain).map(|(g, w)| g * w).collect();
        for c in 0..dy.cols {
            dgain[c] += dyr[c] * xh[c];
            dbias[c] += dyr[c];
        }
        let mean_dxh = dxh.iter().sum::<f64>() / n;
        let mean_dxh_xh = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
        let is = cache.inv_std[r];
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = is * (dxh[c] - mean_dxh - xh[c] * mean_dxh_xh);
        }
    }
    dx
}

/// Modality encoder (linear + tanh) followed by the projector (linear), for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub enc_w: Matrix,
    pub enc_b: Vec<f64>,
    pub proj_w: Matrix,
    pub proj_b: Vec<f64>,
    pub n_tokens: usize,
}

pub(crate) struct EncoderCache {
    features: Vec<f64>,
    hidden: Vec<f64>,
}

impl EncoderWeights {
    pub fn feature_dim(&self) -> usize {
        self.enc_w.cols
    }

    pub fn d_model(&self) -> usize {
        self.proj_w.rows / self.n_tokens
    }

    pub(crate) fn forward(&self, features: &[f64]) -> (Matrix, EncoderCache) {
        let mut z = self.enc_w.matvec(features);
        for (v, b) in z.iter_mut().zip(&self.enc_b) {
            *v = (*v + b).tanh();
        }
        let mut p = self.proj_w.matvec(&z);
        add_into(&mut p, &self.proj_b);
        let out = Matrix {
            rows: self.n_tokens,
            cols: self.d_model(),
            data: p,
        };
        (
            out,
            EncoderCache {
                features: features.to_vec(),
                hidden: z,
            },
        )
    }

    pub(crate) fn backward(&self, dout: &Matrix, cache: &EncoderCache, grads: &mut EncoderWeights) {
        let dp = &dout.data;
        grads.proj_w.add_outer(dp, &cache.hidden, 1.0);
        add_into(&mut grads.proj_b, dp);
        let de = self.proj_w.matvec_t(dp);
        let dz: Vec<f64> = de
            .iter()
            .zip(&cache.hidden)
            .map(|(g, h)| g * (1.0 - h * h))
            .collect();
        grads.enc_w.add_outer(&dz, &cache.features, 1.0);
        add_into(&mut grads.enc_b, &dz);
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self {
            enc_w: Matrix::zeros(self.enc_w.rows, self.enc_w.cols),
            enc_b: vec![0.0; self.enc_b.len()],
            proj_w: Matrix::zeros(self.proj_w.rows, self.proj_w.cols),
            proj_b: vec![0.0; self.proj_b.len()],
            n_tokens: self.n_tokens,
        }
    }
}
