//! Forward pass with a retained trace, and exact reverse-mode backward.
//!
//! Per block (pre-norm, residual around both sublayers):
//! `Y = X + drop(Attn(LN1(X)))`, `X' = Y + drop(W2·relu(W1·LN2(Y) + b1) + b2)`.
//! The feature of a prefix is `LNf(X_B)` at its last position.

use rand::Rng as _;

use super::params::{Block, Params};
use super::tensor::{axpy, dot, layer_norm, layer_norm_backward, linear, linear_backward};
use crate::{rng, Error, Result};

/// Inverted-dropout settings for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub rate: f64,
    pub seed: u64,
}

impl Dropout {
    fn mask(&self, block: usize, sublayer: u64, len: usize) -> Option<Vec<f64>> {
        if self.rate <= 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - self.rate);
        let mut r = rng::rng(self.seed, &[block as u64, sublayer]);
        Some(
            (0..len)
                .map(|_| if r.gen::<f64>() < self.rate { 0.0 } else { keep })
                .collect(),
        )
    }
}

struct NormTrace {
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
    out: Vec<f64>,
}

fn norm_forward(input: &[f64], gain: &[f64], offset: &[f64]) -> NormTrace {
    let d = gain.len();
    let mut t = NormTrace {
        normalized: vec![0.0; input.len()],
        inv_std: vec![0.0; input.len() / d],
        out: vec![0.0; input.len()],
    };
    layer_norm(input, gain, offset, &mut t.out, &mut t.normalized, &mut t.inv_std);
    t
}

struct BlockTrace {
    attn_norm: NormTrace,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// heads × len × len attention weights, zero above the diagonal
    weights: Vec<f64>,
    attn_mask: Option<Vec<f64>>,
    ffn_norm: NormTrace,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    ffn_mask: Option<Vec<f64>>,
}

pub(crate) struct Trace {
    pub(crate) prefix: Vec<usize>,
    blocks: Vec<BlockTrace>,
    final_norm: NormTrace,
    dim: usize,
    heads: usize,
}

impl Trace {
    pub(crate) fn len(&self) -> usize {
        self.prefix.len()
    }

    /// Normalized output row at `pos`.
    pub(crate) fn output(&self, pos: usize) -> &[f64] {
        &self.final_norm.out[pos * self.dim..(pos + 1) * self.dim]
    }

    pub(crate) fn feature(&self) -> &[f64] {
        self.output(self.len() - 1)
    }
}

fn apply_mask(values: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        values.iter_mut().zip(m).for_each(|(v, s)| *v *= s);
    }
}

fn attention_forward(q: &[f64], k: &[f64], v: &[f64], len: usize, dim: usize, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut weights = vec![0.0; heads * len * len];
    let mut out = vec![0.0; len * dim];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..len {
            let qi = &q[i * dim..][cols.clone()];
            let w = &mut weights[(h * len + i) * len..][..=i];
            for (j, wj) in w.iter_mut().enumerate() {
                *wj = dot(qi, &k[j * dim..][cols.clone()]) * scale;
            }
            let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for wj in w.iter_mut() {
                *wj = (*wj - max).exp();
                sum += *wj;
            }
            let oi = &mut out[i * dim..][cols.clone()];
            for (j, wj) in w.iter_mut().enumerate() {
                *wj /= sum;
                axpy(*wj, &v[j * dim..][cols.clone()], oi);
            }
        }
    }
    (weights, out)
}

fn block_forward(block: &Block, index: usize, x: &mut [f64], len: usize, heads: usize, dropout: Option<Dropout>) -> BlockTrace {
    let dim = block.query.rows;
    let attn_norm = norm_forward(x, &block.attn_norm.gain.data, &block.attn_norm.offset.data);
    let mut q = vec![0.0; len * dim];
    let mut k = vec![0.0; len * dim];
    let mut v = vec![0.0; len * dim];
    linear(&attn_norm.out, &block.query, &block.query_bias, &mut q);
    linear(&attn_norm.out, &block.key, &block.key_bias, &mut k);
    linear(&attn_norm.out, &block.value, &block.value_bias, &mut v);
    let (weights, mut attended) = attention_forward(&q, &k, &v, len, dim, heads);
    let attn_mask = dropout.and_then(|d| d.mask(index, 0, len * dim));
    apply_mask(&mut attended, &attn_mask);
    x.iter_mut().zip(&attended).for_each(|(a, b)| *a += b);

    let ffn_norm = norm_forward(x, &block.ffn_norm.gain.data, &block.ffn_norm.offset.data);
    let mut hidden_pre = vec![0.0; len * dim];
    linear(&ffn_norm.out, &block.ffn_in, &block.ffn_in_bias, &mut hidden_pre);
    let hidden: Vec<f64> = hidden_pre.iter().map(|&h| h.max(0.0)).collect();
    let mut ffn = vec![0.0; len * dim];
    linear(&hidden, &block.ffn_out, &block.ffn_out_bias, &mut ffn);
    let ffn_mask = dropout.and_then(|d| d.mask(index, 1, len * dim));
    apply_mask(&mut ffn, &ffn_mask);
    x.iter_mut().zip(&ffn).for_each(|(a, b)| *a += b);

    BlockTrace {
        attn_norm,
        q,
        k,
        v,
        weights,
        attn_mask,
        ffn_norm,
        hidden_pre,
        hidden,
        ffn_mask,
    }
}

pub(crate) fn forward(params: &Params, heads: usize, prefix: &[usize], dropout: Option<Dropout>) -> Result<Trace> {
    let max_len = params.position_embeddings.rows;
    if prefix.is_empty() {
        return Err(Error::invalid("empty prefix"));
    }
    let items = params.item_count();
    if let Some(&bad) = prefix.iter().find(|&&i| i >= items) {
        return Err(Error::IndexOutOfRange { index: bad, len: items });
    }
    let prefix = &prefix[prefix.len().saturating_sub(max_len)..];
    let len = prefix.len();
    let dim = params.embed_dim();
    let mut x = vec![0.0; len * dim];
    for (pos, &item) in prefix.iter().enumerate() {
        let row = &mut x[pos * dim..(pos + 1) * dim];
        row.copy_from_slice(params.item_embeddings.row(item));
        axpy(1.0, params.position_embeddings.row(pos), row);
    }
    let blocks = params
        .blocks
        .iter()
        .enumerate()
        .map(|(b, block)| block_forward(block, b, &mut x, len, heads, dropout))
        .collect();
    let final_norm = norm_forward(&x, &params.final_norm.gain.data, &params.final_norm.offset.data);
    Ok(Trace {
        prefix: prefix.to_vec(),
        blocks,
        final_norm,
        dim,
        heads,
    })
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    t: &BlockTrace,
    d_attended: &[f64],
    len: usize,
    dim: usize,
    heads: usize,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dw = vec![0.0; len];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..len {
            let w = &t.weights[(h * len + i) * len..][..=i];
            let doi = &d_attended[i * dim..][cols.clone()];
            let mut weighted = 0.0;
            for j in 0..=i {
                dw[j] = dot(doi, &t.v[j * dim..][cols.clone()]);
                weighted += w[j] * dw[j];
                axpy(w[j], doi, &mut dv[j * dim..][cols.clone()]);
            }
            for j in 0..=i {
                let ds = w[j] * (dw[j] - weighted) * scale;
                if ds != 0.0 {
                    axpy(ds, &t.k[j * dim..][cols.clone()], &mut dq[i * dim..][cols.clone()]);
                    axpy(ds, &t.q[i * dim..][cols.clone()], &mut dk[j * dim..][cols.clone()]);
                }
            }
        }
    }
}

/// Accumulates into `grads` the gradient of a scalar whose derivative with
/// respect to the output rows is `d_outputs` (len × dim, zero where unused).
pub(crate) fn backward(params: &Params, trace: &Trace, d_outputs: &[f64], grads: &mut Params) {
    let len = trace.len();
    let dim = trace.dim;
    let mut dx = vec![0.0; len * dim];
    layer_norm_backward(
        &trace.final_norm.normalized,
        &trace.final_norm.inv_std,
        &params.final_norm.gain.data,
        d_outputs,
        &mut grads.final_norm.gain.data,
        &mut grads.final_norm.offset.data,
        &mut dx,
    );

    for (b, t) in trace.blocks.iter().enumerate().rev() {
        let block = &params.blocks[b];
        let g = &mut grads.blocks[b];
        // feed-forward sublayer
        let mut d_ffn = dx.clone();
        apply_mask(&mut d_ffn, &t.ffn_mask);
        let mut d_hidden = vec![0.0; len * dim];
        linear_backward(&t.hidden, &block.ffn_out, &d_ffn, &mut g.ffn_out, &mut g.ffn_out_bias, &mut d_hidden);
        for (dh, &pre) in d_hidden.iter_mut().zip(&t.hidden_pre) {
            if pre <= 0.0 {
                *dh = 0.0;
            }
        }
        let mut d_normed = vec![0.0; len * dim];
        linear_backward(&t.ffn_norm.out, &block.ffn_in, &d_hidden, &mut g.ffn_in, &mut g.ffn_in_bias, &mut d_normed);
        layer_norm_backward(
            &t.ffn_norm.normalized,
            &t.ffn_norm.inv_std,
            &block.ffn_norm.gain.data,
            &d_normed,
            &mut g.ffn_norm.gain.data,
            &mut g.ffn_norm.offset.data,
            &mut dx,
        );

        // attention sublayer
        let mut d_attended = dx.clone();
        apply_mask(&mut d_attended, &t.attn_mask);
        let mut dq = vec![0.0; len * dim];
        let mut dk = vec![0.0; len * dim];
        let mut dv = vec![0.0; len * dim];
        attention_backward(t, &d_attended, len, dim, trace.heads, &mut dq, &mut dk, &mut dv);
        let mut d_normed = vec![0.0; len * dim];
        linear_backward(&t.attn_norm.out, &block.query, &dq, &mut g.query, &mut g.query_bias, &mut d_normed);
        linear_backward(&t.attn_norm.out, &block.key, &dk, &mut g.key, &mut g.key_bias, &mut d_normed);
        linear_backward(&t.attn_norm.out, &block.value, &dv, &mut g.value, &mut g.value_bias, &mut d_normed);
        layer_norm_backward(
            &t.attn_norm.normalized,
            &t.attn_norm.inv_std,
            &block.attn_norm.gain.data,
            &d_normed,
            &mut g.attn_norm.gain.data,
            &mut g.attn_norm.offset.data,
            &mut dx,
        );
    }

    for (pos, &item) in trace.prefix.iter().enumerate() {
        let row = &dx[pos * dim..(pos + 1) * dim];
        axpy(1.0, row, grads.item_embeddings.row_mut(item));
        axpy(1.0, row, grads.position_embeddings.row_mut(pos));
    }
}
