use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::tensor::Matrix;
use crate::{rng, Error, Result};

/// Architecture and regularization settings of the recommender.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub block_count: usize,
    pub attention_heads: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            block_count: 2,
            attention_heads: 1,
            max_seq_len: 50,
            dropout_rate: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// 150 hidden units and two blocks.
    pub fn full_scale() -> Self {
        Self {
            embed_dim: 150,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.block_count == 0 || self.attention_heads == 0 || self.max_seq_len == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if !self.embed_dim.is_multiple_of(self.attention_heads) {
            return Err(Error::invalid("embed_dim must be divisible by attention_heads"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout_rate must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Matrix,
    pub offset: Matrix,
}

/// One causal self-attention block with its feed-forward sublayer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub attn_norm: LayerNorm,
    pub query: Matrix,
    pub query_bias: Matrix,
    pub key: Matrix,
    pub key_bias: Matrix,
    pub value: Matrix,
    pub value_bias: Matrix,
    pub ffn_norm: LayerNorm,
    pub ffn_in: Matrix,
    pub ffn_in_bias: Matrix,
    pub ffn_out: Matrix,
    pub ffn_out_bias: Matrix,
}

/// Every learnable tensor. Also used, shape-matched, for gradients, Adam
/// moments and Fisher diagonals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub item_embeddings: Matrix,
    pub position_embeddings: Matrix,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
}

pub type GradientSet = Params;

const BLOCK_TENSORS: [&str; 14] = [
    "attn_norm.gain",
    "attn_norm.offset",
    "query",
    "query_bias",
    "key",
    "key_bias",
    "value",
    "value_bias",
    "ffn_norm.gain",
    "ffn_norm.offset",
    "ffn_in",
    "ffn_in_bias",
    "ffn_out",
    "ffn_out_bias",
];

impl Block {
    fn tensors(&self) -> [&Matrix; 14] {
        [
            &self.attn_norm.gain,
            &self.attn_norm.offset,
            &self.query,
            &self.query_bias,
            &self.key,
            &self.key_bias,
            &self.value,
            &self.value_bias,
            &self.ffn_norm.gain,
            &self.ffn_norm.offset,
            &self.ffn_in,
            &self.ffn_in_bias,
            &self.ffn_out,
            &self.ffn_out_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 14] {
        [
            &mut self.attn_norm.gain,
            &mut self.attn_norm.offset,
            &mut self.query,
            &mut self.query_bias,
            &mut self.key,
            &mut self.key_bias,
            &mut self.value,
            &mut self.value_bias,
            &mut self.ffn_norm.gain,
            &mut self.ffn_norm.offset,
            &mut self.ffn_in,
            &mut self.ffn_in_bias,
            &mut self.ffn_out,
            &mut self.ffn_out_bias,
        ]
    }
}

impl Params {
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.item_embeddings, &self.position_embeddings];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.push(&self.final_norm.gain);
        out.push(&self.final_norm.offset);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.item_embeddings, &mut self.position_embeddings];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.final_norm.gain);
        out.push(&mut self.final_norm.offset);
        out
    }

    /// Names aligned with [`Params::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec!["item_embeddings".to_owned(), "position_embeddings".to_owned()];
        for b in 0..self.blocks.len() {
            out.extend(BLOCK_TENSORS.iter().map(|n| format!("blocks.{b}.{n}")));
        }
        out.push("final_norm.gain".to_owned());
        out.push("final_norm.offset".to_owned());
        out
    }

    pub fn zeros_like(&self) -> Params {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn same_shape(&self, other: &Params) -> bool {
        let (a, b) = (self.tensors(), other.tensors());
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.same_shape(y))
    }

    pub fn check_shape(&self, other: &Params, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(what.to_owned()))
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// `self += alpha * other`, element-wise.
    pub fn add_scaled(&mut self, alpha: f64, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    /// Appends zero rows to the item-embedding tensor.
    pub fn pad_items(&mut self, item_count: usize) {
        let e = &mut self.item_embeddings;
        if item_count > e.rows {
            e.data.resize(item_count * e.cols, 0.0);
            e.rows = item_count;
        }
    }

    pub fn item_count(&self) -> usize {
        self.item_embeddings.rows
    }

    pub fn embed_dim(&self) -> usize {
        self.item_embeddings.cols
    }
}

fn uniform(rows: usize, cols: usize, bound: f64, seed: u64, tag: &str) -> Matrix {
    let mut r = rng::rng(seed, &[rng::tag(tag)]);
    Matrix::from_fn(rows, cols, |_, _| r.gen_range(-bound..=bound))
}

pub(crate) fn item_row(dim: usize, seed: u64, index: usize, scale: f64) -> Vec<f64> {
    let bound = scale / (dim as f64).sqrt();
    let mut r = rng::rng(seed, &[rng::tag("item_embeddings"), index as u64]);
    (0..dim).map(|_| r.gen_range(-bound..=bound)).collect()
}

fn norm(dim: usize) -> LayerNorm {
    LayerNorm {
        gain: Matrix::filled(1, dim, 1.0),
        offset: Matrix::zeros(1, dim),
    }
}

/// Seeded scaled-uniform initialization: Glorot bounds for projections,
/// `1/sqrt(d)` for embeddings, unit gains and zero offsets/biases.
pub(crate) fn init_params(cfg: &ModelConfig, item_count: usize, seed: u64) -> Params {
    let d = cfg.embed_dim;
    let glorot = (6.0 / (2 * d) as f64).sqrt();
    let mut item_embeddings = Matrix::zeros(item_count, d);
    for i in 0..item_count {
        item_embeddings.row_mut(i).copy_from_slice(&item_row(d, seed, i, 1.0));
    }
    let blocks = (0..cfg.block_count)
        .map(|b| {
            let s = rng::derive(seed, &[rng::tag("block"), b as u64]);
            Block {
                attn_norm: norm(d),
                query: uniform(d, d, glorot, s, "query"),
                query_bias: Matrix::zeros(1, d),
                key: uniform(d, d, glorot, s, "key"),
                key_bias: Matrix::zeros(1, d),
                value: uniform(d, d, glorot, s, "value"),
                value_bias: Matrix::zeros(1, d),
                ffn_norm: norm(d),
                ffn_in: uniform(d, d, glorot, s, "ffn_in"),
                ffn_in_bias: Matrix::zeros(1, d),
                ffn_out: uniform(d, d, glorot, s, "ffn_out"),
                ffn_out_bias: Matrix::zeros(1, d),
            }
        })
        .collect();
    Params {
        item_embeddings,
        position_embeddings: uniform(cfg.max_seq_len, d, 1.0 / (d as f64).sqrt(), seed, "position_embeddings"),
        blocks,
        final_norm: norm(d),
    }
}
