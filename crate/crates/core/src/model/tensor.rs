use serde::{Deserialize, Serialize};

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[l] = bias + input[l] · weight` for each of `len` rows.
pub(crate) fn linear(input: &[f64], weight: &Matrix, bias: &Matrix, out: &mut [f64]) {
    let (n_in, n_out) = (weight.rows, weight.cols);
    for (x, y) in input.chunks_exact(n_in).zip(out.chunks_exact_mut(n_out)) {
        y.copy_from_slice(&bias.data);
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                axpy(xi, weight.row(i), y);
            }
        }
    }
}

/// Accumulates weight/bias gradients and returns d(input) for [`linear`].
pub(crate) fn linear_backward(
    input: &[f64],
    weight: &Matrix,
    d_out: &[f64],
    d_weight: &mut Matrix,
    d_bias: &mut Matrix,
    d_input: &mut [f64],
) {
    let (n_in, n_out) = (weight.rows, weight.cols);
    for ((x, dy), dx) in input
        .chunks_exact(n_in)
        .zip(d_out.chunks_exact(n_out))
        .zip(d_input.chunks_exact_mut(n_in))
    {
        axpy(1.0, dy, &mut d_bias.data);
        for i in 0..n_in {
            axpy(x[i], dy, d_weight.row_mut(i));
            dx[i] += dot(weight.row(i), dy);
        }
    }
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-8;

/// Row-wise layer norm. Stores normalized inputs and inverse std for backward.
pub(crate) fn layer_norm(
    input: &[f64],
    gain: &[f64],
    offset: &[f64],
    out: &mut [f64],
    normalized: &mut [f64],
    inv_std: &mut [f64],
) {
    let d = gain.len();
    for (r, ((x, y), xhat)) in input
        .chunks_exact(d)
        .zip(out.chunks_exact_mut(d))
        .zip(normalized.chunks_exact_mut(d))
        .enumerate()
    {
        let mean = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = s;
        for j in 0..d {
            xhat[j] = (x[j] - mean) * s;
            y[j] = gain[j] * xhat[j] + offset[j];
        }
    }
}

pub(crate) fn layer_norm_backward(
    normalized: &[f64],
    inv_std: &[f64],
    gain: &[f64],
    d_out: &[f64],
    d_gain: &mut [f64],
    d_offset: &mut [f64],
    d_input: &mut [f64],
) {
    let d = gain.len();
    let n = d as f64;
    for (r, ((xhat, dy), dx)) in normalized
        .chunks_exact(d)
        .zip(d_out.chunks_exact(d))
        .zip(d_input.chunks_exact_mut(d))
        .enumerate()
    {
        let mut mean_g = 0.0;
        let mut mean_gx = 0.0;
        for j in 0..d {
            d_gain[j] += dy[j] * xhat[j];
            d_offset[j] += dy[j];
            let g = dy[j] * gain[j];
            mean_g += g;
            mean_gx += g * xhat[j];
        }
        mean_g /= n;
        mean_gx /= n;
        for j in 0..d {
            let g = dy[j] * gain[j];
            dx[j] += inv_std[r] * (g - mean_g - xhat[j] * mean_gx);
        }
    }
}
