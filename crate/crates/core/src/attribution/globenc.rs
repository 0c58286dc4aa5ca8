//! Norm-based attribution through attention, residual and layer norms.
//!
//! For output token `i` and input token `j` of one layer the attention block
//! contributes `v_ij = sum_h alpha^h_ij f^h(x_j) + [i == j] x_i`. Each piece is
//! passed through the linear part of the attention layer norm, using the
//! statistics of the full residual sum at `i`:
//!
//! `z_ij = (v_ij - mean(v_ij)) / std(z+_i) * gamma_1`
//!
//! and then through the output layer norm the same way (the FFN body is
//! skipped, only its residual path is followed):
//!
//! `x_ij = (z_ij - mean(z_ij)) / std(u+_i) * gamma_2`
//!
//! The layer grid is `||x_ij||`. Grids are row-normalized, mixed with the
//! identity and rolled out across layers.

use ndarray::{Array1, Array2, ArrayView1};

use super::rollout::{residual_mix, rollout};
use super::{AttributionMatrix, AttributionMethod, DegenerateRow};
use crate::encoder::{EncoderBundle, ForwardTrace};

/// Per-layer norm grids.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormAttribution {
    /// `||z_ij||` after the attention layer norm.
    pub residual_ln: Array2<f64>,
    /// `||x_ij||` after the output layer norm; this is what gets rolled out.
    pub encoder: Array2<f64>,
}

fn centered_scaled(v: ArrayView1<f64>, std: f64, gamma: &Array1<f64>) -> Array1<f64> {
    let mean = v.mean().expect("non-empty");
    let mut out = v.to_owned();
    out.iter_mut()
        .zip(gamma)
        .for_each(|(x, g)| *x = (*x - mean) / std * g);
    out
}

fn norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

pub fn layer_norm_attribution(trace: &ForwardTrace, bundle: &EncoderBundle, layer: usize) -> LayerNormAttribution {
    let lt = &trace.layers[layer];
    let params = &bundle.layers[layer];
    let x = &trace.hidden[layer];
    let n = trace.seq_len();
    let d = x.ncols();
    let mut residual_ln = Array2::zeros((n, n));
    let mut encoder = Array2::zeros((n, n));
    let mut v = Array1::zeros(d);
    for i in 0..n {
        for j in 0..n {
            v.fill(0.0);
            for (alpha, fx) in lt.attention.iter().zip(&lt.head_values) {
                v.scaled_add(alpha[[i, j]], &fx.row(j));
            }
            if i == j {
                v += &x.row(i);
            }
            let z = centered_scaled(v.view(), lt.attn_ln.std[i], &params.attn_ln.gamma);
            let out = centered_scaled(z.view(), lt.ffn_ln.std[i], &params.ffn_ln.gamma);
            residual_ln[[i, j]] = norm(&z);
            encoder[[i, j]] = norm(&out);
        }
    }
    LayerNormAttribution { residual_ln, encoder }
}

/// Row-normalizes in place; all-zero rows become uniform and are reported.
fn normalize_rows(m: &mut Array2<f64>, layer: usize, degenerate: &mut Vec<DegenerateRow>) {
    let n = m.ncols() as f64;
    for (row_index, mut row) in m.rows_mut().into_iter().enumerate() {
        let sum = row.sum();
        if sum > 0.0 && sum.is_finite() {
            row /= sum;
        } else {
            row.fill(1.0 / n);
            degenerate.push(DegenerateRow { layer, row: row_index });
        }
    }
}

pub fn globenc(trace: &ForwardTrace, bundle: &EncoderBundle) -> AttributionMatrix {
    let mut degenerate_rows = Vec::new();
    let factors: Vec<Array2<f64>> = (0..trace.num_layers())
        .map(|l| {
            let mut grid = layer_norm_attribution(trace, bundle, l).encoder;
            normalize_rows(&mut grid, l, &mut degenerate_rows);
            residual_mix(&grid)
        })
        .collect();
    AttributionMatrix {
        values: rollout(factors),
        method: AttributionMethod::GlobEnc,
        degenerate_rows,
    }
}
