//! Traced forward pass.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};

use super::{EncoderBundle, ForwardError, LayerNorm};

/// Per-row mean and `sqrt(var + eps)` of a layer norm input.
#[derive(Debug, Clone, PartialEq)]
pub struct LnStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Per head, `n x n`, row `i` is the softmax over keys for query `i`.
    pub attention: Vec<Array2<f64>>,
    /// Per head, `n x d`: row `j` is `f^h(x_j) = (x_j W_V[h] + b_V[h]) W_O[h]`.
    pub head_values: Vec<Array2<f64>>,
    /// `sum_h A^h f^h(x) + b_O`
    pub attn_output: Array2<f64>,
    /// Residual sum fed to the attention layer norm.
    pub attn_residual: Array2<f64>,
    pub attn_ln: LnStats,
    pub attn_normed: Array2<f64>,
    /// FFN pre-activations `zeta`, `n x ffn_dim`.
    pub ffn_pre: Array2<f64>,
    pub ffn_act: Array2<f64>,
    pub ffn_output: Array2<f64>,
    /// Residual sum fed to the output layer norm.
    pub ffn_residual: Array2<f64>,
    pub ffn_ln: LnStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub token_ids: Vec<u32>,
    /// Token plus position embeddings, before the embedding layer norm.
    pub embedding_sum: Array2<f64>,
    pub embedding_ln: LnStats,
    /// `hidden[0]` is the embedding output, `hidden[l + 1]` the output of layer `l`.
    pub hidden: Vec<Array2<f64>>,
    pub layers: Vec<LayerTrace>,
    pub logits: Array1<f64>,
}

impl ForwardTrace {
    pub fn seq_len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn final_hidden(&self) -> &Array2<f64> {
        self.hidden.last().expect("hidden has L + 1 entries")
    }

    /// Head-averaged attention of one layer.
    pub fn mean_attention(&self, layer: usize) -> Array2<f64> {
        let heads = &self.layers[layer].attention;
        let mut mean = heads[0].clone();
        for a in &heads[1..] {
            mean += a;
        }
        mean / heads.len() as f64
    }
}

pub(crate) fn layer_norm(x: &Array2<f64>, ln: &LayerNorm, eps: f64) -> (Array2<f64>, LnStats) {
    let d = x.ncols() as f64;
    let mean = x.mean_axis(Axis(1)).expect("non-empty rows");
    let mut std = Array1::zeros(x.nrows());
    let mut out = Array2::zeros(x.raw_dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        let var = row.iter().map(|v| (v - mean[i]).powi(2)).sum::<f64>() / d;
        std[i] = (var + eps).sqrt();
        let mut o = out.row_mut(i);
        for t in 0..row.len() {
            o[t] = (row[t] - mean[i]) / std[i] * ln.gamma[t] + ln.beta[t];
        }
    }
    (out, LnStats { mean, std })
}

fn softmax_rows(mut scores: Array2<f64>) -> Array2<f64> {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    scores
}

fn add_bias(mut m: Array2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    m += &b;
    m
}

pub fn forward(bundle: &EncoderBundle, ids: &[u32]) -> Result<ForwardTrace, ForwardError> {
    let config = &bundle.config;
    let n = ids.len();
    if n == 0 {
        return Err(ForwardError::Empty);
    }
    if n > config.max_positions {
        return Err(ForwardError::TooLong {
            len: n,
            max: config.max_positions,
        });
    }
    if let Some((position, &id)) = ids.iter().enumerate().find(|(_, &id)| id as usize >= config.vocab_size) {
        return Err(ForwardError::IdOutOfRange {
            id,
            position,
            vocab_size: config.vocab_size,
        });
    }

    let eps = config.ln_epsilon;
    let d = config.hidden_dim;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut embedding_sum = Array2::zeros((n, d));
    for (i, &id) in ids.iter().enumerate() {
        let row = &bundle.token_embeddings.row(id as usize) + &bundle.position_embeddings.row(i);
        embedding_sum.row_mut(i).assign(&row);
    }
    let (x0, embedding_ln) = layer_norm(&embedding_sum, &bundle.embedding_ln, eps);
    let mut hidden = vec![x0];
    let mut layers = Vec::with_capacity(bundle.layers.len());

    for layer in &bundle.layers {
        let x = hidden.last().expect("at least embeddings");
        let q = add_bias(x.dot(&layer.w_q), layer.b_q.view());
        let k = add_bias(x.dot(&layer.w_k), layer.b_k.view());
        let v = add_bias(x.dot(&layer.w_v), layer.b_v.view());

        let mut attention = Vec::with_capacity(config.num_heads);
        let mut head_values = Vec::with_capacity(config.num_heads);
        let mut attn_output = Array2::zeros((n, d));
        for h in 0..config.num_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            let alpha = softmax_rows(scores);
            let fx = v.slice(cols).dot(&layer.w_o.slice(s![h * dh..(h + 1) * dh, ..]));
            attn_output += &alpha.dot(&fx);
            attention.push(alpha);
            head_values.push(fx);
        }
        attn_output += &layer.b_o;

        let attn_residual = &attn_output + x;
        let (attn_normed, attn_ln) = layer_norm(&attn_residual, &layer.attn_ln, eps);
        let ffn_pre = add_bias(attn_normed.dot(&layer.w_ffn1), layer.b_ffn1.view());
        let act = config.activation;
        let ffn_act = ffn_pre.mapv(|z| act.apply(z));
        let ffn_output = add_bias(ffn_act.dot(&layer.w_ffn2), layer.b_ffn2.view());
        let ffn_residual = &ffn_output + &attn_normed;
        let (out, ffn_ln) = layer_norm(&ffn_residual, &layer.ffn_ln, eps);

        layers.push(LayerTrace {
            attention,
            head_values,
            attn_output,
            attn_residual,
            attn_ln,
            attn_normed,
            ffn_pre,
            ffn_act,
            ffn_output,
            ffn_residual,
            ffn_ln,
        });
        hidden.push(out);
    }

    let mut trace = ForwardTrace {
        token_ids: ids.to_vec(),
        embedding_sum,
        embedding_ln,
        hidden,
        layers,
        logits: Array1::zeros(config.num_classes),
    };
    trace.logits = classify(bundle, &trace);
    Ok(trace)
}

/// Class scores `W_cls x_0 + b_cls` from the final hidden state at position 0.
pub fn classify(bundle: &EncoderBundle, trace: &ForwardTrace) -> Array1<f64> {
    bundle.w_cls.dot(&trace.final_hidden().row(0)) + &bundle.b_cls
}
