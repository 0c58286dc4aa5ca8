//! Decomposition of hidden states into per-source-token parts.
//!
//! Every hidden state `x_i` is carried as `sum_k x_{i<=k} + bias_i`, one part
//! per input token plus a bias track that absorbs every additive constant
//! (projection biases, layer norm `beta`, FFN biases). Each encoder component
//! is applied to the parts so that the sum stays exact:
//!
//! * attention: the value/output maps are linear once their biases go to the
//!   bias track, and the traced attention weights mix the parts;
//! * layer norm: centering is linear, and the scale uses the traced standard
//!   deviation of the full vector;
//! * FFN: the activation is replaced by its traced slope
//!   `theta = f(zeta) / zeta`, which makes it linear around the actual input;
//! * classifier: `y_{c<=k} = W_cls[c] . x_{CLS<=k}`.
//!
//! The reconstruction error against the traced hidden states is tracked at
//! every stage and a drift beyond [`DRIFT_LIMIT`] aborts the decomposition.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, Axis};

use super::{AttributionError, AttributionMethod, SaliencyVector, Unit};
use crate::encoder::{Activation, EncoderBundle, ForwardTrace, LayerNorm, LnStats};

/// Relative reconstruction error that aborts a decomposition.
pub const DRIFT_LIMIT: f64 = 1e-4;

/// Below this magnitude the activation slope at zero replaces `f(z) / z`.
const RATIO_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Target {
    #[default]
    Predicted,
    Class(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreSign {
    #[default]
    Signed,
    Magnitude,
}

/// `theta[t] = f(zeta[t]) / zeta[t]`, or the slope at zero for `|zeta[t]| < epsilon`.
pub fn activation_ratio(zeta: ArrayView1<f64>, kind: Activation, epsilon: f64) -> Array1<f64> {
    zeta.mapv(|z| {
        if z.abs() >= epsilon {
            kind.apply(z) / z
        } else {
            kind.slope_at_zero()
        }
    })
}

/// Decomposed hidden states after one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompState {
    /// `[position, source, hidden]`
    pub parts: Array3<f64>,
    /// `[position, hidden]`
    pub bias: Array2<f64>,
}

impl DecompState {
    /// `sum_k parts[i, k] + bias[i]` for every position.
    pub fn reconstruct(&self) -> Array2<f64> {
        self.parts.sum_axis(Axis(1)) + &self.bias
    }

    /// Worst per-position `|recon_i - x_i| / max(|x_i|, 1)`.
    pub fn relative_error(&self, traced: &Array2<f64>) -> f64 {
        let recon = self.reconstruct();
        recon
            .rows()
            .into_iter()
            .zip(traced.rows())
            .map(|(r, t)| {
                let diff = (&r - &t).mapv(|v| v * v).sum().sqrt();
                diff / t.dot(&t).sqrt().max(1.0)
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    /// `[class, source]`
    pub contributions: Array2<f64>,
    /// Per-class bias-track share, including `b_cls`.
    pub bias: Array1<f64>,
    pub logits: Array1<f64>,
    pub target: usize,
    /// Reconstruction error after the embeddings and after every layer.
    pub stage_errors: Vec<f64>,
    pub head_error: f64,
}

impl Decomposition {
    pub fn max_error(&self) -> f64 {
        self.stage_errors.iter().copied().fold(self.head_error, f64::max)
    }

    /// Target-class contributions of the non-special tokens.
    pub fn saliency(&self, special_mask: &[bool], sign: ScoreSign) -> SaliencyVector {
        let row = self.contributions.row(self.target);
        let scores = special_mask
            .iter()
            .enumerate()
            .filter(|(_, &special)| !special)
            .map(|(k, _)| match sign {
                ScoreSign::Signed => row[k],
                ScoreSign::Magnitude => row[k].abs(),
            })
            .collect();
        SaliencyVector {
            scores,
            unit: Unit::Subword,
            method: AttributionMethod::DecompX,
        }
    }
}

fn check(stage: String, state: &DecompState, traced: &Array2<f64>) -> Result<f64, AttributionError> {
    let error = state.relative_error(traced);
    if error.is_finite() && error <= DRIFT_LIMIT {
        Ok(error)
    } else {
        Err(AttributionError::ReconstructionDrift { stage, error })
    }
}

/// Layer norm applied part-wise with the traced statistics; `beta` goes to the bias track.
fn decompose_layer_norm(state: &mut DecompState, stats: &LnStats, ln: &LayerNorm) {
    let (n, _, _) = state.parts.dim();
    for i in 0..n {
        let std = stats.std[i];
        for mut part in state.parts.index_axis_mut(Axis(0), i).rows_mut() {
            let mean = part.mean().expect("d > 0");
            part.iter_mut()
                .zip(&ln.gamma)
                .for_each(|(v, g)| *v = (*v - mean) / std * g);
        }
        let mut bias = state.bias.row_mut(i);
        let mean = bias.mean().expect("d > 0");
        bias.iter_mut()
            .zip(ln.gamma.iter().zip(&ln.beta))
            .for_each(|(v, (g, b))| *v = (*v - mean) / std * g + b);
    }
}

/// Runs the decomposition, handing the state after each stage to `observer`
/// (stage 0 is the embedding output, stage `l + 1` the output of layer `l`).
pub fn decompose_with<F>(
    trace: &ForwardTrace,
    bundle: &EncoderBundle,
    target: Target,
    mut observer: F,
) -> Result<Decomposition, AttributionError>
where
    F: FnMut(usize, &DecompState),
{
    let config = &bundle.config;
    let classes = config.num_classes;
    let target = match target {
        Target::Predicted => argmax(&trace.logits),
        Target::Class(c) if c < classes => c,
        Target::Class(c) => return Err(AttributionError::TargetOutOfRange { target: c, classes }),
    };
    let n = trace.seq_len();
    let d = config.hidden_dim;
    let dh = config.head_dim();

    let mut state = DecompState {
        parts: Array3::zeros((n, n, d)),
        bias: Array2::zeros((n, d)),
    };
    for i in 0..n {
        state.parts.slice_mut(s![i, i, ..]).assign(&trace.hidden[0].row(i));
    }
    let mut stage_errors = vec![check("embeddings".into(), &state, &trace.hidden[0])?];
    observer(0, &state);

    for (l, (layer, lt)) in bundle.layers.iter().zip(&trace.layers).enumerate() {
        // Attention: z_{i<=k} = sum_h sum_j alpha^h_ij (x_{j<=k} W_V[h] W_O[h])
        let flat = state.parts.view().into_shape_with_order((n * n, d)).expect("contiguous");
        let mut mixed = Array2::<f64>::zeros((n, n * d));
        let mut mixed_bias = Array2::<f64>::zeros((n, d));
        let mut const_bias = layer.b_o.clone();
        for (h, alpha) in lt.attention.iter().enumerate() {
            let rows = s![h * dh..(h + 1) * dh, ..];
            let cols = s![.., h * dh..(h + 1) * dh];
            let map = layer.w_v.slice(cols).dot(&layer.w_o.slice(rows));
            let mapped = flat.dot(&map).into_shape_with_order((n, n * d)).expect("contiguous");
            mixed += &alpha.dot(&mapped);
            mixed_bias += &alpha.dot(&state.bias.dot(&map));
            // Attention rows sum to one, so the value bias passes through unchanged.
            const_bias += &layer.b_v.slice(s![h * dh..(h + 1) * dh]).dot(&layer.w_o.slice(rows));
        }
        state.parts += &mixed.into_shape_with_order((n, n, d)).expect("contiguous");
        state.bias += &(mixed_bias + &const_bias);
        check(format!("layer {l} attention residual"), &state, &lt.attn_residual)?;

        decompose_layer_norm(&mut state, &lt.attn_ln, &layer.attn_ln);
        check(format!("layer {l} attention norm"), &state, &lt.attn_normed)?;

        // FFN, linearized at the traced pre-activations.
        let f = config.ffn_dim;
        let mut theta = Array2::zeros((n, f));
        for (mut row, zeta) in theta.rows_mut().into_iter().zip(lt.ffn_pre.rows()) {
            row.assign(&activation_ratio(zeta, config.activation, RATIO_EPSILON));
        }
        let flat = state.parts.view().into_shape_with_order((n * n, d)).expect("contiguous");
        let mut pre = flat.dot(&layer.w_ffn1).into_shape_with_order((n, n, f)).expect("contiguous");
        pre *= &theta.view().insert_axis(Axis(1));
        let ffn = pre
            .into_shape_with_order((n * n, f))
            .expect("contiguous")
            .dot(&layer.w_ffn2)
            .into_shape_with_order((n, n, d))
            .expect("contiguous");
        let ffn_bias = ((state.bias.dot(&layer.w_ffn1) + &layer.b_ffn1) * &theta).dot(&layer.w_ffn2) + &layer.b_ffn2;
        state.parts += &ffn;
        state.bias += &ffn_bias;
        check(format!("layer {l} ffn residual"), &state, &lt.ffn_residual)?;

        decompose_layer_norm(&mut state, &lt.ffn_ln, &layer.ffn_ln);
        stage_errors.push(check(format!("layer {l} output"), &state, &trace.hidden[l + 1])?);
        observer(l + 1, &state);
    }

    let cls_parts = state.parts.index_axis(Axis(0), 0);
    let contributions = bundle.w_cls.dot(&cls_parts.t());
    let bias = bundle.w_cls.dot(&state.bias.row(0)) + &bundle.b_cls;
    let recon = contributions.sum_axis(Axis(1)) + &bias;
    let head_error = (&recon - &trace.logits).mapv(|v| v * v).sum().sqrt()
        / trace.logits.dot(&trace.logits).sqrt().max(1.0);
    if !(head_error.is_finite() && head_error <= DRIFT_LIMIT) {
        return Err(AttributionError::ReconstructionDrift {
            stage: "classifier head".into(),
            error: head_error,
        });
    }
    Ok(Decomposition {
        contributions,
        bias,
        logits: trace.logits.clone(),
        target,
        stage_errors,
        head_error,
    })
}

pub fn decompx(trace: &ForwardTrace, bundle: &EncoderBundle, target: Target) -> Result<Decomposition, AttributionError> {
    decompose_with(trace, bundle, target, |_, _| {})
}

fn argmax(v: &Array1<f64>) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{forward, tiny_config};
    use ndarray::array;

    #[test]
    fn relu_ratio() {
        let theta = activation_ratio(array![2.0, -3.0].view(), Activation::Relu, 1e-8);
        assert_eq!(theta, array![1.0, 0.0]);
    }

    #[test]
    fn identity_ratio_is_one() {
        let theta = activation_ratio(array![-4.0, 0.0, 1e-20, 7.5].view(), Activation::Identity, 1e-8);
        assert_eq!(theta, array![1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn gelu_ratio_near_zero_uses_slope() {
        let theta = activation_ratio(array![1e-12].view(), Activation::Gelu, 1e-8);
        assert_eq!(theta, array![0.5]);
        let theta = activation_ratio(array![2.0].view(), Activation::Gelu, 1e-8);
        assert!((theta[0] - Activation::Gelu.apply(2.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn head_contributions_sum_to_logits() {
        let bundle = EncoderBundle::random(tiny_config(), 17).unwrap();
        let trace = forward(&bundle, &[2, 9, 4, 4, 30, 3]).unwrap();
        let dec = decompx(&trace, &bundle, Target::Predicted).unwrap();
        let recon = dec.contributions.sum_axis(Axis(1)) + &dec.bias;
        for c in 0..2 {
            assert!((recon[c] - trace.logits[c]).abs() < 1e-10);
        }
        assert_eq!(dec.target, argmax(&trace.logits));
        assert!(dec.max_error() < 1e-10);
    }

    #[test]
    fn every_stage_reconstructs() {
        let bundle = EncoderBundle::random(tiny_config(), 5).unwrap();
        let trace = forward(&bundle, &[1, 2, 3, 4, 5, 6]).unwrap();
        let mut seen = Vec::new();
        decompose_with(&trace, &bundle, Target::Class(1), |stage, state| {
            let recon = state.reconstruct();
            let err = (&recon - &trace.hidden[stage]).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-10, "stage {stage}: {err}");
            seen.push(stage);
        })
        .unwrap();
        assert_eq!(seen, vec![0, 1, 2]);
    }

    #[test]
    fn single_source_carries_everything_but_bias() {
        let mut config = tiny_config();
        config.num_layers = 1;
        let bundle = EncoderBundle::random(config, 6).unwrap();
        let trace = forward(&bundle, &[4]).unwrap();
        let dec = decompx(&trace, &bundle, Target::Class(0)).unwrap();
        let s = dec.saliency(&[false], ScoreSign::Signed);
        assert!((s.scores[0] - (trace.logits[0] - dec.bias[0])).abs() < 1e-10);
    }

    #[test]
    fn target_out_of_range() {
        let bundle = EncoderBundle::random(tiny_config(), 5).unwrap();
        let trace = forward(&bundle, &[1, 2]).unwrap();
        assert_eq!(
            decompx(&trace, &bundle, Target::Class(2)).unwrap_err(),
            AttributionError::TargetOutOfRange { target: 2, classes: 2 }
        );
    }

    #[test]
    fn corrupted_gamma_is_detected() {
        let bundle = EncoderBundle::random(tiny_config(), 5).unwrap();
        let trace = forward(&bundle, &[1, 2, 3]).unwrap();
        let mut bad = bundle.clone();
        bad.layers[0].attn_ln.gamma *= 1.5;
        match decompx(&trace, &bad, Target::Predicted) {
            Err(AttributionError::ReconstructionDrift { stage, .. }) => {
                assert_eq!(stage, "layer 0 attention norm")
            }
            other => panic!("expected drift, got {other:?}"),
        }
    }

    #[test]
    fn magnitude_scores() {
        let bundle = EncoderBundle::random(tiny_config(), 12).unwrap();
        let trace = forward(&bundle, &[1, 2, 3, 4]).unwrap();
        let dec = decompx(&trace, &bundle, Target::Class(0)).unwrap();
        let mask = [true, false, false, true];
        let signed = dec.saliency(&mask, ScoreSign::Signed);
        let mag = dec.saliency(&mask, ScoreSign::Magnitude);
        assert_eq!(signed.len(), 2);
        for (s, m) in signed.scores.iter().zip(&mag.scores) {
            assert_eq!(s.abs(), *m);
        }
        assert_eq!(signed.scores[0], dec.contributions[[0, 1]]);
    }
}
