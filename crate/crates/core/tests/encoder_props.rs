mod common;

use proptest::prelude::*;

use common::{bundle_and_ids, relative_error};
use salient::encoder::{forward, LayerNorm};
use ndarray::{Array1, Array2, Axis};

/// Layer norm recomputed from scratch.
fn ln(x: &Array2<f64>, p: &LayerNorm, eps: f64) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let std = (var + eps).sqrt();
        row.iter_mut().zip(p.gamma.iter().zip(&p.beta)).for_each(|(v, (g, b))| *v = (*v - mean) / std * g + b);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trace_components_recombine((bundle, ids) in bundle_and_ids()) {
        let t = forward(&bundle, &ids).unwrap();
        let eps = bundle.config.ln_epsilon;
        for (l, (lt, p)) in t.layers.iter().zip(&bundle.layers).enumerate() {
            let mut attn = Array2::zeros(t.hidden[l].raw_dim());
            for (a, fx) in lt.attention.iter().zip(&lt.head_values) {
                attn += &a.dot(fx);
            }
            attn += &p.b_o;
            let residual = &attn + &t.hidden[l];
            prop_assert!(relative_error(&residual, &lt.attn_residual) < 1e-12);
            let normed = ln(&residual, &p.attn_ln, eps);
            prop_assert!(relative_error(&normed, &lt.attn_normed) < 1e-12);
            let act = lt.ffn_pre.mapv(|z| bundle.config.activation.apply(z));
            let ffn = act.dot(&p.w_ffn2) + &p.b_ffn2;
            let out = ln(&(&ffn + &normed), &p.ffn_ln, eps);
            prop_assert!(relative_error(&out, &t.hidden[l + 1]) < 1e-5);
        }
        let logits: Array1<f64> = bundle.w_cls.dot(&t.hidden[bundle.config.num_layers].row(0)) + &bundle.b_cls;
        prop_assert!((&logits - &t.logits).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn forward_is_deterministic((bundle, ids) in bundle_and_ids()) {
        prop_assert_eq!(forward(&bundle, &ids).unwrap(), forward(&bundle, &ids).unwrap());
    }

    #[test]
    fn attention_rows_sum_to_one((bundle, ids) in bundle_and_ids()) {
        let t = forward(&bundle, &ids).unwrap();
        for lt in &t.layers {
            for a in &lt.attention {
                for s in a.sum_axis(Axis(1)) {
                    prop_assert!((s - 1.0).abs() < 1e-6);
                }
                prop_assert!(a.iter().all(|&v| v >= 0.0));
            }
        }
    }
}
