use ndarray::Array2;

use super::{AttributionMatrix, AttributionMethod};
use crate::encoder::ForwardTrace;

/// `0.5 * a + 0.5 * I`
pub fn residual_mix(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a * 0.5;
    for i in 0..out.nrows() {
        out[[i, i]] += 0.5;
    }
    out
}

/// Multiplies per-layer factors bottom-up: `R_1 = F_1`, `R_l = F_l R_{l-1}`.
pub fn rollout<I>(factors: I) -> Array2<f64>
where
    I: IntoIterator<Item = Array2<f64>>,
{
    let mut iter = factors.into_iter();
    let mut acc = iter.next().expect("at least one layer");
    for factor in iter {
        acc = factor.dot(&acc);
    }
    acc
}

/// Attention rollout over head-averaged attention with residual mixing.
pub fn attention_rollout(trace: &ForwardTrace) -> AttributionMatrix {
    let values = rollout((0..trace.num_layers()).map(|l| residual_mix(&trace.mean_attention(l))));
    AttributionMatrix {
        values,
        method: AttributionMethod::Rollout,
        degenerate_rows: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{forward, tiny_config, EncoderBundle};

    fn naive_product(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        let n = a.nrows();
        let mut out = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..n {
                    acc += a[[i, t]] * b[[t, j]];
                }
                out[[i, j]] = acc;
            }
        }
        out
    }

    #[test]
    fn single_layer_is_the_mixed_factor() {
        let mut config = tiny_config();
        config.num_layers = 1;
        let bundle = EncoderBundle::random(config, 1).unwrap();
        let trace = forward(&bundle, &[1, 2, 3, 4]).unwrap();
        let r = attention_rollout(&trace);
        assert_eq!(r.values, residual_mix(&trace.mean_attention(0)));
    }

    #[test]
    fn identity_factors_stay_identity() {
        let eye = Array2::<f64>::eye(5);
        let r = rollout((0..4).map(|_| residual_mix(&eye)));
        assert_eq!(r, eye);
    }

    #[test]
    fn three_layers_match_naive_product() {
        let mut config = tiny_config();
        config.num_layers = 3;
        let bundle = EncoderBundle::random(config, 33).unwrap();
        let trace = forward(&bundle, &[3, 5, 7, 11, 13, 17]).unwrap();
        let f: Vec<Array2<f64>> = (0..3).map(|l| residual_mix(&trace.mean_attention(l))).collect();
        let expected = naive_product(&f[2], &naive_product(&f[1], &f[0]));
        let got = attention_rollout(&trace).values;
        assert!((&got - &expected).iter().all(|v| v.abs() < 1e-12));
        for row in got.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }
}
