//! Randomized internal-consistency checks on a loaded encoder: DecompX
//! reconstruction at every stage and row-stochastic rollout matrices.

use serde::Serialize;

use crate::attribution::{attention_rollout, decompose_with, globenc, AttributionError, AttributionMatrix, Target};
use crate::compression::SplitMix64;
use crate::encoder::{forward, EncoderBundle};

/// Largest accepted DecompX reconstruction error.
pub const RECONSTRUCTION_TOLERANCE: f64 = 1e-5;
/// Largest accepted deviation of a rollout row sum from one.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;
/// Longest random sequence tried.
pub const MAX_TRIAL_LEN: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfcheckReport {
    pub trials: usize,
    pub worst_reconstruction_error: f64,
    pub worst_row_sum_error: f64,
    pub failures: Vec<String>,
}

impl SelfcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn row_sum_error(m: &AttributionMatrix) -> f64 {
    m.values.rows().into_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max)
}

/// Runs `trials` random token sequences through `traced` and checks the
/// attribution maths against it, using `attributed` for the attribution
/// parameters. The two are the same bundle except under fault injection.
pub fn selfcheck_pair(traced: &EncoderBundle, attributed: &EncoderBundle, trials: usize, seed: u64) -> SelfcheckReport {
    let mut rng = SplitMix64::new(seed);
    let vocab = traced.config.vocab_size as u64;
    let max_len = traced.config.max_positions.min(MAX_TRIAL_LEN) as u64;
    let mut report = SelfcheckReport {
        trials,
        worst_reconstruction_error: 0.0,
        worst_row_sum_error: 0.0,
        failures: Vec::new(),
    };
    for trial in 0..trials {
        let n = 1 + rng.below(max_len) as usize;
        let ids: Vec<u32> = (0..n).map(|_| rng.below(vocab) as u32).collect();
        let trace = forward(traced, &ids).expect("ids and length are in range");
        let mut worst = 0.0f64;
        let result = decompose_with(&trace, attributed, Target::Predicted, |stage, state| {
            worst = worst.max(state.relative_error(&trace.hidden[stage]));
        });
        match result {
            Ok(d) => {
                worst = worst.max(d.max_error());
                if worst > RECONSTRUCTION_TOLERANCE {
                    report.failures.push(format!("trial {trial}: reconstruction error {worst:e}"));
                }
            }
            Err(AttributionError::ReconstructionDrift { stage, error }) => {
                worst = worst.max(error);
                report.failures.push(format!("trial {trial}: drift {error:e} at {stage}"));
            }
            Err(e) => report.failures.push(format!("trial {trial}: {e}")),
        }
        report.worst_reconstruction_error = report.worst_reconstruction_error.max(worst);
        for m in [attention_rollout(&trace), globenc(&trace, attributed)] {
            let err = row_sum_error(&m);
            report.worst_row_sum_error = report.worst_row_sum_error.max(err);
            if !(err <= ROW_SUM_TOLERANCE) {
                report.failures.push(format!("trial {trial}: {} row sum off by {err:e}", m.method));
            }
        }
    }
    report
}

pub fn selfcheck(bundle: &EncoderBundle, trials: usize, seed: u64) -> SelfcheckReport {
    selfcheck_pair(bundle, bundle, trials, seed)
}

/// Test hook: a copy of `bundle` whose first attention layer-norm gain is
/// scaled by 1.5, as if the weights had been corrupted after tracing.
pub fn corrupt_ln_gamma(bundle: &EncoderBundle) -> EncoderBundle {
    let mut bad = bundle.clone();
    if let Some(layer) = bad.layers.first_mut() {
        layer.attn_ln.gamma.mapv_inplace(|g| g * 1.5);
    } else {
        bad.embedding_ln.gamma.mapv_inplace(|g| g * 1.5);
    }
    bad
}
