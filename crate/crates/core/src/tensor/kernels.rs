//! Numerically stable scalar and vector kernels shared by the graph ops and
//! by the non-differentiable analysis code (contrastive distributions etc).

use crate::error::{domain, Result};

/// Softmax with max-subtraction. Errors on an empty slice.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(domain("softmax of an empty vector"));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `log(softmax(logits))`, fused so large negative entries stay finite.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(domain("log_softmax of an empty vector"));
    }
    let lse = log_sum_exp(logits);
    Ok(logits.iter().map(|&x| x - lse).collect())
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// `log σ(x)` computed as `-softplus(-x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_uniform() {
        let p = softmax(&[0.0; 4]).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_hand_values() {
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        let expected = [0.09003, 0.24473, 0.66524];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_empty_is_error() {
        assert!(softmax(&[]).is_err());
        assert!(log_softmax(&[]).is_err());
    }

    #[test]
    fn softmax_extreme_inputs_stay_finite() {
        let p = softmax(&[1000.0, -1000.0, 0.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_sigmoid_values() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        let x = 8f64.ln();
        assert!((log_sigmoid(x) - (8.0f64 / 9.0).ln()).abs() < 1e-12);
        assert!((log_sigmoid(x) + 0.117783).abs() < 1e-6);
        assert!(log_sigmoid(-700.0).is_finite());
        assert!(log_sigmoid(700.0) <= 0.0);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn softmax_is_probability_vector(xs in prop::collection::vec(-50.0f64..50.0, 1..40)) {
            let p = softmax(&xs).unwrap();
            prop_assert!(p.iter().all(|&v| v > 0.0 && v <= 1.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn softmax_shift_invariant(xs in prop::collection::vec(-20.0f64..20.0, 1..20), c in -30.0f64..30.0) {
            let p = softmax(&xs).unwrap();
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn log_sigmoid_odds_identity(x in -700.0f64..700.0) {
            // sigma(x) / sigma(-x) = e^x
            let d = log_sigmoid(x) - log_sigmoid(-x);
            prop_assert!((d - x).abs() <= 1e-12 * x.abs().max(1.0));
            prop_assert!(log_sigmoid(x).is_finite());
        }
    }
}
