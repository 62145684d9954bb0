//! Scalar and slice-level numeric kernels shared by the graph and by
//! sampling-based estimators.

use crate::error::{Error, Result};

/// Numerically stable softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("softmax of empty vector".to_string()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// -log softmax(logits)[target], computed as logsumexp(logits) - logits[target].
pub fn cross_entropy_logits(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::TargetOutOfRange { target, classes: logits.len() });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[target])
}

/// C[m,n] = A[m,k] @ B[k,n], row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p[0] > 1.0 - 1e-12);
        assert!(p[1] >= 0.0 && p[1] < 1e-12);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_reference_values() {
        // Frozen from a 40-digit evaluation of exp/normalize.
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        assert!((p[0] - 0.09003057317038046).abs() < 1e-12);
        assert!((p[1] - 0.24472847105479765).abs() < 1e-12);
        assert!((p[2] - 0.6652409557748219).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one_and_keeps_argmax() {
        let logits = [3.0, -1.0, 7.5, 7.2];
        let p = softmax(&logits).unwrap();
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        let argmax_in = 2;
        let argmax_out =
            p.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
        assert_eq!(argmax_in, argmax_out);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        match softmax(&[1.0, f64::NAN]) {
            Err(Error::NonFiniteLogits) => {}
            other => panic!("expected NonFiniteLogits, got {other:?}"),
        }
    }

    #[test]
    fn sigmoid_reference_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(2.0) - 0.8807970779778824).abs() < 1e-14);
        for &x in &[-5.0, -0.3, 0.0, 1.7, 9.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-12);
            assert!(sigmoid(x) > 0.0 && sigmoid(x) < 1.0);
        }
    }

    #[test]
    fn cross_entropy_reference_values() {
        // Equal logits over K classes -> ln K.
        let k = 7;
        let ce = cross_entropy_logits(&[0.3; 7], 2).unwrap();
        assert!((ce - (k as f64).ln()).abs() < 1e-12);
        // Dominant logit -> ~0.
        let ce = cross_entropy_logits(&[50.0, 0.0, 0.0], 0).unwrap();
        assert!((0.0..1e-12).contains(&ce));
        // [1, 0] with target 0 -> ln(1 + e^-1).
        let ce = cross_entropy_logits(&[1.0, 0.0], 0).unwrap();
        assert!((ce - 0.31326168751822286).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        match cross_entropy_logits(&[1.0, 2.0], 2) {
            Err(Error::TargetOutOfRange { target: 2, classes: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn matmul_small_case() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let c = matmul(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
    }
}
