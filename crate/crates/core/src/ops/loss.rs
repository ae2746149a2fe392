//! Mean softmax cross-entropy over a batch of logit rows.

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

fn check(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    if logits.rank() != 2 {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{:?}", logits.shape()),
        ));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    Ok((n, k))
}

/// Row-wise softmax probabilities, max-subtracted for stability.
pub fn softmax_probs(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(Error::shape("softmax", format!("{:?}", logits.shape())));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut probs = Tensor::zeros(&[n, k], DType::F64);
    for b in 0..n {
        let row_max = (0..k).fold(f64::NEG_INFINITY, |m, j| m.max(logits.at(b * k + j)));
        let mut denom = 0.0f64;
        for j in 0..k {
            denom += (logits.at(b * k + j) - row_max).exp();
        }
        for j in 0..k {
            probs.set(b * k + j, (logits.at(b * k + j) - row_max).exp() / denom);
        }
    }
    Ok(probs)
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, k) = check(logits, labels)?;
    let mut total = 0.0f64;
    for b in 0..n {
        let row_max = (0..k).fold(f64::NEG_INFINITY, |m, j| m.max(logits.at(b * k + j)));
        let mut denom = 0.0f64;
        for j in 0..k {
            denom += (logits.at(b * k + j) - row_max).exp();
        }
        total += denom.ln() - (logits.at(b * k + labels[b]) - row_max);
    }
    Ok(total / n as f64)
}

/// `d loss / d logits = (softmax - onehot) / N`, scaled by `up`.
pub fn softmax_cross_entropy_grad(logits: &Tensor, labels: &[usize], up: f64) -> Result<Tensor> {
    let (n, k) = check(logits, labels)?;
    let probs = softmax_probs(logits)?;
    let mut dl = Tensor::zeros(logits.shape(), logits.dtype());
    for b in 0..n {
        for j in 0..k {
            let onehot = if labels[b] == j { 1.0 } else { 0.0 };
            dl.set(b * k + j, up * (probs.at(b * k + j) - onehot) / n as f64);
        }
    }
    Ok(dl)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::zeros(&[2, 8], DType::F64);
        let loss = softmax_cross_entropy(&logits, &[3, 5]).unwrap();
        assert!((loss - (8.0f64).ln()).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn confident_correct_logits_give_near_zero_loss() {
        let mut logits = Tensor::zeros(&[1, 4], DType::F64);
        logits.set(2, 1e6);
        let loss = softmax_cross_entropy(&logits, &[2]).unwrap();
        assert!(loss.abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn out_of_range_label_is_input_error() {
        let logits = Tensor::zeros(&[1, 4], DType::F64);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[4]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn matches_direct_formula_on_seeded_rows() {
        let mut rng = crate::rng::SplitMix64::new(5);
        let logits = Tensor::generate(&[4, 6], DType::F64, || rng.gaussian() * 3.0);
        let labels = [0usize, 5, 2, 3];
        let got = softmax_cross_entropy(&logits, &labels).unwrap();
        // Direct (unstabilized) formula as an independent route.
        let mut want = 0.0;
        for b in 0..4 {
            let z: Vec<f64> = (0..6).map(|j| logits.at(b * 6 + j)).collect();
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            want += -(z[labels[b]].exp() / denom).ln();
        }
        want /= 4.0;
        assert!((got - want).abs() < 1e-10);
    }
}
