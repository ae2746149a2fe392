//! Layer normalization over the channel axis of `[N, C, H, W]` maps.
//!
//! At every spatial position the C-vector is normalized to zero mean and
//! unit (biased) variance, then scaled and shifted per channel.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(usize, usize, usize)> {
    if x.rank() != 4 {
        return Err(Error::shape("layer_norm", format!("{:?}", x.shape())));
    }
    let c = x.shape()[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "gamma {:?} / beta {:?} vs C={c}",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::config("layer_norm: eps must be positive"));
    }
    Ok((x.shape()[0], c, x.shape()[2] * x.shape()[3]))
}

pub fn channel_layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (n, c, s) = check(x, gamma, beta, eps)?;
    let mut out = Tensor::zeros(x.shape(), x.dtype());
    for b in 0..n {
        for pos in 0..s {
            let base = b * c * s + pos;
            let mut mean = 0.0f64;
            for ch in 0..c {
                mean += x.at(base + ch * s);
            }
            mean /= c as f64;
            let mut var = 0.0f64;
            for ch in 0..c {
                let d = x.at(base + ch * s) - mean;
                var += d * d;
            }
            var /= c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for ch in 0..c {
                let xh = (x.at(base + ch * s) - mean) * inv;
                out.set(base + ch * s, gamma.at(ch) * xh + beta.at(ch));
            }
        }
    }
    Ok(out)
}

/// Gradients of `channel_layer_norm` with respect to (x, gamma, beta).
pub fn channel_layer_norm_grads(
    x: &Tensor,
    gamma: &Tensor,
    up: &Tensor,
    eps: f64,
) -> Result<(Tensor, Tensor, Tensor)> {
    let c = x.shape()[1];
    let beta_dummy = Tensor::zeros(&[c], x.dtype());
    let (n, c, s) = check(x, gamma, &beta_dummy, eps)?;
    let mut dx = Tensor::zeros(x.shape(), x.dtype());
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for b in 0..n {
        for pos in 0..s {
            let base = b * c * s + pos;
            let mut mean = 0.0f64;
            for ch in 0..c {
                mean += x.at(base + ch * s);
            }
            mean /= c as f64;
            let mut var = 0.0f64;
            for ch in 0..c {
                let d = x.at(base + ch * s) - mean;
                var += d * d;
            }
            var /= c as f64;
            let inv = 1.0 / (var + eps).sqrt();

            // g = up * gamma; dx = (g - mean(g) - xh * mean(g * xh)) * inv
            let mut g_mean = 0.0f64;
            let mut gx_mean = 0.0f64;
            for ch in 0..c {
                let xh = (x.at(base + ch * s) - mean) * inv;
                let g = up.at(base + ch * s) * gamma.at(ch);
                g_mean += g;
                gx_mean += g * xh;
                dgamma[ch] += up.at(base + ch * s) * xh;
                dbeta[ch] += up.at(base + ch * s);
            }
            g_mean /= c as f64;
            gx_mean /= c as f64;
            for ch in 0..c {
                let xh = (x.at(base + ch * s) - mean) * inv;
                let g = up.at(base + ch * s) * gamma.at(ch);
                dx.set(base + ch * s, (g - g_mean - xh * gx_mean) * inv);
            }
        }
    }
    let mut dg = Tensor::zeros(&[c], x.dtype());
    let mut db = Tensor::zeros(&[c], x.dtype());
    for ch in 0..c {
        dg.set(ch, dgamma[ch]);
        db.set(ch, dbeta[ch]);
    }
    Ok((dx, dg, db))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::tensor::DType;

    #[test]
    fn constant_channels_normalize_to_zero() {
        // Same value in every channel at each position: mean removes it.
        let x = Tensor::full(&[1, 4, 2, 2], 3.7, DType::F64);
        let gamma = Tensor::full(&[4], 1.0, DType::F64);
        let beta = Tensor::zeros(&[4], DType::F64);
        let y = channel_layer_norm(&x, &gamma, &beta, 1e-6).unwrap();
        assert!(y.max_abs() < 1e-12);
    }

    #[test]
    fn zero_gamma_yields_beta() {
        let x = Tensor::from_f64(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let gamma = Tensor::zeros(&[2], DType::F64);
        let beta = Tensor::from_f64(&[2], vec![0.5, -0.5]);
        let y = channel_layer_norm(&x, &gamma, &beta, 1e-6).unwrap();
        assert_eq!(y.to_f64_vec(), vec![0.5, 0.5, -0.5, -0.5]);
    }

    #[test]
    fn normalized_statistics() {
        let mut rng = SplitMix64::new(11);
        let x = Tensor::generate(&[2, 8, 3, 3], DType::F64, || rng.gaussian() * 2.0 + 1.0);
        let gamma = Tensor::full(&[8], 1.0, DType::F64);
        let beta = Tensor::zeros(&[8], DType::F64);
        let eps = 1e-10;
        let y = channel_layer_norm(&x, &gamma, &beta, eps).unwrap();
        let (c, s) = (8, 9);
        for b in 0..2 {
            for pos in 0..s {
                let vals: Vec<f64> = (0..c).map(|ch| y.at(b * c * s + ch * s + pos)).collect();
                let mean: f64 = vals.iter().sum::<f64>() / c as f64;
                let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                assert!(mean.abs() < 1e-10, "mean {mean}");
                assert!((var - 1.0).abs() < 1e-6, "var {var}");
            }
        }
    }
}
