//! Global average pooling `[N, C, H, W] -> [N, C]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::shape("global_avg_pool", format!("{:?}", x.shape())));
    }
    let (n, c, s) = (x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]);
    let mut out = Tensor::zeros(&[n, c], x.dtype());
    for b in 0..n {
        for ch in 0..c {
            let mut sum = 0.0f64;
            let base = (b * c + ch) * s;
            for i in 0..s {
                sum += x.at(base + i);
            }
            out.set(b * c + ch, sum / s as f64);
        }
    }
    Ok(out)
}

/// Spread `up[n, c] / (H*W)` uniformly over the spatial positions.
pub fn global_avg_pool_grad(x_shape: &[usize], up: &Tensor) -> Tensor {
    let (n, c, s) = (x_shape[0], x_shape[1], x_shape[2] * x_shape[3]);
    let mut dx = Tensor::zeros(x_shape, up.dtype());
    for b in 0..n {
        for ch in 0..c {
            let g = up.at(b * c + ch) / s as f64;
            let base = (b * c + ch) * s;
            for i in 0..s {
                dx.set(base + i, g);
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    #[test]
    fn constant_input_pools_to_constant() {
        let x = Tensor::full(&[2, 3, 4, 4], 2.5, DType::F32);
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.to_f64_vec().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn two_by_two_mean() {
        let x = Tensor::from_f64(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(global_avg_pool(&x).unwrap().at(0), 2.5);
    }
}
