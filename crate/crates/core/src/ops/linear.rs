//! Fully connected layer `y = x w^T (+ bias)`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<(usize, usize, usize)> {
    if x.rank() != 2 || w.rank() != 2 {
        return Err(Error::shape(
            "linear",
            format!("x {:?}, w {:?}", x.shape(), w.shape()),
        ));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let (m, wd) = (w.shape()[0], w.shape()[1]);
    if wd != d {
        return Err(Error::shape(
            "linear",
            format!("x feature dim {d} vs weight dim {wd}"),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [m] {
            return Err(Error::shape(
                "linear",
                format!("bias {:?} vs M={m}", b.shape()),
            ));
        }
    }
    Ok((n, d, m))
}

/// `y[n, m] = sum_d x[n, d] * w[m, d] (+ bias[m])`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, d, m) = check(x, w, bias)?;
    let mut out = Tensor::zeros(&[n, m], x.dtype());
    for b in 0..n {
        for row in 0..m {
            let mut sum = 0.0f64;
            for col in 0..d {
                sum += x.at(b * d + col) * w.at(row * d + col);
            }
            if let Some(bt) = bias {
                sum += bt.at(row);
            }
            out.set(b * m + row, sum);
        }
    }
    Ok(out)
}

/// Gradients `(dx, dw, dbias)` of the linear layer.
pub fn linear_grads(
    x: &Tensor,
    w: &Tensor,
    up: &Tensor,
    with_bias: bool,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let (n, d, m) = check(x, w, None)?;
    let mut dx = Tensor::zeros(x.shape(), x.dtype());
    let mut dw = vec![0.0f64; m * d];
    let mut db = vec![0.0f64; m];
    for b in 0..n {
        for row in 0..m {
            let u = up.at(b * m + row);
            db[row] += u;
            for col in 0..d {
                dw[row * d + col] += u * x.at(b * d + col);
            }
        }
        for col in 0..d {
            let mut sum = 0.0f64;
            for row in 0..m {
                sum += up.at(b * m + row) * w.at(row * d + col);
            }
            dx.set(b * d + col, sum);
        }
    }
    let mut dwt = Tensor::zeros(w.shape(), w.dtype());
    for i in 0..m * d {
        dwt.set(i, dw[i]);
    }
    let dbias = if with_bias {
        let mut t = Tensor::zeros(&[m], w.dtype());
        for i in 0..m {
            t.set(i, db[i]);
        }
        Some(t)
    } else {
        None
    };
    Ok((dx, dwt, dbias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    #[test]
    fn identity_weight_passes_through() {
        let x = Tensor::from_f64(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]);
        let mut w = Tensor::zeros(&[3, 3], DType::F64);
        for i in 0..3 {
            w.set(i * 3 + i, 1.0);
        }
        let y = linear(&x, &w, None).unwrap();
        assert_eq!(y.to_f64_vec(), x.to_f64_vec());
    }

    #[test]
    fn zero_input_returns_bias() {
        let x = Tensor::zeros(&[2, 4], DType::F64);
        let w = Tensor::full(&[3, 4], 0.5, DType::F64);
        let bias = Tensor::from_f64(&[3], vec![1.0, -2.0, 0.25]);
        let y = linear(&x, &w, Some(&bias)).unwrap();
        assert_eq!(y.to_f64_vec(), vec![1.0, -2.0, 0.25, 1.0, -2.0, 0.25]);
    }

    #[test]
    fn feature_mismatch_rejected() {
        let x = Tensor::zeros(&[1, 3], DType::F64);
        let w = Tensor::zeros(&[2, 4], DType::F64);
        assert!(linear(&x, &w, None).is_err());
    }
}
