//! Elementwise activations and their gradients.

use crate::tensor::{Data, Tensor};

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    match x.data() {
        Data::F32(v) => Tensor::from_f32(x.shape(), v.iter().map(|&a| f(a as f64) as f32).collect()),
        Data::F64(v) => Tensor::from_f64(x.shape(), v.iter().map(|&a| f(a)).collect()),
    }
}

fn map2(x: &Tensor, up: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(x.shape(), up.shape());
    let vals: Vec<f64> = (0..x.numel()).map(|i| f(x.at(i), up.at(i))).collect();
    match x.dtype() {
        crate::tensor::DType::F32 => {
            Tensor::from_f32(x.shape(), vals.into_iter().map(|v| v as f32).collect())
        }
        crate::tensor::DType::F64 => Tensor::from_f64(x.shape(), vals),
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    map(x, |a| if a > 0.0 { a } else { 0.0 })
}

/// d relu(x) carried onto `up`; the subgradient at 0 is 0.
pub fn relu_grad(x: &Tensor, up: &Tensor) -> Tensor {
    map2(x, up, |a, u| if a > 0.0 { u } else { 0.0 })
}

/// `x / (1 + |x|)`, odd, open range (-1, 1).
pub fn softsign(x: &Tensor) -> Tensor {
    map(x, |a| a / (1.0 + a.abs()))
}

pub fn softsign_grad(x: &Tensor, up: &Tensor) -> Tensor {
    map2(x, up, |a, u| {
        let d = 1.0 + a.abs();
        u / (d * d)
    })
}

/// `1 / (1 + exp(-x))`, open range (0, 1).
pub fn sigmoid(x: &Tensor) -> Tensor {
    map(x, |a| 1.0 / (1.0 + (-a).exp()))
}

pub fn sigmoid_grad(x: &Tensor, up: &Tensor) -> Tensor {
    map2(x, up, |a, u| {
        let s = 1.0 / (1.0 + (-a).exp());
        u * s * (1.0 - s)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softsign_reference_points() {
        let x = Tensor::from_f64(&[3], vec![0.0, 1.0, -3.0]);
        let y = softsign(&x);
        assert_eq!(y.to_f64_vec(), vec![0.0, 0.5, -0.75]);
    }

    #[test]
    fn sigmoid_and_relu_reference_points() {
        let x = Tensor::from_f64(&[3], vec![0.0, -2.0, 2.0]);
        assert_eq!(sigmoid(&x).at(0), 0.5);
        let r = relu(&x);
        assert_eq!(r.to_f64_vec(), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn softsign_stays_in_open_unit_interval() {
        let x = Tensor::from_f64(&[4], vec![1e6, -1e6, 1e-12, 1e15]);
        for v in softsign(&x).to_f64_vec() {
            assert!(v > -1.0 && v < 1.0);
        }
    }
}
