//! Grouped 2-D cross-correlation (the deep-learning "convolution") with
//! zero padding, plus its input and weight gradients.
//!
//! Layout: inputs `[N, C_in, H, W]`, weights `[C_out, C_in/g, kh, kw]`,
//! outputs `[N, C_out, H', W']`. Internally each (sample, group) pair is
//! lowered to an im2col buffer and handled by the gemm kernels; gradients
//! reuse the same lowering.

use super::gemm::{gemm, gemm_a_bt_acc, gemm_at_b};
use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

/// `floor((input + 2*padding - k) / stride) + 1`, or `None` when the kernel
/// does not fit in the padded input.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || k == 0 || k > padded {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    ci_g: usize,
    co_g: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    groups: usize,
    stride: usize,
    padding: usize,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.ci_g * self.kh * self.kw
    }
    fn spatial_out(&self) -> usize {
        self.ho * self.wo
    }
}

fn check_conv(
    x_shape: &[usize],
    w_shape: &[usize],
    groups: usize,
    stride: usize,
    padding: usize,
) -> Result<ConvDims> {
    if x_shape.len() != 4 {
        return Err(Error::shape("conv2d", format!("input rank {:?}", x_shape)));
    }
    if w_shape.len() != 4 {
        return Err(Error::shape("conv2d", format!("weight rank {:?}", w_shape)));
    }
    if stride == 0 {
        return Err(Error::config("conv2d: stride must be >= 1"));
    }
    if groups == 0 {
        return Err(Error::config("conv2d: groups must be >= 1"));
    }
    let (n, c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (c_out, wc, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    if c_in % groups != 0 || c_out % groups != 0 {
        return Err(Error::config(format!(
            "conv2d: groups {groups} must divide C_in {c_in} and C_out {c_out}"
        )));
    }
    if wc != c_in / groups {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight expects {} input channels per group, input provides {}",
                wc,
                c_in / groups
            ),
        ));
    }
    let (ho, wo) = match (
        conv_out_dim(h, kh, stride, padding),
        conv_out_dim(w, kw, stride, padding),
    ) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}"),
            ))
        }
    };
    Ok(ConvDims {
        n,
        c_in,
        h,
        w,
        c_out,
        ci_g: c_in / groups,
        co_g: c_out / groups,
        kh,
        kw,
        ho,
        wo,
        groups,
        stride,
        padding,
    })
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `k_off`:
/// the positions where `o*stride + k_off - padding` lands inside `[0, limit)`.
#[inline]
fn valid_range(out_dim: usize, stride: usize, k_off: usize, padding: usize, limit: usize) -> (usize, usize) {
    let off = k_off as isize - padding as isize;
    // o*stride + off >= 0
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride)
    };
    // o*stride + off <= limit-1
    let hi_num = limit as isize - 1 - off;
    let hi = if hi_num < 0 {
        0
    } else {
        (hi_num as usize / stride + 1).min(out_dim)
    };
    (lo.min(out_dim), hi.max(lo).min(out_dim))
}

/// Lower one (sample, group) slab of `x` into `col`, shaped
/// `[ci_g*kh*kw, ho*wo]` row-major, zero-filling out-of-image taps.
fn im2col<T: Scalar>(x: &[T], d: &ConvDims, sample: usize, group: usize, col: &mut [T]) {
    let zero = T::from_f64(0.0);
    let s = d.spatial_out();
    for ci_l in 0..d.ci_g {
        let ci = group * d.ci_g + ci_l;
        let plane = &x[(sample * d.c_in + ci) * d.h * d.w..][..d.h * d.w];
        for kr in 0..d.kh {
            for kc in 0..d.kw {
                let row = &mut col[((ci_l * d.kh + kr) * d.kw + kc) * s..][..s];
                let (lo, hi) = valid_range(d.wo, d.stride, kc, d.padding, d.w);
                let col_off = kc as isize - d.padding as isize;
                for oh in 0..d.ho {
                    let ih = (oh * d.stride + kr) as isize - d.padding as isize;
                    let seg = &mut row[oh * d.wo..(oh + 1) * d.wo];
                    if ih < 0 || ih >= d.h as isize {
                        seg.fill(zero);
                        continue;
                    }
                    let base = ih as usize * d.w;
                    seg[..lo].fill(zero);
                    seg[hi..].fill(zero);
                    if d.stride == 1 {
                        let start = (lo as isize + col_off) as usize + base;
                        seg[lo..hi].copy_from_slice(&plane[start..start + (hi - lo)]);
                    } else {
                        for (ow, dst) in seg.iter_mut().enumerate().take(hi).skip(lo) {
                            let iw = (ow * d.stride) as isize + col_off;
                            *dst = plane[base + iw as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the columns of `dcol` back into per-plane f64 accumulators.
fn col2im_add<T: Scalar>(dcol: &[T], d: &ConvDims, acc_planes: &mut [f64]) {
    let s = d.spatial_out();
    for ci_l in 0..d.ci_g {
        let plane = &mut acc_planes[ci_l * d.h * d.w..][..d.h * d.w];
        for kr in 0..d.kh {
            for kc in 0..d.kw {
                let row = &dcol[((ci_l * d.kh + kr) * d.kw + kc) * s..][..s];
                let (lo, hi) = valid_range(d.wo, d.stride, kc, d.padding, d.w);
                let col_off = kc as isize - d.padding as isize;
                for oh in 0..d.ho {
                    let ih = (oh * d.stride + kr) as isize - d.padding as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    let base = ih as usize * d.w;
                    let seg = &row[oh * d.wo..(oh + 1) * d.wo];
                    for (ow, &v) in seg.iter().enumerate().take(hi).skip(lo) {
                        let iw = (ow * d.stride) as isize + col_off;
                        plane[base + iw as usize] += v.to_f64();
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(x: &Tensor, w: &Tensor, d: &ConvDims) -> Tensor {
    let xs = T::of(x);
    let ws = T::of(w);
    let s = d.spatial_out();
    let patch = d.patch();
    let mut out = vec![T::from_f64(0.0); d.n * d.c_out * s];
    let mut col = vec![T::from_f64(0.0); patch * s];
    for sample in 0..d.n {
        for g in 0..d.groups {
            im2col(xs, d, sample, g, &mut col);
            let w_g = &ws[g * d.co_g * patch..(g + 1) * d.co_g * patch];
            let out_g = &mut out[(sample * d.c_out + g * d.co_g) * s..][..d.co_g * s];
            gemm(w_g, &col, out_g, d.co_g, patch, s, false);
        }
    }
    T::tensor(&[d.n, d.c_out, d.ho, d.wo], out)
}

/// `y = x (*) w` with `groups` channel groups; cross-correlation, zero pad.
pub fn grouped_conv2d(
    x: &Tensor,
    w: &Tensor,
    groups: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let d = check_conv(x.shape(), w.shape(), groups, stride, padding)?;
    if x.dtype() != w.dtype() {
        return Err(Error::DTypeMismatch {
            op: "conv2d",
            lhs: x.dtype(),
            rhs: w.dtype(),
        });
    }
    Ok(match x.dtype() {
        DType::F32 => conv_forward::<f32>(x, w, &d),
        DType::F64 => conv_forward::<f64>(x, w, &d),
    })
}

/// Ungrouped convolution: `grouped_conv2d` with one group.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    grouped_conv2d(x, w, 1, stride, padding)
}

fn grad_input_impl<T: Scalar>(w: &Tensor, dy: &Tensor, d: &ConvDims) -> Tensor {
    let ws = T::of(w);
    let dys = T::of(dy);
    let s = d.spatial_out();
    let patch = d.patch();
    let mut dx = vec![T::from_f64(0.0); d.n * d.c_in * d.h * d.w];
    let mut dcol = vec![T::from_f64(0.0); patch * s];
    let mut planes = vec![0.0f64; d.ci_g * d.h * d.w];
    for sample in 0..d.n {
        for g in 0..d.groups {
            let w_g = &ws[g * d.co_g * patch..(g + 1) * d.co_g * patch];
            let dy_g = &dys[(sample * d.c_out + g * d.co_g) * s..][..d.co_g * s];
            gemm_at_b(w_g, dy_g, &mut dcol, d.co_g, patch, s, false);
            planes.fill(0.0);
            col2im_add(&dcol, d, &mut planes);
            let dst = &mut dx[(sample * d.c_in + g * d.ci_g) * d.h * d.w..][..d.ci_g * d.h * d.w];
            for (o, &v) in dst.iter_mut().zip(planes.iter()) {
                *o = T::from_f64(v);
            }
        }
    }
    T::tensor(&[d.n, d.c_in, d.h, d.w], dx)
}

/// Gradient of the convolution output with respect to the input.
pub fn conv2d_grad_input(
    w: &Tensor,
    dy: &Tensor,
    groups: usize,
    stride: usize,
    padding: usize,
    input_hw: (usize, usize),
) -> Result<Tensor> {
    let n = dy.shape()[0];
    let c_in = w.shape()[1] * groups;
    let x_shape = [n, c_in, input_hw.0, input_hw.1];
    let d = check_conv(&x_shape, w.shape(), groups, stride, padding)?;
    if dy.shape() != [d.n, d.c_out, d.ho, d.wo] {
        return Err(Error::shape(
            "conv2d_grad_input",
            format!(
                "upstream shape {:?}, expected {:?}",
                dy.shape(),
                [d.n, d.c_out, d.ho, d.wo]
            ),
        ));
    }
    Ok(match w.dtype() {
        DType::F32 => grad_input_impl::<f32>(w, dy, &d),
        DType::F64 => grad_input_impl::<f64>(w, dy, &d),
    })
}

fn grad_weight_impl<T: Scalar>(x: &Tensor, dy: &Tensor, d: &ConvDims) -> Tensor {
    let xs = T::of(x);
    let dys = T::of(dy);
    let s = d.spatial_out();
    let patch = d.patch();
    // f64 accumulation across the whole batch, cast once at the end.
    let mut dw_acc = vec![0.0f64; d.c_out * patch];
    let mut col = vec![T::from_f64(0.0); patch * s];
    for sample in 0..d.n {
        for g in 0..d.groups {
            im2col(xs, d, sample, g, &mut col);
            let dy_g = &dys[(sample * d.c_out + g * d.co_g) * s..][..d.co_g * s];
            let dw_g = &mut dw_acc[g * d.co_g * patch..(g + 1) * d.co_g * patch];
            gemm_a_bt_acc(dy_g, &col, dw_g, d.co_g, patch, s);
        }
    }
    let dw: Vec<T> = dw_acc.into_iter().map(T::from_f64).collect();
    T::tensor(&[d.c_out, d.ci_g, d.kh, d.kw], dw)
}

/// Gradient of the convolution output with respect to the weights.
pub fn conv2d_grad_weight(
    x: &Tensor,
    dy: &Tensor,
    groups: usize,
    stride: usize,
    padding: usize,
    kernel_hw: (usize, usize),
) -> Result<Tensor> {
    let c_out = dy.shape()[1];
    let w_shape = [
        c_out,
        x.shape()[1] / groups.max(1),
        kernel_hw.0,
        kernel_hw.1,
    ];
    let d = check_conv(x.shape(), &w_shape, groups, stride, padding)?;
    if dy.shape() != [d.n, d.c_out, d.ho, d.wo] {
        return Err(Error::shape(
            "conv2d_grad_weight",
            format!(
                "upstream shape {:?}, expected {:?}",
                dy.shape(),
                [d.n, d.c_out, d.ho, d.wo]
            ),
        ));
    }
    Ok(match x.dtype() {
        DType::F32 => grad_weight_impl::<f32>(x, dy, &d),
        DType::F64 => grad_weight_impl::<f64>(x, dy, &d),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_one_by_one_kernel() {
        let x = Tensor::from_f64(&[1, 1, 3, 3], (0..9).map(|i| i as f64 - 4.0).collect());
        let w = Tensor::from_f64(&[1, 1, 1, 1], vec![1.0]);
        let y = conv2d(&x, &w, 1, 0).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.to_f64_vec(), x.to_f64_vec());
    }

    #[test]
    fn all_ones_three_by_three() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0, DType::F64);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0, DType::F64);
        let y = conv2d(&x, &w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.at(0), 9.0);
    }

    #[test]
    fn depthwise_doubling() {
        let x = Tensor::from_f64(&[1, 3, 2, 2], (0..12).map(|i| i as f64).collect());
        let w = Tensor::full(&[3, 1, 1, 1], 2.0, DType::F64);
        let y = grouped_conv2d(&x, &w, 3, 1, 0).unwrap();
        let want: Vec<f64> = (0..12).map(|i| 2.0 * i as f64).collect();
        assert_eq!(y.to_f64_vec(), want);
    }

    #[test]
    fn group_divisibility_is_config_error() {
        let x = Tensor::zeros(&[1, 3, 4, 4], DType::F64);
        let w = Tensor::zeros(&[4, 1, 3, 3], DType::F64);
        let err = grouped_conv2d(&x, &w, 2, 1, 1).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor::zeros(&[1, 3, 4, 4], DType::F64);
        let w = Tensor::zeros(&[2, 4, 3, 3], DType::F64);
        let err = conv2d(&x, &w, 1, 1).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }), "{err}");
    }

    #[test]
    fn kernel_larger_than_padded_input_rejected() {
        let x = Tensor::zeros(&[1, 1, 2, 2], DType::F64);
        let w = Tensor::zeros(&[1, 1, 5, 5], DType::F64);
        assert!(conv2d(&x, &w, 1, 1).is_err());
        assert!(conv2d(&x, &w, 1, 2).is_ok());
    }

    #[test]
    fn output_dims_follow_floor_formula() {
        assert_eq!(conv_out_dim(8, 3, 1, 1), Some(8));
        assert_eq!(conv_out_dim(8, 3, 2, 1), Some(4));
        assert_eq!(conv_out_dim(5, 3, 2, 0), Some(2));
        assert_eq!(conv_out_dim(2, 5, 1, 1), None);
    }
}
