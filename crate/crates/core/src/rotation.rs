//! Kernel rotation by bilinear resampling of the kernel space.
//!
//! A `k x k` weight grid is treated as samples of a continuous 2-D function
//! on `[0, k-1]^2`. Rotating the kernel counter-clockwise by `theta`
//! (counter-clockwise in the visual sense, positive angles) samples that
//! function at coordinates obtained by rotating each target cell's centered
//! coordinate *clockwise* by `theta` around the center `((k-1)/2, (k-1)/2)`.
//! Coordinates outside the grid sample the value 0.
//!
//! With row index `r` growing downward and column index `c` growing right,
//! the source coordinate of target cell `(r, c)` is
//!
//! ```text
//! r_src = cy + (c - cx) sin(theta) + (r - cy) cos(theta)
//! c_src = cx + (c - cx) cos(theta) - (r - cy) sin(theta)
//! ```
//!
//! Multiples of 90 degrees map grid points onto grid points, so those
//! rotations are exact index permutations; `theta = 0` is a bitwise copy.
//! Rotation is linear in the weights, which makes the weight gradient an
//! exact scatter through the same taps; the angle gradient follows from the
//! derivative of the bilinear weights with respect to the sample coordinate.

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

/// Snap values within this distance of {-1, 0, 1} so quarter turns become
/// exact permutations instead of 1-ulp-perturbed blends.
const TRIG_SNAP: f64 = 1e-12;

fn snap_trig(v: f64) -> f64 {
    for target in [-1.0, 0.0, 1.0] {
        if (v - target).abs() < TRIG_SNAP {
            return target;
        }
    }
    v
}

#[derive(Clone, Copy, Debug)]
struct PlanCell {
    /// Flat source index for an exact in-grid hit; usize::MAX otherwise.
    copy_from: usize,
    /// In-bounds bilinear taps (flat source index, weight).
    taps: [(u32, f64); 4],
    ntaps: u8,
    /// Cell base (floor of the source coordinate) and fractional offsets.
    base_r: i64,
    base_c: i64,
    fr: f64,
    fc: f64,
    /// d(source coordinate)/d(theta) at this cell.
    drs: f64,
    dcs: f64,
}

/// Precomputed sampling plan for one (kernel size, angle) pair; reused
/// across all `C_out * C_in` planes of an expert.
#[derive(Clone, Debug)]
pub(crate) struct RotationPlan {
    k: usize,
    cells: Vec<PlanCell>,
}

impl RotationPlan {
    pub(crate) fn new(k: usize, angle: f64) -> RotationPlan {
        let center = (k as f64 - 1.0) / 2.0;
        let sin = snap_trig(angle.sin());
        let cos = snap_trig(angle.cos());
        let kf = k as i64;
        let mut cells = Vec::with_capacity(k * k);
        for r in 0..k {
            for c in 0..k {
                let dr = r as f64 - center;
                let dc = c as f64 - center;
                let r_src = center + dc * sin + dr * cos;
                let c_src = center + dc * cos - dr * sin;
                let base_r = r_src.floor() as i64;
                let base_c = c_src.floor() as i64;
                let fr = r_src - base_r as f64;
                let fc = c_src - base_c as f64;

                let mut taps = [(0u32, 0.0f64); 4];
                let mut ntaps = 0u8;
                let mut copy_from = usize::MAX;
                if fr == 0.0 && fc == 0.0 && base_r >= 0 && base_r < kf && base_c >= 0 && base_c < kf
                {
                    copy_from = (base_r * kf + base_c) as usize;
                } else {
                    let weights = [
                        (0i64, 0i64, (1.0 - fr) * (1.0 - fc)),
                        (0, 1, (1.0 - fr) * fc),
                        (1, 0, fr * (1.0 - fc)),
                        (1, 1, fr * fc),
                    ];
                    for (or, oc, wt) in weights {
                        let rr = base_r + or;
                        let cc = base_c + oc;
                        if wt != 0.0 && rr >= 0 && rr < kf && cc >= 0 && cc < kf {
                            taps[ntaps as usize] = ((rr * kf + cc) as u32, wt);
                            ntaps += 1;
                        }
                    }
                }
                cells.push(PlanCell {
                    copy_from,
                    taps,
                    ntaps,
                    base_r,
                    base_c,
                    fr,
                    fc,
                    drs: dc * cos - dr * sin,
                    dcs: -dc * sin - dr * cos,
                });
            }
        }
        RotationPlan { k, cells }
    }

    /// Resample one `k x k` plane.
    fn apply<T: Scalar>(&self, src: &[T], dst: &mut [T]) {
        for (cell, out) in self.cells.iter().zip(dst.iter_mut()) {
            if cell.copy_from != usize::MAX {
                *out = src[cell.copy_from];
                continue;
            }
            let mut acc = 0.0f64;
            for &(idx, wt) in &cell.taps[..cell.ntaps as usize] {
                acc += src[idx as usize].to_f64() * wt;
            }
            *out = T::from_f64(acc);
        }
    }

    /// Scatter the upstream gradient back through the taps (adjoint of
    /// `apply`, which is linear in the source plane).
    fn scatter_grad<T: Scalar>(&self, upstream: &[T], grad_src: &mut [f64]) {
        for (cell, up) in self.cells.iter().zip(upstream.iter()) {
            let u = up.to_f64();
            if cell.copy_from != usize::MAX {
                grad_src[cell.copy_from] += u;
                continue;
            }
            for &(idx, wt) in &cell.taps[..cell.ntaps as usize] {
                grad_src[idx as usize] += u * wt;
            }
        }
    }

    /// `sum_t upstream[t] * d(output[t])/d(theta)` for one plane.
    ///
    /// Out-of-grid taps hold the constant 0, so only in-bounds neighbors
    /// contribute; at exact grid hits the derivative of the containing
    /// half-open cell `[i, i+1)` is used.
    fn theta_grad<T: Scalar>(&self, src: &[T], upstream: &[T]) -> f64 {
        let kf = self.k as i64;
        let read = |r: i64, c: i64| -> f64 {
            if r >= 0 && r < kf && c >= 0 && c < kf {
                src[(r * kf + c) as usize].to_f64()
            } else {
                0.0
            }
        };
        let mut total = 0.0f64;
        for (cell, up) in self.cells.iter().zip(upstream.iter()) {
            let (fr, fc) = (cell.fr, cell.fc);
            let w00 = read(cell.base_r, cell.base_c);
            let w01 = read(cell.base_r, cell.base_c + 1);
            let w10 = read(cell.base_r + 1, cell.base_c);
            let w11 = read(cell.base_r + 1, cell.base_c + 1);
            // d(value)/d(r_src) and d(value)/d(c_src) of the bilinear blend.
            let dv_dr = (w10 - w00) * (1.0 - fc) + (w11 - w01) * fc;
            let dv_dc = (w01 - w00) * (1.0 - fr) + (w11 - w10) * fr;
            total += up.to_f64() * (dv_dr * cell.drs + dv_dc * cell.dcs);
        }
        total
    }
}

/// The `n` expert kernels of an adaptive layer, shaped `[n, C_out, C_in, k, k]`.
#[derive(Clone, Debug)]
pub struct KernelStack {
    weights: Tensor,
}

impl KernelStack {
    pub fn new(weights: Tensor) -> Result<KernelStack> {
        if weights.rank() != 5 {
            return Err(Error::shape(
                "kernel_stack",
                format!("expected rank 5, got {:?}", weights.shape()),
            ));
        }
        if weights.shape()[3] != weights.shape()[4] {
            return Err(Error::shape(
                "kernel_stack",
                format!("kernel must be square, got {:?}", weights.shape()),
            ));
        }
        Ok(KernelStack { weights })
    }

    pub fn n(&self) -> usize {
        self.weights.shape()[0]
    }
    pub fn c_out(&self) -> usize {
        self.weights.shape()[1]
    }
    pub fn c_in(&self) -> usize {
        self.weights.shape()[2]
    }
    pub fn k(&self) -> usize {
        self.weights.shape()[3]
    }
    pub fn weights(&self) -> &Tensor {
        &self.weights
    }
}

/// Rotate a single `[k, k]` plane counter-clockwise by `angle` radians.
pub fn rotate_plane(w: &Tensor, angle: f64) -> Result<Tensor> {
    if w.rank() != 2 || w.shape()[0] != w.shape()[1] {
        return Err(Error::shape(
            "rotate_plane",
            format!("expected square rank-2 plane, got {:?}", w.shape()),
        ));
    }
    if !angle.is_finite() {
        return Err(Error::Input("rotate_plane: angle must be finite".into()));
    }
    let plan = RotationPlan::new(w.shape()[0], angle);
    let mut out = Tensor::zeros(w.shape(), w.dtype());
    match w.dtype() {
        DType::F32 => plan.apply(f32::of(w), f32::of_mut(&mut out)),
        DType::F64 => plan.apply(f64::of(w), f64::of_mut(&mut out)),
    }
    Ok(out)
}

fn check_stack_theta(stack: &Tensor, n_angles: usize) -> Result<(usize, usize, usize)> {
    if stack.rank() != 5 || stack.shape()[3] != stack.shape()[4] {
        return Err(Error::shape(
            "rotate_kernel_stack",
            format!("stack shape {:?}", stack.shape()),
        ));
    }
    let n = stack.shape()[0];
    if n_angles != n {
        return Err(Error::shape(
            "rotate_kernel_stack",
            format!("{n_angles} angles for {n} experts"),
        ));
    }
    Ok((n, stack.shape()[1] * stack.shape()[2], stack.shape()[3]))
}

fn rotate_stack_impl<T: Scalar>(stack: &Tensor, angles: &[f64]) -> Tensor {
    let (_, planes, k) = (
        stack.shape()[0],
        stack.shape()[1] * stack.shape()[2],
        stack.shape()[3],
    );
    let src = T::of(stack);
    let mut out = vec![T::from_f64(0.0); src.len()];
    let kk = k * k;
    for (i, &angle) in angles.iter().enumerate() {
        let plan = RotationPlan::new(k, angle);
        let expert = &src[i * planes * kk..(i + 1) * planes * kk];
        let dst = &mut out[i * planes * kk..(i + 1) * planes * kk];
        for p in 0..planes {
            plan.apply(&expert[p * kk..(p + 1) * kk], &mut dst[p * kk..(p + 1) * kk]);
        }
    }
    T::tensor(stack.shape(), out)
}

/// Rotate every `[k, k]` plane of expert `i` by `theta[i]` (Eq. form:
/// one angle per expert, shared across all output and input channels).
pub fn rotate_kernel_stack(stack: &KernelStack, theta: &Tensor) -> Result<Tensor> {
    rotate_stack_tensor(stack.weights(), &theta.to_f64_vec())
}

/// Tensor-level variant of [`rotate_kernel_stack`].
pub fn rotate_stack_tensor(stack: &Tensor, angles: &[f64]) -> Result<Tensor> {
    check_stack_theta(stack, angles.len())?;
    if angles.iter().any(|a| !a.is_finite()) {
        return Err(Error::Input("rotate: angles must be finite".into()));
    }
    Ok(match stack.dtype() {
        DType::F32 => rotate_stack_impl::<f32>(stack, angles),
        DType::F64 => rotate_stack_impl::<f64>(stack, angles),
    })
}

fn rotate_stack_vjp_impl<T: Scalar>(
    stack: &Tensor,
    angles: &[f64],
    upstream: &Tensor,
) -> (Tensor, Vec<f64>) {
    let (n, planes, k) = (
        stack.shape()[0],
        stack.shape()[1] * stack.shape()[2],
        stack.shape()[3],
    );
    let src = T::of(stack);
    let up = T::of(upstream);
    let kk = k * k;
    let mut grad_w = vec![0.0f64; src.len()];
    let mut grad_theta = vec![0.0f64; n];
    for (i, &angle) in angles.iter().enumerate() {
        let plan = RotationPlan::new(k, angle);
        let expert_src = &src[i * planes * kk..(i + 1) * planes * kk];
        let expert_up = &up[i * planes * kk..(i + 1) * planes * kk];
        let expert_grad = &mut grad_w[i * planes * kk..(i + 1) * planes * kk];
        let mut theta_sum = 0.0f64;
        for p in 0..planes {
            let s = &expert_src[p * kk..(p + 1) * kk];
            let u = &expert_up[p * kk..(p + 1) * kk];
            plan.scatter_grad(u, &mut expert_grad[p * kk..(p + 1) * kk]);
            theta_sum += plan.theta_grad(s, u);
        }
        grad_theta[i] = theta_sum;
    }
    let gw: Vec<T> = grad_w.into_iter().map(T::from_f64).collect();
    (T::tensor(stack.shape(), gw), grad_theta)
}

/// Gradients of [`rotate_kernel_stack`] with respect to the stack weights
/// and the angles. `upstream` has the stack's shape; returns
/// `(grad_weights, grad_theta)` with `grad_theta` shaped `[n]`.
pub fn rotate_vjp(
    stack: &KernelStack,
    theta: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (gw, gt) = rotate_stack_vjp_tensor(stack.weights(), &theta.to_f64_vec(), upstream)?;
    let gt_t = match theta.dtype() {
        DType::F32 => Tensor::from_f32(&[gt.len()], gt.iter().map(|&v| v as f32).collect()),
        DType::F64 => Tensor::from_f64(&[gt.len()], gt),
    };
    Ok((gw, gt_t))
}

/// Tensor-level variant of [`rotate_vjp`]; angle gradients come back as f64.
pub fn rotate_stack_vjp_tensor(
    stack: &Tensor,
    angles: &[f64],
    upstream: &Tensor,
) -> Result<(Tensor, Vec<f64>)> {
    check_stack_theta(stack, angles.len())?;
    if upstream.shape() != stack.shape() {
        return Err(Error::shape(
            "rotate_vjp",
            format!("upstream {:?} vs stack {:?}", upstream.shape(), stack.shape()),
        ));
    }
    Ok(match stack.dtype() {
        DType::F32 => rotate_stack_vjp_impl::<f32>(stack, angles, upstream),
        DType::F64 => rotate_stack_vjp_impl::<f64>(stack, angles, upstream),
    })
}

fn rotate_batched_impl<T: Scalar>(stack: &Tensor, theta: &[f64], batch: usize) -> Tensor {
    let (n, planes, k) = (
        stack.shape()[0],
        stack.shape()[1] * stack.shape()[2],
        stack.shape()[3],
    );
    let src = T::of(stack);
    let kk = k * k;
    let expert_len = planes * kk;
    let mut out = vec![T::from_f64(0.0); batch * n * expert_len];
    for b in 0..batch {
        for i in 0..n {
            let plan = RotationPlan::new(k, theta[b * n + i]);
            let e_src = &src[i * expert_len..(i + 1) * expert_len];
            let dst = &mut out[(b * n + i) * expert_len..(b * n + i + 1) * expert_len];
            for p in 0..planes {
                plan.apply(&e_src[p * kk..(p + 1) * kk], &mut dst[p * kk..(p + 1) * kk]);
            }
        }
    }
    let mut shape = vec![batch];
    shape.extend_from_slice(stack.shape());
    T::tensor(&shape, out)
}

/// Rotate the expert stack once per sample: `theta` is `[N, n]` and the
/// result is `[N, n, C_out, C_in, k, k]` (sample b, expert i rotated by
/// `theta[b, i]`).
pub fn rotate_batched(stack: &Tensor, theta: &Tensor) -> Result<Tensor> {
    if theta.rank() != 2 {
        return Err(Error::shape(
            "rotate_batched",
            format!("theta shape {:?}", theta.shape()),
        ));
    }
    let batch = theta.shape()[0];
    check_stack_theta(stack, theta.shape()[1])?;
    let angles = theta.to_f64_vec();
    if angles.iter().any(|a| !a.is_finite()) {
        return Err(Error::Input("rotate: angles must be finite".into()));
    }
    Ok(match stack.dtype() {
        DType::F32 => rotate_batched_impl::<f32>(stack, &angles, batch),
        DType::F64 => rotate_batched_impl::<f64>(stack, &angles, batch),
    })
}

fn rotate_batched_vjp_impl<T: Scalar>(
    stack: &Tensor,
    theta: &[f64],
    batch: usize,
    upstream: &Tensor,
) -> (Tensor, Vec<f64>) {
    let (n, planes, k) = (
        stack.shape()[0],
        stack.shape()[1] * stack.shape()[2],
        stack.shape()[3],
    );
    let src = T::of(stack);
    let up = T::of(upstream);
    let kk = k * k;
    let expert_len = planes * kk;
    let mut grad_stack = vec![0.0f64; stack.numel()];
    let mut grad_theta = vec![0.0f64; batch * n];
    for b in 0..batch {
        for i in 0..n {
            let plan = RotationPlan::new(k, theta[b * n + i]);
            let e_src = &src[i * expert_len..(i + 1) * expert_len];
            let e_up = &up[(b * n + i) * expert_len..(b * n + i + 1) * expert_len];
            let e_grad = &mut grad_stack[i * expert_len..(i + 1) * expert_len];
            let mut theta_sum = 0.0f64;
            for p in 0..planes {
                let u = &e_up[p * kk..(p + 1) * kk];
                plan.scatter_grad(u, &mut e_grad[p * kk..(p + 1) * kk]);
                theta_sum += plan.theta_grad(&e_src[p * kk..(p + 1) * kk], u);
            }
            grad_theta[b * n + i] = theta_sum;
        }
    }
    let gs: Vec<T> = grad_stack.into_iter().map(T::from_f64).collect();
    (T::tensor(stack.shape(), gs), grad_theta)
}

/// Gradients of [`rotate_batched`]: the stack gradient sums over samples,
/// the angle gradient is per (sample, expert).
pub fn rotate_batched_vjp(
    stack: &Tensor,
    theta: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let batch = theta.shape()[0];
    check_stack_theta(stack, theta.shape()[1])?;
    if upstream.numel() != batch * stack.numel() {
        return Err(Error::shape(
            "rotate_batched_vjp",
            format!("upstream {:?}", upstream.shape()),
        ));
    }
    let angles = theta.to_f64_vec();
    let (gs, gt) = match stack.dtype() {
        DType::F32 => rotate_batched_vjp_impl::<f32>(stack, &angles, batch, upstream),
        DType::F64 => rotate_batched_vjp_impl::<f64>(stack, &angles, batch, upstream),
    };
    let gt_t = match theta.dtype() {
        DType::F32 => Tensor::from_f32(theta.shape(), gt.iter().map(|&v| v as f32).collect()),
        DType::F64 => Tensor::from_f64(theta.shape(), gt),
    };
    Ok((gs, gt_t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn plane_3x3() -> Tensor {
        Tensor::from_f64(&[3, 3], (1..=9).map(|i| i as f64).collect())
    }

    #[test]
    fn zero_angle_is_bitwise_identity() {
        let mut rng = SplitMix64::new(2);
        for k in [1usize, 2, 3, 4, 5] {
            let w = Tensor::generate(&[k, k], DType::F64, || rng.gaussian());
            let r = rotate_plane(&w, 0.0).unwrap();
            assert_eq!(w, r, "k={k}");
        }
        // Including sign of zero.
        let w = Tensor::from_f64(&[2, 2], vec![-0.0, 0.0, 1.0, -1.0]);
        let r = rotate_plane(&w, 0.0).unwrap();
        assert_eq!(w.to_le_bytes(), r.to_le_bytes());
    }

    #[test]
    fn quarter_turn_ccw_is_column_permutation() {
        // Counter-clockwise 90 degrees sends column j of the source to row
        // (k-1-j); for 1..9 that is [[3,6,9],[2,5,8],[1,4,7]].
        let r = rotate_plane(&plane_3x3(), FRAC_PI_2).unwrap();
        assert_eq!(
            r.to_f64_vec(),
            vec![3.0, 6.0, 9.0, 2.0, 5.0, 8.0, 1.0, 4.0, 7.0]
        );
    }

    #[test]
    fn quarter_turn_cw_and_half_turn_are_exact() {
        let w = plane_3x3();
        let cw = rotate_plane(&w, -FRAC_PI_2).unwrap();
        assert_eq!(
            cw.to_f64_vec(),
            vec![7.0, 4.0, 1.0, 8.0, 5.0, 2.0, 9.0, 6.0, 3.0]
        );
        let half = rotate_plane(&w, PI).unwrap();
        assert_eq!(
            half.to_f64_vec(),
            vec![9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0]
        );
    }

    #[test]
    fn one_by_one_kernel_is_fixed_point() {
        let w = Tensor::from_f64(&[1, 1], vec![0.73]);
        for angle in [0.0, 0.3, -1.2, FRAC_PI_2, 2.9, 123.456] {
            let r = rotate_plane(&w, angle).unwrap();
            assert_eq!(r.to_f64_vec(), vec![0.73], "angle {angle}");
        }
    }

    #[test]
    fn corner_mass_leaks_out_of_support_at_45_degrees() {
        // A kernel whose only nonzero sits in a corner loses total mass when
        // rotated by 45 degrees: part of the blend samples outside the grid.
        let mut w = Tensor::zeros(&[3, 3], DType::F64);
        w.set(0, 1.0);
        let r = rotate_plane(&w, PI / 4.0).unwrap();
        let mass: f64 = r.to_f64_vec().iter().sum();
        assert!(mass < 1.0 - 1e-6, "mass {mass}");
        assert!(mass >= 0.0);
    }

    #[test]
    fn rotation_is_linear_in_weights() {
        let mut rng = SplitMix64::new(7);
        let a = Tensor::generate(&[5, 5], DType::F64, || rng.gaussian());
        let b = Tensor::generate(&[5, 5], DType::F64, || rng.gaussian());
        let angle = 0.37;
        let (alpha, beta) = (1.7, -0.4);
        let mut combo = Tensor::zeros(&[5, 5], DType::F64);
        for i in 0..25 {
            combo.set(i, alpha * a.at(i) + beta * b.at(i));
        }
        let lhs = rotate_plane(&combo, angle).unwrap();
        let ra = rotate_plane(&a, angle).unwrap();
        let rb = rotate_plane(&b, angle).unwrap();
        for i in 0..25 {
            let rhs = alpha * ra.at(i) + beta * rb.at(i);
            assert!((lhs.at(i) - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn stack_rotation_applies_per_expert_angles() {
        let mut rng = SplitMix64::new(3);
        let stack = Tensor::generate(&[2, 2, 3, 3, 3], DType::F64, || rng.gaussian());
        let rotated = rotate_stack_tensor(&stack, &[0.0, FRAC_PI_2]).unwrap();
        // Expert 0 untouched.
        for i in 0..2 * 3 * 9 {
            assert_eq!(rotated.at(i), stack.at(i));
        }
        // Expert 1: every plane permuted like the scalar case.
        let base = 2 * 3 * 9;
        let perm = [2, 5, 8, 1, 4, 7, 0, 3, 6]; // src flat index per dst cell
        for p in 0..6 {
            for (dst, &s) in perm.iter().enumerate() {
                assert_eq!(
                    rotated.at(base + p * 9 + dst),
                    stack.at(base + p * 9 + s),
                    "plane {p} cell {dst}"
                );
            }
        }
    }

    #[test]
    fn theta_length_mismatch_rejected() {
        let stack = Tensor::zeros(&[2, 1, 1, 3, 3], DType::F64);
        assert!(rotate_stack_tensor(&stack, &[0.0]).is_err());
    }

    #[test]
    fn adjoint_identity_holds() {
        // <rotate(W), U> == <W, rotate_vjp_W(U)> for random U: the transpose test.
        let mut rng = SplitMix64::new(13);
        let stack = Tensor::generate(&[2, 2, 2, 5, 5], DType::F64, || rng.gaussian());
        let up = Tensor::generate(&[2, 2, 2, 5, 5], DType::F64, || rng.gaussian());
        let angles = [0.83, -1.91];
        let rot = rotate_stack_tensor(&stack, &angles).unwrap();
        let (gw, _) = rotate_stack_vjp_tensor(&stack, &angles, &up).unwrap();
        let lhs: f64 = (0..rot.numel()).map(|i| rot.at(i) * up.at(i)).sum();
        let rhs: f64 = (0..stack.numel()).map(|i| stack.at(i) * gw.at(i)).sum();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let stack = Tensor::full(&[1, 1, 1, 3, 3], 1.5, DType::F64);
        let up = Tensor::zeros(&[1, 1, 1, 3, 3], DType::F64);
        let (gw, gt) = rotate_stack_vjp_tensor(&stack, &[0.4], &up).unwrap();
        assert_eq!(gw.max_abs(), 0.0);
        assert_eq!(gt, vec![0.0]);
    }

    #[test]
    fn k1_theta_grad_is_zero() {
        let mut rng = SplitMix64::new(5);
        let stack = Tensor::generate(&[3, 2, 2, 1, 1], DType::F64, || rng.gaussian());
        let up = Tensor::generate(&[3, 2, 2, 1, 1], DType::F64, || rng.gaussian());
        let (_, gt) = rotate_stack_vjp_tensor(&stack, &[0.2, 1.1, -0.7], &up).unwrap();
        assert_eq!(gt, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn finite_difference_checks_both_grads() {
        let mut rng = SplitMix64::new(21);
        let stack = Tensor::generate(&[2, 1, 2, 3, 3], DType::F64, || rng.gaussian());
        let up = Tensor::generate(&[2, 1, 2, 3, 3], DType::F64, || rng.gaussian());
        let angles = [0.3, -0.9];
        let (gw, gt) = rotate_stack_vjp_tensor(&stack, &angles, &up).unwrap();
        let eps = 1e-6;
        let loss = |s: &Tensor, a: &[f64]| -> f64 {
            let r = rotate_stack_tensor(s, a).unwrap();
            (0..r.numel()).map(|i| r.at(i) * up.at(i)).sum()
        };
        // Weights.
        for i in 0..stack.numel() {
            let mut plus = stack.clone();
            plus.set(i, stack.at(i) + eps);
            let mut minus = stack.clone();
            minus.set(i, stack.at(i) - eps);
            let fd = (loss(&plus, &angles) - loss(&minus, &angles)) / (2.0 * eps);
            assert!(
                (fd - gw.at(i)).abs() < 1e-7,
                "weight {i}: fd {fd} vs {}",
                gw.at(i)
            );
        }
        // Angles.
        for i in 0..2 {
            let mut plus = angles;
            plus[i] += eps;
            let mut minus = angles;
            minus[i] -= eps;
            let fd = (loss(&stack, &plus) - loss(&stack, &minus)) / (2.0 * eps);
            let rel = (fd - gt[i]).abs() / fd.abs().max(1e-6);
            assert!(rel < 1e-6, "theta {i}: fd {fd} vs {}", gt[i]);
        }
    }
}
