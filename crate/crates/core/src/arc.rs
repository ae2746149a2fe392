//! The adaptive rotated convolution layer.
//!
//! Forward path: the router predicts per-sample angles and combination
//! weights, every expert kernel is rotated per sample, the rotated experts
//! are blended into one kernel per sample, and a single convolution runs.
//! Batches fold the per-sample kernels into one grouped convolution with
//! `groups = N` over a channel-stacked view, so the expensive convolution
//! executes once regardless of the expert count.
//!
//! The naive path (convolve with each rotated expert separately, then add
//! the weighted outputs) computes the same function with n convolutions;
//! it is kept as the equivalence oracle and the slow benchmark arm.

use crate::error::{Error, Result};
use crate::rng::{fnv1a64, SplitMix64};
use crate::rotation::{rotate_batched, rotate_batched_vjp};
use crate::routing::{routing_pipeline, Router, RouterVars, RoutingParams, RoutingToggles};
use crate::tape::{ParamGroup, ParamId, ParamSet, Tape, Var};
use crate::tensor::{DType, Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct ArcLayerConfig {
    pub n: usize,
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub padding: usize,
    pub angle_coefficient: f64,
    pub toggles: RoutingToggles,
}

impl ArcLayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 || self.c_in == 0 || self.c_out == 0 {
            return Err(Error::config(format!("arc layer: bad shape {self:?}")));
        }
        if self.stride == 0 {
            return Err(Error::config("arc layer: stride must be >= 1"));
        }
        if !(self.angle_coefficient.is_finite() && self.angle_coefficient >= 0.0) {
            return Err(Error::config("arc layer: angle coefficient must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn kernel_shape(&self) -> [usize; 5] {
        [self.n, self.c_out, self.c_in, self.k, self.k]
    }
}

/// Value-level layer state (kernels plus router weights).
#[derive(Clone, Debug)]
pub struct ArcLayerParams {
    pub kernels: Tensor,
    pub router: RoutingParams,
    pub config: ArcLayerConfig,
}

impl ArcLayerParams {
    /// He-normal expert kernels plus the standard router initialization;
    /// deterministic in `seed`.
    pub fn init(config: ArcLayerConfig, seed: u64) -> Result<ArcLayerParams> {
        config.validate()?;
        let fan_in = (config.c_in * config.k * config.k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let mut rng = SplitMix64::substream(seed, fnv1a64(b"arc.kernels"));
        let kernels = Tensor::generate(&config.kernel_shape(), DType::F64, || {
            rng.gaussian() * std
        });
        let router = crate::routing::routing_init(
            config.c_in,
            config.n,
            config.angle_coefficient,
            seed,
        );
        Ok(ArcLayerParams {
            kernels,
            router,
            config,
        })
    }

    pub fn cast(&self, dtype: DType) -> ArcLayerParams {
        ArcLayerParams {
            kernels: self.kernels.cast(dtype),
            router: self.router.cast(dtype),
            config: self.config,
        }
    }
}

fn combine_impl<T: Scalar>(rotated: &Tensor, lambda: &Tensor) -> Tensor {
    let shape = rotated.shape();
    let (batch, n) = (shape[0], shape[1]);
    let per = rotated.numel() / (batch * n);
    let rot = T::of(rotated);
    let lam = T::of(lambda);
    let mut out = vec![0.0f64; batch * per];
    for b in 0..batch {
        let dst = &mut out[b * per..(b + 1) * per];
        for i in 0..n {
            let w = lam[b * n + i].to_f64();
            let src = &rot[(b * n + i) * per..(b * n + i + 1) * per];
            for (d, &s) in dst.iter_mut().zip(src.iter()) {
                *d += w * s.to_f64();
            }
        }
    }
    let mut out_shape = vec![batch];
    out_shape.extend_from_slice(&shape[2..]);
    T::tensor(&out_shape, out.into_iter().map(T::from_f64).collect())
}

fn combine_vjp_impl<T: Scalar>(
    rotated: &Tensor,
    lambda: &Tensor,
    up: &Tensor,
) -> (Tensor, Tensor) {
    let shape = rotated.shape();
    let (batch, n) = (shape[0], shape[1]);
    let per = rotated.numel() / (batch * n);
    let rot = T::of(rotated);
    let lam = T::of(lambda);
    let ups = T::of(up);
    let mut d_rot = vec![T::from_f64(0.0); rotated.numel()];
    let mut d_lam = vec![T::from_f64(0.0); lambda.numel()];
    for b in 0..batch {
        let u = &ups[b * per..(b + 1) * per];
        for i in 0..n {
            let w = lam[b * n + i].to_f64();
            let src = &rot[(b * n + i) * per..(b * n + i + 1) * per];
            let dst = &mut d_rot[(b * n + i) * per..(b * n + i + 1) * per];
            let mut dot = 0.0f64;
            for ((d, &s), &uv) in dst.iter_mut().zip(src.iter()).zip(u.iter()) {
                let uf = uv.to_f64();
                *d = T::from_f64(w * uf);
                dot += s.to_f64() * uf;
            }
            d_lam[b * n + i] = T::from_f64(dot);
        }
    }
    (
        T::tensor(rotated.shape(), d_rot),
        T::tensor(lambda.shape(), d_lam),
    )
}

/// Blend rotated experts with per-sample weights:
/// `out[b] = sum_i lambda[b, i] * rotated[b, i]`.
pub fn combine_kernels(rotated: &Tensor, lambda: &Tensor) -> Result<Tensor> {
    if rotated.rank() < 3 {
        return Err(Error::shape(
            "combine_kernels",
            format!("{:?}", rotated.shape()),
        ));
    }
    let (batch, n) = (rotated.shape()[0], rotated.shape()[1]);
    if lambda.shape() != [batch, n] {
        return Err(Error::shape(
            "combine_kernels",
            format!("lambda {:?} vs [{batch}, {n}]", lambda.shape()),
        ));
    }
    if rotated.dtype() != lambda.dtype() {
        return Err(Error::DTypeMismatch {
            op: "combine_kernels",
            lhs: rotated.dtype(),
            rhs: lambda.dtype(),
        });
    }
    Ok(match rotated.dtype() {
        DType::F32 => combine_impl::<f32>(rotated, lambda),
        DType::F64 => combine_impl::<f64>(rotated, lambda),
    })
}

/// Tape op: rotate the expert stack per sample.
pub fn tape_rotate_experts(tape: &mut Tape, stack: Var, theta: Var) -> Result<Var> {
    let value = rotate_batched(tape.value(stack), tape.value(theta))?;
    Ok(tape.custom_op(
        &[stack, theta],
        value,
        Box::new(|up, parents, _| {
            let (gs, gt) =
                rotate_batched_vjp(parents[0], parents[1], up).expect("rotate_batched vjp");
            vec![gs, gt]
        }),
    ))
}

/// Tape op: blend rotated experts with per-sample weights.
pub fn tape_combine(tape: &mut Tape, rotated: Var, lambda: Var) -> Result<Var> {
    let value = combine_kernels(tape.value(rotated), tape.value(lambda))?;
    Ok(tape.custom_op(
        &[rotated, lambda],
        value,
        Box::new(|up, parents, _| {
            let (dr, dl) = match parents[0].dtype() {
                DType::F32 => combine_vjp_impl::<f32>(parents[0], parents[1], up),
                DType::F64 => combine_vjp_impl::<f64>(parents[0], parents[1], up),
            };
            vec![dr, dl]
        }),
    ))
}

/// Tape op: select expert `i` from a `[N, n, ...]` tensor.
pub fn tape_expert_slice(tape: &mut Tape, rotated: Var, expert: usize) -> Result<Var> {
    let v = tape.value(rotated);
    let (batch, n) = (v.shape()[0], v.shape()[1]);
    if expert >= n {
        return Err(Error::shape(
            "expert_slice",
            format!("expert {expert} of {n}"),
        ));
    }
    let per = v.numel() / (batch * n);
    let mut shape = vec![batch];
    shape.extend_from_slice(&v.shape()[2..]);
    let mut out = Tensor::zeros(&shape, v.dtype());
    for b in 0..batch {
        for e in 0..per {
            out.set(b * per + e, v.at((b * n + expert) * per + e));
        }
    }
    Ok(tape.custom_op(
        &[rotated],
        out,
        Box::new(move |up, parents, _| {
            let mut g = Tensor::zeros(parents[0].shape(), parents[0].dtype());
            for b in 0..batch {
                for e in 0..per {
                    g.set((b * n + expert) * per + e, up.at(b * per + e));
                }
            }
            vec![g]
        }),
    ))
}

/// One grouped convolution over the channel-folded batch view: input
/// `[N, C_in, H, W]` with per-sample kernels `[N, C_out, C_in, k, k]`.
fn tape_per_sample_conv(
    tape: &mut Tape,
    x: Var,
    kernels: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let xs = tape.value(x).shape().to_vec();
    let ks = tape.value(kernels).shape().to_vec();
    let (batch, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (c_out, k) = (ks[1], ks[3]);
    let xf = tape.reshape(x, &[1, batch * c_in, h, w])?;
    let wf = tape.reshape(kernels, &[batch * c_out, c_in, k, k])?;
    let yf = tape.grouped_conv2d(xf, wf, batch, stride, padding)?;
    // yf is [1, N*C_out, H', W']; split the channel axis back into (N, C_out).
    let ys = tape.value(yf).shape().to_vec();
    tape.reshape(yf, &[batch, c_out, ys[2], ys[3]])
}

/// Apply the rotate-combine-convolve pipeline with explicit angles and
/// weights (the post-routing part of the layer).
pub fn arc_apply(
    tape: &mut Tape,
    x: Var,
    kernels: Var,
    theta: Var,
    lambda: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let rotated = tape_rotate_experts(tape, kernels, theta)?;
    let combined = tape_combine(tape, rotated, lambda)?;
    tape_per_sample_conv(tape, x, combined, stride, padding)
}

/// Naive formulation with explicit angles and weights: n separate
/// convolutions, outputs weighted and summed elementwise.
pub fn arc_apply_naive(
    tape: &mut Tape,
    x: Var,
    kernels: Var,
    theta: Var,
    lambda: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let n = tape.value(kernels).shape()[0];
    let rotated = tape_rotate_experts(tape, kernels, theta)?;
    let mut acc: Option<Var> = None;
    for i in 0..n {
        let w_i = tape_expert_slice(tape, rotated, i)?;
        let y_i = tape_per_sample_conv(tape, x, w_i, stride, padding)?;
        let lam_i = tape.column(lambda, i)?;
        let scaled = tape.mul_per_sample(y_i, lam_i)?;
        acc = Some(match acc {
            None => scaled,
            Some(a) => tape.add(a, scaled)?,
        });
    }
    Ok(acc.expect("n >= 1"))
}

/// Trainable layer: expert kernels and router registered in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct ArcLayer {
    pub kernels: ParamId,
    pub router: Router,
    pub config: ArcLayerConfig,
}

impl ArcLayer {
    pub fn register(
        params: &mut ParamSet,
        prefix: &str,
        values: &ArcLayerParams,
    ) -> Result<ArcLayer> {
        values.config.validate()?;
        if values.kernels.shape() != values.config.kernel_shape() {
            return Err(Error::shape(
                "arc_layer",
                format!(
                    "kernel stack {:?} vs config {:?}",
                    values.kernels.shape(),
                    values.config.kernel_shape()
                ),
            ));
        }
        if values.router.n() != values.config.n || values.router.c_in() != values.config.c_in {
            return Err(Error::shape(
                "arc_layer",
                "router dimensions disagree with layer config".to_string(),
            ));
        }
        let kernels = params.add(
            format!("{prefix}.weight"),
            ParamGroup::Backbone,
            values.kernels.clone(),
        );
        let router = Router::register(params, &format!("{prefix}.router"), &values.router);
        Ok(ArcLayer {
            kernels,
            router,
            config: values.config,
        })
    }

    /// Record the full layer (routing included) on the tape.
    pub fn forward(&self, params: &ParamSet, tape: &mut Tape, x: Var) -> Result<Var> {
        let (theta, lambda) = self
            .router
            .forward(params, tape, x, self.config.toggles)?;
        let kernels = tape.param(params, self.kernels);
        arc_apply(
            tape,
            x,
            kernels,
            theta,
            lambda,
            self.config.stride,
            self.config.padding,
        )
    }
}

fn infer(layer: &ArcLayerParams, x: &Tensor, naive: bool) -> Result<Tensor> {
    let dtype = x.dtype();
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let vars = RouterVars {
        dw_kernel: tape.leaf(layer.router.dw_kernel.cast(dtype)),
        ln_gamma: tape.leaf(layer.router.ln_gamma.cast(dtype)),
        ln_beta: tape.leaf(layer.router.ln_beta.cast(dtype)),
        theta_weight: tape.leaf(layer.router.theta_weight.cast(dtype)),
        lambda_weight: tape.leaf(layer.router.lambda_weight.cast(dtype)),
        lambda_bias: tape.leaf(layer.router.lambda_bias.cast(dtype)),
    };
    let (theta, lambda) = routing_pipeline(
        &mut tape,
        xv,
        vars,
        layer.config.c_in,
        layer.config.n,
        layer.config.angle_coefficient,
        layer.config.toggles,
    )?;
    let kernels = tape.leaf(layer.kernels.cast(dtype));
    let out = if naive {
        arc_apply_naive(
            &mut tape,
            xv,
            kernels,
            theta,
            lambda,
            layer.config.stride,
            layer.config.padding,
        )?
    } else {
        arc_apply(
            &mut tape,
            xv,
            kernels,
            theta,
            lambda,
            layer.config.stride,
            layer.config.padding,
        )?
    };
    Ok(tape.value(out).clone())
}

/// Inference with the combined (single convolution) formulation.
pub fn arc_forward(layer: &ArcLayerParams, x: &Tensor) -> Result<Tensor> {
    infer(layer, x, false)
}

/// Inference with the naive (n convolutions) formulation.
pub fn arc_forward_naive(layer: &ArcLayerParams, x: &Tensor) -> Result<Tensor> {
    infer(layer, x, true)
}
