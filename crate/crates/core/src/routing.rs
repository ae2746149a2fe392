//! The routing function: predict per-sample rotation angles and
//! combination weights from an input feature map.
//!
//! Pipeline (Fig. 3c shape): depthwise 3x3 -> channel layer norm -> ReLU
//! -> global average pool -> two heads. The angle head is a bias-free
//! linear layer followed by softsign, scaled by `angle_coefficient`; the
//! weight head is a linear layer with bias followed by sigmoid. Both the
//! spatial encoder and the adaptive weight head can be toggled off, in
//! which case the pool feeds the heads directly and the combination
//! weights collapse to the constant `1/n`.

use crate::error::{Error, Result};
use crate::rng::{fnv1a64, SplitMix64};
use crate::tape::{ParamGroup, ParamId, ParamSet, Tape, Var};
use crate::tensor::{DType, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Ablation switches for the router structure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoutingToggles {
    pub spatial_encoding: bool,
    pub adaptive_combination: bool,
}

impl Default for RoutingToggles {
    fn default() -> Self {
        RoutingToggles {
            spatial_encoding: true,
            adaptive_combination: true,
        }
    }
}

/// Router weights as plain tensors.
#[derive(Clone, Debug)]
pub struct RoutingParams {
    /// Depthwise encoder kernel `[C_in, 1, 3, 3]`, no bias.
    pub dw_kernel: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    /// Angle head `[n, C_in]`; deliberately bias-free so a zero feature
    /// map predicts exactly zero angles.
    pub theta_weight: Tensor,
    pub lambda_weight: Tensor,
    pub lambda_bias: Tensor,
    /// Scale applied to the softsign output; predicted angles lie strictly
    /// inside `(-angle_coefficient, angle_coefficient)`.
    pub angle_coefficient: f64,
}

/// Predicted angles (radians) and combination weights, both `[N, n]`.
#[derive(Clone, Debug)]
pub struct RoutingOutput {
    pub theta: Tensor,
    pub lambda: Tensor,
}

fn field_rng(seed: u64, field: &str) -> SplitMix64 {
    SplitMix64::substream(seed, fnv1a64(field.as_bytes()))
}

/// Initialize router weights: zero-mean truncated normal (0.2 std, cut at
/// 2 sigma) for all weight matrices, zeros for biases, identity affine for
/// the layer norm. Deterministic in `seed`.
pub fn routing_init(c_in: usize, n: usize, angle_coefficient: f64, seed: u64) -> RoutingParams {
    let std = 0.2;
    let mut dw_rng = field_rng(seed, "router.dw_kernel");
    let mut theta_rng = field_rng(seed, "router.theta_weight");
    let mut lambda_rng = field_rng(seed, "router.lambda_weight");
    RoutingParams {
        dw_kernel: Tensor::generate(&[c_in, 1, 3, 3], DType::F64, || {
            dw_rng.truncated_normal(std)
        }),
        ln_gamma: Tensor::full(&[c_in], 1.0, DType::F64),
        ln_beta: Tensor::zeros(&[c_in], DType::F64),
        theta_weight: Tensor::generate(&[n, c_in], DType::F64, || {
            theta_rng.truncated_normal(std)
        }),
        lambda_weight: Tensor::generate(&[n, c_in], DType::F64, || {
            lambda_rng.truncated_normal(std)
        }),
        lambda_bias: Tensor::zeros(&[n], DType::F64),
        angle_coefficient,
    }
}

impl RoutingParams {
    pub fn c_in(&self) -> usize {
        self.dw_kernel.shape()[0]
    }

    pub fn n(&self) -> usize {
        self.theta_weight.shape()[0]
    }

    pub fn cast(&self, dtype: DType) -> RoutingParams {
        RoutingParams {
            dw_kernel: self.dw_kernel.cast(dtype),
            ln_gamma: self.ln_gamma.cast(dtype),
            ln_beta: self.ln_beta.cast(dtype),
            theta_weight: self.theta_weight.cast(dtype),
            lambda_weight: self.lambda_weight.cast(dtype),
            lambda_bias: self.lambda_bias.cast(dtype),
            angle_coefficient: self.angle_coefficient,
        }
    }
}

/// Router parameters registered in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Router {
    pub dw_kernel: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub theta_weight: ParamId,
    pub lambda_weight: ParamId,
    pub lambda_bias: ParamId,
    pub c_in: usize,
    pub n: usize,
    pub angle_coefficient: f64,
}

impl Router {
    pub fn register(params: &mut ParamSet, prefix: &str, init: &RoutingParams) -> Router {
        let group = ParamGroup::Backbone;
        Router {
            dw_kernel: params.add(format!("{prefix}.dw_kernel"), group, init.dw_kernel.clone()),
            ln_gamma: params.add(format!("{prefix}.ln_gamma"), group, init.ln_gamma.clone()),
            ln_beta: params.add(format!("{prefix}.ln_beta"), group, init.ln_beta.clone()),
            theta_weight: params.add(
                format!("{prefix}.theta_weight"),
                group,
                init.theta_weight.clone(),
            ),
            lambda_weight: params.add(
                format!("{prefix}.lambda_weight"),
                group,
                init.lambda_weight.clone(),
            ),
            lambda_bias: params.add(
                format!("{prefix}.lambda_bias"),
                group,
                init.lambda_bias.clone(),
            ),
            c_in: init.c_in(),
            n: init.n(),
            angle_coefficient: init.angle_coefficient,
        }
    }

    /// Record the routing pipeline on the tape; returns `(theta, lambda)`.
    pub fn forward(
        &self,
        params: &ParamSet,
        tape: &mut Tape,
        x: Var,
        toggles: RoutingToggles,
    ) -> Result<(Var, Var)> {
        let dw = tape.param(params, self.dw_kernel);
        let gamma = tape.param(params, self.ln_gamma);
        let beta = tape.param(params, self.ln_beta);
        let theta_w = tape.param(params, self.theta_weight);
        let lambda_w = tape.param(params, self.lambda_weight);
        let lambda_b = tape.param(params, self.lambda_bias);
        routing_pipeline(
            tape,
            x,
            RouterVars {
                dw_kernel: dw,
                ln_gamma: gamma,
                ln_beta: beta,
                theta_weight: theta_w,
                lambda_weight: lambda_w,
                lambda_bias: lambda_b,
            },
            self.c_in,
            self.n,
            self.angle_coefficient,
            toggles,
        )
    }
}

/// Tape handles for the router weights.
#[derive(Clone, Copy, Debug)]
pub struct RouterVars {
    pub dw_kernel: Var,
    pub ln_gamma: Var,
    pub ln_beta: Var,
    pub theta_weight: Var,
    pub lambda_weight: Var,
    pub lambda_bias: Var,
}

/// The routing computation itself, shared by the trainable and the pure
/// entry points.
pub fn routing_pipeline(
    tape: &mut Tape,
    x: Var,
    vars: RouterVars,
    c_in: usize,
    n: usize,
    angle_coefficient: f64,
    toggles: RoutingToggles,
) -> Result<(Var, Var)> {
    let x_shape = tape.value(x).shape().to_vec();
    if x_shape.len() != 4 || x_shape[1] != c_in {
        return Err(Error::shape(
            "routing_forward",
            format!("input {x_shape:?} vs C_in {c_in}"),
        ));
    }
    let batch = x_shape[0];
    let feat = if toggles.spatial_encoding {
        let h = tape.grouped_conv2d(x, vars.dw_kernel, c_in, 1, 1)?;
        let h = tape.channel_layer_norm(h, vars.ln_gamma, vars.ln_beta, LAYER_NORM_EPS)?;
        tape.relu(h)
    } else {
        x
    };
    let pooled = tape.global_avg_pool(feat)?;
    let theta_lin = tape.linear(pooled, vars.theta_weight, None)?;
    let theta_soft = tape.softsign(theta_lin);
    let theta = tape.scale(theta_soft, angle_coefficient);
    let lambda = if toggles.adaptive_combination {
        let lin = tape.linear(pooled, vars.lambda_weight, Some(vars.lambda_bias))?;
        tape.sigmoid(lin)
    } else {
        // Table-style baseline: plain averaging of the experts.
        tape.leaf(Tensor::full(
            &[batch, n],
            1.0 / n as f64,
            tape.value(x).dtype(),
        ))
    };
    Ok((theta, lambda))
}

/// Pure (inference) routing: runs the pipeline on a scratch tape.
pub fn routing_forward(
    params: &RoutingParams,
    x: &Tensor,
    toggles: RoutingToggles,
) -> Result<RoutingOutput> {
    let dtype = x.dtype();
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let vars = RouterVars {
        dw_kernel: tape.leaf(params.dw_kernel.cast(dtype)),
        ln_gamma: tape.leaf(params.ln_gamma.cast(dtype)),
        ln_beta: tape.leaf(params.ln_beta.cast(dtype)),
        theta_weight: tape.leaf(params.theta_weight.cast(dtype)),
        lambda_weight: tape.leaf(params.lambda_weight.cast(dtype)),
        lambda_bias: tape.leaf(params.lambda_bias.cast(dtype)),
    };
    let (theta, lambda) = routing_pipeline(
        &mut tape,
        xv,
        vars,
        params.c_in(),
        params.n(),
        params.angle_coefficient,
        toggles,
    )?;
    Ok(RoutingOutput {
        theta: tape.value(theta).clone(),
        lambda: tape.value(lambda).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toggles(spatial: bool, adaptive: bool) -> RoutingToggles {
        RoutingToggles {
            spatial_encoding: spatial,
            adaptive_combination: adaptive,
        }
    }

    #[test]
    fn init_statistics_match_truncated_normal() {
        let p = routing_init(128, 4, std::f64::consts::PI, 7);
        let w = p.theta_weight.to_f64_vec();
        assert_eq!(w.len(), 512);
        let std = (w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt();
        assert!((0.15..=0.22).contains(&std), "std {std}");
        assert!(w.iter().all(|v| v.abs() <= 0.4 + 1e-12));
        assert!(p.lambda_bias.max_abs() == 0.0);
        assert!(p.ln_beta.max_abs() == 0.0);
        assert!(p.ln_gamma.to_f64_vec().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn init_is_deterministic() {
        let a = routing_init(16, 2, 1.0, 42);
        let b = routing_init(16, 2, 1.0, 42);
        assert_eq!(a.dw_kernel, b.dw_kernel);
        assert_eq!(a.theta_weight, b.theta_weight);
        assert_eq!(a.lambda_weight, b.lambda_weight);
        let c = routing_init(16, 2, 1.0, 43);
        assert_ne!(a.theta_weight, c.theta_weight);
    }

    #[test]
    fn zero_input_gives_zero_theta_and_sigmoid_bias_lambda() {
        let p = routing_init(8, 3, std::f64::consts::PI, 1);
        for spatial in [true, false] {
            let x = Tensor::zeros(&[2, 8, 5, 5], DType::F64);
            let out = routing_forward(&p, &x, toggles(spatial, true)).unwrap();
            assert_eq!(out.theta.max_abs(), 0.0, "spatial={spatial}");
            for v in out.lambda.to_f64_vec() {
                assert_eq!(v, 0.5);
            }
        }
    }

    #[test]
    fn outputs_bounded_for_extreme_inputs() {
        let p = routing_init(4, 2, 2.0, 9);
        let mut rng = crate::rng::SplitMix64::new(3);
        let x = Tensor::generate(&[3, 4, 6, 6], DType::F64, || rng.gaussian() * 1e6);
        let out = routing_forward(&p, &x, RoutingToggles::default()).unwrap();
        for v in out.theta.to_f64_vec() {
            assert!(v.abs() < 2.0, "theta {v}");
        }
        for v in out.lambda.to_f64_vec() {
            assert!(v > 0.0 && v < 1.0, "lambda {v}");
        }
    }

    #[test]
    fn plain_pooling_path_matches_matmul_oracle() {
        // Both toggles off: theta = coeff * softsign(pool x theta_w^T),
        // lambda = 1/n, computable by hand.
        let p = routing_init(3, 2, 0.5, 11);
        let x = Tensor::from_f64(
            &[1, 3, 1, 2],
            vec![1.0, 3.0, -2.0, 0.0, 4.0, -4.0],
        );
        let out = routing_forward(&p, &x, toggles(false, false)).unwrap();
        let pooled = [2.0, -1.0, 0.0];
        for i in 0..2 {
            let z: f64 = (0..3).map(|c| pooled[c] * p.theta_weight.at(i * 3 + c)).sum();
            let want = 0.5 * z / (1.0 + z.abs());
            assert!((out.theta.at(i) - want).abs() < 1e-12);
            assert_eq!(out.lambda.at(i), 0.5);
        }
    }

    #[test]
    fn theta_is_odd_in_pooled_feature() {
        let p = routing_init(5, 3, 1.5, 13);
        let mut rng = crate::rng::SplitMix64::new(8);
        let x = Tensor::generate(&[2, 5, 3, 3], DType::F64, || rng.gaussian());
        let mut neg = x.clone();
        neg.scale_in_place(-1.0);
        let a = routing_forward(&p, &x, toggles(false, true)).unwrap();
        let b = routing_forward(&p, &neg, toggles(false, true)).unwrap();
        for i in 0..a.theta.numel() {
            assert!((a.theta.at(i) + b.theta.at(i)).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_permutation_equivariance() {
        let p = routing_init(4, 2, 1.0, 17);
        let mut rng = crate::rng::SplitMix64::new(4);
        let x = Tensor::generate(&[3, 4, 4, 4], DType::F64, || rng.gaussian());
        // Swap samples 0 and 2.
        let per = 4 * 16;
        let mut xp = x.clone();
        for i in 0..per {
            xp.set(i, x.at(2 * per + i));
            xp.set(2 * per + i, x.at(i));
        }
        let a = routing_forward(&p, &x, RoutingToggles::default()).unwrap();
        let b = routing_forward(&p, &xp, RoutingToggles::default()).unwrap();
        let n = 2;
        for i in 0..n {
            assert_eq!(a.theta.at(i), b.theta.at(2 * n + i));
            assert_eq!(a.theta.at(2 * n + i), b.theta.at(i));
            assert_eq!(a.theta.at(n + i), b.theta.at(n + i));
            assert_eq!(a.lambda.at(i), b.lambda.at(2 * n + i));
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let p = routing_init(4, 2, 1.0, 1);
        let x = Tensor::zeros(&[1, 5, 4, 4], DType::F64);
        assert!(routing_forward(&p, &x, RoutingToggles::default()).is_err());
    }
}
