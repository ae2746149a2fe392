//! Verification and accounting: equivalence checks between the two layer
//! formulations, finite-difference gradient checks, parameter/FLOP
//! estimation, and forward-path benchmarks.

use crate::arc::{arc_forward, arc_forward_naive, ArcLayerConfig, ArcLayerParams};
use crate::descriptor::{walk_spatial, LayerKind, NetworkDescriptor};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::routing::RoutingToggles;
use crate::tensor::{DType, Tensor};
use std::time::Instant;

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    /// Worst-case metric (max abs/rel error, or timing ratio).
    pub metric: f64,
    pub tolerance: f64,
    /// Short description of the configuration that was exercised.
    pub config: String,
}

impl CheckReport {
    fn finish(name: &str, metric: f64, tolerance: f64, config: String) -> CheckReport {
        CheckReport {
            name: name.to_string(),
            passed: metric <= tolerance,
            metric,
            tolerance,
            config,
        }
    }

    pub fn csv_header() -> &'static str {
        "check,config,metric,tolerance,status"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.3e},{:.3e},{}",
            self.name,
            self.config,
            self.metric,
            self.tolerance,
            if self.passed { "pass" } else { "fail" }
        )
    }
}

/// One equivalence measurement: max |combined - naive| over a random layer
/// and input, absolute in f64 and relative to the output scale in f32.
pub fn equivalence_gap(
    config: &ArcLayerConfig,
    batch: usize,
    dtype: DType,
    seed: u64,
) -> Result<f64> {
    let layer = ArcLayerParams::init(*config, seed)?.cast(dtype);
    let mut rng = SplitMix64::substream(seed, batch as u64);
    let x = Tensor::generate(&[batch, config.c_in, 7, 7], dtype, || rng.gaussian());
    let fast = arc_forward(&layer, &x)?;
    let slow = arc_forward_naive(&layer, &x)?;
    let gap = fast.max_abs_diff(&slow);
    Ok(match dtype {
        DType::F64 => gap,
        DType::F32 => gap / slow.max_abs().max(1e-12),
    })
}

/// Sweep of layer shapes for the combined-vs-naive identity.
pub fn default_equivalence_sweep() -> Vec<ArcLayerConfig> {
    let mut sweep = Vec::new();
    for &n in &[1usize, 2, 4] {
        for &k in &[1usize, 3, 5] {
            sweep.push(ArcLayerConfig {
                n,
                k,
                c_in: 3,
                c_out: 4,
                stride: 1,
                padding: k / 2,
                angle_coefficient: std::f64::consts::PI,
                toggles: RoutingToggles::default(),
            });
        }
    }
    sweep
}

/// Run the equivalence identity across a config sweep; per-config reports
/// plus a summary entry carrying the worst gap.
pub fn check_equivalence(
    sweep: &[ArcLayerConfig],
    dtype: DType,
    seed: u64,
    tol: f64,
) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    let mut worst = 0.0f64;
    for (i, cfg) in sweep.iter().enumerate() {
        for batch in [1usize, 3] {
            let gap = equivalence_gap(cfg, batch, dtype, seed + i as u64)?;
            worst = worst.max(gap);
            reports.push(CheckReport::finish(
                "equivalence",
                gap,
                tol,
                format!("n={} k={} batch={batch} dtype={dtype}", cfg.n, cfg.k),
            ));
        }
    }
    reports.push(CheckReport::finish(
        "equivalence-worst",
        worst,
        tol,
        format!("sweep of {} configs, dtype={dtype}", sweep.len()),
    ));
    Ok(reports)
}

/// Central finite differences against analytic gradients.
///
/// `f` maps the full input list to a scalar; `analytic[i]` is the claimed
/// gradient for `inputs[i]`. Component relative error uses a magnitude
/// floor so near-zero gradients compare absolutely.
pub fn finite_difference_check(
    inputs: &[Tensor],
    analytic: &[Tensor],
    f: &mut dyn FnMut(&[Tensor]) -> Result<f64>,
    eps: f64,
) -> Result<f64> {
    const FLOOR: f64 = 1e-4;
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        if grad.shape() != inputs[ti].shape() {
            return Err(Error::shape(
                "finite_difference_check",
                format!("gradient {ti} shape {:?}", grad.shape()),
            ));
        }
        for i in 0..inputs[ti].numel() {
            let orig = inputs[ti].at(i);
            work[ti].set(i, orig + eps);
            let plus = f(&work)?;
            work[ti].set(i, orig - eps);
            let minus = f(&work)?;
            work[ti].set(i, orig);
            let fd = (plus - minus) / (2.0 * eps);
            let a = grad.at(i);
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(FLOOR);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Gradient-check subjects, ordered smallest to largest.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradCheckTarget {
    Rotation,
    Routing,
    ArcLayer,
    SmallNet,
}

impl GradCheckTarget {
    pub const ALL: [GradCheckTarget; 4] = [
        GradCheckTarget::Rotation,
        GradCheckTarget::Routing,
        GradCheckTarget::ArcLayer,
        GradCheckTarget::SmallNet,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            GradCheckTarget::Rotation => "rotation",
            GradCheckTarget::Routing => "routing",
            GradCheckTarget::ArcLayer => "arc-layer",
            GradCheckTarget::SmallNet => "smallnet",
        }
    }

    pub fn parse(s: &str) -> Result<GradCheckTarget> {
        match s {
            "rotation" => Ok(GradCheckTarget::Rotation),
            "routing" => Ok(GradCheckTarget::Routing),
            "arc-layer" => Ok(GradCheckTarget::ArcLayer),
            "smallnet" => Ok(GradCheckTarget::SmallNet),
            other => Err(Error::Input(format!(
                "unknown gradcheck target '{other}' (rotation, routing, arc-layer, smallnet)"
            ))),
        }
    }
}

/// Build a leafed tape over `inputs`, apply `compose`, scalarize with the
/// fixed projection, and return (loss, per-input analytic gradients).
fn tape_loss_and_grads(
    inputs: &[Tensor],
    projections: &[Tensor],
    compose: &dyn Fn(&mut crate::tape::Tape, &[crate::tape::Var]) -> Result<Vec<crate::tape::Var>>,
) -> Result<(f64, Vec<Tensor>)> {
    use crate::tape::Tape;
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let outs = compose(&mut tape, &vars)?;
    debug_assert_eq!(outs.len(), projections.len());
    let mut loss = None;
    for (o, p) in outs.iter().zip(projections) {
        let term = tape.weighted_sum(*o, p)?;
        loss = Some(match loss {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let loss = loss.expect("at least one output");
    let loss_val = tape.value(loss).scalar()?;
    let grads = tape.backward(loss)?;
    let analytic = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .wrt(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape(), t.dtype()))
        })
        .collect();
    Ok((loss_val, analytic))
}

fn gradcheck_composed(
    inputs: Vec<Tensor>,
    projections: Vec<Tensor>,
    compose: Box<dyn Fn(&mut crate::tape::Tape, &[crate::tape::Var]) -> Result<Vec<crate::tape::Var>>>,
    eps: f64,
) -> Result<f64> {
    let (_, analytic) = tape_loss_and_grads(&inputs, &projections, compose.as_ref())?;
    let mut f = |work: &[Tensor]| -> Result<f64> {
        tape_loss_and_grads(work, &projections, compose.as_ref()).map(|(l, _)| l)
    };
    finite_difference_check(&inputs, &analytic, &mut f, eps)
}

fn gradcheck_rotation(seed: u64, eps: f64) -> Result<f64> {
    let mut rng = SplitMix64::substream(seed, 1);
    let stack = Tensor::generate(&[2, 2, 2, 3, 3], DType::F64, || rng.gaussian());
    // Generic angles around 0.3 rad; integer-coordinate kinks (multiples
    // of 90 degrees) are excluded by construction.
    let theta = Tensor::generate(&[2, 2], DType::F64, || 0.3 + 0.4 * rng.gaussian());
    let mut prng = SplitMix64::substream(seed, 2);
    let proj = Tensor::generate(&[2, 2, 2, 2, 3, 3], DType::F64, || prng.gaussian());
    gradcheck_composed(
        vec![stack, theta],
        vec![proj],
        Box::new(|tape, vars| {
            Ok(vec![crate::arc::tape_rotate_experts(tape, vars[0], vars[1])?])
        }),
        eps,
    )
}

fn router_input_tensors(c_in: usize, n: usize, seed: u64) -> Vec<Tensor> {
    let p = crate::routing::routing_init(c_in, n, std::f64::consts::PI, seed);
    vec![
        p.dw_kernel,
        p.ln_gamma,
        p.ln_beta,
        p.theta_weight,
        p.lambda_weight,
        p.lambda_bias,
    ]
}

fn router_vars(vars: &[crate::tape::Var]) -> crate::routing::RouterVars {
    crate::routing::RouterVars {
        dw_kernel: vars[0],
        ln_gamma: vars[1],
        ln_beta: vars[2],
        theta_weight: vars[3],
        lambda_weight: vars[4],
        lambda_bias: vars[5],
    }
}

fn gradcheck_routing(seed: u64, eps: f64) -> Result<f64> {
    let (c_in, n, batch) = (3usize, 2usize, 2usize);
    let mut rng = SplitMix64::substream(seed, 3);
    let x = Tensor::generate(&[batch, c_in, 5, 5], DType::F64, || rng.gaussian());
    let mut inputs = router_input_tensors(c_in, n, seed);
    inputs.insert(0, x);
    let mut prng = SplitMix64::substream(seed, 4);
    let proj_theta = Tensor::generate(&[batch, n], DType::F64, || prng.gaussian());
    let proj_lambda = Tensor::generate(&[batch, n], DType::F64, || prng.gaussian());
    gradcheck_composed(
        inputs,
        vec![proj_theta, proj_lambda],
        Box::new(move |tape, vars| {
            let (theta, lambda) = crate::routing::routing_pipeline(
                tape,
                vars[0],
                router_vars(&vars[1..]),
                c_in,
                n,
                std::f64::consts::PI,
                RoutingToggles::default(),
            )?;
            Ok(vec![theta, lambda])
        }),
        eps,
    )
}

fn gradcheck_arc_layer(seed: u64, eps: f64) -> Result<f64> {
    let (c, n, batch, hw, k) = (4usize, 2usize, 2usize, 6usize, 3usize);
    let mut rng = SplitMix64::substream(seed, 5);
    let x = Tensor::generate(&[batch, c, hw, hw], DType::F64, || rng.gaussian());
    let kernels = Tensor::generate(&[n, c, c, k, k], DType::F64, || rng.gaussian() * 0.5);
    let mut inputs = vec![x, kernels];
    inputs.extend(router_input_tensors(c, n, seed));
    let mut prng = SplitMix64::substream(seed, 6);
    let proj = Tensor::generate(&[batch, c, hw, hw], DType::F64, || prng.gaussian());
    gradcheck_composed(
        inputs,
        vec![proj],
        Box::new(move |tape, vars| {
            let (theta, lambda) = crate::routing::routing_pipeline(
                tape,
                vars[0],
                router_vars(&vars[2..]),
                c,
                n,
                std::f64::consts::PI,
                RoutingToggles::default(),
            )?;
            Ok(vec![crate::arc::arc_apply(
                tape, vars[0], vars[1], theta, lambda, 1, 1,
            )?])
        }),
        eps,
    )
}

fn gradcheck_smallnet(seed: u64, eps: f64) -> Result<f64> {
    use crate::descriptor::StageSet;
    use crate::model::{build_smallnet, Mode, TrainConfig};
    // Adaptive first stage exercises routing and rotation inside the full
    // network; a small input keeps the finite-difference sweep tractable.
    let config = TrainConfig {
        mode: Mode::Arc,
        arc_stages: StageSet {
            a: true,
            b: false,
            c: false,
        },
        n: 2,
        seed,
        ..TrainConfig::default()
    };
    let mut model = build_smallnet(&config, DType::F64)?;
    let mut rng = SplitMix64::substream(seed, 7);
    let x = Tensor::generate(&[1, 1, 4, 4], DType::F64, || rng.gaussian());
    let mut prng = SplitMix64::substream(seed, 8);
    let proj = Tensor::generate(&[1, config.bins], DType::F64, || prng.gaussian());

    let ids: Vec<_> = model.params.ids().collect();
    let mut inputs = vec![x];
    for &id in &ids {
        inputs.push(model.params.get(id).value.clone());
    }

    // Analytic gradients from one recorded pass.
    let (_, analytic) = {
        let mut tape = crate::tape::Tape::new();
        let xv = tape.leaf(inputs[0].clone());
        let logits = model.forward(&mut tape, xv)?;
        let loss = tape.weighted_sum(logits, &proj)?;
        let grads = tape.backward(loss)?;
        model.params.zero_grads();
        tape.apply_gradients(&grads, &mut model.params);
        let mut analytic = vec![grads
            .wrt(xv)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[0].shape(), DType::F64))];
        for &id in &ids {
            analytic.push(model.params.get(id).grad.clone());
        }
        (0.0, analytic)
    };

    let mut f = |work: &[Tensor]| -> Result<f64> {
        for (slot, &id) in work[1..].iter().zip(&ids) {
            model.params.get_mut(id).value = slot.clone();
        }
        let mut tape = crate::tape::Tape::new();
        let xv = tape.leaf(work[0].clone());
        let logits = model.forward(&mut tape, xv)?;
        let loss = tape.weighted_sum(logits, &proj)?;
        tape.value(loss).scalar()
    };
    finite_difference_check(&inputs, &analytic, &mut f, eps)
}

/// Finite-difference check of one target's analytic gradients.
pub fn gradcheck(target: GradCheckTarget, seed: u64, eps: f64, tol: f64) -> Result<CheckReport> {
    let worst = match target {
        GradCheckTarget::Rotation => gradcheck_rotation(seed, eps)?,
        GradCheckTarget::Routing => gradcheck_routing(seed, eps)?,
        GradCheckTarget::ArcLayer => gradcheck_arc_layer(seed, eps)?,
        GradCheckTarget::SmallNet => gradcheck_smallnet(seed, eps)?,
    };
    Ok(CheckReport::finish(
        "gradcheck",
        worst,
        tol,
        format!("target={} seed={seed} eps={eps:.0e}", target.name()),
    ))
}

const ROTATE_COMBINE_MACS_PER_WEIGHT: u64 = 2;

/// Per-record cost; `count` repeats already folded in.
#[derive(Clone, Debug)]
pub struct LayerCost {
    pub kind: LayerKind,
    pub params: u64,
    /// FLOPs of the main convolution / linear term (counted once per
    /// adaptive layer, independent of the expert count).
    pub conv_flops: u64,
    /// Routing, rotation, combination, normalization, activation FLOPs.
    pub overhead_flops: u64,
}

/// Parameter and FLOP totals with a per-record breakdown. FLOPs count one
/// multiply-accumulate as two operations, batch size 1.
#[derive(Clone, Debug)]
pub struct CostEstimate {
    pub params: u64,
    pub flops: u64,
    pub breakdown: Vec<LayerCost>,
}

impl CostEstimate {
    pub fn conv_flops(&self) -> u64 {
        self.breakdown.iter().map(|l| l.conv_flops).sum()
    }

    pub fn overhead_flops(&self) -> u64 {
        self.breakdown.iter().map(|l| l.overhead_flops).sum()
    }
}

/// Count parameters and FLOPs of a descriptor at the given input size.
pub fn estimate_cost(desc: &NetworkDescriptor, input_hw: (usize, usize)) -> Result<CostEstimate> {
    let mut breakdown = Vec::new();
    walk_spatial(desc, input_hw, |rec, (h, w), (ho, wo)| {
        let count = rec.count as u64;
        let spatial_in = (h * w) as u64;
        let spatial_out = (ho * wo) as u64;
        let (conv_flops, overhead) = match rec.kind {
            LayerKind::Conv => (
                2 * (rec.c_out * rec.c_in * rec.k * rec.k) as u64 * spatial_out,
                0,
            ),
            LayerKind::ArcConv => {
                let conv = 2 * (rec.c_out * rec.c_in * rec.k * rec.k) as u64 * spatial_out;
                let c = rec.c_in as u64;
                let n = rec.n as u64;
                // Router: depthwise 3x3 + layer norm + relu + pool + heads.
                let routing = 2 * 9 * c * spatial_in
                    + 8 * c * spatial_in
                    + c * spatial_in
                    + c * spatial_in
                    + 2 * 2 * n * c
                    + 3 * n;
                let rotate_combine = 2
                    * ROTATE_COMBINE_MACS_PER_WEIGHT
                    * n
                    * (rec.c_out * rec.c_in * rec.k * rec.k) as u64;
                (conv, routing + rotate_combine)
            }
            LayerKind::Norm => (0, 8 * rec.c_out as u64 * spatial_out),
            LayerKind::Relu => (0, rec.c_out as u64 * spatial_out),
            LayerKind::Pool => (0, rec.c_out as u64 * spatial_in),
            LayerKind::Linear => (2 * (rec.c_out * rec.c_in) as u64, 0),
        };
        breakdown.push(LayerCost {
            kind: rec.kind,
            params: rec.params() * count,
            conv_flops: conv_flops * count,
            overhead_flops: overhead * count,
        });
    })?;
    let params = breakdown.iter().map(|l| l.params).sum();
    let flops = breakdown
        .iter()
        .map(|l| l.conv_flops + l.overhead_flops)
        .sum();
    Ok(CostEstimate {
        params,
        flops,
        breakdown,
    })
}

/// Median wall times of the three forward paths.
#[derive(Clone, Debug)]
pub struct BenchReport {
    pub static_ms: f64,
    pub combined_ms: f64,
    pub naive_ms: f64,
    pub trials: usize,
    /// Parameter checksum verified unchanged across all timed runs.
    pub state_preserved: bool,
}

impl BenchReport {
    pub fn naive_over_combined(&self) -> f64 {
        self.naive_ms / self.combined_ms
    }

    pub fn combined_over_static(&self) -> f64 {
        self.combined_ms / self.static_ms
    }
}

fn median(times: &mut [f64]) -> f64 {
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    times[times.len() / 2]
}

/// Time the static, combined, and naive forward paths on one layer shape.
pub fn bench(
    config: &ArcLayerConfig,
    input_hw: (usize, usize),
    batch: usize,
    trials: usize,
    warmup: usize,
    dtype: DType,
    seed: u64,
) -> Result<BenchReport> {
    if trials < 5 {
        return Err(Error::config("bench: need at least 5 trials"));
    }
    let layer = ArcLayerParams::init(*config, seed)?.cast(dtype);
    let mut rng = SplitMix64::substream(seed, 0xBE);
    let x = Tensor::generate(&[batch, config.c_in, input_hw.0, input_hw.1], dtype, || {
        rng.gaussian()
    });
    let static_w = {
        // First expert as the static reference kernel.
        let per = config.c_out * config.c_in * config.k * config.k;
        let mut w = Tensor::zeros(
            &[config.c_out, config.c_in, config.k, config.k],
            DType::F64,
        );
        for i in 0..per {
            w.set(i, layer.kernels.at(i));
        }
        w.cast(dtype)
    };
    let before = layer.kernels.checksum() ^ static_w.checksum();

    let mut static_times = Vec::with_capacity(trials);
    let mut combined_times = Vec::with_capacity(trials);
    let mut naive_times = Vec::with_capacity(trials);
    for trial in 0..warmup + trials {
        let t0 = Instant::now();
        let ys = crate::ops::conv2d(&x, &static_w, config.stride, config.padding)?;
        let t1 = Instant::now();
        let yc = arc_forward(&layer, &x)?;
        let t2 = Instant::now();
        let yn = arc_forward_naive(&layer, &x)?;
        let t3 = Instant::now();
        // Touch the outputs so the passes cannot be elided.
        std::hint::black_box((ys.at(0), yc.at(0), yn.at(0)));
        if trial >= warmup {
            static_times.push((t1 - t0).as_secs_f64() * 1e3);
            combined_times.push((t2 - t1).as_secs_f64() * 1e3);
            naive_times.push((t3 - t2).as_secs_f64() * 1e3);
        }
    }
    let after = layer.kernels.checksum() ^ static_w.checksum();
    Ok(BenchReport {
        static_ms: median(&mut static_times),
        combined_ms: median(&mut combined_times),
        naive_ms: median(&mut naive_times),
        trials,
        state_preserved: before == after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::{resnet50_descriptor, smallnet_descriptor, StageSet};

    #[test]
    fn equivalence_sweep_passes_in_f64() {
        let sweep = default_equivalence_sweep();
        let reports = check_equivalence(&sweep, DType::F64, 3, 1e-12).unwrap();
        for r in &reports {
            assert!(r.passed, "{} {}: {}", r.name, r.config, r.metric);
        }
    }

    #[test]
    fn empty_descriptor_estimates_zero() {
        let est = estimate_cost(&NetworkDescriptor::default(), (32, 32)).unwrap();
        assert_eq!(est.params, 0);
        assert_eq!(est.flops, 0);
    }

    #[test]
    fn estimate_totals_equal_breakdown_sums() {
        let desc = smallnet_descriptor(StageSet::ALL, 4, 8);
        let est = estimate_cost(&desc, (32, 32)).unwrap();
        assert_eq!(est.params, desc.params());
        assert_eq!(est.flops, est.conv_flops() + est.overhead_flops());
    }

    #[test]
    fn arc_conv_flops_independent_of_n() {
        let conv_term = |n: usize| -> u64 {
            let desc = resnet50_descriptor(&[2, 3, 4], n, true).unwrap();
            estimate_cost(&desc, (1024, 1024)).unwrap().conv_flops()
        };
        let base = conv_term(1);
        for n in [2, 4, 6] {
            assert_eq!(conv_term(n), base);
        }
    }

    #[test]
    fn finite_difference_detects_wrong_gradient() {
        // f(x) = sum(x^2), gradient 2x; claim 3x and the check must fail.
        let x = Tensor::from_f64(&[3], vec![0.5, -1.0, 2.0]);
        let mut f = |inp: &[Tensor]| -> Result<f64> {
            Ok((0..3).map(|i| inp[0].at(i) * inp[0].at(i)).sum())
        };
        let good = Tensor::from_f64(&[3], vec![1.0, -2.0, 4.0]);
        let bad = Tensor::from_f64(&[3], vec![1.5, -3.0, 6.0]);
        let ok = finite_difference_check(&[x.clone()], &[good], &mut f, 1e-5).unwrap();
        assert!(ok < 1e-8, "worst {ok}");
        let worst = finite_difference_check(&[x], &[bad], &mut f, 1e-5).unwrap();
        assert!(worst > 0.2, "worst {worst}");
    }
}
