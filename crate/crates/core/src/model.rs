//! The toy oriented-bars classifier and its trainer.
//!
//! Models are materialized from a [`NetworkDescriptor`], so the parameter
//! count of a built model always equals the descriptor's arithmetic.
//! Parameter initialization streams are keyed by layer name; a static and
//! an adaptive model built from the same seed therefore share bitwise
//! identical weights everywhere they overlap (stem, norms, head, and the
//! first expert of every replaced convolution).

use crate::arc::{ArcLayer, ArcLayerConfig, ArcLayerParams};
use crate::datagen::OrientedBarSample;
use crate::descriptor::{
    smallnet_descriptor, LayerKind, NetworkDescriptor, StageSet,
};
use crate::error::{Error, Result};
use crate::ops::softmax_cross_entropy;
use crate::rng::{fnv1a64, mix64, SplitMix64};
use crate::routing::{routing_init, RoutingToggles, LAYER_NORM_EPS};
use crate::tape::{ParamGroup, ParamId, ParamSet, Tape, Var};
use crate::tensor::{DType, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Static,
    Arc,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Static => write!(f, "static"),
            Mode::Arc => write!(f, "arc"),
        }
    }
}

/// Everything the trainer needs; flags map one-to-one onto the CLI.
#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub mode: Mode,
    pub arc_stages: StageSet,
    pub n: usize,
    pub bins: usize,
    pub angle_coefficient: f64,
    pub toggles: RoutingToggles,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Multiplier on the learning rate of every backbone (non-head)
    /// parameter; damps early swings in the predicted angles.
    pub backbone_lr_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Static,
            arc_stages: StageSet::ALL,
            n: 4,
            bins: 8,
            angle_coefficient: std::f64::consts::PI,
            toggles: RoutingToggles::default(),
            epochs: 4,
            batch_size: 32,
            learning_rate: 0.5,
            momentum: 0.9,
            backbone_lr_scale: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("train: epochs and batch size must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::config(format!(
                "train: bad optimizer settings lr={} momentum={}",
                self.learning_rate, self.momentum
            )));
        }
        if self.backbone_lr_scale <= 0.0 {
            return Err(Error::config("train: backbone lr scale must be positive"));
        }
        if self.mode == Mode::Arc && !self.arc_stages.any() {
            return Err(Error::config(
                "train: adaptive mode needs at least one replaced stage",
            ));
        }
        if self.n == 0 || self.bins < 2 {
            return Err(Error::config("train: n >= 1 and bins >= 2 required"));
        }
        Ok(())
    }

    pub fn effective_stages(&self) -> StageSet {
        match self.mode {
            Mode::Static => StageSet::none(),
            Mode::Arc => self.arc_stages,
        }
    }
}

enum ModelLayer {
    Conv {
        weight: ParamId,
        stride: usize,
        padding: usize,
    },
    Arc(ArcLayer),
    Norm {
        gamma: ParamId,
        beta: ParamId,
    },
    Relu,
    GlobalPool,
    Linear {
        weight: ParamId,
        bias: ParamId,
    },
}

pub struct Model {
    pub params: ParamSet,
    layers: Vec<ModelLayer>,
    pub descriptor: NetworkDescriptor,
    pub bins: usize,
}

fn he_normal(shape: &[usize], fan_in: usize, dtype: DType, rng: &mut SplitMix64) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::generate(shape, dtype, || rng.gaussian() * std)
}

/// Build the toy classifier in `f32` or `f64` from its descriptor.
pub fn build_smallnet(config: &TrainConfig, dtype: DType) -> Result<Model> {
    config.validate()?;
    let desc = smallnet_descriptor(config.effective_stages(), config.n, config.bins);
    desc.validate_chain()?;
    let mut params = ParamSet::new();
    let mut layers = Vec::new();
    let seed = config.seed;
    for (idx, rec) in desc.layers.iter().enumerate() {
        let name = format!("layer{idx}");
        let mut rng = SplitMix64::new(mix64(seed ^ fnv1a64(name.as_bytes())));
        match rec.kind {
            LayerKind::Conv => {
                let w = he_normal(
                    &[rec.c_out, rec.c_in, rec.k, rec.k],
                    rec.c_in * rec.k * rec.k,
                    dtype,
                    &mut rng,
                );
                let weight = params.add(format!("{name}.weight"), ParamGroup::Backbone, w);
                layers.push(ModelLayer::Conv {
                    weight,
                    stride: rec.stride,
                    padding: rec.padding,
                });
            }
            LayerKind::ArcConv => {
                let cfg = ArcLayerConfig {
                    n: rec.n,
                    k: rec.k,
                    c_in: rec.c_in,
                    c_out: rec.c_out,
                    stride: rec.stride,
                    padding: rec.padding,
                    angle_coefficient: config.angle_coefficient,
                    toggles: config.toggles,
                };
                // Same stream as the static conv of this position: the
                // first expert coincides with the static kernel.
                let kernels = he_normal(
                    &cfg.kernel_shape(),
                    rec.c_in * rec.k * rec.k,
                    dtype,
                    &mut rng,
                );
                let router = routing_init(
                    rec.c_in,
                    rec.n,
                    config.angle_coefficient,
                    mix64(seed ^ fnv1a64(format!("{name}.router").as_bytes())),
                );
                let values = ArcLayerParams {
                    kernels,
                    router,
                    config: cfg,
                }
                .cast(dtype);
                layers.push(ModelLayer::Arc(ArcLayer::register(
                    &mut params,
                    &name,
                    &values,
                )?));
            }
            LayerKind::Norm => {
                let gamma = params.add(
                    format!("{name}.gamma"),
                    ParamGroup::Backbone,
                    Tensor::full(&[rec.c_out], 1.0, dtype),
                );
                let beta = params.add(
                    format!("{name}.beta"),
                    ParamGroup::Backbone,
                    Tensor::zeros(&[rec.c_out], dtype),
                );
                layers.push(ModelLayer::Norm { gamma, beta });
            }
            LayerKind::Relu => layers.push(ModelLayer::Relu),
            LayerKind::Pool => layers.push(ModelLayer::GlobalPool),
            LayerKind::Linear => {
                let w = Tensor::generate(&[rec.c_out, rec.c_in], dtype, || {
                    rng.gaussian() * (1.0 / rec.c_in as f64).sqrt()
                });
                let weight = params.add(format!("{name}.weight"), ParamGroup::Head, w);
                let bias = params.add(
                    format!("{name}.bias"),
                    ParamGroup::Head,
                    Tensor::zeros(&[rec.c_out], dtype),
                );
                layers.push(ModelLayer::Linear { weight, bias });
            }
        }
    }
    let model = Model {
        params,
        layers,
        descriptor: desc,
        bins: config.bins,
    };
    debug_assert_eq!(model.params.numel() as u64, model.descriptor.params());
    Ok(model)
}

impl Model {
    /// Record the forward pass; returns the logits node.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                ModelLayer::Conv {
                    weight,
                    stride,
                    padding,
                } => {
                    let w = tape.param(&self.params, *weight);
                    tape.conv2d(h, w, *stride, *padding)?
                }
                ModelLayer::Arc(arc) => arc.forward(&self.params, tape, h)?,
                ModelLayer::Norm { gamma, beta } => {
                    let g = tape.param(&self.params, *gamma);
                    let b = tape.param(&self.params, *beta);
                    tape.channel_layer_norm(h, g, b, LAYER_NORM_EPS)?
                }
                ModelLayer::Relu => tape.relu(h),
                ModelLayer::GlobalPool => tape.global_avg_pool(h)?,
                ModelLayer::Linear { weight, bias } => {
                    let w = tape.param(&self.params, *weight);
                    let b = tape.param(&self.params, *bias);
                    tape.linear(h, w, Some(b))?
                }
            };
        }
        Ok(h)
    }

    /// Inference logits for a batch tensor.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = self.forward(&mut tape, xv)?;
        Ok(tape.value(out).clone())
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }
}

/// One epoch's metrics rows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

pub fn metrics_csv_header() -> &'static str {
    "epoch,split,loss,accuracy"
}

pub fn metrics_csv_rows(m: &EpochMetrics) -> String {
    format!(
        "{},train,{:.6},{:.6}\n{},test,{:.6},{:.6}",
        m.epoch, m.train_loss, m.train_acc, m.epoch, m.test_loss, m.test_acc
    )
}

pub fn metrics_to_csv(all: &[EpochMetrics]) -> String {
    let mut out = String::from(metrics_csv_header());
    for m in all {
        out.push('\n');
        out.push_str(&metrics_csv_rows(m));
    }
    out.push('\n');
    out
}

/// Stack samples into a batch, standardizing pixels from [0, 1] to [-1, 1]
/// so the background does not read as an all-zero (gradient-free) region.
fn batch_tensor(samples: &[&OrientedBarSample], dtype: DType) -> (Tensor, Vec<usize>) {
    let (h, w) = (samples[0].image.shape()[1], samples[0].image.shape()[2]);
    let mut x = Tensor::zeros(&[samples.len(), 1, h, w], dtype);
    let mut labels = Vec::with_capacity(samples.len());
    for (b, s) in samples.iter().enumerate() {
        for i in 0..h * w {
            x.set(b * h * w + i, 2.0 * s.image.at(i) - 1.0);
        }
        labels.push(s.label);
    }
    (x, labels)
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    (0..n)
        .map(|b| {
            (0..k)
                .max_by(|&i, &j| {
                    logits
                        .at(b * k + i)
                        .partial_cmp(&logits.at(b * k + j))
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .unwrap_or(0)
        })
        .collect()
}

/// Mean loss and top-1 accuracy over a dataset.
pub fn evaluate(model: &Model, dataset: &[OrientedBarSample]) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::config("evaluate: empty dataset"));
    }
    let dtype = model.params.get(crate::tape::ParamId(0)).value.dtype();
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    for chunk in dataset.chunks(64) {
        let refs: Vec<&OrientedBarSample> = chunk.iter().collect();
        let (x, labels) = batch_tensor(&refs, dtype);
        let logits = model.logits(&x)?;
        loss_sum += softmax_cross_entropy(&logits, &labels)? * chunk.len() as f64;
        for (pred, want) in argmax_rows(&logits).into_iter().zip(labels) {
            if pred == want {
                correct += 1;
            }
        }
    }
    Ok((
        loss_sum / dataset.len() as f64,
        correct as f64 / dataset.len() as f64,
    ))
}

/// SGD with momentum; backbone parameters train at a scaled-down rate.
/// Deterministic given (config, datasets): batch order comes from a
/// splitmix64 substream per epoch, arithmetic order is fixed throughout.
pub fn train(
    model: &mut Model,
    train_set: &[OrientedBarSample],
    test_set: &[OrientedBarSample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    config.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::config("train: empty dataset"));
    }
    let dtype = model.params.get(crate::tape::ParamId(0)).value.dtype();
    let mut velocity: Vec<Tensor> = model
        .params
        .ids()
        .map(|id| Tensor::zeros(model.params.get(id).value.shape(), dtype))
        .collect();
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng =
            SplitMix64::substream(config.seed, fnv1a64(b"shuffle").wrapping_add(epoch as u64));
        for i in (1..order.len()).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0f64;
        let mut epoch_correct = 0usize;
        for batch_idx in order.chunks(config.batch_size) {
            step += 1;
            let refs: Vec<&OrientedBarSample> =
                batch_idx.iter().map(|&i| &train_set[i]).collect();
            let (x, labels) = batch_tensor(&refs, dtype);
            let mut tape = Tape::new();
            let xv = tape.leaf(x);
            let logits = model.forward(&mut tape, xv)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            let loss_val = tape.value(loss).scalar()?;
            if !loss_val.is_finite() {
                return Err(Error::Divergence { step });
            }
            epoch_loss += loss_val * refs.len() as f64;
            for (pred, want) in argmax_rows(tape.value(logits)).into_iter().zip(&labels) {
                if pred == *want {
                    epoch_correct += 1;
                }
            }
            let grads = tape.backward(loss)?;
            model.params.zero_grads();
            tape.apply_gradients(&grads, &mut model.params);
            for id in model.params.ids() {
                let group = model.params.group(id);
                let lr = config.learning_rate
                    * if group == ParamGroup::Backbone {
                        config.backbone_lr_scale
                    } else {
                        1.0
                    };
                let p = model.params.get_mut(id);
                if !p.trainable {
                    continue;
                }
                let v = &mut velocity[id.0];
                for i in 0..v.numel() {
                    let vel = config.momentum * v.at(i) + p.grad.at(i);
                    v.set(i, vel);
                    p.value.set(i, p.value.at(i) - lr * vel);
                }
            }
        }
        let (test_loss, test_acc) = evaluate(model, test_set)?;
        let m = EpochMetrics {
            epoch,
            train_loss: epoch_loss / train_set.len() as f64,
            train_acc: epoch_correct as f64 / train_set.len() as f64,
            test_loss,
            test_acc,
        };
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(metrics)
}
