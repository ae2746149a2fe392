//! Tape-based reverse-mode differentiation.
//!
//! A forward pass records one node per operation (value, parent edges, and
//! a closure computing parent gradients from the upstream gradient).
//! [`Tape::backward`] walks the record in reverse, accumulating gradients
//! by addition, and returns them as a [`Gradients`] table; parameter
//! gradients are then added into their [`Parameter::grad`] buffers with
//! [`Tape::apply_gradients`]. Running backward twice without zeroing
//! doubles the accumulated gradients.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{DType, Tensor};

/// A trainable (or frozen) tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(value: Tensor, trainable: bool) -> Parameter {
        let grad = Tensor::zeros(value.shape(), value.dtype());
        Parameter {
            value,
            grad,
            trainable,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Learning-rate group: backbone parameters can be trained at a scaled-down
/// rate relative to the classifier head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Named parameter store shared by a whole model.
#[derive(Default, Debug)]
pub struct ParamSet {
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.groups.push(group);
        self.params.push(Parameter::new(value, true));
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// Total scalar count across all parameter tensors.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Checksum over all parameter values (names included), for verifying
    /// that read-only passes leave state untouched.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xCBF2_9CE4_8422_2325u64;
        for (name, p) in self.names.iter().zip(self.params.iter()) {
            h ^= crate::rng::fnv1a64(name.as_bytes());
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
            h ^= p.value.checksum();
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        h
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type GradFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    grad_fn: Option<GradFn>,
    param: Option<ParamId>,
}

/// Gradient table produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, parents: Vec<Var>, grad_fn: Option<GradFn>) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            grad_fn,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an input tensor (gradients are computed but not bound to any
    /// parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, vec![], None)
    }

    /// Record a parameter leaf; its gradient is added into the parameter
    /// by [`Tape::apply_gradients`].
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let var = self.push(params.get(id).value.clone(), vec![], None);
        self.nodes[var.0].param = Some(id);
        var
    }

    /// Record a custom operation: `value` computed from `parents`, with
    /// `grad_fn(upstream, parent_values, own_value) -> parent gradients`.
    pub fn custom_op(&mut self, parents: &[Var], value: Tensor, grad_fn: GradFn) -> Var {
        self.push(value, parents.to_vec(), Some(grad_fn))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut out = va.clone();
        out.add_assign(vb)?;
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(|up, _, _| vec![up.clone(), up.clone()])),
        ))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale_in_place(factor);
        self.push(
            out,
            vec![x],
            Some(Box::new(move |up, _, _| {
                let mut g = up.clone();
                g.scale_in_place(factor);
                vec![g]
            })),
        )
    }

    /// Multiply each sample row `y[b, ..]` by the scalar `s[b]`.
    pub fn mul_per_sample(&mut self, y: Var, s: Var) -> Result<Var> {
        let (vy, vs) = (self.value(y), self.value(s));
        let n = vy.shape()[0];
        if vs.shape() != [n] {
            return Err(Error::shape(
                "mul_per_sample",
                format!("scale {:?} for batch {n}", vs.shape()),
            ));
        }
        let row = vy.numel() / n;
        let mut out = vy.clone();
        for b in 0..n {
            let f = vs.at(b);
            for i in 0..row {
                out.set(b * row + i, vy.at(b * row + i) * f);
            }
        }
        Ok(self.push(
            out,
            vec![y, s],
            Some(Box::new(move |up, parents, _| {
                let (vy, vs) = (parents[0], parents[1]);
                let mut dy = up.clone();
                let mut ds = Tensor::zeros(&[n], vs.dtype());
                for b in 0..n {
                    let f = vs.at(b);
                    let mut dot = 0.0f64;
                    for i in 0..row {
                        dot += up.at(b * row + i) * vy.at(b * row + i);
                        dy.set(b * row + i, up.at(b * row + i) * f);
                    }
                    ds.set(b, dot);
                }
                vec![dy, ds]
            })),
        ))
    }

    /// Extract column `col` of a `[N, M]` tensor as `[N]`.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 2 || col >= vx.shape()[1] {
            return Err(Error::shape(
                "column",
                format!("column {col} of {:?}", vx.shape()),
            ));
        }
        let (n, m) = (vx.shape()[0], vx.shape()[1]);
        let mut out = Tensor::zeros(&[n], vx.dtype());
        for b in 0..n {
            out.set(b, vx.at(b * m + col));
        }
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |up, parents, _| {
                let mut dx = Tensor::zeros(parents[0].shape(), parents[0].dtype());
                for b in 0..n {
                    dx.set(b * m + col, up.at(b));
                }
                vec![dx]
            })),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        let old_shape = self.value(x).shape().to_vec();
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |up, _, _| {
                vec![up.reshaped(&old_shape).expect("reshape grad")]
            })),
        ))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        self.grouped_conv2d(x, w, 1, stride, padding)
    }

    pub fn grouped_conv2d(
        &mut self,
        x: Var,
        w: Var,
        groups: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let out = ops::grouped_conv2d(vx, vw, groups, stride, padding)?;
        let (h, wdim) = (vx.shape()[2], vx.shape()[3]);
        let (kh, kw) = (vw.shape()[2], vw.shape()[3]);
        Ok(self.push(
            out,
            vec![x, w],
            Some(Box::new(move |up, parents, _| {
                let (vx, vw) = (parents[0], parents[1]);
                let dx = ops::conv2d_grad_input(vw, up, groups, stride, padding, (h, wdim))
                    .expect("conv grad input");
                let dw = ops::conv2d_grad_weight(vx, up, groups, stride, padding, (kh, kw))
                    .expect("conv grad weight");
                vec![dx, dw]
            })),
        ))
    }

    pub fn channel_layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        let out = ops::channel_layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            out,
            vec![x, gamma, beta],
            Some(Box::new(move |up, parents, _| {
                let (vx, vgamma) = (parents[0], parents[1]);
                let (dx, dgamma, dbeta) =
                    ops::channel_layer_norm_grads(vx, vgamma, up, eps).expect("layer norm grads");
                vec![dx, dgamma, dbeta]
            })),
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.push(
            out,
            vec![x],
            Some(Box::new(|up, parents, _| {
                vec![ops::relu_grad(parents[0], up)]
            })),
        )
    }

    pub fn softsign(&mut self, x: Var) -> Var {
        let out = ops::softsign(self.value(x));
        self.push(
            out,
            vec![x],
            Some(Box::new(|up, parents, _| {
                vec![ops::softsign_grad(parents[0], up)]
            })),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = ops::sigmoid(self.value(x));
        self.push(
            out,
            vec![x],
            Some(Box::new(|up, parents, _| {
                vec![ops::sigmoid_grad(parents[0], up)]
            })),
        )
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(x))?;
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |up, _, _| {
                vec![ops::global_avg_pool_grad(&shape, up)]
            })),
        ))
    }

    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let out = ops::linear(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
        )?;
        let mut parents = vec![x, w];
        let with_bias = bias.is_some();
        if let Some(b) = bias {
            parents.push(b);
        }
        Ok(self.push(
            out,
            parents,
            Some(Box::new(move |up, parents, _| {
                let (vx, vw) = (parents[0], parents[1]);
                let (dx, dw, db) = ops::linear_grads(vx, vw, up, with_bias).expect("linear grads");
                let mut grads = vec![dx, dw];
                if let Some(db) = db {
                    grads.push(db);
                }
                grads
            })),
        ))
    }

    /// Mean softmax cross-entropy; returns a `[1]` scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let loss = ops::softmax_cross_entropy(self.value(logits), labels)?;
        let dtype = self.value(logits).dtype();
        let labels = labels.to_vec();
        let out = match dtype {
            DType::F32 => Tensor::from_f32(&[1], vec![loss as f32]),
            DType::F64 => Tensor::from_f64(&[1], vec![loss]),
        };
        Ok(self.push(
            out,
            vec![logits],
            Some(Box::new(move |up, parents, _| {
                let dl = ops::softmax_cross_entropy_grad(parents[0], &labels, up.at(0))
                    .expect("cross entropy grad");
                vec![dl]
            })),
        ))
    }

    /// Sum of all elements; returns a `[1]` scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let total: f64 = (0..vx.numel()).map(|i| vx.at(i)).sum();
        let out = match vx.dtype() {
            DType::F32 => Tensor::from_f32(&[1], vec![total as f32]),
            DType::F64 => Tensor::from_f64(&[1], vec![total]),
        };
        self.push(
            out,
            vec![x],
            Some(Box::new(|up, parents, _| {
                let mut g = Tensor::zeros(parents[0].shape(), parents[0].dtype());
                g.fill(up.at(0));
                vec![g]
            })),
        )
    }

    /// Fixed-weight projection `sum(x * weights)`; returns a `[1]` scalar.
    /// The weights are constants (no gradient path), which makes this the
    /// standard scalarizer for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape() != weights.shape() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{:?} vs {:?}", vx.shape(), weights.shape()),
            ));
        }
        let total: f64 = (0..vx.numel()).map(|i| vx.at(i) * weights.at(i)).sum();
        let out = match vx.dtype() {
            DType::F32 => Tensor::from_f32(&[1], vec![total as f32]),
            DType::F64 => Tensor::from_f64(&[1], vec![total]),
        };
        let w = weights.clone();
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |up, _, _| {
                let mut g = w.clone();
                g.scale_in_place(up.at(0));
                vec![g]
            })),
        ))
    }

    /// Reverse sweep from a scalar loss node. Gradients accumulate by
    /// addition in reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_val = &self.nodes[loss.0].value;
        if loss_val.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&[1], 1.0, loss_val.dtype()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(grad_fn) = &node.grad_fn else {
                continue;
            };
            let Some(up) = grads[i].clone() else {
                continue;
            };
            let parent_vals: Vec<&Tensor> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let parent_grads = grad_fn(&up, &parent_vals, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                match &mut grads[p.0] {
                    Some(existing) => existing.add_assign(&g).expect("gradient accumulation"),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Add the gradients of parameter leaves into their `grad` buffers.
    pub fn apply_gradients(&self, grads: &Gradients, params: &mut ParamSet) {
        for (i, node) in self.nodes.iter().enumerate() {
            let (Some(id), Some(g)) = (node.param, grads.grads[i].as_ref()) else {
                continue;
            };
            params
                .get_mut(id)
                .grad
                .add_assign(g)
                .expect("parameter gradient accumulation");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_backward_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_f64(&[2, 2], vec![1.0, -2.0, 3.0, 4.0]));
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().to_f64_vec(), vec![1.0; 4]);
    }

    #[test]
    fn relu_kills_negative_branch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_f64(&[3], vec![-1.0, -0.5, -2.0]));
        let r = tape.relu(x);
        let loss = tape.sum(r);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().to_f64_vec(), vec![0.0; 3]);
    }

    #[test]
    fn backward_on_non_scalar_is_contract_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2], DType::F64));
        let r = tape.relu(x);
        assert!(matches!(tape.backward(r), Err(Error::Contract(_))));
    }

    #[test]
    fn double_apply_doubles_parameter_grads() {
        let mut params = ParamSet::new();
        let id = params.add(
            "w",
            ParamGroup::Head,
            Tensor::from_f64(&[2], vec![1.0, 2.0]),
        );
        let mut tape = Tape::new();
        let w = tape.param(&params, id);
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        tape.apply_gradients(&grads, &mut params);
        tape.apply_gradients(&grads, &mut params);
        assert_eq!(params.get(id).grad.to_f64_vec(), vec![2.0, 2.0]);
        params.zero_grads();
        assert_eq!(params.get(id).grad.to_f64_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn fanout_accumulates() {
        // loss = sum(x) + sum(x) => grad 2.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_f64(&[2], vec![5.0, -1.0]));
        let a = tape.sum(x);
        let b = tape.sum(x);
        let loss = tape.add(a, b).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().to_f64_vec(), vec![2.0, 2.0]);
    }
}
