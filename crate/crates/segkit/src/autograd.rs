//! Reverse-mode automatic differentiation over the tensor primitives.
//!
//! A [`Tape`] records each operation applied during a forward pass; calling
//! [`Tape::backward`] walks the record in reverse and accumulates gradients
//! into the [`ParamSet`] holding the model's parameters. A finite-difference
//! [`gradient_check`] validates analytic gradients coordinate by coordinate.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{self, KernelView, Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
/// Fraction of the previous running statistic kept per update.
pub const BN_MOMENTUM: f64 = 0.9;
/// Scores below this are clamped before taking logarithms.
pub const SCORE_FLOOR: f64 = 1e-12;

/// Handle to one named parameter vector inside a [`ParamSet`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub data: Vec<T>,
    pub grad: Vec<T>,
    pub trainable: bool,
}

/// Flat store of named parameter vectors with matching gradient buffers.
///
/// Parameters are registered in a fixed order at network construction time,
/// which makes serialisation and optimizer state layout deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: BTreeMap::new() }
    }

    pub fn add(&mut self, name: &str, data: Vec<T>, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name: {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.to_string(), id.0);
        let grad = vec![T::zero(); data.len()];
        self.params.push(Param { name: name.to_string(), data, grad, trainable });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn data(&self, id: ParamId) -> &[T] {
        &self.params[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].data
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.params[id.0].grad
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn scale_grads(&mut self, factor: T) {
        for p in self.params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g = *g * factor);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, delta: &[T]) {
        let g = &mut self.params[id.0].grad;
        debug_assert_eq!(g.len(), delta.len());
        for (gv, &dv) in g.iter_mut().zip(delta) {
            *gv = *gv + dv;
        }
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn trainable_values(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.data.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    data: p.data.iter().map(|v| U::of(v.as_f64())).collect(),
                    grad: vec![U::zero(); p.data.len()],
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Copies parameter values (not gradients) from another set with the
    /// same layout.
    pub fn copy_values_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter sets differ in length: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.data.len() != src.data.len() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter mismatch: {} ({}) vs {} ({})",
                    dst.name,
                    dst.data.len(),
                    src.name,
                    src.data.len()
                )));
            }
            dst.data.copy_from_slice(&src.data);
        }
        Ok(())
    }

    /// Overwrites one parameter's values by name; used when loading weights.
    pub fn set_by_name(&mut self, name: &str, values: &[T]) -> Result<()> {
        let id = self
            .id_of(name)
            .ok_or_else(|| Error::MissingData(format!("no parameter named {name}")))?;
        let p = &mut self.params[id.0];
        if p.data.len() != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {name} has {} values, file provides {}",
                p.data.len(),
                values.len()
            )));
        }
        p.data.copy_from_slice(values);
        Ok(())
    }
}

/// He-normal initialisation: zero-mean Gaussian with variance 2 / fan-in.
/// Samples are drawn at f64 and cast, so f32 and f64 builds of the same
/// network start from identical values.
pub fn he_normal<T: Real, R: Rng>(rng: &mut R, count: usize, fan_in: usize) -> Vec<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    (0..count).map(|_| T::of(dist.sample(rng))).collect()
}

/// Convolution kernel whose weights live in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct ConvKernelRef {
    pub weights: ParamId,
    pub bias: ParamId,
    pub k_h: usize,
    pub k_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvKernelRef {
    /// Registers a He-initialised kernel (zero bias) under `name`.
    pub fn create<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        k_h: usize,
        k_w: usize,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        let fan_in = k_h * k_w * in_channels;
        let weights = params.add(
            &format!("{name}.w"),
            he_normal(rng, k_h * k_w * in_channels * out_channels, fan_in),
            true,
        );
        let bias = params.add(&format!("{name}.b"), vec![T::zero(); out_channels], true);
        Self { weights, bias, k_h, k_w, in_channels, out_channels }
    }

    pub fn view<'a, T: Real>(&self, params: &'a ParamSet<T>) -> KernelView<'a, T> {
        KernelView {
            k_h: self.k_h,
            k_w: self.k_w,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            weights: params.data(self.weights),
            bias: params.data(self.bias),
        }
    }
}

/// Batch-normalisation layer: learned scale/shift plus running statistics
/// (stored as non-trainable parameters so they serialise with the weights).
#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNormLayer {
    pub fn create<T: Real>(params: &mut ParamSet<T>, name: &str, channels: usize) -> Self {
        let scale = params.add(&format!("{name}.scale"), vec![T::one(); channels], true);
        let shift = params.add(&format!("{name}.shift"), vec![T::zero(); channels], true);
        let running_mean =
            params.add(&format!("{name}.running_mean"), vec![T::zero(); channels], false);
        let running_var =
            params.add(&format!("{name}.running_var"), vec![T::one(); channels], false);
        Self { scale, shift, running_mean, running_var, channels }
    }
}

/// Whether batch statistics come from the current tensor (training) or from
/// the stored running statistics (inference).
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Index of a value node on the tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
}

enum Step<T> {
    Conv { input: NodeId, output: NodeId, kernel: ConvKernelRef },
    TConv { input: NodeId, output: NodeId, kernel: ConvKernelRef },
    MaxPool { input: NodeId, output: NodeId, argmax: Vec<u8> },
    Upsample { input: NodeId, output: NodeId },
    Relu { input: NodeId, output: NodeId },
    PRelu { input: NodeId, output: NodeId, slopes: ParamId },
    Sigmoid { input: NodeId, output: NodeId },
    Softmax { input: NodeId, output: NodeId },
    BatchNorm {
        input: NodeId,
        output: NodeId,
        scale: ParamId,
        shift: ParamId,
        mean: Vec<T>,
        inv_std: Vec<T>,
        train_stats: bool,
    },
    Concat { inputs: Vec<NodeId>, output: NodeId },
    Add { a: NodeId, b: NodeId, output: NodeId },
    MulElem { a: NodeId, b: NodeId, output: NodeId },
    MulMask { feat: NodeId, mask: NodeId, output: NodeId },
    Scale { input: NodeId, output: NodeId, factor: T },
    SumAll { input: NodeId, output: NodeId },
    CrossEntropy { scores: NodeId, output: NodeId, truth: Tensor<T> },
}

/// Records a forward computation for reverse-mode differentiation.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    steps: Vec<Step<T>>,
    mode: Mode,
}

impl<T: Real> Tape<T> {
    pub fn new(mode: Mode) -> Self {
        Self { nodes: Vec::new(), steps: Vec::new(), mode }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn push_node(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { value, grad: None });
        NodeId(self.nodes.len() - 1)
    }

    /// Introduces an input tensor as a leaf node.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_node(value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass w.r.t. a node, if it was reached.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn conv2d(
        &mut self,
        params: &ParamSet<T>,
        input: NodeId,
        kernel: &ConvKernelRef,
    ) -> Result<NodeId> {
        let out = tensor::conv2d(self.value(input), kernel.view(params))?;
        let output = self.push_node(out);
        self.steps.push(Step::Conv { input, output, kernel: kernel.clone() });
        Ok(output)
    }

    pub fn transposed_conv2d(
        &mut self,
        params: &ParamSet<T>,
        input: NodeId,
        kernel: &ConvKernelRef,
    ) -> Result<NodeId> {
        let out = tensor::transposed_conv2d(self.value(input), kernel.view(params))?;
        let output = self.push_node(out);
        self.steps.push(Step::TConv { input, output, kernel: kernel.clone() });
        Ok(output)
    }

    pub fn maxpool2x(&mut self, input: NodeId) -> Result<NodeId> {
        let (out, argmax) = tensor::maxpool2x(self.value(input))?;
        let output = self.push_node(out);
        self.steps.push(Step::MaxPool { input, output, argmax });
        Ok(output)
    }

    pub fn upsample_nearest2x(&mut self, input: NodeId) -> NodeId {
        let out = tensor::upsample_nearest2x(self.value(input));
        let output = self.push_node(out);
        self.steps.push(Step::Upsample { input, output });
        output
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = tensor::relu(self.value(input));
        let output = self.push_node(out);
        self.steps.push(Step::Relu { input, output });
        output
    }

    pub fn prelu(&mut self, params: &ParamSet<T>, input: NodeId, slopes: ParamId) -> Result<NodeId> {
        let out = tensor::prelu(self.value(input), params.data(slopes))?;
        let output = self.push_node(out);
        self.steps.push(Step::PRelu { input, output, slopes });
        Ok(output)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let out = tensor::sigmoid(self.value(input));
        let output = self.push_node(out);
        self.steps.push(Step::Sigmoid { input, output });
        output
    }

    pub fn softmax_channelwise(&mut self, input: NodeId) -> NodeId {
        let out = tensor::softmax_channelwise(self.value(input));
        let output = self.push_node(out);
        self.steps.push(Step::Softmax { input, output });
        output
    }

    pub fn batchnorm(
        &mut self,
        params: &mut ParamSet<T>,
        input: NodeId,
        layer: &BatchNormLayer,
    ) -> Result<NodeId> {
        let x = &self.nodes[input.0].value;
        if x.channels() != layer.channels {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm over {} channels applied to tensor with {}",
                layer.channels,
                x.channels()
            )));
        }
        let eps = T::of(BN_EPS);
        let (mean, inv_std, train_stats) = match self.mode {
            Mode::Train => {
                let stats = tensor::batchnorm_stats(x, eps);
                // Update running statistics in place.
                let momentum = T::of(BN_MOMENTUM);
                let one_minus = T::one() - momentum;
                {
                    let rm = params.data_mut(layer.running_mean);
                    for (r, &m) in rm.iter_mut().zip(&stats.mean) {
                        *r = momentum * *r + one_minus * m;
                    }
                }
                {
                    let rv = params.data_mut(layer.running_var);
                    for (r, &v) in rv.iter_mut().zip(&stats.var) {
                        *r = momentum * *r + one_minus * v;
                    }
                }
                (stats.mean, stats.inv_std, true)
            }
            Mode::Eval => {
                let mean = params.data(layer.running_mean).to_vec();
                let inv_std = params
                    .data(layer.running_var)
                    .iter()
                    .map(|&v| T::one() / (v + eps).sqrt())
                    .collect();
                (mean, inv_std, false)
            }
        };
        let out = tensor::batchnorm_apply(
            &self.nodes[input.0].value,
            &mean,
            &inv_std,
            params.data(layer.scale),
            params.data(layer.shift),
        )?;
        let output = self.push_node(out);
        self.steps.push(Step::BatchNorm {
            input,
            output,
            scale: layer.scale,
            shift: layer.shift,
            mean,
            inv_std,
            train_stats,
        });
        Ok(output)
    }

    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor<T>> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let out = tensor::concat_channels(&tensors)?;
        let output = self.push_node(out);
        self.steps.push(Step::Concat { inputs: inputs.to_vec(), output });
        Ok(output)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = tensor::add(self.value(a), self.value(b))?;
        let output = self.push_node(out);
        self.steps.push(Step::Add { a, b, output });
        Ok(output)
    }

    pub fn mul_elementwise(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = tensor::mul_elementwise(self.value(a), self.value(b))?;
        let output = self.push_node(out);
        self.steps.push(Step::MulElem { a, b, output });
        Ok(output)
    }

    pub fn mul_mask(&mut self, feat: NodeId, mask: NodeId) -> Result<NodeId> {
        let out = tensor::mul_mask(self.value(feat), self.value(mask))?;
        let output = self.push_node(out);
        self.steps.push(Step::MulMask { feat, mask, output });
        Ok(output)
    }

    pub fn scale(&mut self, input: NodeId, factor: T) -> NodeId {
        let out = tensor::scale(self.value(input), factor);
        let output = self.push_node(out);
        self.steps.push(Step::Scale { input, output, factor });
        output
    }

    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let s = tensor::sum_all(self.value(input));
        let output = self.push_node(Tensor::filled(1, 1, 1, s));
        self.steps.push(Step::SumAll { input, output });
        output
    }

    /// Mean per-pixel categorical cross-entropy against a one-hot truth.
    pub fn cross_entropy(&mut self, scores: NodeId, truth: &Tensor<T>) -> Result<NodeId> {
        let loss = tensor::cross_entropy(self.value(scores), truth, T::of(SCORE_FLOOR))?;
        let output = self.push_node(Tensor::filled(1, 1, 1, loss));
        self.steps.push(Step::CrossEntropy { scores, output, truth: truth.clone() });
        Ok(output)
    }

    /// Scalar value of a 1x1x1 node.
    pub fn scalar(&self, id: NodeId) -> Result<T> {
        let v = self.value(id);
        if v.shape() != (1, 1, 1) {
            return Err(Error::ShapeMismatch(format!(
                "expected scalar node, got {:?}",
                v.shape()
            )));
        }
        Ok(v.data()[0])
    }

    fn accumulate_node_grad(&mut self, id: NodeId, delta: Tensor<T>) {
        match &mut self.nodes[id.0].grad {
            Some(g) => {
                for (gv, &dv) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gv = *gv + dv;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    /// Runs reverse-mode accumulation from a scalar node. Parameter
    /// gradients are added to whatever is already in the set, so batches can
    /// accumulate across multiple tapes before an optimizer step.
    pub fn backward(&mut self, loss: NodeId, params: &mut ParamSet<T>) -> Result<()> {
        if self.value(loss).shape() != (1, 1, 1) {
            return Err(Error::ShapeMismatch(
                "backward starts from a scalar (1x1x1) node".into(),
            ));
        }
        for n in self.nodes.iter_mut() {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::filled(1, 1, 1, T::one()));

        let steps = std::mem::take(&mut self.steps);
        for step in steps.iter().rev() {
            self.backward_step(step, params)?;
        }
        self.steps = steps;
        Ok(())
    }

    fn backward_step(&mut self, step: &Step<T>, params: &mut ParamSet<T>) -> Result<()> {
        macro_rules! grad_out {
            ($id:expr) => {
                match &self.nodes[$id.0].grad {
                    Some(g) => g.clone(),
                    None => return Ok(()),
                }
            };
        }
        match step {
            Step::Conv { input, output, kernel } => {
                let gout = grad_out!(output);
                let (gin, kgrad) =
                    tensor::conv2d_backward(&self.nodes[input.0].value, kernel.view(params), &gout)?;
                self.accumulate_node_grad(*input, gin);
                params.accumulate_grad(kernel.weights, &kgrad.weights);
                params.accumulate_grad(kernel.bias, &kgrad.bias);
            }
            Step::TConv { input, output, kernel } => {
                let gout = grad_out!(output);
                let (gin, kgrad) = tensor::transposed_conv2d_backward(
                    &self.nodes[input.0].value,
                    kernel.view(params),
                    &gout,
                )?;
                self.accumulate_node_grad(*input, gin);
                params.accumulate_grad(kernel.weights, &kgrad.weights);
                params.accumulate_grad(kernel.bias, &kgrad.bias);
            }
            Step::MaxPool { input, output, argmax } => {
                let gout = grad_out!(output);
                let gin =
                    tensor::maxpool2x_backward(self.nodes[input.0].value.shape(), argmax, &gout)?;
                self.accumulate_node_grad(*input, gin);
            }
            Step::Upsample { input, output } => {
                let gout = grad_out!(output);
                let gin = tensor::upsample_nearest2x_backward(&gout)?;
                self.accumulate_node_grad(*input, gin);
            }
            Step::Relu { input, output } => {
                let gout = grad_out!(output);
                let gin = tensor::relu_backward(&self.nodes[input.0].value, &gout)?;
                self.accumulate_node_grad(*input, gin);
            }
            Step::PRelu { input, output, slopes } => {
                let gout = grad_out!(output);
                let (gin, gslopes) =
                    tensor::prelu_backward(&self.nodes[input.0].value, params.data(*slopes), &gout)?;
                self.accumulate_node_grad(*input, gin);
                params.accumulate_grad(*slopes, &gslopes);
            }
            Step::Sigmoid { input, output } => {
                let gout = grad_out!(output);
                let gin = tensor::sigmoid_backward(&self.nodes[output.0].value, &gout)?;
                self.accumulate_node_grad(*input, gin);
            }
            Step::Softmax { input, output } => {
                let gout = grad_out!(output);
                let gin = tensor::softmax_channelwise_backward(&self.nodes[output.0].value, &gout)?;
                self.accumulate_node_grad(*input, gin);
            }
            Step::BatchNorm { input, output, scale, shift, mean, inv_std, train_stats } => {
                let gout = grad_out!(output);
                let (gin, gscale, gshift) = if *train_stats {
                    tensor::batchnorm_backward_train(
                        &self.nodes[input.0].value,
                        mean,
                        inv_std,
                        params.data(*scale),
                        &gout,
                    )?
                } else {
                    tensor::batchnorm_backward_eval(
                        &self.nodes[input.0].value,
                        mean,
                        inv_std,
                        params.data(*scale),
                        &gout,
                    )?
                };
                self.accumulate_node_grad(*input, gin);
                params.accumulate_grad(*scale, &gscale);
                params.accumulate_grad(*shift, &gshift);
            }
            Step::Concat { inputs, output } => {
                let gout = grad_out!(output);
                let channels: Vec<usize> =
                    inputs.iter().map(|id| self.nodes[id.0].value.channels()).collect();
                let parts = tensor::concat_channels_backward(&channels, &gout)?;
                for (id, part) in inputs.iter().zip(parts) {
                    self.accumulate_node_grad(*id, part);
                }
            }
            Step::Add { a, b, output } => {
                let gout = grad_out!(output);
                self.accumulate_node_grad(*a, gout.clone());
                self.accumulate_node_grad(*b, gout);
            }
            Step::MulElem { a, b, output } => {
                let gout = grad_out!(output);
                let ga = tensor::mul_elementwise(&gout, &self.nodes[b.0].value)?;
                let gb = tensor::mul_elementwise(&gout, &self.nodes[a.0].value)?;
                self.accumulate_node_grad(*a, ga);
                self.accumulate_node_grad(*b, gb);
            }
            Step::MulMask { feat, mask, output } => {
                let gout = grad_out!(output);
                let gfeat = tensor::mul_mask(&gout, &self.nodes[mask.0].value)?;
                // Mask gradient: sum over channels of gout * feat.
                let f = &self.nodes[feat.0].value;
                let (h, w, c) = f.shape();
                let mut gmask = Tensor::zeros(h, w, 1);
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = T::zero();
                        for ch in 0..c {
                            acc = acc + gout.get(y, x, ch) * f.get(y, x, ch);
                        }
                        gmask.set(y, x, 0, acc);
                    }
                }
                self.accumulate_node_grad(*feat, gfeat);
                self.accumulate_node_grad(*mask, gmask);
            }
            Step::Scale { input, output, factor } => {
                let gout = grad_out!(output);
                self.accumulate_node_grad(*input, tensor::scale(&gout, *factor));
            }
            Step::SumAll { input, output } => {
                let gout = grad_out!(output);
                let g = gout.data()[0];
                let v = &self.nodes[input.0].value;
                self.accumulate_node_grad(
                    *input,
                    Tensor::filled(v.height(), v.width(), v.channels(), g),
                );
            }
            Step::CrossEntropy { scores, output, truth } => {
                let gout = grad_out!(output);
                let gin = tensor::cross_entropy_backward(
                    &self.nodes[scores.0].value,
                    truth,
                    T::of(SCORE_FLOOR),
                    gout.data()[0],
                )?;
                self.accumulate_node_grad(*scores, gin);
            }
        }
        Ok(())
    }
}

/// Settings for [`gradient_check`].
#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Half-width of the central difference.
    pub step: f64,
    /// Relative error below which a coordinate counts as matching.
    pub tolerance: f64,
    /// Hard ceiling: any coordinate above this fails the whole check.
    pub hard_max: f64,
    /// Fraction of coordinates that must be within `tolerance`.
    pub required_frac: f64,
    /// Largest number of coordinates probed per parameter vector; larger
    /// vectors are subsampled with an even deterministic stride.
    pub max_coords_per_param: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            hard_max: 1e-2,
            required_frac: 0.99,
            max_coords_per_param: 64,
        }
    }
}

/// Per-parameter outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub within_tolerance: usize,
    pub max_rel_err: f64,
}

/// Overall outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub coords_checked: usize,
    pub within_tolerance: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn frac_within_tolerance(&self) -> f64 {
        if self.coords_checked == 0 {
            1.0
        } else {
            self.within_tolerance as f64 / self.coords_checked as f64
        }
    }
}

/// Compares analytic gradients with central finite differences.
///
/// `loss_fn` must build the forward computation on the provided tape and
/// return the scalar loss node; it is called repeatedly with perturbed
/// parameters, so it must be deterministic given the parameter values.
/// Runs at `f64` throughout.
pub fn gradient_check<F>(
    params: &mut ParamSet<f64>,
    mut loss_fn: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &mut ParamSet<f64>) -> Result<NodeId>,
{
    // Analytic pass.
    params.zero_grads();
    let mut tape = Tape::new(Mode::Train);
    let loss_node = loss_fn(&mut tape, params)?;
    tape.backward(loss_node, params)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|(_, p)| p.grad.clone()).collect();

    let mut eval_loss = |params: &mut ParamSet<f64>| -> Result<f64> {
        let mut tape = Tape::new(Mode::Train);
        let node = loss_fn(&mut tape, params)?;
        Ok(tape.scalar(node)?)
    };

    let ids: Vec<ParamId> = params.ids().collect();
    let mut per_param = Vec::new();
    let mut coords_checked = 0usize;
    let mut within = 0usize;
    let mut max_rel: f64 = 0.0;
    for (param_index, id) in ids.into_iter().enumerate() {
        if !params.is_trainable(id) {
            continue;
        }
        let len = params.data(id).len();
        let n_probe = len.min(cfg.max_coords_per_param);
        let mut check = ParamCheck {
            name: params.name(id).to_string(),
            coords_checked: 0,
            within_tolerance: 0,
            max_rel_err: 0.0,
        };
        for k in 0..n_probe {
            // Even deterministic stride over the coordinates.
            let i = if n_probe == len { k } else { k * len / n_probe };
            let old = params.data(id)[i];
            params.data_mut(id)[i] = old + cfg.step;
            let lp = eval_loss(params)?;
            params.data_mut(id)[i] = old - cfg.step;
            let lm = eval_loss(params)?;
            params.data_mut(id)[i] = old;
            let numeric = (lp - lm) / (2.0 * cfg.step);
            let a = analytic[param_index][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            check.coords_checked += 1;
            if rel <= cfg.tolerance {
                check.within_tolerance += 1;
            }
            check.max_rel_err = check.max_rel_err.max(rel);
        }
        coords_checked += check.coords_checked;
        within += check.within_tolerance;
        max_rel = max_rel.max(check.max_rel_err);
        per_param.push(check);
    }

    let frac = if coords_checked == 0 { 1.0 } else { within as f64 / coords_checked as f64 };
    Ok(GradCheckReport {
        per_param,
        coords_checked,
        within_tolerance: within,
        max_rel_err: max_rel,
        pass: frac >= cfg.required_frac && max_rel <= cfg.hard_max,
    })
}
