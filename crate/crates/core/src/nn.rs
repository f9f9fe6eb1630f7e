//! Layer stacks, their parameters, and the forward pass.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientContext, Gradients, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::rng;
use crate::scalar::Real;
use crate::tensor::{pool_dims, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Layer {
    Conv2d {
        filters: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    Maxpool2x2,
    Flatten,
    /// Inputs with more than one feature axis are flattened first.
    Dense { out_features: usize },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub layers: Vec<Layer>,
}

impl NetworkSpec {
    /// Two 5×5 convolutions (32 and 64 filters, padding 2) with ReLU and 2×2
    /// pooling, a 1024-unit hidden layer and 10 outputs.
    pub fn mnist_cnn() -> Self {
        Self {
            layers: vec![
                Layer::Conv2d {
                    filters: 32,
                    kernel: 5,
                    stride: 1,
                    padding: 2,
                },
                Layer::Relu,
                Layer::Maxpool2x2,
                Layer::Conv2d {
                    filters: 64,
                    kernel: 5,
                    stride: 1,
                    padding: 2,
                },
                Layer::Relu,
                Layer::Maxpool2x2,
                Layer::Flatten,
                Layer::Dense { out_features: 1024 },
                Layer::Relu,
                Layer::Dense { out_features: 10 },
            ],
        }
    }

    /// `dense(hidden) → relu → dense(classes)`. The input width comes from
    /// the input shape given to [`Parameters::build`].
    pub fn small_mlp(hidden: usize, classes: usize) -> Self {
        Self {
            layers: vec![
                Layer::Dense {
                    out_features: hidden,
                },
                Layer::Relu,
                Layer::Dense {
                    out_features: classes,
                },
            ],
        }
    }

    /// Per-sample output shape of every layer, validating that they chain.
    pub fn layer_shapes(&self, input_shape: &[usize]) -> Result<Vec<Vec<usize>>> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::InvalidShape {
                shape: input_shape.to_vec(),
                reason: "input extents must be positive".into(),
            });
        }
        let mut shape = input_shape.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match *layer {
                Layer::Conv2d {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    if shape.len() != 3 {
                        return Err(layer_error(i, &shape, "conv2d needs [C, H, W] input"));
                    }
                    if filters == 0 || kernel == 0 || stride == 0 {
                        return Err(layer_error(i, &shape, "conv2d extents must be positive"));
                    }
                    let (h, w) = (shape[1] + 2 * padding, shape[2] + 2 * padding);
                    if kernel > h || kernel > w {
                        return Err(layer_error(i, &shape, "kernel larger than padded input"));
                    }
                    vec![filters, (h - kernel) / stride + 1, (w - kernel) / stride + 1]
                }
                Layer::Relu => shape,
                Layer::Maxpool2x2 => {
                    let n = shape.len();
                    if n < 2 || shape[n - 2] < 2 || shape[n - 1] < 2 {
                        return Err(layer_error(i, &shape, "maxpool2x2 needs H, W ≥ 2"));
                    }
                    let mut s = shape;
                    s[n - 2] /= 2;
                    s[n - 1] /= 2;
                    s
                }
                Layer::Flatten => vec![shape.iter().product()],
                Layer::Dense { out_features } => {
                    if out_features == 0 {
                        return Err(layer_error(i, &shape, "dense needs out_features ≥ 1"));
                    }
                    vec![out_features]
                }
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn output_shape(&self, input_shape: &[usize]) -> Result<Vec<usize>> {
        Ok(self
            .layer_shapes(input_shape)?
            .pop()
            .unwrap_or_else(|| input_shape.to_vec()))
    }

    /// `(weights shape, bias shape)` for each parameterised layer.
    fn param_shapes(&self, input_shape: &[usize]) -> Result<Vec<(usize, Vec<usize>, Vec<usize>)>> {
        let shapes = self.layer_shapes(input_shape)?;
        let mut prev = input_shape.to_vec();
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Conv2d {
                    filters, kernel, ..
                } => out.push((i, vec![filters, prev[0], kernel, kernel], vec![filters])),
                Layer::Dense { out_features } => {
                    let fan_in = prev.iter().product();
                    out.push((i, vec![fan_in, out_features], vec![out_features]))
                }
                _ => {}
            }
            prev = shapes[i].clone();
        }
        Ok(out)
    }

    pub fn parameter_count(&self, input_shape: &[usize]) -> Result<usize> {
        Ok(self
            .param_shapes(input_shape)?
            .iter()
            .map(|(_, w, b)| w.iter().product::<usize>() + b.iter().product::<usize>())
            .sum())
    }
}

fn layer_error(index: usize, shape: &[usize], reason: &str) -> Error {
    Error::InvalidShape {
        shape: shape.to_vec(),
        reason: format!("layer {index}: {reason}"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<F: Real> {
    pub name: String,
    /// Index into [`NetworkSpec::layers`].
    pub layer: usize,
    pub weights: Tensor<F>,
    pub bias: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<F: Real> {
    pub entries: Vec<ParamEntry<F>>,
    pub init_seed: u64,
}

impl<F: Real> Parameters<F> {
    /// Weights uniform in ±√(6/fan_in) (variance 2/fan_in), zero biases.
    /// Each layer draws from its own stream so adding a layer does not
    /// change the others. Values are sampled in f64 and rounded, so both
    /// precisions start from the same point.
    pub fn build(spec: &NetworkSpec, input_shape: &[usize], seed: u64) -> Result<Self> {
        let mut entries = Vec::new();
        for (layer, wshape, bshape) in spec.param_shapes(input_shape)? {
            let fan_in: usize = match wshape.len() {
                2 => wshape[0],
                _ => wshape[1..].iter().product(),
            };
            let limit = (6.0 / fan_in as f64).sqrt();
            let mut r: ChaCha8Rng = rng::stream(&[seed, layer as u64]);
            let n: usize = wshape.iter().product();
            let w: Vec<F> = (0..n).map(|_| F::of(r.gen_range(-limit..limit))).collect();
            entries.push(ParamEntry {
                name: format!("layer{layer}"),
                layer,
                weights: Tensor::from_parts(wshape, w),
                bias: Tensor::zeros(bshape),
            });
        }
        Ok(Self {
            entries,
            init_seed: seed,
        })
    }

    pub fn count(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.weights.len() + e.bias.len())
            .sum()
    }

    pub fn cast<G: Real>(&self) -> Parameters<G> {
        Parameters {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    layer: e.layer,
                    weights: e.weights.cast(),
                    bias: e.bias.cast(),
                })
                .collect(),
            init_seed: self.init_seed,
        }
    }

    /// All tensors in a fixed order: weights then bias of each entry.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<F>> {
        self.entries.iter().flat_map(|e| [&e.weights, &e.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<F>> {
        self.entries
            .iter_mut()
            .flat_map(|e| [&mut e.weights, &mut e.bias])
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    /// Checks that these parameters fit `spec` on `input_shape`.
    pub fn check_against(&self, spec: &NetworkSpec, input_shape: &[usize]) -> Result<()> {
        let expected = spec.param_shapes(input_shape)?;
        if expected.len() != self.entries.len() {
            return Err(Error::ModelMismatch(format!(
                "spec has {} parameterised layers, parameters have {}",
                expected.len(),
                self.entries.len()
            )));
        }
        for ((layer, w, b), e) in expected.iter().zip(&self.entries) {
            if *layer != e.layer || w.as_slice() != e.weights.shape() || b.as_slice() != e.bias.shape() {
                return Err(Error::ModelMismatch(format!(
                    "layer {layer}: expected weights {w:?} bias {b:?}, found layer {} weights {:?} bias {:?}",
                    e.layer,
                    e.weights.shape(),
                    e.bias.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Gradient with respect to each parameter tensor, aligned with
/// [`Parameters::tensors`].
pub type ParamGrads<F> = Vec<Tensor<F>>;

/// A network specification bound to its input shape and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F: Real> {
    pub spec: NetworkSpec,
    /// Per-sample input shape (no batch axis).
    pub input_shape: Vec<usize>,
    pub params: Parameters<F>,
}

/// Handles produced by [`Model::forward_tracked`].
pub struct Tracked {
    pub logits: Var,
    /// `(weights, bias)` per entry, present when parameters were tracked.
    pub params: Vec<(Var, Var)>,
}

impl<F: Real> Model<F> {
    pub fn new(spec: NetworkSpec, input_shape: Vec<usize>, params: Parameters<F>) -> Result<Self> {
        params.check_against(&spec, &input_shape)?;
        Ok(Self {
            spec,
            input_shape,
            params,
        })
    }

    pub fn build(spec: NetworkSpec, input_shape: Vec<usize>, seed: u64) -> Result<Self> {
        let params = Parameters::build(&spec, &input_shape, seed)?;
        Ok(Self {
            spec,
            input_shape,
            params,
        })
    }

    pub fn classes(&self) -> Result<usize> {
        Ok(self.spec.output_shape(&self.input_shape)?.iter().product())
    }

    fn check_input(&self, shape: &[usize]) -> Result<usize> {
        let per: usize = self.input_shape.iter().product();
        let ok = !shape.is_empty()
            && (shape[1..] == self.input_shape[..] || shape[1..].iter().product::<usize>() == per);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: shape.to_vec(),
                right: self.input_shape.clone(),
            });
        }
        Ok(shape[0])
    }

    fn batch_shape(&self, n: usize) -> Vec<usize> {
        let mut s = vec![n];
        s.extend_from_slice(&self.input_shape);
        s
    }

    /// Logits for a batch `[N, ...input_shape]`, without recording a graph.
    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.forward_impl(x, None)
    }

    /// Logits plus the linear piece of the network `x` falls in: one entry
    /// per ReLU unit (active or not) and one per pooling window (the winning
    /// input). Inputs or parameters that give equal regions are related by
    /// the same affine map, which is what finite-difference checks need.
    pub fn forward_region(&self, x: &Tensor<F>) -> Result<(Tensor<F>, Vec<usize>)> {
        let mut region = Vec::new();
        let logits = self.forward_impl(x, Some(&mut region))?;
        Ok((logits, region))
    }

    fn forward_impl(&self, x: &Tensor<F>, mut region: Option<&mut Vec<usize>>) -> Result<Tensor<F>> {
        let n = self.check_input(x.shape())?;
        let mut h = x.reshape(self.batch_shape(n))?;
        let mut entries = self.params.entries.iter();
        for layer in &self.spec.layers {
            h = match *layer {
                Layer::Conv2d {
                    stride, padding, ..
                } => {
                    let e = entries.next().expect("entry per conv layer");
                    h.conv2d(&e.weights, stride, padding)?
                        .add_channel_bias(&e.bias)?
                }
                Layer::Relu => {
                    if let Some(r) = region.as_deref_mut() {
                        r.extend(h.data().iter().map(|&v| usize::from(v > F::zero())));
                    }
                    h.relu()
                }
                Layer::Maxpool2x2 => {
                    if let Some(r) = region.as_deref_mut() {
                        let (planes, hh, ww) = pool_dims(h.shape())?;
                        r.extend(kernels::maxpool2x2_forward(h.data(), planes, hh, ww).1);
                    }
                    h.maxpool2x2()?
                }
                Layer::Flatten => flatten(&h)?,
                Layer::Dense { .. } => {
                    let e = entries.next().expect("entry per dense layer");
                    flatten(&h)?.matmul(&e.weights)?.add_bias(&e.bias)?
                }
            };
        }
        Ok(h)
    }

    /// Records the forward pass of `x` in `ctx`. Parameters are registered as
    /// differentiable inputs when `track_params`, as constants otherwise.
    pub fn forward_tracked<'a>(
        &'a self,
        ctx: &mut GradientContext<'a, F>,
        x: Var,
        track_params: bool,
    ) -> Result<Tracked> {
        let n = self.check_input(ctx.value(x).shape())?;
        let mut h = ctx.reshape(x, self.batch_shape(n))?;
        let mut vars = Vec::with_capacity(self.params.entries.len());
        let mut entries = self.params.entries.iter();
        let mut bind = |ctx: &mut GradientContext<'a, F>, e: &'a ParamEntry<F>| {
            let pair = if track_params {
                (ctx.input(&e.weights), ctx.input(&e.bias))
            } else {
                (ctx.constant(&e.weights), ctx.constant(&e.bias))
            };
            vars.push(pair);
            pair
        };
        for layer in &self.spec.layers {
            h = match *layer {
                Layer::Conv2d {
                    stride, padding, ..
                } => {
                    let (w, b) = bind(ctx, entries.next().expect("entry per conv layer"));
                    let y = ctx.conv2d(h, w, stride, padding)?;
                    ctx.add_channel_bias(y, b)?
                }
                Layer::Relu => ctx.relu(h),
                Layer::Maxpool2x2 => ctx.maxpool2x2(h)?,
                Layer::Flatten => flatten_var(ctx, h)?,
                Layer::Dense { .. } => {
                    let (w, b) = bind(ctx, entries.next().expect("entry per dense layer"));
                    let f = flatten_var(ctx, h)?;
                    let y = ctx.matmul(f, w)?;
                    ctx.add_bias(y, b)?
                }
            };
        }
        Ok(Tracked {
            logits: h,
            params: if track_params { vars } else { Vec::new() },
        })
    }

    /// Pulls the parameter gradients out of `grads` in [`Parameters::tensors`]
    /// order. Parameters the loss does not reach get zero gradients.
    pub fn collect_param_grads(&self, tracked: &Tracked, grads: &mut Gradients<F>) -> ParamGrads<F> {
        let mut out = Vec::with_capacity(2 * tracked.params.len());
        for (e, &(w, b)) in self.params.entries.iter().zip(&tracked.params) {
            out.push(
                grads
                    .take(w)
                    .unwrap_or_else(|| Tensor::zeros(e.weights.shape().to_vec())),
            );
            out.push(
                grads
                    .take(b)
                    .unwrap_or_else(|| Tensor::zeros(e.bias.shape().to_vec())),
            );
        }
        out
    }
}

fn flatten<F: Real>(h: &Tensor<F>) -> Result<Tensor<F>> {
    if h.ndim() == 2 {
        return Ok(h.clone());
    }
    let n = h.shape()[0];
    h.reshape(vec![n, h.len() / n])
}

fn flatten_var<F: Real>(ctx: &mut GradientContext<'_, F>, h: Var) -> Result<Var> {
    let shape = ctx.value(h).shape();
    if shape.len() == 2 {
        return Ok(h);
    }
    let n = shape[0];
    let rest = ctx.value(h).len() / n;
    ctx.reshape(h, vec![n, rest])
}
