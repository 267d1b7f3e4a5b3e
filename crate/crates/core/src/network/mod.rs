//! Sequential networks: assembly, parameter registry, forward/backward, and
//! the layer-freezing protocol used for transfer.
//!
//! Parametrized layers are grouped into *freeze units*: every conv or dense
//! layer opens a unit and a following batch norm joins it. `N` is the number
//! of units. The softmax classifier is never part of a unit and is never
//! frozen. Freezing always keeps the trainable units a suffix of the network.

mod checkpoint;
mod obstination;
mod spec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::kernels::{self, BatchNormCache, DropoutMask, KernelContext, Mode, PoolIndices, RunningStats};
use crate::tensor::{Scalar, Tensor, TensorError};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint,
    CheckpointError, RngState,
};
pub use obstination::{apply_obstination, ObstinationPlan};
pub use spec::{ArchId, LayerSpec, NetworkSpec};

pub(crate) use spec::hex_string;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("{layer}: kernel {kernel} larger than {height}x{width} activation")]
    SpatialUnderflow {
        layer: String,
        kernel: usize,
        height: usize,
        width: usize,
    },
    #[error("layer {layer}: {source}")]
    Layer {
        layer: String,
        #[source]
        source: TensorError,
    },
    #[error("input batch shape {actual:?} does not match network input [B, {expected:?}]")]
    InputShape { expected: [usize; 3], actual: Vec<usize> },
    #[error("degrees of freedom {k} out of range 0..={n}")]
    DegreesOfFreedom { k: usize, n: usize },
    #[error("{0}")]
    Freeze(String),
}

/// A named parameter: layer index plus parameter name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub layer: usize,
    pub name: &'static str,
}

/// A layer with its parameters and buffers.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer<S> {
    Conv {
        kernels: Tensor<S>,
        bias: Tensor<S>,
    },
    Maxpool,
    Relu,
    Batchnorm {
        gamma: Tensor<S>,
        beta: Tensor<S>,
        running: RunningStats<S>,
    },
    Dropout {
        keep_prob: f64,
    },
    Dense {
        weights: Tensor<S>,
        bias: Tensor<S>,
    },
    Classifier {
        weights: Tensor<S>,
        bias: Tensor<S>,
    },
}

impl<S: Scalar> Layer<S> {
    pub fn params(&self) -> Vec<(&'static str, &Tensor<S>)> {
        match self {
            Layer::Conv { kernels, bias } => vec![("kernels", kernels), ("bias", bias)],
            Layer::Batchnorm { gamma, beta, .. } => vec![("gamma", gamma), ("beta", beta)],
            Layer::Dense { weights, bias } | Layer::Classifier { weights, bias } => {
                vec![("weights", weights), ("bias", bias)]
            }
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<S>)> {
        match self {
            Layer::Conv { kernels, bias } => vec![("kernels", kernels), ("bias", bias)],
            Layer::Batchnorm { gamma, beta, .. } => vec![("gamma", gamma), ("beta", beta)],
            Layer::Dense { weights, bias } | Layer::Classifier { weights, bias } => {
                vec![("weights", weights), ("bias", bias)]
            }
            _ => Vec::new(),
        }
    }
}

/// Glorot-uniform weights over `±sqrt(6 / (fan_in + fan_out))`.
fn glorot<S: Scalar>(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, -limit, limit, rng)
}

fn init_layer<S: Scalar>(spec: &LayerSpec, in_shape: &[usize], num_classes: usize, rng: &mut ChaCha8Rng) -> Layer<S> {
    let in_features: usize = in_shape.iter().product();
    match *spec {
        LayerSpec::Conv { kernels, size } => {
            let c = in_shape[0];
            Layer::Conv {
                kernels: glorot(
                    vec![kernels, c, size, size],
                    c * size * size,
                    kernels * size * size,
                    rng,
                ),
                bias: Tensor::zeros(vec![kernels]),
            }
        }
        LayerSpec::Maxpool => Layer::Maxpool,
        LayerSpec::Relu => Layer::Relu,
        LayerSpec::Batchnorm => Layer::Batchnorm {
            gamma: Tensor::ones(vec![in_shape[0]]),
            beta: Tensor::zeros(vec![in_shape[0]]),
            running: RunningStats::new(in_shape[0]),
        },
        LayerSpec::Dropout { keep_prob } => Layer::Dropout { keep_prob },
        LayerSpec::Dense { width } => Layer::Dense {
            weights: glorot(vec![in_features, width], in_features, width, rng),
            bias: Tensor::zeros(vec![width]),
        },
        LayerSpec::SoftmaxClassifier => Layer::Classifier {
            weights: glorot(vec![in_features, num_classes], in_features, num_classes, rng),
            bias: Tensor::zeros(vec![num_classes]),
        },
    }
}

/// Cached forward values a layer needs for its backward pass.
#[derive(Debug)]
enum LayerCache<S> {
    Conv { input: Tensor<S> },
    Pool(PoolIndices),
    Relu { input: Tensor<S> },
    Batchnorm(BatchNormCache<S>),
    Dropout(DropoutMask<S>),
    Affine { input: Tensor<S>, input_shape: Vec<usize> },
}

/// Forward record needed by [`Network::backward`].
#[derive(Debug)]
pub struct Trace<S> {
    /// Index of the first layer with a cache; earlier layers are frozen.
    start: usize,
    caches: Vec<LayerCache<S>>,
}

/// Parameter gradients of the trainable layers.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    pub entries: Vec<(ParamId, Tensor<S>)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.entries.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }
}

/// A sequential network with per-layer freeze flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<S> {
    spec: NetworkSpec,
    layers: Vec<Layer<S>>,
    frozen: Vec<bool>,
    units: Vec<Option<usize>>,
    names: Vec<String>,
}

impl<S: Scalar> Network<S> {
    /// Builds a network with every parameter drawn from `seed`. All layers
    /// start unfrozen.
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self, NetworkError> {
        let shapes = spec.output_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_shape = spec.input_shape.to_vec();
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (ls, out_shape) in spec.layers.iter().zip(&shapes) {
            layers.push(init_layer(ls, &in_shape, spec.num_classes, &mut rng));
            in_shape = out_shape.clone();
        }
        Ok(Network {
            frozen: vec![false; layers.len()],
            units: spec.units(),
            names: spec.layer_names(),
            layers,
            spec,
        })
    }

    pub(crate) fn from_parts(
        spec: NetworkSpec,
        layers: Vec<Layer<S>>,
        frozen: Vec<bool>,
    ) -> Result<Self, NetworkError> {
        let net = Network {
            units: spec.units(),
            names: spec.layer_names(),
            spec,
            layers,
            frozen,
        };
        net.check_freeze_invariants()?;
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub fn layer_name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// `N`: number of freezable units.
    pub fn freezable_count(&self) -> usize {
        self.spec.freezable_count()
    }

    pub fn freeze_mask(&self) -> &[bool] {
        &self.frozen
    }

    pub fn is_frozen(&self, layer: usize) -> bool {
        self.frozen[layer]
    }

    pub fn classifier_index(&self) -> usize {
        self.layers.len() - 1
    }

    /// Unit index of each layer (`None` for the classifier).
    pub fn units(&self) -> &[Option<usize>] {
        &self.units
    }

    /// Freezes units `0..frozen_units` and unfreezes the rest.
    pub fn set_frozen_prefix(&mut self, frozen_units: usize) {
        for (f, unit) in self.frozen.iter_mut().zip(&self.units) {
            *f = matches!(unit, Some(u) if *u < frozen_units);
        }
    }

    /// Checks that the classifier is trainable and that no trainable
    /// parametrized layer feeds a frozen one.
    pub fn check_freeze_invariants(&self) -> Result<(), NetworkError> {
        if self.frozen.len() != self.layers.len() {
            return Err(NetworkError::Freeze(
                "freeze mask length differs from layer count".into(),
            ));
        }
        if self.frozen[self.classifier_index()] {
            return Err(NetworkError::Freeze("the classifier can never be frozen".into()));
        }
        let mut seen_trainable = false;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.params().is_empty() {
                continue;
            }
            if !self.frozen[i] {
                seen_trainable = true;
            } else if seen_trainable {
                return Err(NetworkError::Freeze(format!(
                    "{} is frozen but is fed by a trainable layer",
                    self.names[i]
                )));
            }
        }
        Ok(())
    }

    /// Every parameter in registry order.
    pub fn params(&self) -> Vec<(ParamId, &Tensor<S>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(layer, l)| {
                l.params()
                    .into_iter()
                    .map(move |(name, t)| (ParamId { layer, name }, t))
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<(ParamId, &mut Tensor<S>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(layer, l)| {
                l.params_mut()
                    .into_iter()
                    .map(move |(name, t)| (ParamId { layer, name }, t))
            })
            .collect()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.layers
            .get(id.layer)?
            .params()
            .into_iter()
            .find(|(n, _)| *n == id.name)
            .map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer<S>] {
        &mut self.layers
    }

    pub(crate) fn spec_mut(&mut self) -> &mut NetworkSpec {
        &mut self.spec
    }

    /// Index of the first trainable parametrized layer, if any.
    fn first_trainable(&self) -> Option<usize> {
        self.layers
            .iter()
            .enumerate()
            .find(|(i, l)| !l.params().is_empty() && !self.frozen[*i])
            .map(|(i, _)| i)
    }

    fn check_input(&self, batch: &Tensor<S>) -> Result<(), NetworkError> {
        let ok = batch.ndim() == 4 && batch.shape()[1..] == self.spec.input_shape;
        if ok {
            Ok(())
        } else {
            Err(NetworkError::InputShape {
                expected: self.spec.input_shape,
                actual: batch.shape().to_vec(),
            })
        }
    }

    fn wrap(&self, i: usize) -> impl Fn(TensorError) -> NetworkError + '_ {
        move |source| NetworkError::Layer {
            layer: self.names[i].clone(),
            source,
        }
    }

    /// Logits for a batch in inference mode.
    pub fn predict(&self, batch: &Tensor<S>) -> Result<Tensor<S>, NetworkError> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let wrap = self.wrap(i);
            x = match layer {
                Layer::Conv { kernels, bias } => kernels::conv2d(&x, kernels, bias).map_err(wrap)?,
                Layer::Maxpool => kernels::maxpool2(&x).map_err(wrap)?.0,
                Layer::Relu => kernels::relu(&x),
                Layer::Batchnorm { gamma, beta, running } => {
                    kernels::batchnorm_inference(&x, gamma, beta, running).map_err(wrap)?.0
                }
                Layer::Dropout { .. } => x,
                Layer::Dense { weights, bias } | Layer::Classifier { weights, bias } => {
                    kernels::dense(&x.flatten_batch(), weights, bias).map_err(wrap)?
                }
            };
        }
        Ok(x)
    }

    /// Forward pass under `ctx.mode`, returning logits. Train mode updates
    /// batch-norm running statistics of unfrozen layers and draws dropout
    /// masks from `ctx.rng`.
    pub fn forward(&mut self, batch: &Tensor<S>, ctx: &mut KernelContext) -> Result<Tensor<S>, NetworkError> {
        match ctx.mode {
            Mode::Inference => self.predict(batch),
            Mode::Train => Ok(self.forward_train(batch, ctx)?.0),
        }
    }

    /// Train-mode forward pass that also records what [`Network::backward`]
    /// needs. Frozen layers run as fixed transformations: their batch norms
    /// use the stored running statistics and nothing is cached for them.
    pub fn forward_train(
        &mut self,
        batch: &Tensor<S>,
        ctx: &mut KernelContext,
    ) -> Result<(Tensor<S>, Trace<S>), NetworkError> {
        self.check_input(batch)?;
        let start = self.first_trainable().unwrap_or(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len() - start);
        let mut x = batch.clone();
        for i in 0..self.layers.len() {
            let record = i >= start;
            let frozen = self.frozen[i];
            let name = self.names[i].clone();
            let wrap = |source| NetworkError::Layer {
                layer: name.clone(),
                source,
            };
            let (next, cache) = match &mut self.layers[i] {
                Layer::Conv { kernels, bias } => {
                    let out = kernels::conv2d(&x, kernels, bias).map_err(wrap)?;
                    (out, record.then_some(LayerCache::Conv { input: x }))
                }
                Layer::Maxpool => {
                    let (out, idx) = kernels::maxpool2(&x).map_err(wrap)?;
                    (out, record.then_some(LayerCache::Pool(idx)))
                }
                Layer::Relu => {
                    let out = kernels::relu(&x);
                    (out, record.then_some(LayerCache::Relu { input: x }))
                }
                Layer::Batchnorm { gamma, beta, running } => {
                    let (out, cache) = if frozen {
                        kernels::batchnorm_inference(&x, gamma, beta, running).map_err(wrap)?
                    } else {
                        kernels::batchnorm(&x, gamma, beta, running, ctx).map_err(wrap)?
                    };
                    (out, record.then_some(LayerCache::Batchnorm(cache)))
                }
                Layer::Dropout { keep_prob } => {
                    let (out, mask) = kernels::dropout(&x, *keep_prob, ctx).map_err(wrap)?;
                    (out, record.then_some(LayerCache::Dropout(mask)))
                }
                Layer::Dense { weights, bias } | Layer::Classifier { weights, bias } => {
                    let input_shape = x.shape().to_vec();
                    let flat = x.flatten_batch();
                    let out = kernels::dense(&flat, weights, bias).map_err(wrap)?;
                    (
                        out,
                        record.then_some(LayerCache::Affine {
                            input: flat,
                            input_shape,
                        }),
                    )
                }
            };
            if let Some(c) = cache {
                caches.push(c);
            }
            x = next;
        }
        Ok((x, Trace { start, caches }))
    }

    /// Backpropagates `grad_logits` through the trainable suffix and returns
    /// gradients for every unfrozen parameter.
    pub fn backward(&self, trace: &Trace<S>, grad_logits: &Tensor<S>) -> Result<Gradients<S>, NetworkError> {
        let mut entries = Vec::new();
        let mut g = grad_logits.clone();
        for i in (trace.start..self.layers.len()).rev() {
            let cache = &trace.caches[i - trace.start];
            let want_input = i > trace.start;
            let wrap = self.wrap(i);
            let trainable = !self.frozen[i];
            g = match (&self.layers[i], cache) {
                (Layer::Conv { kernels, bias }, LayerCache::Conv { input }) => {
                    let gr = kernels::conv2d_backward(input, kernels, bias, &g, want_input).map_err(wrap)?;
                    if trainable {
                        entries.push((
                            ParamId {
                                layer: i,
                                name: "kernels",
                            },
                            gr.kernels,
                        ));
                        entries.push((ParamId { layer: i, name: "bias" }, gr.bias));
                    }
                    match gr.input {
                        Some(gi) => gi,
                        None => break,
                    }
                }
                (Layer::Maxpool, LayerCache::Pool(idx)) => kernels::maxpool2_backward(idx, &g).map_err(wrap)?,
                (Layer::Relu, LayerCache::Relu { input }) => kernels::relu_backward(input, &g).map_err(wrap)?,
                (Layer::Batchnorm { gamma, .. }, LayerCache::Batchnorm(c)) => {
                    let gr = kernels::batchnorm_backward(c, gamma, &g).map_err(wrap)?;
                    if trainable {
                        entries.push((
                            ParamId {
                                layer: i,
                                name: "gamma",
                            },
                            gr.gamma,
                        ));
                        entries.push((ParamId { layer: i, name: "beta" }, gr.beta));
                    }
                    gr.input
                }
                (Layer::Dropout { .. }, LayerCache::Dropout(mask)) => {
                    kernels::apply_dropout_mask(&g, mask).map_err(wrap)?
                }
                (
                    Layer::Dense { weights, .. } | Layer::Classifier { weights, .. },
                    LayerCache::Affine { input, input_shape },
                ) => {
                    let gr = kernels::dense_backward(input, weights, &g, want_input).map_err(&wrap)?;
                    if trainable {
                        entries.push((
                            ParamId {
                                layer: i,
                                name: "weights",
                            },
                            gr.weights,
                        ));
                        entries.push((ParamId { layer: i, name: "bias" }, gr.bias));
                    }
                    match gr.input {
                        Some(gi) => gi.reshape(input_shape.clone()).map_err(wrap)?,
                        None => break,
                    }
                }
                _ => unreachable!("trace does not match layer {}", self.names[i]),
            };
        }
        entries.reverse();
        Ok(Gradients { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn char_net(classes: usize, seed: u64) -> Network<f64> {
        Network::build(NetworkSpec::preset(ArchId::Char3conv, classes, [1, 28, 28]), seed).unwrap()
    }

    #[test]
    fn char3conv_param_counts() {
        // Hand propagation: 28 -conv5-> 24 -conv5-> 20 -pool-> 10 -conv5-> 6 -pool-> 3, f = 3*3.
        let net = char_net(10, 1);
        let counts: Vec<usize> = net
            .layers()
            .iter()
            .map(|l| l.params().iter().map(|(_, t)| t.len()).sum())
            .filter(|&c| c > 0)
            .collect();
        let f = 3 * 3;
        assert_eq!(
            counts,
            vec![20 * 25 + 20, 20 * (20 * 25) + 20, 50 * (20 * 25) + 50, 50 * f * 10 + 10]
        );
    }

    #[test]
    fn build_is_deterministic() {
        assert_eq!(char_net(10, 1), char_net(10, 1));
        assert_ne!(char_net(10, 1), char_net(10, 2));
    }

    #[test]
    fn only_classifier_depends_on_class_count() {
        let a = char_net(3, 1);
        let b = char_net(10, 1);
        for ((ia, ta), (_, tb)) in a.params().into_iter().zip(b.params()) {
            if ia.layer == a.classifier_index() {
                assert_ne!(ta.shape(), tb.shape());
            } else {
                assert_eq!(ta.shape(), tb.shape());
            }
        }
    }

    #[test]
    fn logits_shape_and_inference_determinism() {
        let mut net = char_net(7, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = Tensor::uniform(vec![5, 1, 28, 28], 0.0, 1.0, &mut rng);
        let a = net.predict(&batch).unwrap();
        assert_eq!(a.shape(), &[5, 7]);
        let b = net.forward(&batch, &mut KernelContext::inference()).unwrap();
        assert!(a.bitwise_eq(&b));
        let t1 = net.forward(&batch, &mut KernelContext::train(11)).unwrap();
        let t2 = net.forward(&batch, &mut KernelContext::train(11)).unwrap();
        assert!(t1.bitwise_eq(&t2));
    }

    #[test]
    fn input_shape_mismatch_is_reported() {
        let net = char_net(10, 1);
        let batch = Tensor::<f64>::zeros(vec![2, 1, 27, 28]);
        assert!(matches!(net.predict(&batch), Err(NetworkError::InputShape { .. })));
    }

    #[test]
    fn frozen_prefix_skips_frozen_gradients() {
        let mut net = char_net(4, 5);
        net.set_frozen_prefix(2);
        net.check_freeze_invariants().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = Tensor::uniform(vec![3, 1, 28, 28], 0.0, 1.0, &mut rng);
        let (logits, trace) = net.forward_train(&batch, &mut KernelContext::train(2)).unwrap();
        let (_, probs) = kernels::softmax_xent(&logits, &[0, 1, 2]).unwrap();
        let g = kernels::softmax_xent_backward(&probs, &[0, 1, 2]).unwrap();
        let grads = net.backward(&trace, &g).unwrap();
        let layers: Vec<usize> = grads.entries.iter().map(|(id, _)| id.layer).collect();
        assert_eq!(layers, vec![5, 5, 9, 9]);
    }

    #[test]
    fn trainable_layer_may_not_feed_frozen_one() {
        let mut net = char_net(4, 5);
        net.frozen[5] = true;
        assert!(net.check_freeze_invariants().is_err());
        let mut net = char_net(4, 5);
        let c = net.classifier_index();
        net.frozen[c] = true;
        assert!(net.check_freeze_invariants().is_err());
    }
}
