//! Network graphs: ordered layer nodes over a shared parameter store, with
//! batched forward/backward execution.
//!
//! Parameters live in one arena per graph and layers reference them by id.
//! Siamese branches reference the same ids, which is what makes their
//! weights shared: there is only one tensor. Forward passes fan out across
//! batch samples with rayon; gradient accumulation walks samples in a fixed
//! order so results do not depend on the thread count.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, Activation, BnCache};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatId(pub usize);

/// Named parameter tensors owned by a graph.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }
}

/// Named running statistics (batch-norm means and variances).
#[derive(Debug, Clone, Default)]
pub struct StatStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl StatStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> StatId {
        self.names.push(name.into());
        self.values.push(value);
        StatId(self.values.len() - 1)
    }

    pub fn get(&self, id: StatId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: StatId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn get_two_mut(&mut self, a: StatId, b: StatId) -> (&mut Tensor, &mut Tensor) {
        split_two(&mut self.values, a.0, b.0)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }
}

/// One layer in a graph, referencing its parameters by id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Layer {
    Conv2d {
        weights: ParamId,
        bias: ParamId,
        filters: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    },
    FullyConnected {
        weights: ParamId,
        bias: ParamId,
        units: usize,
    },
    BatchNorm {
        gamma: ParamId,
        beta: ParamId,
        mean: StatId,
        var: StatId,
        /// Scalar batch counter; the first batch seeds the running stats
        /// directly, later ones blend in with `momentum`.
        steps: StatId,
        eps: f32,
        momentum: f32,
    },
    MaxPool2x2,
    GlobalAvgPool,
    Flatten,
    Dropout {
        rate: f32,
    },
    Activation(Activation),
    /// Two parallel sub-stacks over the same input, outputs concatenated
    /// along the channel axis (the expand stage of a Fire module).
    ChannelConcat {
        left: Vec<Node>,
        right: Vec<Node>,
    },
}

/// A layer plus an optional name used for feature taps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Node {
    pub layer: Layer,
    pub name: Option<String>,
}

impl Node {
    pub fn new(layer: Layer) -> Self {
        Node { layer, name: None }
    }

    pub fn named(layer: Layer, name: impl Into<String>) -> Self {
        Node {
            layer,
            name: Some(name.into()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Topology {
    Sequential(Vec<Node>),
    /// Two inputs through one weight-shared branch, feature vectors
    /// concatenated, then a decision head.
    Siamese { branch: Vec<Node>, head: Vec<Node> },
    /// Shared trunk with an objectness head and a classification head.
    DualHead {
        trunk: Vec<Node>,
        objectness: Vec<Node>,
        classes: Vec<Node>,
    },
}

/// What the network promises to emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputContract {
    ClassProbs { classes: usize },
    Score,
    ObjectnessMap,
    Dual { classes: usize },
}

#[derive(Debug, Clone)]
pub struct NetworkGraph {
    pub input_shape: Vec<usize>,
    pub topology: Topology,
    pub output: OutputContract,
    pub params: ParamStore,
    pub stats: StatStore,
}

/// A batch of inputs: plain samples or patch pairs for siamese nets.
pub enum BatchInput<'a> {
    Single(&'a [Tensor]),
    Pair(&'a [(Tensor, Tensor)]),
}

impl BatchInput<'_> {
    pub fn len(&self) -> usize {
        match self {
            BatchInput::Single(s) => s.len(),
            BatchInput::Pair(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub enum BatchOutput {
    Single(Vec<Tensor>),
    Dual {
        objectness: Vec<Tensor>,
        classes: Vec<Tensor>,
    },
}

impl BatchOutput {
    pub fn single(self) -> Vec<Tensor> {
        match self {
            BatchOutput::Single(v) => v,
            BatchOutput::Dual { .. } => panic!("expected single-output network"),
        }
    }
}

/// Output-side gradients fed into `backward`.
pub enum OutputGrads {
    Single(Vec<Tensor>),
    Dual {
        objectness: Vec<Tensor>,
        classes: Vec<Tensor>,
    },
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

enum NodeTape {
    Conv { x: Vec<Tensor> },
    Fc { x: Vec<Tensor> },
    Bn { cache: BnCache<f32> },
    MaxPool { argmax: Vec<Vec<u32>>, in_shape: Vec<usize> },
    Gap { in_shape: Vec<usize> },
    Flatten { in_shape: Vec<usize> },
    Dropout { masks: Vec<Vec<bool>> },
    Act { x: Vec<Tensor>, out: Vec<Tensor> },
    Concat {
        left: Vec<NodeTape>,
        right: Vec<NodeTape>,
        left_channels: usize,
        spatial: (usize, usize),
    },
}

pub struct Tape {
    stages: Vec<Vec<NodeTape>>,
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

fn run_node_infer(node: &Node, batch: Vec<Tensor>, params: &ParamStore, stats: &StatStore) -> Result<Vec<Tensor>> {
    match &node.layer {
        Layer::Conv2d {
            weights,
            bias,
            stride,
            padding,
            ..
        } => batch
            .par_iter()
            .map(|x| layers::conv2d_forward(x, params.get(*weights), params.get(*bias), *stride, *padding))
            .collect(),
        Layer::FullyConnected { weights, bias, .. } => batch
            .par_iter()
            .map(|x| layers::fully_connected_forward(x, params.get(*weights), params.get(*bias)))
            .collect(),
        Layer::BatchNorm {
            gamma,
            beta,
            mean,
            var,
            eps,
            ..
        } => batch
            .par_iter()
            .map(|x| {
                layers::batchnorm_forward_infer(
                    x,
                    params.get(*gamma),
                    params.get(*beta),
                    stats.get(*mean),
                    stats.get(*var),
                    *eps,
                )
            })
            .collect(),
        Layer::MaxPool2x2 => batch
            .par_iter()
            .map(|x| layers::maxpool2x2_forward(x).map(|(y, _)| y))
            .collect(),
        Layer::GlobalAvgPool => batch.par_iter().map(layers::global_avg_pool).collect(),
        Layer::Flatten => batch
            .into_iter()
            .map(|x| {
                let n = x.len();
                x.reshape(&[n])
            })
            .collect(),
        Layer::Dropout { rate } => Ok(batch.iter().map(|x| layers::dropout_infer(x, *rate)).collect()),
        Layer::Activation(kind) => batch.par_iter().map(|x| layers::activation_forward(*kind, x)).collect(),
        Layer::ChannelConcat { left, right } => {
            let l = run_nodes_infer(left, batch.clone(), params, stats)?;
            let r = run_nodes_infer(right, batch, params, stats)?;
            l.into_iter().zip(r).map(|(a, b)| concat_channels(&a, &b)).collect()
        }
    }
}

fn run_nodes_infer(nodes: &[Node], mut batch: Vec<Tensor>, params: &ParamStore, stats: &StatStore) -> Result<Vec<Tensor>> {
    for node in nodes {
        batch = run_node_infer(node, batch, params, stats)?;
    }
    Ok(batch)
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 3 || b.rank() != 3 || a.shape()[1..] != b.shape()[1..] {
        return Err(Error::shape_mismatch(a.shape(), b.shape(), "channel concat"));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(
        vec![a.shape()[0] + b.shape()[0], a.shape()[1], a.shape()[2]],
        data,
    )
}

fn run_node_train(
    node: &Node,
    batch: Vec<Tensor>,
    params: &ParamStore,
    stats: &mut StatStore,
    rng: &mut ChaCha8Rng,
    tape: &mut Vec<NodeTape>,
) -> Result<Vec<Tensor>> {
    match &node.layer {
        Layer::Conv2d {
            weights,
            bias,
            stride,
            padding,
            ..
        } => {
            let out: Result<Vec<Tensor>> = batch
                .par_iter()
                .map(|x| layers::conv2d_forward(x, params.get(*weights), params.get(*bias), *stride, *padding))
                .collect();
            tape.push(NodeTape::Conv { x: batch });
            out
        }
        Layer::FullyConnected { weights, bias, .. } => {
            let out: Result<Vec<Tensor>> = batch
                .par_iter()
                .map(|x| layers::fully_connected_forward(x, params.get(*weights), params.get(*bias)))
                .collect();
            tape.push(NodeTape::Fc { x: batch });
            out
        }
        Layer::BatchNorm {
            gamma,
            beta,
            mean,
            var,
            steps,
            eps,
            momentum,
        } => {
            let (out, cache) = layers::batchnorm_forward_train(&batch, params.get(*gamma), params.get(*beta), *eps)?;
            let seen = stats.get(*steps).data()[0];
            let momentum = if seen == 0.0 { 0.0 } else { *momentum };
            stats.get_mut(*steps).data_mut()[0] = seen + 1.0;
            let (rmean, rvar) = stats.get_two_mut(*mean, *var);
            layers::batchnorm_update_running(&cache, momentum, rmean, rvar);
            tape.push(NodeTape::Bn { cache });
            Ok(out)
        }
        Layer::MaxPool2x2 => {
            let in_shape = batch[0].shape().to_vec();
            let results: Result<Vec<(Tensor, Vec<u32>)>> = batch.par_iter().map(layers::maxpool2x2_forward).collect();
            let (out, argmax): (Vec<_>, Vec<_>) = results?.into_iter().unzip();
            tape.push(NodeTape::MaxPool { argmax, in_shape });
            Ok(out)
        }
        Layer::GlobalAvgPool => {
            let in_shape = batch[0].shape().to_vec();
            let out: Result<Vec<Tensor>> = batch.par_iter().map(layers::global_avg_pool).collect();
            tape.push(NodeTape::Gap { in_shape });
            out
        }
        Layer::Flatten => {
            let in_shape = batch[0].shape().to_vec();
            let out: Result<Vec<Tensor>> = batch
                .into_iter()
                .map(|x| {
                    let n = x.len();
                    x.reshape(&[n])
                })
                .collect();
            tape.push(NodeTape::Flatten { in_shape });
            out
        }
        Layer::Dropout { rate } => {
            // Masks come off the sequential rng stream so results do not
            // depend on the thread count.
            let mut out = Vec::with_capacity(batch.len());
            let mut masks = Vec::with_capacity(batch.len());
            for x in &batch {
                let (y, mask) = layers::dropout_train(x, *rate, rng);
                out.push(y);
                masks.push(mask);
            }
            tape.push(NodeTape::Dropout { masks });
            Ok(out)
        }
        Layer::Activation(kind) => {
            let out: Result<Vec<Tensor>> = batch.par_iter().map(|x| layers::activation_forward(*kind, x)).collect();
            let out = out?;
            tape.push(NodeTape::Act {
                x: batch,
                out: out.clone(),
            });
            Ok(out)
        }
        Layer::ChannelConcat { left, right } => {
            let mut ltape = Vec::new();
            let mut rtape = Vec::new();
            let l = run_nodes_train(left, batch.clone(), params, stats, rng, &mut ltape)?;
            let r = run_nodes_train(right, batch, params, stats, rng, &mut rtape)?;
            let left_channels = l[0].shape()[0];
            let spatial = (l[0].shape()[1], l[0].shape()[2]);
            let out: Result<Vec<Tensor>> = l.iter().zip(&r).map(|(a, b)| concat_channels(a, b)).collect();
            tape.push(NodeTape::Concat {
                left: ltape,
                right: rtape,
                left_channels,
                spatial,
            });
            out
        }
    }
}

fn run_nodes_train(
    nodes: &[Node],
    mut batch: Vec<Tensor>,
    params: &ParamStore,
    stats: &mut StatStore,
    rng: &mut ChaCha8Rng,
    tape: &mut Vec<NodeTape>,
) -> Result<Vec<Tensor>> {
    for node in nodes {
        batch = run_node_train(node, batch, params, stats, rng, tape)?;
    }
    Ok(batch)
}

fn backward_node(
    node: &Node,
    tape: &NodeTape,
    grads: Vec<Tensor>,
    params: &ParamStore,
    param_grads: &mut [Tensor],
) -> Vec<Tensor> {
    match (&node.layer, tape) {
        (
            Layer::Conv2d {
                weights,
                bias,
                kernel,
                stride,
                padding,
                ..
            },
            NodeTape::Conv { x },
        ) => {
            let w = params.get(*weights);
            let grad_x: Vec<Tensor> = x
                .par_iter()
                .zip(&grads)
                .map(|(xs, g)| layers::conv2d_backward_input(xs.shape(), w, g, *stride, *padding))
                .collect();
            // fixed sample order for the parameter accumulation
            let (gw, gb) = split_two(param_grads, weights.0, bias.0);
            for (xs, g) in x.iter().zip(&grads) {
                layers::conv2d_backward_params_acc(xs, g, *stride, *padding, *kernel, gw, gb);
            }
            grad_x
        }
        (Layer::FullyConnected { weights, bias, .. }, NodeTape::Fc { x }) => {
            let w = params.get(*weights);
            let grad_x: Vec<Tensor> = grads
                .par_iter()
                .map(|g| layers::fully_connected_backward_input(w, g))
                .collect();
            let (gw, gb) = split_two(param_grads, weights.0, bias.0);
            for (xs, g) in x.iter().zip(&grads) {
                layers::fully_connected_backward_params_acc(xs, g, gw, gb);
            }
            grad_x
        }
        (Layer::BatchNorm { gamma, beta, .. }, NodeTape::Bn { cache }) => {
            let (grad_x, ggamma, gbeta) = layers::batchnorm_backward(&grads, cache, params.get(*gamma));
            accumulate(&mut param_grads[gamma.0], &ggamma);
            accumulate(&mut param_grads[beta.0], &gbeta);
            grad_x
        }
        (Layer::MaxPool2x2, NodeTape::MaxPool { argmax, in_shape }) => grads
            .par_iter()
            .zip(argmax)
            .map(|(g, arg)| layers::maxpool2x2_backward(g, arg, in_shape))
            .collect(),
        (Layer::GlobalAvgPool, NodeTape::Gap { in_shape }) => grads
            .par_iter()
            .map(|g| layers::global_avg_pool_backward(g, in_shape))
            .collect(),
        (Layer::Flatten, NodeTape::Flatten { in_shape }) => grads
            .into_iter()
            .map(|g| g.reshape(in_shape).expect("flatten backward shape"))
            .collect(),
        (Layer::Dropout { .. }, NodeTape::Dropout { masks }) => grads
            .par_iter()
            .zip(masks)
            .map(|(g, m)| layers::dropout_backward(g, m))
            .collect(),
        (Layer::Activation(kind), NodeTape::Act { x, out }) => grads
            .par_iter()
            .zip(x.par_iter().zip(out))
            .map(|(g, (xs, os))| layers::activation_backward(*kind, xs, os, g))
            .collect(),
        (
            Layer::ChannelConcat { left, right },
            NodeTape::Concat {
                left: ltape,
                right: rtape,
                left_channels,
                spatial,
            },
        ) => {
            let (h, w) = *spatial;
            let span = h * w;
            let mut lg = Vec::with_capacity(grads.len());
            let mut rg = Vec::with_capacity(grads.len());
            for g in &grads {
                let total_c = g.shape()[0];
                let split = left_channels * span;
                lg.push(Tensor::new(vec![*left_channels, h, w], g.data()[..split].to_vec()).expect("split"));
                rg.push(
                    Tensor::new(vec![total_c - left_channels, h, w], g.data()[split..].to_vec()).expect("split"),
                );
            }
            let lx = backward_nodes(left, ltape, lg, params, param_grads);
            let rx = backward_nodes(right, rtape, rg, params, param_grads);
            lx.into_iter()
                .zip(rx)
                .map(|(a, b)| {
                    let mut sum = a;
                    accumulate(&mut sum, &b);
                    sum
                })
                .collect()
        }
        _ => unreachable!("tape entry does not match layer"),
    }
}

fn backward_nodes(
    nodes: &[Node],
    tape: &[NodeTape],
    mut grads: Vec<Tensor>,
    params: &ParamStore,
    param_grads: &mut [Tensor],
) -> Vec<Tensor> {
    for (node, entry) in nodes.iter().zip(tape.iter()).rev() {
        grads = backward_node(node, entry, grads, params, param_grads);
    }
    grads
}

fn accumulate(target: &mut Tensor, add: &Tensor) {
    for (t, &a) in target.data_mut().iter_mut().zip(add.data()) {
        *t += a;
    }
}

fn split_two(slice: &mut [Tensor], a: usize, b: usize) -> (&mut Tensor, &mut Tensor) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = slice.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = slice.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

// ---------------------------------------------------------------------------
// Graph API
// ---------------------------------------------------------------------------

impl NetworkGraph {
    /// Inference over a batch. Batch-norm layers use running statistics and
    /// dropout applies its deterministic keep-probability scaling, so this
    /// is a pure function of the inputs and safe to share across threads.
    pub fn infer_batch(&self, input: &BatchInput) -> Result<BatchOutput> {
        match (&self.topology, input) {
            (Topology::Sequential(nodes), BatchInput::Single(xs)) => Ok(BatchOutput::Single(run_nodes_infer(
                nodes,
                xs.to_vec(),
                &self.params,
                &self.stats,
            )?)),
            (Topology::Siamese { branch, head }, BatchInput::Pair(pairs)) => {
                let firsts: Vec<Tensor> = pairs.iter().map(|(a, _)| a.clone()).collect();
                let seconds: Vec<Tensor> = pairs.iter().map(|(_, b)| b.clone()).collect();
                let fa = run_nodes_infer(branch, firsts, &self.params, &self.stats)?;
                let fb = run_nodes_infer(branch, seconds, &self.params, &self.stats)?;
                let merged: Result<Vec<Tensor>> = fa.iter().zip(&fb).map(|(a, b)| concat_features(a, b)).collect();
                Ok(BatchOutput::Single(run_nodes_infer(
                    head,
                    merged?,
                    &self.params,
                    &self.stats,
                )?))
            }
            (
                Topology::DualHead {
                    trunk,
                    objectness,
                    classes,
                },
                BatchInput::Single(xs),
            ) => {
                let shared = run_nodes_infer(trunk, xs.to_vec(), &self.params, &self.stats)?;
                let obj = run_nodes_infer(objectness, shared.clone(), &self.params, &self.stats)?;
                let cls = run_nodes_infer(classes, shared, &self.params, &self.stats)?;
                Ok(BatchOutput::Dual {
                    objectness: obj,
                    classes: cls,
                })
            }
            _ => Err(Error::Config("input kind does not match network topology".into())),
        }
    }

    /// Single-sample inference for sequential networks.
    pub fn infer_single(&self, x: &Tensor) -> Result<Tensor> {
        let out = self.infer_batch(&BatchInput::Single(std::slice::from_ref(x)))?;
        Ok(out.single().pop().expect("one sample in, one out"))
    }

    /// Single-pair inference for siamese networks.
    pub fn infer_pair(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let pair = [(a.clone(), b.clone())];
        let out = self.infer_batch(&BatchInput::Pair(&pair))?;
        Ok(out.single().pop().expect("one pair in, one out"))
    }

    /// Train-mode forward pass: records a tape for `backward` and updates
    /// batch-norm running statistics.
    pub fn forward_train(&mut self, input: &BatchInput, rng: &mut ChaCha8Rng) -> Result<(BatchOutput, Tape)> {
        let mut stages = Vec::new();
        let out = match (&self.topology, input) {
            (Topology::Sequential(nodes), BatchInput::Single(xs)) => {
                let mut tape = Vec::new();
                let out = run_nodes_train(nodes, xs.to_vec(), &self.params, &mut self.stats, rng, &mut tape)?;
                stages.push(tape);
                BatchOutput::Single(out)
            }
            (Topology::Siamese { branch, head }, BatchInput::Pair(pairs)) => {
                let firsts: Vec<Tensor> = pairs.iter().map(|(a, _)| a.clone()).collect();
                let seconds: Vec<Tensor> = pairs.iter().map(|(_, b)| b.clone()).collect();
                let mut tape_a = Vec::new();
                let mut tape_b = Vec::new();
                let fa = run_nodes_train(branch, firsts, &self.params, &mut self.stats, rng, &mut tape_a)?;
                let fb = run_nodes_train(branch, seconds, &self.params, &mut self.stats, rng, &mut tape_b)?;
                let merged: Result<Vec<Tensor>> = fa.iter().zip(&fb).map(|(a, b)| concat_features(a, b)).collect();
                let mut tape_head = Vec::new();
                let out = run_nodes_train(head, merged?, &self.params, &mut self.stats, rng, &mut tape_head)?;
                stages.push(tape_a);
                stages.push(tape_b);
                stages.push(tape_head);
                BatchOutput::Single(out)
            }
            (
                Topology::DualHead {
                    trunk,
                    objectness,
                    classes,
                },
                BatchInput::Single(xs),
            ) => {
                let mut tape_trunk = Vec::new();
                let shared = run_nodes_train(trunk, xs.to_vec(), &self.params, &mut self.stats, rng, &mut tape_trunk)?;
                let mut tape_obj = Vec::new();
                let obj = run_nodes_train(
                    objectness,
                    shared.clone(),
                    &self.params,
                    &mut self.stats,
                    rng,
                    &mut tape_obj,
                )?;
                let mut tape_cls = Vec::new();
                let cls = run_nodes_train(classes, shared, &self.params, &mut self.stats, rng, &mut tape_cls)?;
                stages.push(tape_trunk);
                stages.push(tape_obj);
                stages.push(tape_cls);
                BatchOutput::Dual {
                    objectness: obj,
                    classes: cls,
                }
            }
            _ => return Err(Error::Config("input kind does not match network topology".into())),
        };
        Ok((out, Tape { stages }))
    }

    /// Backward pass over a recorded tape. Returns gradients aligned with
    /// the parameter store (shared siamese parameters accumulate both
    /// branches' contributions).
    pub fn backward(&self, tape: &Tape, out_grads: OutputGrads) -> Result<Vec<Tensor>> {
        let mut param_grads: Vec<Tensor> = (0..self.params.len())
            .map(|i| Tensor::zeros(self.params.get(ParamId(i)).shape()))
            .collect();
        match (&self.topology, out_grads) {
            (Topology::Sequential(nodes), OutputGrads::Single(grads)) => {
                backward_nodes(nodes, &tape.stages[0], grads, &self.params, &mut param_grads);
            }
            (Topology::Siamese { branch, head }, OutputGrads::Single(grads)) => {
                let merged_grads = backward_nodes(head, &tape.stages[2], grads, &self.params, &mut param_grads);
                // both branches emit equal-length features; the merge is a
                // straight concatenation, so the split point is the middle
                let split = merged_grads[0].len() / 2;
                let mut ga = Vec::with_capacity(merged_grads.len());
                let mut gb = Vec::with_capacity(merged_grads.len());
                for g in merged_grads {
                    ga.push(Tensor::from_vec(g.data()[..split].to_vec()));
                    gb.push(Tensor::from_vec(g.data()[split..].to_vec()));
                }
                backward_nodes(branch, &tape.stages[0], ga, &self.params, &mut param_grads);
                backward_nodes(branch, &tape.stages[1], gb, &self.params, &mut param_grads);
            }
            (
                Topology::DualHead {
                    trunk,
                    objectness,
                    classes,
                },
                OutputGrads::Dual {
                    objectness: gobj,
                    classes: gcls,
                },
            ) => {
                let trunk_from_obj = backward_nodes(objectness, &tape.stages[1], gobj, &self.params, &mut param_grads);
                let trunk_from_cls = backward_nodes(classes, &tape.stages[2], gcls, &self.params, &mut param_grads);
                let combined: Vec<Tensor> = trunk_from_obj
                    .into_iter()
                    .zip(trunk_from_cls)
                    .map(|(a, b)| {
                        let mut sum = a;
                        accumulate(&mut sum, &b);
                        sum
                    })
                    .collect();
                backward_nodes(trunk, &tape.stages[0], combined, &self.params, &mut param_grads);
            }
            _ => return Err(Error::Config("gradient kind does not match network topology".into())),
        }
        Ok(param_grads)
    }

    /// Total number of trainable scalars (weights, biases, batch-norm
    /// scale/shift). Running statistics are not trainable and not counted.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Inference features at a named layer, flattened to a vector.
    pub fn features_at(&self, name: &str, x: &Tensor) -> Result<Tensor> {
        let nodes = match &self.topology {
            Topology::Sequential(nodes) => nodes,
            _ => {
                return Err(Error::Config(
                    "feature extraction is defined for sequential networks".into(),
                ))
            }
        };
        let mut batch = vec![x.clone()];
        for node in nodes {
            batch = run_node_infer(node, batch, &self.params, &self.stats)?;
            if node.name.as_deref() == Some(name) {
                let out = batch.pop().expect("single sample");
                let n = out.len();
                return out.reshape(&[n]);
            }
        }
        Err(Error::Config(format!("layer name {name:?} not in network")))
    }

    /// Shared trunk output of a dual-head network (inference mode),
    /// flattened to a feature vector.
    pub fn trunk_features(&self, x: &Tensor) -> Result<Tensor> {
        match &self.topology {
            Topology::DualHead { trunk, .. } => {
                let batch = run_nodes_infer(trunk, vec![x.clone()], &self.params, &self.stats)?;
                let out = batch.into_iter().next().expect("single sample");
                let n = out.len();
                out.reshape(&[n])
            }
            _ => Err(Error::Config("trunk features need a dual-head network".into())),
        }
    }

    /// Names of all taps available via `features_at`.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let mut visit = |nodes: &[Node]| {
            for node in nodes {
                if let Some(n) = &node.name {
                    names.push(n.clone());
                }
            }
        };
        match &self.topology {
            Topology::Sequential(nodes) => visit(nodes),
            Topology::Siamese { branch, head } => {
                visit(branch);
                visit(head);
            }
            Topology::DualHead {
                trunk,
                objectness,
                classes,
            } => {
                visit(trunk);
                visit(objectness);
                visit(classes);
            }
        }
        names
    }
}

/// Concatenate two rank-1 feature vectors (siamese merge).
fn concat_features(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 1 || b.rank() != 1 || a.len() != b.len() {
        return Err(Error::shape_mismatch(a.shape(), b.shape(), "feature concat"));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Ok(Tensor::from_vec(data))
}

impl NetworkGraph {
    pub fn new(
        input_shape: Vec<usize>,
        topology: Topology,
        output: OutputContract,
        params: ParamStore,
        stats: StatStore,
    ) -> Self {
        NetworkGraph {
            input_shape,
            topology,
            output,
            params,
            stats,
        }
    }
}
