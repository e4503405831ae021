//! Builders for the network family, fully-convolutional conversion, and
//! model serialization.
//!
//! All classifier modules use "same" padding so every 2x2 pool exactly
//! halves the spatial extent; the dual-head detector uses unpadded
//! convolutions. Shape chains are validated at build time with the
//! convolution output formula, so a configuration that is too deep for its
//! input fails to build instead of failing mid-forward.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{Layer, NetworkGraph, Node, OutputContract, ParamStore, StatStore, Topology};
use crate::layers::{conv_output_extent, init_weights, Activation, WeightInit};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 0.001;
pub const BN_MOMENTUM: f32 = 0.99;

/// Regularization choice for the classic classifier stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reg {
    BatchNorm,
    Dropout,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatcherKind {
    TwoChannel,
    Siamese,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatcherHead {
    /// Two-way softmax; the match score is the probability of class 1.
    Class2Softmax,
    /// Single sigmoid regression score in [0, 1].
    ScoreSigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectnessKind {
    /// Conv32-MP-Conv32-MP-FC96-FC1 with batch norm, sigmoid output.
    Classic,
    /// Two (3x3 + 1x1 conv, pool) stages and an FC(1); no batch norm, so it
    /// stays convertible to a fully convolutional network.
    Tiny,
}

// ---------------------------------------------------------------------------
// Assembly helpers
// ---------------------------------------------------------------------------

struct Assembler<'r> {
    params: ParamStore,
    stats: StatStore,
    rng: &'r mut ChaCha8Rng,
}

impl<'r> Assembler<'r> {
    fn new(rng: &'r mut ChaCha8Rng) -> Self {
        Assembler {
            params: ParamStore::default(),
            stats: StatStore::default(),
            rng,
        }
    }

    fn conv(
        &mut self,
        name: &str,
        in_channels: usize,
        filters: usize,
        kernel: (usize, usize),
        padding: usize,
    ) -> Result<Node> {
        if kernel.0 % 2 == 0 || kernel.1 % 2 == 0 {
            return Err(Error::Config(format!(
                "conv kernel extents must be odd, got {kernel:?}"
            )));
        }
        let w = init_weights(
            &WeightInit::Glorot,
            &[filters, in_channels, kernel.0, kernel.1],
            self.rng,
        )?;
        let weights = self.params.add(format!("{name}.w"), w);
        let bias = self.params.add(format!("{name}.b"), Tensor::zeros(&[filters]));
        Ok(Node::named(
            Layer::Conv2d {
                weights,
                bias,
                filters,
                kernel,
                stride: 1,
                padding,
            },
            name,
        ))
    }

    fn fc(&mut self, name: &str, in_dim: usize, units: usize) -> Result<Node> {
        let w = init_weights(&WeightInit::Glorot, &[units, in_dim], self.rng)?;
        let weights = self.params.add(format!("{name}.w"), w);
        let bias = self.params.add(format!("{name}.b"), Tensor::zeros(&[units]));
        Ok(Node::named(
            Layer::FullyConnected { weights, bias, units },
            name,
        ))
    }

    fn bn(&mut self, name: &str, features: usize) -> Node {
        let gamma = self.params.add(format!("{name}.gamma"), Tensor::filled(&[features], 1.0));
        let beta = self.params.add(format!("{name}.beta"), Tensor::zeros(&[features]));
        let mean = self.stats.add(format!("{name}.mean"), Tensor::zeros(&[features]));
        let var = self.stats.add(format!("{name}.var"), Tensor::filled(&[features], 1.0));
        let steps = self.stats.add(format!("{name}.steps"), Tensor::zeros(&[1]));
        Node::named(
            Layer::BatchNorm {
                gamma,
                beta,
                mean,
                var,
                steps,
                eps: BN_EPS,
                momentum: BN_MOMENTUM,
            },
            name,
        )
    }
}

fn relu() -> Node {
    Node::new(Layer::Activation(Activation::Relu))
}

fn act(a: Activation) -> Node {
    Node::new(Layer::Activation(a))
}

// ---------------------------------------------------------------------------
// Shape validation
// ---------------------------------------------------------------------------

fn node_output_shape(node: &Node, input: &[usize], params: &ParamStore) -> Result<Vec<usize>> {
    match &node.layer {
        Layer::Conv2d {
            weights,
            kernel,
            stride,
            padding,
            filters,
            ..
        } => {
            if input.len() != 3 {
                return Err(Error::shape_mismatch(input, &[0, 0, 0], "conv input"));
            }
            let w = params.get(*weights);
            if w.shape()[1] != input[0] {
                return Err(Error::shape_mismatch(w.shape(), input, "conv channel depth"));
            }
            let oh = conv_output_extent(input[1], kernel.0, *padding, *stride)?;
            let ow = conv_output_extent(input[2], kernel.1, *padding, *stride)?;
            Ok(vec![*filters, oh, ow])
        }
        Layer::FullyConnected { weights, units, .. } => {
            let w = params.get(*weights);
            if input.len() != 1 || w.shape()[1] != input[0] {
                return Err(Error::shape_mismatch(w.shape(), input, "fully connected input"));
            }
            Ok(vec![*units])
        }
        Layer::BatchNorm { gamma, .. } => {
            let g = params.get(*gamma);
            if g.shape()[0] != input[0] {
                return Err(Error::shape_mismatch(g.shape(), input, "batchnorm features"));
            }
            Ok(input.to_vec())
        }
        Layer::MaxPool2x2 => {
            if input.len() != 3 || input[1] % 2 != 0 || input[2] % 2 != 0 {
                return Err(Error::Config(format!(
                    "network too deep for its input: 2x2 pooling needs even extents, got {input:?}"
                )));
            }
            Ok(vec![input[0], input[1] / 2, input[2] / 2])
        }
        Layer::GlobalAvgPool => {
            if input.len() != 3 {
                return Err(Error::shape_mismatch(input, &[0, 0, 0], "global average pool input"));
            }
            Ok(vec![input[0]])
        }
        Layer::Flatten => Ok(vec![input.iter().product()]),
        Layer::Dropout { .. } | Layer::Activation(_) => Ok(input.to_vec()),
        Layer::ChannelConcat { left, right } => {
            let l = chain_shapes(left, input.to_vec(), params)?;
            let r = chain_shapes(right, input.to_vec(), params)?;
            let (ls, rs) = (l.last().unwrap(), r.last().unwrap());
            if ls[1..] != rs[1..] {
                return Err(Error::shape_mismatch(ls, rs, "channel concat branches"));
            }
            Ok(vec![ls[0] + rs[0], ls[1], ls[2]])
        }
    }
}

fn chain_shapes(nodes: &[Node], input: Vec<usize>, params: &ParamStore) -> Result<Vec<Vec<usize>>> {
    let mut shapes = vec![input];
    for node in nodes {
        let next = node_output_shape(node, shapes.last().unwrap(), params)?;
        shapes.push(next);
    }
    Ok(shapes)
}

impl NetworkGraph {
    /// Check that consecutive layer shapes compose, via the convolution
    /// output formula. Builders run this before returning a graph.
    pub fn validate(&self) -> Result<()> {
        match &self.topology {
            Topology::Sequential(nodes) => {
                chain_shapes(nodes, self.input_shape.clone(), &self.params)?;
            }
            Topology::Siamese { branch, head } => {
                let b = chain_shapes(branch, self.input_shape.clone(), &self.params)?;
                let feature = b.last().unwrap();
                if feature.len() != 1 {
                    return Err(Error::Config("siamese branch must end in a feature vector".into()));
                }
                chain_shapes(head, vec![feature[0] * 2], &self.params)?;
            }
            Topology::DualHead {
                trunk,
                objectness,
                classes,
            } => {
                let t = chain_shapes(trunk, self.input_shape.clone(), &self.params)?;
                let shared = t.last().unwrap().clone();
                chain_shapes(objectness, shared.clone(), &self.params)?;
                chain_shapes(classes, shared, &self.params)?;
            }
        }
        Ok(())
    }

    /// Shape after every layer of a sequential network, starting with the
    /// input shape.
    pub fn sequential_shapes(&self) -> Result<Vec<Vec<usize>>> {
        match &self.topology {
            Topology::Sequential(nodes) => chain_shapes(nodes, self.input_shape.clone(), &self.params),
            _ => Err(Error::Config("not a sequential network".into())),
        }
    }
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

/// Stack of `modules` Classic modules (5x5 conv, ReLU, 2x2 pool, optional
/// batch norm) followed by FC(64)-FC(classes) with softmax.
pub fn build_classic_net(
    modules: usize,
    filters: usize,
    reg: Reg,
    classes: usize,
    input_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<NetworkGraph> {
    if modules == 0 {
        return Err(Error::Config("at least one module required".into()));
    }
    let mut asm = Assembler::new(rng);
    let mut nodes = Vec::new();
    let mut channels = 1;
    for i in 1..=modules {
        nodes.push(asm.conv(&format!("conv{i}"), channels, filters, (5, 5), 2)?);
        nodes.push(relu());
        nodes.push(Node::named(Layer::MaxPool2x2, format!("mp{i}")));
        if reg == Reg::BatchNorm {
            nodes.push(asm.bn(&format!("bn{i}"), filters));
        }
        channels = filters;
    }
    let spatial = input_size >> modules;
    let flat = filters * spatial * spatial;
    nodes.push(Node::new(Layer::Flatten));
    nodes.push(asm.fc("fc1", flat, 64)?);
    nodes.push(relu());
    match reg {
        Reg::BatchNorm => nodes.push(asm.bn("bn_fc1", 64)),
        Reg::Dropout => nodes.push(Node::new(Layer::Dropout { rate: 0.5 })),
        Reg::None => {}
    }
    nodes.push(asm.fc("fc2", 64, classes)?);
    nodes.push(act(Activation::Softmax));

    let net = NetworkGraph::new(
        vec![1, input_size, input_size],
        Topology::Sequential(nodes),
        OutputContract::ClassProbs { classes },
        asm.params,
        asm.stats,
    );
    net.validate()?;
    Ok(net)
}

fn tiny_module(asm: &mut Assembler, index: usize, in_channels: usize, filters: usize) -> Result<Vec<Node>> {
    Ok(vec![
        asm.conv(&format!("conv{index}a"), in_channels, filters, (3, 3), 1)?,
        relu(),
        asm.conv(&format!("conv{index}b"), filters, filters, (1, 1), 0)?,
        relu(),
        asm.bn(&format!("bn{index}"), filters),
        Node::named(Layer::MaxPool2x2, format!("module{index}")),
    ])
}

/// Stack of Tiny modules with a 1x1 conv head, global average pooling and
/// softmax.
pub fn build_tiny_net(
    modules: usize,
    filters: usize,
    classes: usize,
    input_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<NetworkGraph> {
    if modules == 0 {
        return Err(Error::Config("at least one module required".into()));
    }
    let mut asm = Assembler::new(rng);
    let mut nodes = Vec::new();
    let mut channels = 1;
    for i in 1..=modules {
        nodes.extend(tiny_module(&mut asm, i, channels, filters)?);
        channels = filters;
    }
    nodes.push(asm.conv("head_conv", channels, classes, (1, 1), 0)?);
    nodes.push(Node::named(Layer::GlobalAvgPool, "gap"));
    nodes.push(act(Activation::Softmax));

    let net = NetworkGraph::new(
        vec![1, input_size, input_size],
        Topology::Sequential(nodes),
        OutputContract::ClassProbs { classes },
        asm.params,
        asm.stats,
    );
    net.validate()?;
    Ok(net)
}

/// Fire module: 1x1 squeeze conv, then parallel 1x1 and 3x3 expand convs
/// concatenated along channels. All convs ReLU.
fn fire(asm: &mut Assembler, name: &str, in_channels: usize, filters: usize) -> Result<Vec<Node>> {
    let squeeze = asm.conv(&format!("{name}_s11"), in_channels, filters, (1, 1), 0)?;
    let e11 = asm.conv(&format!("{name}_e11"), filters, filters, (1, 1), 0)?;
    let e33 = asm.conv(&format!("{name}_e33"), filters, filters, (3, 3), 1)?;
    Ok(vec![
        squeeze,
        relu(),
        Node::named(
            Layer::ChannelConcat {
                left: vec![e11, relu()],
                right: vec![e33, relu()],
            },
            name,
        ),
    ])
}

/// Conv(8, 5x5) stem, `modules` MaxFire modules (two Fire modules, batch
/// norm, 2x2 pool), then the 1x1 conv / GAP / softmax head.
pub fn build_fire_net(
    modules: usize,
    filters: usize,
    classes: usize,
    input_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<NetworkGraph> {
    if modules == 0 {
        return Err(Error::Config("at least one module required".into()));
    }
    let mut asm = Assembler::new(rng);
    let mut nodes = Vec::new();
    nodes.push(asm.conv("convS", 1, 8, (5, 5), 2)?);
    nodes.push(relu());
    let mut channels = 8;
    for i in 1..=modules {
        nodes.extend(fire(&mut asm, &format!("fire{i}a"), channels, filters)?);
        channels = filters * 2;
        nodes.extend(fire(&mut asm, &format!("fire{i}b"), channels, filters)?);
        nodes.push(asm.bn(&format!("bn{i}"), channels));
        nodes.push(Node::named(Layer::MaxPool2x2, format!("module{i}")));
    }
    nodes.push(asm.conv("head_conv", channels, classes, (1, 1), 0)?);
    nodes.push(Node::named(Layer::GlobalAvgPool, "gap"));
    nodes.push(act(Activation::Softmax));

    let net = NetworkGraph::new(
        vec![1, input_size, input_size],
        Topology::Sequential(nodes),
        OutputContract::ClassProbs { classes },
        asm.params,
        asm.stats,
    );
    net.validate()?;
    Ok(net)
}

fn matcher_conv_stack(asm: &mut Assembler, prefix: &str, in_channels: usize) -> Result<(Vec<Node>, usize)> {
    let specs = [(16usize, "conv1"), (32, "conv2"), (32, "conv3"), (16, "conv4")];
    let mut nodes = Vec::new();
    let mut channels = in_channels;
    for (filters, name) in specs {
        nodes.push(asm.conv(&format!("{prefix}{name}"), channels, filters, (5, 5), 2)?);
        nodes.push(relu());
        nodes.push(Node::new(Layer::MaxPool2x2));
        channels = filters;
    }
    // four pools: 96 -> 6
    Ok((nodes, channels * 6 * 6))
}

/// Patch matcher: either a two-channel network over stacked pairs or a
/// weight-shared siamese network, with a 2-way softmax or sigmoid score
/// head.
pub fn build_matcher(kind: MatcherKind, head: MatcherHead, rng: &mut ChaCha8Rng) -> Result<NetworkGraph> {
    let mut asm = Assembler::new(rng);
    let (out_units, activation, contract) = match head {
        MatcherHead::Class2Softmax => (2, Activation::Softmax, OutputContract::ClassProbs { classes: 2 }),
        MatcherHead::ScoreSigmoid => (1, Activation::Sigmoid, OutputContract::Score),
    };
    let net = match kind {
        MatcherKind::TwoChannel => {
            let (mut nodes, flat) = matcher_conv_stack(&mut asm, "", 2)?;
            nodes.push(Node::new(Layer::Flatten));
            nodes.push(asm.fc("fc1", flat, 64)?);
            nodes.push(relu());
            nodes.push(Node::new(Layer::Dropout { rate: 0.5 }));
            nodes.push(asm.fc("fc2", 64, 32)?);
            nodes.push(relu());
            nodes.push(Node::new(Layer::Dropout { rate: 0.5 }));
            nodes.push(asm.fc("fc_out", 32, out_units)?);
            nodes.push(act(activation));
            NetworkGraph::new(
                vec![2, 96, 96],
                Topology::Sequential(nodes),
                contract,
                asm.params,
                asm.stats,
            )
        }
        MatcherKind::Siamese => {
            let (mut branch, flat) = matcher_conv_stack(&mut asm, "branch_", 1)?;
            branch.push(Node::new(Layer::Flatten));
            branch.push(asm.fc("branch_fc1", flat, 96)?);
            branch.push(relu());
            branch.push(asm.fc("branch_fc2", 96, 96)?);
            branch.push(relu());
            // merge = concatenation of the two 96-d branch vectors
            let head_nodes = vec![
                asm.fc("head_fc1", 192, 64)?,
                relu(),
                asm.fc("head_out", 64, out_units)?,
                act(activation),
            ];
            NetworkGraph::new(
                vec![1, 96, 96],
                Topology::Siamese {
                    branch,
                    head: head_nodes,
                },
                contract,
                asm.params,
                asm.stats,
            )
        }
    };
    net.validate()?;
    Ok(net)
}

/// Objectness regressor over 96x96 patches, sigmoid output in [0, 1].
pub fn build_objectness_net(kind: ObjectnessKind, rng: &mut ChaCha8Rng) -> Result<NetworkGraph> {
    let mut asm = Assembler::new(rng);
    let mut nodes = Vec::new();
    match kind {
        ObjectnessKind::Classic => {
            nodes.push(asm.conv("conv1", 1, 32, (5, 5), 2)?);
            nodes.push(relu());
            nodes.push(Node::new(Layer::MaxPool2x2));
            nodes.push(asm.bn("bn1", 32));
            nodes.push(asm.conv("conv2", 32, 32, (5, 5), 2)?);
            nodes.push(relu());
            nodes.push(Node::new(Layer::MaxPool2x2));
            nodes.push(asm.bn("bn2", 32));
            nodes.push(Node::new(Layer::Flatten));
            nodes.push(asm.fc("fc1", 32 * 24 * 24, 96)?);
            nodes.push(relu());
            nodes.push(asm.bn("bn_fc1", 96));
            nodes.push(asm.fc("fc_out", 96, 1)?);
            nodes.push(act(Activation::Sigmoid));
        }
        ObjectnessKind::Tiny => {
            let mut channels = 1;
            for i in 1..=2 {
                nodes.push(asm.conv(&format!("conv{i}a"), channels, 24, (3, 3), 1)?);
                nodes.push(relu());
                nodes.push(asm.conv(&format!("conv{i}b"), 24, 24, (1, 1), 0)?);
                nodes.push(relu());
                nodes.push(Node::named(Layer::MaxPool2x2, format!("mp{i}")));
                channels = 24;
            }
            nodes.push(Node::new(Layer::Flatten));
            nodes.push(asm.fc("fc_out", 24 * 24 * 24, 1)?);
            nodes.push(act(Activation::Sigmoid));
        }
    }
    let net = NetworkGraph::new(
        vec![1, 96, 96],
        Topology::Sequential(nodes),
        OutputContract::Score,
        asm.params,
        asm.stats,
    );
    net.validate()?;
    Ok(net)
}

/// Rewrite a trained patch-objectness network as a fully convolutional one:
/// the final fully connected layer becomes an equivalent convolution whose
/// kernel covers the last feature map, so whole images are scored densely.
/// Batch-norm layers tie the network to a fixed input size, so they make a
/// network non-convertible.
pub fn to_fcn(net: &NetworkGraph) -> Result<NetworkGraph> {
    let nodes = match &net.topology {
        Topology::Sequential(nodes) => nodes,
        _ => return Err(Error::Config("only sequential networks convert to FCN".into())),
    };
    if nodes
        .iter()
        .any(|n| matches!(n.layer, Layer::BatchNorm { .. }))
    {
        return Err(Error::Config(
            "architecture not FCN-convertible: batch normalization fixes the input size".into(),
        ));
    }
    let flatten_pos = nodes
        .iter()
        .position(|n| matches!(n.layer, Layer::Flatten))
        .ok_or_else(|| Error::Config("architecture not FCN-convertible: no flatten/FC tail".into()))?;
    let fc_count = nodes
        .iter()
        .filter(|n| matches!(n.layer, Layer::FullyConnected { .. }))
        .count();
    if fc_count != 1 {
        return Err(Error::Config(
            "architecture not FCN-convertible: expected exactly one fully connected layer".into(),
        ));
    }
    let (fc_weights, fc_bias, fc_units) = match &nodes[flatten_pos + 1].layer {
        Layer::FullyConnected { weights, bias, units } => (*weights, *bias, *units),
        _ => {
            return Err(Error::Config(
                "architecture not FCN-convertible: flatten must feed the final fully connected layer".into(),
            ))
        }
    };

    // Feature map shape right before the flatten.
    let shapes = net.sequential_shapes()?;
    let fmap = shapes[flatten_pos].clone();
    let (c, fh, fw) = (fmap[0], fmap[1], fmap[2]);

    // Rebuild with the same parameter tensors; only the FC weights reshape
    // into a (units, C, fh, fw) kernel. Row-major flatten order matches the
    // convolution's (c, y, x) weight order, so values copy through exactly.
    let mut params = ParamStore::default();
    let stats = StatStore::default();
    let mut remap = std::collections::HashMap::new();
    for (i, (name, tensor)) in net.params.iter().enumerate() {
        let id = crate::graph::ParamId(i);
        if id == fc_weights {
            let reshaped = tensor.clone().reshape(&[fc_units, c, fh, fw])?;
            remap.insert(id.0, params.add(name, reshaped));
        } else {
            remap.insert(id.0, params.add(name, tensor.clone()));
        }
    }

    let mut new_nodes = Vec::new();
    for (i, node) in nodes.iter().enumerate() {
        if i == flatten_pos {
            continue; // flatten disappears
        }
        if i == flatten_pos + 1 {
            new_nodes.push(Node::named(
                Layer::Conv2d {
                    weights: remap[&fc_weights.0],
                    bias: remap[&fc_bias.0],
                    filters: fc_units,
                    kernel: (fh, fw),
                    stride: 1,
                    padding: 0,
                },
                node.name.clone().unwrap_or_else(|| "fcn_conv".into()),
            ));
            continue;
        }
        let mut remapped = node.clone();
        remap_layer(&mut remapped.layer, &remap);
        new_nodes.push(remapped);
    }

    Ok(NetworkGraph::new(
        net.input_shape.clone(),
        Topology::Sequential(new_nodes),
        OutputContract::ObjectnessMap,
        params,
        stats,
    ))
}

fn remap_layer(layer: &mut Layer, remap: &std::collections::HashMap<usize, crate::graph::ParamId>) {
    match layer {
        Layer::Conv2d { weights, bias, .. } | Layer::FullyConnected { weights, bias, .. } => {
            *weights = remap[&weights.0];
            *bias = remap[&bias.0];
        }
        Layer::BatchNorm { gamma, beta, .. } => {
            *gamma = remap[&gamma.0];
            *beta = remap[&beta.0];
        }
        Layer::ChannelConcat { left, right } => {
            for n in left.iter_mut().chain(right.iter_mut()) {
                remap_layer(&mut n.layer, remap);
            }
        }
        _ => {}
    }
}

/// Dual-head detector: shared Conv32-MP-Conv32-MP-FC(128) trunk (unpadded
/// convolutions), a sigmoid objectness head and a softmax class head, batch
/// norm after every trainable layer except the outputs. `classes` includes
/// the background class.
pub fn build_detector(classes: usize, rng: &mut ChaCha8Rng) -> Result<NetworkGraph> {
    let mut asm = Assembler::new(rng);
    // 96 -> 92 -> 46 -> 42 -> 21
    let trunk = vec![
        asm.conv("conv1", 1, 32, (5, 5), 0)?,
        relu(),
        Node::new(Layer::MaxPool2x2),
        asm.bn("bn1", 32),
        asm.conv("conv2", 32, 32, (5, 5), 0)?,
        relu(),
        Node::new(Layer::MaxPool2x2),
        asm.bn("bn2", 32),
        Node::new(Layer::Flatten),
        asm.fc("shared_fc", 32 * 21 * 21, 128)?,
        relu(),
        asm.bn("bn_shared", 128),
    ];
    let objectness = vec![
        asm.fc("obj_fc1", 128, 96)?,
        relu(),
        asm.bn("bn_obj", 96),
        asm.fc("obj_out", 96, 1)?,
        act(Activation::Sigmoid),
    ];
    let class_head = vec![
        asm.fc("cls_fc1", 128, 96)?,
        relu(),
        asm.bn("bn_cls", 96),
        asm.fc("cls_out", 96, classes)?,
        act(Activation::Softmax),
    ];
    let net = NetworkGraph::new(
        vec![1, 96, 96],
        Topology::DualHead {
            trunk,
            objectness,
            classes: class_head,
        },
        OutputContract::Dual { classes },
        asm.params,
        asm.stats,
    );
    net.validate()?;
    Ok(net)
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

const MAGIC: [u8; 4] = *b"FLSN";
const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Serialize, Deserialize)]
struct Descriptor {
    input_shape: Vec<usize>,
    topology: Topology,
    output: OutputContract,
    param_names: Vec<String>,
    stat_names: Vec<String>,
}

fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    let name_bytes = name.as_bytes();
    w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
    w.write_all(name_bytes)?;
    w.write_all(&[DTYPE_F32, t.rank() as u8])?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn truncated(context: &str) -> Error {
    Error::ModelTruncated(context.to_string())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], context: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            truncated(context)
        } else {
            Error::Io(e)
        }
    })
}

fn read_tensor(r: &mut impl Read, expected_name: &str) -> Result<Tensor> {
    let mut len_buf = [0u8; 2];
    read_exact(r, &mut len_buf, "tensor name length")?;
    let mut name = vec![0u8; u16::from_le_bytes(len_buf) as usize];
    read_exact(r, &mut name, "tensor name")?;
    let name = String::from_utf8(name).map_err(|_| truncated("tensor name utf-8"))?;
    if name != expected_name {
        return Err(truncated(&format!(
            "tensor order mismatch: expected {expected_name:?}, found {name:?}"
        )));
    }
    let mut head = [0u8; 2];
    read_exact(r, &mut head, "tensor header")?;
    if head[0] != DTYPE_F32 {
        return Err(truncated(&format!("unknown dtype {}", head[0])));
    }
    let rank = head[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut e = [0u8; 8];
        read_exact(r, &mut e, "tensor extent")?;
        shape.push(u64::from_le_bytes(e) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut v = [0u8; 4];
    for _ in 0..n {
        read_exact(r, &mut v, "tensor data")?;
        data.push(f32::from_le_bytes(v));
    }
    Tensor::new(shape, data)
}

/// Write a model container: magic, version, JSON architecture descriptor,
/// then named little-endian f32 tensor chunks for parameters and running
/// statistics. The format round-trips bit-exactly.
pub fn save_model(net: &NetworkGraph, path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let descriptor = Descriptor {
        input_shape: net.input_shape.clone(),
        topology: net.topology.clone(),
        output: net.output,
        param_names: net.params.iter().map(|(n, _)| n.to_string()).collect(),
        stat_names: net.stats.iter().map(|(n, _)| n.to_string()).collect(),
    };
    let json = serde_json::to_vec(&descriptor)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let total = net.params.len() + net.stats.len();
    w.write_all(&(total as u64).to_le_bytes())?;
    for (name, tensor) in net.params.iter().chain(net.stats.iter()) {
        write_tensor(&mut w, name, tensor)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NetworkGraph> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::ModelMagic { found: magic });
    }
    let mut version = [0u8; 2];
    read_exact(&mut r, &mut version, "version")?;
    let version = u16::from_le_bytes(version);
    if version != VERSION {
        return Err(Error::ModelVersion {
            expected: VERSION,
            found: version,
        });
    }
    let mut json_len = [0u8; 8];
    read_exact(&mut r, &mut json_len, "descriptor length")?;
    let mut json = vec![0u8; u64::from_le_bytes(json_len) as usize];
    read_exact(&mut r, &mut json, "descriptor")?;
    let descriptor: Descriptor = serde_json::from_slice(&json)?;

    let mut count = [0u8; 8];
    read_exact(&mut r, &mut count, "tensor count")?;
    let count = u64::from_le_bytes(count) as usize;
    if count != descriptor.param_names.len() + descriptor.stat_names.len() {
        return Err(truncated("tensor count disagrees with descriptor"));
    }
    let mut params = ParamStore::default();
    for name in &descriptor.param_names {
        let t = read_tensor(&mut r, name)?;
        params.add(name, t);
    }
    let mut stats = StatStore::default();
    for name in &descriptor.stat_names {
        let t = read_tensor(&mut r, name)?;
        stats.add(name, t);
    }
    let net = NetworkGraph::new(
        descriptor.input_shape,
        descriptor.topology,
        descriptor.output,
        params,
        stats,
    );
    net.validate()?;
    Ok(net)
}
