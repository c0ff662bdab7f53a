//! Parameterized network over a [`Topology`]: weight storage, initialization,
//! forward inference, and reverse-mode gradients via an explicit tape.
//!
//! Weight policy: fresh layers draw from N(0, 0.001) in f64 before casting
//! to the element type; biases start at zero. Growth and evolution never
//! touch surviving tensors, so inherited weights are bit-identical.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops::{
    self, conv2d_backward, conv2d_forward, depthwise_conv2d_backward, depthwise_conv2d_forward,
    relu_backward, relu_forward, ConvParams, DepthwiseConvParams,
};
use crate::tensor::{Element, Shape, Tensor};
use crate::topology::{ConvSpec, DepthwiseSpec, NodeKind, Topology, BLOCK_K};

/// Standard deviation for fresh weight tensors.
pub const INIT_STD: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct ResBlockParams<T> {
    pub conv1: ConvParams<T>,
    pub conv2: ConvParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DsResBlockParams<T> {
    pub depthwise: DepthwiseConvParams<T>,
    pub pointwise: ConvParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeParams<T> {
    None,
    Conv(ConvParams<T>),
    Depthwise(DepthwiseConvParams<T>),
    Res(ResBlockParams<T>),
    Ds(DsResBlockParams<T>),
}

/// Per-parameter-tensor gradients, positionally aligned with
/// [`Network::param_slices`].
pub struct Gradients<T> {
    tensors: Vec<Vec<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn tensors(&self) -> &[Vec<T>] {
        &self.tensors
    }

    pub fn slices(&self) -> Vec<&[T]> {
        self.tensors.iter().map(|t| t.as_slice()).collect()
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v.to64() * v.to64())
            .sum::<f64>()
            .sqrt()
    }
}

/// Saved forward activations for one node, consumed by [`Network::backward`].
enum NodeTape<T> {
    Conv {
        input: Tensor<T>,
    },
    Depthwise {
        input: Tensor<T>,
    },
    Relu {
        input: Tensor<T>,
    },
    Res {
        input: Tensor<T>,
        pre1: Tensor<T>,
        act1: Tensor<T>,
    },
    Ds {
        input: Tensor<T>,
        pre1: Tensor<T>,
        act1: Tensor<T>,
        pre2: Tensor<T>,
    },
}

pub struct Tape<T> {
    nodes: Vec<NodeTape<T>>,
    output_shape: Shape,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    topology: Topology,
    params: Vec<NodeParams<T>>,
}

impl<T: Element> Network<T> {
    /// Fresh base network (three conv layers, no blocks).
    pub fn build_base(rng: &mut impl Rng) -> Self {
        Network::with_random_params(Topology::base(), rng).expect("base topology is valid")
    }

    /// Instantiate any topology with the standard weight policy.
    pub fn with_random_params(topology: Topology, rng: &mut impl Rng) -> Result<Self> {
        let params = topology
            .nodes()
            .iter()
            .map(|node| init_node(&node.kind, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Network { topology, params })
    }

    pub(crate) fn from_parts(topology: Topology, params: Vec<NodeParams<T>>) -> Result<Self> {
        if topology.nodes().len() != params.len() {
            return Err(Error::shape(
                "network assembly",
                topology.nodes().len(),
                params.len(),
            ));
        }
        for (node, p) in topology.nodes().iter().zip(&params) {
            let ok = matches!(
                (&node.kind, p),
                (NodeKind::Conv(_), NodeParams::Conv(_))
                    | (NodeKind::DepthwiseConv(_), NodeParams::Depthwise(_))
                    | (NodeKind::Relu, NodeParams::None)
                    | (NodeKind::ResBlock { .. }, NodeParams::Res(_))
                    | (NodeKind::DsResBlock { .. }, NodeParams::Ds(_))
            );
            if !ok {
                return Err(Error::topology(format!(
                    "parameter bundle does not match node '{}'",
                    node.name
                )));
            }
        }
        Ok(Network { topology, params })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn node_params(&self) -> &[NodeParams<T>] {
        &self.params
    }

    /// Grow by one standard residual block before the final conv. Existing
    /// tensors are moved over untouched; only the new block draws from `rng`.
    pub fn insert_resblock(&self, rng: &mut impl Rng) -> Result<Self> {
        self.topology.ensure_growable()?;
        let topology = self.topology.insert_resblock();
        let block = init_node(
            &NodeKind::ResBlock {
                channels: crate::topology::BLOCK_CHANNELS,
            },
            rng,
        )?;
        let mut params = self.params.clone();
        params.insert(params.len() - 1, block);
        Network::from_parts(topology, params)
    }

    /// Replace the standard block `index_from_tail` positions from the
    /// output side with a freshly initialized depthwise-separable block.
    /// Every other tensor is inherited bit-identical.
    pub fn evolve_block(&self, index_from_tail: usize, rng: &mut impl Rng) -> Result<Self> {
        let topology = self.topology.evolve_block(index_from_tail)?;
        let blocks = self.topology.block_indices();
        let node_idx = blocks[blocks.len() - 1 - index_from_tail];
        let channels = match self.topology.nodes()[node_idx].kind {
            NodeKind::ResBlock { channels } => channels,
            _ => unreachable!("evolve_block validated the target"),
        };
        let mut params = self.params.clone();
        params[node_idx] = init_node(&NodeKind::DsResBlock { channels }, rng)?;
        Network::from_parts(topology, params)
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.topology.output_shape(input.shape())?;
        let mut x = input.clone();
        for (node, p) in self.topology.nodes().iter().zip(&self.params) {
            x = apply_node(&node.name, p, &x)?;
        }
        Ok(x)
    }

    /// Forward pass that records the activations backward needs.
    pub fn forward_training(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Tape<T>)> {
        self.topology.output_shape(input.shape())?;
        let mut x = input.clone();
        let mut nodes = Vec::with_capacity(self.params.len());
        for p in &self.params {
            match p {
                NodeParams::None => {
                    let out = relu_forward(&x);
                    nodes.push(NodeTape::Relu { input: x });
                    x = out;
                }
                NodeParams::Conv(c) => {
                    let out = conv2d_forward(&x, c)?;
                    nodes.push(NodeTape::Conv { input: x });
                    x = out;
                }
                NodeParams::Depthwise(d) => {
                    let out = depthwise_conv2d_forward(&x, d)?;
                    nodes.push(NodeTape::Depthwise { input: x });
                    x = out;
                }
                NodeParams::Res(b) => {
                    let pre1 = conv2d_forward(&x, &b.conv1)?;
                    let act1 = relu_forward(&pre1);
                    let pre2 = conv2d_forward(&act1, &b.conv2)?;
                    let out = x.add(&pre2)?;
                    nodes.push(NodeTape::Res {
                        input: x,
                        pre1,
                        act1,
                    });
                    x = out;
                }
                NodeParams::Ds(b) => {
                    let pre1 = depthwise_conv2d_forward(&x, &b.depthwise)?;
                    let act1 = relu_forward(&pre1);
                    let pre2 = conv2d_forward(&act1, &b.pointwise)?;
                    let act2 = relu_forward(&pre2);
                    let out = x.add(&act2)?;
                    nodes.push(NodeTape::Ds {
                        input: x,
                        pre1,
                        act1,
                        pre2,
                    });
                    x = out;
                }
            }
        }
        let tape = Tape {
            nodes,
            output_shape: x.shape(),
        };
        Ok((x, tape))
    }

    /// Reverse pass. Returns parameter gradients (aligned with
    /// [`Network::param_slices`]) and the gradient with respect to the input.
    pub fn backward(&self, tape: &Tape<T>, grad_out: &Tensor<T>) -> Result<(Gradients<T>, Tensor<T>)> {
        if grad_out.shape() != tape.output_shape {
            return Err(Error::shape("backward", tape.output_shape, grad_out.shape()));
        }
        if tape.nodes.len() != self.params.len() {
            return Err(Error::shape("backward tape", self.params.len(), tape.nodes.len()));
        }

        // Gradient tensors are produced tail-first, then reversed into
        // declaration order.
        let mut rev: Vec<Vec<T>> = Vec::new();
        let mut grad = grad_out.clone();

        for (p, t) in self.params.iter().zip(&tape.nodes).rev() {
            match (p, t) {
                (NodeParams::None, NodeTape::Relu { input }) => {
                    grad = relu_backward(input, &grad)?;
                }
                (NodeParams::Conv(c), NodeTape::Conv { input }) => {
                    let g = conv2d_backward(input, c, &grad)?;
                    rev.push(g.grad_bias);
                    rev.push(g.grad_weights.into_data());
                    grad = g.grad_input;
                }
                (NodeParams::Depthwise(d), NodeTape::Depthwise { input }) => {
                    let g = depthwise_conv2d_backward(input, d, &grad)?;
                    rev.push(g.grad_bias);
                    rev.push(g.grad_weights.into_data());
                    grad = g.grad_input;
                }
                (NodeParams::Res(b), NodeTape::Res { input, pre1, act1 }) => {
                    // y = x + conv2(relu(conv1(x))); the add fans the
                    // incoming gradient to both the skip and the conv path.
                    let g2 = conv2d_backward(act1, &b.conv2, &grad)?;
                    let g_pre1 = relu_backward(pre1, &g2.grad_input)?;
                    let g1 = conv2d_backward(input, &b.conv1, &g_pre1)?;
                    rev.push(g2.grad_bias);
                    rev.push(g2.grad_weights.into_data());
                    rev.push(g1.grad_bias);
                    rev.push(g1.grad_weights.into_data());
                    grad = grad.add(&g1.grad_input)?;
                }
                (
                    NodeParams::Ds(b),
                    NodeTape::Ds {
                        input,
                        pre1,
                        act1,
                        pre2,
                    },
                ) => {
                    // y = x + relu(pw(relu(dw(x))))
                    let g_pre2 = relu_backward(pre2, &grad)?;
                    let gp = conv2d_backward(act1, &b.pointwise, &g_pre2)?;
                    let g_pre1 = relu_backward(pre1, &gp.grad_input)?;
                    let gd = depthwise_conv2d_backward(input, &b.depthwise, &g_pre1)?;
                    rev.push(gp.grad_bias);
                    rev.push(gp.grad_weights.into_data());
                    rev.push(gd.grad_bias);
                    rev.push(gd.grad_weights.into_data());
                    grad = grad.add(&gd.grad_input)?;
                }
                _ => return Err(Error::topology("tape does not match network structure")),
            }
        }

        rev.reverse();
        Ok((Gradients { tensors: rev }, grad))
    }

    /// Parameter tensors in declaration order (weights before bias within
    /// each layer). This order defines optimizer-state and checkpoint layout.
    pub fn param_slices(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for p in &self.params {
            match p {
                NodeParams::None => {}
                NodeParams::Conv(c) => {
                    out.push(c.weights().data());
                    out.push(c.bias());
                }
                NodeParams::Depthwise(d) => {
                    out.push(d.weights().data());
                    out.push(d.bias());
                }
                NodeParams::Res(b) => {
                    out.push(b.conv1.weights().data());
                    out.push(b.conv1.bias());
                    out.push(b.conv2.weights().data());
                    out.push(b.conv2.bias());
                }
                NodeParams::Ds(b) => {
                    out.push(b.depthwise.weights().data());
                    out.push(b.depthwise.bias());
                    out.push(b.pointwise.weights().data());
                    out.push(b.pointwise.bias());
                }
            }
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        for p in &mut self.params {
            match p {
                NodeParams::None => {}
                NodeParams::Conv(c) => {
                    let (w, b) = c.parts_mut();
                    out.push(w);
                    out.push(b);
                }
                NodeParams::Depthwise(d) => {
                    let (w, b) = d.parts_mut();
                    out.push(w);
                    out.push(b);
                }
                NodeParams::Res(blk) => {
                    let (w1, b1) = blk.conv1.parts_mut();
                    out.push(w1);
                    out.push(b1);
                    let (w2, b2) = blk.conv2.parts_mut();
                    out.push(w2);
                    out.push(b2);
                }
                NodeParams::Ds(blk) => {
                    let (w1, b1) = blk.depthwise.parts_mut();
                    out.push(w1);
                    out.push(b1);
                    let (w2, b2) = blk.pointwise.parts_mut();
                    out.push(w2);
                    out.push(b2);
                }
            }
        }
        out
    }

    /// Dotted tensor names aligned with [`Network::param_slices`].
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (node, p) in self.topology.nodes().iter().zip(&self.params) {
            let n = &node.name;
            match p {
                NodeParams::None => {}
                NodeParams::Conv(_) | NodeParams::Depthwise(_) => {
                    out.push(format!("{n}.weight"));
                    out.push(format!("{n}.bias"));
                }
                NodeParams::Res(_) => {
                    for part in ["conv1", "conv2"] {
                        out.push(format!("{n}.{part}.weight"));
                        out.push(format!("{n}.{part}.bias"));
                    }
                }
                NodeParams::Ds(_) => {
                    for part in ["dw", "pw"] {
                        out.push(format!("{n}.{part}.weight"));
                        out.push(format!("{n}.{part}.bias"));
                    }
                }
            }
        }
        out
    }

    pub fn param_element_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }
}

fn apply_node<T: Element>(name: &str, p: &NodeParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    match p {
        NodeParams::None => Ok(relu_forward(x)),
        NodeParams::Conv(c) => conv2d_forward(x, c),
        NodeParams::Depthwise(d) => depthwise_conv2d_forward(x, d),
        NodeParams::Res(b) => {
            let h = conv2d_forward(x, &b.conv1)?;
            let h = relu_forward(&h);
            let h = conv2d_forward(&h, &b.conv2)?;
            x.add(&h)
        }
        NodeParams::Ds(b) => {
            let h = depthwise_conv2d_forward(x, &b.depthwise)?;
            let h = relu_forward(&h);
            let h = conv2d_forward(&h, &b.pointwise)?;
            let h = relu_forward(&h);
            x.add(&h)
        }
    }
    .map_err(|e| match e {
        Error::ShapeMismatch {
            context,
            expected,
            actual,
        } => Error::ShapeMismatch {
            context: format!("{name}: {context}"),
            expected,
            actual,
        },
        other => other,
    })
}

fn gaussian_tensor<T: Element>(shape: Shape, std: f64, rng: &mut impl Rng) -> Tensor<T> {
    // Draw in f64 so f32 and f64 networks see the same sequence.
    let normal = Normal::new(0.0f64, std).expect("valid std");
    Tensor::from_fn(shape, |_, _, _, _| T::of(normal.sample(rng)))
}

fn init_node<T: Element>(kind: &NodeKind, rng: &mut impl Rng) -> Result<NodeParams<T>> {
    Ok(match *kind {
        NodeKind::Relu => NodeParams::None,
        NodeKind::Conv(ConvSpec {
            in_ch,
            out_ch,
            k,
            pad,
        }) => NodeParams::Conv(ConvParams::new(
            gaussian_tensor(Shape::new(out_ch, in_ch, k, k), INIT_STD, rng),
            vec![T::zero(); out_ch],
            pad,
        )?),
        NodeKind::DepthwiseConv(DepthwiseSpec { channels, k, pad }) => {
            NodeParams::Depthwise(DepthwiseConvParams::new(
                gaussian_tensor(Shape::new(channels, 1, k, k), INIT_STD, rng),
                vec![T::zero(); channels],
                pad,
            )?)
        }
        NodeKind::ResBlock { channels } => {
            let pad = (BLOCK_K - 1) / 2;
            NodeParams::Res(ResBlockParams {
                conv1: ConvParams::new(
                    gaussian_tensor(Shape::new(channels, channels, BLOCK_K, BLOCK_K), INIT_STD, rng),
                    vec![T::zero(); channels],
                    pad,
                )?,
                conv2: ConvParams::new(
                    gaussian_tensor(Shape::new(channels, channels, BLOCK_K, BLOCK_K), INIT_STD, rng),
                    vec![T::zero(); channels],
                    pad,
                )?,
            })
        }
        NodeKind::DsResBlock { channels } => {
            let pad = (BLOCK_K - 1) / 2;
            NodeParams::Ds(DsResBlockParams {
                depthwise: DepthwiseConvParams::new(
                    gaussian_tensor(Shape::new(channels, 1, BLOCK_K, BLOCK_K), INIT_STD, rng),
                    vec![T::zero(); channels],
                    pad,
                )?,
                pointwise: ConvParams::new(
                    gaussian_tensor(Shape::new(channels, channels, 1, 1), INIT_STD, rng),
                    vec![T::zero(); channels],
                    0,
                )?,
            })
        }
    })
}

/// Re-export for callers that only need relu semantics.
pub use ops::relu_forward as relu;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{CountMode, CLEAN_PATCH, NOISY_PATCH};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_input(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut r = rng(seed);
        Tensor::from_fn(shape, |_, _, _, _| r.random_range(0.0..1.0))
    }

    #[test]
    fn patch_forward_produces_clean_patch_shape() {
        let mut r = rng(1);
        let net = Network::<f64>::build_base(&mut r);
        let input = random_input(Shape::new(2, 1, NOISY_PATCH, NOISY_PATCH), 2);
        let out = net.forward(&input).unwrap();
        assert_eq!(out.shape(), Shape::new(2, 1, CLEAN_PATCH, CLEAN_PATCH));
    }

    #[test]
    fn forward_is_deterministic_and_seed_sensitive() {
        let input = random_input(Shape::new(1, 1, NOISY_PATCH, NOISY_PATCH), 3);
        let a = Network::<f64>::build_base(&mut rng(7)).forward(&input).unwrap();
        let b = Network::<f64>::build_base(&mut rng(7)).forward(&input).unwrap();
        let c = Network::<f64>::build_base(&mut rng(8)).forward(&input).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn stored_elements_match_with_bias_count() {
        let mut r = rng(4);
        let mut net = Network::<f32>::build_base(&mut r);
        for _ in 0..3 {
            net = net.insert_resblock(&mut r).unwrap();
        }
        assert_eq!(
            net.param_element_count() as u64,
            net.topology().count_params(CountMode::WithBias)
        );
        assert_eq!(net.param_names().len(), net.param_slices().len());
    }

    #[test]
    fn zeroed_block_is_an_identity_mapping() {
        // With all block tensors zero, y = x + conv2(relu(conv1(x))) = x.
        let mut r = rng(5);
        let base = Network::<f64>::build_base(&mut r);
        let mut grown = base.insert_resblock(&mut r).unwrap();
        for (name, slice) in grown
            .param_names()
            .into_iter()
            .zip(grown.param_slices_mut())
        {
            if name.starts_with("rb1.") {
                slice.fill(0.0);
            }
        }
        let input = random_input(Shape::new(1, 1, NOISY_PATCH, NOISY_PATCH), 6);
        let a = base.forward(&input).unwrap();
        let b = grown.forward(&input).unwrap();
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn insertion_inherits_existing_tensors_bit_identical() {
        let mut r = rng(9);
        let base = Network::<f32>::build_base(&mut r);
        let grown = base.insert_resblock(&mut r).unwrap();
        let base_names = base.param_names();
        let grown_names = grown.param_names();
        let base_slices = base.param_slices();
        let grown_slices = grown.param_slices();
        for (i, name) in base_names.iter().enumerate() {
            let j = grown_names.iter().position(|n| n == name).unwrap();
            assert_eq!(base_slices[i], grown_slices[j], "tensor {name} changed");
        }
        // New block tensors exist and are small random values.
        assert!(grown_names.iter().any(|n| n == "rb1.conv1.weight"));
    }

    #[test]
    fn evolution_replaces_only_the_target_block() {
        let mut r = rng(10);
        let mut net = Network::<f32>::build_base(&mut r);
        for _ in 0..3 {
            net = net.insert_resblock(&mut r).unwrap();
        }
        let evolved = net.evolve_block(0, &mut r).unwrap();
        assert_eq!(evolved.topology().ds_block_count(), 1);
        let old_names = net.param_names();
        let old = net.param_slices();
        let new_names = evolved.param_names();
        let new = evolved.param_slices();
        for (i, name) in old_names.iter().enumerate() {
            if name.starts_with("rb3.") {
                continue;
            }
            let j = new_names.iter().position(|n| n == name).unwrap();
            assert_eq!(old[i], new[j], "tensor {name} changed");
        }
        assert!(new_names.iter().any(|n| n == "rb3.dw.weight"));
        assert!(new_names.iter().any(|n| n == "rb3.pw.weight"));
        // Double evolution of the same block is rejected.
        assert!(evolved.evolve_block(0, &mut r).is_err());
    }

    #[test]
    fn training_forward_matches_inference_forward() {
        let mut r = rng(11);
        let mut net = Network::<f64>::build_base(&mut r);
        net = net.insert_resblock(&mut r).unwrap();
        net = net.evolve_block(0, &mut r).unwrap();
        net = net.insert_resblock(&mut r).unwrap();
        let input = random_input(Shape::new(2, 1, NOISY_PATCH, NOISY_PATCH), 12);
        let a = net.forward(&input).unwrap();
        let (b, _tape) = net.forward_training(&input).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn backward_produces_aligned_gradients() {
        let mut r = rng(13);
        let net = Network::<f64>::build_base(&mut r)
            .insert_resblock(&mut r)
            .unwrap();
        let input = random_input(Shape::new(1, 1, NOISY_PATCH, NOISY_PATCH), 14);
        let (out, tape) = net.forward_training(&input).unwrap();
        let grad_out = Tensor::filled(out.shape(), 1.0);
        let (grads, grad_in) = net.backward(&tape, &grad_out).unwrap();
        assert_eq!(grads.tensors().len(), net.param_slices().len());
        for (g, p) in grads.tensors().iter().zip(net.param_slices()) {
            assert_eq!(g.len(), p.len());
        }
        assert_eq!(grad_in.shape(), input.shape());
        assert!(grads.l2_norm() > 0.0);
    }
}
