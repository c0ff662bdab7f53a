//! Network structure as data: an ordered list of named layer nodes plus the
//! provenance trail of how the structure came to be (base build, block
//! insertions, block evolutions). Parameter and MAC accounting live here so
//! they can be computed without instantiating weights.
//!
//! The fixed skeleton is:
//!   conv 1->64 9x9 pad 0, relu, conv 64->32 5x5 pad 0, relu,
//!   [residual blocks: 32 channels, spatially preserving],
//!   conv 32->1 5x5 pad 0
//! Residual blocks are always inserted directly before the final conv.
//! MAC counts use the convention that every layer is charged for the full
//! input area (h * w multiply-accumulates per kernel tap), which keeps
//! reported totals comparable across valid-padding and same-padding layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Shape;

pub const BLOCK_CHANNELS: usize = 32;
pub const BASE_C1_OUT: usize = 64;
pub const BASE_C1_K: usize = 9;
pub const BASE_C2_K: usize = 5;
pub const BASE_OUT_K: usize = 5;
pub const BLOCK_K: usize = 3;

/// Receptive-field patch sizes implied by the skeleton: a noisy input patch
/// maps to a clean target patch smaller by 8 pixels per side.
pub const NOISY_PATCH: usize = 33;
pub const CLEAN_PATCH: usize = 17;
pub const PATCH_OFFSET: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub pad: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthwiseSpec {
    pub channels: usize,
    pub k: usize,
    pub pad: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeKind {
    Conv(ConvSpec),
    DepthwiseConv(DepthwiseSpec),
    Relu,
    /// conv 3x3 same -> relu -> conv 3x3 same -> skip add (no relu after add)
    ResBlock { channels: usize },
    /// depthwise 3x3 same -> relu -> pointwise 1x1 -> relu -> skip add
    DsResBlock { channels: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub name: String,
    #[serde(flatten)]
    pub kind: NodeKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProvenanceAction {
    BuildBase,
    InsertResBlock,
    EvolveToDs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceEvent {
    pub stage: usize,
    pub action: ProvenanceAction,
    pub node: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountMode {
    WeightsOnly,
    WithBias,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    nodes: Vec<LayerNode>,
    provenance: Vec<ProvenanceEvent>,
}

impl Topology {
    /// The three-layer base skeleton with no residual blocks.
    pub fn base() -> Self {
        let nodes = vec![
            LayerNode {
                name: "c1".into(),
                kind: NodeKind::Conv(ConvSpec {
                    in_ch: 1,
                    out_ch: BASE_C1_OUT,
                    k: BASE_C1_K,
                    pad: 0,
                }),
            },
            LayerNode {
                name: "relu1".into(),
                kind: NodeKind::Relu,
            },
            LayerNode {
                name: "c2".into(),
                kind: NodeKind::Conv(ConvSpec {
                    in_ch: BASE_C1_OUT,
                    out_ch: BLOCK_CHANNELS,
                    k: BASE_C2_K,
                    pad: 0,
                }),
            },
            LayerNode {
                name: "relu2".into(),
                kind: NodeKind::Relu,
            },
            LayerNode {
                name: "c_out".into(),
                kind: NodeKind::Conv(ConvSpec {
                    in_ch: BLOCK_CHANNELS,
                    out_ch: 1,
                    k: BASE_OUT_K,
                    pad: 0,
                }),
            },
        ];
        Topology {
            nodes,
            provenance: vec![ProvenanceEvent {
                stage: 0,
                action: ProvenanceAction::BuildBase,
                node: "base".into(),
            }],
        }
    }

    /// Base skeleton plus `blocks` standard residual blocks.
    pub fn with_blocks(blocks: usize) -> Self {
        let mut t = Topology::base();
        for _ in 0..blocks {
            t = t.insert_resblock();
        }
        t
    }

    /// Arbitrary node list, validated for channel-chain consistency. Used
    /// for layer-level gradient fragments; trained networks always come
    /// from [`Topology::base`] plus growth operations.
    pub fn from_nodes(nodes: Vec<LayerNode>) -> Result<Self> {
        let t = Topology {
            nodes,
            provenance: Vec::new(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn provenance(&self) -> &[ProvenanceEvent] {
        &self.provenance
    }

    fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::topology("empty node list"));
        }
        let mut ch: Option<usize> = None;
        for node in &self.nodes {
            let (need, out) = match node.kind {
                NodeKind::Conv(c) => (Some(c.in_ch), Some(c.out_ch)),
                NodeKind::DepthwiseConv(d) => (Some(d.channels), Some(d.channels)),
                NodeKind::Relu => (None, None),
                NodeKind::ResBlock { channels } | NodeKind::DsResBlock { channels } => {
                    (Some(channels), Some(channels))
                }
            };
            if let (Some(have), Some(need)) = (ch, need) {
                if have != need {
                    return Err(Error::topology(format!(
                        "node '{}' expects {} input channels, previous layer produces {}",
                        node.name, need, have
                    )));
                }
            }
            if let Some(out) = out {
                ch = Some(out);
            }
        }
        Ok(())
    }

    fn is_standard_skeleton(&self) -> bool {
        let n = self.nodes.len();
        n >= 5
            && matches!(self.nodes[n - 1].kind, NodeKind::Conv(c) if c.out_ch == 1)
            && matches!(self.nodes[0].kind, NodeKind::Conv(c) if c.in_ch == 1)
    }

    /// Node indices of residual blocks (either kind), head to tail.
    pub fn block_indices(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| {
                matches!(
                    n.kind,
                    NodeKind::ResBlock { .. } | NodeKind::DsResBlock { .. }
                )
            })
            .map(|(i, _)| i)
            .collect()
    }

    pub fn block_count(&self) -> usize {
        self.block_indices().len()
    }

    pub fn ds_block_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::DsResBlock { .. }))
            .count()
    }

    /// Convolutional layer count: each residual block contributes two conv
    /// layers, so the depth is 3 + 2 * blocks.
    pub fn conv_layer_count(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match n.kind {
                NodeKind::Conv(_) | NodeKind::DepthwiseConv(_) => 1,
                NodeKind::ResBlock { .. } | NodeKind::DsResBlock { .. } => 2,
                NodeKind::Relu => 0,
            })
            .sum()
    }

    /// Grow by one standard residual block, inserted directly before the
    /// final conv layer. Provenance records the cascade stage index.
    pub fn insert_resblock(&self) -> Self {
        let mut t = self.clone();
        let stage = t.block_count() + 1;
        let name = format!("rb{stage}");
        let pos = t.nodes.len() - 1;
        t.nodes.insert(
            pos,
            LayerNode {
                name: name.clone(),
                kind: NodeKind::ResBlock {
                    channels: BLOCK_CHANNELS,
                },
            },
        );
        t.provenance.push(ProvenanceEvent {
            stage,
            action: ProvenanceAction::InsertResBlock,
            node: name,
        });
        t
    }

    /// Replace one standard block with its depthwise-separable counterpart.
    /// `index_from_tail` counts from the output side: 0 is the block nearest
    /// the final conv. The target must currently be a standard block.
    pub fn evolve_block(&self, index_from_tail: usize) -> Result<Self> {
        let blocks = self.block_indices();
        if index_from_tail >= blocks.len() {
            return Err(Error::arg(format!(
                "block index {index_from_tail} from tail out of range ({} blocks)",
                blocks.len()
            )));
        }
        let node_idx = blocks[blocks.len() - 1 - index_from_tail];
        let mut t = self.clone();
        let node = &mut t.nodes[node_idx];
        match node.kind {
            NodeKind::ResBlock { channels } => {
                node.kind = NodeKind::DsResBlock { channels };
            }
            _ => {
                return Err(Error::topology(format!(
                    "block '{}' is already depthwise-separable",
                    node.name
                )))
            }
        }
        let name = t.nodes[node_idx].name.clone();
        let stage = t.ds_block_count();
        t.provenance.push(ProvenanceEvent {
            stage,
            action: ProvenanceAction::EvolveToDs,
            node: name,
        });
        Ok(t)
    }

    pub fn ensure_growable(&self) -> Result<()> {
        if !self.is_standard_skeleton() {
            return Err(Error::topology(
                "growth operations require the standard denoising skeleton",
            ));
        }
        Ok(())
    }

    /// Walk the node list with exact convolution arithmetic. Validates
    /// channel counts and that every layer has enough spatial extent.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let mut c = input.c;
        let mut h = input.h;
        let mut w = input.w;
        for node in &self.nodes {
            match node.kind {
                NodeKind::Conv(spec) => {
                    if c != spec.in_ch {
                        return Err(Error::shape(
                            format!("layer '{}' input channels", node.name),
                            spec.in_ch,
                            c,
                        ));
                    }
                    (h, w) = conv_hw(h, w, spec.k, spec.pad, &node.name)?;
                    c = spec.out_ch;
                }
                NodeKind::DepthwiseConv(spec) => {
                    if c != spec.channels {
                        return Err(Error::shape(
                            format!("layer '{}' channels", node.name),
                            spec.channels,
                            c,
                        ));
                    }
                    (h, w) = conv_hw(h, w, spec.k, spec.pad, &node.name)?;
                }
                NodeKind::Relu => {}
                NodeKind::ResBlock { channels } | NodeKind::DsResBlock { channels } => {
                    if c != channels {
                        return Err(Error::shape(
                            format!("block '{}' channels", node.name),
                            channels,
                            c,
                        ));
                    }
                    // Interior convs use same padding; dims are preserved.
                    (h, w) = conv_hw(h, w, BLOCK_K, (BLOCK_K - 1) / 2, &node.name)?;
                }
            }
        }
        Ok(Shape::new(input.n, c, h, w))
    }

    /// Total spatial shrink across the network (both sides combined).
    pub fn spatial_shrink(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match n.kind {
                NodeKind::Conv(s) => s.k - 1 - 2 * s.pad.min((s.k - 1) / 2),
                NodeKind::DepthwiseConv(s) => s.k - 1 - 2 * s.pad.min((s.k - 1) / 2),
                _ => 0,
            })
            .sum()
    }

    pub fn count_params(&self, mode: CountMode) -> u64 {
        self.layer_report(1, 1)
            .iter()
            .map(|r| match mode {
                CountMode::WeightsOnly => r.weights,
                CountMode::WithBias => r.weights + r.biases,
            })
            .sum()
    }

    /// MACs for one forward pass at the given input size, full-area
    /// convention (every layer charged h * w positions).
    pub fn count_macs(&self, h: usize, w: usize) -> u64 {
        self.layer_report(h, w).iter().map(|r| r.macs).sum()
    }

    /// Per-node accounting rows (blocks are reported as single rows).
    pub fn layer_report(&self, h: usize, w: usize) -> Vec<LayerReport> {
        let area = (h as u64) * (w as u64);
        self.nodes
            .iter()
            .filter_map(|n| {
                let (weights, biases) = match n.kind {
                    NodeKind::Conv(s) => (
                        (s.out_ch * s.in_ch * s.k * s.k) as u64,
                        s.out_ch as u64,
                    ),
                    NodeKind::DepthwiseConv(s) => ((s.channels * s.k * s.k) as u64, s.channels as u64),
                    NodeKind::Relu => return None,
                    NodeKind::ResBlock { channels } => {
                        let c = channels as u64;
                        (2 * c * c * (BLOCK_K * BLOCK_K) as u64, 2 * c)
                    }
                    NodeKind::DsResBlock { channels } => {
                        let c = channels as u64;
                        (c * (BLOCK_K * BLOCK_K) as u64 + c * c, 2 * c)
                    }
                };
                Some(LayerReport {
                    name: n.name.clone(),
                    kind: kind_label(&n.kind).to_string(),
                    weights,
                    biases,
                    macs: weights * area,
                })
            })
            .collect()
    }

    /// Short structural identifier, e.g. "dn13-ds2" for a 13-layer network
    /// with two evolved blocks.
    pub fn id(&self) -> String {
        let ds = self.ds_block_count();
        if ds == 0 {
            format!("dn{}", self.conv_layer_count())
        } else {
            format!("dn{}-ds{}", self.conv_layer_count(), ds)
        }
    }

    pub fn describe(&self) -> String {
        let mut out = String::new();
        for node in &self.nodes {
            let line = match node.kind {
                NodeKind::Conv(s) => format!(
                    "{:<8} conv {}x{} {} -> {} (pad {})",
                    node.name, s.k, s.k, s.in_ch, s.out_ch, s.pad
                ),
                NodeKind::DepthwiseConv(s) => format!(
                    "{:<8} depthwise {}x{} on {} channels (pad {})",
                    node.name, s.k, s.k, s.channels, s.pad
                ),
                NodeKind::Relu => format!("{:<8} relu", node.name),
                NodeKind::ResBlock { channels } => {
                    format!("{:<8} resblock {channels} channels (3x3 + 3x3, skip add)", node.name)
                }
                NodeKind::DsResBlock { channels } => format!(
                    "{:<8} ds-resblock {channels} channels (depthwise 3x3 + pointwise 1x1, skip add)",
                    node.name
                ),
            };
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct LayerReport {
    pub name: String,
    pub kind: String,
    pub weights: u64,
    pub biases: u64,
    pub macs: u64,
}

fn kind_label(kind: &NodeKind) -> &'static str {
    match kind {
        NodeKind::Conv(_) => "conv",
        NodeKind::DepthwiseConv(_) => "depthwise",
        NodeKind::Relu => "relu",
        NodeKind::ResBlock { .. } => "resblock",
        NodeKind::DsResBlock { .. } => "ds-resblock",
    }
}

fn conv_hw(h: usize, w: usize, k: usize, pad: usize, name: &str) -> Result<(usize, usize)> {
    let eh = h + 2 * pad;
    let ew = w + 2 * pad;
    if eh < k || ew < k {
        return Err(Error::shape(
            format!("layer '{name}' spatial extent"),
            format!("at least {k}x{k} after padding"),
            format!("{eh}x{ew}"),
        ));
    }
    Ok((eh - k + 1, ew - k + 1))
}
