//! Checkpoint format: a fixed magic and version, a length-prefixed JSON
//! header (topology, tensor directory, training metadata), then raw f32
//! little-endian weight blobs in declaration order. Everything in the
//! header serializes deterministically, so save -> load -> save is
//! byte-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{DsResBlockParams, Network, NodeParams, ResBlockParams};
use crate::ops::{ConvParams, DepthwiseConvParams};
use crate::tensor::{Dtype, Shape, Tensor};
use crate::topology::{ConvSpec, DepthwiseSpec, NodeKind, Topology, BLOCK_K};
use crate::train::StageRecord;

pub const MAGIC: [u8; 4] = *b"DNRF";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: Option<u64>,
    pub optimizer: Option<String>,
    pub loss: Option<String>,
    #[serde(default)]
    pub stages: Vec<StageRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u8,
    dtype: Dtype,
    topology: Topology,
    tensors: Vec<TensorEntry>,
    meta: CheckpointMeta,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    net: &Network<f32>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let bytes = encode_checkpoint(net, meta)?;
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Network<f32>, CheckpointMeta)> {
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    decode_checkpoint(&bytes)
}

pub fn encode_checkpoint(net: &Network<f32>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let names = net.param_names();
    let slices = net.param_slices();
    let tensors: Vec<TensorEntry> = names
        .iter()
        .zip(&slices)
        .map(|(n, s)| TensorEntry {
            name: n.clone(),
            len: s.len() as u64,
        })
        .collect();
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype: Dtype::F32,
        topology: net.topology().clone(),
        tensors,
        meta: meta.clone(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::format("checkpoint", format!("header serialization: {e}")))?;

    let blob_len: usize = slices.iter().map(|s| s.len() * 4).sum();
    let mut out = Vec::with_capacity(4 + 1 + 4 + header_json.len() + blob_len);
    out.extend_from_slice(&MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for s in slices {
        for v in s {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Network<f32>, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format("checkpoint", format!("bad magic {magic:02x?}")));
    }
    let version = r.take(1, "version")?[0];
    if version != FORMAT_VERSION {
        return Err(Error::format(
            "checkpoint",
            format!("unsupported format version {version} (expected {FORMAT_VERSION})"),
        ));
    }
    let len_bytes = r.take(4, "header length")?;
    let header_len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
    let header_json = r.take(header_len, "header")?;
    let header: Header = serde_json::from_slice(header_json)
        .map_err(|e| Error::format("checkpoint", format!("header parse: {e}")))?;
    if header.format_version != version {
        return Err(Error::format("checkpoint", "header/version field mismatch"));
    }
    if header.dtype != Dtype::F32 {
        return Err(Error::format(
            "checkpoint",
            format!("unsupported dtype {} (expected f32)", header.dtype),
        ));
    }

    let mut params = Vec::with_capacity(header.topology.nodes().len());
    for node in header.topology.nodes() {
        params.push(read_node_params(&mut r, &node.kind)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            "checkpoint",
            format!("{} trailing bytes after weight blobs", bytes.len() - r.pos),
        ));
    }

    let net = Network::from_parts(header.topology, params)?;

    // Cross-check the tensor directory against what was reconstructed.
    let names = net.param_names();
    let slices = net.param_slices();
    if names.len() != header.tensors.len() {
        return Err(Error::format(
            "checkpoint",
            format!(
                "tensor directory lists {} tensors, topology implies {}",
                header.tensors.len(),
                names.len()
            ),
        ));
    }
    for ((name, slice), entry) in names.iter().zip(&slices).zip(&header.tensors) {
        if name != &entry.name || slice.len() as u64 != entry.len {
            return Err(Error::format(
                "checkpoint",
                format!(
                    "tensor directory mismatch: header has {}[{}], topology implies {}[{}]",
                    entry.name,
                    entry.len,
                    name,
                    slice.len()
                ),
            ));
        }
    }
    Ok((net, header.meta))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                "checkpoint",
                format!("truncated while reading {what} ({} bytes short)", self.pos + n - self.bytes.len()),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn f32_tensor(&mut self, shape: Shape, what: &str) -> Result<Tensor<f32>> {
        let data = self.f32_vec(shape.count(), what)?;
        Tensor::new(shape, data)
    }

    fn f32_vec(&mut self, len: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(len * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

fn read_node_params(r: &mut Reader<'_>, kind: &NodeKind) -> Result<NodeParams<f32>> {
    let conv = |r: &mut Reader<'_>, out_ch: usize, in_ch: usize, k: usize, pad: usize, what: &str| -> Result<ConvParams<f32>> {
        let w = r.f32_tensor(Shape::new(out_ch, in_ch, k, k), what)?;
        let b = r.f32_vec(out_ch, what)?;
        ConvParams::new(w, b, pad)
    };
    let dw = |r: &mut Reader<'_>, ch: usize, k: usize, pad: usize, what: &str| -> Result<DepthwiseConvParams<f32>> {
        let w = r.f32_tensor(Shape::new(ch, 1, k, k), what)?;
        let b = r.f32_vec(ch, what)?;
        DepthwiseConvParams::new(w, b, pad)
    };
    let pad_same = (BLOCK_K - 1) / 2;
    Ok(match *kind {
        NodeKind::Relu => NodeParams::None,
        NodeKind::Conv(ConvSpec {
            in_ch,
            out_ch,
            k,
            pad,
        }) => NodeParams::Conv(conv(r, out_ch, in_ch, k, pad, "conv weights")?),
        NodeKind::DepthwiseConv(DepthwiseSpec { channels, k, pad }) => {
            NodeParams::Depthwise(dw(r, channels, k, pad, "depthwise weights")?)
        }
        NodeKind::ResBlock { channels } => NodeParams::Res(ResBlockParams {
            conv1: conv(r, channels, channels, BLOCK_K, pad_same, "block conv1")?,
            conv2: conv(r, channels, channels, BLOCK_K, pad_same, "block conv2")?,
        }),
        NodeKind::DsResBlock { channels } => NodeParams::Ds(DsResBlockParams {
            depthwise: dw(r, channels, BLOCK_K, pad_same, "block depthwise")?,
            pointwise: conv(r, channels, channels, 1, 0, "block pointwise")?,
        }),
    })
}
