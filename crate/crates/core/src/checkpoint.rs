//! Binary weight checkpoints: a JSON header describing the layer stack
//! followed by every parameter (and batch-norm running state) as
//! little-endian f64 in declaration order.
//!
//! Layout, byte for byte:
//!
//! ```text
//! offset 0   magic "UGCK"
//! offset 4   u32 LE  format version (currently 1)
//! offset 8   u64 LE  header byte length H
//! offset 16  H bytes of UTF-8 JSON (node metadata, seed, payload count)
//! offset 16+H  payload: f64 LE values
//! ```
//!
//! Payload order per node: conv weights then bias; ugconv weights (grouped
//! filters or circulant first columns) then bias; batch norm gamma, beta,
//! running mean, running variance. Parameterless nodes contribute nothing.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{CirculantLayer, ConvGeometry, GroupConvLayer};
use crate::nn::{BatchNormState, LayerNode, Network};
use crate::tensor::Tensor;
use crate::transforms::UnitarySpec;
use crate::ugconv::{BlockParams, Sidedness, UGConvBlock};

const MAGIC: &[u8; 4] = b"UGCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ParamsMeta {
    Grouped { geometry: ConvGeometry },
    FourierColumns {
        block_len: usize,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        pad: usize,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum NodeMeta {
    Conv { geometry: ConvGeometry, has_bias: bool },
    UgConv {
        p_spec: UnitarySpec,
        q_spec: UnitarySpec,
        sidedness: Sidedness,
        params: ParamsMeta,
        has_bias: bool,
    },
    BatchNorm { channels: usize },
    Relu,
    MaxPool2x2,
    GlobalAvgPool,
    Flatten,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    seed: u64,
    nodes: Vec<NodeMeta>,
    payload_len: usize,
}

fn node_meta(node: &LayerNode<f64>) -> NodeMeta {
    match node {
        LayerNode::Conv(c) => NodeMeta::Conv { geometry: c.geometry, has_bias: c.bias.is_some() },
        LayerNode::UGConv(b) => NodeMeta::UgConv {
            p_spec: b.p_spec.clone(),
            q_spec: b.q_spec.clone(),
            sidedness: b.sidedness,
            params: match &b.params {
                BlockParams::Grouped(g) => ParamsMeta::Grouped { geometry: g.geometry },
                BlockParams::FourierColumns(c) => ParamsMeta::FourierColumns {
                    block_len: c.block_len,
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                    kernel: c.kernel(),
                    stride: c.stride,
                    pad: c.pad,
                },
            },
            has_bias: b.bias.is_some(),
        },
        LayerNode::BatchNorm(s) => NodeMeta::BatchNorm { channels: s.channels() },
        LayerNode::ReLU => NodeMeta::Relu,
        LayerNode::MaxPool2x2 => NodeMeta::MaxPool2x2,
        LayerNode::GlobalAvgPool => NodeMeta::GlobalAvgPool,
        LayerNode::Flatten => NodeMeta::Flatten,
    }
}

fn node_payload(node: &LayerNode<f64>, out: &mut Vec<f64>) {
    match node {
        LayerNode::Conv(c) => {
            out.extend_from_slice(c.weights.data());
            if let Some(b) = &c.bias {
                out.extend_from_slice(b);
            }
        }
        LayerNode::UGConv(b) => {
            out.extend_from_slice(b.weights().data());
            if let Some(bias) = &b.bias {
                out.extend_from_slice(bias);
            }
        }
        LayerNode::BatchNorm(s) => {
            out.extend_from_slice(&s.gamma);
            out.extend_from_slice(&s.beta);
            out.extend_from_slice(&s.running_mean);
            out.extend_from_slice(&s.running_var);
        }
        _ => {}
    }
}

pub fn save_network(net: &Network<f64>, path: &Path) -> Result<()> {
    let mut payload: Vec<f64> = Vec::new();
    for node in &net.nodes {
        node_payload(node, &mut payload);
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        seed: net.seed,
        nodes: net.nodes.iter().map(node_meta).collect(),
        payload_len: payload.len(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(16 + header_json.len() + payload.len() * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for v in &payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    // Atomic-ish write: stage to a sibling temp file, then rename.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct PayloadReader<'a> {
    values: &'a [f64],
    pos: usize,
}

impl<'a> PayloadReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [f64]> {
        if self.pos + n > self.values.len() {
            return Err(Error::Checkpoint("payload shorter than header promises".into()));
        }
        let s = &self.values[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

fn rebuild_node(meta: &NodeMeta, r: &mut PayloadReader) -> Result<LayerNode<f64>> {
    match meta {
        NodeMeta::Conv { geometry, has_bias } => {
            let weights = Tensor::new(&geometry.weight_shape(), r.take(geometry.weight_count())?.to_vec())?;
            let bias = if *has_bias { Some(r.take(geometry.out_channels)?.to_vec()) } else { None };
            Ok(LayerNode::Conv(GroupConvLayer::new(*geometry, weights, bias)?))
        }
        NodeMeta::UgConv { p_spec, q_spec, sidedness, params, has_bias } => {
            let (params, out_channels) = match params {
                ParamsMeta::Grouped { geometry } => {
                    let weights =
                        Tensor::new(&geometry.weight_shape(), r.take(geometry.weight_count())?.to_vec())?;
                    (
                        BlockParams::Grouped(GroupConvLayer::new(*geometry, weights, None)?),
                        geometry.out_channels,
                    )
                }
                ParamsMeta::FourierColumns { block_len, in_channels, out_channels, kernel, stride, pad } => {
                    let shape = [
                        out_channels / block_len,
                        in_channels / block_len,
                        *block_len,
                        kernel.0,
                        kernel.1,
                    ];
                    let count = shape.iter().product();
                    let fc = Tensor::new(&shape, r.take(count)?.to_vec())?;
                    (
                        BlockParams::FourierColumns(CirculantLayer::new(
                            *block_len,
                            *in_channels,
                            *out_channels,
                            fc,
                            *stride,
                            *pad,
                        )?),
                        *out_channels,
                    )
                }
            };
            let bias = if *has_bias { Some(r.take(out_channels)?.to_vec()) } else { None };
            Ok(LayerNode::UGConv(UGConvBlock {
                p_spec: p_spec.clone(),
                q_spec: q_spec.clone(),
                sidedness: *sidedness,
                params,
                bias,
            }))
        }
        NodeMeta::BatchNorm { channels } => {
            let mut st = BatchNormState::new(*channels);
            st.gamma = r.take(*channels)?.to_vec();
            st.beta = r.take(*channels)?.to_vec();
            st.running_mean = r.take(*channels)?.to_vec();
            st.running_var = r.take(*channels)?.to_vec();
            Ok(LayerNode::BatchNorm(st))
        }
        NodeMeta::Relu => Ok(LayerNode::ReLU),
        NodeMeta::MaxPool2x2 => Ok(LayerNode::MaxPool2x2),
        NodeMeta::GlobalAvgPool => Ok(LayerNode::GlobalAvgPool),
        NodeMeta::Flatten => Ok(LayerNode::Flatten),
    }
}

pub fn load_network(path: &Path) -> Result<Network<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])?;
    let payload_bytes = &bytes[16 + header_len..];
    if payload_bytes.len() != header.payload_len * 8 {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, header promises {}",
            payload_bytes.len(),
            header.payload_len * 8
        )));
    }
    let values: Vec<f64> = payload_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut reader = PayloadReader { values: &values, pos: 0 };
    let nodes = header
        .nodes
        .iter()
        .map(|m| rebuild_node(m, &mut reader))
        .collect::<Result<Vec<_>>>()?;
    if reader.pos != values.len() {
        return Err(Error::Checkpoint("trailing payload values".into()));
    }
    Ok(Network { nodes, seed: header.seed })
}
