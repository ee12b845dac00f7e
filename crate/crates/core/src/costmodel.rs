//! Static parameter / multiply / add accounting over architecture
//! descriptors.
//!
//! Counting conventions (fixed here, reported per layer so any
//! discrepancy with published totals is auditable):
//!
//! * `params` counts weight arrays only; biases and batch-norm state are
//!   channel-sized and excluded. Classifier heads are included.
//! * One multiply-accumulate of a weight layer costs 1 fpmul + 1 fpadd.
//!   Pooling and normalization are excluded, and the dense classifier
//!   head of the large ImageNet models is reported in `params` but kept
//!   out of the multiply totals (the headline counts cover the
//!   convolutional stack).
//! * Channel transforms are charged at their true kernel cost per spatial
//!   position of the tensor they act on: a block-Hadamard of length D
//!   over C channels costs C*log2(D) additions and zero multiplies (the
//!   two-sided 1/D normalization folds into the conv weights); a block
//!   Fourier costs C*log2(D) multiplies and adds; permutations and the
//!   identity are free. Transform additions are accumulated separately in
//!   `transform_adds`, since they are the quantity reported as overhead.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transforms::{TransformKind, UnitarySpec};
use crate::ugconv::Sidedness;

/// Transform annotation on a conv layer of a descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformNote {
    pub kind: TransformKind,
    pub block_len: usize,
    pub sidedness: Sidedness,
}

/// One element of an architecture descriptor. `Conv` advances the shape
/// chain; `SideConv` counts a projection fed from the current chain state
/// without advancing it (residual downsample paths); `Concat` accounts for
/// channels contributed by a parallel zero-cost path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerDesc {
    Conv {
        name: String,
        in_channels: usize,
        out_channels: usize,
        groups: usize,
        kernel: (usize, usize),
        stride: usize,
        pad: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        transform: Option<TransformNote>,
    },
    SideConv {
        name: String,
        in_channels: usize,
        out_channels: usize,
        groups: usize,
        kernel: (usize, usize),
        stride: usize,
        pad: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        transform: Option<TransformNote>,
    },
    MaxPool { size: usize, stride: usize, pad: usize },
    GlobalAvgPool,
    Concat { extra_channels: usize },
    /// Dense classifier head: params counted, multiplies excluded.
    Fc { name: String, in_features: usize, out_features: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub name: String,
    pub input_channels: usize,
    pub layers: Vec<LayerDesc>,
}

/// Shape register threaded through the descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PropState {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CostEntry {
    pub name: String,
    pub params: u64,
    pub fpmuls: u64,
    pub fpadds: u64,
    pub transform_adds: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CostReport {
    pub entries: Vec<CostEntry>,
}

impl CostReport {
    pub fn totals(&self) -> CostEntry {
        let mut t = CostEntry { name: "total".into(), ..Default::default() };
        for e in &self.entries {
            t.params += e.params;
            t.fpmuls += e.fpmuls;
            t.fpadds += e.fpadds;
            t.transform_adds += e.transform_adds;
        }
        t
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,params,fpmuls,fpadds,transform_adds\n");
        for e in self.entries.iter().chain(std::iter::once(&self.totals())) {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                e.name, e.params, e.fpmuls, e.fpadds, e.transform_adds
            ));
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<28} {:>12} {:>14} {:>14} {:>14}\n",
            "layer", "params", "fpmuls", "fpadds", "transform_adds"
        );
        for e in self.entries.iter().chain(std::iter::once(&self.totals())) {
            s.push_str(&format!(
                "{:<28} {:>12} {:>14} {:>14} {:>14}\n",
                e.name, e.params, e.fpmuls, e.fpadds, e.transform_adds
            ));
        }
        let r = overhead_ratio(self);
        s.push_str(&format!("transform-add overhead: {:.2}% of fpmuls\n", 100.0 * r));
        s
    }
}

/// transform_adds / fpmuls for the whole report.
pub fn overhead_ratio(report: &CostReport) -> f64 {
    let t = report.totals();
    if t.fpmuls == 0 {
        return 0.0;
    }
    t.transform_adds as f64 / t.fpmuls as f64
}

fn conv_out(h: usize, w: usize, kernel: (usize, usize), stride: usize, pad: usize) -> Result<(usize, usize)> {
    if h + 2 * pad < kernel.0 || w + 2 * pad < kernel.1 {
        return Err(Error::Geometry(format!(
            "spatial {h}x{w} with pad {pad} smaller than kernel {:?}",
            kernel
        )));
    }
    Ok(((h + 2 * pad - kernel.0) / stride + 1, (w + 2 * pad - kernel.1) / stride + 1))
}

fn transform_cost(
    note: &TransformNote,
    channels: usize,
    positions: usize,
) -> Result<(u64, u64)> {
    let spec = UnitarySpec {
        kind: note.kind,
        block_len: if matches!(note.kind, TransformKind::Identity | TransformKind::RandomPerm) {
            channels
        } else {
            note.block_len
        },
        channels,
        seed: 0,
        conjugated: false,
    };
    spec.validate()?;
    let (muls, adds) = spec.ops_per_position();
    Ok((muls * positions as u64, adds * positions as u64))
}

fn count_conv(
    name: &str,
    in_channels: usize,
    out_channels: usize,
    groups: usize,
    kernel: (usize, usize),
    stride: usize,
    pad: usize,
    transform: &Option<TransformNote>,
    state: PropState,
) -> Result<(CostEntry, PropState)> {
    if in_channels != state.channels {
        return Err(Error::Geometry(format!(
            "{name}: expects {in_channels} channels, chain carries {}",
            state.channels
        )));
    }
    if in_channels % groups != 0 || out_channels % groups != 0 {
        return Err(Error::Geometry(format!("{name}: groups {groups} must divide channels")));
    }
    let (ho, wo) = conv_out(state.h, state.w, kernel, stride, pad)?;
    let params = (in_channels * out_channels * kernel.0 * kernel.1 / groups) as u64;
    let macs = params * (ho * wo) as u64;
    let mut entry = CostEntry {
        name: name.to_string(),
        params,
        fpmuls: macs,
        fpadds: macs,
        transform_adds: 0,
    };
    if let Some(note) = transform {
        // P acts on the input tensor, Q on the output tensor.
        if matches!(note.sidedness, Sidedness::POnly | Sidedness::TwoSided) {
            let (m, a) = transform_cost(note, in_channels, state.h * state.w)?;
            entry.fpmuls += m;
            entry.transform_adds += a;
        }
        if matches!(note.sidedness, Sidedness::QOnly | Sidedness::TwoSided) {
            let (m, a) = transform_cost(note, out_channels, ho * wo)?;
            entry.fpmuls += m;
            entry.transform_adds += a;
        }
    }
    Ok((entry, PropState { channels: out_channels, h: ho, w: wo }))
}

/// Cost of a single descriptor entry given the current shape register;
/// returns the entry (when the layer carries cost) and the new register.
pub fn count_layer(desc: &LayerDesc, state: PropState) -> Result<(Option<CostEntry>, PropState)> {
    match desc {
        LayerDesc::Conv { name, in_channels, out_channels, groups, kernel, stride, pad, transform } => {
            let (entry, next) = count_conv(
                name, *in_channels, *out_channels, *groups, *kernel, *stride, *pad, transform,
                state,
            )?;
            Ok((Some(entry), next))
        }
        LayerDesc::SideConv { name, in_channels, out_channels, groups, kernel, stride, pad, transform } => {
            let (entry, _) = count_conv(
                name, *in_channels, *out_channels, *groups, *kernel, *stride, *pad, transform,
                state,
            )?;
            Ok((Some(entry), state))
        }
        LayerDesc::MaxPool { size, stride, pad } => {
            let (ho, wo) = conv_out(state.h, state.w, (*size, *size), *stride, *pad)?;
            Ok((None, PropState { channels: state.channels, h: ho, w: wo }))
        }
        LayerDesc::GlobalAvgPool => {
            Ok((None, PropState { channels: state.channels, h: 1, w: 1 }))
        }
        LayerDesc::Concat { extra_channels } => Ok((
            None,
            PropState { channels: state.channels + extra_channels, h: state.h, w: state.w },
        )),
        LayerDesc::Fc { name, in_features, out_features } => {
            if state.h != 1 || state.w != 1 {
                return Err(Error::Geometry(format!(
                    "{name}: classifier expects 1x1 spatial, chain carries {}x{}",
                    state.h, state.w
                )));
            }
            if *in_features != state.channels {
                return Err(Error::Geometry(format!(
                    "{name}: expects {in_features} features, chain carries {}",
                    state.channels
                )));
            }
            let entry = CostEntry {
                name: name.clone(),
                params: (in_features * out_features) as u64,
                fpmuls: 0,
                fpadds: 0,
                transform_adds: 0,
            };
            Ok((Some(entry), PropState { channels: *out_features, h: 1, w: 1 }))
        }
    }
}

/// Propagate spatial sizes through the whole descriptor and sum the
/// per-layer costs.
pub fn count_model(arch: &ArchDescriptor, input_hw: (usize, usize)) -> Result<CostReport> {
    let mut state = PropState { channels: arch.input_channels, h: input_hw.0, w: input_hw.1 };
    let mut report = CostReport::default();
    for desc in &arch.layers {
        let (entry, next) = count_layer(desc, state)?;
        if let Some(e) = entry {
            report.entries.push(e);
        }
        state = next;
    }
    Ok(report)
}
