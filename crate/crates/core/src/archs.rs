//! Built-in architecture descriptors for the cost model: grouped
//! ResNet-18 variants with two-sided block-Hadamard transforms, the
//! smallest ShuffleNet (x0.25, 8 groups) with its first pointwise conv
//! wrapped in transforms, and the toy ablation classifier. The same
//! descriptors ship as JSON under `archdefs/` so the transcription is
//! auditable as data.

use crate::costmodel::{ArchDescriptor, LayerDesc, TransformNote};
use crate::error::{Error, Result};
use crate::nn::Table2RowSpec;
use crate::transforms::TransformKind;
use crate::ugconv::Sidedness;

fn conv(
    name: String,
    m: usize,
    n: usize,
    g: usize,
    k: usize,
    stride: usize,
    pad: usize,
    transform: Option<TransformNote>,
) -> LayerDesc {
    LayerDesc::Conv {
        name,
        in_channels: m,
        out_channels: n,
        groups: g,
        kernel: (k, k),
        stride,
        pad,
        transform,
    }
}

fn hadamard2(block_len: usize) -> Option<TransformNote> {
    Some(TransformNote {
        kind: TransformKind::Hadamard,
        block_len,
        sidedness: Sidedness::TwoSided,
    })
}

/// ImageNet ResNet-18 with every conv after the stem grouped (including
/// the downsample projections) and wrapped in two-sided block-Hadamard
/// transforms of length equal to the group count.
pub fn resnet18_grouped(groups: usize) -> ArchDescriptor {
    let t = hadamard2(groups);
    let mut layers = vec![
        conv("conv1".into(), 3, 64, 1, 7, 2, 3, None),
        LayerDesc::MaxPool { size: 3, stride: 2, pad: 1 },
    ];
    let widths = [64usize, 128, 256, 512];
    let mut in_ch = 64;
    for (si, &width) in widths.iter().enumerate() {
        let stage = si + 2;
        for block in 1..=2 {
            let stride = if si > 0 && block == 1 { 2 } else { 1 };
            if stride == 2 || in_ch != width {
                layers.push(LayerDesc::SideConv {
                    name: format!("stage{stage}.block{block}.downsample"),
                    in_channels: in_ch,
                    out_channels: width,
                    groups,
                    kernel: (1, 1),
                    stride,
                    pad: 0,
                    transform: t,
                });
            }
            layers.push(conv(
                format!("stage{stage}.block{block}.conv1"),
                in_ch,
                width,
                groups,
                3,
                stride,
                1,
                t,
            ));
            layers.push(conv(
                format!("stage{stage}.block{block}.conv2"),
                width,
                width,
                groups,
                3,
                1,
                1,
                t,
            ));
            in_ch = width;
        }
    }
    layers.push(LayerDesc::GlobalAvgPool);
    layers.push(LayerDesc::Fc { name: "fc".into(), in_features: 512, out_features: 1000 });
    ArchDescriptor { name: format!("resnet18-g{groups}"), input_channels: 3, layers }
}

/// ShuffleNet x0.25 with 8 groups: stem of 24 channels, stages of
/// 96/192/384 with (4, 8, 4) blocks, bottleneck 1/4 of the block output.
/// Transforms (two-sided block-Hadamard, D = 8) dress the first pointwise
/// group conv of each block; the very first block's pointwise conv stays
/// dense (and untransformed) because its input is the narrow stem.
pub fn shufflenet_x025_g8() -> ArchDescriptor {
    let g = 8usize;
    let t = hadamard2(g);
    let stem = 24usize;
    let widths = [96usize, 192, 384];
    let repeats = [4usize, 8, 4];
    let mut layers = vec![
        conv("conv1".into(), 3, stem, 1, 3, 2, 1, None),
        LayerDesc::MaxPool { size: 3, stride: 2, pad: 1 },
    ];
    let mut in_ch = stem;
    for (si, (&width, &reps)) in widths.iter().zip(&repeats).enumerate() {
        let stage = si + 2;
        for block in 1..=reps {
            let mid = width / 4;
            let first = block == 1;
            // Stage entry blocks stride and concatenate the pooled input.
            let branch_out = if first { width - in_ch } else { width };
            let pw1_groups = if si == 0 && first { 1 } else { g };
            let pw1_transform = if pw1_groups == 1 { None } else { t };
            layers.push(conv(
                format!("stage{stage}.block{block}.pw1"),
                in_ch,
                mid,
                pw1_groups,
                1,
                1,
                0,
                pw1_transform,
            ));
            layers.push(conv(
                format!("stage{stage}.block{block}.dw"),
                mid,
                mid,
                mid,
                3,
                if first { 2 } else { 1 },
                1,
                None,
            ));
            layers.push(conv(
                format!("stage{stage}.block{block}.pw2"),
                mid,
                branch_out,
                g,
                1,
                1,
                0,
                None,
            ));
            if first {
                layers.push(LayerDesc::Concat { extra_channels: in_ch });
            }
            in_ch = width;
        }
    }
    layers.push(LayerDesc::GlobalAvgPool);
    layers.push(LayerDesc::Fc { name: "fc".into(), in_features: 384, out_features: 1000 });
    ArchDescriptor { name: "shufflenet-x025-g8".into(), input_channels: 3, layers }
}

/// Cost-model descriptor of the toy ablation classifier; layer widths and
/// grouping mirror `nn::build_mnist_toy` exactly.
pub fn mnist_toy_descriptor(row: &Table2RowSpec) -> ArchDescriptor {
    let transform = match (row.transform, row.sidedness) {
        (TransformKind::Identity, _) | (_, Sidedness::None) => None,
        (kind, sidedness) => Some(TransformNote {
            kind,
            block_len: match kind {
                TransformKind::Hadamard | TransformKind::Fourier => 4,
                _ => 20,
            },
            sidedness,
        }),
    };
    let l2_groups = if row.group_l2 { 10 } else { 1 };
    let l4_groups = if row.group_l4 { 10 } else { 1 };
    let layers = vec![
        LayerDesc::MaxPool { size: 2, stride: 2, pad: 0 },
        conv("l1".into(), 1, 10, 1, 3, 1, 1, None),
        LayerDesc::MaxPool { size: 2, stride: 2, pad: 0 },
        conv("l2".into(), 10, 20, l2_groups, 3, 1, 1, None),
        LayerDesc::GlobalAvgPool,
        conv("l3".into(), 20, 20, 20, 1, 1, 0, transform),
        conv("l4".into(), 20, 10, l4_groups, 1, 1, 0, None),
    ];
    ArchDescriptor { name: "mnist-toy".into(), input_channels: 1, layers }
}

/// Resolve a built-in descriptor by preset name.
pub fn builtin(name: &str) -> Result<ArchDescriptor> {
    match name {
        "resnet18-g8" => Ok(resnet18_grouped(8)),
        "resnet18-g16" => Ok(resnet18_grouped(16)),
        "shufflenet-x025-g8" => Ok(shufflenet_x025_g8()),
        _ => {
            if let Some(row) = name.strip_prefix("mnist-toy-row") {
                let row: usize = row
                    .parse()
                    .map_err(|_| Error::Config(format!("unknown architecture '{name}'")))?;
                let spec =
                    Table2RowSpec::row(row, TransformKind::RandomOrtho, Sidedness::TwoSided)?;
                return Ok(mnist_toy_descriptor(&spec));
            }
            Err(Error::Config(format!("unknown architecture '{name}'")))
        }
    }
}

pub const BUILTIN_NAMES: &[&str] = &[
    "resnet18-g8",
    "resnet18-g16",
    "shufflenet-x025-g8",
    "mnist-toy-row1",
    "mnist-toy-row2",
    "mnist-toy-row3",
    "mnist-toy-row4",
];
