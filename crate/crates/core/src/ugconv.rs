//! The unitary group convolution block: a group convolution sandwiched
//! between channel-space unitary transforms P (before) and Q (after).
//!
//! Identity transforms give back a plain group conv; a one-sided shuffle
//! gives the shuffled group conv of ShuffleNet-style blocks; a two-sided
//! Fourier pair realizes a block-circulant layer. Two-sided blocks pair P
//! with Q's block inverse, except shuffles, which reuse the same
//! permutation on both sides (an inverse pair would collapse to the
//! identity around a channelwise layer).
//!
//! Two-sided Fourier blocks are parametrized by real circulant first
//! columns rather than complex frequency weights: the forward pass
//! transforms them on the fly, keeps all stored state real, and checks
//! that the output's imaginary residue is roundoff-level before
//! truncating.

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    circulant_to_ugconv, expand_block_diagonal, group_conv_backward, group_conv_forward,
    CirculantLayer, ConvGeometry, GroupConvLayer,
};
use crate::rng::{tags, SeededRng};
use crate::scalar::{Real, Scalar};
use crate::tensor::Tensor;
use crate::transforms::{block_apply, dense_matrix_of, TransformKind, UnitarySpec};

/// Residue limit on Fourier-path outputs before truncation to real;
/// anything above this signals a mis-built block rather than roundoff.
pub const IMAG_RESIDUE_LIMIT: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sidedness {
    None,
    POnly,
    QOnly,
    TwoSided,
}

/// Learnable state of a block: ordinary grouped filters, or the real
/// circulant first columns behind a two-sided Fourier block.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockParams<T: Real> {
    Grouped(GroupConvLayer<T>),
    FourierColumns(CirculantLayer<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct UGConvBlock<T: Real> {
    pub p_spec: UnitarySpec,
    pub q_spec: UnitarySpec,
    pub sidedness: Sidedness,
    pub params: BlockParams<T>,
    /// Optional bias, applied after Q so the transform algebra stays
    /// exactly unitary.
    pub bias: Option<Vec<T>>,
}

impl<T: Real> UGConvBlock<T> {
    pub fn in_channels(&self) -> usize {
        match &self.params {
            BlockParams::Grouped(g) => g.geometry.in_channels,
            BlockParams::FourierColumns(c) => c.in_channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        match &self.params {
            BlockParams::Grouped(g) => g.geometry.out_channels,
            BlockParams::FourierColumns(c) => c.out_channels,
        }
    }

    pub fn kernel(&self) -> (usize, usize) {
        match &self.params {
            BlockParams::Grouped(g) => g.geometry.kernel,
            BlockParams::FourierColumns(c) => c.kernel(),
        }
    }

    pub fn stride_pad(&self) -> (usize, usize) {
        match &self.params {
            BlockParams::Grouped(g) => (g.geometry.stride, g.geometry.pad),
            BlockParams::FourierColumns(c) => (c.stride, c.pad),
        }
    }

    /// The learnable weight tensor (grouped filters or first columns).
    pub fn weights(&self) -> &Tensor<T> {
        match &self.params {
            BlockParams::Grouped(g) => &g.weights,
            BlockParams::FourierColumns(c) => &c.first_columns,
        }
    }

    pub fn weights_mut(&mut self) -> &mut Tensor<T> {
        match &mut self.params {
            BlockParams::Grouped(g) => &mut g.weights,
            BlockParams::FourierColumns(c) => &mut c.first_columns,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights().numel() + self.bias.as_ref().map_or(0, |b| b.len())
    }

    fn validate(&self) -> Result<()> {
        self.p_spec.validate()?;
        self.q_spec.validate()?;
        if self.p_spec.channels != self.in_channels() {
            return Err(Error::Geometry(format!(
                "P acts on {} channels but the conv takes {}",
                self.p_spec.channels,
                self.in_channels()
            )));
        }
        if self.q_spec.channels != self.out_channels() {
            return Err(Error::Geometry(format!(
                "Q acts on {} channels but the conv produces {}",
                self.q_spec.channels,
                self.out_channels()
            )));
        }
        if let Some(b) = &self.bias {
            if b.len() != self.out_channels() {
                return Err(Error::Geometry("bias length mismatch".into()));
            }
        }
        Ok(())
    }
}

/// Build a block for one transform kind and sidedness. `block_len`
/// defaults to the group count, the length at which each transform set
/// touches one channel of every group; Hadamard on channel counts that are
/// not powers of two needs an explicit power-of-two divisor here.
pub fn make_block<T: Real>(
    kind: TransformKind,
    sidedness: Sidedness,
    geometry: ConvGeometry,
    block_len: Option<usize>,
    seed: u64,
) -> Result<UGConvBlock<T>> {
    geometry.validate()?;
    let (m, n) = (geometry.in_channels, geometry.out_channels);
    let mut rng = SeededRng::derive(seed, tags::WEIGHT_INIT);

    if kind == TransformKind::Fourier
        && matches!(sidedness, Sidedness::POnly | Sidedness::QOnly)
    {
        return Err(Error::Spec(
            "one-sided fourier blocks are rejected: they leak complex activations".into(),
        ));
    }

    let effective = if kind == TransformKind::Identity { Sidedness::None } else { sidedness };
    if effective == Sidedness::None {
        let gconv = GroupConvLayer::kaiming(geometry, &mut rng)?;
        return Ok(UGConvBlock {
            p_spec: UnitarySpec::identity(m),
            q_spec: UnitarySpec::identity(n),
            sidedness: Sidedness::None,
            params: BlockParams::Grouped(gconv),
            bias: None,
        });
    }

    let d = block_len.unwrap_or(geometry.groups);
    let spec_for = |channels: usize, conjugated: bool| -> Result<UnitarySpec> {
        let spec = match kind {
            TransformKind::Identity => UnitarySpec::identity(channels),
            TransformKind::Shuffle => UnitarySpec::shuffle(channels, d),
            TransformKind::Hadamard => UnitarySpec::hadamard(channels, d, conjugated),
            TransformKind::Fourier => UnitarySpec::fourier(channels, d, conjugated),
            TransformKind::RandomOrtho => UnitarySpec::random_ortho(channels, d, seed, conjugated),
            TransformKind::RandomPerm => UnitarySpec::random_perm(channels, seed, conjugated),
        };
        spec.validate()?;
        Ok(spec)
    };

    let (p_spec, q_spec) = match sidedness {
        Sidedness::None => unreachable!(),
        Sidedness::POnly => (spec_for(m, false)?, UnitarySpec::identity(n)),
        Sidedness::QOnly => (UnitarySpec::identity(m), spec_for(n, false)?),
        Sidedness::TwoSided => {
            if kind == TransformKind::Shuffle {
                // Same permutation on both sides: an inverse pair would
                // cancel through the channelwise weights.
                (spec_for(m, false)?, spec_for(n, false)?)
            } else {
                (spec_for(m, false)?, spec_for(n, true)?)
            }
        }
    };

    let params = if kind == TransformKind::Fourier {
        if d != geometry.groups {
            return Err(Error::Spec(format!(
                "two-sided fourier blocks need block length == groups, got {d} vs {}",
                geometry.groups
            )));
        }
        let circ = CirculantLayer::kaiming(
            d,
            m,
            n,
            geometry.kernel,
            geometry.stride,
            geometry.pad,
            &mut rng,
        )?;
        BlockParams::FourierColumns(circ)
    } else {
        BlockParams::Grouped(GroupConvLayer::kaiming(geometry, &mut rng)?)
    };

    let block = UGConvBlock { p_spec, q_spec, sidedness, params, bias: None };
    block.validate()?;
    Ok(block)
}

fn add_bias<T: Real>(y: &mut Tensor<T>, bias: &Option<Vec<T>>) {
    if let Some(b) = bias {
        let (n, plane) = (y.channels(), y.height() * y.width());
        let batch = y.batch();
        let data = y.data_mut();
        for bi in 0..batch {
            for (c, &bv) in b.iter().enumerate() {
                let base = (bi * n + c) * plane;
                for k in 0..plane {
                    data[base + k] += bv;
                }
            }
        }
    }
}

/// P, group conv, Q, bias. The Fourier path runs in complex and truncates
/// its residue-checked output back to real.
pub fn ugconv_forward<T: Real>(x: &Tensor<T>, block: &UGConvBlock<T>) -> Result<Tensor<T>> {
    block.validate()?;
    let mut y = match &block.params {
        BlockParams::Grouped(gconv) => {
            let xt = block_apply(&block.p_spec, x)?;
            let yt = group_conv_forward(&xt, gconv)?;
            block_apply(&block.q_spec, &yt)?
        }
        BlockParams::FourierColumns(circ) => {
            let (_, gconv, _) = circulant_to_ugconv(circ)?;
            let xt = block_apply(&block.p_spec, &x.to_complex())?;
            let yt = group_conv_forward(&xt, &gconv)?;
            let yc = block_apply(&block.q_spec, &yt)?;
            yc.into_real_checked(IMAG_RESIDUE_LIMIT)?
        }
    };
    add_bias(&mut y, &block.bias);
    Ok(y)
}

/// Gradients of a block: input gradient, weight gradient (matching the
/// block's own parametrization), and bias gradient when present.
#[derive(Debug, Clone)]
pub struct UGConvGrads<T: Real> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Option<Vec<T>>,
}

/// Chain rule through Q, the conv, and P. Unitary transforms backpropagate
/// by applying their conjugate transpose to the incoming gradient.
pub fn ugconv_backward<T: Real>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    block: &UGConvBlock<T>,
) -> Result<UGConvGrads<T>> {
    block.validate()?;
    let db = block.bias.as_ref().map(|_| {
        let (n, plane) = (dy.channels(), dy.height() * dy.width());
        let mut db = vec![T::zero(); n];
        for bi in 0..dy.batch() {
            for (c, dbn) in db.iter_mut().enumerate() {
                let base = (bi * n + c) * plane;
                for k in 0..plane {
                    *dbn += dy.data()[base + k];
                }
            }
        }
        db
    });

    match &block.params {
        BlockParams::Grouped(gconv) => {
            let xt = block_apply(&block.p_spec, x)?;
            let dyt = block_apply(&block.q_spec.block_inverse(), dy)?;
            let grads = group_conv_backward(&dyt, &xt, gconv)?;
            let dx = block_apply(&block.p_spec.block_inverse(), &grads.dx)?;
            Ok(UGConvGrads { dx, dw: grads.dw, db })
        }
        BlockParams::FourierColumns(circ) => {
            let (_, gconv, _) = circulant_to_ugconv(circ)?;
            let xt = block_apply(&block.p_spec, &x.to_complex())?;
            let dyt = block_apply(&block.q_spec.block_inverse(), &dy.to_complex())?;
            let grads = group_conv_backward(&dyt, &xt, &gconv)?;
            let dxc = block_apply(&block.p_spec.block_inverse(), &grads.dx)?;
            let dx = dxc.into_real_checked(IMAG_RESIDUE_LIMIT)?;
            // Map frequency-space weight gradients back to the real first
            // columns: d/dfc[m] = sum_j Re(dLam_j * omega^(-jm)).
            let d = circ.block_len;
            let (rows, cols) = (circ.out_channels / d, circ.in_channels / d);
            let (kh, kw) = circ.kernel();
            let taps = kh * kw;
            let mut dfc = Tensor::zeros(&[rows, cols, d, kh, kw])?;
            for bi in 0..rows {
                for bj in 0..cols {
                    for mm in 0..d {
                        for t in 0..taps {
                            let mut acc = T::zero();
                            for j in 0..d {
                                let angle = T::TAU() * T::from_usize((j * mm) % d).unwrap()
                                    / T::from_usize(d).unwrap();
                                let w = Complex::new(angle.cos(), angle.sin());
                                let g = grads.dw.data()[((j * rows + bi) * cols + bj) * taps + t];
                                acc += (g * w).re;
                            }
                            dfc.data_mut()[((bi * cols + bj) * d + mm) * taps + t] = acc;
                        }
                    }
                }
            }
            Ok(UGConvGrads { dx, dw: dfc, db })
        }
    }
}

/// Dense N x M channel matrix of one kernel tap:
/// dense(Q) * block_diagonal(weights)[tap] * dense(P). For Fourier blocks
/// the product is computed in complex and must come out real.
pub fn effective_matrix<T: Real>(
    block: &UGConvBlock<T>,
    tap: (usize, usize),
) -> Result<Tensor<T>> {
    block.validate()?;
    let (kh, kw) = block.kernel();
    if tap.0 >= kh || tap.1 >= kw {
        return Err(Error::Index(format!("tap {tap:?} outside kernel {kh}x{kw}")));
    }
    let (m, n) = (block.in_channels(), block.out_channels());
    match &block.params {
        BlockParams::Grouped(gconv) => {
            let dense = expand_block_diagonal(gconv);
            let mut wmat = Tensor::<T>::zeros(&[n, m])?;
            for r in 0..n {
                for c in 0..m {
                    wmat.set2(r, c, dense.at4(r, c, tap.0, tap.1));
                }
            }
            let p = dense_matrix_of::<T>(&block.p_spec)?;
            let q = dense_matrix_of::<T>(&block.q_spec)?;
            q.matmul(&wmat)?.matmul(&p)
        }
        BlockParams::FourierColumns(circ) => {
            let (_, gconv, _) = circulant_to_ugconv(circ)?;
            let dense = expand_block_diagonal(&gconv);
            let mut wmat = Tensor::<Complex<T>>::zeros(&[n, m])?;
            for r in 0..n {
                for c in 0..m {
                    wmat.set2(r, c, dense.at4(r, c, tap.0, tap.1));
                }
            }
            let p = dense_matrix_of::<Complex<T>>(&block.p_spec)?;
            let q = dense_matrix_of::<Complex<T>>(&block.q_spec)?;
            q.matmul(&wmat)?.matmul(&p)?.into_real_checked(IMAG_RESIDUE_LIMIT)
        }
    }
}
