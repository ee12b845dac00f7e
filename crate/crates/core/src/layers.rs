//! Structured weight layers: grouped convolution (with exact analytic
//! gradients), its dense block-diagonal expansion, and block-circulant
//! layers with both a direct path and an FFT fast path.
//!
//! Convolution here means cross-correlation (no kernel flip), and groups
//! are contiguous channel ranges. Circulant structure lives on strided
//! channel blocks: with block length `D`, block (bi, bj) couples output
//! channels `{bi + r*(N/D)}` with input channels `{bj + c*(M/D)}`. That
//! placement pairs with the strided transform sets of the `transforms`
//! module so that a two-sided Fourier sandwich around a contiguous-group
//! conv reproduces a block-circulant layer exactly.

use num_complex::Complex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::{Real, Scalar};
use crate::tensor::Tensor;
use crate::transforms::UnitarySpec;

/// Shape bookkeeping for a grouped convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        groups: usize,
        kernel: (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let g = ConvGeometry { in_channels, out_channels, groups, kernel, stride, pad };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.groups == 0 {
            return Err(Error::Geometry("channel and group counts must be >= 1".into()));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::Geometry(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride == 0 {
            return Err(Error::Geometry("kernel extents and stride must be >= 1".into()));
        }
        Ok(())
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Weight tensor shape (G, N/G, M/G, kh, kw).
    pub fn weight_shape(&self) -> [usize; 5] {
        [self.groups, self.out_per_group(), self.in_per_group(), self.kernel.0, self.kernel.1]
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().iter().product()
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        if h + 2 * self.pad < kh || w + 2 * self.pad < kw {
            return Err(Error::Geometry(format!(
                "input {h}x{w} with pad {} is smaller than kernel {kh}x{kw}",
                self.pad
            )));
        }
        Ok(((h + 2 * self.pad - kh) / self.stride + 1, (w + 2 * self.pad - kw) / self.stride + 1))
    }
}

/// Grouped convolution weights plus geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupConvLayer<S: Scalar> {
    pub geometry: ConvGeometry,
    pub weights: Tensor<S>,
    pub bias: Option<Vec<S>>,
}

impl<S: Scalar> GroupConvLayer<S> {
    pub fn new(geometry: ConvGeometry, weights: Tensor<S>, bias: Option<Vec<S>>) -> Result<Self> {
        geometry.validate()?;
        if weights.shape() != geometry.weight_shape() {
            return Err(Error::Geometry(format!(
                "weight shape {:?} does not match geometry {:?}",
                weights.shape(),
                geometry.weight_shape()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != geometry.out_channels {
                return Err(Error::Geometry(format!(
                    "bias length {} != out_channels {}",
                    b.len(),
                    geometry.out_channels
                )));
            }
        }
        Ok(GroupConvLayer { geometry, weights, bias })
    }

    /// Weights realizing the identity map per group: requires square
    /// groups and an odd kernel (the center tap carries the delta).
    pub fn identity(geometry: ConvGeometry) -> Result<Self> {
        if geometry.in_per_group() != geometry.out_per_group() {
            return Err(Error::Geometry("identity weights need square groups".into()));
        }
        if geometry.kernel.0 % 2 == 0 || geometry.kernel.1 % 2 == 0 || geometry.stride != 1 {
            return Err(Error::Geometry("identity weights need odd kernel, stride 1".into()));
        }
        let mut w = Tensor::zeros(&geometry.weight_shape())?;
        let [g, opg, ipg, kh, kw] = geometry.weight_shape();
        for gi in 0..g {
            for j in 0..opg {
                let idx = (((gi * opg + j) * ipg + j) * kh + kh / 2) * kw + kw / 2;
                w.data_mut()[idx] = S::one();
            }
        }
        GroupConvLayer::new(geometry, w, None)
    }
}

impl<T: Real> GroupConvLayer<T> {
    /// Fan-in scaled normal init, per group: std = sqrt(2 / (kh*kw*M/G)).
    pub fn kaiming(geometry: ConvGeometry, rng: &mut SeededRng) -> Result<Self> {
        geometry.validate()?;
        let fan_in = geometry.kernel.0 * geometry.kernel.1 * geometry.in_per_group();
        let std = (T::from_f64(2.0).unwrap() / T::from_usize(fan_in).unwrap()).sqrt();
        let data: Vec<T> =
            (0..geometry.weight_count()).map(|_| rng.normal::<T>() * std).collect();
        let weights = Tensor::new(&geometry.weight_shape(), data)?;
        GroupConvLayer::new(geometry, weights, None)
    }
}

fn check_input<S: Scalar>(x: &Tensor<S>, geometry: &ConvGeometry) -> Result<(usize, usize)> {
    if x.rank() != 4 {
        return Err(Error::Shape(format!("expected rank-4 input, got {:?}", x.shape())));
    }
    if x.channels() != geometry.in_channels {
        return Err(Error::Shape(format!(
            "input has {} channels, geometry expects {}",
            x.channels(),
            geometry.in_channels
        )));
    }
    geometry.out_spatial(x.height(), x.width())
}

/// Grouped cross-correlation: output channel (g, j) sums the group's
/// inputs against its filters. Batch entries are computed in parallel.
pub fn group_conv_forward<S: Scalar>(x: &Tensor<S>, layer: &GroupConvLayer<S>) -> Result<Tensor<S>> {
    let geo = &layer.geometry;
    let (ho, wo) = check_input(x, geo)?;
    let (b, m, h, w) = (x.batch(), x.channels(), x.height(), x.width());
    let n = geo.out_channels;
    let (g, opg, ipg) = (geo.groups, geo.out_per_group(), geo.in_per_group());
    let (kh, kw) = geo.kernel;
    let (stride, pad) = (geo.stride, geo.pad);

    let mut out = Tensor::zeros(&[b, n, ho, wo])?;
    let xd = x.data();
    let wd = layer.weights.data();
    let out_plane = ho * wo;

    out.data_mut().par_chunks_mut(n * out_plane).enumerate().for_each(|(bi, ob)| {
        let xb = &xd[bi * m * h * w..(bi + 1) * m * h * w];
        for gi in 0..g {
            for j in 0..opg {
                let nc = gi * opg + j;
                let bias = layer.bias.as_ref().map_or(S::zero(), |bv| bv[nc]);
                for oh in 0..ho {
                    let ih0 = (oh * stride) as isize - pad as isize;
                    let u_lo = (-ih0).max(0) as usize;
                    let u_hi = kh.min((h as isize - ih0).max(0) as usize);
                    for ow in 0..wo {
                        let iw0 = (ow * stride) as isize - pad as isize;
                        let v_lo = (-iw0).max(0) as usize;
                        let v_hi = kw.min((w as isize - iw0).max(0) as usize);
                        let mut acc = bias;
                        for i in 0..ipg {
                            let mc = gi * ipg + i;
                            let wbase = (((gi * opg + j) * ipg + i) * kh) * kw;
                            for u in u_lo..u_hi {
                                let ih = (ih0 + u as isize) as usize;
                                let xrow = (mc * h + ih) * w;
                                let wrow = wbase + u * kw;
                                for v in v_lo..v_hi {
                                    let iw = (iw0 + v as isize) as usize;
                                    acc += xb[xrow + iw] * wd[wrow + v];
                                }
                            }
                        }
                        ob[(nc * ho + oh) * wo + ow] = acc;
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Gradients of the grouped convolution.
#[derive(Debug, Clone)]
pub struct ConvGrads<S: Scalar> {
    pub dx: Tensor<S>,
    pub dw: Tensor<S>,
    pub db: Option<Vec<S>>,
}

/// Exact adjoint of `group_conv_forward` under the real inner product:
/// complex weights/activations use conjugated factors so that gradients
/// of a real loss flow correctly.
pub fn group_conv_backward<S: Scalar>(
    dy: &Tensor<S>,
    x: &Tensor<S>,
    layer: &GroupConvLayer<S>,
) -> Result<ConvGrads<S>> {
    let geo = &layer.geometry;
    let (ho, wo) = check_input(x, geo)?;
    let (b, m, h, w) = (x.batch(), x.channels(), x.height(), x.width());
    let n = geo.out_channels;
    if dy.shape() != [b, n, ho, wo] {
        return Err(Error::Shape(format!(
            "dy shape {:?} does not match forward output [{b}, {n}, {ho}, {wo}]",
            dy.shape()
        )));
    }
    let (g, opg, ipg) = (geo.groups, geo.out_per_group(), geo.in_per_group());
    let (kh, kw) = geo.kernel;
    let (stride, pad) = (geo.stride, geo.pad);
    let xd = x.data();
    let dyd = dy.data();
    let wd = layer.weights.data();
    let out_plane = ho * wo;

    // dX: parallel over batch, scatter within each sample.
    let mut dx = Tensor::zeros(&[b, m, h, w])?;
    dx.data_mut().par_chunks_mut(m * h * w).enumerate().for_each(|(bi, dxb)| {
        let dyb = &dyd[bi * n * out_plane..(bi + 1) * n * out_plane];
        for gi in 0..g {
            for j in 0..opg {
                let nc = gi * opg + j;
                for oh in 0..ho {
                    let ih0 = (oh * stride) as isize - pad as isize;
                    let u_lo = (-ih0).max(0) as usize;
                    let u_hi = kh.min((h as isize - ih0).max(0) as usize);
                    for ow in 0..wo {
                        let iw0 = (ow * stride) as isize - pad as isize;
                        let v_lo = (-iw0).max(0) as usize;
                        let v_hi = kw.min((w as isize - iw0).max(0) as usize);
                        let dyv = dyb[(nc * ho + oh) * wo + ow];
                        if dyv == S::zero() {
                            continue;
                        }
                        for i in 0..ipg {
                            let mc = gi * ipg + i;
                            let wbase = (((gi * opg + j) * ipg + i) * kh) * kw;
                            for u in u_lo..u_hi {
                                let ih = (ih0 + u as isize) as usize;
                                let xrow = (mc * h + ih) * w;
                                let wrow = wbase + u * kw;
                                for v in v_lo..v_hi {
                                    let iw = (iw0 + v as isize) as usize;
                                    dxb[xrow + iw] += wd[wrow + v].conj() * dyv;
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    // dW: parallel over (group, out-channel) pairs; each owns a disjoint
    // weight slice and reduces over the batch in a fixed order.
    let mut dw = Tensor::zeros(&layer.weights.shape().to_vec())?;
    let slice_len = ipg * kh * kw;
    dw.data_mut().par_chunks_mut(slice_len).enumerate().for_each(|(pair, dwk)| {
        let gi = pair / opg;
        let j = pair % opg;
        let nc = gi * opg + j;
        for bi in 0..b {
            let xb = &xd[bi * m * h * w..(bi + 1) * m * h * w];
            let dyb = &dyd[bi * n * out_plane..(bi + 1) * n * out_plane];
            for oh in 0..ho {
                let ih0 = (oh * stride) as isize - pad as isize;
                let u_lo = (-ih0).max(0) as usize;
                let u_hi = kh.min((h as isize - ih0).max(0) as usize);
                for ow in 0..wo {
                    let iw0 = (ow * stride) as isize - pad as isize;
                    let v_lo = (-iw0).max(0) as usize;
                    let v_hi = kw.min((w as isize - iw0).max(0) as usize);
                    let dyv = dyb[(nc * ho + oh) * wo + ow];
                    if dyv == S::zero() {
                        continue;
                    }
                    for i in 0..ipg {
                        let mc = gi * ipg + i;
                        for u in u_lo..u_hi {
                            let ih = (ih0 + u as isize) as usize;
                            let xrow = (mc * h + ih) * w;
                            let drow = (i * kh + u) * kw;
                            for v in v_lo..v_hi {
                                let iw = (iw0 + v as isize) as usize;
                                dwk[drow + v] += xb[xrow + iw].conj() * dyv;
                            }
                        }
                    }
                }
            }
        }
    });

    let db = layer.bias.as_ref().map(|_| {
        let mut db = vec![S::zero(); n];
        for bi in 0..b {
            for (nc, dbn) in db.iter_mut().enumerate() {
                let base = (bi * n + nc) * out_plane;
                for k in 0..out_plane {
                    *dbn += dyd[base + k];
                }
            }
        }
        db
    });

    Ok(ConvGrads { dx, dw, db })
}

/// Dense (N, M, kh, kw) weights equal to the grouped layer: zero outside
/// the contiguous diagonal blocks. A dense conv over these weights matches
/// `group_conv_forward` exactly.
pub fn expand_block_diagonal<S: Scalar>(layer: &GroupConvLayer<S>) -> Tensor<S> {
    let geo = &layer.geometry;
    let (m, n) = (geo.in_channels, geo.out_channels);
    let (g, opg, ipg) = (geo.groups, geo.out_per_group(), geo.in_per_group());
    let (kh, kw) = geo.kernel;
    let mut dense = Tensor::zeros(&[n, m, kh, kw]).expect("valid geometry");
    let wd = layer.weights.data();
    for gi in 0..g {
        for j in 0..opg {
            for i in 0..ipg {
                for u in 0..kh {
                    for v in 0..kw {
                        let src = ((((gi * opg + j) * ipg + i) * kh) + u) * kw + v;
                        let dst = ((((gi * opg + j) * m) + (gi * ipg + i)) * kh + u) * kw + v;
                        dense.data_mut()[dst] = wd[src];
                    }
                }
            }
        }
    }
    dense
}

/// Wrap dense (N, M, kh, kw) weights as a single-group conv layer.
pub fn dense_conv_layer<S: Scalar>(
    weights: Tensor<S>,
    stride: usize,
    pad: usize,
    bias: Option<Vec<S>>,
) -> Result<GroupConvLayer<S>> {
    if weights.rank() != 4 {
        return Err(Error::Shape(format!("expected rank-4 weights, got {:?}", weights.shape())));
    }
    let [n, m, kh, kw] = [weights.shape()[0], weights.shape()[1], weights.shape()[2], weights.shape()[3]];
    let geometry = ConvGeometry::new(m, n, 1, (kh, kw), stride, pad)?;
    GroupConvLayer::new(geometry, weights.reshape(&[1, n, m, kh, kw])?, bias)
}

/// Block-circulant layer: per spatial tap, the channel matrix consists of
/// D x D circulant blocks over strided channel positions, each stored as
/// its first column.
#[derive(Debug, Clone, PartialEq)]
pub struct CirculantLayer<T: Real> {
    pub block_len: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Shape (N/D, M/D, D, kh, kw).
    pub first_columns: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> CirculantLayer<T> {
    pub fn new(
        block_len: usize,
        in_channels: usize,
        out_channels: usize,
        first_columns: Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if block_len == 0 || in_channels % block_len != 0 || out_channels % block_len != 0 {
            return Err(Error::Geometry(format!(
                "block length {block_len} must divide in_channels {in_channels} and out_channels {out_channels}"
            )));
        }
        if first_columns.rank() != 5 {
            return Err(Error::Shape(format!(
                "expected rank-5 first_columns, got {:?}",
                first_columns.shape()
            )));
        }
        let sh = first_columns.shape();
        if sh[0] != out_channels / block_len || sh[1] != in_channels / block_len || sh[2] != block_len
        {
            return Err(Error::Shape(format!(
                "first_columns shape {:?} does not match (N/D, M/D, D) = ({}, {}, {block_len})",
                sh,
                out_channels / block_len,
                in_channels / block_len
            )));
        }
        if stride == 0 {
            return Err(Error::Geometry("stride must be >= 1".into()));
        }
        Ok(CirculantLayer { block_len, in_channels, out_channels, first_columns, stride, pad })
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.first_columns.shape()[3], self.first_columns.shape()[4])
    }

    /// Stored scalar count: M*N*kh*kw / D.
    pub fn param_count(&self) -> usize {
        self.first_columns.numel()
    }

    /// Fan-in scaled init so the expanded dense matrix has the same
    /// per-entry std as a dense layer of the same shape.
    pub fn kaiming(
        block_len: usize,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        pad: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let fan_in = kernel.0 * kernel.1 * in_channels;
        let std = (T::from_f64(2.0).unwrap() / T::from_usize(fan_in).unwrap()).sqrt();
        let shape =
            [out_channels / block_len, in_channels / block_len, block_len, kernel.0, kernel.1];
        let data: Vec<T> =
            (0..shape.iter().product()).map(|_| rng.normal::<T>() * std).collect();
        let fc = Tensor::new(&shape, data)?;
        CirculantLayer::new(block_len, in_channels, out_channels, fc, stride, pad)
    }

    pub fn dense_geometry(&self) -> ConvGeometry {
        let (kh, kw) = self.kernel();
        ConvGeometry {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            groups: 1,
            kernel: (kh, kw),
            stride: self.stride,
            pad: self.pad,
        }
    }
}

/// Dense (N, M, kh, kw) weights of a block-circulant layer. Block (bi, bj)
/// entry (r, c) = first_column[(r - c) mod D], placed at output channel
/// bi + r*(N/D) and input channel bj + c*(M/D).
pub fn circulant_expand<T: Real>(layer: &CirculantLayer<T>) -> Tensor<T> {
    let d = layer.block_len;
    let (m, n) = (layer.in_channels, layer.out_channels);
    let (rows, cols) = (n / d, m / d);
    let (kh, kw) = layer.kernel();
    let fc = layer.first_columns.data();
    let mut dense = Tensor::zeros(&[n, m, kh, kw]).expect("valid geometry");
    for bi in 0..rows {
        for bj in 0..cols {
            for r in 0..d {
                for c in 0..d {
                    let e = (r + d - c) % d;
                    for u in 0..kh {
                        for v in 0..kw {
                            let src = ((((bi * cols + bj) * d) + e) * kh + u) * kw + v;
                            let dst = (((bi + r * rows) * m + (bj + c * cols)) * kh + u) * kw + v;
                            dense.data_mut()[dst] = fc[src];
                        }
                    }
                }
            }
        }
    }
    dense
}

/// Circulant matrix-vector product via the diagonalization
/// y = F^H (DFT(c) . F x): FFT both operands, multiply pointwise, invert.
/// Non-power-of-two lengths fall back to the dense transform internally.
pub fn circulant_matvec_fft<T: Real>(first_col: &[T], x: &[T]) -> Result<Vec<T>> {
    let d = first_col.len();
    if d == 0 || x.len() != d {
        return Err(Error::Shape(format!(
            "first column length {d} and vector length {} must match and be >= 1",
            x.len()
        )));
    }
    let sqrt_d = T::from_usize(d).unwrap().sqrt();
    let mut cf: Vec<Complex<T>> = first_col.iter().map(|&r| Complex::new(r, T::zero())).collect();
    crate::transforms::fft_in_place(&mut cf, false)?;
    let mut xf: Vec<Complex<T>> = x.iter().map(|&r| Complex::new(r, T::zero())).collect();
    crate::transforms::fft_in_place(&mut xf, false)?;
    // Normalized FFT of the first column times sqrt(D) is the eigenvalue
    // vector of the circulant.
    for (z, c) in xf.iter_mut().zip(&cf) {
        *z *= c.scale(sqrt_d);
    }
    crate::transforms::fft_in_place(&mut xf, true)?;
    Ok(xf.into_iter().map(|z| z.re).collect())
}

/// Eigenvalues of every circulant block, per tap: lam[bi][bj][j][u][v] is
/// the j-th DFT coefficient of block (bi, bj)'s first column.
fn circulant_eigenvalues<T: Real>(layer: &CirculantLayer<T>) -> Vec<Complex<T>> {
    let d = layer.block_len;
    let (rows, cols) = (layer.out_channels / d, layer.in_channels / d);
    let (kh, kw) = layer.kernel();
    let fc = layer.first_columns.data();
    let taps = kh * kw;
    let mut lam = vec![Complex::new(T::zero(), T::zero()); rows * cols * d * taps];
    for bi in 0..rows {
        for bj in 0..cols {
            for t in 0..taps {
                for j in 0..d {
                    let mut acc = Complex::new(T::zero(), T::zero());
                    for mm in 0..d {
                        let angle = -T::TAU() * T::from_usize((j * mm) % d).unwrap()
                            / T::from_usize(d).unwrap();
                        let w = Complex::new(angle.cos(), angle.sin());
                        acc += w.scale(fc[((bi * cols + bj) * d + mm) * taps + t]);
                    }
                    lam[((bi * cols + bj) * d + j) * taps + t] = acc;
                }
            }
        }
    }
    lam
}

/// Forward pass of a block-circulant layer. `fast = false` expands the
/// blocks and runs a dense conv; `fast = true` works in the Fourier basis:
/// FFT the strided input sets once per position, accumulate with the block
/// eigenvalues, inverse FFT each output position. Both agree to roundoff.
pub fn block_circulant_forward<T: Real>(
    x: &Tensor<T>,
    layer: &CirculantLayer<T>,
    fast: bool,
) -> Result<Tensor<T>> {
    let geo = layer.dense_geometry();
    if !fast {
        let dense = dense_conv_layer(circulant_expand(layer), layer.stride, layer.pad, None)?;
        return group_conv_forward(x, &dense);
    }
    if !layer.block_len.is_power_of_two() {
        // Correctness over speed for odd block sizes.
        eprintln!(
            "note: block length {} is not a power of two; running the dense path",
            layer.block_len
        );
        let dense = dense_conv_layer(circulant_expand(layer), layer.stride, layer.pad, None)?;
        return group_conv_forward(x, &dense);
    }
    let (ho, wo) = check_input(x, &geo)?;
    let (b, m, h, w) = (x.batch(), x.channels(), x.height(), x.width());
    let n = layer.out_channels;
    let d = layer.block_len;
    let (rows, cols) = (n / d, m / d);
    let (kh, kw) = layer.kernel();
    let taps = kh * kw;
    let (stride, pad) = (layer.stride, layer.pad);
    let lam = circulant_eigenvalues(layer);
    let xd = x.data();

    let mut out = Tensor::zeros(&[b, n, ho, wo])?;
    let out_data: Vec<T> = (0..b)
        .into_par_iter()
        .map(|bi| -> Result<Vec<T>> {
            let xb = &xd[bi * m * h * w..(bi + 1) * m * h * w];
            // FFT of every strided channel set at every input position.
            let mut xf = vec![Complex::new(T::zero(), T::zero()); m * h * w];
            let mut buf = vec![Complex::new(T::zero(), T::zero()); d];
            for k in 0..h * w {
                for bj in 0..cols {
                    for j in 0..d {
                        buf[j] = Complex::new(xb[(bj + j * cols) * h * w + k], T::zero());
                    }
                    crate::transforms::fft_in_place(&mut buf, false)?;
                    for j in 0..d {
                        xf[(bj + j * cols) * h * w + k] = buf[j];
                    }
                }
            }
            let mut yf = vec![Complex::new(T::zero(), T::zero()); n * ho * wo];
            for oh in 0..ho {
                let ih0 = (oh * stride) as isize - pad as isize;
                for ow in 0..wo {
                    let iw0 = (ow * stride) as isize - pad as isize;
                    for u in 0..kh {
                        let ih = ih0 + u as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for v in 0..kw {
                            let iw = iw0 + v as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let kin = (ih as usize) * w + iw as usize;
                            let t = u * kw + v;
                            for bj in 0..cols {
                                for j in 0..d {
                                    let xv = xf[(bj + j * cols) * h * w + kin];
                                    for bi2 in 0..rows {
                                        let l = lam[((bi2 * cols + bj) * d + j) * taps + t];
                                        yf[((bi2 + j * rows) * ho + oh) * wo + ow] += l * xv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            // Inverse FFT per output set and position, then drop the
            // residual imaginary parts.
            let mut yb = vec![T::zero(); n * ho * wo];
            let mut ybuf = vec![Complex::new(T::zero(), T::zero()); d];
            let mut max_im = T::zero();
            let mut max_re = T::zero();
            for k in 0..ho * wo {
                for bi2 in 0..rows {
                    for j in 0..d {
                        ybuf[j] = yf[(bi2 + j * rows) * ho * wo + k];
                    }
                    crate::transforms::fft_in_place(&mut ybuf, true)?;
                    for j in 0..d {
                        let z = ybuf[j];
                        if z.im.abs() > max_im {
                            max_im = z.im.abs();
                        }
                        if z.re.abs() > max_re {
                            max_re = z.re.abs();
                        }
                        yb[(bi2 + j * rows) * ho * wo + k] = z.re;
                    }
                }
            }
            let limit = T::one().max(max_re) * T::from_f64(1e-8).unwrap();
            if max_im > limit {
                return Err(Error::ImaginaryResidue {
                    residue: max_im.to_f64().unwrap_or(f64::NAN),
                    limit: limit.to_f64().unwrap_or(f64::NAN),
                });
            }
            Ok(yb)
        })
        .collect::<Result<Vec<Vec<T>>>>()?
        .into_iter()
        .flatten()
        .collect();
    out.data_mut().copy_from_slice(&out_data);
    Ok(out)
}

/// Decompose a block-circulant layer into (P, group conv, Q): P applies
/// the block DFT, Q its block inverse, and the group conv holds the block
/// eigenvalues as complex weights (group index = frequency). Composing
/// block_apply(P), group_conv_forward, block_apply(Q) reproduces
/// `block_circulant_forward`. D = 1 degenerates to identity transforms
/// around an ordinary dense conv.
pub fn circulant_to_ugconv<T: Real>(
    layer: &CirculantLayer<T>,
) -> Result<(UnitarySpec, GroupConvLayer<Complex<T>>, UnitarySpec)> {
    let d = layer.block_len;
    let (m, n) = (layer.in_channels, layer.out_channels);
    let (kh, kw) = layer.kernel();
    let (p, q) = if d == 1 {
        (UnitarySpec::identity(m), UnitarySpec::identity(n))
    } else {
        (UnitarySpec::fourier(m, d, false), UnitarySpec::fourier(n, d, true))
    };
    let geometry = ConvGeometry::new(m, n, d, (kh, kw), layer.stride, layer.pad)?;
    let (rows, cols) = (n / d, m / d);
    let taps = kh * kw;
    let lam = circulant_eigenvalues(layer);
    // Group j's (N/D x M/D) filter block holds the j-th eigenvalue of
    // every circulant block.
    let mut wdata = vec![Complex::new(T::zero(), T::zero()); d * rows * cols * taps];
    for j in 0..d {
        for bi in 0..rows {
            for bj in 0..cols {
                for t in 0..taps {
                    wdata[((j * rows + bi) * cols + bj) * taps + t] =
                        lam[((bi * cols + bj) * d + j) * taps + t];
                }
            }
        }
    }
    let weights = Tensor::new(&[d, rows, cols, kh, kw], wdata)?;
    let gconv = GroupConvLayer::new(geometry, weights, None)?;
    Ok((p, gconv, q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::block_apply;

    /// Reference dense convolution: the simplest possible quadruple loop,
    /// kept independent of the production path.
    fn naive_dense_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>, // (N, M, kh, kw)
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let (b, m, h, wid) = (x.batch(), x.channels(), x.height(), x.width());
        let n = w.shape()[0];
        let (kh, kw) = (w.shape()[2], w.shape()[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wid + 2 * pad - kw) / stride + 1;
        let mut y = Tensor::zeros(&[b, n, ho, wo]).unwrap();
        for bi in 0..b {
            for nc in 0..n {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0;
                        for mc in 0..m {
                            for u in 0..kh {
                                for v in 0..kw {
                                    let ih = (oh * stride + u) as isize - pad as isize;
                                    let iw = (ow * stride + v) as isize - pad as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= wid as isize {
                                        continue;
                                    }
                                    acc += x.at4(bi, mc, ih as usize, iw as usize)
                                        * w.at4(nc, mc, u, v);
                                }
                            }
                        }
                        let idx = ((bi * n + nc) * ho + oh) * wo + ow;
                        y.data_mut()[idx] = acc;
                    }
                }
            }
        }
        y
    }

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = SeededRng::new(seed);
        Tensor::new(shape, rng.normal_vec(shape.iter().product())).unwrap()
    }

    #[test]
    fn single_group_is_dense_conv() {
        let geo = ConvGeometry::new(3, 5, 1, (3, 3), 1, 1).unwrap();
        let mut rng = SeededRng::new(1);
        let layer = GroupConvLayer::<f64>::kaiming(geo, &mut rng).unwrap();
        let x = random_tensor(&[2, 3, 6, 5], 2);
        let got = group_conv_forward(&x, &layer).unwrap();
        let dense_w = layer.weights.reshape(&[5, 3, 3, 3]).unwrap();
        let want = naive_dense_conv(&x, &dense_w, 1, 1);
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn depthwise_identity() {
        let geo = ConvGeometry::new(4, 4, 4, (1, 1), 1, 0).unwrap();
        let w = Tensor::full(&geo.weight_shape(), 1.0).unwrap();
        let layer = GroupConvLayer::new(geo, w, None).unwrap();
        let x = random_tensor(&[1, 4, 3, 3], 3);
        let y = group_conv_forward(&x, &layer).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-15);
    }

    #[test]
    fn group_conv_matches_block_diagonal_expansion() {
        for (m, n, g, k) in [(8, 8, 2, 3), (8, 4, 4, 1), (6, 9, 3, 3)] {
            let geo = ConvGeometry::new(m, n, g, (k, k), 1, k / 2).unwrap();
            let mut rng = SeededRng::new(7);
            let layer = GroupConvLayer::<f64>::kaiming(geo, &mut rng).unwrap();
            let x = random_tensor(&[2, m, 5, 4], 11);
            let grouped = group_conv_forward(&x, &layer).unwrap();
            let dense = naive_dense_conv(&x, &expand_block_diagonal(&layer), 1, k / 2);
            assert!(grouped.max_abs_diff(&dense).unwrap() < 1e-10, "m={m} n={n} g={g} k={k}");
        }
    }

    #[test]
    fn expand_block_diagonal_patterns() {
        // Fully dense when G = 1.
        let geo = ConvGeometry::new(3, 4, 1, (1, 1), 1, 0).unwrap();
        let mut rng = SeededRng::new(5);
        let layer = GroupConvLayer::<f64>::kaiming(geo, &mut rng).unwrap();
        let dense = expand_block_diagonal(&layer);
        assert_eq!(dense.data(), layer.weights.data());

        // Two 2x2 diagonal blocks for M=N=4, G=2.
        let geo = ConvGeometry::new(4, 4, 2, (1, 1), 1, 0).unwrap();
        let layer = GroupConvLayer::<f64>::kaiming(geo, &mut rng).unwrap();
        let dense = expand_block_diagonal(&layer);
        for nc in 0..4 {
            for mc in 0..4 {
                let inside = (nc / 2) == (mc / 2);
                let v = dense.at4(nc, mc, 0, 0);
                assert_eq!(v != 0.0, inside, "({nc},{mc})");
            }
        }

        // Depthwise: only the channel diagonal is populated.
        let geo = ConvGeometry::new(4, 4, 4, (3, 3), 1, 1).unwrap();
        let layer = GroupConvLayer::<f64>::kaiming(geo, &mut rng).unwrap();
        let dense = expand_block_diagonal(&layer);
        for nc in 0..4 {
            for mc in 0..4 {
                if nc != mc {
                    for u in 0..3 {
                        for v in 0..3 {
                            assert_eq!(dense.at4(nc, mc, u, v), 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn backward_zero_and_shapes() {
        let geo = ConvGeometry::new(4, 6, 2, (3, 3), 2, 1).unwrap();
        let mut rng = SeededRng::new(9);
        let mut layer = GroupConvLayer::<f64>::kaiming(geo, &mut rng).unwrap();
        layer.bias = Some(vec![0.1; 6]);
        let x = random_tensor(&[2, 4, 7, 6], 13);
        let y = group_conv_forward(&x, &layer).unwrap();
        let dy = Tensor::zeros(&y.shape().to_vec()).unwrap();
        let grads = group_conv_backward(&dy, &x, &layer).unwrap();
        assert_eq!(grads.dx.max_modulus(), 0.0);
        assert_eq!(grads.dw.max_modulus(), 0.0);
        assert!(grads.db.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_dense_1x1_is_outer_product() {
        // A 1x1 single-group conv on a 1x1 image is a plain linear map:
        // dW must be dy * x^T, dX must be W^T * dy.
        let geo = ConvGeometry::new(3, 2, 1, (1, 1), 1, 0).unwrap();
        let mut rng = SeededRng::new(17);
        let layer = GroupConvLayer::<f64>::kaiming(geo, &mut rng).unwrap();
        let x = random_tensor(&[1, 3, 1, 1], 19);
        let dy = random_tensor(&[1, 2, 1, 1], 23);
        let grads = group_conv_backward(&dy, &x, &layer).unwrap();
        for n in 0..2 {
            for m in 0..3 {
                let want = dy.data()[n] * x.data()[m];
                assert!((grads.dw.data()[n * 3 + m] - want).abs() < 1e-14);
            }
        }
        for m in 0..3 {
            let want: f64 = (0..2).map(|n| layer.weights.data()[n * 3 + m] * dy.data()[n]).sum();
            assert!((grads.dx.data()[m] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let geo = ConvGeometry::new(4, 4, 2, (3, 3), 1, 1).unwrap();
        let mut rng = SeededRng::new(29);
        let mut layer = GroupConvLayer::<f64>::kaiming(geo, &mut rng).unwrap();
        layer.bias = Some(vec![0.05, -0.02, 0.01, 0.0]);
        let x = random_tensor(&[1, 4, 4, 4], 31);
        // Scalar objective: weighted sum of outputs, weights fixed.
        let probe = random_tensor(&[1, 4, 4, 4], 37);
        let loss = |l: &GroupConvLayer<f64>, xin: &Tensor<f64>| -> f64 {
            let y = group_conv_forward(xin, l).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let y = group_conv_forward(&x, &layer).unwrap();
        let dy = probe.reshape(&y.shape().to_vec()).unwrap();
        let grads = group_conv_backward(&dy, &x, &layer).unwrap();

        let h = 1e-5;
        // Weight gradients.
        for idx in (0..layer.weights.numel()).step_by(7) {
            let mut lp = layer.clone();
            lp.weights.data_mut()[idx] += h;
            let mut lm = layer.clone();
            lm.weights.data_mut()[idx] -= h;
            let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
            let an = grads.dw.data()[idx];
            assert!((fd - an).abs() <= 1e-4 * (1.0 + an.abs()), "dw[{idx}]: {fd} vs {an}");
        }
        // Input gradients.
        for idx in (0..x.numel()).step_by(5) {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * h);
            let an = grads.dx.data()[idx];
            assert!((fd - an).abs() <= 1e-4 * (1.0 + an.abs()), "dx[{idx}]: {fd} vs {an}");
        }
        // Bias gradients.
        let dbg = grads.db.unwrap();
        for nc in 0..4 {
            let mut lp = layer.clone();
            lp.bias.as_mut().unwrap()[nc] += h;
            let mut lm = layer.clone();
            lm.bias.as_mut().unwrap()[nc] -= h;
            let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
            assert!((fd - dbg[nc]).abs() <= 1e-4 * (1.0 + dbg[nc].abs()));
        }
    }

    #[test]
    fn circulant_expand_patterns() {
        // Identity block.
        let fc = Tensor::new(&[1, 1, 4, 1, 1], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let layer = CirculantLayer::new(4, 4, 4, fc, 1, 0).unwrap();
        let dense = circulant_expand(&layer);
        let eye = Tensor::<f64>::eye(4).reshape(&[4, 4, 1, 1]).unwrap();
        assert_eq!(dense, eye);

        // First column [a,b,c,d] gives first row [a,d,c,b] and constant
        // wrap-around diagonals.
        let (a, b, c, d) = (1.0, 2.0, 3.0, 4.0);
        let fc = Tensor::new(&[1, 1, 4, 1, 1], vec![a, b, c, d]).unwrap();
        let layer = CirculantLayer::new(4, 4, 4, fc, 1, 0).unwrap();
        let dense = circulant_expand(&layer);
        let row0: Vec<f64> = (0..4).map(|cc| dense.at4(0, cc, 0, 0)).collect();
        assert_eq!(row0, vec![a, d, c, b]);
        for r in 0..4 {
            for cc in 0..4 {
                let want = [a, b, c, d][(r + 4 - cc) % 4];
                assert_eq!(dense.at4(r, cc, 0, 0), want);
            }
        }
    }

    #[test]
    fn circulant_storage_is_compressed() {
        let mut rng = SeededRng::new(3);
        let layer = CirculantLayer::<f64>::kaiming(4, 8, 8, (3, 3), 1, 1, &mut rng).unwrap();
        assert_eq!(layer.param_count(), 8 * 8 * 3 * 3 / 4);
    }

    #[test]
    fn circulant_matvec_fft_cases() {
        // Identity circulant.
        let x = vec![1.0f64, -2.0, 3.0, 0.5];
        let y = circulant_matvec_fft(&[1.0, 0.0, 0.0, 0.0], &x).unwrap();
        for (a, b) in y.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
        // All-ones circulant: every output is the sum.
        let y = circulant_matvec_fft(&[1.0, 1.0, 1.0, 1.0], &x).unwrap();
        let s: f64 = x.iter().sum();
        for v in y {
            assert!((v - s).abs() < 1e-12);
        }
        // Random D=16 against the dense expansion oracle.
        let mut rng = SeededRng::new(41);
        let col: Vec<f64> = rng.normal_vec(16);
        let x: Vec<f64> = rng.normal_vec(16);
        let fast = circulant_matvec_fft(&col, &x).unwrap();
        let fc = Tensor::new(&[1, 1, 16, 1, 1], col.clone()).unwrap();
        let layer = CirculantLayer::new(16, 16, 16, fc, 1, 0).unwrap();
        let dense = circulant_expand(&layer);
        for r in 0..16 {
            let want: f64 = (0..16).map(|cc| dense.at4(r, cc, 0, 0) * x[cc]).sum();
            assert!((fast[r] - want).abs() < 1e-10, "row {r}");
        }
        // Odd length goes through the dense transform fallback.
        let col5: Vec<f64> = rng.normal_vec(5);
        let x5: Vec<f64> = rng.normal_vec(5);
        let fast5 = circulant_matvec_fft(&col5, &x5).unwrap();
        for r in 0..5 {
            let want: f64 = (0..5).map(|cc| col5[(r + 5 - cc) % 5] * x5[cc]).sum();
            assert!((fast5[r] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn block_circulant_identity_blocks_sum_rows() {
        // All identity blocks, 1x1 kernel, M = N: output channel
        // bi + r*(M/D) is the sum of inputs {bj + r*(M/D)} over bj.
        let d = 2;
        let (m, n) = (4, 4);
        let mut fc = Tensor::zeros(&[n / d, m / d, d, 1, 1]).unwrap();
        for bi in 0..n / d {
            for bj in 0..m / d {
                fc.data_mut()[((bi * (m / d) + bj) * d) * 1] = 1.0;
            }
        }
        let layer = CirculantLayer::new(d, m, n, fc, 1, 0).unwrap();
        let x = random_tensor(&[1, m, 2, 2], 43);
        for fast in [false, true] {
            let y = block_circulant_forward(&x, &layer, fast).unwrap();
            for r in 0..d {
                for bi in 0..n / d {
                    for k in 0..4 {
                        let want: f64 = (0..m / d)
                            .map(|bj| x.data()[(bj + r * (m / d)) * 4 + k])
                            .sum();
                        let got = y.data()[(bi + r * (n / d)) * 4 + k];
                        assert!((got - want).abs() < 1e-10, "fast={fast}");
                    }
                }
            }
        }
    }

    #[test]
    fn block_circulant_fast_matches_slow() {
        for (m, n, d, k, stride, pad) in
            [(8, 8, 4, 1, 1, 0), (8, 8, 4, 3, 1, 1), (8, 4, 4, 3, 2, 1), (6, 6, 3, 1, 1, 0)]
        {
            let mut rng = SeededRng::new(47);
            let layer = CirculantLayer::<f64>::kaiming(d, m, n, (k, k), stride, pad, &mut rng).unwrap();
            let x = random_tensor(&[2, m, 5, 5], 53);
            let slow = block_circulant_forward(&x, &layer, false).unwrap();
            let fast = block_circulant_forward(&x, &layer, true).unwrap();
            assert!(
                slow.max_abs_diff(&fast).unwrap() < 1e-9,
                "m={m} n={n} d={d} k={k} s={stride}"
            );
        }
    }

    #[test]
    fn decomposition_matches_direct_path() {
        let mut rng = SeededRng::new(59);
        let layer = CirculantLayer::<f64>::kaiming(4, 8, 8, (1, 1), 1, 0, &mut rng).unwrap();
        let (p, gconv, q) = circulant_to_ugconv(&layer).unwrap();
        let x = random_tensor(&[2, 8, 3, 3], 61);
        let xt = block_apply(&p, &x.to_complex()).unwrap();
        let yt = group_conv_forward(&xt, &gconv).unwrap();
        let yc = block_apply(&q, &yt).unwrap();
        assert!(yc.max_imag() < 1e-10);
        let y = yc.into_real_checked(1e-8).unwrap();
        let direct = block_circulant_forward(&x, &layer, false).unwrap();
        assert!(y.max_abs_diff(&direct).unwrap() < 1e-9);
    }

    #[test]
    fn decomposition_identity_blocks_give_flat_weights() {
        // DFT of a unit impulse is constant: every frequency's weight is
        // the same.
        let fc = Tensor::new(&[1, 1, 4, 1, 1], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let layer = CirculantLayer::new(4, 4, 4, fc, 1, 0).unwrap();
        let (_, gconv, _) = circulant_to_ugconv(&layer).unwrap();
        for j in 0..4 {
            let wj = gconv.weights.data()[j];
            assert!((wj - gconv.weights.data()[0]).norm() < 1e-12);
        }
    }

    #[test]
    fn decomposition_d1_is_identity_specs() {
        let mut rng = SeededRng::new(67);
        let layer = CirculantLayer::<f64>::kaiming(1, 3, 5, (1, 1), 1, 0, &mut rng).unwrap();
        let (p, gconv, q) = circulant_to_ugconv(&layer).unwrap();
        assert_eq!(p, UnitarySpec::identity(3));
        assert_eq!(q, UnitarySpec::identity(5));
        assert_eq!(gconv.geometry.groups, 1);
    }

    #[test]
    fn group_param_count_scales_inverse_with_groups() {
        for g in [1usize, 2, 4, 8] {
            let geo = ConvGeometry::new(8, 8, g, (3, 3), 1, 1).unwrap();
            assert_eq!(geo.weight_count(), 8 * 8 * 9 / g);
        }
    }
}
