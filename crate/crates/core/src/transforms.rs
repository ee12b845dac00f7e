//! Channel-space unitary transforms.
//!
//! A `UnitarySpec` describes one transform applied across the channel axis
//! of an activation tensor: a permutation (fixed round-robin shuffle or a
//! seeded random one), a block Hadamard, a block Fourier, a block random
//! orthogonal matrix, or the identity.
//!
//! Block kinds act on strided channel sets: with `C` channels and block
//! length `D`, set `s` consists of channels `{s, s + C/D, s + 2C/D, ...}`
//! (`C/D` sets of `D` channels each). When the companion group convolution
//! uses `D` contiguous groups, each set touches exactly one channel of
//! every group, which is what lets a two-sided Fourier sandwich realize a
//! circulant channel structure.
//!
//! Every kind is exactly unitary: Hadamard and Fourier matrices carry the
//! 1/sqrt(n) normalization. `conjugated` selects the conjugate transpose
//! (equal to the inverse), which is how block-inverse pairs are built.

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use num_traits::{Float, FromPrimitive, One};
use crate::scalar::{Real, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Identity,
    Shuffle,
    Hadamard,
    Fourier,
    RandomOrtho,
    RandomPerm,
}

impl TransformKind {
    /// Kinds that act on strided D-length channel sets.
    pub fn is_block_kind(self) -> bool {
        matches!(self, TransformKind::Hadamard | TransformKind::Fourier | TransformKind::RandomOrtho)
    }
}

/// Declarative description of one channel-space transform.
///
/// For `Shuffle` the `block_len` slot stores the group count of the
/// round-robin shuffle; for `Identity` and `RandomPerm` the transform
/// spans all channels and `block_len` is ignored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitarySpec {
    pub kind: TransformKind,
    pub block_len: usize,
    pub channels: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub conjugated: bool,
}

impl UnitarySpec {
    pub fn identity(channels: usize) -> Self {
        UnitarySpec { kind: TransformKind::Identity, block_len: channels, channels, seed: 0, conjugated: false }
    }

    pub fn shuffle(channels: usize, groups: usize) -> Self {
        UnitarySpec { kind: TransformKind::Shuffle, block_len: groups, channels, seed: 0, conjugated: false }
    }

    pub fn hadamard(channels: usize, block_len: usize, conjugated: bool) -> Self {
        UnitarySpec { kind: TransformKind::Hadamard, block_len, channels, seed: 0, conjugated }
    }

    pub fn fourier(channels: usize, block_len: usize, conjugated: bool) -> Self {
        UnitarySpec { kind: TransformKind::Fourier, block_len, channels, seed: 0, conjugated }
    }

    pub fn random_ortho(channels: usize, block_len: usize, seed: u64, conjugated: bool) -> Self {
        UnitarySpec { kind: TransformKind::RandomOrtho, block_len, channels, seed, conjugated }
    }

    pub fn random_perm(channels: usize, seed: u64, conjugated: bool) -> Self {
        UnitarySpec { kind: TransformKind::RandomPerm, block_len: channels, channels, seed, conjugated }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Spec("channels must be >= 1".into()));
        }
        match self.kind {
            TransformKind::Identity | TransformKind::RandomPerm => Ok(()),
            TransformKind::Shuffle => {
                if self.block_len == 0 || self.channels % self.block_len != 0 {
                    return Err(Error::Spec(format!(
                        "shuffle group count {} must divide channels {}",
                        self.block_len, self.channels
                    )));
                }
                Ok(())
            }
            TransformKind::Hadamard | TransformKind::Fourier | TransformKind::RandomOrtho => {
                if self.block_len == 0 || self.channels % self.block_len != 0 {
                    return Err(Error::Spec(format!(
                        "block length {} must divide channels {}",
                        self.block_len, self.channels
                    )));
                }
                if self.kind == TransformKind::Hadamard && !self.block_len.is_power_of_two() {
                    return Err(Error::Spec(format!(
                        "hadamard block length {} is not a power of two",
                        self.block_len
                    )));
                }
                Ok(())
            }
        }
    }

    /// The spec applying the inverse transform (conjugate transpose).
    pub fn block_inverse(&self) -> Self {
        let mut inv = self.clone();
        inv.conjugated = !inv.conjugated;
        inv
    }

    /// Extra floating-point work this transform performs per spatial
    /// position, as (multiplies, additions). Hadamard needs no multiplies;
    /// permutations and the identity cost nothing.
    pub fn ops_per_position(&self) -> (u64, u64) {
        let c = self.channels as u64;
        let d = self.block_len as u64;
        match self.kind {
            TransformKind::Identity | TransformKind::Shuffle | TransformKind::RandomPerm => (0, 0),
            TransformKind::Hadamard => (0, c * d.ilog2() as u64),
            TransformKind::Fourier => {
                let logd = d.ilog2() as u64;
                (c * logd, c * logd)
            }
            TransformKind::RandomOrtho => (c * d, c * (d - 1)),
        }
    }
}

/// A channel permutation: output channel `p` reads input channel
/// `mapping[p]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &m in &mapping {
            if m >= n || seen[m] {
                return Err(Error::Spec(format!("mapping {mapping:?} is not a bijection")));
            }
            seen[m] = true;
        }
        Ok(Permutation { mapping })
    }

    pub fn identity(n: usize) -> Self {
        Permutation { mapping: (0..n).collect() }
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.mapping.len()];
        for (p, &src) in self.mapping.iter().enumerate() {
            inv[src] = p;
        }
        Permutation { mapping: inv }
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &Permutation) -> Permutation {
        let mapping = self.mapping.iter().map(|&m| first.mapping[m]).collect();
        Permutation { mapping }
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().enumerate().all(|(i, &m)| i == m)
    }

    pub fn apply<S: Copy>(&self, v: &[S]) -> Vec<S> {
        self.mapping.iter().map(|&m| v[m]).collect()
    }
}

/// Round-robin channel shuffle: the channel at (group g, index i) moves to
/// (group i mod G, slot g) — a reshape-transpose of the G x (N/G) grid.
pub fn shuffle_permutation(channels: usize, groups: usize) -> Result<Permutation> {
    if groups == 0 || channels % groups != 0 {
        return Err(Error::Spec(format!("groups {groups} must divide channels {channels}")));
    }
    let per_group = channels / groups;
    let mut mapping = vec![0; channels];
    for g in 0..groups {
        for i in 0..per_group {
            mapping[i * groups + g] = g * per_group + i;
        }
    }
    Permutation::new(mapping)
}

/// Seeded uniform random permutation (Fisher-Yates).
pub fn random_permutation(n: usize, seed: u64) -> Permutation {
    let mut mapping: Vec<usize> = (0..n).collect();
    let mut rng = SeededRng::derive(seed, crate::rng::tags::TRANSFORM);
    rng.shuffle(&mut mapping);
    Permutation { mapping }
}

/// Sylvester Hadamard matrix of order `n` (power of two), scaled by
/// 1/sqrt(n) so it is orthogonal. Unscaled entries are exactly +1/-1.
pub fn hadamard_matrix<T: Real>(n: usize) -> Result<Tensor<T>> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::Spec(format!("hadamard order {n} is not a power of two")));
    }
    let scale = T::one() / T::from_usize(n).unwrap().sqrt();
    let mut m = Tensor::zeros(&[n, n])?;
    for r in 0..n {
        for c in 0..n {
            // Sylvester entry: (-1)^{popcount(r & c)}
            let sign = if (r & c).count_ones() % 2 == 0 { T::one() } else { -T::one() };
            m.set2(r, c, sign * scale);
        }
    }
    Ok(m)
}

/// In-place fast Walsh-Hadamard transform, normalized by 1/sqrt(n) at the
/// end. Returns the number of additions/subtractions the butterfly
/// performed, which is exactly n*log2(n).
pub fn fht_in_place<T: Real>(v: &mut [T]) -> Result<usize> {
    let n = v.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::Spec(format!("fht length {n} is not a power of two")));
    }
    let mut adds = 0usize;
    let mut h = 1;
    while h < n {
        for i in (0..n).step_by(h * 2) {
            for j in i..i + h {
                let a = v[j];
                let b = v[j + h];
                v[j] = a + b;
                v[j + h] = a - b;
                adds += 2;
            }
        }
        h *= 2;
    }
    let scale = T::one() / T::from_usize(n).unwrap().sqrt();
    for x in v.iter_mut() {
        *x = *x * scale;
    }
    Ok(adds)
}

/// Fast Hadamard transform of a channel vector; equals
/// `hadamard_matrix(n) * v`.
pub fn fht<T: Real>(v: &[T]) -> Result<Vec<T>> {
    let mut out = v.to_vec();
    fht_in_place(&mut out)?;
    Ok(out)
}

/// Normalized DFT matrix: entry (j, k) = omega^(jk) / sqrt(n) with
/// omega = exp(-2*pi*i/n). Unitary for every n >= 1.
pub fn dft_matrix<T: Real>(n: usize) -> Result<Tensor<Complex<T>>> {
    if n == 0 {
        return Err(Error::Spec("dft size must be >= 1".into()));
    }
    let scale = T::one() / T::from_usize(n).unwrap().sqrt();
    let mut m = Tensor::zeros(&[n, n])?;
    for j in 0..n {
        for k in 0..n {
            m.set2(j, k, dft_entry::<T>(j, k, n).scale(scale));
        }
    }
    Ok(m)
}

/// Unscaled root-of-unity power omega^(jk), omega = exp(-2*pi*i/n).
fn dft_entry<T: Real>(j: usize, k: usize, n: usize) -> Complex<T> {
    let angle = -T::TAU() * T::from_usize((j * k) % n).unwrap() / T::from_usize(n).unwrap();
    Complex::new(angle.cos(), angle.sin())
}

/// In-place radix-2 FFT (decimation in time), normalized by 1/sqrt(n) so
/// it matches `dft_matrix`. `conjugated` applies the conjugate transpose
/// (the inverse). Lengths that are not powers of two are routed through
/// the dense matrix product instead.
pub fn fft_in_place<T: Real>(v: &mut [Complex<T>], conjugated: bool) -> Result<()> {
    let n = v.len();
    if n == 0 {
        return Err(Error::Spec("fft length must be >= 1".into()));
    }
    if !n.is_power_of_two() {
        return dense_dft_in_place(v, conjugated);
    }
    if n == 1 {
        return Ok(());
    }
    let log2n = n.trailing_zeros() as usize;
    // Bit-reversal permutation.
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS as usize - log2n);
        if i < j {
            v.swap(i, j);
        }
    }
    let sign = if conjugated { T::one() } else { -T::one() };
    let mut m = 2;
    while m <= n {
        let step = sign * T::TAU() / T::from_usize(m).unwrap();
        for start in (0..n).step_by(m) {
            for k in 0..m / 2 {
                let angle = step * T::from_usize(k).unwrap();
                let w = Complex::new(angle.cos(), angle.sin());
                let e = v[start + k];
                let o = v[start + k + m / 2] * w;
                v[start + k] = e + o;
                v[start + k + m / 2] = e - o;
            }
        }
        m <<= 1;
    }
    let scale = T::one() / T::from_usize(n).unwrap().sqrt();
    for z in v.iter_mut() {
        *z = z.scale(scale);
    }
    Ok(())
}

fn dense_dft_in_place<T: Real>(v: &mut [Complex<T>], conjugated: bool) -> Result<()> {
    let n = v.len();
    let scale = T::one() / T::from_usize(n).unwrap().sqrt();
    let mut out = vec![Complex::new(T::zero(), T::zero()); n];
    for (j, o) in out.iter_mut().enumerate() {
        let mut acc = Complex::new(T::zero(), T::zero());
        for (k, &x) in v.iter().enumerate() {
            let mut w = dft_entry::<T>(j, k, n);
            if conjugated {
                w = w.conj();
            }
            acc += w * x;
        }
        *o = acc.scale(scale);
    }
    v.copy_from_slice(&out);
    Ok(())
}

/// Normalized FFT of a channel vector; equals `dft_matrix(n) * v`.
pub fn fft<T: Real>(v: &[Complex<T>]) -> Result<Vec<Complex<T>>> {
    let mut out = v.to_vec();
    fft_in_place(&mut out, false)?;
    Ok(out)
}

/// Inverse normalized FFT (the conjugate transpose transform).
pub fn ifft<T: Real>(v: &[Complex<T>]) -> Result<Vec<Complex<T>>> {
    let mut out = v.to_vec();
    fft_in_place(&mut out, true)?;
    Ok(out)
}

/// Seeded random orthogonal matrix: modified Gram-Schmidt on the columns
/// of an i.i.d. standard-normal matrix. The triangular factor's diagonal
/// is positive by construction, so the result is deterministic in the
/// seed and Q^T Q = I to roundoff.
pub fn random_orthogonal<T: Real>(n: usize, seed: u64) -> Result<Tensor<T>> {
    if n == 0 {
        return Err(Error::Spec("orthogonal matrix size must be >= 1".into()));
    }
    let mut rng = SeededRng::derive(seed, crate::rng::tags::TRANSFORM);
    let mut cols: Vec<Vec<T>> = (0..n).map(|_| rng.normal_vec(n)).collect();
    for j in 0..n {
        for i in 0..j {
            let dot = (0..n).fold(T::zero(), |acc, r| acc + cols[i][r] * cols[j][r]);
            for r in 0..n {
                let c = cols[i][r];
                cols[j][r] = cols[j][r] - dot * c;
            }
        }
        let norm = (0..n).fold(T::zero(), |acc, r| acc + cols[j][r] * cols[j][r]).sqrt();
        if norm < T::from_f64(1e-12).unwrap() {
            return Err(Error::Spec("degenerate random matrix; change the seed".into()));
        }
        for r in 0..n {
            cols[j][r] = cols[j][r] / norm;
        }
    }
    let mut q = Tensor::zeros(&[n, n])?;
    for (j, col) in cols.iter().enumerate() {
        for r in 0..n {
            q.set2(r, j, col[r]);
        }
    }
    Ok(q)
}

/// Scalar kinds usable under a Fourier transform. Real scalars reject it;
/// promoting to complex first is the caller's job.
pub trait TransformScalar: Scalar {
    fn dft_matrix_entry(j: usize, k: usize, n: usize) -> Result<Self>;
    fn fourier_block(v: &mut [Self], conjugated: bool) -> Result<()>;
}

macro_rules! impl_transform_scalar_real {
    ($($t:ty)*) => {$(
        impl TransformScalar for $t {
            fn dft_matrix_entry(_j: usize, _k: usize, _n: usize) -> Result<Self> {
                Err(Error::ComplexRequired("fourier transform"))
            }
            fn fourier_block(_v: &mut [Self], _conjugated: bool) -> Result<()> {
                Err(Error::ComplexRequired("fourier transform"))
            }
        }
    )*};
}

impl_transform_scalar_real!(f32 f64);

impl<T: Real> TransformScalar for Complex<T> {
    fn dft_matrix_entry(j: usize, k: usize, n: usize) -> Result<Self> {
        let scale = T::one() / T::from_usize(n).unwrap().sqrt();
        Ok(dft_entry::<T>(j, k, n).scale(scale))
    }
    fn fourier_block(v: &mut [Self], conjugated: bool) -> Result<()> {
        fft_in_place(v, conjugated)
    }
}

/// The permutation a spec denotes (shuffle or random kinds), honoring the
/// conjugated flag: the conjugate transpose of a permutation matrix is the
/// inverse permutation.
fn spec_permutation(spec: &UnitarySpec) -> Result<Permutation> {
    let perm = match spec.kind {
        TransformKind::Shuffle => shuffle_permutation(spec.channels, spec.block_len)?,
        TransformKind::RandomPerm => random_permutation(spec.channels, spec.seed),
        _ => return Err(Error::Spec("not a permutation kind".into())),
    };
    Ok(if spec.conjugated { perm.inverse() } else { perm })
}

/// Apply the transform to every channel vector of an activation tensor
/// (all batch entries, all spatial positions).
pub fn block_apply<S: TransformScalar>(spec: &UnitarySpec, x: &Tensor<S>) -> Result<Tensor<S>> {
    spec.validate()?;
    if x.rank() != 4 {
        return Err(Error::Shape(format!("expected rank-4 activations, got {:?}", x.shape())));
    }
    if x.channels() != spec.channels {
        return Err(Error::Shape(format!(
            "spec expects {} channels, tensor has {}",
            spec.channels,
            x.channels()
        )));
    }
    match spec.kind {
        TransformKind::Identity => Ok(x.clone()),
        TransformKind::Shuffle | TransformKind::RandomPerm => {
            let perm = spec_permutation(spec)?;
            apply_per_position(x, |chan: &mut [S]| {
                let permuted = perm.apply(chan);
                chan.copy_from_slice(&permuted);
                Ok(())
            })
        }
        TransformKind::Hadamard => apply_per_set(x, spec.block_len, |set: &mut [S]| {
            // Real symmetric involution: the conjugate transpose is itself.
            fht_set(set)
        }),
        TransformKind::Fourier => {
            let conj = spec.conjugated;
            apply_per_set(x, spec.block_len, |set: &mut [S]| S::fourier_block(set, conj))
        }
        TransformKind::RandomOrtho => {
            let base = random_orthogonal::<S::Real>(spec.block_len, spec.seed)?;
            let d = spec.block_len;
            let mut mat = vec![S::zero(); d * d];
            for r in 0..d {
                for c in 0..d {
                    // conjugated => transpose (real matrix)
                    let v = if spec.conjugated { base.at2(c, r) } else { base.at2(r, c) };
                    mat[r * d + c] = S::from_real(v);
                }
            }
            apply_per_set(x, d, |set: &mut [S]| {
                let src = set.to_vec();
                for r in 0..d {
                    let mut acc = S::zero();
                    for c in 0..d {
                        acc += mat[r * d + c] * src[c];
                    }
                    set[r] = acc;
                }
                Ok(())
            })
        }
    }
}

/// FHT over a slice of generic scalars (real or complex): the butterfly is
/// add/subtract only, so it needs nothing beyond ring ops.
fn fht_set<S: Scalar>(v: &mut [S]) -> Result<()> {
    let n = v.len();
    if !n.is_power_of_two() {
        return Err(Error::Spec(format!("fht length {n} is not a power of two")));
    }
    let mut h = 1;
    while h < n {
        for i in (0..n).step_by(h * 2) {
            for j in i..i + h {
                let a = v[j];
                let b = v[j + h];
                v[j] = a + b;
                v[j + h] = a - b;
            }
        }
        h *= 2;
    }
    let scale = S::Real::one() / S::Real::from_usize(n).unwrap().sqrt();
    for x in v.iter_mut() {
        *x = x.scale(scale);
    }
    Ok(())
}

fn apply_per_position<S: Scalar>(
    x: &Tensor<S>,
    f: impl Fn(&mut [S]) -> Result<()>,
) -> Result<Tensor<S>> {
    let (b, c, h, w) = (x.batch(), x.channels(), x.height(), x.width());
    let plane = h * w;
    let mut out = x.clone();
    let mut chan = vec![S::zero(); c];
    for bi in 0..b {
        for k in 0..plane {
            for ch in 0..c {
                chan[ch] = x.data()[(bi * c + ch) * plane + k];
            }
            f(&mut chan)?;
            for ch in 0..c {
                out.data_mut()[(bi * c + ch) * plane + k] = chan[ch];
            }
        }
    }
    Ok(out)
}

fn apply_per_set<S: Scalar>(
    x: &Tensor<S>,
    block_len: usize,
    f: impl Fn(&mut [S]) -> Result<()>,
) -> Result<Tensor<S>> {
    let (b, c, h, w) = (x.batch(), x.channels(), x.height(), x.width());
    let plane = h * w;
    let sets = c / block_len;
    let mut out = x.clone();
    let mut buf = vec![S::zero(); block_len];
    for bi in 0..b {
        for k in 0..plane {
            for s in 0..sets {
                for d in 0..block_len {
                    buf[d] = x.data()[(bi * c + (s + d * sets)) * plane + k];
                }
                f(&mut buf)?;
                for d in 0..block_len {
                    out.data_mut()[(bi * c + (s + d * sets)) * plane + k] = buf[d];
                }
            }
        }
    }
    Ok(out)
}

/// The full channels x channels matrix a spec denotes, such that applying
/// it to every channel vector equals `block_apply`. Requesting a Fourier
/// matrix in a real scalar type is an error.
pub fn dense_matrix_of<S: TransformScalar>(spec: &UnitarySpec) -> Result<Tensor<S>> {
    spec.validate()?;
    let c = spec.channels;
    match spec.kind {
        TransformKind::Identity => Ok(Tensor::eye(c)),
        TransformKind::Shuffle | TransformKind::RandomPerm => {
            let perm = spec_permutation(spec)?;
            let mut m = Tensor::zeros(&[c, c])?;
            for p in 0..c {
                m.set2(p, perm.mapping()[p], S::one());
            }
            Ok(m)
        }
        TransformKind::Hadamard | TransformKind::Fourier | TransformKind::RandomOrtho => {
            let d = spec.block_len;
            let sets = c / d;
            // Base D x D matrix, conjugate-transposed if requested.
            let mut base = vec![S::zero(); d * d];
            match spec.kind {
                TransformKind::Hadamard => {
                    let hm = hadamard_matrix::<S::Real>(d)?;
                    for r in 0..d {
                        for col in 0..d {
                            base[r * d + col] = S::from_real(hm.at2(r, col));
                        }
                    }
                }
                TransformKind::Fourier => {
                    for r in 0..d {
                        for col in 0..d {
                            let e = if spec.conjugated {
                                S::dft_matrix_entry(col, r, d)?.conj()
                            } else {
                                S::dft_matrix_entry(r, col, d)?
                            };
                            base[r * d + col] = e;
                        }
                    }
                }
                TransformKind::RandomOrtho => {
                    let q = random_orthogonal::<S::Real>(d, spec.seed)?;
                    for r in 0..d {
                        for col in 0..d {
                            let v = if spec.conjugated { q.at2(col, r) } else { q.at2(r, col) };
                            base[r * d + col] = S::from_real(v);
                        }
                    }
                }
                _ => unreachable!(),
            }
            let mut m = Tensor::zeros(&[c, c])?;
            for s in 0..sets {
                for r in 0..d {
                    for col in 0..d {
                        m.set2(s + r * sets, s + col * sets, base[r * d + col]);
                    }
                }
            }
            Ok(m)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn hadamard_base_cases() {
        let s = 1.0 / 2f64.sqrt();
        let h2 = hadamard_matrix::<f64>(2).unwrap();
        assert_eq!(h2.data(), &[s, s, s, -s]);

        let h4 = hadamard_matrix::<f64>(4).unwrap();
        let expected: Vec<f64> = [
            [1.0, 1.0, 1.0, 1.0],
            [1.0, -1.0, 1.0, -1.0],
            [1.0, 1.0, -1.0, -1.0],
            [1.0, -1.0, -1.0, 1.0],
        ]
        .concat()
        .iter()
        .map(|v| v * 0.5)
        .collect();
        assert_eq!(h4.data(), &expected[..]);

        assert!(hadamard_matrix::<f64>(3).is_err());
        assert!(hadamard_matrix::<f64>(0).is_err());
    }

    #[test]
    fn fht_impulse_and_involution() {
        let out = fht(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(out, vec![0.5, 0.5, 0.5, 0.5]);

        let v: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let twice = fht(&fht(&v).unwrap()).unwrap();
        for (a, b) in v.iter().zip(&twice) {
            approx(*a, *b, 1e-14);
        }
        assert!(fht(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn fht_matches_dense_hadamard() {
        let mut rng = SeededRng::new(11);
        let n = 64;
        let v: Vec<f64> = rng.normal_vec(n);
        let h = hadamard_matrix::<f64>(n).unwrap();
        let vt = Tensor::new(&[n, 1], v.clone()).unwrap();
        let dense = h.matmul(&vt).unwrap();
        let fast = fht(&v).unwrap();
        for i in 0..n {
            approx(fast[i], dense.data()[i], 1e-12);
        }
    }

    #[test]
    fn fht_add_count_is_n_log_n() {
        for n in [1usize, 2, 4, 8, 64, 256] {
            let mut v = vec![1.0f64; n];
            let adds = fht_in_place(&mut v).unwrap();
            let expected = if n > 1 { n * n.ilog2() as usize } else { 0 };
            assert_eq!(adds, expected, "n = {n}");
        }
    }

    #[test]
    fn dft_matrix_table_pattern() {
        let m1 = dft_matrix::<f64>(1).unwrap();
        assert_eq!(m1.data()[0], Complex64::new(1.0, 0.0));

        // Unscaled entries of the 4x4 are omega^(jk): first row/col all 1,
        // entry (1,1) = -i, (1,2) = -1, (2,2) = 1, (3,3) = -i...
        let m4 = dft_matrix::<f64>(4).unwrap();
        let unscale = 2.0; // sqrt(4)
        let w = |p: usize| {
            let angle = -std::f64::consts::TAU * (p as f64) / 4.0;
            Complex64::new(angle.cos(), angle.sin())
        };
        for j in 0..4 {
            for k in 0..4 {
                let got = m4.at2(j, k) * unscale;
                let want = w((j * k) % 4);
                assert!((got - want).norm() < 1e-14, "({j},{k})");
            }
        }

        // Unitarity: F F^H = I.
        for n in [1usize, 2, 3, 5, 8] {
            let f = dft_matrix::<f64>(n).unwrap();
            let prod = f.matmul(&f.conj_transpose().unwrap()).unwrap();
            let eye = Tensor::<Complex64>::eye(n);
            assert!(prod.max_abs_diff(&eye).unwrap() < 1e-12, "n = {n}");
        }
    }

    /// Quadratic-time DFT sum, the independent oracle for the fast path.
    fn naive_dft(v: &[Complex64]) -> Vec<Complex64> {
        let n = v.len();
        let scale = 1.0 / (n as f64).sqrt();
        (0..n)
            .map(|j| {
                let mut acc = Complex64::new(0.0, 0.0);
                for (k, &x) in v.iter().enumerate() {
                    let angle = -std::f64::consts::TAU * ((j * k) % n) as f64 / n as f64;
                    acc += Complex64::new(angle.cos(), angle.sin()) * x;
                }
                acc * scale
            })
            .collect()
    }

    #[test]
    fn fft_impulse_and_constant() {
        let impulse: Vec<Complex64> =
            [1.0, 0.0, 0.0, 0.0].iter().map(|&r| Complex64::new(r, 0.0)).collect();
        let out = fft(&impulse).unwrap();
        for z in &out {
            assert!((z - Complex64::new(0.5, 0.0)).norm() < 1e-15);
        }

        let c = 1.75;
        let constant = vec![Complex64::new(c, 0.0); 4];
        let out = fft(&constant).unwrap();
        assert!((out[0] - Complex64::new(2.0 * c, 0.0)).norm() < 1e-14);
        for z in &out[1..] {
            assert!(z.norm() < 1e-14);
        }
    }

    #[test]
    fn fft_matches_naive_dft() {
        let mut rng = SeededRng::new(3);
        for n in [1usize, 2, 8, 32, 6, 12] {
            let v: Vec<Complex64> =
                (0..n).map(|_| Complex64::new(rng.normal(), rng.normal())).collect();
            let fast = fft(&v).unwrap();
            let slow = naive_dft(&v);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).norm() < 1e-10, "n = {n}");
            }
            // Round trip through the inverse.
            let back = ifft(&fast).unwrap();
            for (a, b) in back.iter().zip(&v) {
                assert!((a - b).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn shuffle_round_robin() {
        let p = shuffle_permutation(6, 2).unwrap();
        assert_eq!(p.mapping(), &[0, 3, 1, 4, 2, 5]);

        let id = shuffle_permutation(4, 1).unwrap();
        assert!(id.is_identity());

        assert!(shuffle_permutation(6, 4).is_err());
    }

    #[test]
    fn shuffle_compose_inverse_pairs() {
        // Transpose-of-transpose oracle: shuffling with G then with N/G
        // returns every index to its slot in the G x (N/G) grid.
        for n in [12usize, 24, 64] {
            for g in (1..=n).filter(|g| n % g == 0) {
                let a = shuffle_permutation(n, g).unwrap();
                let b = shuffle_permutation(n, n / g).unwrap();
                assert!(b.compose(&a).is_identity(), "n={n} g={g}");
            }
        }
    }

    #[test]
    fn random_orthogonal_properties() {
        let q1 = random_orthogonal::<f64>(16, 42).unwrap();
        let q2 = random_orthogonal::<f64>(16, 42).unwrap();
        assert_eq!(q1.data(), q2.data(), "same seed must be bitwise identical");

        let prod = q1.conj_transpose().unwrap().matmul(&q1).unwrap();
        assert!(prod.max_abs_diff(&Tensor::eye(16)).unwrap() < 1e-10);

        let q = random_orthogonal::<f64>(1, 7).unwrap();
        assert!((q.data()[0].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn block_apply_identity_and_single_block() {
        let x = Tensor::<f64>::new(&[1, 4, 1, 1], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let id = UnitarySpec::identity(4);
        assert_eq!(block_apply(&id, &x).unwrap(), x);

        let spec = UnitarySpec::hadamard(4, 4, false);
        let y = block_apply(&spec, &x).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn block_apply_fourier_round_trip() {
        let mut rng = SeededRng::new(9);
        let x = Tensor::<f64>::new(&[2, 8, 3, 2], rng.normal_vec(2 * 8 * 6)).unwrap().to_complex();
        let spec = UnitarySpec::fourier(8, 4, false);
        let y = block_apply(&spec, &x).unwrap();
        let back = block_apply(&spec.block_inverse(), &y).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() < 1e-10);
    }

    #[test]
    fn fourier_rejects_real_scalars() {
        let x = Tensor::<f64>::zeros(&[1, 4, 1, 1]).unwrap();
        let spec = UnitarySpec::fourier(4, 4, false);
        assert!(matches!(block_apply(&spec, &x), Err(Error::ComplexRequired(_))));
    }

    #[test]
    fn dense_matrix_matches_block_apply() {
        let mut rng = SeededRng::new(21);
        let kinds: Vec<UnitarySpec> = vec![
            UnitarySpec::identity(5),
            UnitarySpec::shuffle(6, 2),
            UnitarySpec::hadamard(8, 4, false),
            UnitarySpec::random_ortho(8, 4, 3, false),
            UnitarySpec::random_ortho(8, 4, 3, true),
            UnitarySpec::random_perm(7, 5, false),
        ];
        for spec in kinds {
            let c = spec.channels;
            let v: Vec<f64> = rng.normal_vec(c);
            let x = Tensor::new(&[1, c, 1, 1], v.clone()).unwrap();
            let applied = block_apply(&spec, &x).unwrap();
            let m = dense_matrix_of::<f64>(&spec).unwrap();
            let vt = Tensor::new(&[c, 1], v).unwrap();
            let dense = m.matmul(&vt).unwrap();
            for i in 0..c {
                approx(applied.data()[i], dense.data()[i], 1e-12);
            }
        }

        // Fourier needs the complex instantiation.
        let spec = UnitarySpec::fourier(8, 4, true);
        let v: Vec<Complex64> = (0..8).map(|_| Complex64::new(rng.normal(), rng.normal())).collect();
        let x = Tensor::new(&[1, 8, 1, 1], v.clone()).unwrap();
        let applied = block_apply(&spec, &x).unwrap();
        let m = dense_matrix_of::<Complex64>(&spec).unwrap();
        let dense = m.matmul(&Tensor::new(&[8, 1], v).unwrap()).unwrap();
        for i in 0..8 {
            assert!((applied.data()[i] - dense.data()[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn identity_special_case_dense() {
        let m = dense_matrix_of::<f64>(&UnitarySpec::identity(5)).unwrap();
        assert_eq!(m, Tensor::eye(5));

        let s = dense_matrix_of::<f64>(&UnitarySpec::shuffle(6, 2)).unwrap();
        let perm = shuffle_permutation(6, 2).unwrap();
        for p in 0..6 {
            for c in 0..6 {
                let want = if perm.mapping()[p] == c { 1.0 } else { 0.0 };
                assert_eq!(s.at2(p, c), want);
            }
        }
    }

    #[test]
    fn spec_json_round_trip() {
        let json = r#"{"kind": "hadamard", "block_len": 8, "channels": 32, "seed": 7, "conjugated": false}"#;
        let spec: UnitarySpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.kind, TransformKind::Hadamard);
        assert_eq!(spec.block_len, 8);
        let back = serde_json::to_string(&spec).unwrap();
        let spec2: UnitarySpec = serde_json::from_str(&back).unwrap();
        assert_eq!(spec, spec2);
    }

    #[test]
    fn spec_validation_errors() {
        assert!(UnitarySpec::hadamard(12, 3, false).validate().is_err());
        assert!(UnitarySpec::hadamard(12, 8, false).validate().is_err());
        assert!(UnitarySpec::fourier(12, 5, false).validate().is_err());
        assert!(UnitarySpec::shuffle(12, 5).validate().is_err());
        assert!(UnitarySpec::hadamard(12, 4, false).validate().is_ok());
    }
}
