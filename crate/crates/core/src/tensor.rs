//! Dense row-major tensor. Activations use the order
//! (batch, channels, height, width); a matrix is a rank-2 tensor.
//!
//! Tensors are plain owned buffers: operations allocate fresh outputs and
//! never mutate their inputs, so shared references are safe to read from
//! any thread.

use num_complex::Complex;
use num_traits::Zero;

use crate::error::{Error, Result};
use crate::scalar::{Real, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Build a tensor from an explicit buffer. The buffer length must
    /// equal the product of the extents and every extent must be >= 1.
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn full(shape: &[usize], fill: S) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        Ok(Tensor { shape: shape.to_vec(), data: vec![fill; numel] })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, S::zero())
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]).expect("n >= 1");
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Reinterpret the buffer under a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    fn expect_rank(&self, r: usize) -> Result<()> {
        if self.rank() != r {
            return Err(Error::Shape(format!(
                "expected rank-{r} tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    // Rank-4 activation accessors.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }
    pub fn channels(&self) -> usize {
        self.shape[1]
    }
    pub fn height(&self) -> usize {
        self.shape[2]
    }
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn at4(&self, b: usize, c: usize, h: usize, w: usize) -> S {
        let (_, ch, hh, ww) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((b * ch + c) * hh + h) * ww + w]
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> S {
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn set2(&mut self, r: usize, c: usize, v: S) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Standard matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.expect_rank(2)?;
        other.expect_rank(2)?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: {m}x{k} times {k2}x{n}"
            )));
        }
        let mut out = Tensor::zeros(&[m, n])?;
        for i in 0..m {
            for l in 0..k {
                let a = self.data[i * k + l];
                if a == S::zero() {
                    continue;
                }
                let row = &other.data[l * n..(l + 1) * n];
                let dst = &mut out.data[i * n..(i + 1) * n];
                for j in 0..n {
                    dst[j] += a * row[j];
                }
            }
        }
        Ok(out)
    }

    /// Conjugate transpose of a rank-2 tensor (plain transpose on reals).
    pub fn conj_transpose(&self) -> Result<Tensor<S>> {
        self.expect_rank(2)?;
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = Tensor::zeros(&[n, m])?;
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j].conj();
            }
        }
        Ok(out)
    }

    /// Largest entry modulus.
    pub fn max_modulus(&self) -> S::Real {
        self.data
            .iter()
            .map(|&v| v.modulus())
            .fold(S::Real::zero(), |a, b| if b > a { b } else { a })
    }

    /// Largest entry-wise |self - other|; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<S>) -> Result<S::Real> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).modulus())
            .fold(S::Real::zero(), |a, b| if b > a { b } else { a }))
    }

    pub fn map<F: Fn(S) -> S>(&self, f: F) -> Tensor<S> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

impl<T: Real> Tensor<T> {
    /// Promote a real tensor to complex with zero imaginary part.
    pub fn to_complex(&self) -> Tensor<Complex<T>> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&r| Complex::new(r, T::zero())).collect(),
        }
    }
}

impl<T: Real> Tensor<Complex<T>> {
    /// Drop imaginary parts after verifying they are residue-level noise.
    /// The limit scales with the real magnitude so it behaves for both
    /// unit-scale activations and large intermediate values.
    pub fn into_real_checked(self, limit: f64) -> Result<Tensor<T>> {
        let max_re = self
            .data
            .iter()
            .map(|z| z.re.abs())
            .fold(T::zero(), |a, b| if b > a { b } else { a });
        let max_im = self
            .data
            .iter()
            .map(|z| z.im.abs())
            .fold(T::zero(), |a, b| if b > a { b } else { a });
        let scale = T::one().max(max_re);
        if max_im > scale * T::from_f64(limit).unwrap() {
            return Err(Error::ImaginaryResidue {
                residue: max_im.to_f64().unwrap_or(f64::NAN),
                limit: (scale.to_f64().unwrap_or(1.0)) * limit,
            });
        }
        Ok(Tensor { shape: self.shape, data: self.data.into_iter().map(|z| z.re).collect() })
    }

    pub fn max_imag(&self) -> T {
        self.data
            .iter()
            .map(|z| z.im.abs())
            .fold(T::zero(), |a, b| if b > a { b } else { a })
    }
}

/// The channel vector at one spatial position of one sample: entry `c` is
/// channel `c` of `x` at flat spatial index `k`.
pub fn channel_gather<S: Scalar>(x: &Tensor<S>, sample: usize, k: usize) -> Result<Vec<S>> {
    if x.rank() != 4 {
        return Err(Error::Shape(format!("expected rank-4 tensor, got {:?}", x.shape())));
    }
    let (b, c, h, w) = (x.batch(), x.channels(), x.height(), x.width());
    if sample >= b || k >= h * w {
        return Err(Error::Index(format!(
            "sample {sample} / position {k} out of bounds for shape {:?}",
            x.shape()
        )));
    }
    let plane = h * w;
    Ok((0..c).map(|ch| x.data[(sample * c + ch) * plane + k]).collect())
}

/// Inverse of `channel_gather`: write a channel vector back at position `k`.
pub fn channel_scatter<S: Scalar>(
    x: &mut Tensor<S>,
    sample: usize,
    k: usize,
    values: &[S],
) -> Result<()> {
    if x.rank() != 4 {
        return Err(Error::Shape(format!("expected rank-4 tensor, got {:?}", x.shape())));
    }
    let (b, c, h, w) = (x.batch(), x.channels(), x.height(), x.width());
    if sample >= b || k >= h * w {
        return Err(Error::Index(format!(
            "sample {sample} / position {k} out of bounds for shape {:?}",
            x.shape()
        )));
    }
    if values.len() != c {
        return Err(Error::Shape(format!("channel vector length {} != {c}", values.len())));
    }
    let plane = h * w;
    for (ch, &v) in values.iter().enumerate() {
        x.data[(sample * c + ch) * plane + k] = v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_and_errors() {
        let t = Tensor::<f64>::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0]);
        let z = Tensor::<f64>::full(&[3], 0.0).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0, 0.0]);
        assert!(Tensor::<f64>::new(&[2, 2], vec![1.0, 2.0, 3.0]).is_err());
        assert!(Tensor::<f64>::new(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn reshape_roundtrip_is_identity() {
        let t = Tensor::<f64>::new(&[2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        let r = t.reshape(&[6]).unwrap().reshape(&[2, 3]).unwrap();
        assert_eq!(t, r);
    }

    #[test]
    fn matmul_hand_values() {
        let i3 = Tensor::<f64>::eye(3);
        let b = Tensor::<f64>::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(i3.matmul(&b).unwrap(), b);

        let a = Tensor::<f64>::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = Tensor::<f64>::new(&[2, 1], vec![1.0, 1.0]).unwrap();
        let av = a.matmul(&v).unwrap();
        assert_eq!(av.data(), &[3.0, 7.0]);

        // inner dimension mismatch
        assert!(b.matmul(&b).is_err());
    }

    #[test]
    fn gather_scatter_roundtrip() {
        let x = Tensor::<f64>::new(&[1, 2, 1, 1], vec![5.0, 7.0]).unwrap();
        assert_eq!(channel_gather(&x, 0, 0).unwrap(), vec![5.0, 7.0]);

        let x = Tensor::<f64>::new(&[1, 3, 2, 2], (0..12).map(|i| i as f64).collect()).unwrap();
        assert_eq!(channel_gather(&x, 0, 3).unwrap(), vec![3.0, 7.0, 11.0]);

        let mut y = Tensor::<f64>::zeros(&[1, 3, 2, 2]).unwrap();
        for k in 0..4 {
            let v = channel_gather(&x, 0, k).unwrap();
            channel_scatter(&mut y, 0, k, &v).unwrap();
        }
        assert_eq!(x, y);

        assert!(channel_gather(&x, 0, 4).is_err());
        assert!(channel_gather(&x, 1, 0).is_err());
    }
}
