//! Dataset ingestion: the classic IDX binary format (big-endian magic,
//! dimension sizes, raw bytes) and an in-memory labeled image container.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

/// Images as a (count, 1, H, W) tensor with pixels in [0, 1], plus class
/// labels.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: Tensor<f64>,
    pub labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(images: Tensor<f64>, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Data(format!("expected rank-4 images, got {:?}", images.shape())));
        }
        if images.batch() != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        Ok(LabeledDataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Normalize pixels in place: (x - mean) / std.
    pub fn normalize(&mut self, mean: f64, std: f64) {
        for v in self.images.data_mut() {
            *v = (*v - mean) / std;
        }
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Result<LabeledDataset> {
        if n == 0 || n > self.len() {
            return Err(Error::Data(format!("cannot take {n} of {} samples", self.len())));
        }
        let (c, h, w) = (self.images.channels(), self.images.height(), self.images.width());
        let plane = c * h * w;
        let images = Tensor::new(&[n, c, h, w], self.images.data()[..n * plane].to_vec())?;
        Ok(LabeledDataset { images, labels: self.labels[..n].to_vec() })
    }

    /// Gather a batch by sample indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f64>, Vec<usize>)> {
        let (c, h, w) = (self.images.channels(), self.images.height(), self.images.width());
        let plane = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * plane);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index(format!("sample {i} out of range {}", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * plane..(i + 1) * plane]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(&[indices.len(), c, h, w], data)?, labels))
    }
}

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    if offset + 4 > bytes.len() {
        return Err(Error::Data(format!("truncated IDX file while reading {what}")));
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

/// Parse an IDX image/label file pair into a dataset, scaling pixels to
/// [0, 1]. Validates magics, dimension headers, payload sizes, and the
/// image/label count match.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let img_bytes = fs::read(images_path)
        .map_err(|e| Error::Data(format!("{}: {e}", images_path.display())))?;
    let lab_bytes = fs::read(labels_path)
        .map_err(|e| Error::Data(format!("{}: {e}", labels_path.display())))?;

    let magic = read_be_u32(&img_bytes, 0, "image magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Data(format!("unrecognized IDX magic {magic} (expected {IMAGE_MAGIC})")));
    }
    let count = read_be_u32(&img_bytes, 4, "image count")? as usize;
    let h = read_be_u32(&img_bytes, 8, "image rows")? as usize;
    let w = read_be_u32(&img_bytes, 12, "image cols")? as usize;
    let expected = 16 + count * h * w;
    if img_bytes.len() < expected {
        return Err(Error::Data(format!(
            "image payload truncated: {} bytes, header implies {expected}",
            img_bytes.len()
        )));
    }

    let magic = read_be_u32(&lab_bytes, 0, "label magic")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Data(format!("unrecognized IDX magic {magic} (expected {LABEL_MAGIC})")));
    }
    let lab_count = read_be_u32(&lab_bytes, 4, "label count")? as usize;
    if lab_count != count {
        return Err(Error::Data(format!("{count} images but {lab_count} labels")));
    }
    if lab_bytes.len() < 8 + count {
        return Err(Error::Data(format!(
            "label payload truncated: {} bytes for {count} labels",
            lab_bytes.len()
        )));
    }

    let data: Vec<f64> =
        img_bytes[16..16 + count * h * w].iter().map(|&b| b as f64 / 255.0).collect();
    let images = Tensor::new(&[count, 1, h, w], data)?;
    let labels: Vec<usize> = lab_bytes[8..8 + count].iter().map(|&b| b as usize).collect();
    LabeledDataset::new(images, labels)
}

/// Deterministic synthetic stand-in with MNIST geometry, for tests and
/// smoke runs: each class is a blurred blob at a class-specific location
/// plus noise, so small nets can learn it quickly.
pub fn synthetic_dataset(n: usize, seed: u64) -> LabeledDataset {
    let mut rng = SeededRng::new(seed);
    let (h, w) = (28, 28);
    let mut data = vec![0.0f64; n * h * w];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = (rng.gen_u64() % 10) as usize;
        labels.push(class);
        let cy = 6 + 2 * (class % 5);
        let cx = 6 + 3 * (class / 5) + (class % 3);
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 - cy as f64;
                let dx = x as f64 - cx as f64;
                let v = (-(dy * dy + dx * dx) / 18.0).exp() + 0.05 * rng.normal::<f64>();
                data[(i * h + y) * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    LabeledDataset {
        images: Tensor::new(&[n, 1, h, w], data).unwrap(),
        labels,
    }
}

/// Write a dataset back out as an IDX pair (test fixtures, round trips).
pub fn write_idx(ds: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (n, h, w) = (ds.len(), ds.images.height(), ds.images.width());
    let mut img = Vec::with_capacity(16 + n * h * w);
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    img.extend(ds.images.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    fs::write(images_path, img)?;
    fs::write(labels_path, lab)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synthetic_dataset(17, 3);
        let ip = dir.path().join("imgs");
        let lp = dir.path().join("labs");
        write_idx(&ds, &ip, &lp).unwrap();
        let back = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(back.len(), 17);
        assert_eq!(back.images.shape(), &[17, 1, 28, 28]);
        assert_eq!(back.labels, ds.labels);
        // Pixels quantized to u8 on disk.
        let err = back
            .images
            .data()
            .iter()
            .zip(ds.images.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(err <= 0.5 / 255.0 + 1e-12);
        assert!(back.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn bad_magic_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synthetic_dataset(4, 5);
        let ip = dir.path().join("imgs");
        let lp = dir.path().join("labs");
        write_idx(&ds, &ip, &lp).unwrap();

        // Corrupt the image magic: 2050 is not a known code.
        let mut bytes = fs::read(&ip).unwrap();
        bytes[3] = 2; // 0x00000802 = 2050
        let bad = dir.path().join("bad");
        fs::write(&bad, &bytes).unwrap();
        let err = load_mnist_idx(&bad, &lp).unwrap_err().to_string();
        assert!(err.contains("unrecognized IDX magic"), "{err}");

        // Shrink the label count in the header.
        let mut lbytes = fs::read(&lp).unwrap();
        lbytes[7] = 3;
        let badl = dir.path().join("badl");
        fs::write(&badl, &lbytes).unwrap();
        let err = load_mnist_idx(&ip, &badl).unwrap_err().to_string();
        assert!(err.contains("labels"), "{err}");
    }

    #[test]
    fn batch_gather() {
        let ds = synthetic_dataset(6, 7);
        let (imgs, labs) = ds.batch(&[4, 1]).unwrap();
        assert_eq!(imgs.shape(), &[2, 1, 28, 28]);
        assert_eq!(labs, vec![ds.labels[4], ds.labels[1]]);
        assert!(ds.batch(&[6]).is_err());
    }
}
