use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Inputs `N × C × H × W` with one class label per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Samples at `idx`, in that order.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per = self.inputs.len() / self.len();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} of {}",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.inputs.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = idx.len();
        Ok((
            Tensor::new(shape, data)?,
            idx.iter().map(|&i| self.labels[i]).collect(),
        ))
    }
}

/// Batches of i.i.d. unit Gaussians. Batch `k` depends only on the seed and
/// `k`, so any subset can be regenerated.
#[derive(Clone, Debug)]
pub struct GaussianBatches {
    rng: Rng,
    shape: Vec<usize>,
    next: u64,
}

pub fn synthetic_gaussian(n: usize, shape: [usize; 3], rng: &Rng) -> Result<GaussianBatches> {
    if n == 0 || shape.contains(&0) {
        return Err(Error::InvalidArgument(
            "batch and sample shape must be non-empty".into(),
        ));
    }
    Ok(GaussianBatches {
        rng: rng.fork_named("gaussian-inputs"),
        shape: vec![n, shape[0], shape[1], shape[2]],
        next: 0,
    })
}

impl GaussianBatches {
    pub fn batch(&self, k: u64) -> Tensor {
        let mut t = Tensor::zeros(self.shape.clone());
        self.rng.fork(k).fill_normal(t.data_mut(), 1.0);
        t
    }
}

impl Iterator for GaussianBatches {
    type Item = Tensor;

    fn next(&mut self) -> Option<Tensor> {
        let b = self.batch(self.next);
        self.next += 1;
        Some(b)
    }
}

/// Gaussian blobs around per-class means that are themselves unit Gaussian
/// images. Labels are drawn uniformly.
pub fn synthetic_blobs(
    n_classes: usize,
    n: usize,
    shape: [usize; 3],
    spread: f64,
    rng: &Rng,
) -> Result<Dataset> {
    if n_classes == 0 || n == 0 || shape.contains(&0) {
        return Err(Error::InvalidArgument(
            "blobs need classes, samples and a non-empty shape".into(),
        ));
    }
    if !(spread >= 0.0) || !spread.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "spread must be finite and non-negative, got {spread}"
        )));
    }
    let per: usize = shape.iter().product();
    let mut means = vec![0.0; n_classes * per];
    rng.fork_named("blob-means").fill_normal(&mut means, 1.0);
    let mut lr = rng.fork_named("blob-labels");
    let labels: Vec<usize> = (0..n).map(|_| lr.below(n_classes)).collect();
    let mut noise = vec![0.0; n * per];
    rng.fork_named("blob-noise").fill_normal(&mut noise, 1.0);
    let data = labels
        .iter()
        .enumerate()
        .flat_map(|(i, &y)| (0..per).map(move |j| (i, y, j)))
        .map(|(i, y, j)| means[y * per + j] + spread * noise[i * per + j])
        .collect();
    Ok(Dataset {
        inputs: Tensor::new(vec![n, shape[0], shape[1], shape[2]], data)?,
        labels,
        classes: n_classes,
    })
}

pub const CIFAR_RECORD: usize = 3074;
const CIFAR_PIXELS: usize = 3072;
const CIFAR_FINE_CLASSES: u8 = 100;
const CIFAR_COARSE_CLASSES: u8 = 20;

/// One raw CIFAR-100 record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CifarRecord {
    pub coarse: u8,
    pub fine: u8,
    /// 1024 red, then green, then blue bytes, each plane row-major 32 × 32.
    pub pixels: Box<[u8; CIFAR_PIXELS]>,
}

/// Parses consecutive 3074-byte records.
pub fn parse_cifar100(bytes: &[u8]) -> Result<Vec<CifarRecord>> {
    let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
    if whole != bytes.len() {
        return Err(Error::Format {
            offset: whole,
            message: format!(
                "truncated record: {} trailing bytes, records are {CIFAR_RECORD}",
                bytes.len() - whole
            ),
        });
    }
    bytes
        .chunks_exact(CIFAR_RECORD)
        .enumerate()
        .map(|(i, rec)| {
            let offset = i * CIFAR_RECORD;
            if rec[0] >= CIFAR_COARSE_CLASSES {
                return Err(Error::Format {
                    offset,
                    message: format!("coarse label {} out of range", rec[0]),
                });
            }
            if rec[1] >= CIFAR_FINE_CLASSES {
                return Err(Error::Format {
                    offset: offset + 1,
                    message: format!("fine label {} out of range", rec[1]),
                });
            }
            let pixels: Box<[u8; CIFAR_PIXELS]> = rec[2..]
                .to_vec()
                .into_boxed_slice()
                .try_into()
                .expect("chunk size");
            Ok(CifarRecord {
                coarse: rec[0],
                fine: rec[1],
                pixels,
            })
        })
        .collect()
}

pub fn serialize_cifar100(records: &[CifarRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * CIFAR_RECORD);
    for r in records {
        out.push(r.coarse);
        out.push(r.fine);
        out.extend_from_slice(&r.pixels[..]);
    }
    out
}

/// Pixels mapped to `[0, 1]`, then shifted and scaled so the whole set has
/// mean 0.5 and standard deviation 0.5. A constant image set maps to 0.5.
pub fn cifar_pixels(records: &[CifarRecord]) -> Vec<f64> {
    let raw: Vec<f64> = records
        .iter()
        .flat_map(|r| r.pixels.iter().map(|&p| p as f64 / 255.0))
        .collect();
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let sd = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd > 0.0 {
        raw.iter().map(|v| 0.5 + 0.5 * (v - mean) / sd).collect()
    } else {
        vec![0.5; raw.len()]
    }
}

/// [`cifar_pixels`] standardized to `(x − 0.5) / 0.5` for network input.
/// Labels are the fine classes.
pub fn cifar_to_dataset(records: &[CifarRecord]) -> Result<Dataset> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no CIFAR records".into()));
    }
    let data = cifar_pixels(records)
        .into_iter()
        .map(|v| (v - 0.5) / 0.5)
        .collect();
    Ok(Dataset {
        inputs: Tensor::new(vec![records.len(), 3, 32, 32], data)?,
        labels: records.iter().map(|r| r.fine as usize).collect(),
        classes: CIFAR_FINE_CLASSES as usize,
    })
}

pub fn load_cifar100(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    cifar_to_dataset(&parse_cifar100(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(fine: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![fine / 5, fine];
        r.extend(std::iter::repeat_n(fill, CIFAR_PIXELS));
        r
    }

    #[test]
    fn round_trip() {
        let mut bytes = record(3, 7);
        bytes.extend(record(99, 200));
        let recs = parse_cifar100(&bytes).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(serialize_cifar100(&recs), bytes);
    }

    #[test]
    fn truncation_names_offset() {
        let mut bytes = record(3, 7);
        bytes.extend(&record(4, 7)[..100]);
        match parse_cifar100(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, CIFAR_RECORD),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_fine_label() {
        let mut bytes = record(3, 7);
        bytes[1] = 100;
        assert!(matches!(
            parse_cifar100(&bytes),
            Err(Error::Format { offset: 1, .. })
        ));
    }

    #[test]
    fn blobs_without_spread_are_means() {
        let d = synthetic_blobs(3, 20, [1, 2, 2], 0.0, &Rng::new(4)).unwrap();
        let (x, y) = d.gather(&[0, 1]).unwrap();
        if y[0] == y[1] {
            assert_eq!(x.data()[..4], x.data()[4..]);
        }
        let same: Vec<usize> = (0..20).filter(|&i| d.labels[i] == d.labels[0]).collect();
        let (xs, _) = d.gather(&same).unwrap();
        assert!(xs.data().chunks(4).all(|c| c == &xs.data()[..4]));
    }

    #[test]
    fn gaussian_moments() {
        let g = synthetic_gaussian(1000, [1, 10, 10], &Rng::new(1)).unwrap();
        let b = g.batch(0);
        assert!(b.mean().abs() < 0.02);
        assert!(((b.sum_sq() / b.len() as f64).sqrt() - 1.0).abs() < 0.02);
        assert_eq!(
            g.batch(3),
            synthetic_gaussian(1000, [1, 10, 10], &Rng::new(1))
                .unwrap()
                .nth(3)
                .unwrap()
        );
    }
}
