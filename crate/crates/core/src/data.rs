//! Image datasets: a seeded synthetic grating task and CIFAR-10 binary batches.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::rng::Rng;

const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE * 3;
const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
const CIFAR_CLASSES: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: corrupt CIFAR-10 file ({len} bytes is not a multiple of {CIFAR_RECORD})")]
    Corrupt { path: String, len: usize },
    #[error("no CIFAR-10 batch files found in {0}")]
    MissingFiles(String),
    #[error("class {class} has only {available} images, {requested} requested")]
    NotEnoughImages {
        class: usize,
        available: usize,
        requested: usize,
    },
    #[error("invalid dataset parameters: {0}")]
    Invalid(String),
}

/// Images `[B, H, W, C]` with values in [0, 1] and their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[3]
    }

    fn image_len(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    /// Images at `indices` stacked into `[len, H, W, C]`, plus their labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.image_len();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let images = Tensor::new(&shape, data).expect("batch shape");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Oriented sinusoidal gratings, one orientation per class, with a jittered
/// phase and Gaussian pixel noise. Labels cycle through the classes.
pub fn gen_synthetic(
    classes: usize,
    per_class: usize,
    image_size: usize,
    channels: usize,
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    if classes == 0 || per_class == 0 || image_size == 0 || channels == 0 {
        return Err(DataError::Invalid(format!(
            "classes={classes} per_class={per_class} image_size={image_size} channels={channels}"
        )));
    }
    let mut rng = Rng::new(seed);
    let total = classes * per_class;
    let mut data = Vec::with_capacity(total * image_size * image_size * channels);
    let mut labels = Vec::with_capacity(total);
    let cycles = (image_size as f64 / 4.0).max(1.0);
    for i in 0..total {
        let class = i % classes;
        let theta = PI * class as f64 / classes as f64;
        let (ct, st) = (theta.cos(), theta.sin());
        let phase = rng.uniform(0.0, PI / 2.0);
        let freq = 2.0 * PI * cycles / image_size as f64;
        for y in 0..image_size {
            for x in 0..image_size {
                let u = x as f64 * ct + y as f64 * st;
                for c in 0..channels {
                    let wave = (freq * u + phase + c as f64 * PI / 8.0).sin();
                    let v = 0.5 + 0.35 * wave + 0.1 * rng.normal();
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        labels.push(class);
    }
    let images =
        Tensor::new(&[total, image_size, image_size, channels], data).expect("synthetic shape");
    Ok(DatasetSplit {
        images,
        labels,
        num_classes: classes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarSplit {
    /// `data_batch_*.bin`
    Train,
    /// `test_batch.bin`
    Test,
}

/// Decodes raw CIFAR-10 records: a label byte followed by 1024 red,
/// 1024 green and 1024 blue bytes (row-major).
pub fn parse_cifar_records(bytes: &[u8], path: &str) -> Result<Vec<(usize, Vec<f64>)>, DataError> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(DataError::Corrupt {
            path: path.to_string(),
            len: bytes.len(),
        });
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    bytes
        .chunks_exact(CIFAR_RECORD)
        .map(|rec| {
            let label = rec[0] as usize;
            if label >= CIFAR_CLASSES {
                return Err(DataError::Corrupt {
                    path: path.to_string(),
                    len: bytes.len(),
                });
            }
            let px = &rec[1..];
            let mut hwc = Vec::with_capacity(CIFAR_PIXELS);
            for p in 0..plane {
                for c in 0..3 {
                    hwc.push(px[c * plane + p] as f64 / 255.0);
                }
            }
            Ok((label, hwc))
        })
        .collect()
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Balanced subset of the CIFAR-10 training batches in `dir`.
pub fn load_cifar10_subset(
    dir: impl AsRef<Path>,
    per_class: usize,
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    load_cifar10_split(dir, CifarSplit::Train, per_class, seed)
}

/// Balanced subset of one CIFAR-10 split: records are shuffled with `seed`
/// and the first `per_class` of each class are kept, in shuffled order.
pub fn load_cifar10_split(
    dir: impl AsRef<Path>,
    split: CifarSplit,
    per_class: usize,
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    let dir = dir.as_ref();
    let files: Vec<_> = match split {
        CifarSplit::Train => (1..=5)
            .map(|i| dir.join(format!("data_batch_{i}.bin")))
            .filter(|p| p.exists())
            .collect(),
        CifarSplit::Test => vec![dir.join("test_batch.bin")],
    };
    if files.is_empty() || !files.iter().all(|p| p.exists()) {
        return Err(DataError::MissingFiles(dir.display().to_string()));
    }
    let mut records = Vec::new();
    for f in &files {
        records.extend(parse_cifar_records(
            &read_file(f)?,
            &f.display().to_string(),
        )?);
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    Rng::new(seed).shuffle(&mut order);
    let mut taken = vec![0usize; CIFAR_CLASSES];
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in order {
        let (label, ref px) = records[i];
        if taken[label] < per_class {
            taken[label] += 1;
            data.extend_from_slice(px);
            labels.push(label);
        }
    }
    if let Some((class, &available)) = taken.iter().enumerate().find(|(_, &n)| n < per_class) {
        return Err(DataError::NotEnoughImages {
            class,
            available,
            requested: per_class,
        });
    }
    let images =
        Tensor::new(&[labels.len(), CIFAR_SIDE, CIFAR_SIDE, 3], data).expect("cifar shape");
    Ok(DatasetSplit {
        images,
        labels,
        num_classes: CIFAR_CLASSES,
    })
}

/// Bilinear resize with aligned corners: output pixel `i` samples source
/// coordinate `i·(in−1)/(out−1)`, so the four corner pixels are copied
/// exactly.
pub fn resize_bilinear(split: &DatasetSplit, size: usize) -> DatasetSplit {
    let (b, src, ch) = (split.len(), split.image_size(), split.channels());
    if size == src {
        return split.clone();
    }
    let scale = if size > 1 {
        (src - 1) as f64 / (size - 1) as f64
    } else {
        0.0
    };
    let coord = |i: usize| {
        let pos = i as f64 * scale;
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        (lo, hi, pos - lo as f64)
    };
    let s = split.images.data();
    let at = |n: usize, y: usize, x: usize, c: usize| s[((n * src + y) * src + x) * ch + c];
    let mut out = Vec::with_capacity(b * size * size * ch);
    for n in 0..b {
        for y in 0..size {
            let (y0, y1, fy) = coord(y);
            for x in 0..size {
                let (x0, x1, fx) = coord(x);
                for c in 0..ch {
                    let top = at(n, y0, x0, c) * (1.0 - fx) + at(n, y0, x1, c) * fx;
                    let bottom = at(n, y1, x0, c) * (1.0 - fx) + at(n, y1, x1, c) * fx;
                    out.push(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
    }
    DatasetSplit {
        images: Tensor::new(&[b, size, size, ch], out).expect("resize shape"),
        labels: split.labels.clone(),
        num_classes: split.num_classes,
    }
}
