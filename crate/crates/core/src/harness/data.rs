//! Labeled image sets: the seeded synthetic generator and IDX files.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::DatasetSource;
use crate::error::{Error, Result};
use crate::tensor::{ByteReader, Shape, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images in `[0, 1]` with one class label each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<u8>,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u8>, classes: usize) -> Result<Self> {
        if images.shape().n() != labels.len() {
            return Err(Error::dim(format!("{} images but {} labels", images.shape().n(), labels.len())));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= classes) {
            return Err(Error::Config(format!("label {l} of sample {i} is outside 0..{classes}")));
        }
        Ok(Dataset { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// `(channels, height, width)` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s.c(), s.h(), s.w()]
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        self.images.leading_slice(i)
    }

    /// Gathers the samples at `indices` into one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<u8>) {
        let [c, h, w] = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let images = Tensor::from_vec(Shape([indices.len(), c, h, w]), data).expect("gathered batch is well formed");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Loads `(train, val)` for a configured source. `seed` drives the synthetic generator.
pub fn load_dataset(source: &DatasetSource, seed: u64) -> Result<(Dataset, Dataset)> {
    match source {
        DatasetSource::Synthetic {
            train,
            val,
            size,
            classes,
            noise,
        } => Ok(synthetic(seed, *train, *val, *size, *classes, *noise)),
        DatasetSource::Idx {
            train_images,
            train_labels,
            val_images,
            val_labels,
            classes,
        } => Ok((
            load_idx_pair(train_images, train_labels, *classes)?,
            load_idx_pair(val_images, val_labels, *classes)?,
        )),
    }
}

struct Blob {
    cy: f32,
    cx: f32,
    sigma: f32,
    amp: f32,
}

/// Gaussian-blob images: every class owns two blobs at fixed positions; a
/// sample jitters their centres and amplitudes and adds pixel noise.
/// Labels cycle through the classes.
pub fn synthetic(seed: u64, train: usize, val: usize, size: usize, classes: usize, noise: f32) -> (Dataset, Dataset) {
    let mut proto_rng = ChaCha8Rng::seed_from_u64(seed);
    let sz = size as f32;
    let prototypes: Vec<[Blob; 2]> = (0..classes)
        .map(|_| {
            let mut blob = || Blob {
                cy: proto_rng.random_range(0.2..0.8) * sz,
                cx: proto_rng.random_range(0.2..0.8) * sz,
                sigma: proto_rng.random_range(0.08..0.16) * sz,
                amp: proto_rng.random_range(0.6..1.0),
            };
            [blob(), blob()]
        })
        .collect();
    let make = |stream: u64, n: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let jitter = Normal::new(0.0f32, 0.04 * sz).expect("positive jitter");
        let pixel = Normal::new(0.0f32, noise.max(0.0)).expect("non-negative noise");
        let mut data = Vec::with_capacity(n * size * size);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % classes;
            let blobs: Vec<Blob> = prototypes[label]
                .iter()
                .map(|b| Blob {
                    cy: b.cy + jitter.sample(&mut rng),
                    cx: b.cx + jitter.sample(&mut rng),
                    sigma: b.sigma,
                    amp: b.amp * rng.random_range(0.8..1.2),
                })
                .collect();
            for y in 0..size {
                for x in 0..size {
                    let mut v = 0.0f32;
                    for b in &blobs {
                        let d2 = (y as f32 - b.cy).powi(2) + (x as f32 - b.cx).powi(2);
                        v += b.amp * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
                    }
                    v += pixel.sample(&mut rng);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
            labels.push(label as u8);
        }
        let images = Tensor::from_vec(Shape([n, 1, size, size]), data).expect("synthetic images are well formed");
        Dataset::new(images, labels, classes).expect("synthetic labels are in range")
    };
    (make(1, train), make(2, val))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

/// Reads an IDX image file (`u8` pixels) into `(n, 1, rows, cols)` scaled to `[0, 1]`.
pub fn read_idx_images<R: Read>(input: R) -> Result<Tensor> {
    let mut r = ByteReader::new(input);
    let magic = r.read_u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(0, format!("bad IDX image magic {magic:#010x}")));
    }
    let at = r.offset();
    let dims = [r.read_u32_be()?, r.read_u32_be()?, r.read_u32_be()?].map(|d| d as usize);
    let shape = Shape::new(dims[0], 1, dims[1], dims[2]).map_err(|_| Error::format(at, format!("invalid IDX extents {dims:?}")))?;
    let raw = r.read_bytes(shape.numel())?;
    r.expect_eof()?;
    Tensor::from_vec(shape, raw.into_iter().map(|b| b as f32 / 255.0).collect())
}

/// Reads an IDX label file, rejecting labels `>= classes`.
pub fn read_idx_labels<R: Read>(input: R, classes: usize) -> Result<Vec<u8>> {
    let mut r = ByteReader::new(input);
    let magic = r.read_u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(0, format!("bad IDX label magic {magic:#010x}")));
    }
    let n = r.read_u32_be()? as usize;
    let start = r.offset();
    let labels = r.read_bytes(n)?;
    r.expect_eof()?;
    if let Some(i) = labels.iter().position(|&l| l as usize >= classes) {
        return Err(Error::format(
            start + i as u64,
            format!("label {} outside 0..{classes}", labels[i]),
        ));
    }
    Ok(labels)
}

pub fn load_idx_pair(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let images = read_idx_images(open(images)?)?;
    let labels = read_idx_labels(open(labels)?, classes)?;
    Dataset::new(images, labels, classes)
}

/// Serializes images (rounded to `u8`) in IDX form.
pub fn idx_images_bytes(images: &Tensor) -> Vec<u8> {
    let s = images.shape();
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [s.n(), s.h(), s.w()] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(images.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn idx_labels_bytes(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
