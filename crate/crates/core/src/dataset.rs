//! MNIST in IDX format: loading, stratified subsets and per-epoch orderings.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Full,
    Train,
    Validation,
}

/// Images scaled to `[0, 1]` with one-hot labels. Immutable once built.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub images: Matrix<T>,
    pub labels: Matrix<T>,
    pub classes: Vec<u8>,
    pub split: Split,
    /// Image geometry from the IDX header, kept for writing back.
    pub image_dims: (u32, u32),
}

impl<T: Scalar> Dataset<T> {
    pub fn from_bytes(pixels: &[u8], classes: Vec<u8>, image_dims: (u32, u32)) -> Result<Self> {
        let width = (image_dims.0 * image_dims.1) as usize;
        if width == 0 || pixels.len() != classes.len() * width {
            return Err(Error::Validation(format!(
                "{} pixel bytes for {} images of {width}",
                pixels.len(),
                classes.len()
            )));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c as usize >= NUM_CLASSES) {
            return Err(Error::Validation(format!("label {bad} out of range")));
        }
        let k = classes.len();
        let scale = T::of(1.0 / 255.0);
        let images = Matrix::new(k, width, pixels.iter().map(|&p| T::of(p as f64) * scale).collect())?;
        let labels = one_hot(&classes);
        Ok(Dataset {
            images,
            labels,
            classes,
            split: Split::Full,
            image_dims,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn input_width(&self) -> usize {
        self.images.cols()
    }

    pub fn select(&self, idx: &[usize], split: Split) -> Self {
        Dataset {
            images: self.images.select_rows(idx),
            labels: self.labels.select_rows(idx),
            classes: idx.iter().map(|&i| self.classes[i]).collect(),
            split,
            image_dims: self.image_dims,
        }
    }

    pub fn class_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &c in &self.classes {
            h[c as usize] += 1;
        }
        h
    }

    /// Pixels mapped back to bytes; exact for datasets produced by `load_idx`.
    pub fn pixel_bytes(&self) -> Vec<u8> {
        self.images
            .as_slice()
            .iter()
            .map(|&v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn write_idx(&self, images_path: &Path, labels_path: &Path) -> Result<()> {
        let k = self.len() as u32;
        let mut img = Vec::with_capacity(16 + self.images.len());
        img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&k.to_be_bytes());
        img.extend_from_slice(&self.image_dims.0.to_be_bytes());
        img.extend_from_slice(&self.image_dims.1.to_be_bytes());
        img.extend_from_slice(&self.pixel_bytes());
        let mut lab = Vec::with_capacity(8 + self.len());
        lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&k.to_be_bytes());
        lab.extend_from_slice(&self.classes);
        fs::File::create(images_path)?.write_all(&img)?;
        fs::File::create(labels_path)?.write_all(&lab)?;
        Ok(())
    }
}

pub fn one_hot<T: Scalar>(classes: &[u8]) -> Matrix<T> {
    Matrix::from_fn(classes.len(), NUM_CLASSES, |r, c| {
        if classes[r] as usize == c {
            T::one()
        } else {
            T::zero()
        }
    })
}

fn be_u32(buf: &[u8], offset: usize) -> Result<u32> {
    buf.get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(offset as u64, "truncated header"))
}

/// Parses an IDX3 image file into `(count, rows, cols, pixels)`.
pub fn parse_images(buf: &[u8]) -> Result<(u32, u32, u32, &[u8])> {
    let magic = be_u32(buf, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(0, format!("bad image magic {magic:#010x}")));
    }
    let count = be_u32(buf, 4)?;
    let rows = be_u32(buf, 8)?;
    let cols = be_u32(buf, 12)?;
    let need = count as u64 * rows as u64 * cols as u64;
    let have = buf.len() as u64 - 16;
    if have < need {
        return Err(Error::format(
            buf.len() as u64,
            format!("image payload truncated: {have} of {need} bytes"),
        ));
    }
    Ok((count, rows, cols, &buf[16..16 + need as usize]))
}

pub fn parse_labels(buf: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(buf, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(0, format!("bad label magic {magic:#010x}")));
    }
    let count = be_u32(buf, 4)? as usize;
    if buf.len() - 8 < count {
        return Err(Error::format(
            buf.len() as u64,
            format!("label payload truncated: {} of {count} bytes", buf.len() - 8),
        ));
    }
    Ok(&buf[8..8 + count])
}

pub fn load_idx<T: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Dataset<T>> {
    let img = fs::read(images_path)?;
    let lab = fs::read(labels_path)?;
    let (count, rows, cols, pixels) = parse_images(&img)?;
    let labels = parse_labels(&lab)?;
    if labels.len() != count as usize {
        return Err(Error::format(
            4,
            format!("{} labels for {count} images", labels.len()),
        ));
    }
    Dataset::from_bytes(pixels, labels.to_vec(), (rows, cols)).map_err(|e| match e {
        Error::Validation(d) => Error::format(8, d),
        other => other,
    })
}

/// Loads the standard training files from an MNIST directory.
pub fn load_mnist_train<T: Scalar>(dir: &Path) -> Result<Dataset<T>> {
    load_idx(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))
}

/// Stratified, seeded train/validation subsets. Each class contributes in
/// proportion to its share of `d` (largest remainder), so subset class
/// proportions track the source to within one sample per class.
pub fn subset<T: Scalar>(
    d: &Dataset<T>,
    n_train: usize,
    n_val: usize,
    seed: u64,
) -> Result<(Dataset<T>, Dataset<T>)> {
    let k = d.len();
    if n_train + n_val > k {
        return Err(Error::Bounds(format!(
            "requested {n_train}+{n_val} samples from {k}"
        )));
    }
    let hist = d.class_histogram();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, &c) in d.classes.iter().enumerate() {
        by_class[c as usize].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for idx in &mut by_class {
        idx.shuffle(&mut rng);
    }
    let train_quota = apportion(&hist, n_train);
    let val_quota = apportion(&hist, n_val);
    let mut train_idx = Vec::with_capacity(n_train);
    let mut val_idx = Vec::with_capacity(n_val);
    for c in 0..NUM_CLASSES {
        let (t, v) = (train_quota[c], val_quota[c]);
        if t + v > by_class[c].len() {
            return Err(Error::Bounds(format!(
                "class {c} has {} samples, needs {}",
                by_class[c].len(),
                t + v
            )));
        }
        train_idx.extend_from_slice(&by_class[c][..t]);
        val_idx.extend_from_slice(&by_class[c][t..t + v]);
    }
    train_idx.shuffle(&mut rng);
    val_idx.shuffle(&mut rng);
    Ok((d.select(&train_idx, Split::Train), d.select(&val_idx, Split::Validation)))
}

/// Largest-remainder apportionment of `total` over `weights`; ties go to the
/// lower index.
fn apportion(weights: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut out: Vec<usize> = weights.iter().map(|&w| w * total / sum).collect();
    let mut rem: Vec<(usize, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| (w * total % sum, i))
        .collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let missing = total - out.iter().sum::<usize>();
    for &(_, i) in rem.iter().take(missing) {
        out[i] += 1;
    }
    out
}

/// Seeded permutation of `0..k` for one epoch; each epoch index selects an
/// independent ChaCha stream.
pub fn epoch_order(k: usize, epoch_index: u64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch_index);
    let mut perm: Vec<usize> = (0..k).collect();
    perm.shuffle(&mut rng);
    perm
}
