//! Dataset loaders, augmentation, config files and checkpoints.

mod augment;
mod checkpoint;
mod cifar;
mod config;
mod idx;

use std::path::Path;

pub use augment::{augment, augment_with, PAD};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC, VERSION};
pub use cifar::{load_cifar10, normalize_channels, parse_cifar_records, CIFAR_RECORD};
pub use config::{format_config, load_config, parse_config};
pub use idx::{
    encode_idx_images, encode_idx_labels, load_idx, parse_idx_images, parse_idx_labels, IdxImages, IMAGE_MAGIC,
    LABEL_MAGIC,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::netgraph::Batch;
use crate::scalar::Real;

/// Size of the validation split carved from the training set.
pub const VALIDATION_SIZE: usize = 5000;

/// Height, width and channels of image inputs, stored position-major
/// (`(row * width + col) * channels + channel`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Train, validation and test sets of one benchmark.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub train: Batch<T>,
    pub val: Batch<T>,
    pub test: Batch<T>,
    pub image: ImageShape,
    pub classes: usize,
}

/// `VALIDATION_SIZE`, capped at a tenth of small training sets.
pub fn validation_size(train: usize) -> usize {
    VALIDATION_SIZE.min(train / 10)
}

/// Moves `size` seeded-random rows of `train` into a validation
/// set. Both parts keep their original relative order.
pub fn split_validation<T: Real>(train: &Batch<T>, size: usize, seed: u64) -> Result<(Batch<T>, Batch<T>)> {
    if size >= train.len() {
        return Err(Error::InvalidArgument(format!(
            "validation split of {size} leaves no training data out of {}",
            train.len()
        )));
    }
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; train.len()];
    for &i in &idx[..size] {
        is_val[i] = true;
    }
    let (val, rest): (Vec<usize>, Vec<usize>) = (0..train.len()).partition(|&i| is_val[i]);
    Ok((train.select(&rest), train.select(&val)))
}

/// Loads MNIST (IDX files) or CIFAR-10 (binary batches) from `dir`,
/// whichever is present, with a seeded validation split.
pub fn load_dataset<T: Real>(dir: &Path, seed: u64) -> Result<Dataset<T>> {
    if dir.join("train-images-idx3-ubyte").exists() {
        let train = load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?;
        let test = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;
        let (train, val) = split_validation(&train, validation_size(train.len()), seed)?;
        let side = (train.inputs.cols() as f64).sqrt().round() as usize;
        return Ok(Dataset {
            train,
            val,
            test,
            image: ImageShape {
                height: side,
                width: side,
                channels: 1,
            },
            classes: 10,
        });
    }
    if dir.join("data_batch_1.bin").exists() {
        return load_cifar10(dir, seed);
    }
    Err(Error::InvalidArgument(format!(
        "{} contains neither MNIST IDX files nor CIFAR-10 binary batches",
        dir.display()
    )))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
