//! CIFAR-10 binary batches.

use std::path::Path;

use super::{read_file, split_validation, validation_size, Dataset, ImageShape};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::netgraph::Batch;
use crate::scalar::Real;

/// One label byte followed by 3×1024 channel-major pixels.
pub const CIFAR_RECORD: usize = 1 + 3 * 1024;
const SIDE: usize = 32;

pub(crate) const CIFAR_SHAPE: ImageShape = ImageShape {
    height: SIDE,
    width: SIDE,
    channels: 3,
};

/// Standardises every channel of one position-major image to mean 0 and
/// (population) standard deviation 1. Constant channels become 0.
pub fn normalize_channels<T: Real>(image: &mut [T], channels: usize) {
    let positions = image.len() / channels;
    for c in 0..channels {
        let vals = || image.iter().skip(c).step_by(channels).map(|v| v.as_f64());
        let mean = vals().sum::<f64>() / positions as f64;
        let var = vals().map(|v| (v - mean) * (v - mean)).sum::<f64>() / positions as f64;
        let std = var.sqrt();
        for v in image.iter_mut().skip(c).step_by(channels) {
            *v = if std > 0.0 { T::of((v.as_f64() - mean) / std) } else { T::zero() };
        }
    }
}

/// Parses concatenated records into normalised position-major images.
pub fn parse_cifar_records<T: Real>(bytes: &[u8]) -> Result<Batch<T>> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(Error::format(
            "CIFAR batch",
            whole as u64,
            format!("size {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let dim = CIFAR_SHAPE.len();
    let mut data = vec![T::zero(); n * dim];
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0];
        if label > 9 {
            return Err(Error::format("CIFAR batch", (i * CIFAR_RECORD) as u64, format!("label {label} outside 0..9")));
        }
        labels.push(label as usize);
        let img = &mut data[i * dim..(i + 1) * dim];
        for c in 0..3 {
            for p in 0..SIDE * SIDE {
                img[p * 3 + c] = T::of(rec[1 + c * SIDE * SIDE + p] as f64);
            }
        }
        normalize_channels(img, 3);
    }
    Batch::new(Matrix::from_vec(n, dim, data)?, labels)
}

/// Reads `data_batch_1..5.bin` and `test_batch.bin` from `dir` and carves a
/// seeded 5000-image validation set out of the training batches.
pub fn load_cifar10<T: Real>(dir: &Path, seed: u64) -> Result<Dataset<T>> {
    let mut bytes = Vec::new();
    for i in 1..=5 {
        let path = dir.join(format!("data_batch_{i}.bin"));
        if i > 1 && !path.exists() {
            break;
        }
        let part = read_file(&path)?;
        // Validate each file on its own so offsets refer to that file.
        if part.len() % CIFAR_RECORD != 0 {
            parse_cifar_records::<T>(&part).map_err(|e| annotate(e, &path))?;
        }
        bytes.extend_from_slice(&part);
    }
    let train = parse_cifar_records(&bytes)?;
    let test_path = dir.join("test_batch.bin");
    let test = parse_cifar_records(&read_file(&test_path)?).map_err(|e| annotate(e, &test_path))?;
    let (train, val) = split_validation(&train, validation_size(train.len()), seed)?;
    Ok(Dataset {
        train,
        val,
        test,
        image: CIFAR_SHAPE,
        classes: 10,
    })
}

fn annotate(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { what, offset, message } => Error::Format {
            what: format!("{what} {}", path.display()),
            offset,
            message,
        },
        other => other,
    }
}
