//! Pad-and-crop plus horizontal flip augmentation.

use rand::Rng;

use super::ImageShape;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Zero padding on each side before cropping.
pub const PAD: usize = 4;

/// Pads by [`PAD`] zeros, crops a window of the original size at a uniform
/// offset and flips horizontally with probability 0.5. Draws the row offset,
/// the column offset, then the flip.
pub fn augment<T: Real, R: Rng + ?Sized>(image: &[T], shape: ImageShape, rng: &mut R) -> Result<Vec<T>> {
    let dy = rng.random_range(0..=2 * PAD);
    let dx = rng.random_range(0..=2 * PAD);
    let flip = rng.random_bool(0.5);
    augment_with(image, shape, dy, dx, flip)
}

/// Deterministic core of [`augment`]: the crop starts at `(dy, dx)` in the
/// padded frame, so `(PAD, PAD)` without flip is the identity.
pub fn augment_with<T: Real>(image: &[T], shape: ImageShape, dy: usize, dx: usize, flip: bool) -> Result<Vec<T>> {
    if image.len() != shape.len() {
        return Err(Error::InvalidArgument(format!(
            "image has {} values, shape {shape:?} needs {}",
            image.len(),
            shape.len()
        )));
    }
    if dy > 2 * PAD || dx > 2 * PAD {
        return Err(Error::InvalidArgument(format!("crop offset ({dy}, {dx}) outside the padded frame")));
    }
    let ImageShape { height, width, channels } = shape;
    let mut out = vec![T::zero(); image.len()];
    for r in 0..height {
        let sr = (r + dy) as isize - PAD as isize;
        if sr < 0 || sr >= height as isize {
            continue;
        }
        for c in 0..width {
            let oc = if flip { width - 1 - c } else { c };
            let sc = (c + dx) as isize - PAD as isize;
            if sc < 0 || sc >= width as isize {
                continue;
            }
            let src = (sr as usize * width + sc as usize) * channels;
            let dst = (r * width + oc) * channels;
            out[dst..dst + channels].copy_from_slice(&image[src..src + channels]);
        }
    }
    Ok(out)
}
