//! Unfolding of zero-padded, stride-1 convolution windows.
//!
//! A sample with `P` positions and `c` channels is stored position-major.
//! Unfolding produces one row per position holding the concatenated channel
//! vectors of its window (out-of-bounds neighbours are zero), so that a
//! convolution becomes a matrix product with a `c_out × window·c` kernel.

use crate::linalg::Matrix;
use crate::scalar::Real;

use super::NodeKind;

/// Window layout of a convolution: for every output position, the source
/// position of each window slot (or `None` when it falls in the padding).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    positions: usize,
    window: usize,
    channels: usize,
    table: Vec<Option<usize>>,
}

impl ConvGeometry {
    pub fn one_d(length: usize, channels: usize, half_width: usize) -> Self {
        let window = 2 * half_width + 1;
        let mut table = Vec::with_capacity(length * window);
        for j in 0..length {
            for off in 0..window {
                let src = (j + off).checked_sub(half_width).filter(|&s| s < length);
                table.push(src);
            }
        }
        Self {
            positions: length,
            window,
            channels,
            table,
        }
    }

    pub fn two_d(height: usize, width: usize, channels: usize, half_h: usize, half_w: usize) -> Self {
        let (wh, ww) = (2 * half_h + 1, 2 * half_w + 1);
        let mut table = Vec::with_capacity(height * width * wh * ww);
        for y in 0..height {
            for x in 0..width {
                for dy in 0..wh {
                    for dx in 0..ww {
                        let sy = (y + dy).checked_sub(half_h).filter(|&s| s < height);
                        let sx = (x + dx).checked_sub(half_w).filter(|&s| s < width);
                        table.push(sy.zip(sx).map(|(sy, sx)| sy * width + sx));
                    }
                }
            }
        }
        Self {
            positions: height * width,
            window: wh * ww,
            channels,
            table,
        }
    }

    /// Geometry of a convolution node; `None` for other kinds.
    pub fn of(kind: &NodeKind) -> Option<Self> {
        match *kind {
            NodeKind::Conv1d {
                length,
                c_in,
                half_width,
                ..
            } => Some(Self::one_d(length, c_in, half_width)),
            NodeKind::Conv2d {
                height,
                width,
                c_in,
                half_h,
                half_w,
                ..
            } => Some(Self::two_d(height, width, c_in, half_h, half_w)),
            _ => None,
        }
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Unfolds a batch `n × (positions·channels)` into
    /// `(n·positions) × (window·channels)`.
    pub fn unfold_batch<T: Real>(&self, x: &Matrix<T>) -> Matrix<T> {
        let c = self.channels;
        let n = x.rows();
        let row_len = self.window * c;
        let mut out = Matrix::zeros(n * self.positions, row_len);
        for s in 0..n {
            let sample = x.row(s);
            for p in 0..self.positions {
                let dst = out.row_mut(s * self.positions + p);
                let slots = &self.table[p * self.window..(p + 1) * self.window];
                for (slot, src) in slots.iter().enumerate() {
                    if let Some(src) = *src {
                        dst[slot * c..(slot + 1) * c].copy_from_slice(&sample[src * c..(src + 1) * c]);
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`unfold_batch`](Self::unfold_batch): scatters window rows
    /// back onto positions, accumulating into `acc`.
    pub fn fold_batch_into<T: Real>(&self, u: &Matrix<T>, acc: &mut Matrix<T>) {
        let c = self.channels;
        for s in 0..acc.rows() {
            let sample = acc.row_mut(s);
            for p in 0..self.positions {
                let src_row = u.row(s * self.positions + p);
                let slots = &self.table[p * self.window..(p + 1) * self.window];
                for (slot, dst) in slots.iter().enumerate() {
                    if let Some(dst) = *dst {
                        for (a, &g) in sample[dst * c..(dst + 1) * c]
                            .iter_mut()
                            .zip(&src_row[slot * c..(slot + 1) * c])
                        {
                            *a += g;
                        }
                    }
                }
            }
        }
    }
}

/// Unfolds one 1-D signal `z` (`T × d_in`, one position per row) with
/// half-width `k`. Row `j` of the result is `[z_{j-k}; …; z_{j+k}]`.
pub fn unfold<T: Real>(z: &Matrix<T>, k: usize) -> Matrix<T> {
    let geo = ConvGeometry::one_d(z.rows(), z.cols(), k);
    let flat = Matrix::from_vec(1, z.rows() * z.cols(), z.as_slice().to_vec()).expect("same length");
    geo.unfold_batch(&flat)
}

/// Adjoint of [`unfold`]: maps a `T × (2k+1)d_in` matrix back to `T × d_in`.
pub fn fold<T: Real>(u: &Matrix<T>, k: usize, d_in: usize) -> Matrix<T> {
    let length = u.rows();
    let geo = ConvGeometry::one_d(length, d_in, k);
    let mut acc = Matrix::zeros(1, length * d_in);
    geo.fold_batch_into(u, &mut acc);
    Matrix::from_vec(length, d_in, acc.into_vec()).expect("same length")
}
