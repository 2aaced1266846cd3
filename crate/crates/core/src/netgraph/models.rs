//! Ready-made architectures.

use crate::error::Result;

use super::{AggregateMode, Graph, GraphBuilder};

/// Fully connected ReLU network; `dropout > 0` inserts dropout after every
/// hidden activation.
pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize, dropout: f64) -> Result<Graph> {
    let mut b = GraphBuilder::new(input_dim);
    let mut cur = b.input();
    for &width in hidden {
        let h = b.dense(cur, width);
        cur = b.relu(h);
        if dropout > 0.0 {
            cur = b.dropout(cur, dropout);
        }
    }
    let out = b.dense(cur, classes);
    b.build(out)
}

/// Residual MLP: a stem layer followed by `blocks` blocks of
/// `aggregate(x, relu(dense(x)))`.
pub fn residual_mlp(
    input_dim: usize,
    width: usize,
    blocks: usize,
    classes: usize,
    mode: AggregateMode,
    dropout: f64,
) -> Result<Graph> {
    let mut b = GraphBuilder::new(input_dim);
    let stem = b.dense(b.input(), width);
    let mut cur = b.relu(stem);
    for _ in 0..blocks {
        let mut branch = b.dense(cur, width);
        branch = b.relu(branch);
        if dropout > 0.0 {
            branch = b.dropout(branch, dropout);
        }
        cur = b.aggregate(&[cur, branch], mode);
    }
    let out = b.dense(cur, classes);
    b.build(out)
}

/// Small convolutional network on `height × width × channels` images
/// (position-major): one rescaled 3×3 convolution per entry of `conv_channels`,
/// each followed by ReLU, then a dense classifier.
pub fn conv_net(
    height: usize,
    width: usize,
    channels: usize,
    conv_channels: &[usize],
    classes: usize,
    dropout: f64,
) -> Result<Graph> {
    let mut b = GraphBuilder::new(height * width * channels);
    let mut cur = b.input();
    let mut c_in = channels;
    for &c_out in conv_channels {
        let conv = b.conv2d(cur, height, width, c_in, c_out, 1, 1, true);
        cur = b.relu(conv);
        if dropout > 0.0 {
            cur = b.dropout(cur, dropout);
        }
        c_in = c_out;
    }
    let out = b.dense(cur, classes);
    b.build(out)
}
