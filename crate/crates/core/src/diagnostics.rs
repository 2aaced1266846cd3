//! Singular-value spectra and local covariance dimension.

use crate::error::{Error, Result};
use crate::linalg::{singular_values, symmetric_eigenvalues, Matrix, MAX_GRAM_DIM};
use crate::netgraph::{NodeId, Params};
use crate::scalar::Real;

/// Width of the single bin used when all singular values coincide.
pub const DEGENERATE_BIN_WIDTH: f64 = 1e-3;
/// Relative spread below which singular values count as identical.
pub const DEGENERATE_SPREAD: f64 = 1e-9;

/// Histogram of the singular values of one weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumHistogram {
    /// `bins + 1` increasing edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub values: Vec<f64>,
}

impl SpectrumHistogram {
    /// Builds a histogram over `values` with `bins` equal-width bins spanning
    /// `[min, max]`, or a narrow window around the mean when the values agree
    /// up to rounding.
    pub fn from_values(values: Vec<f64>, bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
        }
        if values.is_empty() {
            return Err(Error::Empty("singular values"));
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let (lo, hi) = if max - min > DEGENERATE_SPREAD * max.abs().max(1.0) {
            (min, max)
        } else {
            // Centre the last bin on the common value so it is strictly inside.
            let lo = mean - DEGENERATE_BIN_WIDTH * (bins as f64 - 0.5);
            (lo, lo + DEGENERATE_BIN_WIDTH * bins as f64)
        };
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
        let mut counts = vec![0; bins];
        for &v in &values {
            let b = (((v - lo) / width).floor() as usize).min(bins - 1);
            counts[b] += 1;
        }
        Ok(SpectrumHistogram { edges, counts, min, max, mean, values })
    }

    /// Index of the bin containing `v`, if any.
    pub fn bin_of(&self, v: f64) -> Option<usize> {
        let n = self.counts.len();
        (0..n).find(|&i| v >= self.edges[i] && (v < self.edges[i + 1] || (i + 1 == n && v <= self.edges[n])))
    }

    pub fn spread(&self) -> f64 {
        self.max - self.min
    }

    /// `max |σ − 1|`.
    pub fn max_deviation_from_one(&self) -> f64 {
        self.values.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max)
    }
}

/// Singular-value histogram of the weight matrix at `node`.
pub fn spectrum_histogram<T: Real>(params: &Params<T>, node: NodeId, bins: usize) -> Result<SpectrumHistogram> {
    let w = params
        .weight(node)
        .ok_or_else(|| Error::Graph(format!("{node} has no weight matrix")))?;
    let values = singular_values(w)?.into_iter().map(Real::as_f64).collect();
    SpectrumHistogram::from_values(values, bins)
}

/// Smallest `p` with `Σ_{i≤p} λ_i ≥ threshold · Σ λ_i`, for eigenvalues in
/// any order. Negative rounding noise is clamped to zero.
pub fn cov_dim_from_eigenvalues(eigenvalues: &[f64], threshold: f64) -> Result<usize> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside (0, 1]")));
    }
    let mut ev: Vec<f64> = eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = ev.iter().sum();
    if total == 0.0 {
        return Ok(0);
    }
    // Relative slack so threshold 1.0 is reachable despite summation order.
    let target = threshold * total * (1.0 - 1e-12);
    let mut acc = 0.0;
    for (i, l) in ev.iter().enumerate() {
        acc += l;
        if acc >= target {
            return Ok(i + 1);
        }
    }
    Ok(ev.len())
}

/// Eigenvalues of the uncentered covariance `(1/n) Σ φ φᵀ`, descending, with
/// values below the eigensolver's resolution set to zero.
pub fn covariance_eigenvalues<T: Real>(activations: &Matrix<T>) -> Result<Vec<f64>> {
    let (n, d) = activations.shape();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("covariance needs at least 2 rows, got {n}")));
    }
    if d > MAX_GRAM_DIM {
        return Err(Error::InvalidArgument(format!("activation width {d} exceeds {MAX_GRAM_DIM}")));
    }
    let x = activations.cast::<f64>();
    let cov = x.t_matmul(&x)?.scale(1.0 / n as f64);
    let mut ev = symmetric_eigenvalues(&cov)?;
    ev.sort_by(|a, b| b.total_cmp(a));
    let top = ev.first().copied().unwrap_or(0.0).max(0.0);
    let floor = d as f64 * f64::EPSILON * top;
    for l in &mut ev {
        if *l <= floor {
            *l = 0.0;
        }
    }
    Ok(ev)
}

/// Result of [`local_cov_dim`].
#[derive(Clone, Debug, PartialEq)]
pub struct CovDim {
    /// Over all rows.
    pub overall: usize,
    pub dim: usize,
    /// Mean of the per-class values, when labels were given and at least one
    /// class had 2 or more rows.
    pub per_class_mean: Option<f64>,
    /// `(class, p)` for every class that was evaluated.
    pub per_class: Vec<(usize, usize)>,
    /// Classes skipped for having fewer than 2 rows.
    pub skipped: Vec<usize>,
}

impl CovDim {
    pub fn fraction(&self) -> f64 {
        self.overall as f64 / self.dim as f64
    }
}

/// Local covariance dimension of a layer's activations (`n × d`).
pub fn local_cov_dim<T: Real>(activations: &Matrix<T>, threshold: f64, labels: Option<&[usize]>) -> Result<CovDim> {
    let overall = cov_dim_from_eigenvalues(&covariance_eigenvalues(activations)?, threshold)?;
    let mut result = CovDim {
        overall,
        dim: activations.cols(),
        per_class_mean: None,
        per_class: Vec::new(),
        skipped: Vec::new(),
    };
    let Some(labels) = labels else { return Ok(result) };
    if labels.len() != activations.rows() {
        return Err(Error::Dimension {
            op: "local_cov_dim labels",
            left: activations.shape(),
            right: (labels.len(), 1),
        });
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &c) in labels.iter().enumerate() {
        rows[c].push(i);
    }
    for (c, idx) in rows.iter().enumerate() {
        match idx.len() {
            0 => {}
            1 => result.skipped.push(c),
            _ => {
                let sub = activations.select_rows(idx);
                let p = cov_dim_from_eigenvalues(&covariance_eigenvalues(&sub)?, threshold)?;
                result.per_class.push((c, p));
            }
        }
    }
    if !result.per_class.is_empty() {
        let sum: usize = result.per_class.iter().map(|&(_, p)| p).sum();
        result.per_class_mean = Some(sum as f64 / result.per_class.len() as f64);
    }
    Ok(result)
}
