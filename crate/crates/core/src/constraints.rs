//! Parseval constraints: the orthonormality retraction for weight matrices,
//! Euclidean projection of aggregation weights onto the simplex, and the
//! output rescaling of constrained convolutions.
//!
//! Orientation: a `d_out × d_in` matrix with `d_out ≤ d_in` is pushed towards
//! orthonormal rows (`WWᵀ = I`). Taller matrices are handled through their
//! transpose (`WᵀW = I`), so "rows" below always means the shorter side.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

/// Image of a singular value under one retraction step:
/// `σ ↦ σ(1 + β − βσ²)`.
pub fn retraction_scalar_map(sigma: f64, beta: f64) -> f64 {
    sigma * (1.0 + beta - beta * sigma * sigma)
}

/// Singular values above this bound change sign under a retraction step.
pub fn sign_flip_threshold(beta: f64) -> f64 {
    ((1.0 + beta) / beta).sqrt()
}

fn oriented<T: Real>(w: &Matrix<T>) -> (bool, Matrix<T>) {
    if w.rows() <= w.cols() {
        (false, w.clone())
    } else {
        (true, w.transpose())
    }
}

/// One retraction step `W ← (1+β)W − βWWᵀW`.
///
/// With `row_subset`, only the submatrix `W_S` made of those rows (of the
/// oriented matrix) is updated, using `W_S W_Sᵀ W_S`; the other rows are
/// left untouched. `β = 0` returns `W` unchanged.
pub fn retraction_step<T: Real>(w: &Matrix<T>, beta: f64, row_subset: Option<&[usize]>) -> Result<Matrix<T>> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("retraction parameter {beta} outside [0, 1)")));
    }
    if beta == 0.0 || w.is_empty() {
        return Ok(w.clone());
    }
    let (transposed, mut m) = oriented(w);
    let b = T::of(beta);
    let one_plus = T::one() + b;
    match row_subset {
        None => {
            let update = m.matmul_t(&m)?.matmul(&m)?;
            let mut next = m.scale(one_plus);
            next.axpy(-b, &update)?;
            m = next;
        }
        Some(idx) => {
            check_subset(idx, m.rows())?;
            let ws = m.select_rows(idx);
            let update = ws.matmul_t(&ws)?.matmul(&ws)?;
            for (k, &r) in idx.iter().enumerate() {
                let new_row: Vec<T> = ws
                    .row(k)
                    .iter()
                    .zip(update.row(k))
                    .map(|(&x, &u)| one_plus * x - b * u)
                    .collect();
                m.row_mut(r).copy_from_slice(&new_row);
            }
        }
    }
    Ok(if transposed { m.transpose() } else { m })
}

fn check_subset(idx: &[usize], rows: usize) -> Result<()> {
    let mut seen = vec![false; rows];
    for &i in idx {
        if i >= rows {
            return Err(Error::InvalidArgument(format!("row index {i} out of range for {rows} rows")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidArgument(format!("row index {i} repeated")));
        }
    }
    Ok(())
}

/// `WWᵀ − I` (or `WᵀW − I` for tall matrices).
pub fn frame_residual<T: Real>(w: &Matrix<T>) -> Result<Matrix<T>> {
    let (_, m) = oriented(w);
    let mut g = m.matmul_t(&m)?;
    for i in 0..g.rows() {
        g[(i, i)] -= T::one();
    }
    Ok(g)
}

/// Frobenius distance `‖WWᵀ − I‖_F` to the Parseval-frame manifold.
pub fn parseval_gap<T: Real>(w: &Matrix<T>) -> Result<T> {
    Ok(frame_residual(w)?.frobenius_norm())
}

/// Regularizer `(β/4)‖WWᵀ − I‖²_F`, whose gradient is `β(WWᵀ − I)W`, so that
/// one unit gradient step on it is exactly [`retraction_step`].
pub fn parseval_regularizer<T: Real>(w: &Matrix<T>, beta: f64) -> Result<T> {
    let g = parseval_gap(w)?;
    Ok(T::of(beta / 4.0) * g * g)
}

/// `β(WWᵀ − I)W`, the gradient of [`parseval_regularizer`].
pub fn parseval_regularizer_grad<T: Real>(w: &Matrix<T>, beta: f64) -> Result<Matrix<T>> {
    let r = frame_residual(w)?;
    let b = T::of(beta);
    if w.rows() <= w.cols() {
        Ok(r.matmul(w)?.scale(b))
    } else {
        Ok(w.matmul(&r)?.scale(b))
    }
}

/// Uniform sample without replacement of `⌈fraction · num_rows⌉` distinct
/// row indices, returned in increasing order.
pub fn sample_row_subset<R: Rng + ?Sized>(num_rows: usize, fraction: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("row fraction {fraction} outside (0, 1]")));
    }
    if num_rows == 0 {
        return Ok(Vec::new());
    }
    // The epsilon keeps products such as 0.3 * 10 = 3.0000000000000004 at 3.
    let k = ((fraction * num_rows as f64) - 1e-9).ceil().clamp(1.0, num_rows as f64) as usize;
    if k == num_rows {
        return Ok((0..num_rows).collect());
    }
    let mut idx = rand::seq::index::sample(rng, num_rows, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Euclidean projection onto the probability simplex by sorting and soft
/// thresholding.
pub fn simplex_project<T: Real>(alpha: &[T]) -> Result<Vec<T>> {
    if alpha.is_empty() {
        return Err(Error::Empty("simplex_project"));
    }
    if alpha.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("non-finite coefficient".into()));
    }
    let mut sorted = alpha.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let mut cumsum = T::zero();
    let mut support = 1;
    let mut support_sum = sorted[0];
    for (i, &a) in sorted.iter().enumerate() {
        cumsum += a;
        let k = T::of((i + 1) as f64);
        if T::one() + k * a > cumsum {
            support = i + 1;
            support_sum = cumsum;
        }
    }
    let tau = (support_sum - T::one()) / T::of(support as f64);
    let mut out: Vec<T> = alpha.iter().map(|&a| (a - tau).max(T::zero())).collect();
    let total: T = out.iter().copied().sum();
    if total > T::zero() {
        out.iter_mut().for_each(|x| *x /= total);
    }
    Ok(out)
}

/// Output multiplier `window^(-1/2)` of a constrained convolution, where
/// `window` is the number of input positions per output (`2k+1` in 1-D).
pub fn conv_rescale(window: usize) -> f64 {
    assert!(window >= 1, "convolution window must be at least 1");
    1.0 / (window as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{orthonormal_rows_init, singular_values};
    use proptest::prelude::{any, prop, prop_assert, prop_assume, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Projection oracle: the optimum is `max(0, α − τ)` on some support, so
    /// enumerate every nonempty support, solve for `τ`, and keep the closest
    /// feasible candidate.
    fn simplex_oracle(alpha: &[f64]) -> Vec<f64> {
        let k = alpha.len();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for mask in 1u32..(1 << k) {
            let members: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
            let s: f64 = members.iter().map(|&i| alpha[i]).sum();
            let tau = (s - 1.0) / members.len() as f64;
            let mut cand = vec![0.0; k];
            let mut ok = true;
            for &i in &members {
                cand[i] = alpha[i] - tau;
                if cand[i] < -1e-12 {
                    ok = false;
                }
            }
            if !ok {
                continue;
            }
            let d: f64 = alpha.iter().zip(&cand).map(|(a, c)| (a - c).powi(2)).sum();
            if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                best = Some((d, cand));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn simplex_examples() {
        assert_eq!(simplex_project(&[0.5f64, 0.5]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(simplex_project(&[2.0f64, 0.0]).unwrap(), vec![1.0, 0.0]);
        let p = simplex_project(&[0.4f64, 0.4]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
        assert!(matches!(simplex_project::<f64>(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn simplex_matches_oracle_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..300 {
            let k = rng.random_range(1..=8);
            let scale = 10f64.powf(rng.random_range(-1.0..3.0));
            let a: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
            let got = simplex_project(&a).unwrap();
            let want = simplex_oracle(&a);
            let err: f64 = got.iter().zip(&want).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            assert!(err < 1e-8, "{a:?}: {got:?} vs {want:?}");
        }
    }

    #[test]
    fn retraction_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = orthonormal_rows_init::<f64, _>(4, 9, &mut rng).unwrap();
        let r = retraction_step(&w, 0.2, None).unwrap();
        assert!(r.sub(&w).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn retraction_on_diagonal_follows_scalar_map() {
        let w = Matrix::<f64>::diag(&[2.0, 0.5]);
        let r = retraction_step(&w, 0.1, None).unwrap();
        assert!((r[(0, 0)] - 1.4).abs() < 1e-12);
        assert!((r[(1, 1)] - 0.5375).abs() < 1e-12);
        assert_eq!(r[(0, 1)], 0.0);
        assert!((retraction_scalar_map(2.0, 0.1) - 1.4).abs() < 1e-12);
        assert!((retraction_scalar_map(0.5, 0.1) - 0.5375).abs() < 1e-12);
    }

    #[test]
    fn subset_retraction_leaves_other_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Matrix::<f64>::gaussian(6, 10, &mut rng);
        let r = retraction_step(&w, 0.1, Some(&[1, 4])).unwrap();
        for i in [0, 2, 3, 5] {
            assert_eq!(r.row(i), w.row(i));
        }
        let ws = w.select_rows(&[1, 4]);
        let full = retraction_step(&ws, 0.1, None).unwrap();
        assert!(r.select_rows(&[1, 4]).sub(&full).unwrap().max_abs() < 1e-14);
        assert!(retraction_step(&w, 0.1, Some(&[1, 1])).is_err());
        assert!(retraction_step(&w, 0.1, Some(&[6])).is_err());
        assert!(retraction_step(&w, 1.0, None).is_err());
    }

    #[test]
    fn tall_matrices_use_the_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = Matrix::<f64>::gaussian(9, 4, &mut rng).scale(0.3);
        let mut cur = w;
        for _ in 0..500 {
            cur = retraction_step(&cur, 0.2, None).unwrap();
        }
        assert!(parseval_gap(&cur).unwrap() < 1e-9);
        assert!(cur.t_matmul(&cur).unwrap().sub(&Matrix::identity(4)).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn gap_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = orthonormal_rows_init::<f64, _>(5, 8, &mut rng).unwrap();
        assert!(parseval_gap(&w).unwrap() < 1e-10);
        let d = Matrix::<f64>::diag(&[2.0, 1.0]);
        assert!((parseval_gap(&d).unwrap() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn regularizer_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (r, c) in [(3, 5), (5, 3)] {
            let w = Matrix::<f64>::gaussian(r, c, &mut rng);
            let beta = 0.3;
            let g = parseval_regularizer_grad(&w, beta).unwrap();
            let h = 1e-6;
            for i in 0..r {
                for j in 0..c {
                    let mut wp = w.clone();
                    wp[(i, j)] += h;
                    let mut wm = w.clone();
                    wm[(i, j)] -= h;
                    let fd = (parseval_regularizer(&wp, beta).unwrap() - parseval_regularizer(&wm, beta).unwrap())
                        / (2.0 * h);
                    assert!((fd - g[(i, j)]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", g[(i, j)]);
                }
            }
            // The retraction is one unit gradient step on the regularizer.
            let step = retraction_step(&w, beta, None).unwrap();
            let mut manual = w.clone();
            manual.axpy(-1.0, &g).unwrap();
            assert!(step.sub(&manual).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn row_subset_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(sample_row_subset(7, 1.0, &mut rng).unwrap(), (0..7).collect::<Vec<_>>());
        let s = sample_row_subset(2048, 0.3, &mut rng).unwrap();
        assert_eq!(s.len(), 615);
        let mut d = s.clone();
        d.dedup();
        assert_eq!(d.len(), 615);
        assert_eq!(sample_row_subset(10, 0.3, &mut rng).unwrap().len(), 3);
        assert!(sample_row_subset(10, 0.0, &mut rng).is_err());
        assert!(sample_row_subset(10, 1.5, &mut rng).is_err());
    }

    #[test]
    fn row_subsets_cover_every_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut hit = [0usize; 10];
        for _ in 0..200 {
            for i in sample_row_subset(10, 0.3, &mut rng).unwrap() {
                hit[i] += 1;
            }
        }
        // Each index is drawn with probability 0.3 per round: expect 60 hits.
        assert!(hit.iter().all(|&h| h > 30 && h < 90), "{hit:?}");
    }

    #[test]
    fn conv_rescale_values() {
        assert!((conv_rescale(3) - 0.577350).abs() < 1e-6);
        assert_eq!(conv_rescale(1), 1.0);
        assert!((conv_rescale(9) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn retraction_iterates_to_unit_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Matrix::<f64>::gaussian(8, 16, &mut rng);
        let top = singular_values(&w).unwrap()[0];
        let mut cur = w.scale(1.6 / top);
        for _ in 0..1000 {
            cur = retraction_step(&cur, 0.1, None).unwrap();
        }
        for s in singular_values(&cur).unwrap() {
            assert!((s - 1.0).abs() < 1e-3);
        }
    }

    proptest! {
        #[test]
        fn simplex_output_is_feasible_and_idempotent(v in prop::collection::vec(-1e3f64..1e3, 1..12)) {
            let p = simplex_project(&v).unwrap();
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let pp = simplex_project(&p).unwrap();
            for (a, b) in p.iter().zip(&pp) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn retraction_keeps_frames_fixed(seed in any::<u64>(), r in 1usize..8, extra in 0usize..8, beta in 0.01f64..0.9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = orthonormal_rows_init::<f64, _>(r, r + extra, &mut rng).unwrap();
            let before = parseval_gap(&w).unwrap();
            let after = parseval_gap(&retraction_step(&w, beta, None).unwrap()).unwrap();
            prop_assert!((after - before).abs() <= 1e-12);
        }

        #[test]
        fn retraction_contracts_near_the_manifold(
            seed in any::<u64>(),
            r in 1usize..7,
            extra in 0usize..6,
            delta in 0.001f64..0.1,
            beta in 0.01f64..0.3,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = r + extra;
            // W = U diag(s) V with orthonormal U, V rows and s in [1-δ, 1+δ].
            let u = orthonormal_rows_init::<f64, _>(r, r, &mut rng).unwrap();
            let v = orthonormal_rows_init::<f64, _>(r, n, &mut rng).unwrap();
            let s: Vec<f64> = (0..r).map(|_| 1.0 + rng.random_range(-delta..=delta)).collect();
            let w = u.matmul(&Matrix::diag(&s)).unwrap().matmul(&v).unwrap();
            let before = parseval_gap(&w).unwrap();
            prop_assume!(before > 1e-9);
            let after = parseval_gap(&retraction_step(&w, beta, None).unwrap()).unwrap();
            prop_assert!(after < before, "{after} !< {before}");
        }
    }
}
