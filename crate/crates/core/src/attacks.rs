//! Fast gradient sign attacks (one-step and iterative), SNR, and the
//! adversarial minibatch mixing used for adversarial training.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{norm2, Matrix};
use crate::netgraph::{backward, forward, Batch, Graph, Mode, Params};
use crate::scalar::Real;

/// Norm of the perturbation budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Norm {
    L2,
    Inf,
}

impl Norm {
    pub fn of<T: Real>(self, v: &[T]) -> T {
        match self {
            Norm::L2 => norm2(v),
            Norm::Inf => crate::linalg::norm_inf(v),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Norm::L2 => "l2",
            Norm::Inf => "inf",
        }
    }
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "2" | "l2" => Ok(Norm::L2),
            "inf" | "linf" | "infinity" => Ok(Norm::Inf),
            other => Err(Error::InvalidArgument(format!("unknown norm {other:?} (expected l2 or inf)"))),
        }
    }
}

/// Attack configuration. `epsilon` is in input units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackSpec {
    pub norm: Norm,
    pub epsilon: f64,
    /// 1 is the one-step method; more runs the iterative variant.
    pub iterations: usize,
    /// Per-iteration step (ignored by the one-step method).
    pub step_size: f64,
    /// Valid input range; every iterate is clamped into it.
    pub clamp: Option<(f64, f64)>,
}

impl AttackSpec {
    pub fn one_step(norm: Norm, epsilon: f64) -> Self {
        Self {
            norm,
            epsilon,
            iterations: 1,
            step_size: epsilon,
            clamp: None,
        }
    }

    /// Iterative variant with step `epsilon / iterations`.
    pub fn iterative(norm: Norm, epsilon: f64, iterations: usize) -> Self {
        Self {
            norm,
            epsilon,
            iterations,
            step_size: epsilon / iterations.max(1) as f64,
            clamp: None,
        }
    }

    pub fn with_clamp(mut self, lo: f64, hi: f64) -> Self {
        self.clamp = Some((lo, hi));
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!("epsilon {} must be finite and >= 0", self.epsilon)));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("attack needs at least one iteration".into()));
        }
        if self.iterations > 1 && !(self.step_size >= 0.0 && self.step_size <= self.epsilon) {
            return Err(Error::InvalidArgument(format!(
                "step size {} must lie in [0, epsilon = {}]",
                self.step_size, self.epsilon
            )));
        }
        if let Some((lo, hi)) = self.clamp {
            if !(lo <= hi) {
                return Err(Error::InvalidArgument(format!("empty clamp range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Perturbed inputs plus the rows whose loss gradient vanished (left as is).
#[derive(Clone, Debug)]
pub struct AttackOutcome<T> {
    pub inputs: Matrix<T>,
    pub zero_gradient_rows: Vec<usize>,
}

/// `∇ₓ` of the mean batch loss (rows are per-example gradients up to the
/// common `1/n` factor).
pub fn input_gradient<T: Real>(graph: &Graph, params: &Params<T>, inputs: &Matrix<T>, labels: &[usize]) -> Result<Matrix<T>> {
    let trace = forward(graph, params, inputs, Mode::Eval)?;
    let grads = backward(graph, params, &trace, labels, true)?;
    Ok(grads.input.expect("requested input gradient"))
}

/// Writes the steepest-ascent direction of unit norm for `g` into `dir`;
/// returns false when `g` is zero.
fn ascent_direction<T: Real>(norm: Norm, g: &[T], dir: &mut [T]) -> bool {
    match norm {
        Norm::Inf => {
            let mut any = false;
            for (d, &x) in dir.iter_mut().zip(g) {
                *d = if x > T::zero() {
                    any = true;
                    T::one()
                } else if x < T::zero() {
                    any = true;
                    -T::one()
                } else {
                    T::zero()
                };
            }
            any
        }
        Norm::L2 => {
            let n = norm2(g);
            if n == T::zero() || !n.is_finite() {
                dir.iter_mut().for_each(|d| *d = T::zero());
                return false;
            }
            for (d, &x) in dir.iter_mut().zip(g) {
                *d = x / n;
            }
            true
        }
    }
}

/// Projects `x` onto the `ε`-ball around `x0` and then into the clamp box.
fn project_row<T: Real>(x: &mut [T], x0: &[T], spec: &AttackSpec) {
    let eps = T::of(spec.epsilon);
    match spec.norm {
        Norm::Inf => {
            for (v, &o) in x.iter_mut().zip(x0) {
                *v = (*v).max(o - eps).min(o + eps);
            }
        }
        Norm::L2 => {
            let d: T = x.iter().zip(x0).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>().sqrt();
            if d > eps {
                let s = eps / d;
                for (v, &o) in x.iter_mut().zip(x0) {
                    *v = o + (*v - o) * s;
                }
            }
        }
    }
    if let Some((lo, hi)) = spec.clamp {
        let (lo, hi) = (T::of(lo), T::of(hi));
        x.iter_mut().for_each(|v| *v = (*v).max(lo).min(hi));
    }
}

/// Fast gradient attack against the ground-truth labels.
///
/// One step moves by `ε` along the sign of the gradient (`∞`) or the
/// normalized gradient (`ℓ2`). The iterative variant takes `iterations`
/// steps of `step_size`, projecting back onto the `ε`-ball and the clamp
/// range after each one.
pub fn fgsm<T: Real>(graph: &Graph, params: &Params<T>, batch: &Batch<T>, spec: &AttackSpec) -> Result<AttackOutcome<T>> {
    spec.validate()?;
    let x0 = &batch.inputs;
    let mut x = x0.clone();
    let step = T::of(if spec.iterations == 1 { spec.epsilon } else { spec.step_size });
    let mut zero_rows = Vec::new();
    let mut frozen = vec![false; x.rows()];
    let mut dir = vec![T::zero(); x.cols()];
    for it in 0..spec.iterations {
        let g = input_gradient(graph, params, &x, &batch.labels)?;
        for i in 0..x.rows() {
            if frozen[i] {
                continue;
            }
            if !ascent_direction(spec.norm, g.row(i), &mut dir) {
                if it == 0 {
                    zero_rows.push(i);
                    frozen[i] = true;
                }
                continue;
            }
            let row = x.row_mut(i);
            for (v, &d) in row.iter_mut().zip(&dir) {
                *v += step * d;
            }
            project_row(row, x0.row(i), spec);
        }
    }
    Ok(AttackOutcome {
        inputs: x,
        zero_gradient_rows: zero_rows,
    })
}

/// [`fgsm`] over fixed-size chunks of rows, optionally in parallel. The
/// chunking does not depend on `parallel`, so both settings return the
/// same bits.
pub fn fgsm_chunked<T: Real>(
    graph: &Graph,
    params: &Params<T>,
    batch: &Batch<T>,
    spec: &AttackSpec,
    chunk: usize,
    parallel: bool,
) -> Result<AttackOutcome<T>> {
    let chunk = chunk.max(1);
    let starts: Vec<usize> = (0..batch.len()).step_by(chunk).collect();
    let run = |&start: &usize| -> Result<AttackOutcome<T>> {
        let idx: Vec<usize> = (start..(start + chunk).min(batch.len())).collect();
        let mut out = fgsm(graph, params, &batch.select(&idx), spec)?;
        out.zero_gradient_rows.iter_mut().for_each(|r| *r += start);
        Ok(out)
    };
    let parts: Vec<Result<AttackOutcome<T>>> = if parallel {
        starts.par_iter().map(run).collect()
    } else {
        starts.iter().map(run).collect()
    };
    let mut data = Vec::with_capacity(batch.inputs.as_slice().len());
    let mut zero = Vec::new();
    for p in parts {
        let p = p?;
        data.extend_from_slice(p.inputs.as_slice());
        zero.extend(p.zero_gradient_rows);
    }
    Ok(AttackOutcome {
        inputs: Matrix::from_vec(batch.inputs.rows(), batch.inputs.cols(), data)?,
        zero_gradient_rows: zero,
    })
}

/// Signal-to-noise ratio `20·log₁₀(‖x‖₂ / ‖δ‖₂)` in decibels; `+∞` when
/// `δ = 0`.
pub fn snr<T: Real>(x: &[T], delta: &[T]) -> f64 {
    let d = norm2(delta).as_f64();
    if d == 0.0 {
        return f64::INFINITY;
    }
    20.0 * (norm2(x).as_f64() / d).log10()
}

/// One-step `∞` budget that yields roughly `target_db` of SNR on inputs of
/// mean norm `mean_norm` in dimension `dim` (exact when no coordinate of the
/// gradient vanishes and nothing is clamped).
pub fn epsilon_for_snr(mean_norm: f64, dim: usize, target_db: f64) -> f64 {
    mean_norm / ((dim as f64).sqrt() * 10f64.powf(target_db / 20.0))
}

/// Adversarial minibatch mixing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdversarialMixing {
    /// Standard deviation of the centred Gaussian the budget is drawn from.
    pub sigma: f64,
    /// Truncation point in units of `sigma`.
    pub truncation: f64,
    /// Fraction of rows replaced.
    pub fraction: f64,
    pub norm: Norm,
    pub clamp: Option<(f64, f64)>,
}

impl Default for AdversarialMixing {
    fn default() -> Self {
        Self {
            sigma: 2.0,
            truncation: 2.0,
            fraction: 0.5,
            norm: Norm::Inf,
            clamp: None,
        }
    }
}

impl AdversarialMixing {
    /// `|z|` for `z ~ N(0, σ²)` conditioned on `|z| ≤ truncation·σ`.
    pub fn draw_epsilon<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.sigma == 0.0 {
            return 0.0;
        }
        loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= self.truncation {
                return (z * self.sigma).abs();
            }
        }
    }
}

/// A minibatch with `⌊fraction·n⌋` uniformly chosen rows replaced by their
/// one-step attacks at a single budget drawn for the whole minibatch.
/// Labels are unchanged. Draws the budget first, then the rows.
pub fn adversarial_batch<T: Real, R: Rng + ?Sized>(
    graph: &Graph,
    params: &Params<T>,
    batch: &Batch<T>,
    mixing: &AdversarialMixing,
    rng: &mut R,
) -> Result<(Batch<T>, f64)> {
    let eps = mixing.draw_epsilon(rng);
    let mixed = adversarial_batch_with_epsilon(graph, params, batch, mixing, eps, rng)?;
    Ok((mixed, eps))
}

/// [`adversarial_batch`] with a given budget.
pub fn adversarial_batch_with_epsilon<T: Real, R: Rng + ?Sized>(
    graph: &Graph,
    params: &Params<T>,
    batch: &Batch<T>,
    mixing: &AdversarialMixing,
    epsilon: f64,
    rng: &mut R,
) -> Result<Batch<T>> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::InvalidArgument("adversarial mixing needs at least two rows".into()));
    }
    let k = ((n as f64) * mixing.fraction).floor() as usize;
    let mut rows = rand::seq::index::sample(rng, n, k).into_vec();
    rows.sort_unstable();
    let mut out = batch.clone();
    if epsilon == 0.0 || rows.is_empty() {
        return Ok(out);
    }
    let spec = AttackSpec {
        clamp: mixing.clamp,
        ..AttackSpec::one_step(mixing.norm, epsilon)
    };
    let attacked = fgsm(graph, params, &batch.select(&rows), &spec)?;
    for (k, &r) in rows.iter().enumerate() {
        out.inputs.row_mut(r).copy_from_slice(attacked.inputs.row(k));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{log_loss, models, GraphBuilder, Init};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_model(rng: &mut ChaCha8Rng) -> (Graph, Params<f64>) {
        let mut b = GraphBuilder::new(6);
        let o = b.dense(b.input(), 3);
        let g = b.build(o).unwrap();
        let p = Params::init(&g, Init::Gaussian, rng).unwrap();
        (g, p)
    }

    fn losses(g: &Graph, p: &Params<f64>, x: &Matrix<f64>, y: &[usize]) -> Vec<f64> {
        let t = forward(g, p, x, Mode::Eval).unwrap();
        t.logits().row_iter().zip(y).map(|(z, &l)| log_loss(z, l)).collect()
    }

    #[test]
    fn sign_step_example() {
        let g = [0.5f64, -2.0];
        let mut d = [0.0; 2];
        assert!(ascent_direction(Norm::Inf, &g, &mut d));
        assert_eq!(d.map(|v| v * 0.1), [0.1, -0.1]);
    }

    #[test]
    fn one_step_on_linear_model_increases_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (g, p) = linear_model(&mut rng);
        let x = Matrix::<f64>::gaussian(20, 6, &mut rng);
        let y: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let batch = Batch::new(x.clone(), y.clone()).unwrap();
        let eps = 0.05;
        let out = fgsm(&g, &p, &batch, &AttackSpec::one_step(Norm::Inf, eps)).unwrap();
        let grad = input_gradient(&g, &p, &x, &y).unwrap();
        let before = losses(&g, &p, &x, &y);
        let after = losses(&g, &p, &out.inputs, &y);
        for i in 0..20 {
            for j in 0..6 {
                let d = out.inputs[(i, j)] - x[(i, j)];
                assert!((d - eps * grad[(i, j)].signum()).abs() < 1e-15);
            }
            assert!(after[i] > before[i]);
        }
    }

    #[test]
    fn budgets_hold_for_both_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = models::mlp(8, &[6], 3, 0.0).unwrap();
        let p = Params::<f64>::init(&g, Init::Gaussian, &mut rng).unwrap();
        let x = Matrix::<f64>::gaussian(30, 8, &mut rng);
        let y: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let batch = Batch::new(x.clone(), y).unwrap();
        for norm in [Norm::L2, Norm::Inf] {
            for iters in [1, 3, 7] {
                let spec = AttackSpec::iterative(norm, 0.3, iters);
                let out = fgsm(&g, &p, &batch, &spec).unwrap();
                for i in 0..30 {
                    let d: Vec<f64> = out.inputs.row(i).iter().zip(x.row(i)).map(|(a, b)| a - b).collect();
                    assert!(norm.of(&d) <= 0.3 + 1e-9, "{norm:?} {iters}: {}", norm.of(&d));
                }
            }
        }
        let out = fgsm(&g, &p, &batch, &AttackSpec::one_step(Norm::Inf, 0.3)).unwrap();
        for (a, b) in out.inputs.as_slice().iter().zip(x.as_slice()) {
            let d = a - b;
            assert!(d == 0.0 || (d.abs() - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn clamp_keeps_inputs_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = models::mlp(5, &[4], 2, 0.0).unwrap();
        let p = Params::<f64>::init(&g, Init::Gaussian, &mut rng).unwrap();
        let x = Matrix::from_vec(4, 5, (0..20).map(|i| (i as f64) / 19.0).collect()).unwrap();
        let batch = Batch::new(x, vec![0, 1, 0, 1]).unwrap();
        let out = fgsm(&g, &p, &batch, &AttackSpec::iterative(Norm::Inf, 0.5, 4).with_clamp(0.0, 1.0)).unwrap();
        assert!(out.inputs.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn zero_gradient_rows_are_flagged() {
        let mut b = GraphBuilder::new(3);
        let o = b.dense(b.input(), 2);
        let g = b.build(o).unwrap();
        let p = Params::<f64>::zeros(&g);
        let x = Matrix::from_f64_rows(&[[1.0, 2.0, 3.0]]);
        let batch = Batch::new(x.clone(), vec![1]).unwrap();
        let out = fgsm(&g, &p, &batch, &AttackSpec::one_step(Norm::L2, 0.5)).unwrap();
        assert_eq!(out.zero_gradient_rows, vec![0]);
        assert_eq!(out.inputs, x);
    }

    #[test]
    fn invalid_specs() {
        assert!(AttackSpec::one_step(Norm::Inf, -1.0).validate().is_err());
        let mut s = AttackSpec::iterative(Norm::Inf, 0.1, 3);
        s.step_size = 0.2;
        assert!(s.validate().is_err());
        s.iterations = 0;
        assert!(s.validate().is_err());
        assert!("l3".parse::<Norm>().is_err());
        assert_eq!("inf".parse::<Norm>().unwrap(), Norm::Inf);
    }

    #[test]
    fn snr_values() {
        let x = [3.0f64, 4.0];
        assert!((snr(&x, &[0.3, 0.4]) - 20.0).abs() < 1e-12);
        assert!(snr(&x, &[3.0, 4.0]).abs() < 1e-12);
        assert_eq!(snr(&x, &[0.0, 0.0]), f64::INFINITY);
        // A 33 dB perturbation is about 2.2% of the signal norm.
        let ratio = 10f64.powf(-33.0 / 20.0);
        assert!((snr(&x, &[3.0 * ratio, 4.0 * ratio]) - 33.0).abs() < 1e-9);
        let x4 = [1.0f64, -2.0, 2.0, 4.0];
        let eps = epsilon_for_snr(5.0, 4, 20.0);
        assert!((snr(&x4, &[eps, -eps, eps, eps]) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn mixing_replaces_half_the_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = models::mlp(10, &[8], 4, 0.0).unwrap();
        let p = Params::<f64>::init(&g, Init::Gaussian, &mut rng).unwrap();
        let x = Matrix::<f64>::gaussian(128, 10, &mut rng);
        let batch = Batch::new(x, (0..128).map(|i| i % 4).collect()).unwrap();
        let mix = AdversarialMixing::default();
        let out = adversarial_batch_with_epsilon(&g, &p, &batch, &mix, 0.5, &mut rng).unwrap();
        let changed = (0..128).filter(|&i| out.inputs.row(i) != batch.inputs.row(i)).count();
        assert_eq!(changed, 64);
        assert_eq!(out.labels, batch.labels);

        let same = adversarial_batch_with_epsilon(&g, &p, &batch, &mix, 0.0, &mut rng).unwrap();
        assert_eq!(same, batch);

        for _ in 0..2000 {
            let e = mix.draw_epsilon(&mut rng);
            assert!((0.0..=4.0).contains(&e));
        }
        let single = Batch::new(Matrix::<f64>::zeros(1, 10), vec![0]).unwrap();
        assert!(adversarial_batch(&g, &p, &single, &mix, &mut rng).is_err());
    }

    #[test]
    fn chunked_attack_matches_across_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = models::mlp(10, &[8], 4, 0.0).unwrap();
        let p = Params::<f64>::init(&g, Init::Gaussian, &mut rng).unwrap();
        let x = Matrix::<f64>::gaussian(50, 10, &mut rng);
        let batch = Batch::new(x, (0..50).map(|i| i % 4).collect()).unwrap();
        let spec = AttackSpec::one_step(Norm::Inf, 0.1);
        let a = fgsm_chunked(&g, &p, &batch, &spec, 16, false).unwrap();
        let b = fgsm_chunked(&g, &p, &batch, &spec, 16, true).unwrap();
        assert_eq!(a.inputs, b.inputs);
        let whole = fgsm(&g, &p, &batch, &spec).unwrap();
        assert_eq!(a.inputs, whole.inputs);
    }
}
