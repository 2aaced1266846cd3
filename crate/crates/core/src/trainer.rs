//! Momentum SGD with interleaved constraint steps.
//!
//! Each minibatch step runs, in order: optional adversarial mixing, forward and
//! backward passes, the momentum update `v ← μv − lr·g`, `θ ← θ + v` on every
//! learnable scalar, the retraction on a sampled row subset of every hidden
//! layer (skipped entirely when `β = 0`), and the simplex projection of every
//! convex aggregation vector. Sum aggregations keep their unit weights.
//!
//! RNG protocol, all from one `ChaCha8Rng` seeded with `config.seed`:
//! parameter init, then per epoch one Fisher-Yates shuffle of the example
//! indices, then per step (mixing budget and rows, dropout masks in forward
//! order, row subsets in topological order).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attacks::{adversarial_batch, fgsm_chunked, snr, AdversarialMixing, AttackSpec, Norm};
use crate::constraints::{parseval_gap, retraction_step, sample_row_subset, simplex_project};
use crate::error::{Error, Result};
use crate::io::{augment, ImageShape};
use crate::netgraph::{
    backward, forward, models, predict, AggregateMode, Batch, Graph, Gradients, Init, Mode, NodeKind, NodeParams,
    Params,
};
use crate::scalar::Real;

/// Rows per task when gradients are split across threads.
pub const PARALLEL_CHUNK: usize = 32;
/// Rows per forward pass in evaluation.
pub const EVAL_CHUNK: usize = 1000;

/// Network family built by [`TrainConfig::build_graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// Dense ReLU layers of widths `hidden`.
    Mlp,
    /// Stem of width `hidden[0]` followed by `blocks` aggregation blocks.
    Residual,
    /// 3×3 convolutions with `hidden` output channels each.
    Conv,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Mlp => "mlp",
            Architecture::Residual => "residual",
            Architecture::Conv => "conv",
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Architecture::Mlp),
            "residual" => Ok(Architecture::Residual),
            "conv" => Ok(Architecture::Conv),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

/// Every hyperparameter of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// `(epoch, multiplier)` pairs with strictly increasing epochs. From epoch
    /// `e` (0-based) on, the rate is multiplied by every multiplier whose
    /// epoch is `≤ e`.
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    /// Retraction strength; 0 disables the retraction.
    pub beta: f64,
    /// Fraction of rows retracted per step in dense layers.
    pub row_fraction: f64,
    /// Same for convolutions.
    pub conv_row_fraction: f64,
    /// L2 penalty on output-layer weights.
    pub weight_decay: f64,
    /// Decay every layer instead of only the output layers.
    pub decay_all_layers: bool,
    pub dropout: f64,
    pub architecture: Architecture,
    pub hidden: Vec<usize>,
    pub blocks: usize,
    pub aggregate: AggregateMode,
    pub init: Init,
    /// Replace half of each minibatch with one-step adversarial examples.
    pub adversarial: bool,
    /// Standard deviation of the adversarial budget distribution.
    pub adv_sigma: f64,
    /// Random pad-and-crop plus flip on image inputs.
    pub augment: bool,
    /// Use only the first `train_subset` training examples; 0 means all.
    pub train_subset: usize,
    pub seed: u64,
    /// Single-threaded gradients in a fixed reduction order.
    pub reproducible: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::mlp_defaults()
    }
}

impl TrainConfig {
    /// MLP protocol: batch 100, 50 epochs, rate halved every 10 epochs, 30%
    /// of rows retracted per step.
    pub fn mlp_defaults() -> Self {
        Self {
            epochs: 50,
            batch_size: 100,
            learning_rate: 0.01,
            lr_schedule: vec![(10, 0.5), (20, 0.5), (30, 0.5), (40, 0.5)],
            momentum: 0.9,
            beta: 0.001,
            row_fraction: 0.3,
            conv_row_fraction: 1.0,
            weight_decay: 0.0,
            decay_all_layers: false,
            dropout: 0.0,
            architecture: Architecture::Mlp,
            hidden: vec![256, 256],
            blocks: 0,
            aggregate: AggregateMode::Convex,
            init: Init::Parseval,
            adversarial: false,
            adv_sigma: 2.0,
            augment: false,
            train_subset: 0,
            seed: 0,
            reproducible: true,
        }
    }

    /// Convolutional protocol: momentum 0.9, rate 0.1 scaled by 0.2 at epochs
    /// 60, 120 and 160 of 200, batch 128, `β = 0.0003`, weight decay 0.0005.
    pub fn conv_defaults() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            learning_rate: 0.1,
            lr_schedule: vec![(60, 0.2), (120, 0.2), (160, 0.2)],
            momentum: 0.9,
            beta: 0.0003,
            row_fraction: 0.3,
            conv_row_fraction: 1.0,
            weight_decay: 0.0005,
            architecture: Architecture::Conv,
            hidden: vec![16, 32],
            augment: true,
            ..Self::mlp_defaults()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("momentum", self.momentum),
            ("beta", self.beta),
            ("weight_decay", self.weight_decay),
            ("dropout", self.dropout),
            ("adv_sigma", self.adv_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite nonnegative number, got {v}"));
            }
        }
        if self.beta >= 1.0 || self.momentum >= 1.0 || self.dropout >= 1.0 {
            return bad("beta, momentum and dropout must be below 1".into());
        }
        for (name, f) in [("row_fraction", self.row_fraction), ("conv_row_fraction", self.conv_row_fraction)] {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("{name} must lie in (0, 1], got {f}"));
            }
        }
        let mut last = None;
        for &(e, m) in &self.lr_schedule {
            if last.is_some_and(|l| e <= l) {
                return bad("lr_schedule epochs must be strictly increasing".into());
            }
            if !(m >= 0.0 && m.is_finite()) {
                return bad(format!("lr_schedule multiplier {m} is invalid"));
            }
            last = Some(e);
        }
        if self.hidden.is_empty() && self.architecture != Architecture::Mlp {
            return bad(format!("{} needs at least one hidden width", self.architecture.name()));
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        Ok(())
    }

    /// Learning rate during `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|&&(e, _)| e <= epoch)
            .fold(self.learning_rate, |lr, &(_, m)| lr * m)
    }

    pub fn mixing(&self) -> AdversarialMixing {
        AdversarialMixing {
            sigma: self.adv_sigma,
            ..AdversarialMixing::default()
        }
    }

    /// The network described by this config. Convolutional models need the
    /// image shape.
    pub fn build_graph(&self, input_dim: usize, classes: usize, image: Option<ImageShape>) -> Result<Graph> {
        match self.architecture {
            Architecture::Mlp => models::mlp(input_dim, &self.hidden, classes, self.dropout),
            Architecture::Residual => {
                models::residual_mlp(input_dim, self.hidden[0], self.blocks, classes, self.aggregate, self.dropout)
            }
            Architecture::Conv => {
                let s = image.ok_or_else(|| Error::Config("conv architecture needs image-shaped data".into()))?;
                if s.len() != input_dim {
                    return Err(Error::Config(format!("image shape {s:?} does not match input width {input_dim}")));
                }
                models::conv_net(s.height, s.width, s.channels, &self.hidden, classes, self.dropout)
            }
        }
    }
}

/// Serialisable state of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub graph: Graph,
    pub params: Params<T>,
    /// Momentum buffers, same layout as `params`.
    pub velocity: Params<T>,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngState,
}

/// Metrics of one finished epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Mean minibatch loss (on the mixed batches in adversarial mode).
    pub train_loss: f64,
    /// NaN without a validation set.
    pub val_acc: f64,
    /// Mean Frobenius distance to a tight frame over hidden layers.
    pub mean_gap: f64,
}

/// A training run in progress.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    graph: Graph,
    params: Params<T>,
    velocity: Params<T>,
    config: TrainConfig,
    epoch: usize,
    rng: ChaCha8Rng,
    image: Option<ImageShape>,
    hidden: Vec<bool>,
    decayed: Vec<bool>,
}

impl<T: Real> Trainer<T> {
    /// Seeds the RNG and initialises parameters.
    pub fn new(graph: Graph, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = Params::init(&graph, config.init, &mut rng)?;
        let velocity = params.zeros_like();
        Ok(Self::assemble(graph, params, velocity, config, 0, rng))
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<Self> {
        ck.config.validate()?;
        ck.params.check(&ck.graph)?;
        ck.velocity.check(&ck.graph)?;
        let rng = ck.rng.restore();
        Ok(Self::assemble(ck.graph, ck.params, ck.velocity, ck.config, ck.epoch, rng))
    }

    fn assemble(graph: Graph, params: Params<T>, velocity: Params<T>, config: TrainConfig, epoch: usize, rng: ChaCha8Rng) -> Self {
        let mut hidden = vec![false; graph.len()];
        for id in graph.hidden_layers() {
            hidden[id.0] = true;
        }
        let decayed = graph
            .nodes()
            .iter()
            .map(|n| n.kind.is_parametric() && (config.decay_all_layers || graph.is_output_layer(n.id)))
            .collect();
        Self {
            graph,
            params,
            velocity,
            config,
            epoch,
            rng,
            image: None,
            hidden,
            decayed,
        }
    }

    /// Enables augmentation for image inputs of this shape when the config
    /// asks for it.
    pub fn with_image_shape(mut self, shape: ImageShape) -> Self {
        self.image = Some(shape);
        self
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            graph: self.graph.clone(),
            params: self.params.clone(),
            velocity: self.velocity.clone(),
            config: self.config.clone(),
            epoch: self.epoch,
            rng: RngState::capture(&self.rng),
        }
    }

    fn gradients(&mut self, batch: &Batch<T>) -> Result<Gradients<T>> {
        let n = batch.len();
        if self.config.reproducible || n < 2 * PARALLEL_CHUNK {
            let trace = forward(&self.graph, &self.params, &batch.inputs, Mode::Train(&mut self.rng))?;
            return backward(&self.graph, &self.params, &trace, &batch.labels, false);
        }
        let chunks: Vec<(Vec<usize>, u64)> = (0..n)
            .collect::<Vec<_>>()
            .chunks(PARALLEL_CHUNK)
            .map(|c| (c.to_vec(), self.rng.random()))
            .collect();
        let (graph, params) = (&self.graph, &self.params);
        let parts = chunks
            .par_iter()
            .map(|(rows, seed)| {
                let sub = batch.select(rows);
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let trace = forward(graph, params, &sub.inputs, Mode::Train(&mut rng))?;
                backward(graph, params, &trace, &sub.labels, false).map(|g| (rows.len(), g))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total = params.zeros_like();
        let mut loss = T::zero();
        for (len, g) in parts {
            let w = T::of(len as f64 / n as f64);
            total.zip_scalars_mut(&g.params, |a, b| *a += w * b);
            loss += w * g.loss;
        }
        Ok(Gradients {
            params: total,
            input: None,
            loss,
        })
    }

    /// One optimizer step on `batch`; returns the minibatch loss.
    pub fn step(&mut self, batch: &Batch<T>, lr: f64) -> Result<T> {
        let mixed;
        let batch = if self.config.adversarial && batch.len() >= 2 {
            mixed = adversarial_batch(&self.graph, &self.params, batch, &self.config.mixing(), &mut self.rng)?.0;
            &mixed
        } else {
            batch
        };
        let grads = self.gradients(batch)?;
        let (mu, lr, wd) = (T::of(self.config.momentum), T::of(lr), T::of(self.config.weight_decay));

        for spec in self.graph.nodes() {
            let i = spec.id.0;
            match (&mut self.params.nodes_mut()[i], &grads.params.nodes()[i]) {
                (NodeParams::Affine { weight, bias }, NodeParams::Affine { weight: gw, bias: gb }) => {
                    let v = match &mut self.velocity.nodes_mut()[i] {
                        NodeParams::Affine { weight, bias } => (weight, bias),
                        _ => unreachable!("velocity shares the parameter layout"),
                    };
                    let decay = self.decayed[i] && self.config.weight_decay > 0.0;
                    for ((w, &g), vw) in weight.as_mut_slice().iter_mut().zip(gw.as_slice()).zip(v.0.as_mut_slice()) {
                        let g = if decay { g + wd * *w } else { g };
                        *vw = mu * *vw - lr * g;
                        *w += *vw;
                    }
                    for ((b, &g), vb) in bias.iter_mut().zip(gb).zip(v.1.iter_mut()) {
                        *vb = mu * *vb - lr * g;
                        *b += *vb;
                    }
                }
                (NodeParams::Mix { alpha }, NodeParams::Mix { alpha: ga }) => {
                    if matches!(spec.kind, NodeKind::Aggregate { mode: AggregateMode::Sum, .. }) {
                        continue;
                    }
                    let NodeParams::Mix { alpha: va } = &mut self.velocity.nodes_mut()[i] else {
                        unreachable!("velocity shares the parameter layout")
                    };
                    for ((a, &g), v) in alpha.iter_mut().zip(ga).zip(va.iter_mut()) {
                        *v = mu * *v - lr * g;
                        *a += *v;
                    }
                }
                _ => {}
            }
        }

        for &id in self.graph.topo_order() {
            let spec = self.graph.node(id);
            if self.hidden[id.0] && self.config.beta > 0.0 {
                let fraction = if spec.kind.is_conv() {
                    self.config.conv_row_fraction
                } else {
                    self.config.row_fraction
                };
                let w = self.params.weight_mut(id).expect("hidden layers are affine");
                let (r, c) = w.shape();
                let subset = sample_row_subset(r.min(c), fraction, &mut self.rng)?;
                let full = subset.len() == r.min(c);
                *w = retraction_step(w, self.config.beta, if full { None } else { Some(&subset) })?;
            }
            if let NodeKind::Aggregate { mode: AggregateMode::Convex, .. } = spec.kind {
                let a = self.params.alpha_mut(id).expect("aggregates carry weights");
                *a = simplex_project(a)?;
            }
        }
        Ok(grads.loss)
    }

    /// Runs one epoch over `train`; returns the mean minibatch loss.
    pub fn run_epoch(&mut self, train: &Batch<T>) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let n = match self.config.train_subset {
            0 => train.len(),
            k => k.min(train.len()),
        };
        let lr = self.config.learning_rate_at(self.epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for (step, rows) in order.chunks(self.config.batch_size).enumerate() {
            let mut batch = train.select(rows);
            if let (true, Some(shape)) = (self.config.augment, self.image) {
                for r in 0..batch.len() {
                    let out = augment(batch.inputs.row(r), shape, &mut self.rng)?;
                    batch.inputs.row_mut(r).copy_from_slice(&out);
                }
            }
            let loss = self.step(&batch, lr)?.as_f64();
            if !loss.is_finite() || !params_finite(&self.params) {
                return Err(Error::Diverged {
                    epoch: self.epoch + 1,
                    step,
                    loss,
                });
            }
            total += loss * rows.len() as f64;
        }
        self.epoch += 1;
        Ok(total / n as f64)
    }

    /// Trains until `config.epochs` epochs are complete, calling `on_epoch`
    /// after each. On divergence the trainer is rolled back to the end of the
    /// last good epoch before the error is returned.
    pub fn train(
        &mut self,
        train: &Batch<T>,
        val: Option<&Batch<T>>,
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<Vec<EpochMetrics>> {
        let mut history = Vec::new();
        while self.epoch < self.config.epochs {
            let good = self.checkpoint();
            let train_loss = match self.run_epoch(train) {
                Ok(l) => l,
                Err(e) => {
                    if matches!(e, Error::Diverged { .. }) {
                        *self = Self::from_checkpoint(good)?.with_image(self.image);
                    }
                    return Err(e);
                }
            };
            let metrics = EpochMetrics {
                epoch: self.epoch,
                train_loss,
                val_acc: match val {
                    Some(v) => evaluate(&self.graph, &self.params, v)?,
                    None => f64::NAN,
                },
                mean_gap: mean_parseval_gap(&self.graph, &self.params)?,
            };
            on_epoch(&metrics);
            history.push(metrics);
        }
        Ok(history)
    }

    fn with_image(mut self, image: Option<ImageShape>) -> Self {
        self.image = image;
        self
    }
}

fn params_finite<T: Real>(p: &Params<T>) -> bool {
    p.nodes().iter().all(|n| match n {
        NodeParams::None => true,
        NodeParams::Affine { weight, bias } => weight.all_finite() && bias.iter().all(|b| b.is_finite()),
        NodeParams::Mix { alpha } => alpha.iter().all(|a| a.is_finite()),
    })
}

/// Builds a trainer from `config` and runs it to completion.
pub fn train<T: Real>(
    graph: Graph,
    config: TrainConfig,
    train: &Batch<T>,
    val: Option<&Batch<T>>,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(Checkpoint<T>, Vec<EpochMetrics>)> {
    let mut trainer = Trainer::new(graph, config)?;
    let history = trainer.train(train, val, on_epoch)?;
    Ok((trainer.checkpoint(), history))
}

/// Fraction of correctly classified examples; 0 for an empty set.
pub fn evaluate<T: Real>(graph: &Graph, params: &Params<T>, data: &Batch<T>) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let rows: Vec<usize> = (start..(start + EVAL_CHUNK).min(data.len())).collect();
        let chunk = data.select(&rows);
        let pred = predict(graph, params, &chunk.inputs)?;
        correct += pred.iter().zip(&chunk.labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mean `‖WWᵀ − I‖_F` over hidden layers (0 when there are none).
pub fn mean_parseval_gap<T: Real>(graph: &Graph, params: &Params<T>) -> Result<f64> {
    let hidden = graph.hidden_layers();
    if hidden.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for id in &hidden {
        total += parseval_gap(params.weight(*id).expect("hidden layers are affine"))?.as_f64();
    }
    Ok(total / hidden.len() as f64)
}

/// One point of a robustness curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub epsilon: f64,
    /// Mean SNR in dB over perturbed examples; `+inf` when nothing moved.
    pub mean_snr: f64,
    pub accuracy: f64,
}

/// Accuracy under the one-step attack at each budget.
pub fn robustness_curve<T: Real>(
    graph: &Graph,
    params: &Params<T>,
    data: &Batch<T>,
    epsilons: &[f64],
    norm: Norm,
    clamp: Option<(f64, f64)>,
) -> Result<Vec<CurvePoint>> {
    let mut out = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        if eps == 0.0 {
            out.push(CurvePoint {
                epsilon: 0.0,
                mean_snr: f64::INFINITY,
                accuracy: evaluate(graph, params, data)?,
            });
            continue;
        }
        let spec = AttackSpec { clamp, ..AttackSpec::one_step(norm, eps) };
        let adv = fgsm_chunked(graph, params, data, &spec, EVAL_CHUNK, false)?;
        let (mut sum, mut count) = (0.0, 0usize);
        let mut delta = vec![T::zero(); data.inputs.cols()];
        for i in 0..data.len() {
            for ((d, &a), &x) in delta.iter_mut().zip(adv.inputs.row(i)).zip(data.inputs.row(i)) {
                *d = a - x;
            }
            let s = snr(data.inputs.row(i), &delta);
            if s.is_finite() {
                sum += s;
                count += 1;
            }
        }
        let attacked = Batch::new(adv.inputs, data.labels.clone())?;
        out.push(CurvePoint {
            epsilon: eps,
            mean_snr: if count == 0 { f64::INFINITY } else { sum / count as f64 },
            accuracy: evaluate(graph, params, &attacked)?,
        });
    }
    Ok(out)
}
