//! `parseval`: train, evaluate, attack and analyse Parseval networks.
//!
//! Tabular output is CSV with a header row; `-` as an output path means
//! stdout.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use parseval::attacks::{fgsm_chunked, snr, AttackSpec, Norm};
use parseval::diagnostics::{local_cov_dim, spectrum_histogram};
use parseval::io::{load_checkpoint, load_config, load_dataset, save_checkpoint, Dataset};
use parseval::lipschitz::{empirical_gap_check, graph_bound, node_constant};
use parseval::netgraph::{forward, predict, Mode, NodeKind};
use parseval::trainer::{evaluate, robustness_curve, Trainer};
use parseval::{Batch, Checkpoint64, Error};

#[derive(Parser)]
#[command(name = "parseval", version, about = "Parseval networks: Lipschitz-controlled training and robustness analysis")]
struct Cli {
    /// Overrides the seed of the config or checkpoint.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded, fixed-order gradient reductions.
    #[arg(long, global = true)]
    reproducible: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; per-epoch metrics go to --metrics (default stdout).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "-")]
        metrics: PathBuf,
    },
    /// Clean accuracy on one split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long, default_value = "-")]
        out: PathBuf,
    },
    /// Per-example fast gradient sign attack.
    Attack {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_norm)]
        norm: Norm,
        #[arg(long)]
        eps: f64,
        #[arg(long, default_value_t = 1)]
        iters: usize,
        #[command(flatten)]
        common: AttackArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Lipschitz bounds, singular-value spectra or covariance dimension.
    Analyze {
        #[command(subcommand)]
        what: Analysis,
    },
    /// Accuracy and mean SNR under the one-step attack for several budgets.
    Curve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_norm, default_value = "inf")]
        norm: Norm,
        /// Comma-separated budgets.
        #[arg(long, value_delimiter = ',', required = true)]
        eps: Vec<f64>,
        #[command(flatten)]
        common: AttackArgs,
        #[arg(long, default_value = "-")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    /// Use only the first N examples.
    #[arg(long)]
    limit: Option<usize>,
    /// Valid input range, e.g. `0,1` for MNIST pixels.
    #[arg(long, value_parser = parse_range)]
    clamp: Option<(f64, f64)>,
}

#[derive(Subcommand)]
enum Analysis {
    /// Per-node Lipschitz constants and cumulative bounds; the root row holds
    /// the bound of the whole network.
    Lipschitz {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_parser = parse_norm, default_value = "l2")]
        norm: Norm,
        /// Also check the bound on one-step attacks of the first 1000 test
        /// examples (reported on stderr).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "-")]
        out: PathBuf,
    },
    /// Singular-value histogram of every weight matrix.
    Spectrum {
        #[arg(long)]
        model: PathBuf,
        /// Accepted for symmetry with covdim; the spectrum depends only on
        /// the weights.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long, default_value = "-")]
        out: PathBuf,
    },
    /// Local covariance dimension of every ReLU layer.
    Covdim {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.99)]
        threshold: f64,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value = "-")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

fn parse_norm(s: &str) -> Result<Norm, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected lo,hi")?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok((num(lo)?, num(hi)?))
}

fn output(path: &Path) -> Result<csv::Writer<Box<dyn Write>>> {
    let sink: Box<dyn Write> = if path.as_os_str() == "-" {
        Box::new(io::stdout().lock())
    } else {
        Box::new(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
    };
    Ok(csv::Writer::from_writer(sink))
}

fn float(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        v.to_string()
    }
}

struct Loaded {
    ck: Checkpoint64,
    data: Option<Dataset<f64>>,
}

fn load(cli: &Cli, model: &Path, data: Option<&Path>) -> Result<Loaded> {
    let mut ck: Checkpoint64 = load_checkpoint(model).with_context(|| format!("loading {}", model.display()))?;
    if let Some(seed) = cli.seed {
        ck.config.seed = seed;
    }
    let data = match data {
        // The split seed follows the training seed so "val" matches training.
        Some(dir) => Some(load_dataset(dir, ck.config.seed).with_context(|| format!("loading data from {}", dir.display()))?),
        None => None,
    };
    Ok(Loaded { ck, data })
}

fn pick(data: &Dataset<f64>, split: Split, limit: Option<usize>) -> Batch<f64> {
    let set = match split {
        Split::Train => &data.train,
        Split::Val => &data.val,
        Split::Test => &data.test,
    };
    match limit {
        Some(n) if n < set.len() => set.select(&(0..n).collect::<Vec<_>>()),
        _ => set.clone(),
    }
}

fn train(cli: &Cli, config: &Path, data_dir: &Path, out: &Path, metrics: &Path) -> Result<()> {
    let mut cfg = load_config(config).with_context(|| format!("reading {}", config.display()))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.reproducible |= cli.reproducible;
    let data: Dataset<f64> = load_dataset(data_dir, cfg.seed).with_context(|| format!("loading data from {}", data_dir.display()))?;
    let graph = cfg.build_graph(data.train.inputs.cols(), data.classes, Some(data.image))?;
    let mut trainer = Trainer::new(graph, cfg)?.with_image_shape(data.image);
    let mut w = output(metrics)?;
    w.write_record(["epoch", "train_loss", "val_acc", "mean_gap"])?;
    w.flush()?;
    let mut write_err = None;
    let result = trainer.train(&data.train, Some(&data.val), |m| {
        let row = [m.epoch.to_string(), float(m.train_loss), float(m.val_acc), float(m.mean_gap)];
        if let Err(e) = w.write_record(&row).and_then(|_| w.flush().map_err(Into::into)) {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(e.into());
    }
    match result {
        Ok(_) => {
            save_checkpoint(&trainer.checkpoint(), out)?;
            Ok(())
        }
        Err(e @ Error::Diverged { .. }) => {
            save_checkpoint(&trainer.checkpoint(), out)?;
            bail!("{e}; the last good epoch ({}) was saved to {}", trainer.epoch(), out.display())
        }
        Err(e) => Err(e.into()),
    }
}

fn attack(cli: &Cli, model: &Path, data: &Path, spec: AttackSpec, common: &AttackArgs, out: &Path) -> Result<()> {
    let Loaded { ck, data } = load(cli, model, Some(data))?;
    let set = pick(data.as_ref().expect("data requested"), common.split, common.limit);
    let adv = fgsm_chunked(&ck.graph, &ck.params, &set, &spec, 1000, !cli.reproducible)?;
    let clean = predict(&ck.graph, &ck.params, &set.inputs)?;
    let attacked = predict(&ck.graph, &ck.params, &adv.inputs)?;
    let mut w = output(out)?;
    w.write_record(["index", "label", "clean_pred", "adv_pred", "snr_db", "linf", "l2", "zero_gradient"])?;
    let mut delta = vec![0.0; set.inputs.cols()];
    let mut flagged = vec![false; set.len()];
    for &i in &adv.zero_gradient_rows {
        flagged[i] = true;
    }
    let mut correct = 0;
    for i in 0..set.len() {
        for ((d, a), x) in delta.iter_mut().zip(adv.inputs.row(i)).zip(set.inputs.row(i)) {
            *d = a - x;
        }
        correct += usize::from(attacked[i] == set.labels[i]);
        w.write_record([
            i.to_string(),
            set.labels[i].to_string(),
            clean[i].to_string(),
            attacked[i].to_string(),
            float(snr(set.inputs.row(i), &delta)),
            float(Norm::Inf.of(&delta)),
            float(Norm::L2.of(&delta)),
            flagged[i].to_string(),
        ])?;
    }
    w.flush()?;
    eprintln!(
        "adversarial accuracy {:.4} on {} examples ({} with zero gradient)",
        correct as f64 / set.len().max(1) as f64,
        set.len(),
        adv.zero_gradient_rows.len()
    );
    Ok(())
}

fn analyze(cli: &Cli, what: &Analysis) -> Result<()> {
    match what {
        Analysis::Lipschitz { model, norm, data, out } => {
            let Loaded { ck, data } = load(cli, model, data.as_deref())?;
            let report = graph_bound(&ck.graph, &ck.params, *norm)?;
            let mut w = output(out)?;
            w.write_record(["node", "kind", "constant", "bound", "is_root"])?;
            for &id in ck.graph.topo_order() {
                let kind = &ck.graph.node(id).kind;
                let constant = match kind {
                    NodeKind::Aggregate { .. } => String::new(),
                    _ => float(node_constant(&ck.graph, &ck.params, id, *norm)?),
                };
                w.write_record([
                    id.0.to_string(),
                    kind.name().to_string(),
                    constant,
                    float(report.per_node[id.0]),
                    (id == ck.graph.root()).to_string(),
                ])?;
            }
            w.flush()?;
            if let Some(data) = data {
                let set = pick(&data, Split::Test, Some(1000));
                let adv = fgsm_chunked(&ck.graph, &ck.params, &set, &AttackSpec::one_step(*norm, 0.1), 1000, false)?;
                let violations = empirical_gap_check(&ck.graph, &ck.params, &report, &set.inputs, &adv.inputs)?;
                eprintln!("bound {} checked on {} attacked examples: {violations} violations", float(report.root), set.len());
            }
        }
        Analysis::Spectrum { model, bins, out, .. } => {
            let Loaded { ck, .. } = load(cli, model, None)?;
            let mut w = output(out)?;
            w.write_record(["node", "kind", "output_layer", "bin", "lower", "upper", "count", "min", "max", "mean"])?;
            for &id in ck.graph.topo_order() {
                let spec = ck.graph.node(id);
                if !spec.kind.is_parametric() {
                    continue;
                }
                let h = spectrum_histogram(&ck.params, id, *bins)?;
                for (b, &count) in h.counts.iter().enumerate() {
                    w.write_record([
                        id.0.to_string(),
                        spec.kind.name().to_string(),
                        ck.graph.is_output_layer(id).to_string(),
                        b.to_string(),
                        float(h.edges[b]),
                        float(h.edges[b + 1]),
                        count.to_string(),
                        float(h.min),
                        float(h.max),
                        float(h.mean),
                    ])?;
                }
            }
            w.flush()?;
        }
        Analysis::Covdim { model, data, threshold, split, limit, out } => {
            let Loaded { ck, data } = load(cli, model, Some(data))?;
            let set = pick(data.as_ref().expect("data requested"), *split, *limit);
            let trace = forward(&ck.graph, &ck.params, &set.inputs, Mode::Eval)?;
            let mut w = output(out)?;
            w.write_record(["layer", "node", "dim", "covdim", "fraction", "per_class_mean", "skipped_classes"])?;
            for (layer, id) in ck.graph.relu_nodes().into_iter().enumerate() {
                let r = local_cov_dim(trace.output(id), *threshold, Some(&set.labels))?;
                let skipped: Vec<String> = r.skipped.iter().map(|c| c.to_string()).collect();
                w.write_record([
                    (layer + 1).to_string(),
                    id.0.to_string(),
                    r.dim.to_string(),
                    r.overall.to_string(),
                    float(r.fraction()),
                    r.per_class_mean.map(float).unwrap_or_default(),
                    skipped.join(" "),
                ])?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train { config, data, out, metrics } => train(cli, config, data, out, metrics),
        Command::Eval { model, data, split, out } => {
            let Loaded { ck, data } = load(cli, model, Some(data))?;
            let set = pick(data.as_ref().expect("data requested"), *split, None);
            let acc = evaluate(&ck.graph, &ck.params, &set)?;
            let mut w = output(out)?;
            w.write_record(["examples", "accuracy"])?;
            w.write_record([set.len().to_string(), float(acc)])?;
            w.flush()?;
            Ok(())
        }
        Command::Attack { model, data, norm, eps, iters, common, out } => {
            if *iters == 0 {
                bail!("--iters must be at least 1");
            }
            let base = if *iters == 1 {
                AttackSpec::one_step(*norm, *eps)
            } else {
                AttackSpec::iterative(*norm, *eps, *iters)
            };
            let spec = AttackSpec { clamp: common.clamp, ..base };
            attack(cli, model, data, spec, common, out)
        }
        Command::Analyze { what } => analyze(cli, what),
        Command::Curve { model, data, norm, eps, common, out } => {
            let Loaded { ck, data } = load(cli, model, Some(data))?;
            let set = pick(data.as_ref().expect("data requested"), common.split, common.limit);
            let curve = robustness_curve(&ck.graph, &ck.params, &set, eps, *norm, common.clamp)?;
            let mut w = output(out)?;
            w.write_record(["epsilon", "mean_snr_db", "accuracy"])?;
            for p in curve {
                w.write_record([float(p.epsilon), float(p.mean_snr), float(p.accuracy)])?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
