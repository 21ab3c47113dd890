//! Command-line front end: train, certify, attack, transfer.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use patchcert::attack::{
    empirical_adversarial_accuracy, tune_lgs, AttackConfig, LgsParams, LocationSet,
};
use patchcert::certify::{certified_accuracy, CertOptions};
use patchcert::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, Model};
use patchcert::config::{Strategy, TrainConfig};
use patchcert::data::{load_dataset, Dataset, DatasetKind, Split};
use patchcert::network::{build_architecture, Network};
use patchcert::report;
use patchcert::tensor::Tensor;
use patchcert::threat::{make_shape, rectangle_menu, ShapeKind, ShapeMask, ThreatModel};
use patchcert::train::train;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "patchcert",
    about = "Certified defenses against adversarial patch and sparse attacks"
)]
struct Cli {
    /// Directory holding dataset files (MNIST IDX / CIFAR-10 binary batches)
    #[arg(long, default_value = "data", global = true)]
    data_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Mnist,
    Cifar10,
}

impl DatasetArg {
    fn kind(self) -> DatasetKind {
        match self {
            DatasetArg::Mnist => DatasetKind::Mnist,
            DatasetArg::Cifar10 => DatasetKind::Cifar10,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    All,
    Random,
    Guided,
    Pooled,
}

#[derive(Clone, Copy, ValueEnum)]
enum ShapeArg {
    Square,
    Rectangle,
    Line,
    Diamond,
    Parallelogram,
}

impl ShapeArg {
    fn kind(self) -> ShapeKind {
        match self {
            ShapeArg::Square => ShapeKind::Square,
            ShapeArg::Rectangle => ShapeKind::Rectangle,
            ShapeArg::Line => ShapeKind::Line,
            ShapeArg::Diamond => ShapeKind::Diamond,
            ShapeArg::Parallelogram => ShapeKind::Parallelogram,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LocationsArg {
    All,
    Corners,
}

#[derive(Subcommand)]
enum Command {
    /// Certificate-train a model
    Train(TrainArgs),
    /// Certify a checkpoint by exhaustive placement sweep or sparse bounds
    Certify(CertifyArgs),
    /// Attack a checkpoint with masked IFGSM
    Attack(AttackArgs),
    /// Certify a checkpoint against every shape of a pixel budget
    Transfer(TransferArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    dataset: DatasetArg,
    #[arg(long)]
    arch: String,
    #[arg(long, value_enum)]
    strategy: StrategyArg,
    /// Placements used per step by random/guided strategies
    #[arg(long, default_value_t = 10)]
    patches: usize,
    #[arg(long, default_value_t = 2)]
    patch_size: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Adjacent anchor blocks pooled together (pooled strategy), e.g. 2x2
    #[arg(long)]
    pool_groups: Option<String>,
    /// Train against a sparse-k adversary instead of a patch
    #[arg(long)]
    sparse: Option<usize>,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// Cap the number of training images (0 = all)
    #[arg(long, default_value_t = 0)]
    limit: usize,
    /// Epochs between certified-accuracy samples in the log (0 = off)
    #[arg(long, default_value_t = 0)]
    cert_every: usize,
    #[arg(long, default_value_t = 200)]
    cert_sample: usize,
    /// Held-out test images used for the per-epoch clean accuracy
    #[arg(long, default_value_t = 1000)]
    eval_sample: usize,
    /// Guided softmax temperature
    #[arg(long, default_value_t = 1.0)]
    temperature: f32,
    /// Read a key=value config file first; explicit flags override it
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct CertifyArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum)]
    dataset: DatasetArg,
    #[arg(long, default_value_t = 2)]
    patch_size: usize,
    #[arg(long, value_enum)]
    shape: Option<ShapeArg>,
    /// Pixel budget for --shape (4, 16 or 25)
    #[arg(long)]
    pixels: Option<usize>,
    #[arg(long)]
    sparse: Option<usize>,
    /// Certify only the first N test images (0 = all)
    #[arg(long, default_value_t = 0)]
    limit: usize,
    /// Draw the --limit sample with this seed instead of taking the head
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum)]
    dataset: DatasetArg,
    #[arg(long, default_value_t = 2)]
    patch_size: usize,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 0.05)]
    step_size: f32,
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    /// Inference-time defense: "lgs" or omitted
    #[arg(long)]
    defense: Option<String>,
    #[arg(long, default_value_t = 4.0)]
    lgs_lambda: f32,
    #[arg(long, default_value_t = 4)]
    lgs_window: usize,
    #[arg(long, default_value_t = 0.1)]
    lgs_threshold: f32,
    /// Grid-search LGS parameters on the sample before attacking
    #[arg(long, default_value_t = false)]
    lgs_tune: bool,
    /// Take gradients through the defense (BPDA-style)
    #[arg(long, default_value_t = false)]
    defense_aware: bool,
    #[arg(long, value_enum, default_value_t = LocationsArg::All)]
    locations: LocationsArg,
    /// Subsample placements by this stride
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value_t = 0)]
    limit: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    pixels: usize,
    #[arg(long, default_value_t = 0)]
    limit: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    report: PathBuf,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(args) => cmd_train(&cli.data_dir, args),
        Command::Certify(args) => cmd_certify(&cli.data_dir, args),
        Command::Attack(args) => cmd_attack(&cli.data_dir, args),
        Command::Transfer(args) => cmd_transfer(&cli.data_dir, args),
    }
}

fn take_or_sample(ds: &Dataset, limit: usize, seed: Option<u64>) -> Result<(Tensor, Vec<usize>)> {
    let n = if limit == 0 { ds.len() } else { limit };
    let out = match seed {
        Some(s) => ds.sample(n, s).map_err(|e| anyhow!("{e}"))?,
        None => ds.take(n).map_err(|e| anyhow!("{e}"))?,
    };
    Ok(out)
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// Every run records how it was invoked and what it produced, so any number
/// in a report can be reproduced from the manifest alone.
fn write_manifest(target: &Path, lines: &[(String, String)]) -> Result<()> {
    let mut name = target.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest");
    let path = target.with_file_name(name);
    let mut f = BufWriter::new(File::create(&path)?);
    for (k, v) in lines {
        writeln!(f, "{k} = {v}")?;
    }
    Ok(())
}

fn cmd_train(data_dir: &Path, args: TrainArgs) -> Result<()> {
    let kind = args.dataset.kind();
    let channels = kind.channels();
    let (h, w) = kind.dims();

    let mut config = if let Some(path) = &args.config {
        TrainConfig::from_file(path).map_err(|e| anyhow!("{e}"))?
    } else {
        let threat = match args.sparse {
            Some(k) => ThreatModel::sparse(k, channels),
            None => ThreatModel::patch(
                ShapeMask::square(args.patch_size).map_err(|e| anyhow!("{e}"))?,
                channels,
            ),
        };
        let strategy = match args.strategy {
            StrategyArg::All => Strategy::All,
            StrategyArg::Random => Strategy::Random {
                count: args.patches,
            },
            StrategyArg::Guided => Strategy::Guided {
                count: args.patches,
            },
            StrategyArg::Pooled => {
                let spec = args.pool_groups.as_deref().unwrap_or("2x2");
                let (a, b) = spec
                    .split_once('x')
                    .ok_or_else(|| anyhow!("--pool-groups wants GxG, got '{spec}'"))?;
                Strategy::Pooled {
                    group: (a.parse()?, b.parse()?),
                }
            }
        };
        match kind {
            DatasetKind::Mnist => TrainConfig::mnist_defaults(strategy, threat),
            DatasetKind::Cifar10 => TrainConfig::cifar_defaults(strategy, threat),
        }
    };
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(wu) = args.warmup {
        config.warmup_epochs = wu;
    }
    if let Some(lr) = args.lr {
        config.lr = lr;
    }
    config.seed = args.seed;
    config.batch_size = args.batch_size;
    config.cert_every = args.cert_every;
    config.cert_sample = args.cert_sample;
    config.temperature = args.temperature;

    let train_ds = load_dataset(kind, data_dir, Split::Train).with_context(|| {
        format!(
            "loading {kind} train split from {} (see README for dataset setup)",
            data_dir.display()
        )
    })?;
    let test_ds = load_dataset(kind, data_dir, Split::Test).map_err(|e| anyhow!("{e}"))?;
    eprintln!(
        "loaded {} train / {} test images (first-image checksum {:08x})",
        train_ds.len(),
        test_ds.len(),
        train_ds.first_image_checksum
    );

    let (train_images, train_labels) = if args.limit > 0 {
        train_ds.take(args.limit).map_err(|e| anyhow!("{e}"))?
    } else {
        (train_ds.images.clone(), train_ds.labels.clone())
    };
    let (eval_images, eval_labels) = test_ds
        .take(args.eval_sample)
        .map_err(|e| anyhow!("{e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = build_architecture(&args.arch, channels, h, w, train_ds.label_count(), &mut rng)
        .map_err(|e| anyhow!("{e}"))?;
    eprintln!(
        "training {} ({} parameters) with strategy {} for {} epochs",
        args.arch,
        net.param_count(),
        config.strategy.name(),
        config.epochs
    );

    let outcome = train(
        &mut net,
        &train_images,
        &train_labels,
        &eval_images,
        &eval_labels,
        &config,
    )
    .map_err(|e| anyhow!("{e}"))?;
    for warning in &outcome.warnings {
        eprintln!("warning: {warning}");
    }

    let log_path = args.out.with_extension("log");
    report::write_metrics(BufWriter::new(File::create(&log_path)?), &outcome.metrics)
        .map_err(|e| anyhow!("{e}"))?;

    let mut meta = CheckpointMeta::new();
    meta.push("dataset", kind);
    meta.push("arch", &args.arch);
    meta.push("strategy", config.strategy.name());
    meta.push("epochs", config.epochs);
    meta.push("warmup", config.warmup_epochs);
    meta.push("lr", config.lr);
    meta.push("seed", config.seed);
    meta.push("batch_size", config.batch_size);
    if let Some(k) = args.sparse {
        meta.push("sparse", k);
    } else {
        meta.push("patch_size", args.patch_size);
    }
    if let Some(m) = outcome.metrics.last() {
        meta.push("final_eps", m.eps);
        meta.push("final_clean_acc", format!("{:.4}", m.clean_acc));
    }
    save_checkpoint(&Model::Classifier(net), &meta, &args.out).map_err(|e| anyhow!("{e}"))?;
    if let Some(pred) = outcome.predictor {
        let pred_path = args.out.with_extension("predictor");
        save_checkpoint(&Model::Predictor(pred), &meta, &pred_path)
            .map_err(|e| anyhow!("{e}"))?;
    }

    let mut manifest = vec![
        ("command".to_string(), "train".to_string()),
        ("dataset".to_string(), kind.to_string()),
        ("arch".to_string(), args.arch.clone()),
        ("strategy".to_string(), config.strategy.name().to_string()),
        ("epochs".to_string(), config.epochs.to_string()),
        ("warmup".to_string(), config.warmup_epochs.to_string()),
        ("lr".to_string(), config.lr.to_string()),
        ("batch_size".to_string(), config.batch_size.to_string()),
        ("seed".to_string(), config.seed.to_string()),
        ("checkpoint".to_string(), args.out.display().to_string()),
        ("checkpoint_sha256".to_string(), sha256_hex(&args.out)?),
        ("metrics_log".to_string(), log_path.display().to_string()),
    ];
    if let Some(m) = outcome.metrics.last() {
        manifest.push(("final_clean_acc".to_string(), format!("{:.4}", m.clean_acc)));
        if let Some(c) = m.cert_acc {
            manifest.push(("final_cert_acc_sample".to_string(), format!("{c:.4}")));
        }
    }
    write_manifest(&args.out, &manifest)?;
    if let Some(m) = outcome.metrics.last() {
        println!(
            "done: clean accuracy {:.4} (checkpoint {})",
            m.clean_acc,
            args.out.display()
        );
    }
    Ok(())
}

fn load_classifier(path: &Path) -> Result<(Network, CheckpointMeta)> {
    let (model, meta) = load_checkpoint(path).map_err(|e| anyhow!("{e}"))?;
    match model {
        Model::Classifier(net) => Ok((net, meta)),
        Model::Predictor(_) => bail!(
            "{} holds a margin predictor, not a classifier",
            path.display()
        ),
    }
}

fn cmd_certify(data_dir: &Path, args: CertifyArgs) -> Result<()> {
    let (net, _) = load_classifier(&args.ckpt)?;
    let kind = args.dataset.kind();
    let ds = load_dataset(kind, data_dir, Split::Test).map_err(|e| anyhow!("{e}"))?;
    let (images, labels) = take_or_sample(&ds, args.limit, args.seed)?;

    let threat = match args.sparse {
        Some(k) => ThreatModel::sparse(k, kind.channels()),
        None => {
            let mask = match (args.shape, args.pixels) {
                (Some(shape), Some(pixels)) => {
                    make_shape(shape.kind(), pixels).map_err(|e| anyhow!("{e}"))?
                }
                (Some(shape), None) => bail!("--shape {:?} needs --pixels", shape.kind()),
                _ => ShapeMask::square(args.patch_size).map_err(|e| anyhow!("{e}"))?,
            };
            ThreatModel::patch(mask, kind.channels())
        }
    };

    let summary = certified_accuracy(&net, &images, &labels, &threat, &CertOptions::default())
        .map_err(|e| anyhow!("{e}"))?;
    report::write_cert_report(BufWriter::new(File::create(&args.report)?), &summary)
        .map_err(|e| anyhow!("{e}"))?;
    write_manifest(
        &args.report,
        &[
            ("command".to_string(), "certify".to_string()),
            ("ckpt".to_string(), args.ckpt.display().to_string()),
            ("ckpt_sha256".to_string(), sha256_hex(&args.ckpt)?),
            ("dataset".to_string(), kind.to_string()),
            ("images".to_string(), labels.len().to_string()),
            ("seed".to_string(), format!("{:?}", args.seed)),
            ("sparse".to_string(), format!("{:?}", args.sparse)),
        ],
    )?;
    println!(
        "clean accuracy {:.4}  certified accuracy {:.4}  ({} images, report {})",
        summary.clean_accuracy,
        summary.certified_accuracy,
        labels.len(),
        args.report.display()
    );
    Ok(())
}

fn cmd_attack(data_dir: &Path, args: AttackArgs) -> Result<()> {
    let (net, _) = load_classifier(&args.ckpt)?;
    let kind = args.dataset.kind();
    let ds = load_dataset(kind, data_dir, Split::Test).map_err(|e| anyhow!("{e}"))?;
    let (images, labels) = take_or_sample(&ds, args.limit, args.seed)?;
    let mask = ShapeMask::square(args.patch_size).map_err(|e| anyhow!("{e}"))?;

    let mut defense = match args.defense.as_deref() {
        Some("lgs") => Some(LgsParams {
            lambda: args.lgs_lambda,
            window: args.lgs_window,
            threshold: args.lgs_threshold,
        }),
        Some(other) => bail!("unknown defense '{other}' (supported: lgs)"),
        None => None,
    };

    let mut cfg = AttackConfig {
        steps: args.steps,
        step_size: args.step_size,
        restarts: args.restarts,
        locations: match args.locations {
            LocationsArg::All => LocationSet::All,
            LocationsArg::Corners => LocationSet::Corners,
        },
        stride: args.stride,
        defense: None,
        defense_aware: args.defense_aware,
        seed: args.seed.unwrap_or(0),
    };

    let mut grid_lines = Vec::new();
    if args.lgs_tune && defense.is_some() {
        let tune_n = labels.len().min(30);
        let per: usize = images.shape()[1..].iter().product();
        let mut tune_shape = vec![tune_n];
        tune_shape.extend_from_slice(&images.shape()[1..]);
        let tune_images = Tensor::from_vec(tune_shape, images.data()[..tune_n * per].to_vec())
            .map_err(|e| anyhow!("{e}"))?;
        let (tuned, grid) = tune_lgs(
            &net,
            &tune_images,
            &labels[..tune_n],
            &mask,
            &AttackConfig {
                steps: args.steps.min(20),
                ..cfg.clone()
            },
        )
        .map_err(|e| anyhow!("{e}"))?;
        for (p, acc) in &grid {
            grid_lines.push((
                format!(
                    "grid lambda={} window={} threshold={}",
                    p.lambda, p.window, p.threshold
                ),
                format!("{acc:.4}"),
            ));
        }
        eprintln!(
            "lgs grid search picked lambda={} window={} threshold={}",
            tuned.lambda, tuned.window, tuned.threshold
        );
        defense = Some(tuned);
    }
    cfg.defense = defense;

    let summary = empirical_adversarial_accuracy(&net, &images, &labels, &mask, &cfg)
        .map_err(|e| anyhow!("{e}"))?;
    report::write_attack_report(
        BufWriter::new(File::create(&args.report)?),
        &summary,
        cfg.stride,
    )
    .map_err(|e| anyhow!("{e}"))?;

    let mut manifest = vec![
        ("command".to_string(), "attack".to_string()),
        ("ckpt".to_string(), args.ckpt.display().to_string()),
        ("ckpt_sha256".to_string(), sha256_hex(&args.ckpt)?),
        ("dataset".to_string(), kind.to_string()),
        ("images".to_string(), labels.len().to_string()),
        ("steps".to_string(), cfg.steps.to_string()),
        ("step_size".to_string(), cfg.step_size.to_string()),
        ("stride".to_string(), cfg.stride.to_string()),
        ("defense_aware".to_string(), cfg.defense_aware.to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
    ];
    if let Some(d) = &cfg.defense {
        manifest.push((
            "defense".to_string(),
            format!(
                "lgs lambda={} window={} threshold={}",
                d.lambda, d.window, d.threshold
            ),
        ));
    }
    manifest.extend(grid_lines);
    write_manifest(&args.report, &manifest)?;

    println!(
        "clean accuracy {:.4}  empirical adversarial accuracy {:.4}  ({} images, report {})",
        summary.clean_accuracy,
        summary.adversarial_accuracy,
        labels.len(),
        args.report.display()
    );
    Ok(())
}

fn cmd_transfer(data_dir: &Path, args: TransferArgs) -> Result<()> {
    let (net, meta) = load_classifier(&args.ckpt)?;
    let kind =
        DatasetKind::parse(meta.get("dataset").unwrap_or("mnist")).map_err(|e| anyhow!("{e}"))?;
    let ds = load_dataset(kind, data_dir, Split::Test).map_err(|e| anyhow!("{e}"))?;
    let (images, labels) = take_or_sample(&ds, args.limit, args.seed)?;

    let mut out = BufWriter::new(File::create(&args.report)?);
    let mut summary_lines = Vec::new();
    let mut run_shape = |name: &str, masks: Vec<ShapeMask>| -> Result<f64> {
        // rectangle menus report the worst accuracy over the menu
        let mut worst = f64::INFINITY;
        for mask in masks {
            let threat = ThreatModel::patch(mask, kind.channels());
            let s = certified_accuracy(&net, &images, &labels, &threat, &CertOptions::default())
                .map_err(|e| anyhow!("{e}"))?;
            worst = worst.min(s.certified_accuracy);
        }
        summary_lines.push(format!("shape={name} certified_accuracy={worst:.4}"));
        Ok(worst)
    };

    let square = run_shape(
        "square",
        vec![make_shape(ShapeKind::Square, args.pixels).map_err(|e| anyhow!("{e}"))?],
    )?;
    if args.pixels != 4 {
        run_shape(
            "rectangle",
            rectangle_menu(args.pixels).map_err(|e| anyhow!("{e}"))?,
        )?;
    }
    run_shape(
        "line",
        vec![make_shape(ShapeKind::Line, args.pixels).map_err(|e| anyhow!("{e}"))?],
    )?;
    run_shape(
        "diamond",
        vec![make_shape(ShapeKind::Diamond, args.pixels).map_err(|e| anyhow!("{e}"))?],
    )?;
    run_shape(
        "parallelogram",
        vec![make_shape(ShapeKind::Parallelogram, args.pixels).map_err(|e| anyhow!("{e}"))?],
    )?;

    for line in &summary_lines {
        writeln!(out, "{line}")?;
        println!("{line}");
    }
    writeln!(out, "# summary")?;
    writeln!(out, "square_certified_accuracy={square:.4}")?;
    drop(out);
    write_manifest(
        &args.report,
        &[
            ("command".to_string(), "transfer".to_string()),
            ("ckpt".to_string(), args.ckpt.display().to_string()),
            ("ckpt_sha256".to_string(), sha256_hex(&args.ckpt)?),
            ("pixels".to_string(), args.pixels.to_string()),
            ("images".to_string(), labels.len().to_string()),
        ],
    )?;
    Ok(())
}
