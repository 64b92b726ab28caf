//! Command-line entry point.
//!
//! Configuration precedence, lowest to highest: per-dataset defaults, then a
//! `--config` file of namespaced `model.*` / `train.*` keys, then individual
//! flags.  Everything randomized takes an explicit `--seed`.
//!
//! Exit codes: 0 success; 2 for configuration and contract errors (including
//! flag combinations the model family rejects); 1 for everything that fails
//! at run time — unreadable files, malformed checkpoints, diverged training.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use pixelvae_core::data::BinarizeMode;
use pixelvae_core::error::{Error, Result};
use pixelvae_core::model::{build_model, LatentSpec, ModelConfig, OutputFamily, Variant};
use pixelvae_core::objective::importance_nll;
use pixelvae_core::optim::AdamState;
use pixelvae_core::sampler::{sample_images, sample_vary_level, NoiseBundle, VaryLevel};

use pixelvae::config::{join_kv, kv_to_map, merge, split_namespaced, KvMap};
use pixelvae::io;
use pixelvae::sweep::{breakdown_csv, run_sweep, sweep_from_csv, sweep_to_csv};
use pixelvae::train::{evaluate, restore, train, MetricsRow, TrainConfig, METRICS_HEADER};

#[derive(Parser)]
#[command(name = "pixelvae", version, about = "Train, evaluate, and sample PixelVAE models")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write metrics plus checkpoints.
    Train(TrainArgs),
    /// Report ELBO and importance-sampled NLL for a checkpoint.
    Eval(EvalArgs),
    /// Draw a sample grid from a checkpoint into a PGM file.
    Sample(SampleArgs),
    /// Train the (layer count x variant x seed) grid and write one CSV row per cell.
    SweepLayers(SweepLayersArgs),
    /// Reduce a sweep CSV to per-k mean reconstruction/KL cost.
    Breakdown(BreakdownArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Corpus: 'toy' (synthetic rectangles) or 'mnist' (IDX files under --data-dir).
    #[arg(long)]
    dataset: String,
    /// Directory holding the MNIST IDX files, gzipped or not.
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    /// Training images (default: 10000 for mnist, 2000 for toy).
    #[arg(long)]
    train_subset: Option<usize>,
    /// Held-out images (default: 1000 for mnist, 500 for toy).
    #[arg(long)]
    eval_subset: Option<usize>,
    /// MNIST binarization: 'stochastic' or 'threshold'.
    #[arg(long, default_value = "stochastic")]
    binarize: String,
}

impl DataArgs {
    fn counts(&self) -> (usize, usize) {
        let (train, eval) = if self.dataset == "mnist" { (10_000, 1_000) } else { (2_000, 500) };
        (self.train_subset.unwrap_or(train), self.eval_subset.unwrap_or(eval))
    }

    fn mode(&self) -> Result<BinarizeMode> {
        match self.binarize.as_str() {
            "stochastic" => Ok(BinarizeMode::Stochastic),
            "threshold" => Ok(BinarizeMode::FixedThreshold),
            other => Err(Error::Config(format!("unknown binarization '{other}'"))),
        }
    }

    fn load(&self, seed: u64) -> Result<(pixelvae_core::data::Dataset, pixelvae_core::data::Dataset)> {
        let (train_n, eval_n) = self.counts();
        io::load_train_eval(&self.dataset, &self.data_dir, seed, train_n, eval_n, self.mode()?)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    seed: u64,
    /// vae-only | pixelcnn-only | pixelvae | gated-pixelvae | gated-no-upsampling
    #[arg(long)]
    variant: Option<String>,
    /// Masked pixel layers k.
    #[arg(long)]
    layers: Option<usize>,
    /// Latent levels: 1 (flat) or 2 (spatial + flat top).
    #[arg(long)]
    levels: Option<usize>,
    /// Top latent channel count.
    #[arg(long)]
    latent: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    prior_layers: Option<usize>,
    /// bernoulli | softmax256
    #[arg(long)]
    output: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    /// KL warm-up steps (0 disables).
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    eval_interval: Option<u64>,
    #[arg(long)]
    ckpt_interval: Option<u64>,
    /// Namespaced key=value file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for metrics.csv and checkpoints.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue a checkpointed run; the model and schedule come from the
    /// checkpoint and only --steps/--out/data flags apply.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    data: DataArgs,
    /// Importance samples per image for the NLL bound.
    #[arg(long, default_value_t = 1000)]
    importance_samples: usize,
    /// Images given the importance-sampled estimate (the ELBO uses the whole
    /// held-out subset).
    #[arg(long, default_value_t = 64)]
    nll_subset: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Output PGM path.
    #[arg(long)]
    out: PathBuf,
    /// Grid shape, rows x columns.
    #[arg(long, default_value = "4x4")]
    grid: String,
    /// none | top | middle | pixel: redraw only this noise source per tile.
    #[arg(long, default_value = "none")]
    vary: String,
}

#[derive(Args)]
struct SweepLayersArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Base seed; cell seeds are seed, seed+1, ...
    #[arg(long)]
    seed: u64,
    /// Comma-separated pixel layer counts, e.g. 0,1,2.
    #[arg(long)]
    layers_list: String,
    #[arg(long, default_value_t = 500)]
    steps: u64,
    /// Seeds per cell.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    latent: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BreakdownArgs {
    /// CSV produced by sweep-layers.
    #[arg(long)]
    sweep_csv: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Contract(_) => 2,
                _ => 1,
            }
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Sample(args) => cmd_sample(args),
        Cmd::SweepLayers(args) => cmd_sweep_layers(args),
        Cmd::Breakdown(args) => cmd_breakdown(args),
    }
}

/// Per-dataset geometry and capacity defaults.
fn dataset_defaults(dataset: &str) -> (usize, usize, usize, usize) {
    // (image side, hidden, top latent channels, spatial latent channels)
    if dataset == "mnist" {
        (28, 8, 16, 4)
    } else {
        (8, 6, 8, 2)
    }
}

/// The levels serialization for the requested depth, sized to the trunk.
fn levels_value(levels: usize, image_side: usize, latent: usize, spatial: usize) -> Result<String> {
    match levels {
        1 => Ok(format!("{latent}@1x1")),
        2 => {
            let probe = ModelConfig {
                image_channels: 1,
                image_height: image_side,
                image_width: image_side,
                levels: vec![LatentSpec::flat(1), LatentSpec::flat(1)],
                pixel_layers: 0,
                prior_layers: 0,
                hidden: 1,
                variant: Variant::Pixelvae,
                output: OutputFamily::Bernoulli,
            };
            let plan = probe.trunk_plan();
            Ok(format!("{spatial}@{}x{},{latent}@1x1", plan.trunk_h, plan.trunk_w))
        }
        other => Err(Error::Config(format!("levels must be 1 or 2, got {other}"))),
    }
}

fn read_config_file(path: Option<&Path>) -> Result<(KvMap, KvMap)> {
    match path {
        None => Ok((KvMap::new(), KvMap::new())),
        Some(path) => {
            let bytes = io::read_bytes(path)?;
            let text = String::from_utf8(bytes)
                .map_err(|_| Error::Format(format!("{} is not UTF-8", path.display())))?;
            split_namespaced(&text)
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    if let Some(ckpt) = &args.resume {
        if args.variant.is_some()
            || args.layers.is_some()
            || args.levels.is_some()
            || args.latent.is_some()
            || args.hidden.is_some()
            || args.prior_layers.is_some()
            || args.output.is_some()
            || args.config.is_some()
        {
            return Err(Error::Config(
                "--resume takes its configuration from the checkpoint; \
                 only --steps, --out, and data flags apply"
                    .into(),
            ));
        }
        let (model, state, mut schedule) = restore(&io::load_checkpoint(ckpt)?)?;
        if let Some(steps) = args.steps {
            schedule.steps = steps;
        }
        let (train_set, _) = args.data.load(schedule.seed)?;
        let outcome = train(model, state, &train_set, &schedule, args.out.as_deref())?;
        report_training(&train_set.source, &outcome.metrics, outcome.checkpoints.last());
        return Ok(());
    }

    let (side, hidden, latent, spatial) = dataset_defaults(&args.data.dataset);
    let (file_model, file_train) = read_config_file(args.config.as_deref())?;

    // Geometry knobs interact (levels needs the latent width), so resolve
    // them before serializing flag overrides.
    let latent_n = args.latent.unwrap_or(latent);
    let mut model_flags = KvMap::new();
    if let Some(v) = &args.variant {
        model_flags.insert("variant".into(), v.clone());
    }
    if let Some(k) = args.layers {
        model_flags.insert("pixel_layers".into(), k.to_string());
    }
    if args.levels.is_some() || args.latent.is_some() {
        let depth = args.levels.unwrap_or(1);
        model_flags.insert("levels".into(), levels_value(depth, side, latent_n, spatial)?);
    }
    if let Some(h) = args.hidden {
        model_flags.insert("hidden".into(), h.to_string());
    }
    if let Some(p) = args.prior_layers {
        model_flags.insert("prior_layers".into(), p.to_string());
    }
    if let Some(o) = &args.output {
        model_flags.insert("output".into(), o.clone());
    }

    let default_model = ModelConfig {
        image_channels: 1,
        image_height: side,
        image_width: side,
        levels: vec![LatentSpec::flat(latent)],
        pixel_layers: 2,
        prior_layers: 1,
        hidden,
        variant: Variant::Pixelvae,
        output: OutputFamily::Bernoulli,
    };
    let merged = merge(&merge(&kv_to_map(&default_model.to_kv()), &file_model), &model_flags);
    let model_config = ModelConfig::from_kv(&join_kv(&merged))?;

    let mut train_flags = KvMap::new();
    train_flags.insert("seed".into(), args.seed.to_string());
    for (key, value) in [
        ("steps", args.steps.map(|v| v.to_string())),
        ("batch_size", args.batch.map(|v| v.to_string())),
        ("warmup_steps", args.warmup.map(|v| v.to_string())),
        ("eval_interval", args.eval_interval.map(|v| v.to_string())),
        ("checkpoint_interval", args.ckpt_interval.map(|v| v.to_string())),
    ] {
        if let Some(value) = value {
            train_flags.insert(key.into(), value);
        }
    }
    let merged =
        merge(&merge(&kv_to_map(&TrainConfig::default().to_kv()), &file_train), &train_flags);
    let schedule = TrainConfig::from_kv(&join_kv(&merged))?;

    let (train_set, _) = args.data.load(args.seed)?;
    let model = build_model(model_config, args.seed)?;
    let outcome = train(model, AdamState::new(), &train_set, &schedule, args.out.as_deref())?;
    report_training(&train_set.source, &outcome.metrics, outcome.checkpoints.last());
    Ok(())
}

fn report_training(source: &str, metrics: &[MetricsRow], checkpoint: Option<&PathBuf>) {
    println!("dataset={source}");
    println!("{METRICS_HEADER}");
    for row in metrics {
        println!("{}", row.to_csv());
    }
    match checkpoint {
        Some(path) => println!("checkpoint={}", path.display()),
        None => println!("checkpoint=none"),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    if args.importance_samples == 0 {
        return Err(Error::Config("importance sampling needs at least 1 sample".into()));
    }
    let (model, ..) = restore(&io::load_checkpoint(&args.ckpt)?)?;
    let (_, eval_set) = args.data.load(args.seed)?;
    let (elbo_v, recon, kl) = evaluate(&model, &eval_set, args.batch, args.seed)?;

    let m = args.nll_subset.min(eval_set.len()).max(1);
    let subset = io::subset(&eval_set, m)?;
    let per_image = importance_nll(
        &model,
        &subset.images,
        args.importance_samples,
        args.seed,
        0,
    )?;
    let nll = per_image.iter().sum::<f64>() / per_image.len() as f64;

    println!("images={}", eval_set.len());
    println!("elbo={elbo_v}");
    println!("recon={recon}");
    for (i, v) in kl.iter().enumerate() {
        println!("kl_{}={v}", i + 1);
    }
    println!("importance_samples={}", args.importance_samples);
    println!("nll_images={m}");
    println!("nll_importance={nll}");
    if model.config.output == OutputFamily::Softmax256 {
        let dims = (model.config.image_channels
            * model.config.image_height
            * model.config.image_width) as f64;
        println!("bits_per_dim={}", nll / (dims * std::f64::consts::LN_2));
    }
    Ok(())
}

fn parse_grid(grid: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("grid must be ROWSxCOLS, got '{grid}'"));
    let (r, c) = grid.split_once('x').ok_or_else(bad)?;
    let rows = r.parse().map_err(|_| bad())?;
    let cols = c.parse().map_err(|_| bad())?;
    if rows == 0 || cols == 0 {
        return Err(bad());
    }
    Ok((rows, cols))
}

fn cmd_sample(args: SampleArgs) -> Result<()> {
    let (rows, cols) = parse_grid(&args.grid)?;
    let (model, ..) = restore(&io::load_checkpoint(&args.ckpt)?)?;
    let noise = NoiseBundle::from_seed(args.seed);
    let images = match args.vary.as_str() {
        "none" => sample_images(&model, rows * cols, &noise)?,
        "top" => sample_vary_level(&model, VaryLevel::Top, rows, cols, &noise)?,
        "middle" => sample_vary_level(&model, VaryLevel::Middle, rows, cols, &noise)?,
        "pixel" => sample_vary_level(&model, VaryLevel::Pixel, rows, cols, &noise)?,
        other => return Err(Error::Config(format!("unknown vary mode '{other}'"))),
    };
    io::write_pgm(&args.out, &images, rows, cols)?;
    println!("wrote={}", args.out.display());
    Ok(())
}

fn cmd_sweep_layers(args: SweepLayersArgs) -> Result<()> {
    let mut layers = Vec::new();
    for part in args.layers_list.split(',') {
        layers.push(
            part.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad layer count '{part}'")))?,
        );
    }
    if args.seeds == 0 {
        return Err(Error::Config("need at least one seed".into()));
    }
    let seeds: Vec<u64> = (0..args.seeds).map(|i| args.seed + i).collect();

    let (side, hidden, latent, _) = dataset_defaults(&args.data.dataset);
    let template = ModelConfig {
        image_channels: 1,
        image_height: side,
        image_width: side,
        levels: vec![LatentSpec::flat(args.latent.unwrap_or(latent))],
        pixel_layers: 1,
        prior_layers: 1,
        hidden: args.hidden.unwrap_or(hidden),
        variant: Variant::Pixelvae,
        output: OutputFamily::Bernoulli,
    };
    let base = TrainConfig {
        steps: args.steps,
        batch_size: args.batch.unwrap_or(16),
        // No files are written per cell; intervals only shape the row buffer.
        eval_interval: args.steps,
        checkpoint_interval: args.steps,
        ..TrainConfig::default()
    };
    let (train_set, eval_set) = args.data.load(args.seed)?;
    let cells = run_sweep(&train_set, &eval_set, &template, &base, &layers, &seeds)?;
    let csv = sweep_to_csv(&cells);
    io::write_atomic(&args.out, csv.as_bytes())?;
    println!("cells={}", cells.len());
    println!("wrote={}", args.out.display());
    Ok(())
}

fn cmd_breakdown(args: BreakdownArgs) -> Result<()> {
    let bytes = io::read_bytes(&args.sweep_csv)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Format(format!("{} is not UTF-8", args.sweep_csv.display())))?;
    let cells = sweep_from_csv(&text)?;
    let table = breakdown_csv(&cells)?;
    io::write_atomic(&args.out, table.as_bytes())?;
    print!("{table}");
    Ok(())
}
