//! dnres: train, grow, evolve, and run residual denoising networks.
//!
//! Exit codes: 0 on success, 1 when an operation ran but its check failed
//! (noise validation, gradient check), 2 on usage or I/O errors.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use dnres_forge::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use dnres_forge::config::KvConfig;
use dnres_forge::data::{Manifest, Split};
use dnres_forge::error::Error;
use dnres_forge::eval::{denoise_image, evaluate, BorderRule};
use dnres_forge::gradcheck::{gradient_check, GradCheckConfig};
use dnres_forge::loss::LossSpec;
use dnres_forge::network::Network;
use dnres_forge::noise::{degrade, validate_noise_statistics, NoiseModel};
use dnres_forge::optim::OptimizerKind;
use dnres_forge::pgm::{read_pgm, write_pgm};
use dnres_forge::rng::{stream_rng, StreamRole};
use dnres_forge::synthetic::toy_corpus;
use dnres_forge::tensor::{Shape, Tensor};
use dnres_forge::topology::{CountMode, Topology};
use dnres_forge::train::{
    prepare_training_data, run_cascade, run_evolution, save_history, CascadePlan, EvolutionPlan,
    TrainConfig,
};
use dnres_forge::Result;

#[derive(Parser)]
#[command(
    name = "dnres",
    version,
    about = "Cascade-trained residual denoiser: synthesize noise, train, evolve, denoise, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Degrade an image under a noise model and/or self-check the sampler.
    Noise(NoiseArgs),
    /// Cascade-train a network from scratch.
    Train(TrainArgs),
    /// Evolve a trained network's blocks to depthwise-separable form.
    Evolve(EvolveArgs),
    /// Denoise one image with a trained checkpoint.
    Denoise(DenoiseArgs),
    /// Evaluate a checkpoint over a corpus and noise models (CSV output).
    Eval(EvalArgs),
    /// Report parameter and multiply-accumulate counts for a topology.
    Count(CountArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(clap::Args)]
struct NoiseArgs {
    /// Noise spec: gaussian:SIGMA | poisson:PEAK | poisson-gaussian:SIGMA[:PEAK]
    #[arg(long)]
    model: String,
    /// Clean input image (PGM) to degrade.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output path for the degraded image (required with --input).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Run the statistical self-check and print a report.
    #[arg(long)]
    report: bool,
    /// Sample count for the self-check.
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    /// Clean intensity level for the self-check, in [0,1].
    #[arg(long, default_value_t = 0.5)]
    level: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct DataArgs {
    /// Dataset manifest (one "path split" line per image).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Generate a synthetic corpus of this many images instead.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Side length of synthetic images.
    #[arg(long)]
    image_size: Option<usize>,
    /// Comma-separated noise specs applied to every image.
    #[arg(long)]
    models: Option<String>,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Directory for checkpoints, history, and the resolved config.
    #[arg(long)]
    out_dir: PathBuf,
    /// Optional key = value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// sgd | adam
    #[arg(long)]
    optimizer: Option<String>,
    /// mse | edge-sobel | edge-binary
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    max_blocks: Option<usize>,
    #[arg(long)]
    epoch_cap: Option<usize>,
    #[arg(long)]
    stage_ratio: Option<f64>,
    #[arg(long)]
    plateau_window: Option<usize>,
    #[arg(long)]
    plateau_min_rel: Option<f64>,
    /// Patch grid stride over each image.
    #[arg(long)]
    stride: Option<usize>,
    /// Random patch-position jitter, in pixels.
    #[arg(long)]
    jitter: Option<usize>,
}

#[derive(clap::Args)]
struct EvolveArgs {
    /// Trained checkpoint to start from.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    fine_tune_epochs: Option<usize>,
    /// Convert every block at once and fine-tune a single time.
    #[arg(long)]
    one_shot: bool,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    jitter: Option<usize>,
}

#[derive(clap::Args)]
struct DenoiseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Noisy input image (PGM).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Border handling for full-size inference: replicate | reflect
    #[arg(long, default_value = "replicate")]
    border: String,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Manifest split to evaluate: train | test
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the CSV here as well as to stdout.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value = "replicate")]
    border: String,
}

#[derive(clap::Args)]
struct CountArgs {
    /// Number of residual blocks in the topology.
    #[arg(long, default_value_t = 0)]
    blocks: usize,
    /// How many of those blocks (tail first) are depthwise-separable.
    #[arg(long, default_value_t = 0)]
    ds_blocks: usize,
    /// Read the topology from a checkpoint instead.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// weights-only | with-bias
    #[arg(long, default_value = "weights-only")]
    mode: String,
    /// Image width for the multiply-accumulate count.
    #[arg(long, default_value_t = 640)]
    width: usize,
    /// Image height for the multiply-accumulate count.
    #[arg(long, default_value_t = 480)]
    height: usize,
    /// Print the per-layer table.
    #[arg(long)]
    detail: bool,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    blocks: usize,
    #[arg(long, default_value_t = 0)]
    ds_blocks: usize,
    /// Coordinates sampled per parameter tensor.
    #[arg(long, default_value_t = 16)]
    coords_per_tensor: usize,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    /// Side length of the random test input.
    #[arg(long, default_value_t = 21)]
    input_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Noise(a) => cmd_noise(a),
        Command::Train(a) => cmd_train(a),
        Command::Evolve(a) => cmd_evolve(a),
        Command::Denoise(a) => cmd_denoise(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Count(a) => cmd_count(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match outcome {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            // Bad arguments and config files are usage errors (2);
            // everything else is a runtime failure (1).
            let code = match &e {
                Error::InvalidArgument(_) => 2,
                Error::Format { kind: "config", .. } => 2,
                _ => 1,
            };
            std::process::exit(code);
        }
    }
}

fn parse_models(spec: &str) -> Result<Vec<NoiseModel>> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(NoiseModel::parse_spec)
        .collect()
}

/// Load the named corpus: every manifest image in `split`, or the synthetic
/// corpus when requested. Exactly one source must be given.
fn load_images(
    data: &DataArgs,
    split: Split,
    size: usize,
    seed: u64,
) -> Result<Vec<(String, Tensor<f32>)>> {
    match (&data.manifest, data.synthetic) {
        (Some(path), None) => {
            let manifest = Manifest::load(path)?;
            let paths = manifest.split_paths(split);
            if paths.is_empty() {
                return Err(Error::arg(format!("manifest has no '{split}' images")));
            }
            paths
                .into_iter()
                .map(|p| Ok((p.display().to_string(), read_pgm::<f32>(p)?)))
                .collect()
        }
        (None, Some(count)) => {
            if count == 0 {
                return Err(Error::arg("synthetic image count must be positive"));
            }
            Ok(toy_corpus(count, size, size, seed))
        }
        (Some(_), Some(_)) => Err(Error::arg("--manifest and --synthetic are mutually exclusive")),
        (None, None) => Err(Error::arg("one of --manifest or --synthetic is required")),
    }
}

fn cmd_noise(a: NoiseArgs) -> Result<i32> {
    let model = NoiseModel::parse_spec(&a.model)?;
    if a.input.is_none() && !a.report {
        return Err(Error::arg("nothing to do: pass --input/--output or --report"));
    }

    if let Some(input) = &a.input {
        let output = a
            .output
            .as_ref()
            .ok_or_else(|| Error::arg("--output is required with --input"))?;
        let clean: Tensor<f32> = read_pgm(input)?;
        let mut rng = stream_rng(a.seed, StreamRole::Noise, 0);
        let noisy = degrade(&clean, &model, &mut rng)?;
        write_pgm(output, &noisy)?;
        println!(
            "degraded {} with {} -> {}",
            input.display(),
            model.label(),
            output.display()
        );
    }

    if a.report {
        let mut rng = stream_rng(a.seed, StreamRole::Validation, 0);
        let report = validate_noise_statistics(&model, a.samples, a.level, &mut rng)?;
        let line = |name: &str, expected: f64, observed: f64, tol: f64, pass: bool| {
            println!(
                "{name:<10} expected {expected:.6e}  observed {observed:.6e}  tolerance {tol:.2e}  {}",
                if pass { "ok" } else { "FAIL" }
            );
        };
        println!("model {}  samples {}  level {}", report.label, report.samples, report.clean_level);
        line("mean", report.mean.expected, report.mean.observed, report.mean.tolerance, report.mean.pass);
        line(
            "variance",
            report.variance.expected,
            report.variance.observed,
            report.variance.tolerance,
            report.variance.pass,
        );
        if let Some(c) = &report.chi_square {
            println!(
                "chi-square statistic {:.3} threshold {:.3} (dof {})  {}",
                c.statistic,
                c.threshold,
                c.dof,
                if c.pass { "ok" } else { "FAIL" }
            );
        }
        if !report.pass() {
            return Ok(1);
        }
    }
    Ok(0)
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let mut cfg = match &a.config {
        Some(path) => KvConfig::load(path)?,
        None => KvConfig::empty(),
    };
    macro_rules! overlay {
        ($field:expr, $key:literal) => {
            if let Some(v) = &$field {
                cfg.set($key, v);
            }
        };
    }
    overlay!(a.seed, "seed");
    overlay!(a.batch_size, "batch_size");
    overlay!(a.learning_rate, "learning_rate");
    overlay!(a.optimizer, "optimizer");
    overlay!(a.loss, "loss");
    overlay!(a.max_blocks, "max_blocks");
    overlay!(a.epoch_cap, "epoch_cap");
    overlay!(a.stage_ratio, "stage_loss_ratio");
    overlay!(a.plateau_window, "plateau_window");
    overlay!(a.plateau_min_rel, "plateau_min_rel");
    overlay!(a.stride, "stride");
    overlay!(a.jitter, "jitter");
    overlay!(a.data.models, "models");
    overlay!(a.data.synthetic, "synthetic");
    overlay!(a.data.image_size, "image_size");

    let defaults = CascadePlan::default();
    let train = TrainConfig {
        seed: cfg.get("seed", defaults.train.seed)?,
        batch_size: cfg.get("batch_size", defaults.train.batch_size)?,
        learning_rate: cfg.get("learning_rate", defaults.train.learning_rate)?,
        optimizer: cfg.get_str("optimizer", "adam").parse::<OptimizerKind>()?,
        loss: LossSpec::parse(&cfg.get_str("loss", "mse"))?,
    };
    let plan = CascadePlan {
        train,
        max_blocks: cfg.get("max_blocks", defaults.max_blocks)?,
        stage_loss_ratio: cfg.get("stage_loss_ratio", defaults.stage_loss_ratio)?,
        epoch_cap: cfg.get("epoch_cap", defaults.epoch_cap)?,
        plateau_window: cfg.get("plateau_window", defaults.plateau_window)?,
        plateau_min_rel: cfg.get("plateau_min_rel", defaults.plateau_min_rel)?,
    };
    let stride = cfg.get("stride", dnres_forge::train::DEFAULT_STRIDE)?;
    let jitter = cfg.get("jitter", 0usize)?;
    let models = parse_models(&cfg.get_str("models", "gaussian:25"))?;
    let data_args = DataArgs {
        manifest: a.data.manifest.clone(),
        synthetic: if a.data.synthetic.is_some() || cfg.contains("synthetic") {
            Some(cfg.get("synthetic", 0usize)?)
        } else {
            None
        },
        image_size: Some(cfg.get("image_size", 64usize)?),
        models: None,
    };
    let size = data_args.image_size.unwrap_or(64);

    for key in cfg.unused_keys() {
        log::warn!("config key '{key}' was not used by this run");
    }

    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let images = load_images(&data_args, Split::Train, size, plan.train.seed)?;
    let pairs = prepare_training_data(&images, &models, plan.train.seed, stride, jitter)?;
    log::info!(
        "training on {} patch pairs from {} images x {} models",
        pairs.len(),
        images.len(),
        models.len()
    );

    let outcome = run_cascade(&plan, &pairs, Some(&a.out_dir))?;
    finish_run(&a.out_dir, &cfg, outcome, &plan.train)
}

fn cmd_evolve(a: EvolveArgs) -> Result<i32> {
    let (start, start_meta) = load_checkpoint(&a.checkpoint)?;
    let mut cfg = match &a.config {
        Some(path) => KvConfig::load(path)?,
        None => KvConfig::empty(),
    };
    macro_rules! overlay {
        ($field:expr, $key:literal) => {
            if let Some(v) = &$field {
                cfg.set($key, v);
            }
        };
    }
    overlay!(a.seed, "seed");
    overlay!(a.batch_size, "batch_size");
    overlay!(a.learning_rate, "learning_rate");
    overlay!(a.optimizer, "optimizer");
    overlay!(a.loss, "loss");
    overlay!(a.fine_tune_epochs, "fine_tune_epochs");
    overlay!(a.stride, "stride");
    overlay!(a.jitter, "jitter");
    overlay!(a.data.models, "models");
    overlay!(a.data.synthetic, "synthetic");
    overlay!(a.data.image_size, "image_size");

    // Inherit seed and loss from the source checkpoint unless overridden.
    let inherited_seed = start_meta.seed.unwrap_or(0);
    let inherited_loss = start_meta.loss.clone().unwrap_or_else(|| "mse".to_string());
    let defaults = EvolutionPlan::default();
    let train = TrainConfig {
        seed: cfg.get("seed", inherited_seed)?,
        batch_size: cfg.get("batch_size", defaults.train.batch_size)?,
        learning_rate: cfg.get("learning_rate", defaults.train.learning_rate)?,
        optimizer: cfg.get_str("optimizer", "adam").parse::<OptimizerKind>()?,
        loss: LossSpec::parse(&cfg.get_str("loss", &inherited_loss))?,
    };
    let plan = EvolutionPlan {
        train,
        fine_tune_epochs: cfg.get("fine_tune_epochs", defaults.fine_tune_epochs)?,
        one_shot: a.one_shot,
    };
    let stride = cfg.get("stride", dnres_forge::train::DEFAULT_STRIDE)?;
    let jitter = cfg.get("jitter", 0usize)?;
    let models = parse_models(&cfg.get_str("models", "gaussian:25"))?;
    let data_args = DataArgs {
        manifest: a.data.manifest.clone(),
        synthetic: if a.data.synthetic.is_some() || cfg.contains("synthetic") {
            Some(cfg.get("synthetic", 0usize)?)
        } else {
            None
        },
        image_size: Some(cfg.get("image_size", 64usize)?),
        models: None,
    };
    let size = data_args.image_size.unwrap_or(64);

    for key in cfg.unused_keys() {
        log::warn!("config key '{key}' was not used by this run");
    }

    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let images = load_images(&data_args, Split::Train, size, plan.train.seed)?;
    let pairs = prepare_training_data(&images, &models, plan.train.seed, stride, jitter)?;
    log::info!(
        "evolving {} ({} patch pairs, one_shot={})",
        start.topology().id(),
        pairs.len(),
        plan.one_shot
    );

    let outcome = run_evolution(&start, &plan, &pairs, Some(&a.out_dir))?;
    finish_run(&a.out_dir, &cfg, outcome, &plan.train)
}

fn finish_run(
    out_dir: &Path,
    cfg: &KvConfig,
    outcome: dnres_forge::train::TrainedOutcome,
    train: &TrainConfig,
) -> Result<i32> {
    let meta = CheckpointMeta {
        seed: Some(train.seed),
        optimizer: Some(train.optimizer.to_string()),
        loss: Some(train.loss.label()),
        stages: outcome.history.clone(),
    };
    save_checkpoint(out_dir.join("final.dnrf"), &outcome.network, &meta)?;
    save_history(out_dir.join("history.tsv"), &outcome.history)?;
    cfg.write_resolved(out_dir.join("resolved.conf"))?;
    for r in &outcome.history {
        println!(
            "stage {:>2}  {:<10}  epochs {:>3}  final loss {:.6e}  ({})",
            r.stage, r.topology_id, r.epochs, r.final_loss, r.reason
        );
    }
    println!(
        "final network {} -> {}",
        outcome.network.topology().id(),
        out_dir.join("final.dnrf").display()
    );
    Ok(0)
}

fn cmd_denoise(a: DenoiseArgs) -> Result<i32> {
    let (net, _) = load_checkpoint(&a.checkpoint)?;
    let rule: BorderRule = a.border.parse()?;
    let noisy: Tensor<f32> = read_pgm(&a.input)?;
    let out = denoise_image(&net, &noisy, rule)?;
    write_pgm(&a.output, &out)?;
    println!(
        "denoised {} with {} -> {}",
        a.input.display(),
        net.topology().id(),
        a.output.display()
    );
    Ok(0)
}

fn cmd_eval(a: EvalArgs) -> Result<i32> {
    let (net, _) = load_checkpoint(&a.checkpoint)?;
    let rule: BorderRule = a.border.parse()?;
    let split: Split = a.split.parse()?;
    let size = a.data.image_size.unwrap_or(64);
    let images = load_images(&a.data, split, size, a.seed)?;
    let models = parse_models(a.data.models.as_deref().unwrap_or("gaussian:25"))?;
    let table = evaluate(&net, &images, &models, a.seed, rule)?;
    let csv = table.to_csv();
    print!("{csv}");
    if let Some(path) = &a.output {
        std::fs::write(path, &csv).map_err(|e| Error::io(path, e))?;
    }
    Ok(0)
}

fn cmd_count(a: CountArgs) -> Result<i32> {
    let topology = match &a.checkpoint {
        Some(path) => load_checkpoint(path)?.0.topology().clone(),
        None => {
            if a.ds_blocks > a.blocks {
                return Err(Error::arg("--ds-blocks cannot exceed --blocks"));
            }
            let mut t = Topology::with_blocks(a.blocks);
            // Convert tail-first; converted blocks keep their positions, so
            // the i-th conversion targets tail index i.
            for i in 0..a.ds_blocks {
                t = t.evolve_block(i)?;
            }
            t
        }
    };
    let mode = match a.mode.as_str() {
        "weights-only" => CountMode::WeightsOnly,
        "with-bias" => CountMode::WithBias,
        other => {
            return Err(Error::arg(format!(
                "unknown mode '{other}' (expected weights-only|with-bias)"
            )))
        }
    };

    println!("topology {}", topology.id());
    println!("conv layers {}", topology.conv_layer_count());
    if a.detail {
        println!("{:<10} {:<12} {:>10} {:>8} {:>16}", "layer", "kind", "weights", "biases", "macs");
        for row in topology.layer_report(a.height, a.width) {
            println!(
                "{:<10} {:<12} {:>10} {:>8} {:>16}",
                row.name, row.kind, row.weights, row.biases, row.macs
            );
        }
    }
    println!(
        "parameters ({}) {}",
        a.mode,
        topology.count_params(mode)
    );
    println!(
        "macs at {}x{} {}",
        a.width,
        a.height,
        topology.count_macs(a.height, a.width)
    );
    Ok(0)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32> {
    if a.ds_blocks > a.blocks {
        return Err(Error::arg("--ds-blocks cannot exceed --blocks"));
    }
    if a.input_size < 17 {
        return Err(Error::arg("--input-size must be at least 17"));
    }
    let mut rng = stream_rng(a.seed, StreamRole::WeightInit, 0);
    let mut net = Network::<f64>::build_base(&mut rng);
    for k in 0..a.blocks {
        let mut r = stream_rng(a.seed, StreamRole::WeightInit, k as u64 + 1);
        net = net.insert_resblock(&mut r)?;
    }
    for i in 0..a.ds_blocks {
        let mut r = stream_rng(a.seed, StreamRole::WeightInit, 100 + i as u64);
        net = net.evolve_block(i, &mut r)?;
    }
    // Redraw weights at a scale that exercises every path: near-identity
    // insertion weights would leave most coordinates numerically inert.
    {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, 0.05).map_err(|e| Error::arg(e.to_string()))?;
        let mut r = stream_rng(a.seed, StreamRole::WeightInit, 999);
        for slice in net.param_slices_mut() {
            for v in slice {
                *v = normal.sample(&mut r);
            }
        }
    }
    let mut input_rng = stream_rng(a.seed, StreamRole::GradCheck, 7);
    let input = Tensor::from_fn(Shape::new(1, 1, a.input_size, a.input_size), |_, _, _, _| {
        use rand::Rng;
        input_rng.random_range(0.0..1.0)
    });
    let cfg = GradCheckConfig {
        step: a.step,
        tolerance: a.tolerance,
        max_coords_per_tensor: a.coords_per_tensor,
        seed: a.seed,
    };
    let report = gradient_check(&net, &input, &cfg)?;
    print!("{}", report.summary());
    Ok(if report.pass() { 0 } else { 1 })
}
