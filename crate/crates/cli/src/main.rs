//! `idforge` — build pair datasets, train the customization model, generate
//! images from a reference, and score generations, all from one config file.
//!
//! Exit codes: 0 ok, 1 validation failure, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand};

use idforge_core::dataset::{build_dataset, check_min_side, read_manifest};
use idforge_core::metrics::{evaluate, EmbedderSet};
use idforge_core::toy_corpus::generate_toy_groups;
use idforge_core::trainer::train;
use idforge_core::{CustomizerModel, Error, ImageTensor, RunConfig, ScenarioPromptSet, SegMask};

#[derive(Parser)]
#[command(
    name = "idforge",
    version,
    about = "zero-shot object customization at desk scale"
)]
struct Cli {
    /// Run configuration file (TOML); defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a reference/target pair dataset with a manifest.
    BuildDataset(BuildDatasetArgs),
    /// Train the customization model on a manifest.
    Train(TrainArgs),
    /// Generate images of a reference object from a prompt.
    Generate(GenerateArgs),
    /// Score a directory of generations against a manifest.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct BuildDatasetArgs {
    /// Source spec; currently `toy:<identities>x<frames>@<size>`.
    #[arg(long, default_value = "toy:6x4@320")]
    sources: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Frames below this side length are dropped.
    #[arg(long, default_value_t = 300)]
    min_side: usize,
    #[arg(long, default_value_t = 2)]
    pairs_per_group: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Resume from an existing checkpoint; its echoed config must match.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    alpha3: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    prompt: String,
    /// The prompt word whose embedding is replaced by the fused ID token.
    #[arg(long)]
    class_word: String,
    #[arg(long)]
    ref_image: PathBuf,
    #[arg(long)]
    ref_mask: PathBuf,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    guidance: Option<f64>,
    /// Also generate one image per scenario-prompt expansion into
    /// scenario-<name>/ subdirectories (feeds the diversity metric).
    #[arg(long, default_value_t = false)]
    scenarios: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    generations: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Optional TOML file overriding the metrics section of the config.
    #[arg(long)]
    embedder_config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match &cli.config {
        Some(path) => match RunConfig::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
        },
        None => RunConfig::default(),
    };
    let result = match cli.command {
        Command::BuildDataset(args) => cmd_build_dataset(&config, &args),
        Command::Train(args) => cmd_train(&config, &args),
        Command::Generate(args) => cmd_generate(&config, &args),
        Command::Evaluate(args) => cmd_evaluate(&config, &args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match &e {
                Error::Config(_)
                | Error::Validation(_)
                | Error::ManifestValidation(_)
                | Error::Shape(_) => 1,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}

fn parse_toy_sources(spec: &str) -> Result<(usize, usize, usize), Error> {
    let body = spec.strip_prefix("toy:").ok_or_else(|| {
        Error::config(format!(
            "unsupported sources spec {spec}; expected toy:<n>x<frames>@<size>"
        ))
    })?;
    let (counts, size) = body
        .split_once('@')
        .ok_or_else(|| Error::config("missing @<size> in sources spec"))?;
    let (n, frames) = counts
        .split_once('x')
        .ok_or_else(|| Error::config("missing <n>x<frames> in sources spec"))?;
    let parse = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::config(format!("bad {what} in sources spec: {s}")))
    };
    Ok((
        parse(n, "identity count")?,
        parse(frames, "frame count")?,
        parse(size, "image size")?,
    ))
}

fn cmd_build_dataset(config: &RunConfig, args: &BuildDatasetArgs) -> Result<(), Error> {
    let (n, frames, size) = parse_toy_sources(&args.sources)?;
    if size < args.min_side {
        return Err(Error::config(format!(
            "toy image size {size} is below --min-side {}; nothing would pass the filter",
            args.min_side
        )));
    }
    let groups = generate_toy_groups(n, frames, size, args.seed);
    let manifest = build_dataset(
        &groups,
        &args.out,
        args.seed,
        args.min_side,
        args.pairs_per_group,
    )?;
    let manifest_path = args.out.join("manifest.jsonl");
    check_min_side(&manifest, &manifest_path, args.min_side)?;
    config.save(&args.out.join("config.toml"))?;
    println!(
        "wrote {} records to {}",
        manifest.records.len(),
        manifest_path.display()
    );
    for (category, count) in &manifest.stats {
        println!("  {category}: {count}");
    }
    Ok(())
}

fn load_samples_as_items(
    model: &CustomizerModel,
    manifest_path: &Path,
) -> Result<Vec<idforge_core::TrainItem>, Error> {
    let manifest = read_manifest(manifest_path)?;
    let samples = idforge_core::dataset::load_samples(&manifest, manifest_path)?;
    samples
        .iter()
        .map(|s| {
            model.prepare_item(
                &s.ref_image,
                &s.ref_mask,
                &s.target_image,
                &s.record.caption,
                &s.record.class_word,
            )
        })
        .collect()
}

fn cmd_train(config: &RunConfig, args: &TrainArgs) -> Result<(), Error> {
    let mut train_cfg = config.train.clone();
    if let Some(v) = args.epochs {
        train_cfg.epochs = v;
    }
    train_cfg.max_steps = args.max_steps.or(train_cfg.max_steps);
    if let Some(v) = args.alpha3 {
        train_cfg.alpha3 = v;
    }
    if let Some(v) = args.lr {
        train_cfg.lr = v;
    }
    if let Some(v) = args.batch_size {
        train_cfg.batch_size = v;
    }
    if let Some(v) = args.seed {
        train_cfg.seed = v;
    }
    let mut config = config.clone();
    config.train = train_cfg.clone();

    let dev = Device::Cpu;
    let model = match &args.resume {
        None => CustomizerModel::new(config.clone(), &dev, DType::F32)?,
        Some(ckpt) => {
            let model = CustomizerModel::load_checkpoint(ckpt, &dev, DType::F32)?;
            // the run config defines the architecture; silently training a
            // different architecture than requested would corrupt provenance
            let mut stored = model.config.clone();
            stored.train = config.train.clone();
            if stored != config {
                return Err(Error::config(format!(
                    "checkpoint {} was produced under a different config; refusing to resume",
                    ckpt.display()
                )));
            }
            model
        }
    };
    let items = load_samples_as_items(&model, &args.manifest)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    config.save(&args.out.join("config.toml"))?;
    if train_cfg.epochs == 0 {
        // checkpoint equals initialization
        model.save_checkpoint(&args.out.join("checkpoint-init.safetensors"))?;
        println!("0 epochs requested: wrote initialization checkpoint");
        return Ok(());
    }
    let stats = train(&model, &items, &train_cfg, Some(&args.out))?;
    model.save_checkpoint(&args.out.join("checkpoint-final.safetensors"))?;
    println!(
        "trained {} steps ({} skipped); final l_total {:.6}",
        stats.steps,
        stats.skipped,
        stats.reports.last().map(|r| r.l_total).unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Tile generations row-major into one contact sheet, 1px separators.
fn contact_sheet(images: &[ImageTensor]) -> Result<ImageTensor, Error> {
    let cols = (images.len() as f64).sqrt().ceil() as usize;
    let rows = images.len().div_ceil(cols);
    let h = images[0].height();
    let w = images[0].width();
    let sheet_h = rows * h + rows - 1;
    let sheet_w = cols * w + cols - 1;
    let mut sheet = ImageTensor::constant(1.0, sheet_h, sheet_w)?;
    for (i, img) in images.iter().enumerate() {
        let top = (i / cols) * (h + 1);
        let left = (i % cols) * (w + 1);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    sheet.set(c, top + y, left + x, img.get(c, y, x));
                }
            }
        }
    }
    Ok(sheet)
}

fn cmd_generate(config: &RunConfig, args: &GenerateArgs) -> Result<(), Error> {
    if args.count == 0 {
        return Err(Error::validation("--count must be >= 1"));
    }
    let dev = Device::Cpu;
    let model = CustomizerModel::load_checkpoint(&args.checkpoint, &dev, DType::F32)?;
    let ref_image = ImageTensor::load_png(&args.ref_image)?;
    let ref_mask = SegMask::load_png(&args.ref_mask)?;
    let steps = args.steps.unwrap_or(config.sampling.steps);
    let guidance = args.guidance.unwrap_or(config.sampling.guidance);
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut images = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let img = model.generate(
            &ref_image,
            &ref_mask,
            &args.prompt,
            &args.class_word,
            steps,
            guidance,
            args.seed.wrapping_add(i as u64),
        )?;
        img.save_png(&args.out.join(format!("generation-{i:03}.png")))?;
        images.push(img);
    }
    contact_sheet(&images)?.save_png(&args.out.join("grid.png"))?;
    if args.scenarios {
        for (i, (name, prompt)) in ScenarioPromptSet::default()
            .expand(&args.prompt)
            .iter()
            .enumerate()
        {
            let dir = args.out.join(format!(
                "scenario-{}",
                name.to_lowercase().replace(' ', "-")
            ));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let img = model.generate(
                &ref_image,
                &ref_mask,
                prompt,
                &args.class_word,
                steps,
                guidance,
                args.seed.wrapping_add(1000 + i as u64),
            )?;
            img.save_png(&dir.join(format!("generation-{i:03}.png")))?;
        }
    }
    model.config.save(&args.out.join("config.toml"))?;
    println!(
        "wrote {} generations and grid.png to {}",
        args.count,
        args.out.display()
    );
    Ok(())
}

fn cmd_evaluate(config: &RunConfig, args: &EvaluateArgs) -> Result<(), Error> {
    let mut metrics_cfg = config.metrics.clone();
    if let Some(path) = &args.embedder_config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        metrics_cfg = toml::from_str(&text)
            .map_err(|e| Error::config(format!("parse embedder config: {e}")))?;
    }
    let manifest = read_manifest(&args.manifest)?;
    let embedders = EmbedderSet::from_config(&metrics_cfg)?;
    let report = evaluate(
        &manifest,
        &args.manifest,
        &args.generations,
        &embedders,
        &metrics_cfg,
    )?;
    let json = serde_json::to_string_pretty(&report)?;
    std::fs::write(&args.report, &json).map_err(|e| Error::io(&args.report, e))?;
    if let Some(dir) = args.report.parent() {
        config.save(&dir.join("config.toml"))?;
    }
    println!("{json}");
    if !report.missing.is_empty() {
        eprintln!(
            "warning: {} samples had no generation: {}",
            report.missing.len(),
            report.missing.join(", ")
        );
    }
    Ok(())
}
