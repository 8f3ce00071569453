//! Command-line front end: corpus preparation, training, inference,
//! gradient evaluation, and survey aggregation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scgan::config::{self, RunConfig, EXTRACTOR_WEIGHTS_ENV};
use scgan::data::{
    list_images, load_image_native, preprocess_corpus, save_image, CropMode, PreprocessOptions,
};
use scgan::error::{Error, Result};
use scgan::eval::{
    aggregate_survey, average_gradient, bundled_survey, gradient_map, round_display, SurveyTable,
    DISPLAY_SCALE,
};
use scgan::networks::Generator;
use scgan::train::{self, load_checkpoint, AblationPreset, AttentiveMode, GanMode};

#[derive(Parser)]
#[command(
    name = "scgan",
    version,
    about = "Attentive cycle-consistent selfie cartoonization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter, crop, and deduplicate a raw image directory into a corpus.
    Preprocess(PreprocessArgs),
    /// Train the translation networks on an unpaired corpus.
    Train(TrainArgs),
    /// Run a trained generator on an image or a directory of images.
    Infer(InferArgs),
    /// Report average gradients and write gradient maps.
    Evaluate(EvaluateArgs),
    /// Average a five-point survey table per method.
    AggregateSurvey(AggregateSurveyArgs),
}

/// Flags shared by the subcommands that consume a run configuration; each
/// overrides the corresponding config-file field.
#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root directory holding the corpus [default: data]
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Output directory [default: out]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Style subdirectory of the data root, e.g. hand_painted, watercolor,
    /// or anime [default: none]
    #[arg(long)]
    style: Option<String>,
    /// Region-annotation sidecar for the selfie domain
    /// [default: <data-root>/annotations_a.jsonl if present]
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Feature-extractor weights file; the SCGAN_EXTRACTOR_WEIGHTS
    /// environment variable is the fallback [default: identity extractor]
    #[arg(long)]
    extractor_weights: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut rc = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.data_root {
            rc.data_root = v.clone();
        }
        if let Some(v) = &self.out {
            rc.out = v.clone();
        }
        if let Some(v) = &self.style {
            rc.style = v.clone();
        }
        if let Some(v) = &self.annotations {
            rc.annotations = Some(v.clone());
        }
        let env = std::env::var_os(EXTRACTOR_WEIGHTS_ENV).map(PathBuf::from);
        let source = config::resolve_weights(
            self.extractor_weights.clone(),
            &rc.train.extractor.weights_source,
            env,
        );
        config::apply_weights(&mut rc, source);
        Ok(rc)
    }
}

#[derive(Args)]
struct PreprocessArgs {
    /// Raw image directory.
    #[arg(long)]
    input: PathBuf,
    /// Destination corpus directory.
    #[arg(long)]
    out: PathBuf,
    /// Reject images whose shorter side falls below this.
    #[arg(long, default_value_t = 64)]
    min_size: u32,
    /// Crop applied before re-encoding: center_square or none.
    #[arg(long, default_value = "center_square")]
    crop: String,
    /// Keep byte-identical duplicates instead of dropping them.
    #[arg(long)]
    keep_duplicates: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Total optimization steps [default: 200]
    #[arg(long)]
    steps: Option<u64>,
    /// Images drawn per domain per step [default: 1]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Seed for weights, batch draws, and replay pools [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Objective preset: A, B, C, or full [default: full]
    #[arg(long)]
    preset: Option<AblationPreset>,
    /// Adversarial objective: log or lsgan [default: log]
    #[arg(long)]
    gan_mode: Option<GanMode>,
    /// Attentive term form: crop_reconstruction or crop_then_generate
    /// [default: crop_reconstruction]
    #[arg(long)]
    attentive_mode: Option<AttentiveMode>,
    /// Resume from this checkpoint instead of initializing fresh weights.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Checkpoint holding the trained generators.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image or directory of images.
    #[arg(long)]
    input: PathBuf,
    /// Translate cartoon-to-selfie instead of selfie-to-cartoon.
    #[arg(long)]
    reverse: bool,
    /// Suffix inserted into output file names.
    #[arg(long, default_value = "cartoon")]
    suffix: String,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Image or directory of images to analyze.
    #[arg(long)]
    input: PathBuf,
    /// Skip writing per-image gradient map images.
    #[arg(long)]
    no_maps: bool,
}

#[derive(Args)]
struct AggregateSurveyArgs {
    /// Survey table (method,f1..f5 per line); omit for the bundled study.
    #[arg(long)]
    input: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Preprocess(args) => cmd_preprocess(args),
        Command::Train(args) => cmd_train(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::AggregateSurvey(args) => cmd_aggregate_survey(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_preprocess(args: &PreprocessArgs) -> Result<()> {
    let crop_mode = match args.crop.as_str() {
        "center_square" => CropMode::CenterSquare,
        "none" => CropMode::None,
        other => {
            return Err(Error::Argument(format!(
                "unknown crop mode '{other}' (expected center_square or none)"
            )))
        }
    };
    let options = PreprocessOptions {
        min_size: args.min_size,
        crop_mode,
        dedup: !args.keep_duplicates,
    };
    let report = preprocess_corpus(&args.input, &args.out, &options)?;
    for (name, reason) in &report.reasons {
        log::info!("rejected {name}: {reason:?}");
    }
    println!(
        "{}",
        serde_json::json!({
            "input": args.input,
            "out": args.out,
            "min_size": options.min_size,
            "crop": args.crop,
            "dedup": options.dedup,
            "kept": report.kept,
            "rejected": report.rejected,
        })
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut rc = args.common.resolve()?;
    if let Some(v) = args.steps {
        rc.train.total_steps = v;
    }
    if let Some(v) = args.batch_size {
        rc.train.batch_size = v;
    }
    if let Some(v) = args.seed {
        rc.train.seed = v;
    }
    if let Some(v) = args.preset {
        rc.train.ablation_preset = v;
    }
    if let Some(v) = args.gan_mode {
        rc.train.gan_mode = v;
    }
    if let Some(v) = args.attentive_mode {
        rc.train.attentive_mode = v;
    }
    rc.validate()?;
    rc.write_resolved(&rc.out)?;
    let root = rc.corpus_root();
    let checkpoint = match &args.checkpoint {
        Some(cp) => train::resume(&rc.train, &root, &rc.out, cp, rc.annotations.as_deref())?,
        None => train::train(&rc.train, &root, &rc.out, rc.annotations.as_deref())?,
    };
    println!("{}", serde_json::json!({ "checkpoint": checkpoint }));
    Ok(())
}

/// Input images must divide evenly through the generator's downsampling
/// stages; the networks themselves are fully convolutional, so any
/// conforming size works regardless of the training resolution.
fn check_dimensions(generator: &Generator, image: &scgan::data::ImageTensor) -> Result<()> {
    let config = generator.config();
    let stride = 1usize << config.depth;
    let (c, h, w) = (image.channels(), image.height(), image.width());
    if c != config.in_channels {
        return Err(Error::Shape(format!(
            "generator expects {} channels, image has {c}",
            config.in_channels
        )));
    }
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::Shape(format!(
            "image is {h}x{w}, but a depth-{} generator needs sides divisible by {stride}",
            config.depth
        )));
    }
    Ok(())
}

fn cmd_infer(args: &InferArgs) -> Result<()> {
    let rc = args.common.resolve()?;
    let (state, _saved) = load_checkpoint(&args.checkpoint)?;
    let generator = if args.reverse { &state.g_ba } else { &state.g_ab };
    let inputs = collect_inputs(&args.input)?;
    std::fs::create_dir_all(&rc.out).map_err(|e| Error::io(&rc.out, e))?;
    rc.write_resolved(&rc.out)?;
    for path in inputs {
        let image = load_image_native(&path)?;
        check_dimensions(generator, &image)?;
        let output = generator.translate(&image)?;
        let out_path = rc.out.join(output_name(&path, &args.suffix)?);
        save_image(&output, &out_path)?;
        println!(
            "{}",
            serde_json::json!({ "input": path, "output": out_path })
        );
    }
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let rc = args.common.resolve()?;
    let inputs = collect_inputs(&args.input)?;
    std::fs::create_dir_all(&rc.out).map_err(|e| Error::io(&rc.out, e))?;
    rc.write_resolved(&rc.out)?;
    let report_path = rc.out.join("gradient_report.jsonl");
    let mut lines = Vec::new();
    let mut sum = 0.0f64;
    for path in &inputs {
        let image = load_image_native(path)?;
        let value = average_gradient(&image, DISPLAY_SCALE)?;
        sum += value as f64;
        if !args.no_maps {
            let map = gradient_map(&image)?;
            let map_path = rc.out.join(output_name(path, "grad")?);
            save_image(&map, &map_path)?;
        }
        lines.push(serde_json::json!({ "image": path, "average_gradient": value }));
    }
    lines.push(serde_json::json!({
        "count": inputs.len(),
        "mean_average_gradient": (sum / inputs.len() as f64) as f32,
    }));
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    std::fs::write(&report_path, &text).map_err(|e| Error::io(&report_path, e))?;
    print!("{text}");
    Ok(())
}

fn cmd_aggregate_survey(args: &AggregateSurveyArgs) -> Result<()> {
    let table = match &args.input {
        Some(path) => SurveyTable::from_file(path)?,
        None => bundled_survey(),
    };
    for (name, avg) in aggregate_survey(&table)? {
        println!("{name},{:.2}", round_display(avg));
    }
    Ok(())
}

fn collect_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        let files = list_images(input)?;
        if files.is_empty() {
            return Err(Error::Data(format!(
                "no images under {}",
                input.display()
            )));
        }
        Ok(files)
    } else if input.is_file() {
        Ok(vec![input.to_path_buf()])
    } else {
        Err(Error::Data(format!(
            "input {} does not exist",
            input.display()
        )))
    }
}

/// `portrait.png` with suffix `cartoon` becomes `portrait.cartoon.png`;
/// outputs always re-encode as PNG.
fn output_name(input: &Path, suffix: &str) -> Result<PathBuf> {
    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Argument(format!("unusable file name: {}", input.display())))?;
    Ok(PathBuf::from(format!("{stem}.{suffix}.png")))
}
