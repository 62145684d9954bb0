//! Command-line front end: dataset generation, two-stage training,
//! evaluation, gradient checking, the ablation grid, and latent-weight
//! histogram export.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use lcreg::config::ExperimentConfig;
use lcreg::data::{
    load_dataset, save_dataset, split_classes, synth_dataset, synth_with_counts, LongTailDataset,
    LongTailSpec, PartBank,
};
use lcreg::error::Error;
use lcreg::metrics::{write_histogram, write_summary, MetricsReport};
use lcreg::model::Model;
use lcreg::rng::Rng;
use lcreg::train::{
    self, arm_name, evaluate, export_histogram, gradient_check, run_ablation, ABLATION_ARMS,
};
use lcreg::Result;

#[derive(Parser)]
#[command(
    name = "lcreg",
    version,
    about = "Latent-category training on long-tailed data",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a long-tailed train set and a balanced test set of
    /// part-compositional images.
    GenerateData(GenerateArgs),
    /// Run the two-stage training pipeline and write metrics + checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on the test split of a dataset directory.
    Eval(EvalArgs),
    /// Verify analytic gradients of the full objective against finite
    /// differences.
    Gradcheck(GradcheckArgs),
    /// Train every ablation arm over shared seeds and tabulate the results.
    Ablate(AblateArgs),
    /// Export the latent-category weight histogram for one image.
    Histogram(HistogramArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Number of classes (4..=16, excluding 2 and 3).
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Sample count of the largest class.
    #[arg(long, default_value_t = 500)]
    nmax: usize,
    /// Imbalance factor: largest class count over smallest.
    #[arg(long = "if", default_value_t = 100.0)]
    imbalance_factor: f64,
    /// Standard deviation of the additive pixel noise.
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    /// Balanced test-set size per class.
    #[arg(long, default_value_t = 50)]
    test_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; receives train/ and test/ subdirectories.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory as produced by generate-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for metrics.jsonl, summary.csv, and checkpoint/.
    #[arg(long)]
    out: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory written by train.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory as produced by generate-data.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    /// Experiment configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory as produced by generate-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for summary.csv.
    #[arg(long)]
    out: PathBuf,
    /// Seeds shared by every arm.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    seeds: Vec<u64>,
    /// Arms to run (default: the full component grid plus the raw-feature
    /// augmentation contrast).
    #[arg(long, value_delimiter = ',')]
    arms: Option<Vec<String>>,
}

#[derive(Args)]
struct HistogramArgs {
    /// Checkpoint directory written by train.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image tensor file ([channels, height, width]).
    #[arg(long)]
    image: PathBuf,
    /// Output directory for histogram_<image>.csv.
    #[arg(long)]
    out: PathBuf,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_pair(root: &Path) -> Result<(LongTailDataset, LongTailDataset)> {
    Ok((load_dataset(&root.join("train"))?, load_dataset(&root.join("test"))?))
}

fn print_report(report: &MetricsReport) {
    let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
    println!(
        "overall {:.2}  many {}  medium {}  few {}",
        report.overall_top1,
        cell(report.many_top1),
        cell(report.medium_top1),
        cell(report.few_top1),
    );
}

fn generate(args: GenerateArgs) -> Result<()> {
    let mut rng = Rng::seeded(args.seed);
    let bank = PartBank::default_bank(args.classes, &mut rng)?;
    let spec = LongTailSpec {
        num_classes: args.classes,
        n_max: args.nmax,
        imbalance_factor: args.imbalance_factor,
        seed: args.seed,
    };
    let train = synth_dataset(&spec, &bank, args.noise, &mut rng)?;
    let test_spec = LongTailSpec {
        num_classes: args.classes,
        n_max: args.test_per_class,
        imbalance_factor: 1.0,
        seed: args.seed,
    };
    let test = synth_with_counts(
        &test_spec,
        &bank,
        &vec![args.test_per_class; args.classes],
        args.noise,
        &mut rng,
    )?;
    save_dataset(&train, &args.out.join("train"))?;
    save_dataset(&test, &args.out.join("test"))?;
    println!(
        "wrote {} train and {} test samples across {} classes to {}",
        train.len(),
        test.len(),
        args.classes,
        args.out.display()
    );
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref(), args.seed)?;
    let (train_ds, test_ds) = load_pair(&args.data)?;
    let outcome = train::train_full(&cfg, &train_ds, &test_ds, Some(&args.out))?;
    println!("arm {}  seed {}", arm_name(&cfg), cfg.seed);
    print_report(&outcome.report);
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let (model, _, _) = Model::load(&args.checkpoint)?;
    let (train_ds, test_ds) = load_pair(&args.data)?;
    let splits = split_classes(&train_ds.class_counts);
    let report = evaluate(&model, &test_ds, &splits)?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
    Ok(())
}

fn gradcheck_cmd(args: GradcheckArgs) -> Result<()> {
    let max_rel = gradient_check(args.seed)?;
    println!("max relative gradient error: {max_rel:.3e}");
    if max_rel > 1e-4 {
        return Err(Error::NonFinite(format!("gradient check failed: {max_rel:.3e} exceeds 1e-4")));
    }
    Ok(())
}

fn ablate_cmd(args: AblateArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref(), None)?;
    let (train_ds, test_ds) = load_pair(&args.data)?;
    let owned_arms = args.arms.unwrap_or_else(|| ABLATION_ARMS.map(String::from).to_vec());
    let arms: Vec<&str> = owned_arms.iter().map(String::as_str).collect();
    let rows = run_ablation(&cfg, &train_ds, &test_ds, &arms, &args.seeds)?;
    std::fs::create_dir_all(&args.out)?;
    write_summary(&args.out.join("summary.csv"), &rows)?;
    for (arm, seed, report) in &rows {
        print!("{arm:<12} seed {seed}  ");
        print_report(report);
    }
    Ok(())
}

fn histogram_cmd(args: HistogramArgs) -> Result<()> {
    let (model, _, _) = Model::load(&args.checkpoint)?;
    let image = lcreg::Tensor::load(&args.image)?;
    let weights = export_histogram(&model, &image)?;
    let stem = args
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".to_string());
    std::fs::create_dir_all(&args.out)?;
    let path = args.out.join(format!("histogram_{stem}.csv"));
    write_histogram(&path, &weights)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(args) => generate(args),
        Command::Train(args) => train_cmd(args),
        Command::Eval(args) => eval_cmd(args),
        Command::Gradcheck(args) => gradcheck_cmd(args),
        Command::Ablate(args) => ablate_cmd(args),
        Command::Histogram(args) => histogram_cmd(args),
    }
}

/// Usage-class failures exit 1; genuine runtime failures exit 2.
fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::UnknownStrategy { .. } | Error::InvalidArgument(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
