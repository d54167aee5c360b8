//! Command-line front end: dataset generation, training and fine-tuning,
//! evaluation, PLY export of assemblies, and gradient verification.
//!
//! Configuration comes from an optional TOML file (sections `[model]`,
//! `[train]`, `[generator]`; unknown keys are rejected) with individual
//! flags overriding file values. Every command echoes its effective
//! configuration so a run can be reproduced from its output alone.
//!
//! Exit codes: 0 on success, 1 on runtime failure (one-line diagnostic on
//! stderr), 2 on bad flags.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use partasm_core::data::{
    generate, load_dataset, manifest, save_dataset, AssemblySample, Category, GeneratorSpec,
    Split,
};
use partasm_core::metrics::{inprocess_eval, mmd_select, MetricReport, DEFAULT_MMD_K};
use partasm_core::model::{AssemblyModel, ModelConfig};
use partasm_core::train::{
    evaluate_run, inprocess_finetune, load_checkpoint, model_grad_check,
    train_run, TrainConfig,
};
use partasm_core::{PartCloud, Pose};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable holding the default run directory.
const RUN_DIR_ENV: &str = "PARTASM_RUN_DIR";

/// Acceptance bound for the finite-difference check.
const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Parser)]
#[command(
    name = "partasm",
    version,
    about = "Synthetic 3D part assembly: data, training, evaluation, export"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic furniture dataset file.
    GenData(GenDataArgs),
    /// Train a model, or fine-tune its decoder against pinned contexts.
    Train(TrainArgs),
    /// Evaluate a checkpoint over a dataset split.
    Eval(EvalArgs),
    /// Pose one shape and export predicted and ground-truth assemblies as
    /// ASCII PLY point clouds (one colored point per vertex).
    Assemble(AssembleArgs),
    /// Leave-one-out evaluation: each part is re-posed against the rest of
    /// its shape pinned at ground truth.
    InprocessEval(InprocessEvalArgs),
    /// Finite-difference verification of the full model's gradients.
    Gradcheck(GradcheckArgs),
}

/// Optional TOML configuration. Missing sections fall back to defaults;
/// unknown keys anywhere are errors.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    model: ModelConfig,
    train: TrainConfig,
    generator: Option<GeneratorSpec>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<FileConfig> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }
}

fn default_run_dir() -> PathBuf {
    std::env::var_os(RUN_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("partasm-run"))
}

fn echo_config(tag: &str, value: &impl Serialize) {
    println!(
        "config[{tag}]: {}",
        serde_json::to_string(value).expect("config serializes")
    );
}

fn split_filter(samples: Vec<AssemblySample>, split: Option<Split>) -> Vec<AssemblySample> {
    match split {
        None => samples,
        Some(s) => samples.into_iter().filter(|x| x.split == s).collect(),
    }
}

fn print_report(report: &MetricReport) {
    println!("{}", report.summary());
}

#[derive(clap::Args)]
struct GenDataArgs {
    /// TOML config supplying `[generator]` defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    category: Option<Category>,
    /// Points sampled per part.
    #[arg(long)]
    n_pc: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of shapes to generate.
    #[arg(long, default_value_t = 64)]
    count: usize,
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let base = file.generator.unwrap_or(GeneratorSpec {
        category: Category::Chair,
        n_pc: 128,
        seed: 0,
    });
    let spec = GeneratorSpec {
        category: args.category.unwrap_or(base.category),
        n_pc: args.n_pc.unwrap_or(base.n_pc),
        seed: args.seed.unwrap_or(base.seed),
    };
    echo_config("generator", &spec);
    let samples = generate(&spec, args.count)?;
    save_dataset(&args.out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), args.out.display());
    print!("{}", manifest(&samples));
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TrainMode {
    /// Train the whole network on complete shapes.
    Full,
    /// Freeze the encoder and fine-tune the decoder on query parts posed
    /// against pinned contexts.
    Inprocess,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// TOML config supplying `[model]` and `[train]` values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory; defaults to $PARTASM_RUN_DIR or ./partasm-run.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = TrainMode::Full)]
    mode: TrainMode,
    /// Starting checkpoint; required for in-process fine-tuning.
    #[arg(long, required_if_eq("mode", "inprocess"))]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stop once validation part accuracy reaches this value.
    #[arg(long)]
    stop_at_val_pa: Option<f64>,
}

fn train(args: TrainArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let mut config = file.train;
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if args.stop_at_val_pa.is_some() {
        config.stop_at_val_pa = args.stop_at_val_pa;
    }
    let run_dir = args.run_dir.unwrap_or_else(default_run_dir);

    let mut model = match &args.ckpt {
        Some(p) => load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?,
        None => AssemblyModel::init(file.model, config.seed)?,
    };
    echo_config("model", model.config());
    echo_config("train", &config);

    let samples = load_dataset(&args.data)?;
    let train_set = split_filter(samples.clone(), Some(Split::Train));
    let val_set = split_filter(samples, Some(Split::Val));

    match args.mode {
        TrainMode::Full => {
            let outcome = train_run(&mut model, &train_set, &val_set, &config, Some(&run_dir))?;
            let last = outcome.record.epochs.last().expect("at least one epoch");
            println!(
                "trained {} epochs; final loss {:.6}; best val PA {:?} (epoch {:?})",
                outcome.record.epochs.len(),
                last.train_total,
                outcome.record.best_val_pa,
                outcome.record.best_epoch,
            );
        }
        TrainMode::Inprocess => {
            let record = inprocess_finetune(&mut model, &train_set, &config, Some(&run_dir))?;
            let last = record.epochs.last().expect("at least one epoch");
            println!(
                "fine-tuned decoder for {} epochs; final loss {:.6}",
                record.epochs.len(),
                last.train_total,
            );
        }
    }
    println!("run directory: {}", run_dir.display());
    Ok(())
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Restrict to one split; omit to use every sample.
    #[arg(long)]
    split: Option<Split>,
    /// Pose draws per shape; the best assembly by shape distance counts.
    #[arg(long, default_value_t = DEFAULT_MMD_K)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where the report JSON is written.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

fn eval(args: EvalArgs) -> Result<()> {
    let model = load_checkpoint(&args.ckpt)?;
    echo_config("model", model.config());
    let samples = split_filter(load_dataset(&args.data)?, args.split);
    let report = evaluate_run(&model, &samples, args.k, args.seed)?;
    print_report(&report);
    let run_dir = args.run_dir.unwrap_or_else(default_run_dir);
    std::fs::create_dir_all(&run_dir)?;
    let out = run_dir.join("eval_report.json");
    std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
    println!("report written to {}", out.display());
    Ok(())
}

#[derive(clap::Args)]
struct AssembleArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Which sample of the dataset file to assemble.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the PLY files.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn assemble(args: AssembleArgs) -> Result<()> {
    let model = load_checkpoint(&args.ckpt)?;
    let samples = load_dataset(&args.data)?;
    let sample = samples
        .get(args.index)
        .with_context(|| format!("sample {} of {} requested", args.index, samples.len()))?;
    echo_config("model", model.config());
    let picked = mmd_select(&model, sample, args.k, args.seed)?;
    let out_dir = args.out_dir.unwrap_or_else(default_run_dir);
    std::fs::create_dir_all(&out_dir)?;
    let pred = out_dir.join(format!("sample-{}-pred.ply", sample.id));
    let gt = out_dir.join(format!("sample-{}-gt.ply", sample.id));
    write_ply(&pred, &sample.parts, &picked.poses)?;
    write_ply(&gt, &sample.parts, &sample.gt_poses)?;
    println!(
        "assembled sample {} ({} parts): SCD {:.6}, PA {:.1}",
        sample.id,
        sample.n_parts(),
        picked.metrics.scd,
        picked.metrics.pa,
    );
    println!("wrote {}", pred.display());
    println!("wrote {}", gt.display());
    Ok(())
}

#[derive(clap::Args)]
struct InprocessEvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    split: Option<Split>,
    /// Evaluate at most this many shapes.
    #[arg(long)]
    limit: Option<usize>,
}

fn inprocess_eval_cmd(args: InprocessEvalArgs) -> Result<()> {
    let model = load_checkpoint(&args.ckpt)?;
    echo_config("model", model.config());
    let mut samples = split_filter(load_dataset(&args.data)?, args.split);
    if let Some(limit) = args.limit {
        samples.truncate(limit);
    }
    if samples.is_empty() {
        bail!("no samples selected");
    }
    let mut means = Vec::with_capacity(samples.len());
    for s in &samples {
        let report = inprocess_eval(&model, s)?;
        println!(
            "sample {}: PA {:.1} over {} parts",
            s.id,
            report.mean.pa,
            report.per_part.len()
        );
        means.push(report.mean);
    }
    print_report(&MetricReport::aggregate(means));
    Ok(())
}

#[derive(clap::Args)]
struct GradcheckArgs {
    /// TOML config supplying `[model]`; omit for a small built-in model.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    parts: usize,
    #[arg(long, default_value_t = 16)]
    points: usize,
    /// Elements probed per parameter tensor.
    #[arg(long, default_value_t = 3)]
    per_param: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let model_config = match &args.config {
        Some(_) => FileConfig::load(args.config.as_deref())?.model,
        None => ModelConfig {
            d_model: 32,
            n_heads: 4,
            n_layers: 6,
            noise_dim: 8,
            max_parts: 8,
            n_pc: 16,
            head_hidden: 32,
            use_instance_encoding: true,
        },
    };
    echo_config("model", &model_config);
    let worst = model_grad_check(&model_config, args.parts, args.points, args.per_param, args.seed)?;
    println!("max relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})");
    if worst >= GRADCHECK_TOLERANCE {
        bail!("gradient check failed: {worst:.3e} >= {GRADCHECK_TOLERANCE:.0e}");
    }
    Ok(())
}

/// Distinct part colors; index `i` wears `PALETTE[i % len]`.
const PALETTE: [[u8; 3]; 20] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
    [128, 128, 0],
    [255, 215, 180],
    [0, 0, 128],
    [128, 128, 128],
];

/// ASCII PLY export: every transformed part point becomes one colored
/// vertex, so a file holds exactly (parts x points-per-part) vertices.
fn write_ply(path: &Path, parts: &[PartCloud], poses: &[Pose]) -> Result<()> {
    use std::io::Write as _;
    if parts.len() != poses.len() {
        bail!("{} parts but {} poses", parts.len(), poses.len());
    }
    let total: usize = parts.iter().map(|p| p.len()).sum();
    let file = std::fs::File::create(path)
        .with_context(|| format!("creating {}", path.display()))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "comment one point per vertex, colored by part index")?;
    writeln!(w, "element vertex {total}")?;
    writeln!(w, "property float x")?;
    writeln!(w, "property float y")?;
    writeln!(w, "property float z")?;
    writeln!(w, "property uchar red")?;
    writeln!(w, "property uchar green")?;
    writeln!(w, "property uchar blue")?;
    writeln!(w, "end_header")?;
    for (i, (part, pose)) in parts.iter().zip(poses).enumerate() {
        let [r, g, b] = PALETTE[i % PALETTE.len()];
        for &p in part.points() {
            let [x, y, z] = pose.apply(p);
            writeln!(w, "{x} {y} {z} {r} {g} {b}")?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Assemble(args) => assemble(args),
        Command::InprocessEval(args) => inprocess_eval_cmd(args),
        Command::Gradcheck(args) => gradcheck(args),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
