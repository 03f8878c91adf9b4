//! `vle`: train, evaluate, decompose and analyse variable length embedding models.

mod manifest;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use vle_core::codec::stub::LinearStub;
use vle_core::engine::{natural_variant, run, LoopConfig, Variant};
use vle_core::metrics::{
    eval_table, fig1_analysis, fig2_analysis, mean_mse_by_n, write_eval_csv, write_fig1_csv, write_fig2_csv,
};
use vle_core::synth::{blob_dataset, ladder_dataset, write_dataset};
use vle_core::training::{
    ingest_dataset, load_checkpoint, load_image, run_training, save_png, Checkpoint, TrainConfig, Trainer,
};
use vle_core::{Codec, ImageBatch, VleError};

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "vle", version, about = "Variable length embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints, a CSV log and a manifest.
    Train(TrainArgs),
    /// Write every intermediate reconstruction (and mask) for one image.
    Decompose(DecomposeArgs),
    /// Per-image MSE and SSIM at the requested token counts.
    Eval(EvalArgs),
    /// Figure analyses.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Generate a seeded synthetic dataset of PNG files.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint (its config is the base for overrides).
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    n_min: Option<usize>,
    #[arg(long)]
    n_cap: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Total optimizer steps.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecomposeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 5)]
    n_tokens: usize,
    /// Ask for mask images (always written for masked models).
    #[arg(long)]
    masks: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated token counts, e.g. `1,2,4`.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    n_list: Vec<usize>,
    /// Shuffle seed for dataset ingestion.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// MSE distribution per token count, for one or more models.
    Fig1(Fig1Args),
    /// Image entropy against tokens needed to reach an MSE threshold.
    Fig2(Fig2Args),
}

#[derive(Args)]
struct Fig1Args {
    /// Main model, reported as `vle`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Fixed-length baseline (trained with one token), reported as `baseline`.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Add a linear stub whose encode∘decode scales by this factor, reported as `stub`.
    #[arg(long)]
    stub_alpha: Option<f64>,
    #[arg(long)]
    data: PathBuf,
    /// Image size used when no checkpoint fixes it.
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 8)]
    n_eval_max: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Fig2Args {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// MSE threshold; there is no canonical value, so it must be given.
    #[arg(long)]
    tau: f64,
    #[arg(long, default_value_t = 8)]
    n_cap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Blobs,
    Ladder,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(value_enum)]
    kind: SynthKind,
    /// Image count (blobs) or images per level count (ladder).
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

type CmdResult = Result<PathBuf, VleError>;

fn to_json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn create(path: &Path) -> Result<BufWriter<File>, VleError> {
    Ok(BufWriter::new(File::create(path)?))
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut m = RunManifest::start("train");
    let resumed = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let mut config = match (&resumed, &a.config) {
        (_, Some(path)) => TrainConfig::from_toml_str(&std::fs::read_to_string(path)?)?,
        (Some(ckpt), None) => ckpt.config.clone(),
        (None, None) => TrainConfig::default(),
    };
    if let Some(v) = a.variant {
        config.variant = v;
    }
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = a.$field {
                config.$field = v;
            }
        )*};
    }
    set!(n_min, n_cap, seed, batch_size, lr, checkpoint_every);
    if let Some(v) = a.steps {
        config.total_steps = v;
    }
    if let Some(root) = &a.data_root {
        config.data_root = Some(root.to_string_lossy().into_owned());
    }
    config.validate()?;
    let root = config
        .data_root
        .clone()
        .ok_or_else(|| VleError::Config("data_root is required (config key or --data-root)".into()))?;
    let data = ingest_dataset(Path::new(&root), config.image_size, config.seed)?;

    let trainer = match resumed {
        Some(ckpt) => Trainer::from_checkpoint(ckpt, Some(config.clone()))?,
        None => Trainer::new(config.clone())?,
    };
    let start_step = trainer.global_step();
    let ckpt = run_training(trainer, &data, Some(&a.out))?;

    m.seed = Some(config.seed);
    m.config = to_json(&config);
    m.outputs = vec![a.out.join("final.vle"), a.out.join("train_log.csv")];
    m.results = json!({
        "images": data.len(),
        "skipped_images": data.skipped(),
        "start_step": start_step,
        "global_step": ckpt.global_step,
        "parameter_count": ckpt.codec.parameter_count(),
    });
    m.finish(&a.out)?;
    Ok(a.out.join("final.vle"))
}

fn cmd_decompose(a: DecomposeArgs) -> CmdResult {
    let mut m = RunManifest::start("decompose");
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let x = ImageBatch::new(load_image(&a.image, ckpt.config.image_size)?)?;
    let variant = natural_variant(&ckpt.codec);
    let trace = run(&ckpt.codec, &x, LoopConfig::new(a.n_tokens, variant))?;
    std::fs::create_dir_all(&a.out)?;
    let write_masks = variant == Variant::Masked;
    if a.masks && !write_masks {
        eprintln!("notice: vanilla checkpoint has no masks; mask images omitted");
    }
    let mut outputs = Vec::new();
    for (i, step) in trace.steps().iter().enumerate() {
        let n = i + 1;
        let path = a.out.join(format!("reconstruction_{n}.png"));
        save_png(&step.recon, &path)?;
        outputs.push(path);
        if let (true, Some(mask)) = (write_masks, &step.mask) {
            let path = a.out.join(format!("mask_{n}.png"));
            save_png(mask, &path)?;
            outputs.push(path);
        }
    }
    let last = &trace.steps().last().expect("n_tokens ≥ 1").recon;
    for (name, t) in [("final_reconstruction.png", last), ("source.png", x.tensor())] {
        let path = a.out.join(name);
        save_png(t, &path)?;
        outputs.push(path);
    }
    m.config = json!({
        "checkpoint": a.checkpoint,
        "image": a.image,
        "n_tokens": a.n_tokens,
        "variant": variant.to_string(),
    });
    m.seed = Some(ckpt.config.seed);
    m.outputs = outputs;
    m.finish(&a.out)?;
    Ok(a.out)
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let mut m = RunManifest::start("eval");
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let data = ingest_dataset(&a.data, ckpt.config.image_size, a.seed)?;
    let rows = eval_table(&ckpt.codec, &data, &a.n_list)?;
    std::fs::create_dir_all(&a.out)?;
    let csv = a.out.join("eval.csv");
    write_eval_csv(create(&csv)?, &rows)?;
    let means: Vec<_> = a
        .n_list
        .iter()
        .map(|&n| {
            let sel: Vec<_> = rows.iter().filter(|r| r.n_tokens == n).collect();
            let k = sel.len() as f64;
            json!({
                "n": n,
                "mean_mse": sel.iter().map(|r| r.mse).sum::<f64>() / k,
                "mean_ssim": sel.iter().map(|r| r.ssim).sum::<f64>() / k,
            })
        })
        .collect();
    m.seed = Some(a.seed);
    m.config = json!({ "checkpoint": a.checkpoint, "data": a.data, "n_list": a.n_list, "train_config": to_json(&ckpt.config) });
    m.outputs = vec![csv.clone()];
    m.results = json!({
        "parameter_count": ckpt.codec.parameter_count(),
        "images": data.len(),
        "skipped_images": data.skipped(),
        "means": means,
    });
    m.finish(&a.out)?;
    Ok(csv)
}

fn cmd_fig1(a: Fig1Args) -> CmdResult {
    let mut m = RunManifest::start("analyze fig1");
    let load = |p: &Option<PathBuf>| p.as_deref().map(load_checkpoint).transpose();
    let (main, baseline) = (load(&a.checkpoint)?, load(&a.baseline)?);
    let stub = a.stub_alpha.map(|alpha| LinearStub { alpha });
    let image_size = main.iter().chain(&baseline).map(|c| c.config.image_size).next().unwrap_or(a.image_size);
    if let (Some(x), Some(y)) = (&main, &baseline) {
        if x.config.image_size != y.config.image_size {
            return Err(VleError::Config("checkpoints were trained at different image sizes".into()));
        }
    }
    let mut models: Vec<(&str, &(dyn Codec<f32> + Sync))> = Vec::new();
    let mut params = serde_json::Map::new();
    for (name, ckpt) in [("vle", &main), ("baseline", &baseline)] {
        if let Some(c) = ckpt {
            models.push((name, &c.codec));
            params.insert(name.into(), json!(c.codec.parameter_count()));
        }
    }
    if let Some(s) = &stub {
        models.push(("stub", s));
    }
    if models.is_empty() {
        return Err(VleError::Config("give at least one of --checkpoint, --baseline, --stub-alpha".into()));
    }
    let data = ingest_dataset(&a.data, image_size, a.seed)?;
    let rows = fig1_analysis(&models, &data, a.n_eval_max)?;
    std::fs::create_dir_all(&a.out)?;
    let csv = a.out.join("fig1.csv");
    write_fig1_csv(create(&csv)?, &rows)?;
    let means: serde_json::Map<_, _> = models
        .iter()
        .map(|(name, _)| {
            let per_n: Vec<_> = mean_mse_by_n(&rows, name).into_iter().map(|(n, v)| json!({"n": n, "mean_mse": v})).collect();
            (name.to_string(), json!(per_n))
        })
        .collect();
    m.seed = Some(a.seed);
    m.config = json!({
        "checkpoint": a.checkpoint,
        "baseline": a.baseline,
        "stub_alpha": a.stub_alpha,
        "data": a.data,
        "image_size": image_size,
        "n_eval_max": a.n_eval_max,
    });
    m.outputs = vec![csv.clone()];
    m.results = json!({ "images": data.len(), "parameter_count": params, "mean_mse": means });
    m.finish(&a.out)?;
    Ok(csv)
}

fn cmd_fig2(a: Fig2Args) -> CmdResult {
    let mut m = RunManifest::start("analyze fig2");
    let ckpt: Checkpoint = load_checkpoint(&a.checkpoint)?;
    let data = ingest_dataset(&a.data, ckpt.config.image_size, a.seed)?;
    let report = fig2_analysis(&ckpt.codec, &data, a.tau, a.n_cap)?;
    std::fs::create_dir_all(&a.out)?;
    let csv = a.out.join("fig2.csv");
    write_fig2_csv(create(&csv)?, &report.rows)?;
    m.seed = Some(a.seed);
    m.config = json!({ "checkpoint": a.checkpoint, "data": a.data, "tau": a.tau, "n_cap": a.n_cap });
    m.outputs = vec![csv.clone()];
    m.results = json!({
        "images": report.rows.len(),
        "included": report.included,
        "sentinel": a.n_cap + 1,
        // null when undefined (fewer than two usable images, or no variation).
        "spearman": report.spearman,
    });
    m.finish(&a.out)?;
    Ok(csv)
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let mut m = RunManifest::start("synth");
    let (kind, data) = match a.kind {
        SynthKind::Blobs => ("blobs", blob_dataset(a.count, a.size, a.seed)?),
        SynthKind::Ladder => ("ladder", ladder_dataset(a.count, a.size, a.seed)?),
    };
    write_dataset(&data, &a.out)?;
    m.seed = Some(a.seed);
    m.config = json!({ "kind": kind, "count": a.count, "size": a.size });
    m.outputs = vec![a.out.clone()];
    m.results = json!({ "images": data.len() });
    m.finish(&a.out)?;
    Ok(a.out)
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            // Everything clap says before its usage block, on one line.
            let msg = e.render().to_string();
            let head = msg.split("\nUsage:").next().unwrap_or("usage error");
            eprintln!("{}", json!({ "error": "usage", "message": one_line(head) }));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Decompose(a) => cmd_decompose(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Analyze(AnalyzeCommand::Fig1(a)) => cmd_fig1(a),
        Command::Analyze(AnalyzeCommand::Fig2(a)) => cmd_fig2(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": one_line(&e.to_string()) }));
            ExitCode::FAILURE
        }
    }
}
