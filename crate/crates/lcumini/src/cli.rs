//! Command-line surface: train, sample, eval, bench-attention, and
//! export-data. Stdout carries data (CSV); stderr carries diagnostics.

use crate::bench::{bench_attention, BenchRow};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::lcu::TextInstruction;
use crate::model::ModelConfig;
use crate::ppm::{read_mask, read_ppm, write_ppm};
use crate::sampler::{generate, SampleConfig};
use crate::tasks::{export_dataset, make_split, vocab_id, TaskKind, TaskSample, VOCAB};
use crate::tensor::Tensor;
use crate::trainer::{run_stage, AdapterConfig, StageInit, TrainConfig};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "lcumini",
    version,
    about = "Toy instruction-driven image editor: flow-matching transformer over condition units"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training stage and write checkpoints plus a CSV log.
    Train(TrainArgs),
    /// Generate an image from a checkpoint with mask-fill compositing.
    Sample(SampleArgs),
    /// Score a checkpoint on a held-out split (masked MSE / PSNR).
    Eval(EvalArgs),
    /// Compare attention cost at legacy vs channel-concatenated token counts.
    BenchAttention(BenchArgs),
    /// Write a dataset to disk as PPM/PGM files plus a JSONL index.
    ExportData(ExportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Training stage: 1 (0-ref tasks only) or 2 (full mix).
    #[arg(long)]
    stage: Option<u8>,
    /// Config file: `key = value` lines with `#` comments, or a JSON object.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to initialize from (how stage 2 normally starts).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Directory for checkpoints and train_log.csv. Without it the CSV
    /// goes to stdout and no checkpoint is written.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training seed. The LCUMINI_SEED environment variable overrides this.
    #[arg(long)]
    seed: Option<u64>,
    /// Allow stage 2 from random init (the from-scratch baseline).
    #[arg(long)]
    from_scratch: bool,
}

#[derive(Args)]
struct SampleArgs {
    /// Checkpoint file.
    #[arg(long)]
    ckpt: PathBuf,
    /// Input image (PPM, P6).
    #[arg(long)]
    image: PathBuf,
    /// Edit mask (PGM P5 or PPM P6; nonzero means regenerate). Defaults
    /// to all ones (full regeneration).
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Reference image (PPM); repeat for multiple references.
    #[arg(long = "ref")]
    reference: Vec<PathBuf>,
    /// Instruction words, whitespace or comma separated.
    #[arg(long)]
    prompt: Option<String>,
    /// Euler integration steps.
    #[arg(long, default_value_t = 20)]
    steps: usize,
    /// Guidance scale; 1.0 collapses to the conditional branch.
    #[arg(long, default_value_t = 1.0)]
    omega: f64,
    /// Noise seed. The LCUMINI_SEED environment variable overrides this.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output image path (PPM).
    #[arg(long, default_value = "sample_out.ppm")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file.
    #[arg(long)]
    ckpt: PathBuf,
    /// Config file supplying data keys (task, train_samples, test_samples, data_seed).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task mix override, comma separated (inpaint, edge_cond, subject_ref).
    #[arg(long)]
    task: Option<String>,
    /// Test-split size override.
    #[arg(long)]
    samples: Option<usize>,
    /// Euler integration steps.
    #[arg(long, default_value_t = 20)]
    steps: usize,
    /// Guidance scale.
    #[arg(long, default_value_t = 1.0)]
    omega: f64,
    /// Noise seed. The LCUMINI_SEED environment variable overrides this.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    patch: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Timed passes per sequence length (median reported).
    #[arg(long, default_value_t = 7)]
    runs: usize,
}

#[derive(Args)]
struct ExportArgs {
    /// Task mix, comma separated.
    #[arg(long, default_value = "inpaint")]
    task: String,
    #[arg(long, default_value_t = 64)]
    train_samples: usize,
    #[arg(long, default_value_t = 16)]
    test_samples: usize,
    /// Master seed for the split. LCUMINI_SEED overrides.
    #[arg(long, default_value_t = 1000)]
    seed: u64,
    /// Image side length.
    #[arg(long, default_value_t = 16)]
    size: usize,
    /// Output directory (train/ and test/ subdirectories).
    #[arg(long)]
    out: PathBuf,
}

/// Dataset construction knobs, configured alongside the model and
/// training recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub task: Vec<TaskKind>,
    pub train_samples: usize,
    pub test_samples: usize,
    pub data_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            task: vec![TaskKind::Inpaint],
            train_samples: 256,
            test_samples: 32,
            data_seed: 1000,
        }
    }
}

/// Everything a config file can set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigDoc {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
}

enum Value<'a> {
    Text(&'a str),
    Json(&'a serde_json::Value),
}

impl Value<'_> {
    fn f64(&self, key: &str) -> Result<f64> {
        let parsed = match self {
            Value::Text(s) => s.parse::<f64>().ok(),
            Value::Json(v) => v.as_f64(),
        };
        parsed.ok_or_else(|| Error::Config(format!("config key '{key}' wants a number")))
    }

    fn u64(&self, key: &str) -> Result<u64> {
        let parsed = match self {
            Value::Text(s) => s.parse::<u64>().ok(),
            Value::Json(v) => v.as_u64(),
        };
        parsed.ok_or_else(|| Error::Config(format!("config key '{key}' wants a non-negative integer")))
    }

    fn usize(&self, key: &str) -> Result<usize> {
        Ok(self.u64(key)? as usize)
    }

    fn string_list(&self, key: &str) -> Result<Vec<String>> {
        match self {
            Value::Text(s) => Ok(s.split(',').map(|p| p.trim().to_string()).collect()),
            Value::Json(serde_json::Value::String(s)) => {
                Ok(s.split(',').map(|p| p.trim().to_string()).collect())
            }
            Value::Json(serde_json::Value::Array(items)) => items
                .iter()
                .map(|v| {
                    v.as_str().map(str::to_string).ok_or_else(|| {
                        Error::Config(format!("config key '{key}' wants strings"))
                    })
                })
                .collect(),
            Value::Json(_) => Err(Error::Config(format!(
                "config key '{key}' wants a string or list of strings"
            ))),
        }
    }
}

fn adapter_slot(train: &mut TrainConfig) -> &mut AdapterConfig {
    train.adapter.get_or_insert_with(|| AdapterConfig {
        rank: 0,
        alpha: 1.0,
        targets: Vec::new(),
    })
}

fn apply_key(doc: &mut ConfigDoc, key: &str, value: Value<'_>) -> Result<()> {
    match key {
        "lr" => doc.train.lr = value.f64(key)?,
        "weight_decay" => doc.train.weight_decay = value.f64(key)?,
        "clip_norm" => doc.train.clip_norm = value.f64(key)?,
        "uncond_prob" => doc.train.uncond_prob = value.f64(key)?,
        "guidance_scale" => doc.train.guidance_scale = value.f64(key)?,
        "batch_size" => doc.train.batch_size = value.usize(key)?,
        "steps" => doc.train.steps = value.usize(key)?,
        "seed" => doc.train.seed = value.u64(key)?,
        "stage" => doc.train.stage = value.u64(key)? as u8,
        "adapter" => match value {
            Value::Json(v) => {
                let a: AdapterConfig = serde_json::from_value(v.clone())
                    .map_err(|e| Error::Config(format!("bad adapter object: {e}")))?;
                doc.train.adapter = Some(a);
            }
            Value::Text(_) => {
                return Err(Error::Config(
                    "set adapter.rank, adapter.alpha, and adapter.targets individually".into(),
                ))
            }
        },
        "adapter.rank" => adapter_slot(&mut doc.train).rank = value.usize(key)?,
        "adapter.alpha" => adapter_slot(&mut doc.train).alpha = value.f64(key)?,
        "adapter.targets" => adapter_slot(&mut doc.train).targets = value.string_list(key)?,
        "model_dim" => doc.model.model_dim = value.usize(key)?,
        "n_layers" => doc.model.n_layers = value.usize(key)?,
        "n_heads" => doc.model.n_heads = value.usize(key)?,
        "patch" => doc.model.patch = value.usize(key)?,
        "image_size" => doc.model.image_size = value.usize(key)?,
        "vocab_size" => doc.model.vocab_size = value.usize(key)?,
        "max_cus" => doc.model.max_cus = value.usize(key)?,
        "task" => doc.data.task = parse_task_list(&value.string_list(key)?.join(","))?,
        "train_samples" => doc.data.train_samples = value.usize(key)?,
        "test_samples" => doc.data.test_samples = value.usize(key)?,
        "data_seed" => doc.data.data_seed = value.u64(key)?,
        _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
    }
    Ok(())
}

/// Parses a config document: a JSON object, or `key = value` lines
/// with `#` comments. Keys match the config struct field names;
/// adapter fields nest as `adapter.rank` etc. in the line grammar.
pub fn parse_config(text: &str) -> Result<ConfigDoc> {
    let mut doc = ConfigDoc::default();
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        let parsed: serde_json::Value = serde_json::from_str(trimmed)
            .map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        let obj = parsed
            .as_object()
            .ok_or_else(|| Error::Config("JSON config must be an object".into()))?;
        for (key, v) in obj {
            apply_key(&mut doc, key, Value::Json(v))?;
        }
    } else {
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            apply_key(&mut doc, key.trim(), Value::Text(value.trim()))?;
        }
    }
    doc.model.validate()?;
    doc.train.validate()?;
    if doc.data.train_samples == 0 || doc.data.test_samples == 0 {
        return Err(Error::Config("sample counts must be at least 1".into()));
    }
    Ok(doc)
}

fn parse_task_list(spec: &str) -> Result<Vec<TaskKind>> {
    let kinds: Vec<TaskKind> = spec
        .split(',')
        .map(|p| TaskKind::parse(p.trim()))
        .collect::<Result<_>>()?;
    if kinds.is_empty() {
        return Err(Error::Config("empty task list".into()));
    }
    Ok(kinds)
}

fn load_config(path: Option<&Path>) -> Result<ConfigDoc> {
    match path {
        Some(p) => parse_config(&std::fs::read_to_string(p)?),
        None => Ok(ConfigDoc::default()),
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("LCUMINI_SEED") {
        Ok(s) => s
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::Config(format!("LCUMINI_SEED must be an integer, got {s:?}"))),
        Err(_) => Ok(None),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut doc = load_config(args.config.as_deref())?;
    if let Some(stage) = args.stage {
        doc.train.stage = stage;
    }
    if let Some(seed) = args.seed {
        doc.train.seed = seed;
    }
    if let Some(seed) = env_seed()? {
        doc.train.seed = seed;
    }
    doc.train.validate()?;

    // With an init checkpoint, its stored geometry wins over config
    // model keys so the dataset below matches the loaded weights.
    let init = match &args.init {
        Some(path) => {
            let (model, _) = checkpoint::load::<f32>(path)?;
            doc.model = model.config().clone();
            StageInit::Weights(Box::new(model))
        }
        None => StageInit::Fresh(doc.model.clone()),
    };

    let (train_set, _) = make_split::<f32>(
        &doc.data.task,
        doc.data.train_samples,
        doc.data.test_samples,
        doc.data.data_seed,
        doc.model.image_size,
    )?;

    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
    }
    let total_steps = doc.train.steps;
    let mut progress = |r: &crate::trainer::StepRecord| {
        if r.step % 250 == 0 || r.step as usize == total_steps {
            eprintln!(
                "step {}/{} total {:.5} ref {:.5} tar {:.5}",
                r.step, total_steps, r.total, r.reference, r.target
            );
        }
    };
    let (_, report) = run_stage(
        init,
        &train_set,
        &doc.train,
        args.out.as_deref(),
        args.from_scratch,
        Some(&mut progress),
    )?;

    match &args.out {
        Some(dir) => {
            eprintln!(
                "finished {} steps in {:.1}s; wrote {}",
                report.records.len(),
                report.wall_time_secs,
                dir.join("train_log.csv").display()
            );
        }
        None => {
            let mut stdout = std::io::stdout();
            report.write_csv(&mut stdout, &doc.train)?;
        }
    }
    Ok(())
}

fn check_image_geometry(
    what: &str,
    image: &Tensor<f32>,
    channels: usize,
    size: usize,
) -> Result<()> {
    if image.shape() != [channels, size, size] {
        return Err(Error::Geometry(format!(
            "{what} is {:?}, the checkpoint wants [{channels}, {size}, {size}]",
            image.shape()
        )));
    }
    Ok(())
}

fn parse_prompt(prompt: Option<&str>, vocab_size: usize) -> Result<TextInstruction> {
    let Some(text) = prompt else {
        return Ok(TextInstruction::null());
    };
    let words: Vec<&str> = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|w| !w.is_empty())
        .collect();
    if words.is_empty() {
        return Ok(TextInstruction::null());
    }
    let ids = words
        .iter()
        .map(|w| {
            vocab_id(w).ok_or_else(|| {
                Error::Config(format!(
                    "unknown prompt word {w:?}; vocabulary: {}",
                    VOCAB.join(" ")
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TextInstruction::new(ids, vocab_size)
}

fn cmd_sample(args: SampleArgs) -> Result<()> {
    let (model, _) = checkpoint::load::<f32>(&args.ckpt)?;
    let size = model.config().image_size;
    let image = read_ppm::<f32>(&args.image)?;
    check_image_geometry("--image", &image, 3, size)?;
    let mask = match &args.mask {
        Some(p) => {
            let m = read_mask::<f32>(p)?;
            check_image_geometry("--mask", &m, 1, size)?;
            m
        }
        None => Tensor::ones(&[1, size, size]),
    };
    let mut references = Vec::with_capacity(args.reference.len());
    for p in &args.reference {
        let r = read_ppm::<f32>(p)?;
        check_image_geometry("--ref", &r, 3, size)?;
        references.push(r);
    }
    let instruction = parse_prompt(args.prompt.as_deref(), model.config().vocab_size)?;
    let mut seed = args.seed;
    if let Some(s) = env_seed()? {
        seed = s;
    }
    let cfg = SampleConfig {
        steps: args.steps,
        guidance_scale: args.omega,
        seed,
    };
    if cfg.guidance_scale == 1.0 {
        eprintln!("guidance scale 1.0: 1 forward pass per step");
    } else {
        eprintln!(
            "guidance scale {}: 2 forward passes per step",
            cfg.guidance_scale
        );
    }
    let out = generate(&model, &references, &image, &mask, &instruction, &cfg)?;
    write_ppm(&args.out, &out.image)?;
    eprintln!(
        "wrote {} ({} model evaluations)",
        args.out.display(),
        out.model_evals
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (model, _) = checkpoint::load::<f32>(&args.ckpt)?;
    let mut doc = load_config(args.config.as_deref())?;
    if let Some(task) = &args.task {
        doc.data.task = parse_task_list(task)?;
    }
    if let Some(n) = args.samples {
        doc.data.test_samples = n;
    }
    let (_, test_set): (Vec<TaskSample<f32>>, _) = make_split(
        &doc.data.task,
        doc.data.train_samples,
        doc.data.test_samples,
        doc.data.data_seed,
        model.config().image_size,
    )?;
    let mut seed = args.seed;
    if let Some(s) = env_seed()? {
        seed = s;
    }
    let cfg = SampleConfig {
        steps: args.steps,
        guidance_scale: args.omega,
        seed,
    };
    let summary = evaluate(&model, &test_set, &cfg)?;
    println!("samples,mean_mse,mean_psnr");
    println!(
        "{},{},{}",
        summary.rows.len(),
        summary.mean_mse,
        summary.mean_psnr
    );
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let row = bench_attention(args.height, args.width, args.patch, args.dim, args.runs)?;
    println!("{}", BenchRow::csv_header());
    println!("{}", row.csv_row());
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<()> {
    let kinds = parse_task_list(&args.task)?;
    let mut seed = args.seed;
    if let Some(s) = env_seed()? {
        seed = s;
    }
    let (train, test) =
        make_split::<f32>(&kinds, args.train_samples, args.test_samples, seed, args.size)?;
    let train_dir = args.out.join("train");
    let test_dir = args.out.join("test");
    std::fs::create_dir_all(&train_dir)?;
    std::fs::create_dir_all(&test_dir)?;
    export_dataset(&train, &train_dir)?;
    export_dataset(&test, &test_dir)?;
    eprintln!(
        "wrote {} train and {} test samples under {}",
        train.len(),
        test.len(),
        args.out.display()
    );
    Ok(())
}

impl Cli {
    pub fn run(self) -> Result<()> {
        match self.command {
            Command::Train(a) => cmd_train(a),
            Command::Sample(a) => cmd_sample(a),
            Command::Eval(a) => cmd_eval(a),
            Command::BenchAttention(a) => cmd_bench(a),
            Command::ExportData(a) => cmd_export(a),
        }
    }
}
