//! `rxlora`: data generation, augmentation, training, prediction and
//! evaluation from the command line.
//!
//! Every option can also be given as a `key = value` line in the file named
//! by `--config`; flags on the command line win.

mod config;
mod manifest;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rxlora_core::corpus::{generate_synthetic_with_map, Corpus, SyntheticSpec};
use rxlora_core::lm::{load_base, load_checkpoint, save_adapters, save_base, InferenceModel, ModelConfig, ModelParams};
use rxlora_core::metrics::{build_baseline, corpus_eval, EvalReport};
use rxlora_core::prescription::Prescription;
use rxlora_core::sampler::{predict_all, SamplerConfig};
use rxlora_core::tokenizer::Vocabulary;
use rxlora_core::trainer::{train_with, TrainConfig, TrainError, TrainEvent};
use serde::{Deserialize, Serialize};
use serde_json::json;

use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "rxlora", version, about = "LoRA fine-tuning of a small language model for prescription generation")]
struct Cli {
    /// File of `key = value` lines supplying defaults for any flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus and its symptom-to-herb map.
    GenData(GenDataArgs),
    /// Split a corpus into train and test files.
    Split(SplitArgs),
    /// Write K shuffled copies of every record.
    Augment(AugmentArgs),
    /// Print herbs-per-prescription statistics.
    Stats(StatsArgs),
    /// Fine-tune adapters on a corpus.
    Train(TrainArgs),
    /// Generate prescriptions for a file of records.
    Predict(PredictArgs),
    /// Score predictions against the true prescriptions.
    Eval(EvalArgs),
}

#[derive(Args, Debug, Serialize)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 50)]
    herbs: usize,
    #[arg(long, default_value_t = 6.0)]
    herbs_mean: f64,
    #[arg(long, default_value_t = 0.0)]
    herbs_std: f64,
    #[arg(long, default_value_t = 40)]
    symptoms: usize,
    #[arg(long, default_value_t = 3)]
    symptoms_per_record: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct SplitArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    train_out: PathBuf,
    #[arg(long)]
    test_out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    test_fraction: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct AugmentArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct StatsArgs {
    #[arg(long)]
    input: PathBuf,
    /// Dataset label for the table row.
    #[arg(long, default_value = "corpus")]
    name: String,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Training corpus (already augmented if desired).
    #[arg(long)]
    corpus: PathBuf,
    /// Directory for vocabulary, checkpoints, log and manifest.
    #[arg(long)]
    out_dir: PathBuf,
    /// Reuse this vocabulary instead of building one from the corpus.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Start from this base checkpoint instead of a fresh one; needs `--vocab`.
    #[arg(long, requires = "vocab")]
    base: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 8)]
    accum: usize,
    #[arg(long, default_value_t = 16)]
    rank: usize,
    #[arg(long, default_value_t = 32.0)]
    alpha: f32,
    #[arg(long, default_value_t = 128)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 512)]
    d_ff: usize,
    #[arg(long, default_value_t = 512)]
    max_seq_len: usize,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    loss_masking: bool,
    /// Also save adapters after every epoch.
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    epoch_checkpoints: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct ModelFiles {
    /// Directory written by `train`; supplies any file not given explicitly.
    #[arg(long)]
    model_dir: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    adapters: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct PredictArgs {
    #[command(flatten)]
    model: ModelFiles,
    /// Records to predict for (JSONL).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    top_k: usize,
    #[arg(long, default_value_t = 0.7)]
    top_p: f64,
    #[arg(long, default_value_t = 0.95)]
    temperature: f64,
    #[arg(long, default_value_t = 160)]
    max_new_tokens: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    /// Records holding the true prescriptions (JSONL).
    #[arg(long)]
    truth: PathBuf,
    /// Output of `predict`, one line per record.
    #[arg(long)]
    pred: PathBuf,
    /// Training corpus for the average-dosage baseline.
    #[arg(long)]
    train: PathBuf,
    /// JSON report path.
    #[arg(long)]
    out: PathBuf,
}

/// Bad flag values caught after parsing; exits like a clap usage error.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// 1 for usage errors, 3 for numeric failures, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(TrainError::NonFiniteLoss { .. }) = cause.downcast_ref::<TrainError>() {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let cli = match config::apply_config_file(args).map(Cli::try_parse_from) {
        Ok(Ok(cli)) => cli,
        Ok(Err(e)) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads.unwrap_or(0);
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(UsageError("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let started = Instant::now();
    let mut manifest = match &cli.command {
        Command::GenData(a) => gen_data(a)?,
        Command::Split(a) => split(a)?,
        Command::Augment(a) => augment(a)?,
        Command::Stats(a) => return stats(a),
        Command::Train(a) => train(a)?,
        Command::Predict(a) => predict(a)?,
        Command::Eval(a) => eval(a)?,
    };
    manifest.threads = threads;
    manifest.timings.insert("total_seconds".into(), started.elapsed().as_secs_f64());
    manifest.write()
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    Corpus::load_jsonl(path).with_context(|| format!("reading {}", path.display()))
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn gen_data(a: &GenDataArgs) -> Result<RunManifest> {
    let spec = SyntheticSpec {
        n_records: a.n,
        n_herbs: a.herbs,
        herbs_per_rx_mean: a.herbs_mean,
        herbs_per_rx_std: a.herbs_std,
        n_symptom_tokens: a.symptoms,
        symptoms_per_record: a.symptoms_per_record,
        rng_seed: a.seed,
    };
    let generated = generate_synthetic_with_map(&spec)?;
    generated.corpus.write_jsonl(&a.out)?;
    let map_path = sidecar(&a.out, ".map.json");
    write_json(
        &map_path,
        &json!({ "symptom_map": generated.symptom_map, "base_dosage": generated.base_dosage }),
    )?;
    let mut m = RunManifest::new("gen-data", json!({ "args": a, "spec": spec }), sidecar(&a.out, ".manifest.json"));
    m.outputs = vec![a.out.clone(), map_path];
    Ok(m)
}

fn split(a: &SplitArgs) -> Result<RunManifest> {
    let corpus = load_corpus(&a.input)?;
    let (train, test) = corpus.split(a.test_fraction, a.seed)?;
    train.write_jsonl(&a.train_out)?;
    test.write_jsonl(&a.test_out)?;
    println!("train {}  test {}", train.len(), test.len());
    let mut m = RunManifest::new("split", json!(a), sidecar(&a.train_out, ".manifest.json"));
    m.inputs = vec![a.input.clone()];
    m.outputs = vec![a.train_out.clone(), a.test_out.clone()];
    Ok(m)
}

fn augment(a: &AugmentArgs) -> Result<RunManifest> {
    if a.k == 0 {
        bail!(UsageError("--k must be at least 1".into()));
    }
    let corpus = load_corpus(&a.input)?;
    let out = corpus.augment_permute(a.k, a.seed);
    out.write_jsonl(&a.out)?;
    println!("{} records -> {} records", corpus.len(), out.len());
    let mut m = RunManifest::new("augment", json!(a), sidecar(&a.out, ".manifest.json"));
    m.inputs = vec![a.input.clone()];
    m.outputs = vec![a.out.clone()];
    Ok(m)
}

fn stats(a: &StatsArgs) -> Result<()> {
    let s = load_corpus(&a.input)?.stats()?;
    println!("{}", rxlora_core::corpus::CorpusStats::HEADER);
    println!("{}", s.table_row(&a.name));
    Ok(())
}

fn train(a: &TrainArgs) -> Result<RunManifest> {
    let corpus = load_corpus(&a.corpus)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let vocab = match &a.vocab {
        Some(p) => Vocabulary::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => Vocabulary::build(&corpus)?,
    };
    let model_cfg = ModelConfig {
        vocab_size: vocab.len(),
        d_model: a.d_model,
        n_layers: a.layers,
        n_heads: a.heads,
        d_ff: a.d_ff,
        max_seq_len: a.max_seq_len,
        lora_rank: a.rank,
        lora_alpha: a.alpha,
    };
    model_cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    let params = match &a.base {
        Some(base) => {
            let (config, weights) = load_base(base).with_context(|| format!("reading {}", base.display()))?;
            if config.vocab_size != vocab.len() {
                bail!("base checkpoint vocabulary size {} does not match the vocabulary ({})", config.vocab_size, vocab.len());
            }
            ModelParams::with_fresh_adapters(config, weights, a.seed)?
        }
        None => ModelParams::init(model_cfg, a.seed)?,
    };
    let train_cfg = TrainConfig {
        epochs: a.epochs,
        base_lr: a.lr,
        batch_size: a.batch_size,
        grad_accum_steps: a.accum,
        seed: a.seed,
        loss_masking: a.loss_masking,
    };
    train_cfg.validate().map_err(|e| UsageError(e.to_string()))?;

    let vocab_path = a.out_dir.join("vocab.json");
    vocab.save(&vocab_path)?;
    let mut outputs = vec![vocab_path];
    let mut epoch_times = Vec::new();
    let clock = Instant::now();
    let (params, log) = train_with(params, &corpus, &vocab, &train_cfg, |event| {
        match event {
            TrainEvent::Step(e) => {
                if e.step % 10 == 0 {
                    eprintln!("step {:>6}  epoch {:>3}  lr {:.3e}  loss {:.4}", e.step, e.epoch, e.lr, e.loss);
                }
            }
            TrainEvent::EpochEnd { epoch, params } => {
                epoch_times.push(clock.elapsed().as_secs_f64());
                if a.epoch_checkpoints {
                    let p = a.out_dir.join(format!("adapters.epoch{}.ckpt", epoch + 1));
                    save_adapters(params, &p).map_err(|e| TrainError::Callback(e.to_string()))?;
                    outputs.push(p);
                }
            }
        }
        Ok(())
    })?;

    let base_path = a.out_dir.join("base.ckpt");
    let adapter_path = a.out_dir.join("adapters.ckpt");
    let log_path = a.out_dir.join("train_log.csv");
    save_base(&params, &base_path)?;
    save_adapters(&params, &adapter_path)?;
    log.write_csv(BufWriter::new(File::create(&log_path)?))?;
    outputs.extend([base_path, adapter_path, log_path]);
    eprintln!(
        "trained {} steps; {} trainable of {} base parameters ({:.2}%)",
        log.entries.len(),
        params.adapter_param_count(),
        params.base_param_count(),
        100.0 * params.trainable_ratio()
    );

    let mut m = RunManifest::new(
        "train",
        json!({ "args": a, "model": params.config, "train": train_cfg }),
        a.out_dir.join("manifest.json"),
    );
    m.inputs = [Some(a.corpus.clone()), a.vocab.clone(), a.base.clone()].into_iter().flatten().collect();
    m.outputs = outputs;
    for (i, t) in epoch_times.into_iter().enumerate() {
        m.timings.insert(format!("epoch_{}_end_seconds", i + 1), t);
    }
    Ok(m)
}

impl ModelFiles {
    fn resolve(&self) -> Result<(PathBuf, PathBuf, PathBuf)> {
        let pick = |explicit: &Option<PathBuf>, file: &str| -> Result<PathBuf> {
            match (explicit, &self.model_dir) {
                (Some(p), _) => Ok(p.clone()),
                (None, Some(dir)) => Ok(dir.join(file)),
                (None, None) => bail!(UsageError(format!("give --model-dir or --{}", file.split('.').next().unwrap_or(file)))),
            }
        };
        Ok((pick(&self.vocab, "vocab.json")?, pick(&self.base, "base.ckpt")?, pick(&self.adapters, "adapters.ckpt")?))
    }
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    index: usize,
    text: String,
    prescription: Option<Prescription>,
    warnings: Vec<String>,
}

fn predict(a: &PredictArgs) -> Result<RunManifest> {
    let (vocab_path, base_path, adapter_path) = a.model.resolve()?;
    let vocab = Vocabulary::load(&vocab_path).with_context(|| format!("reading {}", vocab_path.display()))?;
    let params = load_checkpoint(&base_path, &adapter_path)?;
    if params.config.vocab_size != vocab.len() {
        bail!("checkpoint vocabulary size {} does not match {}", params.config.vocab_size, vocab_path.display());
    }
    let cfg = SamplerConfig {
        top_k: a.top_k,
        top_p: a.top_p,
        temperature: a.temperature,
        max_new_tokens: a.max_new_tokens,
        seed: a.seed,
    };
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    let records = load_corpus(&a.input)?;
    let model = InferenceModel::new(&params);
    let preds = predict_all(&model, &vocab, records.records(), &cfg)?;

    let mut out = BufWriter::new(File::create(&a.out).with_context(|| format!("writing {}", a.out.display()))?);
    for (index, p) in preds.into_iter().enumerate() {
        let line = PredictionLine {
            index,
            text: p.text,
            prescription: p.prescription,
            warnings: p.warnings,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;

    let mut m = RunManifest::new("predict", json!({ "args": a, "sampler": cfg }), sidecar(&a.out, ".manifest.json"));
    m.inputs = vec![vocab_path, base_path, adapter_path, a.input.clone()];
    m.outputs = vec![a.out.clone()];
    Ok(m)
}

fn read_predictions(path: &Path) -> Result<Vec<PredictionLine>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}: line {}", path.display(), i + 1)))
        .collect()
}

fn eval(a: &EvalArgs) -> Result<RunManifest> {
    let truth = load_corpus(&a.truth)?;
    let preds = read_predictions(&a.pred)?;
    if preds.len() != truth.len() {
        bail!("{} predictions for {} records", preds.len(), truth.len());
    }
    let baseline = build_baseline(&load_corpus(&a.train)?)?;
    let pairs: Vec<_> = truth
        .records()
        .iter()
        .zip(preds)
        .map(|(r, p)| (r.prescription.clone(), p.prescription))
        .collect();
    let report = corpus_eval(&pairs, &baseline)?;
    println!("{}", EvalReport::HEADER);
    println!("{}", report.table_row());
    fs::write(&a.out, report.to_json() + "\n").with_context(|| format!("writing {}", a.out.display()))?;

    let mut m = RunManifest::new("eval", json!(a), sidecar(&a.out, ".manifest.json"));
    m.inputs = vec![a.truth.clone(), a.pred.clone(), a.train.clone()];
    m.outputs = vec![a.out.clone()];
    Ok(m)
}
