//! Command-line driver. Exit codes: 0 success, 1 runtime failure, 2 usage
//! or configuration error.

pub mod config;

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mmtg_core::data::{generate_corpus, load_dataset, save_dataset, CorpusStats};
use mmtg_core::decoder::GenerationConfig;
use mmtg_core::gradcheck::{run_suite, SuiteConfig};
use mmtg_core::metrics::{evaluate, paired_rng, Disorder};
use mmtg_core::model::Mmtg;
use mmtg_core::training::{train, write_trace};
use mmtg_core::Error;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "mmtg", version, about = "Multi-modal experience-to-text generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus: train.jsonl (all five levels), test.jsonl and run.config.
    GenData {
        /// Config file of `key = value` lines.
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint, a trace and the resolved config.
    Train(TrainArgs),
    /// Sample passages for every record of an input file.
    Generate(GenerateArgs),
    /// Score a checkpoint on a test file and write a report.
    Evaluate(EvaluateArgs),
    /// Finite-difference gradient checks for every parameter group.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        /// Add a term with a dropped gradient; every group must then fail.
        #[arg(long)]
        inject_fault: bool,
    },
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Training records, usually `train.jsonl` from gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path. The trace goes to `<out>.trace.jsonl`, the config to `<out>.config`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Fixed uniform spanning weights, no regularizer.
    #[arg(long)]
    pub no_span_attention: bool,
    /// Drop the topic prefix position.
    #[arg(long)]
    pub no_t_prompt: bool,
    /// Zero the image channel inputs.
    #[arg(long)]
    pub no_image: bool,
    /// Zero the text channel inputs.
    #[arg(long)]
    pub no_text: bool,
    /// Multiply token embeddings by the experience rows.
    #[arg(long)]
    pub sent_mul: bool,
    /// Divide fused embeddings by the squared step count.
    #[arg(long)]
    pub fusion_normalize: bool,
    /// One mixed phase instead of the curriculum.
    #[arg(long)]
    pub no_cl: bool,
    /// Level-5 positives only, no negatives.
    #[arg(long)]
    pub no_neg: bool,
    /// Print every n-th trace record.
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
}

#[derive(Args, Debug, Clone)]
pub struct SamplingArgs {
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    #[arg(long, default_value_t = 0.7)]
    pub top_p: f64,
    #[arg(long, default_value_t = 1.1)]
    pub temperature: f64,
    #[arg(long, default_value_t = 1.5)]
    pub repetition_penalty: f64,
    /// Passages per input.
    #[arg(long, default_value_t = 10)]
    pub samples: usize,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

impl SamplingArgs {
    fn config(&self, model: &Mmtg) -> GenerationConfig {
        GenerationConfig {
            top_k: self.top_k,
            top_p: self.top_p,
            temperature: self.temperature,
            repetition_penalty: self.repetition_penalty,
            samples_per_input: self.samples,
            max_len: self.max_len.unwrap_or(model.config.max_sentence_len),
            seed: self.seed,
        }
    }
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Records whose inputs are used; targets are ignored.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Test records, usually `test.jsonl` from gen-data.
    #[arg(long)]
    pub test: PathBuf,
    /// Report path (JSON). The table goes to `<out>.txt`.
    #[arg(long)]
    pub out: PathBuf,
    /// `rotate` or `shuffle`.
    #[arg(long, default_value = "rotate")]
    pub disorder: String,
    /// Row label in the table.
    #[arg(long, default_value = "MMTG")]
    pub label: String,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

/// Failure with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    RunConfig::load(path).map_err(|e| usage(e.to_string()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), Failure> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(|e| Failure {
            code: 1,
            message: e.to_string(),
        })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_gen_data(config: &Path, out: &Path) -> Result<CorpusStats, Failure> {
    let cfg = load_config(config)?;
    let corpus = generate_corpus(&cfg.synth)?;
    std::fs::create_dir_all(out)?;
    let train = corpus.leveled_train()?;
    save_dataset(out.join("train.jsonl"), &train)?;
    save_dataset(out.join("test.jsonl"), &corpus.test)?;
    std::fs::write(out.join("run.config"), cfg.to_text())?;
    Ok(corpus.stats())
}

pub fn cmd_train(args: &TrainArgs) -> Result<Mmtg, Failure> {
    let mut cfg = load_config(&args.config)?;
    let flags = [
        ("no_span_attention", args.no_span_attention),
        ("no_t_prompt", args.no_t_prompt),
        ("no_image", args.no_image),
        ("no_text", args.no_text),
        ("sent_mul", args.sent_mul),
        ("fusion_normalize", args.fusion_normalize),
        ("no_cl", args.no_cl),
        ("no_neg", args.no_neg),
    ];
    for (key, on) in flags {
        if on {
            cfg.set(key, "true")?;
        }
    }
    if let Some(steps) = args.max_steps {
        cfg.set("max_steps", &steps.to_string())?;
    }
    cfg.validate()?;
    let data = load_dataset(&args.data)?;
    let samples = data.iter().map(|p| p.sample_id).collect::<std::collections::BTreeSet<_>>().len();
    let train_cfg = cfg.train_config(samples);
    let mut model = Mmtg::new(cfg.model.clone())?;
    let log_every = args.log_every.max(1);
    let report = train(&data, &mut model, &train_cfg, |r| {
        if r.step % log_every == 0 {
            eprintln!(
                "step {:>5}  phase {}  loss {:.4}  L_D {:.4}  f_pos {:.4}",
                r.step, r.phase, r.loss, r.l_d, r.f_pos_mean
            );
        }
    })?;
    model.save(&args.out)?;
    write_trace(BufWriter::new(File::create(with_suffix(&args.out, ".trace.jsonl"))?), &report.trace)?;
    std::fs::write(with_suffix(&args.out, ".config"), cfg.to_text())?;
    let level5: Vec<_> = data.into_iter().filter(|p| p.level == 5).collect();
    if !level5.is_empty() {
        println!("steps {}  train perplexity {:.4}", report.steps, model.perplexity(&level5)?);
    }
    Ok(model)
}

#[derive(Debug, Serialize)]
pub struct GeneratedPassage {
    pub sample_id: u64,
    pub draw: usize,
    pub seed: u64,
    pub sentences: Vec<Vec<u32>>,
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<Vec<GeneratedPassage>, Failure> {
    let model = Mmtg::load(&args.checkpoint)?;
    let cfg = args.sampling.config(&model);
    cfg.validate()?;
    let inputs = load_dataset(&args.input)?;
    let mut out = Vec::with_capacity(inputs.len() * cfg.samples_per_input);
    for p in &inputs {
        p.input.validate(model.config.steps, model.config.embed_dim)?;
        for draw in 0..cfg.samples_per_input {
            let sentences = model.generate(&p.input, &cfg, &mut paired_rng(cfg.seed, p.sample_id, draw))?;
            out.push(GeneratedPassage {
                sample_id: p.sample_id,
                draw,
                seed: cfg.seed,
                sentences,
            });
        }
    }
    write_json_lines(&args.out, &out)?;
    Ok(out)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<String, Failure> {
    let model = Mmtg::load(&args.checkpoint)?;
    let cfg = args.sampling.config(&model);
    let disorder = match args.disorder.as_str() {
        "rotate" => Disorder::Rotate,
        "shuffle" => Disorder::Shuffle { seed: cfg.seed },
        other => return Err(usage(format!("--disorder must be rotate or shuffle, got {other:?}"))),
    };
    let test = load_dataset(&args.test)?;
    let report = evaluate(&model, &test, &cfg, disorder)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Failure {
        code: 1,
        message: e.to_string(),
    })?;
    std::fs::write(&args.out, json + "\n")?;
    let table = report.table(&args.label);
    std::fs::write(with_suffix(&args.out, ".txt"), &table)?;
    Ok(table)
}

pub fn cmd_gradcheck(cfg: &SuiteConfig) -> Result<bool, Failure> {
    if !(cfg.tol.is_finite() && cfg.tol > 0.0) || cfg.seeds == 0 {
        return Err(usage("--tol must be positive and --seeds at least 1"));
    }
    let results = run_suite(cfg, |_, _| {})?;
    let mut ok = true;
    for r in &results {
        ok &= r.passed;
        println!(
            "{:<16} {}  max rel error {:.3e} over {} components",
            r.group.name(),
            if r.passed { "PASS" } else { "FAIL" },
            r.max_rel_error,
            r.checked
        );
    }
    Ok(ok)
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::GenData { config, out } => cmd_gen_data(config, out).map(|s| {
            print!("{}", s.table());
        }),
        Command::Train(a) => cmd_train(a).map(|_| ()),
        Command::Generate(a) => cmd_generate(a).map(|g| {
            println!("wrote {} passages to {}", g.len(), a.out.display());
        }),
        Command::Evaluate(a) => cmd_evaluate(a).map(|t| print!("{t}")),
        Command::Gradcheck {
            seeds,
            tol,
            eps,
            inject_fault,
        } => {
            let cfg = SuiteConfig {
                seeds: *seeds,
                eps: *eps,
                tol: *tol,
                inject_fault: *inject_fault,
            };
            cmd_gradcheck(&cfg).and_then(|ok| {
                if ok {
                    Ok(())
                } else {
                    Err(Failure {
                        code: 1,
                        message: "gradient check failed".into(),
                    })
                }
            })
        }
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
