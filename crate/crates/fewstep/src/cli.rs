//! Command-line surface: train, generate, eval, analyze, dump-schedule.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error. Every command takes --seed; everything else comes from the run
//! configuration or the checkpoint.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::analysis::{
    estimation_gap, residual_report, sc_bleu_compare, sentence_bleu, BleuConfig,
};
use crate::config::{DataConfig, RunConfig};
use crate::data::{
    generate_synth, load_checkpoint, load_parallel_tsv, load_tsv_with_vocab, save_checkpoint,
    save_parallel_tsv, split_examples, ParallelExample,
};
use crate::error::{Error, Result};
use crate::model::DenoiserState;
use crate::rng::{role, stream};
use crate::sample::{generate, mbr_select, expand_candidates, GenerationConfig, SelfCondMode};
use crate::train::{train_loop, validate, Trainer};
use crate::vocab::Vocabulary;

#[derive(Parser)]
#[command(name = "fewstep", version, about = "Embedding-space diffusion for seq2seq generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run configuration.
    Train(TrainArgs),
    /// Generate text for each input line with a trained checkpoint.
    Generate(GenerateArgs),
    /// Evaluate a checkpoint on a TSV test set.
    Eval(EvalArgs),
    /// Statistical analyses of a trained checkpoint.
    Analyze(AnalyzeArgs),
    /// Emit the configured schedules as a CSV table.
    DumpSchedule(DumpScheduleArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured iteration count.
    #[arg(long)]
    iterations: Option<u64>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input file of source lines; stdin when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    nfe: usize,
    #[arg(long, default_value = "reused")]
    sc_mode: SelfCondMode,
    #[arg(long, default_value_t = 1)]
    length_beam: usize,
    #[arg(long, default_value_t = 1)]
    noise_beam: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the selected candidate's denoising trajectory as JSONL.
    #[arg(long)]
    dump_trajectory: Option<PathBuf>,
    /// Write every candidate (line, rank, length, text) as TSV.
    #[arg(long)]
    dump_candidates: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Test TSV (source<TAB>target).
    #[arg(long)]
    data: PathBuf,
    /// One record is emitted per NFE value.
    #[arg(long, value_delimiter = ',', default_value = "5")]
    nfe: Vec<usize>,
    #[arg(long, default_value = "reused")]
    sc_mode: SelfCondMode,
    #[arg(long, default_value_t = 1)]
    length_beam: usize,
    #[arg(long, default_value_t = 1)]
    noise_beam: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// gap | residuals | sc-compare
    action: String,
    #[arg(long)]
    checkpoint: PathBuf,
    /// TSV dataset the analysis runs over.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "5,20")]
    nfe: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cap on examples drawn from the dataset.
    #[arg(long, default_value_t = 64)]
    limit: usize,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DumpScheduleArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 201)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parse arguments and dispatch; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    init_thread_pool();
    let outcome = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::DumpSchedule(args) => cmd_dump_schedule(args),
    };
    match outcome {
        Ok(()) => 0,
        Err(CliError { code, error }) => {
            eprintln!("error: {error}");
            code
        }
    }
}

/// Honor FEWSTEP_THREADS when set; otherwise rayon picks the core count.
fn init_thread_pool() {
    if let Ok(v) = std::env::var("FEWSTEP_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

struct CliError {
    code: i32,
    error: Error,
}

type CliResult = std::result::Result<(), CliError>;

fn usage(error: Error) -> CliError {
    CliError { code: 2, error }
}

fn runtime(error: Error) -> CliError {
    CliError { code: 1, error }
}

type LoadedData = (
    Vec<ParallelExample>,
    Vec<ParallelExample>,
    Vec<ParallelExample>,
    Vocabulary,
);

fn load_run_data(cfg: &RunConfig) -> Result<LoadedData> {
    match &cfg.data {
        DataConfig::Synthetic(spec) => {
            let examples = generate_synth(spec)?;
            let vocab = Vocabulary::numeric(spec.vocab);
            let (train, val, test) = split_examples(examples);
            Ok((train, val, test, vocab))
        }
        DataConfig::Tsv { path, min_freq } => {
            let (examples, vocab) = load_parallel_tsv(path, *min_freq)?;
            let (train, val, test) = split_examples(examples);
            Ok((train, val, test, vocab))
        }
    }
}

fn cmd_train(args: TrainArgs) -> CliResult {
    let mut cfg = RunConfig::load(&args.config).map_err(usage)?;
    if let Some(n) = args.iterations {
        cfg.training.total_iterations = n;
    }
    if let Some(s) = args.seed {
        cfg.training.seed = s;
    }
    run_training(&cfg).map_err(runtime)?;
    Ok(())
}

/// Library entry used by the CLI and the integration tests: run the full
/// training pipeline described by a run configuration, writing metrics,
/// checkpoints, vocabulary, and split dumps under `paths.out_dir`.
pub fn run_training(cfg: &RunConfig) -> Result<()> {
    let (train_split, val_split, test_split, vocab) = load_run_data(cfg)?;
    let out = &cfg.paths.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    vocab.save(&out.join("vocab.txt"))?;
    save_parallel_tsv(&out.join("val.tsv"), &val_split, &vocab)?;
    save_parallel_tsv(&out.join("test.tsv"), &test_split, &vocab)?;

    let resuming = cfg.paths.resume_from.is_some();
    let mut trainer = match &cfg.paths.resume_from {
        Some(ckpt) => {
            let (mut trainer, _vocab) = load_checkpoint(ckpt)?;
            // The configured horizon wins; everything else is restored.
            trainer.config.total_iterations = cfg.training.total_iterations;
            trainer
        }
        None => {
            let mut rng = stream(cfg.training.seed, &[role::INIT]);
            let state = DenoiserState::init(cfg.model, &mut rng)?;
            Trainer::new(state, cfg.training.clone(), cfg.noise_schedule)?
        }
    };

    let metrics_path = out.join("metrics.jsonl");
    let val_path = out.join("val.jsonl");
    let mut metrics_file = open_log(&metrics_path, resuming)?;
    let mut val_file = open_log(&val_path, resuming)?;

    let vocab_for_ckpt = vocab.clone();
    let out_dir = out.clone();
    train_loop(
        &mut trainer,
        &train_split,
        &val_split,
        |m| {
            writeln!(metrics_file, "{}", serde_json::to_string(m).unwrap())
                .map_err(|e| Error::io(metrics_path.display().to_string(), e))
        },
        |v| {
            writeln!(val_file, "{}", serde_json::to_string(v).unwrap())
                .map_err(|e| Error::io(val_path.display().to_string(), e))
        },
        |t| {
            let path = out_dir.join(format!("ckpt_{:07}.ckpt", t.iteration));
            save_checkpoint(t, &vocab_for_ckpt, &path)?;
            save_checkpoint(t, &vocab_for_ckpt, &out_dir.join("final.ckpt"))
        },
    )?;

    if trainer.config.total_iterations == 0 {
        save_checkpoint(&trainer, &vocab, &out.join("final.ckpt"))?;
    }

    let summary = if val_split.is_empty() {
        json!({"iterations": trainer.iteration})
    } else {
        let vm = validate(&trainer.state, &val_split, &trainer.sched, trainer.config.seed, 5)?;
        json!({
            "iterations": trainer.iteration,
            "val_l_diff": vm.val_l_diff,
            "val_seq_acc": vm.val_seq_acc,
        })
    };
    println!("{summary}");
    Ok(())
}

fn open_log(path: &Path, append: bool) -> Result<std::fs::File> {
    std::fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_input_lines(input: Option<&PathBuf>) -> Result<Vec<String>> {
    match input {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            Ok(text.lines().map(str::to_string).collect())
        }
        None => {
            let stdin = std::io::stdin();
            let mut lines = Vec::new();
            for line in stdin.lock().lines() {
                lines.push(line.map_err(|e| Error::io("stdin", e))?);
            }
            Ok(lines)
        }
    }
}

fn cmd_generate(args: GenerateArgs) -> CliResult {
    let (trainer, vocab) = load_checkpoint(&args.checkpoint).map_err(usage)?;
    let state = trainer.state;
    let sched = trainer.sched;
    let gcfg = GenerationConfig {
        nfe: args.nfe,
        sc_mode: args.sc_mode,
        length_beam: args.length_beam,
        noise_beam: args.noise_beam,
        seed: args.seed,
    };
    gcfg.validate().map_err(usage)?;
    let lines = read_input_lines(args.input.as_ref()).map_err(runtime)?;
    let bleu = BleuConfig::default();

    let mut trajectory_file = match &args.dump_trajectory {
        Some(p) => Some(
            std::fs::File::create(p).map_err(|e| runtime(Error::io(p.display().to_string(), e)))?,
        ),
        None => None,
    };
    let mut candidates_file = match &args.dump_candidates {
        Some(p) => Some(
            std::fs::File::create(p).map_err(|e| runtime(Error::io(p.display().to_string(), e)))?,
        ),
        None => None,
    };

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (line_idx, line) in lines.iter().enumerate() {
        let source = vocab.encode_line(line);
        if source.is_empty() {
            writeln!(out).map_err(|e| runtime(Error::io("stdout", e)))?;
            continue;
        }
        let per_line = GenerationConfig {
            seed: args.seed ^ (line_idx as u64).wrapping_mul(0x9e3779b97f4a7c15),
            ..gcfg
        };
        let candidates = expand_candidates(&state, &source, &per_line, &sched).map_err(runtime)?;
        let picked = mbr_select(&candidates, &bleu).map_err(runtime)?;
        let text = vocab.decode(&candidates[picked].tokens).map_err(runtime)?;
        writeln!(out, "{text}").map_err(|e| runtime(Error::io("stdout", e)))?;

        if let Some(f) = candidates_file.as_mut() {
            for (rank, c) in candidates.iter().enumerate() {
                let text = vocab.decode(&c.tokens).map_err(runtime)?;
                writeln!(f, "{line_idx}\t{rank}\t{}\t{text}", c.length)
                    .map_err(|e| runtime(Error::io("candidates dump", e)))?;
            }
        }
        if let Some(f) = trajectory_file.as_mut() {
            let chosen = &candidates[picked];
            let gen = generate(
                &state,
                &source,
                chosen.length,
                per_line.nfe,
                per_line.sc_mode,
                chosen.seed,
                &sched,
            )
            .map_err(runtime)?;
            for step in &gen.trajectory.steps {
                let tokens = state
                    .codebook()
                    .round_to_tokens(&step.prediction)
                    .map_err(runtime)?;
                let text = vocab.decode(&tokens).map_err(runtime)?;
                let record = json!({"line": line_idx, "t": step.t, "view": text});
                writeln!(f, "{record}")
                    .map_err(|e| runtime(Error::io("trajectory dump", e)))?;
            }
        }
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CliResult {
    let (trainer, vocab) = load_checkpoint(&args.checkpoint).map_err(usage)?;
    let state = trainer.state;
    let sched = trainer.sched;
    let examples = load_tsv_with_vocab(&args.data, &vocab).map_err(usage)?;
    let bleu = BleuConfig::default();

    for &nfe in &args.nfe {
        let start = std::time::Instant::now();
        let gcfg = GenerationConfig {
            nfe,
            sc_mode: args.sc_mode,
            length_beam: args.length_beam,
            noise_beam: args.noise_beam,
            seed: args.seed,
        };
        gcfg.validate().map_err(usage)?;
        let mut total_bleu = 0.0;
        let mut exact = 0usize;
        let mut calls = 0usize;
        for (idx, ex) in examples.iter().enumerate() {
            let per_ex = GenerationConfig {
                seed: args.seed ^ (idx as u64).wrapping_mul(0x9e3779b97f4a7c15),
                ..gcfg
            };
            let candidates =
                expand_candidates(&state, &ex.source, &per_ex, &sched).map_err(runtime)?;
            // Candidate expansion is nfe (or 2 nfe) denoiser calls each.
            let per_candidate = match args.sc_mode {
                SelfCondMode::Corrected => 2 * nfe,
                _ => nfe,
            };
            calls += per_candidate * candidates.len();
            let picked = mbr_select(&candidates, &bleu).map_err(runtime)?;
            let hyp = &candidates[picked].tokens;
            total_bleu += sentence_bleu(hyp, &ex.target, &bleu).map_err(runtime)?;
            if hyp == &ex.target {
                exact += 1;
            }
        }
        let n = examples.len() as f64;
        let record = json!({
            "nfe": nfe,
            "bleu": total_bleu / n,
            "seq_acc": exact as f64 / n,
            "mean_denoiser_calls": calls as f64 / n,
            "wall_ms": start.elapsed().as_secs_f64() * 1e3,
        });
        println!("{record}");
    }
    Ok(())
}

fn open_report(out: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    match out {
        Some(p) => Ok(Box::new(
            std::fs::File::create(p).map_err(|e| Error::io(p.display().to_string(), e))?,
        )),
        None => Ok(Box::new(std::io::stdout())),
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> CliResult {
    let (trainer, vocab) = load_checkpoint(&args.checkpoint).map_err(usage)?;
    let state = trainer.state;
    let sched = trainer.sched;
    let examples = load_tsv_with_vocab(&args.data, &vocab).map_err(usage)?;
    let subset: Vec<&ParallelExample> = examples.iter().take(args.limit.max(1)).collect();
    let mut out = open_report(args.out.as_ref()).map_err(runtime)?;

    match args.action.as_str() {
        "gap" => {
            let with_lengths: Vec<(Vec<usize>, usize)> = subset
                .iter()
                .map(|ex| (ex.source.clone(), ex.target.len()))
                .collect();
            writeln!(out, "kind,nfe,step,t,value").map_err(|e| runtime(Error::io("report", e)))?;
            for &nfe in &args.nfe {
                let report = estimation_gap(&state, &with_lengths, nfe, args.seed, &sched)
                    .map_err(usage)?;
                for (j, (t, g)) in report
                    .step_times
                    .iter()
                    .zip(&report.per_step_mean)
                    .enumerate()
                {
                    writeln!(out, "step,{nfe},{j},{t},{g}")
                        .map_err(|e| runtime(Error::io("report", e)))?;
                }
                writeln!(out, "sup,{nfe},,,{}", report.sup)
                    .map_err(|e| runtime(Error::io("report", e)))?;
            }
        }
        "residuals" => {
            let with_lengths: Vec<(Vec<usize>, usize)> = subset
                .iter()
                .map(|ex| (ex.source.clone(), ex.target.len()))
                .collect();
            let nfe = *args.nfe.first().unwrap_or(&20);
            let rows = residual_report(&state, &with_lengths, nfe, args.seed, &sched, 50)
                .map_err(runtime)?;
            writeln!(out, "t,dim,mu,sigma,lambda,gamma,w,p")
                .map_err(|e| runtime(Error::io("report", e)))?;
            for r in rows {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    r.t, r.dim, r.mu, r.sigma, r.lambda, r.gamma, r.w, r.p
                )
                .map_err(|e| runtime(Error::io("report", e)))?;
            }
        }
        "sc-compare" => {
            let pairs: Vec<(Vec<usize>, Vec<usize>)> = subset
                .iter()
                .map(|ex| (ex.source.clone(), ex.target.clone()))
                .collect();
            writeln!(out, "nfe,bleu_reused,bleu_corrected")
                .map_err(|e| runtime(Error::io("report", e)))?;
            for &nfe in &args.nfe {
                let (reused, corrected) = sc_bleu_compare(
                    &state,
                    &pairs,
                    nfe,
                    args.seed,
                    &sched,
                    &BleuConfig::default(),
                )
                .map_err(runtime)?;
                writeln!(out, "{nfe},{reused},{corrected}")
                    .map_err(|e| runtime(Error::io("report", e)))?;
            }
        }
        other => {
            return Err(usage(Error::Config(format!(
                "unknown analyze action {other:?} (gap | residuals | sc-compare)"
            ))));
        }
    }
    Ok(())
}

fn cmd_dump_schedule(args: DumpScheduleArgs) -> CliResult {
    let cfg = RunConfig::load(&args.config).map_err(usage)?;
    let sched = cfg.noise_schedule;
    let perturb = cfg.training.perturb;
    let points = args.points.max(2);
    let mut out = open_report(args.out.as_ref()).map_err(runtime)?;
    writeln!(out, "t,alpha,sigma,lambda,gamma").map_err(|e| runtime(Error::io("report", e)))?;
    for i in 0..points {
        let t = sched.t_floor + (1.0 - sched.t_floor) * i as f64 / (points - 1) as f64;
        let (alpha, sigma) = sched.alpha_sigma(t).map_err(runtime)?;
        let (lambda, gamma) = perturb.at(t);
        writeln!(out, "{t},{alpha},{sigma},{lambda},{gamma}")
            .map_err(|e| runtime(Error::io("report", e)))?;
    }
    Ok(())
}

