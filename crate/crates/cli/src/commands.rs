use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Subcommand};
use serde::Deserialize;
use serde_json::json;

use epicode_core::checkpoint::{self, TensorMap};
use epicode_core::data;
use epicode_core::decode::{greedy_decode_steps, DecodePolicy, TokenId};
use epicode_core::extrapolate::{extrapolate, interpolate, param_distance, ExtrapolationConfig};
use epicode_core::harness::pipeline::{difficulty_report, evaluate_run, make_splits, run_seed, train_run};
use epicode_core::harness::report::{read_column, render_from_dir, write_csv, write_reports};
use epicode_core::harness::sweep::CheckpointObjective;
use epicode_core::harness::task::{with_eos, EOS};
use epicode_core::harness::{evaluate, gen_dataset, paired_t_test, sweep, Contrastive, Greedy, PipelineConfig, SweepGrid, TaskKind, TaskSpec};
use epicode_core::theory::{ErrorScenario, TheoryReport};
use epicode_core::toy_lm::{self, OptimizerConfig, ToyConfig, ToyModel, TrainState};
use epicode_core::{Error, Result};

use crate::{log, LogLevel};

#[derive(Debug, Subcommand)]
pub enum Command {
    /// ep = strong + mu * (strong - weak), written as a checkpoint.
    Extrapolate(ExtrapolateArgs),
    /// t * a + (1 - t) * b, written as a checkpoint.
    Interpolate(InterpolateArgs),
    /// Euclidean distance between two checkpoints.
    Distance(DistanceArgs),
    /// Greedy contrastive decoding of prompts from a JSON-lines file.
    Decode(DecodeArgs),
    /// Train the toy model, saving one checkpoint per epoch.
    TrainToy(TrainToyArgs),
    /// Generate train/dev/test splits of a synthetic task.
    GenData(GenDataArgs),
    /// Exact-match accuracy of greedy or contrastive decoding on a dataset.
    Evaluate(EvaluateArgs),
    /// Two-stage (mu, then lambda) dev-set search.
    Sweep(SweepArgs),
    /// Four-condition pipeline over several seeds, with CSV and markdown reports.
    Pipeline(PipelineArgs),
    /// Pipeline plus the weak-model ablation over several seeds.
    Ablation(PipelineArgs),
    /// Monte Carlo check of the contrastive logit-error model; prints a CSV row.
    Theory(TheoryArgs),
    /// One-tailed paired t-test that column A exceeds column B.
    Ttest(TtestArgs),
    /// Render the markdown summary from a pipeline output directory.
    Report(ReportArgs),
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Extrapolate(a) => cmd_extrapolate(a),
        Command::Interpolate(a) => cmd_interpolate(a),
        Command::Distance(a) => cmd_distance(a),
        Command::Decode(a) => cmd_decode(a),
        Command::TrainToy(a) => cmd_train_toy(a),
        Command::GenData(a) => cmd_gen_data(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Pipeline(a) => cmd_pipeline(a, false),
        Command::Ablation(a) => cmd_pipeline(a, true),
        Command::Theory(a) => cmd_theory(a),
        Command::Ttest(a) => cmd_ttest(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn read_json_or_default<T: for<'de> Deserialize<'de> + Default>(path: Option<&PathBuf>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), |p| read_json(p))
}

fn load(path: &Path) -> Result<TensorMap> {
    checkpoint::load(path).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[derive(Debug, Args)]
pub struct ExtrapolateArgs {
    #[arg(long)]
    strong: PathBuf,
    #[arg(long)]
    weak: PathBuf,
    #[arg(long)]
    mu: f32,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_extrapolate(a: ExtrapolateArgs) -> Result<()> {
    let cfg = ExtrapolationConfig::new(a.mu)?;
    let ep = extrapolate(&load(&a.strong)?, &load(&a.weak)?, cfg)?;
    checkpoint::save(&ep, &a.out)
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    t: f32,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_interpolate(a: InterpolateArgs) -> Result<()> {
    let merged = interpolate(&load(&a.a)?, &load(&a.b)?, a.t)?;
    checkpoint::save(&merged, &a.out)
}

#[derive(Debug, Args)]
pub struct DistanceArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
}

fn cmd_distance(a: DistanceArgs) -> Result<()> {
    println!("{}", param_distance(&load(&a.a)?, &load(&a.b)?)?);
    Ok(())
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    strong: PathBuf,
    #[arg(long)]
    weak: PathBuf,
    /// Toy model architecture (JSON); defaults apply to missing fields.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    lambda: f32,
    #[arg(long, default_value_t = 0.1)]
    alpha: f32,
    #[arg(long, default_value_t = 16)]
    max_new_tokens: usize,
    /// Stop token; generation only stops at `max_new_tokens` if absent.
    #[arg(long)]
    eos: Option<TokenId>,
    /// JSON lines with a "prompt" array of token ids (other fields ignored).
    #[arg(long)]
    prompt_file: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Deserialize)]
struct PromptRecord {
    prompt: Vec<TokenId>,
}

fn read_prompts(path: &Path) -> Result<Vec<Vec<TokenId>>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<PromptRecord>(l)
                .map(|r| r.prompt)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn cmd_decode(a: DecodeArgs) -> Result<()> {
    let cfg: ToyConfig = read_json_or_default(a.model_config.as_ref())?;
    let policy = DecodePolicy::new(a.lambda, a.alpha, a.max_new_tokens, a.eos)?;
    let strong = ToyModel::new(&load(&a.strong)?, &cfg)?;
    let weak = ToyModel::new(&load(&a.weak)?, &cfg)?;
    let prompts = read_prompts(&a.prompt_file)?;
    let mut out = BufWriter::new(fs::File::create(&a.out)?);
    for prompt in &prompts {
        let steps = greedy_decode_steps(&strong, &weak, prompt, &policy)?;
        let output: Vec<TokenId> = steps.iter().map(|s| s.token).collect();
        let scores: Vec<f32> = steps.iter().map(|s| s.score).collect();
        serde_json::to_writer(&mut out, &json!({ "input": prompt, "output": output, "scores": scores }))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    log(LogLevel::Info, format!("decoded {} prompts", prompts.len()));
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    /// Toy model architecture (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Optimizer settings (JSON).
    #[arg(long)]
    optimizer: Option<PathBuf>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    /// Initialization and shuffling seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Token appended to every answer as the training target terminator.
    #[arg(long, default_value_t = EOS)]
    eos: TokenId,
    /// Train on answers exactly as given, without a terminator.
    #[arg(long)]
    no_eos: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

fn cmd_train_toy(a: TrainToyArgs) -> Result<()> {
    let mut cfg: ToyConfig = read_json_or_default(a.config.as_ref())?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let mut opt: OptimizerConfig = read_json_or_default(a.optimizer.as_ref())?;
    if let Some(lr) = a.learning_rate {
        opt.learning_rate = lr;
    }
    if let Some(bs) = a.batch_size {
        opt.batch_size = bs;
    }
    let mut examples = data::read_jsonl(&a.data)?;
    if !a.no_eos {
        for ex in &mut examples {
            ex.answer.push(a.eos);
        }
    }
    let mut state = TrainState::new(toy_lm::init(&cfg)?);
    let start = Instant::now();
    let outcome = toy_lm::train_epochs(&mut state, &cfg, &examples, &opt, a.epochs, cfg.seed)?;
    fs::create_dir_all(&a.out_dir)?;
    for (i, ckpt) in outcome.checkpoints.iter().enumerate() {
        checkpoint::save(ckpt, a.out_dir.join(format!("epoch{}.safetensors", i + 1)))?;
    }
    write_csv(a.out_dir.join("train_log.csv"), &outcome.log)?;
    log(
        LogLevel::Info,
        format!("trained {} steps in {:.1}s", state.step_count, start.elapsed().as_secs_f64()),
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Task specification (JSON).
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long, value_parser = parse_kind)]
    kind: Option<TaskKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

fn parse_kind(s: &str) -> std::result::Result<TaskKind, String> {
    match s {
        "kv_recall" => Ok(TaskKind::KvRecall),
        "modular_chain" => Ok(TaskKind::ModularChain),
        _ => Err(format!("unknown task kind {s:?} (expected kv_recall or modular_chain)")),
    }
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let mut spec: TaskSpec = read_json_or_default(a.task.as_ref())?;
    if let Some(kind) = a.kind {
        spec.kind = kind;
    }
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let splits = gen_dataset(&spec)?;
    fs::create_dir_all(&a.out_dir)?;
    data::write_jsonl(a.out_dir.join("train.jsonl"), &splits.train)?;
    data::write_jsonl(a.out_dir.join("dev.jsonl"), &splits.dev)?;
    data::write_jsonl(a.out_dir.join("test.jsonl"), &splits.test)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Strong (or only) model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Weak model checkpoint; enables contrastive decoding.
    #[arg(long)]
    weak: Option<PathBuf>,
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    lambda: f32,
    #[arg(long, default_value_t = 0.1)]
    alpha: f32,
    #[arg(long, default_value_t = EOS)]
    eos: TokenId,
    #[arg(long)]
    data: PathBuf,
    /// Per-example outputs as JSON lines.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let cfg: ToyConfig = read_json_or_default(a.model_config.as_ref())?;
    let dataset = data::read_jsonl(&a.data)?;
    let strong = ToyModel::new(&load(&a.model)?, &cfg)?;
    let result = match &a.weak {
        Some(w) => {
            let gen = Contrastive {
                strong,
                weak: ToyModel::new(&load(w)?, &cfg)?,
                lambda: a.lambda,
                alpha: a.alpha,
            };
            evaluate(&gen, &dataset, a.eos)?
        }
        None => evaluate(&Greedy(strong), &dataset, a.eos)?,
    };
    if let Some(path) = &a.out {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for ((ex, o), c) in dataset.iter().zip(&result.outputs).zip(&result.correct) {
            serde_json::to_writer(&mut out, &json!({ "input": ex.prompt, "output": o, "gold": ex.answer, "correct": c }))?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
    }
    let hits = result.correct.iter().filter(|&&c| c).count();
    println!("{}", json!({ "accuracy": result.accuracy, "correct": hits, "total": dataset.len() }));
    Ok(())
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    early: PathBuf,
    #[arg(long)]
    ft: PathBuf,
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Grid as JSON {"mu_values": [...], "lambda_values": [...]}.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    alpha: f32,
    #[arg(long, default_value_t = EOS)]
    eos: TokenId,
    #[arg(long)]
    dev: PathBuf,
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let cfg: ToyConfig = read_json_or_default(a.model_config.as_ref())?;
    let grid: SweepGrid = read_json_or_default(a.grid.as_ref())?;
    let dev = data::read_jsonl(&a.dev)?;
    let (early, ft) = (load(&a.early)?, load(&a.ft)?);
    let objective = CheckpointObjective {
        early: &early,
        ft: &ft,
        config: &cfg,
        dev: &dev,
        alpha: a.alpha,
        eos: a.eos,
    };
    let outcome = sweep(&objective, &grid)?;
    println!("{}", serde_json::to_string(&outcome)?);
    Ok(())
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Full pipeline configuration (JSON): task, model, optimizer, grid, alpha, epochs.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task specification (JSON); replaces the config file's task.
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

fn cmd_pipeline(a: PipelineArgs, with_ablation: bool) -> Result<()> {
    let mut cfg: PipelineConfig = read_json_or_default(a.config.as_ref())?;
    if let Some(task) = &a.task {
        cfg.task = read_json(task)?;
    }
    if a.seeds == 0 {
        return Err(Error::InvalidConfig("--seeds must be at least 1".into()));
    }
    let splits = make_splits(&cfg)?;
    let mut records = Vec::new();
    let mut ablations = Vec::new();
    for seed in a.first_seed..a.first_seed + a.seeds {
        let start = Instant::now();
        let record = if with_ablation {
            let (r, ab) = run_seed(&cfg, &splits, seed)?;
            ablations.push(ab);
            r
        } else {
            let run = train_run(&cfg, &with_eos(&splits.train), seed)?;
            evaluate_run(&cfg, &splits, &run, seed)?
        };
        log(
            LogLevel::Info,
            format!(
                "seed {seed}: finetune {:.4} me {:.4} cd {:.4} epicode {:.4} (mu {}, lambda {}) in {:.1}s",
                record.test.finetune,
                record.test.me_only,
                record.test.cd_only,
                record.test.epicode,
                record.chosen_mu,
                record.chosen_lambda,
                start.elapsed().as_secs_f64()
            ),
        );
        log(LogLevel::Debug, format!("seed {seed}: mu scores {:?}", record.mu_scores));
        log(LogLevel::Debug, format!("seed {seed}: lambda scores {:?}", record.lambda_scores));
        records.push(record);
    }
    let difficulty = difficulty_report(&records)?;
    write_reports(&a.out_dir, &records, &ablations, &difficulty)?;
    fs::write(a.out_dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    log(LogLevel::Info, format!("reports written to {}", a.out_dir.display()));
    Ok(())
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    #[arg(long)]
    epsilon: f64,
    #[arg(long)]
    k: f64,
    #[arg(long)]
    lambda: f64,
    #[arg(long)]
    rho: f64,
    #[arg(long)]
    vocab: usize,
    #[arg(long)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print the CSV header line before the row.
    #[arg(long)]
    header: bool,
}

fn cmd_theory(a: TheoryArgs) -> Result<()> {
    let scenario = ErrorScenario {
        epsilon: a.epsilon,
        k: a.k,
        lambda: a.lambda,
        rho: a.rho,
        vocab_size: a.vocab,
        trials: a.trials,
        seed: a.seed,
    };
    let report = TheoryReport::run(&scenario)?;
    if a.header {
        println!("{}", TheoryReport::CSV_HEADER);
    }
    println!("{}", report.csv_row());
    Ok(())
}

/// `PATH:COLUMN` reference to a numeric CSV column.
#[derive(Debug, Clone)]
pub struct ColumnRef {
    path: PathBuf,
    column: String,
}

fn parse_column_ref(s: &str) -> std::result::Result<ColumnRef, String> {
    match s.rsplit_once(':') {
        Some((p, c)) if !p.is_empty() && !c.is_empty() => Ok(ColumnRef {
            path: PathBuf::from(p),
            column: c.to_string(),
        }),
        _ => Err(format!("expected PATH:COLUMN, got {s:?}")),
    }
}

#[derive(Debug, Args)]
pub struct TtestArgs {
    /// Column A as PATH:COLUMN (alternative: greater).
    #[arg(long, value_parser = parse_column_ref)]
    a: ColumnRef,
    /// Column B as PATH:COLUMN.
    #[arg(long, value_parser = parse_column_ref)]
    b: ColumnRef,
}

fn cmd_ttest(a: TtestArgs) -> Result<()> {
    let xs = read_column(&a.a.path, &a.a.column)?;
    let ys = read_column(&a.b.path, &a.b.column)?;
    let t = paired_t_test(&xs, &ys)?;
    println!(
        "{}",
        json!({
            "t_statistic": t.t_statistic,
            "degrees_of_freedom": t.degrees_of_freedom,
            "p_value_one_tailed": t.p_value_one_tailed,
        })
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory written by `pipeline` or `ablation`.
    #[arg(long)]
    dir: PathBuf,
    /// Also write the markdown to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let md = render_from_dir(&a.dir)?;
    if let Some(out) = &a.out {
        fs::write(out, &md)?;
    }
    print!("{md}");
    Ok(())
}
