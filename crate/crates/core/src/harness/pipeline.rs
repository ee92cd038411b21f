//! The four-condition protocol, repeated per seed.
//!
//! One run trains a fresh toy model for two epochs, keeping the checkpoint
//! after each epoch (`early`, `ft`), then compares on the test split:
//!
//! | condition  | strong          | weak    | decoding                    |
//! |------------|-----------------|---------|-----------------------------|
//! | `finetune` | `ft`            | -       | greedy                      |
//! | `me_only`  | `ep`            | -       | greedy                      |
//! | `cd_only`  | `ft`            | `early` | contrastive, own `lambda`   |
//! | `epicode`  | `ep`            | `ft`    | contrastive                 |
//!
//! where `ep = ft + mu * (ft - early)`. `mu` and the EpiCoDe `lambda` come
//! from the two-stage dev sweep; the CD-only `lambda` is tuned on dev over
//! the same `lambda` grid. Nothing is tuned on test.

use serde::{Deserialize, Serialize};

use super::eval::{evaluate, Contrastive, EvalResult, Greedy};
use super::sweep::{sweep, tune, CheckpointObjective, SweepGrid};
use super::task::{gen_dataset, with_eos, Splits, TaskSpec, EOS};
use crate::checkpoint::TensorMap;
use crate::data::Example;
use crate::decode::TokenId;
use crate::error::{Error, Result};
use crate::extrapolate::{extrapolate, ExtrapolationConfig};
use crate::toy_lm::{self, LogEntry, OptimizerConfig, ToyConfig, ToyModel, TrainState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub task: TaskSpec,
    pub model: ToyConfig,
    pub optimizer: OptimizerConfig,
    pub grid: SweepGrid,
    /// Plausibility threshold for every contrastive condition.
    pub alpha: f32,
    /// Checkpoints are taken after epochs `epochs - 1` (`early`) and
    /// `epochs` (`ft`).
    pub epochs: usize,
}

impl Default for PipelineConfig {
    /// Batch size 8 instead of the optimizer's default 32: with 512 training
    /// examples, 2 epochs of 16 steps leave the model at chance accuracy,
    /// while 2 epochs of 64 steps stop it partway through learning the task.
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            model: ToyConfig::default(),
            optimizer: OptimizerConfig {
                batch_size: 8,
                ..OptimizerConfig::default()
            },
            grid: SweepGrid::default(),
            alpha: 0.1,
            epochs: 2,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.optimizer.validate()?;
        self.grid.validate()?;
        if self.task.vocab_size != self.model.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "task vocab_size {} differs from model vocab_size {}",
                self.task.vocab_size, self.model.vocab_size
            )));
        }
        if self.epochs < 2 {
            return Err(Error::InvalidConfig("epochs must be >= 2 to have an early checkpoint".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }

    /// Model config for one seed: the seed drives initialization.
    pub fn model_for(&self, seed: u64) -> ToyConfig {
        ToyConfig {
            seed,
            ..self.model.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Finetune,
    MeOnly,
    CdOnly,
    Epicode,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Self::Finetune, Self::MeOnly, Self::CdOnly, Self::Epicode];

    pub fn name(self) -> &'static str {
        match self {
            Self::Finetune => "finetune",
            Self::MeOnly => "me_only",
            Self::CdOnly => "cd_only",
            Self::Epicode => "epicode",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Finetune => "Finetune",
            Self::MeOnly => "ME",
            Self::CdOnly => "CD",
            Self::Epicode => "EpiCoDe",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// One value per condition.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PerCondition<T> {
    pub finetune: T,
    pub me_only: T,
    pub cd_only: T,
    pub epicode: T,
}

impl<T> PerCondition<T> {
    pub fn get(&self, c: Condition) -> &T {
        match c {
            Condition::Finetune => &self.finetune,
            Condition::MeOnly => &self.me_only,
            Condition::CdOnly => &self.cd_only,
            Condition::Epicode => &self.epicode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub chosen_mu: f32,
    pub chosen_lambda: f32,
    /// `lambda` used by the CD-only condition.
    pub cd_lambda: f32,
    pub dev: PerCondition<f64>,
    pub test: PerCondition<f64>,
    /// Test-set answers per condition, cut before the end-of-answer token.
    pub test_outputs: PerCondition<Vec<Vec<TokenId>>>,
    pub test_correct: PerCondition<Vec<bool>>,
    pub mu_scores: Vec<(f32, f64)>,
    pub lambda_scores: Vec<(f32, f64)>,
    /// Mean training loss over the whole training split for `init`,
    /// `early` and `ft`.
    pub train_losses: Vec<f64>,
}

impl RunRecord {
    /// Lengths of the finetuned model's test outputs, the difficulty proxy.
    pub fn finetune_output_lengths(&self) -> Vec<usize> {
        self.test_outputs.finetune.iter().map(Vec::len).collect()
    }
}

/// Checkpoints of one training run.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub init: TensorMap,
    pub early: TensorMap,
    pub ft: TensorMap,
    pub log: Vec<LogEntry>,
    pub train_losses: Vec<f64>,
}

pub fn make_splits(cfg: &PipelineConfig) -> Result<Splits> {
    cfg.validate()?;
    gen_dataset(&cfg.task)
}

/// Trains from the seed's initialization on `train` (answers already
/// terminated), shuffling with the same seed.
pub fn train_run(cfg: &PipelineConfig, train: &[Example], seed: u64) -> Result<TrainedRun> {
    let model = cfg.model_for(seed);
    let init = toy_lm::init(&model)?;
    let mut state = TrainState::new(init.clone());
    let outcome = toy_lm::train_epochs(&mut state, &model, train, &cfg.optimizer, cfg.epochs, seed)?;
    let mut checkpoints = outcome.checkpoints;
    let ft = checkpoints.pop().expect("epochs >= 2");
    let early = checkpoints.pop().expect("epochs >= 2");
    let mut train_losses = vec![toy_lm::loss(&init, &model, train)?];
    train_losses.push(toy_lm::loss(&early, &model, train)?);
    train_losses.push(toy_lm::loss(&ft, &model, train)?);
    Ok(TrainedRun {
        init,
        early,
        ft,
        log: outcome.log,
        train_losses,
    })
}

fn extrapolated(run: &TrainedRun, mu: f32) -> Result<TensorMap> {
    extrapolate(&run.ft, &run.early, ExtrapolationConfig::new(mu)?)
}

fn contrastive(strong: &TensorMap, weak: &TensorMap, model: &ToyConfig, lambda: f32, alpha: f32) -> Result<Contrastive<ToyModel, ToyModel>> {
    Ok(Contrastive {
        strong: ToyModel::new(strong, model)?,
        weak: ToyModel::new(weak, model)?,
        lambda,
        alpha,
    })
}

/// Tunes on `splits.dev` and reports all four conditions on both splits.
pub fn evaluate_run(cfg: &PipelineConfig, splits: &Splits, run: &TrainedRun, seed: u64) -> Result<RunRecord> {
    let model = cfg.model_for(seed);
    let objective = CheckpointObjective {
        early: &run.early,
        ft: &run.ft,
        config: &model,
        dev: &splits.dev,
        alpha: cfg.alpha,
        eos: EOS,
    };
    let sw = sweep(&objective, &cfg.grid)?;
    let (cd_lambda, _) = tune(&cfg.grid.lambda_values, |lambda| {
        let gen = contrastive(&run.ft, &run.early, &model, lambda, cfg.alpha)?;
        Ok(evaluate(&gen, &splits.dev, EOS)?.accuracy)
    })?;
    let ep = extrapolated(run, sw.mu)?;

    let score = |data: &[Example]| -> Result<PerCondition<EvalResult>> {
        Ok(PerCondition {
            finetune: evaluate(&Greedy(ToyModel::new(&run.ft, &model)?), data, EOS)?,
            me_only: evaluate(&Greedy(ToyModel::new(&ep, &model)?), data, EOS)?,
            cd_only: evaluate(&contrastive(&run.ft, &run.early, &model, cd_lambda, cfg.alpha)?, data, EOS)?,
            epicode: evaluate(&contrastive(&ep, &run.ft, &model, sw.lambda, cfg.alpha)?, data, EOS)?,
        })
    };
    let dev = score(&splits.dev)?;
    let test = score(&splits.test)?;
    let acc = |r: &PerCondition<EvalResult>| PerCondition {
        finetune: r.finetune.accuracy,
        me_only: r.me_only.accuracy,
        cd_only: r.cd_only.accuracy,
        epicode: r.epicode.accuracy,
    };
    Ok(RunRecord {
        seed,
        chosen_mu: sw.mu,
        chosen_lambda: sw.lambda,
        cd_lambda,
        dev: acc(&dev),
        test: acc(&test),
        test_correct: PerCondition {
            finetune: test.finetune.correct.clone(),
            me_only: test.me_only.correct.clone(),
            cd_only: test.cd_only.correct.clone(),
            epicode: test.epicode.correct.clone(),
        },
        test_outputs: PerCondition {
            finetune: test.finetune.outputs,
            me_only: test.me_only.outputs,
            cd_only: test.cd_only.outputs,
            epicode: test.epicode.outputs,
        },
        mu_scores: sw.mu_scores,
        lambda_scores: sw.lambda_scores,
        train_losses: run.train_losses.clone(),
    })
}

/// Full run for one seed: data, training, sweep, evaluation.
pub fn run_pipeline(cfg: &PipelineConfig, seed: u64) -> Result<RunRecord> {
    let splits = make_splits(cfg)?;
    let run = train_run(cfg, &with_eos(&splits.train), seed)?;
    evaluate_run(cfg, &splits, &run, seed)
}

/// Test accuracies of EpiCoDe-style decoding with strong = `ep` and each
/// candidate weak model, at the run's chosen `(mu, lambda)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRecord {
    pub seed: u64,
    pub mu: f32,
    pub lambda: f32,
    /// `ep` decoded greedily on its own.
    pub ep_alone: f64,
    pub weak_init: f64,
    pub weak_early: f64,
    pub weak_ft: f64,
}

impl AblationRecord {
    pub const WEAK_LABELS: [&'static str; 3] = ["init", "early", "ft"];

    pub fn weak_accuracies(&self) -> [f64; 3] {
        [self.weak_init, self.weak_early, self.weak_ft]
    }
}

/// Swaps the weak model while keeping everything else of the EpiCoDe
/// condition fixed. `weak = ft` and `ep` alone are the record's `epicode`
/// and `me_only` test results, which are the same computations.
pub fn ablate(cfg: &PipelineConfig, splits: &Splits, run: &TrainedRun, record: &RunRecord) -> Result<AblationRecord> {
    let model = cfg.model_for(record.seed);
    let ep = extrapolated(run, record.chosen_mu)?;
    let with_weak = |weak: &TensorMap| -> Result<f64> {
        let gen = contrastive(&ep, weak, &model, record.chosen_lambda, cfg.alpha)?;
        Ok(evaluate(&gen, &splits.test, EOS)?.accuracy)
    };
    Ok(AblationRecord {
        seed: record.seed,
        mu: record.chosen_mu,
        lambda: record.chosen_lambda,
        ep_alone: record.test.me_only,
        weak_init: with_weak(&run.init)?,
        weak_early: with_weak(&run.early)?,
        weak_ft: record.test.epicode,
    })
}

/// Pipeline plus ablation from a single training run.
pub fn run_seed(cfg: &PipelineConfig, splits: &Splits, seed: u64) -> Result<(RunRecord, AblationRecord)> {
    let run = train_run(cfg, &with_eos(&splits.train), seed)?;
    let record = evaluate_run(cfg, splits, &run, seed)?;
    let ablation = ablate(cfg, splits, &run, &record)?;
    Ok((record, ablation))
}

pub fn weak_model_ablation(cfg: &PipelineConfig, seed: u64) -> Result<AblationRecord> {
    let splits = make_splits(cfg)?;
    Ok(run_seed(cfg, &splits, seed)?.1)
}

/// Seeds whose test accuracy under `condition` strictly exceeds finetune.
pub fn success_count(records: &[RunRecord], condition: Condition) -> usize {
    records
        .iter()
        .filter(|r| r.test.get(condition) > r.test.get(Condition::Finetune))
        .count()
}

/// Splits `0..lengths.len()` into easy / medium / hard thirds by ascending
/// length, ties by index. Part sizes differ by at most one.
pub fn tercile_indices(lengths: &[usize]) -> Result<[Vec<usize>; 3]> {
    let n = lengths.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!("need at least 3 examples for terciles, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    let cut = |k: usize| k * n / 3;
    Ok([
        order[cut(0)..cut(1)].to_vec(),
        order[cut(1)..cut(2)].to_vec(),
        order[cut(2)..cut(3)].to_vec(),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TercileRow {
    pub label: String,
    /// Examples per seed in this tercile.
    pub size: usize,
    /// Mean accuracy over seeds, per condition.
    pub accuracy: PerCondition<f64>,
}

impl TercileRow {
    pub fn delta(&self, c: Condition) -> f64 {
        self.accuracy.get(c) - self.accuracy.finetune
    }
}

/// Per-tercile accuracies averaged over seeds, each seed partitioned by its
/// own finetuned outputs.
pub fn difficulty_report(records: &[RunRecord]) -> Result<Vec<TercileRow>> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no run records".into()));
    }
    let mut sums = [[0.0f64; 4]; 3];
    let mut sizes = [0usize; 3];
    for r in records {
        let parts = tercile_indices(&r.finetune_output_lengths())?;
        for (t, idx) in parts.iter().enumerate() {
            sizes[t] = idx.len();
            for (c, cond) in Condition::ALL.into_iter().enumerate() {
                let correct = r.test_correct.get(cond);
                let hits = idx.iter().filter(|&&i| correct[i]).count();
                sums[t][c] += hits as f64 / idx.len() as f64;
            }
        }
    }
    let n = records.len() as f64;
    Ok(["easy", "medium", "hard"]
        .into_iter()
        .enumerate()
        .map(|(t, label)| TercileRow {
            label: label.to_string(),
            size: sizes[t],
            accuracy: PerCondition {
                finetune: sums[t][0] / n,
                me_only: sums[t][1] / n,
                cd_only: sums[t][2] / n,
                epicode: sums[t][3] / n,
            },
        })
        .collect())
}
