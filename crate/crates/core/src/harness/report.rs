//! CSV outputs and the markdown summary of a multi-seed run.
//!
//! Files written by [`write_reports`]:
//!
//! - `runs.csv`: one row per seed x condition with the hyperparameters that
//!   condition actually used (0 where it uses none).
//! - `seeds.csv`: one row per seed, test accuracy per condition in columns.
//! - `ablation.csv`: weak-model ablation, one row per seed.
//! - `difficulty.csv`: per-tercile accuracies averaged over seeds.
//! - `summary.md`: tables built from the above.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pipeline::{success_count, AblationRecord, Condition, PerCondition, RunRecord, TercileRow};
use super::stats::paired_t_test;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub seed: u64,
    pub condition: String,
    pub mu: f32,
    pub lambda: f32,
    pub dev_accuracy: f64,
    pub test_accuracy: f64,
}

/// Per-seed test accuracies, one column per condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub mu: f32,
    pub lambda: f32,
    pub cd_lambda: f32,
    pub finetune: f64,
    pub me_only: f64,
    pub cd_only: f64,
    pub epicode: f64,
}

impl SeedRow {
    pub fn get(&self, c: Condition) -> f64 {
        match c {
            Condition::Finetune => self.finetune,
            Condition::MeOnly => self.me_only,
            Condition::CdOnly => self.cd_only,
            Condition::Epicode => self.epicode,
        }
    }
}

impl From<&RunRecord> for SeedRow {
    fn from(r: &RunRecord) -> Self {
        Self {
            seed: r.seed,
            mu: r.chosen_mu,
            lambda: r.chosen_lambda,
            cd_lambda: r.cd_lambda,
            finetune: r.test.finetune,
            me_only: r.test.me_only,
            cd_only: r.test.cd_only,
            epicode: r.test.epicode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRow {
    pub tercile: String,
    pub size: usize,
    pub finetune: f64,
    pub me_only: f64,
    pub cd_only: f64,
    pub epicode: f64,
}

impl From<&TercileRow> for DifficultyRow {
    fn from(t: &TercileRow) -> Self {
        Self {
            tercile: t.label.clone(),
            size: t.size,
            finetune: t.accuracy.finetune,
            me_only: t.accuracy.me_only,
            cd_only: t.accuracy.cd_only,
            epicode: t.accuracy.epicode,
        }
    }
}

impl From<&DifficultyRow> for TercileRow {
    fn from(d: &DifficultyRow) -> Self {
        Self {
            label: d.tercile.clone(),
            size: d.size,
            accuracy: PerCondition {
                finetune: d.finetune,
                me_only: d.me_only,
                cd_only: d.cd_only,
                epicode: d.epicode,
            },
        }
    }
}

pub fn long_rows(records: &[RunRecord]) -> Vec<LongRow> {
    records
        .iter()
        .flat_map(|r| {
            Condition::ALL.into_iter().map(move |c| {
                let (mu, lambda) = match c {
                    Condition::Finetune => (0.0, 0.0),
                    Condition::MeOnly => (r.chosen_mu, 0.0),
                    Condition::CdOnly => (0.0, r.cd_lambda),
                    Condition::Epicode => (r.chosen_mu, r.chosen_lambda),
                };
                LongRow {
                    seed: r.seed,
                    condition: c.name().to_string(),
                    mu,
                    lambda,
                    dev_accuracy: *r.dev.get(c),
                    test_accuracy: *r.test.get(c),
                }
            })
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Reads one numeric column of a CSV file by header name.
pub fn read_column(path: impl AsRef<Path>, column: &str) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let idx = r
        .headers()?
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| Error::Format(format!("{}: no column named {column:?}", path.display())))?;
    r.records()
        .enumerate()
        .map(|(line, rec)| {
            let rec = rec?;
            let cell = rec.get(idx).unwrap_or("");
            cell.trim().parse::<f64>().map_err(|_| {
                Error::Format(format!("{}: row {}: {column} = {cell:?} is not a number", path.display(), line + 1))
            })
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn signed_pct(x: f64) -> String {
    format!("{:+.2}", 100.0 * x)
}

/// Mean test accuracy per condition.
pub fn condition_means(rows: &[SeedRow]) -> PerCondition<f64> {
    let m = |c| mean(&rows.iter().map(|r| r.get(c)).collect::<Vec<_>>());
    PerCondition {
        finetune: m(Condition::Finetune),
        me_only: m(Condition::MeOnly),
        cd_only: m(Condition::CdOnly),
        epicode: m(Condition::Epicode),
    }
}

/// Success counts computed from seed rows (same rule as
/// [`success_count`]: strict improvement over finetune).
pub fn success_counts(rows: &[SeedRow]) -> PerCondition<usize> {
    let count = |c| rows.iter().filter(|r| r.get(c) > r.finetune).count();
    PerCondition {
        finetune: 0,
        me_only: count(Condition::MeOnly),
        cd_only: count(Condition::CdOnly),
        epicode: count(Condition::Epicode),
    }
}

/// Renders `t`, `df` and the one-tailed `p` for `a > b`, or the reason the
/// test is undefined.
pub fn ttest_cells(a: &[f64], b: &[f64]) -> [String; 3] {
    match paired_t_test(a, b) {
        Ok(t) => [
            format!("{:.4}", t.t_statistic),
            t.degrees_of_freedom.to_string(),
            format!("{:.4e}", t.p_value_one_tailed),
        ],
        Err(e) => [format!("n/a ({e})"), "-".into(), "-".into()],
    }
}

/// Markdown summary: accuracy table, significance tests, success counts,
/// then the optional difficulty and ablation tables, then per-seed results.
pub fn render_markdown(rows: &[SeedRow], ablation: &[AblationRecord], difficulty: &[TercileRow]) -> String {
    let mut s = String::new();
    let n = rows.len();
    let _ = writeln!(s, "# EpiCoDe toy-scale results ({n} seeds)\n");
    if rows.is_empty() {
        s.push_str("No runs.\n");
        return s;
    }

    let means = condition_means(rows);
    let _ = writeln!(s, "## Test accuracy (%)\n");
    let _ = writeln!(s, "| Condition | Mean | Std | Delta vs Finetune |");
    let _ = writeln!(s, "|---|---|---|---|");
    for c in Condition::ALL {
        let col: Vec<f64> = rows.iter().map(|r| r.get(c)).collect();
        let delta = if c == Condition::Finetune {
            "-".to_string()
        } else {
            signed_pct(means.get(c) - means.finetune)
        };
        let _ = writeln!(s, "| {} | {} | {} | {} |", c.label(), pct(*means.get(c)), pct(sample_std(&col)), delta);
    }

    let col = |c| rows.iter().map(|r| r.get(c)).collect::<Vec<_>>();
    let _ = writeln!(s, "\n## Paired one-tailed t-tests\n");
    let _ = writeln!(s, "| H1 | t | df | p |");
    let _ = writeln!(s, "|---|---|---|---|");
    for (a, b) in [
        (Condition::Epicode, Condition::Finetune),
        (Condition::Epicode, Condition::MeOnly),
        (Condition::Epicode, Condition::CdOnly),
        (Condition::MeOnly, Condition::Finetune),
        (Condition::CdOnly, Condition::Finetune),
    ] {
        let [t, df, p] = ttest_cells(&col(a), &col(b));
        let _ = writeln!(s, "| {} > {} | {t} | {df} | {p} |", a.label(), b.label());
    }

    let counts = success_counts(rows);
    let _ = writeln!(s, "\n## Improvements over Finetune (strict), out of {n}\n");
    let _ = writeln!(s, "| ME | CD | EpiCoDe |");
    let _ = writeln!(s, "|---|---|---|");
    let _ = writeln!(s, "| {} | {} | {} |", counts.me_only, counts.cd_only, counts.epicode);

    if !difficulty.is_empty() {
        let _ = writeln!(s, "\n## Accuracy by difficulty (terciles of finetuned output length, %)\n");
        let _ = writeln!(s, "| Tercile | Size | Finetune | ME | CD | EpiCoDe |");
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        for t in difficulty {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} ({}) | {} ({}) | {} ({}) |",
                t.label,
                t.size,
                pct(t.accuracy.finetune),
                pct(t.accuracy.me_only),
                signed_pct(t.delta(Condition::MeOnly)),
                pct(t.accuracy.cd_only),
                signed_pct(t.delta(Condition::CdOnly)),
                pct(t.accuracy.epicode),
                signed_pct(t.delta(Condition::Epicode)),
            );
        }
    }

    if !ablation.is_empty() {
        let base = mean(&ablation.iter().map(|a| a.ep_alone).collect::<Vec<_>>());
        let _ = writeln!(s, "\n## Weak-model ablation (strong = extrapolated model, %)\n");
        let _ = writeln!(s, "| Weak model | Mean accuracy | Delta vs extrapolated alone |");
        let _ = writeln!(s, "|---|---|---|");
        let _ = writeln!(s, "| (none) | {} | - |", pct(base));
        for (i, label) in AblationRecord::WEAK_LABELS.iter().enumerate() {
            let m = mean(&ablation.iter().map(|a| a.weak_accuracies()[i]).collect::<Vec<_>>());
            let _ = writeln!(s, "| {label} | {} | {} |", pct(m), signed_pct(m - base));
        }
        let _ = writeln!(s, "\n| Seed | mu | lambda | ep alone | init | early | ft |");
        let _ = writeln!(s, "|---|---|---|---|---|---|---|");
        for a in ablation {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} |",
                a.seed,
                a.mu,
                a.lambda,
                pct(a.ep_alone),
                pct(a.weak_init),
                pct(a.weak_early),
                pct(a.weak_ft)
            );
        }
    }

    let _ = writeln!(s, "\n## Per-seed test accuracy (%)\n");
    let _ = writeln!(s, "| Seed | mu | lambda | CD lambda | Finetune | ME | CD | EpiCoDe |");
    let _ = writeln!(s, "|---|---|---|---|---|---|---|---|");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} | {} |",
            r.seed,
            r.mu,
            r.lambda,
            r.cd_lambda,
            pct(r.finetune),
            pct(r.me_only),
            pct(r.cd_only),
            pct(r.epicode)
        );
    }
    s
}

/// Writes every report file into `dir` (created if missing).
pub fn write_reports(dir: impl AsRef<Path>, records: &[RunRecord], ablation: &[AblationRecord], difficulty: &[TercileRow]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let seeds: Vec<SeedRow> = records.iter().map(SeedRow::from).collect();
    write_csv(dir.join("runs.csv"), &long_rows(records))?;
    write_csv(dir.join("seeds.csv"), &seeds)?;
    if !ablation.is_empty() {
        write_csv(dir.join("ablation.csv"), ablation)?;
    }
    if !difficulty.is_empty() {
        write_csv(dir.join("difficulty.csv"), &difficulty.iter().map(DifficultyRow::from).collect::<Vec<_>>())?;
    }
    fs::write(dir.join("summary.md"), render_markdown(&seeds, ablation, difficulty))?;
    Ok(())
}

/// Re-renders `summary.md` content from CSVs previously written to `dir`.
/// `ablation.csv` and `difficulty.csv` are optional.
pub fn render_from_dir(dir: impl AsRef<Path>) -> Result<String> {
    let dir = dir.as_ref();
    let seeds: Vec<SeedRow> = read_csv(dir.join("seeds.csv"))?;
    let ablation: Vec<AblationRecord> = match dir.join("ablation.csv") {
        p if p.exists() => read_csv(p)?,
        _ => Vec::new(),
    };
    let difficulty: Vec<TercileRow> = match dir.join("difficulty.csv") {
        p if p.exists() => read_csv::<DifficultyRow>(p)?.iter().map(TercileRow::from).collect(),
        _ => Vec::new(),
    };
    Ok(render_markdown(&seeds, &ablation, &difficulty))
}

/// Checks that the counts in [`success_counts`] agree with
/// [`success_count`] on the records they came from.
pub fn counts_agree(records: &[RunRecord]) -> bool {
    let rows: Vec<SeedRow> = records.iter().map(SeedRow::from).collect();
    let c = success_counts(&rows);
    [Condition::MeOnly, Condition::CdOnly, Condition::Epicode]
        .into_iter()
        .all(|cond| *c.get(cond) == success_count(records, cond))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64, ft: f64, epi: f64) -> SeedRow {
        SeedRow {
            seed,
            mu: 0.01,
            lambda: 0.2,
            cd_lambda: 0.4,
            finetune: ft,
            me_only: ft + 0.01,
            cd_only: ft,
            epicode: epi,
        }
    }

    #[test]
    fn csv_round_trip_and_column_read() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<SeedRow> = (0..3).map(|s| row(s, 0.5 + 0.1 * s as f64, 0.7)).collect();
        let p = dir.path().join("seeds.csv");
        write_csv(&p, &rows).unwrap();
        assert_eq!(read_csv::<SeedRow>(&p).unwrap(), rows);
        assert_eq!(read_column(&p, "finetune").unwrap(), vec![0.5, 0.6, 0.7]);
        assert!(read_column(&p, "nope").is_err());
    }

    #[test]
    fn markdown_has_every_section() {
        let rows: Vec<SeedRow> = (0..4).map(|s| row(s, 0.5, 0.55 + 0.01 * s as f64)).collect();
        let md = render_markdown(&rows, &[], &[]);
        assert!(md.contains("| EpiCoDe |"));
        assert!(md.contains("EpiCoDe > Finetune"));
        assert!(md.contains("| 4 | 0 | 4 |"), "{md}");
        assert!(md.contains("## Per-seed"));
        assert!(!md.contains("ablation"));
        // Zero-variance differences render as an explanation, not a panic.
        assert!(md.contains("n/a ("));
    }

    #[test]
    fn write_then_render_from_dir() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<SeedRow> = (0..3).map(|s| row(s, 0.5, 0.6)).collect();
        write_csv(dir.path().join("seeds.csv"), &rows).unwrap();
        let ab = vec![AblationRecord {
            seed: 0,
            mu: 0.01,
            lambda: 0.2,
            ep_alone: 0.5,
            weak_init: 0.4,
            weak_early: 0.45,
            weak_ft: 0.55,
        }];
        write_csv(dir.path().join("ablation.csv"), &ab).unwrap();
        let md = render_from_dir(dir.path()).unwrap();
        assert_eq!(md, render_markdown(&rows, &ab, &[]));
        assert!(md.contains("Weak-model ablation"));
    }
}
