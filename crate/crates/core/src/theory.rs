//! Monte Carlo model of how contrastive decoding transforms logit errors.
//!
//! Logit errors are deviations from a hypothetical optimal model's scores.
//! The strong model's error is `delta_s ~ N(0, eps^2)` per component and the
//! weak model's is
//!
//! ```text
//! delta_w = k * (rho * delta_s + sqrt(1 - rho^2) * eta),   eta ~ N(0, eps^2)
//! ```
//!
//! so `Std(delta_w) = k * eps` and `Corr(delta_s, delta_w) = rho`. The
//! contrastive score `(1 + lambda) L_s - lambda L_w` carries the error
//! `(1 + lambda) delta_s - lambda delta_w`, whose per-component variance is
//!
//! ```text
//! eps^2 * ((1 + lambda)^2 - 2 lambda (1 + lambda) k rho + lambda^2 k^2)
//! ```
//!
//! At `rho = 1` this is `((1 - lambda (k - 1)) eps)^2`; at `rho = 0` it is
//! `(1 + lambda)^2 eps^2 + lambda^2 k^2 eps^2`. Components are independent
//! across the vocabulary. Trial `i` draws from the stream `(seed, i)`, so
//! every estimate is independent of the worker count.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng;

/// Trials per deterministic reduction chunk.
const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorScenario {
    pub epsilon: f64,
    pub k: f64,
    pub lambda: f64,
    pub rho: f64,
    pub vocab_size: usize,
    pub trials: usize,
    pub seed: u64,
}

impl ErrorScenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.k > 1.0 && self.k.is_finite()) {
            return Err(Error::InvalidConfig(format!("k must be > 1, got {}", self.k)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidConfig(format!("rho must be in [0, 1], got {}", self.rho)));
        }
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig("vocab_size must be >= 2".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be >= 1".into()));
        }
        Ok(())
    }

    /// Closed-form standard deviation of each contrastive error component.
    pub fn predicted_std(&self) -> f64 {
        let (l, k, r) = (self.lambda, self.k, self.rho);
        let var = (1.0 + l).powi(2) - 2.0 * l * (1.0 + l) * k * r + (l * k).powi(2);
        var.max(0.0).sqrt() * self.epsilon
    }

    /// `(1 - lambda (k - 1)) eps` without the absolute value. Negative when
    /// `lambda (k - 1) > 1`, where the achievable std is its magnitude.
    pub fn signed_correlated_bound(&self) -> f64 {
        (1.0 - self.lambda * (self.k - 1.0)) * self.epsilon
    }
}

/// Scores of the hypothetical optimal model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueTask {
    pub optimal_logits: Vec<f64>,
}

impl TrueTask {
    pub fn new(optimal_logits: Vec<f64>) -> Result<Self> {
        if optimal_logits.len() < 2 || optimal_logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("optimal logits need >= 2 finite entries".into()));
        }
        Ok(Self { optimal_logits })
    }

    /// `[1, 0, ..., 0]`: token 0 is correct by a margin of one.
    pub fn one_hot(vocab_size: usize) -> Result<Self> {
        let mut l = vec![0.0; vocab_size];
        if let Some(first) = l.first_mut() {
            *first = 1.0;
        }
        Self::new(l)
    }
}

/// Draws one `(delta_s, delta_w)` pair of length `vocab_size`.
pub fn sample_error_pair<R: Rng + ?Sized>(scenario: &ErrorScenario, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let v = scenario.vocab_size;
    let mut ds = vec![0.0; v];
    let mut eta = vec![0.0; v];
    rng::fill_normal(rng, scenario.epsilon, &mut ds);
    rng::fill_normal(rng, scenario.epsilon, &mut eta);
    let (k, rho) = (scenario.k, scenario.rho);
    let resid = (1.0 - rho * rho).max(0.0).sqrt();
    let dw = ds
        .iter()
        .zip(&eta)
        .map(|(&s, &e)| k * (rho * s + resid * e))
        .collect();
    (ds, dw)
}

/// `(1 + lambda) delta_s - lambda delta_w`, componentwise.
pub fn cd_error(delta_s: &[f64], delta_w: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if delta_s.len() != delta_w.len() {
        return Err(Error::LengthMismatch {
            expected: delta_s.len(),
            actual: delta_w.len(),
        });
    }
    Ok(delta_s
        .iter()
        .zip(delta_w)
        .map(|(&s, &w)| (1.0 + lambda) * s - lambda * w)
        .collect())
}

/// Runs `f(trial_index, delta_s, delta_w)` for every trial and folds the
/// per-chunk results in chunk order.
fn fold_trials<A, F, G>(scenario: &ErrorScenario, init: A, per_trial: F, combine: G) -> A
where
    A: Clone + Send + Sync,
    F: Fn(&mut A, &[f64], &[f64]) + Sync,
    G: Fn(A, A) -> A,
{
    let n_chunks = scenario.trials.div_ceil(CHUNK);
    let parts: Vec<A> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = init.clone();
            let end = ((c + 1) * CHUNK).min(scenario.trials);
            for trial in c * CHUNK..end {
                let mut r = rng::stream(scenario.seed, trial as u64);
                let (ds, dw) = sample_error_pair(scenario, &mut r);
                per_trial(&mut acc, &ds, &dw);
            }
            acc
        })
        .collect();
    parts.into_iter().fold(init, combine)
}

#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    sum: f64,
    sumsq: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        self.sum += x;
        self.sumsq += x * x;
    }

    fn merge(self, o: Moments) -> Moments {
        Moments {
            n: self.n + o.n,
            sum: self.sum + o.sum,
            sumsq: self.sumsq + o.sumsq,
        }
    }

    fn std(&self) -> f64 {
        if self.n < 2.0 {
            return 0.0;
        }
        let var = (self.sumsq - self.sum * self.sum / self.n) / (self.n - 1.0);
        var.max(0.0).sqrt()
    }
}

/// Pooled sample standard deviation of all contrastive error components
/// over all trials.
pub fn estimate_error_std(scenario: &ErrorScenario) -> Result<f64> {
    scenario.validate()?;
    let lambda = scenario.lambda;
    let m = fold_trials(
        scenario,
        Moments::default(),
        |acc, ds, dw| {
            for (&s, &w) in ds.iter().zip(dw) {
                acc.push((1.0 + lambda) * s - lambda * w);
            }
        },
        Moments::merge,
    );
    Ok(m.std())
}

/// Pooled sample standard deviation of the strong model's error alone,
/// drawn from the same streams as [`estimate_error_std`].
pub fn estimate_strong_std(scenario: &ErrorScenario) -> Result<f64> {
    scenario.validate()?;
    let m = fold_trials(
        scenario,
        Moments::default(),
        |acc, ds, _| ds.iter().for_each(|&s| acc.push(s)),
        Moments::merge,
    );
    Ok(m.std())
}

/// Sample correlation and standard deviations of `(delta_s[0], delta_w[0])`.
pub fn first_component_stats(scenario: &ErrorScenario) -> Result<(f64, f64, f64)> {
    scenario.validate()?;
    let acc = fold_trials(
        scenario,
        [0.0f64; 6],
        |a, ds, dw| {
            let (x, y) = (ds[0], dw[0]);
            a[0] += 1.0;
            a[1] += x;
            a[2] += y;
            a[3] += x * x;
            a[4] += y * y;
            a[5] += x * y;
        },
        |mut a, b| {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            a
        },
    );
    let n = acc[0];
    let cov = acc[5] / n - (acc[1] / n) * (acc[2] / n);
    let vx = acc[3] / n - (acc[1] / n).powi(2);
    let vy = acc[4] / n - (acc[2] / n).powi(2);
    Ok((cov / (vx * vy).sqrt(), vx.sqrt(), vy.sqrt()))
}

fn argmax(v: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in v.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

/// Fractions of trials in which the noisy argmax differs from the optimal
/// argmax, for the contrastive error and for the strong error alone.
pub fn argmax_flip_rate(scenario: &ErrorScenario, task: &TrueTask) -> Result<(f64, f64)> {
    scenario.validate()?;
    if task.optimal_logits.len() != scenario.vocab_size {
        return Err(Error::LengthMismatch {
            expected: scenario.vocab_size,
            actual: task.optimal_logits.len(),
        });
    }
    let star = &task.optimal_logits;
    let truth = argmax(star.iter().copied());
    let lambda = scenario.lambda;
    let (cd, strong) = fold_trials(
        scenario,
        (0u64, 0u64),
        |acc, ds, dw| {
            let cd = argmax(
                star.iter()
                    .zip(ds.iter().zip(dw))
                    .map(|(&l, (&s, &w))| l + ((1.0 + lambda) * s - lambda * w)),
            );
            let st = argmax(star.iter().zip(ds).map(|(&l, &s)| l + s));
            acc.0 += (cd != truth) as u64;
            acc.1 += (st != truth) as u64;
        },
        |a, b| (a.0 + b.0, a.1 + b.1),
    );
    let n = scenario.trials as f64;
    Ok((cd as f64 / n, strong as f64 / n))
}

/// One row of the `theory` report.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryReport {
    pub scenario: ErrorScenario,
    pub std_estimate: f64,
    pub predicted_std: f64,
    /// `|estimate - predicted| / predicted`, or the absolute difference when
    /// the prediction is zero.
    pub rel_error: f64,
    /// True where the signed bound `(1 - lambda (k - 1)) eps` is negative and
    /// so differs from the achievable std (only meaningful at `rho = 1`).
    pub signed_bound_differs: bool,
    pub rate_cd: f64,
    pub rate_strong: f64,
}

impl TheoryReport {
    pub const CSV_HEADER: &'static str = "epsilon,k,lambda,rho,vocab,trials,seed,std_estimate,predicted_std,rel_error,signed_bound_differs,rate_cd,rate_strong";

    pub fn run(scenario: &ErrorScenario) -> Result<Self> {
        let std_estimate = estimate_error_std(scenario)?;
        let predicted_std = scenario.predicted_std();
        let rel_error = if predicted_std > 0.0 {
            (std_estimate - predicted_std).abs() / predicted_std
        } else {
            std_estimate.abs()
        };
        let (rate_cd, rate_strong) = argmax_flip_rate(scenario, &TrueTask::one_hot(scenario.vocab_size)?)?;
        Ok(Self {
            scenario: *scenario,
            std_estimate,
            predicted_std,
            rel_error,
            signed_bound_differs: scenario.signed_correlated_bound() < 0.0,
            rate_cd,
            rate_strong,
        })
    }

    /// Full-precision CSV row matching [`Self::CSV_HEADER`].
    pub fn csv_row(&self) -> String {
        let s = &self.scenario;
        format!(
            "{:?},{:?},{:?},{:?},{},{},{},{:?},{:?},{:?},{},{:?},{:?}",
            s.epsilon,
            s.k,
            s.lambda,
            s.rho,
            s.vocab_size,
            s.trials,
            s.seed,
            self.std_estimate,
            self.predicted_std,
            self.rel_error,
            self.signed_bound_differs,
            self.rate_cd,
            self.rate_strong
        )
    }
}
