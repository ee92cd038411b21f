//! Two-stage hyperparameter search.
//!
//! Stage one scores every `mu` by the dev accuracy of the extrapolated model
//! alone and keeps the best. Stage two freezes that `mu` and scores every
//! `lambda` by the dev accuracy of contrastive decoding between the
//! extrapolated model and the finetuned model. The joint `(mu, lambda)` grid
//! is never searched. Ties go to the smaller value.

use serde::{Deserialize, Serialize};

use super::eval::{evaluate, Contrastive, Greedy};
use crate::checkpoint::TensorMap;
use crate::data::Example;
use crate::decode::TokenId;
use crate::error::{Error, Result};
use crate::extrapolate::{extrapolate, ExtrapolationConfig};
use crate::toy_lm::{ToyConfig, ToyModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub mu_values: Vec<f32>,
    pub lambda_values: Vec<f32>,
}

impl Default for SweepGrid {
    /// `mu` in {1, 2, 4, 6, 8} x {1e-4, 1e-3, 1e-2, 1e-1} (20 values, 1e-4 to
    /// 0.8) and `lambda` in {0.1, 0.2, 0.4, 0.6, 0.8, 1.0}.
    fn default() -> Self {
        let mut mu_values = Vec::with_capacity(20);
        for scale in [1e-4, 1e-3, 1e-2, 1e-1] {
            for m in [1.0, 2.0, 4.0, 6.0, 8.0] {
                mu_values.push((m * scale) as f32);
            }
        }
        Self {
            mu_values,
            lambda_values: vec![0.1, 0.2, 0.4, 0.6, 0.8, 1.0],
        }
    }
}

impl SweepGrid {
    pub fn single(mu: f32, lambda: f32) -> Self {
        Self {
            mu_values: vec![mu],
            lambda_values: vec![lambda],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu_values.is_empty() || self.lambda_values.is_empty() {
            return Err(Error::InvalidConfig("sweep grid must have at least one mu and one lambda".into()));
        }
        if let Some(v) = self.mu_values.iter().chain(&self.lambda_values).find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidConfig(format!("grid values must be finite and >= 0, got {v}")));
        }
        Ok(())
    }
}

/// Dev-set scores the search queries.
pub trait SweepObjective {
    /// Accuracy of the extrapolated model alone.
    fn me_accuracy(&self, mu: f32) -> Result<f64>;
    /// Accuracy of contrastive decoding with the extrapolated model as the
    /// strong side and the finetuned model as the weak side.
    fn epicode_accuracy(&self, mu: f32, lambda: f32) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub mu: f32,
    pub lambda: f32,
    /// Stage-one scores in grid order.
    pub mu_scores: Vec<(f32, f64)>,
    /// Stage-two scores in grid order, all at the chosen `mu`.
    pub lambda_scores: Vec<(f32, f64)>,
}

/// Highest score; among equal scores, the smallest value.
pub fn best_of(scores: &[(f32, f64)]) -> Option<f32> {
    scores
        .iter()
        .copied()
        .reduce(|best, cur| {
            if cur.1 > best.1 || (cur.1 == best.1 && cur.0 < best.0) {
                cur
            } else {
                best
            }
        })
        .map(|(v, _)| v)
}

/// Scores each value with `score` and returns the best one with all scores.
pub fn tune<F>(values: &[f32], mut score: F) -> Result<(f32, Vec<(f32, f64)>)>
where
    F: FnMut(f32) -> Result<f64>,
{
    let scores = values
        .iter()
        .map(|&v| score(v).map(|s| (v, s)))
        .collect::<Result<Vec<_>>>()?;
    let best = best_of(&scores).ok_or_else(|| Error::InvalidConfig("empty grid".into()))?;
    Ok((best, scores))
}

pub fn sweep<O: SweepObjective + ?Sized>(objective: &O, grid: &SweepGrid) -> Result<SweepOutcome> {
    grid.validate()?;
    let (mu, mu_scores) = tune(&grid.mu_values, |mu| objective.me_accuracy(mu))?;
    let (lambda, lambda_scores) = tune(&grid.lambda_values, |lambda| objective.epicode_accuracy(mu, lambda))?;
    Ok(SweepOutcome {
        mu,
        lambda,
        mu_scores,
        lambda_scores,
    })
}

/// Objective backed by an early and a finetuned checkpoint of a toy model,
/// scored on a dev set.
pub struct CheckpointObjective<'a> {
    pub early: &'a TensorMap,
    pub ft: &'a TensorMap,
    pub config: &'a ToyConfig,
    pub dev: &'a [Example],
    pub alpha: f32,
    pub eos: TokenId,
}

impl CheckpointObjective<'_> {
    fn extrapolated(&self, mu: f32) -> Result<ToyModel> {
        let ep = extrapolate(self.ft, self.early, ExtrapolationConfig::new(mu)?)?;
        ToyModel::new(&ep, self.config)
    }
}

impl SweepObjective for CheckpointObjective<'_> {
    fn me_accuracy(&self, mu: f32) -> Result<f64> {
        Ok(evaluate(&Greedy(self.extrapolated(mu)?), self.dev, self.eos)?.accuracy)
    }

    fn epicode_accuracy(&self, mu: f32, lambda: f32) -> Result<f64> {
        let gen = Contrastive {
            strong: self.extrapolated(mu)?,
            weak: ToyModel::new(self.ft, self.config)?,
            lambda,
            alpha: self.alpha,
        };
        Ok(evaluate(&gen, self.dev, self.eos)?.accuracy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;

    /// Table-driven objective that logs every query.
    struct Table {
        me: fn(f32) -> f64,
        epi: fn(f32, f32) -> f64,
        calls: RefCell<Vec<(&'static str, f32, f32)>>,
    }

    impl SweepObjective for Table {
        fn me_accuracy(&self, mu: f32) -> Result<f64> {
            self.calls.borrow_mut().push(("me", mu, f32::NAN));
            Ok((self.me)(mu))
        }
        fn epicode_accuracy(&self, mu: f32, lambda: f32) -> Result<f64> {
            self.calls.borrow_mut().push(("epi", mu, lambda));
            Ok((self.epi)(mu, lambda))
        }
    }

    #[test]
    fn default_grid_shape() {
        let g = SweepGrid::default();
        assert_eq!(g.mu_values.len(), 20);
        assert_eq!(g.lambda_values.len(), 6);
        assert_eq!(g.mu_values[0], 1e-4);
        assert_eq!(g.mu_values[19], 0.8);
        assert!(g.mu_values.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn stages_run_in_order_with_mu_frozen() {
        let t = Table {
            me: |mu| if mu == 1e-3 { 0.9 } else { 0.5 },
            epi: |_, l| if l == 0.4 { 0.95 } else { 0.6 },
            calls: RefCell::default(),
        };
        let out = sweep(&t, &SweepGrid::default()).unwrap();
        assert_eq!((out.mu, out.lambda), (1e-3, 0.4));
        let calls = t.calls.borrow();
        assert_eq!(calls.len(), 26);
        assert!(calls[..20].iter().all(|c| c.0 == "me"));
        assert!(calls[20..].iter().all(|c| c.0 == "epi" && c.1 == 1e-3));
    }

    #[test]
    fn ties_prefer_smaller_values() {
        assert_eq!(best_of(&[(0.4, 0.5), (0.1, 0.5), (0.2, 0.4)]), Some(0.1));
        let t = Table {
            me: |_| 0.5,
            epi: |_, _| 0.5,
            calls: RefCell::default(),
        };
        let out = sweep(&t, &SweepGrid::default()).unwrap();
        assert_eq!((out.mu, out.lambda), (1e-4, 0.1));
    }

    #[test]
    fn single_point_grid() {
        let t = Table {
            me: |_| 0.1,
            epi: |_, _| 0.2,
            calls: RefCell::default(),
        };
        let out = sweep(&t, &SweepGrid::single(0.05, 0.7)).unwrap();
        assert_eq!((out.mu, out.lambda), (0.05, 0.7));
    }

    #[test]
    fn empty_grid_is_rejected() {
        let t = Table {
            me: |_| 0.1,
            epi: |_, _| 0.2,
            calls: RefCell::default(),
        };
        let grid = SweepGrid {
            mu_values: vec![],
            ..SweepGrid::default()
        };
        assert!(sweep(&t, &grid).is_err());
    }
}
