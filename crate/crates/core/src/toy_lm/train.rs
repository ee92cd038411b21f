//! Supervised finetuning: answer-only cross-entropy, epoch loop with one
//! checkpoint per epoch, and a finite-difference gradient check.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::model::{backward, forward, forward_cached, Real};
use super::optim::{adamw_step, OptimizerConfig, TrainState};
use super::{Layout, ToyConfig};
use crate::checkpoint::TensorMap;
use crate::data::Example;
use crate::decode::TokenId;
use crate::error::{Error, Result};
use crate::rng;

/// Input tokens and the index of the first position that predicts an
/// answer token. Position `i` predicts `seq[i + 1]`.
fn model_input(cfg: &ToyConfig, ex: &Example) -> Result<(Vec<TokenId>, usize)> {
    if ex.prompt.is_empty() || ex.answer.is_empty() {
        return Err(Error::InvalidInput("examples need a non-empty prompt and answer".into()));
    }
    let mut seq = Vec::with_capacity(ex.prompt.len() + ex.answer.len());
    seq.extend_from_slice(&ex.prompt);
    seq.extend_from_slice(&ex.answer);
    seq.pop();
    if seq.len() > cfg.max_context {
        return Err(Error::InvalidInput(format!(
            "context overflow: example needs {} positions, max_context is {}",
            seq.len(),
            cfg.max_context
        )));
    }
    Ok((seq, ex.prompt.len() - 1))
}

fn check_batch(batch: &[Example]) -> Result<usize> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    Ok(batch.iter().map(|e| e.answer.len()).sum())
}

/// `-log softmax(row)[target]`, accumulated in f64.
fn nll<T: Real>(row: &[T], target: TokenId) -> f64 {
    let row: Vec<f64> = row.iter().map(|x| x.to_f64().expect("finite")).collect();
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    lse - row[target as usize]
}

/// Mean cross-entropy over answer tokens only; prompt positions carry no
/// loss.
pub fn batch_loss<T: Real>(cfg: &ToyConfig, layout: &Layout, params: &[T], batch: &[Example]) -> Result<f64> {
    let count = check_batch(batch)?;
    let v = cfg.vocab_size;
    let per_example = batch
        .par_iter()
        .map(|ex| {
            let (input, first) = model_input(cfg, ex)?;
            let logits = forward(cfg, layout, params, &input, false)?;
            Ok(ex
                .answer
                .iter()
                .enumerate()
                .map(|(a, &target)| {
                    let pos = first + a;
                    nll(&logits[pos * v..(pos + 1) * v], target)
                })
                .sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_example.iter().sum::<f64>() / count as f64)
}

/// Loss and its gradient over the flat parameter vector. Per-example work
/// runs in parallel; gradients are summed in batch order.
pub fn batch_loss_and_grad(
    cfg: &ToyConfig,
    layout: &Layout,
    params: &[f32],
    batch: &[Example],
) -> Result<(f64, Vec<f32>)> {
    let count = check_batch(batch)?;
    let v = cfg.vocab_size;
    let inv = 1.0 / count as f64;
    let parts = batch
        .par_iter()
        .map(|ex| {
            let (input, first) = model_input(cfg, ex)?;
            let cache = forward_cached(cfg, layout, params, &input)?;
            let mut dlogits = vec![0.0f32; cache.logits.len()];
            let mut loss = 0.0;
            for (a, &target) in ex.answer.iter().enumerate() {
                let pos = first + a;
                let row = &cache.logits[pos * v..(pos + 1) * v];
                loss += nll(row, target);
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                let z: f64 = row.iter().map(|&x| (x as f64 - max).exp()).sum();
                let drow = &mut dlogits[pos * v..(pos + 1) * v];
                for (j, d) in drow.iter_mut().enumerate() {
                    let p = (row[j] as f64 - max).exp() / z;
                    let y = if j == target as usize { 1.0 } else { 0.0 };
                    *d = ((p - y) * inv) as f32;
                }
            }
            Ok((loss, backward(cfg, layout, params, &cache, &dlogits)))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut grad = vec![0.0f32; layout.total()];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += *b;
        }
    }
    Ok((loss * inv, grad))
}

/// Mean answer-token cross-entropy of `params` on `batch`.
pub fn loss(params: &TensorMap, cfg: &ToyConfig, batch: &[Example]) -> Result<f64> {
    let layout = Layout::new(cfg);
    batch_loss(cfg, &layout, &layout.flatten(params)?, batch)
}

/// Loss plus gradient as a map with the same structure as `params`.
pub fn loss_and_grad(params: &TensorMap, cfg: &ToyConfig, batch: &[Example]) -> Result<(f64, TensorMap)> {
    let layout = Layout::new(cfg);
    let (l, g) = batch_loss_and_grad(cfg, &layout, &layout.flatten(params)?, batch)?;
    Ok((l, layout.unflatten(&g)))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LogEntry {
    /// 1-based epoch.
    pub epoch: usize,
    /// 1-based optimizer step, counted across epochs.
    pub step: u64,
    /// Batch loss before the update.
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after each epoch, in order.
    pub checkpoints: Vec<TensorMap>,
    pub log: Vec<LogEntry>,
}

/// Trains for `epochs` passes over `data`, returning the parameters after
/// every epoch. Each epoch visits the examples in an order drawn from the
/// stream `(seed, epoch)`; the final batch may be short.
pub fn train_epochs(
    state: &mut TrainState,
    cfg: &ToyConfig,
    data: &[Example],
    opt: &OptimizerConfig,
    epochs: usize,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    opt.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("training dataset is empty".into()));
    }
    let layout = Layout::new(cfg);
    let mut flat = layout.flatten(&state.params)?;
    let mut checkpoints = Vec::with_capacity(epochs);
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut batch = Vec::with_capacity(opt.batch_size);

    for epoch in 1..=epochs {
        let mut rng = rng::stream(seed, epoch as u64);
        order.shuffle(&mut rng);
        for chunk in order.chunks(opt.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| data[i].clone()));
            let (loss, grad) = batch_loss_and_grad(cfg, &layout, &flat, &batch)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "training diverged at epoch {epoch}, step {}: loss {loss}",
                    state.step_count + 1
                )));
            }
            adamw_step(state, &layout.unflatten(&grad), opt)?;
            flat = layout.flatten(&state.params)?;
            log.push(LogEntry {
                epoch,
                step: state.step_count,
                loss,
            });
        }
        checkpoints.push(state.params.clone());
    }
    Ok(TrainOutcome { checkpoints, log })
}

/// Absolute floor for the relative-error denominator.
pub const GRAD_CHECK_ABS_TOL: f64 = 1e-4;
pub const GRAD_CHECK_STEP: f32 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Tensor name and in-tensor index of the worst coordinate.
    pub worst: (String, usize),
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compares the analytic `f32` gradient with central differences on
/// `n_coords` randomly chosen coordinates (without replacement).
///
/// Each coordinate is perturbed by `+-1e-3` in `f32`; the two perturbed
/// losses are evaluated with the `f64` forward pass and divided by the step
/// actually taken after rounding. The per-coordinate error is
/// `|a - n| / max(|a|, |n|, 1e-4)`, so coordinates whose gradient is zero
/// are judged against an absolute tolerance.
pub fn grad_check(
    params: &TensorMap,
    cfg: &ToyConfig,
    batch: &[Example],
    n_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let layout = Layout::new(cfg);
    let flat = layout.flatten(params)?;
    let (_, analytic) = batch_loss_and_grad(cfg, &layout, &flat, batch)?;

    let mut coords: Vec<usize> = (0..layout.total()).collect();
    let mut rng = rng::stream(seed, u64::MAX);
    let n = n_coords.min(coords.len());
    for i in 0..n {
        let j = rng.random_range(i..coords.len());
        coords.swap(i, j);
    }
    coords.truncate(n);

    let results = coords
        .par_iter()
        .map(|&c| {
            let mut p64: Vec<f64> = flat.iter().map(|&x| x as f64).collect();
            let plus = flat[c] + GRAD_CHECK_STEP;
            let minus = flat[c] - GRAD_CHECK_STEP;
            p64[c] = plus as f64;
            let lp = batch_loss(cfg, &layout, &p64, batch)?;
            p64[c] = minus as f64;
            let lm = batch_loss(cfg, &layout, &p64, batch)?;
            let numeric = (lp - lm) / (plus as f64 - minus as f64);
            let a = analytic[c] as f64;
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_ABS_TOL);
            Ok((c, err, a, numeric))
        })
        .collect::<Result<Vec<_>>>()?;

    let (c, err, a, num) = results
        .into_iter()
        .fold((0, -1.0, 0.0, 0.0), |best, r| if r.1 > best.1 { r } else { best });
    let spec = layout
        .specs
        .iter()
        .find(|s| s.range().contains(&c))
        .expect("coordinate inside layout");
    Ok(GradCheckReport {
        max_rel_error: err.max(0.0),
        coords_checked: n,
        worst: (spec.name.clone(), c - spec.offset),
        worst_analytic: a,
        worst_numeric: num,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_lm::{init, Activation};

    fn cfg() -> ToyConfig {
        ToyConfig {
            vocab_size: 10,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_context: 12,
            seed: 5,
            activation: Activation::Gelu,
        }
    }

    fn batch() -> Vec<Example> {
        vec![
            Example::new(vec![3, 4, 5, 2, 3], vec![4, 1]),
            Example::new(vec![6, 7, 2, 6], vec![7, 1]),
            Example::new(vec![8], vec![9]),
        ]
    }

    #[test]
    fn uniform_logits_give_log_v() {
        let c = ToyConfig {
            vocab_size: 64,
            ..cfg()
        };
        let layout = Layout::new(&c);
        let zeros = vec![0.0f32; layout.total()];
        let b = vec![Example::new(vec![1, 2, 3], vec![4, 5, 6])];
        let l = batch_loss(&c, &layout, &zeros, &b).unwrap();
        assert!((l - 64f64.ln()).abs() < 1e-6, "{l}");
        assert!((64f64.ln() - 4.1589).abs() < 1e-4);
    }

    #[test]
    fn near_perfect_logits_give_near_zero_loss() {
        // Head bias strongly favoring the single target token.
        let c = cfg();
        let layout = Layout::new(&c);
        let mut p = vec![0.0f32; layout.total()];
        p[layout.head_b + 7] = 40.0;
        let b = vec![Example::new(vec![1, 2], vec![7, 7])];
        assert!(batch_loss(&c, &layout, &p, &b).unwrap() < 1e-12);
    }

    #[test]
    fn loss_matches_scalar_oracle() {
        let c = cfg();
        let params = init(&c).unwrap();
        let model = crate::toy_lm::ToyModel::new(&params, &c).unwrap();
        let b = batch();
        let mut total = 0.0;
        let mut count = 0;
        for ex in &b {
            let mut seq = ex.prompt.clone();
            for &target in &ex.answer {
                let rows = model.forward(&seq).unwrap();
                let row = rows.last().unwrap();
                let z: f64 = row.iter().map(|&x| (x as f64).exp()).sum();
                total += -((row[target as usize] as f64).exp() / z).ln();
                count += 1;
                seq.push(target);
            }
        }
        let got = loss(&params, &c, &b).unwrap();
        assert!((got - total / count as f64).abs() < 1e-6, "{got} vs {}", total / count as f64);
    }

    #[test]
    fn loss_rejects_empty_batch_and_overflow() {
        let c = cfg();
        let params = init(&c).unwrap();
        assert!(loss(&params, &c, &[]).is_err());
        let long = Example::new(vec![1; 12], vec![2, 3]);
        assert!(loss(&params, &c, &[long]).is_err());
    }

    #[test]
    fn loss_bound_at_init() {
        let c = ToyConfig::default();
        let l = loss(&init(&c).unwrap(), &c, &batch()).unwrap();
        assert!(l <= 64f64.ln() + 0.1, "{l}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let c = cfg();
        let r = grad_check(&init(&c).unwrap(), &c, &batch(), 300, 1).unwrap();
        assert_eq!(r.coords_checked, 300);
        assert!(r.max_rel_error < 1e-2, "{r:?}");
    }

    #[test]
    fn linear_only_model_gradients() {
        let c = ToyConfig {
            activation: Activation::Identity,
            ..cfg()
        };
        // At the 0.02 init scale the layer norms see tiny inputs and their
        // curvature puts O(h^2) truncation error near 1e-3; unit-ish
        // embeddings leave only rounding.
        let mut p = init(&c).unwrap();
        for name in ["tok_emb.weight", "pos_emb.weight"] {
            p.get_mut(name).unwrap().data_mut().iter_mut().for_each(|x| *x *= 10.0);
        }
        for seed in 0..3 {
            let r = grad_check(&p, &c, &batch(), 300, seed).unwrap();
            assert!(r.max_rel_error < 1e-3, "{r:?}");
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let c = cfg();
        let start = init(&c).unwrap();
        let mut st = TrainState::new(start.clone());
        let opt = OptimizerConfig {
            learning_rate: 0.0,
            batch_size: 2,
            ..Default::default()
        };
        let out = train_epochs(&mut st, &c, &batch(), &opt, 2, 0).unwrap();
        assert_eq!(out.checkpoints.len(), 2);
        assert!(out.checkpoints.iter().all(|ck| ck.bit_eq(&start)));
        assert_eq!(out.log.len(), 4);
        assert_eq!(st.step_count, 4);
    }

    #[test]
    fn training_is_deterministic_and_moves() {
        let c = cfg();
        let opt = OptimizerConfig {
            batch_size: 2,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let run = || {
            let mut st = TrainState::new(init(&c).unwrap());
            train_epochs(&mut st, &c, &batch(), &opt, 2, 9).unwrap()
        };
        let (a, b) = (run(), run());
        for (x, y) in a.checkpoints.iter().zip(&b.checkpoints) {
            assert!(x.bit_eq(y));
        }
        let d = crate::extrapolate::param_distance(&a.checkpoints[0], &a.checkpoints[1]).unwrap();
        assert!(d > 0.0);
    }

    #[test]
    fn rejects_empty_dataset() {
        let c = cfg();
        let mut st = TrainState::new(init(&c).unwrap());
        assert!(train_epochs(&mut st, &c, &[], &OptimizerConfig::default(), 1, 0).is_err());
    }
}
