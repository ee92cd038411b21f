//! Linear arithmetic on checkpoints: extrapolation past a strong model,
//! interpolation (merging) between two models, and locality diagnostics.
//!
//! Extrapolation treats the strong model as a linear merge of the weak model
//! and an unknown better model, and solves for the latter:
//!
//! ```text
//! out = strong + mu * (strong - weak)
//! ```
//!
//! Every operation requires the two maps to have identical names and shapes.

use crate::checkpoint::{check_compat, TensorMap};
use crate::error::{Error, Result};

/// Extrapolation strength `mu`. Zero is admitted and yields the strong model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtrapolationConfig {
    mu: f32,
}

impl ExtrapolationConfig {
    pub fn new(mu: f32) -> Result<Self> {
        if !mu.is_finite() || mu < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "mu must be finite and non-negative, got {mu}"
            )));
        }
        Ok(Self { mu })
    }

    pub fn mu(&self) -> f32 {
        self.mu
    }
}

fn ensure_finite(map: &TensorMap, what: &str) -> Result<()> {
    for (name, t) in map.iter() {
        if !t.is_finite() {
            return Err(Error::Numeric(format!(
                "{what} overflowed to a non-finite value in `{name}`"
            )));
        }
    }
    Ok(())
}

/// Per element, `strong + mu * (strong - weak)` in `f32` arithmetic.
pub fn extrapolate(
    strong: &TensorMap,
    weak: &TensorMap,
    cfg: ExtrapolationConfig,
) -> Result<TensorMap> {
    check_compat(strong, weak).into_result()?;
    let mu = cfg.mu;
    let out = strong.zip_map(weak, |s, w, out| {
        out.extend(s.iter().zip(w).map(|(&s, &w)| s + mu * (s - w)));
    });
    ensure_finite(&out, "extrapolation")?;
    Ok(out)
}

/// Per element, `t * a + (1 - t) * b`. `t = 1` returns `a` and `t = 0`
/// returns `b` exactly; `t > 1` extrapolates past `a`.
pub fn interpolate(a: &TensorMap, b: &TensorMap, t: f32) -> Result<TensorMap> {
    if !t.is_finite() {
        return Err(Error::InvalidInput(format!("interpolation weight must be finite, got {t}")));
    }
    check_compat(a, b).into_result()?;
    let u = 1.0 - t;
    let out = a.zip_map(b, |a, b, out| {
        out.extend(a.iter().zip(b).map(|(&a, &b)| t * a + u * b));
    });
    ensure_finite(&out, "interpolation")?;
    Ok(out)
}

/// Euclidean norm of the elementwise difference, accumulated in `f64`.
pub fn param_distance(a: &TensorMap, b: &TensorMap) -> Result<f64> {
    check_compat(a, b).into_result()?;
    let sq: f64 = a
        .iter()
        .zip(b.iter())
        .map(|((_, ta), (_, tb))| {
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| {
                    let d = x as f64 - y as f64;
                    d * d
                })
                .sum::<f64>()
        })
        .sum();
    Ok(sq.sqrt())
}

/// Inner product `(ep - ft) . grad` over all flattened parameters.
///
/// A negative value means the step from `ft` to `ep` points downhill on the
/// loss whose gradient at `ft` is `grad`, so the first-order change in loss
/// is negative. Multiply by `mu` for the variant of the estimate that scales
/// the displacement once more.
pub fn locality_gain(ep: &TensorMap, ft: &TensorMap, grad: &TensorMap) -> Result<f64> {
    check_compat(ep, ft).into_result()?;
    check_compat(ep, grad).into_result()?;
    let total = ep
        .iter()
        .zip(ft.iter())
        .zip(grad.iter())
        .map(|(((_, te), (_, tf)), (_, tg))| {
            te.data()
                .iter()
                .zip(tf.data())
                .zip(tg.data())
                .map(|((&e, &f), &g)| (e as f64 - f as f64) * g as f64)
                .sum::<f64>()
        })
        .sum();
    Ok(total)
}
