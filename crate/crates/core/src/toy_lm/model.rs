//! Forward and backward passes over a flat parameter vector.
//!
//! Generic over the element type so the same code path evaluates the model
//! in `f32` (training, inference) and `f64` (finite-difference reference).

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use super::{Activation, Layout, ToyConfig};
use crate::decode::TokenId;
use crate::error::{Error, Result};

pub trait Real: Float + FromPrimitive + Sum + Send + Sync + Debug + 'static {}
impl Real for f32 {}
impl Real for f64 {}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn k<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("representable constant")
}

pub(crate) fn check_tokens(cfg: &ToyConfig, tokens: &[TokenId]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::InvalidInput("token sequence must be non-empty".into()));
    }
    if tokens.len() > cfg.max_context {
        return Err(Error::InvalidInput(format!(
            "context overflow: {} tokens exceed max_context {}",
            tokens.len(),
            cfg.max_context
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::InvalidInput(format!(
            "token {t} out of range for vocab_size {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// `y[r] = x[r] W + b` for `rows` rows.
fn linear<T: Real>(x: &[T], rows: usize, din: usize, w: &[T], b: &[T], dout: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(rows * dout);
    for r in 0..rows {
        y.extend_from_slice(b);
        let yr = &mut y[r * dout..];
        for i in 0..din {
            let xv = x[r * din + i];
            let wr = &w[i * dout..(i + 1) * dout];
            for (o, &wv) in yr.iter_mut().zip(wr) {
                *o = *o + xv * wv;
            }
        }
    }
    y
}

/// Accumulates weight and bias gradients and returns the input gradient.
#[allow(clippy::too_many_arguments)]
fn linear_backward<T: Real>(
    x: &[T],
    rows: usize,
    din: usize,
    w: &[T],
    dout: usize,
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let mut dx = vec![T::zero(); rows * din];
    for r in 0..rows {
        let dyr = &dy[r * dout..(r + 1) * dout];
        for (b, &g) in db.iter_mut().zip(dyr) {
            *b = *b + g;
        }
        for i in 0..din {
            let xv = x[r * din + i];
            let wr = &w[i * dout..(i + 1) * dout];
            let dwr = &mut dw[i * dout..(i + 1) * dout];
            let mut acc = T::zero();
            for o in 0..dout {
                acc = acc + dyr[o] * wr[o];
                dwr[o] = dwr[o] + xv * dyr[o];
            }
            dx[r * din + i] = acc;
        }
    }
    dx
}

#[derive(Debug, Clone)]
pub struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

fn layer_norm<T: Real>(x: &[T], rows: usize, d: usize, g: &[T], b: &[T]) -> (Vec<T>, LnCache<T>) {
    let mut y = Vec::with_capacity(rows * d);
    let mut xhat = Vec::with_capacity(rows * d);
    let mut rstd = Vec::with_capacity(rows);
    let n: T = k(d as f64);
    for row in x.chunks_exact(d) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + k(LN_EPS)).sqrt();
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat.push(xh);
            y.push(g[j] * xh + b[j]);
        }
        rstd.push(rs);
    }
    debug_assert_eq!(rstd.len(), rows);
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward<T: Real>(
    dy: &[T],
    cache: &LnCache<T>,
    d: usize,
    g: &[T],
    dg: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let mut dx = Vec::with_capacity(dy.len());
    let n: T = k(d as f64);
    let mut dxhat = vec![T::zero(); d];
    for (r, (dyr, xh)) in dy.chunks_exact(d).zip(cache.xhat.chunks_exact(d)).enumerate() {
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for j in 0..d {
            dg[j] = dg[j] + dyr[j] * xh[j];
            db[j] = db[j] + dyr[j];
            dxhat[j] = dyr[j] * g[j];
            m1 = m1 + dxhat[j];
            m2 = m2 + dxhat[j] * xh[j];
        }
        m1 = m1 / n;
        m2 = m2 / n;
        let rs = cache.rstd[r];
        for j in 0..d {
            dx.push(rs * (dxhat[j] - m1 - xh[j] * m2));
        }
    }
    dx
}

fn gelu<T: Real>(x: T) -> T {
    let u = k::<T>(GELU_C) * (x + k::<T>(GELU_A) * x * x * x);
    k::<T>(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let u = k::<T>(GELU_C) * (x + k::<T>(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = k::<T>(GELU_C) * (T::one() + k::<T>(3.0 * GELU_A) * x * x);
    k::<T>(0.5) * (T::one() + t) + k::<T>(0.5) * x * (T::one() - t * t) * du
}

fn activate<T: Real>(act: Activation, x: T) -> T {
    match act {
        Activation::Gelu => gelu(x),
        Activation::Identity => x,
    }
}

fn activate_grad<T: Real>(act: Activation, x: T) -> T {
    match act {
        Activation::Gelu => gelu_grad(x),
        Activation::Identity => T::one(),
    }
}

/// Causal multi-head attention. `qkv` rows are `[q | k | v]`, each `d`
/// wide and split into `n_heads` contiguous head slices. Returns the
/// concatenated head outputs and the attention probabilities laid out as
/// `[head][query][key]` (entries above the diagonal stay zero).
fn attention<T: Real>(qkv: &[T], t: usize, d: usize, heads: usize) -> (Vec<T>, Vec<T>) {
    let hd = d / heads;
    let scale = T::one() / k::<T>(hd as f64).sqrt();
    let mut out = vec![T::zero(); t * d];
    let mut probs = vec![T::zero(); heads * t * t];
    let row = |i: usize| &qkv[i * 3 * d..(i + 1) * 3 * d];
    for h in 0..heads {
        let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
        for i in 0..t {
            let q = &row(i)[qo..qo + hd];
            let p = &mut probs[(h * t + i) * t..(h * t + i) * t + t];
            let mut max = T::neg_infinity();
            for (j, pj) in p.iter_mut().enumerate().take(i + 1) {
                let kj = &row(j)[ko..ko + hd];
                let s = q.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                *pj = s;
                max = max.max(s);
            }
            let mut z = T::zero();
            for pj in p.iter_mut().take(i + 1) {
                *pj = (*pj - max).exp();
                z = z + *pj;
            }
            let o = &mut out[i * d + h * hd..i * d + (h + 1) * hd];
            for (j, pj) in p.iter_mut().enumerate().take(i + 1) {
                *pj = *pj / z;
                let vj = &row(j)[vo..vo + hd];
                for (oe, &ve) in o.iter_mut().zip(vj) {
                    *oe = *oe + *pj * ve;
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward<T: Real>(
    qkv: &[T],
    probs: &[T],
    dout: &[T],
    t: usize,
    d: usize,
    heads: usize,
) -> Vec<T> {
    let hd = d / heads;
    let scale = T::one() / k::<T>(hd as f64).sqrt();
    let mut dqkv = vec![T::zero(); t * 3 * d];
    let mut dp = vec![T::zero(); t];
    for h in 0..heads {
        let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
        for i in 0..t {
            let p = &probs[(h * t + i) * t..(h * t + i) * t + t];
            let doi = &dout[i * d + h * hd..i * d + (h + 1) * hd];
            let mut dot = T::zero();
            for j in 0..=i {
                let vj = &qkv[j * 3 * d + vo..j * 3 * d + vo + hd];
                dp[j] = doi.iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>();
                dot = dot + p[j] * dp[j];
                let dvj = &mut dqkv[j * 3 * d + vo..j * 3 * d + vo + hd];
                for (dv, &g) in dvj.iter_mut().zip(doi) {
                    *dv = *dv + p[j] * g;
                }
            }
            for j in 0..=i {
                let ds = p[j] * (dp[j] - dot) * scale;
                if ds == T::zero() {
                    continue;
                }
                for e in 0..hd {
                    let qe = qkv[i * 3 * d + qo + e];
                    let ke = qkv[j * 3 * d + ko + e];
                    dqkv[i * 3 * d + qo + e] = dqkv[i * 3 * d + qo + e] + ds * ke;
                    dqkv[j * 3 * d + ko + e] = dqkv[j * 3 * d + ko + e] + ds * qe;
                }
            }
        }
    }
    dqkv
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    ln1: LnCache<T>,
    h1: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    att: Vec<T>,
    ln2: LnCache<T>,
    h2: Vec<T>,
    fc_pre: Vec<T>,
    fc_act: Vec<T>,
}

/// Activations saved by [`forward_cached`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    tokens: Vec<TokenId>,
    blocks: Vec<BlockCache<T>>,
    lnf: LnCache<T>,
    hf: Vec<T>,
    /// `tokens.len() * V` logits, row-major by position.
    pub logits: Vec<T>,
}

/// Runs the blocks and returns the residual stream plus per-block caches.
fn trunk<T: Real>(
    cfg: &ToyConfig,
    layout: &Layout,
    params: &[T],
    tokens: &[TokenId],
    keep: bool,
) -> (Vec<T>, Vec<BlockCache<T>>) {
    let (t, d, f) = (tokens.len(), cfg.d_model, cfg.d_ff);
    let p = |off: usize, n: usize| &params[off..off + n];
    let mut x = Vec::with_capacity(t * d);
    for (pos, &tok) in tokens.iter().enumerate() {
        let te = p(layout.tok_emb + tok as usize * d, d);
        let pe = p(layout.pos_emb + pos * d, d);
        x.extend(te.iter().zip(pe).map(|(&a, &b)| a + b));
    }
    let mut caches = Vec::new();
    for b in &layout.blocks {
        let (h1, ln1) = layer_norm(&x, t, d, p(b.ln1_g, d), p(b.ln1_b, d));
        let qkv = linear(&h1, t, d, p(b.qkv_w, 3 * d * d), p(b.qkv_b, 3 * d), 3 * d);
        let (att, probs) = attention(&qkv, t, d, cfg.n_heads);
        let proj = linear(&att, t, d, p(b.proj_w, d * d), p(b.proj_b, d), d);
        for (xe, pe) in x.iter_mut().zip(&proj) {
            *xe = *xe + *pe;
        }
        let (h2, ln2) = layer_norm(&x, t, d, p(b.ln2_g, d), p(b.ln2_b, d));
        let fc_pre = linear(&h2, t, d, p(b.fc_w, d * f), p(b.fc_b, f), f);
        let fc_act: Vec<T> = fc_pre.iter().map(|&v| activate(cfg.activation, v)).collect();
        let mlp = linear(&fc_act, t, f, p(b.mlp_w, f * d), p(b.mlp_b, d), d);
        for (xe, me) in x.iter_mut().zip(&mlp) {
            *xe = *xe + *me;
        }
        if keep {
            caches.push(BlockCache {
                ln1,
                h1,
                qkv,
                probs,
                att,
                ln2,
                h2,
                fc_pre,
                fc_act,
            });
        }
    }
    (x, caches)
}

/// Logits for `tokens`. With `last_only` only the final position's `V`
/// logits are returned, otherwise `tokens.len() * V` row-major.
pub fn forward<T: Real>(
    cfg: &ToyConfig,
    layout: &Layout,
    params: &[T],
    tokens: &[TokenId],
    last_only: bool,
) -> Result<Vec<T>> {
    check_tokens(cfg, tokens)?;
    let (t, d, v) = (tokens.len(), cfg.d_model, cfg.vocab_size);
    let p = |off: usize, n: usize| &params[off..off + n];
    let (x, _) = trunk(cfg, layout, params, tokens, false);
    let (x, rows) = if last_only { (&x[(t - 1) * d..], 1) } else { (&x[..], t) };
    let (hf, _) = layer_norm(x, rows, d, p(layout.lnf_g, d), p(layout.lnf_b, d));
    Ok(linear(&hf, rows, d, p(layout.head_w, d * v), p(layout.head_b, v), v))
}

/// Full forward pass keeping every activation needed by [`backward`].
pub fn forward_cached<T: Real>(
    cfg: &ToyConfig,
    layout: &Layout,
    params: &[T],
    tokens: &[TokenId],
) -> Result<ForwardCache<T>> {
    check_tokens(cfg, tokens)?;
    let (t, d, v) = (tokens.len(), cfg.d_model, cfg.vocab_size);
    let p = |off: usize, n: usize| &params[off..off + n];
    let (x, blocks) = trunk(cfg, layout, params, tokens, true);
    let (hf, lnf) = layer_norm(&x, t, d, p(layout.lnf_g, d), p(layout.lnf_b, d));
    let logits = linear(&hf, t, d, p(layout.head_w, d * v), p(layout.head_b, v), v);
    Ok(ForwardCache {
        tokens: tokens.to_vec(),
        blocks,
        lnf,
        hf,
        logits,
    })
}

/// Gradient of a scalar objective with respect to every parameter, given
/// the objective's gradient `dlogits` with respect to the cached logits.
pub fn backward<T: Real>(
    cfg: &ToyConfig,
    layout: &Layout,
    params: &[T],
    cache: &ForwardCache<T>,
    dlogits: &[T],
) -> Vec<T> {
    let (t, d, f, v) = (cache.tokens.len(), cfg.d_model, cfg.d_ff, cfg.vocab_size);
    assert_eq!(dlogits.len(), t * v, "dlogits shape");
    let p = |off: usize, n: usize| &params[off..off + n];
    let mut grad = vec![T::zero(); layout.total()];

    let mut dx = {
        let (dw, db) = split_pair(&mut grad, layout.head_w, d * v, layout.head_b, v);
        let dhf = linear_backward(&cache.hf, t, d, p(layout.head_w, d * v), v, dlogits, dw, db);
        let (dg, db) = split_pair(&mut grad, layout.lnf_g, d, layout.lnf_b, d);
        layer_norm_backward(&dhf, &cache.lnf, d, p(layout.lnf_g, d), dg, db)
    };

    for (b, c) in layout.blocks.iter().zip(&cache.blocks).rev() {
        // Feed-forward branch.
        let (dw, db) = split_pair(&mut grad, b.mlp_w, f * d, b.mlp_b, d);
        let mut dact = linear_backward(&c.fc_act, t, f, p(b.mlp_w, f * d), d, &dx, dw, db);
        for (g, &pre) in dact.iter_mut().zip(&c.fc_pre) {
            *g = *g * activate_grad(cfg.activation, pre);
        }
        let (dw, db) = split_pair(&mut grad, b.fc_w, d * f, b.fc_b, f);
        let dh2 = linear_backward(&c.h2, t, d, p(b.fc_w, d * f), f, &dact, dw, db);
        let (dg, db) = split_pair(&mut grad, b.ln2_g, d, b.ln2_b, d);
        let dres = layer_norm_backward(&dh2, &c.ln2, d, p(b.ln2_g, d), dg, db);
        for (a, r) in dx.iter_mut().zip(&dres) {
            *a = *a + *r;
        }

        // Attention branch.
        let (dw, db) = split_pair(&mut grad, b.proj_w, d * d, b.proj_b, d);
        let datt = linear_backward(&c.att, t, d, p(b.proj_w, d * d), d, &dx, dw, db);
        let dqkv = attention_backward(&c.qkv, &c.probs, &datt, t, d, cfg.n_heads);
        let (dw, db) = split_pair(&mut grad, b.qkv_w, 3 * d * d, b.qkv_b, 3 * d);
        let dh1 = linear_backward(&c.h1, t, d, p(b.qkv_w, 3 * d * d), 3 * d, &dqkv, dw, db);
        let (dg, db) = split_pair(&mut grad, b.ln1_g, d, b.ln1_b, d);
        let dres = layer_norm_backward(&dh1, &c.ln1, d, p(b.ln1_g, d), dg, db);
        for (a, r) in dx.iter_mut().zip(&dres) {
            *a = *a + *r;
        }
    }

    for (pos, &tok) in cache.tokens.iter().enumerate() {
        let row = &dx[pos * d..(pos + 1) * d];
        let te = layout.tok_emb + tok as usize * d;
        let pe = layout.pos_emb + pos * d;
        for j in 0..d {
            grad[te + j] = grad[te + j] + row[j];
            grad[pe + j] = grad[pe + j] + row[j];
        }
    }
    grad
}

/// Two disjoint mutable windows into the gradient buffer.
fn split_pair<T>(buf: &mut [T], a: usize, na: usize, b: usize, nb: usize) -> (&mut [T], &mut [T]) {
    debug_assert!(a + na <= b || b + nb <= a, "windows overlap");
    if a < b {
        let (lo, hi) = buf.split_at_mut(b);
        (&mut lo[a..a + na], &mut hi[..nb])
    } else {
        let (lo, hi) = buf.split_at_mut(a);
        (&mut hi[..na], &mut lo[b..b + nb])
    }
}
