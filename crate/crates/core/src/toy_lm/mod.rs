//! A small pre-norm decoder-only transformer with hand-written backprop.
//!
//! Architecture: token + learned positional embeddings, `n_layers` blocks of
//! causal multi-head attention and a GELU feed-forward layer (each behind a
//! layer norm and added to the residual stream), a final layer norm and an
//! untied output head. Linear weights are stored `[in, out]` row-major and
//! applied as `y = x W + b`.
//!
//! Tensor naming scheme (`l` is the block index):
//!
//! ```text
//! tok_emb.weight              [V, d]
//! pos_emb.weight              [max_context, d]
//! blocks.l.ln1.gain           [d]
//! blocks.l.ln1.bias           [d]
//! blocks.l.attn.qkv.weight    [d, 3d]
//! blocks.l.attn.qkv.bias      [3d]
//! blocks.l.attn.proj.weight   [d, d]
//! blocks.l.attn.proj.bias     [d]
//! blocks.l.ln2.gain           [d]
//! blocks.l.ln2.bias           [d]
//! blocks.l.mlp.fc.weight      [d, d_ff]
//! blocks.l.mlp.fc.bias        [d_ff]
//! blocks.l.mlp.proj.weight    [d_ff, d]
//! blocks.l.mlp.proj.bias      [d]
//! ln_f.gain                   [d]
//! ln_f.bias                   [d]
//! head.weight                 [d, V]
//! head.bias                   [V]
//! ```
//!
//! Init: weights (embeddings included) ~ N(0, 0.02^2), biases and layer-norm
//! offsets zero, layer-norm gains one. Values are drawn in the order above
//! from a single seeded stream.

mod model;
mod optim;
mod train;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{check_compat, Tensor, TensorMap};
use crate::decode::{LogitProvider, LogitVector, TokenId};
use crate::error::{Error, Result};
use crate::rng;

pub use model::{backward, forward, forward_cached, Real};
pub use optim::{adamw_step, OptimizerConfig, TrainState};
pub use train::{
    batch_loss, batch_loss_and_grad, grad_check, loss, loss_and_grad, train_epochs,
    GradCheckReport, LogEntry, TrainOutcome, GRAD_CHECK_ABS_TOL, GRAD_CHECK_STEP,
};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    /// No feed-forward nonlinearity; used for gradient-check baselines.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_context: usize,
    pub seed: u64,
    pub activation: Activation,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 128,
            max_context: 64,
            seed: 0,
            activation: Activation::Gelu,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
        }
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig("vocab_size must be >= 2".into()));
        }
        if self.max_context < 2 {
            return Err(Error::InvalidConfig("max_context must be >= 2".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InitKind {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    init: InitKind,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.numel()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub fc_w: usize,
    pub fc_b: usize,
    pub mlp_w: usize,
    pub mlp_b: usize,
}

/// Where each named tensor lives inside one flat parameter vector.
#[derive(Debug, Clone)]
pub struct Layout {
    pub(crate) specs: Vec<ParamSpec>,
    pub(crate) tok_emb: usize,
    pub(crate) pos_emb: usize,
    pub(crate) blocks: Vec<BlockOffsets>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
    pub(crate) head_w: usize,
    pub(crate) head_b: usize,
    total: usize,
}

impl Layout {
    pub fn new(cfg: &ToyConfig) -> Self {
        let (v, d, f, c) = (cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.max_context);
        let mut specs = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>, init: InitKind| -> usize {
            let at = offset;
            offset += shape.iter().product::<usize>();
            specs.push(ParamSpec {
                name,
                shape,
                offset: at,
                init,
            });
            at
        };
        use InitKind::*;
        let tok_emb = push("tok_emb.weight".into(), vec![v, d], Normal);
        let pos_emb = push("pos_emb.weight".into(), vec![c, d], Normal);
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                let p = |s: &str| format!("blocks.{l}.{s}");
                BlockOffsets {
                    ln1_g: push(p("ln1.gain"), vec![d], Ones),
                    ln1_b: push(p("ln1.bias"), vec![d], Zeros),
                    qkv_w: push(p("attn.qkv.weight"), vec![d, 3 * d], Normal),
                    qkv_b: push(p("attn.qkv.bias"), vec![3 * d], Zeros),
                    proj_w: push(p("attn.proj.weight"), vec![d, d], Normal),
                    proj_b: push(p("attn.proj.bias"), vec![d], Zeros),
                    ln2_g: push(p("ln2.gain"), vec![d], Ones),
                    ln2_b: push(p("ln2.bias"), vec![d], Zeros),
                    fc_w: push(p("mlp.fc.weight"), vec![d, f], Normal),
                    fc_b: push(p("mlp.fc.bias"), vec![f], Zeros),
                    mlp_w: push(p("mlp.proj.weight"), vec![f, d], Normal),
                    mlp_b: push(p("mlp.proj.bias"), vec![d], Zeros),
                }
            })
            .collect();
        let lnf_g = push("ln_f.gain".into(), vec![d], Ones);
        let lnf_b = push("ln_f.bias".into(), vec![d], Zeros);
        let head_w = push("head.weight".into(), vec![d, v], Normal);
        let head_b = push("head.bias".into(), vec![v], Zeros);
        Self {
            specs,
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
            total: offset,
        }
    }

    /// Number of scalar parameters.
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.specs.iter().map(|s| s.name.as_str())
    }

    /// Copies the named tensors into one flat vector in layout order.
    pub fn flatten(&self, map: &TensorMap) -> Result<Vec<f32>> {
        check_compat(&self.unflatten(&vec![0.0; self.total]), map).into_result()?;
        let mut flat = vec![0.0; self.total];
        for spec in &self.specs {
            let t = map.get(&spec.name).expect("checked by compat");
            flat[spec.range()].copy_from_slice(t.data());
        }
        Ok(flat)
    }

    pub fn unflatten(&self, flat: &[f32]) -> TensorMap {
        assert_eq!(flat.len(), self.total, "flat parameter length");
        self.specs
            .iter()
            .map(|s| {
                let t = Tensor::new(s.shape.clone(), flat[s.range()].to_vec())
                    .expect("layout shapes are non-empty");
                (s.name.clone(), t)
            })
            .collect()
    }
}

/// Deterministic initial parameters for `cfg`.
pub fn init(cfg: &ToyConfig) -> Result<TensorMap> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let mut flat = vec![0.0f32; layout.total()];
    let mut rng = rng::stream(cfg.seed, 0);
    let mut buf = Vec::new();
    for spec in &layout.specs {
        let dst = &mut flat[spec.range()];
        match spec.init {
            InitKind::Zeros => dst.fill(0.0),
            InitKind::Ones => dst.fill(1.0),
            InitKind::Normal => {
                buf.resize(dst.len(), 0.0);
                rng::fill_normal(&mut rng, INIT_STD, &mut buf);
                for (d, &s) in dst.iter_mut().zip(&buf) {
                    *d = s as f32;
                }
            }
        }
    }
    Ok(layout.unflatten(&flat))
}

/// A checkpoint bound to its architecture, usable as a logit provider.
#[derive(Debug, Clone)]
pub struct ToyModel {
    config: ToyConfig,
    layout: Layout,
    params: Vec<f32>,
}

impl ToyModel {
    pub fn new(params: &TensorMap, config: &ToyConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let params = layout.flatten(params)?;
        Ok(Self {
            config: config.clone(),
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    /// Logits for every position, `tokens.len()` rows of `V` entries.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<Vec<Vec<f32>>> {
        let v = self.config.vocab_size;
        let flat = forward(&self.config, &self.layout, &self.params, tokens, false)?;
        Ok(flat.chunks_exact(v).map(<[f32]>::to_vec).collect())
    }
}

/// Binds `params` to `config` as a [`LogitProvider`].
pub fn as_provider(params: &TensorMap, config: &ToyConfig) -> Result<ToyModel> {
    ToyModel::new(params, config)
}

impl LogitProvider for ToyModel {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn next_logits(&self, prefix: &[TokenId]) -> Result<LogitVector> {
        let last = forward(&self.config, &self.layout, &self.params, prefix, true)?;
        LogitVector::new(last)
    }
}
