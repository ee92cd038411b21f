//! Contrastive decoding.
//!
//! At each step the strong and weak providers score the prefix and the next
//! token is chosen from
//!
//! ```text
//! score[v] = strong[v] + lambda * (strong[v] - weak[v])
//! ```
//!
//! restricted to tokens the strong model finds plausible:
//! `softmax(strong)[v] >= alpha * max_u softmax(strong)[u]`. Without the
//! mask a token the strong model rates as implausible can win purely
//! because the weak model rates it even lower.

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Unnormalized next-token scores over a vocabulary of at least two tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f32>);

impl LogitVector {
    pub fn new(scores: Vec<f32>) -> Result<Self> {
        if scores.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "logit vector needs at least 2 entries, got {}",
                scores.len()
            )));
        }
        if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("logit {i} is not finite")));
        }
        Ok(Self(scores))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    /// Index of the largest score; ties go to the lowest id.
    pub fn argmax(&self) -> TokenId {
        argmax_where(&self.0, |_| true).expect("logit vector is non-empty") as TokenId
    }
}

/// Anything that scores the next token given a prefix: a model checkpoint,
/// a scripted table, a test double.
pub trait LogitProvider {
    fn vocab_size(&self) -> usize;
    fn next_logits(&self, prefix: &[TokenId]) -> Result<LogitVector>;
}

impl<P: LogitProvider + ?Sized> LogitProvider for &P {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn next_logits(&self, prefix: &[TokenId]) -> Result<LogitVector> {
        (**self).next_logits(prefix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodePolicy {
    pub lambda: f32,
    pub alpha: f32,
    pub max_new_tokens: usize,
    pub eos_token: Option<TokenId>,
}

impl DecodePolicy {
    pub fn new(lambda: f32, alpha: f32, max_new_tokens: usize, eos_token: Option<TokenId>) -> Result<Self> {
        let policy = Self {
            lambda,
            alpha,
            max_new_tokens,
            eos_token,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidConfig("max_new_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

/// Stopping rules for greedy decoding with a single model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerationLimits {
    pub max_new_tokens: usize,
    pub eos_token: Option<TokenId>,
}

impl From<&DecodePolicy> for GenerationLimits {
    fn from(p: &DecodePolicy) -> Self {
        Self {
            max_new_tokens: p.max_new_tokens,
            eos_token: p.eos_token,
        }
    }
}

fn argmax_where(scores: &[f32], keep: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if !keep(i) {
            continue;
        }
        match best {
            Some((_, b)) if s <= b => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i)
}

/// Marks tokens whose strong-model probability is at least `alpha` times the
/// largest probability. Computed as `exp(l - max) >= alpha`, which equals the
/// softmax ratio without normalizing.
pub fn plausibility_mask(strong_logits: &LogitVector, alpha: f32) -> Vec<bool> {
    let scores = strong_logits.as_slice();
    let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let alpha = alpha as f64;
    scores
        .iter()
        .map(|&l| (l as f64 - max).exp() >= alpha)
        .collect()
}

/// Contrasted scores together with the plausibility mask. Masked entries
/// keep their (finite) score but are never selected.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastedLogits {
    pub scores: Vec<f32>,
    pub allowed: Vec<bool>,
}

impl ContrastedLogits {
    /// The allowed token with the highest score, lowest id on ties.
    pub fn select(&self) -> TokenId {
        argmax_where(&self.scores, |i| self.allowed[i])
            .expect("the strong argmax is always allowed") as TokenId
    }

    pub fn is_allowed(&self, token: TokenId) -> bool {
        self.allowed[token as usize]
    }
}

pub fn contrast_logits(
    strong_logits: &LogitVector,
    weak_logits: &LogitVector,
    policy: &DecodePolicy,
) -> Result<ContrastedLogits> {
    if strong_logits.len() != weak_logits.len() {
        return Err(Error::LengthMismatch {
            expected: strong_logits.len(),
            actual: weak_logits.len(),
        });
    }
    let lambda = policy.lambda;
    let allowed = plausibility_mask(strong_logits, policy.alpha);
    let scores = strong_logits
        .as_slice()
        .iter()
        .zip(weak_logits.as_slice())
        .map(|(&s, &w)| s + lambda * (s - w))
        .collect();
    Ok(ContrastedLogits { scores, allowed })
}

/// One decoding step: the chosen token and its contrasted score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeStep {
    pub token: TokenId,
    pub score: f32,
}

fn check_prompt(prompt: &[TokenId]) -> Result<()> {
    if prompt.is_empty() {
        Err(Error::InvalidInput("prompt must be non-empty".into()))
    } else {
        Ok(())
    }
}

/// Greedy contrastive decoding, returning each step's token and score.
pub fn greedy_decode_steps<S, W>(
    strong: &S,
    weak: &W,
    prompt: &[TokenId],
    policy: &DecodePolicy,
) -> Result<Vec<DecodeStep>>
where
    S: LogitProvider + ?Sized,
    W: LogitProvider + ?Sized,
{
    policy.validate()?;
    check_prompt(prompt)?;
    if strong.vocab_size() != weak.vocab_size() {
        return Err(Error::InvalidInput(format!(
            "provider vocab mismatch: strong {} vs weak {}",
            strong.vocab_size(),
            weak.vocab_size()
        )));
    }
    let mut seq = prompt.to_vec();
    let mut steps = Vec::with_capacity(policy.max_new_tokens);
    for _ in 0..policy.max_new_tokens {
        let ls = strong.next_logits(&seq)?;
        // With lambda = 0 the weak scores cannot affect the choice.
        let contrasted = if policy.lambda == 0.0 {
            ContrastedLogits {
                allowed: plausibility_mask(&ls, policy.alpha),
                scores: ls.into_inner(),
            }
        } else {
            let lw = weak.next_logits(&seq)?;
            contrast_logits(&ls, &lw, policy)?
        };
        let token = contrasted.select();
        steps.push(DecodeStep {
            token,
            score: contrasted.scores[token as usize],
        });
        seq.push(token);
        if policy.eos_token == Some(token) {
            break;
        }
    }
    Ok(steps)
}

/// Greedy contrastive decoding; returns only the generated tokens.
pub fn greedy_decode<S, W>(
    strong: &S,
    weak: &W,
    prompt: &[TokenId],
    policy: &DecodePolicy,
) -> Result<Vec<TokenId>>
where
    S: LogitProvider + ?Sized,
    W: LogitProvider + ?Sized,
{
    Ok(greedy_decode_steps(strong, weak, prompt, policy)?
        .into_iter()
        .map(|s| s.token)
        .collect())
}

/// Plain greedy argmax decoding with a single model and no mask.
pub fn strong_only_decode<S: LogitProvider + ?Sized>(
    strong: &S,
    prompt: &[TokenId],
    limits: GenerationLimits,
) -> Result<Vec<TokenId>> {
    check_prompt(prompt)?;
    if limits.max_new_tokens == 0 {
        return Err(Error::InvalidConfig("max_new_tokens must be >= 1".into()));
    }
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(limits.max_new_tokens);
    for _ in 0..limits.max_new_tokens {
        let token = strong.next_logits(&seq)?.argmax();
        out.push(token);
        seq.push(token);
        if limits.eos_token == Some(token) {
            break;
        }
    }
    Ok(out)
}

/// A provider that replays one fixed logit row per decoding step, indexed by
/// how many tokens have been generated past the prompt.
#[derive(Debug, Clone)]
pub struct ScriptedProvider {
    prompt_len: usize,
    rows: Vec<Vec<f32>>,
}

impl ScriptedProvider {
    pub fn new(prompt_len: usize, rows: Vec<Vec<f32>>) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::InvalidInput("scripted provider needs at least one row".into()));
        };
        let v = first.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != v) {
            return Err(Error::LengthMismatch {
                expected: v,
                actual: bad.len(),
            });
        }
        for r in &rows {
            LogitVector::new(r.clone())?;
        }
        Ok(Self { prompt_len, rows })
    }
}

impl LogitProvider for ScriptedProvider {
    fn vocab_size(&self) -> usize {
        self.rows[0].len()
    }

    fn next_logits(&self, prefix: &[TokenId]) -> Result<LogitVector> {
        let step = prefix.len().saturating_sub(self.prompt_len);
        let row = self.rows.get(step).unwrap_or_else(|| self.rows.last().expect("non-empty"));
        LogitVector::new(row.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(v: &[f32]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    fn policy(lambda: f32, alpha: f32) -> DecodePolicy {
        DecodePolicy::new(lambda, alpha, 4, None).unwrap()
    }

    /// Independent softmax: normalized probabilities in f64.
    fn softmax(v: &[f32]) -> Vec<f64> {
        let m = v.iter().map(|&x| x as f64).fold(f64::MIN, f64::max);
        let e: Vec<f64> = v.iter().map(|&x| (x as f64 - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    }

    #[test]
    fn logit_vector_invariants() {
        assert!(LogitVector::new(vec![1.0]).is_err());
        assert!(LogitVector::new(vec![1.0, f32::NAN]).is_err());
        assert_eq!(lv(&[1.0, 1.0]).argmax(), 0);
        assert_eq!(lv(&[0.1, 0.7, 0.2]).argmax(), 1);
    }

    #[test]
    fn mask_alpha_zero_is_all_true() {
        assert!(plausibility_mask(&lv(&[50.0, 0.0, -50.0]), 0.0).iter().all(|&b| b));
    }

    #[test]
    fn mask_matches_softmax_oracle() {
        let p = softmax(&[5.0, 0.0, 0.0]);
        assert!((p[0] - 0.9867).abs() < 1e-4 && (p[1] - 0.00665).abs() < 1e-5);
        assert_eq!(plausibility_mask(&lv(&[5.0, 0.0, 0.0]), 0.5), vec![true, false, false]);

        let p = softmax(&[2.0, 1.0, 0.0]);
        assert!((p[0] - 0.6652).abs() < 1e-4 && (p[2] - 0.0900).abs() < 1e-4);
        assert!(p[2] >= 0.1 * p[0]);
        assert_eq!(plausibility_mask(&lv(&[2.0, 1.0, 0.0]), 0.1), vec![true, true, true]);
    }

    #[test]
    fn mask_agrees_with_softmax_on_a_grid() {
        let logits = [3.0f32, 1.0, -0.5, 2.2, 0.0, -4.0];
        let p = softmax(&logits);
        let pmax = p.iter().cloned().fold(0.0, f64::max);
        for alpha in [0.0f32, 0.01, 0.1, 0.3, 0.5, 0.9, 1.0] {
            let expected: Vec<bool> = p.iter().map(|&q| q >= alpha as f64 * pmax).collect();
            assert_eq!(plausibility_mask(&lv(&logits), alpha), expected, "alpha={alpha}");
        }
    }

    #[test]
    fn contrast_identity_and_hand_values() {
        let s = lv(&[2.0, 1.0, 0.0]);
        let c = contrast_logits(&s, &lv(&[9.0, -3.0, 4.0]), &policy(0.0, 0.1)).unwrap();
        assert_eq!(c.scores, vec![2.0, 1.0, 0.0]);

        let c = contrast_logits(&s, &lv(&[1.0, 1.0, 1.0]), &policy(1.0, 0.1)).unwrap();
        assert_eq!(c.scores, vec![3.0, 1.0, -1.0]);
        assert!(c.allowed.iter().all(|&b| b));
        assert_eq!(c.select(), 0);
    }

    #[test]
    fn mask_blocks_implausible_contrast_winner() {
        let c = contrast_logits(&lv(&[5.0, 0.0, 0.0]), &lv(&[0.0, 0.0, -10.0]), &policy(1.0, 0.5)).unwrap();
        assert_eq!(c.allowed, vec![true, false, false]);
        assert_eq!(c.scores[0], 10.0);
        assert_eq!(c.scores[2], 10.0);
        assert_eq!(c.select(), 0);

        // Without the mask token 2 would tie and token 0 only wins on id.
        let c = contrast_logits(&lv(&[5.0, 0.0, 0.0]), &lv(&[0.0, 0.0, -11.0]), &policy(1.0, 0.5)).unwrap();
        assert!(c.scores[2] > c.scores[0]);
        assert_eq!(c.select(), 0);
    }

    #[test]
    fn contrast_length_mismatch() {
        let err = contrast_logits(&lv(&[1.0, 2.0]), &lv(&[1.0, 2.0, 3.0]), &policy(1.0, 0.1)).unwrap_err();
        assert!(matches!(err, Error::LengthMismatch { .. }));
    }

    #[test]
    fn policy_validation() {
        assert!(DecodePolicy::new(-1.0, 0.1, 4, None).is_err());
        assert!(DecodePolicy::new(1.0, 1.5, 4, None).is_err());
        assert!(DecodePolicy::new(1.0, 0.1, 0, None).is_err());
        assert!(DecodePolicy::new(0.0, 1.0, 1, Some(3)).is_ok());
    }

    #[test]
    fn tie_breaks_to_lowest_id() {
        let p = ScriptedProvider::new(1, vec![vec![1.0, 1.0]]).unwrap();
        let limits = GenerationLimits {
            max_new_tokens: 1,
            eos_token: None,
        };
        assert_eq!(strong_only_decode(&p, &[0], limits).unwrap(), vec![0]);
    }

    #[test]
    fn stops_at_eos() {
        let p = ScriptedProvider::new(1, vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 5.0], vec![9.0, 0.0, 0.0]]).unwrap();
        let pol = DecodePolicy::new(0.5, 0.1, 10, Some(2)).unwrap();
        assert_eq!(greedy_decode(&p, &p, &[0], &pol).unwrap(), vec![1, 2]);
        let limits = GenerationLimits {
            max_new_tokens: 10,
            eos_token: Some(2),
        };
        assert_eq!(strong_only_decode(&p, &[0], limits).unwrap(), vec![1, 2]);
    }

    #[test]
    fn vocab_mismatch_and_empty_prompt() {
        let a = ScriptedProvider::new(1, vec![vec![0.0, 1.0]]).unwrap();
        let b = ScriptedProvider::new(1, vec![vec![0.0, 1.0, 2.0]]).unwrap();
        assert!(greedy_decode(&a, &b, &[0], &policy(1.0, 0.1)).is_err());
        assert!(greedy_decode(&a, &a, &[], &policy(1.0, 0.1)).is_err());
    }

    /// Exhaustive per-step oracle: scan every token, skip those whose
    /// softmax probability is below alpha times the max, keep the best
    /// contrasted score with strict improvement only.
    fn oracle_decode(strong: &[Vec<f32>], weak: &[Vec<f32>], lambda: f64, alpha: f64) -> Vec<u32> {
        strong
            .iter()
            .zip(weak)
            .map(|(s, w)| {
                let p = softmax(s);
                let pmax = p.iter().cloned().fold(0.0, f64::max);
                let mut best = None::<(u32, f64)>;
                for v in 0..s.len() {
                    if p[v] < alpha * pmax {
                        continue;
                    }
                    let score = s[v] as f64 + lambda * (s[v] as f64 - w[v] as f64);
                    if best.is_none_or(|(_, b)| score > b) {
                        best = Some((v as u32, score));
                    }
                }
                best.unwrap().0
            })
            .collect()
    }

    #[test]
    fn scripted_four_step_decode_matches_oracle() {
        let strong = vec![
            vec![2.0, 1.0, 0.0],
            vec![5.0, 0.0, 0.0],
            vec![1.0, 1.5, 1.25],
            vec![0.0, 3.0, 2.5],
        ];
        let weak = vec![
            vec![1.0, 1.0, 1.0],
            vec![0.0, 0.0, -10.0],
            vec![1.0, 2.5, 0.0],
            vec![0.0, 3.5, 1.0],
        ];
        let s = ScriptedProvider::new(2, strong.clone()).unwrap();
        let w = ScriptedProvider::new(2, weak.clone()).unwrap();
        for (lambda, alpha) in [(1.0, 0.1), (1.0, 0.5), (0.5, 0.1), (0.0, 0.1), (2.0, 0.9)] {
            let pol = DecodePolicy::new(lambda, alpha, 4, None).unwrap();
            let got = greedy_decode(&s, &w, &[7, 7], &pol).unwrap();
            let expected = oracle_decode(&strong, &weak, lambda as f64, alpha as f64);
            assert_eq!(got, expected, "lambda={lambda} alpha={alpha}");
        }
        let pol = DecodePolicy::new(1.0, 0.1, 4, None).unwrap();
        assert_eq!(greedy_decode(&s, &w, &[7, 7], &pol).unwrap(), vec![0, 0, 2, 2]);
    }
}
