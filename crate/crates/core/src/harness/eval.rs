//! Exact-match evaluation of a decoding setup over a dataset.

use rayon::prelude::*;

use crate::data::Example;
use crate::decode::{greedy_decode, strong_only_decode, DecodePolicy, GenerationLimits, LogitProvider, TokenId};
use crate::error::{Error, Result};

/// Anything that maps a prompt to generated tokens.
pub trait Generator: Sync {
    fn generate(&self, prompt: &[TokenId], limits: GenerationLimits) -> Result<Vec<TokenId>>;
}

/// Plain greedy decoding with one model (the finetune and ME conditions).
#[derive(Debug, Clone)]
pub struct Greedy<P>(pub P);

impl<P: LogitProvider + Sync> Generator for Greedy<P> {
    fn generate(&self, prompt: &[TokenId], limits: GenerationLimits) -> Result<Vec<TokenId>> {
        strong_only_decode(&self.0, prompt, limits)
    }
}

/// Greedy contrastive decoding between two models.
#[derive(Debug, Clone)]
pub struct Contrastive<S, W> {
    pub strong: S,
    pub weak: W,
    pub lambda: f32,
    pub alpha: f32,
}

impl<S, W> Generator for Contrastive<S, W>
where
    S: LogitProvider + Sync,
    W: LogitProvider + Sync,
{
    fn generate(&self, prompt: &[TokenId], limits: GenerationLimits) -> Result<Vec<TokenId>> {
        let policy = DecodePolicy::new(self.lambda, self.alpha, limits.max_new_tokens, limits.eos_token)?;
        greedy_decode(&self.strong, &self.weak, prompt, &policy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    /// Generated answers, cut before the first end-of-answer token.
    pub outputs: Vec<Vec<TokenId>>,
    pub correct: Vec<bool>,
}

/// Cuts `tokens` before the first `eos`.
pub fn truncate_at_eos(mut tokens: Vec<TokenId>, eos: TokenId) -> Vec<TokenId> {
    if let Some(i) = tokens.iter().position(|&t| t == eos) {
        tokens.truncate(i);
    }
    tokens
}

/// Generates up to `answer.len() + 1` tokens per example (room for the
/// answer and its terminator) and scores exact equality of the answer
/// portion with the gold answer.
pub fn evaluate<G: Generator + ?Sized>(gen: &G, dataset: &[Example], eos: TokenId) -> Result<EvalResult> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate on an empty dataset".into()));
    }
    let outputs = dataset
        .par_iter()
        .map(|ex| {
            let limits = GenerationLimits {
                max_new_tokens: ex.answer.len() + 1,
                eos_token: Some(eos),
            };
            gen.generate(&ex.prompt, limits).map(|out| truncate_at_eos(out, eos))
        })
        .collect::<Result<Vec<_>>>()?;
    let correct: Vec<bool> = outputs.iter().zip(dataset).map(|(o, ex)| *o == ex.answer).collect();
    let hits = correct.iter().filter(|&&c| c).count();
    Ok(EvalResult {
        accuracy: hits as f64 / dataset.len() as f64,
        outputs,
        correct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Emits a fixed token list regardless of the prompt.
    struct Fixed(Vec<TokenId>);

    impl Generator for Fixed {
        fn generate(&self, _: &[TokenId], limits: GenerationLimits) -> Result<Vec<TokenId>> {
            Ok(self.0.iter().copied().take(limits.max_new_tokens).collect())
        }
    }

    /// Looks the answer up in a table, emitting it followed by EOS.
    struct Oracle(Vec<Example>);

    impl Generator for Oracle {
        fn generate(&self, prompt: &[TokenId], _: GenerationLimits) -> Result<Vec<TokenId>> {
            let ex = self.0.iter().find(|e| e.prompt == prompt).unwrap();
            let mut out = ex.answer.clone();
            out.push(1);
            Ok(out)
        }
    }

    fn data() -> Vec<Example> {
        (0..4).map(|i| Example::new(vec![10 + i], vec![20 + i % 3])).collect()
    }

    #[test]
    fn gold_decoder_scores_one() {
        let d = data();
        let r = evaluate(&Oracle(d.clone()), &d, 1).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.outputs[3], vec![20]);
    }

    #[test]
    fn wrong_token_scores_zero() {
        let r = evaluate(&Fixed(vec![63, 1]), &data(), 1).unwrap();
        assert_eq!(r.accuracy, 0.0);
    }

    #[test]
    fn three_of_four() {
        // Answers are 20, 21, 22, 20; emitting 20 matches examples 0 and 3.
        let mut d = data();
        d[1].answer = vec![20];
        let r = evaluate(&Fixed(vec![20, 1]), &d, 1).unwrap();
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.correct, vec![true, true, false, true]);
    }

    #[test]
    fn missing_terminator_still_matches_prefix_rule() {
        // Output [20, 5] has no EOS, so it is compared whole and fails.
        let d = vec![Example::new(vec![3], vec![20])];
        assert_eq!(evaluate(&Fixed(vec![20, 5]), &d, 1).unwrap().accuracy, 0.0);
        // Output [20] without EOS (generator stopped early) matches.
        assert_eq!(evaluate(&Fixed(vec![20]), &d, 1).unwrap().accuracy, 1.0);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(evaluate(&Fixed(vec![1]), &[], 1).is_err());
    }
}
