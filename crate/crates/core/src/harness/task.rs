//! Synthetic supervised tasks with a deterministic answer per prompt.
//!
//! Token ids `0..3` are reserved:
//!
//! | id | role |
//! |----|------|
//! | 0  | padding (never emitted by the generators) |
//! | 1  | end of answer |
//! | 2  | query marker |
//!
//! `kv_recall`: `k1 v1 k2 v2 ... kn vn <query> kq` -> `vq`. Keys are distinct
//! within a prompt and drawn from the lower half of the free ids; values
//! come from the upper half and may repeat.
//!
//! `modular_chain`: `a1 a2 ... an <query>` -> `(a1 + ... + an) mod m`, with
//! digits `0..m` mapped to ids `3..3 + m`.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::decode::TokenId;
use crate::error::{Error, Result};
use crate::rng;

pub const PAD: TokenId = 0;
pub const EOS: TokenId = 1;
pub const QUERY: TokenId = 2;
pub const FIRST_FREE: TokenId = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    KvRecall,
    ModularChain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Key-value pairs per prompt (`kv_recall`) or terms per chain
    /// (`modular_chain`).
    pub length: usize,
    /// Modulus for `modular_chain`.
    pub modulus: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::KvRecall,
            vocab_size: 64,
            n_train: 512,
            n_dev: 500,
            n_test: 1000,
            length: 2,
            modulus: 10,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 {
            return Err(Error::InvalidConfig("n_train must be >= 1".into()));
        }
        if self.length == 0 {
            return Err(Error::InvalidConfig("length must be >= 1".into()));
        }
        let free = self.vocab_size.saturating_sub(FIRST_FREE as usize);
        match self.kind {
            TaskKind::KvRecall => {
                let (keys, values) = self.kv_ranges();
                if keys.len() < self.length || values.is_empty() {
                    return Err(Error::InvalidConfig(format!(
                        "vocab_size {} leaves {} keys, too few for {} distinct keys per prompt",
                        self.vocab_size,
                        keys.len(),
                        self.length
                    )));
                }
            }
            TaskKind::ModularChain => {
                if self.modulus < 2 || self.modulus > free {
                    return Err(Error::InvalidConfig(format!(
                        "modulus {} must be in [2, {free}] for vocab_size {}",
                        self.modulus, self.vocab_size
                    )));
                }
            }
        }
        Ok(())
    }

    fn kv_ranges(&self) -> (std::ops::Range<TokenId>, std::ops::Range<TokenId>) {
        let free = self.vocab_size.saturating_sub(FIRST_FREE as usize) as TokenId;
        let split = FIRST_FREE + free / 2;
        (FIRST_FREE..split, split..FIRST_FREE + free)
    }

    /// Prompt length in tokens.
    pub fn prompt_len(&self) -> usize {
        match self.kind {
            TaskKind::KvRecall => 2 * self.length + 2,
            TaskKind::ModularChain => self.length + 1,
        }
    }

    /// Recomputes the answer from a prompt; `None` if the prompt is not of
    /// this task's form.
    pub fn solve(&self, prompt: &[TokenId]) -> Option<Vec<TokenId>> {
        match self.kind {
            TaskKind::KvRecall => {
                let (&key, rest) = prompt.split_last()?;
                let (&marker, pairs) = rest.split_last()?;
                if marker != QUERY || pairs.len() % 2 != 0 {
                    return None;
                }
                pairs
                    .chunks_exact(2)
                    .find(|p| p[0] == key)
                    .map(|p| vec![p[1]])
            }
            TaskKind::ModularChain => {
                let (&marker, terms) = prompt.split_last()?;
                if marker != QUERY {
                    return None;
                }
                let sum: usize = terms.iter().map(|&t| (t - FIRST_FREE) as usize).sum();
                Some(vec![FIRST_FREE + (sum % self.modulus) as TokenId])
            }
        }
    }

    fn sample_prompt<R: Rng>(&self, rng: &mut R) -> Vec<TokenId> {
        match self.kind {
            TaskKind::KvRecall => {
                let (keys, values) = self.kv_ranges();
                let mut pool: Vec<TokenId> = keys.collect();
                let mut prompt = Vec::with_capacity(self.prompt_len());
                for i in 0..self.length {
                    let j = rng.random_range(i..pool.len());
                    pool.swap(i, j);
                    prompt.push(pool[i]);
                    prompt.push(rng.random_range(values.clone()));
                }
                let q = rng.random_range(0..self.length);
                prompt.push(QUERY);
                prompt.push(prompt[2 * q]);
                prompt
            }
            TaskKind::ModularChain => {
                let mut prompt: Vec<TokenId> = (0..self.length)
                    .map(|_| FIRST_FREE + rng.random_range(0..self.modulus as TokenId))
                    .collect();
                prompt.push(QUERY);
                prompt
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

/// Draws `n_train + n_dev + n_test` distinct prompts from the stream
/// `(seed, 0)` and deals them out in that order, so the three splits never
/// share a prompt.
pub fn gen_dataset(spec: &TaskSpec) -> Result<Splits> {
    spec.validate()?;
    let total = spec.n_train + spec.n_dev + spec.n_test;
    let mut rng = rng::stream(spec.seed, 0);
    let mut seen = HashSet::with_capacity(total);
    let mut examples = Vec::with_capacity(total);
    let max_attempts = 50 * total + 1000;
    let mut attempts = 0;
    while examples.len() < total {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::InvalidConfig(format!(
                "could only draw {} distinct prompts of the {total} requested; enlarge vocab_size or length",
                examples.len()
            )));
        }
        let prompt = spec.sample_prompt(&mut rng);
        if seen.insert(prompt.clone()) {
            let answer = spec.solve(&prompt).expect("generated prompts are well formed");
            examples.push(Example::new(prompt, answer));
        }
    }
    let test = examples.split_off(spec.n_train + spec.n_dev);
    let dev = examples.split_off(spec.n_train);
    Ok(Splits {
        train: examples,
        dev,
        test,
    })
}

/// Appends the end-of-answer token to every answer, giving the sequences
/// the model is trained to produce.
pub fn with_eos(examples: &[Example]) -> Vec<Example> {
    examples
        .iter()
        .map(|e| {
            let mut answer = e.answer.clone();
            answer.push(EOS);
            Example::new(e.prompt.clone(), answer)
        })
        .collect()
}
