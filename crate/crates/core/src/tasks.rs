//! Synthetic tasks with binary, outcome-verified rewards.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Rollout, Token};
use crate::rng::{stream, Purpose};

/// Pure reward function over response tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verifier {
    /// The last response token below `modulus` must equal `target`.
    ModSum { target: Token, modulus: usize },
    /// The response, with a trailing end token removed, must equal `target`.
    Copy { target: Vec<Token>, eos: Token },
}

impl Verifier {
    pub fn verify(&self, response: &[Token]) -> f64 {
        let ok = match self {
            Verifier::ModSum { target, modulus } => response
                .iter()
                .rev()
                .find(|&&t| (t as usize) < *modulus)
                .is_some_and(|t| t == target),
            Verifier::Copy { target, eos } => {
                let body = match response.split_last() {
                    Some((last, rest)) if last == eos => rest,
                    _ => response,
                };
                body == target.as_slice()
            }
        };
        if ok {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub query_id: u64,
    pub prompt: Vec<Token>,
    pub verifier: Verifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSuite {
    pub name: String,
    pub vocab_size: usize,
    pub train: Vec<TaskInstance>,
    pub eval: Vec<TaskInstance>,
}

/// Tokens the modular-sum suite reserves: the end token.
pub const MODSUM_RESERVED: usize = 1;
/// Tokens the copy suite reserves: separator and end token.
pub const COPY_RESERVED: usize = 2;

/// Modular-sum questions: the prompt is two operand tokens `a, b` and the
/// answer is `(a + b) mod modulus`. Operand tokens double as answer digits.
/// Train ids are `0..n_train`, eval ids follow.
pub fn make_modsum_suite(
    modulus: usize,
    vocab_size: usize,
    n_train: usize,
    n_eval: usize,
    seed: u64,
) -> Result<TaskSuite> {
    let available = vocab_size.saturating_sub(MODSUM_RESERVED);
    if modulus < 2 || modulus > available {
        return Err(Error::Modulus { modulus, available });
    }
    let mut rng = stream(seed, Purpose::Suite, &[0, modulus as u64]);
    let mut draw = |query_id: u64| {
        let a = rng.gen_range(0..modulus) as Token;
        let b = rng.gen_range(0..modulus) as Token;
        TaskInstance {
            query_id,
            prompt: vec![a, b],
            verifier: Verifier::ModSum {
                target: ((a as usize + b as usize) % modulus) as Token,
                modulus,
            },
        }
    };
    let train = (0..n_train as u64).map(&mut draw).collect();
    let eval = (n_train as u64..(n_train + n_eval) as u64)
        .map(&mut draw)
        .collect();
    Ok(TaskSuite {
        name: format!("modsum{modulus}"),
        vocab_size,
        train,
        eval,
    })
}

/// Copy questions: the prompt is `prompt_len` symbols followed by a separator;
/// the answer is the last `k` symbols, then the end token.
pub fn make_copy_suite(
    alphabet: usize,
    prompt_len: usize,
    k: usize,
    vocab_size: usize,
    n_train: usize,
    n_eval: usize,
    seed: u64,
) -> Result<TaskSuite> {
    let available = vocab_size.saturating_sub(COPY_RESERVED);
    if alphabet < 2 || alphabet > available {
        return Err(Error::config(
            "alphabet",
            format!("must lie in [2, {available}] for vocab_size {vocab_size}"),
        ));
    }
    if k == 0 || k > prompt_len {
        return Err(Error::config("copy_k", "must lie in [1, prompt_len]"));
    }
    let sep = (vocab_size - 2) as Token;
    let eos = (vocab_size - 1) as Token;
    let mut rng = stream(seed, Purpose::Suite, &[1, alphabet as u64]);
    let mut draw = |query_id: u64| {
        let symbols: Vec<Token> = (0..prompt_len)
            .map(|_| rng.gen_range(0..alphabet) as Token)
            .collect();
        let target = symbols[prompt_len - k..].to_vec();
        let mut prompt = symbols;
        prompt.push(sep);
        TaskInstance {
            query_id,
            prompt,
            verifier: Verifier::Copy { target, eos },
        }
    };
    let train = (0..n_train as u64).map(&mut draw).collect();
    let eval = (n_train as u64..(n_train + n_eval) as u64)
        .map(&mut draw)
        .collect();
    Ok(TaskSuite {
        name: format!("copy{k}"),
        vocab_size,
        train,
        eval,
    })
}

/// Computes the verifier reward and stores it on the rollout.
pub fn score(instance: &TaskInstance, rollout: &mut Rollout) -> Result<f64> {
    if instance.query_id != rollout.query_id {
        return Err(Error::QueryMismatch {
            instance: instance.query_id,
            rollout: rollout.query_id,
        });
    }
    let r = instance.verifier.verify(&rollout.tokens);
    rollout.reward = r;
    Ok(r)
}
