//! Exact autoregressive categorical policy.
//!
//! The policy is a table of logits indexed by a context id and a token id.
//! The context id encodes the last `context_window` tokens of the prompt plus
//! the response so far, left-padded with a begin-of-sequence symbol that is
//! never emitted. The last vocabulary entry is the end-of-sequence token.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    logits: Vec<f64>,
    vocab_size: usize,
    context_window: usize,
    max_len: usize,
}

/// Gradient of a per-context scalar with respect to a single logit row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowGrad {
    pub context: usize,
    pub values: Vec<f64>,
}

/// One sampled response with the statistics recorded by the sampling policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub query_id: u64,
    pub prompt: Vec<Token>,
    pub tokens: Vec<Token>,
    /// Log-probability of each token under the sampling policy.
    pub logprobs_old: Vec<f64>,
    /// Entropy in nats of the sampling distribution at each position.
    pub entropies: Vec<f64>,
    pub reward: f64,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Context id of every response position.
    pub fn context_ids(&self, params: &PolicyParams) -> Vec<usize> {
        let mut history = self.prompt.clone();
        history.reserve(self.tokens.len());
        let mut ids = Vec::with_capacity(self.tokens.len());
        for &tok in &self.tokens {
            ids.push(params.context_id(&history));
            history.push(tok);
        }
        ids
    }
}

impl PolicyParams {
    /// Uniform policy: all logits zero.
    pub fn zeros(vocab_size: usize, context_window: usize, max_len: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::config("vocab_size", "must be at least 2"));
        }
        if context_window == 0 {
            return Err(Error::config("context_window", "must be positive"));
        }
        if max_len == 0 {
            return Err(Error::config("max_len", "must be positive"));
        }
        let rows = (vocab_size + 1)
            .checked_pow(context_window as u32)
            .filter(|r| r.saturating_mul(vocab_size) <= 1 << 26)
            .ok_or_else(|| Error::config("context_window", "logit table too large"))?;
        Ok(Self {
            logits: vec![0.0; rows * vocab_size],
            vocab_size,
            context_window,
            max_len,
        })
    }

    /// Policy with i.i.d. uniform logits in `[-scale, scale]`.
    pub fn random<R: Rng>(
        vocab_size: usize,
        context_window: usize,
        max_len: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(vocab_size, context_window, max_len)?;
        for z in &mut p.logits {
            *z = rng.gen_range(-scale..=scale);
        }
        Ok(p)
    }

    pub fn from_logits(
        logits: Vec<f64>,
        vocab_size: usize,
        context_window: usize,
        max_len: usize,
    ) -> Result<Self> {
        let mut p = Self::zeros(vocab_size, context_window, max_len)?;
        if logits.len() != p.logits.len() {
            return Err(Error::LengthMismatch(format!(
                "expected {} logits, got {}",
                p.logits.len(),
                logits.len()
            )));
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite("policy logits".into()));
        }
        p.logits = logits;
        Ok(p)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn context_window(&self) -> usize {
        self.context_window
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn eos(&self) -> Token {
        (self.vocab_size - 1) as Token
    }

    pub fn num_contexts(&self) -> usize {
        self.logits.len() / self.vocab_size
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn row(&self, context: usize) -> &[f64] {
        &self.logits[context * self.vocab_size..(context + 1) * self.vocab_size]
    }

    pub fn row_mut(&mut self, context: usize) -> &mut [f64] {
        let v = self.vocab_size;
        &mut self.logits[context * v..(context + 1) * v]
    }

    pub fn is_finite(&self) -> bool {
        self.logits.iter().all(|z| z.is_finite())
    }

    /// Base-(V+1) encoding of the last `context_window` symbols, most recent
    /// symbol in the lowest digit. Missing history is the padding symbol `V`.
    pub fn context_id(&self, history: &[Token]) -> usize {
        let base = self.vocab_size + 1;
        let pad = self.vocab_size;
        let mut id = 0usize;
        let mut place = 1usize;
        for k in 0..self.context_window {
            let sym = if k < history.len() {
                history[history.len() - 1 - k] as usize
            } else {
                pad
            };
            debug_assert!(sym <= pad);
            id += sym * place;
            place *= base;
        }
        id
    }

    pub fn distribution_at(&self, context: usize) -> Vec<f64> {
        softmax(self.row(context))
    }

    pub fn log_distribution_at(&self, context: usize) -> Vec<f64> {
        log_softmax(self.row(context))
    }

    pub fn token_distribution(&self, history: &[Token]) -> Vec<f64> {
        self.distribution_at(self.context_id(history))
    }

    pub fn logprob_at(&self, context: usize, token: Token) -> f64 {
        let row = self.row(context);
        row[token as usize] - log_sum_exp(row)
    }

    /// Samples a response autoregressively until the end token or `max_len`.
    pub fn sample_rollout<R: Rng>(&self, query_id: u64, prompt: &[Token], rng: &mut R) -> Rollout {
        let eos = self.eos();
        let mut history = prompt.to_vec();
        let mut tokens = Vec::new();
        let mut logprobs = Vec::new();
        let mut entropies = Vec::new();
        while tokens.len() < self.max_len {
            let ctx = self.context_id(&history);
            let probs = self.distribution_at(ctx);
            let u: f64 = rng.gen();
            let tok = inverse_cdf(&probs, u) as Token;
            logprobs.push(self.logprob_at(ctx, tok));
            entropies.push(entropy_unchecked(&probs));
            tokens.push(tok);
            history.push(tok);
            if tok == eos {
                break;
            }
        }
        Rollout {
            query_id,
            prompt: prompt.to_vec(),
            tokens,
            logprobs_old: logprobs,
            entropies,
            reward: 0.0,
        }
    }
}

fn inverse_cdf(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (j, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = j;
        }
        acc += p;
        if u < acc {
            return j;
        }
    }
    // u landed in the rounding gap above the accumulated mass
    last_positive
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = out.iter().sum();
    for p in &mut out {
        *p /= s;
    }
    out
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|&x| x - lse).collect()
}

fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn token_entropy(distribution: &[f64]) -> Result<f64> {
    if distribution.is_empty() {
        return Err(Error::Empty("distribution"));
    }
    if let Some(x) = distribution.iter().find(|x| !(**x >= 0.0)) {
        return Err(Error::InvalidDistribution(format!("entry {x} is negative")));
    }
    let s: f64 = distribution.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidDistribution(format!("sums to {s}")));
    }
    let h = entropy_unchecked(distribution);
    Ok(h.clamp(0.0, (distribution.len() as f64).ln()))
}

/// d log pi(token | context) / d logits = one_hot(token) - pi(. | context).
pub fn logprob_grad(params: &PolicyParams, history: &[Token], token: Token) -> RowGrad {
    let context = params.context_id(history);
    let mut values = params.distribution_at(context);
    for v in &mut values {
        *v = -*v;
    }
    values[token as usize] += 1.0;
    RowGrad { context, values }
}
