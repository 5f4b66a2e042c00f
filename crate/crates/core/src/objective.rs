//! Clipped surrogate objectives with exact gradients.
//!
//! One evaluator covers GRPO (per-token ratios), GSPO (length-normalized
//! sequence ratios with a stop-gradient on everything but the current
//! token's probability) and the down-sampled objective, which is the same
//! sum restricted to selected samples and kept tokens.

use serde::{Deserialize, Serialize};

use crate::advantage::GroupBatch;
use crate::policy::{log_softmax, PolicyParams, Rollout, RowGrad, Token};
use crate::selector::SelectionResult;
use crate::token_filter::TokenMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Grpo,
    Gspo,
}

/// How per-token terms are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenNormalization {
    /// Mean over trained samples of the mean over that sample's trained
    /// tokens. With full masks this is the GRPO objective.
    PerSample,
    /// Sum over trained tokens divided by `|selected samples| * |trained tokens|`.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub algorithm: Algorithm,
    pub clip_eps: f64,
    pub kl_coeff: f64,
    pub normalization: TokenNormalization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub current: PolicyParams,
    /// Policy that generated the rollouts.
    pub old: PolicyParams,
    /// Frozen at run start.
    pub reference: PolicyParams,
}

impl PolicySnapshot {
    pub fn new(initial: PolicyParams) -> Self {
        Self {
            current: initial.clone(),
            old: initial.clone(),
            reference: initial,
        }
    }

    pub fn refresh_old(&mut self) {
        self.old.clone_from(&self.current);
    }
}

/// One selected sample: its rollout, training advantage and token mask.
#[derive(Debug, Clone, Copy)]
pub struct SampleTerm<'a> {
    pub rollout: &'a Rollout,
    pub advantage: f64,
    pub mask: &'a [bool],
}

/// Pairs a selection with its token mask.
pub fn sample_terms<'a>(
    batch: &'a GroupBatch,
    selection: &SelectionResult,
    mask: &'a TokenMask,
) -> Vec<SampleTerm<'a>> {
    selection
        .selected
        .iter()
        .zip(&selection.advantages)
        .zip(&mask.masks)
        .map(|((&(g, i), &advantage), m)| SampleTerm {
            rollout: batch.rollout(g, i),
            advantage,
            mask: m,
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub grad_norm: f64,
    pub trained_tokens: usize,
    pub trained_samples: usize,
    /// Fraction of trained tokens where the clipped branch won the min.
    pub clip_fraction: f64,
    /// Mean exact KL to the reference over trained tokens.
    pub mean_kl: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveOutput {
    pub value: f64,
    /// Gradient of `value` w.r.t. the current logit table (ascent direction).
    pub grad: Vec<f64>,
    pub diagnostics: Diagnostics,
}

/// `sum_j p_j ln(p_j / q_j)` for two distributions given as logits.
pub fn kl_from_logits(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
    kl.max(0.0)
}

/// Exact `KL(pi_current(.|context) || pi_ref(.|context))`.
pub fn kl_to_reference(snapshot: &PolicySnapshot, context: usize) -> f64 {
    kl_from_logits(
        snapshot.current.row(context),
        snapshot.reference.row(context),
    )
}

/// Gradient of the KL above w.r.t. the current row: `p_k (ln p_k/q_k - KL)`.
fn kl_grad(p_logits: &[f64], q_logits: &[f64]) -> (f64, Vec<f64>) {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    let diff: Vec<f64> = lp.iter().zip(&lq).map(|(a, b)| a - b).collect();
    let kl: f64 = lp.iter().zip(&diff).map(|(a, d)| a.exp() * d).sum();
    let grad = lp
        .iter()
        .zip(&diff)
        .map(|(a, d)| a.exp() * (d - kl))
        .collect();
    (kl, grad)
}

/// `pi_current(y_t) / pi_old(y_t)`, formed in log space.
pub fn token_ratio_grpo(snapshot: &PolicySnapshot, rollout: &Rollout, t: usize) -> f64 {
    let ctx = rollout.context_ids(&snapshot.current)[t];
    let tok = rollout.tokens[t];
    (snapshot.current.logprob_at(ctx, tok) - snapshot.old.logprob_at(ctx, tok)).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GspoRatio {
    pub value: f64,
    /// Gradient under the stop-gradient contract; touches one logit row.
    pub grad: RowGrad,
}

/// Length-normalized sequence ratio at position `t`. Only
/// `pi_current(y_t | .)` carries gradient.
pub fn token_ratio_gspo(snapshot: &PolicySnapshot, rollout: &Rollout, t: usize) -> GspoRatio {
    let ctxs = rollout.context_ids(&snapshot.current);
    let value = sequence_ratio(&snapshot.current, &snapshot.old, rollout, &ctxs);
    let ctx = ctxs[t];
    let mut values = snapshot.current.distribution_at(ctx);
    for v in &mut values {
        *v = -*v * value;
    }
    values[rollout.tokens[t] as usize] += value;
    GspoRatio {
        value,
        grad: RowGrad {
            context: ctx,
            values,
        },
    }
}

fn sequence_ratio(
    current: &PolicyParams,
    old: &PolicyParams,
    rollout: &Rollout,
    ctxs: &[usize],
) -> f64 {
    let gap: f64 = ctxs
        .iter()
        .zip(&rollout.tokens)
        .map(|(&c, &y)| current.logprob_at(c, y) - old.logprob_at(c, y))
        .sum();
    (gap / rollout.len() as f64).exp()
}

fn term_weights(terms: &[SampleTerm<'_>], normalization: TokenNormalization) -> Vec<f64> {
    let counts: Vec<usize> = terms
        .iter()
        .map(|t| t.mask.iter().filter(|&&b| b).count())
        .collect();
    match normalization {
        TokenNormalization::PerSample => {
            let active = counts.iter().filter(|&&c| c > 0).count();
            counts
                .iter()
                .map(|&c| {
                    if c == 0 {
                        0.0
                    } else {
                        1.0 / (active as f64 * c as f64)
                    }
                })
                .collect()
        }
        TokenNormalization::Global => {
            let kept: usize = counts.iter().sum();
            let w = if kept == 0 {
                0.0
            } else {
                1.0 / (terms.len() as f64 * kept as f64)
            };
            vec![w; terms.len()]
        }
    }
}

/// Objective value and exact gradient at `snapshot.current`.
pub fn surrogate_and_grad(
    snapshot: &PolicySnapshot,
    terms: &[SampleTerm<'_>],
    cfg: &ObjectiveConfig,
) -> ObjectiveOutput {
    evaluate(snapshot, &snapshot.current, terms, cfg, true)
}

/// Evaluates the objective at `snapshot.current` while holding every
/// stop-gradient quantity at `anchor`. With `anchor == current` this is the
/// objective itself; with a fixed anchor it is the function whose ordinary
/// derivative at the anchor equals the stop-gradient gradient, which is what
/// finite-difference checks need.
pub fn evaluate(
    snapshot: &PolicySnapshot,
    anchor: &PolicyParams,
    terms: &[SampleTerm<'_>],
    cfg: &ObjectiveConfig,
    want_grad: bool,
) -> ObjectiveOutput {
    let current = &snapshot.current;
    let v = current.vocab_size();
    let mut grad = if want_grad {
        vec![0.0; current.logits().len()]
    } else {
        Vec::new()
    };
    let weights = term_weights(terms, cfg.normalization);
    let lo = 1.0 - cfg.clip_eps;
    let hi = 1.0 + cfg.clip_eps;

    let mut value = 0.0;
    let mut trained = 0usize;
    let mut clipped = 0usize;
    let mut kl_sum = 0.0;
    let mut trained_samples = 0usize;

    for (term, &w) in terms.iter().zip(&weights) {
        let r = term.rollout;
        debug_assert_eq!(term.mask.len(), r.len());
        if w == 0.0 || !term.mask.iter().any(|&b| b) {
            continue;
        }
        trained_samples += 1;
        let ctxs = r.context_ids(current);
        let seq = match cfg.algorithm {
            Algorithm::Gspo => sequence_ratio(anchor, &snapshot.old, r, &ctxs),
            Algorithm::Grpo => 1.0,
        };
        for (t, (&ctx, &tok)) in ctxs.iter().zip(&r.tokens).enumerate() {
            if !term.mask[t] {
                continue;
            }
            trained += 1;
            let lp_cur = current.logprob_at(ctx, tok);
            let ratio = match cfg.algorithm {
                Algorithm::Grpo => (lp_cur - snapshot.old.logprob_at(ctx, tok)).exp(),
                Algorithm::Gspo => seq * (lp_cur - anchor.logprob_at(ctx, tok)).exp(),
            };
            let a = term.advantage;
            let unclipped = ratio * a;
            let clipped_val = ratio.clamp(lo, hi) * a;
            let (surrogate, grad_coef) = if clipped_val < unclipped {
                clipped += 1;
                (clipped_val, 0.0)
            } else {
                // d ratio / d logits = ratio * (one_hot - pi) for both ratio kinds
                (unclipped, a * ratio)
            };

            let (kl, kl_row) = if cfg.kl_coeff != 0.0 || want_grad {
                kl_grad(current.row(ctx), snapshot.reference.row(ctx))
            } else {
                (0.0, Vec::new())
            };
            kl_sum += kl;
            value += w * (surrogate - cfg.kl_coeff * kl);

            if want_grad {
                let row = &mut grad[ctx * v..(ctx + 1) * v];
                if grad_coef != 0.0 {
                    let probs = current.distribution_at(ctx);
                    let c = w * grad_coef;
                    for (g, p) in row.iter_mut().zip(&probs) {
                        *g -= c * p;
                    }
                    row[tok as usize] += c;
                }
                if cfg.kl_coeff != 0.0 {
                    let c = w * cfg.kl_coeff;
                    for (g, k) in row.iter_mut().zip(&kl_row) {
                        *g -= c * k;
                    }
                }
            }
        }
    }

    let mut warnings = Vec::new();
    if trained == 0 {
        warnings.push("no trained tokens; gradient is zero".to_string());
        log::warn!("no trained tokens; gradient is zero");
    }
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    ObjectiveOutput {
        value,
        grad,
        diagnostics: Diagnostics {
            grad_norm,
            trained_tokens: trained,
            trained_samples,
            clip_fraction: if trained == 0 {
                0.0
            } else {
                clipped as f64 / trained as f64
            },
            mean_kl: if trained == 0 {
                0.0
            } else {
                kl_sum / trained as f64
            },
            warnings,
        },
    }
}

/// Recomputes old log-probabilities; equal to the recorded ones when
/// `old` generated the rollout.
pub fn old_logprobs(old: &PolicyParams, rollout: &Rollout) -> Vec<f64> {
    rollout
        .context_ids(old)
        .iter()
        .zip(&rollout.tokens)
        .map(|(&c, &y): (&usize, &Token)| old.logprob_at(c, y))
        .collect()
}
