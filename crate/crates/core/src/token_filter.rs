//! Token-level selection by |advantage| x entropy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Rollout;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMask {
    /// One vector per selected rollout, in selection order.
    pub masks: Vec<Vec<bool>>,
    pub kept_count: usize,
    pub budget: usize,
}

impl TokenMask {
    /// Every position of every rollout kept.
    pub fn full(lengths: impl IntoIterator<Item = usize>) -> Self {
        let masks: Vec<Vec<bool>> = lengths.into_iter().map(|n| vec![true; n]).collect();
        let total = masks.iter().map(Vec::len).sum();
        Self {
            masks,
            kept_count: total,
            budget: total,
        }
    }

    pub fn total_tokens(&self) -> usize {
        self.masks.iter().map(Vec::len).sum()
    }
}

/// `|A_i| * H_{i,t}` for every token of every rollout.
pub fn score_tokens(rollouts: &[&Rollout], advantages: &[f64]) -> Result<Vec<Vec<f64>>> {
    if rollouts.len() != advantages.len() {
        return Err(Error::LengthMismatch(format!(
            "{} rollouts but {} advantages",
            rollouts.len(),
            advantages.len()
        )));
    }
    rollouts
        .iter()
        .zip(advantages)
        .map(|(r, a)| {
            if r.entropies.len() != r.tokens.len() {
                return Err(Error::LengthMismatch(format!(
                    "{} tokens but {} entropies",
                    r.tokens.len(),
                    r.entropies.len()
                )));
            }
            Ok(r.entropies.iter().map(|h| a.abs() * h).collect())
        })
        .collect()
}

/// `ceil(k * total)`, ignoring representation error below 1e-9 so that
/// e.g. `0.07 * 100` keeps 7 tokens rather than 8.
pub fn token_budget(k_fraction: f64, total: usize) -> usize {
    let exact = k_fraction * total as f64;
    ((exact - 1e-9).ceil().max(0.0) as usize).min(total)
}

/// Keeps the `ceil(k * total)` highest-scoring tokens across all rollouts.
/// Ties go to the earlier rollout, then the earlier position.
pub fn top_k_mask(scores: &[Vec<f64>], k_fraction: f64) -> Result<TokenMask> {
    if !(k_fraction > 0.0 && k_fraction <= 1.0) {
        return Err(Error::TokenFraction(k_fraction));
    }
    let total: usize = scores.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Empty("token scores"));
    }
    let budget = token_budget(k_fraction, total);
    let mut flat: Vec<(usize, usize)> = scores
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.len()).map(move |t| (i, t)))
        .collect();
    flat.sort_by(|&(i, t), &(j, u)| {
        scores[j][u]
            .total_cmp(&scores[i][t])
            .then(i.cmp(&j))
            .then(t.cmp(&u))
    });
    let mut masks: Vec<Vec<bool>> = scores.iter().map(|s| vec![false; s.len()]).collect();
    for &(i, t) in flat.iter().take(budget) {
        masks[i][t] = true;
    }
    Ok(TokenMask {
        masks,
        kept_count: budget,
        budget,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rollout(entropies: Vec<f64>) -> Rollout {
        let n = entropies.len();
        Rollout {
            query_id: 0,
            prompt: vec![],
            tokens: vec![0; n],
            logprobs_old: vec![0.0; n],
            entropies,
            reward: 0.0,
        }
    }

    #[test]
    fn scores_are_advantage_times_entropy() {
        let r = rollout(vec![0.1, 0.9, 0.5, 0.3]);
        assert_eq!(
            score_tokens(&[&r], &[1.0]).unwrap()[0],
            vec![0.1, 0.9, 0.5, 0.3]
        );
        assert_eq!(
            score_tokens(&[&r], &[-1.0]).unwrap()[0],
            vec![0.1, 0.9, 0.5, 0.3]
        );
        let det = rollout(vec![0.0]);
        assert_eq!(score_tokens(&[&det], &[5.0]).unwrap()[0], vec![0.0]);
        let one = rollout(vec![0.5]);
        assert_eq!(score_tokens(&[&one], &[2.0]).unwrap()[0], vec![1.0]);
    }

    #[test]
    fn mismatched_entropies_are_rejected() {
        let mut r = rollout(vec![0.1, 0.2]);
        r.entropies.pop();
        assert!(score_tokens(&[&r], &[1.0]).is_err());
        assert!(score_tokens(&[&r], &[]).is_err());
    }

    #[test]
    fn top_half() {
        let m = top_k_mask(&[vec![0.9, 0.1, 0.5, 0.3]], 0.5).unwrap();
        assert_eq!(m.masks[0], vec![true, false, true, false]);
        assert_eq!(m.kept_count, 2);
    }

    #[test]
    fn full_fraction_keeps_everything() {
        let m = top_k_mask(&[vec![0.2, 0.0], vec![0.7]], 1.0).unwrap();
        assert_eq!(m.kept_count, 3);
        assert!(m.masks.iter().flatten().all(|&b| b));
    }

    #[test]
    fn ceiling_budget() {
        let m = top_k_mask(&[vec![0.0; 10]], 0.25).unwrap();
        assert_eq!(m.budget, 3);
        assert_eq!(
            m.masks[0],
            vec![true, true, true, false, false, false, false, false, false, false]
        );
        assert_eq!(token_budget(0.05, 40), 2);
        assert_eq!(token_budget(0.05, 41), 3);
        assert_eq!(token_budget(0.2, 5), 1);
        assert_eq!(token_budget(1e-6, 5), 1);
    }

    #[test]
    fn ties_prefer_earlier_rollouts() {
        let m = top_k_mask(&[vec![1.0, 2.0], vec![2.0, 1.0]], 0.5).unwrap();
        assert_eq!(m.masks, vec![vec![false, true], vec![true, false]]);
        let m = top_k_mask(&[vec![1.0, 1.0], vec![1.0, 1.0]], 0.25).unwrap();
        assert_eq!(m.masks, vec![vec![true, false], vec![false, false]]);
    }

    #[test]
    fn invalid_fraction() {
        assert!(top_k_mask(&[vec![1.0]], 0.0).is_err());
        assert!(top_k_mask(&[vec![1.0]], 1.5).is_err());
        assert!(top_k_mask(&[vec![]], 0.5).is_err());
    }
}
