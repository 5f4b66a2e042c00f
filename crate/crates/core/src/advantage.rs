//! Group-relative advantage normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Rollout;

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Variance around the set's own mean, divided by the set size.
pub fn population_variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mu = mean(values);
    values.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub advantages: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub degenerate: bool,
}

/// Standardizes rewards by the group mean and population standard deviation.
/// A zero-variance group yields all-zero advantages and is flagged degenerate.
pub fn normalize_group(rewards: &[f64]) -> Result<Normalized> {
    if rewards.len() < 2 {
        return Err(Error::GroupTooSmall(rewards.len()));
    }
    let mu = mean(rewards);
    let std = population_variance(rewards).sqrt();
    // rewards are binary, so a constant group has exactly zero spread
    let degenerate = rewards.iter().all(|&r| r == rewards[0]);
    let advantages = if degenerate {
        vec![0.0; rewards.len()]
    } else {
        rewards.iter().map(|r| (r - mu) / std).collect()
    };
    Ok(Normalized {
        advantages,
        mean: mu,
        std: if degenerate { 0.0 } else { std },
        degenerate,
    })
}

/// Mean of token-level advantages.
pub fn sequence_advantage(token_advantages: &[f64]) -> Result<f64> {
    if token_advantages.is_empty() {
        return Err(Error::Empty("token advantages"));
    }
    Ok(mean(token_advantages))
}

/// Outcome rewards give every token the sequence advantage.
pub fn broadcast(advantage: f64, len: usize) -> Vec<f64> {
    vec![advantage; len]
}

/// Rollouts for one optimizer step: `B` groups of `G` responses each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBatch {
    pub groups: Vec<Vec<Rollout>>,
    pub advantages: Vec<Vec<f64>>,
    pub group_mean: Vec<f64>,
    pub group_std: Vec<f64>,
    pub degenerate: Vec<bool>,
}

impl GroupBatch {
    pub fn new(groups: Vec<Vec<Rollout>>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut advantages = Vec::with_capacity(groups.len());
        let mut group_mean = Vec::with_capacity(groups.len());
        let mut group_std = Vec::with_capacity(groups.len());
        let mut degenerate = Vec::with_capacity(groups.len());
        for g in &groups {
            let rewards: Vec<f64> = g.iter().map(|r| r.reward).collect();
            let n = normalize_group(&rewards)?;
            advantages.push(n.advantages);
            group_mean.push(n.mean);
            group_std.push(n.std);
            degenerate.push(n.degenerate);
        }
        Ok(Self {
            groups,
            advantages,
            group_mean,
            group_std,
            degenerate,
        })
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn num_samples(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn total_tokens(&self) -> usize {
        self.groups.iter().flatten().map(Rollout::len).sum()
    }

    pub fn rollout(&self, group: usize, index: usize) -> &Rollout {
        &self.groups[group][index]
    }

    pub fn rollouts(&self) -> impl Iterator<Item = &Rollout> {
        self.groups.iter().flatten()
    }
}
