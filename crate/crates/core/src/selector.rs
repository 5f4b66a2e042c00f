//! Sample-level down-sampling.
//!
//! All variance-maximizing modes share one split search: sort the candidate
//! values, and for every split `n = n_pos + n_neg` take the `n_pos` largest
//! and `n_neg` smallest values. The best split is the exact maximizer of the
//! population variance over all size-`n` subsets; `oracle_max_variance_subset`
//! checks that by enumeration.

use serde::{Deserialize, Serialize};

use crate::advantage::{normalize_group, population_variance, GroupBatch};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    None,
    WithinGroup,
    CrossGroup,
    PodsRewardVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub mode: SelectionMode,
    /// Samples kept per group; cross-group mode keeps `groups * n_select`.
    pub n_select: usize,
    pub allow_degenerate_fill: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// `(group, rollout)` pairs, unique.
    pub selected: Vec<(usize, usize)>,
    /// Advantage used for training each selected sample. Equal to the
    /// group-normalized value except under reward-variance selection, which
    /// renormalizes inside the chosen subset.
    pub advantages: Vec<f64>,
    pub achieved_variance: f64,
    pub split: (usize, usize),
    pub degenerate: bool,
}

impl SelectionResult {
    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// Positions into the input slice, largest values first, then smallest.
    pub chosen: Vec<usize>,
    pub variance: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

fn check_size(n: usize, available: usize) -> Result<()> {
    if n < 2 || n > available {
        return Err(Error::SelectionSize { n, available });
    }
    Ok(())
}

fn same_variance(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

/// Exact variance-maximizing subset of size `n` via the extremes split.
///
/// Ties between splits of equal variance go to the most balanced split, then
/// to the one with more large values.
pub fn split_search(values: &[f64], n: usize) -> Result<Split> {
    check_size(n, values.len())?;
    let m = values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));

    let mut best: Option<Split> = None;
    let mut buf = Vec::with_capacity(n);
    for n_pos in 0..=n {
        let n_neg = n - n_pos;
        let chosen: Vec<usize> = order[m - n_pos..]
            .iter()
            .rev()
            .chain(order[..n_neg].iter())
            .copied()
            .collect();
        buf.clear();
        buf.extend(chosen.iter().map(|&i| values[i]));
        let variance = population_variance(&buf);
        let better = match &best {
            None => true,
            Some(b) if same_variance(variance, b.variance) => {
                let imbalance = n_pos.abs_diff(n_neg);
                let best_imbalance = b.n_pos.abs_diff(b.n_neg);
                imbalance < best_imbalance || (imbalance == best_imbalance && n_pos > b.n_pos)
            }
            Some(b) => variance > b.variance,
        };
        if better {
            best = Some(Split {
                chosen,
                variance,
                n_pos,
                n_neg,
            });
        }
    }
    Ok(best.expect("at least one split"))
}

/// Variance-maximizing selection inside one group.
pub fn select_within_group(advantages: &[f64], n: usize) -> Result<SelectionResult> {
    let s = split_search(advantages, n)?;
    Ok(SelectionResult {
        selected: s.chosen.iter().map(|&i| (0, i)).collect(),
        advantages: s.chosen.iter().map(|&i| advantages[i]).collect(),
        achieved_variance: s.variance,
        split: (s.n_pos, s.n_neg),
        degenerate: s.variance == 0.0,
    })
}

/// Variance-maximizing selection over the pooled batch, without
/// renormalizing. Samples from degenerate groups are only used to fill
/// remaining slots when `allow_degenerate_fill` is set.
pub fn select_cross_group(
    batch: &GroupBatch,
    n_total: usize,
    allow_degenerate_fill: bool,
) -> Result<SelectionResult> {
    check_size(n_total, batch.num_samples())?;
    let mut pool = Vec::new();
    let mut values = Vec::new();
    let mut filler = Vec::new();
    for (g, advs) in batch.advantages.iter().enumerate() {
        for (i, &a) in advs.iter().enumerate() {
            if batch.degenerate[g] {
                filler.push((g, i));
            } else {
                pool.push((g, i));
                values.push(a);
            }
        }
    }

    let mut result = SelectionResult {
        selected: Vec::new(),
        advantages: Vec::new(),
        achieved_variance: 0.0,
        split: (0, 0),
        degenerate: true,
    };
    let take = n_total.min(pool.len());
    if take >= 2 {
        let s = split_search(&values, take)?;
        result.selected = s.chosen.iter().map(|&k| pool[k]).collect();
        result.advantages = s.chosen.iter().map(|&k| values[k]).collect();
        result.split = (s.n_pos, s.n_neg);
    } else if take == 1 {
        result.selected.push(pool[0]);
        result.advantages.push(values[0]);
        result.split = (usize::from(values[0] > 0.0), usize::from(values[0] < 0.0));
    }
    if allow_degenerate_fill {
        for &(g, i) in filler.iter().take(n_total - result.selected.len()) {
            result.selected.push((g, i));
            result.advantages.push(batch.advantages[g][i]);
        }
    }
    result.achieved_variance = population_variance(&result.advantages);
    result.degenerate = result.achieved_variance == 0.0;
    Ok(result)
}

/// Reward-variance selection followed by renormalization inside the subset.
pub fn select_pods(rewards: &[f64], n: usize) -> Result<SelectionResult> {
    let s = split_search(rewards, n)?;
    let subset: Vec<f64> = s.chosen.iter().map(|&i| rewards[i]).collect();
    let normalized = normalize_group(&subset)?;
    Ok(SelectionResult {
        selected: s.chosen.iter().map(|&i| (0, i)).collect(),
        advantages: normalized.advantages,
        achieved_variance: s.variance,
        split: (s.n_pos, s.n_neg),
        degenerate: normalized.degenerate,
    })
}

fn with_group(mut r: SelectionResult, group: usize) -> SelectionResult {
    for sel in &mut r.selected {
        sel.0 = group;
    }
    r
}

/// Applies `cfg` to a whole batch. Per-group modes report the mean achieved
/// variance over the groups they selected from and the summed split.
pub fn select_batch(batch: &GroupBatch, cfg: &SelectionConfig) -> Result<SelectionResult> {
    match cfg.mode {
        SelectionMode::None => {
            let mut selected = Vec::new();
            let mut advantages = Vec::new();
            for (g, advs) in batch.advantages.iter().enumerate() {
                for (i, &a) in advs.iter().enumerate() {
                    selected.push((g, i));
                    advantages.push(a);
                }
            }
            let achieved_variance = population_variance(&advantages);
            Ok(SelectionResult {
                split: (
                    advantages.iter().filter(|&&a| a > 0.0).count(),
                    advantages.iter().filter(|&&a| a < 0.0).count(),
                ),
                selected,
                advantages,
                achieved_variance,
                degenerate: achieved_variance == 0.0,
            })
        }
        SelectionMode::CrossGroup => {
            let n_total = (cfg.n_select * batch.num_groups()).min(batch.num_samples());
            select_cross_group(batch, n_total, cfg.allow_degenerate_fill)
        }
        SelectionMode::WithinGroup | SelectionMode::PodsRewardVariance => {
            let mut out = SelectionResult {
                selected: Vec::new(),
                advantages: Vec::new(),
                achieved_variance: 0.0,
                split: (0, 0),
                degenerate: true,
            };
            let mut variances = Vec::new();
            for (g, advs) in batch.advantages.iter().enumerate() {
                let n = cfg.n_select.min(advs.len());
                let r = if cfg.mode == SelectionMode::PodsRewardVariance {
                    let rewards: Vec<f64> = batch.groups[g].iter().map(|r| r.reward).collect();
                    select_pods(&rewards, n)?
                } else if batch.degenerate[g] {
                    if !cfg.allow_degenerate_fill {
                        continue;
                    }
                    SelectionResult {
                        selected: (0..n).map(|i| (0, i)).collect(),
                        advantages: vec![0.0; n],
                        achieved_variance: 0.0,
                        split: (0, 0),
                        degenerate: true,
                    }
                } else {
                    select_within_group(advs, n)?
                };
                let r = with_group(r, g);
                if !r.degenerate {
                    variances.push(r.achieved_variance);
                }
                out.selected.extend(r.selected);
                out.advantages.extend(r.advantages);
                out.split.0 += r.split.0;
                out.split.1 += r.split.1;
            }
            if !variances.is_empty() {
                out.achieved_variance = variances.iter().sum::<f64>() / variances.len() as f64;
                out.degenerate = false;
            }
            Ok(out)
        }
    }
}

pub const ORACLE_MAX_VALUES: usize = 20;

/// Exhaustive search over all `C(M, n)` subsets. Returns the first subset in
/// lexicographic bitmask order that attains the maximum.
pub fn oracle_max_variance_subset(values: &[f64], n: usize) -> Result<(Vec<usize>, f64)> {
    let m = values.len();
    if m > ORACLE_MAX_VALUES {
        return Err(Error::OracleTooLarge {
            got: m,
            max: ORACLE_MAX_VALUES,
        });
    }
    check_size(n, m)?;
    let mut best_mask = 0u32;
    let mut best = f64::NEG_INFINITY;
    let mut buf = Vec::with_capacity(n);
    // Gosper's hack walks every n-bit mask below 2^m in increasing order
    let mut mask: u32 = (1u32 << n) - 1;
    let limit: u32 = 1u32 << m;
    while mask < limit {
        buf.clear();
        buf.extend((0..m).filter(|i| mask >> i & 1 == 1).map(|i| values[i]));
        let v = population_variance(&buf);
        if v > best {
            best = v;
            best_mask = mask;
        }
        let c = mask & mask.wrapping_neg();
        let r = mask + c;
        mask = (((r ^ mask) >> 2) / c) | r;
    }
    let subset = (0..m).filter(|i| best_mask >> i & 1 == 1).collect();
    Ok((subset, best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Rollout;
    use approx::assert_abs_diff_eq;

    fn sorted_values(r: &SelectionResult) -> Vec<f64> {
        let mut v = r.advantages.clone();
        v.sort_by(f64::total_cmp);
        v
    }

    #[test]
    fn within_group_balanced_pair() {
        let r = select_within_group(&[1.0, 1.0, -1.0, -1.0], 2).unwrap();
        assert_eq!(sorted_values(&r), vec![-1.0, 1.0]);
        assert_eq!(r.achieved_variance, 1.0);
        assert_eq!(r.split, (1, 1));
    }

    #[test]
    fn within_group_single_success() {
        let s3 = 3f64.sqrt();
        let a = [s3, -1.0 / s3, -1.0 / s3, -1.0 / s3];
        let r = select_within_group(&a, 2).unwrap();
        assert_eq!(r.advantages[0], s3);
        assert_eq!(r.advantages[1], -1.0 / s3);
        assert_abs_diff_eq!(r.achieved_variance, 4.0 / 3.0, epsilon = 1e-12);
        let (_, oracle) = oracle_max_variance_subset(&a, 2).unwrap();
        assert_abs_diff_eq!(r.achieved_variance, oracle, epsilon = 1e-12);
    }

    #[test]
    fn within_group_full_size_is_whole_group() {
        let a = [1.0, 1.0, -1.0, -1.0];
        let r = select_within_group(&a, 4).unwrap();
        assert_eq!(r.len(), 4);
        assert_abs_diff_eq!(r.achieved_variance, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn size_errors() {
        assert!(select_within_group(&[1.0, -1.0], 1).is_err());
        assert!(select_within_group(&[1.0, -1.0], 3).is_err());
        assert!(oracle_max_variance_subset(&[0.0; 21], 2).is_err());
    }

    #[test]
    fn tie_break_prefers_balance_then_more_positives() {
        // splits (0,3),(1,2),(2,1),(3,0) over {-1,-1,1,1}-like values with
        // n = 3 give 8/9 for both (1,2) and (2,1)
        let r = select_within_group(&[1.0, 1.0, -1.0, -1.0], 3).unwrap();
        assert_eq!(r.split, (2, 1));
        assert_abs_diff_eq!(r.achieved_variance, 8.0 / 9.0, epsilon = 1e-12);
    }

    #[test]
    fn pods_examples() {
        let r = select_pods(&[1.0, 1.0, 1.0, 0.0, 0.0, 0.0], 2).unwrap();
        assert_eq!(r.achieved_variance, 0.25);
        assert_eq!(r.advantages, vec![1.0, -1.0]);
        let d = select_pods(&[1.0; 5], 3).unwrap();
        assert_eq!(d.achieved_variance, 0.0);
        assert!(d.degenerate);
        assert_eq!(d.advantages, vec![0.0; 3]);
    }

    #[test]
    fn oracle_examples() {
        let (s, v) = oracle_max_variance_subset(&[1.0, 1.0, -1.0, -1.0], 2).unwrap();
        assert_eq!(v, 1.0);
        assert_eq!(s.len(), 2);
        let (s, _) = oracle_max_variance_subset(&[0.3, 0.1, 0.2], 3).unwrap();
        assert_eq!(s, vec![0, 1, 2]);
        let std = [-1.341641, -0.447214, 0.447214, 1.341641];
        let (s, v) = oracle_max_variance_subset(&std, 2).unwrap();
        assert_eq!(s, vec![0, 3]);
        assert_abs_diff_eq!(v, 1.8, epsilon = 1e-5);
    }

    fn batch_from_rewards(groups: &[&[f64]]) -> GroupBatch {
        let groups = groups
            .iter()
            .enumerate()
            .map(|(q, rs)| {
                rs.iter()
                    .map(|&r| Rollout {
                        query_id: q as u64,
                        prompt: vec![0],
                        tokens: vec![1],
                        logprobs_old: vec![0.0],
                        entropies: vec![0.0],
                        reward: r,
                    })
                    .collect()
            })
            .collect();
        GroupBatch::new(groups).unwrap()
    }

    #[test]
    fn cross_group_picks_the_informative_group() {
        let b = batch_from_rewards(&[&[0.0; 4], &[1.0, 1.0, 0.0, 0.0]]);
        let r = select_cross_group(&b, 4, false).unwrap();
        let mut sel = r.selected.clone();
        sel.sort();
        assert_eq!(sel, vec![(1, 0), (1, 1), (1, 2), (1, 3)]);
        assert_eq!(r.achieved_variance, 1.0);
        assert!(r.advantages.iter().all(|&a| a != 0.0));
    }

    #[test]
    fn cross_group_single_success_pair() {
        let b = batch_from_rewards(&[&[1.0, 0.0, 0.0, 0.0], &[1.0; 4]]);
        let r = select_cross_group(&b, 2, false).unwrap();
        assert_eq!(r.selected[0], (0, 0));
        assert_eq!(r.selected[1].0, 0);
        assert_abs_diff_eq!(r.achieved_variance, 4.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn cross_group_everything() {
        let b = batch_from_rewards(&[&[1.0, 0.0, 0.0], &[1.0, 1.0, 0.0]]);
        let r = select_cross_group(&b, 6, false).unwrap();
        assert_eq!(r.len(), 6);
    }

    #[test]
    fn cross_group_fill_from_degenerate_groups() {
        let b = batch_from_rewards(&[&[1.0, 0.0], &[0.0, 0.0], &[1.0, 1.0]]);
        let short = select_cross_group(&b, 4, false).unwrap();
        assert_eq!(short.len(), 2);
        let filled = select_cross_group(&b, 4, true).unwrap();
        assert_eq!(filled.len(), 4);
        assert_eq!(&filled.selected[2..], &[(1, 0), (1, 1)]);
    }

    #[test]
    fn batch_modes() {
        let b = batch_from_rewards(&[&[1.0, 0.0, 0.0, 0.0], &[1.0; 4], &[1.0, 1.0, 0.0, 0.0]]);
        let all = select_batch(
            &b,
            &SelectionConfig {
                mode: SelectionMode::None,
                n_select: 4,
                allow_degenerate_fill: false,
            },
        )
        .unwrap();
        assert_eq!(all.len(), 12);
        let within = select_batch(
            &b,
            &SelectionConfig {
                mode: SelectionMode::WithinGroup,
                n_select: 2,
                allow_degenerate_fill: false,
            },
        )
        .unwrap();
        assert_eq!(within.len(), 4);
        assert!(within.selected.iter().all(|&(g, _)| g != 1));
        let pods = select_batch(
            &b,
            &SelectionConfig {
                mode: SelectionMode::PodsRewardVariance,
                n_select: 2,
                allow_degenerate_fill: false,
            },
        )
        .unwrap();
        assert_eq!(pods.len(), 6);
        assert_eq!(&pods.advantages[..2], &[1.0, -1.0]);
        assert_eq!(&pods.advantages[2..4], &[0.0, 0.0]);
    }
}
