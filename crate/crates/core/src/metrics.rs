//! Training diagnostics, pass@k evaluation and the JSONL metrics log.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::advantage::GroupBatch;
use crate::error::{Error, Result};
use crate::selector::SelectionResult;
use crate::token_filter::TokenMask;

/// One training step. Serialized as a single JSON line with stable keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub grad_norm: f64,
    /// Fraction of groups with non-zero advantages.
    pub sur: f64,
    /// Fraction of selected samples with non-zero advantage.
    pub sur_selected: f64,
    pub kl: f64,
    pub mean_entropy: f64,
    pub token_consumption_ratio: f64,
    pub n_s: usize,
    pub k: f64,
    pub train_reward_mean: f64,
    pub eval: Option<BTreeMap<String, f64>>,
}

impl MetricsRecord {
    pub fn is_finite(&self) -> bool {
        [
            self.grad_norm,
            self.sur,
            self.sur_selected,
            self.kl,
            self.mean_entropy,
            self.token_consumption_ratio,
            self.k,
            self.train_reward_mean,
        ]
        .iter()
        .chain(self.eval.iter().flat_map(|m| m.values()))
        .all(|x| x.is_finite())
    }

    pub fn to_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_line(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line)?)
    }

    pub fn eval_value(&self, key: &str) -> Option<f64> {
        self.eval.as_ref().and_then(|m| m.get(key).copied())
    }
}

/// Group-level SUR without a selection, sample-level SUR with one.
pub fn sample_usefulness_rate(
    batch: &GroupBatch,
    selection: Option<&SelectionResult>,
) -> Result<f64> {
    if batch.num_groups() == 0 {
        return Err(Error::Empty("batch"));
    }
    Ok(match selection {
        None => {
            let useful = batch
                .advantages
                .iter()
                .filter(|a| a.iter().any(|&x| x != 0.0))
                .count();
            useful as f64 / batch.num_groups() as f64
        }
        Some(sel) if sel.is_empty() => 0.0,
        Some(sel) => {
            let useful = sel
                .selected
                .iter()
                .filter(|&&(g, i)| batch.advantages[g][i] != 0.0)
                .count();
            useful as f64 / sel.len() as f64
        }
    })
}

/// Exact binomial coefficient, `None` on overflow.
fn binomial(n: usize, k: usize) -> Option<u128> {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1) stays integral at every step
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

/// Unbiased pass@k: `1 - C(n-c, k) / C(n, k)`.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if c > n || k == 0 || k > n {
        return Err(Error::PassAtK { n, c, k });
    }
    if n - c < k {
        return Ok(1.0);
    }
    if let (Some(total), Some(miss)) = (binomial(n, k), binomial(n - c, k)) {
        return Ok((total - miss) as f64 / total as f64);
    }
    // 1 - prod_{i=n-c+1}^{n} (1 - k / i)
    let prod: f64 = (n - c + 1..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - prod)
}

pub fn avg_at_n(rewards: &[f64]) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::Empty("rewards"));
    }
    Ok(rewards.iter().sum::<f64>() / rewards.len() as f64)
}

/// Trained tokens over all generated tokens in the batch.
pub fn token_consumption_ratio(mask: &TokenMask, batch: &GroupBatch) -> f64 {
    let total = batch.total_tokens();
    if total == 0 {
        return 0.0;
    }
    mask.kept_count as f64 / total as f64
}

/// `s_0 = x_0`, `s_t = alpha s_{t-1} + (1 - alpha) x_t`.
pub fn ema(series: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::EmaAlpha(alpha));
    }
    let Some(&first) = series.first() else {
        return Err(Error::Empty("series"));
    };
    let mut out = Vec::with_capacity(series.len());
    let mut s = first;
    out.push(s);
    for &x in &series[1..] {
        s = alpha * s + (1.0 - alpha) * x;
        out.push(s);
    }
    Ok(out)
}

/// Per-instance correctness counts summarized as `avg@n` and `pass@k`.
pub fn summarize_eval(correct: &[usize], n: usize) -> Result<BTreeMap<String, f64>> {
    if correct.is_empty() {
        return Err(Error::Empty("eval instances"));
    }
    let m = correct.len() as f64;
    let mut out = BTreeMap::new();
    let avg = correct.iter().map(|&c| c as f64 / n as f64).sum::<f64>() / m;
    out.insert(format!("avg@{n}"), avg);
    for k in [1, 8, 16] {
        if k <= n {
            let mut s = 0.0;
            for &c in correct {
                s += pass_at_k(n, c, k)?;
            }
            out.insert(format!("pass@{k}"), s / m);
        }
    }
    Ok(out)
}

/// Ordered JSONL writer.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        writeln!(self.out, "{}", record.to_line()?)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(MetricsRecord::from_line(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Rollout;
    use crate::selector::select_cross_group;
    use approx::assert_abs_diff_eq;

    fn batch(groups: &[&[f64]], len: usize) -> GroupBatch {
        GroupBatch::new(
            groups
                .iter()
                .map(|rs| {
                    rs.iter()
                        .map(|&r| Rollout {
                            query_id: 0,
                            prompt: vec![],
                            tokens: vec![0; len],
                            logprobs_old: vec![0.0; len],
                            entropies: vec![0.5; len],
                            reward: r,
                        })
                        .collect()
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn sur_examples() {
        let useful: &[f64] = &[1.0, 0.0, 0.0, 0.0];
        let dead: &[f64] = &[0.0; 4];
        let mut groups = vec![useful; 7];
        groups.extend(vec![dead; 3]);
        let b = batch(&groups, 3);
        assert_abs_diff_eq!(
            sample_usefulness_rate(&b, None).unwrap(),
            0.7,
            epsilon = 1e-15
        );
        let sel = select_cross_group(&b, 10, false).unwrap();
        assert_eq!(sample_usefulness_rate(&b, Some(&sel)).unwrap(), 1.0);
        let all_dead = batch(&[dead, dead], 3);
        assert_eq!(sample_usefulness_rate(&all_dead, None).unwrap(), 0.0);
    }

    #[test]
    fn pass_at_k_examples() {
        assert_eq!(pass_at_k(32, 32, 1).unwrap(), 1.0);
        assert_eq!(pass_at_k(32, 16, 1).unwrap(), 0.5);
        assert_abs_diff_eq!(pass_at_k(4, 2, 2).unwrap(), 5.0 / 6.0, epsilon = 1e-15);
        assert_eq!(pass_at_k(10, 0, 5).unwrap(), 0.0);
        assert!(pass_at_k(4, 5, 1).is_err());
        assert!(pass_at_k(4, 1, 0).is_err());
        assert!(pass_at_k(4, 1, 5).is_err());
    }

    #[test]
    fn pass_at_k_large_n_falls_back_to_products() {
        let exact_path = pass_at_k(100, 3, 10).unwrap();
        let prod: f64 = (98..=100).map(|i| 1.0 - 10.0 / i as f64).product();
        assert_abs_diff_eq!(exact_path, 1.0 - prod, epsilon = 1e-12);
        let big = pass_at_k(400, 7, 200).unwrap();
        assert!(big > 0.99 && big <= 1.0);
    }

    #[test]
    fn avg_examples() {
        let mut r = vec![0.0; 32];
        r[..8].fill(1.0);
        assert_eq!(avg_at_n(&r).unwrap(), 0.25);
        assert_eq!(avg_at_n(&[0.0; 32]).unwrap(), 0.0);
        assert_eq!(avg_at_n(&r).unwrap(), pass_at_k(32, 8, 1).unwrap());
        assert!(avg_at_n(&[]).is_err());
    }

    #[test]
    fn consumption_examples() {
        let b = batch(&[&[1.0, 0.0, 0.0, 0.0], &[1.0, 1.0, 0.0, 0.0]], 10);
        let full = TokenMask::full(b.rollouts().map(Rollout::len));
        assert_eq!(token_consumption_ratio(&full, &b), 1.0);
        // 2 of 8 samples, 20% of their tokens
        let part = TokenMask {
            masks: vec![
                vec![true, true, false, false, false, false, false, false, false, false];
                2
            ],
            kept_count: 4,
            budget: 4,
        };
        assert_abs_diff_eq!(token_consumption_ratio(&part, &b), 0.05, epsilon = 1e-15);
        let empty = TokenMask {
            masks: vec![],
            kept_count: 0,
            budget: 0,
        };
        assert_eq!(token_consumption_ratio(&empty, &b), 0.0);
    }

    #[test]
    fn ema_examples() {
        assert_eq!(ema(&[2.5; 5], 0.9).unwrap(), vec![2.5; 5]);
        assert_eq!(ema(&[1.0, 5.0, -2.0], 0.0).unwrap(), vec![1.0, 5.0, -2.0]);
        let s = ema(&[0.0, 1.0], 0.9).unwrap();
        assert_eq!(s[0], 0.0);
        assert_abs_diff_eq!(s[1], 0.1, epsilon = 1e-15);
        assert!(ema(&[1.0], 1.0).is_err());
        assert!(ema(&[], 0.5).is_err());
    }

    #[test]
    fn record_lines_round_trip() {
        let mut eval = BTreeMap::new();
        eval.insert("avg@32".to_string(), 0.1 + 0.2);
        let r = MetricsRecord {
            step: 3,
            grad_norm: 1.0 / 3.0,
            sur: 0.7,
            sur_selected: 1.0,
            kl: 1e-17,
            mean_entropy: 2.772588722239781,
            token_consumption_ratio: 0.05,
            n_s: 2,
            k: 0.05,
            train_reward_mean: 0.09375,
            eval: Some(eval),
        };
        let line = r.to_line().unwrap();
        assert!(!line.contains('\n'));
        let back = MetricsRecord::from_line(&line).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_line().unwrap(), line);
        let none = MetricsRecord { eval: None, ..r };
        assert!(none.to_line().unwrap().contains("\"eval\":null"));
    }
}
