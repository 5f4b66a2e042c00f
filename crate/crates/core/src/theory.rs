//! Executable checks of the variance and gradient-norm results.
//!
//! * Subset-variance certification: a standardized set of `M` values should
//!   contain, for every `2 <= N <= M`, a size-`N` subset with population
//!   variance at least 1. Checked by exhaustive enumeration, plus a
//!   constructive chain that removes one element at a time.
//! * Maximum advantage: a binary-reward group of size `G` with a single
//!   deviant sample has `max |A| = sqrt(G - 1)`.
//! * Gradient-norm probe: the objective gradient on a variance-maximized
//!   subset is compared with the full-batch gradient on the same rollouts.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::advantage::{mean, normalize_group, population_variance, GroupBatch};
use crate::error::Result;
use crate::objective::{
    sample_terms, surrogate_and_grad, Algorithm, ObjectiveConfig, PolicySnapshot,
    TokenNormalization,
};
use crate::policy::{PolicyParams, Rollout};
use crate::rng::{stream, Purpose};
use crate::selector::{oracle_max_variance_subset, select_batch, SelectionConfig, SelectionMode};
use crate::tasks::{make_modsum_suite, TaskInstance};
use crate::token_filter::TokenMask;
use crate::trainer::generate_groups;

pub const LEMMA_TOLERANCE: f64 = 1e-9;
pub const MAX_LEMMA_M: usize = 14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaFailure {
    pub values: Vec<f64>,
    pub n: usize,
    pub best_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub trials: usize,
    /// `(set, N)` pairs enumerated.
    pub cases: usize,
    pub failures: Vec<LemmaFailure>,
    /// Largest `1 - best_variance` seen, 0 when every case clears 1.
    pub max_deficit: f64,
    /// Steps of the remove-one chain whose subset fell below variance 1.
    pub constructive_failures: usize,
    pub constructive_steps: usize,
}

impl LemmaReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Shifts and scales to mean 0 and population variance 1.
pub fn standardize(values: &[f64]) -> Option<Vec<f64>> {
    let mu = mean(values);
    let sd = population_variance(values).sqrt();
    if !(sd > 0.0) {
        return None;
    }
    Some(values.iter().map(|x| (x - mu) / sd).collect())
}

/// Best subset variance for every `N` in `[2, M]`, by enumeration.
pub fn enumerate_best_variances(values: &[f64]) -> Result<Vec<(usize, f64)>> {
    (2..=values.len())
        .map(|n| oracle_max_variance_subset(values, n).map(|(_, v)| (n, v)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStep {
    pub n: usize,
    /// Whether the removed element satisfied `(a - mu)^2 <= (n+1) Var - n`.
    pub condition_held: bool,
    pub variance: f64,
}

/// Starting from the full set, repeatedly removes the element closest to the
/// current mean (the element most likely to satisfy the removal condition)
/// and records the variance of each smaller subset.
pub fn constructive_chain(values: &[f64]) -> Vec<ChainStep> {
    let mut set = values.to_vec();
    let mut steps = Vec::new();
    while set.len() > 2 {
        let n = set.len() - 1;
        let mu = mean(&set);
        let var = population_variance(&set);
        let (idx, dev) = set
            .iter()
            .enumerate()
            .map(|(i, &a)| (i, (a - mu) * (a - mu)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty");
        let condition_held = dev <= (n as f64 + 1.0) * var - n as f64 + LEMMA_TOLERANCE;
        set.swap_remove(idx);
        steps.push(ChainStep {
            n,
            condition_held,
            variance: population_variance(&set),
        });
    }
    steps
}

/// Certifies standardized sets directly (used for fixed examples).
pub fn certify_sets(sets: &[Vec<f64>]) -> Result<LemmaReport> {
    let mut report = LemmaReport {
        trials: sets.len(),
        cases: 0,
        failures: Vec::new(),
        max_deficit: 0.0,
        constructive_failures: 0,
        constructive_steps: 0,
    };
    for values in sets {
        for (n, best) in enumerate_best_variances(values)? {
            report.cases += 1;
            report.max_deficit = report.max_deficit.max(1.0 - best);
            if best < 1.0 - LEMMA_TOLERANCE {
                report.failures.push(LemmaFailure {
                    values: values.clone(),
                    n,
                    best_variance: best,
                });
            }
        }
        for step in constructive_chain(values) {
            report.constructive_steps += 1;
            if step.variance < 1.0 - LEMMA_TOLERANCE {
                report.constructive_failures += 1;
            }
        }
    }
    report.max_deficit = report.max_deficit.max(0.0);
    Ok(report)
}

/// Random standardized Gaussian sets with `M` uniform in `[2, m_max]`.
pub fn check_subset_variance(m_max: usize, trials: usize, seed: u64) -> Result<LemmaReport> {
    let m_max = m_max.clamp(2, MAX_LEMMA_M);
    let mut rng = stream(seed, Purpose::Theory, &[1]);
    let mut sets = Vec::with_capacity(trials);
    while sets.len() < trials {
        let m = rng.gen_range(2..=m_max);
        let raw: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        if let Some(s) = standardize(&raw) {
            sets.push(s);
        }
    }
    certify_sets(&sets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxAdvantageCase {
    pub group_size: usize,
    pub max_abs: f64,
    pub max_abs_mirrored: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxAdvantageReport {
    pub cases: Vec<MaxAdvantageCase>,
    pub failures: Vec<usize>,
}

impl MaxAdvantageReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn check_max_advantage(
    group_sizes: impl IntoIterator<Item = usize>,
) -> Result<MaxAdvantageReport> {
    let mut cases = Vec::new();
    let mut failures = Vec::new();
    for g in group_sizes {
        let mut one = vec![0.0; g];
        one[0] = 1.0;
        let mut mirrored = vec![1.0; g];
        mirrored[0] = 0.0;
        let max_abs = |r: &[f64]| -> Result<f64> {
            Ok(normalize_group(r)?
                .advantages
                .iter()
                .fold(0.0f64, |m, a| m.max(a.abs())))
        };
        let case = MaxAdvantageCase {
            group_size: g,
            max_abs: max_abs(&one)?,
            max_abs_mirrored: max_abs(&mirrored)?,
        };
        let bound = ((g - 1) as f64).sqrt();
        if (case.max_abs - bound).abs() > 1e-9 || (case.max_abs_mirrored - bound).abs() > 1e-9 {
            failures.push(g);
        }
        cases.push(case);
    }
    Ok(MaxAdvantageReport { cases, failures })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub full_norm: f64,
    pub subset_norm: f64,
    /// Mean achieved variance of the per-group subsets.
    pub var_subset: f64,
}

fn full_mask_norm(
    snapshot: &PolicySnapshot,
    batch: &GroupBatch,
    selection: &crate::selector::SelectionResult,
    algorithm: Algorithm,
) -> f64 {
    let lengths = selection
        .selected
        .iter()
        .map(|&(g, i)| batch.rollout(g, i).len());
    let mask = TokenMask::full(lengths);
    let terms = sample_terms(batch, selection, &mask);
    let cfg = ObjectiveConfig {
        algorithm,
        clip_eps: 0.2,
        kl_coeff: 0.0,
        normalization: TokenNormalization::PerSample,
    };
    surrogate_and_grad(snapshot, &terms, &cfg)
        .diagnostics
        .grad_norm
}

/// Gradient norms of the full-batch objective and of the within-group
/// variance-maximized subset, at `policy` with `theta_old = theta`.
pub fn grad_norm_probe(
    policy: &PolicyParams,
    batch: &GroupBatch,
    n_select: usize,
    algorithm: Algorithm,
) -> Result<ProbeResult> {
    let snapshot = PolicySnapshot::new(policy.clone());
    let select = |mode, n| {
        select_batch(
            batch,
            &SelectionConfig {
                mode,
                n_select: n,
                allow_degenerate_fill: false,
            },
        )
    };
    let full = select(SelectionMode::None, 0)?;
    let subset = select(SelectionMode::WithinGroup, n_select)?;
    Ok(ProbeResult {
        full_norm: full_mask_norm(&snapshot, batch, &full, algorithm),
        subset_norm: full_mask_norm(&snapshot, batch, &subset, algorithm),
        var_subset: subset.achieved_variance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probes: Vec<ProbeResult>,
    pub mean_full: f64,
    pub mean_subset: f64,
    /// Spearman correlation of subset norm with `Var(A')^(1/3)`.
    pub spearman: f64,
}

impl ProbeReport {
    /// Fails only when the ordering reverses.
    pub fn passed(&self) -> bool {
        self.mean_subset > self.mean_full
    }
}

/// Average ranks, ties sharing the mean rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let rx = ranks(x);
    let ry = ranks(y);
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// Settings for a batch of random probes on the modular-sum task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSetup {
    pub modulus: usize,
    pub vocab_size: usize,
    pub context_window: usize,
    pub max_len: usize,
    pub group_size: usize,
    pub batch_groups: usize,
    pub n_select: usize,
    /// Logits are drawn uniformly from `[-logit_scale, logit_scale]`.
    pub logit_scale: f64,
    pub algorithm: Algorithm,
}

impl Default for ProbeSetup {
    fn default() -> Self {
        Self {
            modulus: 10,
            vocab_size: 16,
            context_window: 2,
            max_len: 16,
            group_size: 8,
            batch_groups: 8,
            n_select: 2,
            logit_scale: 1.0,
            algorithm: Algorithm::Grpo,
        }
    }
}

/// Runs `n_probes` probes, each on a fresh random policy and batch. Batches
/// with no informative group are redrawn.
pub fn run_probes(n_probes: usize, seed: u64, setup: &ProbeSetup) -> Result<ProbeReport> {
    let suite = make_modsum_suite(
        setup.modulus,
        setup.vocab_size,
        setup.batch_groups * 4,
        0,
        seed,
    )?;
    let mut probes = Vec::with_capacity(n_probes);
    let mut attempt = 0u64;
    while probes.len() < n_probes {
        attempt += 1;
        let mut rng = stream(seed, Purpose::Probe, &[attempt]);
        let policy = PolicyParams::random(
            setup.vocab_size,
            setup.context_window,
            setup.max_len,
            setup.logit_scale,
            &mut rng,
        )?;
        let picks = rand::seq::index::sample(&mut rng, suite.train.len(), setup.batch_groups);
        let instances: Vec<&TaskInstance> = picks.iter().map(|i| &suite.train[i]).collect();
        let groups: Vec<Vec<Rollout>> = generate_groups(
            &policy,
            &instances,
            setup.group_size,
            seed,
            Purpose::Probe,
            attempt,
        )?;
        let batch = GroupBatch::new(groups)?;
        if batch.degenerate.iter().all(|&d| d) {
            continue;
        }
        probes.push(grad_norm_probe(
            &policy,
            &batch,
            setup.n_select,
            setup.algorithm,
        )?);
    }
    let full: Vec<f64> = probes.iter().map(|p| p.full_norm).collect();
    let subset: Vec<f64> = probes.iter().map(|p| p.subset_norm).collect();
    let var_cbrt: Vec<f64> = probes.iter().map(|p| p.var_subset.cbrt()).collect();
    Ok(ProbeReport {
        mean_full: mean(&full),
        mean_subset: mean(&subset),
        spearman: spearman(&subset, &var_cbrt),
        probes,
    })
}
