//! Training loop: rollouts, advantages, down-sampling, update.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage::GroupBatch;
use crate::error::{Error, Result};
use crate::metrics::{
    sample_usefulness_rate, summarize_eval, token_consumption_ratio, MetricsRecord,
};
use crate::objective::{
    kl_from_logits, sample_terms, surrogate_and_grad, Algorithm, ObjectiveConfig, PolicySnapshot,
    TokenNormalization,
};
use crate::policy::{PolicyParams, Rollout};
use crate::rng::{stream, Purpose};
use crate::schedule::ScheduleConfig;
use crate::selector::{select_batch, SelectionConfig, SelectionMode, SelectionResult};
use crate::tasks::{score, TaskInstance, TaskSuite};
use crate::token_filter::{score_tokens, top_k_mask, TokenMask};

/// Which down-sampling pipeline runs on top of the base algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Full batch, every token.
    Off,
    /// Within-group advantage-variance selection.
    D1s,
    /// Cross-group advantage-variance selection.
    D1sC,
    /// Cross-group selection plus token filter at fixed `(n_init, k_init)`.
    D2s,
    /// Cross-group selection plus token filter, scheduled.
    D3s,
    /// Within-group selection plus token filter, scheduled.
    D3sI,
    /// Reward-variance selection with renormalization inside the subset.
    Pods,
}

impl Variant {
    pub fn selection_mode(self) -> SelectionMode {
        match self {
            Variant::Off => SelectionMode::None,
            Variant::D1s | Variant::D3sI => SelectionMode::WithinGroup,
            Variant::D1sC | Variant::D2s | Variant::D3s => SelectionMode::CrossGroup,
            Variant::Pods => SelectionMode::PodsRewardVariance,
        }
    }

    pub fn filters_tokens(self) -> bool {
        matches!(self, Variant::D2s | Variant::D3s | Variant::D3sI)
    }

    pub fn scheduled(self) -> bool {
        matches!(self, Variant::D3s | Variant::D3sI)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn adam_default() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub algorithm: Algorithm,
    pub variant: Variant,
    pub group_size: usize,
    pub batch_groups: usize,
    pub clip_eps: f64,
    pub kl_coeff: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerConfig,
    pub inner_epochs: usize,
    pub normalization: TokenNormalization,
    pub allow_degenerate_fill: bool,
    pub schedule: ScheduleConfig,
    pub seed: u64,
}

impl TrainerConfig {
    pub fn total_steps(&self) -> usize {
        self.schedule.total_steps
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            algorithm: self.algorithm,
            clip_eps: self.clip_eps,
            kl_coeff: self.kl_coeff,
            normalization: self.normalization,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::config("group_size", "must be at least 2"));
        }
        if self.batch_groups == 0 {
            return Err(Error::config("batch_groups", "must be positive"));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::config("clip_eps", "must lie in (0, 1)"));
        }
        if !(self.kl_coeff >= 0.0 && self.kl_coeff.is_finite()) {
            return Err(Error::config("kl_coeff", "must be a finite value >= 0"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.inner_epochs == 0 {
            return Err(Error::config("inner_epochs", "must be at least 1"));
        }
        self.schedule.validate()?;
        if self.schedule.n_final > self.group_size {
            return Err(Error::config("n_final", "cannot exceed group_size"));
        }
        Ok(())
    }

    /// `(n_s, k)` used at `step`.
    pub fn downsampling_at(&self, step: usize) -> Result<(usize, f64)> {
        if self.variant == Variant::Off {
            return Ok((self.group_size, 1.0));
        }
        let (n, k) = if self.variant.scheduled() {
            self.schedule.at_progress(step)?
        } else {
            (self.schedule.n_init, self.schedule.k_init)
        };
        Ok((
            n,
            if self.variant.filters_tokens() {
                k
            } else {
                1.0
            },
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum OptimizerState {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        m: Vec<f64>,
        v: Vec<f64>,
        t: i32,
    },
}

impl OptimizerState {
    fn new(cfg: OptimizerConfig, n: usize) -> Self {
        match cfg {
            OptimizerConfig::Sgd => OptimizerState::Sgd,
            OptimizerConfig::Adam { beta1, beta2, eps } => OptimizerState::Adam {
                beta1,
                beta2,
                eps,
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            },
        }
    }

    /// Gradient ascent on `params`.
    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self {
            OptimizerState::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p += lr * g;
                }
            }
            OptimizerState::Adam {
                beta1,
                beta2,
                eps,
                m,
                v,
                t,
            } => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                for i in 0..params.len() {
                    let g = grad[i];
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * g;
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * g * g;
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    params[i] += lr * m_hat / (v_hat.sqrt() + *eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub snapshot: PolicySnapshot,
    pub step: usize,
    optimizer: OptimizerState,
}

impl TrainState {
    pub fn new(initial: PolicyParams, cfg: &TrainerConfig) -> Self {
        let n = initial.logits().len();
        Self {
            snapshot: PolicySnapshot::new(initial),
            step: 0,
            optimizer: OptimizerState::new(cfg.optimizer, n),
        }
    }

    pub fn params(&self) -> &PolicyParams {
        &self.snapshot.current
    }
}

/// Everything a step produced beyond its metrics row.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub record: MetricsRecord,
    pub batch: GroupBatch,
    pub selection: SelectionResult,
    pub mask: TokenMask,
    /// Tokens in the selected samples.
    pub selected_tokens: usize,
    pub clip_fraction: f64,
    pub warnings: Vec<String>,
}

/// Samples `batch_groups` training queries for `step`.
pub fn pick_queries(n_train: usize, batch_groups: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut rng = stream(seed, Purpose::QueryPick, &[step as u64]);
    if batch_groups <= n_train {
        index::sample(&mut rng, n_train, batch_groups).into_vec()
    } else {
        (0..batch_groups)
            .map(|_| rng.gen_range(0..n_train))
            .collect()
    }
}

/// `group_size` scored rollouts per instance, each from its own stream.
pub fn generate_groups(
    params: &PolicyParams,
    instances: &[&TaskInstance],
    group_size: usize,
    seed: u64,
    purpose: Purpose,
    tag: u64,
) -> Result<Vec<Vec<Rollout>>> {
    instances
        .par_iter()
        .map(|inst| {
            (0..group_size)
                .map(|i| {
                    let mut rng = stream(seed, purpose, &[tag, inst.query_id, i as u64]);
                    let mut r = params.sample_rollout(inst.query_id, &inst.prompt, &mut rng);
                    score(inst, &mut r)?;
                    Ok(r)
                })
                .collect()
        })
        .collect()
}

/// Runs one optimizer step of the configured variant.
pub fn train_step(
    state: &mut TrainState,
    suite: &TaskSuite,
    cfg: &TrainerConfig,
) -> Result<StepOutcome> {
    if suite.train.is_empty() {
        return Err(Error::Empty("training instances"));
    }
    let step = state.step;
    state.snapshot.refresh_old();

    let picks = pick_queries(suite.train.len(), cfg.batch_groups, cfg.seed, step);
    let instances: Vec<&TaskInstance> = picks.iter().map(|&i| &suite.train[i]).collect();
    let groups = generate_groups(
        &state.snapshot.old,
        &instances,
        cfg.group_size,
        cfg.seed,
        Purpose::TrainRollout,
        step as u64,
    )?;
    let batch = GroupBatch::new(groups)?;

    let generated = batch.total_tokens();
    let mean_entropy = batch
        .rollouts()
        .flat_map(|r| r.entropies.iter())
        .sum::<f64>()
        / generated as f64;
    let kl = {
        let p = &state.snapshot.old;
        let q = &state.snapshot.reference;
        batch
            .rollouts()
            .flat_map(|r| r.context_ids(p))
            .map(|c| kl_from_logits(p.row(c), q.row(c)))
            .sum::<f64>()
            / generated as f64
    };
    let train_reward_mean =
        batch.rollouts().map(|r| r.reward).sum::<f64>() / batch.num_samples() as f64;

    let (n_s, k) = cfg.downsampling_at(step)?;
    let selection = select_batch(
        &batch,
        &SelectionConfig {
            mode: cfg.variant.selection_mode(),
            n_select: n_s,
            allow_degenerate_fill: cfg.allow_degenerate_fill,
        },
    )?;
    let selected: Vec<&Rollout> = selection
        .selected
        .iter()
        .map(|&(g, i)| batch.rollout(g, i))
        .collect();
    let selected_tokens: usize = selected.iter().map(|r| r.len()).sum();
    let mask = if selected_tokens == 0 {
        TokenMask {
            masks: selected.iter().map(|_| Vec::new()).collect(),
            kept_count: 0,
            budget: 0,
        }
    } else if cfg.variant.filters_tokens() {
        let scores = score_tokens(&selected, &selection.advantages)?;
        top_k_mask(&scores, k)?
    } else {
        TokenMask::full(selected.iter().map(|r| r.len()))
    };

    let sur = sample_usefulness_rate(&batch, None)?;
    let sur_selected = sample_usefulness_rate(&batch, Some(&selection))?;
    let all_degenerate = batch.degenerate.iter().all(|&d| d);

    let terms = sample_terms(&batch, &selection, &mask);
    let obj_cfg = cfg.objective();
    let mut grad_norm = 0.0;
    let mut clip_fraction = 0.0;
    let mut warnings = Vec::new();
    if all_degenerate {
        warnings.push("all groups degenerate; no update".to_string());
    } else {
        for epoch in 0..cfg.inner_epochs {
            let out = surrogate_and_grad(&state.snapshot, &terms, &obj_cfg);
            if epoch == 0 {
                grad_norm = out.diagnostics.grad_norm;
                clip_fraction = out.diagnostics.clip_fraction;
                warnings.extend(out.diagnostics.warnings);
            }
            if !out.grad.iter().all(|g| g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient at step {step}")));
            }
            state.optimizer.step(
                state.snapshot.current.logits_mut(),
                &out.grad,
                cfg.learning_rate,
            );
        }
    }
    if !state.snapshot.current.is_finite() {
        return Err(Error::NonFinite(format!("policy logits after step {step}")));
    }

    let record = MetricsRecord {
        step,
        grad_norm,
        sur,
        sur_selected,
        kl,
        mean_entropy,
        token_consumption_ratio: token_consumption_ratio(&mask, &batch),
        n_s,
        k,
        train_reward_mean,
        eval: None,
    };
    if !record.is_finite() {
        return Err(Error::NonFinite(format!("metrics at step {step}")));
    }
    state.step += 1;
    Ok(StepOutcome {
        record,
        batch,
        selection,
        mask,
        selected_tokens,
        clip_fraction,
        warnings,
    })
}

/// `samples` rollouts per instance; returns `avg@samples` and pass@{1,8,16}.
pub fn evaluate_policy(
    params: &PolicyParams,
    instances: &[TaskInstance],
    samples: usize,
    seed: u64,
    tag: u64,
) -> Result<BTreeMap<String, f64>> {
    let refs: Vec<&TaskInstance> = instances.iter().collect();
    let groups = generate_groups(params, &refs, samples, seed, Purpose::EvalRollout, tag)?;
    let correct: Vec<usize> = groups
        .iter()
        .map(|g| g.iter().filter(|r| r.reward > 0.0).count())
        .collect();
    summarize_eval(&correct, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::make_modsum_suite;

    pub(crate) fn desk_config(variant: Variant) -> TrainerConfig {
        TrainerConfig {
            algorithm: Algorithm::Grpo,
            variant,
            group_size: 8,
            batch_groups: 8,
            clip_eps: 0.2,
            kl_coeff: 0.0,
            learning_rate: 1e-2,
            optimizer: OptimizerConfig::adam_default(),
            inner_epochs: 1,
            normalization: TokenNormalization::PerSample,
            allow_degenerate_fill: false,
            schedule: ScheduleConfig {
                n_init: 2,
                n_final: 8,
                k_init: 0.05,
                k_final: 0.2,
                total_steps: 20,
            },
            seed: 5,
        }
    }

    fn suite() -> TaskSuite {
        make_modsum_suite(10, 16, 40, 10, 1).unwrap()
    }

    #[test]
    fn variant_flags() {
        assert_eq!(Variant::D3sI.selection_mode(), SelectionMode::WithinGroup);
        assert!(Variant::D2s.filters_tokens() && !Variant::D2s.scheduled());
        assert!(!Variant::D1sC.filters_tokens());
        let c = desk_config(Variant::D2s);
        assert_eq!(c.downsampling_at(10).unwrap(), (2, 0.05));
        let c = desk_config(Variant::D3s);
        assert_eq!(c.downsampling_at(10).unwrap(), (5, 0.125));
        let c = desk_config(Variant::Off);
        assert_eq!(c.downsampling_at(10).unwrap(), (8, 1.0));
        let c = desk_config(Variant::D1s);
        assert_eq!(c.downsampling_at(10).unwrap(), (2, 1.0));
    }

    #[test]
    fn off_variant_trains_every_token() {
        let cfg = desk_config(Variant::Off);
        let s = suite();
        let mut st = TrainState::new(PolicyParams::zeros(16, 2, 16).unwrap(), &cfg);
        let out = train_step(&mut st, &s, &cfg).unwrap();
        assert_eq!(out.record.token_consumption_ratio, 1.0);
        assert_eq!(out.selection.len(), 64);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn steps_are_deterministic() {
        let cfg = desk_config(Variant::D3s);
        let s = suite();
        let run = || {
            let mut st = TrainState::new(PolicyParams::zeros(16, 2, 16).unwrap(), &cfg);
            (0..5)
                .map(|_| train_step(&mut st, &s, &cfg).unwrap().record)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn all_degenerate_step_changes_nothing() {
        let mut cfg = desk_config(Variant::Off);
        cfg.kl_coeff = 0.04;
        // modulus 2 answers with a policy that can only emit the end token
        let s = make_modsum_suite(2, 3, 4, 1, 0).unwrap();
        let mut p = PolicyParams::zeros(3, 2, 4).unwrap();
        for ctx in 0..p.num_contexts() {
            p.row_mut(ctx)[2] = 1e3;
        }
        let mut st = TrainState::new(p.clone(), &cfg);
        let out = train_step(&mut st, &s, &cfg).unwrap();
        assert_eq!(out.record.sur, 0.0);
        assert_eq!(out.record.grad_norm, 0.0);
        assert_eq!(st.params(), &p);
    }

    #[test]
    fn sgd_and_adam_ascend() {
        let mut params = vec![0.0, 0.0];
        let mut sgd = OptimizerState::new(OptimizerConfig::Sgd, 2);
        sgd.step(&mut params, &[1.0, -2.0], 0.1);
        assert_eq!(params, vec![0.1, -0.2]);
        let mut params = vec![0.0, 0.0];
        let mut adam = OptimizerState::new(OptimizerConfig::adam_default(), 2);
        adam.step(&mut params, &[3.0, -0.5], 0.01);
        // the first bias-corrected Adam step has magnitude lr
        assert!((params[0] - 0.01).abs() < 1e-8);
        assert!((params[1] + 0.01).abs() < 1e-8);
    }

    #[test]
    fn eval_summary_keys() {
        let s = suite();
        let m =
            evaluate_policy(&PolicyParams::zeros(16, 2, 16).unwrap(), &s.eval, 32, 1, 0).unwrap();
        let keys: Vec<_> = m.keys().cloned().collect();
        assert_eq!(keys, vec!["avg@32", "pass@1", "pass@16", "pass@8"]);
        assert!((m["avg@32"] - m["pass@1"]).abs() < 1e-12);
    }
}
