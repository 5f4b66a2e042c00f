//! Flat JSON run configuration with `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::objective::{Algorithm, TokenNormalization};
use crate::policy::PolicyParams;
use crate::schedule::ScheduleConfig;
use crate::tasks::{make_copy_suite, make_modsum_suite, TaskSuite};
use crate::trainer::{OptimizerConfig, TrainerConfig, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteKind {
    Modsum,
    Copy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Every key is optional in the file; missing keys take the desk-scale
/// defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub suite: SuiteKind,
    pub modulus: usize,
    pub copy_alphabet: usize,
    pub copy_prompt_len: usize,
    pub copy_k: usize,
    pub vocab_size: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub context_window: usize,
    pub max_len: usize,

    pub algorithm: Algorithm,
    pub variant: Variant,
    pub group_size: usize,
    pub batch_groups: usize,
    pub clip_eps: f64,
    pub kl_coeff: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub inner_epochs: usize,
    pub token_normalization: TokenNormalization,
    pub allow_degenerate_fill: bool,

    pub n_init: usize,
    pub n_final: usize,
    pub k_init: f64,
    pub k_final: f64,
    pub total_steps: usize,

    pub eval_every: usize,
    pub eval_samples: usize,
    pub seed: u64,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            suite: SuiteKind::Modsum,
            modulus: 10,
            copy_alphabet: 8,
            copy_prompt_len: 2,
            copy_k: 1,
            vocab_size: 16,
            n_train: 100,
            n_eval: 100,
            context_window: 2,
            max_len: 16,

            algorithm: Algorithm::Grpo,
            variant: Variant::D3s,
            group_size: 8,
            batch_groups: 8,
            clip_eps: 0.2,
            kl_coeff: 0.0,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            inner_epochs: 1,
            token_normalization: TokenNormalization::PerSample,
            allow_degenerate_fill: false,

            n_init: 2,
            n_final: 8,
            k_init: 0.05,
            k_final: 0.20,
            total_steps: 300,

            eval_every: 10,
            eval_samples: 32,
            seed: 0,
            out_dir: "runs".to_string(),
        }
    }
}

impl RunConfig {
    pub fn trainer(&self) -> TrainerConfig {
        TrainerConfig {
            algorithm: self.algorithm,
            variant: self.variant,
            group_size: self.group_size,
            batch_groups: self.batch_groups,
            clip_eps: self.clip_eps,
            kl_coeff: self.kl_coeff,
            learning_rate: self.learning_rate,
            optimizer: match self.optimizer {
                OptimizerKind::Sgd => OptimizerConfig::Sgd,
                OptimizerKind::Adam => OptimizerConfig::Adam {
                    beta1: self.adam_beta1,
                    beta2: self.adam_beta2,
                    eps: self.adam_eps,
                },
            },
            inner_epochs: self.inner_epochs,
            normalization: self.token_normalization,
            allow_degenerate_fill: self.allow_degenerate_fill,
            schedule: ScheduleConfig {
                n_init: self.n_init,
                n_final: self.n_final,
                k_init: self.k_init,
                k_final: self.k_final,
                total_steps: self.total_steps,
            },
            seed: self.seed,
        }
    }

    pub fn suite(&self) -> Result<TaskSuite> {
        match self.suite {
            SuiteKind::Modsum => make_modsum_suite(
                self.modulus,
                self.vocab_size,
                self.n_train,
                self.n_eval,
                self.seed,
            ),
            SuiteKind::Copy => make_copy_suite(
                self.copy_alphabet,
                self.copy_prompt_len,
                self.copy_k,
                self.vocab_size,
                self.n_train,
                self.n_eval,
                self.seed,
            ),
        }
    }

    pub fn initial_policy(&self) -> Result<PolicyParams> {
        PolicyParams::zeros(self.vocab_size, self.context_window, self.max_len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be at least 1"));
        }
        if self.eval_samples == 0 {
            return Err(Error::config("eval_samples", "must be at least 1"));
        }
        if self.n_train == 0 {
            return Err(Error::config("n_train", "must be at least 1"));
        }
        if self.n_eval == 0 {
            return Err(Error::config("n_eval", "must be at least 1"));
        }
        if self.out_dir.is_empty() {
            return Err(Error::config("out_dir", "must not be empty"));
        }
        if self.optimizer == OptimizerKind::Adam {
            if !(0.0..1.0).contains(&self.adam_beta1) {
                return Err(Error::config("adam_beta1", "must lie in [0, 1)"));
            }
            if !(0.0..1.0).contains(&self.adam_beta2) {
                return Err(Error::config("adam_beta2", "must lie in [0, 1)"));
            }
            if !(self.adam_eps > 0.0) {
                return Err(Error::config("adam_eps", "must be positive"));
            }
        }
        self.trainer().validate()?;
        self.initial_policy()?;
        self.suite()?;
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Parses `key=value`, reading `value` as JSON when it parses and as a bare
/// string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
    let key = key.trim();
    let value =
        serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let obj = doc
        .as_object_mut()
        .ok_or_else(|| Error::config("<root>", "config must be a JSON object"))?;
    obj.insert(key.to_string(), value);
    Ok(())
}

/// Reads a config file (or the defaults when `path` is `None`) and applies
/// overrides in order.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut doc = match path {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => serde_json::to_value(RunConfig::default())?,
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: RunConfig = serde_json::from_value(doc)?;
    cfg.validate()?;
    Ok(cfg)
}

/// 1-based line of the first occurrence of `"key"` in `text`.
pub fn locate_key(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines()
        .position(|l| l.contains(&needle))
        .map(|i| i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn echo_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.variant = Variant::D3sI;
        cfg.k_init = 0.1 + 0.2 - 0.25;
        let echo = cfg.to_json_pretty().unwrap();
        let back = RunConfig::from_json_str(&echo).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json_pretty().unwrap(), echo);
    }

    #[test]
    fn overrides_apply_in_order() {
        let cfg = load_config(
            None,
            &[
                "variant=off".into(),
                "total_steps=7".into(),
                "algorithm=\"gspo\"".into(),
                "total_steps=9".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.variant, Variant::Off);
        assert_eq!(cfg.algorithm, Algorithm::Gspo);
        assert_eq!(cfg.total_steps, 9);
    }

    #[test]
    fn zero_eval_cadence_is_rejected() {
        let err = load_config(None, &["eval_every=0".into()]).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "eval_every"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json_str(r#"{"bogus": 1}"#).is_err());
        assert!(load_config(None, &["novalue".into()]).is_err());
    }

    #[test]
    fn partial_files_take_defaults() {
        let cfg = RunConfig::from_json_str(r#"{"seed": 4, "variant": "pods"}"#).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.variant, Variant::Pods);
        assert_eq!(cfg.group_size, 8);
    }

    #[test]
    fn key_location() {
        let text = "{\n  \"seed\": 1,\n  \"eval_every\": 0\n}";
        assert_eq!(locate_key(text, "eval_every"), Some(3));
        assert_eq!(locate_key(text, "missing"), None);
    }
}
