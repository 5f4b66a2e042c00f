//! End-to-end commands: training runs, theory verification, variant
//! comparison and offline selection. The CLI is a thin shell over these.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::advantage::{population_variance, GroupBatch};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{MetricsRecord, MetricsWriter};
use crate::policy::{PolicyParams, Rollout};
use crate::selector::{select_batch, SelectionConfig, SelectionMode};
use crate::theory::{
    check_subset_variance, check_max_advantage, run_probes, LemmaReport, MaxAdvantageReport, ProbeReport,
    ProbeSetup,
};
use crate::trainer::{evaluate_policy, train_step, TrainState};

const CHECKPOINT_MAGIC: &[u8; 8] = b"D3SPOLCY";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes logits as little-endian f64 after a small fixed header.
pub fn write_checkpoint(path: &Path, params: &PolicyParams) -> Result<()> {
    let mut buf = Vec::with_capacity(40 + params.logits().len() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.vocab_size() as u32).to_le_bytes());
    buf.extend_from_slice(&(params.context_window() as u32).to_le_bytes());
    buf.extend_from_slice(&(params.max_len() as u32).to_le_bytes());
    buf.extend_from_slice(&(params.num_contexts() as u64).to_le_bytes());
    for &x in params.logits() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<PolicyParams> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 32 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a policy checkpoint"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    if u32_at(8) != CHECKPOINT_VERSION {
        return Err(bad("unsupported version"));
    }
    let (v, w, max_len) = (
        u32_at(12) as usize,
        u32_at(16) as usize,
        u32_at(20) as usize,
    );
    let rows = u64::from_le_bytes(bytes[24..32].try_into().unwrap()) as usize;
    let body = &bytes[32..];
    if body.len() != rows * v * 8 {
        return Err(bad("truncated logits"));
    }
    let logits = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = PolicyParams::from_logits(logits, v, w, max_len)?;
    if params.num_contexts() != rows {
        return Err(bad("row count does not match the header"));
    }
    Ok(params)
}

/// Metrics rows and the final policy of one run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub records: Vec<MetricsRecord>,
    pub params: PolicyParams,
    pub run_dir: Option<PathBuf>,
}

fn is_eval_step(completed: usize, cfg: &RunConfig) -> bool {
    completed % cfg.eval_every == 0 || completed == cfg.total_steps
}

/// Trains in memory. `on_record` sees each row as soon as it is final.
pub fn train_with(
    cfg: &RunConfig,
    mut on_record: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<(Vec<MetricsRecord>, PolicyParams)> {
    cfg.validate()?;
    let suite = cfg.suite()?;
    let tcfg = cfg.trainer();
    let mut state = TrainState::new(cfg.initial_policy()?, &tcfg);
    let mut records = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let outcome = train_step(&mut state, &suite, &tcfg)?;
        for w in &outcome.warnings {
            log::debug!("step {step}: {w}");
        }
        let mut record = outcome.record;
        // every eval reuses the same rollout streams, so successive scores
        // differ only through the policy
        if is_eval_step(step + 1, cfg) {
            let eval = evaluate_policy(state.params(), &suite.eval, cfg.eval_samples, cfg.seed, 0)?;
            record.eval = Some(eval);
            if !record.is_finite() {
                return Err(Error::NonFinite(format!("eval metrics at step {step}")));
            }
            log::info!(
                "step {} avg@{}={:.4} sur={:.3} tcr={:.4}",
                step + 1,
                cfg.eval_samples,
                record
                    .eval_value(&format!("avg@{}", cfg.eval_samples))
                    .unwrap_or(f64::NAN),
                record.sur,
                record.token_consumption_ratio
            );
        }
        on_record(&record)?;
        records.push(record);
    }
    Ok((records, state.snapshot.current))
}

/// Fresh `<out_dir>/<timestamp>-seed<seed>` directory.
pub fn create_run_dir(out_dir: &Path, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(out_dir)?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{stamp}-seed{seed}");
    let mut dir = out_dir.join(&base);
    let mut n = 1;
    while dir.exists() {
        dir = out_dir.join(format!("{base}-{n}"));
        n += 1;
    }
    fs::create_dir(&dir)?;
    Ok(dir)
}

/// Trains and writes `metrics.jsonl`, `config.echo.json` and `policy.bin`.
pub fn train_to_dir(cfg: &RunConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let dir = create_run_dir(Path::new(&cfg.out_dir), cfg.seed)?;
    fs::write(dir.join("config.echo.json"), cfg.to_json_pretty()? + "\n")?;
    let mut writer = MetricsWriter::create(&dir.join("metrics.jsonl"))?;
    let (records, params) = train_with(cfg, |r| writer.write(r))?;
    writer.finish()?;
    let ckpt = dir.join("policy.bin");
    write_checkpoint(&ckpt, &params)?;
    if read_checkpoint(&ckpt)? != params {
        return Err(Error::Checkpoint(
            "read-back differs from the trained policy".into(),
        ));
    }
    Ok(TrainRun {
        records,
        params,
        run_dir: Some(dir),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub lemma_max_m: usize,
    pub lemma_trials: usize,
    pub max_adv_min_g: usize,
    pub max_adv_max_g: usize,
    pub probes: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            lemma_max_m: 10,
            lemma_trials: 200,
            max_adv_min_g: 2,
            max_adv_max_g: 64,
            probes: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub lemma: LemmaReport,
    pub max_advantage: MaxAdvantageReport,
    pub probes: ProbeReport,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.lemma.passed() && self.max_advantage.passed() && self.probes.passed()
    }

    pub fn human(&self) -> String {
        let mark = |ok: bool| if ok { "PASS" } else { "FAIL" };
        let mut s = String::new();
        s += &format!(
            "[{}] subset variance: {} sets, {} (set, N) cases, {} failures, max deficit {:.3e}; \
             constructive chain {} steps, {} condition failures\n",
            mark(self.lemma.passed()),
            self.lemma.trials,
            self.lemma.cases,
            self.lemma.failures.len(),
            self.lemma.max_deficit,
            self.lemma.constructive_steps,
            self.lemma.constructive_failures,
        );
        for f in self.lemma.failures.iter().take(5) {
            s += &format!(
                "    N={} best={:.6} values={:?}\n",
                f.n, f.best_variance, f.values
            );
        }
        s += &format!(
            "[{}] max advantage bound: {} group sizes, {} failures\n",
            mark(self.max_advantage.passed()),
            self.max_advantage.cases.len(),
            self.max_advantage.failures.len(),
        );
        s += &format!(
            "[{}] gradient-norm probes: {} probes, mean full {:.6}, mean subset {:.6}, spearman {:.3}\n",
            mark(self.probes.passed()),
            self.probes.probes.len(),
            self.probes.mean_full,
            self.probes.mean_subset,
            self.probes.spearman,
        );
        s
    }

    /// One-line machine-readable summary.
    pub fn summary_line(&self) -> Result<String> {
        Ok(serde_json::to_string(&serde_json::json!({
            "passed": self.passed(),
            "lemma": {
                "passed": self.lemma.passed(),
                "trials": self.lemma.trials,
                "cases": self.lemma.cases,
                "failures": self.lemma.failures.len(),
                "max_deficit": self.lemma.max_deficit,
                "constructive_failures": self.lemma.constructive_failures,
            },
            "max_advantage": {
                "passed": self.max_advantage.passed(),
                "failures": self.max_advantage.failures,
            },
            "probes": {
                "passed": self.probes.passed(),
                "mean_full": self.probes.mean_full,
                "mean_subset": self.probes.mean_subset,
                "spearman": self.probes.spearman,
            },
        }))?)
    }
}

pub fn verify(opts: &VerifyOptions) -> Result<VerifyReport> {
    Ok(VerifyReport {
        lemma: check_subset_variance(opts.lemma_max_m, opts.lemma_trials, opts.seed)?,
        max_advantage: check_max_advantage(opts.max_adv_min_g..=opts.max_adv_max_g)?,
        probes: run_probes(opts.probes, opts.seed, &ProbeSetup::default())?,
    })
}

/// Aggregates of one configuration over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    /// Completed steps at which eval first reached the threshold, per seed.
    pub steps_to_threshold: Vec<Option<usize>>,
    pub final_avg: f64,
    pub mean_token_consumption: f64,
    pub mean_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub seeds: Vec<u64>,
    pub eval_key: String,
    /// Per seed: the final eval score of A, unless fixed explicitly.
    pub thresholds: Vec<f64>,
    pub a: VariantSummary,
    pub b: VariantSummary,
    /// Mean steps of A over mean steps of B, over seeds where both reach the
    /// threshold; `None` when no seed qualifies.
    pub speedup: Option<f64>,
}

fn final_eval(records: &[MetricsRecord], key: &str) -> Result<f64> {
    records
        .iter()
        .rev()
        .find_map(|r| r.eval_value(key))
        .ok_or(Error::Empty("eval records"))
}

/// First completed-step count at which eval reached `threshold`.
pub fn steps_to_threshold(records: &[MetricsRecord], key: &str, threshold: f64) -> Option<usize> {
    records
        .iter()
        .find(|r| r.eval_value(key).is_some_and(|v| v >= threshold))
        .map(|r| r.step + 1)
}

fn mean_of(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Trains `a` and `b` on each seed and compares them.
pub fn compare(
    a: &RunConfig,
    b: &RunConfig,
    seeds: &[u64],
    threshold: Option<f64>,
) -> Result<CompareReport> {
    if seeds.is_empty() {
        return Err(Error::Empty("seeds"));
    }
    if a.eval_samples != b.eval_samples {
        return Err(Error::config(
            "eval_samples",
            "both configs must use the same value",
        ));
    }
    let key = format!("avg@{}", a.eval_samples);
    let mut runs_a = Vec::new();
    let mut runs_b = Vec::new();
    for &seed in seeds {
        let ca = RunConfig { seed, ..a.clone() };
        let cb = RunConfig { seed, ..b.clone() };
        runs_a.push(train_with(&ca, |_| Ok(()))?.0);
        runs_b.push(train_with(&cb, |_| Ok(()))?.0);
    }
    let thresholds = runs_a
        .iter()
        .map(|r| match threshold {
            Some(t) => Ok(t),
            None => final_eval(r, &key),
        })
        .collect::<Result<Vec<_>>>()?;
    let summarize = |runs: &[Vec<MetricsRecord>]| -> Result<VariantSummary> {
        Ok(VariantSummary {
            steps_to_threshold: runs
                .iter()
                .zip(&thresholds)
                .map(|(r, &t)| steps_to_threshold(r, &key, t))
                .collect(),
            final_avg: mean_of(
                runs.iter()
                    .map(|r| final_eval(r, &key))
                    .collect::<Result<Vec<_>>>()?
                    .into_iter(),
            ),
            mean_token_consumption: mean_of(
                runs.iter().flatten().map(|r| r.token_consumption_ratio),
            ),
            mean_grad_norm: mean_of(runs.iter().flatten().map(|r| r.grad_norm)),
        })
    };
    let sa = summarize(&runs_a)?;
    let sb = summarize(&runs_b)?;
    let both: Vec<(usize, usize)> = sa
        .steps_to_threshold
        .iter()
        .zip(&sb.steps_to_threshold)
        .filter_map(|(x, y)| Some(((*x)?, (*y)?)))
        .collect();
    let speedup = if both.is_empty() {
        None
    } else {
        let ma = mean_of(both.iter().map(|p| p.0 as f64));
        let mb = mean_of(both.iter().map(|p| p.1 as f64));
        Some(ma / mb)
    };
    Ok(CompareReport {
        seeds: seeds.to_vec(),
        eval_key: key,
        thresholds,
        a: sa,
        b: sb,
        speedup,
    })
}

/// One input row for offline selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectInput {
    pub group: u64,
    pub rollout: u64,
    pub advantage: f64,
    #[serde(default)]
    pub reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectOutput {
    pub group: u64,
    pub rollout: u64,
    /// Advantage the sample would be trained with.
    pub advantage: f64,
    pub reward: Option<f64>,
}

pub fn read_select_inputs(reader: impl Read) -> Result<Vec<SelectInput>> {
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SelectInput = serde_json::from_str(&line)
            .map_err(|e| Error::LengthMismatch(format!("select input line {}: {e}", lineno + 1)))?;
        if !rec.advantage.is_finite() || rec.reward.is_some_and(|r| !r.is_finite()) {
            return Err(Error::NonFinite(format!(
                "select input line {}",
                lineno + 1
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Groups rows by `group` (first-appearance order) and applies `mode` with
/// `n` samples per group; cross-group mode keeps `n` times the group count.
pub fn select_records(
    inputs: &[SelectInput],
    mode: SelectionMode,
    n: usize,
) -> Result<Vec<SelectOutput>> {
    if inputs.is_empty() {
        return Err(Error::Empty("select input"));
    }
    let mut order: Vec<u64> = Vec::new();
    let mut members: BTreeMap<u64, Vec<&SelectInput>> = BTreeMap::new();
    for rec in inputs {
        let e = members.entry(rec.group).or_default();
        if e.is_empty() {
            order.push(rec.group);
        }
        e.push(rec);
    }
    let rows: Vec<&Vec<&SelectInput>> = order.iter().map(|g| &members[g]).collect();
    if mode == SelectionMode::PodsRewardVariance && inputs.iter().any(|r| r.reward.is_none()) {
        return Err(Error::config(
            "reward",
            "reward-variance selection needs a reward on every row",
        ));
    }
    let advantages: Vec<Vec<f64>> = rows
        .iter()
        .map(|g| g.iter().map(|r| r.advantage).collect())
        .collect();
    let batch = GroupBatch {
        groups: rows
            .iter()
            .map(|g| {
                g.iter()
                    .map(|r| Rollout {
                        query_id: r.group,
                        prompt: Vec::new(),
                        tokens: Vec::new(),
                        logprobs_old: Vec::new(),
                        entropies: Vec::new(),
                        reward: r.reward.unwrap_or(r.advantage),
                    })
                    .collect()
            })
            .collect(),
        group_mean: advantages
            .iter()
            .map(|a| a.iter().sum::<f64>() / a.len() as f64)
            .collect(),
        group_std: advantages
            .iter()
            .map(|a| population_variance(a).sqrt())
            .collect(),
        degenerate: advantages
            .iter()
            .map(|a| a.iter().all(|&x| x == 0.0))
            .collect(),
        advantages,
    };
    let sel = select_batch(
        &batch,
        &SelectionConfig {
            mode,
            n_select: n,
            allow_degenerate_fill: false,
        },
    )?;
    Ok(sel
        .selected
        .iter()
        .zip(&sel.advantages)
        .map(|(&(g, i), &a)| {
            let r = rows[g][i];
            SelectOutput {
                group: r.group,
                rollout: r.rollout,
                advantage: a,
                reward: r.reward,
            }
        })
        .collect())
}

pub fn write_select_outputs(out: &mut impl Write, rows: &[SelectOutput]) -> Result<()> {
    for r in rows {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}
