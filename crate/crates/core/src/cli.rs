//! Command implementations behind the binary: `train` (run a spec file and
//! write metrics/snapshot/summary), `verify` (run a named check suite), and
//! `sample` (draw sequences from a saved snapshot and score diversity).
//!
//! Exit codes: 0 success, 2 invalid spec/arguments (diagnostic names the
//! offending key), 3 no data available to train on.

use std::fs;
use std::io::BufReader;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::{RewardMode, SamplingConfig};
use crate::envs::{self, unigram_diversity, Instance};
use crate::objectives::{BetaKind, BetaSchedule, ObjectiveConfig, UpdateRule};
use crate::policy::PolicyParams;
use crate::runtime::{
    self, utilization_report, write_metrics_csv, LrKind, LrSchedule, RunConfig, RunMetrics,
    RunMode, RuntimeError,
};
use crate::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_NO_DATA: i32 = 3;

/// How the training loop executes: the synchronous on-policy baseline, the
/// async loop on the logical clock, or the async loop on real threads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecMode {
    Sync,
    Simulated,
    Concurrent,
}

/// Flat TOML run specification. Every runtime/objective/sampling field is
/// addressable by its documented name; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpecFile {
    pub instance: String,
    pub mode: SpecMode,
    pub num_searchers: usize,
    pub sync_period_k: u64,
    pub total_steps: u64,
    pub oversample_s: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrKind,
    pub lr_warmup: u64,
    pub lr_stable: u64,
    pub lr_decay: u64,
    pub seed: u64,
    pub gen_cost: u64,
    pub train_cost: u64,
    pub gen_temperature: f64,
    pub seed_completions: usize,
    pub buffer_max_size: Option<usize>,
    pub freeze_at_step: Option<u64>,
    pub oracle_every: u64,

    pub rule: UpdateRule,
    pub beta_schedule: BetaKind,
    pub beta_init: f64,
    pub beta_final: f64,
    pub beta_decay_end_step: u64,
    pub beta_abrupt_end_step: Option<u64>,
    pub tau: f64,
    pub is_clip_low: f64,
    pub is_clip_high: f64,
    pub icepop_low: Option<f64>,
    pub icepop_high: Option<f64>,
    pub reset_period_rho: Option<u64>,
    pub std_eps: f64,
    pub population_std: bool,
    pub tempered_is: bool,

    pub m: f64,
    pub reward_mode: RewardMode,
    pub softmax_temperature: f64,
    pub group_k: usize,
    pub batch_b: usize,
}

impl Default for RunSpecFile {
    fn default() -> Self {
        Self {
            instance: "mr_like".into(),
            mode: SpecMode::Simulated,
            num_searchers: 3,
            sync_period_k: 2,
            total_steps: 500,
            oversample_s: 24,
            learning_rate: 1e-2,
            lr_schedule: LrKind::Constant,
            lr_warmup: 50,
            lr_stable: 450,
            lr_decay: 500,
            seed: 500,
            gen_cost: 5,
            train_cost: 1,
            gen_temperature: 1.0,
            seed_completions: 500,
            buffer_max_size: None,
            freeze_at_step: None,
            oracle_every: 0,
            rule: UpdateRule::Tb,
            beta_schedule: BetaKind::LinearDecay,
            beta_init: 0.012,
            beta_final: 0.004,
            beta_decay_end_step: 500,
            beta_abrupt_end_step: None,
            tau: 0.005,
            is_clip_low: 0.0,
            is_clip_high: 8.0,
            icepop_low: None,
            icepop_high: None,
            reset_period_rho: None,
            std_eps: 1e-6,
            population_std: true,
            tempered_is: false,
            m: 0.95,
            reward_mode: RewardMode::SoftmaxOfReward,
            softmax_temperature: 1.0,
            group_k: 20,
            batch_b: 1,
        }
    }
}

impl RunSpecFile {
    /// Resolves the spec into a validated runtime configuration plus the
    /// named instance. Error messages name the offending key.
    pub fn resolve(&self) -> Result<(RunConfig, Instance), String> {
        let inst = envs::instance_by_name(&self.instance).ok_or_else(|| {
            format!(
                "instance: unknown name {:?} (expected one of tiny, mr_like, rt_like)",
                self.instance
            )
        })?;
        let icepop_band = match (self.icepop_low, self.icepop_high) {
            (Some(lo), Some(hi)) => Some((lo, hi)),
            (None, None) => None,
            _ => {
                return Err(
                    "icepop_low/icepop_high: both must be set together or both omitted".into(),
                )
            }
        };
        let objective = ObjectiveConfig {
            rule: self.rule,
            beta: BetaSchedule {
                kind: self.beta_schedule,
                beta_init: self.beta_init,
                beta_final: self.beta_final,
                decay_end_step: self.beta_decay_end_step,
                abrupt_end_step: self.beta_abrupt_end_step,
            },
            tau: self.tau,
            is_clip_low: self.is_clip_low,
            is_clip_high: self.is_clip_high,
            icepop_band,
            reset_period_rho: self.reset_period_rho,
            token_level: !matches!(self.rule, UpdateRule::Tb | UpdateRule::ProximalRloo),
            std_eps: self.std_eps,
            population_std: self.population_std,
            tempered_is: self.tempered_is,
        };
        let cfg = RunConfig {
            num_searchers: self.num_searchers,
            sync_period_k: self.sync_period_k,
            total_steps: self.total_steps,
            oversample_s: self.oversample_s,
            objective,
            sampling: SamplingConfig {
                m: self.m,
                reward_mode: self.reward_mode,
                softmax_temperature: self.softmax_temperature,
                group_k: self.group_k,
                batch_b: self.batch_b,
            },
            learning_rate: self.learning_rate,
            lr_schedule: LrSchedule {
                kind: self.lr_schedule,
                warmup: self.lr_warmup,
                stable: self.lr_stable,
                decay: self.lr_decay,
            },
            seed: self.seed,
            mode: match self.mode {
                SpecMode::Concurrent => RunMode::Concurrent,
                _ => RunMode::Simulated,
            },
            sim_latency: (self.gen_cost, self.train_cost),
            gen_temperature: self.gen_temperature,
            seed_completions: self.seed_completions,
            buffer_max_size: self.buffer_max_size,
            freeze_at_step: self.freeze_at_step,
            oracle_every: self.oracle_every,
        };
        if self.batch_b > inst.query_set.len() {
            return Err(format!(
                "batch_b: {} exceeds the instance's {} queries",
                self.batch_b,
                inst.query_set.len()
            ));
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok((cfg, inst))
    }
}

fn write_outputs(out_dir: &Path, metrics: &RunMetrics) -> Result<(), RuntimeError> {
    fs::create_dir_all(out_dir)?;
    let csv = fs::File::create(out_dir.join("metrics.csv"))?;
    write_metrics_csv(metrics, csv)?;
    let snapshot = fs::File::create(out_dir.join("params.txt"))?;
    metrics
        .final_params
        .save_text(snapshot)
        .map_err(RuntimeError::Policy)?;
    let summary = match utilization_report(metrics) {
        Ok(s) => format!(
            "steps={} utilization={} mean_staleness={} syncs_per_100_steps={} busy_units={} total_units={}\n",
            metrics.records.len(),
            s.utilization,
            s.mean_staleness,
            s.syncs_per_100_steps,
            metrics.busy_units,
            metrics.total_units,
        ),
        Err(_) => "steps=0\n".to_string(),
    };
    fs::write(out_dir.join("summary.txt"), summary)?;
    Ok(())
}

pub fn cmd_train(spec_path: &Path, out_dir: &Path) -> i32 {
    let text = match fs::read_to_string(spec_path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read spec {}: {e}", spec_path.display());
            return EXIT_INVALID;
        }
    };
    let spec: RunSpecFile = match toml::from_str(&text) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: invalid spec: {e}");
            return EXIT_INVALID;
        }
    };
    let (cfg, inst) = match spec.resolve() {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: invalid spec: {e}");
            return EXIT_INVALID;
        }
    };
    let result = match spec.mode {
        SpecMode::Sync => runtime::run_sync_baseline(&cfg, &inst),
        _ => runtime::run_async(&cfg, &inst),
    };
    let metrics = match result {
        Ok(m) => m,
        Err(RuntimeError::NoData(msg)) => {
            eprintln!("error: no data: {msg}");
            return EXIT_NO_DATA;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_FAIL;
        }
    };
    if let Err(e) = write_outputs(out_dir, &metrics) {
        eprintln!("error: writing outputs: {e}");
        return EXIT_FAIL;
    }
    println!(
        "trained {} steps on {}; outputs in {}",
        metrics.records.len(),
        inst.name,
        out_dir.display()
    );
    EXIT_OK
}

pub fn cmd_verify(suite: &str, seed: u64) -> i32 {
    let Some(checks) = verify::run_suite(suite, seed) else {
        eprintln!(
            "error: unknown suite {suite:?} (expected one of {})",
            verify::SUITES.join(", ")
        );
        return EXIT_INVALID;
    };
    let mut all = true;
    for c in &checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        println!("{tag} {} — {}", c.name, c.detail);
        all &= c.passed;
    }
    if all {
        EXIT_OK
    } else {
        EXIT_FAIL
    }
}

pub fn cmd_sample(snapshot_path: &Path, instance: &str, n: usize, seed: u64) -> i32 {
    let file = match fs::File::open(snapshot_path) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: cannot read snapshot {}: {e}", snapshot_path.display());
            return EXIT_INVALID;
        }
    };
    let params = match PolicyParams::load_text(BufReader::new(file)) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: invalid snapshot: {e}");
            return EXIT_INVALID;
        }
    };
    let Some(inst) = envs::instance_by_name(instance) else {
        eprintln!("error: unknown instance {instance:?} (expected one of tiny, mr_like, rt_like)");
        return EXIT_INVALID;
    };
    if params.vocab() != inst.env.vocab || params.num_queries() != inst.query_set.len() {
        eprintln!("error: snapshot shape does not match instance {instance:?}");
        return EXIT_INVALID;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    println!("query_id,tokens,reward");
    let mut sequences = Vec::with_capacity(n);
    for i in 0..n {
        let q = i % inst.query_set.len();
        let c = params
            .sample(q, inst.max_len, 1.0, &mut rng)
            .expect("sampling from a validated snapshot");
        let reward = inst.env.reward(q, &c.tokens);
        let toks: Vec<String> = c.tokens.iter().map(ToString::to_string).collect();
        println!("{q},{},{reward}", toks.join("-"));
        sequences.push(c.tokens);
    }
    if n > 0 {
        println!("diversity,{}", unigram_diversity(&sequences, inst.env.vocab));
    }
    EXIT_OK
}
