//! Searcher/trainer orchestration: the asynchronous loop with sync
//! rendezvous every k trainer steps, the synchronous on-policy baseline, and
//! a deterministic simulated-latency mode for throughput accounting.
//!
//! Simulated mode runs everything on one logical clock: a searcher batch of S
//! generations costs `gen_cost` units, a trainer step costs `train_cost`, and
//! a rendezvous waits for in-flight generation to finish (trainer ordered
//! before searchers at equal timestamps). Concurrent mode runs real threads
//! under the same rendezvous contract; tests consume only simulated results.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::{BufferError, ReplayBuffer, SamplingConfig};
use crate::envs::Instance;
use crate::objectives::{
    beta_at, rloo_gradient, tb_gradient, tb_vargrad_loss, token_family_gradient,
    maybe_reset_reference, Group, GroupBatch, ObjectiveConfig, ObjectiveError, UpdateRule,
};
use crate::oracle;
use crate::policy::{PolicyError, PolicyParams};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("no data: {0}")]
    NoData(String),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("oracle error: {0}")]
    Oracle(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<oracle::OracleError> for RuntimeError {
    fn from(e: oracle::OracleError) -> Self {
        RuntimeError::Oracle(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Simulated,
    Concurrent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrKind {
    Constant,
    Linear,
    WarmupStableDecay,
}

/// Learning-rate schedule: constant, linear decay to zero over the run, or
/// warmup / stable / linear-decay phases given as step counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: LrKind,
    pub warmup: u64,
    pub stable: u64,
    pub decay: u64,
}

impl LrSchedule {
    pub fn constant() -> Self {
        Self {
            kind: LrKind::Constant,
            warmup: 0,
            stable: 0,
            decay: 0,
        }
    }

    pub fn linear() -> Self {
        Self {
            kind: LrKind::Linear,
            ..Self::constant()
        }
    }

    pub fn warmup_stable_decay(warmup: u64, stable: u64, decay: u64) -> Self {
        Self {
            kind: LrKind::WarmupStableDecay,
            warmup,
            stable,
            decay,
        }
    }
}

/// Learning rate at 0-based trainer step `step` of `total_steps`.
pub fn lr_at(base: f64, schedule: &LrSchedule, step: u64, total_steps: u64) -> f64 {
    match schedule.kind {
        LrKind::Constant => base,
        LrKind::Linear => {
            if total_steps == 0 {
                base
            } else {
                base * (1.0 - step as f64 / total_steps as f64)
            }
        }
        LrKind::WarmupStableDecay => {
            let w = schedule.warmup;
            let s = schedule.stable;
            let d = schedule.decay;
            if step < w {
                base * (step + 1) as f64 / w as f64
            } else if step < w + s {
                base
            } else if d == 0 || step >= w + s + d {
                0.0
            } else {
                base * (1.0 - (step - w - s) as f64 / d as f64)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub num_searchers: usize,
    pub sync_period_k: u64,
    pub total_steps: u64,
    pub oversample_s: usize,
    pub objective: ObjectiveConfig,
    pub sampling: SamplingConfig,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub mode: RunMode,
    /// (gen_cost, train_cost) in abstract time units for simulated mode.
    pub sim_latency: (u64, u64),
    pub gen_temperature: f64,
    pub seed_completions: usize,
    pub buffer_max_size: Option<usize>,
    pub freeze_at_step: Option<u64>,
    /// Evaluate TV / exact KL against the oracle every this many steps
    /// (0 disables oracle evaluation entirely).
    pub oracle_every: u64,
}

impl RunConfig {
    /// Reasonable small-scale defaults for the TB rule on an instance.
    pub fn defaults(objective: ObjectiveConfig) -> Self {
        Self {
            num_searchers: 3,
            sync_period_k: 2,
            total_steps: 500,
            oversample_s: 24,
            objective,
            sampling: SamplingConfig {
                m: 0.95,
                reward_mode: crate::buffer::RewardMode::SoftmaxOfReward,
                softmax_temperature: 1.0,
                group_k: 20,
                batch_b: 1,
            },
            learning_rate: 1e-2,
            lr_schedule: LrSchedule::constant(),
            seed: 500,
            mode: RunMode::Simulated,
            sim_latency: (5, 1),
            gen_temperature: 1.0,
            seed_completions: 500,
            buffer_max_size: None,
            freeze_at_step: None,
            oracle_every: 0,
        }
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        if self.num_searchers < 1 {
            return Err(RuntimeError::InvalidConfig(
                "num_searchers must be >= 1".into(),
            ));
        }
        if self.sync_period_k < 1 {
            return Err(RuntimeError::InvalidConfig(
                "sync_period_k must be >= 1".into(),
            ));
        }
        if self.oversample_s < self.sampling.group_k {
            return Err(RuntimeError::InvalidConfig(format!(
                "oversample_s ({}) must be >= group_k ({})",
                self.oversample_s, self.sampling.group_k
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(RuntimeError::InvalidConfig(
                "learning_rate must be > 0".into(),
            ));
        }
        if !(self.gen_temperature > 0.0) {
            return Err(RuntimeError::InvalidConfig(
                "gen_temperature must be > 0".into(),
            ));
        }
        if self.sim_latency.0 < 1 || self.sim_latency.1 < 1 {
            return Err(RuntimeError::InvalidConfig(
                "sim_latency costs must be >= 1".into(),
            ));
        }
        self.sampling
            .validate()
            .map_err(|e| RuntimeError::InvalidConfig(e.to_string()))?;
        self.objective
            .validate()
            .map_err(|e| RuntimeError::InvalidConfig(e.to_string()))?;
        Ok(())
    }
}

/// One row of the metrics stream. Fields without a defined value for the
/// current configuration (loss outside the TB rule, oracle columns when
/// evaluation is off) hold NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub beta: f64,
    pub mean_reward: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub buffer_size: usize,
    pub latest_sync_tag: u64,
    pub utilization: f64,
    pub tv_distance: f64,
    pub exact_kl: f64,
}

#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub records: Vec<StepRecord>,
    /// Logical units the trainer spent inside trainer_step.
    pub busy_units: u64,
    /// Total elapsed logical units.
    pub total_units: u64,
    /// Staleness (trainer updates behind) of every recency-strategy sample.
    pub recency_staleness: Vec<u64>,
    pub sync_count: u64,
    pub final_params: PolicyParams,
}

impl RunMetrics {
    pub fn utilization(&self) -> f64 {
        if self.total_units == 0 {
            0.0
        } else {
            self.busy_units as f64 / self.total_units as f64
        }
    }

    pub fn max_staleness(&self) -> Option<u64> {
        self.recency_staleness.iter().max().copied()
    }
}

/// Summary for throughput reporting: utilization, mean recency staleness, and
/// sync frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilizationSummary {
    pub utilization: f64,
    pub mean_staleness: f64,
    pub syncs_per_100_steps: f64,
}

pub fn utilization_report(metrics: &RunMetrics) -> Result<UtilizationSummary, RuntimeError> {
    if metrics.records.is_empty() {
        return Err(RuntimeError::NoData("metrics stream is empty".into()));
    }
    let mean_staleness = if metrics.recency_staleness.is_empty() {
        0.0
    } else {
        metrics.recency_staleness.iter().sum::<u64>() as f64
            / metrics.recency_staleness.len() as f64
    };
    Ok(UtilizationSummary {
        utilization: metrics.utilization(),
        mean_staleness,
        syncs_per_100_steps: 100.0 * metrics.sync_count as f64 / metrics.records.len() as f64,
    })
}

pub const METRICS_HEADER: &str =
    "step,beta,mean_reward,loss,grad_norm,buffer_size,latest_sync_tag,utilization,tv_distance,exact_kl";

/// Writes the per-step metrics as CSV with a fixed header.
pub fn write_metrics_csv<W: Write>(metrics: &RunMetrics, mut w: W) -> Result<(), RuntimeError> {
    let mut buf = String::new();
    buf.push_str(METRICS_HEADER);
    buf.push('\n');
    for r in &metrics.records {
        use std::fmt::Write as _;
        writeln!(
            buf,
            "{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.beta,
            r.mean_reward,
            r.loss,
            r.grad_norm,
            r.buffer_size,
            r.latest_sync_tag,
            r.utilization,
            r.tv_distance,
            r.exact_kl,
        )
        .expect("write to string");
    }
    w.write_all(buf.as_bytes())?;
    Ok(())
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Computes the configured rule's ascent gradient, plus the TB loss when the
/// rule is TB (NaN otherwise).
fn objective_gradient(
    cfg: &ObjectiveConfig,
    batch: &GroupBatch,
    beta: f64,
    ref_params: &PolicyParams,
    cur: &PolicyParams,
) -> Result<(crate::grad::Gradient, f64), ObjectiveError> {
    match cfg.rule {
        UpdateRule::Tb => {
            // the trainer steps down the squared-residual loss itself, so
            // `learning_rate` multiplies its raw gradient; `tb_gradient`
            // carries a −β/2 factor (the REINFORCE-identity convention),
            // which is divided back out here
            let mut grad = tb_gradient(batch, beta, ref_params, cur)?;
            grad.scale(2.0 / beta);
            let loss = tb_vargrad_loss(batch, beta, ref_params, cur)?;
            Ok((grad, loss))
        }
        UpdateRule::ProximalRloo => Ok((
            rloo_gradient(batch, ref_params, cur, cfg.is_clip_high)?,
            f64::NAN,
        )),
        _ => Ok((
            token_family_gradient(batch, cfg, beta, ref_params, cur)?,
            f64::NAN,
        )),
    }
}

fn batch_mean_reward(batch: &GroupBatch) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for g in batch.groups() {
        for c in &g.completions {
            total += c.reward.unwrap_or(f64::NAN);
            n += 1;
        }
    }
    total / n as f64
}

fn oracle_columns(
    inst: &Instance,
    cur: &PolicyParams,
    ref_params: &PolicyParams,
) -> Result<(f64, f64), RuntimeError> {
    let tv = oracle::mean_tv_to_posterior(cur, &inst.ref_policy, &inst.env, inst.beta, inst.max_len)?;
    let mut kl = 0.0;
    for q in 0..cur.num_queries() {
        kl += oracle::exact_kl(cur, ref_params, q, inst.max_len)?;
    }
    Ok((tv, kl / cur.num_queries() as f64))
}

/// Generates one searcher batch: S completions for one query with the
/// snapshot, deduplicated by exact token sequence (first occurrences kept),
/// rewarded, and inserted into the local buffer.
fn searcher_generate_batch<R: Rng + ?Sized>(
    snapshot: &PolicyParams,
    inst: &Instance,
    query_id: usize,
    searcher_id: usize,
    oversample_s: usize,
    temperature: f64,
    local: &mut ReplayBuffer,
    rng: &mut R,
) -> Result<(), RuntimeError> {
    let mut seen: Vec<Vec<usize>> = Vec::with_capacity(oversample_s);
    for _ in 0..oversample_s {
        let mut c = snapshot.sample(query_id, inst.max_len, temperature, rng)?;
        if seen.contains(&c.tokens) {
            continue;
        }
        seen.push(c.tokens.clone());
        c.reward = Some(inst.env.reward(query_id, &c.tokens));
        c.searcher_id = searcher_id;
        local.insert(c);
    }
    Ok(())
}

struct SearcherSim {
    snapshot: PolicyParams,
    local: ReplayBuffer,
    rng: ChaCha8Rng,
    next_query: usize,
    /// Logical time this searcher last resumed generating.
    resume_time: u64,
}

/// The asynchronous loop. Dispatches on `cfg.mode`; both modes share the
/// trainer-side logic and the rendezvous semantics.
pub fn run_async(cfg: &RunConfig, inst: &Instance) -> Result<RunMetrics, RuntimeError> {
    cfg.validate()?;
    match cfg.mode {
        RunMode::Simulated => run_async_simulated(cfg, inst),
        RunMode::Concurrent => run_async_concurrent(cfg, inst),
    }
}

fn run_async_simulated(cfg: &RunConfig, inst: &Instance) -> Result<RunMetrics, RuntimeError> {
    let (gen_cost, train_cost) = cfg.sim_latency;
    let mut cur = inst.ref_policy.clone();
    let mut ref_params = inst.ref_policy.clone();
    let mut trainer_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 1));
    let mut global = ReplayBuffer::new(cfg.buffer_max_size);
    global.seed_initial(
        &cur,
        &inst.env,
        cfg.seed_completions,
        &mut ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 0)),
    );

    let mut searchers: Vec<SearcherSim> = (0..cfg.num_searchers)
        .map(|j| SearcherSim {
            snapshot: cur.clone(),
            local: ReplayBuffer::new(None),
            rng: ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 2 + j as u64)),
            next_query: j % inst.query_set.len(),
            resume_time: 0,
        })
        .collect();

    // sync tag -> trainer step of the snapshot that generated those items
    let mut tag_snapshot: std::collections::BTreeMap<u64, u64> = std::collections::BTreeMap::new();
    tag_snapshot.insert(0, 0);

    let mut time: u64 = 0;
    let mut busy: u64 = 0;
    let mut last_sync_step: u64 = 0;
    let mut metrics = RunMetrics {
        records: Vec::with_capacity(cfg.total_steps as usize),
        busy_units: 0,
        total_units: 0,
        recency_staleness: Vec::new(),
        sync_count: 0,
        final_params: cur.clone(),
    };

    // The trainer blocks until data exists: with zero seeds, wait for the
    // searchers' first batches and merge them at step 0.
    if global.is_empty() && cfg.total_steps > 0 {
        let mut finish = time;
        for (j, s) in searchers.iter_mut().enumerate() {
            searcher_generate_batch(
                &s.snapshot,
                inst,
                s.next_query,
                j,
                cfg.oversample_s,
                cfg.gen_temperature,
                &mut s.local,
                &mut s.rng,
            )?;
            s.next_query = (s.next_query + cfg.num_searchers) % inst.query_set.len();
            finish = finish.max(s.resume_time + gen_cost);
        }
        time = finish;
        for s in searchers.iter_mut() {
            global.merge_local_into_global(&mut s.local, 0);
            s.snapshot = cur.clone();
            s.resume_time = time;
        }
        tag_snapshot.insert(0, 0);
        metrics.sync_count += 1;
        if global.is_empty() {
            return Err(RuntimeError::NoData(
                "trainer cannot start: no seeds and searchers produced nothing".into(),
            ));
        }
    }

    for t in 1..=cfg.total_steps {
        let s0 = t - 1; // 0-based step for schedules
        let beta = beta_at(&cfg.objective.beta, s0);
        let lr = lr_at(cfg.learning_rate, &cfg.lr_schedule, s0, cfg.total_steps);

        let (batch, traces) = global.sample_batch_traced(&cfg.sampling, &mut trainer_rng)?;
        for tr in &traces {
            if tr.recency {
                let snap = *tag_snapshot
                    .get(&global.latest_sync_tag())
                    .expect("latest tag has a recorded snapshot step");
                let staleness = (t - 1).saturating_sub(snap);
                for _ in 0..cfg.sampling.group_k {
                    metrics.recency_staleness.push(staleness);
                }
            }
        }

        let (grad, loss) = objective_gradient(&cfg.objective, &batch, beta, &ref_params, &cur)?;
        cur.ascend(&grad, lr);
        if cfg.objective.rule == UpdateRule::TbaPrime {
            if let Some(rho) = cfg.objective.reset_period_rho {
                maybe_reset_reference(t, rho, &cur, &mut ref_params);
            }
        }
        time += train_cost;
        busy += train_cost;

        if let Some(f) = cfg.freeze_at_step {
            if t == f {
                global.freeze_capacity();
            }
        }

        // rendezvous every k steps: wait for in-flight generation, merge, refresh
        if t % cfg.sync_period_k == 0 {
            let mut rendezvous_time = time;
            for (j, s) in searchers.iter_mut().enumerate() {
                let elapsed = time.saturating_sub(s.resume_time);
                let batches = elapsed.div_ceil(gen_cost);
                for _ in 0..batches {
                    searcher_generate_batch(
                        &s.snapshot,
                        inst,
                        s.next_query,
                        j,
                        cfg.oversample_s,
                        cfg.gen_temperature,
                        &mut s.local,
                        &mut s.rng,
                    )?;
                    s.next_query = (s.next_query + cfg.num_searchers) % inst.query_set.len();
                }
                rendezvous_time = rendezvous_time.max(s.resume_time + batches * gen_cost);
            }
            time = rendezvous_time;
            tag_snapshot.insert(t, last_sync_step);
            for s in searchers.iter_mut() {
                global.merge_local_into_global(&mut s.local, t);
                s.snapshot = cur.clone();
                s.resume_time = time;
            }
            last_sync_step = t;
            metrics.sync_count += 1;
        }

        let (tv, kl) = if cfg.oracle_every > 0 && (t % cfg.oracle_every == 0 || t == cfg.total_steps)
        {
            oracle_columns(inst, &cur, &inst.ref_policy)?
        } else {
            (f64::NAN, f64::NAN)
        };
        metrics.records.push(StepRecord {
            step: t,
            beta,
            mean_reward: batch_mean_reward(&batch),
            loss,
            grad_norm: grad.l2_norm(),
            buffer_size: global.total_count(),
            latest_sync_tag: global.latest_sync_tag(),
            utilization: busy as f64 / time as f64,
            tv_distance: tv,
            exact_kl: kl,
        });
    }

    metrics.busy_units = busy;
    metrics.total_units = time;
    metrics.final_params = cur;
    Ok(metrics)
}

/// The synchronous on-policy baseline: each step generates K fresh samples
/// for each of B round-robin queries with the current parameters, then takes
/// one update. Under sim_latency the generation phase stalls the trainer.
pub fn run_sync_baseline(cfg: &RunConfig, inst: &Instance) -> Result<RunMetrics, RuntimeError> {
    cfg.validate()?;
    let (gen_cost, train_cost) = cfg.sim_latency;
    let mut cur = inst.ref_policy.clone();
    let mut ref_params = inst.ref_policy.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 1));
    let num_queries = inst.query_set.len();
    let mut cursor = 0usize;

    let mut time: u64 = 0;
    let mut busy: u64 = 0;
    let mut metrics = RunMetrics {
        records: Vec::with_capacity(cfg.total_steps as usize),
        busy_units: 0,
        total_units: 0,
        recency_staleness: Vec::new(),
        sync_count: 0,
        final_params: cur.clone(),
    };

    for t in 1..=cfg.total_steps {
        let s0 = t - 1;
        let beta = beta_at(&cfg.objective.beta, s0);
        let lr = lr_at(cfg.learning_rate, &cfg.lr_schedule, s0, cfg.total_steps);

        let mut groups = Vec::with_capacity(cfg.sampling.batch_b);
        for _ in 0..cfg.sampling.batch_b {
            let q = cursor % num_queries;
            cursor += 1;
            let mut completions = Vec::with_capacity(cfg.sampling.group_k);
            for _ in 0..cfg.sampling.group_k {
                let mut c = cur.sample(q, inst.max_len, cfg.gen_temperature, &mut rng)?;
                c.reward = Some(inst.env.reward(q, &c.tokens));
                completions.push(c);
            }
            groups.push(Group {
                query_id: q,
                completions,
            });
        }
        let batch = GroupBatch::new(groups)?;
        time += gen_cost; // on-policy generation stalls the trainer

        let (grad, loss) = objective_gradient(&cfg.objective, &batch, beta, &ref_params, &cur)?;
        cur.ascend(&grad, lr);
        if cfg.objective.rule == UpdateRule::TbaPrime {
            if let Some(rho) = cfg.objective.reset_period_rho {
                maybe_reset_reference(t, rho, &cur, &mut ref_params);
            }
        }
        time += train_cost;
        busy += train_cost;

        let (tv, kl) = if cfg.oracle_every > 0 && (t % cfg.oracle_every == 0 || t == cfg.total_steps)
        {
            oracle_columns(inst, &cur, &inst.ref_policy)?
        } else {
            (f64::NAN, f64::NAN)
        };
        metrics.records.push(StepRecord {
            step: t,
            beta,
            mean_reward: batch_mean_reward(&batch),
            loss,
            grad_norm: grad.l2_norm(),
            buffer_size: 0,
            latest_sync_tag: 0,
            utilization: busy as f64 / time as f64,
            tv_distance: tv,
            exact_kl: kl,
        });
    }

    metrics.busy_units = busy;
    metrics.total_units = time;
    metrics.final_params = cur;
    Ok(metrics)
}

/// Truly concurrent mode: one thread per searcher generating continuously,
/// the trainer stepping in the main thread, with a two-barrier rendezvous
/// every k steps during which only the trainer touches shared state.
fn run_async_concurrent(cfg: &RunConfig, inst: &Instance) -> Result<RunMetrics, RuntimeError> {
    use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
    use std::sync::{Arc, Barrier, Mutex};

    let n = cfg.num_searchers;
    let enter = Arc::new(Barrier::new(n + 1));
    let leave = Arc::new(Barrier::new(n + 1));
    let sync_requested = Arc::new(AtomicBool::new(false));
    let shutdown = Arc::new(AtomicBool::new(false));
    // epoch parity asserts rendezvous exclusivity: odd while the trainer owns
    // the shared state, even otherwise
    let epoch = Arc::new(AtomicU64::new(0));

    struct Shared {
        local: ReplayBuffer,
        snapshot: PolicyParams,
    }

    let mut cur = inst.ref_policy.clone();
    let mut ref_params = inst.ref_policy.clone();
    let mut trainer_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 1));
    let mut global = ReplayBuffer::new(cfg.buffer_max_size);
    global.seed_initial(
        &cur,
        &inst.env,
        cfg.seed_completions.max(1),
        &mut ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 0)),
    );

    let shared: Vec<Arc<Mutex<Shared>>> = (0..n)
        .map(|_| {
            Arc::new(Mutex::new(Shared {
                local: ReplayBuffer::new(None),
                snapshot: cur.clone(),
            }))
        })
        .collect();

    let mut handles = Vec::with_capacity(n);
    for j in 0..n {
        let shared = Arc::clone(&shared[j]);
        let enter = Arc::clone(&enter);
        let leave = Arc::clone(&leave);
        let sync_requested = Arc::clone(&sync_requested);
        let shutdown = Arc::clone(&shutdown);
        let epoch = Arc::clone(&epoch);
        let inst = inst.clone();
        let cfg = cfg.clone();
        handles.push(std::thread::spawn(move || -> Result<(), String> {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 2 + j as u64));
            let mut next_query = j % inst.query_set.len();
            loop {
                if sync_requested.load(Ordering::Acquire) {
                    // pause at a generation boundary for the rendezvous
                    enter.wait();
                    // read the flag between the barriers so it is pinned to
                    // this rendezvous: the trainer raises it either before the
                    // final `enter` or only after our `leave` arrival, so a
                    // post-`leave` read could see a later shutdown and skip
                    // the final barriers, deadlocking the remaining threads
                    let quit = shutdown.load(Ordering::Acquire);
                    leave.wait();
                    assert_eq!(epoch.load(Ordering::Acquire) % 2, 0, "rendezvous overlap");
                    if quit {
                        return Ok(());
                    }
                    continue;
                }
                let mut guard = shared.lock().expect("searcher state poisoned");
                let Shared { local, snapshot } = &mut *guard;
                searcher_generate_batch(
                    snapshot,
                    &inst,
                    next_query,
                    j,
                    cfg.oversample_s,
                    cfg.gen_temperature,
                    local,
                    &mut rng,
                )
                .map_err(|e| e.to_string())?;
                next_query = (next_query + cfg.num_searchers) % inst.query_set.len();
            }
        }));
    }

    let rendezvous = |global: &mut ReplayBuffer, cur: &PolicyParams, tag: u64| {
        sync_requested.store(true, Ordering::Release);
        enter.wait();
        epoch.fetch_add(1, Ordering::AcqRel); // odd: trainer owns shared state
        for s in &shared {
            let mut guard = s.lock().expect("searcher state poisoned");
            let Shared { local, snapshot } = &mut *guard;
            global.merge_local_into_global(local, tag);
            snapshot.copy_table_from(cur);
        }
        epoch.fetch_add(1, Ordering::AcqRel); // even again
        sync_requested.store(false, Ordering::Release);
        leave.wait();
    };

    let start = std::time::Instant::now();
    let mut busy_nanos: u128 = 0;
    let mut last_sync_step: u64 = 0;
    let mut tag_snapshot: std::collections::BTreeMap<u64, u64> = std::collections::BTreeMap::new();
    tag_snapshot.insert(0, 0);
    let mut metrics = RunMetrics {
        records: Vec::with_capacity(cfg.total_steps as usize),
        busy_units: 0,
        total_units: 0,
        recency_staleness: Vec::new(),
        sync_count: 0,
        final_params: cur.clone(),
    };

    let mut result: Result<(), RuntimeError> = Ok(());
    for t in 1..=cfg.total_steps {
        let s0 = t - 1;
        let beta = beta_at(&cfg.objective.beta, s0);
        let lr = lr_at(cfg.learning_rate, &cfg.lr_schedule, s0, cfg.total_steps);
        let step_start = std::time::Instant::now();
        let sampled = global.sample_batch_traced(&cfg.sampling, &mut trainer_rng);
        let (batch, traces) = match sampled {
            Ok(x) => x,
            Err(e) => {
                result = Err(e.into());
                break;
            }
        };
        for tr in &traces {
            if tr.recency {
                let snap = tag_snapshot[&global.latest_sync_tag()];
                for _ in 0..cfg.sampling.group_k {
                    metrics.recency_staleness.push((t - 1).saturating_sub(snap));
                }
            }
        }
        let step = objective_gradient(&cfg.objective, &batch, beta, &ref_params, &cur);
        let (grad, loss) = match step {
            Ok(x) => x,
            Err(e) => {
                result = Err(e.into());
                break;
            }
        };
        cur.ascend(&grad, lr);
        if cfg.objective.rule == UpdateRule::TbaPrime {
            if let Some(rho) = cfg.objective.reset_period_rho {
                maybe_reset_reference(t, rho, &cur, &mut ref_params);
            }
        }
        busy_nanos += step_start.elapsed().as_nanos();

        if let Some(f) = cfg.freeze_at_step {
            if t == f {
                global.freeze_capacity();
            }
        }
        if t % cfg.sync_period_k == 0 {
            tag_snapshot.insert(t, last_sync_step);
            rendezvous(&mut global, &cur, t);
            last_sync_step = t;
            metrics.sync_count += 1;
        }
        metrics.records.push(StepRecord {
            step: t,
            beta,
            mean_reward: batch_mean_reward(&batch),
            loss,
            grad_norm: grad.l2_norm(),
            buffer_size: global.total_count(),
            latest_sync_tag: global.latest_sync_tag(),
            utilization: busy_nanos as f64 / start.elapsed().as_nanos().max(1) as f64,
            tv_distance: f64::NAN,
            exact_kl: f64::NAN,
        });
    }

    // final rendezvous releases the searchers with the shutdown flag set
    shutdown.store(true, Ordering::Release);
    sync_requested.store(true, Ordering::Release);
    enter.wait();
    leave.wait();
    for h in handles {
        h.join()
            .map_err(|_| RuntimeError::NoData("searcher thread panicked".into()))?
            .map_err(RuntimeError::NoData)?;
    }
    result?;

    let elapsed = start.elapsed().as_nanos().max(1);
    metrics.busy_units = (busy_nanos / 1000) as u64;
    metrics.total_units = (elapsed / 1000) as u64;
    metrics.final_params = cur;
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs;
    use crate::objectives::BetaSchedule;

    fn tb_cfg(inst: &Instance) -> RunConfig {
        let mut cfg = RunConfig::defaults(ObjectiveConfig::new(
            UpdateRule::Tb,
            BetaSchedule::constant(inst.beta),
        ));
        cfg.total_steps = 40;
        cfg.seed_completions = 64;
        cfg.sampling.group_k = 4;
        cfg.oversample_s = 6;
        cfg.sampling.batch_b = 2;
        cfg
    }

    #[test]
    fn lr_schedules() {
        let wsd = LrSchedule::warmup_stable_decay(50, 450, 500);
        assert!((lr_at(1e-5, &wsd, 0, 1000) - 1e-5 / 50.0).abs() < 1e-18);
        assert!((lr_at(1e-5, &wsd, 49, 1000) - 1e-5).abs() < 1e-18);
        assert!((lr_at(1e-5, &wsd, 300, 1000) - 1e-5).abs() < 1e-18);
        assert!((lr_at(1e-5, &wsd, 750, 1000) - 0.5e-5).abs() < 1e-18);
        assert_eq!(lr_at(1e-5, &wsd, 1000, 1000), 0.0);
        assert_eq!(lr_at(0.1, &LrSchedule::constant(), 900, 1000), 0.1);
        assert!((lr_at(0.1, &LrSchedule::linear(), 500, 1000) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn zero_steps_zero_mutation() {
        let inst = envs::mr_like();
        let mut cfg = tb_cfg(&inst);
        cfg.total_steps = 0;
        let m = run_sync_baseline(&cfg, &inst).unwrap();
        assert!(m.records.is_empty());
        assert_eq!(m.final_params.logits(), inst.ref_policy.logits());
        let m = run_async(&cfg, &inst).unwrap();
        assert!(m.records.is_empty());
        assert_eq!(m.final_params.logits(), inst.ref_policy.logits());
    }

    #[test]
    fn simulated_async_is_deterministic() {
        let inst = envs::mr_like();
        let cfg = tb_cfg(&inst);
        let a = run_async(&cfg, &inst).unwrap();
        let b = run_async(&cfg, &inst).unwrap();
        // NaN columns (oracle disabled) make direct record equality useless;
        // the CSV rendering below covers every field byte-for-byte.
        assert_eq!(a.records.len(), b.records.len());
        assert_eq!(a.final_params.logits(), b.final_params.logits());
        let mut csv_a = Vec::new();
        let mut csv_b = Vec::new();
        write_metrics_csv(&a, &mut csv_a).unwrap();
        write_metrics_csv(&b, &mut csv_b).unwrap();
        assert_eq!(csv_a, csv_b);
    }

    #[test]
    fn sync_tags_monotone_and_on_schedule() {
        let inst = envs::mr_like();
        let mut cfg = tb_cfg(&inst);
        cfg.sync_period_k = 4;
        let m = run_async(&cfg, &inst).unwrap();
        let mut prev = 0;
        for r in &m.records {
            assert!(r.latest_sync_tag >= prev);
            if r.latest_sync_tag != prev {
                assert_eq!(r.latest_sync_tag % 4, 0);
            }
            prev = r.latest_sync_tag;
        }
        assert_eq!(m.sync_count, 10);
    }

    #[test]
    fn staleness_bounded_by_2k_minus_1() {
        let inst = envs::mr_like();
        for k in [1u64, 2, 5] {
            let mut cfg = tb_cfg(&inst);
            cfg.sync_period_k = k;
            cfg.sampling.m = 1.0;
            cfg.total_steps = 60;
            let m = run_async(&cfg, &inst).unwrap();
            assert!(!m.recency_staleness.is_empty());
            assert!(
                m.recency_staleness.iter().all(|&s| s <= 2 * k - 1),
                "k={k}: max staleness {:?}",
                m.max_staleness()
            );
        }
    }

    #[test]
    fn throughput_separation() {
        let inst = envs::mr_like();
        let mut cfg = tb_cfg(&inst);
        cfg.sync_period_k = 10;
        cfg.num_searchers = 3;
        cfg.sim_latency = (5, 1);
        cfg.total_steps = 100;
        let a = run_async(&cfg, &inst).unwrap();
        assert!(a.utilization() >= 0.8, "async utilization {}", a.utilization());
        let s = run_sync_baseline(&cfg, &inst).unwrap();
        assert!(s.utilization() <= 0.25, "sync utilization {}", s.utilization());
        let report = utilization_report(&a).unwrap();
        assert!((report.syncs_per_100_steps - 10.0).abs() < 1e-9);
    }

    #[test]
    fn utilization_report_requires_data() {
        let inst = envs::tiny();
        let mut cfg = tb_cfg(&inst);
        cfg.sampling.batch_b = 1;
        cfg.total_steps = 0;
        let m = run_sync_baseline(&cfg, &inst).unwrap();
        assert!(matches!(
            utilization_report(&m),
            Err(RuntimeError::NoData(_))
        ));
    }

    #[test]
    fn zero_seed_waits_for_first_merge() {
        let inst = envs::tiny();
        let mut cfg = tb_cfg(&inst);
        cfg.sampling.batch_b = 1;
        cfg.seed_completions = 0;
        cfg.total_steps = 10;
        cfg.oversample_s = 8;
        cfg.sampling.group_k = 2;
        let m = run_async(&cfg, &inst).unwrap();
        assert_eq!(m.records.len(), 10);
    }

    #[test]
    fn oracle_columns_present_when_enabled() {
        let inst = envs::tiny();
        let mut cfg = tb_cfg(&inst);
        cfg.sampling.batch_b = 1;
        cfg.total_steps = 6;
        cfg.oracle_every = 3;
        let m = run_async(&cfg, &inst).unwrap();
        assert!(m.records[2].tv_distance.is_finite());
        assert!(m.records[0].tv_distance.is_nan());
        assert!(m.records[5].exact_kl.is_finite());
        for r in &m.records {
            assert!((0.0..=1.0).contains(&r.utilization));
        }
    }

    #[test]
    fn concurrent_mode_runs_and_trains() {
        let inst = envs::mr_like();
        let mut cfg = tb_cfg(&inst);
        cfg.mode = RunMode::Concurrent;
        cfg.total_steps = 20;
        let m = run_async(&cfg, &inst).unwrap();
        assert_eq!(m.records.len(), 20);
        assert!(m.sync_count >= 1);
        assert_ne!(m.final_params.logits(), inst.ref_policy.logits());
    }

    #[test]
    fn invalid_configs_rejected() {
        let inst = envs::tiny();
        let mut cfg = tb_cfg(&inst);
        cfg.num_searchers = 0;
        assert!(matches!(
            run_async(&cfg, &inst),
            Err(RuntimeError::InvalidConfig(_))
        ));
        let mut cfg = tb_cfg(&inst);
        cfg.oversample_s = 1;
        assert!(run_async(&cfg, &inst).is_err());
        let mut cfg = tb_cfg(&inst);
        cfg.sampling.m = 1.5;
        assert!(run_async(&cfg, &inst).is_err());
    }

    #[test]
    fn freeze_caps_buffer_growth() {
        let inst = envs::mr_like();
        let mut cfg = tb_cfg(&inst);
        cfg.total_steps = 40;
        cfg.freeze_at_step = Some(10);
        let m = run_async(&cfg, &inst).unwrap();
        let size_at_freeze = m.records[9].buffer_size;
        for r in &m.records[10..] {
            assert!(r.buffer_size <= size_at_freeze);
        }
    }
}
