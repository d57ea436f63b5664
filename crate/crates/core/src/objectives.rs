//! Update rules: the sequence-level trajectory-balance (VarGrad) loss and
//! gradient, plus the comparison family (Proximal RLOO and the token-level
//! clipped-importance-sampling rules), beta schedules, and reference resets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::Gradient;
use crate::policy::{Completion, PolicyParams};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
}

/// B groups of exactly K completions each, all for the same query within a
/// group.
#[derive(Debug, Clone)]
pub struct GroupBatch {
    groups: Vec<Group>,
}

#[derive(Debug, Clone)]
pub struct Group {
    pub query_id: usize,
    pub completions: Vec<Completion>,
}

impl GroupBatch {
    pub fn new(groups: Vec<Group>) -> Result<Self, ObjectiveError> {
        if groups.is_empty() {
            return Err(ObjectiveError::InvalidInput("empty batch".into()));
        }
        let k = groups[0].completions.len();
        if k < 2 {
            return Err(ObjectiveError::InvalidConfig(format!(
                "group size K must be >= 2, got {k}"
            )));
        }
        for g in &groups {
            if g.completions.len() != k {
                return Err(ObjectiveError::InvalidInput(
                    "groups must all have exactly K completions".into(),
                ));
            }
            if g.completions.iter().any(|c| c.query_id != g.query_id) {
                return Err(ObjectiveError::InvalidInput(
                    "completion query_id does not match its group".into(),
                ));
            }
        }
        Ok(Self { groups })
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn group_size(&self) -> usize {
        self.groups[0].completions.len()
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaKind {
    Constant,
    LinearDecay,
    LinearDecayWithAbruptEnd,
}

/// Schedule for the KL coefficient beta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub kind: BetaKind,
    pub beta_init: f64,
    pub beta_final: f64,
    pub decay_end_step: u64,
    pub abrupt_end_step: Option<u64>,
}

impl BetaSchedule {
    pub fn constant(beta: f64) -> Self {
        Self {
            kind: BetaKind::Constant,
            beta_init: beta,
            beta_final: beta,
            decay_end_step: 0,
            abrupt_end_step: None,
        }
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.beta_init > 0.0) || !(self.beta_final > 0.0) {
            return Err(ObjectiveError::InvalidConfig(
                "beta values must be > 0".into(),
            ));
        }
        if self.kind != BetaKind::Constant && self.beta_final > self.beta_init {
            return Err(ObjectiveError::InvalidConfig(
                "beta_final must be <= beta_init for decay schedules".into(),
            ));
        }
        if let Some(a) = self.abrupt_end_step {
            if a > self.decay_end_step {
                return Err(ObjectiveError::InvalidConfig(
                    "abrupt_end_step must be <= decay_end_step".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Evaluates the beta schedule at a trainer step.
pub fn beta_at(schedule: &BetaSchedule, step: u64) -> f64 {
    match schedule.kind {
        BetaKind::Constant => schedule.beta_init,
        BetaKind::LinearDecay => linear_beta(schedule, step),
        BetaKind::LinearDecayWithAbruptEnd => {
            let abrupt = schedule.abrupt_end_step.unwrap_or(schedule.decay_end_step);
            if step >= abrupt {
                schedule.beta_final
            } else {
                linear_beta(schedule, step)
            }
        }
    }
}

fn linear_beta(schedule: &BetaSchedule, step: u64) -> f64 {
    if schedule.decay_end_step == 0 || step >= schedule.decay_end_step {
        return schedule.beta_final;
    }
    let frac = step as f64 / schedule.decay_end_step as f64;
    schedule.beta_init + (schedule.beta_final - schedule.beta_init) * frac
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    Tb,
    ProximalRloo,
    Cispo,
    DrGrpo,
    KimiK2,
    TbaPrime,
}

/// Everything an update rule needs besides the batch and the two policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub rule: UpdateRule,
    pub beta: BetaSchedule,
    /// Kimi-K2 log-ratio coefficient.
    pub tau: f64,
    pub is_clip_low: f64,
    pub is_clip_high: f64,
    /// When set, gradient masking replaces ratio clipping.
    pub icepop_band: Option<(f64, f64)>,
    pub reset_period_rho: Option<u64>,
    /// Sequence-level TB vs token-level family rules.
    pub token_level: bool,
    /// Guard for CISPO reward-std normalization.
    pub std_eps: f64,
    /// Population (true) vs sample (false) std for CISPO.
    pub population_std: bool,
    /// Compare the current policy against the tempered generation distribution
    /// (when available) instead of the untempered behavior policy.
    pub tempered_is: bool,
}

impl ObjectiveConfig {
    pub fn new(rule: UpdateRule, beta: BetaSchedule) -> Self {
        Self {
            rule,
            beta,
            tau: 0.005,
            is_clip_low: 0.0,
            is_clip_high: 8.0,
            icepop_band: None,
            reset_period_rho: None,
            token_level: !matches!(rule, UpdateRule::Tb | UpdateRule::ProximalRloo),
            std_eps: 1e-6,
            population_std: true,
            tempered_is: false,
        }
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        self.beta.validate()?;
        if self.std_eps <= 0.0 {
            return Err(ObjectiveError::InvalidConfig("std_eps must be > 0".into()));
        }
        if self.is_clip_low < 0.0 || !(self.is_clip_high > 0.0) {
            return Err(ObjectiveError::InvalidConfig(
                "clip bounds must satisfy low >= 0 and high > 0".into(),
            ));
        }
        if self.is_clip_high.is_finite() && !(self.is_clip_low <= 1.0 && 1.0 <= self.is_clip_high)
        {
            return Err(ObjectiveError::InvalidConfig(
                "clip bounds must straddle 1".into(),
            ));
        }
        if let Some((lo, hi)) = self.icepop_band {
            if !(lo < 1.0 && 1.0 < hi) {
                return Err(ObjectiveError::InvalidConfig(
                    "icepop band must straddle 1".into(),
                ));
            }
        }
        if self.tau < 0.0 {
            return Err(ObjectiveError::InvalidConfig("tau must be >= 0".into()));
        }
        if let Some(rho) = self.reset_period_rho {
            if rho < 1 {
                return Err(ObjectiveError::InvalidConfig("rho must be >= 1".into()));
            }
        }
        Ok(())
    }
}

fn seq_logprobs(
    params: &PolicyParams,
    group: &Group,
) -> Result<Vec<f64>, ObjectiveError> {
    group
        .completions
        .iter()
        .map(|c| Ok(params.logprob(c.query_id, &c.tokens)?.0))
        .collect()
}

fn rewards_of(group: &Group) -> Result<Vec<f64>, ObjectiveError> {
    group
        .completions
        .iter()
        .map(|c| c.reward_or_err().map_err(ObjectiveError::Policy))
        .collect()
}

/// K-sample batch estimate of log Z: mean of
/// log ref(y) - log cur(y) + r(y)/beta. Treated as a detached constant by the
/// gradients downstream.
pub fn estimate_log_z(
    group: &Group,
    beta: f64,
    ref_params: &PolicyParams,
    cur: &PolicyParams,
) -> Result<f64, ObjectiveError> {
    if beta == 0.0 {
        return Err(ObjectiveError::InvalidConfig(
            "beta must be nonzero for the log Z estimate".into(),
        ));
    }
    let lp_cur = seq_logprobs(cur, group)?;
    let lp_ref = seq_logprobs(ref_params, group)?;
    let rewards = rewards_of(group)?;
    let k = group.completions.len() as f64;
    let sum: f64 = (0..group.completions.len())
        .map(|j| lp_ref[j] - lp_cur[j] + rewards[j] / beta)
        .sum();
    Ok(sum / k)
}

/// Mean squared VarGrad residual over the batch. Nonnegative; zero exactly at
/// the posterior.
pub fn tb_vargrad_loss(
    batch: &GroupBatch,
    beta: f64,
    ref_params: &PolicyParams,
    cur: &PolicyParams,
) -> Result<f64, ObjectiveError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for group in batch.groups() {
        let log_z = estimate_log_z(group, beta, ref_params, cur)?;
        let lp_cur = seq_logprobs(cur, group)?;
        let lp_ref = seq_logprobs(ref_params, group)?;
        let rewards = rewards_of(group)?;
        for j in 0..group.completions.len() {
            let residual = log_z + lp_cur[j] - lp_ref[j] - rewards[j] / beta;
            total += residual * residual;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Group advantages: (r - r_mean) - beta * (kl_hat - kl_mean), with
/// kl_hat = log cur(y) - log ref(y). Sums to zero over a group.
pub fn tb_advantages(
    group: &Group,
    beta: f64,
    ref_params: &PolicyParams,
    cur: &PolicyParams,
) -> Result<Vec<f64>, ObjectiveError> {
    let lp_cur = seq_logprobs(cur, group)?;
    let lp_ref = seq_logprobs(ref_params, group)?;
    let rewards = rewards_of(group)?;
    let k = group.completions.len() as f64;
    let r_mean = rewards.iter().sum::<f64>() / k;
    let kl: Vec<f64> = (0..group.completions.len())
        .map(|j| lp_cur[j] - lp_ref[j])
        .collect();
    let kl_mean = kl.iter().sum::<f64>() / k;
    Ok((0..group.completions.len())
        .map(|j| (rewards[j] - r_mean) - beta * (kl[j] - kl_mean))
        .collect())
}

/// Ascent gradient of the TB objective: (1/(BK)) sum A * grad log cur(y).
/// Equals -(beta/2) times the gradient of `tb_vargrad_loss`.
pub fn tb_gradient(
    batch: &GroupBatch,
    beta: f64,
    ref_params: &PolicyParams,
    cur: &PolicyParams,
) -> Result<Gradient, ObjectiveError> {
    let scale = 1.0 / (batch.num_groups() * batch.group_size()) as f64;
    let mut grad = Gradient::new();
    for group in batch.groups() {
        let advantages = tb_advantages(group, beta, ref_params, cur)?;
        for (c, &a) in group.completions.iter().zip(&advantages) {
            let g = cur.grad_logprob(c.query_id, &c.tokens)?;
            grad.add_scaled(&g, scale * a);
        }
    }
    Ok(grad)
}

/// Proximal RLOO: sequence-level clipped importance ratio against the
/// reference policy, leave-one-out reward baseline.
pub fn rloo_gradient(
    batch: &GroupBatch,
    ref_params: &PolicyParams,
    cur: &PolicyParams,
    clip_high: f64,
) -> Result<Gradient, ObjectiveError> {
    let k = batch.group_size();
    let scale = 1.0 / (batch.num_groups() * k) as f64;
    let mut grad = Gradient::new();
    for group in batch.groups() {
        let lp_cur = seq_logprobs(cur, group)?;
        let lp_ref = seq_logprobs(ref_params, group)?;
        let rewards = rewards_of(group)?;
        let sum: f64 = rewards.iter().sum();
        for j in 0..k {
            let baseline = (sum - rewards[j]) / (k - 1) as f64;
            let advantage = rewards[j] - baseline;
            let ratio = (lp_cur[j] - lp_ref[j]).exp().min(clip_high);
            let g = cur.grad_logprob(group.completions[j].query_id, &group.completions[j].tokens)?;
            grad.add_scaled(&g, scale * ratio * advantage);
        }
    }
    Ok(grad)
}

fn behavior_logprobs<'a>(
    c: &'a Completion,
    tempered_is: bool,
) -> &'a [f64] {
    match (&c.tempered_logprobs, tempered_is) {
        (Some(t), true) => t,
        _ => &c.behavior_logprobs,
    }
}

fn std_of(rewards: &[f64], population: bool, eps: f64) -> f64 {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let ss: f64 = rewards.iter().map(|r| (r - mean) * (r - mean)).sum();
    let denom = if population { n } else { n - 1.0 };
    (ss / denom).sqrt().max(eps)
}

/// Token-level family: per-token clipped (or IcePop-masked) importance ratio
/// times a per-sequence stop-gradient coefficient, summed over tokens and
/// divided by the total token count in the batch.
pub fn token_family_gradient(
    batch: &GroupBatch,
    cfg: &ObjectiveConfig,
    beta: f64,
    ref_params: &PolicyParams,
    cur: &PolicyParams,
) -> Result<Gradient, ObjectiveError> {
    cfg.validate()?;
    if !matches!(
        cfg.rule,
        UpdateRule::Cispo | UpdateRule::DrGrpo | UpdateRule::KimiK2 | UpdateRule::TbaPrime
    ) {
        return Err(ObjectiveError::InvalidConfig(format!(
            "{:?} is not a token-level rule",
            cfg.rule
        )));
    }
    let mut grad = Gradient::new();
    let mut total_tokens = 0usize;
    for group in batch.groups() {
        let rewards = rewards_of(group)?;
        let k = group.completions.len() as f64;
        let r_mean = rewards.iter().sum::<f64>() / k;

        // per-sequence current log-probs (per token) and the two log-ratios
        let mut cur_per_token = Vec::with_capacity(group.completions.len());
        let mut log_lambda = Vec::with_capacity(group.completions.len());
        let mut log_cap_lambda = Vec::with_capacity(group.completions.len());
        for c in &group.completions {
            let gen_lp = behavior_logprobs(c, cfg.tempered_is);
            if gen_lp.len() != c.tokens.len() {
                return Err(ObjectiveError::InvalidInput(
                    "per-token behavior log-probabilities missing or mismatched".into(),
                ));
            }
            let (cur_total, per_token) = cur.logprob(c.query_id, &c.tokens)?;
            let (ref_total, _) = ref_params.logprob(c.query_id, &c.tokens)?;
            let gen_total: f64 = gen_lp.iter().sum();
            log_lambda.push(cur_total - gen_total);
            log_cap_lambda.push(cur_total - ref_total);
            cur_per_token.push(per_token);
        }
        let mean_log_cap = log_cap_lambda.iter().sum::<f64>() / k;

        for (j, c) in group.completions.iter().enumerate() {
            let coeff = match cfg.rule {
                UpdateRule::Cispo => {
                    (rewards[j] - r_mean) / std_of(&rewards, cfg.population_std, cfg.std_eps)
                }
                UpdateRule::DrGrpo => rewards[j] - r_mean,
                UpdateRule::KimiK2 => rewards[j] - r_mean - cfg.tau * log_lambda[j],
                UpdateRule::TbaPrime => {
                    rewards[j] - r_mean - beta * (log_cap_lambda[j] - mean_log_cap)
                }
                _ => unreachable!(),
            };
            let gen_lp = behavior_logprobs(c, cfg.tempered_is);
            for (t, &tok_lp) in cur_per_token[j].iter().enumerate() {
                total_tokens += 1;
                let lambda_t = (tok_lp - gen_lp[t]).exp();
                let weight = match cfg.icepop_band {
                    Some((lo, hi)) => {
                        if lambda_t <= lo || lambda_t >= hi {
                            continue;
                        }
                        lambda_t
                    }
                    None => lambda_t.clamp(cfg.is_clip_low, cfg.is_clip_high),
                };
                let prefix = &c.tokens[..t];
                let ctx = cur.context_index(prefix);
                let probs = crate::policy::row_softmax(cur, c.query_id, ctx);
                for (v, &p) in probs.iter().enumerate() {
                    let one_hot = if v == c.tokens[t] { 1.0 } else { 0.0 };
                    grad.accumulate(
                        cur.logit_index(c.query_id, ctx, v),
                        weight * coeff * (one_hot - p),
                    );
                }
            }
        }
    }
    grad.scale(1.0 / total_tokens as f64);
    Ok(grad)
}

/// Copies the current policy into the reference every `rho` steps. Returns
/// whether a reset happened.
pub fn maybe_reset_reference(
    step: u64,
    rho: u64,
    cur: &PolicyParams,
    ref_params: &mut PolicyParams,
) -> bool {
    assert!(rho >= 1, "rho must be >= 1");
    if step > 0 && step % rho == 0 {
        ref_params.copy_table_from(cur);
        true
    } else {
        false
    }
}
