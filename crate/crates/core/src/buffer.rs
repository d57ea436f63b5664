//! Replay buffers: per-query ordered storage with sync tagging, recency- and
//! reward-prioritized group sampling, seeding, and oldest-first eviction.

use std::collections::BTreeMap;
use std::collections::VecDeque;
use std::io::{self, BufRead, Write};

use rand::Rng;
use thiserror::Error;

use crate::envs::Environment;
use crate::objectives::{Group, GroupBatch};
use crate::policy::{Completion, PolicyParams};

#[derive(Debug, Error)]
pub enum BufferError {
    #[error("no data: {0}")]
    NoData(String),
    #[error("record format error: {0}")]
    Record(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Objective(#[from] crate::objectives::ObjectiveError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    SoftmaxOfReward,
    Uniform,
}

/// Group-sampling knobs: the recency-mixture probability `m`, the fallback
/// reward prioritization, and the batch shape.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SamplingConfig {
    pub m: f64,
    pub reward_mode: RewardMode,
    pub softmax_temperature: f64,
    pub group_k: usize,
    pub batch_b: usize,
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), BufferError> {
        if !(0.0..=1.0).contains(&self.m) {
            return Err(BufferError::Record(format!("m must be in [0,1], got {}", self.m)));
        }
        if self.group_k < 2 {
            return Err(BufferError::Record(format!(
                "group_k must be >= 2, got {}",
                self.group_k
            )));
        }
        if self.batch_b < 1 {
            return Err(BufferError::Record("batch_b must be >= 1".into()));
        }
        if !(self.softmax_temperature > 0.0) {
            return Err(BufferError::Record(format!(
                "softmax_temperature must be > 0, got {}",
                self.softmax_temperature
            )));
        }
        Ok(())
    }
}

/// One group's worth of sampling provenance, for staleness accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupTrace {
    pub query_id: usize,
    /// The recency strategy was drawn and latest-tag candidates existed.
    pub recency: bool,
}

/// A replay buffer: insertion-ordered lists per query, a global insertion
/// order for eviction, and the tag of the most recent merge.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    per_query: BTreeMap<usize, VecDeque<Completion>>,
    /// Query id of every stored completion, globally oldest first.
    global_order: VecDeque<usize>,
    max_size: Option<usize>,
    latest_sync_tag: u64,
    total_count: usize,
}

impl ReplayBuffer {
    pub fn new(max_size: Option<usize>) -> Self {
        Self {
            max_size,
            ..Self::default()
        }
    }

    pub fn total_count(&self) -> usize {
        self.total_count
    }

    pub fn is_empty(&self) -> bool {
        self.total_count == 0
    }

    pub fn latest_sync_tag(&self) -> u64 {
        self.latest_sync_tag
    }

    pub fn max_size(&self) -> Option<usize> {
        self.max_size
    }

    /// Stops further growth: future inserts beyond the current size evict.
    pub fn freeze_capacity(&mut self) {
        self.max_size = Some(self.total_count.max(1));
    }

    pub fn query_len(&self, query_id: usize) -> usize {
        self.per_query.get(&query_id).map_or(0, VecDeque::len)
    }

    pub fn queries_with_data(&self) -> Vec<usize> {
        self.per_query
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(&q, _)| q)
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Completion> {
        self.per_query.values().flatten()
    }

    /// Appends a completion to its query's list, evicting the globally oldest
    /// items if the capacity is exceeded. The reward must be set.
    pub fn insert(&mut self, completion: Completion) {
        assert!(completion.reward.is_some(), "inserted completion has no reward");
        self.global_order.push_back(completion.query_id);
        self.per_query
            .entry(completion.query_id)
            .or_default()
            .push_back(completion);
        self.total_count += 1;
        if let Some(cap) = self.max_size {
            while self.total_count > cap {
                self.evict_oldest();
            }
        }
    }

    /// Removes the single globally oldest completion.
    pub fn evict_oldest(&mut self) {
        if let Some(q) = self.global_order.pop_front() {
            let list = self.per_query.get_mut(&q).expect("order entry without list");
            list.pop_front().expect("order entry without completion");
            self.total_count -= 1;
        }
    }

    /// Drains `local` into `self`, stamping every completion with
    /// `trainer_step` and advancing `latest_sync_tag`.
    pub fn merge_local_into_global(&mut self, local: &mut ReplayBuffer, trainer_step: u64) {
        for (_, mut list) in std::mem::take(&mut local.per_query) {
            for mut c in list.drain(..) {
                c.sync_tag = trainer_step;
                self.insert(c);
            }
        }
        local.global_order.clear();
        local.total_count = 0;
        self.latest_sync_tag = trainer_step;
    }

    /// Fills the buffer with `n` on-policy completions round-robin over the
    /// query set, rewarded and tagged with sync_tag 0.
    pub fn seed_initial<R: Rng + ?Sized>(
        &mut self,
        policy: &PolicyParams,
        env: &Environment,
        n: usize,
        rng: &mut R,
    ) {
        for i in 0..n {
            let q = i % policy.num_queries();
            let mut c = policy
                .sample(q, env.max_len, 1.0, rng)
                .expect("seeding with a valid policy");
            c.reward = Some(env.reward(q, &c.tokens));
            c.sync_tag = 0;
            self.insert(c);
        }
    }

    /// Draws B groups of K completions. Per group: a query uniform over those
    /// with data (B distinct queries), then with probability `m` K uniform
    /// draws from the latest-sync-tag items, otherwise K draws weighted by
    /// `reward_mode`. Fewer than K candidates means drawing with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        cfg: &SamplingConfig,
        rng: &mut R,
    ) -> Result<GroupBatch, BufferError> {
        Ok(self.sample_batch_traced(cfg, rng)?.0)
    }

    /// `sample_batch` plus per-group provenance (which strategy applied).
    pub fn sample_batch_traced<R: Rng + ?Sized>(
        &self,
        cfg: &SamplingConfig,
        rng: &mut R,
    ) -> Result<(GroupBatch, Vec<GroupTrace>), BufferError> {
        cfg.validate()?;
        if self.is_empty() {
            return Err(BufferError::NoData("replay buffer is empty".into()));
        }
        let mut queries = self.queries_with_data();
        if queries.len() < cfg.batch_b {
            return Err(BufferError::NoData(format!(
                "need {} queries with data, have {}",
                cfg.batch_b,
                queries.len()
            )));
        }
        // B distinct queries, uniform: partial Fisher-Yates
        for i in 0..cfg.batch_b {
            let j = i + rng.random_range(0..queries.len() - i);
            queries.swap(i, j);
        }
        queries.truncate(cfg.batch_b);

        let mut groups = Vec::with_capacity(cfg.batch_b);
        let mut traces = Vec::with_capacity(cfg.batch_b);
        for q in queries {
            let list = &self.per_query[&q];
            let recency_draw = rng.random::<f64>() < cfg.m;
            let latest: Vec<usize> = if recency_draw {
                (0..list.len())
                    .filter(|&i| list[i].sync_tag == self.latest_sync_tag)
                    .collect()
            } else {
                Vec::new()
            };
            let recency = recency_draw && !latest.is_empty();
            let completions = if recency {
                let picks = choose_uniform(&latest, cfg.group_k, rng);
                picks.into_iter().map(|i| list[i].clone()).collect()
            } else {
                let all: Vec<usize> = (0..list.len()).collect();
                let picks = match cfg.reward_mode {
                    RewardMode::Uniform => choose_uniform(&all, cfg.group_k, rng),
                    RewardMode::SoftmaxOfReward => {
                        let weights: Vec<f64> = all
                            .iter()
                            .map(|&i| {
                                (list[i].reward.expect("stored completions carry rewards")
                                    / cfg.softmax_temperature)
                                    .exp()
                            })
                            .collect();
                        choose_weighted(&all, &weights, cfg.group_k, rng)
                    }
                };
                picks.into_iter().map(|i| list[i].clone()).collect()
            };
            groups.push(Group {
                query_id: q,
                completions,
            });
            traces.push(GroupTrace {
                query_id: q,
                recency,
            });
        }
        Ok((GroupBatch::new(groups)?, traces))
    }

    /// Writes one completion per line:
    /// `query_id tokens reward sync_tag searcher_id behavior_logprob`,
    /// tokens comma-joined, globally oldest first within each query.
    pub fn dump<W: Write>(&self, mut w: W) -> Result<(), BufferError> {
        let mut buf = String::new();
        for c in self.iter() {
            use std::fmt::Write as _;
            let tokens: Vec<String> = c.tokens.iter().map(ToString::to_string).collect();
            writeln!(
                buf,
                "{} {} {:.16e} {} {} {:.16e}",
                c.query_id,
                tokens.join(","),
                c.reward.expect("stored completions carry rewards"),
                c.sync_tag,
                c.searcher_id,
                c.total_behavior_logprob,
            )
            .expect("write to string");
        }
        w.write_all(buf.as_bytes())?;
        Ok(())
    }

    /// Reads records written by `dump`. Restored completions keep only the
    /// sequence-level behavior log-prob (per-token terms are not serialized),
    /// which is enough for analysis and the sequence-level rules.
    pub fn restore<R: BufRead>(r: R, max_size: Option<usize>) -> Result<Self, BufferError> {
        let mut buffer = Self::new(max_size);
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 6 {
                return Err(BufferError::Record(format!(
                    "expected 6 fields, got {}: {line}",
                    fields.len()
                )));
            }
            let bad = |what: &str| BufferError::Record(format!("bad {what}: {line}"));
            let query_id: usize = fields[0].parse().map_err(|_| bad("query_id"))?;
            let tokens: Vec<usize> = fields[1]
                .split(',')
                .map(|t| t.parse().map_err(|_| bad("token")))
                .collect::<Result<_, _>>()?;
            let reward: f64 = fields[2].parse().map_err(|_| bad("reward"))?;
            let sync_tag: u64 = fields[3].parse().map_err(|_| bad("sync_tag"))?;
            let searcher_id: usize = fields[4].parse().map_err(|_| bad("searcher_id"))?;
            let logprob: f64 = fields[5].parse().map_err(|_| bad("behavior_logprob"))?;
            let tag = sync_tag;
            buffer.insert(Completion {
                query_id,
                tokens,
                behavior_logprobs: Vec::new(),
                total_behavior_logprob: logprob,
                tempered_logprobs: None,
                reward: Some(reward),
                sync_tag: tag,
                searcher_id,
                gen_temperature: 1.0,
            });
            buffer.latest_sync_tag = buffer.latest_sync_tag.max(tag);
        }
        Ok(buffer)
    }

    #[cfg(test)]
    fn check_consistent(&self) {
        let sum: usize = self.per_query.values().map(VecDeque::len).sum();
        assert_eq!(sum, self.total_count);
        assert_eq!(self.global_order.len(), self.total_count);
        if let Some(cap) = self.max_size {
            assert!(self.total_count <= cap);
        }
    }
}

/// K indices from `pool`, uniform: without replacement when the pool has at
/// least K entries, with replacement otherwise.
fn choose_uniform<R: Rng + ?Sized>(pool: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    if pool.len() >= k {
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        for i in 0..k {
            let j = i + rng.random_range(0..idx.len() - i);
            idx.swap(i, j);
        }
        idx[..k].iter().map(|&i| pool[i]).collect()
    } else {
        (0..k)
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect()
    }
}

/// K indices from `pool` proportional to `weights`: sequential without
/// replacement when possible, with replacement otherwise.
fn choose_weighted<R: Rng + ?Sized>(
    pool: &[usize],
    weights: &[f64],
    k: usize,
    rng: &mut R,
) -> Vec<usize> {
    let replacement = pool.len() < k;
    let mut remaining: Vec<usize> = (0..pool.len()).collect();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = remaining.iter().map(|&i| weights[i]).sum();
        let mut u = rng.random::<f64>() * total;
        let mut chosen = remaining.len() - 1;
        for (pos, &i) in remaining.iter().enumerate() {
            u -= weights[i];
            if u < 0.0 {
                chosen = pos;
                break;
            }
        }
        out.push(pool[remaining[chosen]]);
        if !replacement {
            remaining.swap_remove(chosen);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn comp(query_id: usize, tokens: Vec<usize>, reward: f64, sync_tag: u64) -> Completion {
        Completion {
            query_id,
            tokens,
            behavior_logprobs: vec![0.0],
            total_behavior_logprob: 0.0,
            tempered_logprobs: None,
            reward: Some(reward),
            sync_tag,
            searcher_id: 0,
            gen_temperature: 1.0,
        }
    }

    #[test]
    fn insert_counts_and_order() {
        let mut b = ReplayBuffer::new(None);
        b.insert(comp(0, vec![0], 0.0, 0));
        assert_eq!(b.total_count(), 1);
        b.insert(comp(0, vec![1], 1.0, 0));
        b.insert(comp(2, vec![2], 0.5, 0));
        b.check_consistent();
        let first: Vec<_> = b.iter().filter(|c| c.query_id == 0).collect();
        assert_eq!(first[0].tokens, vec![0]);
        assert_eq!(first[1].tokens, vec![1]);
        assert_eq!(b.queries_with_data(), vec![0, 2]);
    }

    #[test]
    fn capacity_evicts_globally_oldest() {
        let mut b = ReplayBuffer::new(Some(3));
        b.insert(comp(0, vec![0], 0.0, 0));
        b.insert(comp(1, vec![1], 0.0, 0));
        b.insert(comp(0, vec![2], 0.0, 0));
        b.insert(comp(2, vec![0], 0.0, 0)); // evicts the very first insert
        b.check_consistent();
        assert_eq!(b.total_count(), 3);
        let q0: Vec<_> = b.iter().filter(|c| c.query_id == 0).collect();
        assert_eq!(q0.len(), 1);
        assert_eq!(q0[0].tokens, vec![2]);
        // survivors are exactly the insertion-order suffix
        assert_eq!(b.query_len(1), 1);
        assert_eq!(b.query_len(2), 1);
    }

    #[test]
    fn eviction_is_noop_under_capacity() {
        let mut b = ReplayBuffer::new(Some(10));
        b.insert(comp(0, vec![0], 0.0, 0));
        assert_eq!(b.total_count(), 1);
        b.check_consistent();
    }

    #[test]
    fn merge_tags_and_advances_latest() {
        let mut g = ReplayBuffer::new(None);
        let mut l = ReplayBuffer::new(None);
        for i in 0..10 {
            l.insert(comp(i % 3, vec![0], 0.0, 0));
        }
        g.merge_local_into_global(&mut l, 40);
        assert_eq!(g.total_count(), 10);
        assert!(g.iter().all(|c| c.sync_tag == 40));
        assert_eq!(g.latest_sync_tag(), 40);
        assert!(l.is_empty());
        let mut l2 = ReplayBuffer::new(None);
        l2.insert(comp(0, vec![1], 1.0, 0));
        g.merge_local_into_global(&mut l2, 42);
        assert_eq!(g.latest_sync_tag(), 42);
        // empty merge keeps counts
        let mut empty = ReplayBuffer::new(None);
        let before = g.total_count();
        g.merge_local_into_global(&mut empty, 44);
        assert_eq!(g.total_count(), before);
        g.check_consistent();
    }

    #[test]
    fn seed_round_robin_and_determinism() {
        let inst = envs::mr_like();
        let mut a = ReplayBuffer::new(None);
        let mut b = ReplayBuffer::new(None);
        a.seed_initial(
            &inst.ref_policy,
            &inst.env,
            16,
            &mut ChaCha8Rng::seed_from_u64(3),
        );
        b.seed_initial(
            &inst.ref_policy,
            &inst.env,
            16,
            &mut ChaCha8Rng::seed_from_u64(3),
        );
        assert_eq!(a.total_count(), 16);
        for q in 0..8 {
            assert_eq!(a.query_len(q), 2); // 16 over 8 queries round-robin
        }
        let av: Vec<_> = a.iter().cloned().collect();
        let bv: Vec<_> = b.iter().cloned().collect();
        assert_eq!(av, bv);
        assert!(av.iter().all(|c| c.sync_tag == 0 && c.reward.is_some()));
    }

    fn cfg(m: f64, k: usize, b: usize) -> SamplingConfig {
        SamplingConfig {
            m,
            reward_mode: RewardMode::SoftmaxOfReward,
            softmax_temperature: 1.0,
            group_k: k,
            batch_b: b,
        }
    }

    #[test]
    fn recency_mode_only_latest_tag() {
        let mut g = ReplayBuffer::new(None);
        for i in 0..20 {
            g.insert(comp(0, vec![i % 3], 0.1, 0));
        }
        let mut l = ReplayBuffer::new(None);
        for i in 0..5 {
            l.insert(comp(0, vec![i % 3], 0.9, 0));
        }
        g.merge_local_into_global(&mut l, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let batch = g.sample_batch(&cfg(1.0, 3, 1), &mut rng).unwrap();
            for grp in batch.groups() {
                assert!(grp.completions.iter().all(|c| c.sync_tag == 7));
            }
        }
    }

    #[test]
    fn single_candidate_repeats_with_replacement() {
        let mut g = ReplayBuffer::new(None);
        g.insert(comp(0, vec![1], 1.0, 0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = g.sample_batch(&cfg(0.0, 4, 1), &mut rng).unwrap();
        let grp = &batch.groups()[0];
        assert_eq!(grp.completions.len(), 4);
        assert!(grp.completions.iter().all(|c| c.tokens == vec![1]));
    }

    #[test]
    fn softmax_reward_frequencies() {
        // two candidates, rewards (1, 0): with-replacement draws should pick
        // the reward-1 item with probability e/(e+1)
        let mut g = ReplayBuffer::new(None);
        g.insert(comp(0, vec![0], 1.0, 0));
        g.insert(comp(0, vec![1], 0.0, 0));
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n_batches = 2500usize;
        let k = 4usize;
        let mut hits = 0usize;
        for _ in 0..n_batches {
            let batch = g.sample_batch(&cfg(0.0, k, 1), &mut rng).unwrap();
            hits += batch.groups()[0]
                .completions
                .iter()
                .filter(|c| c.tokens == vec![0])
                .count();
        }
        let n = (n_batches * k) as f64;
        let p = 0.7310585786300049;
        let freq = hits as f64 / n;
        let se = (p * (1.0 - p) / n).sqrt();
        assert!((freq - p).abs() < 3.0 * se, "freq {freq} vs {p} (se {se})");
    }

    #[test]
    fn uniform_mode_is_exchangeable() {
        // same multiset inserted in two orders: per-item selection frequencies agree
        let mut a = ReplayBuffer::new(None);
        let mut b = ReplayBuffer::new(None);
        let items = [(vec![0], 0.9), (vec![1], 0.1), (vec![2], 0.5)];
        for (t, r) in &items {
            a.insert(comp(0, t.clone(), *r, 0));
        }
        for (t, r) in items.iter().rev() {
            b.insert(comp(0, t.clone(), *r, 0));
        }
        let mut cfg = cfg(0.0, 2, 1);
        cfg.reward_mode = RewardMode::Uniform;
        let count = |buf: &ReplayBuffer, seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut c = [0usize; 3];
            for _ in 0..3000 {
                let batch = buf.sample_batch(&cfg, &mut rng).unwrap();
                for comp in &batch.groups()[0].completions {
                    c[comp.tokens[0]] += 1;
                }
            }
            c
        };
        let ca = count(&a, 5);
        let cb = count(&b, 6);
        for t in 0..3 {
            let (fa, fb) = (ca[t] as f64 / 6000.0, cb[t] as f64 / 6000.0);
            assert!((fa - fb).abs() < 0.05, "token {t}: {fa} vs {fb}");
        }
    }

    #[test]
    fn sample_errors() {
        let g = ReplayBuffer::new(None);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            g.sample_batch(&cfg(0.5, 2, 1), &mut rng),
            Err(BufferError::NoData(_))
        ));
        let mut g = ReplayBuffer::new(None);
        g.insert(comp(0, vec![0], 0.0, 0));
        assert!(matches!(
            g.sample_batch(&cfg(0.5, 2, 2), &mut rng),
            Err(BufferError::NoData(_))
        ));
    }

    #[test]
    fn recency_falls_back_when_latest_tag_absent_for_query() {
        let mut g = ReplayBuffer::new(None);
        g.insert(comp(0, vec![0], 1.0, 0));
        let mut l = ReplayBuffer::new(None);
        l.insert(comp(1, vec![1], 1.0, 0));
        g.merge_local_into_global(&mut l, 9); // query 0 has no tag-9 items
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let (batch, traces) = g.sample_batch_traced(&cfg(1.0, 2, 2), &mut rng).unwrap();
            for (grp, tr) in batch.groups().iter().zip(&traces) {
                if grp.query_id == 0 {
                    assert!(!tr.recency);
                } else {
                    assert!(tr.recency);
                    assert!(grp.completions.iter().all(|c| c.sync_tag == 9));
                }
            }
        }
    }

    #[test]
    fn dump_restore_round_trip() {
        let mut g = ReplayBuffer::new(None);
        g.insert(comp(0, vec![0, 2, 1], 0.75, 3));
        g.insert(comp(4, vec![1], 0.0, 5));
        let mut l = ReplayBuffer::new(None);
        l.insert(comp(2, vec![2, 2], 1.0, 0));
        g.merge_local_into_global(&mut l, 8);
        let mut bytes = Vec::new();
        g.dump(&mut bytes).unwrap();
        let r = ReplayBuffer::restore(&bytes[..], None).unwrap();
        assert_eq!(r.total_count(), g.total_count());
        assert_eq!(r.latest_sync_tag(), 8);
        let orig: Vec<_> = g
            .iter()
            .map(|c| (c.query_id, c.tokens.clone(), c.reward, c.sync_tag))
            .collect();
        let back: Vec<_> = r
            .iter()
            .map(|c| (c.query_id, c.tokens.clone(), c.reward, c.sync_tag))
            .collect();
        assert_eq!(orig, back);
    }

    #[test]
    fn restore_rejects_malformed() {
        assert!(ReplayBuffer::restore(&b"1 2"[..], None).is_err());
        assert!(ReplayBuffer::restore(&b"a 0 1.0 0 0 0.0"[..], None).is_err());
    }

    #[test]
    fn freeze_capacity_pins_size() {
        let mut b = ReplayBuffer::new(None);
        for i in 0..5 {
            b.insert(comp(0, vec![i % 2], 0.0, 0));
        }
        b.freeze_capacity();
        b.insert(comp(0, vec![1], 0.0, 0));
        assert_eq!(b.total_count(), 5);
        b.check_consistent();
    }
}
