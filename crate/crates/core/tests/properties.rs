//! Randomized structural properties over many seeded cases: softmax
//! normalization, advantage cancellation, and buffer count consistency.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use asynctb::buffer::ReplayBuffer;
use asynctb::envs;
use asynctb::objectives::tb_advantages;
use asynctb::policy::{row_softmax, PolicyParams, Vocab};

fn random_params(rng: &mut ChaCha8Rng) -> PolicyParams {
    let v = rng.random_range(2..=5usize);
    let eos = rng.random_range(0..v);
    let c = rng.random_range(0..=2usize);
    let q = rng.random_range(1..=3usize);
    let mut p = PolicyParams::zeros(Vocab::new(v, eos).unwrap(), c, q);
    for x in p.logits_mut() {
        *x = rng.random::<f64>() * 6.0 - 3.0;
    }
    p
}

#[test]
fn next_token_distributions_normalize() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..50 {
        let p = random_params(&mut rng);
        for q in 0..p.num_queries() {
            for ctx in 0..p.num_contexts() {
                let probs = row_softmax(&p, q, ctx);
                let sum: f64 = probs.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert!(probs.iter().all(|&x| x > 0.0));
            }
        }
    }
}

#[test]
fn logprob_invariant_to_row_shift() {
    // adding a constant to a whole logit row leaves the distribution unchanged
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..30 {
        let mut p = random_params(&mut rng);
        let tokens: Vec<usize> = (0..2).map(|_| rng.random_range(0..p.vocab().size())).collect();
        let (before, _) = p.logprob(0, &tokens).unwrap();
        let shift = rng.random::<f64>() * 4.0 - 2.0;
        let v = p.vocab().size();
        let nc = p.num_contexts();
        let row = rng.random_range(0..nc);
        {
            let logits = p.logits_mut();
            for t in 0..v {
                logits[row * v + t] += shift;
            }
        }
        let _ = nc;
        let (after, _) = p.logprob(0, &tokens).unwrap();
        assert!((before - after).abs() < 1e-10, "{before} vs {after}");
    }
}

#[test]
fn group_advantages_always_cancel() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let inst = envs::mr_like();
    for _ in 0..40 {
        let mut cur = inst.ref_policy.clone();
        for x in cur.logits_mut() {
            *x = rng.random::<f64>() * 2.0 - 1.0;
        }
        let q = rng.random_range(0..inst.query_set.len());
        let k = rng.random_range(2..=6usize);
        let mut completions = Vec::new();
        for _ in 0..k {
            let mut c = cur.sample(q, inst.max_len, 1.0, &mut rng).unwrap();
            c.reward = Some(inst.env.reward(q, &c.tokens));
            completions.push(c);
        }
        let group = asynctb::objectives::Group {
            query_id: q,
            completions,
        };
        let beta = rng.random::<f64>() + 0.01;
        let a = tb_advantages(&group, beta, &inst.ref_policy, &cur).unwrap();
        assert!(a.iter().sum::<f64>().abs() < 1e-9);
    }
}

#[test]
fn buffer_counts_stay_consistent_under_random_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let inst = envs::mr_like();
    for trial in 0..10 {
        let cap = if trial % 2 == 0 { Some(30) } else { None };
        let mut global = ReplayBuffer::new(cap);
        let mut expected_at_most = 0usize;
        for step in 1..=20u64 {
            let mut local = ReplayBuffer::new(None);
            let n = rng.random_range(0..6usize);
            for _ in 0..n {
                let q = rng.random_range(0..inst.query_set.len());
                let mut c = inst.ref_policy.sample(q, inst.max_len, 1.0, &mut rng).unwrap();
                c.reward = Some(inst.env.reward(q, &c.tokens));
                local.insert(c);
            }
            expected_at_most += n;
            global.merge_local_into_global(&mut local, step);
            assert_eq!(global.latest_sync_tag(), step);
            let per_query_sum: usize = global
                .queries_with_data()
                .iter()
                .map(|&q| global.query_len(q))
                .sum();
            assert_eq!(per_query_sum, global.total_count());
            assert!(global.total_count() <= expected_at_most);
            if let Some(c) = cap {
                assert!(global.total_count() <= c);
            }
        }
    }
}
