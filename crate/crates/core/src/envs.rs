//! Synthetic query sets, deterministic reward functions, and reference
//! policies, all small enough for exact posterior enumeration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::policy::{PolicyParams, Query, Token, Vocab};

#[derive(Debug, Clone)]
pub struct QuerySet {
    pub queries: Vec<Query>,
}

impl QuerySet {
    pub fn with_labels(labels: &[&str]) -> Self {
        Self {
            queries: labels
                .iter()
                .enumerate()
                .map(|(i, l)| Query::new(i, *l))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

#[derive(Debug, Clone)]
pub enum EnvKind {
    /// Binary reward: 1 iff the eos-stripped sequence equals the per-query target.
    ExactMatch { targets: Vec<Vec<Token>> },
    /// Mean over positions of a fixed per-(position, token) score table in [0,1].
    Scored { table: Vec<Vec<f64>> },
}

#[derive(Debug, Clone)]
pub struct Environment {
    pub kind: EnvKind,
    pub max_len: usize,
    pub vocab: Vocab,
}

impl Environment {
    /// Deterministic reward. Reward functions see the sequence without the
    /// trailing eos token.
    pub fn reward(&self, query_id: usize, tokens: &[Token]) -> f64 {
        let stripped = strip_eos(tokens, self.vocab.eos());
        match &self.kind {
            EnvKind::ExactMatch { targets } => {
                if stripped == targets[query_id].as_slice() {
                    1.0
                } else {
                    0.0
                }
            }
            EnvKind::Scored { table } => {
                if stripped.is_empty() {
                    return 0.0;
                }
                let sum: f64 = stripped
                    .iter()
                    .enumerate()
                    .map(|(pos, &t)| table[pos][t])
                    .sum();
                sum / stripped.len() as f64
            }
        }
    }
}

pub fn strip_eos(tokens: &[Token], eos: Token) -> &[Token] {
    match tokens.split_last() {
        Some((&last, rest)) if last == eos => rest,
        _ => tokens,
    }
}

#[derive(Debug, Clone, Copy)]
pub enum RefPolicyKind {
    Uniform,
    /// Logits i.i.d. uniform in [-scale, +scale].
    SeededRandom { scale: f64 },
}

pub fn make_ref_policy(
    vocab: Vocab,
    context_len: usize,
    num_queries: usize,
    kind: RefPolicyKind,
    seed: u64,
) -> PolicyParams {
    let mut params = PolicyParams::zeros(vocab, context_len, num_queries);
    if let RefPolicyKind::SeededRandom { scale } = kind {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for x in params.logits_mut() {
            *x = (rng.random::<f64>() * 2.0 - 1.0) * scale;
        }
    }
    params
}

/// A named desk-scale task: query set, reward, reference policy, and the
/// default KL coefficient.
#[derive(Debug, Clone)]
pub struct Instance {
    pub name: &'static str,
    pub query_set: QuerySet,
    pub env: Environment,
    pub ref_policy: PolicyParams,
    pub beta: f64,
    pub max_len: usize,
    pub context_len: usize,
}

/// The three standard instances, addressable by name from the CLI.
pub fn standard_instances() -> Vec<Instance> {
    vec![tiny(), mr_like(), rt_like()]
}

pub fn instance_by_name(name: &str) -> Option<Instance> {
    standard_instances().into_iter().find(|i| i.name == name)
}

/// V=2, one query, length-1 sequences. With r([0])=1, r([])=0 and a uniform
/// reference at beta=1 the posterior is (e/(e+1), 1/(e+1)).
pub fn tiny() -> Instance {
    let vocab = Vocab::new(2, 1).expect("valid vocab");
    let env = Environment {
        kind: EnvKind::ExactMatch {
            targets: vec![vec![0]],
        },
        max_len: 1,
        vocab,
    };
    let inst = Instance {
        name: "tiny",
        query_set: QuerySet::with_labels(&["tiny-q0"]),
        env,
        ref_policy: make_ref_policy(vocab, 0, 1, RefPolicyKind::Uniform, 0),
        beta: 1.0,
        max_len: 1,
        context_len: 0,
    };
    assert_unique_targets(&inst);
    inst
}

/// Exact-match task over 8 queries, V=4 (eos=3), sequences up to length 4.
pub fn mr_like() -> Instance {
    let vocab = Vocab::new(4, 3).expect("valid vocab");
    let targets: Vec<Vec<Token>> = vec![
        vec![0],
        vec![1, 2],
        vec![2, 0, 1],
        vec![0, 0],
        vec![1],
        vec![2, 2, 1],
        vec![0, 1],
        vec![2],
    ];
    let labels: Vec<String> = (0..targets.len()).map(|i| format!("mr-q{i}")).collect();
    let label_refs: Vec<&str> = labels.iter().map(|s| s.as_str()).collect();
    let env = Environment {
        kind: EnvKind::ExactMatch { targets },
        max_len: 4,
        vocab,
    };
    let inst = Instance {
        name: "mr_like",
        query_set: QuerySet::with_labels(&label_refs),
        env,
        ref_policy: make_ref_policy(vocab, 3, 8, RefPolicyKind::Uniform, 0),
        beta: 0.5,
        max_len: 4,
        context_len: 3,
    };
    assert_unique_targets(&inst);
    inst
}

/// Scored task, one query, V=4, sequences up to length 4, low beta.
pub fn rt_like() -> Instance {
    let vocab = Vocab::new(4, 3).expect("valid vocab");
    // Fixed score table: score[pos][tok] = ((pos+1)*(tok+1) mod 7) / 6
    let table: Vec<Vec<f64>> = (0..4)
        .map(|pos: usize| {
            (0..4)
                .map(|tok: usize| (((pos + 1) * (tok + 1)) % 7) as f64 / 6.0)
                .collect()
        })
        .collect();
    let env = Environment {
        kind: EnvKind::Scored { table },
        max_len: 4,
        vocab,
    };
    Instance {
        name: "rt_like",
        query_set: QuerySet::with_labels(&["rt-q0"]),
        env,
        ref_policy: make_ref_policy(vocab, 3, 1, RefPolicyKind::SeededRandom { scale: 1.0 }, 7),
        beta: 0.05,
        max_len: 4,
        context_len: 3,
    }
}

/// For exact-match instances, exactly one terminated sequence per query may
/// attain reward 1: the target must fit with its eos inside max_len and
/// contain no eos token.
fn assert_unique_targets(inst: &Instance) {
    if let EnvKind::ExactMatch { targets } = &inst.env.kind {
        for t in targets {
            assert!(t.len() + 1 <= inst.max_len || inst.max_len == 1 && t.len() == 1);
            assert!(t.iter().all(|&tok| tok != inst.env.vocab.eos()));
        }
    }
}

/// Average pairwise cosine distance between token-unigram count vectors of
/// eos-stripped sequences.
pub fn unigram_diversity(sequences: &[Vec<Token>], vocab: Vocab) -> f64 {
    let n = sequences.len();
    if n < 2 {
        return 0.0;
    }
    let counts: Vec<Vec<f64>> = sequences
        .iter()
        .map(|s| {
            let mut c = vec![0.0; vocab.size()];
            for &t in strip_eos(s, vocab.eos()) {
                c[t] += 1.0;
            }
            c
        })
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            total += cosine_distance(&counts[i], &counts[j]);
            pairs += 1;
        }
    }
    total / pairs as f64
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        return 0.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    1.0 - dot / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_reward_definition() {
        let inst = mr_like();
        // query 1 target is [1,2]
        assert_eq!(inst.env.reward(1, &[1, 2, 3]), 1.0);
        assert_eq!(inst.env.reward(1, &[1, 2]), 1.0); // truncated, no eos
        assert_eq!(inst.env.reward(1, &[1, 1]), 0.0);
    }

    #[test]
    fn scored_reward_constant_table() {
        let vocab = Vocab::new(3, 2).unwrap();
        let env = Environment {
            kind: EnvKind::Scored {
                table: vec![vec![0.5; 3]; 4],
            },
            max_len: 4,
            vocab,
        };
        assert_eq!(env.reward(0, &[0, 1, 0]), 0.5);
        assert_eq!(env.reward(0, &[1, 2]), 0.5);
        assert_eq!(env.reward(0, &[2]), 0.0); // empty after eos strip
    }

    #[test]
    fn reward_is_pure() {
        let inst = rt_like();
        let r1 = inst.env.reward(0, &[0, 1, 2, 3]);
        let r2 = inst.env.reward(0, &[0, 1, 2, 3]);
        assert_eq!(r1, r2);
        assert!((0.0..=1.0).contains(&r1));
    }

    #[test]
    fn ref_policy_kinds() {
        let vocab = Vocab::new(3, 2).unwrap();
        let u = make_ref_policy(vocab, 1, 2, RefPolicyKind::Uniform, 0);
        assert!(u.logits().iter().all(|&x| x == 0.0));
        let a = make_ref_policy(vocab, 1, 2, RefPolicyKind::SeededRandom { scale: 2.0 }, 5);
        let b = make_ref_policy(vocab, 1, 2, RefPolicyKind::SeededRandom { scale: 2.0 }, 5);
        assert_eq!(a.logits(), b.logits());
        let z = make_ref_policy(vocab, 1, 2, RefPolicyKind::SeededRandom { scale: 0.0 }, 5);
        assert_eq!(z.logits(), u.logits());
    }

    #[test]
    fn diversity_extremes() {
        let vocab = Vocab::new(3, 2).unwrap();
        assert_eq!(unigram_diversity(&[vec![0, 2]], vocab), 0.0);
        let same = unigram_diversity(&[vec![0, 2], vec![0, 2]], vocab);
        assert!(same.abs() < 1e-12);
        let diff = unigram_diversity(&[vec![0, 2], vec![1, 2]], vocab);
        assert!((diff - 1.0).abs() < 1e-12);
    }
}
