//! Exactly enumerable autoregressive token policies with analytic
//! log-probability gradients.
//!
//! A policy is a dense logit table indexed by (query id, context window of the
//! last `c` tokens, next token). Contexts shorter than `c` are left-padded with
//! a dedicated padding symbol (token id `V`), which keeps the table rectangular
//! and every coordinate addressable by a flat index.

use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use rand::Rng;
use thiserror::Error;

use crate::grad::Gradient;

pub type Token = usize;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("snapshot format error: {0}")]
    Snapshot(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

/// Token alphabet with a reserved end-of-sequence id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    size: usize,
    eos: Token,
}

impl Vocab {
    pub fn new(size: usize, eos: Token) -> Result<Self, PolicyError> {
        if size < 2 {
            return Err(PolicyError::InvalidInput(format!(
                "vocab size must be >= 2, got {size}"
            )));
        }
        if eos >= size {
            return Err(PolicyError::InvalidInput(format!(
                "eos {eos} out of range for vocab size {size}"
            )));
        }
        Ok(Self { size, eos })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn eos(&self) -> Token {
        self.eos
    }

    /// The left-padding pseudo-token used for short contexts.
    pub fn padding_symbol(&self) -> Token {
        self.size
    }
}

/// A prompt in a finite query set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub id: usize,
    pub prompt_label: String,
}

impl Query {
    pub fn new(id: usize, prompt_label: impl Into<String>) -> Self {
        Self {
            id,
            prompt_label: prompt_label.into(),
        }
    }
}

/// A sampled response with the bookkeeping the replay buffer and the
/// importance-sampling rules need.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub query_id: usize,
    pub tokens: Vec<Token>,
    /// Per-token log-probabilities under the generating policy at temperature 1.
    pub behavior_logprobs: Vec<f64>,
    pub total_behavior_logprob: f64,
    /// Per-token log-probabilities of the tempered distribution that was
    /// actually sampled from; present only when `gen_temperature != 1`.
    pub tempered_logprobs: Option<Vec<f64>>,
    pub reward: Option<f64>,
    /// Trainer step of the most recent sync relative to this completion's
    /// lifecycle; assigned at merge time, 0 for seeded data.
    pub sync_tag: u64,
    pub searcher_id: usize,
    pub gen_temperature: f64,
}

impl Completion {
    pub fn reward_or_err(&self) -> Result<f64, PolicyError> {
        self.reward
            .ok_or_else(|| PolicyError::InvalidInput("completion reward not set".into()))
    }
}

/// Tabular autoregressive policy over a finite query set.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab: Vocab,
    context_len: usize,
    num_queries: usize,
    logits: Vec<f64>,
    version: u64,
}

impl PolicyParams {
    /// All-zero logits (uniform next-token distributions).
    pub fn zeros(vocab: Vocab, context_len: usize, num_queries: usize) -> Self {
        let n = num_queries * Self::context_count(&vocab, context_len) * vocab.size();
        Self {
            vocab,
            context_len,
            num_queries,
            logits: vec![0.0; n],
            version: 0,
        }
    }

    fn context_count(vocab: &Vocab, context_len: usize) -> usize {
        (vocab.size() + 1).pow(context_len as u32)
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn num_queries(&self) -> usize {
        self.num_queries
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn num_contexts(&self) -> usize {
        Self::context_count(&self.vocab, self.context_len)
    }

    pub fn num_logits(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Mutable access to the raw table. Counts as a parameter mutation.
    pub fn logits_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.logits
    }

    /// Same shape and vocabulary, so gradients and snapshots are exchangeable.
    pub fn same_shape(&self, other: &PolicyParams) -> bool {
        self.vocab == other.vocab
            && self.context_len == other.context_len
            && self.num_queries == other.num_queries
    }

    /// Encodes the window of the last `context_len` tokens of `prefix`,
    /// left-padded with the padding symbol.
    pub fn context_index(&self, prefix: &[Token]) -> usize {
        let base = self.vocab.size() + 1;
        let pad = self.vocab.padding_symbol();
        let c = self.context_len;
        let mut idx = 0usize;
        for pos in 0..c {
            // symbol at window slot `pos`, oldest first
            let sym = if prefix.len() + pos >= c {
                prefix[prefix.len() + pos - c]
            } else {
                pad
            };
            idx = idx * base + sym;
        }
        idx
    }

    pub fn logit_index(&self, query_id: usize, ctx: usize, token: Token) -> usize {
        (query_id * self.num_contexts() + ctx) * self.vocab.size() + token
    }

    /// Decodes a flat logit index back to (query, context, token).
    pub fn coords_of(&self, index: usize) -> (usize, usize, Token) {
        let v = self.vocab.size();
        let token = index % v;
        let rest = index / v;
        let ctx = rest % self.num_contexts();
        let query = rest / self.num_contexts();
        (query, ctx, token)
    }

    fn row(&self, query_id: usize, ctx: usize) -> &[f64] {
        let start = (query_id * self.num_contexts() + ctx) * self.vocab.size();
        &self.logits[start..start + self.vocab.size()]
    }

    fn check_query(&self, query_id: usize) -> Result<(), PolicyError> {
        if query_id >= self.num_queries {
            return Err(PolicyError::InvalidInput(format!(
                "query id {query_id} out of range ({} queries)",
                self.num_queries
            )));
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<(), PolicyError> {
        if tokens.is_empty() {
            return Err(PolicyError::InvalidInput("empty token sequence".into()));
        }
        for &t in tokens {
            if t >= self.vocab.size() {
                return Err(PolicyError::InvalidInput(format!(
                    "token id {t} out of range for vocab size {}",
                    self.vocab.size()
                )));
            }
        }
        Ok(())
    }

    /// Log-probability of `tokens` given the query: total and per-token terms.
    pub fn logprob(
        &self,
        query_id: usize,
        tokens: &[Token],
    ) -> Result<(f64, Vec<f64>), PolicyError> {
        self.check_query(query_id)?;
        self.check_tokens(tokens)?;
        let mut per_token = Vec::with_capacity(tokens.len());
        let mut total = 0.0;
        for (t, &tok) in tokens.iter().enumerate() {
            let ctx = self.context_index(&tokens[..t]);
            let row = self.row(query_id, ctx);
            let lp = log_softmax_at(row, tok);
            per_token.push(lp);
            total += lp;
        }
        Ok((total, per_token))
    }

    /// Analytic gradient of `logprob` with respect to the logit table:
    /// one-hot minus softmax on each visited context row, summed over visits.
    pub fn grad_logprob(&self, query_id: usize, tokens: &[Token]) -> Result<Gradient, PolicyError> {
        self.check_query(query_id)?;
        self.check_tokens(tokens)?;
        let mut grad = Gradient::new();
        let mut probs = vec![0.0; self.vocab.size()];
        for (t, &tok) in tokens.iter().enumerate() {
            let ctx = self.context_index(&tokens[..t]);
            softmax_into(self.row(query_id, ctx), 1.0, &mut probs);
            for (v, &p) in probs.iter().enumerate() {
                let one_hot = if v == tok { 1.0 } else { 0.0 };
                grad.accumulate(self.logit_index(query_id, ctx, v), one_hot - p);
            }
        }
        Ok(grad)
    }

    /// Draws a completion autoregressively from softmax(logits / temperature),
    /// stopping at eos or `max_len`. Behavior log-probs are recorded at
    /// temperature 1; the tempered per-token log-probs are kept in a parallel
    /// field when `temperature != 1`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        query_id: usize,
        max_len: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Completion, PolicyError> {
        self.check_query(query_id)?;
        if !(temperature > 0.0) {
            return Err(PolicyError::InvalidInput(format!(
                "temperature must be > 0, got {temperature}"
            )));
        }
        if max_len < 1 {
            return Err(PolicyError::InvalidInput("max_len must be >= 1".into()));
        }
        let v = self.vocab.size();
        let mut tokens = Vec::new();
        let mut behavior = Vec::new();
        let mut tempered = Vec::new();
        let mut probs = vec![0.0; v];
        while tokens.len() < max_len {
            let ctx = self.context_index(&tokens);
            let row = self.row(query_id, ctx);
            softmax_into(row, temperature, &mut probs);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut tok = v - 1;
            for (i, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    tok = i;
                    break;
                }
            }
            behavior.push(log_softmax_at(row, tok));
            if temperature != 1.0 {
                tempered.push(tempered_log_softmax_at(row, temperature, tok));
            }
            tokens.push(tok);
            if tok == self.vocab.eos() {
                break;
            }
        }
        let total = behavior.iter().sum();
        Ok(Completion {
            query_id,
            tokens,
            behavior_logprobs: behavior,
            total_behavior_logprob: total,
            tempered_logprobs: if temperature != 1.0 { Some(tempered) } else { None },
            reward: None,
            sync_tag: 0,
            searcher_id: 0,
            gen_temperature: temperature,
        })
    }

    /// Plain gradient ascent: logits += lr * grad.
    pub fn ascend(&mut self, grad: &Gradient, lr: f64) {
        for (i, g) in grad.iter() {
            self.logits[i] += lr * g;
        }
        self.version += 1;
    }

    /// Copies another policy's table into this one (reference reset).
    pub fn copy_table_from(&mut self, other: &PolicyParams) {
        assert!(self.same_shape(other), "shape mismatch in copy_table_from");
        self.logits.copy_from_slice(&other.logits);
        self.version += 1;
    }

    /// Writes the snapshot text format: a header line
    /// `V c num_queries version` followed by one logit per line at 17
    /// significant digits, row-major.
    pub fn save_text<W: Write>(&self, mut w: W) -> Result<(), PolicyError> {
        let mut buf = String::new();
        writeln!(
            buf,
            "{} {} {} {} {}",
            self.vocab.size(),
            self.vocab.eos(),
            self.context_len,
            self.num_queries,
            self.version
        )
        .expect("write to string");
        for &x in &self.logits {
            writeln!(buf, "{x:.16e}").expect("write to string");
        }
        w.write_all(buf.as_bytes())?;
        Ok(())
    }

    pub fn load_text<R: BufRead>(r: R) -> Result<Self, PolicyError> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| PolicyError::Snapshot("empty snapshot".into()))??;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(PolicyError::Snapshot(format!(
                "expected 5 header fields, got {}",
                fields.len()
            )));
        }
        let parse = |s: &str, name: &str| -> Result<usize, PolicyError> {
            s.parse()
                .map_err(|_| PolicyError::Snapshot(format!("bad {name}: {s}")))
        };
        let v = parse(fields[0], "vocab size")?;
        let eos = parse(fields[1], "eos")?;
        let context_len = parse(fields[2], "context_len")?;
        let num_queries = parse(fields[3], "num_queries")?;
        let version: u64 = fields[4]
            .parse()
            .map_err(|_| PolicyError::Snapshot(format!("bad version: {}", fields[4])))?;
        let vocab = Vocab::new(v, eos)?;
        let mut params = Self::zeros(vocab, context_len, num_queries);
        params.version = version;
        let expected = params.logits.len();
        let mut count = 0;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if count >= expected {
                return Err(PolicyError::Snapshot("too many logit lines".into()));
            }
            let x: f64 = line
                .trim()
                .parse()
                .map_err(|_| PolicyError::Snapshot(format!("bad logit: {line}")))?;
            if !x.is_finite() {
                return Err(PolicyError::Snapshot(format!("non-finite logit: {line}")));
            }
            params.logits[count] = x;
            count += 1;
        }
        if count != expected {
            return Err(PolicyError::Snapshot(format!(
                "expected {expected} logits, got {count}"
            )));
        }
        Ok(params)
    }
}

/// Stable log-softmax of `row` evaluated at `token`.
fn log_softmax_at(row: &[f64], token: Token) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln() + m;
    row[token] - lse
}

fn tempered_log_softmax_at(row: &[f64], temperature: f64, token: Token) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = row
        .iter()
        .map(|&x| ((x - m) / temperature).exp())
        .sum::<f64>()
        .ln()
        + m / temperature;
    row[token] / temperature - lse
}

/// Stable softmax of `row / temperature` into `out`.
fn softmax_into(row: &[f64], temperature: f64, out: &mut [f64]) {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = ((x - m) / temperature).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Next-token distribution of a context row at temperature 1.
pub fn row_softmax(params: &PolicyParams, query_id: usize, ctx: usize) -> Vec<f64> {
    let mut out = vec![0.0; params.vocab().size()];
    softmax_into(params.row(query_id, ctx), 1.0, &mut out);
    out
}
