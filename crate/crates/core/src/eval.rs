//! Ranking metrics, FLOP accounting and latency benchmarking.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::recmodel::{EvalCase, RecError, RecModel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("{rankings} rankings but {targets} targets")]
    LengthMismatch { rankings: usize, targets: usize },
    #[error("ranking for user {user} has {len} items, fewer than k = {k}")]
    RankingTooShort { user: usize, len: usize, k: usize },
    #[error("k must be positive")]
    ZeroK,
    #[error("nothing to evaluate")]
    EmptySplit,
    #[error("batch size must be positive")]
    EmptyBatch,
    #[error("need at least 3 repetitions, got {0}")]
    TooFewRepetitions(usize),
    #[error("models disagree on {0}")]
    IncompatibleModels(String),
    #[error(transparent)]
    Model(#[from] RecError),
}

fn check_inputs(rankings: &[Vec<usize>], targets: &[usize], k: usize) -> Result<(), EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if rankings.len() != targets.len() {
        return Err(EvalError::LengthMismatch {
            rankings: rankings.len(),
            targets: targets.len(),
        });
    }
    if rankings.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    if let Some((user, r)) = rankings.iter().enumerate().find(|(_, r)| r.len() < k) {
        return Err(EvalError::RankingTooShort {
            user,
            len: r.len(),
            k,
        });
    }
    Ok(())
}

/// 1-based position of `target` within the first `k` entries.
fn rank_within(ranking: &[usize], target: usize, k: usize) -> Option<usize> {
    ranking[..k]
        .iter()
        .position(|&i| i == target)
        .map(|p| p + 1)
}

/// Fraction of users whose target is in their top `k`.
pub fn hr_at_k(rankings: &[Vec<usize>], targets: &[usize], k: usize) -> Result<f64, EvalError> {
    check_inputs(rankings, targets, k)?;
    let hits = rankings
        .iter()
        .zip(targets)
        .filter(|(r, &t)| rank_within(r, t, k).is_some())
        .count();
    Ok(hits as f64 / rankings.len() as f64)
}

/// Mean of `1/log2(rank + 1)` over users, counting 0 for ranks beyond `k`.
/// With a single relevant item the ideal DCG is 1.
pub fn ndcg_at_k(rankings: &[Vec<usize>], targets: &[usize], k: usize) -> Result<f64, EvalError> {
    check_inputs(rankings, targets, k)?;
    let sum: f64 = rankings
        .iter()
        .zip(targets)
        .map(|(r, &t)| rank_within(r, t, k).map_or(0.0, |rank| 1.0 / ((rank + 1) as f64).log2()))
        .sum();
    Ok(sum / rankings.len() as f64)
}

/// Orders all items by descending score, ties broken by ascending id.
/// Items in `masked` are moved to the end (in ascending id order).
pub fn rank_items(scores: &[f64], masked: &[usize]) -> Vec<usize> {
    let mut is_masked = vec![false; scores.len()];
    for &m in masked {
        if m < scores.len() {
            is_masked[m] = true;
        }
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        is_masked[a]
            .cmp(&is_masked[b])
            .then_with(|| {
                if is_masked[a] {
                    std::cmp::Ordering::Equal
                } else {
                    scores[b].total_cmp(&scores[a])
                }
            })
            .then(a.cmp(&b))
    });
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub hr: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsResult {
    pub model_tag: String,
    pub user_count: usize,
    pub mask_context: bool,
    pub per_k: BTreeMap<usize, KMetrics>,
}

impl MetricsResult {
    pub fn hr(&self, k: usize) -> Option<f64> {
        self.per_k.get(&k).map(|m| m.hr)
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.per_k.get(&k).map(|m| m.ndcg)
    }
}

/// Ranks every item for each case with [`RecModel::score_next`]. With
/// `mask_context`, items already in the context go to the bottom.
pub fn rank_cases(
    model: &RecModel,
    cases: &[EvalCase],
    mask_context: bool,
) -> Result<Vec<Vec<usize>>, EvalError> {
    cases
        .iter()
        .map(|c| {
            let scores = model.score_next(&c.context)?;
            let masked: &[usize] = if mask_context { &c.context } else { &[] };
            Ok(rank_items(&scores, masked))
        })
        .collect()
}

/// HR@K and NDCG@K over a held-out split.
pub fn evaluate(
    model: &RecModel,
    cases: &[EvalCase],
    ks: &[usize],
    mask_context: bool,
) -> Result<MetricsResult, EvalError> {
    if cases.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let rankings = rank_cases(model, cases, mask_context)?;
    let targets: Vec<usize> = cases.iter().map(|c| c.target).collect();
    let mut per_k = BTreeMap::new();
    for &k in ks {
        let k_eff = k.min(model.config.num_items);
        per_k.insert(
            k,
            KMetrics {
                hr: hr_at_k(&rankings, &targets, k_eff)?,
                ndcg: ndcg_at_k(&rankings, &targets, k_eff)?,
            },
        );
    }
    Ok(MetricsResult {
        model_tag: model.tag(),
        user_count: cases.len(),
        mask_context,
        per_k,
    })
}

/// Floating-point operations of the compressible projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    /// As if every projection were dense: `2·M·N` per token.
    pub dense_flops: u64,
    /// As the model actually is: `2·r·(M+N)` per token for factored layers.
    pub compressed_flops: u64,
}

impl FlopCount {
    pub fn ratio(&self) -> f64 {
        self.compressed_flops as f64 / self.dense_flops as f64
    }
}

pub fn linear_flops_dense(m: usize, n: usize) -> u64 {
    2 * (m * n) as u64
}

pub fn linear_flops_factored(m: usize, n: usize, r: usize) -> u64 {
    2 * (r * (m + n)) as u64
}

/// Per-model projection FLOPs over `context_len` tokens.
pub fn count_flops(model: &RecModel, context_len: usize) -> FlopCount {
    let tokens = context_len.min(model.config.max_len) as u64;
    let mut out = FlopCount {
        dense_flops: 0,
        compressed_flops: 0,
    };
    for id in model.layer_ids() {
        let (m, n) = model.config.linear_shape(id.slot);
        out.dense_flops += tokens * linear_flops_dense(m, n);
        out.compressed_flops += tokens
            * match model.linear(id).rank() {
                Some(r) => linear_flops_factored(m, n, r),
                None => linear_flops_dense(m, n),
            };
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub flops_dense: u64,
    pub flops_compressed: u64,
    pub wall_ms_dense: f64,
    pub wall_ms_compressed: f64,
    pub batch_size: usize,
    pub repetitions: usize,
    pub context_len: usize,
}

impl BenchResult {
    /// Dense time over compressed time.
    pub fn speedup(&self) -> f64 {
        self.wall_ms_dense / self.wall_ms_compressed
    }

    pub fn flop_ratio(&self) -> f64 {
        self.flops_compressed as f64 / self.flops_dense as f64
    }
}

/// Seeded batch of random contexts shared by both models.
pub fn bench_contexts(
    num_items: usize,
    batch: usize,
    context_len: usize,
    seed: u64,
) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch)
        .map(|_| {
            (0..context_len)
                .map(|_| rng.gen_range(0..num_items))
                .collect()
        })
        .collect()
}

fn time_batch(model: &RecModel, contexts: &[Vec<usize>]) -> Result<f64, EvalError> {
    let start = Instant::now();
    let mut sink = 0.0;
    for c in contexts {
        sink += model.score_next(c)?[0];
    }
    let ms = start.elapsed().as_secs_f64() * 1e3;
    std::hint::black_box(sink);
    Ok(ms)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median wall time of scoring one batch on each model. Repetitions
/// alternate between the two models; one warm-up pass each is discarded.
pub fn bench_latency(
    dense: &RecModel,
    compressed: &RecModel,
    batch: usize,
    reps: usize,
    context_len: usize,
) -> Result<BenchResult, EvalError> {
    if batch == 0 {
        return Err(EvalError::EmptyBatch);
    }
    if reps < 3 {
        return Err(EvalError::TooFewRepetitions(reps));
    }
    if dense.config.num_items != compressed.config.num_items {
        return Err(EvalError::IncompatibleModels("num_items".into()));
    }
    let context_len = context_len.clamp(1, dense.config.max_len.min(compressed.config.max_len));
    let contexts = bench_contexts(dense.config.num_items, batch, context_len, 0x0d1e);
    time_batch(dense, &contexts)?;
    time_batch(compressed, &contexts)?;
    let mut td = Vec::with_capacity(reps);
    let mut tc = Vec::with_capacity(reps);
    for rep in 0..reps {
        // alternate which model goes first to cancel ordering effects
        if rep % 2 == 0 {
            td.push(time_batch(dense, &contexts)?);
            tc.push(time_batch(compressed, &contexts)?);
        } else {
            tc.push(time_batch(compressed, &contexts)?);
            td.push(time_batch(dense, &contexts)?);
        }
    }
    let fd = count_flops(dense, context_len);
    let fc = count_flops(compressed, context_len);
    Ok(BenchResult {
        flops_dense: fd.compressed_flops,
        flops_compressed: fc.compressed_flops,
        wall_ms_dense: median(td),
        wall_ms_compressed: median(tc),
        batch_size: batch,
        repetitions: reps,
        context_len,
    })
}
