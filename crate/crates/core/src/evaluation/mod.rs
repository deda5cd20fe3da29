//! Ranking metrics, latency accounting, the I2I discriminative probe and
//! report emission.

pub mod probe;
pub mod report;

pub use probe::{cosine_scorer, i2i_probe, sid_prefix_overlap, ProbeResult, ProbeScorer};
pub use report::{
    emit_report, parse_report, report_json, summary_text, validate_report, variants_csv, write_report, ConfusionRow,
    ProbeSection, RankerSection, Report, ReportSections, RoutingSection, VariantRow, REPORT_SCHEMA,
};

use serde::{Deserialize, Serialize};

use crate::corpus::ItemIdx;
use crate::decoder::hit_rank;
use crate::planner::{CostTable, Difficulty, ToolCounts};

/// 1 when `gt` is among the first `k` entries.
pub fn recall_at_k(list: &[ItemIdx], gt: ItemIdx, k: usize) -> f64 {
    recall_from_rank(hit_rank(list, gt), k)
}

/// Binary-relevance NDCG with a single relevant item: `1 / log2(r + 1)`.
pub fn ndcg_at_k(list: &[ItemIdx], gt: ItemIdx, k: usize) -> f64 {
    ndcg_from_rank(hit_rank(list, gt), k)
}

pub fn recall_from_rank(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

pub fn ndcg_from_rank(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitMetrics {
    pub users: usize,
    pub recall5: f64,
    pub recall10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
}

/// Means over `(hit rank, ...)` for every evaluated user.
pub fn split_metrics(ranks: &[Option<usize>]) -> SplitMetrics {
    let n = ranks.len();
    let mean = |f: &dyn Fn(Option<usize>) -> f64| {
        if n == 0 {
            0.0
        } else {
            ranks.iter().map(|&r| f(r)).sum::<f64>() / n as f64
        }
    };
    SplitMetrics {
        users: n,
        recall5: mean(&|r| recall_from_rank(r, 5)),
        recall10: mean(&|r| recall_from_rank(r, 10)),
        ndcg5: mean(&|r| ndcg_from_rank(r, 5)),
        ndcg10: mean(&|r| ndcg_from_rank(r, 10)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BucketMetrics {
    pub bucket: Difficulty,
    pub metrics: SplitMetrics,
}

/// Metrics per difficulty bucket, in easy/medium/hard order. Empty buckets
/// are reported with zero users.
pub fn bucket_metrics(ranks: &[Option<usize>], buckets: &[Difficulty]) -> Vec<BucketMetrics> {
    assert_eq!(ranks.len(), buckets.len());
    Difficulty::ALL
        .iter()
        .map(|&b| {
            let sel: Vec<Option<usize>> = ranks
                .iter()
                .zip(buckets)
                .filter(|(_, &d)| d == b)
                .map(|(&r, _)| r)
                .collect();
            BucketMetrics {
                bucket: b,
                metrics: split_metrics(&sel),
            }
        })
        .collect()
}

/// Per-sample tool usage and the resulting latency figures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencySection {
    pub samples: usize,
    /// Mean calls per sample of each tool.
    pub fast_fraction: f64,
    pub rank_fraction: f64,
    pub slow_fraction: f64,
    pub mean_seconds: f64,
    pub p50_seconds: f64,
    pub p95_seconds: f64,
    /// Samples per second at the mean latency.
    pub throughput: f64,
    /// Mean latency divided by the reference system's mean latency.
    pub relative_cost: f64,
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Latency accounting: the mean is the dot product of per-tool usage
/// fractions with the cost table. `reference_mean` normalizes the relative
/// cost; `None` normalizes to this report itself.
pub fn latency_report(routes: &[ToolCounts], cost: &CostTable, reference_mean: Option<f64>) -> LatencySection {
    let n = routes.len();
    let frac = |f: fn(&ToolCounts) -> u32| {
        if n == 0 {
            0.0
        } else {
            routes.iter().map(|c| f(c) as f64).sum::<f64>() / n as f64
        }
    };
    let (fast, rank, slow) = (frac(|c| c.fast), frac(|c| c.rank), frac(|c| c.slow));
    let mean = fast * cost.fast + rank * cost.rank + slow * cost.slow;
    let mut per: Vec<f64> = routes.iter().map(|c| c.latency(cost)).collect();
    per.sort_by(f64::total_cmp);
    let reference = reference_mean.unwrap_or(mean);
    LatencySection {
        samples: n,
        fast_fraction: fast,
        rank_fraction: rank,
        slow_fraction: slow,
        mean_seconds: mean,
        p50_seconds: percentile(&per, 50.0),
        p95_seconds: percentile(&per, 95.0),
        throughput: if mean > 0.0 { 1.0 / mean } else { 0.0 },
        relative_cost: if reference > 0.0 { mean / reference } else { 0.0 },
    }
}
