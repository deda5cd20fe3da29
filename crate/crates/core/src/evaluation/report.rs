//! `report.json`, its human summary and the cost/accuracy series.
//!
//! Schema (`sidrec-report/1`), every section required:
//!
//! ```text
//! schema     "sidrec-report/1"
//! retrieval  {"valid": SplitMetrics, "test": SplitMetrics}  adaptive system
//! variants   [VariantRow]                                  per routing variant, test split
//! buckets    [BucketMetrics]                               easy / medium / hard, test split
//! latency    LatencySection                                adaptive system, test split
//! routing    RoutingSection
//! ranker     {"valid_auc": f64}
//! probe      {"distractors": n, "scorers": {name: ProbeResult},
//!             "sid_overlap_level1": f64, "sid_overlap_level12": f64}
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planner::Path;

use super::{BucketMetrics, LatencySection, ProbeResult, SplitMetrics};

pub const REPORT_SCHEMA: &str = "sidrec-report/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantRow {
    pub variant: String,
    pub recall10: f64,
    pub ndcg10: f64,
    /// Mean latency relative to the adaptive system.
    pub relative_cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfusionRow {
    pub oracle: String,
    pub fast: usize,
    pub rank: usize,
    pub slow: usize,
    pub other: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoutingSection {
    pub users: usize,
    pub fast_fraction: f64,
    pub rank_fraction: f64,
    pub slow_fraction: f64,
    /// Routes that follow none of the three templates.
    pub other_fraction: f64,
    pub invalid_fraction: f64,
    pub oracle_agreement: f64,
    pub confusion: Vec<ConfusionRow>,
    pub mean_latency: f64,
    pub mean_reward: f64,
    pub heuristic_threshold: Option<usize>,
    pub heuristic_oracle_agreement: f64,
    pub baseline_oracle_agreement: f64,
}

impl RoutingSection {
    pub fn confusion_rows(confusion: &[[usize; 4]; 3]) -> Vec<ConfusionRow> {
        Path::ALL
            .iter()
            .map(|p| {
                let r = confusion[p.index()];
                ConfusionRow {
                    oracle: p.name().to_string(),
                    fast: r[0],
                    rank: r[1],
                    slow: r[2],
                    other: r[3],
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankerSection {
    pub valid_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    pub distractors: usize,
    pub scorers: BTreeMap<String, ProbeResult>,
    pub sid_overlap_level1: f64,
    pub sid_overlap_level12: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub schema: String,
    pub retrieval: BTreeMap<String, SplitMetrics>,
    pub variants: Vec<VariantRow>,
    pub buckets: Vec<BucketMetrics>,
    pub latency: LatencySection,
    pub routing: RoutingSection,
    pub ranker: RankerSection,
    pub probe: ProbeSection,
}

/// Report pieces as they are produced; every one is required.
#[derive(Clone, Debug, Default)]
pub struct ReportSections {
    pub retrieval: Option<BTreeMap<String, SplitMetrics>>,
    pub variants: Option<Vec<VariantRow>>,
    pub buckets: Option<Vec<BucketMetrics>>,
    pub latency: Option<LatencySection>,
    pub routing: Option<RoutingSection>,
    pub ranker: Option<RankerSection>,
    pub probe: Option<ProbeSection>,
}

fn need<T>(v: Option<T>, name: &str) -> Result<T> {
    v.ok_or_else(|| Error::Schema(format!("missing section {name:?}")))
}

/// Assembles and validates a report.
pub fn emit_report(s: ReportSections) -> Result<Report> {
    let r = Report {
        schema: REPORT_SCHEMA.to_string(),
        retrieval: need(s.retrieval, "retrieval")?,
        variants: need(s.variants, "variants")?,
        buckets: need(s.buckets, "buckets")?,
        latency: need(s.latency, "latency")?,
        routing: need(s.routing, "routing")?,
        ranker: need(s.ranker, "ranker")?,
        probe: need(s.probe, "probe")?,
    };
    validate_report(&r)?;
    Ok(r)
}

fn unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Schema(format!("{name} = {v} is outside [0, 1]")))
    }
}

fn metrics_in_range(name: &str, m: &SplitMetrics) -> Result<()> {
    for (k, v) in [
        ("recall5", m.recall5),
        ("recall10", m.recall10),
        ("ndcg5", m.ndcg5),
        ("ndcg10", m.ndcg10),
    ] {
        unit(&format!("{name}.{k}"), v)?;
    }
    Ok(())
}

/// Structural and range checks, plus bucket/overall reconciliation.
pub fn validate_report(r: &Report) -> Result<()> {
    if r.schema != REPORT_SCHEMA {
        return Err(Error::Schema(format!("unknown schema {:?}", r.schema)));
    }
    for split in ["valid", "test"] {
        let m = r
            .retrieval
            .get(split)
            .ok_or_else(|| Error::Schema(format!("retrieval lacks split {split:?}")))?;
        metrics_in_range(split, m)?;
    }
    if r.variants.is_empty() {
        return Err(Error::Schema("variants is empty".into()));
    }
    for v in &r.variants {
        unit(&format!("{}.recall10", v.variant), v.recall10)?;
        unit(&format!("{}.ndcg10", v.variant), v.ndcg10)?;
        if !(v.relative_cost.is_finite() && v.relative_cost >= 0.0) {
            return Err(Error::Schema(format!("{}.relative_cost is invalid", v.variant)));
        }
    }
    if r.buckets.len() != 3 {
        return Err(Error::Schema("buckets must list easy, medium and hard".into()));
    }
    let test = &r.retrieval["test"];
    let users: usize = r.buckets.iter().map(|b| b.metrics.users).sum();
    if users != test.users {
        return Err(Error::Schema(format!(
            "bucket users {users} != test users {}",
            test.users
        )));
    }
    if users > 0 {
        for (name, pick) in [
            ("recall5", (|m: &SplitMetrics| m.recall5) as fn(&SplitMetrics) -> f64),
            ("recall10", |m| m.recall10),
            ("ndcg5", |m| m.ndcg5),
            ("ndcg10", |m| m.ndcg10),
        ] {
            let w: f64 = r
                .buckets
                .iter()
                .map(|b| pick(&b.metrics) * b.metrics.users as f64)
                .sum::<f64>()
                / users as f64;
            if (w - pick(test)).abs() > 1e-9 {
                return Err(Error::Schema(format!(
                    "bucket-weighted {name} {w} != overall {}",
                    pick(test)
                )));
            }
        }
    }
    for b in &r.buckets {
        metrics_in_range(b.bucket.name(), &b.metrics)?;
    }
    let l = &r.latency;
    for v in [
        l.mean_seconds,
        l.p50_seconds,
        l.p95_seconds,
        l.throughput,
        l.relative_cost,
    ] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::Schema("latency values must be finite and non-negative".into()));
        }
    }
    let ro = &r.routing;
    for (k, v) in [
        ("fast_fraction", ro.fast_fraction),
        ("rank_fraction", ro.rank_fraction),
        ("slow_fraction", ro.slow_fraction),
        ("other_fraction", ro.other_fraction),
        ("invalid_fraction", ro.invalid_fraction),
        ("oracle_agreement", ro.oracle_agreement),
        ("heuristic_oracle_agreement", ro.heuristic_oracle_agreement),
        ("baseline_oracle_agreement", ro.baseline_oracle_agreement),
    ] {
        unit(&format!("routing.{k}"), v)?;
    }
    unit("ranker.valid_auc", r.ranker.valid_auc)?;
    if r.probe.scorers.is_empty() {
        return Err(Error::Schema("probe has no scorers".into()));
    }
    for (k, p) in &r.probe.scorers {
        unit(&format!("probe.{k}"), p.accuracy)?;
    }
    unit("probe.sid_overlap_level1", r.probe.sid_overlap_level1)?;
    unit("probe.sid_overlap_level12", r.probe.sid_overlap_level12)?;
    Ok(())
}

/// Parses and validates a serialized report.
pub fn parse_report(json: &str) -> Result<Report> {
    let r: Report = serde_json::from_str(json).map_err(|e| Error::Schema(e.to_string()))?;
    validate_report(&r)?;
    Ok(r)
}

pub fn report_json(r: &Report) -> String {
    let mut s = serde_json::to_string_pretty(r).expect("reports always serialize");
    s.push('\n');
    s
}

pub fn variants_csv(r: &Report) -> String {
    let mut s = String::from("variant,recall10,ndcg10,relative_cost\n");
    for v in &r.variants {
        let _ = writeln!(s, "{},{},{},{}", v.variant, v.recall10, v.ndcg10, v.relative_cost);
    }
    s
}

pub fn summary_text(r: &Report) -> String {
    let mut s = String::new();
    for (split, m) in &r.retrieval {
        let _ = writeln!(
            s,
            "{split:<6} users {:>5}  R@5 {:.4}  R@10 {:.4}  N@5 {:.4}  N@10 {:.4}",
            m.users, m.recall5, m.recall10, m.ndcg5, m.ndcg10
        );
    }
    let _ = writeln!(s, "variants (test):");
    for v in &r.variants {
        let _ = writeln!(
            s,
            "  {:<10} R@10 {:.4}  N@10 {:.4}  relative cost {:.3}",
            v.variant, v.recall10, v.ndcg10, v.relative_cost
        );
    }
    let _ = writeln!(s, "difficulty buckets (test):");
    for b in &r.buckets {
        let _ = writeln!(
            s,
            "  {:<6} users {:>5}  R@10 {:.4}  N@10 {:.4}",
            b.bucket.name(),
            b.metrics.users,
            b.metrics.recall10,
            b.metrics.ndcg10
        );
    }
    let l = &r.latency;
    let _ = writeln!(
        s,
        "latency: mean {:.4}s  p50 {:.2}s  p95 {:.2}s  throughput {:.3}/s",
        l.mean_seconds, l.p50_seconds, l.p95_seconds, l.throughput
    );
    let ro = &r.routing;
    let _ = writeln!(
        s,
        "routing: fast {:.3}  rank {:.3}  slow {:.3}  other {:.3}  invalid {:.3}  oracle agreement {:.3}",
        ro.fast_fraction,
        ro.rank_fraction,
        ro.slow_fraction,
        ro.other_fraction,
        ro.invalid_fraction,
        ro.oracle_agreement
    );
    let _ = writeln!(
        s,
        "baselines: heuristic agreement {:.3} (threshold {})  feature classifier agreement {:.3}",
        ro.heuristic_oracle_agreement,
        ro.heuristic_threshold.map_or("inf".to_string(), |t| t.to_string()),
        ro.baseline_oracle_agreement
    );
    let _ = writeln!(s, "ranker: valid AUC {:.4}", r.ranker.valid_auc);
    for (k, p) in &r.probe.scorers {
        let _ = writeln!(s, "probe {k}: accuracy {:.4} over {} pairs", p.accuracy, p.trials);
    }
    let _ = writeln!(
        s,
        "SID prefix overlap of related pairs: level 1 {:.4}, levels 1-2 {:.4}",
        r.probe.sid_overlap_level1, r.probe.sid_overlap_level12
    );
    s
}

/// Writes `report.json`, `summary.txt` and `figure3.csv` into `dir`.
pub fn write_report(r: &Report, dir: &FsPath) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, body) in [
        ("report.json", report_json(r)),
        ("summary.txt", summary_text(r)),
        ("figure3.csv", variants_csv(r)),
    ] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
