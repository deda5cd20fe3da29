//! `evaluate`, `probe-i2i` and `analyze-routing`.

use std::collections::BTreeMap;

use anyhow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sidrec::corpus::{Catalog, I2IPair, I2IRecord, ItemIdx, SplitCorpus};
use sidrec::evaluation::{
    bucket_metrics, cosine_scorer, emit_report, i2i_probe, latency_report, sid_prefix_overlap, split_metrics,
    write_report, ProbeSection, RankerSection, ReportSections, RoutingSection, SplitMetrics, VariantRow,
};
use sidrec::jsonl;
use sidrec::planner::{
    agreement, classify_difficulty, distinct_categories, execute_route, heuristic_route, oracle_route, route_features,
    tune_threshold, CachedTools, Difficulty, Episode, LogisticBaseline, Path, PlannerPolicy, RouteReward,
    RoutingDecision, ThresholdSample, ToolCall, ToolCounts,
};
use sidrec::quantizer::{embed_items, HashingEmbedder, SidMap};
use sidrec::ranker::RankerModel;
use sidrec::seqmodel::SequenceModel;

use super::planner::path_fractions;
use super::{run_stage, to_value, Ctx, StageDef};
use crate::pipeline::{
    load_candidates, load_ranker, load_seqmodel, load_sid_map, load_split, planner_prompts, Frozen, FROZEN_INPUTS,
};
use crate::workspace::{read_json, write_json};

/// One line of `routing_log.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoutingLogRecord {
    pub split: String,
    pub user_id: String,
    pub calls: Vec<ToolCall>,
    pub path: Option<Path>,
    pub valid: bool,
    pub final_list: Vec<String>,
    pub hit_rank: Option<usize>,
    pub latency: f64,
    pub reward: RouteReward,
    pub oracle_path: Path,
    pub difficulty: Difficulty,
}

/// Every route evaluated for one split, indexed by user.
struct SplitRun {
    adaptive: Vec<RoutingDecision>,
    /// Fast, rank and slow template outcomes per user.
    templates: Vec<Vec<RoutingDecision>>,
    oracle: Vec<Path>,
    features: Vec<Vec<f64>>,
    distinct: Vec<usize>,
}

fn run_split(
    ctx: &Ctx,
    split: &SplitCorpus,
    name: &str,
    frozen: &Frozen,
    planner: &SequenceModel,
    cands: &[(Vec<ItemIdx>, Vec<f64>)],
) -> Result<SplitRun> {
    let c = ctx.cfg;
    let r = &c.routing;
    let catalog = split.catalog();
    let examples: Vec<_> = (0..split.num_users())
        .map(|u| {
            if name == "valid" {
                split.valid_example(u)
            } else {
                split.test_example(u)
            }
        })
        .collect();
    let histories: Vec<&[ItemIdx]> = examples.iter().map(|e| e.history).collect();
    let fast_lists: Vec<&[ItemIdx]> = cands.iter().map(|(i, _)| i.as_slice()).collect();
    let tools = CachedTools::new(frozen.tools(histories.clone(), fast_lists, c));
    let prompts = planner_prompts(&histories, &frozen.sid_map, &frozen.vocab, planner.config().max_len);
    let policy = PlannerPolicy {
        model: planner,
        vocab: &frozen.vocab,
    };
    let mut run = SplitRun {
        adaptive: Vec::new(),
        templates: Vec::new(),
        oracle: Vec::new(),
        features: Vec::new(),
        distinct: Vec::new(),
    };
    log::info!("evaluate: routing {} {name} users", examples.len());
    for (u, ex) in examples.iter().enumerate() {
        let ep = Episode {
            user: u,
            target: ex.target,
        };
        // a malformed plan runs as the empty (invalid) route
        let calls = policy.decide(&prompts[u]).calls.unwrap_or_default();
        run.adaptive.push(execute_route(&calls, ep, &tools, &r.cost, r.k1)?);
        let (best, decisions) = oracle_route(ep, &tools, &r.cost, r.k1, r.k2)?;
        run.oracle.push(best);
        run.templates.push(decisions);
        run.features
            .push(route_features(ex.history, catalog, &cands[u].1).to_vec());
        run.distinct
            .push(distinct_categories(ex.history, catalog, c.evaluate.category_level));
    }
    Ok(run)
}

fn metrics(decisions: &[&RoutingDecision]) -> SplitMetrics {
    split_metrics(&decisions.iter().map(|d| d.hit_rank).collect::<Vec<_>>())
}

fn mean_latency(decisions: &[&RoutingDecision]) -> f64 {
    decisions.iter().map(|d| d.latency).sum::<f64>() / decisions.len().max(1) as f64
}

fn pick<'a>(run: &'a SplitRun, paths: &[Path]) -> Vec<&'a RoutingDecision> {
    run.templates.iter().zip(paths).map(|(t, p)| &t[p.index()]).collect()
}

/// Top-1 accuracy of several scorers on the highest-count I2I pairs.
fn probe_section(ctx: &Ctx, catalog: &Catalog, sid_map: &SidMap, ranker: &RankerModel) -> Result<ProbeSection> {
    let e = &ctx.cfg.evaluate;
    let records: Vec<I2IRecord> = jsonl::read_file(&ctx.ws.path("i2i.jsonl"))?;
    let mut pairs: Vec<I2IPair> = records
        .iter()
        .map(|r| I2IPair::from_record(r, catalog))
        .collect::<sidrec::Result<_>>()?;
    if e.probe_pairs > 0 {
        pairs.truncate(e.probe_pairs);
    }
    let q = &ctx.cfg.quantizer;
    let embedder = HashingEmbedder::new(q.embed_dim, q.embed_seed)?;
    let vectors: Vec<Vec<f64>> = embed_items(catalog.items(), &embedder)
        .into_iter()
        .map(|e| e.vector)
        .collect();
    let n = catalog.len();
    let mut scorers = BTreeMap::new();
    scorers.insert(
        "text_cosine".to_string(),
        i2i_probe(
            &pairs,
            n,
            &mut cosine_scorer(&vectors),
            e.probe_distractors,
            e.probe_seed,
        )?,
    );
    let mut by_ranker = |src: ItemIdx, cands: &[ItemIdx]| ranker.score(&[src], cands);
    scorers.insert(
        "ranker".to_string(),
        i2i_probe(&pairs, n, &mut by_ranker, e.probe_distractors, e.probe_seed)?,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(e.probe_seed.wrapping_add(1));
    let mut random = |_: ItemIdx, cands: &[ItemIdx]| cands.iter().map(|_| rng.random::<f64>()).collect::<Vec<_>>();
    scorers.insert(
        "random".to_string(),
        i2i_probe(&pairs, n, &mut random, e.probe_distractors, e.probe_seed)?,
    );
    let (l1, l12) = sid_prefix_overlap(&pairs, sid_map);
    Ok(ProbeSection {
        distractors: e.probe_distractors,
        scorers,
        sid_overlap_level1: l1,
        sid_overlap_level12: l12,
    })
}

fn probe_config(ctx: &Ctx) -> Value {
    let e = &ctx.cfg.evaluate;
    json!({
        "probe_distractors": e.probe_distractors,
        "probe_pairs": e.probe_pairs,
        "probe_seed": e.probe_seed,
        "embed_dim": ctx.cfg.quantizer.embed_dim,
        "embed_seed": ctx.cfg.quantizer.embed_seed,
    })
}

pub fn evaluate(ctx: &Ctx) -> Result<Value> {
    let c = ctx.cfg;
    let mut inputs = vec![
        "corpus_interactions.jsonl",
        "corpus_items.jsonl",
        "candidates_valid.jsonl",
        "candidates_test.jsonl",
        "planner.ckpt",
        "ranker_report.json",
        "i2i.jsonl",
    ];
    inputs.extend(FROZEN_INPUTS);
    let def = StageDef {
        name: "evaluate",
        inputs,
        outputs: &["routing_log.jsonl", "report.json", "summary.txt", "figure3.csv"],
        config: json!({
            "routing": to_value(&c.routing),
            "decoder": to_value(&c.decoder),
            "evaluate": to_value(&c.evaluate),
            "max_think": c.slow.max_think,
            "probe": probe_config(ctx),
        }),
    };
    run_stage(ctx, def, || {
        let e = &c.evaluate;
        let split = load_split(&ctx.ws, c)?;
        let catalog = split.catalog();
        let frozen = Frozen::load(&ctx.ws, catalog)?;
        let planner = load_seqmodel(&ctx.ws, "planner.ckpt", &frozen.vocab)?;
        let valid_c = load_candidates(&ctx.ws, "candidates_valid.jsonl", &split)?;
        let test_c = load_candidates(&ctx.ws, "candidates_test.jsonl", &split)?;
        let valid = run_split(ctx, &split, "valid", &frozen, &planner, &valid_c)?;
        let test = run_split(ctx, &split, "test", &frozen, &planner, &test_c)?;

        // both reference routers are fit on validation users only
        let samples: Vec<ThresholdSample> = (0..valid.oracle.len())
            .map(|u| ThresholdSample {
                distinct_categories: valid.distinct[u],
                fast_reward: valid.templates[u][Path::Fast.index()].reward.total,
                slow_reward: valid.templates[u][Path::Slow.index()].reward.total,
            })
            .collect();
        let threshold = tune_threshold(&samples);
        let baseline = LogisticBaseline::fit(
            &valid.features,
            &valid.oracle,
            e.baseline_epochs,
            e.baseline_lr,
            e.baseline_l2,
        )?;
        let heuristic_paths: Vec<Path> = test.distinct.iter().map(|&d| heuristic_route(d, threshold)).collect();
        let baseline_paths: Vec<Path> = test.features.iter().map(|x| baseline.predict(x)).collect();

        let adaptive: Vec<&RoutingDecision> = test.adaptive.iter().collect();
        let adaptive_latency = mean_latency(&adaptive);
        let mut variants = Vec::new();
        let mut add = |name: &str, d: Vec<&RoutingDecision>| {
            let m = metrics(&d);
            variants.push(VariantRow {
                variant: name.to_string(),
                recall10: m.recall10,
                ndcg10: m.ndcg10,
                relative_cost: if adaptive_latency > 0.0 {
                    mean_latency(&d) / adaptive_latency
                } else {
                    0.0
                },
            });
        };
        let n = test.oracle.len();
        add("fast", pick(&test, &vec![Path::Fast; n]));
        add("fast_rank", pick(&test, &vec![Path::Rank; n]));
        add("slow", pick(&test, &vec![Path::Slow; n]));
        add("heuristic", pick(&test, &heuristic_paths));
        add("baseline", pick(&test, &baseline_paths));
        add("adaptive", adaptive.clone());
        add("oracle", pick(&test, &test.oracle));

        let mut retrieval = BTreeMap::new();
        retrieval.insert("valid".to_string(), metrics(&valid.adaptive.iter().collect::<Vec<_>>()));
        retrieval.insert("test".to_string(), metrics(&adaptive));
        let difficulty: Vec<Difficulty> = test.distinct.iter().map(|&d| classify_difficulty(d)).collect();
        let ranks: Vec<Option<usize>> = adaptive.iter().map(|d| d.hit_rank).collect();
        let counts: Vec<ToolCounts> = adaptive.iter().map(|d| d.counts()).collect();

        let paths: Vec<Option<Path>> = adaptive.iter().map(|d| d.path).collect();
        let agree = agreement(&paths, &test.oracle);
        let frac = |p: Option<Path>| paths.iter().filter(|&&x| x == p).count() as f64 / n.max(1) as f64;
        let some = |v: &[Path]| v.iter().map(|&p| Some(p)).collect::<Vec<_>>();
        let routing = RoutingSection {
            users: n,
            fast_fraction: frac(Some(Path::Fast)),
            rank_fraction: frac(Some(Path::Rank)),
            slow_fraction: frac(Some(Path::Slow)),
            other_fraction: frac(None),
            invalid_fraction: adaptive.iter().filter(|d| !d.valid).count() as f64 / n.max(1) as f64,
            oracle_agreement: agree.fraction,
            confusion: RoutingSection::confusion_rows(&agree.confusion),
            mean_latency: adaptive_latency,
            mean_reward: adaptive.iter().map(|d| d.reward.total).sum::<f64>() / n.max(1) as f64,
            heuristic_threshold: threshold,
            heuristic_oracle_agreement: agreement(&some(&heuristic_paths), &test.oracle).fraction,
            baseline_oracle_agreement: agreement(&some(&baseline_paths), &test.oracle).fraction,
        };
        let ranker_report: Value = read_json(&ctx.ws.path("ranker_report.json"))?;
        let valid_auc = ranker_report["valid_auc"]
            .as_f64()
            .ok_or_else(|| anyhow::anyhow!("ranker_report.json lacks valid_auc"))?;

        let report = emit_report(ReportSections {
            retrieval: Some(retrieval),
            variants: Some(variants),
            buckets: Some(bucket_metrics(&ranks, &difficulty)),
            latency: Some(latency_report(&counts, &c.routing.cost, None)),
            routing: Some(routing),
            ranker: Some(RankerSection { valid_auc }),
            probe: Some(probe_section(ctx, catalog, &frozen.sid_map, &frozen.ranker)?),
        })?;

        let mut log = Vec::new();
        for (name, run) in [("valid", &valid), ("test", &test)] {
            for (u, d) in run.adaptive.iter().enumerate() {
                log.push(RoutingLogRecord {
                    split: name.to_string(),
                    user_id: split.user_id(u).to_string(),
                    calls: d.calls.clone(),
                    path: d.path,
                    valid: d.valid,
                    final_list: d.final_list.iter().map(|&i| catalog.id(i).to_string()).collect(),
                    hit_rank: d.hit_rank,
                    latency: d.latency,
                    reward: d.reward.clone(),
                    oracle_path: run.oracle[u],
                    difficulty: classify_difficulty(run.distinct[u]),
                });
            }
        }
        jsonl::write_file(&ctx.ws.path("routing_log.jsonl"), &log)?;
        write_report(&report, &ctx.ws.dir)?;
        let test_m = &report.retrieval["test"];
        Ok(json!({
            "test_recall10": test_m.recall10,
            "test_ndcg10": test_m.ndcg10,
            "oracle_agreement": report.routing.oracle_agreement,
            "mean_latency": report.routing.mean_latency,
            "paths": path_fractions(&paths),
        }))
    })
}

pub fn probe_i2i(ctx: &Ctx) -> Result<Value> {
    let def = StageDef {
        name: "probe-i2i",
        inputs: vec![
            "corpus_interactions.jsonl",
            "corpus_items.jsonl",
            "codebook.json",
            "sid_map.jsonl",
            "i2i.jsonl",
            "ranker.ckpt",
        ],
        outputs: &["probe_report.json"],
        config: probe_config(ctx),
    };
    run_stage(ctx, def, || {
        let split = load_split(&ctx.ws, ctx.cfg)?;
        let catalog = split.catalog();
        let sid_map = load_sid_map(&ctx.ws, catalog)?;
        let ranker = load_ranker(&ctx.ws, catalog)?;
        let probe = probe_section(ctx, catalog, &sid_map, &ranker)?;
        write_json(&ctx.ws.path("probe_report.json"), &probe)?;
        let acc: BTreeMap<&str, f64> = probe.scorers.iter().map(|(k, v)| (k.as_str(), v.accuracy)).collect();
        Ok(json!({"accuracy": acc, "sid_overlap_level1": probe.sid_overlap_level1}))
    })
}

pub fn analyze_routing(ctx: &Ctx) -> Result<Value> {
    let def = StageDef {
        name: "analyze-routing",
        inputs: vec![
            "corpus_interactions.jsonl",
            "corpus_items.jsonl",
            "planner.ckpt",
            "routing_log.jsonl",
        ],
        outputs: &["planner_report.json"],
        config: json!({}),
    };
    run_stage(ctx, def, || {
        let split = load_split(&ctx.ws, ctx.cfg)?;
        let log: Vec<RoutingLogRecord> = jsonl::read_file(&ctx.ws.path("routing_log.jsonl"))?;
        let mut report = serde_json::Map::new();
        for name in ["valid", "test"] {
            let rows: Vec<&RoutingLogRecord> = log.iter().filter(|r| r.split == name).collect();
            if rows.len() != split.num_users() {
                anyhow::bail!(
                    "routing_log.jsonl has {} {name} rows but the corpus has {} users",
                    rows.len(),
                    split.num_users()
                );
            }
            let paths: Vec<Option<Path>> = rows.iter().map(|r| r.path).collect();
            let oracle: Vec<Path> = rows.iter().map(|r| r.oracle_path).collect();
            let agree = agreement(&paths, &oracle);
            let n = rows.len().max(1) as f64;
            let mut by_bucket = serde_json::Map::new();
            for b in Difficulty::ALL {
                let sel: Vec<Option<Path>> = rows.iter().filter(|r| r.difficulty == b).map(|r| r.path).collect();
                by_bucket.insert(
                    b.name().to_string(),
                    json!({"users": sel.len(), "paths": path_fractions(&sel)}),
                );
            }
            report.insert(
                name.to_string(),
                json!({
                    "users": rows.len(),
                    "paths": path_fractions(&paths),
                    "oracle_paths": path_fractions(&oracle.iter().map(|&p| Some(p)).collect::<Vec<_>>()),
                    "invalid_fraction": rows.iter().filter(|r| !r.valid).count() as f64 / n,
                    "oracle_agreement": agree.fraction,
                    "confusion": RoutingSection::confusion_rows(&agree.confusion),
                    "mean_latency": rows.iter().map(|r| r.latency).sum::<f64>() / n,
                    "mean_reward": rows.iter().map(|r| r.reward.total).sum::<f64>() / n,
                    "buckets": by_bucket,
                }),
            );
        }
        write_json(&ctx.ws.path("planner_report.json"), &Value::Object(report.clone()))?;
        Ok(json!({
            "test_oracle_agreement": report["test"]["oracle_agreement"],
            "test_paths": report["test"]["paths"],
        }))
    })
}
