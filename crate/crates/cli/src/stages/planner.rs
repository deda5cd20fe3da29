//! `label-routes`, `train-planner-warmup` and `train-planner-rl`.

use std::collections::HashMap;

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sidrec::corpus::ItemIdx;
use sidrec::decoder::hit_rank;
use sidrec::jsonl;
use sidrec::planner::{
    label_rng, pseudo_label, warmup_train, CachedTools, Episode, Path, PlannerEnv, PlannerPolicy, ToolCall,
};
use sidrec::seqmodel::{SequenceModel, Trainable};
use sidrec::slowpath::grpo_train;

use super::{finite, run_stage, to_value, Ctx, StageDef};
use crate::pipeline::{
    load_candidates, load_seqmodel, load_sid_map, load_split, load_vocab, planner_prompts, Frozen, FROZEN_INPUTS,
};
use crate::workspace::write_json;

/// One line of `route_labels.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteLabelRecord {
    pub user_id: String,
    /// 1-based rank of the target in the fast top-`k2`.
    pub rank: Option<usize>,
    pub base: Path,
    pub path: Path,
    pub flipped: bool,
    pub calls: Vec<ToolCall>,
}

/// Share of each path among `paths`, keyed by path name.
pub fn path_fractions(paths: &[Option<Path>]) -> Value {
    let n = paths.len().max(1) as f64;
    let count = |p: Option<Path>| paths.iter().filter(|&&x| x == p).count() as f64 / n;
    json!({
        "fast": count(Some(Path::Fast)),
        "rank": count(Some(Path::Rank)),
        "slow": count(Some(Path::Slow)),
        "other": count(None),
    })
}

pub fn label_routes(ctx: &Ctx) -> Result<Value> {
    let r = &ctx.cfg.routing;
    let def = StageDef {
        name: "label-routes",
        inputs: vec![
            "corpus_interactions.jsonl",
            "corpus_items.jsonl",
            "candidates_train.jsonl",
        ],
        outputs: &["route_labels.jsonl"],
        config: json!({"k1": r.k1, "k2": r.k2, "flip_prob": r.flip_prob, "label_seed": r.label_seed}),
    };
    run_stage(ctx, def, || {
        let split = load_split(&ctx.ws, ctx.cfg)?;
        let cands = load_candidates(&ctx.ws, "candidates_train.jsonl", &split)?;
        let mut records = Vec::new();
        for (u, (items, _)) in cands.iter().enumerate() {
            let Some(ex) = split.last_train_example(u) else {
                continue;
            };
            let top: Vec<ItemIdx> = items.iter().copied().take(r.k2).collect();
            let rank = hit_rank(&top, ex.target);
            let label = pseudo_label(rank, r.k1, r.k2, r.flip_prob, &mut label_rng(r.label_seed, u));
            records.push(RouteLabelRecord {
                user_id: split.user_id(u).to_string(),
                rank,
                base: label.base,
                path: label.path,
                flipped: label.flipped,
                calls: label.path.calls(r.k1, r.k2),
            });
        }
        if records.is_empty() {
            bail!("no user has a training pair to label");
        }
        jsonl::write_file(&ctx.ws.path("route_labels.jsonl"), &records)?;
        let paths: Vec<Option<Path>> = records.iter().map(|l| Some(l.path)).collect();
        Ok(json!({
            "labels": records.len(),
            "flipped": records.iter().filter(|l| l.flipped).count(),
            "paths": path_fractions(&paths),
        }))
    })
}

pub fn train_planner_warmup(ctx: &Ctx) -> Result<Value> {
    let p = &ctx.cfg.planner;
    let def = StageDef {
        name: "train-planner-warmup",
        inputs: vec![
            "corpus_interactions.jsonl",
            "corpus_items.jsonl",
            "codebook.json",
            "sid_map.jsonl",
            "vocab.json",
            "route_labels.jsonl",
        ],
        outputs: &["planner_warmup.ckpt", "warmup_report.json"],
        config: json!({"model": to_value(&p.model), "warmup": to_value(&p.warmup)}),
    };
    run_stage(ctx, def, || {
        let split = load_split(&ctx.ws, ctx.cfg)?;
        let vocab = load_vocab(&ctx.ws)?;
        let sid_map = load_sid_map(&ctx.ws, split.catalog())?;
        let labels: Vec<RouteLabelRecord> = jsonl::read_file(&ctx.ws.path("route_labels.jsonl"))?;
        let users: HashMap<&str, usize> = (0..split.num_users()).map(|u| (split.user_id(u), u)).collect();
        let mut histories = Vec::with_capacity(labels.len());
        for l in &labels {
            let ex = users
                .get(l.user_id.as_str())
                .and_then(|&u| split.last_train_example(u))
                .ok_or_else(|| anyhow::anyhow!("route label for unknown or unlabelable user {:?}", l.user_id))?;
            histories.push(ex.history);
        }
        let prompts = planner_prompts(&histories, &sid_map, &vocab, p.model.max_len);
        let calls: Vec<Vec<ToolCall>> = labels.iter().map(|l| l.calls.clone()).collect();
        let mut model = SequenceModel::new(p.model.clone(), &vocab)?;
        log::info!("train-planner-warmup: imitating {} labeled routes", labels.len());
        let (report, agreement) = warmup_train(
            &mut model,
            &prompts,
            &calls,
            &vocab,
            &p.warmup.to_train_config(p.model.max_len, Trainable::All),
        )?;
        for &l in &report.epoch_losses {
            finite("planner warm-up loss", l)?;
        }
        model.to_checkpoint().save(&ctx.ws.path("planner_warmup.ckpt"))?;
        let label_paths: Vec<Option<Path>> = labels.iter().map(|l| Some(l.path)).collect();
        let policy = PlannerPolicy {
            model: &model,
            vocab: &vocab,
        };
        let decided: Vec<Option<Path>> = prompts.iter().map(|q| policy.path(q)).collect();
        write_json(
            &ctx.ws.path("warmup_report.json"),
            &json!({
                "examples": labels.len(),
                "epoch_losses": report.epoch_losses,
                "label_agreement": agreement,
                "label_paths": path_fractions(&label_paths),
                "policy_paths": path_fractions(&decided),
            }),
        )?;
        Ok(json!({"label_agreement": agreement, "final_loss": report.epoch_losses.last()}))
    })
}

pub fn train_planner_rl(ctx: &Ctx) -> Result<Value> {
    let c = ctx.cfg;
    let mut inputs = vec![
        "corpus_interactions.jsonl",
        "corpus_items.jsonl",
        "candidates_valid.jsonl",
        "planner_warmup.ckpt",
    ];
    inputs.extend(FROZEN_INPUTS);
    let def = StageDef {
        name: "train-planner-rl",
        inputs,
        outputs: &["planner.ckpt", "planner_rl_report.json"],
        config: json!({
            "grpo": to_value(&c.planner.grpo),
            "routing": to_value(&c.routing),
            "decoder": to_value(&c.decoder),
            "max_think": c.slow.max_think,
        }),
    };
    run_stage(ctx, def, || {
        let split = load_split(&ctx.ws, c)?;
        let frozen = Frozen::load(&ctx.ws, split.catalog())?;
        let cands = load_candidates(&ctx.ws, "candidates_valid.jsonl", &split)?;
        let histories: Vec<&[ItemIdx]> = (0..split.num_users()).map(|u| split.valid_example(u).history).collect();
        let episodes: Vec<Episode> = (0..split.num_users())
            .map(|u| Episode {
                user: u,
                target: split.valid_example(u).target,
            })
            .collect();
        let fast_lists: Vec<&[ItemIdx]> = cands.iter().map(|(i, _)| i.as_slice()).collect();
        let tools = CachedTools::new(frozen.tools(histories.clone(), fast_lists, c));
        let mut model = load_seqmodel(&ctx.ws, "planner_warmup.ckpt", &frozen.vocab)?;
        let prompts = planner_prompts(&histories, &frozen.sid_map, &frozen.vocab, model.config().max_len);
        let env = PlannerEnv {
            prompts: &prompts,
            episodes: &episodes,
            tools: &tools,
            cost: c.routing.cost.clone(),
            vocab: &frozen.vocab,
            k_final: c.routing.k1,
        };
        log::info!(
            "train-planner-rl: {} iterations over {} validation users",
            c.planner.grpo.iterations,
            episodes.len()
        );
        let report = grpo_train(&mut model, &env, &c.planner.grpo, |s, _| {
            log::debug!(
                "train-planner-rl: iteration {} mean reward {:.4}",
                s.iteration,
                s.mean_reward
            );
        })?;
        let mut iterations = Vec::new();
        for s in &report.iterations {
            finite("planner policy loss", s.loss)?;
            iterations.push(json!({
                "iteration": s.iteration,
                "mean_reward": s.mean_reward,
                "groups": s.groups,
                "degenerate_groups": s.degenerate_groups,
                "loss": s.loss,
            }));
        }
        model.to_checkpoint().save(&ctx.ws.path("planner.ckpt"))?;
        let policy = PlannerPolicy {
            model: &model,
            vocab: &frozen.vocab,
        };
        let decided: Vec<Option<Path>> = prompts.iter().map(|q| policy.path(q)).collect();
        let fractions = path_fractions(&decided);
        write_json(
            &ctx.ws.path("planner_rl_report.json"),
            &json!({"iterations": iterations, "valid_paths": fractions}),
        )?;
        Ok(json!({
            "first_mean_reward": report.iterations.first().map(|s| s.mean_reward),
            "last_mean_reward": report.iterations.last().map(|s| s.mean_reward),
            "valid_paths": fractions,
        }))
    })
}
