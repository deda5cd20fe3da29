//! `train-fast` and `train-ranker`.

use anyhow::Result;
use serde_json::{json, Value};
use sidrec::corpus::{Example, ItemIdx, SplitCorpus};
use sidrec::decoder::{hit_rank, recommend, CandidateRecord, SidTrie};
use sidrec::evaluation::split_metrics;
use sidrec::jsonl;
use sidrec::ranker::{build_ranker_dataset, catalog_hash, train_ranker as fit_ranker, RankerModel, RankerSource};
use sidrec::seqmodel::{sid_embedding_rows, train_alignment, train_fast as fit_fast, SequenceModel, Trainable};

use super::{finite, run_stage, to_value, Ctx, StageDef};
use crate::pipeline::{load_candidates, load_sid_map, load_split, load_vocab};
use crate::workspace::write_json;

/// Candidate files and the context each is retrieved from.
const CANDIDATE_SPLITS: [(&str, &str); 3] = [
    ("train", "candidates_train.jsonl"),
    ("valid", "candidates_valid.jsonl"),
    ("test", "candidates_test.jsonl"),
];

/// The example a split's candidates answer for `user`; train uses the last
/// training pair, which some short sequences lack.
pub fn split_example<'a>(split: &'a SplitCorpus, name: &str, user: usize) -> Option<Example<'a>> {
    match name {
        "train" => split.last_train_example(user),
        "valid" => Some(split.valid_example(user)),
        "test" => Some(split.test_example(user)),
        _ => unreachable!("unknown split {name}"),
    }
}

pub fn train_fast(ctx: &Ctx) -> Result<Value> {
    let def = StageDef {
        name: "train-fast",
        inputs: vec![
            "corpus_interactions.jsonl",
            "corpus_items.jsonl",
            "codebook.json",
            "sid_map.jsonl",
            "vocab.json",
        ],
        outputs: &[
            "fast.ckpt",
            "fast_report.json",
            "candidates_train.jsonl",
            "candidates_valid.jsonl",
            "candidates_test.jsonl",
        ],
        config: json!({"fast": to_value(&ctx.cfg.fast), "decoder": to_value(&ctx.cfg.decoder)}),
    };
    run_stage(ctx, def, || {
        let cfg = &ctx.cfg.fast;
        let split = load_split(&ctx.ws, ctx.cfg)?;
        let catalog = split.catalog();
        let vocab = load_vocab(&ctx.ws)?;
        let sid_map = load_sid_map(&ctx.ws, catalog)?;
        let mut model = SequenceModel::new(cfg.model.clone(), &vocab)?;
        let max_len = cfg.model.max_len;

        log::info!("train-fast: aligning SID embeddings on {} items", catalog.len());
        let align = train_alignment(
            &mut model,
            &sid_map,
            catalog,
            &vocab,
            &cfg.align.to_train_config(max_len, sid_embedding_rows(&vocab)),
        )?;
        log::info!("train-fast: training on next-item prediction");
        let train = fit_fast(
            &mut model,
            &split,
            &sid_map,
            &vocab,
            &cfg.train.to_train_config(max_len, Trainable::All),
        )?;
        for &l in align.epoch_losses.iter().chain(&train.epoch_losses) {
            finite("fast training loss", l)?;
        }
        model.to_checkpoint().save(&ctx.ws.path("fast.ckpt"))?;

        let trie = SidTrie::build(&sid_map, &vocab)?;
        let mut metrics = serde_json::Map::new();
        for (name, artifact) in CANDIDATE_SPLITS {
            log::info!(
                "train-fast: retrieving {name} candidates for {} users",
                split.num_users()
            );
            let mut records = Vec::with_capacity(split.num_users());
            let mut ranks = Vec::new();
            for u in 0..split.num_users() {
                let cands = match split_example(&split, name, u) {
                    Some(ex) => {
                        let c = recommend(&model, ex.history, &sid_map, &vocab, &trie, &ctx.cfg.decoder)?;
                        let items: Vec<ItemIdx> = c.iter().map(|c| c.item).collect();
                        ranks.push(hit_rank(&items, ex.target));
                        c
                    }
                    None => Vec::new(),
                };
                records.push(CandidateRecord::new(split.user_id(u), &cands, catalog));
            }
            jsonl::write_file(&ctx.ws.path(artifact), &records)?;
            metrics.insert(name.to_string(), to_value(&split_metrics(&ranks)));
        }
        let report = json!({
            "align_losses": align.epoch_losses,
            "train_losses": train.epoch_losses,
            "metrics": metrics,
        });
        write_json(&ctx.ws.path("fast_report.json"), &report)?;
        Ok(json!({
            "final_loss": train.epoch_losses.last(),
            "valid_recall10": report["metrics"]["valid"]["recall10"],
            "test_recall10": report["metrics"]["test"]["recall10"],
        }))
    })
}

/// Ranker instances from one split's candidates; users whose split has no
/// example are skipped.
fn ranker_sources<'a>(
    split: &'a SplitCorpus,
    name: &str,
    cands: &'a [(Vec<ItemIdx>, Vec<f64>)],
) -> Vec<RankerSource<'a>> {
    (0..split.num_users())
        .filter_map(|u| {
            split_example(split, name, u).map(|ex| RankerSource {
                history: ex.history,
                target: ex.target,
                candidates: &cands[u].0,
            })
        })
        .collect()
}

pub fn train_ranker(ctx: &Ctx) -> Result<Value> {
    let def = StageDef {
        name: "train-ranker",
        inputs: vec![
            "corpus_interactions.jsonl",
            "corpus_items.jsonl",
            "candidates_train.jsonl",
            "candidates_valid.jsonl",
        ],
        outputs: &["ranker.ckpt", "ranker_report.json"],
        config: json!({"ranker": to_value(&ctx.cfg.ranker), "k1": ctx.cfg.routing.k1}),
    };
    run_stage(ctx, def, || {
        let cfg = &ctx.cfg.ranker;
        let k1 = ctx.cfg.routing.k1;
        let split = load_split(&ctx.ws, ctx.cfg)?;
        let catalog = split.catalog();
        let train_c = load_candidates(&ctx.ws, "candidates_train.jsonl", &split)?;
        let valid_c = load_candidates(&ctx.ws, "candidates_valid.jsonl", &split)?;
        let (train, train_stats) =
            build_ranker_dataset(&ranker_sources(&split, "train", &train_c), k1, cfg.dataset_seed)?;
        let (valid, valid_stats) = build_ranker_dataset(
            &ranker_sources(&split, "valid", &valid_c),
            k1,
            cfg.dataset_seed.wrapping_add(1),
        )?;
        let mut model = RankerModel::new(cfg.model.clone(), catalog.len(), catalog_hash(catalog))?;
        log::info!(
            "train-ranker: {} train and {} valid instances",
            train.len(),
            valid.len()
        );
        let report = fit_ranker(&mut model, &train, &valid, &cfg.train)?;
        for &l in &report.epoch_losses {
            finite("ranker loss", l)?;
        }
        model.to_checkpoint().save(&ctx.ws.path("ranker.ckpt"))?;
        let valid_auc = report.valid_aucs[report.best_epoch];
        let body = json!({
            "epoch_losses": report.epoch_losses,
            "valid_aucs": report.valid_aucs,
            "best_epoch": report.best_epoch,
            "valid_auc": valid_auc,
            "train_groups": train_stats.groups,
            "train_inserted_positives": train_stats.inserted_positives,
            "train_short_groups": train_stats.short_groups,
            "valid_groups": valid_stats.groups,
            "valid_inserted_positives": valid_stats.inserted_positives,
        });
        write_json(&ctx.ws.path("ranker_report.json"), &body)?;
        Ok(json!({"valid_auc": valid_auc, "best_epoch": report.best_epoch}))
    })
}
