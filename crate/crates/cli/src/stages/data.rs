//! `synth-data`, `ingest` and `quantize`.

use std::fs::File;
use std::io::BufReader;

use anyhow::{Context, Result};
use serde_json::{json, Value};
use sidrec::corpus::{generate_synthetic, ingest as ingest_streams, split_leave_one_out, IngestOptions};
use sidrec::jsonl;
use sidrec::quantizer::{assign_catalog, embed_items, fit_codebooks, FitParams, HashingEmbedder};
use sidrec::seqmodel::{VocabSpec, Vocabulary};

use super::{run_stage, to_value, Ctx, StageDef};
use crate::pipeline::{load_catalog, vocab_words};
use crate::workspace::{write_json, write_text};

pub fn synth_data(ctx: &Ctx) -> Result<Value> {
    let def = StageDef {
        name: "synth-data",
        inputs: vec![],
        outputs: &["interactions.jsonl", "items.jsonl"],
        config: to_value(&ctx.cfg.synth),
    };
    run_stage(ctx, def, || {
        let data = generate_synthetic(&ctx.cfg.synth);
        write_text(&ctx.ws.path("interactions.jsonl"), &data.interactions_jsonl)?;
        write_text(&ctx.ws.path("items.jsonl"), &data.items_jsonl)?;
        Ok(json!({
            "users": ctx.cfg.synth.n_users,
            "items": ctx.cfg.synth.n_items,
            "interactions": data.interactions_jsonl.lines().count(),
        }))
    })
}

pub fn ingest(ctx: &Ctx) -> Result<Value> {
    let def = StageDef {
        name: "ingest",
        inputs: vec!["interactions.jsonl", "items.jsonl"],
        outputs: &["corpus_interactions.jsonl", "corpus_items.jsonl"],
        config: to_value(&ctx.cfg.ingest),
    };
    run_stage(ctx, def, || {
        let open = |name: &str| -> Result<BufReader<File>> {
            let p = ctx.ws.path(name);
            Ok(BufReader::new(
                File::open(&p).with_context(|| format!("opening {}", p.display()))?,
            ))
        };
        let opts = IngestOptions {
            min_interactions: ctx.cfg.ingest.min_interactions,
            category_delimiter: ctx.cfg.ingest.category_delimiter.clone(),
        };
        let corpus = ingest_streams(open("interactions.jsonl")?, open("items.jsonl")?, &opts)?;
        let (inter, items) = corpus.to_records(&ctx.cfg.ingest.category_delimiter);
        let split = split_leave_one_out(corpus)?;
        jsonl::write_file(&ctx.ws.path("corpus_interactions.jsonl"), &inter)?;
        jsonl::write_file(&ctx.ws.path("corpus_items.jsonl"), &items)?;
        Ok(json!({
            "users": split.num_users(),
            "items": items.len(),
            "interactions": inter.len(),
        }))
    })
}

pub fn quantize(ctx: &Ctx) -> Result<Value> {
    let q = &ctx.cfg.quantizer;
    let def = StageDef {
        name: "quantize",
        inputs: vec!["corpus_items.jsonl"],
        outputs: &["codebook.json", "sid_map.jsonl", "vocab.json"],
        config: json!({
            "quantizer": to_value(q),
            "k1": ctx.cfg.routing.k1,
            "k2": ctx.cfg.routing.k2,
        }),
    };
    run_stage(ctx, def, || {
        let catalog = load_catalog(&ctx.ws, ctx.cfg)?;
        let embedder = HashingEmbedder::new(q.embed_dim, q.embed_seed)?;
        let emb = embed_items(catalog.items(), &embedder);
        let params = FitParams {
            n_layers: q.n_layers,
            codes_per_layer: q.codes_per_layer,
            seed: q.seed,
            max_iters: q.max_iters,
            tol: q.tol,
        };
        let codebook = fit_codebooks(&emb, &params)?;
        let sid_map = assign_catalog(&emb, &codebook)?;
        let spec = VocabSpec {
            n_levels: q.n_layers,
            codes_per_level: q.codes_per_layer,
            n_disambig: sid_map.max_disambig() as usize,
            numbers: vec![ctx.cfg.routing.k1, ctx.cfg.routing.k2],
            words: vocab_words(&catalog),
        };
        let vocab = Vocabulary::new(spec.clone())?;
        write_json(&ctx.ws.path("codebook.json"), &codebook.to_file())?;
        jsonl::write_file(&ctx.ws.path("sid_map.jsonl"), &sid_map.to_records(&catalog))?;
        write_json(&ctx.ws.path("vocab.json"), &spec)?;
        let colliding = sid_map.sids().iter().filter(|s| s.disambig.is_some()).count();
        Ok(json!({
            "items": catalog.len(),
            "layers": q.n_layers,
            "codes_per_layer": q.codes_per_layer,
            "colliding_items": colliding,
            "vocab_size": vocab.len(),
        }))
    })
}
