//! `build-i2i` and `train-slow`.

#[cfg(feature = "http-teacher")]
use std::time::Duration;

use anyhow::Result;
use serde_json::{json, Value};
use sidrec::corpus::{extract_i2i, I2IRecord};
use sidrec::jsonl;
use sidrec::seqmodel::{build_alignment_corpus, train_lm, LmExample, Trainable};
use sidrec::slowpath::{
    build_i2i_instructions, collab_example, explain_all, grpo_train, mix_one_to_one, select_hard_samples,
    slow_format_example, FixtureTeacher, I2IInstruction, SlowEnv, TeacherClient,
};

use super::{finite, run_stage, to_value, Ctx, StageDef};
use crate::config::{TeacherMode, TeacherSettings};
use crate::pipeline::{load_candidates, load_seqmodel, load_sid_map, load_split, load_vocab};
use crate::workspace::write_json;
#[cfg(not(feature = "http-teacher"))]
use crate::CliError;

fn teacher(t: &TeacherSettings) -> Result<Box<dyn TeacherClient>> {
    match t.mode {
        TeacherMode::Fixture => Ok(Box::new(FixtureTeacher)),
        #[cfg(feature = "http-teacher")]
        TeacherMode::Http => Ok(Box::new(sidrec::slowpath::RetryingTeacher {
            inner: sidrec::slowpath::HttpTeacher {
                endpoint: t.endpoint.clone(),
                model: t.model.clone(),
                token_env: t.token_env.clone(),
                timeout: Duration::from_secs(t.timeout_secs),
            },
            max_attempts: t.max_attempts,
            base_delay: Duration::from_millis(500),
        })),
        #[cfg(not(feature = "http-teacher"))]
        TeacherMode::Http => Err(CliError::Config(
            "i2i.teacher.mode = \"http\" needs a build with the `http-teacher` feature".into(),
        )
        .into()),
    }
}

pub fn build_i2i(ctx: &Ctx) -> Result<Value> {
    let def = StageDef {
        name: "build-i2i",
        inputs: vec!["corpus_interactions.jsonl", "corpus_items.jsonl"],
        outputs: &["i2i.jsonl", "i2i_instructions.jsonl"],
        config: to_value(&ctx.cfg.i2i),
    };
    run_stage(ctx, def, || {
        let cfg = &ctx.cfg.i2i;
        let teacher = teacher(&cfg.teacher)?;
        let split = load_split(&ctx.ws, ctx.cfg)?;
        let catalog = split.catalog();
        let mut pairs = extract_i2i(split.training_sequences(), catalog, cfg.window, cfg.min_count)?;
        let found = pairs.len();
        if cfg.max_pairs > 0 {
            pairs.truncate(cfg.max_pairs);
        }
        log::info!("build-i2i: {found} pairs, keeping {}", pairs.len());
        let records: Vec<I2IRecord> = pairs.iter().map(|p| p.to_record(catalog)).collect();
        let (explained, stats) = explain_all(build_i2i_instructions(&pairs, catalog), teacher.as_ref());
        jsonl::write_file(&ctx.ws.path("i2i.jsonl"), &records)?;
        jsonl::write_file(&ctx.ws.path("i2i_instructions.jsonl"), &explained)?;
        Ok(json!({
            "pairs_found": found,
            "pairs_kept": pairs.len(),
            "explained": explained.len(),
            "teacher_failures": stats.failed,
            "too_short": stats.too_short,
        }))
    })
}

pub fn train_slow(ctx: &Ctx) -> Result<Value> {
    let def = StageDef {
        name: "train-slow",
        inputs: vec![
            "corpus_interactions.jsonl",
            "corpus_items.jsonl",
            "codebook.json",
            "sid_map.jsonl",
            "vocab.json",
            "fast.ckpt",
            "candidates_train.jsonl",
            "i2i_instructions.jsonl",
        ],
        outputs: &["slow.ckpt", "hard_samples.jsonl", "slow_report.json"],
        config: to_value(&ctx.cfg.slow),
    };
    run_stage(ctx, def, || {
        let cfg = &ctx.cfg.slow;
        let split = load_split(&ctx.ws, ctx.cfg)?;
        let catalog = split.catalog();
        let vocab = load_vocab(&ctx.ws)?;
        let sid_map = load_sid_map(&ctx.ws, catalog)?;
        let mut model = load_seqmodel(&ctx.ws, "fast.ckpt", &vocab)?;
        let max_len = model.config().max_len;

        let instructions: Vec<I2IInstruction> = jsonl::read_file(&ctx.ws.path("i2i_instructions.jsonl"))?;
        let align: Vec<LmExample> = build_alignment_corpus(&sid_map, catalog, &vocab)
            .into_iter()
            .map(LmExample::language_model)
            .collect();
        let collab: Vec<LmExample> = instructions.iter().map(|i| collab_example(i, &vocab)).collect();
        let mut examples = mix_one_to_one(align, collab, cfg.sft.seed);
        let mut format_count = 0;
        if cfg.format_examples {
            for u in 0..split.num_users() {
                if let Some(ex) = split.last_train_example(u) {
                    examples.push(slow_format_example(ex.history, ex.target, &sid_map, &vocab, max_len));
                    format_count += 1;
                }
            }
        }
        log::info!("train-slow: supervised stage on {} examples", examples.len());
        let sft = train_lm(&mut model, &examples, &cfg.sft.to_train_config(max_len, Trainable::All))?;
        for &l in &sft.epoch_losses {
            finite("slow supervised loss", l)?;
        }

        let cands: Vec<Vec<_>> = load_candidates(&ctx.ws, "candidates_train.jsonl", &split)?
            .into_iter()
            .map(|(items, _)| items)
            .collect();
        let hard = select_hard_samples(&split, &cands)?;
        let hard_records: Vec<Value> = hard
            .iter()
            .map(|h| {
                json!({
                    "user_id": split.user_id(h.user),
                    "history": h.history.iter().map(|&i| catalog.id(i)).collect::<Vec<_>>(),
                    "target": catalog.id(h.target),
                })
            })
            .collect();
        jsonl::write_file(&ctx.ws.path("hard_samples.jsonl"), &hard_records)?;

        let mut iterations = Vec::new();
        if hard.is_empty() {
            log::warn!("train-slow: no hard samples, skipping reinforcement stage");
        } else {
            log::info!("train-slow: reinforcement on {} hard samples", hard.len());
            let env = SlowEnv::new(
                &hard,
                &sid_map,
                &vocab,
                cfg.rewards.clone(),
                cfg.decoding,
                cfg.max_think,
            );
            let report = grpo_train(&mut model, &env, &cfg.grpo, |s, _| {
                log::debug!("train-slow: iteration {} mean reward {:.4}", s.iteration, s.mean_reward);
            })?;
            for s in &report.iterations {
                finite("slow policy loss", s.loss)?;
                iterations.push(json!({
                    "iteration": s.iteration,
                    "mean_reward": s.mean_reward,
                    "groups": s.groups,
                    "degenerate_groups": s.degenerate_groups,
                    "loss": s.loss,
                }));
            }
        }
        model.to_checkpoint().save(&ctx.ws.path("slow.ckpt"))?;
        let first = iterations.first().map(|s| s["mean_reward"].clone());
        let last = iterations.last().map(|s| s["mean_reward"].clone());
        write_json(
            &ctx.ws.path("slow_report.json"),
            &json!({
                "sft_examples": examples.len(),
                "format_examples": format_count,
                "collab_examples": instructions.len(),
                "sft_losses": sft.epoch_losses,
                "hard_samples": hard.len(),
                "grpo": iterations,
            }),
        )?;
        Ok(json!({
            "sft_final_loss": sft.epoch_losses.last(),
            "hard_samples": hard.len(),
            "first_mean_reward": first,
            "last_mean_reward": last,
        }))
    })
}
