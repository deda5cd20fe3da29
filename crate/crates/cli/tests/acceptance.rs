//! Acceptance suite: one pass/fail line per criterion, then a single verdict.
//!
//! Every check is self-contained and seeded. Tolerances and sizes are the
//! contractual ones; the end-to-end check drives the built `sidrec` binary.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path as FsPath;
use std::process::Command;
use std::time::Instant;

use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sidrec::corpus::{generate_synthetic, ingest, split_leave_one_out, I2IPair, IngestOptions, SynthConfig};
use sidrec::decoder::{beam_search, hit_rank, recommend, BeamConfig, SidTrie};
use sidrec::evaluation::probe::probe_candidates;
use sidrec::evaluation::{i2i_probe, latency_report, ndcg_at_k, parse_report, recall_at_k};
use sidrec::nn::{ParamId, Support, Tape};
use sidrec::planner::synthetic::{synthetic_routing, SyntheticRouting, SYNTH_K1, SYNTH_K2};
use sidrec::planner::{
    execute_route, label_rng, path_for_rank, pseudo_label, warmup_train, CachedTools, CostTable, Path, PlannerEnv,
    PlannerPolicy, ToolCall, ToolCounts,
};
use sidrec::quantizer::kmeans::sq_dist;
use sidrec::quantizer::{
    assign_catalog, assign_sid, embed_items, fit_codebooks, FitParams, HashingEmbedder, ItemEmbedding, SemanticId,
    SidMap,
};
use sidrec::ranker::{
    auc, build_ranker_dataset, train_ranker, RankerConfig, RankerModel, RankerSource, RankerTrainConfig,
    RankingInstance,
};
use sidrec::seqmodel::{
    train_fast, AutoregressiveModel, HashedModel, LmExample, LmTarget, ModelConfig, SequenceModel, TokenId,
    TrainConfig, Trainable, VocabSpec, Vocabulary,
};
use sidrec::slowpath::{
    group_advantages, grpo_train, parse_slow_output, reward_hit, reward_sid, reward_slow_total, reward_think,
    GrpoConfig, ParsedSid, RolloutEnv, SlowRewardWeights,
};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn seconds(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

// ---------------------------------------------------------------- rewards

fn reward_vocab() -> Vocabulary {
    Vocabulary::new(VocabSpec {
        n_levels: 3,
        codes_per_level: 12,
        n_disambig: 0,
        numbers: vec![],
        words: ["a", "bb", "eeeee"].iter().map(|s| s.to_string()).collect(),
    })
    .unwrap()
}

fn think(v: &Vocabulary, words: &[&str]) -> Vec<TokenId> {
    let mut out = vec![v.think_open()];
    out.extend(words.iter().map(|w| v.id(w).unwrap()));
    out.push(v.think_close());
    out
}

fn wrapped(v: &Vocabulary, c: [u32; 3]) -> Vec<TokenId> {
    let mut t = vec![v.sid_begin()];
    t.extend((0..3).map(|l| v.sid_token(l, c[l])));
    t.push(v.sid_end());
    t
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let v = reward_vocab();
    let e = "eeeee";
    let mut cases = 0;

    // think length: words join with single spaces
    let think_cases: [(&[&str], usize, f64); 5] = [
        (&[e, e, e, e, "a"], 25, 1.0),
        (&[e, e, e, "bb"], 20, 1.0),
        (&[e, e, e, "a"], 19, -1.0),
        (&[e], 5, -1.0),
        (&[], 0, -1.0),
    ];
    for (words, chars, want) in think_cases {
        let p = parse_slow_output(&think(&v, words), &v);
        ensure(p.think_chars() == Some(chars), || {
            format!("think of {words:?} measured {:?}", p.think_chars())
        })?;
        ensure(reward_think(&p) == want, || format!("r_think at {chars} chars"))?;
        cases += 1;
    }
    let unclosed = [v.think_open(), v.id(e).unwrap()].repeat(6);
    ensure(reward_think(&parse_slow_output(&unclosed, &v)) == -1.0, || {
        "unclosed think block".into()
    })?;
    ensure(
        reward_think(&parse_slow_output(&wrapped(&v, [1, 2, 3]), &v)) == -1.0,
        || "absent think block".into(),
    )?;
    cases += 2;

    let soft = [v.sid_token(0, 5), v.sid_token(1, 10), v.sid_token(2, 2)];
    let sid_cases: [(Vec<TokenId>, f64); 4] = [
        (wrapped(&v, [5, 10, 2]), 1.0),
        (soft.to_vec(), 0.2),
        (soft[..2].to_vec(), -1.0),
        (vec![], -1.0),
    ];
    for (toks, want) in sid_cases {
        ensure(reward_sid(&parse_slow_output(&toks, &v)) == want, || {
            format!("r_sid of {toks:?}")
        })?;
        cases += 1;
    }
    ensure(
        parse_slow_output(&soft, &v).sid == ParsedSid::Soft(vec![5, 10, 2]),
        || "soft SID codes".into(),
    )?;

    let gt = [5, 10, 2];
    let hit_cases: [(Option<[u32; 3]>, f64); 6] = [
        (Some([5, 10, 2]), 5.0),
        (Some([5, 10, 9]), 2.0),
        (Some([5, 3, 2]), 1.0),
        // later levels coincide but the first does not
        (Some([7, 10, 2]), 0.0),
        (Some([1, 1, 1]), 0.0),
        (None, 0.0),
    ];
    for (pred, want) in hit_cases {
        ensure(reward_hit(&gt, pred.as_ref().map(|p| &p[..])) == want, || {
            format!("r_hit of {pred:?}")
        })?;
        cases += 1;
    }

    let w = SlowRewardWeights::default();
    let mut best = think(&v, &[e, e, e, e, "a"]);
    best.extend(wrapped(&v, gt));
    let r = reward_slow_total(&parse_slow_output(&best, &v), &gt, &w);
    ensure((r.r_think, r.r_sid, r.r_hit) == (1.0, 1.0, 5.0), || {
        format!("components {r:?}")
    })?;
    ensure(r.total == w.think + w.sid + 5.0 * w.hit, || {
        format!("weighted total {}", r.total)
    })?;
    let r = reward_slow_total(&parse_slow_output(&[], &v), &gt, &w);
    ensure(r.total == -w.think - w.sid, || {
        format!("empty output total {}", r.total)
    })?;
    cases += 2;

    let t = seconds(start);
    ensure(t < 1.0, || format!("took {t:.2}s"))?;
    Ok(format!("{cases} table rows exact in {t:.3}s"))
}

// ---------------------------------------------------------------- metrics

fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1 && lj == 0 {
                den += 1.0;
                num += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    num / den
}

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for i in 0..10_000 {
        let n = rng.random_range(0..30);
        let list: Vec<usize> = (0..n).map(|_| rng.random_range(0..40)).collect();
        let gt = rng.random_range(0..40);
        let k = rng.random_range(1..35);
        let rank = list.iter().position(|&x| x == gt).map(|p| p + 1).filter(|&r| r <= k);
        let want_recall = f64::from(u8::from(rank.is_some()));
        let want_ndcg = rank.map_or(0.0, |r| 1.0 / (r as f64 + 1.0).log2());
        ensure(recall_at_k(&list, gt, k) == want_recall, || {
            format!("recall on instance {i}")
        })?;
        worst = worst.max((ndcg_at_k(&list, gt, k) - want_ndcg).abs());

        let m = rng.random_range(2..40);
        let scores: Vec<f64> = (0..m).map(|_| f64::from(rng.random_range(0..8u8)) / 4.0).collect();
        let mut labels: Vec<u8> = (0..m).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 1;
        labels[1] = 0;
        let got = auc(&scores, &labels).map_err(|e| e.to_string())?;
        worst = worst.max((got - brute_auc(&scores, &labels)).abs());
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    for k in 3..30 {
        ensure(ndcg_at_k(&[5, 6, 7, 8], 7, k) == 0.5, || {
            format!("ndcg at rank 3 with k={k}")
        })?;
    }
    Ok(format!("10000 instances, max deviation {worst:e}; ndcg(rank 3) = 0.5"))
}

// ---------------------------------------------------------------- quantizer

fn clustered(n: usize, dim: usize, seed: u64) -> Vec<ItemEmbedding> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..10)
        .map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect();
    (0..n)
        .map(|i| ItemEmbedding {
            item_id: format!("p{i:04}"),
            vector: centers[i % centers.len()]
                .iter()
                .map(|c| c + rng.random_range(-0.6..0.6))
                .collect(),
        })
        .collect()
}

fn criterion_3() -> Check {
    let start = Instant::now();
    let points = clustered(1000, 16, 3);
    let params = FitParams {
        n_layers: 3,
        codes_per_layer: 8,
        seed: 17,
        ..FitParams::default()
    };
    let cb = fit_codebooks(&points, &params).map_err(|e| e.to_string())?;
    let again = fit_codebooks(&points, &params).map_err(|e| e.to_string())?;
    let bits = |c: &sidrec::quantizer::Codebook| -> Vec<u64> {
        (0..3)
            .flat_map(|j| c.layer(j).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
            .collect()
    };
    ensure(bits(&cb) == bits(&again), || "refit differs".into())?;

    let mut means = [0.0; 3];
    let mut matched = 0;
    for p in &points {
        let (sid, trace) = assign_sid(&p.vector, &cb).map_err(|e| e.to_string())?;
        // exhaustive per-layer nearest codeword, ties to the smallest index
        let mut r = p.vector.clone();
        let mut codes = Vec::new();
        for (j, mean) in means.iter_mut().enumerate() {
            let layer = cb.layer(j);
            let mut best = (0, f64::INFINITY);
            for c in 0..layer.rows() {
                let d = sq_dist(&r, layer.row(c));
                if d < best.1 {
                    best = (c, d);
                }
            }
            codes.push(best.0 as u32 + 1);
            for (x, w) in r.iter_mut().zip(layer.row(best.0)) {
                *x -= w;
            }
            *mean += trace.steps[j].residual_norm / points.len() as f64;
        }
        matched += usize::from(sid.codes == codes);
    }
    ensure(matched == points.len(), || format!("{matched}/1000 assignments match"))?;
    ensure(means[0] > means[1] && means[1] > means[2], || {
        format!("residual means {means:?}")
    })?;
    let t = seconds(start);
    ensure(t < 30.0, || format!("took {t:.1}s"))?;
    Ok(format!(
        "residual means {:.4} > {:.4} > {:.4}; 1000/1000 match; bitwise refit; {t:.2}s",
        means[0], means[1], means[2]
    ))
}

// ---------------------------------------------------------------- decoding

fn decode_vocab(k: usize, n_disambig: usize) -> Vocabulary {
    Vocabulary::new(VocabSpec {
        n_levels: 3,
        codes_per_level: k,
        n_disambig,
        numbers: vec![],
        words: Default::default(),
    })
    .unwrap()
}

fn random_map(n: usize, k: usize, rng: &mut impl Rng) -> SidMap {
    let mut sids: Vec<SemanticId> = (0..n)
        .map(|_| SemanticId::new((0..3).map(|_| rng.random_range(1..=k as u32)).collect()))
        .collect();
    let mut groups: BTreeMap<Vec<u32>, Vec<usize>> = BTreeMap::new();
    for (i, s) in sids.iter().enumerate() {
        groups.entry(s.codes.clone()).or_default().push(i);
    }
    for members in groups.values().filter(|m| m.len() > 1) {
        for (d, &i) in members.iter().enumerate() {
            sids[i].disambig = Some(d as u32);
        }
    }
    SidMap::new(sids, 3, k).unwrap()
}

/// Every catalog item scored by walking its full token path.
fn enumerate_all(
    model: &HashedModel,
    ctx: &[TokenId],
    map: &SidMap,
    v: &Vocabulary,
    cfg: &BeamConfig,
) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = (0..map.len())
        .map(|item| {
            let path = v.sid_tokens(map.sid(item));
            let mut state = model.start(ctx);
            let mut total = 0.0;
            for (depth, &tok) in path.iter().enumerate() {
                let logits = model.next_logits(&state);
                let (lo, hi) = match (cfg.level_softmax, depth < v.n_levels()) {
                    (false, _) => (0, logits.len()),
                    (true, true) => v.level_range(depth),
                    (true, false) => v.disambig_range(),
                };
                let m = logits[lo..hi].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits[lo..hi].iter().map(|x| (x - m).exp()).sum();
                total += logits[tok] - (m + z.ln());
                model.push(&mut state, tok);
            }
            (item, total / (path.len() as f64).powf(cfg.length_penalty))
        })
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for trial in 0..100u64 {
        let k = rng.random_range(2..=4);
        let map = random_map(rng.random_range(1..=64), k, &mut rng);
        let v = decode_vocab(k, map.max_disambig() as usize);
        let trie = SidTrie::build(&map, &v).map_err(|e| e.to_string())?;
        let model = HashedModel::new(v.len(), trial, 3.0);
        let ctx: Vec<TokenId> = (0..rng.random_range(0..5))
            .map(|_| rng.random_range(0..v.len()))
            .collect();
        let cfg = BeamConfig {
            width: map.len(),
            length_penalty: 1.0,
            level_softmax: trial % 2 == 0,
        };
        let got = beam_search(&model, &ctx, &trie, &cfg).map_err(|e| e.to_string())?;
        let want = enumerate_all(&model, &ctx, &map, &v, &cfg);
        let same = got.len() == want.len()
            && got
                .iter()
                .zip(&want)
                .all(|(g, w)| g.item == w.0 && (g.score - w.1).abs() < 1e-12);
        ensure(same, || format!("trial {trial}: beam ranking differs from enumeration"))?;
    }

    let mut violations = 0;
    for trial in 0..10_000u64 {
        let n = rng.random_range(1..=64);
        let k = rng.random_range(2..=4);
        let map = random_map(n, k, &mut rng);
        let v = decode_vocab(k, map.max_disambig() as usize);
        let trie = SidTrie::build(&map, &v).map_err(|e| e.to_string())?;
        let model = HashedModel::new(v.len(), trial.wrapping_mul(7919), 4.0);
        let cfg = BeamConfig {
            width: rng.random_range(1..=70),
            ..Default::default()
        };
        let out = beam_search(&model, &[], &trie, &cfg).map_err(|e| e.to_string())?;
        let distinct: BTreeSet<usize> = out.iter().map(|c| c.item).collect();
        if distinct.len() != out.len() || out.iter().any(|c| c.item >= n) || out.len() != cfg.width.min(n) {
            violations += 1;
        }
    }
    ensure(violations == 0, || format!("{violations} violating decodes"))?;
    Ok("100 full-width decodes equal enumeration; 10000 fuzz decodes, 0 violations".into())
}

// ---------------------------------------------------------------- sequence model

fn gradient_check() -> Result<(usize, usize, f64), String> {
    let cfg = ModelConfig {
        d_model: 4,
        n_layers: 1,
        n_heads: 2,
        d_ff: 8,
        max_len: 6,
        init_std: 0.5,
        seed: 5,
    };
    let mut m = SequenceModel::with_vocab_size(cfg, 5, 0).map_err(|e| e.to_string())?;
    let n_params = m.params().num_scalars();
    ensure(n_params <= 1000, || format!("{n_params} parameters"))?;
    let ex = LmExample {
        tokens: vec![2, 0, 4, 1, 3],
        targets: vec![
            LmTarget {
                pos: 1,
                support: Support::Full,
                weight: 1.0,
            },
            LmTarget {
                pos: 2,
                support: Support::Range(1, 5),
                weight: 0.7,
            },
            LmTarget {
                pos: 4,
                support: Support::Full,
                weight: 1.5,
            },
        ],
    };
    let loss = |m: &SequenceModel| {
        let mut tape = Tape::new(m.params());
        let l = m.loss(&mut tape, &ex);
        tape.value(l).item()
    };
    let grads = {
        let mut tape = Tape::new(m.params());
        let l = m.loss(&mut tape, &ex);
        tape.backward(l)
    };
    let ids: Vec<ParamId> = m.params().iter().map(|(id, _)| id).collect();
    let (mut checked, mut worst) = (0, 0.0f64);
    for id in ids {
        for i in 0..m.params().get(id).data().len() {
            let h = 1e-5;
            let orig = m.params().get(id).data()[i];
            m.params_mut().get_mut(id).data_mut()[i] = orig + h;
            let up = loss(&m);
            m.params_mut().get_mut(id).data_mut()[i] = orig - h;
            let down = loss(&m);
            m.params_mut().get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    ensure(worst < 1e-4, || format!("max relative error {worst:e}"))?;
    Ok((n_params, checked, worst))
}

/// Training-set Recall@1 of a model fit on a 20-user synthetic corpus.
fn overfit() -> Result<(usize, f64, f64), String> {
    let data = generate_synthetic(&SynthConfig {
        n_users: 20,
        n_items: 80,
        n_latent_clusters: 4,
        seed: 8,
        ..Default::default()
    });
    let corpus = ingest(
        data.interactions_jsonl.as_bytes(),
        data.items_jsonl.as_bytes(),
        &IngestOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let split = split_leave_one_out(corpus).map_err(|e| e.to_string())?;
    let catalog = split.catalog();
    let emb = embed_items(
        catalog.items(),
        &HashingEmbedder::new(32, 1).map_err(|e| e.to_string())?,
    );
    let cb = fit_codebooks(
        &emb,
        &FitParams {
            n_layers: 3,
            codes_per_layer: 4,
            seed: 2,
            ..FitParams::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let sid_map = assign_catalog(&emb, &cb).map_err(|e| e.to_string())?;
    let vocab = Vocabulary::new(VocabSpec {
        n_levels: 3,
        codes_per_level: 4,
        n_disambig: sid_map.max_disambig() as usize,
        numbers: vec![],
        words: Default::default(),
    })
    .map_err(|e| e.to_string())?;
    let cfg = ModelConfig {
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        d_ff: 128,
        max_len: 64,
        init_std: 0.05,
        seed: 1,
    };
    let mut model = SequenceModel::new(cfg, &vocab).map_err(|e| e.to_string())?;
    let train = TrainConfig {
        lr: 3e-3,
        batch_size: 8,
        epochs: 150,
        seed: 1,
        max_len: 64,
        clip_norm: 1.0,
        trainable: Trainable::All,
    };
    let report = train_fast(&mut model, &split, &sid_map, &vocab, &train).map_err(|e| e.to_string())?;
    let trie = SidTrie::build(&sid_map, &vocab).map_err(|e| e.to_string())?;
    let beam = BeamConfig {
        width: 5,
        ..Default::default()
    };
    let (mut hits, mut total) = (0, 0);
    for u in 0..split.num_users() {
        for ex in split.train_examples(u) {
            let top = recommend(&model, ex.history, &sid_map, &vocab, &trie, &beam).map_err(|e| e.to_string())?;
            let items: Vec<usize> = top.iter().map(|c| c.item).collect();
            hits += usize::from(hit_rank(&items, ex.target) == Some(1));
            total += 1;
        }
    }
    let final_loss = report.epoch_losses.last().copied().unwrap_or(f64::NAN);
    Ok((total, hits as f64 / total as f64, final_loss))
}

fn criterion_5() -> Check {
    let (n_params, checked, worst) = gradient_check()?;
    let start = Instant::now();
    let (pairs, recall1, loss) = overfit()?;
    let t = seconds(start);
    ensure(recall1 >= 0.9, || {
        format!("training Recall@1 {recall1:.3} over {pairs} pairs (loss {loss:.4})")
    })?;
    ensure(t < 300.0, || format!("overfit took {t:.0}s"))?;
    Ok(format!(
        "{checked}/{n_params} gradients within {worst:.1e}; training Recall@1 {recall1:.3} over {pairs} pairs in {t:.1}s"
    ))
}

// ---------------------------------------------------------------- ranker

/// Items `0..n/2` are liked: every positive is liked, every negative is not.
fn separable(groups: usize, n_items: usize, seed: u64) -> Vec<RankingInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = n_items / 2;
    let mut out = Vec::new();
    for group in 0..groups {
        let history: Vec<usize> = (0..rng.random_range(1..6))
            .map(|_| rng.random_range(0..n_items))
            .collect();
        out.push(RankingInstance {
            group,
            history: history.clone(),
            candidate: rng.random_range(0..half),
            label: 1,
        });
        for _ in 0..3 {
            out.push(RankingInstance {
                group,
                history: history.clone(),
                candidate: rng.random_range(half..n_items),
                label: 0,
            });
        }
    }
    out
}

fn criterion_6() -> Check {
    let train = separable(400, 60, 61);
    let valid = separable(150, 60, 62);
    let mut m = RankerModel::new(RankerConfig::default(), 60, 0).map_err(|e| e.to_string())?;
    let r = train_ranker(
        &mut m,
        &train,
        &valid,
        &RankerTrainConfig {
            max_epochs: 30,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let best = r.valid_aucs[r.best_epoch];
    ensure(r.epoch_losses.len() <= 30 && best >= 0.95, || {
        format!("valid AUCs {:?}", r.valid_aucs)
    })?;

    let mut runner = TestRunner::new(PropConfig {
        cases: 256,
        ..PropConfig::default()
    });
    let strategy = (
        0u64..1000,
        proptest::collection::vec(0usize..60, 1..12),
        0usize..60,
        0usize..100,
    );
    runner
        .run(&strategy, |(seed, hist, cand, rot)| {
            let m = RankerModel::new(
                RankerConfig {
                    seed,
                    ..Default::default()
                },
                60,
                0,
            )
            .unwrap();
            let mut shuffled = hist.clone();
            shuffled.reverse();
            shuffled.rotate_left(rot % hist.len());
            let (a, b) = (m.score(&hist, &[cand])[0], m.score(&shuffled, &[cand])[0]);
            proptest::prop_assert!((a - b).abs() < 1e-10, "{} vs {}", a, b);
            Ok(())
        })
        .map_err(|e| format!("permutation: {e}"))?;

    let strategy = (
        any_seed(),
        2usize..12,
        proptest::collection::vec((proptest::collection::vec(0usize..50, 0..30), 0usize..50), 1..30),
    );
    runner
        .run(&strategy, |(seed, k1, raw)| {
            let hist = [1usize, 2, 3];
            let sources: Vec<RankerSource> = raw
                .iter()
                .map(|(c, t)| RankerSource {
                    history: &hist,
                    target: *t,
                    candidates: c,
                })
                .collect();
            let (data, stats) = build_ranker_dataset(&sources, k1, seed).unwrap();
            proptest::prop_assert_eq!(stats.groups, sources.len());
            for (g, s) in sources.iter().enumerate() {
                let rows: Vec<&RankingInstance> = data.iter().filter(|x| x.group == g).collect();
                let pos: Vec<_> = rows.iter().filter(|x| x.label == 1).collect();
                proptest::prop_assert_eq!(pos.len(), 1);
                proptest::prop_assert_eq!(pos[0].candidate, s.target);
            }
            Ok(())
        })
        .map_err(|e| format!("one positive per group: {e}"))?;
    Ok(format!(
        "valid AUC {best:.4} at epoch {}; permutation invariant; one positive per group",
        r.best_epoch + 1
    ))
}

fn any_seed() -> std::ops::Range<u64> {
    0..u64::MAX
}

// ---------------------------------------------------------------- GRPO

/// One prompt; reward is the hit reward of the three sampled codes.
struct Bandit {
    vocab: Vocabulary,
    gt: [u32; 3],
}

impl RolloutEnv for Bandit {
    fn num_prompts(&self) -> usize {
        1
    }
    fn prompt(&self, _: usize) -> Vec<TokenId> {
        vec![self.vocab.sid_begin()]
    }
    fn constraint(&self, _: usize, g: &[TokenId]) -> Option<Support> {
        (g.len() < 3).then(|| {
            let (lo, hi) = self.vocab.level_range(g.len());
            Support::Range(lo, hi)
        })
    }
    fn stop_token(&self) -> Option<TokenId> {
        None
    }
    fn reward(&self, _: usize, g: &[TokenId]) -> f64 {
        let codes: Vec<u32> = g.iter().filter_map(|&t| self.vocab.sid_code(t)).map(|c| c.1).collect();
        reward_hit(&self.gt, Some(&codes))
    }
}

fn gt_mass(env: &Bandit, m: &SequenceModel) -> f64 {
    let lp = m.logprobs_next(&env.prompt(0));
    let (lo, hi) = env.vocab.level_range(0);
    (lp[env.vocab.sid_token(0, env.gt[0])] - Support::Range(lo, hi).log_norm(&lp)).exp()
}

fn run_bandit() -> Result<(Vec<f64>, Vec<f64>, String), String> {
    let vocab = decode_vocab(6, 0);
    let cfg = ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_len: 8,
        init_std: 0.02,
        seed: 4,
    };
    let mut model = SequenceModel::new(cfg, &vocab).map_err(|e| e.to_string())?;
    let env = Bandit { vocab, gt: [3, 6, 1] };
    let cfg = GrpoConfig {
        group_size: 8,
        prompts_per_iteration: 2,
        iterations: 30,
        lr: 0.005,
        seed: 21,
        max_new_tokens: 3,
        ..Default::default()
    };
    let mut masses = vec![gt_mass(&env, &model)];
    let mut sums = Vec::new();
    let report = grpo_train(&mut model, &env, &cfg, |s, m| {
        sums.extend(s.raw_advantage_sums.iter().copied());
        if (s.iteration + 1) % 5 == 0 {
            masses.push(gt_mass(&env, m));
        }
    })
    .map_err(|e| e.to_string())?;
    let trace = format!(
        "{:?}{:?}",
        report.iterations,
        model.params().flatten().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
    Ok((masses, sums, trace))
}

fn criterion_7() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let n = rng.random_range(2..17);
        let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-30.0..30.0)).collect();
        worst = worst.max(group_advantages(&rewards, 1e-6).raw.iter().sum::<f64>().abs());
    }
    ensure(worst <= 1e-9, || format!("raw advantage sum {worst:e}"))?;
    let (masses, sums, trace) = run_bandit()?;
    ensure(sums.iter().all(|s| s.abs() <= 1e-9), || {
        "in-training advantage sums".into()
    })?;
    ensure(masses.windows(2).all(|w| w[1] > w[0]), || format!("masses {masses:?}"))?;
    let (masses2, _, trace2) = run_bandit()?;
    ensure(masses == masses2 && trace == trace2, || "replay differs".into())?;
    Ok(format!(
        "max |sum A| {worst:.1e}; rewarded mass {:.3} -> {:.3} strictly increasing; bitwise replay",
        masses[0],
        masses.last().unwrap()
    ))
}

// ---------------------------------------------------------------- pseudo-labels

fn criterion_8() -> Check {
    let mut runner = TestRunner::new(PropConfig {
        cases: 5000,
        ..PropConfig::default()
    });
    runner
        .run(&(1usize..500, 1usize..500, 0usize..1200), |(k1, gap, rank)| {
            let k2 = k1 + gap;
            let r = (rank > 0).then_some(rank);
            let fast = matches!(r, Some(x) if x <= k1);
            let rank_path = matches!(r, Some(x) if x > k1 && x <= k2);
            let want = if fast {
                Path::Fast
            } else if rank_path {
                Path::Rank
            } else {
                Path::Slow
            };
            proptest::prop_assert_eq!(path_for_rank(r, k1, k2), want);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let n = 100_000;
    let flipped = (0..n)
        .filter(|&u| {
            let l = pseudo_label(Some(1 + u % 10), 10, 50, 0.2, &mut label_rng(99, u));
            l.base == Path::Fast && l.flipped && l.path != Path::Fast
        })
        .count();
    let f = flipped as f64 / n as f64;
    ensure((f - 0.2).abs() <= 0.005, || format!("flip frequency {f:.4}"))?;
    Ok(format!(
        "partition holds on 5000 random (K1, K2, rank); flip frequency {f:.4}"
    ))
}

// ---------------------------------------------------------------- adaptive routing

fn router(cost: &CostTable) -> Result<SequenceModel, String> {
    let train = synthetic_routing(2000, 10);
    let prompts = train.prompts(24);
    let labels: Vec<Vec<ToolCall>> = train
        .pseudo_labels(0.2, 5)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|p| p.calls(SYNTH_K1, SYNTH_K2))
        .collect();
    let cfg = ModelConfig {
        d_model: 32,
        n_layers: 1,
        n_heads: 2,
        d_ff: 64,
        max_len: 24,
        init_std: 0.02,
        seed: 6,
    };
    let mut model = SequenceModel::new(cfg, &train.vocab).map_err(|e| e.to_string())?;
    let warm = TrainConfig {
        lr: 3e-3,
        batch_size: 32,
        epochs: 2,
        seed: 1,
        max_len: 24,
        ..Default::default()
    };
    warmup_train(&mut model, &prompts, &labels, &train.vocab, &warm).map_err(|e| e.to_string())?;
    let tools = CachedTools::new(train.tools());
    let episodes = train.episodes();
    let env = PlannerEnv {
        prompts: &prompts,
        episodes: &episodes,
        tools: &tools,
        cost: cost.clone(),
        vocab: &train.vocab,
        k_final: SYNTH_K1,
    };
    let grpo = GrpoConfig {
        group_size: 8,
        prompts_per_iteration: 8,
        iterations: 60,
        lr: 1e-3,
        seed: 3,
        max_new_tokens: 10,
        ..Default::default()
    };
    grpo_train(&mut model, &env, &grpo, |_, _| {}).map_err(|e| e.to_string())?;
    Ok(model)
}

/// Mean reward of the policy, of each uniform template, and the policy's fast-only share.
fn route_eval(env: &SyntheticRouting, model: &SequenceModel, cost: &CostTable) -> Result<(f64, [f64; 3], f64), String> {
    let tools = env.tools();
    let prompts = env.prompts(24);
    let policy = PlannerPolicy {
        model,
        vocab: &env.vocab,
    };
    let (mut adaptive, mut uniform, mut fast) = (0.0, [0.0; 3], 0.0);
    for (ep, prompt) in env.episodes().into_iter().zip(&prompts) {
        let calls = policy.decide(prompt).calls.unwrap_or_default();
        fast += f64::from(u8::from(Path::of_calls(&calls) == Some(Path::Fast)));
        adaptive += execute_route(&calls, ep, &tools, cost, SYNTH_K1)
            .map_err(|e| e.to_string())?
            .reward
            .total;
        for p in Path::ALL {
            let d =
                execute_route(&p.calls(SYNTH_K1, SYNTH_K2), ep, &tools, cost, SYNTH_K1).map_err(|e| e.to_string())?;
            uniform[p.index()] += d.reward.total;
        }
    }
    let n = prompts.len() as f64;
    Ok((adaptive / n, uniform.map(|u| u / n), fast / n))
}

fn criterion_9() -> Check {
    let start = Instant::now();
    let cost = CostTable::default();
    let test = synthetic_routing(2000, 99);
    let (adaptive, uniform, _) = route_eval(&test, &router(&cost)?, &cost)?;
    let best = uniform.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    ensure(adaptive - best >= 0.02, || {
        format!("adaptive {adaptive:.4} vs uniform {uniform:?}")
    })?;
    let heavy = CostTable {
        beta: 10.0,
        ..Default::default()
    };
    let (.., fast) = route_eval(&synthetic_routing(2000, 98), &router(&heavy)?, &heavy)?;
    ensure(fast >= 0.99, || {
        format!("fast-only share {fast:.4} under heavy latency weight")
    })?;
    let t = seconds(start);
    ensure(t < 600.0, || format!("took {t:.0}s"))?;
    Ok(format!(
        "adaptive {adaptive:.4} vs best uniform {best:.4} (margin {:.4}); fast-only {:.1}% at beta 10; {t:.1}s",
        adaptive - best,
        fast * 100.0
    ))
}

// ---------------------------------------------------------------- latency

fn criterion_10() -> Check {
    let mix = |fast: usize, slow: usize| -> Vec<ToolCounts> {
        let mut v = vec![
            ToolCounts {
                fast: 1,
                rank: 0,
                slow: 0
            };
            fast
        ];
        v.extend(vec![
            ToolCounts {
                fast: 0,
                rank: 0,
                slow: 1
            };
            slow
        ]);
        v
    };
    let cost = CostTable::default();
    ensure(cost.fast == 0.39 && cost.slow == 2.15, || {
        format!("cost table {cost:?}")
    })?;
    let mean = latency_report(&mix(852, 148), &cost, None).mean_seconds;
    ensure((mean - 0.6505).abs() <= 1e-3, || format!("mixed mean {mean}"))?;
    let all_slow = latency_report(&mix(0, 500), &cost, None).mean_seconds;
    let all_fast = latency_report(&mix(500, 0), &cost, None).mean_seconds;
    ensure(all_slow == 2.15 && all_fast == 0.39, || {
        format!("pure means {all_slow} {all_fast}")
    })?;
    Ok(format!(
        "85.2/14.8 mix {mean:.4}s; all-slow {all_slow}s; all-fast {all_fast}s"
    ))
}

// ---------------------------------------------------------------- probe

fn criterion_11() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let n_items = 300;
    let mut pairs = Vec::new();
    while pairs.len() < 2500 {
        let source = rng.random_range(0..n_items);
        let target = rng.random_range(0..n_items);
        if source != target {
            pairs.push(I2IPair {
                source,
                target,
                cooccurrence_count: 1,
            });
        }
    }
    // one target per source keeps the oracle unambiguous
    let mut firsts = BTreeSet::new();
    let unique: Vec<I2IPair> = pairs.iter().filter(|p| firsts.insert(p.source)).cloned().collect();
    let truth: BTreeMap<usize, usize> = unique.iter().map(|p| (p.source, p.target)).collect();
    let mut oracle =
        |s: usize, c: &[usize]| -> Vec<f64> { c.iter().map(|&x| f64::from(u8::from(truth[&s] == x))).collect() };
    let o = i2i_probe(&unique, n_items, &mut oracle, 9, 3).map_err(|e| e.to_string())?;
    ensure(o.accuracy == 1.0, || format!("oracle accuracy {}", o.accuracy))?;

    let mut noise = ChaCha8Rng::seed_from_u64(112);
    let mut random = |_: usize, c: &[usize]| -> Vec<f64> { c.iter().map(|_| noise.random::<f64>()).collect() };
    let r = i2i_probe(&pairs, n_items, &mut random, 9, 3).map_err(|e| e.to_string())?;
    ensure(r.trials >= 2000, || format!("{} trials", r.trials))?;
    ensure((r.accuracy - 0.10).abs() <= 0.03, || {
        format!("random accuracy {}", r.accuracy)
    })?;

    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        pairs
            .iter()
            .take(200)
            .map(|p| probe_candidates(p, n_items, 9, &mut rng))
            .collect::<Vec<_>>()
    };
    ensure(draw(5) == draw(5) && draw(5) != draw(6), || {
        "distractor sampling not seed-determined".into()
    })?;
    Ok(format!(
        "oracle {:.3} over {} trials; random {:.4} over {} trials; distractors reproducible",
        o.accuracy, o.trials, r.accuracy, r.trials
    ))
}

// ---------------------------------------------------------------- end to end

const E2E_STAGES: [&str; 12] = [
    "synth-data",
    "ingest",
    "quantize",
    "train-fast",
    "train-ranker",
    "build-i2i",
    "train-slow",
    "label-routes",
    "train-planner-warmup",
    "train-planner-rl",
    "evaluate",
    "analyze-routing",
];

fn pipeline_run(dir: &FsPath) -> Result<Vec<u8>, String> {
    for stage in E2E_STAGES {
        let out = Command::new(env!("CARGO_BIN_EXE_sidrec"))
            .current_dir(dir)
            .args(["--set", "synth.n_users=1000", stage])
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || {
            format!(
                "{stage} exited {:?}: {}",
                out.status.code(),
                String::from_utf8_lossy(&out.stderr)
            )
        })?;
    }
    std::fs::read(dir.join("work/report.json")).map_err(|e| e.to_string())
}

fn criterion_12() -> Check {
    let start = Instant::now();
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = pipeline_run(a.path())?;
    let t = seconds(start);
    let report = parse_report(std::str::from_utf8(&first).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let planner = std::fs::read(a.path().join("work/planner_report.json")).map_err(|e| e.to_string())?;
    let parsed: serde_json::Value = serde_json::from_slice(&planner).map_err(|e| e.to_string())?;
    ensure(parsed["test"]["oracle_agreement"].is_number(), || {
        "planner report lacks test agreement".into()
    })?;
    let second = pipeline_run(b.path())?;
    ensure(first == second, || "second run's report.json differs".into())?;
    let planner2 = std::fs::read(b.path().join("work/planner_report.json")).map_err(|e| e.to_string())?;
    ensure(planner == planner2, || {
        "second run's planner_report.json differs".into()
    })?;
    ensure(t < 900.0, || format!("one run took {t:.0}s"))?;
    Ok(format!(
        "12 stages in {t:.1}s per run; report schema-valid ({} variants, {} buckets); second run byte-identical",
        report.variants.len(),
        report.buckets.len()
    ))
}

#[test]
fn acceptance_criteria() {
    let checks: [Criterion; 12] = [
        ("reward conformance", criterion_1),
        ("metric oracles", criterion_2),
        ("residual quantizer", criterion_3),
        ("constrained decoding", criterion_4),
        ("sequence model", criterion_5),
        ("ranker", criterion_6),
        ("GRPO machinery", criterion_7),
        ("route pseudo-labels", criterion_8),
        ("adaptive routing dominance", criterion_9),
        ("latency reconciliation", criterion_10),
        ("relatedness probe", criterion_11),
        ("end-to-end pipeline", criterion_12),
    ];
    // written to the raw handle so the verdicts show without --nocapture
    let mut out = std::io::stdout();
    let mut failed = Vec::new();
    for (i, (name, check)) in checks.iter().enumerate() {
        let n = i + 1;
        let line = match check() {
            Ok(detail) => format!("criterion {n:>2} PASS {name}: {detail}"),
            Err(detail) => {
                failed.push(n);
                format!("criterion {n:>2} FAIL {name}: {detail}")
            }
        };
        writeln!(out, "{line}").unwrap();
        out.flush().unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
