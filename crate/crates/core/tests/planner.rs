use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sidrec::planner::synthetic::{synthetic_routing, SyntheticRouting, SYNTH_K1, SYNTH_K2};
use sidrec::planner::{
    execute_route, label_rng, oracle_route, path_for_rank, pseudo_label, warmup_train, CachedTools, CostTable, Path,
    PlannerEnv, PlannerPolicy, ToolCall,
};
use sidrec::seqmodel::{ModelConfig, SequenceModel, TrainConfig};
use sidrec::slowpath::{grpo_train, GrpoConfig};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn rank_to_path_partitions_every_rank(k1 in 1usize..200, gap in 1usize..200, rank in 0usize..500) {
        let k2 = k1 + gap;
        let r = if rank == 0 { None } else { Some(rank) };
        let p = path_for_rank(r, k1, k2);
        let in1 = matches!(r, Some(x) if x <= k1);
        let in2 = matches!(r, Some(x) if x > k1 && x <= k2);
        let in3 = !in1 && !in2;
        prop_assert_eq!([in1, in2, in3].iter().filter(|&&b| b).count(), 1);
        prop_assert_eq!(p == Path::Fast, in1);
        prop_assert_eq!(p == Path::Rank, in2);
        prop_assert_eq!(p == Path::Slow, in3);
    }
}

#[test]
fn flip_frequency_over_100k_path1_samples() {
    let n = 100_000;
    let mut flipped = 0;
    let mut to_rank = 0;
    for u in 0..n {
        let l = pseudo_label(Some(3), 10, 50, 0.2, &mut label_rng(17, u));
        assert_eq!(l.base, Path::Fast);
        if l.flipped {
            flipped += 1;
            assert_ne!(l.path, Path::Fast);
            to_rank += usize::from(l.path == Path::Rank);
        }
    }
    let f = flipped as f64 / n as f64;
    assert!((f - 0.2).abs() <= 0.005, "{f}");
    let r = to_rank as f64 / flipped as f64;
    assert!((r - 0.5).abs() < 0.02, "{r}");
    // non-Path-1 labels never flip
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        assert!(!pseudo_label(Some(30), 10, 50, 0.2, &mut rng).flipped);
        assert!(!pseudo_label(None, 10, 50, 0.2, &mut rng).flipped);
    }
}

fn planner_model(env: &SyntheticRouting, seed: u64) -> SequenceModel {
    let cfg = ModelConfig {
        d_model: 32,
        n_layers: 1,
        n_heads: 2,
        d_ff: 64,
        max_len: 24,
        init_std: 0.02,
        seed,
    };
    SequenceModel::new(cfg, &env.vocab).unwrap()
}

fn warmup_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        batch_size: 32,
        epochs,
        seed: 1,
        max_len: 24,
        ..Default::default()
    }
}

#[test]
fn warmup_imitates_labels() {
    let env = synthetic_routing(5000, 1);
    let prompts = env.prompts(24);
    let labels: Vec<Vec<ToolCall>> = env.users.iter().map(|u| u.kind.calls(SYNTH_K1, SYNTH_K2)).collect();

    let mut untrained = planner_model(&env, 2);
    let base = PlannerPolicy {
        model: &untrained,
        vocab: &env.vocab,
    }
    .agreement(&prompts, &labels);
    let (_, zero) = warmup_train(&mut untrained, &prompts, &labels, &env.vocab, &warmup_cfg(0)).unwrap();
    assert_eq!(zero, base);

    let mut m = planner_model(&env, 2);
    let (_, agree) = warmup_train(&mut m, &prompts, &labels, &env.vocab, &warmup_cfg(3)).unwrap();
    assert!(agree >= 0.95, "{agree}");
}

#[test]
fn warmup_on_a_single_label_is_near_certain() {
    let env = synthetic_routing(300, 4);
    let prompts = env.prompts(24);
    let fast = Path::Fast.calls(SYNTH_K1, SYNTH_K2);
    let labels = vec![fast.clone(); prompts.len()];
    let mut m = planner_model(&env, 3);
    warmup_train(&mut m, &prompts, &labels, &env.vocab, &warmup_cfg(20)).unwrap();
    let p = PlannerPolicy {
        model: &m,
        vocab: &env.vocab,
    };
    for prompt in prompts.iter().take(50) {
        let q = p.probability(prompt, &fast).unwrap();
        assert!(q > 0.99, "{q}");
    }
}

/// Mean R_total of the greedy policy and of each uniform template.
fn evaluate(env: &SyntheticRouting, model: &SequenceModel, cost: &CostTable) -> (f64, [f64; 3], f64, f64) {
    let tools = env.tools();
    let prompts = env.prompts(24);
    let policy = PlannerPolicy {
        model,
        vocab: &env.vocab,
    };
    let (mut adaptive, mut uniform, mut oracle, mut fast_only) = (0.0, [0.0; 3], 0.0, 0.0);
    for (ep, prompt) in env.episodes().into_iter().zip(&prompts) {
        let calls = policy.decide(prompt).calls.unwrap_or_default();
        if Path::of_calls(&calls) == Some(Path::Fast) {
            fast_only += 1.0;
        }
        adaptive += execute_route(&calls, ep, &tools, cost, SYNTH_K1).unwrap().reward.total;
        for p in Path::ALL {
            uniform[p.index()] += execute_route(&p.calls(SYNTH_K1, SYNTH_K2), ep, &tools, cost, SYNTH_K1)
                .unwrap()
                .reward
                .total;
        }
        let (best, d) = oracle_route(ep, &tools, cost, SYNTH_K1, SYNTH_K2).unwrap();
        oracle += d[best.index()].reward.total;
    }
    let n = prompts.len() as f64;
    (adaptive / n, uniform.map(|u| u / n), oracle / n, fast_only / n)
}

fn train_router(cost: &CostTable, iterations: usize) -> SequenceModel {
    let train = synthetic_routing(2000, 10);
    let prompts = train.prompts(24);
    let labels: Vec<Vec<ToolCall>> = train
        .pseudo_labels(0.2, 5)
        .unwrap()
        .into_iter()
        .map(|p| p.calls(SYNTH_K1, SYNTH_K2))
        .collect();
    let mut model = planner_model(&train, 6);
    warmup_train(&mut model, &prompts, &labels, &train.vocab, &warmup_cfg(2)).unwrap();
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
    let cfg = GrpoConfig {
        group_size: 8,
        prompts_per_iteration: 8,
        iterations,
        lr: 1e-3,
        seed: 3,
        max_new_tokens: 10,
        ..Default::default()
    };
    grpo_train(&mut model, &env, &cfg, |_, _| {}).unwrap();
    model
}

#[test]
fn adaptive_routing_beats_every_uniform_policy() {
    let cost = CostTable::default();
    let model = train_router(&cost, 60);
    let test = synthetic_routing(2000, 99);
    let (adaptive, uniform, oracle, _) = evaluate(&test, &model, &cost);
    let best_uniform = uniform.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    eprintln!("adaptive {adaptive:.4} uniform {uniform:?} oracle {oracle:.4}");
    assert!(oracle >= best_uniform);
    assert!(
        adaptive - best_uniform >= 0.02,
        "adaptive {adaptive} vs uniform {uniform:?}"
    );
}

#[test]
fn latency_dominated_reward_converges_to_fast_only() {
    let cost = CostTable {
        beta: 10.0,
        ..Default::default()
    };
    let model = train_router(&cost, 60);
    let test = synthetic_routing(2000, 98);
    let (.., fast_only) = evaluate(&test, &model, &cost);
    assert!(fast_only >= 0.99, "{fast_only}");
}
