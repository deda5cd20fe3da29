//! The agentic router: tool calls and their execution, pseudo-labels,
//! rewards, the oracle and the heuristic baselines.

pub mod baseline;
pub mod policy;
pub mod synthetic;

pub use baseline::{route_features, LogisticBaseline, RouteFeatures};
pub use policy::{
    decode_calls, encode_calls, plan_constraint, planner_prompt, warmup_examples, warmup_train, PlanOutput, PlannerEnv,
    PlannerPolicy, MAX_CALLS, MAX_PLAN_TOKENS,
};

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Catalog, ItemIdx};
use crate::decoder::hit_rank;
use crate::error::{Error, Result};
use crate::evaluation::ndcg_from_rank;

/// Cutoff of the routing reward's NDCG term.
pub const REWARD_NDCG_K: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tool {
    FastRec,
    RankCandidates,
    ThinkAndRec,
}

impl Tool {
    pub fn name(self) -> &'static str {
        match self {
            Tool::FastRec => "fast_rec",
            Tool::RankCandidates => "rank_candidates",
            Tool::ThinkAndRec => "think_and_rec",
        }
    }
}

/// One tool invocation. Arguments are not validated here: malformed calls
/// are representable so that execution can flag them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "WireCall", into = "WireCall")]
pub enum ToolCall {
    FastRec { k: usize },
    RankCandidates { m: usize, n: usize },
    ThinkAndRec { j: usize },
}

/// Wire form: `{"tool": str, "args": {str: int}}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireCall {
    tool: String,
    args: BTreeMap<String, i64>,
}

impl From<ToolCall> for WireCall {
    fn from(c: ToolCall) -> Self {
        let args: Vec<(&str, usize)> = match c {
            ToolCall::FastRec { k } => vec![("k", k)],
            ToolCall::RankCandidates { m, n } => vec![("m", m), ("n", n)],
            ToolCall::ThinkAndRec { j } => vec![("j", j)],
        };
        WireCall {
            tool: c.tool().name().to_string(),
            args: args.into_iter().map(|(k, v)| (k.to_string(), v as i64)).collect(),
        }
    }
}

impl TryFrom<WireCall> for ToolCall {
    type Error = String;

    fn try_from(w: WireCall) -> std::result::Result<Self, String> {
        let keys: Vec<&str> = match w.tool.as_str() {
            "fast_rec" => vec!["k"],
            "rank_candidates" => vec!["m", "n"],
            "think_and_rec" => vec!["j"],
            other => return Err(format!("unknown tool {other:?}")),
        };
        if w.args.len() != keys.len() || keys.iter().any(|k| !w.args.contains_key(*k)) {
            return Err(format!("{} expects arguments {keys:?}", w.tool));
        }
        let get = |k: &str| -> std::result::Result<usize, String> {
            let v = w.args[k];
            usize::try_from(v).map_err(|_| format!("argument {k} = {v} is negative"))
        };
        Ok(match w.tool.as_str() {
            "fast_rec" => ToolCall::FastRec { k: get("k")? },
            "rank_candidates" => ToolCall::RankCandidates {
                m: get("m")?,
                n: get("n")?,
            },
            _ => ToolCall::ThinkAndRec { j: get("j")? },
        })
    }
}

impl ToolCall {
    pub fn tool(&self) -> Tool {
        match self {
            ToolCall::FastRec { .. } => Tool::FastRec,
            ToolCall::RankCandidates { .. } => Tool::RankCandidates,
            ToolCall::ThinkAndRec { .. } => Tool::ThinkAndRec,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tool calls always serialize")
    }

    pub fn from_json(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::invalid(format!("bad tool call {line:?}: {e}")))
    }

    pub fn cost(&self, cost: &CostTable) -> f64 {
        match self.tool() {
            Tool::FastRec => cost.fast,
            Tool::RankCandidates => cost.rank,
            Tool::ThinkAndRec => cost.slow,
        }
    }
}

impl fmt::Display for ToolCall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ToolCall::FastRec { k } => write!(f, "fast_rec({k})"),
            ToolCall::RankCandidates { m, n } => write!(f, "rank_candidates({m}, {n})"),
            ToolCall::ThinkAndRec { j } => write!(f, "think_and_rec({j})"),
        }
    }
}

/// One JSON object per call, newline-separated.
pub fn format_tool_calls(calls: &[ToolCall]) -> String {
    calls.iter().map(ToolCall::to_json).collect::<Vec<_>>().join("\n")
}

pub fn parse_tool_calls(text: &str) -> Result<Vec<ToolCall>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(ToolCall::from_json)
        .collect()
}

/// Latency per tool call in seconds, plus the reward coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostTable {
    pub fast: f64,
    pub rank: f64,
    pub slow: f64,
    /// Bonus for a valid tool sequence.
    pub eta: f64,
    /// Penalty per second of latency.
    pub beta: f64,
}

impl Default for CostTable {
    fn default() -> Self {
        Self {
            fast: 0.39,
            rank: 0.10,
            slow: 2.15,
            eta: 0.1,
            beta: 0.1,
        }
    }
}

impl CostTable {
    pub fn validate(&self) -> Result<()> {
        let all = [self.fast, self.rank, self.slow, self.eta, self.beta];
        if all.iter().any(|x| !x.is_finite()) || [self.fast, self.rank, self.slow, self.beta].iter().any(|&x| x < 0.0) {
            return Err(Error::invalid("costs and beta must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Number of calls of each tool in a route.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCounts {
    pub fast: u32,
    pub rank: u32,
    pub slow: u32,
}

impl ToolCounts {
    pub fn of(calls: &[ToolCall]) -> Self {
        let mut c = ToolCounts::default();
        for call in calls {
            match call.tool() {
                Tool::FastRec => c.fast += 1,
                Tool::RankCandidates => c.rank += 1,
                Tool::ThinkAndRec => c.slow += 1,
            }
        }
        c
    }

    pub fn latency(&self, cost: &CostTable) -> f64 {
        self.fast as f64 * cost.fast + self.rank as f64 * cost.rank + self.slow as f64 * cost.slow
    }
}

/// The three route templates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Path {
    Fast = 1,
    Rank = 2,
    Slow = 3,
}

impl From<Path> for u8 {
    fn from(p: Path) -> u8 {
        p as u8
    }
}

impl TryFrom<u8> for Path {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Path::Fast),
            2 => Ok(Path::Rank),
            3 => Ok(Path::Slow),
            _ => Err(format!("path must be 1, 2 or 3, got {v}")),
        }
    }
}

impl Path {
    pub const ALL: [Path; 3] = [Path::Fast, Path::Rank, Path::Slow];

    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Path::Fast => "fast",
            Path::Rank => "rank",
            Path::Slow => "slow",
        }
    }

    /// Tool calls of this template.
    pub fn calls(self, k1: usize, k2: usize) -> Vec<ToolCall> {
        match self {
            Path::Fast => vec![ToolCall::FastRec { k: k1 }],
            Path::Rank => vec![ToolCall::FastRec { k: k2 }, ToolCall::RankCandidates { m: k2, n: k1 }],
            Path::Slow => vec![ToolCall::ThinkAndRec { j: k1 }],
        }
    }

    /// The template a call sequence follows, ignoring argument values.
    pub fn of_calls(calls: &[ToolCall]) -> Option<Path> {
        match calls {
            [ToolCall::FastRec { .. }] => Some(Path::Fast),
            [ToolCall::FastRec { .. }, ToolCall::RankCandidates { .. }] => Some(Path::Rank),
            [ToolCall::ThinkAndRec { .. }] => Some(Path::Slow),
            _ => None,
        }
    }
}

/// Path for a hit rank of the ground truth in the fast model's top-`k2`.
pub fn path_for_rank(rank: Option<usize>, k1: usize, k2: usize) -> Path {
    debug_assert!(k1 < k2);
    match rank {
        Some(r) if r <= k1 => Path::Fast,
        Some(r) if r <= k2 => Path::Rank,
        _ => Path::Slow,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub path: Path,
    /// Path before any random relabeling.
    pub base: Path,
    pub flipped: bool,
}

/// Pseudo-label from a hit rank. A Path-1 label flips to Path 2 or 3
/// (uniformly) with probability `flip_prob`.
pub fn pseudo_label(rank: Option<usize>, k1: usize, k2: usize, flip_prob: f64, rng: &mut impl Rng) -> PseudoLabel {
    let base = path_for_rank(rank, k1, k2);
    if base == Path::Fast && rng.random::<f64>() < flip_prob {
        let path = if rng.random::<bool>() { Path::Rank } else { Path::Slow };
        return PseudoLabel {
            path,
            base,
            flipped: true,
        };
    }
    PseudoLabel {
        path: base,
        base,
        flipped: false,
    }
}

/// Per-user label RNG, independent of the order users are labeled in.
pub fn label_rng(seed: u64, user: usize) -> ChaCha8Rng {
    let mut z = seed ^ (user as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// The recommendation services a route can call. `user` indexes whatever
/// episode set the implementation serves.
pub trait Tools {
    fn fast_rec(&self, user: usize, k: usize) -> Result<Vec<ItemIdx>>;
    fn rank_candidates(&self, user: usize, candidates: &[ItemIdx], n: usize) -> Result<Vec<ItemIdx>>;
    fn think_and_rec(&self, user: usize, j: usize) -> Result<Vec<ItemIdx>>;
}

impl<T: Tools + ?Sized> Tools for &T {
    fn fast_rec(&self, user: usize, k: usize) -> Result<Vec<ItemIdx>> {
        (**self).fast_rec(user, k)
    }
    fn rank_candidates(&self, user: usize, candidates: &[ItemIdx], n: usize) -> Result<Vec<ItemIdx>> {
        (**self).rank_candidates(user, candidates, n)
    }
    fn think_and_rec(&self, user: usize, j: usize) -> Result<Vec<ItemIdx>> {
        (**self).think_and_rec(user, j)
    }
}

type RankKey = (usize, Vec<ItemIdx>, usize);

/// Memoizes frozen tools; every distinct call runs once.
pub struct CachedTools<T> {
    inner: T,
    fast: RefCell<HashMap<(usize, usize), Vec<ItemIdx>>>,
    rank: RefCell<HashMap<RankKey, Vec<ItemIdx>>>,
    slow: RefCell<HashMap<(usize, usize), Vec<ItemIdx>>>,
}

impl<T: Tools> CachedTools<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            fast: RefCell::default(),
            rank: RefCell::default(),
            slow: RefCell::default(),
        }
    }

    pub fn inner(&self) -> &T {
        &self.inner
    }
}

impl<T: Tools> Tools for CachedTools<T> {
    fn fast_rec(&self, user: usize, k: usize) -> Result<Vec<ItemIdx>> {
        if let Some(v) = self.fast.borrow().get(&(user, k)) {
            return Ok(v.clone());
        }
        let v = self.inner.fast_rec(user, k)?;
        self.fast.borrow_mut().insert((user, k), v.clone());
        Ok(v)
    }

    fn rank_candidates(&self, user: usize, candidates: &[ItemIdx], n: usize) -> Result<Vec<ItemIdx>> {
        let key = (user, candidates.to_vec(), n);
        if let Some(v) = self.rank.borrow().get(&key) {
            return Ok(v.clone());
        }
        let v = self.inner.rank_candidates(user, candidates, n)?;
        self.rank.borrow_mut().insert(key, v.clone());
        Ok(v)
    }

    fn think_and_rec(&self, user: usize, j: usize) -> Result<Vec<ItemIdx>> {
        if let Some(v) = self.slow.borrow().get(&(user, j)) {
            return Ok(v.clone());
        }
        let v = self.inner.think_and_rec(user, j)?;
        self.slow.borrow_mut().insert((user, j), v.clone());
        Ok(v)
    }
}

/// A user to route and the item they actually interacted with next.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub user: usize,
    pub target: ItemIdx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteReward {
    pub ndcg10: f64,
    /// `eta` for a valid sequence, else 0.
    pub validity: f64,
    /// `beta * latency`.
    pub latency_penalty: f64,
    pub total: f64,
}

/// `R_total = NDCG@10 + eta * valid - beta * latency`.
pub fn reward_total(ndcg10: f64, valid: bool, latency: f64, cost: &CostTable) -> RouteReward {
    let validity = if valid { cost.eta } else { 0.0 };
    let latency_penalty = cost.beta * latency;
    RouteReward {
        ndcg10,
        validity,
        latency_penalty,
        total: ndcg10 + validity - latency_penalty,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub user: usize,
    pub calls: Vec<ToolCall>,
    pub path: Option<Path>,
    pub valid: bool,
    /// Top-`k_final` list of the last call; empty when invalid.
    pub final_list: Vec<ItemIdx>,
    pub hit_rank: Option<usize>,
    /// Sum of the listed calls' costs.
    pub latency: f64,
    pub reward: RouteReward,
}

impl RoutingDecision {
    pub fn counts(&self) -> ToolCounts {
        ToolCounts::of(&self.calls)
    }
}

/// Why a call sequence cannot run, or `None` when it can.
pub fn invalid_reason(calls: &[ToolCall]) -> Option<String> {
    if calls.is_empty() {
        return Some("empty tool sequence".into());
    }
    if calls.len() > MAX_CALLS {
        return Some(format!("more than {MAX_CALLS} tool calls"));
    }
    for (i, c) in calls.iter().enumerate() {
        match *c {
            ToolCall::FastRec { k: 0 } => return Some("fast_rec(k) needs k > 0".into()),
            ToolCall::ThinkAndRec { j: 0 } => return Some("think_and_rec(j) needs j > 0".into()),
            ToolCall::RankCandidates { m, n } => {
                if n == 0 || n > m {
                    return Some(format!("rank_candidates({m}, {n}) needs 0 < n <= m"));
                }
                match i.checked_sub(1).map(|p| calls[p]) {
                    Some(ToolCall::FastRec { k }) if m <= k => {}
                    Some(ToolCall::FastRec { k }) => {
                        return Some(format!("rank_candidates({m}, {n}) after fast_rec({k}) needs m <= k"))
                    }
                    _ => return Some("rank_candidates must directly follow fast_rec".into()),
                }
            }
            _ => {}
        }
    }
    None
}

/// Runs `calls` in order for one episode. Invalid sequences are flagged, not
/// executed, and still pay the latency of every listed call.
pub fn execute_route(
    calls: &[ToolCall],
    episode: Episode,
    tools: &dyn Tools,
    cost: &CostTable,
    k_final: usize,
) -> Result<RoutingDecision> {
    let latency: f64 = calls.iter().map(|c| c.cost(cost)).sum();
    let valid = invalid_reason(calls).is_none();
    let mut current: Vec<ItemIdx> = Vec::new();
    if valid {
        for c in calls {
            current = match *c {
                ToolCall::FastRec { k } => tools.fast_rec(episode.user, k)?,
                ToolCall::RankCandidates { m, n } => {
                    let m = m.min(current.len());
                    tools.rank_candidates(episode.user, &current[..m], n)?
                }
                ToolCall::ThinkAndRec { j } => tools.think_and_rec(episode.user, j)?,
            };
        }
        current.truncate(k_final);
    }
    let rank = hit_rank(&current, episode.target);
    let reward = reward_total(ndcg_from_rank(rank, REWARD_NDCG_K), valid, latency, cost);
    Ok(RoutingDecision {
        user: episode.user,
        calls: calls.to_vec(),
        path: Path::of_calls(calls),
        valid,
        final_list: current,
        hit_rank: rank,
        latency,
        reward,
    })
}

/// Best template with hindsight: highest NDCG@10, ties to lower latency.
pub fn oracle_route(
    episode: Episode,
    tools: &dyn Tools,
    cost: &CostTable,
    k1: usize,
    k2: usize,
) -> Result<(Path, Vec<RoutingDecision>)> {
    let decisions: Vec<RoutingDecision> = Path::ALL
        .iter()
        .map(|p| execute_route(&p.calls(k1, k2), episode, tools, cost, k1))
        .collect::<Result<_>>()?;
    let best = (0..3)
        .min_by(|&a, &b| {
            let (x, y) = (&decisions[a], &decisions[b]);
            y.reward
                .ndcg10
                .total_cmp(&x.reward.ndcg10)
                .then(x.latency.total_cmp(&y.latency))
                .then(a.cmp(&b))
        })
        .expect("three paths");
    Ok((Path::ALL[best], decisions))
}

/// Agreement with the oracle. Confusion rows are oracle paths; columns are
/// fast, rank, slow and "other" (any non-template sequence).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub total: usize,
    pub matches: usize,
    pub fraction: f64,
    pub confusion: [[usize; 4]; 3],
}

pub fn agreement(policy: &[Option<Path>], oracle: &[Path]) -> Agreement {
    assert_eq!(policy.len(), oracle.len());
    let mut confusion = [[0usize; 4]; 3];
    let mut matches = 0;
    for (p, o) in policy.iter().zip(oracle) {
        let col = p.map_or(3, Path::index);
        confusion[o.index()][col] += 1;
        if *p == Some(*o) {
            matches += 1;
        }
    }
    let total = oracle.len();
    Agreement {
        total,
        matches,
        fraction: if total == 0 { 0.0 } else { matches as f64 / total as f64 },
        confusion,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }
}

/// Fewer than two distinct second-level categories is easy, three or more is
/// hard, exactly two is medium.
pub fn classify_difficulty(distinct_categories: usize) -> Difficulty {
    match distinct_categories {
        0 | 1 => Difficulty::Easy,
        2 => Difficulty::Medium,
        _ => Difficulty::Hard,
    }
}

/// Distinct category names at `level` (1-based) among `items`. Items without
/// that level do not count.
pub fn distinct_categories(items: &[ItemIdx], catalog: &Catalog, level: usize) -> usize {
    items
        .iter()
        .filter_map(|&i| catalog.get(i).category_at(level))
        .collect::<BTreeSet<_>>()
        .len()
}

/// Slow when the history spans more than `threshold` second-level categories.
/// `None` is an infinite threshold.
pub fn heuristic_route(distinct_categories: usize, threshold: Option<usize>) -> Path {
    match threshold {
        Some(t) if distinct_categories > t => Path::Slow,
        _ => Path::Fast,
    }
}

/// One validation user for threshold tuning: category count and the reward
/// each of the two heuristic routes would earn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdSample {
    pub distinct_categories: usize,
    pub fast_reward: f64,
    pub slow_reward: f64,
}

/// Grid search over thresholds `0..max` and infinity for the highest mean
/// routing reward. Ties go to the larger (cheaper) threshold.
pub fn tune_threshold(samples: &[ThresholdSample]) -> Option<usize> {
    let max = samples.iter().map(|s| s.distinct_categories).max().unwrap_or(0);
    let mean = |t: Option<usize>| -> f64 {
        samples
            .iter()
            .map(|s| match heuristic_route(s.distinct_categories, t) {
                Path::Slow => s.slow_reward,
                _ => s.fast_reward,
            })
            .sum::<f64>()
    };
    let mut best = (None, mean(None));
    for t in (0..max).rev() {
        let m = mean(Some(t));
        if m > best.1 {
            best = (Some(t), m);
        }
    }
    best.0
}
