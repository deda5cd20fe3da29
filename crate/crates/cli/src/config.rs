//! Pipeline configuration: one TOML file plus `--set key=value` overrides.
//!
//! Unknown keys are rejected at every level. [`PROVENANCE`] records where
//! each default comes from; `sidrec defaults` prints both.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sidrec::corpus::{SynthConfig, DEFAULT_CATEGORY_DELIMITER, DEFAULT_I2I_WINDOW};
use sidrec::decoder::BeamConfig;
use sidrec::planner::CostTable;
use sidrec::ranker::{RankerConfig, RankerTrainConfig};
use sidrec::seqmodel::{ModelConfig, TrainConfig, Trainable};
use sidrec::slowpath::{GrpoConfig, SidDecoding, SlowRewardWeights, DEFAULT_MAX_THINK};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub synth: SynthConfig,
    pub ingest: IngestSettings,
    pub quantizer: QuantizerSettings,
    pub fast: FastSettings,
    pub decoder: BeamConfig,
    pub ranker: RankerSettings,
    pub i2i: I2ISettings,
    pub slow: SlowSettings,
    pub routing: RoutingSettings,
    pub planner: PlannerSettings,
    pub evaluate: EvaluateSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub work_dir: PathBuf,
    /// Defaults to `<work_dir>/interactions.jsonl`.
    pub interactions: Option<PathBuf>,
    /// Defaults to `<work_dir>/items.jsonl`.
    pub items: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            work_dir: PathBuf::from("work"),
            interactions: None,
            items: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestSettings {
    pub min_interactions: usize,
    pub category_delimiter: String,
}

impl Default for IngestSettings {
    fn default() -> Self {
        Self {
            min_interactions: 3,
            category_delimiter: DEFAULT_CATEGORY_DELIMITER.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerSettings {
    pub n_layers: usize,
    pub codes_per_layer: usize,
    pub embed_dim: usize,
    pub embed_seed: u64,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for QuantizerSettings {
    fn default() -> Self {
        Self {
            n_layers: 3,
            codes_per_layer: 256,
            embed_dim: 64,
            embed_seed: 0,
            seed: 0,
            max_iters: 50,
            tol: 1e-6,
        }
    }
}

/// Serializable subset of [`TrainConfig`]; the window comes from the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub clip_norm: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            batch_size: 16,
            epochs: 10,
            seed: 0,
            clip_norm: 1.0,
        }
    }
}

impl TrainSettings {
    pub fn to_train_config(&self, max_len: usize, trainable: Trainable) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            max_len,
            clip_norm: self.clip_norm,
            trainable,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FastSettings {
    pub model: ModelConfig,
    /// Embedding-only alignment of the SID rows to item text.
    pub align: TrainSettings,
    pub train: TrainSettings,
}

impl Default for FastSettings {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            align: TrainSettings {
                epochs: 2,
                ..Default::default()
            },
            train: TrainSettings::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankerSettings {
    pub model: RankerConfig,
    pub train: RankerTrainConfig,
    pub dataset_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    /// Offline deterministic stub.
    Fixture,
    /// Chat-completions endpoint (needs the `http-teacher` feature).
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSettings {
    pub mode: TeacherMode,
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub token_env: String,
    pub timeout_secs: u64,
    pub max_attempts: usize,
}

impl Default for TeacherSettings {
    fn default() -> Self {
        Self {
            mode: TeacherMode::Fixture,
            endpoint: String::new(),
            model: String::new(),
            token_env: "SIDREC_TEACHER_TOKEN".to_string(),
            timeout_secs: 30,
            max_attempts: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct I2ISettings {
    pub window: usize,
    pub min_count: u32,
    /// Keep at most this many pairs (highest counts first); 0 keeps all.
    pub max_pairs: usize,
    pub teacher: TeacherSettings,
}

impl Default for I2ISettings {
    fn default() -> Self {
        Self {
            window: DEFAULT_I2I_WINDOW,
            min_count: 2,
            max_pairs: 2000,
            teacher: TeacherSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlowSettings {
    /// Supervised stage: alignment and collaborative corpora mixed 1:1,
    /// plus the output-format warm start.
    pub sft: TrainSettings,
    pub format_examples: bool,
    pub grpo: GrpoConfig,
    pub rewards: SlowRewardWeights,
    pub decoding: SidDecoding,
    pub max_think: usize,
}

impl Default for SlowSettings {
    fn default() -> Self {
        Self {
            sft: TrainSettings {
                epochs: 2,
                ..Default::default()
            },
            format_examples: true,
            grpo: GrpoConfig::default(),
            rewards: SlowRewardWeights::default(),
            decoding: SidDecoding::default(),
            max_think: DEFAULT_MAX_THINK,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoutingSettings {
    pub k1: usize,
    pub k2: usize,
    pub flip_prob: f64,
    pub label_seed: u64,
    pub cost: CostTable,
}

impl Default for RoutingSettings {
    fn default() -> Self {
        Self {
            k1: 10,
            k2: 50,
            flip_prob: 0.2,
            label_seed: 0,
            cost: CostTable::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerSettings {
    pub model: ModelConfig,
    pub warmup: TrainSettings,
    pub grpo: GrpoConfig,
}

impl Default for PlannerSettings {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                d_model: 32,
                n_layers: 1,
                n_heads: 2,
                d_ff: 64,
                max_len: 64,
                ..Default::default()
            },
            warmup: TrainSettings {
                epochs: 5,
                batch_size: 32,
                ..Default::default()
            },
            grpo: GrpoConfig {
                group_size: 8,
                prompts_per_iteration: 8,
                iterations: 40,
                max_new_tokens: sidrec::planner::MAX_PLAN_TOKENS,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSettings {
    pub probe_distractors: usize,
    /// Pairs used by the I2I probe (highest counts first); 0 uses all.
    pub probe_pairs: usize,
    pub probe_seed: u64,
    /// Category level used for difficulty buckets and the heuristic router.
    pub category_level: usize,
    pub baseline_epochs: usize,
    pub baseline_lr: f64,
    pub baseline_l2: f64,
}

impl Default for EvaluateSettings {
    fn default() -> Self {
        Self {
            probe_distractors: 9,
            probe_pairs: 2000,
            probe_seed: 0,
            category_level: 2,
            baseline_epochs: 300,
            baseline_lr: 0.5,
            baseline_l2: 1e-3,
        }
    }
}

/// Where each default comes from. Keys not listed are artifact defaults.
pub const PROVENANCE: &[(&str, &str)] = &[
    ("quantizer.n_layers", "reference: L = 3"),
    ("quantizer.codes_per_layer", "reference: K = 256"),
    ("decoder.width", "reference: beam size 50"),
    ("routing.k1", "reference: K1 = 10"),
    ("routing.k2", "reference: K2 = 50"),
    ("routing.flip_prob", "reference: 20% of Path-1 labels relabeled"),
    ("routing.cost.fast", "reference: 0.39 s/sample"),
    ("routing.cost.slow", "reference: 2.15 s/sample"),
    ("routing.cost.rank", "artifact default: no reference value"),
    ("routing.cost.eta", "artifact default: no reference value"),
    ("routing.cost.beta", "artifact default: no reference value"),
    ("slow.grpo.clip_epsilon", "reference: epsilon = 0.2"),
    ("slow.grpo.temperature", "reference: temperature 0.7"),
    ("planner.grpo.clip_epsilon", "reference: epsilon = 0.2"),
    ("planner.grpo.temperature", "reference: temperature 0.7"),
    ("slow.rewards.think", "reference: reward weight"),
    ("slow.rewards.sid", "reference: reward weight"),
    ("slow.rewards.hit", "reference: reward weight"),
    ("slow.max_think", "artifact default: desk-scale window"),
    ("i2i.window", "artifact default: co-occurrence window"),
    ("evaluate.probe_distractors", "reference: 9 distractors"),
    ("evaluate.category_level", "reference: second-level categories"),
    (
        "ingest.min_interactions",
        "artifact default: 3 leaves one training pair",
    ),
];

pub fn provenance(key: &str) -> &'static str {
    PROVENANCE
        .iter()
        .find(|(k, _)| *k == key)
        .map_or("artifact default", |(_, v)| v)
}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    CliError::Config(msg.into()).into()
}

/// Sets a dotted key in a TOML table, parsing the value as TOML and falling
/// back to a bare string.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> anyhow::Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override {assignment:?} is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| config_err(format!("override {key:?}: {p} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut root = match path {
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).map_err(|e| config_err(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: PipelineConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let r = &self.routing;
        if r.k1 < 2 || r.k1 >= r.k2 {
            return Err(config_err(format!(
                "routing needs 2 <= k1 < k2, got k1={} k2={}",
                r.k1, r.k2
            )));
        }
        if !(0.0..=1.0).contains(&r.flip_prob) {
            return Err(config_err("routing.flip_prob must lie in [0, 1]"));
        }
        let q = &self.quantizer;
        if q.n_layers == 0 || q.codes_per_layer == 0 || q.embed_dim < 2 {
            return Err(config_err(
                "quantizer needs n_layers, codes_per_layer >= 1 and embed_dim >= 2",
            ));
        }
        if self.decoder.width == 0 {
            return Err(config_err("decoder.width must be at least 1"));
        }
        if self.evaluate.probe_distractors == 0 || self.evaluate.category_level == 0 {
            return Err(config_err(
                "evaluate.probe_distractors and category_level must be positive",
            ));
        }
        let checks = [
            ("routing.cost", r.cost.validate()),
            ("fast.model", self.fast.model.validate()),
            ("planner.model", self.planner.model.validate()),
            ("slow.grpo", self.slow.grpo.validate()),
            ("planner.grpo", self.planner.grpo.validate()),
        ];
        for (name, res) in checks {
            res.map_err(|e| config_err(format!("{name}: {e}")))?;
        }
        for (name, t) in [
            ("fast.align", &self.fast.align),
            ("fast.train", &self.fast.train),
            ("slow.sft", &self.slow.sft),
            ("planner.warmup", &self.planner.warmup),
        ] {
            t.to_train_config(2, Trainable::All)
                .validate()
                .map_err(|e| config_err(format!("{name}: {e}")))?;
        }
        let reserve = self.slow.max_think + q.n_levels_reserve();
        if reserve >= self.fast.model.max_len {
            return Err(config_err(format!(
                "slow.max_think {} does not fit fast.model.max_len {}",
                self.slow.max_think, self.fast.model.max_len
            )));
        }
        if self.planner.model.max_len <= sidrec::planner::MAX_PLAN_TOKENS + 1 {
            return Err(config_err("planner.model.max_len cannot hold a plan"));
        }
        Ok(())
    }

    pub fn workspace(&self) -> crate::workspace::Workspace {
        let dir = self.paths.work_dir.clone();
        crate::workspace::Workspace {
            interactions: self
                .paths
                .interactions
                .clone()
                .unwrap_or_else(|| dir.join("interactions.jsonl")),
            items: self.paths.items.clone().unwrap_or_else(|| dir.join("items.jsonl")),
            dir,
        }
    }

    /// Defaults as TOML, each key annotated with its provenance.
    pub fn defaults_toml() -> String {
        let value = toml::Value::try_from(PipelineConfig::default()).expect("defaults serialize");
        let mut out = String::new();
        write_table(&mut out, "", value.as_table().expect("table"));
        out
    }
}

impl QuantizerSettings {
    /// Tokens a think-and-rec call needs beyond the think block itself.
    fn n_levels_reserve(&self) -> usize {
        self.n_layers + 4
    }
}

fn write_table(out: &mut String, prefix: &str, table: &toml::Table) {
    let (leaves, subs): (Vec<_>, Vec<_>) = table.iter().partition(|(_, v)| !v.is_table());
    if !prefix.is_empty() {
        let _ = writeln!(out, "\n[{prefix}]");
    }
    for (k, v) in leaves {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        let _ = writeln!(out, "{k} = {v}  # {}", provenance(&key));
    }
    for (k, v) in subs {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        write_table(out, &key, v.as_table().expect("table"));
    }
}
