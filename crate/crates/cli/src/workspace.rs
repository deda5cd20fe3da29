//! Artifact files, their manifests and the staleness rules between stages.
//!
//! Every stage writes `manifests/<stage>.json` next to its outputs:
//!
//! ```text
//! {"stage": str, "config": {...}, "config_hash": hex,
//!  "inputs": {artifact: sha256}, "outputs": {artifact: sha256}}
//! ```
//!
//! Before a stage runs, each input must exist, must still hash to what its
//! producer recorded, and every input the producer itself consumed must still
//! hash to what the producer saw. A stage whose config and inputs are
//! unchanged and whose outputs are intact is skipped unless forced.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_bytes(&bytes))
}

/// Canonical hash of a JSON value (object keys are already sorted).
pub fn config_hash(config: &serde_json::Value) -> String {
    sha256_bytes(serde_json::to_string(config).expect("json values serialize").as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub stage: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Every artifact the pipeline knows, by name, with the stage that writes it.
pub const PRODUCERS: &[(&str, &str)] = &[
    ("interactions.jsonl", "synth-data"),
    ("items.jsonl", "synth-data"),
    ("corpus_interactions.jsonl", "ingest"),
    ("corpus_items.jsonl", "ingest"),
    ("codebook.json", "quantize"),
    ("sid_map.jsonl", "quantize"),
    ("vocab.json", "quantize"),
    ("fast.ckpt", "train-fast"),
    ("fast_report.json", "train-fast"),
    ("candidates_train.jsonl", "train-fast"),
    ("candidates_valid.jsonl", "train-fast"),
    ("candidates_test.jsonl", "train-fast"),
    ("ranker.ckpt", "train-ranker"),
    ("ranker_report.json", "train-ranker"),
    ("i2i.jsonl", "build-i2i"),
    ("i2i_instructions.jsonl", "build-i2i"),
    ("slow.ckpt", "train-slow"),
    ("hard_samples.jsonl", "train-slow"),
    ("slow_report.json", "train-slow"),
    ("route_labels.jsonl", "label-routes"),
    ("planner_warmup.ckpt", "train-planner-warmup"),
    ("warmup_report.json", "train-planner-warmup"),
    ("planner.ckpt", "train-planner-rl"),
    ("planner_rl_report.json", "train-planner-rl"),
    ("routing_log.jsonl", "evaluate"),
    ("report.json", "evaluate"),
    ("summary.txt", "evaluate"),
    ("figure3.csv", "evaluate"),
    ("probe_report.json", "probe-i2i"),
    ("planner_report.json", "analyze-routing"),
];

pub fn producer(artifact: &str) -> Option<&'static str> {
    PRODUCERS.iter().find(|(a, _)| *a == artifact).map(|(_, s)| *s)
}

/// The artifact directory, plus where the raw input streams live.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub dir: PathBuf,
    pub interactions: PathBuf,
    pub items: PathBuf,
}

impl Workspace {
    pub fn path(&self, artifact: &str) -> PathBuf {
        match artifact {
            "interactions.jsonl" => self.interactions.clone(),
            "items.jsonl" => self.items.clone(),
            _ => self.dir.join(artifact),
        }
    }

    pub fn manifest_path(&self, stage: &str) -> PathBuf {
        self.dir.join("manifests").join(format!("{stage}.json"))
    }

    pub fn manifest(&self, stage: &str) -> Result<Option<Manifest>> {
        let p = self.manifest_path(stage);
        if !p.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        let m = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        Ok(Some(m))
    }

    fn write_manifest(&self, m: &Manifest) -> Result<()> {
        let p = self.manifest_path(&m.stage);
        fs::create_dir_all(p.parent().expect("manifest dir"))?;
        let mut text = serde_json::to_string_pretty(m)?;
        text.push('\n');
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }

    /// Hashes of `inputs` after checking existence and lineage.
    pub fn check_inputs(&self, inputs: &[&str]) -> Result<BTreeMap<String, String>> {
        let mut hashes = BTreeMap::new();
        for &name in inputs {
            let path = self.path(name);
            if !path.exists() {
                return Err(CliError::Missing {
                    artifact: name.to_string(),
                    path: path.display().to_string(),
                    stage: producer(name).unwrap_or("ingest").to_string(),
                }
                .into());
            }
            hashes.insert(name.to_string(), sha256_file(&path)?);
        }
        for &name in inputs {
            let Some(stage) = producer(name) else { continue };
            let Some(m) = self.manifest(stage)? else {
                // raw streams may come from outside the pipeline
                if stage == "synth-data" {
                    continue;
                }
                return Err(
                    CliError::Stale(format!("{name} has no manifest from `{stage}`; rerun `sidrec {stage}`")).into(),
                );
            };
            if m.outputs.get(name) != hashes.get(name) {
                return Err(CliError::Stale(format!(
                    "{name} was modified after `{stage}` wrote it; rerun `sidrec {stage}`"
                ))
                .into());
            }
            for (dep, seen) in &m.inputs {
                let p = self.path(dep);
                let now = if let Some(h) = hashes.get(dep) {
                    h.clone()
                } else if p.exists() {
                    sha256_file(&p)?
                } else {
                    continue;
                };
                if &now != seen {
                    return Err(CliError::Stale(format!(
                        "{name} was built from an older {dep}; rerun `sidrec {stage}`"
                    ))
                    .into());
                }
            }
        }
        Ok(hashes)
    }

    /// True when `stage` already ran with this config and these inputs and
    /// its outputs are intact.
    pub fn up_to_date(&self, stage: &str, cfg_hash: &str, inputs: &BTreeMap<String, String>) -> Result<bool> {
        let Some(m) = self.manifest(stage)? else {
            return Ok(false);
        };
        if m.config_hash != cfg_hash || &m.inputs != inputs {
            return Ok(false);
        }
        for (name, h) in &m.outputs {
            let p = self.path(name);
            if !p.exists() || &sha256_file(&p)? != h {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn record(
        &self,
        stage: &str,
        config: serde_json::Value,
        inputs: BTreeMap<String, String>,
        outputs: &[&str],
    ) -> Result<Manifest> {
        let mut out = BTreeMap::new();
        for &name in outputs {
            out.insert(name.to_string(), sha256_file(&self.path(name))?);
        }
        let m = Manifest {
            stage: stage.to_string(),
            config_hash: config_hash(&config),
            config,
            inputs,
            outputs: out,
        };
        self.write_manifest(&m)?;
        Ok(m)
    }
}

/// Writes `text` to an artifact path, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
