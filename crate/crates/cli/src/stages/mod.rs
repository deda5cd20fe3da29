//! One function per pipeline command. Each declares its inputs, outputs and
//! the config slice it depends on; [`run_stage`] enforces the manifest rules.

mod data;
mod evaluate;
mod fast;
mod planner;
mod slow;

use anyhow::Result;
use serde_json::{json, Value};

use crate::config::PipelineConfig;
use crate::workspace::{config_hash, Workspace};

pub use data::{ingest, quantize, synth_data};
pub use evaluate::{analyze_routing, evaluate, probe_i2i};
pub use fast::{train_fast, train_ranker};
pub use planner::{label_routes, train_planner_rl, train_planner_warmup};
pub use slow::{build_i2i, train_slow};

pub struct Ctx<'a> {
    pub cfg: &'a PipelineConfig,
    pub ws: Workspace,
    pub force: bool,
}

pub struct StageDef {
    pub name: &'static str,
    pub inputs: Vec<&'static str>,
    pub outputs: &'static [&'static str],
    pub config: Value,
}

/// Checks inputs, skips up-to-date work, runs `body` and records the manifest.
/// The returned summary always carries `stage` and `status`.
pub fn run_stage(ctx: &Ctx, def: StageDef, body: impl FnOnce() -> Result<Value>) -> Result<Value> {
    let inputs = ctx.ws.check_inputs(&def.inputs)?;
    let hash = config_hash(&def.config);
    if !ctx.force && ctx.ws.up_to_date(def.name, &hash, &inputs)? {
        log::info!("{}: inputs and config unchanged, nothing to do", def.name);
        return Ok(json!({"stage": def.name, "status": "up_to_date"}));
    }
    std::fs::create_dir_all(&ctx.ws.dir)?;
    let summary = body()?;
    ctx.ws.record(def.name, def.config, inputs, def.outputs)?;
    let mut out = json!({"stage": def.name, "status": "done"});
    if let (Value::Object(o), Value::Object(s)) = (&mut out, summary) {
        o.extend(s);
    }
    Ok(out)
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config sections serialize")
}

/// Numerical failures surface with their own exit code.
fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(sidrec::Error::Numerical(format!("{name} is not finite")).into())
    }
}
