//! Experiment specification: one JSON file, optionally overridden by
//! `LOOPVIT__<DOTTED__PATH>` environment variables.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::arc::{parse_task, Family, TaskInstance};
use crate::error::{Error, Result};
use crate::halting::HaltPolicy;
use crate::model::LoopVitConfig;
use crate::train::{EvalTask, TrainConfig, TttConfig};

pub const SPEC_SCHEMA_VERSION: u32 = 1;
pub const ENV_PREFIX: &str = "LOOPVIT__";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DataSource {
    Microtask,
    ArcJsonDir,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    /// First training seed; task `i` uses `train + i`.
    pub train: u64,
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { train: 0, eval: 1_000_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Counts {
    /// Training tasks; `None` streams fresh tasks for as long as needed.
    pub train: Option<usize>,
    /// Held-out tasks per family.
    pub eval: usize,
}

impl Default for Counts {
    fn default() -> Self {
        Counts { train: None, eval: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSpec {
    pub source: DataSource,
    pub families: Vec<Family>,
    pub seeds: Seeds,
    pub counts: Counts,
    /// Directory of ARC task files used for training (ARC_JSON_DIR).
    pub train_dir: Option<PathBuf>,
    /// Directory of ARC task files used for evaluation (ARC_JSON_DIR).
    pub eval_dir: Option<PathBuf>,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            source: DataSource::Microtask,
            families: vec![Family::Identity],
            seeds: Seeds::default(),
            counts: Counts::default(),
            train_dir: None,
            eval_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSpec {
    /// Candidates per query (Pass@k).
    pub attempts: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec { attempts: 2 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub blocks: Vec<usize>,
    pub t: Vec<usize>,
    pub tau: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub schema_version: u32,
    pub model: LoopVitConfig,
    pub train: TrainConfig,
    pub ttt: TttConfig,
    pub halt: HaltPolicy,
    pub eval: EvalSpec,
    pub data: DataSpec,
    pub sweep: SweepSpec,
    pub outputs: PathBuf,
    pub precision: Precision,
    /// Ceiling for the training-time activation estimate, in MiB.
    pub memory_budget_mb: f64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            schema_version: SPEC_SCHEMA_VERSION,
            model: LoopVitConfig::default(),
            train: TrainConfig::default(),
            ttt: TttConfig::default(),
            halt: HaltPolicy::default(),
            eval: EvalSpec::default(),
            data: DataSpec::default(),
            sweep: SweepSpec::default(),
            outputs: PathBuf::from("runs/default"),
            precision: Precision::F32,
            memory_budget_mb: 2048.0,
        }
    }
}

fn spec_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Parse an override value as JSON, falling back to a plain string.
fn override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Set `path` (dot separated) inside `root`, creating objects as needed.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').filter(|k| !k.is_empty()).collect();
    let Some((last, parents)) = keys.split_last() else {
        return Err(spec_err(format!("empty override path {path:?}")));
    };
    let mut cur = root;
    for k in parents {
        if !cur.is_object() {
            return Err(spec_err(format!("override {path:?} crosses a non-object at {k:?}")));
        }
        cur = cur
            .as_object_mut()
            .expect("checked")
            .entry(k.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    match cur.as_object_mut() {
        Some(obj) => {
            obj.insert(last.to_string(), value);
            Ok(())
        }
        None => Err(spec_err(format!("override {path:?} targets a non-object"))),
    }
}

/// Apply `LOOPVIT__A__B=v` style overrides (`A__B` becomes `a.b`). Applied
/// in sorted key order so the result does not depend on environment order.
pub fn apply_env_overrides(root: &mut Value, vars: impl IntoIterator<Item = (String, String)>) -> Result<Vec<String>> {
    let mut found: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|p| (p.to_string(), v)))
        .collect();
    found.sort();
    let mut applied = Vec::new();
    for (k, v) in found {
        let path = k.split("__").map(str::to_lowercase).collect::<Vec<_>>().join(".");
        set_path(root, &path, override_value(&v))?;
        applied.push(path);
    }
    Ok(applied)
}

impl ExperimentSpec {
    pub fn from_value(v: Value) -> Result<Self> {
        let spec: ExperimentSpec = serde_json::from_value(v).map_err(|e| spec_err(format!("spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Parse JSON text and apply overrides from `vars`.
    pub fn from_json_with_env(text: &str, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut v: Value = serde_json::from_str(text).map_err(|e| spec_err(format!("spec is not valid JSON: {e}")))?;
        if !v.is_object() {
            return Err(spec_err("spec must be a JSON object"));
        }
        apply_env_overrides(&mut v, vars)?;
        // the halting cap defaults to the model's inference cap
        let model_t_max = v.pointer("/model/t_max").cloned().unwrap_or(Value::from(LoopVitConfig::default().t_max));
        if v.pointer("/halt/t_max").is_none() {
            set_path(&mut v, "halt.t_max", model_t_max)?;
        }
        Self::from_value(v)
    }

    /// Read a spec file, applying the process environment's overrides.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| spec_err(format!("cannot read spec {}: {e}", path.display())))?;
        Self::from_json_with_env(&text, std::env::vars())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SPEC_SCHEMA_VERSION {
            return Err(spec_err(format!("unsupported spec schema_version {}", self.schema_version)));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.ttt.validate()?;
        self.halt.validate()?;
        if self.train.t_train != self.model.t_train {
            return Err(spec_err(format!(
                "train.t_train = {} must equal model.t_train = {}",
                self.train.t_train, self.model.t_train
            )));
        }
        if self.model.t_train > self.model.t_max {
            return Err(spec_err(format!(
                "model.t_train = {} exceeds model.t_max = {}",
                self.model.t_train, self.model.t_max
            )));
        }
        if self.eval.attempts == 0 {
            return Err(spec_err("eval.attempts must be >= 1"));
        }
        if self.sweep.blocks.contains(&0) || self.sweep.t.contains(&0) {
            return Err(spec_err("sweep.blocks and sweep.t entries must be >= 1"));
        }
        if self.sweep.tau.iter().any(|t| !(*t >= 0.0) || t.is_infinite()) {
            return Err(spec_err("sweep.tau entries must be finite and non-negative"));
        }
        match self.data.source {
            DataSource::Microtask => {
                if self.data.families.is_empty() {
                    return Err(spec_err("data.families must not be empty"));
                }
                for f in &self.data.families {
                    let (_, hi) = f.size_range();
                    if hi > self.model.canvas_h || hi > self.model.canvas_w {
                        return Err(spec_err(format!(
                            "{f} grids reach {hi}x{hi}, larger than the {}x{} canvas",
                            self.model.canvas_h, self.model.canvas_w
                        )));
                    }
                }
            }
            DataSource::ArcJsonDir => {
                if self.data.train_dir.is_none() && self.data.eval_dir.is_none() {
                    return Err(spec_err("ARC_JSON_DIR needs data.train_dir or data.eval_dir"));
                }
            }
        }
        self.check_memory(self.model.t_train, self.model.blocks)
    }

    /// Estimated training activation memory (MiB) for `t_train` unrolled
    /// steps of `blocks` layers, including the backward sweep.
    pub fn activation_mib(&self, t_train: usize, blocks: usize) -> f64 {
        let c = &self.model;
        let (m, d, f, h) = (c.tokens() as f64, c.d as f64, c.ffn_inner() as f64, c.heads as f64);
        let per_layer = 14.0 * m * (d + f) + 2.0 * h * m * m;
        let bytes = match self.precision {
            Precision::F32 => 4.0,
            Precision::F64 => 8.0,
        };
        2.0 * t_train as f64 * blocks as f64 * per_layer * bytes / (1024.0 * 1024.0)
    }

    pub fn check_memory(&self, t_train: usize, blocks: usize) -> Result<()> {
        let need = self.activation_mib(t_train, blocks);
        if need > self.memory_budget_mb {
            return Err(spec_err(format!(
                "T_train = {t_train} with B = {blocks} needs about {need:.0} MiB of activations for backpropagation \
                 through the unrolled loop, above memory_budget_mb = {:.0}; lower model.t_train, model.blocks, \
                 model.d or the canvas size, or raise memory_budget_mb",
                self.memory_budget_mb
            )));
        }
        Ok(())
    }

    /// Training task stream, interleaving families round-robin.
    pub fn train_tasks(&self) -> Result<Box<dyn Iterator<Item = TaskInstance>>> {
        match self.data.source {
            DataSource::Microtask => {
                let fams = self.data.families.clone();
                let base = self.data.seeds.train;
                let it = (0u64..).map(move |i| {
                    let f = fams[(i % fams.len() as u64) as usize];
                    crate::arc::generate_microtask(f, base.wrapping_add(i))
                });
                Ok(match self.data.counts.train {
                    Some(n) => Box::new(it.take(n)),
                    None => Box::new(it),
                })
            }
            DataSource::ArcJsonDir => {
                let dir = self.data.train_dir.as_ref().ok_or_else(|| spec_err("data.train_dir is required for training"))?;
                let tasks: Vec<TaskInstance> = read_arc_dir(dir)?.into_iter().flat_map(|(_, t)| leave_one_out(&t)).collect();
                // an ARC directory is small; cycle it for the requested number of steps
                Ok(Box::new(tasks.into_iter().cycle()))
            }
        }
    }

    /// Held-out tasks with stable ids.
    pub fn eval_tasks(&self) -> Result<Vec<EvalTask>> {
        match self.data.source {
            DataSource::Microtask => {
                let mut out = Vec::new();
                for f in &self.data.families {
                    for i in 0..self.data.counts.eval as u64 {
                        let seed = self.data.seeds.eval.wrapping_add(i);
                        out.push(EvalTask {
                            id: format!("{f}-{seed}"),
                            task: crate::arc::generate_microtask(*f, seed),
                            equivariance: f.equivariance(),
                        });
                    }
                }
                Ok(out)
            }
            DataSource::ArcJsonDir => {
                let dir = self.data.eval_dir.as_ref().ok_or_else(|| spec_err("data.eval_dir is required for evaluation"))?;
                Ok(read_arc_dir(dir)?
                    .into_iter()
                    .map(|(id, task)| EvalTask {
                        id,
                        task,
                        equivariance: crate::arc::Equivariance::full(),
                    })
                    .collect())
            }
        }
    }
}

/// Every demo as a query with the other demos as context, plus the task's
/// own queries that carry answers.
fn leave_one_out(task: &TaskInstance) -> Vec<TaskInstance> {
    let mut out = Vec::new();
    if task.demos.len() > 1 {
        for i in 0..task.demos.len() {
            let mut demos = task.demos.clone();
            let held = demos.remove(i);
            out.push(TaskInstance {
                demos,
                queries: vec![crate::arc::Query {
                    input: held.input,
                    expected: Some(held.output),
                }],
            });
        }
    }
    let answered: Vec<_> = task.queries.iter().filter(|q| q.expected.is_some()).cloned().collect();
    if !answered.is_empty() {
        out.push(TaskInstance {
            demos: task.demos.clone(),
            queries: answered,
        });
    }
    out
}

/// All `*.json` ARC tasks in `dir`, sorted by file stem.
pub fn read_arc_dir(dir: &Path) -> Result<Vec<(String, TaskInstance)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let task = parse_task(&bytes).map_err(|e| match e {
                Error::Parse { path, message } => Error::Parse {
                    path: format!("{}:{path}", p.display()),
                    message,
                },
                other => other,
            })?;
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((id, task))
        })
        .collect()
}
