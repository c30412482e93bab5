use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use super::spec::{DataSource, ExperimentSpec, Precision};
use crate::arc::{decode_prediction, dump_line, encode_canvas, generate_microtask, Family};
use crate::error::{Error, Result};
use crate::halting::{export_attention, run_with_halting, write_trace_csv, HaltOptions, HaltOutcome, HaltPolicy};
use crate::model::{checkpoint, flops, LoopVit, LoopVitConfig};
use crate::tensor::Scalar;
use crate::train::{evaluate, train_offline, EvalReport, EvalTask, TrainData};

pub const OUTPUT_SCHEMA_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    Ttt,
    Sweep,
    Diagnose,
    DumpTasks,
}

/// Flags shared by every subcommand.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Options {
    pub spec: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub no_halt: bool,
    pub tau: Option<f64>,
    pub precision: Option<Precision>,
    pub emit_attention: bool,
    pub task_id: Option<String>,
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parse { .. } | Error::Capacity { .. } | Error::Json(_) => 2,
        Error::Checkpoint(_) => 3,
        Error::UnknownReference(_) => 4,
        _ => 1,
    }
}

/// Load the spec and apply command-line overrides.
pub fn resolve_spec(opts: &Options) -> Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::load(&opts.spec)?;
    if let Some(seed) = opts.seed {
        spec.train.seed = seed;
        spec.ttt.seed = seed;
    }
    if let Some(tau) = opts.tau {
        spec.halt.tau = tau;
    }
    if let Some(p) = opts.precision {
        spec.precision = p;
    }
    if let Some(out) = &opts.out {
        spec.outputs = out.clone();
    }
    spec.validate()?;
    Ok(spec)
}

pub fn run(cmd: Command, opts: &Options) -> Result<()> {
    let spec = resolve_spec(opts)?;
    match spec.precision {
        Precision::F32 => run_typed::<f32>(cmd, &spec, opts),
        Precision::F64 => run_typed::<f64>(cmd, &spec, opts),
    }
}

fn run_typed<F: Scalar>(cmd: Command, spec: &ExperimentSpec, opts: &Options) -> Result<()> {
    let out = spec.outputs.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    match cmd {
        Command::Train => cmd_train::<F>(spec, &out).map(|_| ()),
        Command::Eval => cmd_eval::<F>(spec, opts, &out, false),
        Command::Ttt => cmd_eval::<F>(spec, opts, &out, true),
        Command::Sweep => cmd_sweep::<F>(spec, opts, &out),
        Command::Diagnose => cmd_diagnose::<F>(spec, opts, &out),
        Command::DumpTasks => cmd_dump_tasks(spec, &out),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

fn load_checkpoint<F: Scalar>(path: &Path, expected: &LoopVitConfig) -> Result<LoopVit<F>> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    checkpoint::from_bytes_expecting(&bytes, expected)
}

fn checkpoint_path(opts: &Options, out: &Path) -> PathBuf {
    opts.checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE))
}

/// The policy a command evaluates with.
pub fn effective_policy(spec: &ExperimentSpec, no_halt: bool) -> HaltPolicy {
    if no_halt {
        HaltPolicy::fixed(spec.halt.t_max)
    } else {
        spec.halt
    }
}

/// Train per the spec; writes the metrics log and checkpoint into `out`.
pub fn cmd_train<F: Scalar>(spec: &ExperimentSpec, out: &Path) -> Result<LoopVit<F>> {
    let mut model = LoopVit::<F>::new(spec.model.clone(), spec.train.seed)?;
    let eval = spec.eval_tasks()?;
    let metrics_path = out.join(METRICS_FILE);
    let mut log = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let data = TrainData {
        tasks: spec.train_tasks()?,
        eval: &eval,
        eval_policy: HaltPolicy::fixed(spec.model.t_train),
    };
    let result = train_offline(&mut model, data, &spec.train, |rec| {
        writeln!(log, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(&metrics_path, e))
    });
    if let Err(Error::Divergence { step, loss }) = &result {
        let dump = json!({
            "schema_version": OUTPUT_SCHEMA_VERSION,
            "step": step,
            "loss": loss,
            "learning_rate": spec.train.learning_rate,
            "message": "non-finite training loss; lower train.learning_rate or train.grad_clip_norm",
        });
        write_json(&out.join("divergence.json"), &dump)?;
        checkpoint::save(&model, &out.join("diverged.bin"))?;
    }
    result?;
    checkpoint::save(&model, &out.join(CHECKPOINT_FILE))?;
    write_json(&out.join("spec.json"), spec)?;
    Ok(model)
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    schema_version: u32,
    command: &'a str,
    tau: f64,
    t_max: usize,
    halting: bool,
    attempts: usize,
    queries: usize,
    exact_match: f64,
    pixel_accuracy: f64,
    avg_executed_steps: f64,
    avg_flops: f64,
}

fn write_eval_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut s = String::from("schema_version,task_id,query,correct,solved_by,pixel_accuracy,exit_step\n");
    for r in &report.results {
        s.push_str(&format!(
            "{OUTPUT_SCHEMA_VERSION},{},{},{},{},{:.6},{}\n",
            r.task_id,
            r.query,
            r.correct,
            r.solved_by.map(|k| k.to_string()).unwrap_or_default(),
            r.pixel_accuracy,
            r.exit_step
        ));
    }
    write_file(path, s.as_bytes())
}

fn cmd_eval<F: Scalar>(spec: &ExperimentSpec, opts: &Options, out: &Path, ttt: bool) -> Result<()> {
    let model = load_checkpoint::<F>(&checkpoint_path(opts, out), &spec.model)?;
    let policy = effective_policy(spec, opts.no_halt);
    let tasks = spec.eval_tasks()?;
    let report = evaluate(&model, &tasks, &policy, spec.eval.attempts, ttt.then_some(&spec.ttt))?;
    let name = if ttt { "ttt" } else { "eval" };
    let summary = EvalSummary {
        schema_version: OUTPUT_SCHEMA_VERSION,
        command: name,
        tau: policy.tau,
        t_max: policy.t_max,
        halting: !opts.no_halt,
        attempts: report.attempts,
        queries: report.queries,
        exact_match: report.exact_match,
        pixel_accuracy: report.pixel_accuracy,
        avg_executed_steps: report.avg_executed_steps,
        avg_flops: flops::forward_flops(&model.config, report.avg_executed_steps),
    };
    write_json(&out.join(format!("{name}.json")), &summary)?;
    write_eval_csv(&out.join(format!("{name}_tasks.csv")), &report)
}

fn cmd_sweep<F: Scalar>(spec: &ExperimentSpec, opts: &Options, out: &Path) -> Result<()> {
    let sw = &spec.sweep;
    if sw.tau.is_empty() && (sw.blocks.is_empty() || sw.t.is_empty()) {
        return Err(Error::Config("sweep needs sweep.tau or both sweep.blocks and sweep.t".into()));
    }
    let tasks = spec.eval_tasks()?;
    if !sw.blocks.is_empty() && !sw.t.is_empty() {
        let mut rows = String::from("schema_version,blocks,t,params,exact_match,avg_steps,flops\n");
        for &b in &sw.blocks {
            for &t in &sw.t {
                let mut point = spec.clone();
                point.model.blocks = b;
                point.model.t_train = t;
                point.model.t_max = t;
                point.train.t_train = t;
                point.halt.t_max = t;
                point.halt.t_min = point.halt.t_min.min(t);
                point.outputs = out.join(format!("bt_b{b}_t{t}"));
                point.validate()?;
                fs::create_dir_all(&point.outputs).map_err(|e| Error::io(&point.outputs, e))?;
                let model = cmd_train::<F>(&point, &point.outputs)?;
                let policy = effective_policy(&point, opts.no_halt);
                let r = evaluate(&model, &tasks, &policy, spec.eval.attempts, None)?;
                rows.push_str(&format!(
                    "{OUTPUT_SCHEMA_VERSION},{b},{t},{},{:.6},{:.6},{:.6e}\n",
                    model.param_count(),
                    r.exact_match,
                    r.avg_executed_steps,
                    flops::forward_flops(&model.config, r.avg_executed_steps)
                ));
            }
        }
        write_file(&out.join("sweep_bt.csv"), rows.as_bytes())?;
    }
    if !sw.tau.is_empty() {
        let model = load_checkpoint::<F>(&checkpoint_path(opts, out), &spec.model)?;
        let mut taus = sw.tau.clone();
        taus.sort_by(f64::total_cmp);
        let mut summary = String::from("schema_version,tau,exact_match,avg_executed_steps,flops\n");
        let mut per_task = String::from("schema_version,tau,task_id,query,exit_step,correct\n");
        for tau in taus {
            let policy = HaltPolicy { tau, ..spec.halt };
            let r = evaluate(&model, &tasks, &policy, spec.eval.attempts, None)?;
            summary.push_str(&format!(
                "{OUTPUT_SCHEMA_VERSION},{tau},{:.6},{:.6},{:.6e}\n",
                r.exact_match,
                r.avg_executed_steps,
                flops::forward_flops(&model.config, r.avg_executed_steps)
            ));
            for q in &r.results {
                per_task.push_str(&format!(
                    "{OUTPUT_SCHEMA_VERSION},{tau},{},{},{},{}\n",
                    q.task_id, q.query, q.exit_step, q.correct
                ));
            }
        }
        write_file(&out.join("sweep_tau.csv"), summary.as_bytes())?;
        write_file(&out.join("sweep_tau_tasks.csv"), per_task.as_bytes())?;
    }
    Ok(())
}

/// Find a task by id among the eval set; micro-task ids of the form
/// `FAMILY-SEED` are generated on demand.
pub fn resolve_task(spec: &ExperimentSpec, id: &str) -> Result<EvalTask> {
    if let Some(t) = spec.eval_tasks()?.into_iter().find(|t| t.id == id) {
        return Ok(t);
    }
    if spec.data.source == DataSource::Microtask {
        if let Some((fam, seed)) = id.rsplit_once('-') {
            if let (Ok(f), Ok(s)) = (fam.parse::<Family>(), seed.parse::<u64>()) {
                return Ok(EvalTask {
                    id: id.to_string(),
                    task: generate_microtask(f, s),
                    equivariance: f.equivariance(),
                });
            }
        }
    }
    Err(Error::UnknownReference(format!("no task with id {id:?}")))
}

fn cmd_diagnose<F: Scalar>(spec: &ExperimentSpec, opts: &Options, out: &Path) -> Result<()> {
    let id = opts
        .task_id
        .as_deref()
        .ok_or_else(|| Error::UnknownReference("diagnose needs --task-id".into()))?;
    let task = resolve_task(spec, id)?;
    let model = load_checkpoint::<F>(&checkpoint_path(opts, out), &spec.model)?;
    let policy = effective_policy(spec, opts.no_halt);
    let cfg = &model.config;
    let dir = out.join("diagnose").join(id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut outcomes: Vec<(String, HaltOutcome)> = Vec::new();
    let mut steps = String::new();
    for qi in 0..task.task.queries.len() {
        let canvas = encode_canvas(&task.task, qi, &cfg.canvas())?;
        let hopts = HaltOptions {
            fixed_length: false,
            states: false,
            attention: opts.emit_attention,
        };
        let o = run_with_halting(&model, &canvas, &policy, hopts)?;
        let label = if task.task.queries.len() == 1 { id.to_string() } else { format!("{id}#{qi}") };
        for s in &o.trace {
            let grid = decode_prediction(&s.probs, cfg.n_classes, cfg.canvas_h, cfg.canvas_w);
            let line = json!({
                "schema_version": OUTPUT_SCHEMA_VERSION,
                "task_id": label,
                "step": s.t,
                "entropy": s.entropy,
                "delta": s.delta,
                "halted": s.halted,
                "prediction": grid.rows(),
            });
            steps.push_str(&line.to_string());
            steps.push('\n');
        }
        outcomes.push((label, o));
    }
    write_file(&dir.join("steps.jsonl"), steps.as_bytes())?;
    let mut csv = Vec::new();
    write_trace_csv(&mut csv, outcomes.iter().map(|(k, o)| (k.as_str(), o)))?;
    write_file(&dir.join("trace.csv"), &csv)?;
    if opts.emit_attention {
        let (blob, index) = export_attention(outcomes.iter().map(|(k, o)| (k.as_str(), o)), cfg.heads, cfg.tokens());
        write_file(&dir.join("attention.bin"), &blob)?;
        write_json(&dir.join("attention_index.json"), &index)?;
    }
    Ok(())
}

fn cmd_dump_tasks(spec: &ExperimentSpec, out: &Path) -> Result<()> {
    if spec.data.source != DataSource::Microtask {
        return Err(Error::Config("dump-tasks needs data.source = MICROTASK".into()));
    }
    let mut s = String::new();
    for f in &spec.data.families {
        for i in 0..spec.data.counts.eval as u64 {
            let seed = spec.data.seeds.eval.wrapping_add(i);
            s.push_str(&dump_line(*f, seed, &generate_microtask(*f, seed)));
            s.push('\n');
        }
    }
    write_file(&out.join("tasks.jsonl"), s.as_bytes())
}
