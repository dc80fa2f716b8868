//! Command-line surface: `gen-data`, `train`, `probe`, `ablate`, `report`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure. A runtime
//! failure leaves whatever was written plus a `FAILED` marker in the output
//! directory.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{load_config, set_path, validate_config, AxisName, RunConfig, Split, Stage};
use crate::encoders::Task;
use crate::error::{Error, Result};
use crate::probing::{emit_report, probe_cached, probe_model, tapped_pairs, ProbeReport};
use crate::synthdata::write_dataset;
use crate::trainer::{checkpoint_path, load_checkpoint, read_metrics, StepRecord, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const COMPARISON_HEADER: &str =
    "cell,axis_values,final_ntp,mean_probe_cosine_depth,mean_probe_cosine_seg,mean_probe_cosine_gen";

#[derive(Debug, Parser)]
#[command(name = "embed-distill", about = "Embedding distillation and layer-wise probing at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run config; defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. `distill.n_seek=4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VAL")]
    pub set: Vec<String>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the dataset splits used by the configured stages and probes.
    GenData,
    /// Run every configured stage, writing checkpoints and metrics.
    Train,
    /// Probe a checkpoint layer by layer.
    Probe {
        /// Checkpoint to probe; defaults to the last one under `--out`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write the activation stores under `<out>/probe/cache`.
        #[arg(long)]
        keep_cache: bool,
    },
    /// Run the ablation grid, one cell per subdirectory.
    Ablate,
    /// Render plot-ready CSV/JSON from metrics and probe outputs.
    Report,
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum CliError {
    Config(Error),
    Runtime(Error),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

fn config_err(e: Error) -> CliError {
    CliError::Config(e)
}

fn runtime_err(e: Error) -> CliError {
    match e {
        Error::Config { .. } => CliError::Config(e),
        other => CliError::Runtime(other),
    }
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads the config named by the flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut sets = cli.set.clone();
    if let Some(s) = cli.seed {
        sets.push(format!("seed={s}"));
    }
    load_config(cli.config.as_deref(), &sets)
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let (kind, err) = match &e {
                CliError::Config(err) => ("config error", err),
                CliError::Runtime(err) => ("runtime failure", err),
            };
            eprintln!("{kind}: {err}");
            if let CliError::Runtime(err) = &e {
                let _ = write_text(&cli.out.join("FAILED"), &format!("{err}\n"));
            }
            e.code()
        }
    }
}

pub fn run(cli: &Cli) -> std::result::Result<(), CliError> {
    if let Command::Probe { checkpoint, keep_cache } = &cli.command {
        return cmd_probe(cli, checkpoint.as_deref(), *keep_cache);
    }
    if let Command::Report = cli.command {
        return cmd_report(&cli.out).map_err(runtime_err);
    }
    let cfg = resolve_config(cli).map_err(config_err)?;
    match cli.command {
        Command::GenData => cmd_gen_data(&cfg, &cli.out).map_err(runtime_err),
        Command::Train => cmd_train(&cfg, &cli.out).map(|_| ()).map_err(runtime_err),
        Command::Ablate => {
            let cells = expand_grid(&cfg).map_err(config_err)?;
            cmd_ablate(&cfg, &cells, &cli.out).map_err(runtime_err)
        }
        Command::Probe { .. } | Command::Report => unreachable!("handled above"),
    }
}

/// Splits needed by `cfg`: one per distinct stage kind, then the probe splits.
pub fn needed_splits(cfg: &RunConfig) -> Vec<Split> {
    let mut out = Vec::new();
    for s in &cfg.stages {
        if !out.contains(&Split::Stage(s.stage)) {
            out.push(Split::Stage(s.stage));
        }
    }
    out.extend([Split::ProbeTrain, Split::ProbeEval]);
    out
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_json(&out.join("config.json"), cfg)?;
    for split in needed_splits(cfg) {
        write_dataset(&out.join("data").join(split.name()), &cfg.manifest(split))?;
    }
    Ok(())
}

/// Trains from scratch into `out`; returns the checkpoint paths.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("config.json"), cfg)?;
    let metrics = out.join("metrics.jsonl");
    if metrics.exists() {
        fs::remove_file(&metrics).map_err(|e| Error::io(&metrics, e))?;
    }
    let mut t = Trainer::new(cfg)?;
    t.run_all(out)
}

/// Newest per-stage checkpoint under `out`.
pub fn last_checkpoint(cfg_out: &Path) -> Result<PathBuf> {
    let dir = cfg_out.join("checkpoints");
    let mut found: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "edck"))
        .collect();
    found.sort();
    found
        .pop()
        .ok_or_else(|| Error::invalid(format!("no checkpoints in {}", dir.display())))
}

/// Pairs probed by default: the config's probe layers × tasks, or each task at
/// its own distillation layers when no layers are configured.
pub fn default_pairs(cfg: &RunConfig) -> Vec<(usize, Task)> {
    match &cfg.probe.layers {
        Some(ls) => ls
            .iter()
            .flat_map(|&l| cfg.probe.tasks.iter().map(move |&t| (l, t)))
            .collect(),
        None => tapped_pairs(cfg)
            .into_iter()
            .filter(|(_, t)| cfg.probe.tasks.contains(t))
            .collect(),
    }
}

fn cmd_probe(cli: &Cli, checkpoint: Option<&Path>, keep_cache: bool) -> std::result::Result<(), CliError> {
    let ck = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => last_checkpoint(&cli.out).map_err(runtime_err)?,
    };
    let (model, _) = load_checkpoint(&ck).map_err(runtime_err)?;
    // Overrides apply on top of the checkpoint's own config; the model
    // architecture is fixed by the checkpoint.
    let mut doc = serde_json::to_value(&model.cfg).map_err(|e| config_err(e.into()))?;
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|e| config_err(Error::io(path, e)))?;
        let probe: Value = serde_json::from_str::<Value>(&text)
            .map_err(|e| config_err(Error::Config {
                path: String::new(),
                message: format!("{}: {e}", path.display()),
            }))?
            .get("probe")
            .cloned()
            .unwrap_or(Value::Null);
        if !probe.is_null() {
            set_path(&mut doc, "probe", probe).map_err(config_err)?;
        }
    }
    for s in &cli.set {
        crate::config::apply_override(&mut doc, s).map_err(config_err)?;
    }
    let cfg = validate_config(&doc).map_err(config_err)?;
    if cfg.model != model.cfg.model || cfg.distill != model.cfg.distill || cfg.encoders != model.cfg.encoders {
        return Err(config_err(Error::config(
            "",
            "probe overrides may not change the model, encoders or distill sections",
        )));
    }
    let out = cli.out.join("probe");
    let report = run_probe(&model, &cfg, keep_cache.then(|| out.join("cache")).as_deref()).map_err(runtime_err)?;
    emit_report(&report, &out).map_err(runtime_err)
}

/// Probes `model` on the default pairs.
pub fn run_probe(
    model: &crate::model::MultimodalModel,
    cfg: &RunConfig,
    cache_dir: Option<&Path>,
) -> Result<ProbeReport> {
    let pairs = default_pairs(cfg);
    if cache_dir.is_some() {
        let layers: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
        let mut c = cfg.clone();
        c.probe.tasks = pairs.iter().map(|p| p.1).collect();
        let full = probe_model(model, &c, Some(&layers), cache_dir)?;
        let keep: BTreeSet<(usize, Task)> = pairs.into_iter().collect();
        return Ok(ProbeReport {
            rows: full.rows.into_iter().filter(|r| keep.contains(&(r.layer, r.task))).collect(),
            ..full
        });
    }
    let bank = crate::encoders::EncoderBank::new(&cfg.encoders, cfg.data.generation.canvas)?;
    let layers: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
    let q = crate::synthdata::probe_query();
    let train = crate::probing::cache_activations(model, &bank, &cfg.manifest(Split::ProbeTrain), &layers, &q)?;
    let eval = crate::probing::cache_activations(model, &bank, &cfg.manifest(Split::ProbeEval), &layers, &q)?;
    probe_cached(model, cfg, &bank, &train, &eval, &pairs)
}

/// One ablation cell: its axis assignments and effective config.
#[derive(Clone, Debug)]
pub struct Cell {
    pub name: String,
    pub assignments: Vec<(AxisName, Value)>,
    pub config: RunConfig,
}

impl Cell {
    /// `axis=value` pairs joined by `;`; strings bare, other values as compact JSON.
    pub fn label(&self) -> String {
        self.assignments
            .iter()
            .map(|(a, v)| match v {
                Value::String(s) => format!("{}={s}", axis_key(*a)),
                other => format!("{}={other}", axis_key(*a)),
            })
            .collect::<Vec<_>>()
            .join(";")
    }
}

fn axis_key(a: AxisName) -> String {
    serde_json::to_value(a)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn stage_names(v: &Value) -> Option<Vec<Stage>> {
    v.as_array()?
        .iter()
        .map(|s| serde_json::from_value::<Stage>(s.clone()).ok())
        .collect()
}

/// Applies one axis value to a config document.
pub fn apply_axis(doc: &mut Value, cfg: &RunConfig, axis: AxisName, value: &Value) -> Result<()> {
    let bad = |why: &str| Error::invalid(format!("{why}: {value}"));
    match axis {
        AxisName::LayerSets => {
            let o = value.as_object().ok_or_else(|| bad("expected {depth, seg, gen} layer lists"))?;
            for (k, v) in o {
                set_path(doc, &format!("distill.layer_sets.{k}"), v.clone())?;
            }
        }
        AxisName::NSeek => {
            let n = value.as_u64().ok_or_else(|| bad("expected a non-negative integer"))? as usize;
            set_path(doc, "distill.n_seek", value.clone())?;
            let mut c = cfg.clone();
            c.distill.n_seek = n;
            let need = c.max_sequence_len();
            if need > cfg.model.max_positions {
                set_path(doc, "model.max_positions", json!(need))?;
            }
        }
        AxisName::LossWeights => {
            let o = value.as_object().ok_or_else(|| bad("expected an object of weights"))?;
            for (k, v) in o {
                set_path(doc, &format!("distill.weights.{k}"), v.clone())?;
            }
        }
        AxisName::TokenOrder => set_path(doc, "distill.token_order", value.clone())?,
        AxisName::KeyView => set_path(doc, "distill.key_view", value.clone())?,
        AxisName::StageMode => {
            let on = stage_names(value).ok_or_else(|| bad("expected a list of stage names"))?;
            for (i, s) in cfg.stages.iter().enumerate() {
                set_path(doc, &format!("stages.{i}.embedding_losses"), json!(on.contains(&s.stage)))?;
            }
        }
        AxisName::LossMode => set_path(doc, "distill.mode", value.clone())?,
        AxisName::TokenFreeze => {
            for (i, s) in cfg.stages.iter().enumerate() {
                if s.stage != Stage::Pt {
                    set_path(doc, &format!("stages.{i}.special_tokens"), value.clone())?;
                }
            }
        }
        AxisName::LossComponents => {
            let (sl1, c) = match value.as_str() {
                Some("both") => (1.0, 0.3),
                Some("smooth_l1") => (1.0, 0.0),
                Some("contrastive") => (0.0, 0.3),
                _ => {
                    let o = value.as_object().ok_or_else(|| bad("expected both|smooth_l1|contrastive or weights"))?;
                    for (k, v) in o {
                        set_path(doc, &format!("distill.weights.{k}"), v.clone())?;
                    }
                    return Ok(());
                }
            };
            set_path(doc, "distill.weights.smooth_l1", json!(sl1))?;
            set_path(doc, "distill.weights.contrastive", json!(c))?;
        }
    }
    Ok(())
}

/// Cartesian product of the configured axes, first axis slowest. Each cell's
/// config has the ablation section cleared.
pub fn expand_grid(cfg: &RunConfig) -> Result<Vec<Cell>> {
    let axes = &cfg.ablation.axes;
    if axes.is_empty() {
        return Err(Error::config("ablation.axes", "no axes to sweep"));
    }
    for (i, a) in axes.iter().enumerate() {
        if a.values.is_empty() {
            return Err(Error::config(format!("ablation.axes[{i}].values"), "empty value list"));
        }
    }
    let mut base = cfg.clone();
    base.ablation = Default::default();
    let base_doc = serde_json::to_value(&base)?;
    let total: usize = axes.iter().map(|a| a.values.len()).product();
    let mut cells = Vec::with_capacity(total);
    for k in 0..total {
        let mut rem = k;
        let mut idx = vec![0; axes.len()];
        for (i, a) in axes.iter().enumerate().rev() {
            idx[i] = rem % a.values.len();
            rem /= a.values.len();
        }
        let mut doc = base_doc.clone();
        let mut assignments = Vec::new();
        for (i, a) in axes.iter().enumerate() {
            let v = &a.values[idx[i]];
            let at = format!("ablation.axes[{i}].values[{}]", idx[i]);
            apply_axis(&mut doc, &base, a.axis, v).map_err(|e| Error::config(&at, e.to_string()))?;
            assignments.push((a.axis, v.clone()));
        }
        let at = |e: Error| match e {
            Error::Config { path, message } => Error::config(
                format!("ablation cell {k}"),
                format!("{path}: {message}"),
            ),
            other => other,
        };
        let config = validate_config(&doc).map_err(at)?;
        cells.push(Cell {
            name: format!("cell_{k:03}"),
            assignments,
            config,
        });
    }
    Ok(cells)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.8}")).unwrap_or_default()
}

/// Result of one cell as it appears in the comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub final_ntp: Option<f64>,
    pub probe: BTreeMap<Task, f64>,
}

/// Trains and (optionally) probes one cell inside `dir`.
pub fn run_cell(cell: &Cell, dir: &Path, skip_probe: bool) -> Result<CellResult> {
    cmd_train(&cell.config, dir)?;
    let recs = read_metrics(&dir.join("metrics.jsonl"))?;
    let final_ntp = recs.last().map(|r| r.losses.ntp);
    let mut probe = BTreeMap::new();
    if !skip_probe {
        let last = checkpoint_path(dir, cell.config.stages.len() - 1, cell.config.stages.last().expect("stages").stage);
        let (model, _) = load_checkpoint(&last)?;
        let report = run_probe(&model, &cell.config, None)?;
        emit_report(&report, &dir.join("probe"))?;
        for t in Task::ALL {
            let v: Vec<f64> = report.rows.iter().filter(|r| r.task == t).map(|r| r.cosine).collect();
            if !v.is_empty() {
                probe.insert(t, v.iter().sum::<f64>() / v.len() as f64);
            }
        }
    }
    Ok(CellResult { final_ntp, probe })
}

pub fn comparison_csv(cells: &[Cell], results: &[CellResult]) -> String {
    let mut s = format!("{COMPARISON_HEADER}\n");
    for (c, r) in cells.iter().zip(results) {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.name,
            csv_field(&c.label()),
            fmt_opt(r.final_ntp),
            fmt_opt(r.probe.get(&Task::Depth).copied()),
            fmt_opt(r.probe.get(&Task::Seg).copied()),
            fmt_opt(r.probe.get(&Task::Gen).copied()),
        ));
    }
    s
}

pub fn cmd_ablate(cfg: &RunConfig, cells: &[Cell], out: &Path) -> Result<()> {
    write_json(&out.join("config.json"), cfg)?;
    let skip = cfg.ablation.skip_probe;
    let run_one = |c: &Cell| -> Result<CellResult> {
        let dir = out.join(&c.name);
        let r = run_cell(c, &dir, skip);
        if let Err(e) = &r {
            let _ = write_text(&dir.join("FAILED"), &format!("{e}\n"));
        }
        r
    };
    let results: Vec<Result<CellResult>> = if cfg.ablation.parallel_cells {
        cells.par_iter().map(run_one).collect()
    } else {
        cells.iter().map(run_one).collect()
    };
    let mut ok = Vec::new();
    let mut first_err = None;
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                first_err.get_or_insert(e);
                ok.push(CellResult {
                    final_ntp: None,
                    probe: BTreeMap::new(),
                });
            }
        }
    }
    write_text(&out.join("comparison.csv"), &comparison_csv(cells, &ok))?;
    match first_err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Writes `report/losses.csv` (one row per step), and when a probe report
/// exists, `report/probe_layers.csv` plus `report/summary.json`.
pub fn cmd_report(out: &Path) -> Result<()> {
    let recs = read_metrics(&out.join("metrics.jsonl"))?;
    let dir = out.join("report");
    write_text(&dir.join("losses.csv"), &losses_csv(&recs))?;
    let mut summary = serde_json::Map::new();
    let mut per_stage: BTreeMap<String, (usize, f64, f64)> = BTreeMap::new();
    for r in &recs {
        let e = per_stage.entry(r.stage.name().to_string()).or_insert((0, 0.0, 0.0));
        e.0 += 1;
        e.1 = r.losses.ntp;
        e.2 = r.losses.total;
    }
    summary.insert(
        "stages".into(),
        per_stage
            .into_iter()
            .map(|(k, (n, ntp, total))| (k, json!({"steps": n, "final_ntp": ntp, "final_total": total})))
            .collect::<serde_json::Map<_, _>>()
            .into(),
    );
    let probe_csv = out.join("probe").join("report.csv");
    if probe_csv.exists() {
        let text = fs::read_to_string(&probe_csv).map_err(|e| Error::io(&probe_csv, e))?;
        let rows = ProbeReport::parse_csv(&text)?;
        let mut wide = String::from("layer,depth,seg,gen\n");
        let layers: BTreeSet<usize> = rows.iter().map(|r| r.0).collect();
        for l in &layers {
            let get = |t: Task| {
                rows.iter()
                    .find(|r| r.0 == *l && r.1 == t)
                    .map(|r| format!("{:.8}", r.2))
                    .unwrap_or_default()
            };
            wide.push_str(&format!("{l},{},{},{}\n", get(Task::Depth), get(Task::Seg), get(Task::Gen)));
        }
        write_text(&dir.join("probe_layers.csv"), &wide)?;
        let mut best: BTreeMap<String, Value> = BTreeMap::new();
        for t in Task::ALL {
            if let Some(r) = rows
                .iter()
                .filter(|r| r.1 == t)
                .fold(None::<&(usize, Task, f64, usize)>, |b, r| match b {
                    Some(x) if x.2 >= r.2 => Some(x),
                    _ => Some(r),
                })
            {
                best.insert(t.to_string(), json!({"layer": r.0, "cosine": r.2}));
            }
        }
        summary.insert("probe_best".into(), serde_json::to_value(best)?);
    }
    write_json(&dir.join("summary.json"), &Value::Object(summary))
}

/// Wide loss table with a fixed column order: step, stage, ntp, sorted
/// embedding keys, total.
pub fn losses_csv(recs: &[StepRecord]) -> String {
    let keys: BTreeSet<&String> = recs.iter().flat_map(|r| r.losses.emb.keys()).collect();
    let mut s = String::from("step,stage,ntp");
    for k in &keys {
        s.push(',');
        s.push_str(k);
    }
    s.push_str(",total\n");
    for r in recs {
        s.push_str(&format!("{},{},{:.8}", r.step, r.stage.name(), r.losses.ntp));
        for k in &keys {
            s.push(',');
            if let Some(v) = r.losses.emb.get(*k) {
                s.push_str(&format!("{v:.8}"));
            }
        }
        s.push_str(&format!(",{:.8}\n", r.losses.total));
    }
    s
}
