//! Stage orchestration, the batch objective, and checkpoints.
//!
//! A step runs in two phases. Every item's forward pass is recorded on its own
//! graph, in parallel. A small batch graph then takes the predictions as
//! leaves and computes the coupled losses (InfoNCE mixes items). Its leaf
//! gradients are pushed back through each item graph via the surrogate root
//! `c_i · ntp_i + Σ sum(p ⊙ G)`, and per-item parameter gradients are summed in
//! item order so the result does not depend on thread scheduling.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::{RunConfig, Split, Stage, StageConfig, TokenFreeze};
use crate::diffcore::{Binder, Graph, ParamId, Real, Tensor, Var};
use crate::encoders::{EncoderBank, Task};
use crate::error::{Error, Result};
use crate::losses::{active_tasks, embedding_loss, stage_loss, EmbeddingLoss};
use crate::model::{ForwardSpec, Item, MultimodalModel, ParamGroup};
use crate::optim::Adam;
use crate::synthdata::{caption_query, iterate_batches, DatasetManifest};

/// Groups trained in `stage`.
pub fn stage_groups(stage: &StageConfig) -> BTreeSet<ParamGroup> {
    use ParamGroup::*;
    let mut g: BTreeSet<ParamGroup> = match stage.stage {
        Stage::Pt => [Projector, Predictors, SpecialTokens, Bridges, Temperature].into(),
        Stage::Ift | Stage::Vpt => [Projector, Llm].into(),
    };
    if stage.stage != Stage::Pt {
        if stage.embedding_losses() {
            g.extend([Predictors, Bridges, Temperature]);
        }
        if stage.special_tokens() == TokenFreeze::Learnable {
            g.insert(SpecialTokens);
        }
    }
    g
}

/// One parameter group with its members and whether the stage trains it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct GroupPlan {
    pub group: ParamGroup,
    pub names: Vec<String>,
    pub trainable: bool,
}

/// Partitions every parameter of `model` into groups for `stage`.
pub fn trainable_params(stage: &StageConfig, model: &MultimodalModel) -> Result<Vec<GroupPlan>> {
    let on = stage_groups(stage);
    let mut plans: BTreeMap<ParamGroup, Vec<String>> = BTreeMap::new();
    for (_, name, _) in model.store.iter() {
        plans.entry(ParamGroup::of(name)?).or_default().push(name.to_string());
    }
    Ok(plans
        .into_iter()
        .map(|(group, names)| GroupPlan {
            group,
            names,
            trainable: on.contains(&group),
        })
        .collect())
}

/// Marks exactly the stage's groups as requiring gradients.
pub fn apply_trainable(stage: &StageConfig, model: &mut MultimodalModel) -> Result<()> {
    let on = stage_groups(stage);
    for (_, name, _) in model.store.iter() {
        ParamGroup::of(name)?;
    }
    model
        .store
        .set_trainable(|n| ParamGroup::of(n).map(|g| on.contains(&g)).unwrap_or(false));
    Ok(())
}

/// Tasks whose embedding losses enter this stage's objective.
pub fn stage_tasks(cfg: &RunConfig, stage: &StageConfig) -> Vec<Task> {
    if stage.embedding_losses() {
        active_tasks(&cfg.distill.mode, &cfg.distill.weights)
    } else {
        Vec::new()
    }
}

/// Loss nodes of one batch objective.
pub struct BatchTerms {
    pub ntp: Var,
    pub emb: BTreeMap<(Task, usize), EmbeddingLoss>,
    pub total: Var,
}

/// Couples per-item NTP losses and predictions into the stage objective.
///
/// `ntps[i]` is item i's scalar NTP loss and `preds[i]` its predictions; the
/// batch NTP loss is their mean.
pub fn batch_loss<T: Real>(
    g: &mut Graph<T>,
    b: &mut Binder<'_>,
    model: &MultimodalModel,
    ntps: &[Var],
    preds: &[BTreeMap<(Task, usize), Var>],
    items: &[&Item],
    tasks: &[Task],
) -> Result<BatchTerms> {
    if ntps.is_empty() || ntps.len() != items.len() || preds.len() != items.len() {
        return Err(Error::invalid("batch loss needs one ntp and one prediction map per item"));
    }
    let stacked = g.concat(ntps, 0)?;
    let ntp = g.mean(stacked)?;
    if tasks.is_empty() {
        return Ok(BatchTerms {
            ntp,
            emb: BTreeMap::new(),
            total: ntp,
        });
    }
    let tau = b.bind(g, model.tau);
    let d = &model.cfg.distill;
    let mut emb = BTreeMap::new();
    for &task in tasks {
        let targets = items
            .iter()
            .map(|it| {
                let t = &it.targets[task.index()];
                g.constant(t.shape().to_vec(), t.data().iter().map(|&v| T::from_f32(v)).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        for &l in d.layer_sets.get(task) {
            let p = preds
                .iter()
                .map(|m| {
                    m.get(&(task, l))
                        .copied()
                        .ok_or_else(|| Error::invalid(format!("missing prediction for {task} at layer {l}")))
                })
                .collect::<Result<Vec<_>>>()?;
            emb.insert((task, l), embedding_loss(g, &p, &targets, tau, &d.weights)?);
        }
    }
    let totals: BTreeMap<_, _> = emb.iter().map(|(k, v)| (*k, v.total)).collect();
    let mode: BTreeSet<Task> = tasks.iter().copied().collect();
    let total = stage_loss(g, ntp, &totals, &d.layer_sets, &d.weights, &mode)?;
    Ok(BatchTerms { ntp, emb, total })
}

/// The whole batch objective on one graph. Reference path for gradient checks.
pub fn batch_objective<T: Real>(
    g: &mut Graph<T>,
    b: &mut Binder<'_>,
    model: &MultimodalModel,
    items: &[&Item],
    tasks: &[Task],
) -> Result<BatchTerms> {
    let spec = ForwardSpec {
        tasks: tasks.to_vec(),
        ntp: true,
        taps: BTreeSet::new(),
    };
    let mut ntps = Vec::new();
    let mut preds = Vec::new();
    for it in items {
        let out = model.forward_item(g, b, it, &spec)?;
        ntps.push(out.ntp.expect("ntp requested"));
        preds.push(out.preds);
    }
    batch_loss(g, b, model, &ntps, &preds, items, tasks)
}

/// Loss values of one step, keyed as in the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLosses {
    pub ntp: f64,
    /// `emb.<task>.l<layer>` → weighted embedding loss.
    pub emb: BTreeMap<String, f64>,
    pub total: f64,
}

fn emb_key(task: Task, layer: usize) -> String {
    format!("emb.{task}.l{layer}")
}

/// Loss values and summed parameter gradients for one batch.
pub fn compute_step(
    model: &MultimodalModel,
    items: &[&Item],
    tasks: &[Task],
) -> Result<(StepLosses, Vec<(ParamId, Vec<f32>)>)> {
    let spec = ForwardSpec {
        tasks: tasks.to_vec(),
        ntp: true,
        taps: BTreeSet::new(),
    };
    let store = &model.store;
    let mut item_graphs = items
        .par_iter()
        .map(|it| {
            let mut g = Graph::<f32>::new();
            let mut b = Binder::new(store);
            let out = model.forward_item(&mut g, &mut b, it, &spec)?;
            Ok((g, b, out.ntp.expect("ntp requested"), out.preds))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut g = Graph::<f32>::new();
    let mut b = Binder::new(store);
    let mut ntp_leaves = Vec::new();
    let mut pred_leaves = Vec::new();
    for (ig, _, ntp, preds) in &item_graphs {
        ntp_leaves.push(g.variable(vec![1], ig.value(*ntp).to_vec())?);
        let mut m = BTreeMap::new();
        for (k, &p) in preds {
            m.insert(*k, g.variable(ig.shape(p).to_vec(), ig.value(p).to_vec())?);
        }
        pred_leaves.push(m);
    }
    let terms = batch_loss(&mut g, &mut b, model, &ntp_leaves, &pred_leaves, items, tasks)?;
    let losses = StepLosses {
        ntp: g.scalar(terms.ntp) as f64,
        emb: terms
            .emb
            .iter()
            .map(|((t, l), e)| (emb_key(*t, *l), g.scalar(e.total) as f64))
            .collect(),
        total: g.scalar(terms.total) as f64,
    };
    if !losses.total.is_finite() {
        return Ok((losses, Vec::new()));
    }
    let grads = g.backward(terms.total)?;
    let batch_grads = b.collect(&g, &grads);
    let ntp_coef: Vec<f32> = ntp_leaves.iter().map(|&v| grads.get(v).map_or(0.0, |x| x[0])).collect();
    let pred_coef: Vec<BTreeMap<(Task, usize), Vec<f32>>> = pred_leaves
        .iter()
        .map(|m| {
            m.iter()
                .filter_map(|(k, &v)| grads.get(v).map(|x| (*k, x.to_vec())))
                .collect()
        })
        .collect();

    let per_item = item_graphs
        .par_iter_mut()
        .zip(ntp_coef.par_iter().zip(pred_coef.par_iter()))
        .map(|((ig, ib, ntp, preds), (&c, pc))| {
            let mut root = ig.scale(*ntp, c as f64)?;
            for (k, gp) in pc {
                let p = preds[k];
                let shape = ig.shape(p).to_vec();
                let gc = ig.constant(shape, gp.clone())?;
                let prod = ig.mul(p, gc)?;
                let s = ig.sum(prod)?;
                root = ig.add(root, s)?;
            }
            let gr = ig.backward(root)?;
            Ok(ib.collect(ig, &gr))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut acc: BTreeMap<ParamId, Vec<f32>> = BTreeMap::new();
    for (id, gr) in per_item.into_iter().flatten().chain(batch_grads) {
        match acc.get_mut(&id) {
            Some(a) => a.iter_mut().zip(&gr).for_each(|(x, y)| *x += y),
            None => {
                acc.insert(id, gr);
            }
        }
    }
    Ok((losses, acc.into_iter().collect()))
}

/// One metrics-log record.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub stage: Stage,
    pub losses: StepLosses,
}

impl StepRecord {
    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("step".into(), self.step.into());
        m.insert("stage".into(), self.stage.name().into());
        m.insert("ntp".into(), self.losses.ntp.into());
        for (k, v) in &self.losses.emb {
            m.insert(k.clone(), (*v).into());
        }
        m.insert("total".into(), self.losses.total.into());
        Value::Object(m)
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let bad = |d: &str| Error::Format {
            what: "metrics record",
            detail: d.to_string(),
        };
        let o = v.as_object().ok_or_else(|| bad("not an object"))?;
        let num = |k: &str| o.get(k).and_then(Value::as_f64).ok_or_else(|| bad(&format!("missing `{k}`")));
        let stage: Stage = serde_json::from_value(o.get("stage").cloned().ok_or_else(|| bad("missing `stage`"))?)?;
        let emb = o
            .iter()
            .filter(|(k, _)| k.starts_with("emb."))
            .map(|(k, v)| Ok((k.clone(), v.as_f64().ok_or_else(|| bad(k))?)))
            .collect::<Result<_>>()?;
        Ok(StepRecord {
            step: o.get("step").and_then(Value::as_u64).ok_or_else(|| bad("missing `step`"))?,
            stage,
            losses: StepLosses {
                ntp: num("ntp")?,
                emb,
                total: num("total")?,
            },
        })
    }
}

/// Reads a metrics JSONL file.
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| StepRecord::from_json(&serde_json::from_str(l)?))
        .collect()
}

/// Progress through the configured stages; everything needed to resume.
#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    pub seed: u64,
    pub stage_index: usize,
    /// Optimizer steps taken in the current stage.
    pub step: u64,
    pub epoch: usize,
    /// Batches already consumed in `epoch`.
    pub cursor: usize,
    pub stage_complete: bool,
    pub optimizer: Adam,
}

impl RunState {
    pub fn new(seed: u64) -> Self {
        RunState {
            seed,
            stage_index: 0,
            step: 0,
            epoch: 0,
            cursor: 0,
            stage_complete: false,
            optimizer: Adam::new(0.0),
        }
    }
}

fn epoch_seed(seed: u64, stage_index: usize, epoch: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ ((stage_index as u64) << 32) ^ epoch as u64
}

/// Builds caption items for every scene of `manifest`.
pub fn build_items(bank: &EncoderBank, manifest: &DatasetManifest, query: &[usize]) -> Result<Vec<Item>> {
    (0..manifest.item_count)
        .into_par_iter()
        .map(|i| Item::from_scene(bank, &manifest.scene(i)?, query))
        .collect()
}

pub struct Trainer {
    pub model: MultimodalModel,
    pub bank: EncoderBank,
    pub state: RunState,
    items: BTreeMap<String, Arc<Vec<Item>>>,
}

/// How a call to [`Trainer::run_stage`] ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageExit {
    Complete,
    /// Stopped at the caller's step limit; the stage can be resumed.
    Paused,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let model = MultimodalModel::new(cfg)?;
        Self::with_model(model, RunState::new(cfg.seed))
    }

    pub fn with_model(model: MultimodalModel, state: RunState) -> Result<Self> {
        let bank = EncoderBank::new(&model.cfg.encoders, model.cfg.data.generation.canvas)?;
        Ok(Trainer {
            model,
            bank,
            state,
            items: BTreeMap::new(),
        })
    }

    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let (model, state) = load_checkpoint(path)?;
        Self::with_model(model, state)
    }

    pub fn cfg(&self) -> &RunConfig {
        &self.model.cfg
    }

    /// Caption items for `manifest`, cached by fingerprint.
    pub fn items(&mut self, manifest: &DatasetManifest) -> Result<Arc<Vec<Item>>> {
        let key = manifest.fingerprint();
        if let Some(v) = self.items.get(&key) {
            return Ok(v.clone());
        }
        let v = Arc::new(build_items(&self.bank, manifest, &caption_query())?);
        self.items.insert(key, v.clone());
        Ok(v)
    }

    fn begin_stage(&mut self, index: usize, stage: &StageConfig) {
        self.state.stage_index = index;
        self.state.step = 0;
        self.state.epoch = 0;
        self.state.cursor = 0;
        self.state.stage_complete = false;
        self.state.optimizer = Adam::new(stage.lr());
        if stage.stage == Stage::Pt {
            self.model.untie_snapshot();
        }
    }

    /// Runs (or resumes) stage `index` of the config on `data`.
    ///
    /// `stop_after` pauses once the stage has taken that many steps. Every
    /// record is passed to `log` before the next step starts.
    pub fn run_stage(
        &mut self,
        index: usize,
        data: &DatasetManifest,
        stop_after: Option<u64>,
        log: &mut dyn FnMut(&StepRecord) -> Result<()>,
    ) -> Result<StageExit> {
        let stage = self
            .cfg()
            .stages
            .get(index)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("no stage {index}")))?
            .normalized();
        data.validate()?;
        let resuming = self.state.stage_index == index
            && !self.state.stage_complete
            && (self.state.step > 0 || self.state.epoch > 0);
        if !resuming {
            self.begin_stage(index, &stage);
        }
        if stage.stage != Stage::Pt {
            self.model.snapshot_specials()?;
        }
        apply_trainable(&stage, &mut self.model)?;
        let tasks = stage_tasks(self.cfg(), &stage);
        let items = self.items(data)?;
        let bs = stage.batch_size().min(data.item_count);
        let limit = stage.max_steps.map(|m| m as u64);
        while self.state.epoch < stage.epochs() {
            let batches = iterate_batches(data, bs, epoch_seed(self.state.seed, index, self.state.epoch))?;
            while self.state.cursor < batches.len() {
                if limit.is_some_and(|m| self.state.step >= m) {
                    return self.finish_stage(&stage);
                }
                if stop_after.is_some_and(|m| self.state.step >= m) {
                    return Ok(StageExit::Paused);
                }
                let batch: Vec<&Item> = batches[self.state.cursor].iter().map(|&i| &items[i]).collect();
                let (losses, grads) = compute_step(&self.model, &batch, &tasks)?;
                if !losses.total.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step: self.state.step,
                        last_good: None,
                    });
                }
                self.state.optimizer.step(&mut self.model.store, &grads)?;
                log(&StepRecord {
                    step: self.state.step,
                    stage: stage.stage,
                    losses,
                })?;
                self.state.step += 1;
                self.state.cursor += 1;
            }
            self.state.epoch += 1;
            self.state.cursor = 0;
        }
        self.finish_stage(&stage)
    }

    fn finish_stage(&mut self, stage: &StageConfig) -> Result<StageExit> {
        if stage.stage == Stage::Pt {
            self.model.snapshot_specials()?;
        }
        self.state.stage_complete = true;
        Ok(StageExit::Complete)
    }

    /// Runs every remaining stage, writing `metrics.jsonl` and one checkpoint
    /// per stage under `out`. Returns the checkpoint paths.
    pub fn run_all(&mut self, out: &Path) -> Result<Vec<PathBuf>> {
        let ckdir = out.join("checkpoints");
        fs::create_dir_all(&ckdir).map_err(|e| Error::io(&ckdir, e))?;
        let mpath = out.join("metrics.jsonl");
        let mut metrics = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&mpath)
            .map_err(|e| Error::io(&mpath, e))?;
        let mut written = Vec::new();
        let mut last_good: Option<PathBuf> = None;
        let first = if self.state.stage_complete {
            self.state.stage_index + 1
        } else {
            self.state.stage_index
        };
        for idx in 0..first.min(self.cfg().stages.len()) {
            let p = checkpoint_path(out, idx, self.cfg().stages[idx].stage);
            if p.exists() {
                last_good = Some(p);
            }
        }
        for idx in first..self.cfg().stages.len() {
            let stage = self.cfg().stages[idx].stage;
            let data = self.cfg().manifest(Split::Stage(stage));
            let mut sink = |r: &StepRecord| -> Result<()> {
                let line = serde_json::to_string(&r.to_json())?;
                writeln!(metrics, "{line}").map_err(|e| Error::io(&mpath, e))
            };
            match self.run_stage(idx, &data, None, &mut sink) {
                Ok(_) => {}
                Err(Error::NonFiniteLoss { step, .. }) => {
                    return Err(Error::NonFiniteLoss { step, last_good });
                }
                Err(e) => return Err(e),
            }
            let p = checkpoint_path(out, idx, stage);
            save_checkpoint(&self.model, &self.state, &p)?;
            last_good = Some(p.clone());
            written.push(p);
        }
        Ok(written)
    }
}

pub fn checkpoint_path(out: &Path, index: usize, stage: Stage) -> PathBuf {
    out.join("checkpoints").join(format!("stage{index}_{}.edck", stage.name()))
}

const CK_MAGIC: &[u8; 4] = b"EDCK";
const CK_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    config: RunConfig,
    seed: u64,
    stage_index: usize,
    step: u64,
    epoch: usize,
    cursor: usize,
    stage_complete: bool,
    snapshotted: bool,
    lr: f64,
    adam_t: u64,
}

/// Writes `EDCK`, version (u32), metadata length (u64) and JSON, tensor count
/// (u32), then per tensor a name length (u32), the name and an `EDT1` blob.
/// Parameters come first in registration order, then optimizer moments.
pub fn save_checkpoint(model: &MultimodalModel, state: &RunState, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        config: model.cfg.clone(),
        seed: state.seed,
        stage_index: state.stage_index,
        step: state.step,
        epoch: state.epoch,
        cursor: state.cursor,
        stage_complete: state.stage_complete,
        snapshotted: model.snapshotted,
        lr: state.optimizer.lr,
        adam_t: state.optimizer.t,
    };
    let json = serde_json::to_vec(&meta)?;
    let mut tensors: Vec<(String, Tensor)> = model
        .store
        .iter()
        .map(|(_, n, t)| (n.to_string(), t.clone()))
        .collect();
    tensors.extend(state.optimizer.export()?);
    let mut out = Vec::new();
    out.extend_from_slice(CK_MAGIC);
    out.extend_from_slice(&CK_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (n, t) in &tensors {
        out.extend_from_slice(&(n.len() as u32).to_le_bytes());
        out.extend_from_slice(n.as_bytes());
        out.extend_from_slice(&t.to_bytes());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Format {
                what: "checkpoint",
                detail: "truncated".into(),
            });
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(MultimodalModel, RunState)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt = |d: String| Error::Format {
        what: "checkpoint",
        detail: d,
    };
    let mut r = Reader { buf: &bytes };
    if r.take(4)? != CK_MAGIC {
        return Err(fmt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CK_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let len = r.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(len)?).map_err(|e| fmt(format!("metadata: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| fmt(e.to_string()))?;
        let t = Tensor::read_from(&mut r.buf)?;
        tensors.push((name, t));
    }
    if !r.buf.is_empty() {
        return Err(fmt(format!("{} trailing bytes", r.buf.len())));
    }
    let mut model = MultimodalModel::new(&meta.config)?;
    let n_params = model.store.len();
    if tensors.len() < n_params {
        let missing = model.store.name(ParamId(tensors.len())).to_string();
        return Err(Error::ParamMismatch {
            name: missing,
            detail: "absent from checkpoint".into(),
        });
    }
    let ids: Vec<ParamId> = model.store.ids().collect();
    for (id, (name, t)) in ids.into_iter().zip(&tensors) {
        let expect = model.store.name(id).to_string();
        if *name != expect {
            return Err(Error::ParamMismatch {
                name: name.clone(),
                detail: format!("expected `{expect}` at this position"),
            });
        }
        let dst = model.store.get_mut(id);
        if dst.shape() != t.shape() {
            return Err(Error::ParamMismatch {
                name: name.clone(),
                detail: format!("shape {:?} vs model {:?}", t.shape(), dst.shape()),
            });
        }
        dst.data_mut().copy_from_slice(t.data());
    }
    let rest: BTreeMap<String, Tensor> = tensors.into_iter().skip(n_params).collect();
    if let Some(bad) = rest.keys().find(|k| !k.starts_with("opt.")) {
        return Err(Error::ParamMismatch {
            name: bad.clone(),
            detail: "unknown tensor".into(),
        });
    }
    model.snapshotted = meta.snapshotted;
    let state = RunState {
        seed: meta.seed,
        stage_index: meta.stage_index,
        step: meta.step,
        epoch: meta.epoch,
        cursor: meta.cursor,
        stage_complete: meta.stage_complete,
        optimizer: Adam::import(meta.lr, meta.adam_t, &rest)?,
    };
    Ok((model, state))
}
