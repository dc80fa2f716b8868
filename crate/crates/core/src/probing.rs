//! Layer-wise probing: cache hidden states of a frozen model, fit one
//! resampler probe per (layer, task) with smooth-L1, and report token-wise
//! cosine similarity to the targets.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ProbeConfig, RunConfig, Split};
use crate::diffcore::{Binder, Graph, ParamStore, Tensor};
use crate::encoders::{EncoderBank, Task};
use crate::error::{Error, Result};
use crate::losses::smooth_l1;
use crate::model::{Item, MultimodalModel};
use crate::optim::Adam;
use crate::resampler::{ResamplerBlock, ResamplerConfig};
use crate::synthdata::{probe_query, shuffled_batches, DatasetManifest};

/// Fraction of skipped (zero-norm) tokens above which a result is flagged.
pub const SKIP_FLAG_FRACTION: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreMeta {
    pub model_fingerprint: String,
    pub dataset_fingerprint: String,
    pub query: Vec<usize>,
    pub layers: BTreeSet<usize>,
    pub item_count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct IndexEntry {
    item: usize,
    layer: usize,
    file: String,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    meta: StoreMeta,
    entries: Vec<IndexEntry>,
}

/// Hidden states per (item, layer) plus the fingerprints they were taken under.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationStore {
    pub meta: StoreMeta,
    entries: BTreeMap<(usize, usize), Tensor>,
}

fn probe_item(bank: &EncoderBank, manifest: &DatasetManifest, i: usize, query: &[usize]) -> Result<Item> {
    let scene = manifest.scene(i)?;
    Ok(Item {
        base: bank.base.encode(&scene)?,
        txt_ids: query.to_vec(),
        query_len: query.len(),
        targets: [Task::Depth, Task::Seg, Task::Gen].map(|_| Tensor::scalar(0.0)),
    })
}

impl ActivationStore {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, item: usize, layer: usize) -> Result<&Tensor> {
        self.entries
            .get(&(item, layer))
            .ok_or_else(|| Error::invalid(format!("store has no entry for item {item} at layer {layer}")))
    }

    /// Rejects the store unless it was taken from `model` on `data`.
    pub fn check(&self, model: &MultimodalModel, data: &DatasetManifest) -> Result<()> {
        let fp = model.fingerprint();
        if self.meta.model_fingerprint != fp {
            return Err(Error::Fingerprint {
                what: "model",
                expected: fp,
                found: self.meta.model_fingerprint.clone(),
            });
        }
        let dfp = data.fingerprint();
        if self.meta.dataset_fingerprint != dfp {
            return Err(Error::Fingerprint {
                what: "dataset",
                expected: dfp,
                found: self.meta.dataset_fingerprint.clone(),
            });
        }
        Ok(())
    }

    /// Writes `index.json` and one tensor file per entry. An existing store in
    /// `dir` must describe exactly the same contents.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let ipath = dir.join("index.json");
        if ipath.exists() {
            let old = Self::read_index(dir)?;
            if old.meta != self.meta {
                return Err(Error::Fingerprint {
                    what: "activation store",
                    expected: serde_json::to_string(&self.meta)?,
                    found: serde_json::to_string(&old.meta)?,
                });
            }
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for (&(item, layer), t) in &self.entries {
            let file = format!("{item:06}_l{layer}.edt");
            t.save(&dir.join(&file))?;
            entries.push(IndexEntry {
                item,
                layer,
                file,
                sha256: t.content_hash(),
            });
        }
        let index = Index {
            meta: self.meta.clone(),
            entries,
        };
        fs::write(&ipath, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&ipath, e))
    }

    fn read_index(dir: &Path) -> Result<Index> {
        let ipath = dir.join("index.json");
        let text = fs::read_to_string(&ipath).map_err(|e| Error::io(&ipath, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Loads a store and verifies it against `model` and `data`.
    pub fn open(dir: &Path, model: &MultimodalModel, data: &DatasetManifest) -> Result<Self> {
        let index = Self::read_index(dir)?;
        let mut entries = BTreeMap::new();
        for e in index.entries {
            let t = Tensor::load(&dir.join(&e.file))?;
            if t.content_hash() != e.sha256 {
                return Err(Error::Fingerprint {
                    what: "activation entry",
                    expected: e.sha256,
                    found: t.content_hash(),
                });
            }
            entries.insert((e.item, e.layer), t);
        }
        let store = ActivationStore {
            meta: index.meta,
            entries,
        };
        store.check(model, data)?;
        Ok(store)
    }
}

/// Runs the frozen model on every item with `query` as the only text and keeps
/// the hidden states at `layers`.
pub fn cache_activations(
    model: &MultimodalModel,
    bank: &EncoderBank,
    data: &DatasetManifest,
    layers: &BTreeSet<usize>,
    query: &[usize],
) -> Result<ActivationStore> {
    if layers.is_empty() {
        return Err(Error::invalid("no layers to cache"));
    }
    let per_item = (0..data.item_count)
        .into_par_iter()
        .map(|i| model.hidden_states(&probe_item(bank, data, i, query)?, layers))
        .collect::<Result<Vec<_>>>()?;
    let mut entries = BTreeMap::new();
    for (i, states) in per_item.into_iter().enumerate() {
        for (l, t) in states {
            entries.insert((i, l), t);
        }
    }
    Ok(ActivationStore {
        meta: StoreMeta {
            model_fingerprint: model.fingerprint(),
            dataset_fingerprint: data.fingerprint(),
            query: query.to_vec(),
            layers: layers.clone(),
            item_count: data.item_count,
        },
        entries,
    })
}

/// Target features of every item for one task.
pub fn task_targets(bank: &EncoderBank, data: &DatasetManifest, task: Task) -> Result<Vec<Tensor>> {
    (0..data.item_count)
        .into_par_iter()
        .map(|i| Ok(bank.target(task).encode(&data.scene(i)?)?.values))
        .collect()
}

/// A trained probe head with its own parameters.
#[derive(Clone, Debug)]
pub struct Probe {
    pub layer: usize,
    pub task: Task,
    pub block: ResamplerBlock,
    pub store: ParamStore,
    /// Mean training loss of the last epoch, if any epoch ran.
    pub final_train_loss: Option<f64>,
}

impl Probe {
    pub fn predict(&self, keys: &Tensor) -> Result<Tensor> {
        self.block.resample(&self.store, keys)
    }
}

fn probe_seed(seed: u64, layer: usize, task: Task) -> u64 {
    seed ^ ((layer as u64 + 1) << 8) ^ (task.index() as u64 + 1)
}

/// Fits a fresh probe on the cached states of `layer` with smooth-L1 only.
pub fn train_probe(
    store: &ActivationStore,
    layer: usize,
    task: Task,
    targets: &[Tensor],
    schedule: &ProbeConfig,
    resampler: &ResamplerConfig,
) -> Result<Probe> {
    let n = store.meta.item_count;
    if targets.len() != n {
        return Err(Error::invalid(format!("{} targets for {n} cached items", targets.len())));
    }
    if !store.meta.layers.contains(&layer) {
        return Err(Error::invalid(format!("store does not cover layer {layer}")));
    }
    let key_dim = store.get(0, layer)?.cols();
    let (tokens, dim) = (targets[0].rows(), targets[0].cols());
    let seed = probe_seed(schedule.seed, layer, task);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    let block = ResamplerBlock::register(&mut ps, "probe", tokens, key_dim, dim, true, resampler, &mut rng)?;
    ps.set_trainable(|_| true);
    let mut opt = Adam::new(schedule.lr);
    let mut final_loss = None;
    let bs = schedule.batch_size.min(n);
    for epoch in 0..schedule.epochs {
        let batches = shuffled_batches(n, bs, seed.wrapping_add(epoch as u64))?;
        let mut sum = 0.0;
        for batch in &batches {
            let scale = 1.0 / batch.len() as f64;
            let per = batch
                .par_iter()
                .map(|&i| {
                    let mut g = Graph::<f32>::new();
                    let mut b = Binder::new(&ps);
                    let keys = g.leaf(store.get(i, layer)?, false);
                    let lat = block.own_latents(&mut g, &mut b)?;
                    let y = block.forward(&mut g, &mut b, lat, keys)?;
                    let t = g.leaf(&targets[i], false);
                    let l = smooth_l1(&mut g, y, t)?;
                    let root = g.scale(l, scale)?;
                    let gr = g.backward(root)?;
                    Ok((g.scalar(l) as f64, b.collect(&g, &gr)))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut acc: BTreeMap<_, Vec<f32>> = BTreeMap::new();
            for (l, grads) in per {
                sum += l;
                for (id, gr) in grads {
                    match acc.get_mut(&id) {
                        Some(a) => a.iter_mut().zip(&gr).for_each(|(x, y)| *x += y),
                        None => {
                            acc.insert(id, gr);
                        }
                    }
                }
            }
            let grads: Vec<_> = acc.into_iter().collect();
            opt.step_with_clip(&mut ps, &grads, None)?;
        }
        final_loss = Some(sum / n as f64);
    }
    Ok(Probe {
        layer,
        task,
        block,
        store: ps,
        final_train_loss: final_loss,
    })
}

/// Mean token-wise cosine between predictions and targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSummary {
    pub cosine: f64,
    pub items: usize,
    /// Tokens left out because a row had zero norm.
    pub skipped: usize,
    pub flagged: bool,
}

/// Cosine per target token, averaged over tokens then items. Zero-norm rows
/// are skipped and counted; an item with every token skipped is dropped.
pub fn mean_token_cosine(preds: &[Tensor], targets: &[Tensor]) -> Result<CosineSummary> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::invalid("cosine needs matching non-empty sets"));
    }
    let mut total = 0.0;
    let mut items = 0;
    let mut skipped = 0;
    let mut tokens = 0;
    for (p, t) in preds.iter().zip(targets) {
        if p.shape() != t.shape() {
            return Err(Error::shape("cosine", format!("{:?} vs {:?}", p.shape(), t.shape())));
        }
        let mut s = 0.0;
        let mut k = 0;
        for r in 0..t.rows() {
            tokens += 1;
            let (a, b) = (p.row(r), t.row(r));
            let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
            let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                skipped += 1;
                continue;
            }
            s += (dot / (na * nb)).clamp(-1.0, 1.0);
            k += 1;
        }
        if k > 0 {
            total += s / k as f64;
            items += 1;
        }
    }
    Ok(CosineSummary {
        cosine: if items > 0 { total / items as f64 } else { 0.0 },
        items,
        skipped,
        flagged: skipped as f64 > SKIP_FLAG_FRACTION * tokens as f64,
    })
}

pub fn eval_probe(probe: &Probe, store: &ActivationStore, targets: &[Tensor]) -> Result<CosineSummary> {
    if targets.len() != store.meta.item_count {
        return Err(Error::invalid("targets do not cover the store"));
    }
    let preds = (0..targets.len())
        .into_par_iter()
        .map(|i| probe.predict(store.get(i, probe.layer)?))
        .collect::<Result<Vec<_>>>()?;
    mean_token_cosine(&preds, targets)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub layer: usize,
    pub task: Task,
    pub cosine: f64,
    pub n: usize,
    pub flagged: bool,
    pub final_train_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub model_fingerprint: String,
    pub config_hash: String,
    pub rows: Vec<ProbeRow>,
}

impl ProbeReport {
    /// Layer with the highest cosine for each task; ties go to the lower layer.
    pub fn argmax(&self) -> BTreeMap<Task, usize> {
        let mut best: BTreeMap<Task, (usize, f64)> = BTreeMap::new();
        for r in &self.rows {
            let e = best.entry(r.task).or_insert((r.layer, r.cosine));
            if r.cosine > e.1 || (r.cosine == e.1 && r.layer < e.0) {
                *e = (r.layer, r.cosine);
            }
        }
        best.into_iter().map(|(t, (l, _))| (t, l)).collect()
    }

    /// Mean cosine of `task` over `layers`.
    pub fn mean_cosine(&self, task: Task, layers: &BTreeSet<usize>) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.task == task && layers.contains(&r.layer))
            .map(|r| r.cosine)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("layer,task,cosine,n\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{:.8},{}\n", r.layer, r.task, r.cosine, r.n));
        }
        s
    }

    pub fn summary(&self) -> serde_json::Value {
        let argmax: BTreeMap<String, usize> = self.argmax().into_iter().map(|(t, l)| (t.to_string(), l)).collect();
        serde_json::json!({
            "model_fingerprint": self.model_fingerprint,
            "config_hash": self.config_hash,
            "rows": self.rows.len(),
            "argmax_layer": argmax,
            "flagged": self.rows.iter().filter(|r| r.flagged).map(|r| format!("{}.l{}", r.task, r.layer)).collect::<Vec<_>>(),
        })
    }

    /// Parses a report CSV back into (layer, task, cosine, n) rows.
    pub fn parse_csv(text: &str) -> Result<Vec<(usize, Task, f64, usize)>> {
        let bad = |d: String| Error::Format { what: "report csv", detail: d };
        let mut lines = text.lines();
        if lines.next() != Some("layer,task,cosine,n") {
            return Err(bad("missing header".into()));
        }
        lines
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 4 {
                    return Err(bad(format!("row `{l}`")));
                }
                let task = Task::ALL
                    .into_iter()
                    .find(|t| t.name() == f[1])
                    .ok_or_else(|| bad(format!("task `{}`", f[1])))?;
                Ok((
                    f[0].parse().map_err(|_| bad(format!("layer `{}`", f[0])))?,
                    task,
                    f[2].parse().map_err(|_| bad(format!("cosine `{}`", f[2])))?,
                    f[3].parse().map_err(|_| bad(format!("n `{}`", f[3])))?,
                ))
            })
            .collect()
    }
}

/// Writes `report.csv` and `summary.json` into `dir`.
pub fn emit_report(report: &ProbeReport, dir: &Path) -> Result<()> {
    if report.rows.is_empty() {
        return Err(Error::invalid("report has no rows"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let c = dir.join("report.csv");
    fs::write(&c, report.csv()).map_err(|e| Error::io(&c, e))?;
    let s = dir.join("summary.json");
    let mut text = serde_json::to_string_pretty(&report.summary())?;
    text.push('\n');
    fs::write(&s, text).map_err(|e| Error::io(&s, e))
}

/// The full protocol on one model: cache train/eval activations, fit and
/// score one probe per (layer, task). Layers and tasks default to the config's
/// probe section. With `cache_dir`, stores are also written under
/// `cache_dir/{train,eval}`.
pub fn probe_model(
    model: &MultimodalModel,
    cfg: &RunConfig,
    layers: Option<&BTreeSet<usize>>,
    cache_dir: Option<&Path>,
) -> Result<ProbeReport> {
    let bank = EncoderBank::new(&cfg.encoders, cfg.data.generation.canvas)?;
    let layers: BTreeSet<usize> = match (layers, &cfg.probe.layers) {
        (Some(l), _) => l.clone(),
        (None, Some(l)) => l.clone(),
        (None, None) => (0..cfg.model.n_layers).collect(),
    };
    let query = probe_query();
    let train_m = cfg.manifest(Split::ProbeTrain);
    let eval_m = cfg.manifest(Split::ProbeEval);
    let train = cache_activations(model, &bank, &train_m, &layers, &query)?;
    let eval = cache_activations(model, &bank, &eval_m, &layers, &query)?;
    if let Some(dir) = cache_dir {
        train.write(&dir.join("train"))?;
        eval.write(&dir.join("eval"))?;
    }
    let tasks: Vec<Task> = cfg.probe.tasks.iter().copied().collect();
    let pairs: Vec<(usize, Task)> = layers.iter().flat_map(|&l| tasks.iter().map(move |&t| (l, t))).collect();
    probe_cached(model, cfg, &bank, &train, &eval, &pairs)
}

/// Each task probed at the layers of its own distillation set.
pub fn tapped_pairs(cfg: &RunConfig) -> Vec<(usize, Task)> {
    cfg.distill.layer_sets.pairs().into_iter().map(|(t, l)| (l, t)).collect()
}

/// Fits and scores one probe per `(layer, task)` on pre-cached stores.
pub fn probe_cached(
    model: &MultimodalModel,
    cfg: &RunConfig,
    bank: &EncoderBank,
    train: &ActivationStore,
    eval: &ActivationStore,
    pairs: &[(usize, Task)],
) -> Result<ProbeReport> {
    let train_m = cfg.manifest(Split::ProbeTrain);
    let eval_m = cfg.manifest(Split::ProbeEval);
    train.check(model, &train_m)?;
    eval.check(model, &eval_m)?;
    let tasks: BTreeSet<Task> = pairs.iter().map(|p| p.1).collect();
    let targets: BTreeMap<Task, (Vec<Tensor>, Vec<Tensor>)> = tasks
        .iter()
        .map(|&t| Ok((t, (task_targets(bank, &train_m, t)?, task_targets(bank, &eval_m, t)?))))
        .collect::<Result<_>>()?;
    let rows = pairs
        .par_iter()
        .map(|&(l, t)| {
            let (tr, ev) = &targets[&t];
            let probe = train_probe(train, l, t, tr, &cfg.probe, &cfg.resampler)?;
            let s = eval_probe(&probe, eval, ev)?;
            Ok(ProbeRow {
                layer: l,
                task: t,
                cosine: s.cosine,
                n: s.items,
                flagged: s.flagged,
                final_train_loss: probe.final_train_loss,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeReport {
        model_fingerprint: model.fingerprint(),
        config_hash: cfg.hash(),
        rows,
    })
}
