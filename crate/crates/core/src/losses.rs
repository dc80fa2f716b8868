//! Smooth-L1, InfoNCE with learnable temperature, and the stage objective
//! `L = L_ntp + Σ_task λ_task Σ_{l ∈ set(task)} L_emb(task, l)`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Real, Var};
use crate::encoders::Task;
use crate::error::{Error, Result};

pub const TAU_INIT: f32 = 2.0;
pub const TAU_MIN: f32 = 0.05;
pub const TAU_MAX: f32 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub smooth_l1: f64,
    pub contrastive: f64,
    pub depth: f64,
    pub seg: f64,
    pub gen: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            smooth_l1: 1.0,
            contrastive: 0.3,
            depth: 0.5,
            seg: 0.5,
            gen: 0.5,
        }
    }
}

impl LossWeights {
    pub fn task(&self, t: Task) -> f64 {
        match t {
            Task::Depth => self.depth,
            Task::Seg => self.seg,
            Task::Gen => self.gen,
        }
    }

    pub fn set_tasks(&mut self, v: f64) {
        self.depth = v;
        self.seg = v;
        self.gen = v;
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.smooth_l1, self.contrastive, self.depth, self.seg, self.gen];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid(format!("loss weights must be finite and ≥ 0: {self:?}")));
        }
        Ok(())
    }
}

/// Tap layers carrying an embedding loss, per task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSets {
    pub depth: BTreeSet<usize>,
    pub seg: BTreeSet<usize>,
    pub gen: BTreeSet<usize>,
}

impl Default for LayerSets {
    fn default() -> Self {
        LayerSets {
            depth: [2, 5].into(),
            seg: [2, 4].into(),
            gen: [3, 5].into(),
        }
    }
}

impl LayerSets {
    pub fn get(&self, t: Task) -> &BTreeSet<usize> {
        match t {
            Task::Depth => &self.depth,
            Task::Seg => &self.seg,
            Task::Gen => &self.gen,
        }
    }

    pub fn union(&self) -> BTreeSet<usize> {
        self.depth.iter().chain(&self.seg).chain(&self.gen).copied().collect()
    }

    /// Every (task, layer) pair in task then layer order.
    pub fn pairs(&self) -> Vec<(Task, usize)> {
        Task::ALL
            .iter()
            .flat_map(|&t| self.get(t).iter().map(move |&l| (t, l)))
            .collect()
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        for t in Task::ALL {
            if self.get(t).is_empty() {
                return Err(Error::invalid(format!("layer set for {t} is empty")));
            }
            if let Some(&l) = self.get(t).iter().find(|&&l| l >= n_layers) {
                return Err(Error::invalid(format!(
                    "{t} layer {l} outside a {n_layers}-layer model"
                )));
            }
        }
        Ok(())
    }
}

/// Mean over all elements of the piecewise smooth-L1 of `p − t`.
pub fn smooth_l1<T: Real>(g: &mut Graph<T>, p: Var, t: Var) -> Result<Var> {
    if g.shape(p) != g.shape(t) {
        return Err(Error::shape(
            "smooth_l1",
            format!("{:?} vs {:?}", g.shape(p), g.shape(t)),
        ));
    }
    let d = g.sub(p, t)?;
    let e = g.smooth_l1_elementwise(d)?;
    g.mean(e)
}

fn flatten_rows<T: Real>(g: &mut Graph<T>, items: &[Var]) -> Result<Var> {
    let n: usize = g.shape(items[0]).iter().product();
    let rows = items
        .iter()
        .map(|&v| {
            let m: usize = g.shape(v).iter().product();
            if m != n {
                return Err(Error::shape("info_nce", format!("item sizes {n} and {m} differ")));
            }
            g.reshape(v, vec![1, n])
        })
        .collect::<Result<Vec<_>>>()?;
    g.concat(&rows, 0)
}

/// `−1/B Σ_i log softmax_j(cos(p_i, t_j) / τ)_i`, prediction-anchored only.
pub fn info_nce<T: Real>(g: &mut Graph<T>, preds: &[Var], targets: &[Var], tau: Var) -> Result<Var> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::invalid(format!(
            "info_nce needs matching non-empty batches, got {} and {}",
            preds.len(),
            targets.len()
        )));
    }
    if g.shape(tau).iter().product::<usize>() != 1 {
        return Err(Error::shape("info_nce", format!("tau must be scalar, got {:?}", g.shape(tau))));
    }
    let b = preds.len();
    let p = flatten_rows(g, preds)?;
    let t = flatten_rows(g, targets)?;
    if g.shape(p) != g.shape(t) {
        return Err(Error::shape("info_nce", format!("{:?} vs {:?}", g.shape(p), g.shape(t))));
    }
    let pn = g.l2_normalize(p)?;
    let tn = g.l2_normalize(t)?;
    let tt = g.transpose(tn)?;
    let sim = g.matmul(pn, tt)?;
    let inv = g.recip(tau)?;
    let logits = g.scale_by(sim, inv)?;
    let logp = g.log_softmax(logits)?;
    let eye = (0..b * b)
        .map(|i| if i / b == i % b { T::one() } else { T::zero() })
        .collect();
    let eye = g.constant(vec![b, b], eye)?;
    let diag = g.mul(logp, eye)?;
    let s = g.sum(diag)?;
    g.scale(s, -1.0 / b as f64)
}

/// Components of one (task, layer) embedding loss.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingLoss {
    pub total: Var,
    pub smooth_l1: Option<Var>,
    pub contrastive: Option<Var>,
}

/// `λ_sL1 · mean_i smoothL1(p_i, t_i) + λ_c · InfoNCE(P, T)` over a batch.
///
/// A component whose weight is zero is not recorded at all.
pub fn embedding_loss<T: Real>(
    g: &mut Graph<T>,
    preds: &[Var],
    targets: &[Var],
    tau: Var,
    weights: &LossWeights,
) -> Result<EmbeddingLoss> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::invalid("embedding loss needs matching non-empty batches"));
    }
    let mut terms = Vec::new();
    let mut sl1 = None;
    let mut nce = None;
    if weights.smooth_l1 != 0.0 {
        let per = preds
            .iter()
            .zip(targets)
            .map(|(&p, &t)| smooth_l1(g, p, t))
            .collect::<Result<Vec<_>>>()?;
        let stacked = g.concat(&per, 0)?;
        let m = g.mean(stacked)?;
        sl1 = Some(m);
        terms.push(g.scale(m, weights.smooth_l1)?);
    }
    if weights.contrastive != 0.0 {
        let c = info_nce(g, preds, targets, tau)?;
        nce = Some(c);
        terms.push(g.scale(c, weights.contrastive)?);
    }
    let total = match terms.as_slice() {
        [] => g.constant(vec![1], vec![T::zero()])?,
        [one] => *one,
        [a, b] => g.add(*a, *b)?,
        _ => unreachable!(),
    };
    Ok(EmbeddingLoss {
        total,
        smooth_l1: sl1,
        contrastive: nce,
    })
}

/// Tasks whose embedding losses enter the objective: in `mode` with λ > 0.
pub fn active_tasks(mode: &BTreeSet<Task>, weights: &LossWeights) -> Vec<Task> {
    Task::ALL
        .into_iter()
        .filter(|t| mode.contains(t) && weights.task(*t) > 0.0)
        .collect()
}

/// `ntp + Σ_task λ_task Σ_{l ∈ set(task)} emb[(task, l)]` over active tasks.
pub fn stage_loss<T: Real>(
    g: &mut Graph<T>,
    ntp: Var,
    per_layer: &BTreeMap<(Task, usize), Var>,
    sets: &LayerSets,
    weights: &LossWeights,
    mode: &BTreeSet<Task>,
) -> Result<Var> {
    let mut total = ntp;
    for task in active_tasks(mode, weights) {
        let mut acc: Option<Var> = None;
        for &l in sets.get(task) {
            let v = *per_layer.get(&(task, l)).ok_or_else(|| {
                Error::invalid(format!("missing embedding loss for {task} at layer {l}"))
            })?;
            acc = Some(match acc {
                None => v,
                Some(a) => g.add(a, v)?,
            });
        }
        let Some(acc) = acc else { continue };
        let w = g.scale(acc, weights.task(task))?;
        total = g.add(total, w)?;
    }
    Ok(total)
}
