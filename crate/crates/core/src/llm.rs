//! Toy pre-norm decoder-only transformer with per-layer taps.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Binder, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::sequence::{gather_rows_var, Layout, TokenSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub vocab: usize,
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 8,
            hidden: 64,
            heads: 4,
            ffn_mult: 4,
            vocab: crate::synthdata::vocab_len(),
            max_positions: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.hidden == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return Err(Error::invalid("model sizes must be positive"));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.vocab < 2 || self.max_positions == 0 {
            return Err(Error::invalid("vocab must be ≥ 2 and max_positions ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct BlockParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Parameter handles of the language model inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Llm {
    pub cfg: ModelConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    blocks: Vec<BlockParams>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

/// Hidden states after each requested block, keyed by layer index.
pub type LayerTaps<V> = BTreeMap<usize, V>;

/// Multi-head attention of `q` over `k`/`v`, all already projected.
///
/// `mask`, when given, is added to every head's score matrix.
pub(crate) fn attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let d = g.shape(q)[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (a, b) = (h * dh, (h + 1) * dh);
        let qh = g.slice(q, 1, a, b)?;
        let kh = g.slice(k, 1, a, b)?;
        let vh = g.slice(v, 1, a, b)?;
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let mut s = g.scale(s, scale)?;
        if let Some(m) = mask {
            s = g.add(s, m)?;
        }
        let p = g.softmax(s)?;
        outs.push(g.matmul(p, vh)?);
    }
    g.concat(&outs, 1)
}

/// Additive causal mask: 0 on and below the diagonal, −1e9 above.
pub fn causal_mask<T: Real>(g: &mut Graph<T>, len: usize) -> Result<Var> {
    let big = T::from_f64(-1e9);
    let v = (0..len * len)
        .map(|i| if i % len > i / len { big } else { T::zero() })
        .collect();
    g.constant(vec![len, len], v)
}

impl Llm {
    pub fn register<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (h, f) = (cfg.hidden, cfg.hidden * cfg.ffn_mult);
        let std_h = (1.0 / h as f32).sqrt();
        let std_f = (1.0 / f as f32).sqrt();
        let resid = 1.0 / (2.0 * cfg.n_layers as f32).sqrt();
        let tok_emb = store.insert_normal("llm.tok_emb", &[cfg.vocab, h], 1.0, rng)?;
        let pos_emb = store.insert_normal("llm.pos_emb", &[cfg.max_positions, h], 0.3, rng)?;
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("llm.blocks.{l}.{s}");
            blocks.push(BlockParams {
                ln1_g: store.insert_full(p("ln1_g"), &[h], 1.0)?,
                ln1_b: store.insert_full(p("ln1_b"), &[h], 0.0)?,
                wq: store.insert_normal(p("wq"), &[h, h], std_h, rng)?,
                wk: store.insert_normal(p("wk"), &[h, h], std_h, rng)?,
                wv: store.insert_normal(p("wv"), &[h, h], std_h, rng)?,
                wo: store.insert_normal(p("wo"), &[h, h], std_h * resid, rng)?,
                bo: store.insert_full(p("bo"), &[h], 0.0)?,
                ln2_g: store.insert_full(p("ln2_g"), &[h], 1.0)?,
                ln2_b: store.insert_full(p("ln2_b"), &[h], 0.0)?,
                w1: store.insert_normal(p("w1"), &[h, f], std_h, rng)?,
                b1: store.insert_full(p("b1"), &[f], 0.0)?,
                w2: store.insert_normal(p("w2"), &[f, h], std_f * resid, rng)?,
                b2: store.insert_full(p("b2"), &[h], 0.0)?,
            });
        }
        Ok(Llm {
            cfg: cfg.clone(),
            tok_emb,
            pos_emb,
            blocks,
            lnf_g: store.insert_full("llm.lnf_g", &[h], 1.0)?,
            lnf_b: store.insert_full("llm.lnf_b", &[h], 0.0)?,
            head_w: store.insert_normal("llm.head_w", &[h, cfg.vocab], std_h, rng)?,
            head_b: store.insert_full("llm.head_b", &[cfg.vocab], 0.0)?,
        })
    }

    /// Token embeddings for `ids`, without positions.
    pub fn embed<T: Real>(&self, g: &mut Graph<T>, b: &mut Binder<'_>, ids: &[usize]) -> Result<Var> {
        let table = b.bind(g, self.tok_emb);
        g.embedding(table, ids)
    }

    fn block<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<'_>,
        p: &BlockParams,
        x: Var,
        mask: Var,
    ) -> Result<Var> {
        let (g1, b1) = (b.bind(g, p.ln1_g), b.bind(g, p.ln1_b));
        let h = g.layer_norm(x, g1, b1)?;
        let (wq, wk, wv) = (b.bind(g, p.wq), b.bind(g, p.wk), b.bind(g, p.wv));
        let q = g.matmul(h, wq)?;
        let k = g.matmul(h, wk)?;
        let v = g.matmul(h, wv)?;
        let a = attention(g, q, k, v, self.cfg.heads, Some(mask))?;
        let (wo, bo) = (b.bind(g, p.wo), b.bind(g, p.bo));
        let a = g.linear(a, wo, bo)?;
        let x = g.add(x, a)?;
        let (g2, b2) = (b.bind(g, p.ln2_g), b.bind(g, p.ln2_b));
        let h = g.layer_norm(x, g2, b2)?;
        let (w1, bb1, w2, bb2) = (b.bind(g, p.w1), b.bind(g, p.b1), b.bind(g, p.w2), b.bind(g, p.b2));
        let f = g.linear(h, w1, bb1)?;
        let f = g.gelu(f)?;
        let f = g.linear(f, w2, bb2)?;
        g.add(x, f)
    }

    /// Runs the blocks over input embeddings `x` (length × hidden).
    ///
    /// Positions are added here. Returns logits when `with_logits`, else stops
    /// after the deepest requested tap.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<'_>,
        x: Var,
        taps: &BTreeSet<usize>,
        with_logits: bool,
    ) -> Result<(Option<Var>, LayerTaps<Var>)> {
        if let Some(&bad) = taps.iter().find(|&&l| l >= self.cfg.n_layers) {
            return Err(Error::invalid(format!(
                "tap layer {bad} outside a {}-layer model",
                self.cfg.n_layers
            )));
        }
        let (len, d) = match g.shape(x) {
            [l, d] => (*l, *d),
            s => return Err(Error::shape("forward", format!("input must be rank 2, got {s:?}"))),
        };
        if d != self.cfg.hidden {
            return Err(Error::shape("forward", format!("input width {d}, hidden {}", self.cfg.hidden)));
        }
        if len > self.cfg.max_positions {
            return Err(Error::invalid(format!(
                "sequence length {len} exceeds max positions {}",
                self.cfg.max_positions
            )));
        }
        let pos = b.bind(g, self.pos_emb);
        let pos = g.slice(pos, 0, 0, len)?;
        let mut h = g.add(x, pos)?;
        let mask = causal_mask(g, len)?;
        let depth = if with_logits {
            self.cfg.n_layers
        } else {
            taps.iter().next_back().map_or(0, |l| l + 1)
        };
        let mut out = LayerTaps::new();
        for l in 0..depth {
            h = self.block(g, b, &self.blocks[l], h, mask)?;
            if taps.contains(&l) {
                out.insert(l, h);
            }
        }
        if !with_logits {
            return Ok((None, out));
        }
        let (fg, fb) = (b.bind(g, self.lnf_g), b.bind(g, self.lnf_b));
        let h = g.layer_norm(h, fg, fb)?;
        let (hw, hb) = (b.bind(g, self.head_w), b.bind(g, self.head_b));
        let logits = g.linear(h, hw, hb)?;
        Ok((Some(logits), out))
    }

    /// Frozen tensor-level forward over an assembled sequence.
    pub fn forward_with_taps(
        &self,
        store: &ParamStore,
        seq: &TokenSequence,
        taps: &BTreeSet<usize>,
    ) -> Result<(Tensor, LayerTaps<Tensor>)> {
        let mut g = Graph::<f32>::new();
        let mut b = Binder::frozen(store);
        let x = g.leaf(&seq.embeddings, false);
        let (logits, t) = self.forward(&mut g, &mut b, x, taps, true)?;
        let logits = g.to_tensor(logits.expect("logits requested"));
        Ok((logits, t.into_iter().map(|(l, v)| (l, g.to_tensor(v))).collect()))
    }
}

/// Supervised (position, label) pairs: position `i` predicts token `i + 1`
/// whenever `i + 1` is target-masked. `txt_ids` are the ids of the txt span.
pub fn ntp_targets(layout: &Layout, txt_ids: &[usize]) -> Result<Vec<(usize, usize)>> {
    let txt = layout
        .span(crate::sequence::Segment::Txt)
        .expect("txt span always present")
        .range();
    if txt_ids.len() != txt.len() {
        return Err(Error::shape(
            "ntp_loss",
            format!("{} txt ids for a txt span of {}", txt_ids.len(), txt.len()),
        ));
    }
    let mask = layout.target_mask();
    let pairs: Vec<(usize, usize)> = (1..mask.len())
        .filter(|&j| mask[j])
        .map(|j| (j - 1, txt_ids[j - txt.start]))
        .collect();
    if pairs.is_empty() {
        return Err(Error::invalid("no supervised positions"));
    }
    Ok(pairs)
}

/// Mean cross-entropy over supervised positions.
pub fn ntp_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    layout: &Layout,
    txt_ids: &[usize],
) -> Result<Var> {
    let pairs = ntp_targets(layout, txt_ids)?;
    let vocab = g.shape(logits)[1];
    if g.shape(logits)[0] != layout.len() {
        return Err(Error::shape(
            "ntp_loss",
            format!("logits {:?} for a sequence of {}", g.shape(logits), layout.len()),
        ));
    }
    let mut ranges: Vec<Range<usize>> = Vec::new();
    for &(p, _) in &pairs {
        match ranges.last_mut() {
            Some(r) if r.end == p => r.end += 1,
            _ => ranges.push(p..p + 1),
        }
    }
    let rows = gather_rows_var(g, logits, &ranges)?;
    let logp = g.log_softmax(rows)?;
    let mut onehot = vec![T::zero(); pairs.len() * vocab];
    for (i, &(_, label)) in pairs.iter().enumerate() {
        if label >= vocab {
            return Err(Error::shape("ntp_loss", format!("label {label} outside vocab {vocab}")));
        }
        onehot[i * vocab + label] = T::one();
    }
    let sel = g.constant(vec![pairs.len(), vocab], onehot)?;
    let picked = g.mul(logp, sel)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / pairs.len() as f64)
}
