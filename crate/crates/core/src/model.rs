//! The multimodal model: projector, LM, per-(task, layer) predictors, special
//! tokens with their bridges, and the contrastive temperature, all in one
//! [`ParamStore`].
//!
//! Parameter names are grouped by prefix: `projector.`, `llm.`, `pred.`,
//! `special.`, `bridge.` and `loss.tau`.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SpecialInit};
use crate::diffcore::{Binder, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::encoders::{EncoderBank, Projector, Task};
use crate::error::{Error, Result};
use crate::llm::{ntp_loss, LayerTaps, Llm};
use crate::resampler::{derive_gen_query, derive_special_tokens, Affine, ResamplerBlock};
use crate::sequence::{assemble_vars, gather_rows_var, Layout, SpecialBlocks};
use crate::synthdata::{caption_query, system_prompt, Scene};

/// Named parameter groups used for stage-wise freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Projector,
    Llm,
    Predictors,
    SpecialTokens,
    Bridges,
    Temperature,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Projector,
        ParamGroup::Llm,
        ParamGroup::Predictors,
        ParamGroup::SpecialTokens,
        ParamGroup::Bridges,
        ParamGroup::Temperature,
    ];

    pub fn of(name: &str) -> Result<ParamGroup> {
        let g = match name.split('.').next().unwrap_or("") {
            "projector" => ParamGroup::Projector,
            "llm" => ParamGroup::Llm,
            "pred" => ParamGroup::Predictors,
            "special" => ParamGroup::SpecialTokens,
            "bridge" => ParamGroup::Bridges,
            "loss" => ParamGroup::Temperature,
            _ => return Err(Error::invalid(format!("parameter `{name}` belongs to no known component"))),
        };
        Ok(g)
    }
}

/// One training example with its frozen encoder outputs.
#[derive(Clone, Debug)]
pub struct Item {
    /// Base encoder features (patches × base dim).
    pub base: Tensor,
    /// Query followed by caption tokens.
    pub txt_ids: Vec<usize>,
    /// Leading txt positions that are not supervised.
    pub query_len: usize,
    /// Targets indexed by [`Task::index`].
    pub targets: [Tensor; 3],
}

impl Item {
    pub fn from_scene(bank: &EncoderBank, scene: &Scene, query: &[usize]) -> Result<Item> {
        let mut txt_ids = query.to_vec();
        txt_ids.extend_from_slice(&scene.caption_tokens);
        let t = |task| bank.target(task).encode(scene).map(|f| f.values);
        Ok(Item {
            base: bank.base.encode(scene)?,
            txt_ids,
            query_len: query.len(),
            targets: [t(Task::Depth)?, t(Task::Seg)?, t(Task::Gen)?],
        })
    }

    /// Caption item with the training query.
    pub fn caption(bank: &EncoderBank, scene: &Scene) -> Result<Item> {
        Self::from_scene(bank, scene, &caption_query())
    }
}

/// What an item forward should record.
#[derive(Clone, Debug, Default)]
pub struct ForwardSpec {
    /// Tasks whose predictors run at every layer of their set.
    pub tasks: Vec<Task>,
    pub ntp: bool,
    /// Additional layers to expose in [`ItemOutputs::taps`].
    pub taps: BTreeSet<usize>,
}

pub struct ItemOutputs {
    pub ntp: Option<Var>,
    pub preds: BTreeMap<(Task, usize), Var>,
    pub taps: LayerTaps<Var>,
    pub layout: Layout,
}

/// Where ⟨d⟩/⟨s⟩ values come from during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpecialSource {
    /// Pooled from the current predictor latents.
    Tied,
    /// The `special.depth` / `special.seg` parameters.
    Stored,
}

#[derive(Clone, Debug)]
pub struct MultimodalModel {
    pub cfg: RunConfig,
    pub store: ParamStore,
    pub llm: Llm,
    pub projector: Projector,
    pub predictors: BTreeMap<(Task, usize), ResamplerBlock>,
    /// Latents → hidden maps for depth and seg tokens.
    pub token_proj: BTreeMap<Task, Affine>,
    /// Mean ⟨g⟩ → gen latent.
    pub query_proj: Option<Affine>,
    pub special: [Option<ParamId>; 3],
    /// Learnable gen latent used when there are no special tokens.
    pub gen_latent: Option<ParamId>,
    pub tau: ParamId,
    /// True once ⟨d⟩/⟨s⟩ have been copied out of the tied computation.
    pub snapshotted: bool,
}

impl MultimodalModel {
    /// Builds every component from `cfg.seed`.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let h = cfg.model.hidden;
        let projector = Projector::register(&mut store, "projector", cfg.encoders.base.dim_out, h, &mut rng)?;
        let llm = Llm::register(&mut store, &cfg.model, &mut rng)?;
        let n_seek = cfg.distill.n_seek;
        let mut predictors = BTreeMap::new();
        for (task, layer) in cfg.distill.layer_sets.pairs() {
            let spec = cfg.encoders.target(task);
            let blk = ResamplerBlock::register(
                &mut store,
                &format!("pred.{task}.l{layer}"),
                spec.tokens_out,
                h,
                spec.dim_out,
                task != Task::Gen,
                &cfg.resampler,
                &mut rng,
            )?;
            predictors.insert((task, layer), blk);
        }
        let mut token_proj = BTreeMap::new();
        let mut special = [None, None, None];
        let mut query_proj = None;
        let mut gen_latent = None;
        let gdim = cfg.encoders.gen.dim_out;
        if n_seek > 0 {
            for task in [Task::Depth, Task::Seg] {
                let d = cfg.encoders.target(task).dim_out;
                let a = Affine::register(&mut store, &format!("bridge.token_proj.{task}"), d, h, (1.0 / d as f32).sqrt(), &mut rng)?;
                token_proj.insert(task, a);
            }
            query_proj = Some(Affine::register(&mut store, "bridge.query_proj", h, gdim, (1.0 / h as f32).sqrt(), &mut rng)?);
            special[Task::Gen.index()] = Some(store.insert_normal("special.gen", &[n_seek, h], 1.0, &mut rng)?);
            for task in [Task::Depth, Task::Seg] {
                special[task.index()] = Some(store.insert_full(format!("special.{task}"), &[n_seek, h], 0.0)?);
            }
        } else {
            gen_latent = Some(store.insert_normal("pred.gen.latent", &[1, gdim], (1.0 / gdim as f32).sqrt(), &mut rng)?);
        }
        let tau = store.insert_full("loss.tau", &[1], cfg.distill.tau_init)?;
        let mut m = MultimodalModel {
            cfg: cfg.clone(),
            store,
            llm,
            projector,
            predictors,
            token_proj,
            query_proj,
            special,
            gen_latent,
            tau,
            snapshotted: false,
        };
        // Stored ⟨d⟩/⟨s⟩ start from the tied values so both modes share an init.
        m.write_tied_specials()?;
        Ok(m)
    }

    pub fn n_seek(&self) -> usize {
        self.cfg.distill.n_seek
    }

    /// How ⟨d⟩/⟨s⟩ are sourced right now.
    pub fn special_source(&self) -> SpecialSource {
        if self.cfg.distill.special_init == SpecialInit::Tied && !self.snapshotted {
            SpecialSource::Tied
        } else {
            SpecialSource::Stored
        }
    }

    fn tied_special<T: Real>(&self, g: &mut Graph<T>, b: &mut Binder<'_>, task: Task) -> Result<Var> {
        let lats = self
            .predictors
            .iter()
            .filter(|((t, _), _)| *t == task)
            .map(|(_, p)| p.own_latents(g, b))
            .collect::<Result<Vec<_>>>()?;
        let mut acc = lats[0];
        for &l in &lats[1..] {
            acc = g.add(acc, l)?;
        }
        if lats.len() > 1 {
            acc = g.scale(acc, 1.0 / lats.len() as f64)?;
        }
        derive_special_tokens(g, b, acc, self.n_seek(), &self.token_proj[&task])
    }

    /// Special-token blocks for a forward pass.
    pub fn special_blocks<T: Real>(&self, g: &mut Graph<T>, b: &mut Binder<'_>) -> Result<SpecialBlocks<Var>> {
        let mut out = [None, None, None];
        if self.n_seek() == 0 {
            return Ok(out);
        }
        let source = self.special_source();
        for task in Task::ALL {
            let id = self.special[task.index()].expect("special params exist when n_seek > 0");
            out[task.index()] = Some(match (task, source) {
                (Task::Gen, _) | (_, SpecialSource::Stored) => b.bind(g, id),
                (_, SpecialSource::Tied) => self.tied_special(g, b, task)?,
            });
        }
        Ok(out)
    }

    /// Current ⟨g⟩/⟨d⟩/⟨s⟩ values as tensors, `None` when N_seek = 0.
    pub fn special_values(&self) -> Result<SpecialBlocks<Tensor>> {
        let mut g = Graph::<f32>::new();
        let mut b = Binder::frozen(&self.store);
        let blocks = self.special_blocks(&mut g, &mut b)?;
        Ok(blocks.map(|v| v.map(|v| g.to_tensor(v))))
    }

    fn write_tied_specials(&mut self) -> Result<()> {
        if self.n_seek() == 0 {
            return Ok(());
        }
        let mut g = Graph::<f32>::new();
        let vals = {
            let mut b = Binder::frozen(&self.store);
            [Task::Depth, Task::Seg].map(|t| self.tied_special(&mut g, &mut b, t))
        };
        for (task, v) in [Task::Depth, Task::Seg].into_iter().zip(vals) {
            let t = g.to_tensor(v?);
            let id = self.special[task.index()].expect("special params exist");
            let dst = self.store.get_mut(id);
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    /// Copies the tied ⟨d⟩/⟨s⟩ values into their parameters and stops tying.
    pub fn snapshot_specials(&mut self) -> Result<()> {
        if self.special_source() == SpecialSource::Tied {
            self.write_tied_specials()?;
            self.snapshotted = true;
        }
        Ok(())
    }

    /// Resumes tying ⟨d⟩/⟨s⟩ to the latents (start of a PT stage).
    pub fn untie_snapshot(&mut self) {
        if self.cfg.distill.special_init == SpecialInit::Tied {
            self.snapshotted = false;
        }
    }

    /// The gen predictors' shared latent.
    pub fn gen_query<T: Real>(&self, g: &mut Graph<T>, b: &mut Binder<'_>, specials: &SpecialBlocks<Var>) -> Result<Var> {
        match (specials[Task::Gen.index()], &self.query_proj, self.gen_latent) {
            (Some(gt), Some(qp), _) => derive_gen_query(g, b, gt, qp),
            (None, _, Some(id)) => Ok(b.bind(g, id)),
            _ => Err(Error::invalid("model has no gen latent source")),
        }
    }

    /// Layers a forward must reach for `spec`.
    pub fn needed_taps(&self, spec: &ForwardSpec) -> BTreeSet<usize> {
        let mut taps = spec.taps.clone();
        for &t in &spec.tasks {
            taps.extend(self.cfg.distill.layer_sets.get(t));
        }
        taps
    }

    /// Records one item's forward pass on `g`.
    pub fn forward_item<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<'_>,
        item: &Item,
        spec: &ForwardSpec,
    ) -> Result<ItemOutputs> {
        let base = g.leaf(&item.base, false);
        let img = self.projector.forward(g, b, base)?;
        let sys = self.llm.embed(g, b, &system_prompt())?;
        let txt = self.llm.embed(g, b, &item.txt_ids)?;
        let specials = self.special_blocks(g, b)?;
        let (x, mut layout) = assemble_vars(g, sys, img, &specials, txt, self.cfg.distill.token_order)?;
        if spec.ntp {
            layout.unmask_txt_prefix(item.query_len)?;
        }
        let taps = self.needed_taps(spec);
        let (logits, tapped) = self.llm.forward(g, b, x, &taps, spec.ntp)?;
        let ntp = match logits {
            Some(l) => Some(ntp_loss(g, l, &layout, &item.txt_ids)?),
            None => None,
        };
        let mut preds = BTreeMap::new();
        let gen_q = if spec.tasks.contains(&Task::Gen) {
            Some(self.gen_query(g, b, &specials)?)
        } else {
            None
        };
        for &task in &spec.tasks {
            let spans = layout.key_spans(task, self.cfg.distill.key_view)?;
            for &l in self.cfg.distill.layer_sets.get(task) {
                let blk = &self.predictors[&(task, l)];
                let keys = gather_rows_var(g, tapped[&l], &spans)?;
                let lat = match gen_q {
                    Some(q) if task == Task::Gen => q,
                    _ => blk.own_latents(g, b)?,
                };
                preds.insert((task, l), blk.forward(g, b, lat, keys)?);
            }
        }
        Ok(ItemOutputs {
            ntp,
            preds,
            taps: tapped,
            layout,
        })
    }

    /// Frozen forward returning hidden states at `layers` for probing.
    pub fn hidden_states(&self, item: &Item, layers: &BTreeSet<usize>) -> Result<BTreeMap<usize, Tensor>> {
        let mut g = Graph::<f32>::new();
        let mut b = Binder::frozen(&self.store);
        let spec = ForwardSpec {
            tasks: Vec::new(),
            ntp: false,
            taps: layers.clone(),
        };
        let out = self.forward_item(&mut g, &mut b, item, &spec)?;
        Ok(out.taps.into_iter().map(|(l, v)| (l, g.to_tensor(v))).collect())
    }

    /// SHA-256 over every parameter.
    pub fn fingerprint(&self) -> String {
        self.store.fingerprint()
    }

    pub fn group_fingerprint(&self, group: ParamGroup) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (_, name, t) in self.store.iter() {
            if ParamGroup::of(name).ok() == Some(group) {
                h.update(name.as_bytes());
                h.update(t.content_hash().as_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
