//! The run configuration: one JSON document, defaults filled, every
//! diagnostic tagged with the JSON path it concerns.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::encoders::{EncodersConfig, Task};
use crate::error::{Error, Result};
use crate::llm::ModelConfig;
use crate::losses::{LayerSets, LossWeights, TAU_INIT, TAU_MAX, TAU_MIN};
use crate::resampler::{pool_groups, ResamplerConfig};
use crate::sequence::{KeyView, TokenOrder};
use crate::synthdata::{caption_query, system_prompt, DatasetManifest, GenerationConfig};

/// Longest caption the generator emits, in tokens.
pub const MAX_CAPTION_TOKENS: usize = 33;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "PT", alias = "pt")]
    Pt,
    #[serde(rename = "IFT", alias = "ift")]
    Ift,
    #[serde(rename = "VPT", alias = "vpt")]
    Vpt,
}

/// A named data split. Each split draws from its own generator seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Stage(Stage),
    ProbeTrain,
    ProbeEval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Stage(Stage::Pt) => "pt",
            Split::Stage(Stage::Ift) => "ift",
            Split::Stage(Stage::Vpt) => "vpt",
            Split::ProbeTrain => "probe_train",
            Split::ProbeEval => "probe_eval",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Split::Stage(Stage::Pt) => 1,
            Split::Stage(Stage::Ift) => 2,
            Split::Stage(Stage::Vpt) => 3,
            Split::ProbeTrain => 4,
            Split::ProbeEval => 5,
        }
    }
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pt => "PT",
            Stage::Ift => "IFT",
            Stage::Vpt => "VPT",
        }
    }
}

/// How ⟨d⟩/⟨s⟩ relate to the predictor latents.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpecialInit {
    /// Recomputed from the latents every PT step, snapshotted when PT ends.
    #[default]
    Tied,
    /// Pooled from the initial latents once, then trained as free parameters.
    Initialized,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenFreeze {
    #[default]
    Frozen,
    Learnable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub layer_sets: LayerSets,
    pub weights: LossWeights,
    pub tau_init: f32,
    pub n_seek: usize,
    pub token_order: TokenOrder,
    pub key_view: KeyView,
    /// Tasks whose embedding losses are optimized.
    pub mode: BTreeSet<Task>,
    pub special_init: SpecialInit,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            layer_sets: LayerSets::default(),
            weights: LossWeights::default(),
            tau_init: TAU_INIT,
            n_seek: 8,
            token_order: TokenOrder::default(),
            key_view: KeyView::default(),
            mode: Task::ALL.into(),
            special_init: SpecialInit::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub generation: GenerationConfig,
    pub pt_items: usize,
    pub ift_items: usize,
    pub vpt_items: usize,
    pub probe_train_items: usize,
    pub probe_eval_items: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            generation: GenerationConfig::default(),
            pt_items: 2000,
            ift_items: 1000,
            vpt_items: 1000,
            probe_train_items: 1536,
            probe_eval_items: 256,
        }
    }
}

/// One training stage. Unset fields take the stage's defaults on normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub embedding_losses: Option<bool>,
    #[serde(default)]
    pub special_tokens: Option<TokenFreeze>,
    /// Stop after this many optimizer steps.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl StageConfig {
    pub fn new(stage: Stage) -> Self {
        StageConfig {
            stage,
            lr: None,
            epochs: None,
            batch_size: None,
            embedding_losses: None,
            special_tokens: None,
            max_steps: None,
        }
        .normalized()
    }

    pub fn normalized(mut self) -> Self {
        let pt = self.stage == Stage::Pt;
        self.lr.get_or_insert(if pt { 1e-3 } else { 2e-5 });
        self.epochs.get_or_insert(1);
        self.batch_size.get_or_insert(if pt { 32 } else { 16 });
        self.embedding_losses.get_or_insert(pt);
        self.special_tokens.get_or_insert(TokenFreeze::Frozen);
        self
    }

    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or(if self.stage == Stage::Pt { 1e-3 } else { 2e-5 })
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(1)
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(if self.stage == Stage::Pt { 32 } else { 16 })
    }

    pub fn embedding_losses(&self) -> bool {
        self.embedding_losses.unwrap_or(self.stage == Stage::Pt)
    }

    pub fn special_tokens(&self) -> TokenFreeze {
        self.special_tokens.unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Layers to probe; `None` probes every layer.
    pub layers: Option<BTreeSet<usize>>,
    pub tasks: BTreeSet<Task>,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: 1e-3,
            epochs: 2,
            batch_size: 32,
            layers: None,
            tasks: Task::ALL.into(),
            seed: 17,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisName {
    LayerSets,
    NSeek,
    LossWeights,
    TokenOrder,
    KeyView,
    StageMode,
    LossMode,
    TokenFreeze,
    LossComponents,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationAxis {
    pub axis: AxisName,
    pub values: Vec<Value>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub axes: Vec<AblationAxis>,
    pub parallel_cells: bool,
    /// Skip probing in each cell; the probe columns are then empty.
    pub skip_probe: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub encoders: EncodersConfig,
    pub resampler: ResamplerConfig,
    pub distill: DistillConfig,
    pub stages: Vec<StageConfig>,
    pub probe: ProbeConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            encoders: EncodersConfig::default(),
            resampler: ResamplerConfig::default(),
            distill: DistillConfig::default(),
            stages: vec![StageConfig::new(Stage::Pt), StageConfig::new(Stage::Ift)],
            probe: ProbeConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

fn check(cond: bool, path: &str, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::config(path, msg()))
    }
}

impl RunConfig {
    /// Small preset for tests and examples: 6 layers of width 16, short
    /// splits, small batches. Layer sets and every other default are kept.
    pub fn tiny() -> Self {
        let mut c = RunConfig::default();
        c.model.n_layers = 6;
        c.model.hidden = 16;
        c.model.heads = 2;
        c.data.pt_items = 64;
        c.data.ift_items = 32;
        c.data.vpt_items = 32;
        c.data.probe_train_items = 48;
        c.data.probe_eval_items = 16;
        c.probe.batch_size = 16;
        for s in &mut c.stages {
            s.batch_size = Some(8);
        }
        c
    }

    /// Longest sequence any stage can produce.
    pub fn max_sequence_len(&self) -> usize {
        system_prompt().len()
            + self.encoders.base.tokens_out
            + 3 * self.distill.n_seek
            + caption_query().len()
            + MAX_CAPTION_TOKENS
    }

    /// Fills stage defaults and checks every semantic constraint.
    pub fn normalize(mut self) -> Result<Self> {
        self.stages = self.stages.into_iter().map(StageConfig::normalized).collect();
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        check(m.n_layers > 0, "model.n_layers", || "must be ≥ 1".into())?;
        check(m.heads > 0 && m.hidden.is_multiple_of(m.heads), "model.heads", || {
            format!("hidden {} must be divisible by heads {}", m.hidden, m.heads)
        })?;
        check(m.ffn_mult > 0, "model.ffn_mult", || "must be ≥ 1".into())?;
        check(m.vocab >= crate::synthdata::vocab_len(), "model.vocab", || {
            format!("must cover the {} caption symbols", crate::synthdata::vocab_len())
        })?;
        let need = self.max_sequence_len();
        check(need <= m.max_positions, "model.max_positions", || {
            format!("{} positions cannot hold sequences of up to {need} tokens", m.max_positions)
        })?;

        let g = &self.data.generation;
        check((1..=4).contains(&g.max_objects), "data.generation.max_objects", || {
            "must be in 1..=4".into()
        })?;
        let e = &self.encoders;
        check(e.patch > 0 && g.canvas.is_multiple_of(e.patch), "encoders.patch", || {
            format!("canvas {} must be divisible by patch {}", g.canvas, e.patch)
        })?;
        let patches = (g.canvas / e.patch.max(1)).pow(2);
        check(e.base.tokens_out == patches, "encoders.base.tokens_out", || {
            format!("must equal the patch count {patches}")
        })?;
        check(e.gen.tokens_out == 1, "encoders.gen.tokens_out", || "gen emits one token".into())?;
        for t in Task::ALL {
            let s = e.target(t);
            let path = format!("encoders.{t}");
            check(s.dim_out > 0 && s.tokens_out > 0, &path, || "sizes must be positive".into())?;
            check(s.dim_out.is_multiple_of(self.resampler.heads.max(1)), &format!("{path}.dim_out"), || {
                format!("must be divisible by resampler.heads {}", self.resampler.heads)
            })?;
        }
        check(self.resampler.heads > 0, "resampler.heads", || "must be ≥ 1".into())?;
        check(self.resampler.ffn_mult > 0, "resampler.ffn_mult", || "must be ≥ 1".into())?;

        let d = &self.distill;
        d.layer_sets
            .validate(m.n_layers)
            .map_err(|err| Error::config("distill.layer_sets", err.to_string()))?;
        d.weights
            .validate()
            .map_err(|err| Error::config("distill.weights", err.to_string()))?;
        check((TAU_MIN..=TAU_MAX).contains(&d.tau_init), "distill.tau_init", || {
            format!("must lie in [{TAU_MIN}, {TAU_MAX}]")
        })?;
        if d.n_seek > 0 {
            for t in [Task::Depth, Task::Seg] {
                pool_groups(e.target(t).tokens_out, d.n_seek)
                    .map_err(|err| Error::config("distill.n_seek", err.to_string()))?;
            }
        }

        check(!self.stages.is_empty(), "stages", || "at least one stage is required".into())?;
        for (i, s) in self.stages.iter().enumerate() {
            let p = |f: &str| format!("stages[{i}].{f}");
            check(s.lr() > 0.0 && s.lr().is_finite(), &p("lr"), || "must be positive".into())?;
            let items = self.stage_items(s.stage);
            check(s.batch_size() >= 1 && s.batch_size() <= items, &p("batch_size"), || {
                format!("must be in 1..={items}")
            })?;
        }
        let pr = &self.probe;
        check(pr.lr > 0.0, "probe.lr", || "must be positive".into())?;
        check(pr.batch_size >= 1 && pr.batch_size <= self.data.probe_train_items, "probe.batch_size", || {
            format!("must be in 1..={}", self.data.probe_train_items)
        })?;
        check(self.data.probe_eval_items > 0, "data.probe_eval_items", || "must be ≥ 1".into())?;
        if let Some(layers) = &pr.layers {
            check(layers.iter().all(|&l| l < m.n_layers), "probe.layers", || {
                format!("indices must be < {}", m.n_layers)
            })?;
        }
        Ok(())
    }

    pub fn stage_items(&self, stage: Stage) -> usize {
        match stage {
            Stage::Pt => self.data.pt_items,
            Stage::Ift => self.data.ift_items,
            Stage::Vpt => self.data.vpt_items,
        }
    }

    /// Deterministic manifest for one data split, seeded from `data.seed`.
    pub fn manifest(&self, split: Split) -> DatasetManifest {
        let count = match split {
            Split::Stage(st) => self.stage_items(st),
            Split::ProbeTrain => self.data.probe_train_items,
            Split::ProbeEval => self.data.probe_eval_items,
        };
        let seed = self.data.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ split.salt();
        DatasetManifest::new(split.name(), count, seed, self.data.generation.clone())
    }

    /// Stable SHA-256 of the normalized JSON form.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// Parses and normalizes a config document.
pub fn validate_config(doc: &Value) -> Result<RunConfig> {
    let cfg: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        Error::config(if path == "." { String::new() } else { path }, e.into_inner().to_string())
    })?;
    cfg.normalize()
}

/// Reads a config file; a missing path yields the defaults.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::config("", format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    validate_config(&doc)
}

/// Applies `a.b.c=VALUE`; VALUE is parsed as JSON, falling back to a string.
/// Numeric path components index into arrays.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like KEY=VALUE"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    set_path(doc, key, value)
}

pub fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty path component"));
    }
    let mut cur = doc;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        if let Value::Array(items) = cur {
            let idx: usize = part
                .parse()
                .map_err(|_| Error::config(key, format!("`{part}` is not an array index")))?;
            let len = items.len();
            let slot = items
                .get_mut(idx)
                .ok_or_else(|| Error::config(key, format!("index {idx} out of {len}")))?;
            if last {
                *slot = value;
                return Ok(());
            }
            cur = slot;
            continue;
        }
        if !cur.is_object() {
            *cur = Value::Object(Default::default());
        }
        let map = cur.as_object_mut().expect("object ensured above");
        if last {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cur = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn empty_document_gives_defaults() {
        let c = validate_config(&json!({})).unwrap();
        assert_eq!(c.distill.n_seek, 8);
        assert_eq!(c.distill.weights, LossWeights::default());
        assert_eq!(c.distill.tau_init, 2.0);
        assert_eq!(c.distill.token_order.to_string(), "gds");
        assert_eq!(c.distill.key_view, KeyView::SysImgTTxt);
        assert_eq!(c.distill.layer_sets.depth, [2, 5].into());
        assert_eq!(c.distill.layer_sets.seg, [2, 4].into());
        assert_eq!(c.distill.layer_sets.gen, [3, 5].into());
        assert_eq!(c.stages[0].lr, Some(1e-3));
        assert_eq!(c.stages[1].lr, Some(2e-5));
        assert_eq!(c.stages[0].batch_size, Some(32));
        assert_eq!(c.stages[1].batch_size, Some(16));
        let echoed = serde_json::to_value(&c).unwrap();
        assert_eq!(echoed["distill"]["key_view"], "sys_img_t_txt");
        assert_eq!(echoed["stages"][0]["embedding_losses"], true);
        assert_eq!(echoed["stages"][1]["special_tokens"], "frozen");
    }

    #[test]
    fn diagnostics_carry_paths() {
        let e = validate_config(&json!({"distill": {"n_seek": -1}})).unwrap_err();
        assert!(matches!(&e, Error::Config { path, .. } if path == "distill.n_seek"), "{e}");
        let e = validate_config(&json!({"distill": {"token_order": "gg s"}})).unwrap_err();
        assert!(matches!(&e, Error::Config { path, .. } if path == "distill.token_order"), "{e}");
        let e = validate_config(&json!({"model": {"colour": 1}})).unwrap_err();
        assert!(e.to_string().contains("colour"), "{e}");
        let e = validate_config(&json!({"stages": [{"stage": "PT", "lr": -1.0}]})).unwrap_err();
        assert!(matches!(&e, Error::Config { path, .. } if path == "stages[0].lr"), "{e}");
        let e = validate_config(&json!({"distill": {"n_seek": 24}})).unwrap_err();
        assert!(matches!(&e, Error::Config { path, .. } if path == "model.max_positions"), "{e}");
    }

    #[test]
    fn overrides() {
        let mut doc = json!({"stages": [{"stage": "PT"}, {"stage": "IFT"}]});
        apply_override(&mut doc, "distill.n_seek=4").unwrap();
        apply_override(&mut doc, "distill.token_order=sdg").unwrap();
        apply_override(&mut doc, "stages.1.embedding_losses=true").unwrap();
        let c = validate_config(&doc).unwrap();
        assert_eq!(c.distill.n_seek, 4);
        assert_eq!(c.distill.token_order.to_string(), "sdg");
        assert_eq!(c.stages[1].embedding_losses, Some(true));
        assert!(apply_override(&mut doc, "novalue").is_err());
        assert!(apply_override(&mut doc, "stages.7.lr=1").is_err());
    }

    #[test]
    fn normalization_is_idempotent() {
        let c = validate_config(&json!({})).unwrap();
        let again = validate_config(&serde_json::to_value(&c).unwrap()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.hash(), again.hash());
    }
}
