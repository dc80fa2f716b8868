//! Frozen stand-ins for the vision encoders, and the trainable projector.
//!
//! Every frozen map is rebuilt from its seed, so weights are never stored.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::kernels::{dot, matmul};
use crate::diffcore::{Binder, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::synthdata::{generate_scene, GenerationConfig, Scene};

const CALIBRATION_SCENES: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Base,
    Depth,
    Seg,
    Gen,
}

/// Distillation targets, in the order used throughout the crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Depth,
    Seg,
    Gen,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Depth, Task::Seg, Task::Gen];

    pub fn name(self) -> &'static str {
        match self {
            Task::Depth => "depth",
            Task::Seg => "seg",
            Task::Gen => "gen",
        }
    }

    pub fn kind(self) -> EncoderKind {
        match self {
            Task::Depth => EncoderKind::Depth,
            Task::Seg => EncoderKind::Seg,
            Task::Gen => EncoderKind::Gen,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub tokens_out: usize,
    pub dim_out: usize,
    pub seed: u64,
}

/// Encoder section of the run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncodersConfig {
    pub patch: usize,
    pub base: EncoderSpec,
    pub depth: EncoderSpec,
    pub seg: EncoderSpec,
    pub gen: EncoderSpec,
    /// Width of the hidden tanh layer inside each target encoder.
    pub target_hidden: usize,
}

impl Default for EncodersConfig {
    fn default() -> Self {
        let spec = |kind, tokens_out, dim_out, seed| EncoderSpec {
            kind,
            tokens_out,
            dim_out,
            seed,
        };
        EncodersConfig {
            patch: 4,
            base: spec(EncoderKind::Base, 64, 48, 101),
            depth: spec(EncoderKind::Depth, 36, 32, 202),
            seg: spec(EncoderKind::Seg, 36, 48, 303),
            gen: spec(EncoderKind::Gen, 1, 32, 404),
            target_hidden: 64,
        }
    }
}

impl EncodersConfig {
    pub fn target(&self, task: Task) -> &EncoderSpec {
        match task {
            Task::Depth => &self.depth,
            Task::Seg => &self.seg,
            Task::Gen => &self.gen,
        }
    }
}

/// Flattens non-overlapping `patch×patch` blocks into rows, raster order.
pub fn patchify(canvas: &Tensor, patch: usize) -> Result<(Vec<f32>, usize, usize)> {
    let s = canvas.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::shape("patchify", format!("canvas must be H×W×3, got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(
            "patchify",
            format!("canvas {h}×{w} not divisible by patch {patch}"),
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let pdim = patch * patch * 3;
    let src = canvas.data();
    let mut out = Vec::with_capacity(gh * gw * pdim);
    for by in 0..gh {
        for bx in 0..gw {
            for y in by * patch..(by + 1) * patch {
                let row = (y * w + bx * patch) * 3;
                out.extend_from_slice(&src[row..row + patch * 3]);
            }
        }
    }
    Ok((out, gh * gw, pdim))
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    let d = Normal::new(0.0f32, std).expect("positive std");
    (0..n).map(|_| d.sample(rng)).collect()
}

fn affine_tanh(x: &[f32], w: &[f32], b: &[f32], rows: usize, k: usize, n: usize) -> Vec<f32> {
    let mut y = matmul(x, w, rows, k, n);
    for r in y.chunks_mut(n) {
        r.iter_mut().zip(b).for_each(|(v, &bb)| *v = (*v + bb).tanh());
    }
    y
}

/// Frozen base encoder: per-patch affine map followed by tanh.
#[derive(Clone, Debug)]
pub struct BaseEncoder {
    spec: EncoderSpec,
    patch: usize,
    w: Tensor,
    b: Vec<f32>,
}

impl BaseEncoder {
    pub fn new(spec: &EncoderSpec, patch: usize) -> Result<Self> {
        if spec.kind != EncoderKind::Base {
            return Err(Error::invalid(format!("base encoder given {:?} spec", spec.kind)));
        }
        let pdim = patch * patch * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let w = Tensor::new(
            vec![pdim, spec.dim_out],
            normal_vec(&mut rng, pdim * spec.dim_out, 1.5 / (pdim as f32).sqrt()),
        )?;
        let b = normal_vec(&mut rng, spec.dim_out, 0.1);
        Ok(BaseEncoder {
            spec: spec.clone(),
            patch,
            w,
            b,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn weights(&self) -> &Tensor {
        &self.w
    }

    /// (patches × dim) features for `scene`.
    pub fn encode(&self, scene: &Scene) -> Result<Tensor> {
        let (mut x, n, pdim) = patchify(&scene.canvas, self.patch)?;
        if n != self.spec.tokens_out {
            return Err(Error::shape(
                "encode_base",
                format!("{n} patches but spec declares {}", self.spec.tokens_out),
            ));
        }
        x.iter_mut().for_each(|v| *v -= 0.5);
        let y = affine_tanh(&x, self.w.data(), &self.b, n, pdim, self.spec.dim_out);
        Tensor::new(vec![n, self.spec.dim_out], y)
    }
}

/// Output of a frozen target encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetFeatures {
    pub task: Task,
    /// (tokens × dim), unit L2 norm per token.
    pub values: Tensor,
}

/// Frozen target encoder: per-patch tanh layer, spatial mixing onto the
/// output token grid, a second linear map, then per-token normalization.
#[derive(Clone, Debug)]
pub struct TargetEncoder {
    spec: EncoderSpec,
    task: Task,
    patch: usize,
    hidden: usize,
    w1: Tensor,
    b1: Vec<f32>,
    /// (tokens_out × patches), rows sum to 1.
    mix: Tensor,
    w2: Tensor,
    /// Mean pre-normalization output over the calibration scenes.
    center: Tensor,
}

fn mixing_matrix(task: Task, tokens_out: usize, grid: usize) -> Result<Tensor> {
    let patches = grid * grid;
    if task == Task::Gen {
        if tokens_out != 1 {
            return Err(Error::invalid(format!(
                "gen encoder emits one token, spec declares {tokens_out}"
            )));
        }
        return Tensor::full(vec![1, patches], 1.0 / patches as f32);
    }
    let side = (tokens_out as f64).sqrt().round() as usize;
    if side * side != tokens_out {
        return Err(Error::invalid(format!(
            "{task} tokens_out {tokens_out} is not a square grid"
        )));
    }
    // Depth pools wider neighbourhoods than seg.
    let sigma = match task {
        Task::Depth => 0.9,
        _ => 0.5,
    } * grid as f64
        / side as f64;
    let mut m = vec![0.0f32; tokens_out * patches];
    for oy in 0..side {
        for ox in 0..side {
            let cy = (oy as f64 + 0.5) * grid as f64 / side as f64;
            let cx = (ox as f64 + 0.5) * grid as f64 / side as f64;
            let row = &mut m[(oy * side + ox) * patches..(oy * side + ox + 1) * patches];
            let mut total = 0.0;
            for py in 0..grid {
                for px in 0..grid {
                    let (dy, dx) = (py as f64 + 0.5 - cy, px as f64 + 0.5 - cx);
                    let w = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                    row[py * grid + px] = w as f32;
                    total += w;
                }
            }
            row.iter_mut().for_each(|v| *v = (*v as f64 / total) as f32);
        }
    }
    Tensor::new(vec![tokens_out, patches], m)
}

impl TargetEncoder {
    pub fn new(task: Task, spec: &EncoderSpec, patch: usize, hidden: usize, canvas: usize) -> Result<Self> {
        if spec.kind != task.kind() {
            return Err(Error::invalid(format!(
                "{task} target encoder given {:?} spec",
                spec.kind
            )));
        }
        if !canvas.is_multiple_of(patch) {
            return Err(Error::shape(
                "encode_target",
                format!("canvas {canvas} not divisible by patch {patch}"),
            ));
        }
        let pdim = patch * patch * 3;
        let grid = canvas / patch;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let w1 = Tensor::new(
            vec![pdim, hidden],
            normal_vec(&mut rng, pdim * hidden, 2.0 / (pdim as f32).sqrt()),
        )?;
        let b1 = normal_vec(&mut rng, hidden, 0.2);
        let w2 = Tensor::new(
            vec![hidden, spec.dim_out],
            normal_vec(&mut rng, hidden * spec.dim_out, 1.0 / (hidden as f32).sqrt()),
        )?;
        let mut enc = TargetEncoder {
            spec: spec.clone(),
            task,
            patch,
            hidden,
            w1,
            b1,
            mix: mixing_matrix(task, spec.tokens_out, grid)?,
            w2,
            center: Tensor::zeros(vec![spec.tokens_out, spec.dim_out])?,
        };
        // Centering removes the direction shared by every scene, which would
        // otherwise dominate cosine similarity.
        let gen_cfg = GenerationConfig {
            canvas,
            ..GenerationConfig::default()
        };
        let mut acc = vec![0.0f64; spec.tokens_out * spec.dim_out];
        for _ in 0..CALIBRATION_SCENES {
            let scene = generate_scene(rng.gen(), &gen_cfg)?;
            for (a, v) in acc.iter_mut().zip(enc.raw(&scene)?) {
                *a += v as f64;
            }
        }
        let center = acc.iter().map(|a| (a / CALIBRATION_SCENES as f64) as f32).collect();
        enc.center = Tensor::new(vec![spec.tokens_out, spec.dim_out], center)?;
        Ok(enc)
    }

    fn raw(&self, scene: &Scene) -> Result<Vec<f32>> {
        let (mut x, n, pdim) = patchify(&scene.canvas, self.patch)?;
        if n != self.mix.cols() {
            return Err(Error::shape(
                "encode_target",
                format!("{n} patches, mixing expects {}", self.mix.cols()),
            ));
        }
        x.iter_mut().for_each(|v| *v -= 0.5);
        let h = affine_tanh(&x, self.w1.data(), &self.b1, n, pdim, self.hidden);
        let mixed = matmul(self.mix.data(), &h, self.spec.tokens_out, n, self.hidden);
        Ok(matmul(&mixed, self.w2.data(), self.spec.tokens_out, self.hidden, self.spec.dim_out))
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn task(&self) -> Task {
        self.task
    }

    /// Frozen weight tensors, for inspection.
    pub fn weights(&self) -> [&Tensor; 4] {
        [&self.w1, &self.mix, &self.w2, &self.center]
    }

    pub fn encode(&self, scene: &Scene) -> Result<TargetFeatures> {
        let mut y = self.raw(scene)?;
        y.iter_mut().zip(self.center.data()).for_each(|(v, c)| *v -= c);
        for row in y.chunks_mut(self.spec.dim_out) {
            let norm = dot(row, row).sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        Ok(TargetFeatures {
            task: self.task,
            values: Tensor::new(vec![self.spec.tokens_out, self.spec.dim_out], y)?,
        })
    }
}

/// The base encoder plus one target encoder per task.
#[derive(Clone, Debug)]
pub struct EncoderBank {
    pub base: BaseEncoder,
    pub targets: [TargetEncoder; 3],
}

impl EncoderBank {
    pub fn new(cfg: &EncodersConfig, canvas: usize) -> Result<Self> {
        let t = |task| TargetEncoder::new(task, cfg.target(task), cfg.patch, cfg.target_hidden, canvas);
        Ok(EncoderBank {
            base: BaseEncoder::new(&cfg.base, cfg.patch)?,
            targets: [t(Task::Depth)?, t(Task::Seg)?, t(Task::Gen)?],
        })
    }

    pub fn target(&self, task: Task) -> &TargetEncoder {
        &self.targets[task.index()]
    }
}

/// Two affine maps with a GELU between them.
#[derive(Clone, Copy, Debug)]
pub struct Projector {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub dim_in: usize,
    pub dim_out: usize,
}

impl Projector {
    pub fn register<R: rand::Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim_in: usize,
        dim_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Projector {
            w1: store.insert_normal(format!("{prefix}.w1"), &[dim_in, dim_out], (1.0 / dim_in as f32).sqrt(), rng)?,
            b1: store.insert_full(format!("{prefix}.b1"), &[dim_out], 0.0)?,
            w2: store.insert_normal(format!("{prefix}.w2"), &[dim_out, dim_out], (1.0 / dim_out as f32).sqrt(), rng)?,
            b2: store.insert_full(format!("{prefix}.b2"), &[dim_out], 0.0)?,
            dim_in,
            dim_out,
        })
    }

    /// Maps (tokens × dim_in) features to (tokens × dim_out).
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, b: &mut Binder<'_>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.dim_in {
            return Err(Error::shape(
                "project",
                format!("features {s:?}, projector expects width {}", self.dim_in),
            ));
        }
        let (w1, b1, w2, b2) = (b.bind(g, self.w1), b.bind(g, self.b1), b.bind(g, self.w2), b.bind(g, self.b2));
        let h = g.linear(x, w1, b1)?;
        let h = g.gelu(h)?;
        g.linear(h, w2, b2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank() -> EncoderBank {
        EncoderBank::new(&EncodersConfig::default(), 32).unwrap()
    }

    #[test]
    fn base_shape_and_determinism() {
        let b = bank();
        let s = generate_scene(5, &GenerationConfig::default()).unwrap();
        let f = b.base.encode(&s).unwrap();
        assert_eq!(f.shape(), &[64, 48]);
        assert_eq!(f, b.base.encode(&s).unwrap());
    }

    #[test]
    fn color_change_changes_features() {
        let b = bank();
        let s = generate_scene(9, &GenerationConfig::default()).unwrap();
        let before = b.base.encode(&s).unwrap();
        let mut objects = s.objects.clone();
        objects[0].color = (objects[0].color + 1) % 8;
        let s = crate::synthdata::render_scene(objects, s.background, &GenerationConfig::default()).unwrap();
        assert_ne!(before, b.base.encode(&s).unwrap());
    }

    #[test]
    fn indivisible_canvas_rejected() {
        let t = Tensor::zeros(vec![30, 30, 3]).unwrap();
        assert!(patchify(&t, 4).is_err());
    }

    #[test]
    fn target_shapes_and_norms() {
        let b = bank();
        for seed in 0..100 {
            let s = generate_scene(seed, &GenerationConfig::default()).unwrap();
            for task in Task::ALL {
                let t = b.target(task).encode(&s).unwrap();
                let spec = b.target(task).spec();
                assert_eq!(t.values.shape(), &[spec.tokens_out, spec.dim_out]);
                for r in 0..spec.tokens_out {
                    let row = t.values.row(r);
                    let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
                    assert!((n - 1.0).abs() < 1e-5, "{task} row {r} norm {n}");
                }
            }
        }
        let s = generate_scene(0, &GenerationConfig::default()).unwrap();
        assert_eq!(b.target(Task::Gen).encode(&s).unwrap().values.shape(), &[1, 32]);
    }

    #[test]
    fn depth_and_seg_differ() {
        let b = bank();
        let s = generate_scene(1, &GenerationConfig::default()).unwrap();
        let d = b.target(Task::Depth).encode(&s).unwrap().values;
        let g = b.target(Task::Seg).encode(&s).unwrap().values;
        assert_ne!(d.data(), &g.data()[..d.numel()]);
    }

    #[test]
    fn mixing_rows_sum_to_one() {
        for task in Task::ALL {
            let n = if task == Task::Gen { 1 } else { 36 };
            let m = mixing_matrix(task, n, 8).unwrap();
            for r in 0..n {
                let s: f32 = m.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn zero_projector_gives_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Projector::register(&mut store, "projector", 48, 64, &mut rng).unwrap();
        for id in [p.w1, p.w2] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::<f32>::new();
        let mut bind = Binder::new(&store);
        let x = g.constant(vec![64, 48], vec![0.3; 64 * 48]).unwrap();
        let y = p.forward(&mut g, &mut bind, x).unwrap();
        assert_eq!(g.shape(y), &[64, 64]);
        assert!(g.value(y).iter().all(|&v| v == 0.0));
        let bad = g.constant(vec![64, 47], vec![0.0; 64 * 47]).unwrap();
        assert!(p.forward(&mut g, &mut bind, bad).is_err());
    }
}
