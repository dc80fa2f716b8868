//! Deterministic image–caption pairs whose content is a function of the seed.
//!
//! Scenes hold one to four filled primitives on a tinted background. Captions
//! are templated from the objects, listed left to right, so next-token
//! prediction has real signal to learn.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const GENERATOR_VERSION: u32 = 1;

/// Closed caption vocabulary. Ids are positions in this table.
pub const VOCAB: &[&str] = &[
    "<pad>", "<eos>", "<sys>", "you", "see", "an", "image", "describe", "the", ".", "and", "one",
    "two", "three", "four", "object", "objects", "small", "large", "red", "green", "blue",
    "yellow", "magenta", "cyan", "white", "orange", "circle", "square", "triangle", "left",
    "center", "right", "top", "middle", "bottom", "at", "x0", "x1", "x2", "x3", "x4", "x5", "x6",
    "x7", "y0", "y1", "y2", "y3", "y4", "y5", "y6", "y7", "on", "dark", "gray", "navy", "olive",
    "maroon", "background", "there", "is", "are",
];

pub fn token_id(word: &str) -> usize {
    VOCAB
        .iter()
        .position(|w| *w == word)
        .unwrap_or_else(|| panic!("`{word}` is not in the vocabulary"))
}

pub fn vocab_len() -> usize {
    VOCAB.len()
}

/// System prompt tokens placed before the image.
pub fn system_prompt() -> Vec<usize> {
    ["<sys>", "you", "see", "an"].iter().map(|w| token_id(w)).collect()
}

/// Query tokens that open the text span.
pub fn caption_query() -> Vec<usize> {
    vec![token_id("describe")]
}

/// Fixed query used when caching activations for probing.
pub fn probe_query() -> Vec<usize> {
    ["describe", "the", "image", "."].iter().map(|w| token_id(w)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

const SHAPES: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

const COLORS: [(&str, [f32; 3]); 8] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.85, 0.2]),
    ("blue", [0.15, 0.2, 0.95]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("magenta", [0.9, 0.1, 0.85]),
    ("cyan", [0.1, 0.9, 0.9]),
    ("white", [1.0, 1.0, 1.0]),
    ("orange", [1.0, 0.55, 0.05]),
];

const BACKGROUNDS: [(&str, [f32; 3]); 4] = [
    ("dark", [0.05, 0.05, 0.05]),
    ("gray", [0.35, 0.35, 0.35]),
    ("navy", [0.05, 0.05, 0.3]),
    ("olive", [0.3, 0.3, 0.05]),
];

impl ShapeKind {
    fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: usize,
    /// Centre in pixel coordinates.
    pub x: f32,
    pub y: f32,
    /// Half-extent in pixels.
    pub size: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub canvas: usize,
    pub max_objects: usize,
    /// Longer captions with coordinates and background, for the extra
    /// visual pre-training stage.
    pub long_captions: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            canvas: 32,
            max_objects: 4,
            long_captions: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// H×W×3, values in [0, 1].
    pub canvas: Tensor,
    pub background: usize,
    pub objects: Vec<SceneObject>,
    pub caption_tokens: Vec<usize>,
}

fn count_word(n: usize) -> &'static str {
    ["one", "two", "three", "four"][n - 1]
}

fn inside(obj: &SceneObject, px: f32, py: f32) -> bool {
    let (dx, dy) = (px - obj.x, py - obj.y);
    match obj.shape {
        ShapeKind::Circle => dx * dx + dy * dy <= obj.size * obj.size,
        ShapeKind::Square => dx.abs() <= obj.size && dy.abs() <= obj.size,
        // Upward isosceles triangle inscribed in the bounding square.
        ShapeKind::Triangle => {
            let t = (dy + obj.size) / (2.0 * obj.size);
            (0.0..=1.0).contains(&t) && dx.abs() <= obj.size * t
        }
    }
}

fn caption(objects: &[SceneObject], background: usize, canvas: usize, long: bool) -> Vec<usize> {
    let third = canvas as f32 / 3.0;
    let band = |v: f32, words: [&'static str; 3]| words[((v / third) as usize).min(2)];
    let grid = |v: f32, axis: char| format!("{axis}{}", ((v / canvas as f32 * 8.0) as usize).min(7));
    let mut words: Vec<String> = Vec::new();
    if long {
        words.push("there".into());
        words.push(if objects.len() == 1 { "is" } else { "are" }.into());
    }
    words.push(count_word(objects.len()).into());
    words.push(if objects.len() == 1 { "object" } else { "objects" }.into());
    for (i, o) in objects.iter().enumerate() {
        if i > 0 {
            words.push("and".into());
        }
        words.push(if o.size >= 4.5 { "large" } else { "small" }.into());
        words.push(COLORS[o.color].0.into());
        words.push(o.shape.word().into());
        // Long captions trade the coarse bands for an 8×8 grid cell.
        if long {
            words.push(grid(o.x, 'x'));
            words.push(grid(o.y, 'y'));
        } else {
            words.push(band(o.x, ["left", "center", "right"]).into());
            words.push(band(o.y, ["top", "middle", "bottom"]).into());
        }
    }
    if long {
        words.push("on".into());
        words.push(BACKGROUNDS[background].0.into());
        words.push("background".into());
    }
    words.push(".".into());
    words.push("<eos>".into());
    words.iter().map(|w| token_id(w)).collect()
}

/// Renders the scene for `seed`. Same seed and config give an identical scene.
pub fn generate_scene(seed: u64, config: &GenerationConfig) -> Result<Scene> {
    if config.max_objects == 0 || config.max_objects > 4 {
        return Err(Error::invalid(format!(
            "max_objects must be in 1..=4, got {}",
            config.max_objects
        )));
    }
    if config.canvas < 8 {
        return Err(Error::invalid(format!("canvas {} too small", config.canvas)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=config.max_objects);
    let background = rng.gen_range(0..BACKGROUNDS.len());
    let c = config.canvas as f32;
    let objects: Vec<SceneObject> = (0..n)
        .map(|_| {
            let size = if rng.gen_bool(0.5) { 3.0 } else { 5.0 } * c / 32.0;
            SceneObject {
                shape: SHAPES[rng.gen_range(0..SHAPES.len())],
                color: rng.gen_range(0..COLORS.len()),
                x: rng.gen_range(size..c - size),
                y: rng.gen_range(size..c - size),
                size,
            }
        })
        .collect();
    render_scene(objects, background, config)
}

/// Rasterizes `objects` over the background and templates the caption.
pub fn render_scene(
    mut objects: Vec<SceneObject>,
    background: usize,
    config: &GenerationConfig,
) -> Result<Scene> {
    if objects.is_empty() || objects.len() > 4 {
        return Err(Error::invalid(format!("{} objects, need 1..=4", objects.len())));
    }
    if background >= BACKGROUNDS.len() || objects.iter().any(|o| o.color >= COLORS.len()) {
        return Err(Error::invalid("palette index out of range"));
    }
    objects.sort_by(|a, b| a.x.total_cmp(&b.x));

    let hw = config.canvas;
    let bg = BACKGROUNDS[background].1;
    let mut data = Vec::with_capacity(hw * hw * 3);
    for py in 0..hw {
        for px in 0..hw {
            let (fx, fy) = (px as f32 + 0.5, py as f32 + 0.5);
            // Later objects paint over earlier ones.
            let rgb = objects
                .iter()
                .rev()
                .find(|o| inside(o, fx, fy))
                .map(|o| COLORS[o.color].1)
                .unwrap_or(bg);
            data.extend_from_slice(&rgb);
        }
    }
    let canvas = Tensor::new(vec![hw, hw, 3], data)?;
    let caption_tokens = caption(&objects, background, hw, config.long_captions);
    Ok(Scene {
        canvas,
        background,
        objects,
        caption_tokens,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub split: String,
    pub item_count: usize,
    pub generator_seed: u64,
    pub generator_version: u32,
    pub generation: GenerationConfig,
    pub item_seeds: Vec<u64>,
}

impl DatasetManifest {
    /// Draws `count` pairwise-distinct item seeds from `generator_seed`.
    pub fn new(
        split: impl Into<String>,
        count: usize,
        generator_seed: u64,
        generation: GenerationConfig,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(generator_seed);
        let mut seen = BTreeSet::new();
        let mut item_seeds = Vec::with_capacity(count);
        while item_seeds.len() < count {
            let s: u64 = rng.gen();
            if seen.insert(s) {
                item_seeds.push(s);
            }
        }
        DatasetManifest {
            split: split.into(),
            item_count: count,
            generator_seed,
            generator_version: GENERATOR_VERSION,
            generation,
            item_seeds,
        }
    }

    pub fn scene(&self, item: usize) -> Result<Scene> {
        generate_scene(self.item_seeds[item], &self.generation)
    }

    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn validate(&self) -> Result<()> {
        if self.generator_version != GENERATOR_VERSION {
            return Err(Error::Format {
                what: "manifest",
                detail: format!(
                    "generator version {} does not match {GENERATOR_VERSION}",
                    self.generator_version
                ),
            });
        }
        if self.item_seeds.len() != self.item_count {
            return Err(Error::Format {
                what: "manifest",
                detail: format!(
                    "item_count {} but {} seeds",
                    self.item_count,
                    self.item_seeds.len()
                ),
            });
        }
        let distinct: BTreeSet<_> = self.item_seeds.iter().collect();
        if distinct.len() != self.item_seeds.len() {
            return Err(Error::Format {
                what: "manifest",
                detail: "item seeds are not pairwise distinct".into(),
            });
        }
        Ok(())
    }
}

/// Splits a shuffled item order into batches; the final short batch is kept.
pub fn iterate_batches(
    manifest: &DatasetManifest,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<Vec<Vec<usize>>> {
    shuffled_batches(manifest.item_count, batch_size, epoch_seed)
}

/// [`iterate_batches`] over indices `0..n`.
pub fn shuffled_batches(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::invalid("empty manifest"));
    }
    if batch_size == 0 || batch_size > n {
        return Err(Error::invalid(format!("batch size {batch_size} must be in 1..={n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[derive(Serialize, Deserialize)]
struct CaptionLine {
    id: usize,
    tokens: Vec<usize>,
}

/// Writes `manifest.json`, `items/<id>.edt` and `captions.jsonl`.
pub fn write_dataset(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    let items = dir.join("items");
    fs::create_dir_all(&items).map_err(|e| Error::io(&items, e))?;
    let mpath = dir.join("manifest.json");
    fs::write(&mpath, serde_json::to_string_pretty(manifest)?).map_err(|e| Error::io(&mpath, e))?;
    let cpath = dir.join("captions.jsonl");
    let mut captions = Vec::new();
    for id in 0..manifest.item_count {
        let scene = manifest.scene(id)?;
        scene.canvas.save(&items.join(format!("{id:06}.edt")))?;
        serde_json::to_writer(
            &mut captions,
            &CaptionLine {
                id,
                tokens: scene.caption_tokens,
            },
        )?;
        captions.push(b'\n');
    }
    let mut f = fs::File::create(&cpath).map_err(|e| Error::io(&cpath, e))?;
    f.write_all(&captions).map_err(|e| Error::io(&cpath, e))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn read_captions(dir: &Path) -> Result<Vec<Vec<usize>>> {
    let cpath = dir.join("captions.jsonl");
    let f = fs::File::open(&cpath).map_err(|e| Error::io(&cpath, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&cpath, e))?;
        let c: CaptionLine = serde_json::from_str(&line)?;
        if c.id != i {
            return Err(Error::Format {
                what: "captions",
                detail: format!("line {i} has id {}", c.id),
            });
        }
        out.push(c.tokens);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> GenerationConfig {
        GenerationConfig::default()
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_scene(0, &cfg()).unwrap();
        let b = generate_scene(0, &cfg()).unwrap();
        assert_eq!(a.canvas.to_bytes(), b.canvas.to_bytes());
        assert_eq!(a, b);
    }

    #[test]
    fn single_object_caption() {
        let c = GenerationConfig {
            max_objects: 1,
            ..cfg()
        };
        let shape_ids = [token_id("circle"), token_id("square"), token_id("triangle")];
        for seed in 0..50 {
            let s = generate_scene(seed, &c).unwrap();
            let n = s.caption_tokens.iter().filter(|t| shape_ids.contains(t)).count();
            assert_eq!(n, 1);
        }
    }

    #[test]
    fn object_counts_vary() {
        let counts: BTreeSet<usize> = (0..1000)
            .map(|s| generate_scene(s, &cfg()).unwrap().objects.len())
            .collect();
        assert!(counts.len() >= 3, "{counts:?}");
    }

    #[test]
    fn captions_stay_in_vocab_and_left_to_right() {
        for seed in 0..200 {
            for long in [false, true] {
                let c = GenerationConfig {
                    long_captions: long,
                    ..cfg()
                };
                let s = generate_scene(seed, &c).unwrap();
                assert!(s.caption_tokens.iter().all(|&t| t < vocab_len()));
                assert!(s.objects.windows(2).all(|w| w[0].x <= w[1].x));
                assert!(s.caption_tokens.len() <= 33, "{}", s.caption_tokens.len());
            }
        }
    }

    #[test]
    fn batch_sizes_keep_short_tail() {
        let m = DatasetManifest::new("t", 10, 3, cfg());
        let b = iterate_batches(&m, 4, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b, iterate_batches(&m, 4, 0).unwrap());
        assert_ne!(b, iterate_batches(&m, 4, 1).unwrap());
    }

    #[test]
    fn empty_manifest_rejected() {
        let m = DatasetManifest::new("t", 0, 3, cfg());
        assert!(iterate_batches(&m, 1, 0).is_err());
    }

    #[test]
    fn dataset_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::new("train", 5, 11, cfg());
        write_dataset(dir.path(), &m).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), m);
        let caps = read_captions(dir.path()).unwrap();
        assert_eq!(caps[3], m.scene(3).unwrap().caption_tokens);
        let t = Tensor::load(&dir.path().join("items/000002.edt")).unwrap();
        assert_eq!(t, m.scene(2).unwrap().canvas);
    }

    proptest::proptest! {
        #[test]
        fn every_item_once_per_epoch(n in 1usize..60, bs in 1usize..20, seed in 0u64..50) {
            let bs = bs.min(n);
            let m = DatasetManifest::new("p", n, seed, cfg());
            let mut seen: Vec<usize> = iterate_batches(&m, bs, seed).unwrap().concat();
            seen.sort_unstable();
            proptest::prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }
    }
}
