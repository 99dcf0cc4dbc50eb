//! Procedural image–caption dataset: colored shapes on styled backgrounds,
//! each with five paraphrased captions drawn from a closed grammar.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const CAPTIONS_PER_SAMPLE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

pub const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        SHAPES
            .iter()
            .copied()
            .find(|v| v.word() == s)
            .ok_or_else(|| Error::invalid(format!("unknown shape {s:?}")))
    }
}

/// (name, rgb) palette; every name is a single caption word.
pub const COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [0.90, 0.12, 0.10]),
    ("green", [0.12, 0.78, 0.18]),
    ("blue", [0.15, 0.25, 0.90]),
    ("yellow", [0.95, 0.86, 0.12]),
    ("purple", [0.60, 0.18, 0.80]),
    ("orange", [0.95, 0.55, 0.10]),
    ("cyan", [0.10, 0.80, 0.85]),
    ("pink", [0.95, 0.45, 0.70]),
];

pub const BACKGROUNDS: [&str; 4] = ["plain", "dark", "gradient", "checkered"];
pub const TEXTURES: [&str; 3] = ["flat", "striped", "noisy"];

/// Discrete generative factors of one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attributes {
    pub shape: Shape,
    pub color: usize,
    pub background: usize,
    pub texture: usize,
}

impl Attributes {
    pub fn color_word(&self) -> &'static str {
        COLORS[self.color].0
    }

    pub fn background_word(&self) -> &'static str {
        BACKGROUNDS[self.background]
    }

    pub fn texture_word(&self) -> &'static str {
        TEXTURES[self.texture]
    }
}

#[derive(Debug, Clone)]
pub struct SynthSample<S: Scalar = f32> {
    pub id: usize,
    pub image: Tensor<S>,
    pub captions: [String; CAPTIONS_PER_SAMPLE],
    pub attributes: Attributes,
}

/// Train/val/test partition over sample indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSpec {
    /// 80/10/10 by index order; val and test get `size/10` each (within one
    /// of a tenth), train the remainder.
    pub fn new(size: usize) -> Self {
        let tenth = size / 10;
        let train_end = size - 2 * tenth;
        SplitSpec {
            train: (0..train_end).collect(),
            val: (train_end..train_end + tenth).collect(),
            test: (train_end + tenth..size).collect(),
        }
    }

    pub fn of(&self, idx: usize) -> &'static str {
        if self.train.contains(&idx) {
            "train"
        } else if self.val.contains(&idx) {
            "val"
        } else {
            "test"
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset<S: Scalar = f32> {
    pub seed: u64,
    pub samples: Vec<SynthSample<S>>,
    pub split: SplitSpec,
}

// ── Caption grammar ─────────────────────────────────────────────────

/// The five paraphrase templates. All of them mention the color and shape;
/// two also mention the background.
pub fn captions_for(attr: &Attributes) -> [String; CAPTIONS_PER_SAMPLE] {
    let color = attr.color_word();
    let shape = attr.shape.word();
    let bg = attr.background_word();
    [
        format!("a {color} {shape} on a {bg} background"),
        format!("an image of a {color} {shape}"),
        format!("the picture shows a {color} {shape}"),
        format!("a {shape} that is {color}"),
        format!("a {shape} drawn in {color} over a {bg} backdrop"),
    ]
}

/// Closed vocabulary: exactly the words the caption grammar can emit, plus
/// a padding token at id 0.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
}

pub const PAD_TOKEN: &str = "<pad>";
pub const PAD_ID: usize = 0;

impl Vocab {
    pub fn closed() -> Self {
        let mut set = std::collections::BTreeSet::new();
        for shape in SHAPES {
            for color in 0..COLORS.len() {
                for background in 0..BACKGROUNDS.len() {
                    let attr = Attributes {
                        shape,
                        color,
                        background,
                        texture: 0,
                    };
                    for cap in captions_for(&attr) {
                        for w in cap.split_whitespace() {
                            set.insert(w.to_string());
                        }
                    }
                }
            }
        }
        let mut words = vec![PAD_TOKEN.to_string()];
        words.extend(set);
        Vocab { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.words
            .iter()
            .position(|w| w == word)
            .ok_or_else(|| Error::UnknownToken(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownToken(format!("id {id}")))
    }

    /// Whitespace tokenization against the closed vocabulary.
    pub fn encode(&self, caption: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> = caption
            .split_whitespace()
            .map(|w| self.id(w))
            .collect::<Result<_>>()?;
        if ids.is_empty() {
            return Err(Error::invalid("empty caption"));
        }
        Ok(ids)
    }
}

// ── Renderer ────────────────────────────────────────────────────────

fn render_background<S: Scalar>(attr: &Attributes) -> Vec<S> {
    let n = IMAGE_SIZE;
    let mut img = vec![S::zero(); n * n * 3];
    for y in 0..n {
        for x in 0..n {
            let v: f64 = match attr.background {
                0 => 0.85,
                1 => 0.15,
                2 => 0.2 + 0.6 * (x as f64) / ((n - 1) as f64),
                _ => {
                    if (x / 4 + y / 4) % 2 == 0 {
                        0.70
                    } else {
                        0.30
                    }
                }
            };
            for c in 0..3 {
                img[(y * n + x) * 3 + c] = S::from_f64_c(v);
            }
        }
    }
    img
}

fn inside_shape(shape: Shape, x: f64, y: f64, cx: f64, cy: f64, r: f64) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    match shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= r && dy.abs() <= r,
        Shape::Triangle => {
            // upward triangle: apex at (cx, cy - r), base at cy + r
            if dy < -r || dy > r {
                return false;
            }
            let halfwidth = r * (dy + r) / (2.0 * r);
            dx.abs() <= halfwidth
        }
    }
}

/// Draws the sample image. Deterministic in `(attributes, render_rng)`.
fn render<S: Scalar>(attr: &Attributes, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let n = IMAGE_SIZE;
    let mut img = render_background::<S>(attr);
    let cx = rng.random_range(11.0..21.0);
    let cy = rng.random_range(11.0..21.0);
    let r = rng.random_range(5.0..10.0);
    let rgb = COLORS[attr.color].1;
    for y in 0..n {
        for x in 0..n {
            if !inside_shape(attr.shape, x as f64 + 0.5, y as f64 + 0.5, cx, cy, r) {
                continue;
            }
            let mut px = rgb;
            match attr.texture {
                1 => {
                    // striped: darken alternating 2px horizontal bands
                    if (y / 2) % 2 == 1 {
                        for c in &mut px {
                            *c *= 0.45;
                        }
                    }
                }
                2 => {
                    // noisy: per-pixel jitter
                    for c in &mut px {
                        *c = (*c + rng.random_range(-0.15..0.15)).clamp(0.0, 1.0);
                    }
                }
                _ => {}
            }
            for c in 0..3 {
                img[(y * n + x) * 3 + c] = S::from_f64_c(px[c]);
            }
        }
    }
    Tensor::from_vec(vec![n, n, 3], img).expect("renderer output is finite")
}

/// Per-sample RNG derived from `(seed, index)` only, so parallel and
/// sequential generation agree.
fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

pub fn generate_sample<S: Scalar>(seed: u64, index: usize) -> SynthSample<S> {
    let mut rng = sample_rng(seed, index);
    let attr = Attributes {
        shape: SHAPES[rng.random_range(0..SHAPES.len())],
        color: rng.random_range(0..COLORS.len()),
        background: rng.random_range(0..BACKGROUNDS.len()),
        texture: rng.random_range(0..TEXTURES.len()),
    };
    let image = render(&attr, &mut rng);
    let captions = captions_for(&attr);
    SynthSample {
        id: index,
        image,
        captions,
        attributes: attr,
    }
}

/// Generates the full dataset with its 80/10/10 split. Deterministic for a
/// fixed seed.
pub fn generate_dataset<S: Scalar>(seed: u64, size: usize) -> Result<Dataset<S>> {
    if size < 10 {
        return Err(Error::invalid(format!("dataset size {size} < 10")));
    }
    let samples = (0..size).map(|i| generate_sample(seed, i)).collect();
    Ok(Dataset {
        seed,
        samples,
        split: SplitSpec::new(size),
    })
}

/// Uniform draw over the five captions, re-drawn per epoch: the choice is a
/// pure function of `(epoch_seed, sample id)`.
pub fn sample_caption<S: Scalar>(sample: &SynthSample<S>, epoch_seed: u64) -> &str {
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(sample.id as u64 + 1);
    &sample.captions[rng.random_range(0..CAPTIONS_PER_SAMPLE)]
}

// ── Persistence ─────────────────────────────────────────────────────

impl<S: Scalar> Dataset<S> {
    /// Writes `images.vtf` (one [N,32,32,3] tensor), `manifest.txt` (one
    /// record per line), and `split.txt`.
    pub fn save(&self, dir: impl AsRef<std::path::Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;

        let n = self.samples.len();
        let mut all = Vec::with_capacity(n * IMAGE_SIZE * IMAGE_SIZE * 3);
        for s in &self.samples {
            all.extend_from_slice(s.image.data());
        }
        let images = Tensor::from_vec(vec![n, IMAGE_SIZE, IMAGE_SIZE, 3], all)?;
        io::write_vtf(dir.join("images.vtf"), &images)?;

        let mut manifest = String::new();
        manifest.push_str(&format!("# seed\t{}\n# size\t{}\n", self.seed, n));
        for s in &self.samples {
            let a = &s.attributes;
            manifest.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                s.id,
                a.shape.word(),
                a.color_word(),
                a.background_word(),
                a.texture_word(),
                s.captions.join("\t"),
            ));
        }
        std::fs::write(dir.join("manifest.txt"), manifest)?;

        let mut split = String::new();
        for s in &self.samples {
            split.push_str(&format!("{} {}\n", s.id, self.split.of(s.id)));
        }
        std::fs::write(dir.join("split.txt"), split)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<std::path::Path>) -> Result<Dataset<S>> {
        let dir = dir.as_ref();
        let images: Tensor<S> = io::read_vtf(dir.join("images.vtf"))?;
        let shape = images.shape().to_vec();
        if shape.len() != 4 || shape[1] != IMAGE_SIZE || shape[2] != IMAGE_SIZE || shape[3] != 3 {
            return Err(Error::shape(
                "dataset_load",
                format!("images.vtf has shape {shape:?}"),
            ));
        }
        let n = shape[0];
        let per = IMAGE_SIZE * IMAGE_SIZE * 3;

        let text = std::fs::read_to_string(dir.join("manifest.txt"))?;
        let bad = |details: String| Error::Malformed {
            path: dir.join("manifest.txt").display().to_string(),
            details,
        };
        let mut seed = 0u64;
        let mut samples = Vec::with_capacity(n);
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("# seed\t") {
                seed = rest.parse().map_err(|_| bad("bad seed".into()))?;
                continue;
            }
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 + CAPTIONS_PER_SAMPLE {
                return Err(bad(format!("record has {} fields", fields.len())));
            }
            let id: usize = fields[0].parse().map_err(|_| bad("bad id".into()))?;
            if id >= n {
                return Err(bad(format!("id {id} out of range {n}")));
            }
            let attributes = Attributes {
                shape: Shape::parse(fields[1])?,
                color: COLORS
                    .iter()
                    .position(|(w, _)| *w == fields[2])
                    .ok_or_else(|| bad(format!("bad color {:?}", fields[2])))?,
                background: BACKGROUNDS
                    .iter()
                    .position(|w| *w == fields[3])
                    .ok_or_else(|| bad(format!("bad background {:?}", fields[3])))?,
                texture: TEXTURES
                    .iter()
                    .position(|w| *w == fields[4])
                    .ok_or_else(|| bad(format!("bad texture {:?}", fields[4])))?,
            };
            let captions: [String; CAPTIONS_PER_SAMPLE] = fields[5..]
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .try_into()
                .expect("field count checked above");
            let image = Tensor::from_vec(
                vec![IMAGE_SIZE, IMAGE_SIZE, 3],
                images.data()[id * per..(id + 1) * per].to_vec(),
            )?;
            samples.push(SynthSample {
                id,
                image,
                captions,
                attributes,
            });
        }
        if samples.len() != n {
            return Err(bad(format!("{} records for {} images", samples.len(), n)));
        }
        samples.sort_by_key(|s| s.id);
        Ok(Dataset {
            seed,
            samples,
            split: SplitSpec::new(n),
        })
    }

    /// Hex digest over the manifest records; identifies dataset content.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for s in &self.samples {
            hasher.update(s.id.to_le_bytes());
            hasher.update(s.attributes.shape.word());
            hasher.update(s.attributes.color_word());
            hasher.update(s.attributes.background_word());
            hasher.update(s.attributes.texture_word());
            for c in &s.captions {
                hasher.update(c.as_bytes());
            }
        }
        let out = hasher.finalize();
        out.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
