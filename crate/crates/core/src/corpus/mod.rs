//! Deterministic shape-world image–caption corpus.
//!
//! Each class is a (shape, color) pair. Images jitter position, size,
//! background level and pixel noise; captions name the color and shape
//! through a few paraphrase templates, so labels are recoverable from text.

mod io;
mod render;
mod vocab;

pub use io::{load_corpus, save_corpus};
pub use render::{augment, render_image, Color, Image, Scene, Shape, SIZE_RANGE};
pub use vocab::{Vocabulary, PAD};

use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

/// Caption templates; each caption is `<template> <size>? <color> <shape>`.
pub const CAPTION_TEMPLATES: [&str; 3] = ["a photo of a", "an image of a", "we see a"];

/// Words used by inversion prompt templates that are not caption words.
pub const EXTRA_WORDS: [&str; 3] = ["in", "this", "photo"];

pub const SIZE_WORDS: [&str; 2] = ["small", "large"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?}"))),
        }
    }
}

/// Generation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub shapes: Vec<Shape>,
    pub colors: Vec<Color>,
    pub samples_per_class: usize,
    pub canvas: usize,
    pub seed: u64,
    /// Pixel noise standard deviation.
    pub noise: f64,
    /// Fraction of each class held out as queries.
    pub query_fraction: f64,
    /// Fraction of each class held out as retrieval gallery.
    pub gallery_fraction: f64,
    /// Prefix "small"/"large" to captions of clearly small/large shapes.
    pub size_words: bool,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            shapes: vec![Shape::Square, Shape::Circle, Shape::Triangle, Shape::Cross],
            colors: vec![Color::Red, Color::Green, Color::Blue],
            samples_per_class: 400,
            canvas: 16,
            seed: 0,
            noise: 0.05,
            query_fraction: 0.05,
            gallery_fraction: 0.1,
            size_words: false,
        }
    }
}

impl CorpusSpec {
    pub fn classes(&self) -> Vec<(Shape, Color)> {
        self.shapes
            .iter()
            .flat_map(|&s| self.colors.iter().map(move |&c| (s, c)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        let mut shapes = self.shapes.clone();
        shapes.sort();
        shapes.dedup();
        let mut colors = self.colors.clone();
        colors.sort();
        colors.dedup();
        if shapes.len() != self.shapes.len() || colors.len() != self.colors.len() {
            return fail("duplicate shape or color".into());
        }
        if self.classes().len() < 2 {
            return fail("need at least 2 classes".into());
        }
        if self.samples_per_class < 4 {
            return fail(format!("need at least 4 samples per class, got {}", self.samples_per_class));
        }
        if self.canvas < 8 {
            return fail(format!("canvas of {}px is too small for shapes (minimum 8)", self.canvas));
        }
        let fractions_ok = self.query_fraction > 0.0
            && self.gallery_fraction > 0.0
            && self.query_fraction + self.gallery_fraction < 1.0;
        if !fractions_ok {
            return fail("query and gallery fractions must be positive and leave room for training".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail(format!("bad noise level {}", self.noise));
        }
        Ok(())
    }

    /// Split sizes `(train, query, gallery)` per class.
    fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.samples_per_class;
        let q = ((n as f64 * self.query_fraction).round() as usize).max(1);
        let g = ((n as f64 * self.gallery_fraction).round() as usize).max(1);
        let (q, g) = if q + g >= n { (1, 1) } else { (q, g) };
        (n - q - g, q, g)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub scene: Scene,
    pub image: Image,
    /// Token sequences; the first is the designated query caption.
    pub captions: Vec<Vec<usize>>,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub vocab: Vocabulary,
    pub classes: Vec<(Shape, Color)>,
    pub samples: Vec<Sample>,
}

pub fn build_vocabulary() -> Vocabulary {
    let mut words: Vec<&str> = Vec::new();
    for t in CAPTION_TEMPLATES {
        words.extend(t.split_whitespace());
    }
    words.extend(EXTRA_WORDS);
    words.extend(SIZE_WORDS);
    words.extend(Color::ALL.iter().map(|c| c.name()));
    words.extend(Shape::ALL.iter().map(|s| s.name()));
    let mut seen = std::collections::HashSet::new();
    words.retain(|w| seen.insert(*w));
    Vocabulary::new(words).expect("static vocabulary is valid")
}

fn size_word(size: f64) -> Option<&'static str> {
    if size < 0.9 {
        Some(SIZE_WORDS[0])
    } else if size > 1.1 {
        Some(SIZE_WORDS[1])
    } else {
        None
    }
}

fn caption_text(template: &str, scene: &Scene, spec: &CorpusSpec) -> String {
    let mut words = vec![template];
    if spec.size_words {
        words.extend(size_word(scene.size));
    }
    words.push(scene.color.name());
    words.push(scene.shape.name());
    words.join(" ")
}

fn sample_scene<R: Rng>(shape: Shape, color: Color, spec: &CorpusSpec, rng: &mut R) -> Scene {
    let size = rng.random_range(SIZE_RANGE.0..=SIZE_RANGE.1);
    let lim = Scene::max_offset(size, spec.canvas);
    let ox = if lim > 0.0 { rng.random_range(-lim..=lim) } else { 0.0 };
    let oy = if lim > 0.0 { rng.random_range(-lim..=lim) } else { 0.0 };
    Scene {
        shape,
        color,
        offset: (ox, oy),
        size,
        background: rng.random_range(0.0..=0.3),
        noise: spec.noise,
    }
}

/// Generates the corpus described by `spec`; fully determined by its seed.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let vocab = build_vocabulary();
    let classes = spec.classes();
    let (n_train, n_query, _) = spec.split_sizes();
    let mut scene_rng = rng::rng(rng::derive_seed(spec.seed, "scenes"));
    let mut split_rng = rng::rng(rng::derive_seed(spec.seed, "splits"));
    let pixel_seed = rng::derive_seed(spec.seed, "pixels");

    let mut samples = Vec::with_capacity(classes.len() * spec.samples_per_class);
    for (label, &(shape, color)) in classes.iter().enumerate() {
        let mut splits: Vec<Split> = (0..spec.samples_per_class)
            .map(|i| {
                if i < n_train {
                    Split::Train
                } else if i < n_train + n_query {
                    Split::Query
                } else {
                    Split::Gallery
                }
            })
            .collect();
        splits.shuffle(&mut split_rng);
        for split in splits {
            let id = samples.len() as u64;
            let scene = sample_scene(shape, color, spec, &mut scene_rng);
            let image = render_image(&scene, spec.canvas, rng::derive_indexed(pixel_seed, id))?;
            let mut templates = CAPTION_TEMPLATES.to_vec();
            templates.shuffle(&mut scene_rng);
            let captions = templates
                .iter()
                .map(|t| vocab.tokenize(&caption_text(t, &scene, spec)))
                .collect::<Result<Vec<_>>>()?;
            samples.push(Sample {
                id,
                scene,
                image,
                captions,
                label,
                split,
            });
        }
    }
    Ok(Corpus {
        spec: spec.clone(),
        vocab,
        classes,
        samples,
    })
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn class_name(&self, label: usize) -> String {
        let (s, c) = self.classes[label];
        format!("{} {}", c.name(), s.name())
    }

    /// Longest caption in tokens.
    pub fn max_caption_len(&self) -> usize {
        self.samples
            .iter()
            .flat_map(|s| s.captions.iter().map(Vec::len))
            .max()
            .unwrap_or(0)
    }

    /// Prompt `"<template> <color> <shape>"` for every class, in label order.
    pub fn class_prompts(&self, template: &str) -> Result<Vec<Vec<usize>>> {
        (0..self.classes.len())
            .map(|l| self.vocab.tokenize(&format!("{template} {}", self.class_name(l))))
            .collect()
    }

    /// SHA-256 over the manifest text and all pixel values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(io::manifest_text(self).as_bytes());
        for s in &self.samples {
            for v in &s.image.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
