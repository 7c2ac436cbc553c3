//! Corpus directory: `manifest.txt` (tab-separated records) plus
//! `images.bin` holding one `[N, 3, S, S]` tensor.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{build_vocabulary, Color, Corpus, CorpusSpec, Image, Sample, Scene, Shape, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tensorfile::{self, Bundle, PayloadKind};

const HEADER: &str = "xgap-corpus\t1";
pub const MANIFEST: &str = "manifest.txt";
pub const IMAGES: &str = "images.bin";

pub(super) fn manifest_text(c: &Corpus) -> String {
    let s = &c.spec;
    let mut out = String::new();
    let names = |v: Vec<&str>| v.join(",");
    let _ = writeln!(out, "{HEADER}");
    let _ = writeln!(out, "shapes\t{}", names(s.shapes.iter().map(|x| x.name()).collect()));
    let _ = writeln!(out, "colors\t{}", names(s.colors.iter().map(|x| x.name()).collect()));
    let _ = writeln!(out, "samples_per_class\t{}", s.samples_per_class);
    let _ = writeln!(out, "canvas\t{}", s.canvas);
    let _ = writeln!(out, "seed\t{}", s.seed);
    let _ = writeln!(out, "noise\t{}", s.noise);
    let _ = writeln!(out, "query_fraction\t{}", s.query_fraction);
    let _ = writeln!(out, "gallery_fraction\t{}", s.gallery_fraction);
    let _ = writeln!(out, "size_words\t{}", s.size_words);
    let _ = writeln!(out, "vocab\t{}", c.vocab.words().join(" "));
    for (i, (shape, color)) in c.classes.iter().enumerate() {
        let _ = writeln!(out, "class\t{i}\t{}\t{}", shape.name(), color.name());
    }
    for smp in &c.samples {
        let sc = &smp.scene;
        let captions = smp
            .captions
            .iter()
            .map(|cap| c.vocab.detokenize(cap).expect("corpus captions use its vocabulary"))
            .collect::<Vec<_>>()
            .join("|");
        let _ = writeln!(
            out,
            "sample\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            smp.id,
            smp.label,
            smp.split.name(),
            sc.shape.name(),
            sc.color.name(),
            sc.offset.0,
            sc.offset.1,
            sc.size,
            sc.background,
            sc.noise,
            captions
        );
    }
    out
}

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST), manifest_text(corpus))?;
    let s = corpus.spec.canvas;
    let data: Vec<f64> = corpus.samples.iter().flat_map(|x| x.image.data.iter().copied()).collect();
    let images = Tensor::new(vec![corpus.samples.len(), 3, s, s], data)?;
    tensorfile::save(
        &dir.join(IMAGES),
        &Bundle {
            kind: PayloadKind::Images,
            header: Vec::new(),
            tensors: vec![("images".into(), images)],
        },
    )
}

fn parse<T: std::str::FromStr>(field: &str, what: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::Format(format!("bad {what} {field:?} in corpus manifest")))
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::Format("not a corpus manifest".into()));
    }
    let mut spec = CorpusSpec::default();
    let mut classes = Vec::new();
    let mut records = Vec::new();
    let mut vocab_line = None;
    for line in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        match fields.as_slice() {
            ["shapes", v] => {
                spec.shapes = v.split(',').map(Shape::from_name).collect::<Result<_>>()?
            }
            ["colors", v] => {
                spec.colors = v.split(',').map(Color::from_name).collect::<Result<_>>()?
            }
            ["samples_per_class", v] => spec.samples_per_class = parse(v, "count")?,
            ["canvas", v] => spec.canvas = parse(v, "canvas")?,
            ["seed", v] => spec.seed = parse(v, "seed")?,
            ["noise", v] => spec.noise = parse(v, "noise")?,
            ["query_fraction", v] => spec.query_fraction = parse(v, "fraction")?,
            ["gallery_fraction", v] => spec.gallery_fraction = parse(v, "fraction")?,
            ["size_words", v] => spec.size_words = parse(v, "flag")?,
            ["vocab", v] => vocab_line = Some(v.to_string()),
            ["class", i, shape, color] => {
                if parse::<usize>(i, "class index")? != classes.len() {
                    return Err(Error::Format("class records out of order".into()));
                }
                classes.push((Shape::from_name(shape)?, Color::from_name(color)?));
            }
            ["sample", rest @ ..] if rest.len() == 11 => records.push(rest.to_vec()),
            _ => return Err(Error::Format(format!("unrecognized manifest line {line:?}"))),
        }
    }
    let vocab = build_vocabulary();
    if vocab_line.as_deref() != Some(vocab.words().join(" ").as_str()) {
        return Err(Error::Format("corpus vocabulary does not match this build".into()));
    }
    if classes != spec.classes() {
        return Err(Error::Format("class table disagrees with shapes × colors".into()));
    }

    let bundle = tensorfile::load(&dir.join(IMAGES))?;
    if bundle.kind != PayloadKind::Images {
        return Err(Error::Format("images file has the wrong payload kind".into()));
    }
    let images = bundle.tensor("images")?;
    let s = spec.canvas;
    if images.shape() != [records.len(), 3, s, s] {
        return Err(Error::Format(format!(
            "images tensor {:?} does not match {} samples of {s}px",
            images.shape(),
            records.len()
        )));
    }
    let per = 3 * s * s;
    let mut samples = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let scene = Scene {
            shape: Shape::from_name(r[3])?,
            color: Color::from_name(r[4])?,
            offset: (parse(r[5], "offset")?, parse(r[6], "offset")?),
            size: parse(r[7], "size")?,
            background: parse(r[8], "background")?,
            noise: parse(r[9], "noise")?,
        };
        let captions = r[10]
            .split('|')
            .map(|t| vocab.tokenize(t))
            .collect::<Result<Vec<_>>>()?;
        let label: usize = parse(r[1], "label")?;
        if label >= classes.len() {
            return Err(Error::Format(format!("label {label} out of range")));
        }
        samples.push(Sample {
            id: parse(r[0], "id")?,
            scene,
            image: Image::new(3, s, s, images.data()[i * per..(i + 1) * per].to_vec())?,
            captions,
            label,
            split: Split::from_name(r[2])?,
        });
    }
    Ok(Corpus {
        spec,
        vocab,
        classes,
        samples,
    })
}
