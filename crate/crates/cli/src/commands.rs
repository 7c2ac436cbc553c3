//! Subcommand definitions and their implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use xgap::corpus::{generate_corpus, load_corpus, save_corpus, Corpus, Sample, Split};
use xgap::inversion::{combine_features, oti_many, ovi_many, InversionResult, InversionSpec};
use xgap::metrics::{
    modality_gap, r_precision, recall_at_k, retrieval_map, similarity_histogram, zero_shot_classify, FeatureSet,
    Modality, Pairing,
};
use xgap::model::{load_checkpoint, save_checkpoint, VLModel};
use xgap::rng::derive_seed;
use xgap::train::{finetune_spec, pretrain};

use crate::config::{CorpusSection, ExperimentConfig, ModelSection, TrainSection};
use crate::error::{CliError, Result, StageExt};
use crate::experiment::run_experiment;

#[derive(Debug, Parser)]
#[command(name = "xgap", version, about = "Toy-scale study of intra-modal misalignment in dual-encoder models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Query,
    Gallery,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Query => Split::Query,
            SplitArg::Gallery => Split::Gallery,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Oti,
    Ovi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EncodeWhat {
    Image,
    Text,
    Prompts,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Img2img,
    Txt2txt,
    Zeroshot,
    Imgtxt,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus from a TOML spec (corpus keys plus `seed`).
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train a fresh model on a corpus.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "clip")]
        loss: String,
        #[arg(long, default_value_t = 0.01)]
        tau: f64,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 100)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training log CSV.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune only the projection layers at a new temperature.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        tau: f64,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Invert images into text features (OTI) or captions into image features (OVI).
    Invert {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        mode: Mode,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "query")]
        split: SplitArg,
        /// Pseudo-tokens per image (OTI).
        #[arg(short = 'R', default_value_t = 1)]
        tokens: usize,
        /// Pseudo-patches per caption (OVI).
        #[arg(short = 'P', default_value_t = 1)]
        patches: usize,
        /// Optimization steps; defaults to 150 for OTI and 1000 for OVI.
        #[arg(short = 'S')]
        steps: Option<usize>,
        #[arg(long, default_value = "a photo of")]
        template: String,
        /// Use at most this many samples per class; 0 keeps all.
        #[arg(long, default_value_t = 0)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also invert the gallery split and write it here.
        #[arg(long)]
        gallery: Option<PathBuf>,
        /// Loss trajectory CSV (`id,step,loss`).
        #[arg(long)]
        trajectories: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write native image, caption or class-prompt features.
    Encode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "query")]
        split: SplitArg,
        #[arg(long, value_enum)]
        what: EncodeWhat,
        /// Prompt prefix for `--what prompts`.
        #[arg(long, default_value = "a photo of a")]
        template: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score query features against gallery features.
    Eval {
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long)]
        query: PathBuf,
        /// Gallery features; class prompts for `zeroshot`.
        #[arg(long)]
        gallery: PathBuf,
        /// Blend the query with `--mix` features: (1-α)·query + α·mix.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        mix: Option<PathBuf>,
        #[arg(long, default_value_t = 0.01)]
        tau: f64,
        /// Leave each query's own id out of its ranking.
        #[arg(long)]
        exclude_self: bool,
        #[arg(long)]
        report: PathBuf,
    },
    /// Modality gap, similarity histograms and inversion trajectories of a model.
    Diagnose {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Query images inverted for the trajectory diagnostics.
        #[arg(long, default_value_t = 12)]
        queries: usize,
        #[arg(short = 'R', default_value_t = 1)]
        tokens: usize,
        #[arg(short = 'S', default_value_t = 150)]
        steps: usize,
        #[arg(long, default_value_t = 40)]
        bins: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run a study preset end to end.
    Experiment {
        #[arg(long)]
        config: PathBuf,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(p) => fs::create_dir_all(p).map_err(|e| CliError::io(p, e)),
        None => Ok(()),
    }
}

fn open_corpus(dir: &Path) -> Result<Corpus> {
    load_corpus(dir).map_err(|e| CliError::Usage(format!("cannot load corpus {}: {e}", dir.display())))
}

fn open_model(path: &Path) -> Result<VLModel> {
    load_checkpoint(path).map_err(|e| CliError::Usage(format!("cannot load checkpoint {}: {e}", path.display())))
}

fn open_features(path: &Path) -> Result<FeatureSet> {
    FeatureSet::load(path).map_err(|e| CliError::Usage(format!("cannot load features {}: {e}", path.display())))
}

fn take_per_class(samples: Vec<&Sample>, per_class: usize) -> Vec<&Sample> {
    if per_class == 0 {
        return samples;
    }
    let mut seen = std::collections::HashMap::<usize, usize>::new();
    samples
        .into_iter()
        .filter(|s| {
            let n = seen.entry(s.label).or_default();
            *n += 1;
            *n <= per_class
        })
        .collect()
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out } => gen_data(&spec, &out),
        Command::Pretrain {
            corpus,
            loss,
            tau,
            steps,
            batch_size,
            lr,
            warmup,
            seed,
            log,
            out,
        } => {
            let c = open_corpus(&corpus)?;
            let train = TrainSection {
                loss,
                temperature: tau,
                steps,
                batch_size,
                lr,
                warmup_steps: warmup,
                ..TrainSection::default()
            };
            let spec = train.spec(derive_seed(seed, "train"))?;
            let config = ModelSection::default().config(c.spec.canvas, derive_seed(seed, "model"))?;
            let mut model = VLModel::init(config)?;
            let l = pretrain(&mut model, &c, &spec).stage("pretrain")?;
            finish_training(&model, &l, &out, log.as_deref())
        }
        Command::Finetune {
            ckpt,
            corpus,
            tau,
            steps,
            batch_size,
            lr,
            seed,
            log,
            out,
        } => {
            let c = open_corpus(&corpus)?;
            let mut model = open_model(&ckpt)?;
            let mut spec = finetune_spec(tau, steps, derive_seed(seed, "finetune"));
            spec.optimizer.lr = lr;
            spec.batch_size = batch_size;
            let l = pretrain(&mut model, &c, &spec).stage("finetune")?;
            finish_training(&model, &l, &out, log.as_deref())
        }
        Command::Invert {
            ckpt,
            mode,
            corpus,
            split,
            tokens,
            patches,
            steps,
            template,
            per_class,
            seed,
            gallery,
            trajectories,
            out,
        } => {
            let c = open_corpus(&corpus)?;
            let model = open_model(&ckpt)?;
            let seed = derive_seed(seed, "invert");
            let spec = match mode {
                Mode::Oti => InversionSpec {
                    count: tokens,
                    steps: steps.unwrap_or(150),
                    seed,
                    ..InversionSpec::oti(c.vocab.tokenize(&template)?)
                },
                Mode::Ovi => InversionSpec {
                    count: patches,
                    steps: steps.unwrap_or(1000),
                    seed,
                    ..InversionSpec::ovi()
                },
            };
            let mut traj = String::from("id,step,loss\n");
            let samples = take_per_class(c.split(split.into()), per_class);
            let fs = invert(&model, &samples, mode, &spec, &mut traj)?;
            ensure_parent(&out)?;
            fs.save(&out).stage("write features")?;
            if let Some(g) = gallery {
                let fs = invert(&model, &c.split(Split::Gallery), mode, &spec, &mut traj)?;
                ensure_parent(&g)?;
                fs.save(&g).stage("write gallery features")?;
            }
            if let Some(t) = trajectories {
                write(&t, &traj)?;
            }
            Ok(())
        }
        Command::Encode {
            ckpt,
            corpus,
            split,
            what,
            template,
            out,
        } => {
            let c = open_corpus(&corpus)?;
            let model = open_model(&ckpt)?;
            let samples = c.split(split.into());
            let fs = match what {
                EncodeWhat::Image => FeatureSet::encode_images(&model, &samples)?,
                EncodeWhat::Text => FeatureSet::encode_captions(&model, &samples, 0)?,
                EncodeWhat::Prompts => FeatureSet::encode_prompts(&model, &c.class_prompts(&template)?)?,
            };
            ensure_parent(&out)?;
            fs.save(&out).stage("write features")?;
            Ok(())
        }
        Command::Eval {
            task,
            query,
            gallery,
            alpha,
            mix,
            tau,
            exclude_self,
            report,
        } => {
            let mut q = open_features(&query)?;
            let g = open_features(&gallery)?;
            match (alpha, mix) {
                (Some(a), Some(m)) => q = mixed(&q, &open_features(&m)?, a)?,
                (None, None) => {}
                _ => return Err(CliError::Usage("--alpha and --mix must be given together".into())),
            }
            if q.dim() != g.dim() {
                return Err(CliError::Usage(format!(
                    "query features have dimension {} but gallery features have {}",
                    q.dim(),
                    g.dim()
                )));
            }
            write(&report, &evaluate(task, &q, &g, tau, exclude_self)?)
        }
        Command::Diagnose {
            ckpt,
            corpus,
            queries,
            tokens,
            steps,
            bins,
            seed,
            report,
        } => diagnose(&ckpt, &corpus, queries, tokens, steps, bins, seed, &report),
        Command::Experiment { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = run_experiment(&cfg)?;
            print!("{}", report.to_csv());
            Ok(())
        }
    }
}

fn gen_data(spec: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec).map_err(|e| CliError::io(spec, e))?;
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    let seed = match table.remove("seed") {
        None => 0,
        Some(toml::Value::Integer(s)) if s >= 0 => s as u64,
        Some(v) => return Err(CliError::Config(format!("seed must be a non-negative integer, got {v}"))),
    };
    let section: CorpusSection = table.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    let corpus = generate_corpus(&section.spec(seed)?).stage("gen-data")?;
    save_corpus(&corpus, out).stage("write corpus")?;
    Ok(())
}

fn finish_training(model: &VLModel, log: &xgap::train::TrainLog, out: &Path, log_path: Option<&Path>) -> Result<()> {
    ensure_parent(out)?;
    save_checkpoint(model, out).stage("write checkpoint")?;
    if let Some(p) = log_path {
        write(p, &log.to_csv())?;
    }
    Ok(())
}

fn invert(model: &VLModel, samples: &[&Sample], mode: Mode, spec: &InversionSpec, traj: &mut String) -> Result<FeatureSet> {
    if samples.is_empty() {
        return Err(CliError::Usage("nothing to invert: the split is empty".into()));
    }
    let keys: Vec<u64> = samples.iter().map(|s| s.id).collect();
    let (modality, results): (Modality, Vec<InversionResult>) = match mode {
        Mode::Oti => {
            let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
            (Modality::Oti, oti_many(model, &images, &keys, spec).stage("oti")?)
        }
        Mode::Ovi => {
            let texts: Vec<_> = samples.iter().map(|s| s.captions[0].clone()).collect();
            (Modality::Ovi, ovi_many(model, &texts, &keys, spec).stage("ovi")?)
        }
    };
    for (s, r) in samples.iter().zip(&results) {
        for (step, l) in r.losses.iter().enumerate() {
            let _ = writeln!(traj, "{},{step},{l}", s.id);
        }
    }
    Ok(FeatureSet::from_rows(
        modality,
        keys,
        samples.iter().map(|s| s.label).collect(),
        results.into_iter().map(|r| r.feature).collect(),
    )?)
}

fn mixed(q: &FeatureSet, m: &FeatureSet, alpha: f64) -> Result<FeatureSet> {
    if q.ids() != m.ids() {
        return Err(CliError::Usage("--mix features must have the same ids, in order, as the query".into()));
    }
    let rows = (0..q.len())
        .map(|i| combine_features(q.row(i), m.row(i), alpha))
        .collect::<xgap::Result<Vec<_>>>()?;
    Ok(FeatureSet::from_rows(Modality::Mixed, q.ids().to_vec(), q.labels().to_vec(), rows)?)
}

/// `metric,value` CSV for one evaluation task.
pub fn evaluate(task: Task, q: &FeatureSet, g: &FeatureSet, tau: f64, exclude_self: bool) -> Result<String> {
    let mut out = String::from("metric,value\n");
    let mut put = |k: &str, v: f64| {
        let _ = writeln!(out, "{k},{v}");
    };
    match task {
        Task::Zeroshot => {
            let z = zero_shot_classify(q, g, tau)?;
            put("accuracy", z.accuracy);
            put("queries", q.len() as f64);
        }
        Task::Img2img | Task::Txt2txt | Task::Imgtxt => {
            let m = retrieval_map(q, g, exclude_self)?;
            put("map", m.mean);
            put("r_precision", r_precision(q, g, exclude_self)?.mean);
            for k in [1, 5, 10] {
                put(&format!("recall_at_{k}"), recall_at_k(q, g, k, exclude_self)?.mean);
            }
            put("queries", q.len() as f64);
            put("skipped", m.skipped.len() as f64);
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn diagnose(
    ckpt: &Path,
    corpus: &Path,
    queries: usize,
    tokens: usize,
    steps: usize,
    bins: usize,
    seed: u64,
    report: &Path,
) -> Result<()> {
    let c = open_corpus(corpus)?;
    let model = open_model(ckpt)?;
    fs::create_dir_all(report).map_err(|e| CliError::io(report, e))?;

    let mut gap = String::from("split,images,texts,magnitude\n");
    for split in [Split::Train, Split::Query, Split::Gallery] {
        let s = c.split(split);
        let g = modality_gap(&FeatureSet::encode_images(&model, &s)?, &FeatureSet::encode_captions(&model, &s, 0)?)?;
        let _ = writeln!(gap, "{},{},{},{}", split.name(), g.counts.0, g.counts.1, g.magnitude);
    }
    write(&report.join("gap.csv"), &gap)?;

    let classes = c.classes.len();
    let mut picked = take_per_class(c.split(Split::Query), queries.div_ceil(classes).max(1));
    picked.truncate(queries.max(1));
    let images = FeatureSet::encode_images(&model, &picked)?;
    let texts = FeatureSet::encode_captions(&model, &picked, 0)?;
    let spec = InversionSpec {
        count: tokens,
        steps,
        snapshot_every: 10,
        seed: derive_seed(seed, "invert"),
        ..InversionSpec::oti(c.vocab.tokenize("a photo of")?)
    };
    let mut traj = String::from("id,step,loss\n");
    let oti = invert(&model, &picked, Mode::Oti, &spec, &mut traj)?;
    write(&report.join("trajectories.csv"), &traj)?;

    let mut hists = vec![
        similarity_histogram(&images, &images, bins, Pairing::AllPairs, "image-image")?,
        similarity_histogram(&texts, &texts, bins, Pairing::AllPairs, "text-text")?,
        similarity_histogram(&texts, &images, bins, Pairing::Matched, "text-image-matched")?,
        similarity_histogram(&texts, &images, bins, Pairing::AllPairs, "text-image-unmatched")?,
        similarity_histogram(&oti, &images, bins, Pairing::Matched, "oti-image-matched")?,
    ];
    hists.push(similarity_histogram(&oti, &images, bins, Pairing::AllPairs, "oti-image-unmatched")?);
    let mut out = String::from("label,lower,upper,count\n");
    let mut means = String::from("label,mean,pairs\n");
    for h in &hists {
        for (k, n) in h.counts.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{n}", h.label, h.edges[k], h.edges[k + 1]);
        }
        let _ = writeln!(means, "{},{},{}", h.label, h.mean, h.total());
    }
    write(&report.join("histograms.csv"), &out)?;
    write(&report.join("histogram-means.csv"), &means)
}
