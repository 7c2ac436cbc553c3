//! End-to-end study runners. Each study measures one row of numbers per
//! replicate seed; `run_experiment` collects them into a report and writes
//! artifacts plus a manifest under the configured output directory.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use sha2::{Digest, Sha256};
use xgap::corpus::{generate_corpus, Corpus, CorpusSpec, Sample, Split};
use xgap::inversion::{
    apply_adapter, combine_features, oti_many, ovi_many, train_adapter, AdapterSpec, Direction, InversionResult,
    InversionSpec,
};
use xgap::metrics::{
    modality_gap, probe_model, recall_at_k, retrieval_map, similarity_histogram, zero_shot_classify, FeatureSet,
    Histogram, Modality, Pairing,
};
use xgap::model::{save_checkpoint, ModelConfig, VLModel};
use xgap::rng::derive_seed;
use xgap::tensor::AdamWConfig;
use xgap::train::{finetune_spec, pretrain, LossKind, TrainLog, TrainSpec};

use crate::config::{hex, ExperimentConfig, Study};
use crate::error::{CliError, Result, StageExt};
use crate::report::{slug, Report, Row};

/// Stage seeds of one replicate, each an independent substream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub replicate: u64,
    pub corpus: u64,
    pub model: u64,
    pub train: u64,
    pub invert: u64,
    pub finetune: u64,
    pub adapter: u64,
    pub probe: u64,
}

impl Seeds {
    pub fn derive(replicate: u64) -> Self {
        let s = |label| derive_seed(replicate, label);
        Self {
            replicate,
            corpus: s("corpus"),
            model: s("model"),
            train: s("train"),
            invert: s("invert"),
            finetune: s("finetune"),
            adapter: s("adapter"),
            probe: s("probe"),
        }
    }
}

pub struct Trained {
    pub model: VLModel,
    pub log: TrainLog,
}

/// In-process cache of corpora and pre-trained models, keyed by their full
/// specifications, so studies sharing a setup train it once.
#[derive(Default)]
pub struct Lab {
    corpora: HashMap<String, Arc<Corpus>>,
    models: HashMap<String, Arc<Trained>>,
}

impl Lab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn corpus(&mut self, spec: &CorpusSpec) -> Result<Arc<Corpus>> {
        let key = format!("{spec:?}");
        if let Some(c) = self.corpora.get(&key) {
            return Ok(Arc::clone(c));
        }
        let c = Arc::new(generate_corpus(spec).stage("corpus")?);
        self.corpora.insert(key, Arc::clone(&c));
        Ok(c)
    }

    pub fn pretrained(&mut self, corpus: &Corpus, config: &ModelConfig, spec: &TrainSpec) -> Result<Arc<Trained>> {
        let key = format!("{:?}|{config:?}|{spec:?}", corpus.spec);
        if let Some(t) = self.models.get(&key) {
            return Ok(Arc::clone(t));
        }
        let mut model = VLModel::init(config.clone()).stage("model")?;
        let log = pretrain(&mut model, corpus, spec).stage(format!("pretrain ({})", spec.loss.name()))?;
        let t = Arc::new(Trained { model, log });
        self.models.insert(key, Arc::clone(&t));
        Ok(t)
    }
}

/// Everything a study needs for one replicate.
struct Replicate<'a> {
    cfg: &'a ExperimentConfig,
    seeds: Seeds,
    corpus: Arc<Corpus>,
    dir: PathBuf,
    lab: &'a mut Lab,
    artifacts: &'a mut Vec<PathBuf>,
}

impl Replicate<'_> {
    fn model_with(&mut self, loss: LossKind) -> Result<Arc<Trained>> {
        let config = self.cfg.model.config(self.cfg.corpus.canvas, self.seeds.model)?;
        let spec = TrainSpec {
            loss,
            ..self.cfg.train.spec(self.seeds.train)?
        };
        let t = self.lab.pretrained(&self.corpus, &config, &spec)?;
        let name = format!("model-{}", loss.name());
        let ckpt = self.dir.join(format!("{name}.ckpt"));
        if !ckpt.exists() {
            save_checkpoint(&t.model, &ckpt).stage("save checkpoint")?;
            self.artifacts.push(ckpt);
            self.write(&format!("{name}-train.csv"), &t.log.to_csv())?;
        }
        Ok(t)
    }

    fn model(&mut self) -> Result<Arc<Trained>> {
        let loss = xgap::train::LossKind::from_name(&self.cfg.train.loss)?;
        self.model_with(loss)
    }

    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        self.artifacts.push(path);
        Ok(())
    }

    fn save_features(&mut self, name: &str, fs: &FeatureSet) -> Result<()> {
        self.write(&format!("{name}.csv"), &fs.to_csv())
    }

    fn oti_spec(&self, template: &str, count: usize, steps: usize) -> Result<InversionSpec> {
        let inv = &self.cfg.inversion;
        Ok(InversionSpec {
            count,
            steps,
            template: self.corpus.vocab.tokenize(template)?,
            suffix: self.corpus.vocab.tokenize(&inv.suffix)?,
            optimizer: AdamWConfig {
                lr: inv.oti_lr,
                ..AdamWConfig::default()
            },
            snapshot_every: inv.snapshot_every,
            seed: self.seeds.invert,
            ..InversionSpec::oti(Vec::new())
        })
    }

    fn default_oti_spec(&self) -> Result<InversionSpec> {
        let inv = &self.cfg.inversion;
        self.oti_spec(&inv.template, inv.oti_tokens, inv.oti_steps)
    }

    fn ovi_spec(&self, count: usize) -> InversionSpec {
        let inv = &self.cfg.inversion;
        InversionSpec {
            count,
            steps: inv.ovi_steps,
            optimizer: AdamWConfig {
                lr: inv.ovi_lr,
                ..AdamWConfig::default()
            },
            snapshot_every: inv.snapshot_every,
            seed: self.seeds.invert,
            ..InversionSpec::ovi()
        }
    }
}

/// Query split, capped at `per_class` samples of each class (0 keeps all).
fn queries(c: &Corpus, per_class: usize) -> Vec<&Sample> {
    take_per_class(c.split(Split::Query), per_class)
}

fn gallery(c: &Corpus) -> Vec<&Sample> {
    c.split(Split::Gallery)
}

fn take_per_class(samples: Vec<&Sample>, per_class: usize) -> Vec<&Sample> {
    if per_class == 0 {
        return samples;
    }
    let mut taken: HashMap<usize, usize> = HashMap::new();
    samples
        .into_iter()
        .filter(|s| {
            let n = taken.entry(s.label).or_default();
            *n += 1;
            *n <= per_class
        })
        .collect()
}

/// OTI features of `samples`' images, keyed by sample id.
fn invert_images(model: &VLModel, samples: &[&Sample], spec: &InversionSpec) -> Result<(FeatureSet, Vec<InversionResult>)> {
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let keys: Vec<u64> = samples.iter().map(|s| s.id).collect();
    let results = oti_many(model, &images, &keys, spec).stage("oti")?;
    let fs = inverted_set(Modality::Oti, samples, &results)?;
    Ok((fs, results))
}

/// OVI features of caption `caption` of each sample, keyed by sample id.
fn invert_captions(
    model: &VLModel,
    samples: &[&Sample],
    caption: usize,
    spec: &InversionSpec,
) -> Result<(FeatureSet, Vec<InversionResult>)> {
    let texts: Vec<Vec<usize>> = samples.iter().map(|s| s.captions[caption].clone()).collect();
    let keys: Vec<u64> = samples.iter().map(|s| s.id).collect();
    let results = ovi_many(model, &texts, &keys, spec).stage("ovi")?;
    let fs = inverted_set(Modality::Ovi, samples, &results)?;
    Ok((fs, results))
}

fn inverted_set(modality: Modality, samples: &[&Sample], results: &[InversionResult]) -> Result<FeatureSet> {
    Ok(FeatureSet::from_rows(
        modality,
        samples.iter().map(|s| s.id).collect(),
        samples.iter().map(|s| s.label).collect(),
        results.iter().map(|r| r.feature.clone()).collect(),
    )?)
}

fn map(q: &FeatureSet, g: &FeatureSet) -> Result<f64> {
    Ok(retrieval_map(q, g, false).stage("evaluate")?.mean)
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n.max(1) as f64
}

/// Modality gap between the gallery images and their first captions.
fn gallery_gap(model: &VLModel, gallery: &[&Sample]) -> Result<f64> {
    let images = FeatureSet::encode_images(model, gallery)?;
    let texts = FeatureSet::encode_captions(model, gallery, 0)?;
    Ok(modality_gap(&images, &texts)?.magnitude)
}

fn col(name: impl Into<String>, v: f64) -> (String, f64) {
    (name.into(), v)
}

fn histograms_csv(hists: &[Histogram]) -> String {
    let mut out = String::from("label,lower,upper,count\n");
    for h in hists {
        for (k, c) in h.counts.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{c}", h.label, h.edges[k], h.edges[k + 1]);
        }
    }
    out
}

/// Per-step loss averaged over queries.
fn mean_trajectory_csv(results: &[InversionResult]) -> String {
    let mut out = String::from("step,loss\n");
    let steps = results.first().map_or(0, |r| r.losses.len());
    for s in 0..steps {
        let _ = writeln!(out, "{s},{}", mean(results.iter().map(|r| r.losses[s])));
    }
    out
}

fn oti_vs_baseline(r: &mut Replicate) -> Result<Row> {
    let c = Arc::clone(&r.corpus);
    let t = r.model()?;
    let per = r.cfg.evaluation.oti_queries_per_class;
    let (queries, gallery) = (queries(&c, per), gallery(&c));
    let native = FeatureSet::encode_images(&t.model, &queries)?;
    let gal = FeatureSet::encode_images(&t.model, &gallery)?;
    let (oti, _) = invert_images(&t.model, &queries, &r.default_oti_spec()?)?;
    r.save_features("query-image", &native)?;
    r.save_features("query-oti", &oti)?;
    r.save_features("gallery-image", &gal)?;
    Ok(vec![col("baseline_map", map(&native, &gal)?), col("oti_map", map(&oti, &gal)?)])
}

fn ovi_vs_baseline(r: &mut Replicate) -> Result<Row> {
    let c = Arc::clone(&r.corpus);
    let t = r.model()?;
    let per = r.cfg.evaluation.ovi_queries_per_class;
    let (queries, gallery) = (queries(&c, per), gallery(&c));
    let native = FeatureSet::encode_captions(&t.model, &queries, 0)?;
    let gal = FeatureSet::encode_captions(&t.model, &gallery, 0)?;
    let spec = r.ovi_spec(r.cfg.inversion.ovi_patches);
    let (ovi, _) = invert_captions(&t.model, &queries, 0, &spec)?;
    r.save_features("query-text", &native)?;
    r.save_features("query-ovi", &ovi)?;
    r.save_features("gallery-text", &gal)?;
    Ok(vec![col("baseline_map", map(&native, &gal)?), col("ovi_map", map(&ovi, &gal)?)])
}

fn zero_shot(r: &mut Replicate) -> Result<Row> {
    let c = Arc::clone(&r.corpus);
    let t = r.model()?;
    let m = &t.model;
    let tau = m.temperature;
    let prompt_tokens = r.corpus.class_prompts(&r.cfg.evaluation.prompt_template)?;
    let prompts = FeatureSet::encode_prompts(m, &prompt_tokens)?;
    let queries = queries(&c, r.cfg.evaluation.oti_queries_per_class);
    let native = FeatureSet::encode_images(m, &queries)?;
    let (oti, _) = invert_images(m, &queries, &r.default_oti_spec()?)?;

    let spec = r.ovi_spec(r.cfg.inversion.ovi_patches);
    let keys: Vec<u64> = (0..prompt_tokens.len() as u64).map(|k| u64::MAX - k).collect();
    let results = ovi_many(m, &prompt_tokens, &keys, &spec).stage("ovi prompts")?;
    let ovi_prompts = FeatureSet::from_rows(
        Modality::Ovi,
        prompts.ids().to_vec(),
        prompts.labels().to_vec(),
        results.iter().map(|x| x.feature.clone()).collect(),
    )?;
    r.save_features("prompts-text", &prompts)?;
    r.save_features("prompts-ovi", &ovi_prompts)?;
    let acc = |i: &FeatureSet, p: &FeatureSet| -> Result<f64> { Ok(zero_shot_classify(i, p, tau).stage("zero-shot")?.accuracy) };
    Ok(vec![
        col("native_acc", acc(&native, &prompts)?),
        col("oti_acc", acc(&oti, &prompts)?),
        col("ovi_prompt_acc", acc(&native, &ovi_prompts)?),
    ])
}

fn feature_mixing(r: &mut Replicate) -> Result<Row> {
    let c = Arc::clone(&r.corpus);
    let t = r.model()?;
    let queries = queries(&c, r.cfg.evaluation.oti_queries_per_class);
    let gallery = gallery(&c);
    let native = FeatureSet::encode_images(&t.model, &queries)?;
    let gal = FeatureSet::encode_images(&t.model, &gallery)?;
    let (oti, _) = invert_images(&t.model, &queries, &r.default_oti_spec()?)?;
    let mut row = Vec::new();
    for &alpha in &r.cfg.evaluation.alphas {
        let rows = (0..native.len())
            .map(|i| combine_features(native.row(i), oti.row(i), alpha))
            .collect::<xgap::Result<Vec<_>>>()?;
        let mixed = FeatureSet::from_rows(Modality::Mixed, native.ids().to_vec(), native.labels().to_vec(), rows)?;
        row.push(col(format!("map_alpha_{}", slug(&alpha.to_string())), map(&mixed, &gal)?));
    }
    Ok(row)
}

fn slip_parity(r: &mut Replicate) -> Result<Row> {
    let c = Arc::clone(&r.corpus);
    let t = r.model()?;
    let queries = queries(&c, r.cfg.evaluation.oti_queries_per_class);
    let gallery = gallery(&c);
    let native = FeatureSet::encode_images(&t.model, &queries)?;
    let gal = FeatureSet::encode_images(&t.model, &gallery)?;
    let (oti, _) = invert_images(&t.model, &queries, &r.default_oti_spec()?)?;
    let (base, inv) = (map(&native, &gal)?, map(&oti, &gal)?);
    let gap = gallery_gap(&t.model, &gallery)?;
    let reference = r.model_with(LossKind::from_name(&r.cfg.evaluation.compare_loss)?)?;
    let compare_gap = gallery_gap(&reference.model, &gallery)?;
    Ok(vec![
        col("baseline_map", base),
        col("oti_map", inv),
        col("map_difference", inv - base),
        col("gap", gap),
        col("compare_gap", compare_gap),
    ])
}

fn temperature_gap(r: &mut Replicate) -> Result<Row> {
    let c = Arc::clone(&r.corpus);
    let t = r.model()?;
    let gallery = gallery(&c);
    let ev = &r.cfg.evaluation;
    let mut row = vec![col("pretrain_gap", gallery_gap(&t.model, &gallery)?)];
    for &tau in &ev.finetune_temperatures {
        let mut spec = finetune_spec(tau, ev.finetune_steps, r.seeds.finetune);
        spec.optimizer.lr = ev.finetune_lr;
        let mut m = t.model.clone();
        let log = pretrain(&mut m, &r.corpus, &spec).stage(format!("finetune at temperature {tau}"))?;
        let name = format!("finetune-tau-{}", slug(&tau.to_string()));
        save_checkpoint(&m, &r.dir.join(format!("{name}.ckpt"))).stage("save checkpoint")?;
        r.artifacts.push(r.dir.join(format!("{name}.ckpt")));
        r.write(&format!("{name}-train.csv"), &log.to_csv())?;
        row.push(col(format!("gap_tau_{}", slug(&tau.to_string())), gallery_gap(&m, &gallery)?));
    }
    Ok(row)
}

fn drift(r: &mut Replicate) -> Result<Row> {
    let c = Arc::clone(&r.corpus);
    let t = r.model()?;
    let m = &t.model;
    let ev = r.cfg.evaluation.clone();
    let classes = r.corpus.classes.len();
    let mut queries = queries(&c, ev.drift_queries.div_ceil(classes));
    queries.truncate(ev.drift_queries);
    let native = FeatureSet::encode_images(m, &queries)?;
    let captions = FeatureSet::encode_captions(m, &queries, 0)?;
    let bins = ev.histogram_bins;
    let text_image = similarity_histogram(&captions, &native, bins, Pairing::Matched, "text-image")?;
    let image_image = similarity_histogram(&native, &native, bins, Pairing::AllPairs, "image-image")?;
    let mut hists = vec![text_image.clone(), image_image.clone()];
    let mut row = Vec::new();
    for &count in &ev.drift_token_counts {
        let mut spec = r.oti_spec(&r.cfg.inversion.template, count, ev.drift_steps)?;
        spec.snapshot_every = 10;
        let (oti, results) = invert_images(m, &queries, &spec)?;
        let at = |step: usize| -> Result<FeatureSet> {
            let rows = results
                .iter()
                .map(|x| {
                    x.snapshots
                        .iter()
                        .find(|(s, _)| *s == step)
                        .map(|(_, f)| f.clone())
                        .ok_or_else(|| CliError::Usage(format!("no snapshot at step {step}")))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(FeatureSet::from_rows(Modality::Oti, native.ids().to_vec(), native.labels().to_vec(), rows)?)
        };
        let early = similarity_histogram(&at(10)?, &native, bins, Pairing::Matched, &format!("oti-image-r{count}-step10"))?;
        let late = similarity_histogram(&oti, &native, bins, Pairing::Matched, &format!("oti-image-r{count}-final"))?;
        let cos = mean((0..oti.len()).map(|i| xgap::tensor::dot(oti.row(i), native.row(i))));
        row.push(col(format!("final_loss_r{count}"), mean(results.iter().map(InversionResult::final_loss))));
        row.push(col(format!("cosine_r{count}"), cos));
        row.push(col(format!("hist_mean_step10_r{count}"), early.mean));
        row.push(col(format!("hist_mean_final_r{count}"), late.mean));
        r.write(&format!("drift-r{count}-trajectory.csv"), &mean_trajectory_csv(&results))?;
        hists.push(early);
        hists.push(late);
    }
    row.push(col("text_image_mean", text_image.mean));
    row.push(col("image_image_mean", image_image.mean));
    r.write("drift-histograms.csv", &histograms_csv(&hists))?;
    Ok(row)
}

fn misalignment(r: &mut Replicate) -> Result<Row> {
    let t = r.model()?;
    let spec = r.cfg.probe_corpus(r.seeds.probe)?;
    let probe = r.lab.corpus(&spec)?;
    let p = probe_model(&t.model, &probe, &r.cfg.evaluation.prompt_template).stage("misalignment probe")?;
    Ok(vec![
        col("initial", p.initial as f64),
        col("after_prompt_filter", p.after_prompt_filter as f64),
        col("kept", p.kept as f64),
        col("inter_r_precision", p.inter_r_precision),
        col("intra_map", p.intra_map),
        col("intra_r_precision", p.intra_r_precision),
    ])
}

fn adapters(r: &mut Replicate) -> Result<Row> {
    let c = Arc::clone(&r.corpus);
    let t = r.model()?;
    let m = &t.model;
    let ev = &r.cfg.evaluation;
    let train: Vec<&Sample> = r.corpus.split(Split::Train).into_iter().take(ev.adapter_pairs).collect();
    let ti = FeatureSet::encode_images(m, &train)?;
    let tt = FeatureSet::encode_captions(m, &train, 0)?;
    let spec = AdapterSpec {
        steps: ev.adapter_steps,
        seed: r.seeds.adapter,
        ..AdapterSpec::default()
    };
    let pairs = |a: &FeatureSet, b: &FeatureSet| -> Vec<(Vec<f64>, Vec<f64>)> {
        (0..a.len()).map(|i| (a.row(i).to_vec(), b.row(i).to_vec())).collect()
    };
    let i2t = train_adapter(&pairs(&ti, &tt), Direction::ImageToText, &spec).stage("image adapter")?;
    let t2i = train_adapter(&pairs(&tt, &ti), Direction::TextToImage, &spec).stage("text adapter")?;

    let queries = queries(&c, ev.oti_queries_per_class);
    let gallery = gallery(&c);
    let qi = FeatureSet::encode_images(m, &queries)?;
    let gi = FeatureSet::encode_images(m, &gallery)?;
    let qt = FeatureSet::encode_captions(m, &queries, 0)?;
    let gt = FeatureSet::encode_captions(m, &gallery, 0)?;
    Ok(vec![
        col("image_baseline_map", map(&qi, &gi)?),
        col("image_adapter_map", map(&apply_adapter(&i2t, &qi)?, &gi)?),
        col("text_baseline_map", map(&qt, &gt)?),
        col("text_adapter_map", map(&apply_adapter(&t2i, &qt)?, &gt)?),
    ])
}

fn template_ablation(r: &mut Replicate) -> Result<Row> {
    let c = Arc::clone(&r.corpus);
    let t = r.model()?;
    let queries = queries(&c, r.cfg.evaluation.oti_queries_per_class);
    let gallery = gallery(&c);
    let native = FeatureSet::encode_images(&t.model, &queries)?;
    let gal = FeatureSet::encode_images(&t.model, &gallery)?;
    let mut row = vec![col("baseline_map", map(&native, &gal)?)];
    let inv = &r.cfg.inversion;
    for template in &r.cfg.evaluation.templates {
        let spec = r.oti_spec(template, inv.oti_tokens, inv.oti_steps)?;
        let (oti, _) = invert_images(&t.model, &queries, &spec)?;
        row.push(col(format!("map_{}", slug(template)), map(&oti, &gal)?));
    }
    Ok(row)
}

fn patch_ablation(r: &mut Replicate) -> Result<Row> {
    let c = Arc::clone(&r.corpus);
    let t = r.model()?;
    let queries = queries(&c, r.cfg.evaluation.ovi_queries_per_class);
    let gallery = gallery(&c);
    let native = FeatureSet::encode_captions(&t.model, &queries, 0)?;
    let gal = FeatureSet::encode_captions(&t.model, &gallery, 0)?;
    let mut row = vec![col("baseline_map", map(&native, &gal)?)];
    for &p in &r.cfg.evaluation.patch_counts {
        let (ovi, results) = invert_captions(&t.model, &queries, 0, &r.ovi_spec(p))?;
        row.push(col(format!("map_p{p}"), map(&ovi, &gal)?));
        row.push(col(format!("final_loss_p{p}"), mean(results.iter().map(InversionResult::final_loss))));
    }
    Ok(row)
}

fn intra_oti(r: &mut Replicate) -> Result<Row> {
    let c = Arc::clone(&r.corpus);
    let t = r.model()?;
    let queries = queries(&c, r.cfg.evaluation.oti_queries_per_class);
    let gallery = gallery(&c);
    let native = FeatureSet::encode_images(&t.model, &queries)?;
    let gal = FeatureSet::encode_images(&t.model, &gallery)?;
    let spec = r.default_oti_spec()?;
    let (oti_q, _) = invert_images(&t.model, &queries, &spec)?;
    let (oti_g, _) = invert_images(&t.model, &gallery, &spec)?;
    r.save_features("gallery-oti", &oti_g)?;
    Ok(vec![
        col("baseline_map", map(&native, &gal)?),
        col("oti_map", map(&oti_q, &gal)?),
        col("intra_oti_map", map(&oti_q, &oti_g)?),
    ])
}

fn image_text(r: &mut Replicate) -> Result<Row> {
    let c = Arc::clone(&r.corpus);
    let t = r.model()?;
    let m = &t.model;
    let queries = queries(&c, r.cfg.evaluation.oti_queries_per_class);
    let gallery = gallery(&c);
    let qi = FeatureSet::encode_images(m, &queries)?;
    let qt = FeatureSet::encode_captions(m, &queries, 0)?;
    let gi = FeatureSet::encode_images(m, &gallery)?;
    let gt = FeatureSet::encode_captions(m, &gallery, 0)?;
    let mut row = vec![col("i2t_map", map(&qi, &gt)?), col("t2i_map", map(&qt, &gi)?)];
    for &k in &r.cfg.evaluation.recall_ks {
        row.push(col(format!("i2t_recall_at_{k}"), recall_at_k(&qi, &gt, k, false)?.mean));
        row.push(col(format!("t2i_recall_at_{k}"), recall_at_k(&qt, &gi, k, false)?.mean));
    }
    Ok(row)
}

fn run_study(r: &mut Replicate) -> Result<Row> {
    match r.cfg.study {
        Study::OtiVsBaseline => oti_vs_baseline(r),
        Study::OviVsBaseline => ovi_vs_baseline(r),
        Study::ZeroShot => zero_shot(r),
        Study::FeatureMixing => feature_mixing(r),
        Study::SlipParity => slip_parity(r),
        Study::TemperatureGap => temperature_gap(r),
        Study::Drift => drift(r),
        Study::MisalignmentProbe => misalignment(r),
        Study::Adapters => adapters(r),
        Study::TemplateAblation => template_ablation(r),
        Study::PatchAblation => patch_ablation(r),
        Study::IntraOti => intra_oti(r),
        Study::ImageText => image_text(r),
    }
}

pub const REPORT: &str = "report.csv";
pub const MANIFEST: &str = "manifest.txt";

/// Runs the configured study for every seed, reusing whatever `lab` has
/// already trained. Writes `report.csv`, `manifest.txt` and per-seed
/// artifacts under `config.output`.
pub fn run_experiment_in(config: &ExperimentConfig, lab: &mut Lab) -> Result<Report> {
    let out = &config.output;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut artifacts = Vec::new();
    let mut report = Report::default();
    for &seed in &config.seeds {
        let seeds = Seeds::derive(seed);
        let dir = out.join(format!("seed-{seed}"));
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        // Stale checkpoints from an earlier run would otherwise be kept.
        for entry in fs::read_dir(&dir).map_err(|e| CliError::io(&dir, e))? {
            let path = entry.map_err(|e| CliError::io(&dir, e))?.path();
            if path.is_file() {
                fs::remove_file(&path).map_err(|e| CliError::io(&path, e))?;
            }
        }
        let corpus = lab.corpus(&config.corpus.spec(seeds.corpus)?)?;
        let mut rep = Replicate {
            cfg: config,
            seeds,
            corpus,
            dir,
            lab,
            artifacts: &mut artifacts,
        };
        let row = run_study(&mut rep).stage(format!("{} seed {seed}", config.study.name()))?;
        report.push(seed, row)?;
    }
    let report_path = out.join(REPORT);
    fs::write(&report_path, report.to_csv()).map_err(|e| CliError::io(&report_path, e))?;
    let config_path = out.join("config.toml");
    fs::write(&config_path, config.canonical()).map_err(|e| CliError::io(&config_path, e))?;
    write_manifest(config, out, &artifacts)?;
    Ok(report)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<Report> {
    run_experiment_in(config, &mut Lab::new())
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn write_manifest(config: &ExperimentConfig, out: &Path, artifacts: &[PathBuf]) -> Result<()> {
    let mut m = String::from("xgap-experiment\t1\n");
    let _ = writeln!(m, "study\t{}", config.study.name());
    let _ = writeln!(m, "config_sha256\t{}", config.digest());
    let _ = writeln!(m, "xgap_version\t{}", xgap::VERSION);
    let _ = writeln!(m, "cli_version\t{}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(m, "tensorfile_version\t{}", xgap::tensorfile::VERSION);
    for &seed in &config.seeds {
        let s = Seeds::derive(seed);
        let _ = writeln!(
            m,
            "seed\t{seed}\tcorpus={}\tmodel={}\ttrain={}\tinvert={}\tfinetune={}\tadapter={}\tprobe={}",
            s.corpus, s.model, s.train, s.invert, s.finetune, s.adapter, s.probe
        );
    }
    let mut listed = vec![out.join(REPORT)];
    listed.extend(artifacts.iter().cloned());
    for path in &listed {
        let rel = path.strip_prefix(out).unwrap_or(path);
        let _ = writeln!(m, "artifact\t{}\t{}", rel.display(), file_digest(path)?);
    }
    let path = out.join(MANIFEST);
    fs::write(&path, m).map_err(|e| CliError::io(&path, e))
}
