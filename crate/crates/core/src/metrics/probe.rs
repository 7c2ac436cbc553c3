use super::{r_precision, rank_gallery, retrieval_map, FeatureSet};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::VLModel;
use crate::tensor::dot;

/// Fewest deletions that leave every `true` ahead of every `false`, and the
/// smallest cut achieving it. Items above the cut that are `false` and items
/// below it that are `true` are the ones to delete.
pub fn min_sort_deletions(seq: &[bool]) -> (usize, usize) {
    let total_true = seq.iter().filter(|&&x| x).count();
    let (mut false_above, mut true_above) = (0, 0);
    let mut best = (total_true, 0);
    for (i, &x) in seq.iter().enumerate() {
        if x {
            true_above += 1;
        } else {
            false_above += 1;
        }
        let cost = false_above + (total_true - true_above);
        if cost < best.0 {
            best = (cost, i + 1);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub initial: usize,
    pub after_prompt_filter: usize,
    pub removed_for_order: Vec<usize>,
    pub kept: usize,
    pub kept_ids: Vec<u64>,
    pub inter_r_precision: f64,
    pub intra_map: f64,
    pub intra_r_precision: f64,
}

/// Filters a two-class image set until text-to-image retrieval with the
/// class prompts is perfect, then measures image-to-image retrieval on what
/// remains. `prompts` holds one feature per class, labels 0 and 1.
pub fn misalignment_probe(images: &FeatureSet, prompts: &FeatureSet) -> Result<ProbeReport> {
    if prompts.len() != 2 || prompts.labels() != [0, 1] {
        return Err(Error::InvalidArgument("misalignment probe needs exactly 2 class prompts".into()));
    }
    if images.labels().iter().any(|&l| l > 1) {
        return Err(Error::InvalidArgument("misalignment probe needs a 2-class image set".into()));
    }
    if images.dim() != prompts.dim() {
        return Err(Error::shape("misalignment_probe", "feature dims differ"));
    }
    let initial = images.len();

    let keep: Vec<usize> = (0..images.len())
        .filter(|&i| {
            let l = images.labels()[i];
            dot(images.row(i), prompts.row(1 - l)) <= dot(images.row(i), prompts.row(l))
        })
        .collect();
    let mut set = filtered(images, &keep)?;
    let after_prompt_filter = set.len();

    let mut removed_for_order = Vec::with_capacity(2);
    for class in 0..2 {
        let order = rank_gallery(prompts.row(class), &set, None);
        let rel: Vec<bool> = order.iter().map(|&j| set.labels()[j] == class).collect();
        let (count, cut) = min_sort_deletions(&rel);
        let drop: Vec<usize> = order
            .iter()
            .enumerate()
            .filter(|&(k, _)| (k < cut) != rel[k])
            .map(|(_, &j)| j)
            .collect();
        debug_assert_eq!(drop.len(), count);
        let kept: Vec<usize> = (0..set.len()).filter(|j| !drop.contains(j)).collect();
        set = filtered(&set, &kept)?;
        removed_for_order.push(count);
    }

    let inter = r_precision(prompts, &set, false)?;
    let intra_map = retrieval_map(&set, &set, true)?;
    let intra_rp = r_precision(&set, &set, true)?;
    Ok(ProbeReport {
        initial,
        after_prompt_filter,
        removed_for_order,
        kept: set.len(),
        kept_ids: set.ids().to_vec(),
        inter_r_precision: inter.mean,
        intra_map: intra_map.mean,
        intra_r_precision: intra_rp.mean,
    })
}

/// Subset that must keep both classes.
fn filtered(set: &FeatureSet, keep: &[usize]) -> Result<FeatureSet> {
    for class in 0..2 {
        if !keep.iter().any(|&i| set.labels()[i] == class) {
            return Err(Error::InvalidArgument(format!(
                "misalignment probe filtered class {class} to emptiness"
            )));
        }
    }
    set.subset(keep)
}

/// Runs the probe on every image of a two-class corpus with prompts
/// `"<template> <class name>"`.
pub fn probe_model(model: &VLModel, corpus: &Corpus, template: &str) -> Result<ProbeReport> {
    if corpus.classes.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "misalignment probe needs a 2-class corpus, got {}",
            corpus.classes.len()
        )));
    }
    let samples: Vec<_> = corpus.samples.iter().collect();
    let images = FeatureSet::encode_images(model, &samples)?;
    let prompts = FeatureSet::encode_prompts(model, &corpus.class_prompts(template)?)?;
    misalignment_probe(&images, &prompts)
}
