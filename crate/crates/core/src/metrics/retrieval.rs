use std::cmp::Ordering;

use super::FeatureSet;
use crate::error::{Error, Result};
use crate::tensor::dot;

/// Mean over relevant positions `k` of precision at `k`.
pub fn average_precision(relevance: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (k, &r) in relevance.iter().enumerate() {
        if r {
            hits += 1;
            total += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::InvalidArgument("average precision needs a relevant item".into()));
    }
    Ok(total / hits as f64)
}

/// Gallery indices by descending cosine to `query`, ties by ascending id.
/// `exclude` drops the gallery item carrying that id.
pub fn rank_gallery(query: &[f64], gallery: &FeatureSet, exclude: Option<u64>) -> Vec<usize> {
    let ids = gallery.ids();
    let mut scored: Vec<(f64, usize)> = (0..gallery.len())
        .filter(|&j| Some(ids[j]) != exclude)
        .map(|j| (dot(query, gallery.row(j)), j))
        .collect();
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then(ids[a.1].cmp(&ids[b.1]))
    });
    scored.into_iter().map(|(_, j)| j).collect()
}

/// Per-query scores of one ranking metric. Queries without any relevant
/// gallery item have no score and are listed in `skipped`.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryScores {
    pub mean: f64,
    pub per_query: Vec<Option<f64>>,
    pub skipped: Vec<u64>,
}

fn check_dims(queries: &FeatureSet, gallery: &FeatureSet) -> Result<()> {
    if queries.dim() != gallery.dim() {
        return Err(Error::shape(
            "retrieval",
            format!("query dim {} vs gallery dim {}", queries.dim(), gallery.dim()),
        ));
    }
    Ok(())
}

fn score_queries(
    queries: &FeatureSet,
    gallery: &FeatureSet,
    exclude_self: bool,
    metric: impl Fn(&[bool]) -> f64,
) -> Result<QueryScores> {
    check_dims(queries, gallery)?;
    let mut per_query = Vec::with_capacity(queries.len());
    let mut skipped = Vec::new();
    for i in 0..queries.len() {
        let id = queries.ids()[i];
        let label = queries.labels()[i];
        let order = rank_gallery(queries.row(i), gallery, exclude_self.then_some(id));
        let rel: Vec<bool> = order.iter().map(|&j| gallery.labels()[j] == label).collect();
        if rel.iter().any(|&r| r) {
            per_query.push(Some(metric(&rel)));
        } else {
            per_query.push(None);
            skipped.push(id);
        }
    }
    let scored: Vec<f64> = per_query.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(Error::InvalidArgument("no query has a relevant gallery item".into()));
    }
    Ok(QueryScores {
        mean: scored.iter().sum::<f64>() / scored.len() as f64,
        per_query,
        skipped,
    })
}

/// Mean average precision with label-equality relevance.
pub fn retrieval_map(queries: &FeatureSet, gallery: &FeatureSet, exclude_self: bool) -> Result<QueryScores> {
    score_queries(queries, gallery, exclude_self, |rel| {
        average_precision(rel).expect("scored queries have a relevant item")
    })
}

/// Precision within the top `R` results, `R` being the relevant count.
pub fn r_precision(queries: &FeatureSet, gallery: &FeatureSet, exclude_self: bool) -> Result<QueryScores> {
    score_queries(queries, gallery, exclude_self, |rel| {
        let r = rel.iter().filter(|&&x| x).count();
        rel[..r].iter().filter(|&&x| x).count() as f64 / r as f64
    })
}

/// Fraction of queries with a relevant item among the top `k`.
pub fn recall_at_k(queries: &FeatureSet, gallery: &FeatureSet, k: usize, exclude_self: bool) -> Result<QueryScores> {
    if k == 0 {
        return Err(Error::InvalidArgument("recall@k needs k ≥ 1".into()));
    }
    score_queries(queries, gallery, exclude_self, |rel| {
        f64::from(u8::from(rel.iter().take(k).any(|&x| x)))
    })
}
