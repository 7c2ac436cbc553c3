use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use xgap::metrics::{
    average_precision, min_sort_deletions, misalignment_probe, modality_gap, r_precision, rank_gallery,
    recall_at_k, retrieval_map, similarity_histogram, zero_shot_classify, FeatureSet, Modality, Pairing,
};

fn set(modality: Modality, ids: Vec<u64>, labels: Vec<usize>, rows: Vec<Vec<f64>>) -> FeatureSet {
    FeatureSet::from_rows(modality, ids, labels, rows).unwrap()
}

fn score(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Rank of gallery item `j`: how many kept items beat it on score, or tie
/// with it and carry a smaller id.
fn oracle_rank(q: &[f64], g: &FeatureSet, j: usize, skip: Option<u64>) -> usize {
    let sj = score(q, g.row(j));
    (0..g.len())
        .filter(|&k| k != j && Some(g.ids()[k]) != skip)
        .filter(|&k| {
            let sk = score(q, g.row(k));
            sk > sj || (sk == sj && g.ids()[k] < g.ids()[j])
        })
        .count()
}

struct Oracle {
    ap: Vec<Option<f64>>,
    rp: Vec<Option<f64>>,
    recall: Vec<Option<f64>>,
}

fn oracle(q: &FeatureSet, g: &FeatureSet, k: usize, exclude: bool) -> Oracle {
    let mut out = Oracle { ap: vec![], rp: vec![], recall: vec![] };
    for i in 0..q.len() {
        let skip = exclude.then_some(q.ids()[i]);
        let relevant: Vec<usize> = (0..g.len())
            .filter(|&j| Some(g.ids()[j]) != skip && g.labels()[j] == q.labels()[i])
            .collect();
        if relevant.is_empty() {
            out.ap.push(None);
            out.rp.push(None);
            out.recall.push(None);
            continue;
        }
        let ranks: Vec<usize> = relevant.iter().map(|&j| oracle_rank(q.row(i), g, j, skip)).collect();
        let mut ap = 0.0;
        for &r in &ranks {
            let above = ranks.iter().filter(|&&o| o <= r).count();
            ap += above as f64 / (r + 1) as f64;
        }
        let n = relevant.len();
        out.ap.push(Some(ap / n as f64));
        out.rp.push(Some(ranks.iter().filter(|&&r| r < n).count() as f64 / n as f64));
        out.recall.push(Some(if ranks.iter().any(|&r| r < k) { 1.0 } else { 0.0 }));
    }
    out
}

fn mean(v: &[Option<f64>]) -> f64 {
    let s: Vec<f64> = v.iter().flatten().copied().collect();
    s.iter().sum::<f64>() / s.len() as f64
}

fn nonzero_row(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2i8..=2, d)
        .prop_filter("nonzero", |v| v.iter().any(|&x| x != 0))
        .prop_map(|v| v.into_iter().map(f64::from).collect())
}

fn instance() -> impl Strategy<Value = (FeatureSet, FeatureSet, usize, bool)> {
    (2usize..=3, 1usize..=8, 1usize..=4, 1usize..=8, any::<bool>()).prop_flat_map(|(d, ng, nq, k, shared)| {
        let gallery = prop::collection::vec((nonzero_row(d), 0usize..3), ng);
        let queries = prop::collection::vec((nonzero_row(d), 0usize..3), nq);
        (gallery, queries, Just(k), Just(shared))
    })
    .prop_map(|(gallery, queries, k, shared)| {
        let g = set(
            Modality::Image,
            (0..gallery.len() as u64).map(|i| i * 3 % 11).collect(),
            gallery.iter().map(|x| x.1).collect(),
            gallery.into_iter().map(|x| x.0).collect(),
        );
        // With `shared`, queries reuse gallery ids so exclusion has work to do.
        let ids = (0..queries.len() as u64)
            .map(|i| if shared { i * 3 % 11 } else { 100 + i })
            .collect();
        let q = set(
            Modality::Image,
            ids,
            queries.iter().map(|x| x.1).collect(),
            queries.into_iter().map(|x| x.0).collect(),
        );
        (q, g, k, shared)
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, ..ProptestConfig::default() })]

    #[test]
    fn metrics_agree_with_brute_force((q, g, k, exclude) in instance()) {
        let o = oracle(&q, &g, k, exclude);
        let any_scored = o.ap.iter().any(Option::is_some);
        let map = retrieval_map(&q, &g, exclude);
        let rp = r_precision(&q, &g, exclude);
        let rec = recall_at_k(&q, &g, k, exclude);
        if !any_scored {
            prop_assert!(map.is_err() && rp.is_err() && rec.is_err());
            return Ok(());
        }
        let (map, rp, rec) = (map.unwrap(), rp.unwrap(), rec.unwrap());
        for (got, want) in [(&map, &o.ap), (&rp, &o.rp), (&rec, &o.recall)] {
            prop_assert!((got.mean - mean(want)).abs() <= 1e-12);
            prop_assert_eq!(got.per_query.len(), want.len());
            for (a, b) in got.per_query.iter().zip(want) {
                match (a, b) {
                    (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12),
                    (None, None) => {}
                    _ => prop_assert!(false, "scored/skipped mismatch"),
                }
            }
            let skipped: Vec<u64> = want.iter().zip(q.ids()).filter(|(w, _)| w.is_none()).map(|(_, &id)| id).collect();
            prop_assert_eq!(&got.skipped, &skipped);
        }
    }

    #[test]
    fn min_sort_deletions_matches_exhaustive_search(seq in prop::collection::vec(any::<bool>(), 0..=12)) {
        let n = seq.len();
        let mut best = usize::MAX;
        for mask in 0u32..(1 << n) {
            let kept: Vec<bool> = (0..n).filter(|i| mask & (1 << i) == 0).map(|i| seq[i]).collect();
            if kept.windows(2).all(|w| w[0] || !w[1]) {
                best = best.min(mask.count_ones() as usize);
            }
        }
        let (count, cut) = min_sort_deletions(&seq);
        prop_assert_eq!(count, best);
        let kept: Vec<bool> = seq.iter().enumerate().filter(|&(k, &x)| (k < cut) == x).map(|(_, &x)| x).collect();
        prop_assert_eq!(kept.len(), n - count);
        prop_assert!(kept.windows(2).all(|w| w[0] || !w[1]));
    }
}

#[test]
fn average_precision_hand_values() {
    assert_eq!(average_precision(&[true, false, true]).unwrap(), (1.0 + 2.0 / 3.0) / 2.0);
    assert_eq!(average_precision(&[false, true]).unwrap(), 0.5);
    assert!(average_precision(&[false, false]).is_err());
}

#[test]
fn r_precision_and_recall_hand_values() {
    // Query along x; gallery ordered by descending x component.
    let g = set(
        Modality::Image,
        vec![0, 1, 2],
        vec![0, 1, 0],
        vec![vec![1.0, 0.0], vec![0.8, 0.6], vec![0.0, 1.0]],
    );
    let q = set(Modality::Text, vec![9], vec![0], vec![vec![1.0, 0.0]]);
    assert_eq!(r_precision(&q, &g, false).unwrap().mean, 0.5);
    assert_eq!(recall_at_k(&q, &g, 1, false).unwrap().mean, 1.0);
    assert_abs_diff_eq!(retrieval_map(&q, &g, false).unwrap().mean, (1.0 + 2.0 / 3.0) / 2.0, epsilon = 1e-15);
}

#[test]
fn ties_rank_by_gallery_id() {
    let g = set(Modality::Image, vec![5, 2, 7], vec![0, 1, 0], vec![vec![1.0, 0.0]; 3]);
    assert_eq!(rank_gallery(&[1.0, 0.0], &g, None), vec![1, 0, 2]);
    assert_eq!(rank_gallery(&[1.0, 0.0], &g, Some(2)), vec![0, 2]);
}

#[test]
fn queries_without_relevant_items_are_skipped() {
    let g = set(Modality::Image, vec![0, 1], vec![0, 0], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let q = set(Modality::Image, vec![5, 6], vec![0, 1], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let m = retrieval_map(&q, &g, false).unwrap();
    assert_eq!(m.skipped, vec![6]);
    assert_eq!(m.per_query, vec![Some(1.0), None]);
    assert_eq!(m.mean, 1.0);
    let only = q.subset(&[1]).unwrap();
    assert!(retrieval_map(&only, &g, false).is_err());
}

#[test]
fn zero_shot_matches_softmax_oracle() {
    let prompts = set(Modality::Text, vec![0, 1], vec![0, 1], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let images = set(
        Modality::Image,
        vec![10, 11, 12],
        vec![0, 1, 1],
        vec![vec![0.6, 0.8], vec![0.0, 1.0], vec![1.0, 1.0]],
    );
    let tau = 0.5;
    let z = zero_shot_classify(&images, &prompts, tau).unwrap();
    // The last image ties; the lower class index wins.
    assert_eq!(z.predictions, vec![1, 1, 0]);
    assert_abs_diff_eq!(z.accuracy, 1.0 / 3.0, epsilon = 1e-15);
    let p1 = 1.0 / (1.0 + ((0.6 - 0.8) / tau).exp());
    assert_abs_diff_eq!(z.probabilities[0][1], p1, epsilon = 1e-12);
    for row in &z.probabilities {
        assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }
    let shuffled = set(Modality::Text, vec![0, 1], vec![1, 0], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert!(zero_shot_classify(&images, &shuffled, tau).is_err());
}

#[test]
fn modality_gap_is_centroid_difference() {
    let a = set(Modality::Image, vec![0, 1], vec![0, 0], vec![vec![2.0, 0.0], vec![0.0, 3.0]]);
    let b = set(Modality::Text, vec![0], vec![0], vec![vec![-1.0, 0.0]]);
    let gap = modality_gap(&a, &b).unwrap();
    assert_abs_diff_eq!(gap.delta[0], 1.5, epsilon = 1e-15);
    assert_abs_diff_eq!(gap.delta[1], 0.5, epsilon = 1e-15);
    assert_abs_diff_eq!(gap.magnitude, 2.5f64.sqrt(), epsilon = 1e-15);
    assert_abs_diff_eq!(gap.centroid_norms.0, 0.5f64.sqrt(), epsilon = 1e-15);
    assert_eq!(gap.counts, (2, 1));
    assert_eq!(modality_gap(&a, &a).unwrap().magnitude, 0.0);
}

#[test]
fn histograms_count_the_right_pairs() {
    let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![1.0, 1.0]];
    let a = set(Modality::Image, vec![0, 1, 2, 3], vec![0; 4], rows.clone());
    let h = similarity_histogram(&a, &a, 4, Pairing::AllPairs, "image-image").unwrap();
    assert_eq!(h.total(), 6);
    assert_eq!(h.edges, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
    // Pairs: 0, -1, √½, 0, √½, -√½.
    assert_eq!(h.counts, vec![2, 0, 2, 2]);

    let t = set(Modality::Text, vec![0, 1, 2, 3], vec![0; 4], rows);
    let m = similarity_histogram(&a, &t, 4, Pairing::Matched, "text-image").unwrap();
    assert_eq!(m.counts, vec![0, 0, 0, 4]);
    assert_abs_diff_eq!(m.mean, 1.0, epsilon = 1e-12);
    let cross = similarity_histogram(&a, &t, 4, Pairing::AllPairs, "text-image").unwrap();
    assert_eq!(cross.total(), 12);
    let misaligned = t.subset(&[1, 0]).unwrap();
    assert!(similarity_histogram(&a.subset(&[0, 1]).unwrap(), &misaligned, 4, Pairing::Matched, "x").is_err());
}

#[test]
fn probe_filters_to_perfect_inter_modal_order() {
    let prompts = set(Modality::Text, vec![0, 1], vec![0, 1], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let images = set(
        Modality::Image,
        (0..6).collect(),
        vec![0, 0, 0, 1, 1, 1],
        vec![
            vec![1.0, 0.1],
            vec![1.0, 0.9],
            vec![0.2, 1.0],
            vec![0.3, 1.0],
            vec![0.1, 1.0],
            vec![1.0, 0.95],
        ],
    );
    let r = misalignment_probe(&images, &prompts).unwrap();
    assert_eq!(r.initial, 6);
    // Image 2 sits nearer the wrong prompt; image 5 likewise.
    assert_eq!(r.after_prompt_filter, 4);
    assert_eq!(r.inter_r_precision, 1.0);
    assert_eq!(r.kept, r.kept_ids.len());
    assert!(!r.kept_ids.contains(&2) && !r.kept_ids.contains(&5));
}

#[test]
fn probe_rejects_three_classes() {
    let prompts = set(Modality::Text, vec![0, 1, 2], vec![0, 1, 2], vec![vec![1.0, 0.0]; 3]);
    let images = set(Modality::Image, vec![0, 1], vec![0, 1], vec![vec![1.0, 0.0]; 2]);
    assert!(misalignment_probe(&images, &prompts).is_err());
}

#[test]
fn feature_sets_round_trip_through_files() {
    let fs = set(
        Modality::Oti,
        vec![3, 1],
        vec![0, 2],
        vec![vec![0.3, -0.4, 1.2], vec![1.0, 2.0, -3.0]],
    );
    let dir = tempfile::tempdir().unwrap();
    for name in ["f.csv", "f.bin"] {
        let path = dir.path().join(name);
        fs.save(&path).unwrap();
        let back = FeatureSet::load(&path).unwrap();
        assert_eq!(back.ids(), fs.ids());
        assert_eq!(back.labels(), fs.labels());
        assert_eq!(back.modality, Modality::Oti);
        for i in 0..fs.len() {
            assert_eq!(back.row(i), fs.row(i));
        }
    }
}

#[test]
fn two_class_zero_shot_probability() {
    // Cosines 0.9 and 0.1 against the two prompts.
    let prompts = set(Modality::Text, vec![0, 1], vec![0, 1], vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
    let image = set(Modality::Image, vec![5], vec![0], vec![vec![0.9, 0.1, (1.0f64 - 0.82).sqrt()]]);
    let z = zero_shot_classify(&image, &prompts, 1.0).unwrap();
    let (e0, e1) = (0.9f64.exp(), 0.1f64.exp());
    assert_abs_diff_eq!(z.probabilities[0][0], e0 / (e0 + e1), epsilon = 1e-12);
    assert_abs_diff_eq!(z.probabilities[0][0], 0.68997, epsilon = 1e-5);
    assert_abs_diff_eq!(z.probabilities[0][1], 0.31003, epsilon = 1e-5);
}

#[test]
fn sort_deletions_example() {
    assert_eq!(min_sort_deletions(&[true, false, true, true, false]).0, 1);
    assert_eq!(min_sort_deletions(&[true, true, false]).0, 0);
    assert_eq!(min_sort_deletions(&[false, true]).0, 1);
}

#[test]
fn orthogonal_pair_lands_in_the_middle_bin() {
    let a = set(Modality::Image, vec![0], vec![0], vec![vec![1.0, 0.0]]);
    let b = set(Modality::Text, vec![1], vec![0], vec![vec![0.0, 1.0]]);
    let h = similarity_histogram(&a, &b, 3, Pairing::AllPairs, "x").unwrap();
    assert_eq!(h.counts, vec![0, 1, 0]);
    assert_eq!(h.mean, 0.0);
}

fn scaled(fs: &FeatureSet, factors: &[f64]) -> FeatureSet {
    let rows = (0..fs.len()).map(|i| fs.row(i).iter().map(|x| x * factors[i]).collect()).collect();
    set(fs.modality, fs.ids().to_vec(), fs.labels().to_vec(), rows)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn metrics_ignore_positive_rescaling(
        (q, g, k, exclude) in instance(),
        eq in -3i32..=3,
        eg in -3i32..=3,
    ) {
        // One power-of-two factor per set keeps tied cosines exactly tied.
        let fq = vec![2f64.powi(eq); q.len()];
        let fg = vec![2f64.powi(eg); g.len()];
        let (q2, g2) = (scaled(&q, &fq), scaled(&g, &fg));
        if let Ok(m) = retrieval_map(&q, &g, exclude) {
            let m2 = retrieval_map(&q2, &g2, exclude).unwrap();
            prop_assert!((m.mean - m2.mean).abs() < 1e-12);
            prop_assert_eq!(m.skipped, m2.skipped);
            prop_assert!((r_precision(&q, &g, exclude).unwrap().mean - r_precision(&q2, &g2, exclude).unwrap().mean).abs() < 1e-12);
            prop_assert!((recall_at_k(&q, &g, k, exclude).unwrap().mean - recall_at_k(&q2, &g2, k, exclude).unwrap().mean).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_shot_argmax_ignores_temperature(
        rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..6),
        prompts in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 2..5),
        t1 in 0.01f64..5.0,
        t2 in 0.01f64..5.0,
    ) {
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r[0] += 2.0; r }).collect();
        let prompts: Vec<Vec<f64>> = prompts.into_iter().map(|mut r| { r[1] += 2.0; r }).collect();
        let n = rows.len();
        let c = prompts.len();
        let images = set(Modality::Image, (0..n as u64).collect(), vec![0; n], rows);
        let p = set(Modality::Text, (0..c as u64).collect(), (0..c).collect(), prompts);
        let a = zero_shot_classify(&images, &p, t1).unwrap();
        let b = zero_shot_classify(&images, &p, t2).unwrap();
        prop_assert_eq!(a.predictions, b.predictions);
    }

    #[test]
    fn gap_is_antisymmetric(
        a in prop::collection::vec(nonzero_row(4), 1..6),
        b in prop::collection::vec(nonzero_row(4), 1..6),
    ) {
        let (na, nb) = (a.len(), b.len());
        let a = set(Modality::Image, (0..na as u64).collect(), vec![0; na], a);
        let b = set(Modality::Text, (0..nb as u64).collect(), vec![0; nb], b);
        let ab = modality_gap(&a, &b).unwrap();
        let ba = modality_gap(&b, &a).unwrap();
        for (x, y) in ab.delta.iter().zip(&ba.delta) {
            prop_assert!((x + y).abs() < 1e-15);
        }
        prop_assert_eq!(ab.magnitude, ba.magnitude);
    }
}
