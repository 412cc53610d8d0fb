//! Exact Euclidean k-NN over embedding galleries, and the ranking metrics.

use rayon::prelude::*;

use crate::dataio::Labels;
use crate::diffmath::Matrix;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RetrievalError {
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("K = {k} outside 1..={n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("query width {query} does not match gallery width {gallery}")]
    WidthMismatch { query: usize, gallery: usize },
    #[error("label universes differ: {query} vs {gallery} classes")]
    LabelUniverse { query: usize, gallery: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("no query has a relevant gallery item")]
    NoRelevant,
}

/// Searchable set of embeddings with labels and a modality tag per item.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    embeddings: Matrix,
    labels: Labels,
    modality: Vec<String>,
}

impl Gallery {
    pub fn new(embeddings: Matrix, labels: Labels, modality: &str) -> Result<Self, RetrievalError> {
        let n = embeddings.rows();
        Self::with_tags(embeddings, labels, vec![modality.to_string(); n])
    }

    pub fn with_tags(
        embeddings: Matrix,
        labels: Labels,
        modality: Vec<String>,
    ) -> Result<Self, RetrievalError> {
        if labels.len() != embeddings.rows() || modality.len() != embeddings.rows() {
            return Err(RetrievalError::Invalid(format!(
                "{} embeddings, {} label rows, {} modality tags",
                embeddings.rows(),
                labels.len(),
                modality.len()
            )));
        }
        labels
            .validate()
            .map_err(|e| RetrievalError::Invalid(e.to_string()))?;
        Ok(Self {
            embeddings,
            labels,
            modality,
        })
    }

    /// Mixed-modality gallery: `self` followed by `other`.
    pub fn concat(&self, other: &Gallery) -> Result<Self, RetrievalError> {
        if self.dim() != other.dim() {
            return Err(RetrievalError::WidthMismatch {
                query: other.dim(),
                gallery: self.dim(),
            });
        }
        if self.labels.classes() != other.labels.classes() {
            return Err(RetrievalError::LabelUniverse {
                query: other.labels.classes(),
                gallery: self.labels.classes(),
            });
        }
        let embeddings = self
            .embeddings
            .vstack(&other.embeddings)
            .map_err(|e| RetrievalError::Invalid(e.to_string()))?;
        let sets: Vec<Vec<usize>> = self
            .labels
            .sets()
            .into_iter()
            .chain(other.labels.sets())
            .collect();
        let labels = if self.labels.is_multi() || other.labels.is_multi() {
            Labels::multi(self.labels.classes(), sets)
        } else {
            Labels::single(
                self.labels.classes(),
                sets.into_iter().map(|s| s[0]).collect(),
            )
        }
        .map_err(|e| RetrievalError::Invalid(e.to_string()))?;
        let modality = self
            .modality
            .iter()
            .chain(&other.modality)
            .cloned()
            .collect();
        Self::with_tags(embeddings, labels, modality)
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn modality(&self, id: usize) -> &str {
        &self.modality[id]
    }
}

/// Gallery ids in ascending distance, ties by ascending id.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RankedList {
    pub ids: Vec<usize>,
    pub distances: Vec<f64>,
    pub relevant: Vec<bool>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Single-label: equality. Multi-label: the sets intersect. Both inputs sorted.
pub fn relevance(query: &[usize], item: &[usize]) -> bool {
    let (mut i, mut j) = (0, 0);
    while i < query.len() && j < item.len() {
        match query[i].cmp(&item[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => return true,
        }
    }
    false
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn ranked(
    gallery: &Gallery,
    query: &[f64],
    labels: &[usize],
    k: usize,
    skip: Option<usize>,
) -> Result<RankedList, RetrievalError> {
    if gallery.is_empty() {
        return Err(RetrievalError::EmptyGallery);
    }
    if query.len() != gallery.dim() {
        return Err(RetrievalError::WidthMismatch {
            query: query.len(),
            gallery: gallery.dim(),
        });
    }
    let mut scored: Vec<(f64, usize)> = (0..gallery.len())
        .filter(|&i| Some(i) != skip)
        .map(|i| (distance(query, gallery.embeddings.row(i)), i))
        .collect();
    let n = scored.len();
    if k == 0 || k > n {
        return Err(RetrievalError::KOutOfRange { k, n });
    }
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < n {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    Ok(RankedList {
        relevant: scored
            .iter()
            .map(|&(_, i)| relevance(labels, gallery.labels.set(i)))
            .collect(),
        distances: scored.iter().map(|&(d, _)| d).collect(),
        ids: scored.into_iter().map(|(_, i)| i).collect(),
    })
}

/// The `k` nearest gallery items to `query`. `labels` is the query's label
/// set, used only for the relevance flags.
pub fn query_topk(
    gallery: &Gallery,
    query: &[f64],
    labels: &[usize],
    k: usize,
) -> Result<RankedList, RetrievalError> {
    ranked(gallery, query, labels, k, None)
}

/// Fraction of the first `k` entries that are relevant.
pub fn precision_at_k(list: &RankedList, k: usize) -> Result<f64, RetrievalError> {
    if k == 0 || k > list.len() {
        return Err(RetrievalError::KOutOfRange { k, n: list.len() });
    }
    Ok(list.relevant[..k].iter().filter(|&&r| r).count() as f64 / k as f64)
}

/// Mean of precision@r over the relevant ranks r ≤ `cutoff`; `None` when
/// nothing in `relevant` is relevant at all.
pub fn average_precision(relevant: &[bool], cutoff: usize) -> Option<f64> {
    if !relevant.iter().any(|&r| r) {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, _) in relevant
        .iter()
        .take(cutoff)
        .enumerate()
        .filter(|(_, &rel)| rel)
    {
        hits += 1;
        sum += hits as f64 / (r + 1) as f64;
    }
    Some(if hits == 0 { 0.0 } else { sum / hits as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalOptions {
    /// AP cutoff; `None` ranks the whole gallery.
    pub cutoff: Option<usize>,
    /// Drop gallery item `i` from query `i`'s ranking (query set = gallery).
    pub skip_self: bool,
}

/// mAP and P@K for one query set against one gallery.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MetricReport {
    /// Per-class mean of query APs, averaged over classes with queries.
    pub map: f64,
    /// Plain mean over queries.
    pub map_query_mean: f64,
    pub class_ap: Vec<Option<f64>>,
    /// `(K, mean P@K)`.
    pub precision: Vec<(usize, f64)>,
    /// The same class-then-mean aggregate of each query's relevant fraction
    /// of the gallery: the score of a random ranking, roughly.
    pub chance: f64,
    pub queries: usize,
    /// Queries without any relevant gallery item.
    pub excluded: usize,
}

/// Ranks the full gallery for every query and aggregates AP per class
/// (a multi-label query counts towards each of its classes) and P@K.
pub fn evaluate(
    queries: &Gallery,
    gallery: &Gallery,
    ks: &[usize],
    options: EvalOptions,
) -> Result<MetricReport, RetrievalError> {
    if gallery.is_empty() {
        return Err(RetrievalError::EmptyGallery);
    }
    if queries.labels.classes() != gallery.labels.classes() {
        return Err(RetrievalError::LabelUniverse {
            query: queries.labels.classes(),
            gallery: gallery.labels.classes(),
        });
    }
    if options.skip_self && queries.len() != gallery.len() {
        return Err(RetrievalError::Invalid(
            "skip_self needs the query set to be the gallery".into(),
        ));
    }
    let n = gallery.len() - usize::from(options.skip_self);
    let cutoff = options.cutoff.unwrap_or(n).min(n);
    if cutoff == 0 {
        return Err(RetrievalError::KOutOfRange { k: 0, n });
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(RetrievalError::KOutOfRange { k, n });
    }

    let per_query: Vec<(Option<f64>, Vec<f64>, f64)> = (0..queries.len())
        .into_par_iter()
        .map(|q| {
            let skip = options.skip_self.then_some(q);
            let list = ranked(
                gallery,
                queries.embeddings.row(q),
                queries.labels.set(q),
                n,
                skip,
            )?;
            let ap = average_precision(&list.relevant, cutoff);
            let p = ks
                .iter()
                .map(|&k| precision_at_k(&list, k))
                .collect::<Result<_, _>>()?;
            let prevalence = list.relevant.iter().filter(|&&r| r).count() as f64 / n as f64;
            Ok((ap, p, prevalence))
        })
        .collect::<Result<_, RetrievalError>>()?;

    let c = gallery.labels.classes();
    let mut class_sum = vec![0.0; c];
    let mut class_n = vec![0usize; c];
    let mut class_chance = vec![0.0; c];
    let mut p_sum = vec![0.0; ks.len()];
    let (mut ap_sum, mut evaluated, mut excluded) = (0.0, 0usize, 0usize);
    for (q, (ap, p, prevalence)) in per_query.iter().enumerate() {
        for (s, v) in p_sum.iter_mut().zip(p) {
            *s += v;
        }
        match ap {
            Some(ap) => {
                ap_sum += ap;
                evaluated += 1;
                for &l in queries.labels.set(q) {
                    class_sum[l] += ap;
                    class_chance[l] += prevalence;
                    class_n[l] += 1;
                }
            }
            None => excluded += 1,
        }
    }
    if evaluated == 0 {
        return Err(RetrievalError::NoRelevant);
    }
    let class_ap: Vec<Option<f64>> = class_sum
        .iter()
        .zip(&class_n)
        .map(|(&s, &k)| (k > 0).then(|| s / k as f64))
        .collect();
    let present: Vec<f64> = class_ap.iter().flatten().copied().collect();
    let chance: Vec<f64> = class_chance
        .iter()
        .zip(&class_n)
        .filter(|(_, &k)| k > 0)
        .map(|(&s, &k)| s / k as f64)
        .collect();
    let nq = queries.len() as f64;
    Ok(MetricReport {
        map: present.iter().sum::<f64>() / present.len() as f64,
        chance: chance.iter().sum::<f64>() / chance.len() as f64,
        map_query_mean: ap_sum / evaluated as f64,
        class_ap,
        precision: ks.iter().zip(p_sum).map(|(&k, s)| (k, s / nq)).collect(),
        queries: queries.len(),
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_gallery(n: usize, d: usize, classes: usize, seed: u64) -> Gallery {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
        let labels = Labels::single(
            classes,
            (0..n).map(|_| rng.random_range(0..classes)).collect(),
        )
        .unwrap();
        Gallery::new(Matrix::new(n, d, data).unwrap(), labels, "A").unwrap()
    }

    #[test]
    fn exact_match_ranks_first() {
        let g = random_gallery(50, 4, 3, 1);
        let q = g.embeddings().row(17).to_vec();
        let list = query_topk(&g, &q, g.labels().set(17), 5).unwrap();
        assert_eq!(list.ids[0], 17);
        assert_eq!(list.distances[0], 0.0);
        assert!(list.relevant[0]);
    }

    #[test]
    fn full_k_is_sorted_gallery() {
        let g = random_gallery(30, 3, 2, 2);
        let list = query_topk(&g, &[0.0, 0.0, 0.0], &[0], 30).unwrap();
        let mut ids = list.ids.clone();
        ids.sort_unstable();
        assert_eq!(ids, (0..30).collect::<Vec<_>>());
        assert!(list.distances.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn ties_break_by_id() {
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0], [2.0, 0.0]]);
        let g = Gallery::new(x, Labels::single(2, vec![0, 1, 0, 1, 0]).unwrap(), "A").unwrap();
        let list = query_topk(&g, &[0.0, 0.0], &[1], 5).unwrap();
        assert_eq!(list.ids, vec![0, 1, 2, 3, 4]);
        assert_eq!(list.relevant, vec![false, true, false, true, false]);
    }

    #[test]
    fn errors() {
        let g = random_gallery(10, 3, 2, 3);
        assert_eq!(
            query_topk(&g, &[0.0; 3], &[0], 0),
            Err(RetrievalError::KOutOfRange { k: 0, n: 10 })
        );
        assert_eq!(
            query_topk(&g, &[0.0; 3], &[0], 11),
            Err(RetrievalError::KOutOfRange { k: 11, n: 10 })
        );
        assert_eq!(
            query_topk(&g, &[0.0; 2], &[0], 1),
            Err(RetrievalError::WidthMismatch {
                query: 2,
                gallery: 3
            })
        );
    }

    #[test]
    fn relevance_examples() {
        assert!(relevance(&[3], &[3]));
        assert!(relevance(&[1, 4], &[4, 9]));
        assert!(!relevance(&[1], &[2]));
        assert!(!relevance(&[], &[2]));
    }

    fn list(flags: &[bool]) -> RankedList {
        RankedList {
            ids: (0..flags.len()).collect(),
            distances: (0..flags.len()).map(|i| i as f64).collect(),
            relevant: flags.to_vec(),
        }
    }

    #[test]
    fn precision_examples() {
        let mut flags = [false; 10];
        flags[0] = true;
        flags[2] = true;
        assert_eq!(precision_at_k(&list(&flags), 10).unwrap(), 0.2);
        assert_eq!(precision_at_k(&list(&[true; 10]), 10).unwrap(), 1.0);
        assert_eq!(precision_at_k(&list(&[false; 10]), 10).unwrap(), 0.0);
        assert!(precision_at_k(&list(&[true; 3]), 4).is_err());
    }

    #[test]
    fn average_precision_examples() {
        let ap = average_precision(&[true, false, true, false], 4).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[true, true, false, false], 4), Some(1.0));
        assert_eq!(average_precision(&[false, false], 2), None);
        // relevant items exist but none within the cutoff
        assert_eq!(average_precision(&[false, false, true], 2), Some(0.0));
        let ap = average_precision(&[true, false, true, true], 2).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn all_relevant_gives_one() {
        let mut g = random_gallery(20, 3, 2, 4);
        g.labels = Labels::single(2, vec![1; 20]).unwrap();
        let r = evaluate(&g, &g, &[5], EvalOptions::default()).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.precision, vec![(5, 1.0)]);
        assert_eq!(r.class_ap, vec![None, Some(1.0)]);
    }

    #[test]
    fn class_mean_differs_from_query_mean() {
        // two class-0 queries with AP 1, one class-1 query with AP 1/2
        let gx = Matrix::from_rows(&[[0.0], [1.0], [10.0]]);
        let g = Gallery::new(gx, Labels::single(2, vec![0, 1, 1]).unwrap(), "B").unwrap();
        let qx = Matrix::from_rows(&[[0.1], [-0.1], [0.0]]);
        let q = Gallery::new(qx, Labels::single(2, vec![0, 0, 1]).unwrap(), "A").unwrap();
        let r = evaluate(&q, &g, &[1], EvalOptions::default()).unwrap();
        // class-1 query at 0: ranks g0 (irrelevant), g1, g2 → AP = (1/2 + 2/3)/2
        let ap1 = (0.5 + 2.0 / 3.0) / 2.0;
        assert!((r.map - (1.0 + ap1) / 2.0).abs() < 1e-15);
        assert!((r.map_query_mean - (2.0 + ap1) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn skip_self_and_exclusion() {
        let x = Matrix::from_rows(&[[0.0], [1.0], [5.0]]);
        let g = Gallery::new(x, Labels::single(2, vec![0, 0, 1]).unwrap(), "A").unwrap();
        let r = evaluate(
            &g,
            &g,
            &[1],
            EvalOptions {
                cutoff: None,
                skip_self: true,
            },
        )
        .unwrap();
        // item 2 is the only class-1 sample: no relevant partner once it is skipped
        assert_eq!(r.excluded, 1);
        assert_eq!(r.map, 1.0);
        assert_eq!(r.precision, vec![(1, 2.0 / 3.0)]);
    }

    #[test]
    fn multi_label_queries_count_for_each_class() {
        let gx = Matrix::from_rows(&[[0.0], [1.0]]);
        let g = Gallery::new(gx, Labels::single(3, vec![0, 1]).unwrap(), "B").unwrap();
        let qx = Matrix::from_rows(&[[0.0], [1.0]]);
        let q = Gallery::new(
            qx,
            Labels::multi(3, vec![vec![0, 1], vec![0]]).unwrap(),
            "A",
        )
        .unwrap();
        let r = evaluate(&q, &g, &[1], EvalOptions::default()).unwrap();
        // q0 ranks g0, g1: both relevant, AP 1. q1 ranks g1, g0: AP 1/2
        assert_eq!(r.class_ap, vec![Some(0.75), Some(1.0), None]);
        assert_eq!(r.map, 0.875);
    }

    // Independent oracle: full scan, the test's own distance, stable sort on
    // distance alone (stability supplies the id tie-break).
    fn oracle_topk(g: &Gallery, q: &[f64], k: usize) -> Vec<usize> {
        let mut all: Vec<(usize, f64)> = (0..g.len())
            .map(|i| {
                let mut s = 0.0;
                for (x, y) in q.iter().zip(g.embeddings().row(i)) {
                    s += (x - y).powi(2);
                }
                (i, s.sqrt())
            })
            .collect();
        all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        all.into_iter().take(k).map(|(i, _)| i).collect()
    }

    #[test]
    fn matches_bruteforce_oracle() {
        let g = random_gallery(1000, 16, 5, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let q: Vec<f64> = (0..16).map(|_| rng.sample(StandardNormal)).collect();
            for k in [1, 10, 100] {
                assert_eq!(
                    query_topk(&g, &q, &[0], k).unwrap().ids,
                    oracle_topk(&g, &q, k)
                );
            }
        }
    }

    fn rotation(d: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let mut cols: Vec<Vec<f64>> = Vec::new();
        while cols.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(x, y)| *x -= dot * y);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            cols.push(v.into_iter().map(|x| x / n).collect());
        }
        let data = (0..d * d).map(|i| cols[i % d][i / d]).collect();
        Matrix::new(d, d, data).unwrap()
    }

    #[test]
    fn metrics_invariant_under_isometry() {
        let q = random_gallery(60, 6, 4, 7);
        let g = random_gallery(200, 6, 4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rot = rotation(6, &mut rng);
        let shift = Matrix::random_uniform(1, 6, 5.0, &mut rng);
        let move_all = |x: &Gallery| Gallery {
            embeddings: x.embeddings.matmul(&rot).unwrap().add_row(&shift).unwrap(),
            ..x.clone()
        };
        let opts = EvalOptions::default();
        let before = evaluate(&q, &g, &[1, 10], opts).unwrap();
        let after = evaluate(&move_all(&q), &move_all(&g), &[1, 10], opts).unwrap();
        assert!((before.map - after.map).abs() < 1e-12);
        assert_eq!(before.precision, after.precision);
    }

    #[test]
    fn random_embeddings_score_chance() {
        let c = 4;
        let (nq, ng) = (200, 400);
        let trials = 12;
        let maps: Vec<f64> = (0..trials)
            .map(|s| {
                let q = random_gallery(nq, 8, c, 100 + s);
                let g = random_gallery(ng, 8, c, 200 + s);
                evaluate(&q, &g, &[10], EvalOptions::default()).unwrap().map
            })
            .collect();
        let mean = maps.iter().sum::<f64>() / trials as f64;

        // Oracle: AP of uniformly shuffled relevance lists with the same
        // class prevalence, estimated by Monte Carlo.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let per = ng / c;
        let samples: Vec<f64> = (0..4000)
            .map(|_| {
                let mut flags: Vec<bool> = (0..ng).map(|i| i < per).collect();
                flags.shuffle(&mut rng);
                average_precision(&flags, ng).unwrap()
            })
            .collect();
        let mu = samples.iter().sum::<f64>() / samples.len() as f64;
        let var =
            samples.iter().map(|s| (s - mu).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
        // each trial's mAP averages ~nq per-query APs
        let sigma = (var / (nq as f64 * trials as f64)).sqrt();
        assert!(
            (mean - mu).abs() < 3.0 * sigma.max(0.01 / c as f64),
            "mean {mean}, oracle {mu} ± {sigma}"
        );
        assert!((mu - 1.0 / c as f64).abs() < 0.02);
        let q = random_gallery(nq, 8, c, 1);
        let chance = evaluate(
            &q,
            &random_gallery(ng, 8, c, 2),
            &[10],
            EvalOptions::default(),
        )
        .unwrap()
        .chance;
        assert!((chance - 1.0 / c as f64).abs() < 0.03);
    }

    #[test]
    fn mixed_gallery_concatenates() {
        let a = random_gallery(5, 3, 2, 10);
        let b = Gallery {
            modality: vec!["B".into(); 4],
            ..random_gallery(4, 3, 2, 11)
        };
        let m = a.concat(&b).unwrap();
        assert_eq!(m.len(), 9);
        assert_eq!(m.modality(0), "A");
        assert_eq!(m.modality(8), "B");
        assert_eq!(m.labels().set(7), b.labels().set(2));
    }
}
