//! Cosine-ranked retrieval and mean-average-precision evaluation.
//!
//! Relevance is class-label match, rankings use the full gallery, and ties
//! break on ascending gallery id so shuffled insertion can never change a
//! result. Queries with no relevant gallery item are excluded and counted
//! rather than scored.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{EpisodeSplit, SampleRecord};
use crate::error::{Error, Result};
use crate::kernel::tensor;
use crate::trainer::{embed, ModelState, TrainConfig};

/// Retrieval direction: which modality queries which gallery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "I2T")]
    ImageToText,
    #[serde(rename = "T2I")]
    TextToImage,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::ImageToText => write!(f, "I2T"),
            Direction::TextToImage => write!(f, "T2I"),
        }
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "I2T" => Ok(Direction::ImageToText),
            "T2I" => Ok(Direction::TextToImage),
            other => Err(Error::Usage {
                message: format!("unknown direction `{other}` (expected I2T or T2I)"),
            }),
        }
    }
}

/// One gallery item with its relevance flag for the current query.
#[derive(Debug, Clone)]
pub struct GalleryEntry {
    pub id: u64,
    pub embedding: Vec<f64>,
    pub relevant: bool,
}

/// One ranked gallery item.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedItem {
    pub gallery_id: u64,
    pub score: f64,
    pub relevant: bool,
}

/// Full descending ranking of a gallery for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub query_id: u64,
    pub items: Vec<RankedItem>,
}

/// Rank the gallery by cosine similarity, ties broken by ascending id.
pub fn rank_gallery(
    query_id: u64,
    query: &[f64],
    gallery: &[GalleryEntry],
) -> Result<RetrievalResult> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let query_norm = tensor::norm(query);
    if query_norm <= 1e-30 {
        return Err(Error::DegenerateNorm { norm: query_norm });
    }
    let mut items = Vec::with_capacity(gallery.len());
    for entry in gallery {
        if entry.embedding.len() != query.len() {
            return Err(Error::DimensionMismatch {
                expected: query.len(),
                got: entry.embedding.len(),
            });
        }
        let norm = tensor::norm(&entry.embedding);
        if norm <= 1e-30 {
            return Err(Error::DegenerateNorm { norm });
        }
        items.push(RankedItem {
            gallery_id: entry.id,
            score: tensor::dot(query, &entry.embedding) / (query_norm * norm),
            relevant: entry.relevant,
        });
    }
    items.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("cosine scores are finite")
            .then(a.gallery_id.cmp(&b.gallery_id))
    });
    Ok(RetrievalResult { query_id, items })
}

/// Average precision over the full retrieved list: the mean of the
/// precision-at-r values at every relevant rank. Undefined (an error) when
/// nothing in the gallery is relevant.
pub fn average_precision(result: &RetrievalResult) -> Result<f64> {
    let relevant_total = result.items.iter().filter(|i| i.relevant).count();
    if relevant_total == 0 {
        return Err(Error::NoRelevantItems {
            query: result.query_id,
        });
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (idx, item) in result.items.iter().enumerate() {
        if item.relevant {
            hits += 1;
            sum += hits as f64 / (idx + 1) as f64;
        }
    }
    Ok(sum / relevant_total as f64)
}

/// Per-query average precision.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryAp {
    pub id: u64,
    pub ap: f64,
}

/// One direction's retrieval evaluation: per-query APs, their mean, and the
/// run context.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub direction: Direction,
    pub k: usize,
    pub seed: u64,
    pub map: f64,
    /// Queries skipped because they had no relevant gallery item.
    pub excluded: usize,
    pub per_query: Vec<QueryAp>,
    pub config: TrainConfig,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per query plus a footer row with the mean.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("query_id,ap\n");
        for q in &self.per_query {
            out.push_str(&format!("{},{:.12}\n", q.id, q.ap));
        }
        out.push_str(&format!("mAP,{:.12}\n", self.map));
        out
    }
}

/// Evaluate cross-modal retrieval over the target-domain query set: each
/// query ranks the full other-modality gallery built from the same query
/// samples, and relevance is class-label match.
pub fn evaluate(
    state: &ModelState,
    records: &[SampleRecord],
    split: &EpisodeSplit,
    direction: Direction,
) -> Result<EvalReport> {
    let by_id: BTreeMap<u64, &SampleRecord> = records.iter().map(|r| (r.id, r)).collect();
    let mut query_ids = split.query_ids();
    query_ids.sort_unstable();

    // Embed every query sample once; both modalities are needed.
    let mut embedded = Vec::with_capacity(query_ids.len());
    for id in &query_ids {
        let record = by_id.get(id).ok_or(Error::InvalidConfig {
            field: "split",
            reason: format!("query id {id} not present in the dataset"),
        })?;
        embedded.push(embed(state, record)?);
    }

    let mut per_query = Vec::with_capacity(embedded.len());
    let mut excluded = 0usize;
    let mut sum = 0.0;
    for query in &embedded {
        let gallery: Vec<GalleryEntry> = embedded
            .iter()
            .map(|other| GalleryEntry {
                id: other.id,
                embedding: match direction {
                    Direction::ImageToText => other.text.vector.clone(),
                    Direction::TextToImage => other.image.vector.clone(),
                },
                relevant: other.label == query.label,
            })
            .collect();
        let query_vector = match direction {
            Direction::ImageToText => &query.image.vector,
            Direction::TextToImage => &query.text.vector,
        };
        let ranking = rank_gallery(query.id, query_vector, &gallery)?;
        match average_precision(&ranking) {
            Ok(ap) => {
                sum += ap;
                per_query.push(QueryAp { id: query.id, ap });
            }
            Err(Error::NoRelevantItems { .. }) => excluded += 1,
            Err(e) => return Err(e),
        }
    }
    if per_query.is_empty() {
        return Err(Error::InvalidConfig {
            field: "split",
            reason: "no scorable queries in the target domain".to_string(),
        });
    }
    let map = sum / per_query.len() as f64;
    Ok(EvalReport {
        direction,
        k: split.k,
        seed: state.config.seed,
        map,
        excluded,
        per_query,
        config: state.config.clone(),
    })
}

/// Average of the two directions' mean average precisions.
pub fn average_map(i2t: &EvalReport, t2i: &EvalReport) -> f64 {
    (i2t.map + t2i.map) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn entries(vecs: &[(u64, Vec<f64>, bool)]) -> Vec<GalleryEntry> {
        vecs.iter()
            .map(|(id, embedding, relevant)| GalleryEntry {
                id: *id,
                embedding: embedding.clone(),
                relevant: *relevant,
            })
            .collect()
    }

    #[test]
    fn query_itself_ranks_first_with_unit_score() {
        let gallery = entries(&[
            (3, vec![0.0, 1.0], false),
            (7, vec![0.6, 0.8], true),
            (9, vec![1.0, 0.0], false),
        ]);
        let result = rank_gallery(1, &[0.6, 0.8], &gallery).unwrap();
        assert_eq!(result.items[0].gallery_id, 7);
        assert!((result.items[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_gallery_breaks_ties_by_id() {
        let gallery = entries(&[
            (12, vec![0.0, 1.0, 0.0], false),
            (4, vec![0.0, 0.0, 1.0], false),
            (8, vec![0.0, -1.0, 0.0], false),
        ]);
        let result = rank_gallery(1, &[1.0, 0.0, 0.0], &gallery).unwrap();
        let ids: Vec<u64> = result.items.iter().map(|i| i.gallery_id).collect();
        assert!(result.items.iter().all(|i| i.score.abs() < 1e-12));
        assert_eq!(ids, vec![4, 8, 12]);
    }

    #[test]
    fn ranking_matches_a_naive_comparison_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for _ in 0..20 {
            let query: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let gallery: Vec<GalleryEntry> = (0..12)
                .map(|id| GalleryEntry {
                    id: id as u64,
                    embedding: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    relevant: false,
                })
                .collect();
            let result = rank_gallery(0, &query, &gallery).unwrap();

            // Naive O(n^2) selection sort on (score desc, id asc).
            let mut scored: Vec<(u64, f64)> = gallery
                .iter()
                .map(|e| (e.id, crate::kernel::tensor::cosine(&query, &e.embedding)))
                .collect();
            let mut naive = Vec::new();
            while !scored.is_empty() {
                let mut best = 0;
                for i in 1..scored.len() {
                    let better = scored[i].1 > scored[best].1
                        || (scored[i].1 == scored[best].1 && scored[i].0 < scored[best].0);
                    if better {
                        best = i;
                    }
                }
                naive.push(scored.remove(best).0);
            }
            let ids: Vec<u64> = result.items.iter().map(|i| i.gallery_id).collect();
            assert_eq!(ids, naive);
        }
    }

    #[test]
    fn empty_gallery_is_an_error() {
        assert!(matches!(
            rank_gallery(0, &[1.0], &[]),
            Err(Error::EmptyGallery)
        ));
    }

    fn result_from_pattern(pattern: &[bool]) -> RetrievalResult {
        RetrievalResult {
            query_id: 0,
            items: pattern
                .iter()
                .enumerate()
                .map(|(i, rel)| RankedItem {
                    gallery_id: i as u64,
                    score: 1.0 - i as f64 * 0.01,
                    relevant: *rel,
                })
                .collect(),
        }
    }

    /// Direct transcription of the average-precision definition: for each
    /// rank, recompute precision over the prefix from scratch.
    fn brute_force_ap(pattern: &[bool]) -> Option<f64> {
        let t = pattern.iter().filter(|r| **r).count();
        if t == 0 {
            return None;
        }
        let mut sum = 0.0;
        for r in 1..=pattern.len() {
            if pattern[r - 1] {
                let hits = pattern[..r].iter().filter(|x| **x).count();
                sum += hits as f64 / r as f64;
            }
        }
        Some(sum / t as f64)
    }

    #[test]
    fn worked_average_precision_example() {
        let ap = average_precision(&result_from_pattern(&[true, false, true, false])).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12, "got {ap}");
    }

    #[test]
    fn all_relevant_gives_perfect_precision() {
        let ap = average_precision(&result_from_pattern(&[true; 7])).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn no_relevant_items_is_an_error() {
        assert!(matches!(
            average_precision(&result_from_pattern(&[false, false])),
            Err(Error::NoRelevantItems { .. })
        ));
    }

    #[test]
    fn average_precision_matches_brute_force_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        for _ in 0..500 {
            let len = rng.random_range(1..=20);
            let pattern: Vec<bool> = (0..len).map(|_| rng.random::<f64>() < 0.4).collect();
            let expect = brute_force_ap(&pattern);
            let got = average_precision(&result_from_pattern(&pattern)).ok();
            match (got, expect) {
                (Some(g), Some(e)) => assert_eq!(g, e, "pattern {pattern:?}"),
                (None, None) => {}
                other => panic!("disagreement on {pattern:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn ap_depends_only_on_ranks() {
        let pattern = [true, false, true, true, false];
        let base = result_from_pattern(&pattern);
        let transformed = RetrievalResult {
            query_id: 0,
            items: base
                .items
                .iter()
                .map(|i| RankedItem {
                    score: (3.0 * i.score).exp(),
                    ..i.clone()
                })
                .collect(),
        };
        assert_eq!(
            average_precision(&base).unwrap(),
            average_precision(&transformed).unwrap()
        );
    }

    #[test]
    fn shuffled_insertion_order_does_not_change_results() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let mut gallery: Vec<GalleryEntry> = (0..10)
            .map(|id| GalleryEntry {
                id: id as u64,
                // Two score classes force ties.
                embedding: if id % 2 == 0 {
                    vec![1.0, 0.0]
                } else {
                    vec![0.0, 1.0]
                },
                relevant: id % 3 == 0,
            })
            .collect();
        let query = vec![1.0, 0.0];
        let baseline = rank_gallery(0, &query, &gallery).unwrap();
        for _ in 0..5 {
            use rand::seq::SliceRandom;
            gallery.shuffle(&mut rng);
            assert_eq!(rank_gallery(0, &query, &gallery).unwrap(), baseline);
        }
    }

    #[test]
    fn single_class_gallery_has_perfect_map() {
        use crate::data::{generate_synthetic, make_episode, SyntheticSpec};
        use crate::trainer::{train, TrainConfig};
        let records = generate_synthetic(&SyntheticSpec {
            classes: 2,
            samples_per_class: 5,
            peaks_per_class: 1,
            latent_dim: 3,
            image_descriptors: 4,
            text_descriptors: 4,
            image_dim: 4,
            text_dim: 4,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let config = TrainConfig {
            latent_dim: 3,
            stage1_epochs: 1,
            stage2_epochs: 0,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (state, _) = train(&config, &records).unwrap();
        // One target class: every gallery item is relevant for every query.
        let split = make_episode(&records, 0, 0, 0.5).unwrap();
        assert_eq!(split.target_classes.len(), 1);
        for direction in [Direction::ImageToText, Direction::TextToImage] {
            let report = evaluate(&state, &records, &split, direction).unwrap();
            assert_eq!(report.map, 1.0);
            assert!(report.per_query.iter().all(|q| q.ap == 1.0));
        }
    }

    #[test]
    fn evaluate_is_pure() {
        use crate::data::{generate_synthetic, make_episode, SyntheticSpec};
        use crate::trainer::{train, TrainConfig};
        let records = generate_synthetic(&SyntheticSpec {
            classes: 4,
            samples_per_class: 4,
            latent_dim: 3,
            image_descriptors: 4,
            text_descriptors: 4,
            image_dim: 4,
            text_dim: 4,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let config = TrainConfig {
            latent_dim: 3,
            stage1_epochs: 1,
            stage2_epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (state, _) = train(&config, &records).unwrap();
        let split = make_episode(&records, 1, 0, 0.5).unwrap();
        let a = evaluate(&state, &records, &split, Direction::ImageToText).unwrap();
        let b = evaluate(&state, &records, &split, Direction::ImageToText).unwrap();
        assert_eq!(a.map.to_bits(), b.map.to_bits());
        for (x, y) in a.per_query.iter().zip(&b.per_query) {
            assert_eq!(x.ap.to_bits(), y.ap.to_bits());
        }
        // The mean is exactly the arithmetic mean of the per-query values.
        let sum: f64 = a.per_query.iter().map(|q| q.ap).sum();
        assert_eq!(a.map, sum / a.per_query.len() as f64);
        assert!(a.per_query.iter().all(|q| (0.0..=1.0).contains(&q.ap)));
    }
}
