//! k-NN inference in embedding space and the report metrics: top-1, average
//! per-class accuracy, head/tail accuracies, confusion matrix.

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::model::{embed_snippet, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::euclidean;

pub const DEFAULT_K: usize = 5;

/// Gallery of (embedding, label) pairs.
pub struct EmbeddingIndex {
    pub points: Vec<(Vec<f64>, usize)>,
}

impl EmbeddingIndex {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub c_avg: f64,
    pub head_acc: f64,
    pub tail_acc: f64,
    pub confusion: Vec<Vec<usize>>,
    pub k: usize,
    pub head_classes: Vec<usize>,
}

/// Embed every gallery snippet with the frozen model.
pub fn build_index(
    params: &ParamStore,
    cfg: &ModelConfig,
    gallery: &Dataset,
) -> Result<EmbeddingIndex> {
    let mut points = Vec::with_capacity(gallery.len());
    for s in &gallery.snippets {
        points.push((embed_snippet(params, cfg, s)?, s.label));
    }
    Ok(EmbeddingIndex { points })
}

/// Majority vote among the k nearest gallery points. Tie chain: vote count,
/// then smaller summed distance, then lower class id; ties on distance while
/// selecting neighbours break toward the lower gallery index.
pub fn knn_predict(index: &EmbeddingIndex, query: &[f64], k: usize) -> Result<usize> {
    knn_predict_excluding(index, query, k, None)
}

/// Same as [`knn_predict`] but optionally skips one gallery index
/// (leave-one-out evaluation on the gallery itself).
pub fn knn_predict_excluding(
    index: &EmbeddingIndex,
    query: &[f64],
    k: usize,
    exclude: Option<usize>,
) -> Result<usize> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let mut dists: Vec<(f64, usize)> = index
        .points
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, (e, _))| (euclidean(query, e), i))
        .collect();
    if dists.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let k = k.min(dists.len());
    dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let num_classes = index.points.iter().map(|(_, l)| l + 1).max().unwrap();
    let mut votes = vec![0usize; num_classes];
    let mut sums = vec![0.0f64; num_classes];
    for &(d, i) in &dists[..k] {
        let label = index.points[i].1;
        votes[label] += 1;
        sums[label] += d;
    }
    let mut best = None;
    for c in 0..num_classes {
        if votes[c] == 0 {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => {
                let (bv, bs): (usize, f64) = (votes[b], sums[b]);
                votes[c] > bv || (votes[c] == bv && sums[c] < bs)
                // equal votes and sums: keep lower class id (b < c)
            }
        };
        if better {
            best = Some(c);
        }
    }
    Ok(best.unwrap())
}

/// Metrics from a confusion matrix plus the head/tail class split.
pub fn report_from_confusion(
    confusion: Vec<Vec<usize>>,
    k: usize,
    head_classes: &[usize],
) -> Result<EvalReport> {
    let c = confusion.len();
    let mut total = 0usize;
    let mut correct = 0usize;
    let mut recalls = vec![0.0; c];
    for (i, row) in confusion.iter().enumerate() {
        let row_sum: usize = row.iter().sum();
        if row_sum == 0 {
            return Err(Error::EmptyTestClass(i));
        }
        total += row_sum;
        correct += row[i];
        recalls[i] = row[i] as f64 / row_sum as f64;
    }
    let head: Vec<usize> = head_classes.to_vec();
    let tail: Vec<usize> = (0..c).filter(|i| !head.contains(i)).collect();
    let mean_over = |set: &[usize]| {
        if set.is_empty() {
            0.0
        } else {
            set.iter().map(|&i| recalls[i]).sum::<f64>() / set.len() as f64
        }
    };
    Ok(EvalReport {
        top1: correct as f64 / total as f64,
        c_avg: recalls.iter().sum::<f64>() / c as f64,
        head_acc: mean_over(&head),
        tail_acc: mean_over(&tail),
        confusion,
        k,
        head_classes: head,
    })
}

/// Gallery/query k-NN evaluation with the frozen model.
pub fn evaluate(
    params: &ParamStore,
    cfg: &ModelConfig,
    gallery: &Dataset,
    test: &Dataset,
    k: usize,
    head_classes: &[usize],
) -> Result<EvalReport> {
    let index = build_index(params, cfg, gallery)?;
    let c = cfg.num_classes;
    let mut confusion = vec![vec![0usize; c]; c];
    for s in &test.snippets {
        let emb = embed_snippet(params, cfg, s)?;
        let pred = knn_predict(&index, &emb, k)?;
        confusion[s.label][pred] += 1;
    }
    report_from_confusion(confusion, k, head_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index_from(points: &[(Vec<f64>, usize)]) -> EmbeddingIndex {
        EmbeddingIndex {
            points: points.to_vec(),
        }
    }

    #[test]
    fn exact_gallery_point_wins_at_k1() {
        let idx = index_from(&[
            (vec![0.0, 0.0], 0),
            (vec![1.0, 1.0], 1),
            (vec![2.0, 2.0], 2),
        ]);
        assert_eq!(knn_predict(&idx, &[1.0, 1.0], 1).unwrap(), 1);
    }

    #[test]
    fn majority_wins_at_k3() {
        let idx = index_from(&[
            (vec![0.0], 0),
            (vec![0.1], 0),
            (vec![0.2], 1),
            (vec![9.0], 1),
        ]);
        assert_eq!(knn_predict(&idx, &[0.0], 3).unwrap(), 0);
    }

    #[test]
    fn vote_tie_broken_by_summed_distance() {
        let idx = index_from(&[(vec![0.0], 1), (vec![3.0], 0)]);
        // one vote each; class 1 is closer in sum
        assert_eq!(knn_predict(&idx, &[0.5], 2).unwrap(), 1);
    }

    #[test]
    fn full_tie_broken_by_class_id() {
        let idx = index_from(&[(vec![1.0], 1), (vec![-1.0], 0)]);
        assert_eq!(knn_predict(&idx, &[0.0], 2).unwrap(), 0);
    }

    #[test]
    fn empty_index_rejected() {
        let idx = index_from(&[]);
        assert!(matches!(
            knn_predict(&idx, &[0.0], 1),
            Err(Error::EmptyIndex)
        ));
    }

    #[test]
    fn perfect_predictor_report() {
        let conf = vec![vec![3, 0], vec![0, 2]];
        let r = report_from_confusion(conf, 1, &[0]).unwrap();
        assert_eq!(r.top1, 1.0);
        assert_eq!(r.c_avg, 1.0);
        assert_eq!(r.head_acc, 1.0);
        assert_eq!(r.tail_acc, 1.0);
    }

    #[test]
    fn constant_predictor_report() {
        // 2-class 90/10 test set, everything predicted as class 0
        let conf = vec![vec![90, 0], vec![10, 0]];
        let r = report_from_confusion(conf, 5, &[0]).unwrap();
        assert!((r.top1 - 0.9).abs() < 1e-15);
        assert!((r.c_avg - 0.5).abs() < 1e-15);
    }

    #[test]
    fn c_avg_recomputed_from_counts() {
        let conf = vec![vec![5, 1, 0], vec![2, 6, 2], vec![0, 1, 3]];
        let r = report_from_confusion(conf.clone(), 5, &[0, 1]).unwrap();
        let recalls: Vec<f64> = conf
            .iter()
            .enumerate()
            .map(|(i, row)| row[i] as f64 / row.iter().sum::<usize>() as f64)
            .collect();
        let c_avg = recalls.iter().sum::<f64>() / 3.0;
        assert!((r.c_avg - c_avg).abs() < 1e-15);
        // pooled head/tail means recompose into c_avg
        let pooled = (r.head_acc * 2.0 + r.tail_acc * 1.0) / 3.0;
        assert!((pooled - c_avg).abs() < 1e-15);
        // top1 equals the count-weighted mean of recalls
        let weighted: f64 = conf
            .iter()
            .enumerate()
            .map(|(i, row)| recalls[i] * row.iter().sum::<usize>() as f64)
            .sum::<f64>()
            / conf.iter().flatten().sum::<usize>() as f64;
        assert!((r.top1 - weighted).abs() < 1e-15);
    }

    #[test]
    fn empty_test_class_rejected() {
        let conf = vec![vec![1, 0], vec![0, 0]];
        assert!(matches!(
            report_from_confusion(conf, 1, &[0]),
            Err(Error::EmptyTestClass(1))
        ));
    }
}
