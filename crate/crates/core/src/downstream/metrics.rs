//! Attribute, retrieval and segmentation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, l2_norm, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Multilabel,
    Multiclass,
    Retrieval,
    Segmentation,
}

/// Scores and ground truth of one evaluation, row-aligned with `keys`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub task: TaskKind,
    pub keys: Vec<String>,
    pub columns: Vec<String>,
    /// `[n_samples, n_columns]`; probabilities for multilabel, class scores for multiclass.
    pub scores: Mat<f64>,
    /// Same shape as `scores`: 0/1 per attribute, or one-hot class rows.
    pub ground_truth: Mat<f64>,
}

impl PredictionSet {
    pub fn new(
        task: TaskKind,
        keys: Vec<String>,
        columns: Vec<String>,
        scores: Mat<f64>,
        ground_truth: Mat<f64>,
    ) -> Result<Self> {
        if scores.shape() != ground_truth.shape() || scores.rows() != keys.len() || scores.cols() != columns.len() {
            return Err(Error::Structural(format!(
                "scores {:?}, ground truth {:?}, {} keys, {} columns",
                scores.shape(),
                ground_truth.shape(),
                keys.len(),
                columns.len()
            )));
        }
        if let Some(v) = ground_truth.as_slice().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Input(format!("ground truth value {v} is not 0 or 1")));
        }
        if task == TaskKind::Multiclass
            && (0..ground_truth.rows()).any(|i| ground_truth.row(i).iter().sum::<f64>() != 1.0)
        {
            return Err(Error::Input("multiclass ground truth rows must be one-hot".into()));
        }
        Ok(Self { task, keys, columns, scores, ground_truth })
    }
}

fn ratio(num: f64, den: f64, zero: &mut usize) -> f64 {
    if den == 0.0 {
        *zero += 1;
        0.0
    } else {
        num / den
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeMetrics {
    pub ma: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Ratio cells whose denominator was zero and were set to 0.
    pub zero_denominators: usize,
}

/// Label-based mA plus example-based accuracy, precision, recall and F1.
///
/// A score counts as a positive prediction when it exceeds `threshold`.
pub fn attribute_metrics(pred: &PredictionSet, threshold: f64) -> Result<AttributeMetrics> {
    if pred.task != TaskKind::Multilabel {
        return Err(Error::Input(format!("attribute metrics need a multilabel set, got {:?}", pred.task)));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Parameter(format!("threshold {threshold} outside (0, 1)")));
    }
    let (n, a) = pred.scores.shape();
    if n == 0 || a == 0 {
        return Err(Error::Input("empty prediction set".into()));
    }
    let mut zero = 0;
    let (mut tp, mut tn, mut pos, mut neg) = (vec![0.0; a], vec![0.0; a], vec![0.0; a], vec![0.0; a]);
    let (mut acc, mut prec, mut rec) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (mut inter, mut union, mut n_pred, mut n_true) = (0.0, 0.0, 0.0, 0.0);
        for j in 0..a {
            let p = pred.scores[(i, j)] > threshold;
            let g = pred.ground_truth[(i, j)] == 1.0;
            if g {
                pos[j] += 1.0;
                tp[j] += p as u8 as f64;
            } else {
                neg[j] += 1.0;
                tn[j] += (!p) as u8 as f64;
            }
            inter += (p && g) as u8 as f64;
            union += (p || g) as u8 as f64;
            n_pred += p as u8 as f64;
            n_true += g as u8 as f64;
        }
        acc += ratio(inter, union, &mut zero);
        prec += ratio(inter, n_pred, &mut zero);
        rec += ratio(inter, n_true, &mut zero);
    }
    let ma = (0..a).map(|j| 0.5 * (ratio(tp[j], pos[j], &mut zero) + ratio(tn[j], neg[j], &mut zero))).sum::<f64>()
        / a as f64;
    let (precision, recall) = (prec / n as f64, rec / n as f64);
    let f1 = ratio(2.0 * precision * recall, precision + recall, &mut zero);
    Ok(AttributeMetrics { ma, accuracy: acc / n as f64, precision, recall, f1, zero_denominators: zero })
}

/// Top-1 accuracy of a multiclass set; ties go to the lowest class index.
pub fn top1_accuracy(pred: &PredictionSet) -> Result<f64> {
    if pred.task != TaskKind::Multiclass {
        return Err(Error::Input(format!("top-1 accuracy needs a multiclass set, got {:?}", pred.task)));
    }
    if pred.scores.rows() == 0 {
        return Err(Error::Input("empty prediction set".into()));
    }
    let correct =
        (0..pred.scores.rows()).filter(|&i| pred.ground_truth[(i, argmax(pred.scores.row(i)))] == 1.0).count();
    Ok(correct as f64 / pred.scores.rows() as f64)
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub map: f64,
    /// `(k, fraction of queries with a positive in the top k)`.
    pub rank_k: Vec<(usize, f64)>,
    pub n_queries: usize,
    /// Queries dropped because no gallery item shares their id.
    pub excluded: usize,
}

fn unit_rows(m: &Mat<f64>, what: &str) -> Result<Vec<Vec<f64>>> {
    (0..m.rows())
        .map(|i| {
            let n = l2_norm(m.row(i));
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::Numeric(format!("{what} embedding {i} has norm {n}")));
            }
            Ok(m.row(i).iter().map(|x| x / n).collect())
        })
        .collect()
}

/// Cosine-similarity ranking, AP at each positive's rank, and Rank-k.
///
/// Equal similarities are ordered by gallery index.
pub fn retrieval_metrics(
    query_emb: &Mat<f64>,
    gallery_emb: &Mat<f64>,
    query_ids: &[u64],
    gallery_ids: &[u64],
    ks: &[usize],
) -> Result<RetrievalMetrics> {
    if query_emb.cols() != gallery_emb.cols() {
        return Err(Error::Structural(format!("query dim {} vs gallery dim {}", query_emb.cols(), gallery_emb.cols())));
    }
    if query_emb.rows() != query_ids.len() || gallery_emb.rows() != gallery_ids.len() {
        return Err(Error::Structural("embedding rows and id lists differ in length".into()));
    }
    if ks.contains(&0) {
        return Err(Error::Parameter("rank cutoffs must be at least 1".into()));
    }
    let q = unit_rows(query_emb, "query")?;
    let g = unit_rows(gallery_emb, "gallery")?;
    let scores: Vec<Vec<f64>> = q.iter().map(|qv| g.iter().map(|gv| dot(qv, gv)).collect()).collect();
    retrieval_from_scores(&scores, query_ids, gallery_ids, ks)
}

/// Same as [`retrieval_metrics`] on a precomputed `[queries][gallery]` similarity table.
pub fn retrieval_from_scores(
    scores: &[Vec<f64>],
    query_ids: &[u64],
    gallery_ids: &[u64],
    ks: &[usize],
) -> Result<RetrievalMetrics> {
    let mut ap_sum = 0.0;
    let mut hits = vec![0usize; ks.len()];
    let (mut used, mut excluded) = (0usize, 0usize);
    for (row, &qid) in scores.iter().zip(query_ids) {
        if row.len() != gallery_ids.len() {
            return Err(Error::Structural("similarity row length differs from gallery size".into()));
        }
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let positives = gallery_ids.iter().filter(|&&id| id == qid).count();
        if positives == 0 {
            excluded += 1;
            continue;
        }
        used += 1;
        let (mut found, mut ap, mut first) = (0usize, 0.0, None);
        for (rank, &gi) in order.iter().enumerate() {
            if gallery_ids[gi] == qid {
                found += 1;
                ap += found as f64 / (rank + 1) as f64;
                first.get_or_insert(rank + 1);
            }
        }
        ap_sum += ap / positives as f64;
        for (h, &k) in hits.iter_mut().zip(ks) {
            *h += first.is_some_and(|f| f <= k) as usize;
        }
    }
    if used == 0 {
        return Err(Error::Input("no query has a matching gallery item".into()));
    }
    Ok(RetrievalMetrics {
        map: ap_sum / used as f64,
        rank_k: ks.iter().zip(hits).map(|(&k, h)| (k, h as f64 / used as f64)).collect(),
        n_queries: used,
        excluded,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub miou: f64,
    pub macc: f64,
    /// `None` for classes absent from both prediction and truth.
    pub iou: Vec<Option<f64>>,
    pub acc: Vec<Option<f64>>,
}

/// mIoU and mAcc from `confusion[truth][predicted]` counts.
pub fn segmentation_metrics(confusion: &[Vec<u64>]) -> Result<SegmentationMetrics> {
    let c = confusion.len();
    if c == 0 || confusion.iter().any(|r| r.len() != c) {
        return Err(Error::Input(format!("confusion matrix must be square and non-empty, got {c} rows")));
    }
    let mut iou = Vec::with_capacity(c);
    let mut acc = Vec::with_capacity(c);
    for k in 0..c {
        let tp = confusion[k][k] as f64;
        let truth: f64 = confusion[k].iter().map(|&v| v as f64).sum();
        let predicted: f64 = confusion.iter().map(|r| r[k] as f64).sum();
        let (fn_, fp) = (truth - tp, predicted - tp);
        if tp + fn_ + fp == 0.0 {
            iou.push(None);
            acc.push(None);
            continue;
        }
        iou.push(Some(tp / (tp + fn_ + fp)));
        acc.push(Some(if truth > 0.0 { tp / truth } else { 0.0 }));
    }
    let mean = |v: &[Option<f64>]| {
        let present: Vec<f64> = v.iter().flatten().copied().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    };
    Ok(SegmentationMetrics { miou: mean(&iou), macc: mean(&acc), iou, acc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn multilabel(scores: Vec<Vec<f64>>, truth: Vec<Vec<f64>>) -> PredictionSet {
        let n = scores.len();
        let a = scores[0].len();
        PredictionSet::new(
            TaskKind::Multilabel,
            (0..n).map(|i| i.to_string()).collect(),
            (0..a).map(|j| format!("a{j}")).collect(),
            Mat::from_rows(&scores).unwrap(),
            Mat::from_rows(&truth).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn perfect_and_all_negative_predictors() {
        let truth = vec![vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0], vec![1.0, 1.0, 0.0]];
        let m = attribute_metrics(&multilabel(truth.clone(), truth.clone()), 0.5).unwrap();
        assert_eq!([m.ma, m.accuracy, m.precision, m.recall, m.f1], [1.0; 5]);
        let m = attribute_metrics(&multilabel(vec![vec![0.0; 3]; 3], truth), 0.5).unwrap();
        assert_eq!(m.ma, 0.5);
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert!(m.zero_denominators > 0);
    }

    #[test]
    fn prediction_sets_validate_truth() {
        let bad = PredictionSet::new(
            TaskKind::Multilabel,
            vec!["a".into()],
            vec!["x".into()],
            Mat::from_rows(&[vec![0.3]]).unwrap(),
            Mat::from_rows(&[vec![0.5]]).unwrap(),
        );
        assert!(matches!(bad, Err(Error::Input(_))));
        let p = multilabel(vec![vec![0.9]], vec![vec![1.0]]);
        assert!(attribute_metrics(&p, 1.0).is_err());
    }

    #[test]
    fn hand_ranked_list() {
        let scores = vec![vec![0.9, 0.8, 0.3, 0.1]];
        let m = retrieval_from_scores(&scores, &[7], &[1, 7, 2, 3], &[1, 2, 4]).unwrap();
        assert_eq!(m.map, 0.5);
        assert_eq!(m.rank_k, vec![(1, 0.0), (2, 1.0), (4, 1.0)]);
        let m = retrieval_from_scores(&[vec![0.1, 0.9, 0.8, 0.2]], &[5], &[1, 5, 5, 2], &[1]).unwrap();
        assert_eq!((m.map, m.rank_k[0].1), (1.0, 1.0));
        let m = retrieval_from_scores(&[vec![0.1, 0.2], vec![0.3, 0.4]], &[1, 9], &[1, 2], &[1]).unwrap();
        assert_eq!((m.n_queries, m.excluded), (1, 1));
        assert!(retrieval_from_scores(&[vec![0.1]], &[1], &[2], &[1]).is_err());
    }

    #[test]
    fn segmentation_reference_values() {
        let m = segmentation_metrics(&[vec![3, 1], vec![1, 3]]).unwrap();
        assert!((m.miou - 0.6).abs() < 1e-15 && (m.macc - 0.75).abs() < 1e-15);
        let m = segmentation_metrics(&[vec![5, 0, 0], vec![0, 0, 0], vec![0, 0, 2]]).unwrap();
        assert_eq!((m.miou, m.macc), (1.0, 1.0));
        assert_eq!(m.iou[1], None);
        assert!(segmentation_metrics(&[vec![1, 2]]).is_err());
        assert!(segmentation_metrics(&[]).is_err());
    }

    #[test]
    fn f1_equals_precision_when_precision_equals_recall() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = 0;
        for _ in 0..2000 {
            let truth: Vec<Vec<f64>> =
                (0..3).map(|_| (0..3).map(|_| rng.random_range(0..2) as f64).collect()).collect();
            let scores: Vec<Vec<f64>> =
                (0..3).map(|_| (0..3).map(|_| rng.random_range(0..2) as f64).collect()).collect();
            let m = attribute_metrics(&multilabel(scores, truth), 0.5).unwrap();
            if m.precision == m.recall {
                seen += 1;
                assert!((m.f1 - m.precision).abs() < 1e-15);
            }
        }
        assert!(seen > 10);
    }

    proptest! {
        #[test]
        fn rank_k_is_monotone_and_map_ignores_monotone_remaps(
            seed: u64, nq in 1usize..6, ng in 2usize..12,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gids: Vec<u64> = (0..ng).map(|_| rng.random_range(0..3)).collect();
            let qids: Vec<u64> = (0..nq).map(|i| gids[i % ng]).collect();
            let scores: Vec<Vec<f64>> = (0..nq).map(|_| (0..ng).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let ks: Vec<usize> = (1..=ng).collect();
            let m = retrieval_from_scores(&scores, &qids, &gids, &ks).unwrap();
            prop_assert!(m.rank_k.windows(2).all(|w| w[0].1 <= w[1].1));
            prop_assert!((0.0..=1.0).contains(&m.map));
            let remapped: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|&s| (3.0 * s).exp() + 2.0).collect()).collect();
            let r = retrieval_from_scores(&remapped, &qids, &gids, &ks).unwrap();
            prop_assert_eq!(r, m);
        }
    }
}
