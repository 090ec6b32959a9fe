//! Feature diagnostics: sparsity ratio, Fisher scores, a Fisher-ranked KNN
//! probe, mask selection statistics and cross-domain overlap of important
//! features.

use std::cmp::Ordering;

use crate::autodiff::Tensor;
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::model::ClientModel;
use crate::Scalar;

/// Default near-zero threshold for [`sparsity_ratio`].
pub const SPARSITY_EPS: f64 = 1e-5;
/// Regularizer added to the intra-class variance.
pub const FISHER_DELTA: f64 = 1e-12;

/// Mean over samples of the fraction of L2-normalized entries `<= eps`.
/// A zero-norm sample counts as fully sparse.
pub fn sparsity_ratio<S: Scalar>(z: &Tensor<S>, eps: S) -> Result<S> {
    if z.is_empty() || z.shape().len() != 2 {
        return Err(Error::Analysis("sparsity ratio needs a non-empty [N, k] matrix".into()));
    }
    if !(eps > S::zero()) {
        return Err(Error::Analysis(format!("sparsity threshold must be positive, got {eps}")));
    }
    let k = S::from_usize_lossy(z.cols());
    let mut total = S::zero();
    for i in 0..z.rows() {
        let row = z.row(i);
        let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
        total += if norm == S::zero() {
            S::one()
        } else {
            S::from_usize_lossy(row.iter().filter(|&&v| v / norm <= eps).count()) / k
        };
    }
    Ok(total / S::from_usize_lossy(z.rows()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherReport<S> {
    pub scores: Vec<S>,
    /// Dimension indices by descending score; ties keep the lower index first.
    pub ranking: Vec<usize>,
}

/// Per-dimension ratio of between-class to within-class scatter
/// (population variances, class-size weighted).
pub fn fisher_scores<S: Scalar>(z: &Tensor<S>, labels: &[usize]) -> Result<FisherReport<S>> {
    if z.shape().len() != 2 || z.rows() != labels.len() {
        return Err(Error::Analysis("features and labels are misaligned".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    let present: Vec<usize> = (0..classes).filter(|&c| counts[c] > 0).collect();
    if present.len() < 2 {
        return Err(Error::Analysis("Fisher scores need at least two classes".into()));
    }
    let k = z.cols();
    let n = S::from_usize_lossy(labels.len());
    let delta = S::lit(FISHER_DELTA);
    let mut scores = Vec::with_capacity(k);
    for d in 0..k {
        let mut sums = vec![S::zero(); classes];
        for (i, &l) in labels.iter().enumerate() {
            sums[l] += z.at(i, d);
        }
        let mean = sums.iter().copied().sum::<S>() / n;
        let class_mean: Vec<S> = (0..classes)
            .map(|c| if counts[c] > 0 { sums[c] / S::from_usize_lossy(counts[c]) } else { S::zero() })
            .collect();
        let mut within = S::zero();
        for (i, &l) in labels.iter().enumerate() {
            let e = z.at(i, d) - class_mean[l];
            within += e * e;
        }
        let between: S = present.iter().map(|&c| S::from_usize_lossy(counts[c]) * (class_mean[c] - mean).powi(2)).sum();
        scores.push(if between == S::zero() { S::zero() } else { between / (within + delta) });
    }
    let mut ranking: Vec<usize> = (0..k).collect();
    ranking.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    Ok(FisherReport { scores, ranking })
}

/// K-nearest-neighbor majority vote with Euclidean distance. Vote ties go to
/// the class with the smaller summed distance, then the lower class index.
pub fn knn_classify<S: Scalar>(
    train: &Tensor<S>,
    train_labels: &[usize],
    query: &Tensor<S>,
    k: usize,
) -> Result<Vec<usize>> {
    if train_labels.is_empty() {
        return Err(Error::Analysis("KNN needs a non-empty training set".into()));
    }
    if k == 0 || k > train_labels.len() {
        return Err(Error::Analysis(format!("K = {k} must lie in [1, {}]", train_labels.len())));
    }
    if train.cols() != query.cols() || train.rows() != train_labels.len() {
        return Err(Error::Analysis("KNN train/query shapes disagree".into()));
    }
    let classes = train_labels.iter().max().map_or(0, |m| m + 1);
    let mut out = Vec::with_capacity(query.rows());
    let mut dist: Vec<(S, usize)> = Vec::with_capacity(train.rows());
    for q in 0..query.rows() {
        let qr = query.row(q);
        dist.clear();
        dist.extend((0..train.rows()).map(|i| {
            let d2: S = train.row(i).iter().zip(qr).map(|(&a, &b)| (a - b) * (a - b)).sum();
            (d2.sqrt(), i)
        }));
        dist.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
        let mut votes = vec![0usize; classes];
        let mut dsum = vec![S::zero(); classes];
        for &(d, i) in &dist[..k] {
            votes[train_labels[i]] += 1;
            dsum[train_labels[i]] += d;
        }
        let mut best = 0;
        for c in 1..classes {
            let better = votes[c] > votes[best] || (votes[c] == votes[best] && dsum[c] < dsum[best]);
            if better {
                best = c;
            }
        }
        out.push(best);
    }
    Ok(out)
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

/// Zeroes every column of `z` not in `keep`.
pub fn mask_columns<S: Scalar>(z: &Tensor<S>, keep: &[usize]) -> Tensor<S> {
    let k = z.cols();
    let mut on = vec![false; k];
    keep.iter().for_each(|&d| on[d] = true);
    let mut out = z.clone();
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        if !on[idx % k] {
            *v = S::zero();
        }
    }
    out
}

/// For each selection ratio, keeps the top `ceil(ratio * k)` Fisher-ranked
/// dimensions (computed on the training features) and reports KNN test accuracy.
pub fn fisher_probe<S: Scalar>(
    z_train: &Tensor<S>,
    labels_train: &[usize],
    z_test: &Tensor<S>,
    labels_test: &[usize],
    ratios: &[f64],
    k: usize,
) -> Result<Vec<f64>> {
    if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(Error::Analysis(format!("selection ratio {r} outside (0, 1]")));
    }
    let report = fisher_scores(z_train, labels_train)?;
    let width = z_train.cols();
    ratios
        .iter()
        .map(|&r| {
            let keep_n = top_count(r, width).max(1);
            let keep = &report.ranking[..keep_n];
            let tr = mask_columns(z_train, keep);
            let te = mask_columns(z_test, keep);
            let pred = knn_classify(&tr, labels_train, &te, k)?;
            Ok(accuracy(&pred, labels_test))
        })
        .collect()
}

/// Selection ratios 0.1, 0.2, ..., 1.0.
pub fn probe_ratios() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

/// Runs [`fisher_probe`] on the frozen universal features of `model`.
pub fn probe_model<S: Scalar>(
    model: &mut ClientModel<S>,
    train: &Dataset<S>,
    test: &Dataset<S>,
    ratios: &[f64],
    k: usize,
) -> Result<Vec<f64>> {
    let z_train = model.infer(&train.features)?.z_g;
    let z_test = model.infer(&test.features)?.z_g;
    fisher_probe(&z_train, &train.labels, &z_test, &test.labels, ratios, k)
}

/// Per-dimension frequency with which the eval-mode hard mask selects a feature.
pub fn selection_frequencies<S: Scalar>(model: &mut ClientModel<S>, data: &Dataset<S>) -> Result<Vec<S>> {
    let inf = model.infer(&data.features)?;
    let mask = inf.mask_hard.ok_or_else(|| Error::Analysis("model has no feature-selection module".into()))?;
    let k = mask.cols();
    let mut freq = vec![S::zero(); k];
    for i in 0..mask.rows() {
        for (f, &m) in freq.iter_mut().zip(mask.row(i)) {
            *f += m;
        }
    }
    let n = S::from_usize_lossy(mask.rows());
    freq.iter_mut().for_each(|f| *f = *f / n);
    Ok(freq)
}

/// Mean of the eval-mode hard mask over all samples and dimensions.
pub fn mask_selection_ratio<S: Scalar>(model: &mut ClientModel<S>, data: &Dataset<S>) -> Result<S> {
    let freq = selection_frequencies(model, data)?;
    Ok(freq.iter().copied().sum::<S>() / S::from_usize_lossy(freq.len()))
}

/// Indices of the `ceil(top_fraction * k)` most frequently selected dimensions
/// (lower index first on ties).
pub fn important_features<S: Scalar>(freq: &[S], top_fraction: f64) -> Vec<usize> {
    let keep = top_count(top_fraction, freq.len());
    let mut idx: Vec<usize> = (0..freq.len()).collect();
    idx.sort_by(|&a, &b| freq[b].partial_cmp(&freq[a]).unwrap_or(Ordering::Equal));
    idx.truncate(keep);
    idx.sort_unstable();
    idx
}

/// `ceil(fraction * n)`, tolerant of representation error such as `0.3 * 10`.
fn top_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Pairwise Jaccard overlap of the important-feature sets of each domain.
pub fn important_feature_overlap<S: Scalar>(freqs: &[Vec<S>], top_fraction: f64) -> Result<Vec<Vec<f64>>> {
    if let Some(first) = freqs.first() {
        if freqs.iter().any(|f| f.len() != first.len()) {
            return Err(Error::Analysis("selection-frequency vectors differ in width".into()));
        }
    }
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::Analysis(format!("top fraction {top_fraction} outside (0, 1]")));
    }
    let sets: Vec<Vec<usize>> = freqs.iter().map(|f| important_features(f, top_fraction)).collect();
    Ok(sets.iter().map(|a| sets.iter().map(|b| jaccard(a, b)).collect()).collect())
}

fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let inter = a.iter().filter(|x| b.contains(x)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(values: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn sparsity_examples() {
        let z = Tensor::from_rows(&[vec![0.0f64, 0.0, 1.0]]).unwrap();
        assert!((sparsity_ratio(&z, 1e-5).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let dense = Tensor::from_rows(&[vec![0.5; 4]]).unwrap();
        assert_eq!(sparsity_ratio(&dense, 1e-5).unwrap(), 0.0);
        let zero = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(sparsity_ratio(&zero, 1e-5).unwrap(), 1.0);
    }

    #[test]
    fn fisher_hand_instance() {
        let r = fisher_scores(&col(&[0.0, 2.0, 3.0, 5.0]), &[0, 0, 1, 1]).unwrap();
        assert!((r.scores[0] - 2.25).abs() < 1e-9);
    }

    #[test]
    fn fisher_constant_dimension_scores_zero() {
        let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 5.0]]).unwrap();
        let r = fisher_scores(&z, &[0, 1, 1]).unwrap();
        assert_eq!(r.scores[0], 0.0);
        assert_eq!(r.ranking, vec![1, 0]);
    }

    #[test]
    fn fisher_needs_two_classes() {
        assert!(matches!(fisher_scores(&col(&[1.0, 2.0]), &[1, 1]), Err(Error::Analysis(_))));
    }

    #[test]
    fn knn_exact_match_and_majority() {
        let train = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![1.5], vec![2.2], vec![10.0]]).unwrap();
        let labels = [0, 1, 1, 0, 0];
        let q = Tensor::from_rows(&[vec![2.2]]).unwrap();
        assert_eq!(knn_classify(&train, &labels, &q, 1).unwrap(), vec![0]);
        // nearest three to 1.4: 1.5 (1), 1.0 (1), 2.2 (0)
        let q = Tensor::from_rows(&[vec![1.4]]).unwrap();
        assert_eq!(knn_classify(&train, &labels, &q, 3).unwrap(), vec![1]);
    }

    #[test]
    fn knn_tie_break_prefers_closer_then_lower_class() {
        let train = Tensor::from_rows(&[vec![-1.0], vec![1.0]]).unwrap();
        let q = Tensor::from_rows(&[vec![0.0], vec![0.5]]).unwrap();
        assert_eq!(knn_classify(&train, &[1, 0], &q, 2).unwrap(), vec![0, 0]);
        assert_eq!(knn_classify(&train, &[0, 1], &q, 2).unwrap(), vec![0, 1]);
        assert!(knn_classify(&Tensor::<f64>::zeros(&[1, 1]), &[], &q, 1).is_err());
    }

    #[test]
    fn overlap_examples() {
        let a = vec![1.0, 0.9, 0.1, 0.0];
        let b = vec![0.0, 0.1, 0.9, 1.0];
        let m = important_feature_overlap(&[a.clone(), a, b], 0.5).unwrap();
        assert_eq!(m[0][1], 1.0);
        assert_eq!(m[0][2], 0.0);
        assert_eq!(m[2][0], m[0][2]);
    }
}
