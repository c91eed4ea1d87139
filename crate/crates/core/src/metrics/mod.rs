//! Evaluation metrics: foreground matching ratio, SSIM, N-way top-K
//! accuracy, masked flow cosine similarity with coverage buckets, and the
//! multi-candidate representative selector.

mod motion;
mod ssim;

pub use motion::{
    coverage_bucketed_eval, masked_cosine, Aggregation, BucketRow, CosineScore, MotionEvalSample,
    DEFAULT_COVERAGE_THRESHOLDS,
};
pub use ssim::{ssim, video_ssim, SSIM_SIGMA, SSIM_WINDOW};

use crate::image::GrayImage;
use crate::par;
use crate::seeding::{self, purpose};
use thiserror::Error;

pub const DEFAULT_NWAY_TRIALS: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    Alignment(String),
    #[error("configuration error: {0}")]
    Configuration(String),
}

/// Binary foreground mask, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundMask {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
}

impl ForegroundMask {
    pub fn new(height: usize, width: usize, mask: Vec<bool>) -> Result<Self, MetricError> {
        if mask.len() != height * width {
            return Err(MetricError::Alignment(format!(
                "{} mask cells for {height}x{width}",
                mask.len()
            )));
        }
        Ok(Self {
            height,
            width,
            mask,
        })
    }

    /// Fraction of pixels marked foreground.
    pub fn fraction(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }

    pub fn complement(&self) -> Self {
        Self {
            mask: self.mask.iter().map(|m| !m).collect(),
            ..self.clone()
        }
    }
}

/// Fallback foreground detector: pixels strictly brighter than `threshold`.
pub fn threshold_mask(img: &GrayImage, threshold: f64) -> ForegroundMask {
    ForegroundMask {
        height: img.height,
        width: img.width,
        mask: img.data.iter().map(|&v| v > threshold).collect(),
    }
}

/// Fraction of pixels on which the two masks agree.
pub fn matching_ratio(gt: &ForegroundMask, pred: &ForegroundMask) -> Result<f64, MetricError> {
    if gt.height != pred.height || gt.width != pred.width {
        return Err(MetricError::Alignment(format!(
            "masks are {}x{} and {}x{}",
            gt.height, gt.width, pred.height, pred.width
        )));
    }
    let n = gt.mask.len();
    if n == 0 {
        return Err(MetricError::Alignment("empty masks".into()));
    }
    let differing = gt.mask.iter().zip(&pred.mask).filter(|(a, b)| a != b).count();
    Ok(1.0 - differing as f64 / n as f64)
}

/// Classifier scores `n_samples x n_classes` with ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub n_classes: usize,
    pub scores: Vec<f64>,
    pub gt_labels: Vec<usize>,
}

impl ScoreMatrix {
    pub fn new(n_classes: usize, scores: Vec<f64>, gt_labels: Vec<usize>) -> Result<Self, MetricError> {
        if n_classes == 0 || scores.len() != n_classes * gt_labels.len() {
            return Err(MetricError::Alignment(format!(
                "{} scores for {} samples of {n_classes} classes",
                scores.len(),
                gt_labels.len()
            )));
        }
        if let Some(l) = gt_labels.iter().find(|&&l| l >= n_classes) {
            return Err(MetricError::Configuration(format!(
                "label {l} out of range for {n_classes} classes"
            )));
        }
        Ok(Self {
            n_classes,
            scores,
            gt_labels,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.gt_labels.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.n_classes..(i + 1) * self.n_classes]
    }
}

/// N-way top-K accuracy: for every sample and trial the ground-truth class
/// competes with `n - 1` distinct random other classes, and the trial
/// succeeds when it ranks within the top `k` (ties go to the lower class
/// index). Each sample draws from its own seeded stream.
pub fn nway_topk(
    scores: &ScoreMatrix,
    n: usize,
    k: usize,
    trials: usize,
    seed: u64,
) -> Result<f64, MetricError> {
    if n == 0 || n > scores.n_classes {
        return Err(MetricError::Configuration(format!(
            "{n}-way evaluation needs 1 <= n <= {} classes",
            scores.n_classes
        )));
    }
    if k == 0 || k > n || trials == 0 {
        return Err(MetricError::Configuration(format!(
            "need 1 <= k <= n and trials >= 1, got k {k}, n {n}, trials {trials}"
        )));
    }
    if scores.n_samples() == 0 {
        return Err(MetricError::Configuration("no samples".into()));
    }
    let base = seeding::derive(seed, purpose::NWAY);
    let hits = par::map_range(scores.n_samples(), |i| {
        let mut rng = seeding::stream(base, i as u64);
        let row = scores.row(i);
        let gt = scores.gt_labels[i];
        let gt_score = row[gt];
        let mut hits = 0usize;
        for _ in 0..trials {
            let ahead = rand::seq::index::sample(&mut rng, scores.n_classes - 1, n - 1)
                .into_iter()
                .map(|j| if j >= gt { j + 1 } else { j })
                .filter(|&c| row[c] > gt_score || (row[c] == gt_score && c < gt))
                .count();
            if ahead < k {
                hits += 1;
            }
        }
        hits
    });
    let total: usize = hits.iter().sum();
    Ok(total as f64 / (scores.n_samples() * trials) as f64)
}

/// Index of the candidate closest (Euclidean) to the candidate mean, lowest
/// index on ties.
pub fn select_representative<V: AsRef<[f64]>>(candidates: &[V]) -> Result<usize, MetricError> {
    let first = candidates
        .first()
        .ok_or_else(|| MetricError::Configuration("no candidates".into()))?;
    let dim = first.as_ref().len();
    if candidates.iter().any(|c| c.as_ref().len() != dim) {
        return Err(MetricError::Alignment(
            "candidates have different dimensions".into(),
        ));
    }
    let n = candidates.len() as f64;
    let mut mean = vec![0.0; dim];
    for c in candidates {
        for (m, v) in mean.iter_mut().zip(c.as_ref()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in candidates.iter().enumerate() {
        let d: f64 = c
            .as_ref()
            .iter()
            .zip(&mean)
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn mask(h: usize, w: usize, bits: &[u8]) -> ForegroundMask {
        ForegroundMask::new(h, w, bits.iter().map(|&b| b == 1).collect()).unwrap()
    }

    #[test]
    fn matching_ratio_cases() {
        let a = mask(2, 2, &[1, 0, 1, 1]);
        assert_eq!(matching_ratio(&a, &a).unwrap(), 1.0);
        assert_eq!(matching_ratio(&a, &a.complement()).unwrap(), 0.0);
        let b = mask(2, 2, &[1, 1, 1, 1]);
        assert_eq!(matching_ratio(&a, &b).unwrap(), 0.75);
        assert!(matching_ratio(&a, &mask(1, 4, &[1, 0, 1, 1])).is_err());
    }

    proptest! {
        #[test]
        fn matching_ratio_symmetry(bits in proptest::collection::vec(any::<bool>(), 24), other in proptest::collection::vec(any::<bool>(), 24)) {
            let a = ForegroundMask::new(4, 6, bits).unwrap();
            let b = ForegroundMask::new(4, 6, other).unwrap();
            let r = matching_ratio(&a, &b).unwrap();
            prop_assert_eq!(r, matching_ratio(&b, &a).unwrap());
            prop_assert_eq!(r, matching_ratio(&a.complement(), &b.complement()).unwrap());
            prop_assert!((0.0..=1.0).contains(&r));
        }
    }

    fn random_scores(seed: u64, n_samples: usize, n_classes: usize) -> ScoreMatrix {
        let mut rng = seeding::rng(seed);
        let scores = (0..n_samples * n_classes).map(|_| rng.random::<f64>()).collect();
        let labels = (0..n_samples).map(|_| rng.random_range(0..n_classes)).collect();
        ScoreMatrix::new(n_classes, scores, labels).unwrap()
    }

    #[test]
    fn nway_k_equals_n_is_perfect() {
        let s = random_scores(1, 50, 20);
        assert_eq!(nway_topk(&s, 5, 5, 10, 0).unwrap(), 1.0);
    }

    #[test]
    fn nway_dominant_gt_is_perfect() {
        let mut s = random_scores(2, 40, 30);
        for i in 0..40 {
            let gt = s.gt_labels[i];
            s.scores[i * 30 + gt] = 2.0;
        }
        for (n, k) in [(2, 1), (10, 1), (30, 3)] {
            assert_eq!(nway_topk(&s, n, k, 20, 3).unwrap(), 1.0);
        }
    }

    #[test]
    fn nway_chance_level() {
        let s = random_scores(3, 10_000, 100);
        let acc = nway_topk(&s, 50, 1, 1, 5).unwrap();
        assert!((acc - 0.02).abs() < 0.005, "{acc}");
    }

    #[test]
    fn nway_ties_favor_lower_index() {
        // All scores equal: GT wins only against higher-indexed classes.
        let s = ScoreMatrix::new(2, vec![0.5, 0.5, 0.5, 0.5], vec![0, 1]).unwrap();
        assert_eq!(nway_topk(&s, 2, 1, 4, 0).unwrap(), 0.5);
    }

    #[test]
    fn nway_rejects_bad_configuration() {
        let s = random_scores(4, 5, 10);
        assert!(nway_topk(&s, 11, 1, 1, 0).is_err());
        assert!(nway_topk(&s, 5, 6, 1, 0).is_err());
        assert!(nway_topk(&s, 5, 1, 0, 0).is_err());
        assert!(ScoreMatrix::new(3, vec![0.0; 3], vec![3]).is_err());
    }

    #[test]
    fn nway_monotone_in_k() {
        let s = random_scores(6, 200, 40);
        let accs: Vec<f64> = (1..=10).map(|k| nway_topk(&s, 10, k, 20, 9).unwrap()).collect();
        assert!(accs.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn representative_cases() {
        assert_eq!(select_representative(&[vec![3.0, 4.0]]).unwrap(), 0);
        let c = [vec![0.0, 0.0], vec![10.0, 10.0], vec![5.0, 5.0]];
        assert_eq!(select_representative(&c).unwrap(), 2);
        assert!(select_representative::<Vec<f64>>(&[]).is_err());

        let mut rng = seeding::rng(12);
        let cands: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mean: Vec<f64> = (0..6)
            .map(|d| cands.iter().map(|c| c[d]).sum::<f64>() / 20.0)
            .collect();
        let dists: Vec<f64> = cands
            .iter()
            .map(|c| c.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .collect();
        let mut scan = 0;
        for i in 1..20 {
            if dists[i] < dists[scan] {
                scan = i;
            }
        }
        assert_eq!(select_representative(&cands).unwrap(), scan);
    }

    #[test]
    fn threshold_mask_fraction() {
        let img = GrayImage::new(2, 2, vec![0.1, 0.6, 0.9, 0.5]);
        let m = threshold_mask(&img, 0.5);
        assert_eq!(m.mask, vec![false, true, true, false]);
        assert_eq!(m.fraction(), 0.5);
    }
}
