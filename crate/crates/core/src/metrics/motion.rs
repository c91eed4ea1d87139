use super::{ForegroundMask, MetricError};
use crate::flow_codebook::{quantize, Codebook, FlowField};
use crate::par;
use serde::{Deserialize, Serialize};

/// Foreground-coverage thresholds of the motion table.
pub const DEFAULT_COVERAGE_THRESHOLDS: [f64; 5] = [0.2, 0.3, 0.4, 0.5, 0.6];

/// Masked cosine similarity of one flow pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineScore {
    /// Mean over valid pixels; `None` when no pixel is valid.
    pub similarity: Option<f64>,
    pub n_valid: usize,
    /// Sum of per-pixel cosines, for pooled aggregation.
    pub sum: f64,
}

/// Cosine similarity between ground-truth and predicted flow over pixels that
/// are foreground and whose ground truth does not quantize to the zero
/// cluster. A zero predicted vector contributes 0.
pub fn masked_cosine(
    gt: &FlowField,
    pred: &FlowField,
    fg: &ForegroundMask,
    codebook: &Codebook,
) -> Result<CosineScore, MetricError> {
    if gt.len() != pred.len() || gt.len() != fg.mask.len() || gt.height() != fg.height {
        return Err(MetricError::Alignment(format!(
            "gt flow {}x{}, predicted {}x{}, mask {}x{}",
            gt.height(),
            gt.width(),
            pred.height(),
            pred.width(),
            fg.height,
            fg.width
        )));
    }
    let labels = quantize(gt, codebook).labels;
    let mut sum = 0.0;
    let mut n_valid = 0;
    for (i, (&g, &p)) in gt.vectors().iter().zip(pred.vectors()).enumerate() {
        if !fg.mask[i] || labels[i] == codebook.zero_index {
            continue;
        }
        n_valid += 1;
        let ng = g[0].hypot(g[1]);
        let np = p[0].hypot(p[1]);
        if ng > 0.0 && np > 0.0 {
            sum += (g[0] * p[0] + g[1] * p[1]) / (ng * np);
        }
    }
    Ok(CosineScore {
        similarity: (n_valid > 0).then(|| sum / n_valid as f64),
        n_valid,
        sum,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean of per-sample similarities.
    PerSample,
    /// Sum of pixel cosines over all samples divided by total valid pixels.
    Pooled,
}

#[derive(Debug, Clone)]
pub struct MotionEvalSample {
    pub gt: FlowField,
    pub pred: FlowField,
    pub fg: ForegroundMask,
}

/// One coverage bucket.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BucketRow {
    pub threshold: f64,
    /// `None` when no sample in the bucket has a valid pixel.
    pub similarity: Option<f64>,
    pub n_samples: usize,
    pub n_pixels: usize,
}

/// Averages masked cosine similarity over samples whose foreground fraction
/// exceeds each threshold. Samples without valid pixels are left out.
pub fn coverage_bucketed_eval(
    samples: &[MotionEvalSample],
    codebook: &Codebook,
    thresholds: &[f64],
    aggregation: Aggregation,
) -> Result<Vec<BucketRow>, MetricError> {
    let scores = par::map_slice(samples, |s| {
        masked_cosine(&s.gt, &s.pred, &s.fg, codebook).map(|c| (s.fg.fraction(), c))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;

    Ok(thresholds
        .iter()
        .map(|&theta| {
            let members: Vec<&CosineScore> = scores
                .iter()
                .filter(|(frac, c)| *frac > theta && c.n_valid > 0)
                .map(|(_, c)| c)
                .collect();
            let n_pixels: usize = members.iter().map(|c| c.n_valid).sum();
            let similarity = match (members.is_empty(), aggregation) {
                (true, _) => None,
                (false, Aggregation::PerSample) => Some(
                    members.iter().map(|c| c.similarity.unwrap()).sum::<f64>()
                        / members.len() as f64,
                ),
                (false, Aggregation::Pooled) => {
                    Some(members.iter().map(|c| c.sum).sum::<f64>() / n_pixels as f64)
                }
            };
            BucketRow {
                threshold: theta,
                similarity,
                n_samples: members.len(),
                n_pixels,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow_codebook::{zero_snap, Vec2};
    use crate::seeding;
    use proptest::prelude::*;
    use rand::Rng;

    fn codebook() -> Codebook {
        zero_snap(
            &Codebook::from_centroids(
                vec![[0.1, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]],
                0,
            )
            .unwrap(),
        )
    }

    fn flow(v: Vec<Vec2>) -> FlowField {
        let n = v.len();
        FlowField::new(1, n, v).unwrap()
    }

    fn all_fg(n: usize) -> ForegroundMask {
        ForegroundMask::new(1, n, vec![true; n]).unwrap()
    }

    #[test]
    fn parallel_antiparallel_orthogonal() {
        let cb = codebook();
        let gt = flow(vec![[2.0, 1.0], [0.0, -3.0], [0.01, 0.0]]);
        let fg = all_fg(3);
        let same = masked_cosine(&gt, &gt, &fg, &cb).unwrap();
        assert_eq!(same.n_valid, 2);
        assert!((same.similarity.unwrap() - 1.0).abs() < 1e-15);
        let neg = gt.scaled(-1.0);
        assert!((masked_cosine(&gt, &neg, &fg, &cb).unwrap().similarity.unwrap() + 1.0).abs() < 1e-15);

        let gt = flow(vec![[1.0, 0.0]]);
        let pred = flow(vec![[0.0, 1.0]]);
        assert_eq!(masked_cosine(&gt, &pred, &all_fg(1), &cb).unwrap().similarity, Some(0.0));
    }

    #[test]
    fn zero_prediction_and_empty_mask() {
        let cb = codebook();
        let gt = flow(vec![[1.0, 0.0], [0.0, 1.0]]);
        let pred = flow(vec![[0.0, 0.0], [0.0, 2.0]]);
        let s = masked_cosine(&gt, &pred, &all_fg(2), &cb).unwrap();
        assert_eq!(s.similarity, Some(0.5));

        let none = ForegroundMask::new(1, 2, vec![false, false]).unwrap();
        let s = masked_cosine(&gt, &pred, &none, &cb).unwrap();
        assert_eq!(s.similarity, None);
        assert_eq!(s.n_valid, 0);
    }

    fn sample(frac_cells: usize, sim_pred: Vec2) -> MotionEvalSample {
        // 10 cells, the first `frac_cells` are foreground moving along +u.
        let gt: Vec<Vec2> = (0..10).map(|i| if i < frac_cells { [1.0, 0.0] } else { [0.0, 0.0] }).collect();
        let pred: Vec<Vec2> = (0..10).map(|_| sim_pred).collect();
        MotionEvalSample {
            gt: FlowField::new(2, 5, gt).unwrap(),
            pred: FlowField::new(2, 5, pred).unwrap(),
            fg: ForegroundMask::new(2, 5, (0..10).map(|i| i < frac_cells).collect()).unwrap(),
        }
    }

    fn unit(angle_cos: f64) -> Vec2 {
        [angle_cos, (1.0 - angle_cos * angle_cos).sqrt()]
    }

    #[test]
    fn bucket_boundaries() {
        let cb = codebook();
        // Fraction 0.55 is not representable on 10 cells; use 20 cells.
        let s = MotionEvalSample {
            gt: FlowField::new(4, 5, (0..20).map(|i| if i < 11 { [1.0, 0.0] } else { [0.0, 0.0] }).collect()).unwrap(),
            pred: FlowField::new(4, 5, vec![[1.0, 0.0]; 20]).unwrap(),
            fg: ForegroundMask::new(4, 5, (0..20).map(|i| i < 11).collect()).unwrap(),
        };
        let rows = coverage_bucketed_eval(&[s.clone(), s], &cb, &[0.5, 0.6], Aggregation::PerSample).unwrap();
        assert_eq!(rows[0].n_samples, 2);
        assert_eq!(rows[1].n_samples, 0);
        assert_eq!(rows[1].similarity, None);
    }

    #[test]
    fn bucket_mean() {
        let cb = codebook();
        let samples = [sample(5, unit(0.2)), sample(5, unit(0.4))];
        let rows = coverage_bucketed_eval(&samples, &cb, &[0.2], Aggregation::PerSample).unwrap();
        assert!((rows[0].similarity.unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn manual_bucketing() {
        let cb = codebook();
        let mut rng = seeding::rng(31);
        let samples: Vec<MotionEvalSample> = (0..30)
            .map(|_| sample(rng.random_range(1..=10), unit(rng.random_range(-1.0..1.0))))
            .collect();
        let thetas = DEFAULT_COVERAGE_THRESHOLDS;
        let rows = coverage_bucketed_eval(&samples, &cb, &thetas, Aggregation::PerSample).unwrap();
        for (row, &theta) in rows.iter().zip(&thetas) {
            let mut members = Vec::new();
            for s in &samples {
                let fg = s.fg.mask.iter().filter(|&&m| m).count() as f64 / 10.0;
                if fg > theta {
                    members.push(s.pred.vectors()[0][0]);
                }
            }
            assert_eq!(row.n_samples, members.len());
            let mean = members.iter().sum::<f64>() / members.len() as f64;
            assert!((row.similarity.unwrap() - mean).abs() < 1e-12);
        }
        for w in rows.windows(2) {
            assert!(w[1].n_samples <= w[0].n_samples);
        }
    }

    #[test]
    fn pooled_weights_by_pixels() {
        let cb = codebook();
        let samples = [sample(2, [1.0, 0.0]), sample(8, [0.0, 1.0])];
        let rows = coverage_bucketed_eval(&samples, &cb, &[0.0], Aggregation::Pooled).unwrap();
        assert!((rows[0].similarity.unwrap() - 0.2).abs() < 1e-12);
        let rows = coverage_bucketed_eval(&samples, &cb, &[0.0], Aggregation::PerSample).unwrap();
        assert!((rows[0].similarity.unwrap() - 0.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn invariant_to_positive_rescaling(scales in proptest::collection::vec(0.01f64..100.0, 6), seed in 0u64..100) {
            let cb = codebook();
            let mut rng = seeding::rng(seed);
            let gt: Vec<Vec2> = (0..6).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
            let pred: Vec<Vec2> = (0..6).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
            let scaled: Vec<Vec2> = pred.iter().zip(&scales).map(|(p, s)| [p[0] * s, p[1] * s]).collect();
            let fg = all_fg(6);
            let a = masked_cosine(&flow(gt.clone()), &flow(pred), &fg, &cb).unwrap();
            let b = masked_cosine(&flow(gt), &flow(scaled), &fg, &cb).unwrap();
            prop_assert_eq!(a.n_valid, b.n_valid);
            if let (Some(x), Some(y)) = (a.similarity, b.similarity) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
