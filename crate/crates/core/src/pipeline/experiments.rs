//! End-to-end experiments on decoded data: the motion decoder against its
//! image-only ablation, the two-streams encoding analysis and a linear
//! image decoder scored with the image metrics.

use super::data::{MotionData, FRAME_RES};
use super::PipelineError;
use crate::config::PipelineConfig;
use crate::encoding::{
    ridge_fit, run_encoding, EmbeddingMatrix, EncodingConfig, EncodingReport, StreamTag,
};
use crate::flow_codebook::{fit_codebook_points, flatten_flows, zero_snap, Codebook, FlowField};
use crate::metrics::{
    coverage_bucketed_eval, matching_ratio, nway_topk, ssim, Aggregation, BucketRow, ScoreMatrix,
};
use crate::motion::{
    expected_flow, train, DecoderHyper, FeatureGrid, MotionDecoder, TrainConfig, TrainOutcome,
};
use crate::par;
use crate::seeding::{self, purpose};
use crate::synthetic::{export_embeddings, render_frame, render_mask, Latents, Stream, SyntheticDataset};
use nalgebra::DMatrix;
use serde::Serialize;
use std::ops::Range;

/// Number of leading samples used for training.
pub fn split_point(n: usize, train_fraction: f64) -> Result<usize, PipelineError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(PipelineError::Validation(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let k = ((n as f64) * train_fraction).round() as usize;
    if k == 0 || k >= n {
        return Err(PipelineError::Validation(format!(
            "{n} samples leave an empty train or test split at fraction {train_fraction}"
        )));
    }
    Ok(k)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MotionSettings {
    pub n_vec: usize,
    pub max_iters: usize,
    pub tolerance: f64,
    pub d_h: usize,
    pub branch_depth: usize,
    pub lambda2: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_fraction: f64,
    pub thresholds: Vec<f64>,
    pub aggregation: Aggregation,
    pub ablation: bool,
}

impl MotionSettings {
    pub fn from_config(c: &PipelineConfig) -> Self {
        Self {
            n_vec: c.codebook.n_vec,
            max_iters: c.codebook.max_iters,
            tolerance: c.codebook.tolerance,
            d_h: c.decoder.d_h,
            branch_depth: c.decoder.branch_depth,
            lambda2: c.decoder.lambda2,
            learning_rate: c.decoder.learning_rate,
            epochs: c.decoder.epochs,
            batch_size: c.decoder.batch_size,
            train_fraction: c.decoder.train_fraction,
            thresholds: c.metrics.coverage_thresholds.clone(),
            aggregation: c.metrics.aggregation,
            ablation: c.decoder.ablation,
        }
    }
}

/// Fits a codebook to every vector of `flows` and snaps its smallest entry
/// to zero. Returns the codebook and the inertia trace.
pub fn fit_flow_codebook(
    flows: &[FlowField],
    s: &MotionSettings,
    seed: u64,
) -> Result<(Codebook, Vec<f64>), PipelineError> {
    let fit = fit_codebook_points(
        &flatten_flows(flows),
        s.n_vec,
        seeding::derive(seed, purpose::CODEBOOK),
        s.max_iters,
        s.tolerance,
    )?;
    Ok((zero_snap(&fit.codebook), fit.inertia_history))
}

/// Expected flow of the decoder on every sample; `image_only` zeroes the
/// fMRI input.
pub fn predict_flows(
    dec: &MotionDecoder,
    image: &[FeatureGrid],
    fmri: &[FeatureGrid],
    codebook: &Codebook,
    image_only: bool,
) -> Result<Vec<FlowField>, PipelineError> {
    let idx: Vec<usize> = (0..image.len()).collect();
    par::map_slice(&idx, |&i| {
        let probs = if image_only {
            dec.forward(&image[i], &fmri[i].zeroed())?
        } else {
            dec.forward(&image[i], &fmri[i])?
        };
        Ok(expected_flow(&probs, codebook)?)
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantResult {
    pub outcome: TrainOutcome,
    pub predictions: Vec<FlowField>,
    /// Every test sample with at least one valid pixel.
    pub overall: BucketRow,
    pub table: Vec<BucketRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub codebook: Codebook,
    pub inertia: Vec<f64>,
    pub n_train: usize,
    pub n_test: usize,
    pub full: VariantResult,
    pub image_only: Option<VariantResult>,
}

fn evaluate(
    data: &MotionData,
    test: Range<usize>,
    preds: &[FlowField],
    codebook: &Codebook,
    s: &MotionSettings,
) -> Result<(BucketRow, Vec<BucketRow>), PipelineError> {
    let samples = data.eval_samples(test, preds.to_vec());
    let overall = coverage_bucketed_eval(&samples, codebook, &[0.0], s.aggregation)?[0];
    let table = coverage_bucketed_eval(&samples, codebook, &s.thresholds, s.aggregation)?;
    Ok((overall, table))
}

/// Trains the full decoder and, when `s.ablation` is set, the image-only
/// variant from the same initialization and batch order, on the leading
/// `train_fraction` of `data`; both are scored on the rest. Without a given
/// codebook one is fitted to the training flows.
pub fn run_motion_ablation(
    data: &MotionData,
    s: &MotionSettings,
    codebook: Option<Codebook>,
    seed: u64,
) -> Result<AblationResult, PipelineError> {
    if data.is_empty() {
        return Err(PipelineError::Validation("empty motion dataset".into()));
    }
    let n = data.len();
    let n_train = split_point(n, s.train_fraction)?;
    let (codebook, inertia) = match codebook {
        Some(cb) => (cb, Vec::new()),
        None => fit_flow_codebook(&data.flows[..n_train], s, seed)?,
    };
    let hyper = DecoderHyper {
        d_img: data.image[0].depth,
        d_fmri: data.fmri[0].depth,
        d_h: s.d_h,
        n_vec: codebook.len(),
        branch_depth: s.branch_depth,
        lambda2: s.lambda2,
        learning_rate: s.learning_rate,
        seed,
    };
    let init = MotionDecoder::new(hyper)?;
    let tc = TrainConfig {
        epochs: s.epochs,
        batch_size: s.batch_size,
        learning_rate: s.learning_rate,
        seed,
    };
    let train_set = data.examples(0..n_train, &codebook);
    let test = n_train..n;

    let run = |image_only: bool| -> Result<VariantResult, PipelineError> {
        let outcome = if image_only {
            let ablated: Vec<_> = train_set.iter().map(|e| e.without_fmri()).collect();
            train(&init, &ablated, &codebook, &tc)?
        } else {
            train(&init, &train_set, &codebook, &tc)?
        };
        let predictions = predict_flows(
            &outcome.decoder,
            &data.image[test.clone()],
            &data.fmri[test.clone()],
            &codebook,
            image_only,
        )?;
        let (overall, table) = evaluate(data, test.clone(), &predictions, &codebook, s)?;
        Ok(VariantResult {
            outcome,
            predictions,
            overall,
            table,
        })
    };
    let full = run(false)?;
    let image_only = if s.ablation { Some(run(true)?) } else { None };
    Ok(AblationResult {
        codebook,
        inertia,
        n_train,
        n_test: n - n_train,
        full,
        image_only,
    })
}

/// CSV `threshold,similarity,n_samples,n_pixels`; empty buckets have an
/// empty similarity.
pub fn motion_table_csv(rows: &[BucketRow]) -> String {
    let mut s = String::from("threshold,similarity,n_samples,n_pixels\n");
    for r in rows {
        let sim = r.similarity.map_or(String::new(), |v| v.to_string());
        s.push_str(&format!("{},{sim},{},{}\n", r.threshold, r.n_samples, r.n_pixels));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStreamsResult {
    pub report: EncodingReport,
    /// Fraction of voxels whose `p_spa` sign matches the planted stream
    /// (dorsal positive, ventral negative). NaN entries count as misses.
    pub sign_accuracy: f64,
    /// Mean `|p_spa|` over finite entries when the spatial embedding is
    /// replaced by the semantic one.
    pub null_mean_abs: f64,
}

pub fn sign_accuracy(report: &EncodingReport, streams: &[Option<Stream>]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (&v, &p) in report.voxel_index.iter().zip(&report.p_spa) {
        let Some(stream) = streams[v] else { continue };
        total += 1;
        let ok = match stream {
            Stream::Dorsal => p > 0.0,
            Stream::Ventral => p < 0.0,
        };
        hits += ok as usize;
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

pub fn synthetic_embeddings(ds: &SyntheticDataset) -> Result<(EmbeddingMatrix, EmbeddingMatrix), PipelineError> {
    let (e_sem, e_spa) = export_embeddings(&ds.samples, ds.config.n_classes, ds.config.seed)?;
    Ok((
        EmbeddingMatrix::new(e_sem, StreamTag::Semantic)?,
        EmbeddingMatrix::new(e_spa, StreamTag::Spatial)?,
    ))
}

/// Differential encoding on the synthetic voxels, plus the control run with
/// identical embeddings.
pub fn run_two_streams(ds: &SyntheticDataset, cfg: &EncodingConfig) -> Result<TwoStreamsResult, PipelineError> {
    let fmri = ds.fmri_series();
    let support = ds.layout.support();
    let (e_sem, e_spa) = synthetic_embeddings(ds)?;
    let report = run_encoding(&fmri, Some(&support), &e_sem, &e_spa, cfg)?;
    let same = EmbeddingMatrix::new(e_sem.values.clone(), StreamTag::Spatial)?;
    let null = run_encoding(&fmri, Some(&support), &e_sem, &same, cfg)?;
    let finite: Vec<f64> = null.p_spa.iter().copied().filter(|p| p.is_finite()).collect();
    let null_mean_abs = if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().map(|p| p.abs()).sum::<f64>() / finite.len() as f64
    };
    Ok(TwoStreamsResult {
        sign_accuracy: sign_accuracy(&report, &ds.stream_map()),
        report,
        null_mean_abs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NwayRow {
    pub n: usize,
    pub k: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageDecoding {
    pub nway: Vec<NwayRow>,
    /// Mean matching ratio of predicted and true foreground masks.
    pub r_m: f64,
    pub ssim: f64,
    pub n_test: usize,
    pub lambda: f64,
}

/// Penalty of the linear image decoder.
pub const IMAGE_RIDGE_LAMBDA: f64 = 1.0;

/// Smallest predicted blob width, as a fraction of the base width.
const MIN_SIGMA_FACTOR: f64 = 0.1;

/// Ridge readout from the fMRI feature vector to class scores and to the
/// blob `(cx, cy, sigma)`; the predicted blob is rendered and compared with
/// the true frame. `n`-way entries with more classes than the dataset has are
/// skipped, as are `k > n`.
pub fn run_image_decoding(
    ds: &SyntheticDataset,
    train_fraction: f64,
    metrics: &crate::config::MetricsSection,
    seed: u64,
) -> Result<ImageDecoding, PipelineError> {
    let cfg = &ds.config;
    let n = ds.samples.len();
    let n_train = split_point(n, train_fraction)?;
    let k = cfg.n_classes;
    let x = DMatrix::from_fn(n, cfg.d_fmri, |i, j| ds.samples[i].fmri_feat.cell(0)[j]);
    let y_cls = DMatrix::from_fn(n, k, |i, j| (ds.samples[i].latents.class == j) as u8 as f64);
    let y_geo = DMatrix::from_fn(n, 3, |i, j| {
        let l = &ds.samples[i].latents;
        [l.center[0], l.center[1], l.sigma][j]
    });
    let x_train = x.rows(0, n_train).into_owned();
    let x_test = x.rows(n_train, n - n_train).into_owned();
    let cls = ridge_fit(&x_train, &y_cls.rows(0, n_train).into_owned(), IMAGE_RIDGE_LAMBDA)?;
    let geo = ridge_fit(&x_train, &y_geo.rows(0, n_train).into_owned(), IMAGE_RIDGE_LAMBDA)?;
    let scores = cls.predict(&x_test)?;
    let shape = geo.predict(&x_test)?;

    let flat: Vec<f64> = (0..scores.nrows())
        .flat_map(|i| (0..k).map(move |j| (i, j)))
        .map(|(i, j)| scores[(i, j)])
        .collect();
    let labels = ds.samples[n_train..].iter().map(|s| s.latents.class).collect();
    let sm = ScoreMatrix::new(k, flat, labels)?;
    let mut nway = Vec::new();
    for &ways in metrics.nway.iter().filter(|&&w| w >= 1 && w <= k) {
        for &top in metrics.top_k.iter().filter(|&&t| t >= 1 && t <= ways) {
            let accuracy = nway_topk(&sm, ways, top, metrics.trials, seed)?;
            nway.push(NwayRow { n: ways, k: top, accuracy });
        }
    }

    let min_sigma = MIN_SIGMA_FACTOR * cfg.base_sigma();
    let idx: Vec<usize> = (0..n - n_train).collect();
    let per = par::map_slice(&idx, |&i| {
        let truth = ds.samples[n_train + i].latents;
        let pred = Latents {
            center: [shape[(i, 0)], shape[(i, 1)]],
            sigma: shape[(i, 2)].max(min_sigma),
            ..truth
        };
        let s = ssim(
            &render_frame(&truth, cfg.grid, FRAME_RES),
            &render_frame(&pred, cfg.grid, FRAME_RES),
            metrics.data_range,
        )?;
        let r = matching_ratio(
            &render_mask(&truth, cfg.grid, FRAME_RES),
            &render_mask(&pred, cfg.grid, FRAME_RES),
        )?;
        Ok::<_, PipelineError>((s, r))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let m = per.len() as f64;
    Ok(ImageDecoding {
        nway,
        ssim: per.iter().map(|p| p.0).sum::<f64>() / m,
        r_m: per.iter().map(|p| p.1).sum::<f64>() / m,
        n_test: per.len(),
        lambda: IMAGE_RIDGE_LAMBDA,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::MetricsSection;
    use crate::synthetic::{generate, SyntheticConfig};

    fn tiny(seed: u64) -> SyntheticDataset {
        generate(&SyntheticConfig {
            n_samples: 40,
            grid: [8, 8],
            n_classes: 4,
            n_voxels_per_stream: 12,
            d_fmri: 8,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn split_bounds() {
        assert_eq!(split_point(10, 0.8).unwrap(), 8);
        assert!(split_point(1, 0.8).is_err());
        assert!(split_point(10, 1.0).is_err());
    }

    #[test]
    fn ablation_runs_and_shares_init() {
        let ds = tiny(1);
        let data = MotionData::from_synthetic(&ds);
        let mut s = MotionSettings::from_config(&PipelineConfig::default());
        s.n_vec = 6;
        s.d_h = 4;
        s.epochs = 2;
        let r = run_motion_ablation(&data, &s, None, 3).unwrap();
        assert_eq!((r.n_train, r.n_test), (32, 8));
        let io = r.image_only.as_ref().unwrap();
        assert_eq!(r.full.predictions.len(), 8);
        assert_eq!(r.full.table.len(), 5);
        assert_eq!(io.outcome.history.len(), 2);
        assert_eq!(
            r.codebook.centroids[r.codebook.zero_index],
            [0.0, 0.0]
        );
        let again = run_motion_ablation(&data, &s, None, 3).unwrap();
        assert_eq!(again, r);
    }

    #[test]
    fn table_csv_layout() {
        let rows = [BucketRow {
            threshold: 0.2,
            similarity: None,
            n_samples: 0,
            n_pixels: 0,
        }];
        let csv = motion_table_csv(&rows);
        assert_eq!(csv, "threshold,similarity,n_samples,n_pixels\n0.2,,0,0\n");
    }

    #[test]
    fn image_decoding_skips_large_n() {
        let ds = tiny(2);
        let m = MetricsSection {
            nway: vec![2, 50],
            top_k: vec![1, 5],
            trials: 5,
            ..Default::default()
        };
        let r = run_image_decoding(&ds, 0.8, &m, 0).unwrap();
        assert_eq!(r.nway.len(), 1);
        assert_eq!((r.nway[0].n, r.nway[0].k), (2, 1));
        assert!((0.0..=1.0).contains(&r.r_m));
        assert!(r.ssim <= 1.0);
    }
}
