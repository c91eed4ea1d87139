//! Differential neural encoding: PCA-reduced semantic and spatial embeddings
//! are regressed onto smoothed fMRI, scored with windowed temporal
//! correlation on held-out frames, and contrasted per voxel.

mod pca;
mod ridge;

pub use pca::{pca_fit, pca_inverse_transform, pca_transform, PcaFit};
pub use ridge::{ridge_fit, RidgeFit};

use crate::image::GrayImage;
use crate::par;
use crate::preprocess::FmriSeries;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EncodingError {
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("shape mismatch: {0}")]
    Alignment(String),
    #[error("singular ridge system at lambda = {lambda}")]
    Singular { lambda: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamTag {
    Semantic,
    Spatial,
}

/// `T x D_e` stimulus embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub values: DMatrix<f64>,
    pub tag: StreamTag,
}

impl EmbeddingMatrix {
    pub fn new(values: DMatrix<f64>, tag: StreamTag) -> Result<Self, EncodingError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EncodingError::Configuration(format!(
                "{tag:?} embedding contains non-finite values"
            )));
        }
        Ok(Self { values, tag })
    }

    pub fn from_row_major(t: usize, d: usize, data: &[f64], tag: StreamTag) -> Result<Self, EncodingError> {
        if data.len() != t * d {
            return Err(EncodingError::Alignment(format!(
                "{} values for a {t}x{d} embedding",
                data.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(t, d, data), tag)
    }

    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    (-r..=r)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Per-frame 2-D Gaussian smoothing with radius `ceil(3 sigma)`. Near the
/// edges, and around cells outside `support`, the truncated kernel is
/// renormalized over the cells that remain. Cells outside `support` are
/// written as 0. `sigma = 0` returns the input.
pub fn gaussian_smooth_masked(
    fmri: &FmriSeries,
    sigma: f64,
    support: Option<&[bool]>,
) -> Result<FmriSeries, EncodingError> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(EncodingError::Configuration(format!(
            "smoothing sigma must be non-negative, got {sigma}"
        )));
    }
    let (h, w) = (fmri.height(), fmri.width());
    if let Some(s) = support {
        if s.len() != h * w {
            return Err(EncodingError::Alignment(format!(
                "support has {} cells, frame has {}",
                s.len(),
                h * w
            )));
        }
    }
    let inside = |p: usize| support.is_none_or(|s| s[p]);
    if sigma == 0.0 {
        let mut out = fmri.clone();
        for t in 0..out.n_frames() {
            for (p, v) in out.frame_mut(t).iter_mut().enumerate() {
                if !inside(p) {
                    *v = 0.0;
                }
            }
        }
        return Ok(out);
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let frames = par::map_range(fmri.n_frames(), |t| {
        let src = fmri.frame(t);
        let mut out = vec![0.0; h * w];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let p = (y * w as i64 + x) as usize;
                if !inside(p) {
                    continue;
                }
                let (mut acc, mut norm) = (0.0, 0.0);
                for dy in -r..=r {
                    let yy = y + dy;
                    if yy < 0 || yy >= h as i64 {
                        continue;
                    }
                    for dx in -r..=r {
                        let xx = x + dx;
                        if xx < 0 || xx >= w as i64 {
                            continue;
                        }
                        let q = (yy * w as i64 + xx) as usize;
                        if !inside(q) {
                            continue;
                        }
                        let wt = k[(dy + r) as usize] * k[(dx + r) as usize];
                        acc += wt * src[q];
                        norm += wt;
                    }
                }
                out[p] = acc / norm;
            }
        }
        out
    });
    FmriSeries::new(
        frames.concat(),
        fmri.n_frames(),
        h,
        w,
        fmri.tr_seconds,
        fmri.run_id.clone(),
    )
    .map_err(|e| EncodingError::Configuration(e.to_string()))
}

pub fn gaussian_smooth(fmri: &FmriSeries, sigma: f64) -> Result<FmriSeries, EncodingError> {
    gaussian_smooth_masked(fmri, sigma, None)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowedCorrelation {
    /// Per-voxel mean Pearson correlation over windows with variance in both
    /// arguments; 0 when every window is degenerate.
    pub r: Vec<f64>,
    pub n_windows: usize,
    /// Per-voxel count of zero-variance windows left out of the mean.
    pub degenerate_windows: Vec<usize>,
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        saa += dx * dx;
        sbb += dy * dy;
        sab += dx * dy;
    }
    // Relative floor so that round-off in a constant signal is not read as
    // variance.
    let floor_a = 1e-24 * (ma * ma + 1.0) * n;
    let floor_b = 1e-24 * (mb * mb + 1.0) * n;
    if saa <= floor_a || sbb <= floor_b {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Mean Pearson correlation over consecutive non-overlapping windows of
/// `t_w` frames. Trailing frames that do not fill a window are ignored.
pub fn windowed_correlation(
    gt: &DMatrix<f64>,
    pred: &DMatrix<f64>,
    t_w: usize,
) -> Result<WindowedCorrelation, EncodingError> {
    if gt.shape() != pred.shape() {
        return Err(EncodingError::Alignment(format!(
            "ground truth is {:?}, prediction is {:?}",
            gt.shape(),
            pred.shape()
        )));
    }
    let t = gt.nrows();
    if t_w < 3 || t_w > t {
        return Err(EncodingError::Configuration(format!(
            "window length {t_w} must lie in [3, T = {t}]"
        )));
    }
    let n_windows = t / t_w;
    let per_voxel = par::map_range(gt.ncols(), |v| {
        let (a, b) = (gt.column(v), pred.column(v));
        let (a, b) = (a.as_slice(), b.as_slice());
        let mut sum = 0.0;
        let mut used = 0;
        for k in 0..n_windows {
            let range = k * t_w..(k + 1) * t_w;
            if let Some(r) = pearson(&a[range.clone()], &b[range]) {
                sum += r;
                used += 1;
            }
        }
        let r = if used > 0 { sum / used as f64 } else { 0.0 };
        (r, n_windows - used)
    });
    let (r, degenerate_windows) = per_voxel.into_iter().unzip();
    Ok(WindowedCorrelation {
        r,
        n_windows,
        degenerate_windows,
    })
}

/// `r_spa^2 / (r_spa^2 + r_sem^2) - 0.5`, NaN where both are 0.
pub fn differential_map(r_sem: &[f64], r_spa: &[f64]) -> Result<Vec<f64>, EncodingError> {
    if r_sem.len() != r_spa.len() {
        return Err(EncodingError::Alignment(format!(
            "{} semantic and {} spatial correlations",
            r_sem.len(),
            r_spa.len()
        )));
    }
    Ok(r_sem
        .iter()
        .zip(r_spa)
        .map(|(&a, &b)| {
            let den = a * a + b * b;
            if den > 0.0 {
                b * b / den - 0.5
            } else {
                f64::NAN
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeCorrelation {
    /// Square the signed correlation.
    #[default]
    Keep,
    /// Clamp negative correlations to 0 before contrasting.
    Zero,
}

impl NegativeCorrelation {
    pub fn apply(self, r: Vec<f64>) -> Vec<f64> {
        match self {
            Self::Keep => r,
            Self::Zero => r.into_iter().map(|v| v.max(0.0)).collect(),
        }
    }
}

pub const DEFAULT_PCA_COMPONENTS: usize = 128;
pub const DEFAULT_WINDOW: usize = 30;
pub const DEFAULT_SMOOTHING_SIGMA: f64 = 1.0;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

fn default_lambda_grid() -> Vec<f64> {
    (-2..=4).map(|e| 10f64.powi(e)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodingConfig {
    pub n_components: usize,
    pub window: usize,
    pub smoothing_sigma: f64,
    /// Candidate penalties; one is chosen per stream on an inner validation
    /// split of the training frames.
    pub lambda_grid: Vec<f64>,
    /// Leading fraction of frames used for fitting; the rest are held out.
    pub train_fraction: f64,
    pub negative_correlation: NegativeCorrelation,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            n_components: DEFAULT_PCA_COMPONENTS,
            window: DEFAULT_WINDOW,
            smoothing_sigma: DEFAULT_SMOOTHING_SIGMA,
            lambda_grid: default_lambda_grid(),
            train_fraction: DEFAULT_TRAIN_FRACTION,
            negative_correlation: NegativeCorrelation::Keep,
        }
    }
}

/// Per-stream fitting summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StreamFit {
    pub tag: StreamTag,
    pub n_components: usize,
    pub lambda: f64,
    pub degenerate_windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EncodingReport {
    /// Flattened frame positions of the analysed voxels.
    pub voxel_index: Vec<usize>,
    pub r_sem: Vec<f64>,
    pub r_spa: Vec<f64>,
    /// NaN where both correlations are 0.
    pub p_spa: Vec<f64>,
    pub semantic: StreamFit,
    pub spatial: StreamFit,
    pub n_train: usize,
    pub n_test: usize,
    pub config: EncodingConfig,
    #[serde(skip)]
    pub frame_shape: (usize, usize),
}

impl EncodingReport {
    /// CSV `voxel_index,r_sem,r_spa,p_spa`; the sentinel is written as `nan`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("voxel_index,r_sem,r_spa,p_spa\n");
        for i in 0..self.voxel_index.len() {
            let p = self.p_spa[i];
            let p = if p.is_nan() { "nan".to_string() } else { p.to_string() };
            s.push_str(&format!("{},{},{},{}\n", self.voxel_index[i], self.r_sem[i], self.r_spa[i], p));
        }
        s
    }

    /// `p_spa` laid out on the fMRI frame; NaN outside the analysed voxels.
    pub fn map(&self) -> GrayImage {
        let (h, w) = self.frame_shape;
        let mut img = GrayImage::filled(h, w, f64::NAN);
        for (&v, &p) in self.voxel_index.iter().zip(&self.p_spa) {
            img.data[v] = p;
        }
        img
    }
}

fn rows(m: &DMatrix<f64>, range: std::ops::Range<usize>) -> DMatrix<f64> {
    m.rows(range.start, range.len()).into_owned()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fit_stream(
    e: &EmbeddingMatrix,
    y: &DMatrix<f64>,
    n_train: usize,
    cfg: &EncodingConfig,
) -> Result<(WindowedCorrelation, StreamFit), EncodingError> {
    let t = y.nrows();
    let d = cfg.n_components.min(e.values.ncols()).min(n_train - 1);
    let train_e = rows(&e.values, 0..n_train);
    let pca = pca_fit(&train_e, d)?;
    let x_train = pca_transform(&train_e, &pca)?;
    let x_test = pca_transform(&rows(&e.values, n_train..t), &pca)?;
    let y_train = rows(y, 0..n_train);
    let y_test = rows(y, n_train..t);

    // Inner split of the training frames for choosing the penalty.
    let n_fit = ((n_train as f64) * cfg.train_fraction).round() as usize;
    let n_val = n_train - n_fit;
    let lambda = if cfg.lambda_grid.len() == 1 {
        cfg.lambda_grid[0]
    } else {
        if n_fit <= d || n_val < 3 {
            return Err(EncodingError::Configuration(format!(
                "{n_train} training frames are too few to choose a penalty for {d} components"
            )));
        }
        let x_fit = rows(&x_train, 0..n_fit);
        let x_val = rows(&x_train, n_fit..n_train);
        let y_fit = rows(&y_train, 0..n_fit);
        let y_val = rows(&y_train, n_fit..n_train);
        let t_w = cfg.window.min(n_val);
        let mut best = (f64::NEG_INFINITY, cfg.lambda_grid[0]);
        for &lambda in &cfg.lambda_grid {
            let score = match ridge_fit(&x_fit, &y_fit, lambda) {
                Ok(fit) => mean(&windowed_correlation(&y_val, &fit.predict(&x_val)?, t_w)?.r),
                Err(EncodingError::Singular { .. }) => continue,
                Err(e) => return Err(e),
            };
            if score > best.0 {
                best = (score, lambda);
            }
        }
        best.1
    };
    let fit = ridge_fit(&x_train, &y_train, lambda)?;
    let corr = windowed_correlation(&y_test, &fit.predict(&x_test)?, cfg.window)?;
    let summary = StreamFit {
        tag: e.tag,
        n_components: d,
        lambda,
        degenerate_windows: corr.degenerate_windows.iter().sum(),
    };
    Ok((corr, summary))
}

/// Fits both streams on the leading `train_fraction` of frames and scores
/// them on the rest. `voxels` selects the analysed frame positions (all when
/// `None`); smoothing is restricted to the same support.
pub fn run_encoding(
    fmri: &FmriSeries,
    voxels: Option<&[bool]>,
    e_sem: &EmbeddingMatrix,
    e_spa: &EmbeddingMatrix,
    cfg: &EncodingConfig,
) -> Result<EncodingReport, EncodingError> {
    let t = fmri.n_frames();
    if e_sem.n_frames() != t || e_spa.n_frames() != t {
        return Err(EncodingError::Alignment(format!(
            "fMRI has {t} frames, embeddings have {} and {}",
            e_sem.n_frames(),
            e_spa.n_frames()
        )));
    }
    if cfg.lambda_grid.is_empty() || cfg.lambda_grid.iter().any(|l| !(*l >= 0.0)) {
        return Err(EncodingError::Configuration(
            "lambda grid must be a non-empty list of non-negative values".into(),
        ));
    }
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(EncodingError::Configuration(format!(
            "train fraction must lie in (0, 1), got {}",
            cfg.train_fraction
        )));
    }
    if cfg.n_components == 0 {
        return Err(EncodingError::Configuration("PCA needs at least one component".into()));
    }
    let n_train = ((t as f64) * cfg.train_fraction).round() as usize;
    if n_train < 3 || t - n_train < cfg.window {
        return Err(EncodingError::Configuration(format!(
            "{t} frames split into {n_train} train and {} test, window is {}",
            t - n_train,
            cfg.window
        )));
    }
    let smoothed = gaussian_smooth_masked(fmri, cfg.smoothing_sigma, voxels)?;
    let voxel_index: Vec<usize> = (0..fmri.frame_len())
        .filter(|&p| voxels.is_none_or(|m| m[p]))
        .collect();
    let y = DMatrix::from_fn(t, voxel_index.len(), |i, j| smoothed.at(i, voxel_index[j]));

    let (c_sem, semantic) = fit_stream(e_sem, &y, n_train, cfg)?;
    let (c_spa, spatial) = fit_stream(e_spa, &y, n_train, cfg)?;
    let r_sem = cfg.negative_correlation.apply(c_sem.r);
    let r_spa = cfg.negative_correlation.apply(c_spa.r);
    let p_spa = differential_map(&r_sem, &r_spa)?;
    Ok(EncodingReport {
        voxel_index,
        r_sem,
        r_spa,
        p_spa,
        semantic,
        spatial,
        n_train,
        n_test: t - n_train,
        config: cfg.clone(),
        frame_shape: (fmri.height(), fmri.width()),
    })
}
