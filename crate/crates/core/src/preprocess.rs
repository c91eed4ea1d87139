//! fMRI series normalization, run averaging, hemodynamic alignment and
//! sliding-window pairing with the video timeline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("need at least {needed} frames, got {got}")]
    InsufficientFrames { needed: usize, got: usize },
    #[error("runs are not aligned: {0}")]
    Alignment(String),
    #[error("shift of {frames} frames leaves nothing of a {len}-frame series")]
    EmptyOutput { frames: usize, len: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Time-ordered stack of 2-D fMRI frame images, stored row-major as
/// `[t][row][col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FmriSeries {
    data: Vec<f64>,
    n_frames: usize,
    height: usize,
    width: usize,
    pub tr_seconds: f64,
    pub run_id: String,
}

impl FmriSeries {
    pub fn new(
        data: Vec<f64>,
        n_frames: usize,
        height: usize,
        width: usize,
        tr_seconds: f64,
        run_id: impl Into<String>,
    ) -> Result<Self, PreprocessError> {
        if n_frames == 0 || height == 0 || width == 0 {
            return Err(PreprocessError::InsufficientFrames {
                needed: 1,
                got: n_frames,
            });
        }
        if data.len() != n_frames * height * width {
            return Err(PreprocessError::Alignment(format!(
                "{} values for {n_frames}x{height}x{width} frames",
                data.len()
            )));
        }
        if !(tr_seconds > 0.0 && tr_seconds.is_finite()) {
            return Err(PreprocessError::InvalidParameter(format!(
                "repetition time must be positive, got {tr_seconds}"
            )));
        }
        Ok(Self {
            data,
            n_frames,
            height,
            width,
            tr_seconds,
            run_id: run_id.into(),
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        let n = self.frame_len();
        &mut self.data[t * n..(t + 1) * n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Duration covered by the series.
    pub fn duration_seconds(&self) -> f64 {
        self.n_frames as f64 * self.tr_seconds
    }

    /// Value of pixel `p` (flattened) at time `t`.
    #[inline]
    pub fn at(&self, t: usize, p: usize) -> f64 {
        self.data[t * self.frame_len() + p]
    }

    fn with_data(&self, data: Vec<f64>, n_frames: usize) -> Self {
        Self {
            data,
            n_frames,
            height: self.height,
            width: self.width,
            tr_seconds: self.tr_seconds,
            run_id: self.run_id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub n_frames: usize,
    pub fps: f64,
    pub frame_shape: (usize, usize),
    pub stimulus_id: String,
}

impl VideoMeta {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.n_frames < 2 {
            return Err(PreprocessError::InsufficientFrames {
                needed: 2,
                got: self.n_frames,
            });
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(PreprocessError::InvalidParameter(format!(
                "fps must be positive, got {}",
                self.fps
            )));
        }
        Ok(())
    }

    pub fn duration_seconds(&self) -> f64 {
        self.n_frames as f64 / self.fps
    }
}

/// Half-open frame index range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRange {
    pub start: usize,
    pub end: usize,
}

impl FrameRange {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// One fMRI/video window pair. `flow_pairs[k - 1]` holds the absolute video
/// frame indices `(first, future)` whose flow is the motion target for
/// offset `k`, with `future = first + m/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub fmri_range: FrameRange,
    pub video_range: FrameRange,
    pub flow_pairs: Vec<(usize, usize)>,
    pub valid: bool,
}

/// Result of [`z_transform_series`].
#[derive(Debug, Clone, PartialEq)]
pub struct ZTransform {
    pub series: FmriSeries,
    /// Pixels whose temporal variance was zero; they are emitted as zeros.
    pub zero_variance_pixels: usize,
}

/// Per-pixel z-score across time using the sample standard deviation.
pub fn z_transform_series(series: &FmriSeries) -> Result<ZTransform, PreprocessError> {
    let t_len = series.n_frames();
    if t_len < 2 {
        return Err(PreprocessError::InsufficientFrames {
            needed: 2,
            got: t_len,
        });
    }
    let n = series.frame_len();
    let mut out = vec![0.0; series.data.len()];
    let mut zero_var = 0;
    for p in 0..n {
        let mean = (0..t_len).map(|t| series.at(t, p)).sum::<f64>() / t_len as f64;
        let ss: f64 = (0..t_len).map(|t| (series.at(t, p) - mean).powi(2)).sum();
        let sd = (ss / (t_len - 1) as f64).sqrt();
        if sd > 0.0 && sd.is_finite() {
            for t in 0..t_len {
                out[t * n + p] = (series.at(t, p) - mean) / sd;
            }
        } else {
            zero_var += 1;
        }
    }
    Ok(ZTransform {
        series: series.with_data(out, t_len),
        zero_variance_pixels: zero_var,
    })
}

/// Element-wise mean of runs recorded with the same stimulus.
pub fn average_repeated_runs(runs: &[FmriSeries]) -> Result<FmriSeries, PreprocessError> {
    let first = runs
        .first()
        .ok_or_else(|| PreprocessError::Alignment("no runs given".into()))?;
    for r in &runs[1..] {
        if r.n_frames != first.n_frames || r.height != first.height || r.width != first.width {
            return Err(PreprocessError::Alignment(format!(
                "run {:?} has shape {}x{}x{}, expected {}x{}x{}",
                r.run_id, r.n_frames, r.height, r.width, first.n_frames, first.height, first.width
            )));
        }
        if r.tr_seconds != first.tr_seconds {
            return Err(PreprocessError::Alignment(format!(
                "run {:?} has TR {} s, expected {} s",
                r.run_id, r.tr_seconds, first.tr_seconds
            )));
        }
    }
    let k = runs.len() as f64;
    let data = (0..first.data.len())
        .map(|i| runs.iter().map(|r| r.data[i]).sum::<f64>() / k)
        .collect();
    Ok(first.with_data(data, first.n_frames))
}

/// Number of whole TRs for a shift, rounding halves up.
pub fn shift_frames(shift_seconds: f64, tr_seconds: f64) -> Result<usize, PreprocessError> {
    if !(shift_seconds >= 0.0 && shift_seconds.is_finite()) {
        return Err(PreprocessError::InvalidParameter(format!(
            "shift must be non-negative, got {shift_seconds}"
        )));
    }
    Ok((shift_seconds / tr_seconds + 0.5).floor() as usize)
}

/// Advances the series so output frame `t` is input frame `t + s`, with `s`
/// the shift in whole TRs.
pub fn apply_hemodynamic_shift(
    series: &FmriSeries,
    shift_seconds: f64,
) -> Result<FmriSeries, PreprocessError> {
    let s = shift_frames(shift_seconds, series.tr_seconds)?;
    shift_by_frames(series, s)
}

pub fn shift_by_frames(series: &FmriSeries, s: usize) -> Result<FmriSeries, PreprocessError> {
    if s >= series.n_frames {
        return Err(PreprocessError::EmptyOutput {
            frames: s,
            len: series.n_frames,
        });
    }
    let n = series.frame_len();
    let data = series.data[s * n..].to_vec();
    Ok(series.with_data(data, series.n_frames - s))
}

// Guards floor() against values like 2.9999999999 from decimal step sizes.
const TIME_EPS: f64 = 1e-9;

/// Pairs fMRI windows of `alpha * video_seconds` with video windows of
/// `video_seconds`, sliding both by `stride_seconds` along the shared
/// stimulus timeline. Windows that would leave either recording are dropped;
/// a recording shorter than one window yields an empty list.
pub fn make_windows(
    fmri: &FmriSeries,
    video: &VideoMeta,
    video_seconds: f64,
    alpha: f64,
    stride_seconds: f64,
) -> Result<Vec<PairedSample>, PreprocessError> {
    video.validate()?;
    for (name, v) in [
        ("video window", video_seconds),
        ("alpha", alpha),
        ("stride", stride_seconds),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(PreprocessError::InvalidParameter(format!(
                "{name} must be positive, got {v}"
            )));
        }
    }
    let m = (video_seconds * video.fps).round() as usize;
    let n_fmri = (alpha * video_seconds / fmri.tr_seconds - TIME_EPS).ceil().max(1.0) as usize;
    let duration = video.duration_seconds();
    if duration + TIME_EPS < video_seconds || m == 0 {
        return Ok(Vec::new());
    }
    let count = ((duration - video_seconds) / stride_seconds + TIME_EPS).floor() as usize + 1;
    let half = m / 2;

    let mut out = Vec::with_capacity(count);
    for j in 0..count {
        let start_s = j as f64 * stride_seconds;
        let v0 = (start_s * video.fps + TIME_EPS).floor() as usize;
        let f0 = (start_s / fmri.tr_seconds + TIME_EPS).floor() as usize;
        if v0 + m > video.n_frames || f0 + n_fmri > fmri.n_frames() {
            break;
        }
        let flow_pairs = (0..half).map(|k| (v0 + k, v0 + k + half)).collect();
        out.push(PairedSample {
            fmri_range: FrameRange {
                start: f0,
                end: f0 + n_fmri,
            },
            video_range: FrameRange {
                start: v0,
                end: v0 + m,
            },
            flow_pairs,
            valid: true,
        });
    }
    Ok(out)
}

/// Default mean-absolute-difference threshold on [0, 1] frames.
pub const DEFAULT_SCENE_THRESHOLD: f64 = 0.3;

/// Largest mean absolute difference between consecutive frames. Frames must
/// already be scaled to [0, 1].
pub fn max_consecutive_difference<F: AsRef<[f64]>>(frames: &[F]) -> f64 {
    frames
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0].as_ref(), w[1].as_ref());
            let n = a.len().max(1) as f64;
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n
        })
        .fold(0.0, f64::max)
}

/// True when any consecutive frame pair differs by more than `threshold` in
/// mean absolute intensity.
pub fn detect_scene_change<F: AsRef<[f64]>>(frames: &[F], threshold: f64) -> bool {
    max_consecutive_difference(frames) > threshold
}

/// Marks windows whose video frames contain a scene change as invalid.
/// `frames[i]` is video frame `i` on [0, 1].
pub fn filter_scene_changes<F: AsRef<[f64]>>(
    windows: &mut [PairedSample],
    frames: &[F],
    threshold: f64,
) {
    for w in windows {
        let r = w.video_range;
        if r.end <= frames.len() {
            w.valid = !detect_scene_change(&frames[r.start..r.end], threshold);
        }
    }
}

/// JSON manifest entry for a window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub fmri_range: [usize; 2],
    pub video_range: [usize; 2],
    pub valid: bool,
}

impl From<&PairedSample> for WindowRecord {
    fn from(w: &PairedSample) -> Self {
        Self {
            fmri_range: [w.fmri_range.start, w.fmri_range.end],
            video_range: [w.video_range.start, w.video_range.end],
            valid: w.valid,
        }
    }
}

pub fn window_manifest(windows: &[PairedSample]) -> String {
    let records: Vec<WindowRecord> = windows.iter().map(WindowRecord::from).collect();
    serde_json::to_string_pretty(&records).expect("window records serialize")
}
