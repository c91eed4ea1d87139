//! Optical-flow fields and the K-means flow codebook.
//!
//! Flow vectors are `[u, v]` in pixels per flow interval at the resolution of
//! the grid they live on. The codebook is fitted with k-means++ seeding and
//! Lloyd iterations over every flattened vector, then sorted by norm so the
//! near-zero cluster sits at index 0.

use crate::par;
use crate::seeding::{self, purpose};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec2 = [f64; 2];

pub const DEFAULT_N_VEC: usize = 40;
pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_FLOW_GRID: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error("shape mismatch: {0}")]
    Alignment(String),
    #[error("only {distinct} distinct vectors for {n_vec} clusters")]
    Degenerate { distinct: usize, n_vec: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-finite flow value at cell {0}")]
    NonFinite(usize),
}

#[inline]
fn dist2(a: Vec2, b: Vec2) -> f64 {
    let du = a[0] - b[0];
    let dv = a[1] - b[1];
    du * du + dv * dv
}

#[inline]
pub fn norm(a: Vec2) -> f64 {
    a[0].hypot(a[1])
}

/// Dense per-cell motion field, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    vectors: Vec<Vec2>,
    valid_mask: Option<Vec<bool>>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, vectors: Vec<Vec2>) -> Result<Self, FlowError> {
        if vectors.len() != height * width {
            return Err(FlowError::Alignment(format!(
                "{} vectors for a {height}x{width} grid",
                vectors.len()
            )));
        }
        if let Some(i) = vectors
            .iter()
            .position(|v| !(v[0].is_finite() && v[1].is_finite()))
        {
            return Err(FlowError::NonFinite(i));
        }
        Ok(Self {
            height,
            width,
            vectors,
            valid_mask: None,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            vectors: vec![[0.0, 0.0]; height * width],
            valid_mask: None,
        }
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self, FlowError> {
        if mask.len() != self.vectors.len() {
            return Err(FlowError::Alignment(format!(
                "mask has {} cells, flow has {}",
                mask.len(),
                self.vectors.len()
            )));
        }
        self.valid_mask = Some(mask);
        Ok(self)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[Vec2] {
        &self.vectors
    }

    pub fn valid_mask(&self) -> Option<&[bool]> {
        self.valid_mask.as_deref()
    }

    pub fn get(&self, row: usize, col: usize) -> Vec2 {
        self.vectors[row * self.width + col]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            vectors: self
                .vectors
                .iter()
                .map(|v| [v[0] * factor, v[1] * factor])
                .collect(),
            valid_mask: self.valid_mask.clone(),
        }
    }
}

/// Quantization centroids, sorted by ascending norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub centroids: Vec<Vec2>,
    pub zero_index: usize,
    pub n_vec: usize,
    pub seed: u64,
}

impl Codebook {
    /// Builds a codebook from explicit centroids. `zero_index` is the
    /// minimum-norm centroid.
    pub fn from_centroids(centroids: Vec<Vec2>, seed: u64) -> Result<Self, FlowError> {
        if centroids.len() < 2 {
            return Err(FlowError::InvalidParameter(format!(
                "a codebook needs at least 2 centroids, got {}",
                centroids.len()
            )));
        }
        let zero_index = min_norm_index(&centroids);
        Ok(Self {
            n_vec: centroids.len(),
            centroids,
            zero_index,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    /// Nearest centroid, lowest index on ties.
    #[inline]
    pub fn nearest(&self, v: Vec2) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, &b) in self.centroids.iter().enumerate() {
            let d = dist2(v, b);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        best
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("codebook serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, FlowError> {
        let cb: Self = serde_json::from_str(s)
            .map_err(|e| FlowError::InvalidParameter(format!("codebook json: {e}")))?;
        if cb.centroids.len() != cb.n_vec || cb.zero_index >= cb.n_vec || cb.n_vec < 2 {
            return Err(FlowError::InvalidParameter(format!(
                "inconsistent codebook: n_vec {} with {} centroids and zero_index {}",
                cb.n_vec,
                cb.centroids.len(),
                cb.zero_index
            )));
        }
        Ok(cb)
    }
}

fn min_norm_index(centroids: &[Vec2]) -> usize {
    let mut best = 0;
    for (i, c) in centroids.iter().enumerate() {
        if norm(*c) < norm(centroids[best]) {
            best = i;
        }
    }
    best
}

/// Diagnostics of a codebook fit.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookFit {
    pub codebook: Codebook,
    /// Inertia after seeding and after every Lloyd iteration.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl CodebookFit {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().unwrap_or(&0.0)
    }
}

fn distinct_count(points: &[Vec2]) -> usize {
    let mut keys: Vec<(u64, u64)> = points
        .iter()
        .map(|p| ((p[0] + 0.0).to_bits(), (p[1] + 0.0).to_bits()))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

fn kmeans_plus_plus(points: &[Vec2], k: usize, rng: &mut seeding::Rng) -> Vec<Vec2> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())]);
    let mut d2: Vec<f64> = points.iter().map(|&p| dist2(p, centroids[0])).collect();
    while centroids.len() < k {
        // Points already covered have weight zero, so every draw is a new
        // distinct vector.
        let sampler = WeightedIndex::new(&d2).expect("uncovered distinct points remain");
        let c = points[sampler.sample(rng)];
        centroids.push(c);
        for (d, &p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, c));
        }
    }
    centroids
}

fn assign(points: &[Vec2], centroids: &[Vec2]) -> Vec<(usize, f64)> {
    const CHUNK: usize = 4096;
    let n_chunks = points.len().div_ceil(CHUNK);
    par::map_range(n_chunks, |c| {
        let lo = c * CHUNK;
        let hi = (lo + CHUNK).min(points.len());
        points[lo..hi]
            .iter()
            .map(|&p| {
                let mut best = (0, f64::INFINITY);
                for (i, &b) in centroids.iter().enumerate() {
                    let d = dist2(p, b);
                    if d < best.1 {
                        best = (i, d);
                    }
                }
                best
            })
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Flattens the vectors of every field.
pub fn flatten_flows(flows: &[FlowField]) -> Vec<Vec2> {
    flows.iter().flat_map(|f| f.vectors.iter().copied()).collect()
}

/// Fits an `n_vec`-entry codebook to all vectors of `flows`.
pub fn fit_codebook(
    flows: &[FlowField],
    n_vec: usize,
    seed: u64,
    max_iters: usize,
) -> Result<CodebookFit, FlowError> {
    fit_codebook_points(&flatten_flows(flows), n_vec, seed, max_iters, DEFAULT_TOLERANCE)
}

/// Lloyd's algorithm with k-means++ seeding over raw 2-vectors. Stops after
/// `max_iters` iterations or once the relative inertia change drops below
/// `tolerance`. Empty clusters keep their previous centroid, so inertia never
/// increases.
pub fn fit_codebook_points(
    points: &[Vec2],
    n_vec: usize,
    seed: u64,
    max_iters: usize,
    tolerance: f64,
) -> Result<CodebookFit, FlowError> {
    if n_vec < 2 {
        return Err(FlowError::InvalidParameter(format!(
            "n_vec must be at least 2, got {n_vec}"
        )));
    }
    if let Some(i) = points
        .iter()
        .position(|v| !(v[0].is_finite() && v[1].is_finite()))
    {
        return Err(FlowError::NonFinite(i));
    }
    let distinct = distinct_count(points);
    if distinct < n_vec {
        return Err(FlowError::Degenerate { distinct, n_vec });
    }

    let mut rng = seeding::stream(seed, purpose::CODEBOOK);
    let mut centroids = kmeans_plus_plus(points, n_vec, &mut rng);
    let mut labels = assign(points, &centroids);
    let mut history = vec![labels.iter().map(|l| l.1).sum::<f64>()];
    let mut iterations = 0;

    for _ in 0..max_iters {
        let mut sums = vec![[0.0f64; 2]; n_vec];
        let mut counts = vec![0usize; n_vec];
        for (p, &(l, _)) in points.iter().zip(&labels) {
            sums[l][0] += p[0];
            sums[l][1] += p[1];
            counts[l] += 1;
        }
        for c in 0..n_vec {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                centroids[c] = [sums[c][0] / n, sums[c][1] / n];
            }
        }
        labels = assign(points, &centroids);
        let inertia: f64 = labels.iter().map(|l| l.1).sum();
        let prev = *history.last().unwrap();
        history.push(inertia);
        iterations += 1;
        let rel = if prev > 0.0 {
            (prev - inertia).abs() / prev
        } else {
            0.0
        };
        if rel < tolerance {
            break;
        }
    }

    centroids.sort_by(|a, b| {
        norm(*a)
            .total_cmp(&norm(*b))
            .then(a[0].total_cmp(&b[0]))
            .then(a[1].total_cmp(&b[1]))
    });
    Ok(CodebookFit {
        codebook: Codebook {
            zero_index: 0,
            n_vec,
            centroids,
            seed,
        },
        inertia_history: history,
        iterations,
    })
}

/// Replaces the minimum-norm centroid with exactly `(0, 0)`.
pub fn zero_snap(codebook: &Codebook) -> Codebook {
    let mut out = codebook.clone();
    let z = min_norm_index(&out.centroids);
    out.centroids[z] = [0.0, 0.0];
    out.zero_index = z;
    out
}

/// Quantized field and the per-cell codebook labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub labels: Vec<usize>,
    pub flow: FlowField,
}

/// Replaces every vector by its nearest centroid.
pub fn quantize(flow: &FlowField, codebook: &Codebook) -> Quantized {
    let labels = quantize_points(&flow.vectors, codebook);
    let vectors = labels.iter().map(|&l| codebook.centroids[l]).collect();
    Quantized {
        labels,
        flow: FlowField {
            height: flow.height,
            width: flow.width,
            vectors,
            valid_mask: flow.valid_mask.clone(),
        },
    }
}

/// Nearest-centroid labels for a batch of raw vectors.
pub fn quantize_points(points: &[Vec2], codebook: &Codebook) -> Vec<usize> {
    const CHUNK: usize = 2048;
    let n_chunks = points.len().div_ceil(CHUNK);
    par::map_range(n_chunks, |c| {
        let lo = c * CHUNK;
        let hi = (lo + CHUNK).min(points.len());
        points[lo..hi]
            .iter()
            .map(|&p| codebook.nearest(p))
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Splits a flow field into `n_frames - 1` equal sub-fields whose sum is the
/// original field.
pub fn extend_flow(flow: &FlowField, n_frames: usize) -> Result<Vec<FlowField>, FlowError> {
    if n_frames < 2 {
        return Err(FlowError::InvalidParameter(format!(
            "need at least 2 frames to extend a flow, got {n_frames}"
        )));
    }
    let steps = n_frames - 1;
    let sub = flow.scaled(1.0 / steps as f64);
    Ok(vec![sub; steps])
}

/// Zeroes background vectors and records the foreground as the validity
/// mask.
pub fn mask_flow(flow: &FlowField, foreground: &[bool]) -> Result<FlowField, FlowError> {
    if foreground.len() != flow.len() {
        return Err(FlowError::Alignment(format!(
            "foreground has {} cells, flow has {}",
            foreground.len(),
            flow.len()
        )));
    }
    let vectors = flow
        .vectors
        .iter()
        .zip(foreground)
        .map(|(&v, &fg)| if fg { v } else { [0.0, 0.0] })
        .collect();
    Ok(FlowField {
        height: flow.height,
        width: flow.width,
        vectors,
        valid_mask: Some(foreground.to_vec()),
    })
}

/// Resamples a field to `height x width`. Vectors are rescaled so they stay
/// in pixels of the target grid. Shrinking uses area-weighted averaging over
/// the covered source cells; enlarging uses bilinear interpolation at target
/// cell centers.
pub fn resample_flow(flow: &FlowField, height: usize, width: usize) -> FlowField {
    let (sh, sw) = (flow.height, flow.width);
    let sy = height as f64 / sh as f64;
    let sx = width as f64 / sw as f64;
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let v = if height <= sh && width <= sw {
                area_average(flow, r, c, sy, sx)
            } else {
                bilinear(flow, (r as f64 + 0.5) / sy - 0.5, (c as f64 + 0.5) / sx - 0.5)
            };
            out.push([v[0] * sx, v[1] * sy]);
        }
    }
    FlowField {
        height,
        width,
        vectors: out,
        valid_mask: None,
    }
}

fn area_average(flow: &FlowField, r: usize, c: usize, sy: f64, sx: f64) -> Vec2 {
    let (y0, y1) = (r as f64 / sy, (r + 1) as f64 / sy);
    let (x0, x1) = (c as f64 / sx, (c + 1) as f64 / sx);
    let mut acc = [0.0, 0.0];
    let mut wsum = 0.0;
    for yy in y0.floor() as usize..(y1.ceil() as usize).min(flow.height) {
        let wy = (y1.min(yy as f64 + 1.0) - y0.max(yy as f64)).max(0.0);
        for xx in x0.floor() as usize..(x1.ceil() as usize).min(flow.width) {
            let wx = (x1.min(xx as f64 + 1.0) - x0.max(xx as f64)).max(0.0);
            let w = wy * wx;
            let v = flow.get(yy, xx);
            acc[0] += w * v[0];
            acc[1] += w * v[1];
            wsum += w;
        }
    }
    [acc[0] / wsum, acc[1] / wsum]
}

fn bilinear(flow: &FlowField, y: f64, x: f64) -> Vec2 {
    let y = y.clamp(0.0, (flow.height - 1) as f64);
    let x = x.clamp(0.0, (flow.width - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(flow.height - 1), (x0 + 1).min(flow.width - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let mut out = [0.0; 2];
    for (d, o) in out.iter_mut().enumerate() {
        let top = flow.get(y0, x0)[d] * (1.0 - fx) + flow.get(y0, x1)[d] * fx;
        let bot = flow.get(y1, x0)[d] * (1.0 - fx) + flow.get(y1, x1)[d] * fx;
        *o = top * (1.0 - fy) + bot * fy;
    }
    out
}
