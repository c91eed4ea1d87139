//! Synthetic datasets with planted semantic, spatial and motion structure.
//!
//! Each sample is a Gaussian blob of a given class at `(cx, cy)` moving with
//! velocity `(u, v)`. Two voxel populations respond to it: ventral voxels read
//! out the one-hot class, dorsal voxels read out the standardized
//! `(cx, cy, u, v)`. A fixed random mixing of the voxel vector gives the fMRI
//! feature vector, which is broadcast to every cell of the feature grid.

use crate::flow_codebook::{Codebook, FlowField, Vec2};
use crate::image::GrayImage;
use crate::metrics::ForegroundMask;
use crate::motion::{FeatureGrid, FeatureSource, MotionExample};
use crate::par;
use crate::preprocess::FmriSeries;
use crate::seeding::{self, purpose};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic configuration: {0}")]
    Configuration(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    /// `[height, width]` of the feature and flow grid.
    pub grid: [usize; 2],
    pub n_classes: usize,
    pub n_voxels_per_stream: usize,
    pub noise_sigma: f64,
    /// Depth of the fMRI feature vector.
    pub d_fmri: usize,
    /// Per-sample factor on the base blob width `min(grid) / 8`.
    pub blob_scale_range: [f64; 2],
    /// Range of motion magnitudes in grid cells.
    pub motion_range: [f64; 2],
    /// Set from the command-line seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_samples: 500,
            grid: [16, 16],
            n_classes: 10,
            n_voxels_per_stream: 200,
            noise_sigma: 0.1,
            d_fmri: 32,
            blob_scale_range: [1.0, 2.2],
            motion_range: [2.0, 6.0],
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Configuration(m));
        if self.n_samples == 0
            || self.grid.contains(&0)
            || self.n_classes == 0
            || self.n_voxels_per_stream == 0
            || self.d_fmri == 0
        {
            return bad(format!("counts must be at least 1: {self:?}"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        let [s0, s1] = self.blob_scale_range;
        if !(s0 > 0.0 && s1 >= s0 && s1.is_finite()) {
            return bad(format!("blob_scale_range must satisfy 0 < lo <= hi, got {s0}..{s1}"));
        }
        let [m0, m1] = self.motion_range;
        if !(m0 > 0.0 && m1 >= m0 && m1.is_finite()) {
            return bad(format!("motion_range must satisfy 0 < lo <= hi, got {m0}..{m1}"));
        }
        Ok(())
    }

    pub fn base_sigma(&self) -> f64 {
        self.grid[0].min(self.grid[1]) as f64 / 8.0
    }

    /// Depth of the image feature grid: one intensity channel plus one
    /// channel per class.
    pub fn d_img(&self) -> usize {
        1 + self.n_classes
    }

    /// Width of the spatial embedding.
    pub fn d_spatial(&self) -> usize {
        self.n_classes.max(4)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Ventral,
    Dorsal,
}

/// Generative factors of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Latents {
    pub class: usize,
    /// `(cx, cy)` in grid units, x along columns.
    pub center: Vec2,
    pub sigma: f64,
    /// `(u, v)` in grid cells.
    pub motion: Vec2,
}

/// Fixed readouts shared by all samples of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Planted {
    /// `n_v x n_classes`.
    pub ventral_readout: DMatrix<f64>,
    /// `n_v x 4` over standardized `(cx, cy, u, v)`.
    pub dorsal_readout: DMatrix<f64>,
    /// `d_fmri x 2 n_v`.
    pub mixing: DMatrix<f64>,
    pub latent_mean: [f64; 4],
    pub latent_std: [f64; 4],
}

impl Planted {
    fn new(cfg: &SyntheticConfig) -> Self {
        let mut rng = seeding::stream(cfg.seed, purpose::SYNTH_MIXING);
        let n_v = cfg.n_voxels_per_stream;
        let mut normal = |r: usize, c: usize, s: f64| {
            DMatrix::from_fn(r, c, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                s * z
            })
        };
        // Unit-variance signal in both streams: a one-hot column has variance
        // close to 1 over classes, four standardized latents sum to 4.
        let ventral_readout = normal(n_v, cfg.n_classes, 1.0);
        let dorsal_readout = normal(n_v, 4, 0.5);
        let mixing = normal(cfg.d_fmri, 2 * n_v, (2.0 * n_v as f64).sqrt().recip());

        let [gh, gw] = cfg.grid.map(|g| g as f64);
        let uniform_std = |span: f64| span / 12f64.sqrt();
        let [m0, m1] = cfg.motion_range;
        let motion_var = (m0 * m0 + m0 * m1 + m1 * m1) / 3.0 / 2.0;
        Self {
            ventral_readout,
            dorsal_readout,
            mixing,
            latent_mean: [gw / 2.0, gh / 2.0, 0.0, 0.0],
            latent_std: [
                uniform_std(gw * (1.0 - 2.0 * CENTER_MARGIN)),
                uniform_std(gh * (1.0 - 2.0 * CENTER_MARGIN)),
                motion_var.sqrt(),
                motion_var.sqrt(),
            ],
        }
    }

    fn standardized(&self, l: &Latents) -> DVector<f64> {
        let raw = [l.center[0], l.center[1], l.motion[0], l.motion[1]];
        DVector::from_fn(4, |i, _| (raw[i] - self.latent_mean[i]) / self.latent_std[i])
    }
}

/// Fraction of the grid kept clear of blob centers on each side.
const CENTER_MARGIN: f64 = 0.15;

/// Position of every voxel on a 2-D frame: ventral voxels fill the top rows,
/// dorsal voxels start on the next free row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelLayout {
    pub height: usize,
    pub width: usize,
    /// Flattened frame position per voxel.
    pub positions: Vec<usize>,
}

impl VoxelLayout {
    pub fn new(n_per_stream: usize) -> Self {
        let width = ((2 * n_per_stream) as f64).sqrt().ceil() as usize;
        let rows = n_per_stream.div_ceil(width);
        let positions = (0..n_per_stream)
            .chain((0..n_per_stream).map(|i| rows * width + i))
            .collect();
        Self {
            height: 2 * rows,
            width,
            positions,
        }
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width
    }

    /// Cells that hold a voxel.
    pub fn support(&self) -> Vec<bool> {
        let mut s = vec![false; self.frame_len()];
        self.positions.iter().for_each(|&p| s[p] = true);
        s
    }

    pub fn to_frame(&self, voxels: &[f64]) -> Vec<f64> {
        let mut f = vec![0.0; self.frame_len()];
        for (&p, &v) in self.positions.iter().zip(voxels) {
            f[p] = v;
        }
        f
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub latents: Latents,
    pub image_feat: FeatureGrid,
    pub fmri_feat: FeatureGrid,
    /// Ventral voxels followed by dorsal voxels.
    pub fmri_voxels: Vec<f64>,
    pub gt_flow: FlowField,
    pub fg_mask: ForegroundMask,
}

impl SyntheticSample {
    pub fn motion_example(&self, codebook: &Codebook) -> MotionExample {
        MotionExample::new(
            self.image_feat.clone(),
            self.fmri_feat.clone(),
            self.gt_flow.clone(),
            codebook,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub planted: Planted,
    pub samples: Vec<SyntheticSample>,
    pub stream_assignment: Vec<Stream>,
    pub layout: VoxelLayout,
}

impl SyntheticDataset {
    /// Voxel responses as a series of frames, one per sample.
    pub fn fmri_series(&self) -> FmriSeries {
        let data: Vec<f64> = self
            .samples
            .iter()
            .flat_map(|s| self.layout.to_frame(&s.fmri_voxels))
            .collect();
        FmriSeries::new(
            data,
            self.samples.len(),
            self.layout.height,
            self.layout.width,
            2.0,
            "synthetic",
        )
        .expect("layout dimensions are positive")
    }

    /// `T x 2 n_v` voxel matrix.
    pub fn voxel_matrix(&self) -> DMatrix<f64> {
        let n = self.stream_assignment.len();
        DMatrix::from_fn(self.samples.len(), n, |i, j| self.samples[i].fmri_voxels[j])
    }

    /// Planted stream of each frame cell; `None` for empty cells.
    pub fn stream_map(&self) -> Vec<Option<Stream>> {
        let mut m = vec![None; self.layout.frame_len()];
        for (&p, &s) in self.layout.positions.iter().zip(&self.stream_assignment) {
            m[p] = Some(s);
        }
        m
    }

    pub fn motion_examples(&self, codebook: &Codebook) -> Vec<MotionExample> {
        par::map_slice(&self.samples, |s| s.motion_example(codebook))
    }
}

fn draw_latents(cfg: &SyntheticConfig, rng: &mut seeding::Rng) -> Latents {
    let [gh, gw] = cfg.grid.map(|g| g as f64);
    let class = rng.random_range(0..cfg.n_classes);
    let cx = gw * rng.random_range(CENTER_MARGIN..=1.0 - CENTER_MARGIN);
    let cy = gh * rng.random_range(CENTER_MARGIN..=1.0 - CENTER_MARGIN);
    let [s0, s1] = cfg.blob_scale_range;
    let sigma = cfg.base_sigma() * rng.random_range(s0..=s1);
    let [m0, m1] = cfg.motion_range;
    let mag = rng.random_range(m0..=m1);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    Latents {
        class,
        center: [cx, cy],
        sigma,
        motion: [mag * angle.cos(), mag * angle.sin()],
    }
}

/// Blob intensity at the center of cell `(row, col)`.
fn blob(l: &Latents, row: usize, col: usize, cell: f64) -> (f64, f64) {
    let dx = (col as f64 + 0.5) * cell - l.center[0];
    let dy = (row as f64 + 0.5) * cell - l.center[1];
    let d2 = dx * dx + dy * dy;
    ((-d2 / (2.0 * l.sigma * l.sigma)).exp(), d2)
}

/// Builds a sample from its latents; `noise` holds one standard-normal draw
/// per voxel and is scaled by `noise_sigma`.
pub fn sample_from_latents(
    cfg: &SyntheticConfig,
    planted: &Planted,
    latents: Latents,
    noise: &[f64],
) -> SyntheticSample {
    let [h, w] = cfg.grid;
    let n_v = cfg.n_voxels_per_stream;
    let d_img = cfg.d_img();
    let mut image = vec![0.0; h * w * d_img];
    let mut mask = vec![false; h * w];
    let mut flow = vec![[0.0, 0.0]; h * w];
    let fg_radius2 = (2.0 * latents.sigma).powi(2);
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let (intensity, d2) = blob(&latents, r, c, 1.0);
            image[i * d_img] = intensity;
            image[i * d_img + 1 + latents.class] = intensity;
            if d2 <= fg_radius2 {
                mask[i] = true;
                flow[i] = latents.motion;
            }
        }
    }

    let ventral = planted.ventral_readout.column(latents.class);
    let dorsal = &planted.dorsal_readout * planted.standardized(&latents);
    let voxels: Vec<f64> = ventral
        .iter()
        .chain(dorsal.iter())
        .zip(noise)
        .map(|(s, e)| s + cfg.noise_sigma * e)
        .collect();
    debug_assert_eq!(voxels.len(), 2 * n_v);
    let feat = &planted.mixing * DVector::from_column_slice(&voxels);
    let fmri: Vec<f64> = (0..h * w).flat_map(|_| feat.iter().copied()).collect();

    SyntheticSample {
        latents,
        image_feat: FeatureGrid::new(h, w, d_img, image, FeatureSource::Synthetic)
            .expect("image grid shape"),
        fmri_feat: FeatureGrid::new(h, w, cfg.d_fmri, fmri, FeatureSource::Synthetic)
            .expect("fmri grid shape"),
        fmri_voxels: voxels,
        gt_flow: FlowField::new(h, w, flow).expect("flow grid shape"),
        fg_mask: ForegroundMask::new(h, w, mask).expect("mask shape"),
    }
}

/// Generates `n_samples` samples. Sample `i` draws from its own stream, so
/// the output does not depend on evaluation order.
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticDataset, SynthError> {
    cfg.validate()?;
    let planted = Planted::new(cfg);
    let base = seeding::derive(cfg.seed, purpose::SYNTH_SAMPLES);
    let n_v = cfg.n_voxels_per_stream;
    let samples = par::map_range(cfg.n_samples, |i| {
        let mut rng = seeding::stream(base, i as u64);
        let latents = draw_latents(cfg, &mut rng);
        let noise: Vec<f64> = (0..2 * n_v).map(|_| StandardNormal.sample(&mut rng)).collect();
        sample_from_latents(cfg, &planted, latents, &noise)
    });
    let stream_assignment = std::iter::repeat_n(Stream::Ventral, n_v)
        .chain(std::iter::repeat_n(Stream::Dorsal, n_v))
        .collect();
    Ok(SyntheticDataset {
        config: cfg.clone(),
        planted,
        samples,
        stream_assignment,
        layout: VoxelLayout::new(n_v),
    })
}

/// Jitter amplitude added to the one-hot semantic embedding.
pub const SEMANTIC_JITTER: f64 = 1e-7;

/// Semantic rows are the one-hot class plus seeded jitter in
/// `[-SEMANTIC_JITTER, SEMANTIC_JITTER]`; spatial rows are `(cx, cy, u, v)`
/// zero-padded to `max(n_classes, 4)` columns.
pub fn export_embeddings(
    samples: &[SyntheticSample],
    n_classes: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>), SynthError> {
    if samples.is_empty() {
        return Err(SynthError::Configuration("no samples to embed".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.latents.class >= n_classes) {
        return Err(SynthError::Configuration(format!(
            "class {} out of range for {n_classes} classes",
            s.latents.class
        )));
    }
    let mut rng = seeding::stream(seed, purpose::SYNTH_JITTER);
    let mut e_sem = DMatrix::zeros(samples.len(), n_classes);
    for (i, s) in samples.iter().enumerate() {
        for j in 0..n_classes {
            let hot = if j == s.latents.class { 1.0 } else { 0.0 };
            e_sem[(i, j)] = hot + rng.random_range(-SEMANTIC_JITTER..=SEMANTIC_JITTER);
        }
    }
    let d = n_classes.max(4);
    let e_spa = DMatrix::from_fn(samples.len(), d, |i, j| {
        let l = &samples[i].latents;
        match j {
            0 => l.center[0],
            1 => l.center[1],
            2 => l.motion[0],
            3 => l.motion[1],
            _ => 0.0,
        }
    });
    Ok((e_sem, e_spa))
}

/// Renders the blob as a `res x res` grayscale frame in `[0, 1]`.
pub fn render_frame(latents: &Latents, grid: [usize; 2], res: usize) -> GrayImage {
    let cell_y = grid[0] as f64 / res as f64;
    let cell_x = grid[1] as f64 / res as f64;
    let mut img = GrayImage::filled(res, res, 0.0);
    for r in 0..res {
        for c in 0..res {
            let dx = (c as f64 + 0.5) * cell_x - latents.center[0];
            let dy = (r as f64 + 0.5) * cell_y - latents.center[1];
            img.data[r * res + c] =
                (-(dx * dx + dy * dy) / (2.0 * latents.sigma * latents.sigma)).exp();
        }
    }
    img
}

/// Foreground of a rendered frame: pixels within `2 sigma` of the center.
pub fn render_mask(latents: &Latents, grid: [usize; 2], res: usize) -> ForegroundMask {
    let cell_y = grid[0] as f64 / res as f64;
    let cell_x = grid[1] as f64 / res as f64;
    let r2 = (2.0 * latents.sigma).powi(2);
    let mask = (0..res * res)
        .map(|i| {
            let dx = ((i % res) as f64 + 0.5) * cell_x - latents.center[0];
            let dy = ((i / res) as f64 + 0.5) * cell_y - latents.center[1];
            dx * dx + dy * dy <= r2
        })
        .collect();
    ForegroundMask::new(res, res, mask).expect("mask shape")
}
