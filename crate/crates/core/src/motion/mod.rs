//! Motion decoder: per-cell classifier over flow-codebook entries from fused
//! image and fMRI feature grids.
//!
//! Each branch is a stack of per-cell dense layers with ReLU; the two branch
//! outputs are concatenated and a dense head followed by softmax yields a
//! distribution over codebook entries. The predicted flow is the expectation
//! of the codebook under that distribution.

mod grad;
mod train;

pub use grad::{gradient, loss_and_gradient};
pub use train::{train, LossRecord, TrainConfig, TrainOutcome};

use crate::flow_codebook::{Codebook, FlowField, Vec2};
use crate::seeding::{self, purpose};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_LAMBDA2: f64 = 1.0;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-2;
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum DecoderError {
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("training diverged: non-finite loss in epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("empty dataset")]
    EmptyDataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Image,
    Fmri,
    Synthetic,
}

/// `height x width x depth` feature grid, row-major with depth innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub values: Vec<f64>,
    pub source: FeatureSource,
}

impl FeatureGrid {
    pub fn new(
        height: usize,
        width: usize,
        depth: usize,
        values: Vec<f64>,
        source: FeatureSource,
    ) -> Result<Self, DecoderError> {
        if depth == 0 || values.len() != height * width * depth {
            return Err(DecoderError::Configuration(format!(
                "{} feature values for a {height}x{width}x{depth} grid",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DecoderError::Configuration(
                "non-finite feature value".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            depth,
            values,
            source,
        })
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn cell(&self, i: usize) -> &[f64] {
        &self.values[i * self.depth..(i + 1) * self.depth]
    }

    /// Same shape, all zeros. Used for branch ablation.
    pub fn zeroed(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            ..self.clone()
        }
    }
}

/// Dense layer `y = x W + b` with `W` stored row-major as `inputs x outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Weights uniform in `±1/sqrt(inputs)`, zero bias.
    fn uniform(inputs: usize, outputs: usize, rng: &mut seeding::Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
        }
    }

    #[inline]
    pub(crate) fn apply(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.weights[i * self.outputs..(i + 1) * self.outputs];
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
    }
}

/// All trainable parameters. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub image: Vec<Dense>,
    pub fmri: Vec<Dense>,
    pub head: Dense,
}

impl DecoderParams {
    pub fn zeros_like(other: &Self) -> Self {
        let z = |l: &Dense| Dense::zeros(l.inputs, l.outputs);
        Self {
            image: other.image.iter().map(z).collect(),
            fmri: other.fmri.iter().map(z).collect(),
            head: z(&other.head),
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.image.iter().chain(&self.fmri).chain(std::iter::once(&self.head))
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.image
            .iter_mut()
            .chain(&mut self.fmri)
            .chain(std::iter::once(&mut self.head))
    }

    /// Every parameter in a fixed order: per layer, weights then bias.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter();
        for l in self.layers_mut() {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = *it.next().expect("flat parameter vector too short");
            }
        }
        assert!(it.next().is_none(), "flat parameter vector too long");
    }

    pub fn n_params(&self) -> usize {
        self.layers().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        for (a, b) in self.layers_mut().zip(other.layers()) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += alpha * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for l in self.layers_mut() {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|x| *x *= alpha);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .all(|l| l.weights.iter().chain(&l.bias).all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderHyper {
    pub d_img: usize,
    pub d_fmri: usize,
    pub d_h: usize,
    pub n_vec: usize,
    /// Dense+ReLU layers per branch.
    pub branch_depth: usize,
    pub lambda2: f64,
    pub learning_rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionDecoder {
    pub params: DecoderParams,
    pub hyper: DecoderHyper,
}

/// Initializes a decoder with one layer per branch.
pub fn init_decoder(
    d_img: usize,
    d_fmri: usize,
    d_h: usize,
    n_vec: usize,
    seed: u64,
) -> Result<MotionDecoder, DecoderError> {
    MotionDecoder::new(DecoderHyper {
        d_img,
        d_fmri,
        d_h,
        n_vec,
        branch_depth: 1,
        lambda2: DEFAULT_LAMBDA2,
        learning_rate: DEFAULT_LEARNING_RATE,
        seed,
    })
}

impl MotionDecoder {
    pub fn new(hyper: DecoderHyper) -> Result<Self, DecoderError> {
        let DecoderHyper {
            d_img,
            d_fmri,
            d_h,
            n_vec,
            branch_depth,
            ..
        } = hyper;
        if d_img == 0 || d_fmri == 0 || d_h == 0 || n_vec == 0 || branch_depth == 0 {
            return Err(DecoderError::Configuration(format!(
                "decoder dimensions must be positive: d_img {d_img}, d_fmri {d_fmri}, \
                 d_h {d_h}, n_vec {n_vec}, depth {branch_depth}"
            )));
        }
        let mut rng = seeding::stream(hyper.seed, purpose::DECODER_INIT);
        let branch = |d_in: usize, rng: &mut seeding::Rng| {
            (0..branch_depth)
                .map(|i| Dense::uniform(if i == 0 { d_in } else { d_h }, d_h, rng))
                .collect::<Vec<_>>()
        };
        let image = branch(d_img, &mut rng);
        let fmri = branch(d_fmri, &mut rng);
        let head = Dense::uniform(2 * d_h, n_vec, &mut rng);
        Ok(Self {
            params: DecoderParams { image, fmri, head },
            hyper,
        })
    }

    pub(crate) fn check_inputs(
        &self,
        image: &FeatureGrid,
        fmri: &FeatureGrid,
    ) -> Result<(), DecoderError> {
        if image.height != fmri.height || image.width != fmri.width {
            return Err(DecoderError::Configuration(format!(
                "image grid {}x{} does not match fMRI grid {}x{}",
                image.height, image.width, fmri.height, fmri.width
            )));
        }
        if image.depth != self.hyper.d_img || fmri.depth != self.hyper.d_fmri {
            return Err(DecoderError::Configuration(format!(
                "feature depths ({}, {}) do not match decoder ({}, {})",
                image.depth, fmri.depth, self.hyper.d_img, self.hyper.d_fmri
            )));
        }
        Ok(())
    }

    /// Per-cell codebook distribution.
    pub fn forward(
        &self,
        image: &FeatureGrid,
        fmri: &FeatureGrid,
    ) -> Result<ProbGrid, DecoderError> {
        self.check_inputs(image, fmri)?;
        let n_vec = self.hyper.n_vec;
        let mut scratch = Scratch::new(self);
        let mut probs = vec![0.0; image.cells() * n_vec];
        for (c, out) in probs.chunks_mut(n_vec).enumerate() {
            scratch.forward_cell(self, image.cell(c), fmri.cell(c));
            out.copy_from_slice(&scratch.probs);
        }
        Ok(ProbGrid {
            height: image.height,
            width: image.width,
            n_vec,
            probs,
        })
    }
}

/// Per-cell activations, kept for backpropagation.
pub(crate) struct Scratch {
    pub image_acts: Vec<Vec<f64>>,
    pub fmri_acts: Vec<Vec<f64>>,
    pub fused: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Scratch {
    pub fn new(dec: &MotionDecoder) -> Self {
        let d_h = dec.hyper.d_h;
        let depth = dec.params.image.len();
        Self {
            image_acts: vec![vec![0.0; d_h]; depth],
            fmri_acts: vec![vec![0.0; d_h]; depth],
            fused: vec![0.0; 2 * d_h],
            logits: vec![0.0; dec.hyper.n_vec],
            probs: vec![0.0; dec.hyper.n_vec],
        }
    }

    fn run_branch(layers: &[Dense], x: &[f64], acts: &mut [Vec<f64>]) {
        for (i, layer) in layers.iter().enumerate() {
            let (prev, rest) = acts.split_at_mut(i);
            let input = if i == 0 { x } else { &prev[i - 1][..] };
            layer.apply(input, &mut rest[0]);
            rest[0].iter_mut().for_each(|a| *a = a.max(0.0));
        }
    }

    pub fn forward_cell(&mut self, dec: &MotionDecoder, x_img: &[f64], x_fmri: &[f64]) {
        let d_h = dec.hyper.d_h;
        Self::run_branch(&dec.params.image, x_img, &mut self.image_acts);
        Self::run_branch(&dec.params.fmri, x_fmri, &mut self.fmri_acts);
        self.fused[..d_h].copy_from_slice(self.image_acts.last().unwrap());
        self.fused[d_h..].copy_from_slice(self.fmri_acts.last().unwrap());
        dec.params.head.apply(&self.fused, &mut self.logits);
        softmax_into(&self.logits, &mut self.probs);
    }
}

pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// `height x width x n_vec` per-cell distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbGrid {
    pub height: usize,
    pub width: usize,
    pub n_vec: usize,
    pub probs: Vec<f64>,
}

impl ProbGrid {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn cell(&self, i: usize) -> &[f64] {
        &self.probs[i * self.n_vec..(i + 1) * self.n_vec]
    }

    /// Most probable entry per cell.
    pub fn argmax(&self) -> Vec<usize> {
        self.probs
            .chunks(self.n_vec)
            .map(|p| {
                let mut best = 0;
                for (i, &v) in p.iter().enumerate() {
                    if v > p[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

#[inline]
pub(crate) fn expected_vector(p: &[f64], centroids: &[Vec2]) -> Vec2 {
    let mut o = [0.0, 0.0];
    for (&pc, b) in p.iter().zip(centroids) {
        o[0] += pc * b[0];
        o[1] += pc * b[1];
    }
    o
}

/// Flow readout `sum_c p[c] * B_c` per cell.
pub fn expected_flow(probs: &ProbGrid, codebook: &Codebook) -> Result<FlowField, DecoderError> {
    if probs.n_vec != codebook.len() {
        return Err(DecoderError::Configuration(format!(
            "probability grid has {} entries, codebook has {}",
            probs.n_vec,
            codebook.len()
        )));
    }
    let vectors = probs
        .probs
        .chunks(probs.n_vec)
        .map(|p| expected_vector(p, &codebook.centroids))
        .collect();
    FlowField::new(probs.height, probs.width, vectors)
        .map_err(|e| DecoderError::Configuration(e.to_string()))
}

/// Loss terms averaged over cells.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub entropy: f64,
    pub mse: f64,
    pub total: f64,
}

pub(crate) fn check_targets(
    n: usize,
    n_vec: usize,
    labels: &[usize],
    gt_flow: &FlowField,
    codebook: &Codebook,
) -> Result<(), DecoderError> {
    if labels.len() != n || gt_flow.len() != n {
        return Err(DecoderError::Configuration(format!(
            "{} cells of probabilities, {} labels, {} flow vectors",
            n,
            labels.len(),
            gt_flow.len()
        )));
    }
    if n_vec != codebook.len() {
        return Err(DecoderError::Configuration(format!(
            "probability grid has {n_vec} entries, codebook has {}",
            codebook.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= n_vec) {
        return Err(DecoderError::Configuration(format!(
            "label {l} out of range for {n_vec} entries"
        )));
    }
    Ok(())
}

/// Cross-entropy against codebook labels plus `lambda2` times the squared
/// error between the raw ground-truth flow and the expected flow, each
/// averaged over cells.
pub fn loss(
    probs: &ProbGrid,
    labels: &[usize],
    gt_flow: &FlowField,
    codebook: &Codebook,
    lambda2: f64,
) -> Result<LossTerms, DecoderError> {
    check_targets(probs.cells(), probs.n_vec, labels, gt_flow, codebook)?;
    let n = probs.cells() as f64;
    let mut ce = 0.0;
    let mut mse = 0.0;
    for (c, (&y, g)) in labels.iter().zip(gt_flow.vectors()).enumerate() {
        let p = probs.cell(c);
        ce -= p[y].max(LOG_CLAMP).ln();
        let o = expected_vector(p, &codebook.centroids);
        mse += (g[0] - o[0]).powi(2) + (g[1] - o[1]).powi(2);
    }
    let (entropy, mse) = (ce / n, mse / n);
    Ok(LossTerms {
        entropy,
        mse,
        total: entropy + lambda2 * mse,
    })
}

/// One training example: features, the codebook labels of the ground-truth
/// flow and the raw flow itself.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionExample {
    pub image: FeatureGrid,
    pub fmri: FeatureGrid,
    pub labels: Vec<usize>,
    pub gt_flow: FlowField,
}

impl MotionExample {
    pub fn new(
        image: FeatureGrid,
        fmri: FeatureGrid,
        gt_flow: FlowField,
        codebook: &Codebook,
    ) -> Self {
        let labels = crate::flow_codebook::quantize(&gt_flow, codebook).labels;
        Self {
            image,
            fmri,
            labels,
            gt_flow,
        }
    }

    /// The same example with the fMRI branch input zeroed.
    pub fn without_fmri(&self) -> Self {
        Self {
            fmri: self.fmri.zeroed(),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, d: usize, seed: u64, src: FeatureSource) -> FeatureGrid {
        let mut rng = seeding::rng(seed);
        let v = (0..h * w * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureGrid::new(h, w, d, v, src).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_decoder(4, 3, 8, 5, 11).unwrap();
        let b = init_decoder(4, 3, 8, 5, 11).unwrap();
        assert_eq!(a.params.flatten(), b.params.flatten());
        let c = init_decoder(4, 3, 8, 5, 12).unwrap();
        assert_ne!(a.params.flatten(), c.params.flatten());
        let img = &a.params.image[0];
        assert!(img.weights.iter().all(|w| w.abs() <= 0.5));
        assert!(img.bias.iter().all(|&b| b == 0.0));
        assert!(init_decoder(0, 3, 8, 5, 0).is_err());
    }

    #[test]
    fn zero_head_gives_uniform() {
        let mut dec = init_decoder(3, 2, 4, 6, 0).unwrap();
        dec.params.head = Dense::zeros(8, 6);
        let p = dec
            .forward(&grid(2, 3, 3, 1, FeatureSource::Image), &grid(2, 3, 2, 2, FeatureSource::Fmri))
            .unwrap();
        assert!(p.probs.iter().all(|&x| (x - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn softmax_shift_invariance() {
        let z = [0.3, -1.2, 2.0, 0.0];
        let shifted: Vec<f64> = z.iter().map(|v| v + 17.5).collect();
        let (mut a, mut b) = ([0.0; 4], [0.0; 4]);
        softmax_into(&z, &mut a);
        softmax_into(&shifted, &mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_matches_hand_evaluation() {
        let dec = init_decoder(2, 3, 4, 3, 5).unwrap();
        let img = grid(2, 2, 2, 8, FeatureSource::Image);
        let fm = grid(2, 2, 3, 9, FeatureSource::Fmri);
        let p = dec.forward(&img, &fm).unwrap();

        let layer = |l: &Dense, x: &[f64], relu: bool| -> Vec<f64> {
            (0..l.outputs)
                .map(|j| {
                    let mut s = l.bias[j];
                    for i in 0..l.inputs {
                        s += x[i] * l.weights[i * l.outputs + j];
                    }
                    if relu { s.max(0.0) } else { s }
                })
                .collect()
        };
        for c in 0..4 {
            let hi = layer(&dec.params.image[0], img.cell(c), true);
            let hf = layer(&dec.params.fmri[0], fm.cell(c), true);
            let fused: Vec<f64> = hi.into_iter().chain(hf).collect();
            let z = layer(&dec.params.head, &fused, false);
            let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
            let s: f64 = e.iter().sum();
            for k in 0..3 {
                assert!((p.cell(c)[k] - e[k] / s).abs() < 1e-10);
            }
            assert!((p.cell(c).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let dec = init_decoder(2, 3, 4, 3, 5).unwrap();
        let img = grid(2, 2, 2, 8, FeatureSource::Image);
        assert!(dec.forward(&img, &grid(2, 3, 3, 1, FeatureSource::Fmri)).is_err());
        assert!(dec.forward(&img, &grid(2, 2, 4, 1, FeatureSource::Fmri)).is_err());
    }

    fn codebook() -> Codebook {
        Codebook::from_centroids(vec![[0.0, 0.0], [1.0, 2.0], [-3.0, 0.5]], 0).unwrap()
    }

    #[test]
    fn expected_flow_cases() {
        let cb = codebook();
        let one_hot = ProbGrid {
            height: 1,
            width: 1,
            n_vec: 3,
            probs: vec![0.0, 0.0, 1.0],
        };
        assert_eq!(expected_flow(&one_hot, &cb).unwrap().vectors()[0], [-3.0, 0.5]);

        let uniform = ProbGrid {
            probs: vec![1.0 / 3.0; 3],
            ..one_hot.clone()
        };
        let v = expected_flow(&uniform, &cb).unwrap().vectors()[0];
        assert!((v[0] + 2.0 / 3.0).abs() < 1e-15 && (v[1] - 2.5 / 3.0).abs() < 1e-15);

        let mut rng = seeding::rng(4);
        let mut probs = Vec::new();
        for _ in 0..6 {
            let raw: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            probs.extend(raw.iter().map(|r| r / s));
        }
        let pg = ProbGrid { height: 2, width: 3, n_vec: 3, probs };
        let f = expected_flow(&pg, &cb).unwrap();
        for cell in 0..6 {
            for d in 0..2 {
                let mut acc = 0.0;
                for c in 0..3 {
                    acc += pg.probs[cell * 3 + c] * cb.centroids[c][d];
                }
                assert!((f.vectors()[cell][d] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_perfect_and_uniform() {
        let cb = codebook();
        let labels = vec![1, 2, 0, 1];
        let gt = FlowField::new(2, 2, labels.iter().map(|&l| cb.centroids[l]).collect()).unwrap();
        let mut probs = vec![0.0; 12];
        for (c, &l) in labels.iter().enumerate() {
            probs[c * 3 + l] = 1.0;
        }
        let pg = ProbGrid { height: 2, width: 2, n_vec: 3, probs };
        let l = loss(&pg, &labels, &gt, &cb, 1.0).unwrap();
        assert!(l.entropy <= LOG_CLAMP);
        assert_eq!(l.mse, 0.0);

        let cb40 = Codebook::from_centroids((0..40).map(|i| [i as f64, 0.0]).collect(), 0).unwrap();
        let pg = ProbGrid { height: 2, width: 2, n_vec: 40, probs: vec![1.0 / 40.0; 160] };
        let l = loss(&pg, &[3, 7, 39, 0], &FlowField::zeros(2, 2), &cb40, 0.0).unwrap();
        assert!((l.entropy - 40f64.ln()).abs() < 1e-12);
        assert!((l.entropy - 3.689).abs() < 1e-3);
    }

    #[test]
    fn loss_matches_scalar_recomputation() {
        let cb = codebook();
        let dec = init_decoder(2, 2, 3, 3, 21).unwrap();
        let img = grid(3, 2, 2, 1, FeatureSource::Image);
        let fm = grid(3, 2, 2, 2, FeatureSource::Fmri);
        let p = dec.forward(&img, &fm).unwrap();
        let mut rng = seeding::rng(3);
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
        let gt = FlowField::new(3, 2, (0..6).map(|_| [rng.random(), rng.random()]).collect()).unwrap();
        let l = loss(&p, &labels, &gt, &cb, 0.37).unwrap();

        let mut ce = 0.0;
        let mut se = 0.0;
        for c in 0..6 {
            ce += -(p.probs[c * 3 + labels[c]]).ln();
            let mut ou = 0.0;
            let mut ov = 0.0;
            for k in 0..3 {
                ou += p.probs[c * 3 + k] * cb.centroids[k][0];
                ov += p.probs[c * 3 + k] * cb.centroids[k][1];
            }
            se += (gt.vectors()[c][0] - ou).powi(2) + (gt.vectors()[c][1] - ov).powi(2);
        }
        let expect = ce / 6.0 + 0.37 * se / 6.0;
        assert!((l.total - expect).abs() < 1e-10);
    }

    #[test]
    fn loss_clamps_zero_probability() {
        let cb = codebook();
        let pg = ProbGrid { height: 1, width: 1, n_vec: 3, probs: vec![1.0, 0.0, 0.0] };
        let l = loss(&pg, &[2], &FlowField::zeros(1, 1), &cb, 0.0).unwrap();
        assert!((l.entropy + LOG_CLAMP.ln()).abs() < 1e-12);
    }
}
