//! On-disk datasets and checkpoints.
//!
//! A dataset directory written by `synth` holds:
//!
//! | file | dtype | shape |
//! |---|---|---|
//! | `image_feat.dftn` | f64 | `N x H x W x D_img` |
//! | `fmri_feat.dftn` | f64 | `N x D_fmri` (same vector in every cell) |
//! | `gt_flow.dftn` | f64 | `N x H x W x 2` |
//! | `fg_mask.dftn` | u8 | `N x H x W` |
//! | `voxels.dftn` | f64 | `N x 2 n_v` |
//! | `fmri.dftn` | f64 | `N x H_f x W_f` |
//! | `voxel_mask.dftn`, `stream_map.dftn` | u8 | `H_f x W_f` |
//! | `e_sem.dftn`, `e_spa.dftn` | f64 | `N x D` |
//! | `labels.dftn` | i32 | `N` |
//! | `frames.dftn` | f64 | `N x R x R` |
//! | `frame_masks.dftn` | u8 | `N x R x R` |
//! | `latents.json` | | per-sample generative factors |

use super::{load_tensor, OutputDir, PipelineError};
use crate::flow_codebook::{Codebook, FlowField};
use crate::metrics::{ForegroundMask, MotionEvalSample};
use crate::motion::{DecoderHyper, FeatureGrid, FeatureSource, MotionDecoder, MotionExample};
use crate::par;
use crate::synthetic::{export_embeddings, render_frame, render_mask, Stream, SyntheticDataset};
use crate::tensor_io::Tensor;
use serde::{Deserialize, Serialize};
use std::ops::Range;
use std::path::Path;

/// Frame resolution of the rendered stimulus frames.
pub const FRAME_RES: usize = 32;

/// Inputs and targets of the motion decoder.
#[derive(Debug, Clone)]
pub struct MotionData {
    pub image: Vec<FeatureGrid>,
    pub fmri: Vec<FeatureGrid>,
    pub flows: Vec<FlowField>,
    pub fg: Vec<ForegroundMask>,
}

impl MotionData {
    pub fn from_synthetic(ds: &SyntheticDataset) -> Self {
        Self {
            image: ds.samples.iter().map(|s| s.image_feat.clone()).collect(),
            fmri: ds.samples.iter().map(|s| s.fmri_feat.clone()).collect(),
            flows: ds.samples.iter().map(|s| s.gt_flow.clone()).collect(),
            fg: ds.samples.iter().map(|s| s.fg_mask.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }

    pub fn examples(&self, range: Range<usize>, codebook: &Codebook) -> Vec<MotionExample> {
        par::map_range(range.len(), |k| {
            let i = range.start + k;
            MotionExample::new(
                self.image[i].clone(),
                self.fmri[i].clone(),
                self.flows[i].clone(),
                codebook,
            )
        })
    }

    pub fn eval_samples(&self, range: Range<usize>, preds: Vec<FlowField>) -> Vec<MotionEvalSample> {
        range
            .zip(preds)
            .map(|(i, pred)| MotionEvalSample {
                gt: self.flows[i].clone(),
                pred,
                fg: self.fg[i].clone(),
            })
            .collect()
    }

    /// Reads the motion part of a dataset directory.
    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let path = |name: &str| dir.join(name).display().to_string();
        let (ishape, ivals) = f64_tensor(&path("image_feat.dftn"))?;
        let [n, h, w, d_img] = dims::<4>(&ishape, "image_feat.dftn")?;
        let (fshape, fvals) = f64_tensor(&path("fmri_feat.dftn"))?;
        let [nf, d_fmri] = dims::<2>(&fshape, "fmri_feat.dftn")?;
        let (gshape, gvals) = f64_tensor(&path("gt_flow.dftn"))?;
        let (mshape, mvals) = load_tensor(&path("fg_mask.dftn"))?
            .into_u8()
            .map_err(|source| PipelineError::Tensor {
                path: path("fg_mask.dftn"),
                source,
            })?;
        if nf != n || gshape != [n, h, w, 2] || mshape != [n, h, w] {
            return Err(PipelineError::Validation(format!(
                "dataset shapes disagree: image_feat {ishape:?}, fmri_feat {fshape:?}, \
                 gt_flow {gshape:?}, fg_mask {mshape:?}"
            )));
        }
        let cells = h * w;
        let mut data = Self {
            image: Vec::with_capacity(n),
            fmri: Vec::with_capacity(n),
            flows: Vec::with_capacity(n),
            fg: Vec::with_capacity(n),
        };
        for i in 0..n {
            let img = ivals[i * cells * d_img..(i + 1) * cells * d_img].to_vec();
            data.image.push(FeatureGrid::new(h, w, d_img, img, FeatureSource::Image)?);
            let f = &fvals[i * d_fmri..(i + 1) * d_fmri];
            let fm = (0..cells).flat_map(|_| f.iter().copied()).collect();
            data.fmri.push(FeatureGrid::new(h, w, d_fmri, fm, FeatureSource::Fmri)?);
            let g = gvals[i * cells * 2..(i + 1) * cells * 2]
                .chunks(2)
                .map(|v| [v[0], v[1]])
                .collect();
            data.flows.push(FlowField::new(h, w, g)?);
            let m = mvals[i * cells..(i + 1) * cells].iter().map(|&b| b != 0).collect();
            data.fg.push(ForegroundMask::new(h, w, m)?);
        }
        Ok(data)
    }
}

pub fn f64_tensor(path: &str) -> Result<(Vec<usize>, Vec<f64>), PipelineError> {
    load_tensor(path)?.into_f64().map_err(|source| PipelineError::Tensor {
        path: path.to_string(),
        source,
    })
}

pub fn u8_tensor(path: &str) -> Result<(Vec<usize>, Vec<u8>), PipelineError> {
    load_tensor(path)?.into_u8().map_err(|source| PipelineError::Tensor {
        path: path.to_string(),
        source,
    })
}

pub fn i32_tensor(path: &str) -> Result<(Vec<usize>, Vec<i32>), PipelineError> {
    load_tensor(path)?.into_i32().map_err(|source| PipelineError::Tensor {
        path: path.to_string(),
        source,
    })
}

/// Destructures a shape of known rank.
pub fn dims<const N: usize>(shape: &[usize], what: &str) -> Result<[usize; N], PipelineError> {
    shape.try_into().map_err(|_| {
        PipelineError::Validation(format!("{what}: expected {N} dimensions, got shape {shape:?}"))
    })
}

pub fn flows_tensor(flows: &[FlowField]) -> Tensor {
    let (h, w) = flows.first().map_or((0, 0), |f| (f.height(), f.width()));
    let vals = flows.iter().flat_map(|f| f.vectors().iter().flatten().copied()).collect();
    Tensor::f64(vec![flows.len(), h, w, 2], vals).expect("flow tensor shape")
}

pub fn masks_tensor(masks: &[ForegroundMask]) -> Tensor {
    let (h, w) = masks.first().map_or((0, 0), |m| (m.height, m.width));
    let vals = masks.iter().flat_map(|m| m.mask.iter().map(|&b| b as u8)).collect();
    Tensor::u8(vec![masks.len(), h, w], vals).expect("mask tensor shape")
}

/// `N x H x W x 2` flow tensor to fields.
pub fn flows_from_tensor(shape: &[usize], vals: &[f64], what: &str) -> Result<Vec<FlowField>, PipelineError> {
    let [n, h, w, two] = dims::<4>(shape, what)?;
    if two != 2 {
        return Err(PipelineError::Validation(format!(
            "{what}: last dimension must be 2, got shape {shape:?}"
        )));
    }
    (0..n)
        .map(|i| {
            let v = vals[i * h * w * 2..(i + 1) * h * w * 2]
                .chunks(2)
                .map(|p| [p[0], p[1]])
                .collect();
            Ok(FlowField::new(h, w, v)?)
        })
        .collect()
}

pub fn masks_from_tensor(shape: &[usize], vals: &[u8], what: &str) -> Result<Vec<ForegroundMask>, PipelineError> {
    let [n, h, w] = dims::<3>(shape, what)?;
    (0..n)
        .map(|i| {
            let m = vals[i * h * w..(i + 1) * h * w].iter().map(|&b| b != 0).collect();
            Ok(ForegroundMask::new(h, w, m)?)
        })
        .collect()
}

/// Writes every dataset file listed in the module docs.
pub fn write_dataset(out: &mut OutputDir, prefix: &str, ds: &SyntheticDataset) -> Result<(), PipelineError> {
    let cfg = &ds.config;
    let n = ds.samples.len();
    let [h, w] = cfg.grid;
    let name = |f: &str| format!("{prefix}{f}");
    let t = |shape: Vec<usize>, v: Vec<f64>| Tensor::f64(shape, v).expect("dataset tensor shape");

    let image = ds.samples.iter().flat_map(|s| s.image_feat.values.iter().copied()).collect();
    out.write_tensor(&name("image_feat.dftn"), &t(vec![n, h, w, cfg.d_img()], image))?;
    let fmri_feat = ds
        .samples
        .iter()
        .flat_map(|s| s.fmri_feat.cell(0).iter().copied())
        .collect();
    out.write_tensor(&name("fmri_feat.dftn"), &t(vec![n, cfg.d_fmri], fmri_feat))?;
    let flows: Vec<FlowField> = ds.samples.iter().map(|s| s.gt_flow.clone()).collect();
    out.write_tensor(&name("gt_flow.dftn"), &flows_tensor(&flows))?;
    let fg: Vec<ForegroundMask> = ds.samples.iter().map(|s| s.fg_mask.clone()).collect();
    out.write_tensor(&name("fg_mask.dftn"), &masks_tensor(&fg))?;

    let n_vox = ds.stream_assignment.len();
    let voxels = ds.samples.iter().flat_map(|s| s.fmri_voxels.iter().copied()).collect();
    out.write_tensor(&name("voxels.dftn"), &t(vec![n, n_vox], voxels))?;
    let series = ds.fmri_series();
    let (fh, fw) = (ds.layout.height, ds.layout.width);
    out.write_tensor(&name("fmri.dftn"), &t(vec![n, fh, fw], series.into_data()))?;
    let support = ds.layout.support().iter().map(|&b| b as u8).collect();
    out.write_tensor(&name("voxel_mask.dftn"), &Tensor::u8(vec![fh, fw], support).expect("mask"))?;
    let streams = ds
        .stream_map()
        .iter()
        .map(|s| match s {
            None => 0,
            Some(Stream::Ventral) => 1,
            Some(Stream::Dorsal) => 2,
        })
        .collect();
    out.write_tensor(&name("stream_map.dftn"), &Tensor::u8(vec![fh, fw], streams).expect("map"))?;

    let (e_sem, e_spa) = export_embeddings(&ds.samples, cfg.n_classes, cfg.seed)?;
    out.write_tensor(&name("e_sem.dftn"), &matrix_tensor(&e_sem))?;
    out.write_tensor(&name("e_spa.dftn"), &matrix_tensor(&e_spa))?;
    let labels = ds.samples.iter().map(|s| s.latents.class as i32).collect();
    out.write_tensor(&name("labels.dftn"), &Tensor::i32(vec![n], labels).expect("labels"))?;

    let frames = par::map_slice(&ds.samples, |s| render_frame(&s.latents, cfg.grid, FRAME_RES).data);
    let frames = frames.into_iter().flatten().collect();
    out.write_tensor(&name("frames.dftn"), &t(vec![n, FRAME_RES, FRAME_RES], frames))?;
    let masks: Vec<ForegroundMask> = ds
        .samples
        .iter()
        .map(|s| render_mask(&s.latents, cfg.grid, FRAME_RES))
        .collect();
    out.write_tensor(&name("frame_masks.dftn"), &masks_tensor(&masks))?;

    let latents: Vec<_> = ds.samples.iter().map(|s| s.latents).collect();
    out.write_json(&name("latents.json"), &serde_json::to_value(latents).expect("latents"))?;
    Ok(())
}

/// Row-major `T x D` tensor of a matrix.
pub fn matrix_tensor(m: &nalgebra::DMatrix<f64>) -> Tensor {
    let vals = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect();
    Tensor::f64(vec![m.nrows(), m.ncols()], vals).expect("matrix tensor shape")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    hyper: DecoderHyper,
    /// `[inputs, outputs]` per layer in parameter order.
    layers: Vec<[usize; 2]>,
    n_params: usize,
    /// Whether the fMRI branch input was zeroed during training.
    image_only: bool,
}

/// Writes `{prefix}.params.dftn` (flat parameters) and
/// `{prefix}.decoder.json` (hyperparameters and layer shapes).
pub fn write_checkpoint(
    out: &mut OutputDir,
    prefix: &str,
    dec: &MotionDecoder,
    image_only: bool,
) -> Result<(), PipelineError> {
    let flat = dec.params.flatten();
    let meta = CheckpointMeta {
        hyper: dec.hyper,
        layers: dec.params.layers().map(|l| [l.inputs, l.outputs]).collect(),
        n_params: flat.len(),
        image_only,
    };
    out.write_tensor(
        &format!("{prefix}.params.dftn"),
        &Tensor::f64(vec![flat.len()], flat).expect("param vector"),
    )?;
    out.write_json(
        &format!("{prefix}.decoder.json"),
        &serde_json::to_value(meta).expect("checkpoint meta"),
    )
}

/// Reads a checkpoint written by [`write_checkpoint`]; returns the decoder
/// and its `image_only` flag.
pub fn read_checkpoint(dir: &Path, prefix: &str) -> Result<(MotionDecoder, bool), PipelineError> {
    let meta_path = dir.join(format!("{prefix}.decoder.json"));
    let text = std::fs::read_to_string(&meta_path).map_err(|e| PipelineError::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)
        .map_err(|e| PipelineError::Validation(format!("{}: {e}", meta_path.display())))?;
    let (_, flat) = f64_tensor(&dir.join(format!("{prefix}.params.dftn")).display().to_string())?;
    let mut dec = MotionDecoder::new(meta.hyper)?;
    let layers: Vec<[usize; 2]> = dec.params.layers().map(|l| [l.inputs, l.outputs]).collect();
    if layers != meta.layers || flat.len() != dec.params.n_params() {
        return Err(PipelineError::Validation(format!(
            "checkpoint {prefix}: {} parameters in layers {:?} do not match hyperparameters",
            flat.len(),
            meta.layers
        )));
    }
    dec.params.set_flat(&flat);
    Ok((dec, meta.image_only))
}

pub fn read_codebook(path: &str) -> Result<Codebook, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(Path::new(path), e))?;
    Ok(Codebook::from_json(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::init_decoder;
    use crate::synthetic::{generate, SyntheticConfig};

    fn small() -> SyntheticDataset {
        generate(&SyntheticConfig {
            n_samples: 6,
            grid: [8, 8],
            n_classes: 3,
            n_voxels_per_stream: 10,
            d_fmri: 5,
            seed: 4,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn dataset_round_trip() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(dir.path()).unwrap();
        write_dataset(&mut out, "", &ds).unwrap();
        let back = MotionData::load(dir.path()).unwrap();
        let direct = MotionData::from_synthetic(&ds);
        assert_eq!(back.flows, direct.flows);
        assert_eq!(back.fg, direct.fg);
        assert_eq!(back.image[3].values, direct.image[3].values);
        assert_eq!(back.fmri[5].values, direct.fmri[5].values);
        assert!(out.artifacts().contains_key("frames.dftn"));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dec = init_decoder(3, 4, 5, 6, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(dir.path()).unwrap();
        write_checkpoint(&mut out, "full", &dec, false).unwrap();
        let (back, image_only) = read_checkpoint(dir.path(), "full").unwrap();
        assert_eq!(back, dec);
        assert!(!image_only);
    }

    #[test]
    fn shape_mismatch_is_validation_error() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(dir.path()).unwrap();
        write_dataset(&mut out, "", &ds).unwrap();
        out.write_tensor("fg_mask.dftn", &Tensor::u8(vec![1, 8, 8], vec![0; 64]).unwrap())
            .unwrap();
        let err = MotionData::load(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
