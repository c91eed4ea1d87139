//! The batch subcommands. Each reads its inputs from the config, writes its
//! artifacts through an [`OutputDir`] and returns a JSON summary that is
//! also stored in the manifest.

use super::data::{
    dims, f64_tensor, flows_from_tensor, flows_tensor, i32_tensor, masks_from_tensor,
    masks_tensor, matrix_tensor, read_codebook, u8_tensor, write_checkpoint, write_dataset,
    MotionData,
};
use super::experiments::{
    fit_flow_codebook, motion_table_csv, run_image_decoding, run_motion_ablation,
    run_two_streams, MotionSettings, NwayRow, VariantResult,
};
use super::{OutputDir, PipelineError};
use crate::config::{require, PipelineConfig};
use crate::encoding::{run_encoding, EmbeddingMatrix, EncodingReport, StreamTag};
use crate::flow_codebook::resample_flow;
use crate::image::{encode_diverging_ppm, encode_pgm, GrayImage};
use crate::metrics::{
    coverage_bucketed_eval, matching_ratio, nway_topk, ssim, video_ssim, BucketRow,
    MotionEvalSample, ScoreMatrix,
};
use crate::preprocess::{
    apply_hemodynamic_shift, average_repeated_runs, filter_scene_changes, make_windows,
    shift_frames, window_manifest, z_transform_series, FmriSeries, VideoMeta,
};
use crate::synthetic::{generate, SyntheticConfig, SyntheticDataset};
use serde_json::{json, Value};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synth,
    Preprocess,
    FitCodebook,
    TrainMotion,
    EvalImage,
    EvalMotion,
    Encode,
    Demo,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Synth => "synth",
            Self::Preprocess => "preprocess",
            Self::FitCodebook => "fit-codebook",
            Self::TrainMotion => "train-motion",
            Self::EvalImage => "eval-image",
            Self::EvalMotion => "eval-motion",
            Self::Encode => "encode",
            Self::Demo => "demo",
        }
    }
}

/// Runs `command` into `out_dir` and writes the manifest. Returns the
/// summary.
pub fn run(command: Command, cfg: &PipelineConfig, seed: u64, out_dir: &Path) -> Result<Value, PipelineError> {
    let mut out = OutputDir::create(out_dir)?;
    let summary = match command {
        Command::Synth => synth(cfg, seed, &mut out)?,
        Command::Preprocess => preprocess(cfg, &mut out)?,
        Command::FitCodebook => fit_codebook_cmd(cfg, seed, &mut out)?,
        Command::TrainMotion => train_motion(cfg, seed, &mut out)?,
        Command::EvalImage => eval_image(cfg, seed, &mut out)?,
        Command::EvalMotion => eval_motion(cfg, &mut out)?,
        Command::Encode => encode(cfg, &mut out)?,
        Command::Demo => demo(cfg, seed, &mut out)?,
    };
    out.finish(command.name(), seed, cfg, summary.clone())?;
    Ok(summary)
}

fn synthetic(cfg: &PipelineConfig, seed: u64) -> Result<SyntheticDataset, PipelineError> {
    let sc = SyntheticConfig {
        seed,
        ..cfg.synth.clone()
    };
    Ok(generate(&sc)?)
}

fn synth(cfg: &PipelineConfig, seed: u64, out: &mut OutputDir) -> Result<Value, PipelineError> {
    let ds = synthetic(cfg, seed)?;
    write_dataset(out, "", &ds)?;
    Ok(json!({
        "n_samples": ds.samples.len(),
        "grid": cfg.synth.grid,
        "n_voxels": ds.stream_assignment.len(),
        "fmri_frame": [ds.layout.height, ds.layout.width],
    }))
}

fn preprocess(cfg: &PipelineConfig, out: &mut OutputDir) -> Result<Value, PipelineError> {
    let p = &cfg.preprocess;
    let paths = require(&p.runs, "preprocess.runs")?;
    let video = require(&p.video, "preprocess.video")?;
    if paths.is_empty() {
        return Err(PipelineError::Validation("preprocess.runs is empty".into()));
    }
    let mut zeroed = Vec::with_capacity(paths.len());
    let mut runs = Vec::with_capacity(paths.len());
    for (i, path) in paths.iter().enumerate() {
        let (shape, vals) = f64_tensor(path)?;
        let [t, h, w] = dims::<3>(&shape, path)?;
        let series = FmriSeries::new(vals, t, h, w, p.tr_seconds, format!("run{i}"))?;
        let z = z_transform_series(&series)?;
        zeroed.push(z.zero_variance_pixels);
        runs.push(z.series);
    }
    let averaged = average_repeated_runs(&runs)?;
    let shifted = apply_hemodynamic_shift(&averaged, p.shift_seconds)?;
    let meta = VideoMeta {
        n_frames: video.n_frames,
        fps: video.fps,
        frame_shape: (video.frame_shape[0], video.frame_shape[1]),
        stimulus_id: video.stimulus_id.clone(),
    };
    let stride = p.stride_seconds.unwrap_or(p.window_seconds);
    let mut windows = make_windows(&shifted, &meta, p.window_seconds, p.alpha, stride)?;
    if let Some(path) = &p.video_frames {
        let frames = load_frames(path)?;
        filter_scene_changes(&mut windows, &frames, p.scene_threshold);
    }
    let (t, h, w) = (shifted.n_frames(), shifted.height(), shifted.width());
    out.write_tensor(
        "fmri.dftn",
        &crate::tensor_io::Tensor::f64(vec![t, h, w], shifted.into_data()).expect("series shape"),
    )?;
    out.write("windows.json", window_manifest(&windows).as_bytes())?;
    Ok(json!({
        "n_runs": runs.len(),
        "zero_variance_pixels": zeroed,
        "shift_frames": shift_frames(p.shift_seconds, p.tr_seconds)?,
        "n_frames": t,
        "n_windows": windows.len(),
        "n_valid_windows": windows.iter().filter(|w| w.valid).count(),
    }))
}

/// `m x H x W` frames; u8 frames are scaled to [0, 1].
fn load_frames(path: &str) -> Result<Vec<Vec<f64>>, PipelineError> {
    let t = super::load_tensor(path)?;
    let shape = t.shape.clone();
    let vals = match t.dtype() {
        crate::tensor_io::DType::U8 => u8_tensor(path)?.1.into_iter().map(|b| b as f64 / 255.0).collect(),
        _ => t.values_f64(),
    };
    let [m, h, w] = dims::<3>(&shape, path)?;
    Ok((0..m).map(|i| vals[i * h * w..(i + 1) * h * w].to_vec()).collect())
}

fn fit_codebook_cmd(cfg: &PipelineConfig, seed: u64, out: &mut OutputDir) -> Result<Value, PipelineError> {
    let path = require(&cfg.codebook.flows, "codebook.flows")?;
    let (shape, vals) = f64_tensor(path)?;
    let [gh, gw] = cfg.codebook.grid;
    let flows: Vec<_> = flows_from_tensor(&shape, &vals, path)?
        .into_iter()
        .map(|f| {
            if f.height() == gh && f.width() == gw {
                f
            } else {
                resample_flow(&f, gh, gw)
            }
        })
        .collect();
    let s = MotionSettings::from_config(cfg);
    let (codebook, inertia) = fit_flow_codebook(&flows, &s, seed)?;
    out.write("codebook.json", codebook.to_json().as_bytes())?;
    let mut csv = String::from("step,inertia\n");
    for (i, v) in inertia.iter().enumerate() {
        csv.push_str(&format!("{i},{v}\n"));
    }
    out.write("inertia.csv", csv.as_bytes())?;
    Ok(json!({
        "n_fields": flows.len(),
        "n_vec": codebook.len(),
        "zero_index": codebook.zero_index,
        "inertia": inertia.last(),
        "lloyd_iterations": inertia.len().saturating_sub(1),
    }))
}

fn bucket_json(rows: &[BucketRow]) -> Value {
    serde_json::to_value(rows).expect("bucket rows serialize")
}

fn variant_json(v: &VariantResult) -> Value {
    json!({
        "overall": v.overall,
        "table": bucket_json(&v.table),
        "final_loss": v.outcome.history.last(),
    })
}

fn write_variant(out: &mut OutputDir, name: &str, v: &VariantResult, image_only: bool) -> Result<(), PipelineError> {
    write_checkpoint(out, name, &v.outcome.decoder, image_only)?;
    out.write(&format!("{name}_loss.csv"), v.outcome.history_csv().as_bytes())?;
    out.write_tensor(&format!("{name}_pred_flow.dftn"), &flows_tensor(&v.predictions))?;
    out.write(&format!("motion_table_{name}.csv"), motion_table_csv(&v.table).as_bytes())
}

fn train_motion(cfg: &PipelineConfig, seed: u64, out: &mut OutputDir) -> Result<Value, PipelineError> {
    let dir = require(&cfg.decoder.dataset, "decoder.dataset")?;
    let data = MotionData::load(Path::new(dir))?;
    let codebook = cfg.decoder.codebook.as_deref().map(read_codebook).transpose()?;
    let s = MotionSettings::from_config(cfg);
    let r = run_motion_ablation(&data, &s, codebook, seed)?;
    out.write("codebook.json", r.codebook.to_json().as_bytes())?;
    write_variant(out, "full", &r.full, false)?;
    if let Some(io) = &r.image_only {
        write_variant(out, "image_only", io, true)?;
    }
    let test = r.n_train..data.len();
    out.write_tensor("gt_flow_test.dftn", &flows_tensor(&data.flows[test.clone()]))?;
    out.write_tensor("fg_mask_test.dftn", &masks_tensor(&data.fg[test]))?;
    Ok(json!({
        "n_train": r.n_train,
        "n_test": r.n_test,
        "n_vec": r.codebook.len(),
        "full": variant_json(&r.full),
        "image_only": r.image_only.as_ref().map(variant_json),
    }))
}

/// Reads one side of an input pair, requiring the other when either is set.
fn pair<'a>(
    a: &'a Option<String>,
    b: &'a Option<String>,
    a_key: &str,
    b_key: &str,
) -> Result<Option<(&'a str, &'a str)>, PipelineError> {
    match (a, b) {
        (None, None) => Ok(None),
        (Some(_), None) => Err(require(b, b_key).unwrap_err().into()),
        (None, Some(_)) => Err(require(a, a_key).unwrap_err().into()),
        (Some(x), Some(y)) => Ok(Some((x, y))),
    }
}

fn images(shape: &[usize], vals: &[f64], what: &str) -> Result<Vec<Vec<GrayImage>>, PipelineError> {
    // `N x H x W` is one frame per sample, `N x F x H x W` a clip per sample.
    let (n, f, h, w) = match shape.len() {
        3 => (shape[0], 1, shape[1], shape[2]),
        4 => (shape[0], shape[1], shape[2], shape[3]),
        _ => {
            return Err(PipelineError::Validation(format!(
                "{what}: expected 3 or 4 dimensions, got {shape:?}"
            )))
        }
    };
    Ok((0..n)
        .map(|i| {
            (0..f)
                .map(|j| {
                    let o = (i * f + j) * h * w;
                    GrayImage::new(h, w, vals[o..o + h * w].to_vec())
                })
                .collect()
        })
        .collect())
}

struct MetricRow {
    metric: String,
    subject: String,
    param: String,
    value: f64,
    n: usize,
}

fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("metric,subject,param,value,n\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.metric, r.subject, r.param, r.value, r.n));
    }
    s
}

fn row(metric: &str, subject: &str, param: String, value: f64, n: usize) -> MetricRow {
    MetricRow {
        metric: metric.into(),
        subject: subject.into(),
        param,
        value,
        n,
    }
}

fn nway_rows(nway: &[NwayRow], subject: &str, n: usize) -> Vec<MetricRow> {
    nway.iter()
        .map(|r| row(&format!("nway_top{}", r.k), subject, format!("n={}", r.n), r.accuracy, n))
        .collect()
}

fn eval_image(cfg: &PipelineConfig, seed: u64, out: &mut OutputDir) -> Result<Value, PipelineError> {
    let m = &cfg.metrics;
    let scores = pair(&m.scores, &m.labels, "metrics.scores", "metrics.labels")?;
    let masks = pair(&m.gt_masks, &m.pred_masks, "metrics.gt_masks", "metrics.pred_masks")?;
    let frames = pair(&m.gt_frames, &m.pred_frames, "metrics.gt_frames", "metrics.pred_frames")?;
    if scores.is_none() && masks.is_none() && frames.is_none() {
        return Err(require(&m.scores, "metrics.scores").unwrap_err().into());
    }
    let mut rows = Vec::new();
    let mut summary = serde_json::Map::new();

    if let Some((sp, lp)) = scores {
        let (shape, vals) = f64_tensor(sp)?;
        let [n, c] = dims::<2>(&shape, sp)?;
        let (_, labels) = i32_tensor(lp)?;
        if labels.len() != n || labels.iter().any(|&l| l < 0) {
            return Err(PipelineError::Validation(format!(
                "{lp}: need {n} non-negative labels, got {}",
                labels.len()
            )));
        }
        let sm = ScoreMatrix::new(c, vals, labels.iter().map(|&l| l as usize).collect())?;
        let mut nway = Vec::new();
        for &ways in m.nway.iter().filter(|&&w| w >= 1 && w <= c) {
            for &k in m.top_k.iter().filter(|&&k| k >= 1 && k <= ways) {
                let accuracy = nway_topk(&sm, ways, k, m.trials, seed)?;
                nway.push(NwayRow { n: ways, k, accuracy });
            }
        }
        rows.extend(nway_rows(&nway, "scores", n));
        summary.insert("nway".into(), serde_json::to_value(&nway).expect("rows"));
    }
    if let Some((gp, pp)) = masks {
        let (gs, gv) = u8_tensor(gp)?;
        let (ps, pv) = u8_tensor(pp)?;
        let gt = masks_from_tensor(&gs, &gv, gp)?;
        let pred = masks_from_tensor(&ps, &pv, pp)?;
        if gt.len() != pred.len() || gt.is_empty() {
            return Err(PipelineError::Validation(format!(
                "{} ground-truth and {} predicted masks",
                gt.len(),
                pred.len()
            )));
        }
        let ratios = gt
            .iter()
            .zip(&pred)
            .map(|(g, p)| matching_ratio(g, p))
            .collect::<Result<Vec<_>, _>>()?;
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        rows.push(row("r_m", "masks", String::new(), mean, ratios.len()));
        summary.insert("r_m".into(), json!(mean));
    }
    if let Some((gp, pp)) = frames {
        let (gs, gv) = f64_tensor(gp)?;
        let (ps, pv) = f64_tensor(pp)?;
        if gs != ps {
            return Err(PipelineError::Validation(format!(
                "frame shapes differ: {gs:?} and {ps:?}"
            )));
        }
        let gt = images(&gs, &gv, gp)?;
        let pred = images(&ps, &pv, pp)?;
        if gt.is_empty() {
            return Err(PipelineError::Validation(format!("{gp}: no frames")));
        }
        let per = gt
            .iter()
            .zip(&pred)
            .map(|(g, p)| {
                if g.len() == 1 {
                    ssim(&g[0], &p[0], m.data_range)
                } else {
                    video_ssim(g, p, m.data_range)
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mean = per.iter().sum::<f64>() / per.len() as f64;
        rows.push(row("ssim", "frames", String::new(), mean, per.len()));
        summary.insert("ssim".into(), json!(mean));
    }
    out.write("metrics.csv", metrics_csv(&rows).as_bytes())?;
    Ok(Value::Object(summary))
}

fn eval_motion(cfg: &PipelineConfig, out: &mut OutputDir) -> Result<Value, PipelineError> {
    let m = &cfg.metrics;
    let gp = require(&m.gt_flow, "metrics.gt_flow")?;
    let pp = require(&m.pred_flow, "metrics.pred_flow")?;
    let fp = require(&m.fg_masks, "metrics.fg_masks")?;
    let cp = require(&m.codebook, "metrics.codebook")?;
    let (gs, gv) = f64_tensor(gp)?;
    let (ps, pv) = f64_tensor(pp)?;
    let (fs, fv) = u8_tensor(fp)?;
    let gt = flows_from_tensor(&gs, &gv, gp)?;
    let pred = flows_from_tensor(&ps, &pv, pp)?;
    let fg = masks_from_tensor(&fs, &fv, fp)?;
    if gt.len() != pred.len() || gt.len() != fg.len() {
        return Err(PipelineError::Validation(format!(
            "{} ground-truth flows, {} predicted flows, {} masks",
            gt.len(),
            pred.len(),
            fg.len()
        )));
    }
    let codebook = read_codebook(cp)?;
    let samples: Vec<MotionEvalSample> = gt
        .into_iter()
        .zip(pred)
        .zip(fg)
        .map(|((gt, pred), fg)| MotionEvalSample { gt, pred, fg })
        .collect();
    let table = coverage_bucketed_eval(&samples, &codebook, &m.coverage_thresholds, m.aggregation)?;
    out.write("motion_table.csv", motion_table_csv(&table).as_bytes())?;
    Ok(json!({
        "n_samples": samples.len(),
        "aggregation": m.aggregation,
        "table": bucket_json(&table),
    }))
}

fn write_encoding(out: &mut OutputDir, prefix: &str, report: &EncodingReport) -> Result<(), PipelineError> {
    out.write(&format!("{prefix}encoding.csv"), report.to_csv().as_bytes())?;
    let map = report.map();
    out.write(&format!("{prefix}p_spa.pgm"), &encode_pgm(&map, -0.5, 0.5))?;
    out.write(&format!("{prefix}p_spa.ppm"), &encode_diverging_ppm(&map, 0.5))?;
    Ok(())
}

fn encoding_json(report: &EncodingReport) -> Value {
    let finite: Vec<f64> = report.p_spa.iter().copied().filter(|p| p.is_finite()).collect();
    json!({
        "n_voxels": report.voxel_index.len(),
        "n_train": report.n_train,
        "n_test": report.n_test,
        "n_spatial": finite.iter().filter(|&&p| p > 0.0).count(),
        "n_semantic": finite.iter().filter(|&&p| p < 0.0).count(),
        "n_undefined": report.p_spa.len() - finite.len(),
        "semantic": report.semantic,
        "spatial": report.spatial,
    })
}

fn encode(cfg: &PipelineConfig, out: &mut OutputDir) -> Result<Value, PipelineError> {
    let e = &cfg.encoding;
    let fp = require(&e.fmri, "encoding.fmri")?;
    let sp = require(&e.e_sem, "encoding.e_sem")?;
    let ap = require(&e.e_spa, "encoding.e_spa")?;
    let (shape, vals) = f64_tensor(fp)?;
    let [t, h, w] = dims::<3>(&shape, fp)?;
    let fmri = FmriSeries::new(vals, t, h, w, cfg.preprocess.tr_seconds, "encode")?;
    let embed = |path: &str, tag| -> Result<EmbeddingMatrix, PipelineError> {
        let (shape, vals) = f64_tensor(path)?;
        let [rows, cols] = dims::<2>(&shape, path)?;
        Ok(EmbeddingMatrix::from_row_major(rows, cols, &vals, tag)?)
    };
    let e_sem = embed(sp, StreamTag::Semantic)?;
    let e_spa = embed(ap, StreamTag::Spatial)?;
    let support = match &e.voxel_mask {
        None => None,
        Some(mp) => {
            let (ms, mv) = u8_tensor(mp)?;
            if ms != [h, w] {
                return Err(PipelineError::Validation(format!(
                    "{mp}: mask shape {ms:?} does not match fMRI frame {h}x{w}"
                )));
            }
            Some(mv.iter().map(|&b| b != 0).collect::<Vec<bool>>())
        }
    };
    let report = run_encoding(&fmri, support.as_deref(), &e_sem, &e_spa, &e.params())?;
    write_encoding(out, "", &report)?;
    out.write_json("report.json", &serde_json::to_value(&report).expect("report"))?;
    Ok(encoding_json(&report))
}

fn demo(cfg: &PipelineConfig, seed: u64, out: &mut OutputDir) -> Result<Value, PipelineError> {
    let ds = synthetic(cfg, seed)?;
    let data = MotionData::from_synthetic(&ds);
    let s = MotionSettings::from_config(cfg);
    let motion = run_motion_ablation(&data, &s, None, seed)?;
    out.write("codebook.json", motion.codebook.to_json().as_bytes())?;
    write_variant(out, "full", &motion.full, false)?;
    if let Some(io) = &motion.image_only {
        write_variant(out, "image_only", io, true)?;
    }

    let streams = run_two_streams(&ds, &cfg.encoding.params())?;
    write_encoding(out, "", &streams.report)?;
    let (e_sem, e_spa) = super::experiments::synthetic_embeddings(&ds)?;
    out.write_tensor("e_sem.dftn", &matrix_tensor(&e_sem.values))?;
    out.write_tensor("e_spa.dftn", &matrix_tensor(&e_spa.values))?;

    let image = run_image_decoding(&ds, cfg.decoder.train_fraction, &cfg.metrics, seed)?;

    let mut rows = nway_rows(&image.nway, "decoder", image.n_test);
    rows.push(row("r_m", "decoder", String::new(), image.r_m, image.n_test));
    rows.push(row("ssim", "decoder", String::new(), image.ssim, image.n_test));
    let mut variants = vec![("full", &motion.full)];
    if let Some(io) = &motion.image_only {
        variants.push(("image_only", io));
    }
    for (name, v) in &variants {
        for b in std::iter::once(&v.overall).chain(&v.table) {
            if let Some(sim) = b.similarity {
                rows.push(row("motion_cosine", name, format!("coverage>{}", b.threshold), sim, b.n_samples));
            }
        }
    }
    let n_vox = streams.report.voxel_index.len();
    rows.push(row("p_spa_sign_accuracy", "synthetic", String::new(), streams.sign_accuracy, n_vox));
    rows.push(row("p_spa_null_mean_abs", "synthetic", String::new(), streams.null_mean_abs, n_vox));
    out.write("metrics.csv", metrics_csv(&rows).as_bytes())?;

    let summary = json!({
        "n_samples": ds.samples.len(),
        "image": image,
        "motion": {
            "n_train": motion.n_train,
            "n_test": motion.n_test,
            "full": variant_json(&motion.full),
            "image_only": motion.image_only.as_ref().map(variant_json),
        },
        "encoding": {
            "report": encoding_json(&streams.report),
            "sign_accuracy": streams.sign_accuracy,
            "null_mean_abs_p_spa": streams.null_mean_abs,
        },
    });
    out.write_json("summary.json", &summary)?;
    Ok(summary)
}

/// Human-readable lines of a `demo` summary.
pub fn demo_lines(summary: &Value) -> Vec<String> {
    let f = |v: &Value| v.as_f64().map_or("n/a".to_string(), |x| format!("{x:.4}"));
    let mut lines = Vec::new();
    for r in summary["image"]["nway"].as_array().into_iter().flatten() {
        lines.push(format!("image  {}-way top-{} accuracy  {}", r["n"], r["k"], f(&r["accuracy"])));
    }
    lines.push(format!("image  matching ratio r_m    {}", f(&summary["image"]["r_m"])));
    lines.push(format!("image  SSIM                  {}", f(&summary["image"]["ssim"])));
    let full = &summary["motion"]["full"]["overall"]["similarity"];
    let io = &summary["motion"]["image_only"]["overall"]["similarity"];
    lines.push(format!("motion cosine, fMRI + image   {}", f(full)));
    lines.push(format!("motion cosine, image only     {}", f(io)));
    for (a, b) in summary["motion"]["full"]["table"]
        .as_array()
        .into_iter()
        .flatten()
        .zip(summary["motion"]["image_only"]["table"].as_array().into_iter().flatten().map(Some).chain(std::iter::repeat(None)))
    {
        lines.push(format!(
            "motion coverage > {:<4} full {}  image-only {}",
            a["threshold"],
            f(&a["similarity"]),
            b.map_or("n/a".into(), |b| f(&b["similarity"]))
        ));
    }
    lines.push(format!(
        "encode p_spa sign accuracy    {}",
        f(&summary["encoding"]["sign_accuracy"])
    ));
    lines.push(format!(
        "encode null mean |p_spa|      {}",
        f(&summary["encoding"]["null_mean_abs_p_spa"])
    ));
    lines
}
