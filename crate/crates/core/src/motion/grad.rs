//! Analytic gradient of the combined cross-entropy + flow MSE loss.

use super::{
    check_targets, expected_vector, Dense, DecoderError, DecoderParams, LossTerms, MotionDecoder,
    MotionExample, Scratch, LOG_CLAMP,
};
use crate::flow_codebook::Codebook;
use crate::par;

/// Batch-mean loss terms and gradient.
pub fn loss_and_gradient(
    dec: &MotionDecoder,
    batch: &[MotionExample],
    codebook: &Codebook,
) -> Result<(LossTerms, DecoderParams), DecoderError> {
    if batch.is_empty() {
        return Err(DecoderError::EmptyDataset);
    }
    if codebook.len() != dec.hyper.n_vec {
        return Err(DecoderError::Configuration(format!(
            "codebook has {} entries, decoder predicts {}",
            codebook.len(),
            dec.hyper.n_vec
        )));
    }
    let per_sample = par::map_slice(batch, |ex| sample_gradient(dec, ex, codebook));
    // Fixed-order reduction keeps results bit-identical across thread counts.
    let mut grad = DecoderParams::zeros_like(&dec.params);
    let mut terms = LossTerms::default();
    for r in per_sample {
        let (t, g) = r?;
        grad.axpy(1.0, &g);
        terms.entropy += t.entropy;
        terms.mse += t.mse;
        terms.total += t.total;
    }
    let inv = 1.0 / batch.len() as f64;
    grad.scale(inv);
    terms.entropy *= inv;
    terms.mse *= inv;
    terms.total *= inv;
    Ok((terms, grad))
}

/// Batch-mean gradient of the loss with respect to every parameter.
pub fn gradient(
    dec: &MotionDecoder,
    batch: &[MotionExample],
    codebook: &Codebook,
) -> Result<DecoderParams, DecoderError> {
    loss_and_gradient(dec, batch, codebook).map(|(_, g)| g)
}

fn sample_gradient(
    dec: &MotionDecoder,
    ex: &MotionExample,
    codebook: &Codebook,
) -> Result<(LossTerms, DecoderParams), DecoderError> {
    dec.check_inputs(&ex.image, &ex.fmri)?;
    let n_cells = ex.image.cells();
    check_targets(n_cells, dec.hyper.n_vec, &ex.labels, &ex.gt_flow, codebook)?;

    let lambda2 = dec.hyper.lambda2;
    let d_h = dec.hyper.d_h;
    let n_vec = dec.hyper.n_vec;
    let inv_cells = 1.0 / n_cells as f64;
    let mut grad = DecoderParams::zeros_like(&dec.params);
    let mut s = Scratch::new(dec);
    let mut dz = vec![0.0; n_vec];
    let mut dfused = vec![0.0; 2 * d_h];
    let mut ce = 0.0;
    let mut se = 0.0;

    for c in 0..n_cells {
        let x_img = ex.image.cell(c);
        let x_fmri = ex.fmri.cell(c);
        s.forward_cell(dec, x_img, x_fmri);
        let y = ex.labels[c];
        let g = ex.gt_flow.vectors()[c];
        let o = expected_vector(&s.probs, &codebook.centroids);
        let r = [g[0] - o[0], g[1] - o[1]];
        ce -= s.probs[y].max(LOG_CLAMP).ln();
        se += r[0] * r[0] + r[1] * r[1];

        let ce_active = s.probs[y] >= LOG_CLAMP;
        for (j, d) in dz.iter_mut().enumerate() {
            let p = s.probs[j];
            let mut v = if ce_active { p } else { 0.0 };
            if ce_active && j == y {
                v -= 1.0;
            }
            let b = codebook.centroids[j];
            let dot = (b[0] - o[0]) * r[0] + (b[1] - o[1]) * r[1];
            v -= lambda2 * 2.0 * p * dot;
            *d = v * inv_cells;
        }

        accumulate_dense(&mut grad.head, &dec.params.head, &s.fused, &dz, Some(&mut dfused));
        backprop_branch(
            &dec.params.image,
            &mut grad.image,
            x_img,
            &s.image_acts,
            &dfused[..d_h],
        );
        backprop_branch(
            &dec.params.fmri,
            &mut grad.fmri,
            x_fmri,
            &s.fmri_acts,
            &dfused[d_h..],
        );
    }

    let entropy = ce * inv_cells;
    let mse = se * inv_cells;
    Ok((
        LossTerms {
            entropy,
            mse,
            total: entropy + lambda2 * mse,
        },
        grad,
    ))
}

/// Adds `x^T dy` to the weight gradient and `dy` to the bias gradient, and
/// optionally writes `dx = W dy`.
fn accumulate_dense(
    grad: &mut Dense,
    layer: &Dense,
    x: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
) {
    let out = layer.outputs;
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            let row = &mut grad.weights[i * out..(i + 1) * out];
            for (w, &d) in row.iter_mut().zip(dy) {
                *w += xi * d;
            }
        }
    }
    for (b, &d) in grad.bias.iter_mut().zip(dy) {
        *b += d;
    }
    if let Some(dx) = dx {
        for (i, v) in dx.iter_mut().enumerate() {
            let row = &layer.weights[i * out..(i + 1) * out];
            *v = row.iter().zip(dy).map(|(w, d)| w * d).sum();
        }
    }
}

fn backprop_branch(
    layers: &[Dense],
    grads: &mut [Dense],
    x: &[f64],
    acts: &[Vec<f64>],
    d_out: &[f64],
) {
    let mut upstream = d_out.to_vec();
    for i in (0..layers.len()).rev() {
        // ReLU: acts are post-activation, zero where the unit was inactive.
        let dpre: Vec<f64> = upstream
            .iter()
            .zip(&acts[i])
            .map(|(&d, &a)| if a > 0.0 { d } else { 0.0 })
            .collect();
        let input = if i == 0 { x } else { &acts[i - 1][..] };
        if i == 0 {
            accumulate_dense(&mut grads[i], &layers[i], input, &dpre, None);
        } else {
            let mut dx = vec![0.0; layers[i].inputs];
            accumulate_dense(&mut grads[i], &layers[i], input, &dpre, Some(&mut dx));
            upstream = dx;
        }
    }
}
