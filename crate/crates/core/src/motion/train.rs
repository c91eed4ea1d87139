//! Mini-batch gradient descent with seeded shuffling.

use super::{loss_and_gradient, DecoderError, LossTerms, MotionDecoder, MotionExample};
use crate::flow_codebook::Codebook;
use crate::seeding::{self, purpose};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

/// Mean training loss of one epoch, weighted by batch size. Each batch loss
/// is measured before that batch's update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub entropy: f64,
    pub mse: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub decoder: MotionDecoder,
    pub history: Vec<LossRecord>,
}

impl TrainOutcome {
    /// CSV with header `epoch,entropy,mse,total`.
    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,entropy,mse,total\n");
        for r in &self.history {
            s.push_str(&format!("{},{},{},{}\n", r.epoch, r.entropy, r.mse, r.total));
        }
        s
    }
}

pub fn train(
    decoder: &MotionDecoder,
    dataset: &[MotionExample],
    codebook: &Codebook,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, DecoderError> {
    if dataset.is_empty() {
        return Err(DecoderError::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(DecoderError::Configuration("batch size must be positive".into()));
    }
    if !cfg.learning_rate.is_finite() || cfg.learning_rate < 0.0 {
        return Err(DecoderError::Configuration(format!(
            "learning rate must be a non-negative number, got {}",
            cfg.learning_rate
        )));
    }
    let mut dec = decoder.clone();
    dec.hyper.learning_rate = cfg.learning_rate;
    let mut rng = seeding::stream(cfg.seed, purpose::DECODER_SHUFFLE);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut batch = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossTerms::default();
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| dataset[i].clone()));
            let (terms, grad) = loss_and_gradient(&dec, &batch, codebook)?;
            if !terms.total.is_finite() {
                return Err(DecoderError::Divergence { epoch });
            }
            let w = chunk.len() as f64;
            acc.entropy += w * terms.entropy;
            acc.mse += w * terms.mse;
            acc.total += w * terms.total;
            if cfg.learning_rate > 0.0 {
                dec.params.axpy(-cfg.learning_rate, &grad);
            }
        }
        if !dec.params.is_finite() {
            return Err(DecoderError::Divergence { epoch });
        }
        let n = dataset.len() as f64;
        history.push(LossRecord {
            epoch,
            entropy: acc.entropy / n,
            mse: acc.mse / n,
            total: acc.total / n,
        });
    }
    Ok(TrainOutcome {
        decoder: dec,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow_codebook::{Codebook, FlowField};
    use crate::motion::{init_decoder, FeatureGrid, FeatureSource};

    /// Four cells, class determined by the sign pattern of a 2-d image
    /// feature; fMRI features are noise-free copies.
    fn separable(n: usize) -> (Vec<MotionExample>, Codebook) {
        let cb = Codebook::from_centroids(
            vec![[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [-2.0, 0.0]],
            0,
        )
        .unwrap();
        let data = (0..n)
            .map(|i| {
                let cls = i % 4;
                let feat = match cls {
                    0 => [0.0, 0.0],
                    1 => [1.0, 0.0],
                    2 => [0.0, 1.0],
                    _ => [1.0, 1.0],
                };
                let vals: Vec<f64> = (0..4).flat_map(|_| feat).collect();
                let image = FeatureGrid::new(2, 2, 2, vals.clone(), FeatureSource::Synthetic).unwrap();
                let fmri = FeatureGrid::new(2, 2, 2, vals, FeatureSource::Synthetic).unwrap();
                let flow = FlowField::new(2, 2, vec![cb.centroids[cls]; 4]).unwrap();
                MotionExample::new(image, fmri, flow, &cb)
            })
            .collect();
        (data, cb)
    }

    fn cfg(lr: f64, epochs: usize, batch: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: batch,
            learning_rate: lr,
            seed: 4,
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let (data, cb) = separable(16);
        let dec = init_decoder(2, 2, 8, 4, 1).unwrap();
        let out = train(&dec, &data, &cb, &cfg(0.0, 5, 4)).unwrap();
        assert_eq!(out.decoder.params, dec.params);
        let first = out.history[0].total;
        assert!(out.history.iter().all(|r| (r.total - first).abs() < 1e-12 * first.abs()));
    }

    #[test]
    fn separable_task_is_learned() {
        let (data, cb) = separable(32);
        let mut dec = init_decoder(2, 2, 16, 4, 2).unwrap();
        dec.hyper.lambda2 = 0.1;
        let out = train(&dec, &data, &cb, &cfg(0.5, 200, 8)).unwrap();
        let first = out.history[0].entropy;
        let last = out.history.last().unwrap().entropy;
        assert!(last < 0.1 * first, "{first} -> {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let (data, cb) = separable(12);
        let dec = init_decoder(2, 2, 4, 4, 3).unwrap();
        let a = train(&dec, &data, &cb, &cfg(0.1, 10, 5)).unwrap();
        let b = train(&dec, &data, &cb, &cfg(0.1, 10, 5)).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.decoder, b.decoder);
    }

    #[test]
    fn full_batch_small_steps_decrease_monotonically() {
        let (data, cb) = separable(8);
        let dec = init_decoder(2, 2, 6, 4, 5).unwrap();
        let out = train(&dec, &data, &cb, &cfg(0.02, 40, 8)).unwrap();
        assert!(out.history.windows(2).all(|w| w[1].total <= w[0].total));
    }

    #[test]
    fn divergence_names_epoch() {
        let (data, cb) = separable(8);
        let dec = init_decoder(2, 2, 6, 4, 5).unwrap();
        let err = train(&dec, &data, &cb, &cfg(1e300, 3, 8)).unwrap_err();
        assert!(matches!(err, DecoderError::Divergence { .. }));
    }

    #[test]
    fn rejects_empty_and_zero_batch() {
        let (data, cb) = separable(4);
        let dec = init_decoder(2, 2, 6, 4, 5).unwrap();
        assert_eq!(
            train(&dec, &[], &cb, &cfg(0.1, 1, 1)).unwrap_err(),
            DecoderError::EmptyDataset
        );
        assert!(train(&dec, &data, &cb, &cfg(0.1, 1, 0)).is_err());
    }

    #[test]
    fn history_csv_layout() {
        let (data, cb) = separable(4);
        let dec = init_decoder(2, 2, 6, 4, 5).unwrap();
        let out = train(&dec, &data, &cb, &cfg(0.1, 2, 4)).unwrap();
        let csv = out.history_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,entropy,mse,total");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,"));
    }
}
