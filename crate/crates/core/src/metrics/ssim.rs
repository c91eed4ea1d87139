use super::MetricError;
use crate::image::GrayImage;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let x = i as f64 - r;
        *t = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable Gaussian filter over every fully-contained window.
fn filter_valid(data: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &data[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&src[x..]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * rows[(y + k) * ow + x])
                .sum();
        }
    }
    out
}

/// Gaussian-windowed SSIM (11x11, sigma 1.5, K1 = 0.01, K2 = 0.03) averaged
/// over all windows that fit inside the image. `data_range` is the dynamic
/// range `L` of the pixel values.
pub fn ssim(a: &GrayImage, b: &GrayImage, data_range: f64) -> Result<f64, MetricError> {
    if !a.same_shape(b) {
        return Err(MetricError::Alignment(format!(
            "images are {}x{} and {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(MetricError::Configuration(format!(
            "{}x{} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window",
            a.height, a.width
        )));
    }
    if !(data_range > 0.0) {
        return Err(MetricError::Configuration(format!(
            "data range must be positive, got {data_range}"
        )));
    }
    let (h, w) = (a.height, a.width);
    let taps = gaussian_taps();
    let f = |v: &[f64]| filter_valid(v, h, w, &taps);
    let aa: Vec<f64> = a.data.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = b.data.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    let (mu_a, mu_b) = (f(&a.data), f(&b.data));
    let (e_aa, e_bb, e_ab) = (f(&aa), f(&bb), f(&ab));

    let c1 = (K1 * data_range).powi(2);
    let c2 = (K2 * data_range).powi(2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Mean of per-frame SSIM.
pub fn video_ssim(
    gt_frames: &[GrayImage],
    pred_frames: &[GrayImage],
    data_range: f64,
) -> Result<f64, MetricError> {
    if gt_frames.len() != pred_frames.len() || gt_frames.is_empty() {
        return Err(MetricError::Alignment(format!(
            "{} ground-truth frames vs {} predicted",
            gt_frames.len(),
            pred_frames.len()
        )));
    }
    let mut total = 0.0;
    for (g, p) in gt_frames.iter().zip(pred_frames) {
        total += ssim(g, p, data_range)?;
    }
    Ok(total / gt_frames.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;
    use rand::Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> GrayImage {
        let mut rng = seeding::rng(seed);
        GrayImage::new(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect())
    }

    /// Direct per-window evaluation with an explicit 2-D kernel.
    fn reference_ssim(a: &GrayImage, b: &GrayImage, l: f64) -> f64 {
        let r = 5i64;
        let mut k = vec![vec![0.0; 11]; 11];
        let mut s = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let v = (-((dx * dx + dy * dy) as f64) / (2.0 * 1.5 * 1.5)).exp();
                k[(dy + r) as usize][(dx + r) as usize] = v;
                s += v;
            }
        }
        let c1 = (0.01 * l).powi(2);
        let c2 = (0.03 * l).powi(2);
        let mut acc = 0.0;
        let mut n = 0;
        for y in 0..=a.height - 11 {
            for x in 0..=a.width - 11 {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let w = k[i][j] / s;
                        ma += w * a.get(y + i, x + j);
                        mb += w * b.get(y + i, x + j);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let w = k[i][j] / s;
                        let da = a.get(y + i, x + j) - ma;
                        let db = b.get(y + i, x + j) - mb;
                        va += w * da * da;
                        vb += w * db * db;
                        cov += w * da * db;
                    }
                }
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                n += 1;
            }
        }
        acc / n as f64
    }

    #[test]
    fn identical_images() {
        let a = random_image(1, 24, 19);
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_extremes() {
        let a = GrayImage::filled(16, 16, 0.0);
        let b = GrayImage::filled(16, 16, 255.0);
        let v = ssim(&a, &b, 255.0).unwrap();
        // Luminance term C1 / (L^2 + C1); contrast-structure term is 1.
        let c1 = (0.01f64 * 255.0).powi(2);
        assert!((v - c1 / (255.0f64.powi(2) + c1)).abs() < 1e-12);
        assert!(v < 0.05);
    }

    #[test]
    fn matches_reference_implementation() {
        for seed in 0..3 {
            let a = random_image(seed, 20, 23);
            let mut b = a.clone();
            let mut rng = seeding::rng(seed + 100);
            b.data.iter_mut().for_each(|v| *v = (*v + rng.random_range(-0.3..0.3)).clamp(0.0, 1.0));
            let fast = ssim(&a, &b, 1.0).unwrap();
            let slow = reference_ssim(&a, &b, 1.0);
            assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
        }
    }

    #[test]
    fn symmetric() {
        let a = random_image(7, 14, 14);
        let b = random_image(8, 14, 14);
        assert!((ssim(&a, &b, 1.0).unwrap() - ssim(&b, &a, 1.0).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn small_image_rejected() {
        let a = GrayImage::filled(10, 20, 0.0);
        assert!(matches!(ssim(&a, &a, 1.0), Err(MetricError::Configuration(_))));
        let b = GrayImage::filled(20, 10, 0.0);
        assert!(matches!(ssim(&a, &b, 1.0), Err(MetricError::Alignment(_))));
    }

    #[test]
    fn video_cases() {
        let a = random_image(3, 12, 12);
        assert!((video_ssim(&[a.clone(), a.clone()], &[a.clone(), a.clone()], 1.0).unwrap() - 1.0).abs() < 1e-9);

        let black = GrayImage::filled(12, 12, 0.0);
        let white = GrayImage::filled(12, 12, 1.0);
        let v = video_ssim(&[a.clone(), black.clone()], &[a.clone(), white.clone()], 1.0).unwrap();
        let expect = (ssim(&a, &a, 1.0).unwrap() + ssim(&black, &white, 1.0).unwrap()) / 2.0;
        assert!((v - expect).abs() < 1e-15);

        let b = random_image(4, 12, 12);
        assert_eq!(video_ssim(std::slice::from_ref(&a), std::slice::from_ref(&b), 1.0).unwrap(), ssim(&a, &b, 1.0).unwrap());
        assert!(video_ssim(std::slice::from_ref(&a), &[], 1.0).is_err());
    }
}
