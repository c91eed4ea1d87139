//! Minimal grayscale image type and portable any-map writers.

use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width, "image buffer size");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; height * width])
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Binary PGM (P5) with values mapped linearly from `[lo, hi]` to 0..=255.
/// NaN pixels are written as 0.
pub fn encode_pgm(img: &GrayImage, lo: f64, hi: f64) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| to_byte(v, lo, hi)));
    out
}

fn to_byte(v: f64, lo: f64, hi: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    (t * 255.0).round() as u8
}

/// Binary PPM (P6) with a blue-white-red diverging map over `[-limit, limit]`.
/// NaN pixels are written as mid gray.
pub fn encode_diverging_ppm(img: &GrayImage, limit: f64) -> Vec<u8> {
    let mut header = String::new();
    write!(header, "P6\n{} {}\n255\n", img.width, img.height).unwrap();
    let mut out = header.into_bytes();
    for &v in &img.data {
        let rgb = if v.is_nan() {
            [128, 128, 128]
        } else {
            let t = (v / limit).clamp(-1.0, 1.0);
            let fade = ((1.0 - t.abs()) * 255.0).round() as u8;
            if t >= 0.0 {
                [255, fade, fade]
            } else {
                [fade, fade, 255]
            }
        };
        out.extend_from_slice(&rgb);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_scaling() {
        let img = GrayImage::new(1, 3, vec![-0.5, 0.0, f64::NAN]);
        let b = encode_pgm(&img, -0.5, 0.5);
        let header = b"P5\n3 1\n255\n";
        assert_eq!(&b[..header.len()], header);
        assert_eq!(&b[header.len()..], &[0, 128, 0]);
    }

    #[test]
    fn ppm_diverging_extremes() {
        let img = GrayImage::new(1, 3, vec![0.5, -0.5, 0.0]);
        let b = encode_diverging_ppm(&img, 0.5);
        let body = &b[b.len() - 9..];
        assert_eq!(body, &[255, 0, 0, 0, 0, 255, 255, 255, 255]);
    }
}
