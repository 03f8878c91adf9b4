//! Mean structural similarity with the standard Gaussian window.

use crate::error::{Result, VleError};
use crate::tensor::{Real, Tensor};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;
/// Dynamic range of [0, 1] images.
pub const RANGE: f64 = 1.0;

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; WINDOW] {
    let mut taps = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Valid-mode separable filtering of one (h, w) plane.
fn filter(plane: &[f64], h: usize, w: usize, taps: &[f64; WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..WINDOW).map(|k| taps[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|k| taps[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// SSIM averaged over every valid window position, channel and image.
/// Inputs are clamped to [0, 1] first.
pub fn ssim<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    y.expect_shape(x.shape())?;
    let (b, c, h, w) = x.dims4()?;
    if h < WINDOW || w < WINDOW {
        return Err(VleError::contract(format!("ssim needs images of at least {WINDOW}×{WINDOW}, got {h}×{w}")));
    }
    let taps = gaussian_taps();
    let c1 = (K1 * RANGE).powi(2);
    let c2 = (K2 * RANGE).powi(2);
    let plane = h * w;
    let clamp = |v: T| v.as_f64().clamp(0.0, 1.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..b * c {
        let xs: Vec<f64> = x.data()[p * plane..(p + 1) * plane].iter().map(|&v| clamp(v)).collect();
        let ys: Vec<f64> = y.data()[p * plane..(p + 1) * plane].iter().map(|&v| clamp(v)).collect();
        let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter(&xs, h, w, &taps);
        let my = filter(&ys, h, w, &taps);
        let sxx = filter(&prod(&xs, &xs), h, w, &taps);
        let syy = filter(&prod(&ys, &ys), h, w, &taps);
        let sxy = filter(&prod(&xs, &ys), h, w, &taps);
        for i in 0..mx.len() {
            let (mx, my) = (mx[i], my[i]);
            let vx = sxx[i] - mx * mx;
            let vy = syy[i] - my * my;
            let cov = sxy[i] - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(v: f64) -> Tensor<f64> {
        Tensor::full(&[1, 1, 12, 12], v)
    }

    #[test]
    fn taps_are_normalised_and_symmetric() {
        let t = gaussian_taps();
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..WINDOW {
            assert_eq!(t[i], t[WINDOW - 1 - i]);
        }
    }

    #[test]
    fn constant_images_closed_form() {
        let (a, b) = (0.5, 0.53);
        let c1 = (K1 * RANGE).powi(2);
        let want = (2.0 * a * b + c1) / (a * a + b * b + c1);
        assert!((ssim(&constant(a), &constant(b)).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn clamps_inputs() {
        let s = ssim(&constant(1.0), &constant(1.7)).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn small_images_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 3, 10, 16]);
        assert!(matches!(ssim(&x, &x), Err(VleError::Contract(_))));
    }
}
