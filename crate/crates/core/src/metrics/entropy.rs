//! Gray-level Shannon entropy.

use crate::error::{Result, VleError};
use crate::tensor::{Real, Tensor};

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// 8-bit gray levels of one (1, C, H, W) image, C ∈ {1, 3}; RGB goes
/// through luma weights first.
pub fn gray_levels<T: Real>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let (b, c, h, w) = image.dims4()?;
    if b != 1 || (c != 1 && c != 3) {
        return Err(VleError::contract(format!(
            "entropy needs one gray or RGB image, got shape {:?}",
            image.shape()
        )));
    }
    let plane = h * w;
    let d = image.data();
    Ok((0..plane)
        .map(|i| {
            let v = if c == 1 {
                d[i].as_f64()
            } else {
                (0..3).map(|k| LUMA[k] * d[k * plane + i].as_f64()).sum()
            };
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect())
}

/// −Σ p·log₂ p over the nonzero bins of the 256-level histogram.
pub fn shannon_entropy<T: Real>(image: &Tensor<T>) -> Result<f64> {
    let levels = gray_levels(image)?;
    let mut hist = [0usize; 256];
    for &l in &levels {
        hist[l as usize] += 1;
    }
    let n = levels.len() as f64;
    let h = hist
        .iter()
        .filter(|&&k| k > 0)
        .map(|&k| {
            let p = k as f64 / n;
            -p * p.log2()
        })
        .sum::<f64>();
    // A single bin yields −0.0; report it as 0.
    Ok(h.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        let constant = Tensor::<f32>::full(&[1, 3, 8, 8], 0.3);
        assert_eq!(shannon_entropy(&constant).unwrap(), 0.0);

        let half = Tensor::<f32>::from_fn(&[1, 1, 8, 8], |i| if i < 32 { 0.0 } else { 1.0 });
        assert_eq!(shannon_entropy(&half).unwrap(), 1.0);

        let ramp = Tensor::<f64>::from_fn(&[1, 3, 16, 16], |i| (i % 256) as f64 / 255.0);
        assert_eq!(shannon_entropy(&ramp).unwrap(), 8.0);
    }

    #[test]
    fn luma_weights_apply() {
        // Pure red 1.0 → 0.299 · 255 = 76.245 → level 76.
        let red = Tensor::<f32>::from_fn(&[1, 3, 2, 2], |i| if i < 4 { 1.0 } else { 0.0 });
        assert_eq!(gray_levels(&red).unwrap(), vec![76; 4]);
    }

    #[test]
    fn rejects_batches() {
        let x = Tensor::<f32>::zeros(&[2, 3, 4, 4]);
        assert!(shannon_entropy(&x).is_err());
    }
}
