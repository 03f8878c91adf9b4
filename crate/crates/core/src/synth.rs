//! Seeded synthetic datasets, so nothing has to be downloaded.
//!
//! * blobs: one to three soft Gaussian blobs on a coloured background;
//! * quantization ladder: gray images with exactly k equally frequent
//!   levels, for k = 2, 4, …, 256.
//!
//! Pixel values are 8-bit codes divided by 255, so a dataset written to PNG
//! and read back is bitwise identical to the in-memory one.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, VleError};
use crate::tensor::Tensor;
use crate::training::dataset::{save_png, Dataset};

fn code(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

/// One (1, 3, size, size) blob image.
pub fn blob_image<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Tensor<f32> {
    let s = size as f64;
    let background: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let blobs: Vec<([f64; 2], f64, [f64; 3])> = (0..rng.random_range(1..=3))
        .map(|_| {
            let centre = [rng.random_range(0.0..s), rng.random_range(0.0..s)];
            let sigma = rng.random_range(s / 10.0..s / 4.0);
            let colour = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            (centre, sigma, colour)
        })
        .collect();
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let mut px = background;
            for (centre, sigma, colour) in &blobs {
                let d2 = (y as f64 + 0.5 - centre[0]).powi(2) + (x as f64 + 0.5 - centre[1]).powi(2);
                let a = (-d2 / (2.0 * sigma * sigma)).exp();
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - a) + colour[c] * a;
                }
            }
            for c in 0..3 {
                data[c * plane + y * size + x] = code(px[c]);
            }
        }
    }
    Tensor::from_vec(&[1, 3, size, size], data).expect("sized above")
}

pub fn blob_dataset(count: usize, size: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..count).map(|_| blob_image(&mut rng, size)).collect();
    Dataset::from_images((0..count).map(|i| format!("blob_{i:05}.png")).collect(), images)
}

/// Gray (1, 3, size, size) image with exactly `levels` distinct 8-bit codes,
/// each covering the same number of pixels, centred on mid-gray. Spatial
/// layout follows the ranks of a smooth random field, so more levels means
/// both more entropy and more contrast.
pub fn ladder_image<R: Rng + ?Sized>(rng: &mut R, levels: usize, size: usize) -> Result<Tensor<f32>> {
    let plane = size * size;
    if !(2..=256).contains(&levels) || plane % levels != 0 {
        return Err(VleError::contract(format!(
            "ladder needs 2 ≤ levels ≤ 256 dividing {plane} pixels, got {levels}"
        )));
    }
    // Two waves of at most one cycle: smooth enough that a 64x token can
    // describe the layout, so token counts track contrast and detail rather
    // than an unencodable texture.
    let waves: Vec<[f64; 4]> = (0..2)
        .map(|_| {
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.5..1.0),
            ]
        })
        .collect();
    let field: Vec<f64> = (0..plane)
        .map(|i| {
            let (y, x) = ((i / size) as f64 / size as f64, (i % size) as f64 / size as f64);
            waves.iter().map(|[fy, fx, ph, a]| a * (std::f64::consts::TAU * (fy * y + fx * x) + ph).cos()).sum()
        })
        .collect();
    let mut order: Vec<usize> = (0..plane).collect();
    order.sort_by(|&a, &b| field[a].total_cmp(&field[b]).then(a.cmp(&b)));
    let lowest = 128 - levels / 2;
    let mut gray = vec![0.0f32; plane];
    for (rank, &i) in order.iter().enumerate() {
        gray[i] = (lowest + rank * levels / plane) as f32 / 255.0;
    }
    let data = gray.iter().cycle().take(3 * plane).copied().collect();
    Tensor::from_vec(&[1, 3, size, size], data)
}

/// Level counts 2, 4, …, 256.
pub fn ladder_levels() -> Vec<usize> {
    (1..=8).map(|p| 1 << p).collect()
}

/// `per_level` images for each level count in [`ladder_levels`].
pub fn ladder_dataset(per_level: usize, size: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = Vec::new();
    let mut images = Vec::new();
    for k in ladder_levels() {
        for j in 0..per_level {
            images.push(ladder_image(&mut rng, k, size)?);
            ids.push(format!("ladder_k{k:03}_{j:02}.png"));
        }
    }
    Dataset::from_images(ids, images)
}

/// Write each image to `dir/<id>`.
pub fn write_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, id) in data.ids().iter().enumerate() {
        save_png(data.image(i).tensor(), &dir.join(id))?;
    }
    Ok(())
}
