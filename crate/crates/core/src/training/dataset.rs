//! Image folder ingestion: decode, resize to a square, scale to [0, 1].

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Result, VleError};
use crate::tensor::{Real, Tensor};
use crate::types::ImageBatch;

/// In-memory dataset of equally sized RGB images, each stored as (1, 3, S, S).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    ids: Vec<String>,
    images: Vec<Tensor<f32>>,
    skipped: usize,
}

impl Dataset {
    pub fn from_images(ids: Vec<String>, images: Vec<Tensor<f32>>) -> Result<Self> {
        if ids.len() != images.len() {
            return Err(VleError::contract("dataset ids and images differ in length"));
        }
        if images.is_empty() {
            return Err(VleError::EmptyDataset("no images".into()));
        }
        let shape = images[0].shape().to_vec();
        for img in &images {
            img.expect_shape(&shape)?;
            ImageBatch::new(img.clone())?;
        }
        if shape.first() != Some(&1) {
            return Err(VleError::contract("dataset images must carry a unit batch axis"));
        }
        Ok(Dataset {
            ids,
            images,
            skipped: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Files that could not be decoded during ingestion.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn image(&self, i: usize) -> ImageBatch<f32> {
        ImageBatch::new(self.images[i].clone()).expect("validated on construction")
    }

    pub fn image_shape(&self) -> &[usize] {
        self.images[0].shape()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<ImageBatch<f32>> {
        let parts: Vec<_> = indices.iter().map(|&i| self.images[i].clone()).collect();
        ImageBatch::new(Tensor::concat_batch(&parts)?)
    }

    /// Split off the last `count` images.
    pub fn split_tail(mut self, count: usize) -> Result<(Dataset, Dataset)> {
        if count == 0 || count >= self.len() {
            return Err(VleError::contract(format!("cannot split {count} of {} images", self.len())));
        }
        let at = self.len() - count;
        let tail_ids = self.ids.split_off(at);
        let tail_images = self.images.split_off(at);
        Ok((self, Dataset::from_images(tail_ids, tail_images)?))
    }
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else if is_image_file(&path) {
            out.push(path);
        }
    }
    Ok(())
}

/// Decode one file to (1, 3, size, size) in [0, 1].
pub fn load_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|source| VleError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img.to_rgb32f();
    let resized = if rgb.width() as usize == size && rgb.height() as usize == size {
        rgb
    } else {
        image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle)
    };
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in resized.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px.0[c].clamp(0.0, 1.0);
        }
    }
    Tensor::from_vec(&[1, 3, size, size], data)
}

/// Write a (1, C, H, W) tensor, C ∈ {1, 3}, as an 8-bit PNG. Values are
/// clamped to [0, 1] and rounded to the nearest code.
pub fn save_png<T: Real>(image: &Tensor<T>, path: &Path) -> Result<()> {
    let (b, c, h, w) = image.dims4()?;
    if b != 1 || (c != 1 && c != 3) {
        return Err(VleError::contract(format!("cannot write shape {:?} as PNG", image.shape())));
    }
    let plane = h * w;
    let code = |v: T| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut bytes = Vec::with_capacity(c * plane);
    for i in 0..plane {
        for k in 0..c {
            bytes.push(code(image.data()[k * plane + i]));
        }
    }
    let color = if c == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
    image::save_buffer_with_format(path, &bytes, w as u32, h as u32, color, image::ImageFormat::Png).map_err(
        |source| VleError::Image {
            path: path.to_path_buf(),
            source,
        },
    )
}

fn worker_count() -> usize {
    std::env::var("VLE_NUM_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

/// Load every PNG/JPEG under `root` (recursively). Undecodable files are
/// skipped and counted. Order is the sorted path list shuffled by `seed`.
pub fn ingest_dataset(root: &Path, image_size: usize, seed: u64) -> Result<Dataset> {
    if image_size == 0 {
        return Err(VleError::contract("image_size must be positive"));
    }
    let mut files = Vec::new();
    collect_files(root, &mut files)?;
    files.sort();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| VleError::contract(format!("worker pool: {e}")))?;
    let decoded: Vec<Result<Tensor<f32>>> =
        pool.install(|| files.par_iter().map(|p| load_image(p, image_size)).collect());

    let mut ids = Vec::new();
    let mut images = Vec::new();
    let mut skipped = 0;
    for (path, res) in files.iter().zip(decoded) {
        match res {
            Ok(t) => {
                let id = path.strip_prefix(root).unwrap_or(path).to_string_lossy().replace('\\', "/");
                ids.push(id);
                images.push(t);
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped += 1;
            }
        }
    }
    if images.is_empty() {
        return Err(VleError::EmptyDataset(format!(
            "no usable images under {} ({skipped} skipped)",
            root.display()
        )));
    }
    if skipped > 0 {
        log::warn!("{skipped} file(s) could not be decoded");
    }

    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut ds = Dataset::from_images(
        order.iter().map(|&i| ids[i].clone()).collect(),
        order.iter().map(|&i| images[i].clone()).collect(),
    )?;
    ds.skipped = skipped;
    Ok(ds)
}
