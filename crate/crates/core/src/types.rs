//! Domain values shared by every module: images, masks, tokens and the
//! per-token reconstruction trace.

use crate::error::{Result, VleError};
use crate::tensor::{Real, Tensor};

/// A batch of images, shape (B, C, H, W), every value finite and in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch<T = f32> {
    data: Tensor<T>,
}

impl<T: Real> ImageBatch<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        let (b, c, h, w) = data.dims4()?;
        if b == 0 || c == 0 || h == 0 || w == 0 {
            return Err(VleError::contract(format!(
                "image batch needs nonzero dims, got {:?}",
                data.shape()
            )));
        }
        if !data.all_finite() {
            return Err(VleError::NonFinite("image batch".into()));
        }
        if data.data().iter().any(|&v| v < T::zero() || v > T::one()) {
            return Err(VleError::contract("image values must lie in [0, 1]"));
        }
        Ok(ImageBatch { data })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn batch_size(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn image(&self, b: usize) -> Result<Self> {
        Ok(ImageBatch {
            data: self.data.batch_item(b)?,
        })
    }

    pub fn stack(images: &[Self]) -> Result<Self> {
        let parts: Vec<Tensor<T>> = images.iter().map(|i| i.data.clone()).collect();
        Ok(ImageBatch {
            data: Tensor::concat_batch(&parts)?,
        })
    }

    pub fn cast<U: Real>(&self) -> ImageBatch<U> {
        ImageBatch {
            data: self.data.cast(),
        }
    }
}

/// A per-step mask (B, 1, H, W) with values strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskBatch<T = f32> {
    data: Tensor<T>,
}

impl<T: Real> MaskBatch<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        let (_, c, _, _) = data.dims4()?;
        if c != 1 {
            return Err(VleError::contract(format!("mask must have one channel, got {c}")));
        }
        if data.data().iter().any(|&v| !(v > T::zero() && v < T::one())) {
            return Err(VleError::contract("per-step mask values must lie in (0, 1)"));
        }
        Ok(MaskBatch { data })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }
}

/// One latent token z_n. `z` keeps the batch axis: (B, C_z, H/s, W/s).
#[derive(Debug, Clone, PartialEq)]
pub struct Token<T = f32> {
    pub z: Tensor<T>,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep<T = f32> {
    /// 1-based token index n.
    pub index: usize,
    pub token: Option<Tensor<T>>,
    /// Decoder output X_n.
    pub output: Tensor<T>,
    /// Cumulative reconstruction X̂_n.
    pub recon: Tensor<T>,
    /// Precursor-transformed residual X̃_n (masked runs).
    pub transformed: Option<Tensor<T>>,
    /// Per-step mask M̃_n (masked runs).
    pub mask: Option<Tensor<T>>,
    /// Cumulative mask M̂_n (masked runs).
    pub mask_cum: Option<Tensor<T>>,
}

/// Record of an autoregressive run. `recon` of step n is the left-to-right
/// sum of the first n decoder outputs, starting from X̂_0 = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionTrace<T = f32> {
    image_shape: Vec<usize>,
    masked: bool,
    steps: Vec<TraceStep<T>>,
}

impl<T: Real> ReconstructionTrace<T> {
    pub fn new(image_shape: &[usize], masked: bool) -> Self {
        ReconstructionTrace {
            image_shape: image_shape.to_vec(),
            masked,
            steps: Vec::new(),
        }
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.image_shape
    }

    pub fn is_masked(&self) -> bool {
        self.masked
    }

    pub fn steps(&self) -> &[TraceStep<T>] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn last(&self) -> Option<&TraceStep<T>> {
        self.steps.last()
    }

    /// X̂_n for 1 ≤ n ≤ len, X̂_0 = 0.
    pub fn recon(&self, n: usize) -> Option<Tensor<T>> {
        match n {
            0 => Some(Tensor::zeros(&self.image_shape)),
            _ => self.steps.get(n - 1).map(|s| s.recon.clone()),
        }
    }

    /// M̂_n, with M̂_0 = 0. `None` on vanilla traces.
    pub fn mask_cum(&self, n: usize) -> Option<Tensor<T>> {
        if !self.masked {
            return None;
        }
        let [b, _, h, w] = self.image_shape[..] else {
            return None;
        };
        match n {
            0 => Some(Tensor::zeros(&[b, 1, h, w])),
            _ => self.steps.get(n - 1).and_then(|s| s.mask_cum.clone()),
        }
    }

    /// Append decoder output X_n (and, on masked traces, M̃_n).
    pub fn accumulate(self, output: Tensor<T>, mask: Option<Tensor<T>>) -> Result<Self> {
        self.accumulate_step(None, output, None, mask)
    }

    pub fn accumulate_step(
        mut self,
        token: Option<Tensor<T>>,
        output: Tensor<T>,
        transformed: Option<Tensor<T>>,
        mask: Option<Tensor<T>>,
    ) -> Result<Self> {
        output.expect_shape(&self.image_shape)?;
        if mask.is_some() != self.masked {
            return Err(VleError::contract(if self.masked {
                "masked trace step is missing its mask"
            } else {
                "mask supplied to a vanilla trace"
            }));
        }
        let n = self.steps.len();
        let prev = self.recon(n).expect("step n exists");
        let recon = prev.zip_map(&output, |a, b| a + b)?;
        let mask_cum = match &mask {
            Some(m) => {
                let (b, _, h, w) = output.dims4()?;
                m.expect_shape(&[b, 1, h, w])?;
                let prev = self.mask_cum(n).expect("masked trace");
                Some(prev.zip_map(m, |a, b| a + b)?)
            }
            None => None,
        };
        self.steps.push(TraceStep {
            index: n + 1,
            token,
            output,
            recon,
            transformed,
            mask,
            mask_cum,
        });
        Ok(self)
    }

    /// The first `n` steps as a trace of their own.
    pub fn prefix(&self, n: usize) -> Self {
        ReconstructionTrace {
            image_shape: self.image_shape.clone(),
            masked: self.masked,
            steps: self.steps[..n.min(self.steps.len())].to_vec(),
        }
    }
}

/// Mean squared error over every element, (1/D)·Σ(a − b)².
///
/// With equally sized images this equals the per-image mean averaged over
/// the batch.
pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    b.expect_shape(a.shape())?;
    if !a.all_finite() || !b.all_finite() {
        return Err(VleError::NonFinite("mse input".into()));
    }
    if a.is_empty() {
        return Err(VleError::contract("mse of empty tensors"));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}
