//! Deterministic inputs shared by the benchmarks.

use vle_core::{CodecConfig, ConvCodec, ImageBatch, Tensor};

/// Smooth, non-constant values in [0, 1].
pub fn image_batch(batch: usize, size: usize) -> ImageBatch<f32> {
    let t = Tensor::from_fn(&[batch, 3, size, size], |i| 0.5 + 0.45 * ((i as f32) * 0.013).sin());
    ImageBatch::new(t).expect("values in range")
}

pub fn tensor(shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| ((i * 7919) % 1000) as f32 / 1000.0 - 0.5)
}

/// Codec with a perturbed final decoder layer, so outputs are nonzero.
pub fn codec(config: CodecConfig) -> ConvCodec<f32> {
    let mut codec = ConvCodec::new(config, 0).expect("valid config");
    let params = codec.params_mut().tensors_mut();
    let last = params.len() - 1;
    for (i, v) in params[last].data_mut().iter_mut().enumerate() {
        *v = 0.01 * ((i % 11) as f32 - 5.0);
    }
    codec
}
