//! Parameter-free linear codecs with 𝓓∘𝓔 = α·identity, used to check the
//! autoregressive algebra against closed forms.

use crate::codec::{Codec, CodecGraph, MemoryVars, PrecursorVars};
use crate::error::{Result, VleError};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// Vanilla stub: token = α·input, decoder = identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearStub {
    pub alpha: f64,
}

impl<T: Real> CodecGraph<T> for LinearStub {
    fn encode(&self, g: &mut Graph<T>, input: Var) -> Result<Var> {
        Ok(g.scale(input, self.alpha))
    }

    fn decode(&self, _g: &mut Graph<T>, token: Var) -> Result<Var> {
        Ok(token)
    }
}

impl<T: Real> Codec<T> for LinearStub {
    fn bind<'a>(&'a self, _g: &mut Graph<T>) -> Box<dyn CodecGraph<T> + 'a> {
        Box::new(*self)
    }

    fn mask_enabled(&self) -> bool {
        false
    }
}

/// Masked stub: the precursor passes the residual through with a mask of
/// ones; the encoder drops the mask channel and scales by α.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedLinearStub {
    pub alpha: f64,
    pub image_channels: usize,
}

impl<T: Real> CodecGraph<T> for MaskedLinearStub {
    fn encode(&self, g: &mut Graph<T>, input: Var) -> Result<Var> {
        let content = g.narrow_channels(input, 0, self.image_channels)?;
        Ok(g.scale(content, self.alpha))
    }

    fn decode(&self, _g: &mut Graph<T>, token: Var) -> Result<Var> {
        Ok(token)
    }

    fn mask_enabled(&self) -> bool {
        true
    }

    fn initial_memory(&self, g: &mut Graph<T>, _image_shape: &[usize]) -> Result<MemoryVars> {
        Ok(MemoryVars {
            hidden: g.constant(Tensor::scalar(T::zero())),
            cell: g.constant(Tensor::scalar(T::zero())),
        })
    }

    fn precursor(&self, g: &mut Graph<T>, memory: MemoryVars, residual: Var) -> Result<PrecursorVars> {
        let (b, c, h, w) = g.value(residual).dims4()?;
        if c != self.image_channels {
            return Err(VleError::contract(format!("stub expects {} channels, got {c}", self.image_channels)));
        }
        let mask = g.constant(Tensor::full(&[b, 1, h, w], T::one()));
        Ok(PrecursorVars {
            transformed: residual,
            mask,
            memory,
        })
    }
}

impl<T: Real> Codec<T> for MaskedLinearStub {
    fn bind<'a>(&'a self, _g: &mut Graph<T>) -> Box<dyn CodecGraph<T> + 'a> {
        Box::new(*self)
    }

    fn mask_enabled(&self) -> bool {
        true
    }
}
