//! Variable length embeddings: an autoencoder whose latent code is a
//! sequence of tokens, each encoding whatever the previous tokens failed to
//! reconstruct.

pub mod codec;
pub mod conv;
pub mod engine;
pub mod error;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod types;

pub use codec::{Codec, CodecConfig, CodecParams, ConvCodec, MemoryState};
pub use engine::{run, run_masked, run_to_threshold, run_vanilla, LoopConfig, Threshold, Variant};
pub use error::{Result, VleError};
pub use graph::{Graph, Var};
pub use losses::{LossBreakdown, LossConfig, StepTerms};
pub use metrics::{eval_table, fig1_analysis, fig2_analysis, shannon_entropy, spearman, ssim, EntropyRow, EvalRow, Fig1Row, Fig2Report};
pub use tensor::{Real, Tensor};
pub use types::{mse, ImageBatch, MaskBatch, ReconstructionTrace, Token, TraceStep};
pub use training::{load_checkpoint, save_checkpoint, train, train_step, Checkpoint, LrSchedule, TrainConfig, Trainer};
