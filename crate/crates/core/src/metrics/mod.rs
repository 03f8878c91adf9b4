//! Reconstruction quality metrics and the analysis procedures built on them.

pub mod analysis;
pub mod entropy;
pub mod rank;
pub mod ssim;

pub use analysis::{
    eval_table, fig1_analysis, fig2_analysis, mean_mse_by_n, reported_mse, sig6, write_eval_csv, write_fig1_csv, write_fig2_csv,
    EntropyRow, EvalRow, Fig1Row, Fig2Report,
};
pub use entropy::shannon_entropy;
pub use rank::spearman;
pub use ssim::ssim;
