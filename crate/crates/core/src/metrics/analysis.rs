//! Evaluation tables and the two figure analyses, plus their CSV forms.

use std::io::Write;

use rayon::prelude::*;

use crate::codec::Codec;
use crate::engine::{natural_variant, run, run_to_threshold, LoopConfig};
use crate::error::{Result, VleError};
use crate::metrics::entropy::shannon_entropy;
use crate::metrics::rank::spearman;
use crate::metrics::ssim::ssim;
use crate::training::dataset::Dataset;
use crate::tensor::Tensor;
use crate::types::mse;

/// Images per forward batch during evaluation.
const EVAL_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub image_id: String,
    pub n_tokens: usize,
    pub mse: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fig1Row {
    pub model: String,
    pub n_tokens: usize,
    pub image_id: String,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyRow {
    pub image_id: String,
    pub entropy_bits: f64,
    /// Token count, or `n_cap + 1` when the threshold was never met.
    pub tokens_to_threshold: usize,
    pub reached: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fig2Report {
    pub tau: f64,
    pub n_cap: usize,
    pub rows: Vec<EntropyRow>,
    /// Over images that reached the threshold; `None` when undefined.
    pub spearman: Option<f64>,
    pub included: usize,
}

/// Per-image reconstruction traces for every n in `1..=n_max`, in dataset
/// order. Each image gets one run, so every prefix comes from the same trace.
fn per_image<R: Send>(
    codec: &(dyn Codec<f32> + Sync),
    data: &Dataset,
    n_max: usize,
    each: impl Fn(usize, &crate::types::ReconstructionTrace<f32>, usize) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let config = LoopConfig::new(n_max, natural_variant(codec));
    let chunks: Vec<_> = (0..data.len()).collect::<Vec<_>>().chunks(EVAL_CHUNK).map(<[usize]>::to_vec).collect();
    let nested = chunks
        .par_iter()
        .map(|idx| {
            let batch = data.batch(idx)?;
            let trace = run(codec, &batch, config)?;
            idx.iter().enumerate().map(|(b, &i)| each(i, &trace, b)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(nested.into_iter().flatten().collect())
}

fn check_n_list(n_list: &[usize]) -> Result<usize> {
    match n_list.iter().max() {
        Some(&m) if !n_list.contains(&0) => Ok(m),
        _ => Err(VleError::contract("n_list must be non-empty with every n ≥ 1")),
    }
}

/// MSE as reported: the reconstruction is clamped to [0, 1] first, as for
/// SSIM. The loop itself never clamps.
pub fn reported_mse(x: &Tensor<f32>, recon: &Tensor<f32>) -> Result<f64> {
    mse(x, &recon.map(|v| v.clamp(0.0, 1.0)))
}

/// MSE and SSIM of X̂_n for every image and every n in `n_list`.
pub fn eval_table(codec: &(dyn Codec<f32> + Sync), data: &Dataset, n_list: &[usize]) -> Result<Vec<EvalRow>> {
    let n_max = check_n_list(n_list)?;
    let rows = per_image(codec, data, n_max, |i, trace, b| {
        let x = data.image(i);
        n_list
            .iter()
            .map(|&n| {
                let recon = trace.recon(n).expect("n ≤ trace length").batch_item(b)?;
                Ok(EvalRow {
                    image_id: data.id(i).to_string(),
                    n_tokens: n,
                    mse: reported_mse(x.tensor(), &recon)?,
                    ssim: ssim(x.tensor(), &recon)?,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(rows.into_iter().flatten().collect())
}

/// Per-image MSE for n = 1..=n_eval_max under each named model.
pub fn fig1_analysis(
    models: &[(&str, &(dyn Codec<f32> + Sync))],
    data: &Dataset,
    n_eval_max: usize,
) -> Result<Vec<Fig1Row>> {
    if n_eval_max == 0 {
        return Err(VleError::contract("n_eval_max must be at least 1"));
    }
    let mut out = Vec::new();
    for &(name, codec) in models {
        let rows = per_image(codec, data, n_eval_max, |i, trace, b| {
            let x = data.image(i);
            (1..=n_eval_max)
                .map(|n| {
                    let recon = trace.recon(n).expect("n ≤ trace length").batch_item(b)?;
                    Ok(Fig1Row {
                        model: name.to_string(),
                        n_tokens: n,
                        image_id: data.id(i).to_string(),
                        mse: reported_mse(x.tensor(), &recon)?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        out.extend(rows.into_iter().flatten());
    }
    Ok(out)
}

/// Mean MSE per token count for one model, ordered by n.
pub fn mean_mse_by_n(rows: &[Fig1Row], model: &str) -> Vec<(usize, f64)> {
    let mut sums: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
    for r in rows.iter().filter(|r| r.model == model) {
        let e = sums.entry(r.n_tokens).or_default();
        e.0 += r.mse;
        e.1 += 1;
    }
    sums.into_iter().map(|(n, (s, c))| (n, s / c as f64)).collect()
}

/// Image entropy against the tokens needed to reach MSE ≤ tau.
pub fn fig2_analysis(codec: &(dyn Codec<f32> + Sync), data: &Dataset, tau: f64, n_cap: usize) -> Result<Fig2Report> {
    let variant = natural_variant(codec);
    let rows = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let x = data.image(i);
            let (outcome, _) = run_to_threshold(codec, &x, variant, tau, n_cap)?;
            let tokens = outcome.tokens_or_sentinel(n_cap);
            Ok(EntropyRow {
                image_id: data.id(i).to_string(),
                entropy_bits: shannon_entropy(x.tensor())?,
                tokens_to_threshold: tokens,
                reached: tokens <= n_cap,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let kept: Vec<_> = rows.iter().filter(|r| r.reached).collect();
    let ent: Vec<f64> = kept.iter().map(|r| r.entropy_bits).collect();
    let tok: Vec<f64> = kept.iter().map(|r| r.tokens_to_threshold as f64).collect();
    Ok(Fig2Report {
        tau,
        n_cap,
        spearman: spearman(&ent, &tok),
        included: kept.len(),
        rows,
    })
}

/// `%g`-style formatting with six significant digits.
pub fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{}", if v == 0.0 { 0.0 } else { v });
    }
    let sci = format!("{v:.5e}");
    let exp: i32 = sci[sci.find('e').expect("exponent") + 1..].parse().expect("integer exponent");
    if !(-5..6).contains(&exp) {
        return sci;
    }
    let fixed = format!("{:.*}", (5 - exp) as usize, v);
    if fixed.contains('.') {
        fixed.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        fixed
    }
}

fn csv_writer<W: Write>(w: W, header: &[&str]) -> Result<csv::Writer<W>> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header).map_err(csv_err)?;
    Ok(out)
}

fn csv_err(e: csv::Error) -> VleError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => VleError::Io(io),
        other => VleError::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

pub fn write_eval_csv<W: Write>(w: W, rows: &[EvalRow]) -> Result<()> {
    let mut out = csv_writer(w, &["image_id", "n", "mse", "ssim"])?;
    for r in rows {
        out.write_record([r.image_id.clone(), r.n_tokens.to_string(), sig6(r.mse), sig6(r.ssim)])
            .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_fig1_csv<W: Write>(w: W, rows: &[Fig1Row]) -> Result<()> {
    let mut out = csv_writer(w, &["model", "n", "image_id", "mse"])?;
    for r in rows {
        out.write_record([r.model.clone(), r.n_tokens.to_string(), r.image_id.clone(), sig6(r.mse)])
            .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_fig2_csv<W: Write>(w: W, rows: &[EntropyRow]) -> Result<()> {
    let mut out = csv_writer(w, &["image_id", "entropy_bits", "tokens_to_threshold"])?;
    for r in rows {
        out.write_record([r.image_id.clone(), sig6(r.entropy_bits), r.tokens_to_threshold.to_string()])
            .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}
