//! Training objectives for vanilla and masked runs.
//!
//! Every objective is built on a [`Graph`] so it can be differentiated
//! through the full unroll; the value-level functions below wrap the same
//! graph code around constant inputs.
//!
//! Batch handling: each per-step term is computed per image (mean over its
//! C·H·W elements) and then averaged over the batch.

use crate::engine::GraphTrace;
use crate::error::{Result, VleError};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};
use crate::types::{ImageBatch, MaskBatch, ReconstructionTrace};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the mask distinctness term in the combined objective.
    pub lambda_mask: f64,
    /// Add exp(−MSE(X_n, X̂_{n−1})) per step. Off by default; this term tends
    /// to split images by colour channel rather than by region.
    pub recon_distinctness: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_mask: 1.0,
            recon_distinctness: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTerms {
    pub n: usize,
    pub rec: f64,
    pub mask: f64,
    /// Reconstruction distinctness term, 0 unless enabled.
    pub distinct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_step: Vec<StepTerms>,
    pub n_max_used: usize,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self
                .per_step
                .iter()
                .all(|s| s.rec.is_finite() && s.mask.is_finite() && s.distinct.is_finite())
    }
}

/// (1/N)·Σ(rec_n + λ·mask_n + distinct_n) in f64, the composition rule shared
/// by both objectives.
pub fn compose(per_step: &[StepTerms], lambda_mask: f64) -> f64 {
    let sum: f64 = per_step
        .iter()
        .map(|s| s.rec + lambda_mask * s.mask + s.distinct)
        .sum();
    sum / per_step.len() as f64
}

/// Batch mean of per-image MSE.
pub fn mse_var<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let diff = g.sub(a, b)?;
    let per_image = g.mean_square_per_sample(diff)?;
    g.mean(per_image)
}

/// Batch mean of exp(−MSE) per image.
pub fn distinctness_var<T: Real>(g: &mut Graph<T>, current: Var, previous: Var) -> Result<Var> {
    let diff = g.sub(current, previous)?;
    let per_image = g.mean_square_per_sample(diff)?;
    let neg = g.scale(per_image, -1.0);
    let e = g.exp(neg);
    g.mean(e)
}

/// (1/D)·‖M ⊙ (X − X̂)‖², mask broadcast over channels, batch mean.
pub fn masked_rec_var<T: Real>(g: &mut Graph<T>, mask: Var, target: Var, recon: Var) -> Result<Var> {
    let diff = g.sub(target, recon)?;
    let masked = g.mul_mask(diff, mask)?;
    let per_image = g.mean_square_per_sample(masked)?;
    g.mean(per_image)
}

/// Scalar objective on a graph plus the per-step term nodes.
pub struct GraphLoss {
    pub total: Var,
    pub rec: Vec<Var>,
    pub mask: Vec<Option<Var>>,
    pub distinct: Vec<Option<Var>>,
}

impl GraphLoss {
    pub fn breakdown<T: Real>(&self, g: &Graph<T>) -> LossBreakdown {
        let read = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item().as_f64());
        let per_step = (0..self.rec.len())
            .map(|i| StepTerms {
                n: i + 1,
                rec: read(Some(self.rec[i])),
                mask: read(self.mask[i]),
                distinct: read(self.distinct[i]),
            })
            .collect();
        LossBreakdown {
            total: g.value(self.total).item().as_f64(),
            per_step,
            n_max_used: self.rec.len(),
        }
    }
}

fn average<T: Real>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64))
}

/// (1/N)·Σ_n MSE(X, X̂_n).
pub fn vanilla_objective<T: Real>(g: &mut Graph<T>, trace: &GraphTrace) -> Result<GraphLoss> {
    if trace.steps.is_empty() {
        return Err(VleError::contract("loss of an empty trace"));
    }
    let rec = trace
        .steps
        .iter()
        .map(|s| mse_var(g, trace.target, s.recon))
        .collect::<Result<Vec<_>>>()?;
    let total = average(g, &rec)?;
    let n = rec.len();
    Ok(GraphLoss {
        total,
        rec,
        mask: vec![None; n],
        distinct: vec![None; n],
    })
}

/// (1/N)·Σ_n (masked_rec_n + λ·exp(−MSE(M̃_n, M̂_{n−1}))), optionally with the
/// reconstruction distinctness term.
pub fn combined_objective<T: Real>(
    g: &mut Graph<T>,
    trace: &GraphTrace,
    config: &LossConfig,
) -> Result<GraphLoss> {
    if trace.steps.is_empty() {
        return Err(VleError::contract("loss of an empty trace"));
    }
    let mut rec = Vec::new();
    let mut mask = Vec::new();
    let mut distinct = Vec::new();
    let mut terms = Vec::new();
    for s in &trace.steps {
        let (Some(m), Some(prev_m)) = (s.mask, s.prev_mask_cum) else {
            return Err(VleError::contract("combined loss needs a masked trace"));
        };
        let r = masked_rec_var(g, m, trace.target, s.recon)?;
        let d = distinctness_var(g, m, prev_m)?;
        let weighted = g.scale(d, config.lambda_mask);
        let mut term = g.add(r, weighted)?;
        let extra = if config.recon_distinctness {
            let e = distinctness_var(g, s.output, s.prev_recon)?;
            term = g.add(term, e)?;
            Some(e)
        } else {
            None
        };
        rec.push(r);
        mask.push(Some(d));
        distinct.push(extra);
        terms.push(term);
    }
    let total = average(g, &terms)?;
    Ok(GraphLoss {
        total,
        rec,
        mask,
        distinct,
    })
}

fn trace_to_graph<T: Real>(
    g: &mut Graph<T>,
    trace: &ReconstructionTrace<T>,
    target: &ImageBatch<T>,
) -> Result<GraphTrace> {
    target.tensor().expect_shape(trace.image_shape())?;
    let target_var = g.constant(target.tensor().clone());
    GraphTrace::from_values(g, target_var, trace)
}

pub fn vanilla_loss<T: Real>(
    trace: &ReconstructionTrace<T>,
    target: &ImageBatch<T>,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let gt = trace_to_graph(&mut g, trace, target)?;
    Ok(vanilla_objective(&mut g, &gt)?.breakdown(&g))
}

pub fn combined_loss<T: Real>(
    trace: &ReconstructionTrace<T>,
    target: &ImageBatch<T>,
    config: &LossConfig,
) -> Result<LossBreakdown> {
    if !trace.is_masked() {
        return Err(VleError::contract("combined loss needs a masked trace"));
    }
    let mut g = Graph::new();
    let gt = trace_to_graph(&mut g, trace, target)?;
    Ok(combined_objective(&mut g, &gt, config)?.breakdown(&g))
}

fn scalar_of<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl FnOnce(&mut Graph<T>, Var, Var) -> Result<Var>,
) -> Result<f64> {
    b.expect_shape(a.shape())?;
    let mut g = Graph::new();
    let va = g.constant(a.clone());
    let vb = g.constant(b.clone());
    let out = f(&mut g, va, vb)?;
    Ok(g.value(out).item().as_f64())
}

/// exp(−MSE(current, cumulative_previous)), in (0, 1].
pub fn distinctness_loss<T: Real>(current: &Tensor<T>, cumulative_previous: &Tensor<T>) -> Result<f64> {
    scalar_of(current, cumulative_previous, |g, a, b| distinctness_var(g, a, b))
}

/// exp(−MSE(M̃_n, M̂_{n−1})).
pub fn mask_distinctness_loss<T: Real>(mask: &MaskBatch<T>, cumulative_previous: &Tensor<T>) -> Result<f64> {
    scalar_of(mask.tensor(), cumulative_previous, |g, a, b| distinctness_var(g, a, b))
}

pub fn masked_rec_loss<T: Real>(mask: &Tensor<T>, target: &ImageBatch<T>, recon: &Tensor<T>) -> Result<f64> {
    let (b, _, h, w) = target.tensor().dims4()?;
    mask.expect_shape(&[b, 1, h, w])?;
    recon.expect_shape(target.shape())?;
    let mut g = Graph::new();
    let m = g.constant(mask.clone());
    let x = g.constant(target.tensor().clone());
    let r = g.constant(recon.clone());
    let out = masked_rec_var(&mut g, m, x, r)?;
    Ok(g.value(out).item().as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::mse;

    fn img(shape: &[usize], f: impl FnMut(usize) -> f64) -> ImageBatch<f64> {
        ImageBatch::new(Tensor::from_fn(shape, f)).unwrap()
    }

    #[test]
    fn vanilla_examples() {
        let shape = [1, 1, 2, 2];
        let x = img(&shape, |i| i as f64 / 4.0);
        let perfect = ReconstructionTrace::new(&shape, false)
            .accumulate(x.tensor().clone(), None)
            .unwrap()
            .accumulate(Tensor::zeros(&shape), None)
            .unwrap();
        assert_eq!(vanilla_loss(&perfect, &x).unwrap().total, 0.0);

        let out = Tensor::full(&shape, 0.3);
        let single = ReconstructionTrace::new(&shape, false).accumulate(out.clone(), None).unwrap();
        let l = vanilla_loss(&single, &x).unwrap();
        assert!((l.total - mse(x.tensor(), &out).unwrap()).abs() < 1e-15);

        // X = 0; X̂_1 with MSE 0.4, X̂_2 with MSE 0.2 → 0.3
        let zero = img(&shape, |_| 0.0);
        let o1 = Tensor::full(&shape, 0.4f64.sqrt());
        let o2 = Tensor::full(&shape, 0.2f64.sqrt() - 0.4f64.sqrt());
        let tr = ReconstructionTrace::new(&shape, false)
            .accumulate(o1, None)
            .unwrap()
            .accumulate(o2, None)
            .unwrap();
        let l = vanilla_loss(&tr, &zero).unwrap();
        assert!((l.total - 0.3).abs() < 1e-12);
        assert!((l.per_step[0].rec - 0.4).abs() < 1e-12);
        assert!((l.per_step[1].rec - 0.2).abs() < 1e-12);
        assert_eq!(l.n_max_used, 2);
    }

    #[test]
    fn empty_trace_is_rejected() {
        let shape = [1, 1, 2, 2];
        let x = img(&shape, |_| 0.5);
        let tr = ReconstructionTrace::<f64>::new(&shape, false);
        assert!(matches!(vanilla_loss(&tr, &x), Err(VleError::Contract(_))));
    }

    #[test]
    fn distinctness_examples() {
        let a = Tensor::<f64>::full(&[1, 1, 2, 2], 0.3);
        assert_eq!(distinctness_loss(&a, &a).unwrap(), 1.0);
        let one = Tensor::<f64>::full(&[1, 1, 2, 2], 1.0);
        let zero = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        assert!((distinctness_loss(&one, &zero).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        let far = Tensor::<f64>::full(&[1, 1, 2, 2], 100.0);
        assert!(distinctness_loss(&zero, &far).unwrap() < 1e-6);
        assert!(distinctness_loss(&zero, &Tensor::zeros(&[1, 1, 2, 3])).is_err());
    }

    #[test]
    fn mask_distinctness_examples() {
        let half = MaskBatch::new(Tensor::<f64>::full(&[1, 1, 3, 3], 0.5)).unwrap();
        let v = mask_distinctness_loss(&half, &Tensor::zeros(&[1, 1, 3, 3])).unwrap();
        assert!((v - (-0.25f64).exp()).abs() < 1e-15);
        assert!((v - 0.7788).abs() < 1e-4);

        let hi = MaskBatch::new(Tensor::<f64>::full(&[1, 1, 3, 3], 0.9)).unwrap();
        let v = mask_distinctness_loss(&hi, &Tensor::full(&[1, 1, 3, 3], 0.1)).unwrap();
        assert!((v - (-0.64f64).exp()).abs() < 1e-12);
        assert!((v - 0.5273).abs() < 1e-4);

        let same = mask_distinctness_loss(&hi, hi.tensor()).unwrap();
        assert_eq!(same, 1.0);
    }

    #[test]
    fn masked_rec_examples() {
        let shape = [1, 3, 2, 4];
        let x = img(&shape, |i| (i % 5) as f64 / 5.0);
        let recon = x.tensor().map(|v| v - 0.2);
        let zero_mask = Tensor::zeros(&[1, 1, 2, 4]);
        assert_eq!(masked_rec_loss(&zero_mask, &x, &recon).unwrap(), 0.0);

        let ones = Tensor::full(&[1, 1, 2, 4], 1.0);
        let a = masked_rec_loss(&ones, &x, &recon).unwrap();
        assert!((a - mse(x.tensor(), &recon).unwrap()).abs() < 1e-15);

        let half = Tensor::from_fn(&[1, 1, 2, 4], |i| if i % 4 < 2 { 1.0 } else { 0.0 });
        let v = masked_rec_loss(&half, &x, &recon).unwrap();
        assert!((v - 0.02).abs() < 1e-12, "{v}");
    }

    #[test]
    fn compose_examples() {
        let terms = [
            StepTerms { n: 1, rec: 0.1, mask: 0.8, distinct: 0.0 },
            StepTerms { n: 2, rec: 0.3, mask: 0.6, distinct: 0.0 },
        ];
        assert!((compose(&terms, 1.0) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn combined_examples() {
        let shape = [1, 3, 2, 2];
        let mshape = [1, 1, 2, 2];
        let x = img(&shape, |i| i as f64 / 12.0);

        // n_max = 1, mask ≡ 1 (limit), X̂_1 = X → 0 + exp(−1)
        let tr = ReconstructionTrace::new(&shape, true)
            .accumulate(x.tensor().clone(), Some(Tensor::full(&mshape, 1.0)))
            .unwrap();
        let l = combined_loss(&tr, &x, &LossConfig::default()).unwrap();
        assert!((l.total - (-1.0f64).exp()).abs() < 1e-15);

        // Perfect reconstructions with identical masks at every step: each mask
        // term is exp(0) only when M̃_n equals M̂_{n−1}, i.e. a zero first mask
        // followed by zeros.
        let tr = ReconstructionTrace::new(&shape, true)
            .accumulate(x.tensor().clone(), Some(Tensor::zeros(&mshape)))
            .unwrap()
            .accumulate(Tensor::zeros(&shape), Some(Tensor::zeros(&mshape)))
            .unwrap();
        let l = combined_loss(&tr, &x, &LossConfig::default()).unwrap();
        assert_eq!(l.total, 1.0);

        let vanilla = ReconstructionTrace::new(&shape, false)
            .accumulate(x.tensor().clone(), None)
            .unwrap();
        assert!(combined_loss(&vanilla, &x, &LossConfig::default()).is_err());
    }

    #[test]
    fn lambda_and_recon_distinctness_flags() {
        let shape = [1, 3, 2, 2];
        let mshape = [1, 1, 2, 2];
        let x = img(&shape, |i| i as f64 / 12.0);
        let tr = ReconstructionTrace::new(&shape, true)
            .accumulate(Tensor::full(&shape, 0.2), Some(Tensor::full(&mshape, 0.5)))
            .unwrap();
        let base = combined_loss(&tr, &x, &LossConfig::default()).unwrap();
        let no_mask = combined_loss(&tr, &x, &LossConfig { lambda_mask: 0.0, recon_distinctness: false }).unwrap();
        assert!((base.total - no_mask.total - base.per_step[0].mask).abs() < 1e-15);
        let with_d = combined_loss(&tr, &x, &LossConfig { lambda_mask: 1.0, recon_distinctness: true }).unwrap();
        let want = (-0.04f64).exp();
        assert!((with_d.per_step[0].distinct - want).abs() < 1e-12);
        assert!((with_d.total - compose(&with_d.per_step, 1.0)).abs() < 1e-15);
    }
}
