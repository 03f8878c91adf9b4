//! The autoregressive loops. Each step encodes what previous tokens left
//! unexplained and adds the decoded correction to the running reconstruction:
//!
//! ```text
//! X̂_0 = 0
//! z_n = E(X − X̂_{n−1})            X̂_n = X̂_{n−1} + D(z_n)
//! ```
//!
//! The masked loop first passes the residual through the precursor, which
//! yields a transformed residual X̃_n and a mask M̃_n, and encodes
//! concat(M̃_n ⊙ X̃_n, M̃_n) instead. The precursor memory starts at zero on
//! every run.

use serde::{Deserialize, Serialize};

use crate::codec::{condition_var, Codec, CodecGraph, MemoryVars};
use crate::error::{Result, VleError};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};
use crate::types::{mse, ImageBatch, ReconstructionTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Vanilla,
    Masked,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Vanilla => "vanilla",
            Variant::Masked => "masked",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = VleError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Variant::Vanilla),
            "masked" => Ok(Variant::Masked),
            other => Err(VleError::Config(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoopConfig {
    pub n_tokens: usize,
    pub variant: Variant,
    /// Cut gradients through X̂_{n−1} so each step trains against a frozen
    /// previous reconstruction.
    pub detach_steps: bool,
}

impl LoopConfig {
    pub fn new(n_tokens: usize, variant: Variant) -> Self {
        LoopConfig {
            n_tokens,
            variant,
            detach_steps: false,
        }
    }
}

/// One step of a run, as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct GraphStep {
    pub token: Option<Var>,
    pub output: Var,
    pub recon: Var,
    pub prev_recon: Var,
    pub transformed: Option<Var>,
    pub mask: Option<Var>,
    pub mask_cum: Option<Var>,
    pub prev_mask_cum: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct GraphTrace {
    pub target: Var,
    pub masked: bool,
    pub steps: Vec<GraphStep>,
}

impl GraphTrace {
    /// Read the run back as plain values.
    pub fn to_trace<T: Real>(&self, g: &Graph<T>) -> Result<ReconstructionTrace<T>> {
        let mut trace = ReconstructionTrace::new(g.shape(self.target), self.masked);
        for s in &self.steps {
            trace = trace.accumulate_step(
                s.token.map(|v| g.value(v).clone()),
                g.value(s.output).clone(),
                s.transformed.map(|v| g.value(v).clone()),
                s.mask.map(|v| g.value(v).clone()),
            )?;
        }
        Ok(trace)
    }

    /// Place a recorded trace on a graph as constants (for loss evaluation).
    pub fn from_values<T: Real>(g: &mut Graph<T>, target: Var, trace: &ReconstructionTrace<T>) -> Result<Self> {
        let mut steps = Vec::with_capacity(trace.len());
        for (i, s) in trace.steps().iter().enumerate() {
            let prev_recon = g.constant(trace.recon(i).expect("prefix exists"));
            let prev_mask_cum = trace.mask_cum(i).map(|m| g.constant(m));
            steps.push(GraphStep {
                token: s.token.clone().map(|t| g.constant(t)),
                output: g.constant(s.output.clone()),
                recon: g.constant(s.recon.clone()),
                prev_recon,
                transformed: s.transformed.clone().map(|t| g.constant(t)),
                mask: s.mask.clone().map(|t| g.constant(t)),
                mask_cum: s.mask_cum.clone().map(|t| g.constant(t)),
                prev_mask_cum,
            });
        }
        Ok(GraphTrace {
            target,
            masked: trace.is_masked(),
            steps,
        })
    }
}

/// Incremental runner: one call to [`Unroll::step`] produces one token.
pub struct Unroll<'c, T: Real> {
    codec: &'c dyn CodecGraph<T>,
    variant: Variant,
    detach: bool,
    trace: GraphTrace,
    recon: Var,
    mask_cum: Option<Var>,
    memory: Option<MemoryVars>,
}

impl<'c, T: Real> Unroll<'c, T> {
    pub fn new(
        g: &mut Graph<T>,
        codec: &'c dyn CodecGraph<T>,
        target: Var,
        variant: Variant,
        detach: bool,
    ) -> Result<Self> {
        let shape = g.shape(target).to_vec();
        let [b, _, h, w] = shape[..] else {
            return Err(VleError::contract("loop input must be a rank-4 image batch"));
        };
        let masked = variant == Variant::Masked;
        if masked && !codec.mask_enabled() {
            return Err(VleError::contract("masked loop needs a mask-enabled codec"));
        }
        let recon = g.constant(Tensor::zeros(&shape));
        let (mask_cum, memory) = if masked {
            (
                Some(g.constant(Tensor::zeros(&[b, 1, h, w]))),
                Some(codec.initial_memory(g, &shape)?),
            )
        } else {
            (None, None)
        };
        Ok(Unroll {
            codec,
            variant,
            detach,
            trace: GraphTrace {
                target,
                masked,
                steps: Vec::new(),
            },
            recon,
            mask_cum,
            memory,
        })
    }

    pub fn steps(&self) -> &[GraphStep] {
        &self.trace.steps
    }

    pub fn step(&mut self, g: &mut Graph<T>) -> Result<GraphStep> {
        let prev_recon = if self.detach { g.detach(self.recon) } else { self.recon };
        let residual = g.sub(self.trace.target, prev_recon)?;
        let step = match self.variant {
            Variant::Vanilla => {
                let token = self.codec.encode(g, residual)?;
                let output = self.codec.decode(g, token)?;
                let recon = g.add(prev_recon, output)?;
                GraphStep {
                    token: Some(token),
                    output,
                    recon,
                    prev_recon,
                    transformed: None,
                    mask: None,
                    mask_cum: None,
                    prev_mask_cum: None,
                }
            }
            Variant::Masked => {
                let memory = self.memory.expect("masked run has memory");
                let prev_mask_cum = self.mask_cum.expect("masked run has cumulative mask");
                let prev_mask_cum = if self.detach { g.detach(prev_mask_cum) } else { prev_mask_cum };
                let pre = self.codec.precursor(g, memory, residual)?;
                let input = condition_var(g, pre.transformed, pre.mask)?;
                let token = self.codec.encode(g, input)?;
                let output = self.codec.decode(g, token)?;
                let recon = g.add(prev_recon, output)?;
                let mask_cum = g.add(prev_mask_cum, pre.mask)?;
                self.memory = Some(pre.memory);
                self.mask_cum = Some(mask_cum);
                GraphStep {
                    token: Some(token),
                    output,
                    recon,
                    prev_recon,
                    transformed: Some(pre.transformed),
                    mask: Some(pre.mask),
                    mask_cum: Some(mask_cum),
                    prev_mask_cum: Some(prev_mask_cum),
                }
            }
        };
        self.recon = step.recon;
        self.trace.steps.push(step);
        Ok(step)
    }

    pub fn finish(self) -> GraphTrace {
        self.trace
    }
}

/// Run `n_tokens` steps on an existing graph (the training path).
pub fn unroll<T: Real>(
    g: &mut Graph<T>,
    codec: &dyn CodecGraph<T>,
    target: Var,
    config: LoopConfig,
) -> Result<GraphTrace> {
    if config.n_tokens == 0 {
        return Err(VleError::contract("n_tokens must be at least 1"));
    }
    let mut u = Unroll::new(g, codec, target, config.variant, config.detach_steps)?;
    for _ in 0..config.n_tokens {
        u.step(g)?;
    }
    Ok(u.finish())
}

/// Inference run returning the trace values.
pub fn run<T: Real>(codec: &dyn Codec<T>, x: &ImageBatch<T>, config: LoopConfig) -> Result<ReconstructionTrace<T>> {
    let mut g = Graph::new();
    let bound = codec.bind(&mut g);
    let target = g.constant(x.tensor().clone());
    let gt = unroll(&mut g, bound.as_ref(), target, config)?;
    gt.to_trace(&g)
}

pub fn run_vanilla<T: Real>(codec: &dyn Codec<T>, x: &ImageBatch<T>, n_tokens: usize) -> Result<ReconstructionTrace<T>> {
    run(codec, x, LoopConfig::new(n_tokens, Variant::Vanilla))
}

pub fn run_masked<T: Real>(codec: &dyn Codec<T>, x: &ImageBatch<T>, n_tokens: usize) -> Result<ReconstructionTrace<T>> {
    if !codec.mask_enabled() {
        return Err(VleError::contract("masked loop needs a mask-enabled codec"));
    }
    run(codec, x, LoopConfig::new(n_tokens, Variant::Masked))
}

/// The variant a codec was built for.
pub fn natural_variant<T: Real>(codec: &dyn Codec<T>) -> Variant {
    if codec.mask_enabled() {
        Variant::Masked
    } else {
        Variant::Vanilla
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Threshold {
    Reached(usize),
    NotReached,
}

impl Threshold {
    /// Token count, or `n_cap + 1` when the threshold was never met.
    pub fn tokens_or_sentinel(self, n_cap: usize) -> usize {
        match self {
            Threshold::Reached(n) => n,
            Threshold::NotReached => n_cap + 1,
        }
    }
}

/// Smallest n ≤ n_cap with MSE(X, X̂_n) ≤ tau. The trace stops at that step,
/// or runs all `n_cap` steps when the threshold is never met.
pub fn run_to_threshold<T: Real>(
    codec: &dyn Codec<T>,
    x: &ImageBatch<T>,
    variant: Variant,
    tau: f64,
    n_cap: usize,
) -> Result<(Threshold, ReconstructionTrace<T>)> {
    if tau.is_nan() || tau <= 0.0 || n_cap == 0 {
        return Err(VleError::contract("run_to_threshold needs tau > 0 and n_cap ≥ 1"));
    }
    let mut g = Graph::new();
    let bound = codec.bind(&mut g);
    let target = g.constant(x.tensor().clone());
    let mut u = Unroll::new(&mut g, bound.as_ref(), target, variant, false)?;
    let mut outcome = Threshold::NotReached;
    for n in 1..=n_cap {
        let step = u.step(&mut g)?;
        if mse(x.tensor(), g.value(step.recon))? <= tau {
            outcome = Threshold::Reached(n);
            break;
        }
    }
    Ok((outcome, u.finish().to_trace(&g)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::stub::{LinearStub, MaskedLinearStub};
    use crate::codec::{CodecConfig, ConvCodec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(shape: &[usize], seed: u64) -> ImageBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBatch::new(Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))).unwrap()
    }

    #[test]
    fn half_stub_geometric_recursion() {
        let x = image(&[1, 3, 4, 4], 1);
        let tr = run_vanilla(&LinearStub { alpha: 0.5 }, &x, 3).unwrap();
        for n in 1..=3 {
            let want = 1.0 - 0.5f64.powi(n as i32);
            for (r, v) in tr.recon(n).unwrap().data().iter().zip(x.tensor().data()) {
                assert!((r - want * v).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identity_stub_is_exact_after_one_step() {
        let x = image(&[1, 3, 4, 4], 2);
        let tr = run_vanilla(&LinearStub { alpha: 1.0 }, &x, 3).unwrap();
        assert_eq!(&tr.recon(1).unwrap(), x.tensor());
        for s in &tr.steps()[1..] {
            assert!(s.output.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn masked_stub_reduces_to_encoding_the_image() {
        let x = image(&[1, 3, 4, 4], 3);
        let stub = MaskedLinearStub { alpha: 0.5, image_channels: 3 };
        let tr = run_masked(&stub, &x, 3).unwrap();
        let first = tr.steps()[0].token.clone().unwrap();
        let cond = crate::codec::condition(x.tensor(), &Tensor::full(&[1, 1, 4, 4], 1.0)).unwrap();
        let mut g = Graph::new();
        let c = g.constant(cond);
        let z = CodecGraph::encode(&stub, &mut g, c).unwrap();
        assert_eq!(&first, g.value(z));
        assert!(tr.mask_cum(3).unwrap().data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn masked_loop_requires_mask_codec() {
        let x = image(&[1, 3, 4, 4], 3);
        assert!(matches!(run_masked(&LinearStub { alpha: 0.5 }, &x, 2), Err(VleError::Contract(_))));
        assert!(run_vanilla(&LinearStub { alpha: 0.5 }, &x, 0).is_err());
    }

    #[test]
    fn threshold_examples() {
        // Mean square of X is exactly 1, MSE after n tokens is 0.25ⁿ.
        let x = ImageBatch::new(Tensor::<f64>::full(&[1, 3, 4, 4], 1.0)).unwrap();
        let stub = LinearStub { alpha: 0.5 };
        let (t, tr) = run_to_threshold(&stub, &x, Variant::Vanilla, 0.01, 10).unwrap();
        assert_eq!(t, Threshold::Reached(4));
        assert_eq!(tr.len(), 4);
        let (t, _) = run_to_threshold(&stub, &x, Variant::Vanilla, f64::INFINITY, 10).unwrap();
        assert_eq!(t, Threshold::Reached(1));
        let (t, tr) = run_to_threshold(&stub, &x, Variant::Vanilla, 1e-300, 6).unwrap();
        assert_eq!(t, Threshold::NotReached);
        assert_eq!(t.tokens_or_sentinel(6), 7);
        assert_eq!(tr.len(), 6);
        assert!(run_to_threshold(&stub, &x, Variant::Vanilla, 0.0, 6).is_err());
    }

    fn tiny(mask: bool) -> ConvCodec<f64> {
        let cfg = CodecConfig {
            image_channels: 3,
            base_channels: 4,
            residual_blocks_per_level: 1,
            levels: 1,
            latent_channels: 3,
            mask_enabled: mask,
            lstm_hidden_channels: 3,
        };
        let mut codec = ConvCodec::new(cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for t in codec.params_mut().tensors_mut() {
            for v in t.data_mut() {
                if *v == 0.0 {
                    *v = rng.random_range(-0.3..0.3);
                }
            }
        }
        codec
    }

    #[test]
    fn prefix_consistency_and_determinism() {
        for masked in [false, true] {
            let codec = tiny(masked);
            let variant = if masked { Variant::Masked } else { Variant::Vanilla };
            let x = image(&[2, 3, 8, 8], 4);
            let short = run(&codec, &x, LoopConfig::new(2, variant)).unwrap();
            let long = run(&codec, &x, LoopConfig::new(5, variant)).unwrap();
            assert_eq!(short, long.prefix(2));
            assert_eq!(long, run(&codec, &x, LoopConfig::new(5, variant)).unwrap());
        }
    }

    #[test]
    fn memory_resets_between_images() {
        let codec = tiny(true);
        let a = image(&[1, 3, 8, 8], 6);
        let b = image(&[1, 3, 8, 8], 7);
        let _ = run_masked(&codec, &a, 3).unwrap();
        let b_after = run_masked(&codec, &b, 3).unwrap();
        let b_alone = run_masked(&codec, &b, 3).unwrap();
        assert_eq!(b_after, b_alone);
    }

    #[test]
    fn threshold_agrees_with_full_scan() {
        let codec = tiny(false);
        let x = image(&[1, 3, 8, 8], 8);
        let full = run_vanilla(&codec, &x, 6).unwrap();
        let errs: Vec<f64> = (1..=6).map(|n| mse(x.tensor(), &full.recon(n).unwrap()).unwrap()).collect();
        for &tau in &[errs[0] * 1.01, errs[2], errs[5] * 0.999, 1e-9] {
            let scan = errs.iter().position(|&e| e <= tau).map(|i| i + 1);
            let (t, tr) = run_to_threshold(&codec, &x, Variant::Vanilla, tau, 6).unwrap();
            match scan {
                Some(n) => {
                    assert_eq!(t, Threshold::Reached(n));
                    assert_eq!(tr, full.prefix(n));
                }
                None => assert_eq!(t, Threshold::NotReached),
            }
        }
    }

    #[test]
    fn detach_keeps_forward_values() {
        let codec = tiny(true);
        let x = image(&[1, 3, 8, 8], 9);
        let mut cfg = LoopConfig::new(3, Variant::Masked);
        let plain = run(&codec, &x, cfg).unwrap();
        cfg.detach_steps = true;
        assert_eq!(plain, run(&codec, &x, cfg).unwrap());
    }
}
