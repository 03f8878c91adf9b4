//! Optimization loop: curriculum-sampled unroll length, one Adam step per batch.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::ConvCodec;
use crate::engine::{unroll, LoopConfig, Variant};
use crate::error::{Result, VleError};
use crate::graph::Graph;
use crate::losses::{combined_objective, vanilla_objective, LossBreakdown, LossConfig};
use crate::training::checkpoint::{save_checkpoint, Checkpoint, RngState};
use crate::training::config::TrainConfig;
use crate::training::dataset::{ingest_dataset, Dataset};
use crate::training::optim::Adam;
use crate::training::sampler::TokenSampler;
use crate::types::ImageBatch;

/// Stream of the token-count RNG; epoch shuffles use streams from `EPOCH_STREAM_BASE` on.
const SAMPLER_STREAM: u64 = 1;
const EPOCH_STREAM_BASE: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepOptions {
    pub loss: LossConfig,
    pub detach_steps: bool,
}

/// One gradient step on the full `n_tokens` unroll.
///
/// The vanilla variant minimises the averaged reconstruction error, the
/// masked variant the combined masked objective. A non-finite loss or
/// gradient aborts before any parameter is touched.
pub fn train_step(
    codec: &mut ConvCodec<f32>,
    optimizer: &mut Adam<f32>,
    batch: &ImageBatch<f32>,
    n_tokens: usize,
    variant: Variant,
    options: StepOptions,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let bound = codec.bind_params(&mut g);
    let target = g.constant(batch.tensor().clone());
    let config = LoopConfig {
        n_tokens,
        variant,
        detach_steps: options.detach_steps,
    };
    let trace = unroll(&mut g, &bound, target, config)?;
    let vars = bound.param_vars().to_vec();
    let loss = match variant {
        Variant::Vanilla => vanilla_objective(&mut g, &trace)?,
        Variant::Masked => combined_objective(&mut g, &trace, &options.loss)?,
    };
    let breakdown = loss.breakdown(&g);
    if !breakdown.is_finite() {
        return Err(VleError::NonFinite(describe(&breakdown)));
    }
    let grads = g.backward(loss.total)?;
    let grads: Vec<_> = vars.iter().map(|&v| grads.get(v)).collect();
    if let Some(i) = grads.iter().position(|g| g.is_some_and(|g| !g.all_finite())) {
        return Err(VleError::NonFinite(format!(
            "gradient of {} ({})",
            codec.params().names()[i],
            describe(&breakdown)
        )));
    }
    optimizer.update(codec.params_mut().tensors_mut(), &grads)?;
    Ok(breakdown)
}

fn describe(b: &LossBreakdown) -> String {
    let terms: Vec<_> = b
        .per_step
        .iter()
        .map(|t| format!("n={} rec={} mask={} distinct={}", t.n, t.rec, t.mask, t.distinct))
        .collect();
    format!("total loss {} over {} tokens [{}]", b.total, b.n_max_used, terms.join("; "))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Zero-based index of the step that produced this record.
    pub step: u64,
    pub n_tokens: usize,
    pub loss: LossBreakdown,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "step,n_tokens,total_loss,rec_terms,mask_terms,distinct_terms";

    /// Per-step terms are `;`-joined in token order.
    pub fn csv_line(&self) -> String {
        let join = |f: fn(&crate::losses::StepTerms) -> f64| {
            self.loss.per_step.iter().map(|t| format!("{:e}", f(t))).collect::<Vec<_>>().join(";")
        };
        format!(
            "{},{},{:e},{},{},{}",
            self.step,
            self.n_tokens,
            self.loss.total,
            join(|t| t.rec),
            join(|t| t.mask),
            join(|t| t.distinct)
        )
    }
}

/// Training state that can be checkpointed and resumed bit-exactly.
///
/// Batches walk a per-epoch permutation derived from the seed and the epoch
/// index alone, so a resumed run picks up the same batches without storing
/// the data order.
pub struct Trainer {
    config: TrainConfig,
    codec: ConvCodec<f32>,
    optimizer: Adam<f32>,
    sampler: TokenSampler,
    rng: ChaCha8Rng,
    global_step: u64,
    epoch_order: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let codec = ConvCodec::new(config.codec_config(), config.seed)?;
        let optimizer = Adam::new(config.adam_config(), codec.params().tensors());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(SAMPLER_STREAM);
        Ok(Trainer {
            sampler: config.sampler()?,
            config,
            codec,
            optimizer,
            rng,
            global_step: 0,
            epoch_order: None,
        })
    }

    /// Resume from a checkpoint. `config` may differ from the stored one only
    /// in non-architectural fields (e.g. a larger `total_steps`).
    pub fn from_checkpoint(ckpt: Checkpoint, config: Option<TrainConfig>) -> Result<Self> {
        let config = config.unwrap_or_else(|| ckpt.config.clone());
        config.validate()?;
        if config.codec_config() != *ckpt.codec.config() {
            return Err(VleError::Config("architecture differs from the checkpoint".into()));
        }
        let mut optimizer = ckpt.optimizer;
        optimizer.config = config.adam_config();
        Ok(Trainer {
            sampler: config.sampler()?,
            config,
            codec: ckpt.codec,
            optimizer,
            rng: ckpt.rng.restore(),
            global_step: ckpt.global_step,
            epoch_order: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn codec(&self) -> &ConvCodec<f32> {
        &self.codec
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            codec: self.codec.clone(),
            optimizer: self.optimizer.clone(),
            rng: RngState::capture(&self.rng),
            global_step: self.global_step,
        }
    }

    fn epoch_order(&mut self, epoch: u64, len: usize) -> &[usize] {
        if self.epoch_order.as_ref().is_none_or(|(e, o)| *e != epoch || o.len() != len) {
            let mut order: Vec<usize> = (0..len).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(EPOCH_STREAM_BASE + epoch);
            order.shuffle(&mut rng);
            self.epoch_order = Some((epoch, order));
        }
        &self.epoch_order.as_ref().expect("just filled").1
    }

    fn batch_indices(&mut self, len: usize) -> Vec<usize> {
        let bs = self.config.batch_size as u64;
        (0..bs)
            .map(|i| {
                let pos = self.global_step * bs + i;
                let epoch = pos / len as u64;
                self.epoch_order(epoch, len)[(pos % len as u64) as usize]
            })
            .collect()
    }

    pub fn step(&mut self, data: &Dataset) -> Result<StepRecord> {
        let want = [1, self.config.image_channels, self.config.image_size, self.config.image_size];
        if data.image_shape() != want {
            return Err(VleError::shape(&want, data.image_shape()));
        }
        let indices = self.batch_indices(data.len());
        let batch = data.batch(&indices)?;
        let n_tokens = self.sampler.sample(self.global_step, &mut self.rng);
        let options = StepOptions {
            loss: self.config.loss_config(),
            detach_steps: self.config.detach_steps,
        };
        let step = self.global_step;
        self.optimizer.config.lr = self.config.lr * self.config.lr_schedule.factor(step, self.config.total_steps);
        let loss = train_step(&mut self.codec, &mut self.optimizer, &batch, n_tokens, self.config.variant, options)
            .map_err(|e| match e {
                VleError::NonFinite(msg) => VleError::NonFinite(format!("step {step}: {msg}")),
                other => other,
            })?;
        self.global_step += 1;
        Ok(StepRecord { step, n_tokens, loss })
    }

    /// Step until `global_step == until`, reporting each step to `on_step`.
    pub fn run_until(
        &mut self,
        data: &Dataset,
        until: u64,
        mut on_step: impl FnMut(&Trainer, &StepRecord) -> Result<()>,
    ) -> Result<()> {
        while self.global_step < until {
            let record = self.step(data)?;
            on_step(self, &record)?;
        }
        Ok(())
    }
}

/// Run a trainer to its configured `total_steps`.
///
/// With `out_dir`, appends to `train_log.csv`, writes `step_<k>.vle` every
/// `checkpoint_every` steps and `final.vle` at the end.
pub fn run_training(mut trainer: Trainer, data: &Dataset, out_dir: Option<&Path>) -> Result<Checkpoint> {
    let total = trainer.config.total_steps;
    let every = trainer.config.checkpoint_every;
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("train_log.csv");
            let fresh = !path.exists();
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            if fresh {
                writeln!(f, "{}", StepRecord::CSV_HEADER)?;
            }
            Some(f)
        }
        None => None,
    };
    trainer.run_until(data, total, |t, record| {
        log::debug!("step {} n={} loss={:.6}", record.step, record.n_tokens, record.loss.total);
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", record.csv_line())?;
        }
        if let (Some(dir), true) = (out_dir, every > 0 && t.global_step % every == 0 && t.global_step < total) {
            save_checkpoint(&t.checkpoint(), &dir.join(format!("step_{:08}.vle", t.global_step)))?;
        }
        Ok(())
    })?;
    let ckpt = trainer.checkpoint();
    if let Some(dir) = out_dir {
        save_checkpoint(&ckpt, &dir.join("final.vle"))?;
    }
    Ok(ckpt)
}

/// Train from `config.data_root` without writing any files.
pub fn train(config: &TrainConfig) -> Result<Checkpoint> {
    let root = config
        .data_root
        .as_deref()
        .ok_or_else(|| VleError::Config("data_root is required for training".into()))?;
    let data = ingest_dataset(Path::new(root), config.image_size, config.seed)?;
    run_training(Trainer::new(config.clone())?, &data, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::vanilla_loss;
    use crate::tensor::Tensor;
    use crate::engine::run_vanilla;

    fn tiny(variant: Variant) -> TrainConfig {
        TrainConfig {
            variant,
            n_min: if variant == Variant::Masked { 2 } else { 1 },
            n_cap: 3,
            base_channels: 4,
            residual_blocks_per_level: 1,
            levels: 2,
            lstm_hidden_channels: 2,
            image_size: 8,
            batch_size: 2,
            total_steps: 6,
            lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    fn blobs(count: usize, size: usize) -> Dataset {
        let images = (0..count)
            .map(|k| {
                Tensor::from_fn(&[1, 3, size, size], |i| {
                    let (c, y, x) = ((i / (size * size)) as f32, (i / size % size) as f32, (i % size) as f32);
                    0.5 + 0.4 * ((x * 0.7 + k as f32) + c).sin() * (y * 0.5 - k as f32).cos()
                })
            })
            .collect();
        Dataset::from_images((0..count).map(|k| format!("img{k}")).collect(), images).unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_params_bitwise() {
        for variant in [Variant::Vanilla, Variant::Masked] {
            let cfg = TrainConfig { lr: 0.0, ..tiny(variant) };
            let mut t = Trainer::new(cfg).unwrap();
            let before = t.codec().clone();
            t.run_until(&blobs(4, 8), 3, |_, _| Ok(())).unwrap();
            for (a, b) in before.params().tensors().iter().zip(t.codec().params().tensors()) {
                let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(a), bits(b));
            }
        }
    }

    #[test]
    fn overfits_one_image() {
        let cfg = TrainConfig {
            image_size: 4,
            n_min: 2,
            n_cap: 2,
            batch_size: 1,
            lr: 3e-3,
            ..tiny(Variant::Vanilla)
        };
        let data = blobs(1, 4);
        let x = data.image(0);
        let mut t = Trainer::new(cfg).unwrap();
        let loss = |t: &Trainer| vanilla_loss(&run_vanilla(t.codec(), &x, 2).unwrap(), &x).unwrap().total;
        let initial = loss(&t);
        t.run_until(&data, 200, |_, _| Ok(())).unwrap();
        let fin = loss(&t);
        assert!(fin < initial, "{fin} !< {initial}");
    }

    #[test]
    fn same_seed_same_trajectory() {
        for variant in [Variant::Vanilla, Variant::Masked] {
            let data = blobs(5, 8);
            let trajectory = || {
                let mut out = Vec::new();
                let mut t = Trainer::new(tiny(variant)).unwrap();
                t.run_until(&data, 6, |_, r| {
                    out.push(r.clone());
                    Ok(())
                })
                .unwrap();
                (out, t.checkpoint())
            };
            assert_eq!(trajectory(), trajectory());
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = blobs(5, 8);
        let cfg = tiny(Variant::Masked);
        let full = run_training(Trainer::new(cfg.clone()).unwrap(), &data, None).unwrap();

        let mut first = Trainer::new(cfg).unwrap();
        first.run_until(&data, 4, |_, _| Ok(())).unwrap();
        let bytes = first.checkpoint().to_bytes();
        let resumed = Trainer::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap(), None).unwrap();
        let resumed = run_training(resumed, &data, None).unwrap();
        assert_eq!(resumed.to_bytes(), full.to_bytes());
    }

    #[test]
    fn zero_steps_returns_initialised_params() {
        let cfg = TrainConfig { total_steps: 0, ..tiny(Variant::Vanilla) };
        let init = ConvCodec::<f32>::new(cfg.codec_config(), cfg.seed).unwrap();
        let ckpt = run_training(Trainer::new(cfg).unwrap(), &blobs(2, 8), None).unwrap();
        assert_eq!(ckpt.global_step, 0);
        assert_eq!(ckpt.codec, init);
    }

    #[test]
    fn writes_log_and_periodic_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { checkpoint_every: 2, total_steps: 5, ..tiny(Variant::Vanilla) };
        run_training(Trainer::new(cfg).unwrap(), &blobs(3, 8), Some(dir.path())).unwrap();
        let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        let lines: Vec<_> = log.lines().collect();
        assert_eq!(lines[0], StepRecord::CSV_HEADER);
        assert_eq!(lines.len(), 6);
        assert!(lines[1].starts_with("0,"));
        for name in ["step_00000002.vle", "step_00000004.vle", "final.vle"] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
    }

    #[test]
    fn image_size_mismatch_is_rejected() {
        let mut t = Trainer::new(tiny(Variant::Vanilla)).unwrap();
        assert!(matches!(t.step(&blobs(2, 16)), Err(VleError::Shape { .. })));
    }

    #[test]
    fn non_finite_loss_aborts_with_step() {
        let mut t = Trainer::new(tiny(Variant::Vanilla)).unwrap();
        t.codec.params_mut().tensors_mut()[0].data_mut()[0] = f32::NAN;
        let err = t.step(&blobs(2, 8)).unwrap_err();
        let VleError::NonFinite(msg) = err else { panic!("{err}") };
        assert!(msg.starts_with("step 0:") && msg.contains("n=1 rec="), "{msg}");
    }
}
