//! Training: mixed-code batch sampling over an AWGN channel, Adam with a
//! cosine learning-rate schedule, per-epoch checkpoints, and fine-tuning with
//! configurable parameter freezing.
//!
//! Batches draw one channel quality (Eb/N0) per batch and a uniformly random
//! code per sample. Samples transmit the all-zero codeword; the regression
//! target is the binary multiplicative noise, which `channel` proves is
//! codeword-invariant under the preprocessing map. Every batch derives its
//! RNG from (seed, epoch, batch), so runs are reproducible bit-exactly and
//! batch generation could be parallelized without changing results.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::channel::{bpsk, hard_bits, multiplicative_view, preprocess, sigma_from_ebn0,
    standardize, transmit, LlrVector, StandardizedInput};
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::gf2::CodeRegistry;
use crate::model::{CodeAttention, CodeGroup, ForwardOptions, ModelConfig, UecctModel};
use crate::tensor::{Tape, Tensor};

/// Adam first-moment decay.
pub const ADAM_BETA1: f64 = 0.9;
/// Adam second-moment decay.
pub const ADAM_BETA2: f64 = 0.999;
/// Adam denominator guard.
pub const ADAM_EPS: f64 = 1e-8;
/// Global gradient-norm ceiling applied before every optimizer step.
pub const GRAD_CLIP_NORM: f64 = 1.0;

/// Optimization schedule and sampling plan for one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    /// Inclusive Eb/N0 range in dB; one draw per batch.
    pub snr_range_db: (f64, f64),
    pub seed: u64,
    /// Codes sampled during training; all must be registered.
    pub code_names: Vec<String>,
}

impl TrainConfig {
    /// Desk-scale defaults: 50 epochs x 50 batches x 128 samples.
    pub fn toy(seed: u64, code_names: Vec<String>) -> TrainConfig {
        TrainConfig {
            epochs: 50,
            batches_per_epoch: 50,
            batch_size: 128,
            lr_init: 1e-3,
            lr_final: 1e-6,
            snr_range_db: (3.0, 7.0),
            seed,
            code_names,
        }
    }

    /// Full-scale schedule: 1000 epochs x 1000 batches x 512 samples.
    pub fn full_scale(seed: u64, code_names: Vec<String>) -> TrainConfig {
        TrainConfig {
            epochs: 1000,
            batches_per_epoch: 1000,
            batch_size: 512,
            ..TrainConfig::toy(seed, code_names)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batches_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::config(
                "epochs, batches_per_epoch, and batch_size must all be positive",
            ));
        }
        if !(self.lr_init > self.lr_final && self.lr_final > 0.0) {
            return Err(Error::config(format!(
                "learning rates must satisfy lr_init > lr_final > 0 (got {} and {})",
                self.lr_init, self.lr_final
            )));
        }
        if !(self.snr_range_db.0 <= self.snr_range_db.1) {
            return Err(Error::config(format!(
                "snr range [{}, {}] dB is empty",
                self.snr_range_db.0, self.snr_range_db.1
            )));
        }
        if self.code_names.is_empty() {
            return Err(Error::config("no codes selected for training"));
        }
        Ok(())
    }
}

/// One training example: features, flip-indicator target, and the raw
/// received vector (kept for metrics that need the channel output).
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub code_index: usize,
    pub features: StandardizedInput,
    /// Binary multiplicative noise, length n: 1 where the channel flipped the sign.
    pub target: Vec<u8>,
    pub y: LlrVector,
}

/// RNG for global decisions (model init) under a run seed.
pub fn seed_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// RNG for one batch, derived from (seed, epoch, batch) so any batch can be
/// regenerated independently of the others.
pub fn batch_rng(seed: u64, epoch: usize, batch: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(epoch as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(batch as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Draw one batch: a single Eb/N0 for the whole batch, a uniformly random
/// code per sample, all-zero codeword transmission, flip-indicator targets.
pub fn sample_batch<R: Rng>(
    registry: &CodeRegistry,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<TrainSample>> {
    if registry.is_empty() {
        return Err(Error::config("cannot sample from an empty registry"));
    }
    let indices: Vec<usize> = config
        .code_names
        .iter()
        .map(|name| {
            registry
                .index_of(name)
                .ok_or_else(|| Error::config(format!("code '{name}' is not registered")))
        })
        .collect::<Result<_>>()?;
    let (lo, hi) = config.snr_range_db;
    let ebn0_db = rng.random_range(lo..=hi);
    let mut batch = Vec::with_capacity(config.batch_size);
    for _ in 0..config.batch_size {
        let code_index = indices[rng.random_range(0..indices.len())];
        let code = &registry.codes()[code_index];
        let sigma = sigma_from_ebn0(ebn0_db, code.rate())?;
        let x_s = bpsk(&vec![0u8; code.n]);
        let y = transmit(code, &x_s, sigma, rng)?;
        let target = hard_bits(&multiplicative_view(&y, &x_s));
        let pre = preprocess(code, &y)?;
        let features = standardize(registry, code, &pre)?;
        batch.push(TrainSample {
            code_index,
            features,
            target,
            y,
        });
    }
    Ok(batch)
}

/// Pack samples into per-code groups with padded target and supervision masks.
pub fn group_samples(registry: &CodeRegistry, samples: &[TrainSample]) -> Vec<CodeGroup> {
    let input_len = registry.input_len();
    let n_max = registry.n_max();
    let mut by_code: std::collections::BTreeMap<usize, Vec<&TrainSample>> = Default::default();
    for s in samples {
        by_code.entry(s.code_index).or_default().push(s);
    }
    by_code
        .into_iter()
        .map(|(code_index, group)| {
            let b = group.len();
            let mut features = Vec::with_capacity(b * input_len);
            let mut targets = vec![0.0; b * n_max];
            let mut active = vec![0.0; b * n_max];
            for (row, s) in group.iter().enumerate() {
                features.extend_from_slice(&s.features.features);
                for (i, &t) in s.target.iter().enumerate() {
                    targets[row * n_max + i] = t as f64;
                    active[row * n_max + i] = 1.0;
                }
            }
            CodeGroup {
                code_index,
                features: Tensor::from_vec(&[b, input_len], features),
                targets: Tensor::from_vec(&[b, n_max], targets),
                active: Tensor::from_vec(&[b, n_max], active),
            }
        })
        .collect()
}

/// Cosine decay without warmup: lr(0) = lr_init, lr(total) = lr_final.
pub fn cosine_lr(step: usize, total: usize, lr_init: f64, lr_final: f64) -> f64 {
    assert!(step <= total, "schedule step {step} past total {total}");
    assert!(total > 0, "schedule needs at least one step");
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    lr_final + 0.5 * (lr_init - lr_final) * (1.0 + phase.cos())
}

/// Adam moment accumulators over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> AdamState {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update in place; refuses non-finite gradients.
pub fn adam_step(
    params: &mut Tensor,
    grad: &Tensor,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.numel() != grad.numel() || params.numel() != state.m.len() {
        return Err(Error::config(format!(
            "optimizer size mismatch: {} params, {} grads, state {}",
            params.numel(),
            grad.numel(),
            state.m.len()
        )));
    }
    if !grad.is_finite() {
        return Err(Error::numerical(
            "gradient contains a non-finite value; optimizer step aborted",
        ));
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    let p = params.data_mut();
    let g = grad.data();
    for i in 0..p.len() {
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g[i];
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Scale the gradient down to the ceiling when its L2 norm exceeds it;
/// returns the pre-clip norm.
pub fn clip_global_norm(grad: &mut Tensor, max_norm: f64) -> f64 {
    let norm = grad.data().iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grad.data_mut() {
            *g *= scale;
        }
    }
    norm
}

/// Abort rule: an epoch's mean loss above 10x the first batch loss, three
/// epochs in a row.
#[derive(Debug, Default)]
pub struct DivergenceDetector {
    initial: Option<f64>,
    consecutive: usize,
}

impl DivergenceDetector {
    pub const FACTOR: f64 = 10.0;
    pub const PATIENCE: usize = 3;

    /// Record the reference loss (first observed batch).
    pub fn record_initial(&mut self, loss: f64) {
        self.initial.get_or_insert(loss);
    }

    /// Feed one epoch's mean loss; true means the run should abort.
    pub fn observe_epoch(&mut self, mean_loss: f64) -> bool {
        let Some(initial) = self.initial else {
            return false;
        };
        if mean_loss > Self::FACTOR * initial {
            self.consecutive += 1;
        } else {
            self.consecutive = 0;
        }
        self.consecutive >= Self::PATIENCE
    }
}

/// Which parameters stay fixed during fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreezePolicy {
    /// Everything trains.
    None,
    /// Attention memories and projections stay fixed.
    Attention,
    /// Only the output head trains.
    AllButHead,
}

impl FreezePolicy {
    pub fn name(&self) -> &'static str {
        match self {
            FreezePolicy::None => "none",
            FreezePolicy::Attention => "attention",
            FreezePolicy::AllButHead => "all-but-head",
        }
    }

    pub fn from_name(name: &str) -> Result<FreezePolicy> {
        match name {
            "none" => Ok(FreezePolicy::None),
            "attention" => Ok(FreezePolicy::Attention),
            "all-but-head" => Ok(FreezePolicy::AllButHead),
            other => Err(Error::config(format!(
                "unknown freeze policy '{other}' (expected none | attention | all-but-head)"
            ))),
        }
    }

    fn frozen(&self, param_name: &str) -> bool {
        match self {
            FreezePolicy::None => false,
            FreezePolicy::Attention => [".A_l", ".V_l", ".Wq", ".Wk", ".Wv"]
                .iter()
                .any(|s| param_name.ends_with(s)),
            FreezePolicy::AllButHead => !param_name.starts_with("head."),
        }
    }

    /// Per-coordinate freeze mask over the flat parameter vector, or None
    /// when nothing is frozen.
    fn mask(&self, model: &UecctModel) -> Option<Vec<bool>> {
        if *self == FreezePolicy::None {
            return None;
        }
        let mut mask = Vec::with_capacity(model.param_count());
        for (name, tensor) in model.params() {
            mask.extend(std::iter::repeat_n(self.frozen(name), tensor.numel()));
        }
        Some(mask)
    }
}

/// One loss-curve row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// A finished (or aborted) training run.
#[derive(Debug)]
pub struct TrainRun {
    pub model: UecctModel,
    pub records: Vec<LossRecord>,
    pub epoch_mean_loss: Vec<f64>,
    /// Mean per-sample loss over the last completed epoch.
    pub final_epoch_loss: f64,
    /// Matching all-0.5 predictor loss: mean active bits per sample times ln 2,
    /// measured over the last completed epoch.
    pub final_epoch_baseline: f64,
    /// `epoch,batch,loss,lr` rows, also written to `loss.csv` under out_dir.
    pub loss_csv: String,
    /// Per-epoch checkpoint paths, in epoch order (empty without out_dir).
    pub checkpoints: Vec<PathBuf>,
}

/// Train a freshly initialized model.
pub fn train(
    registry: &CodeRegistry,
    model_config: ModelConfig,
    config: &TrainConfig,
    masked: bool,
    out_dir: Option<&Path>,
) -> Result<TrainRun> {
    model_config.validate()?;
    let model = UecctModel::init(model_config, &mut seed_rng(config.seed))?;
    run_training(model, registry, config, masked, None, out_dir)
}

/// Continue training a checkpoint, optionally on additional codes. The new
/// registry is padded to the checkpoint's geometry; codes larger than the
/// checkpoint allows are rejected.
pub fn fine_tune(
    ckpt: Checkpoint,
    registry: &CodeRegistry,
    config: &TrainConfig,
    freeze: FreezePolicy,
    masked: bool,
    out_dir: Option<&Path>,
) -> Result<TrainRun> {
    let model = ckpt.into_model()?;
    let mut padded = registry.clone();
    padded.pad_to(model.config().n_max, model.config().s_max);
    let frozen = freeze.mask(&model);
    run_training(model, &padded, config, masked, frozen, out_dir)
}

fn run_training(
    mut model: UecctModel,
    registry: &CodeRegistry,
    config: &TrainConfig,
    masked: bool,
    frozen: Option<Vec<bool>>,
    out_dir: Option<&Path>,
) -> Result<TrainRun> {
    config.validate()?;
    let mc = *model.config();
    if registry.n_max() != mc.n_max || registry.s_max() != mc.s_max {
        return Err(Error::config(format!(
            "registry padding geometry ({}, {}) does not match the model ({}, {})",
            registry.n_max(),
            registry.s_max(),
            mc.n_max,
            mc.s_max
        )));
    }
    for name in &config.code_names {
        if registry.index_of(name).is_none() {
            return Err(Error::config(format!("code '{name}' is not registered")));
        }
    }
    let attns = CodeAttention::for_registry(registry, &mc)?;
    let opts = ForwardOptions {
        masked,
        sparse: true,
        dump_attention: false,
    };
    let registry_names: Vec<String> = registry.codes().iter().map(|c| c.name.clone()).collect();

    let mut flat = model.flatten_params();
    let mut adam = AdamState::new(flat.numel());
    let total_sched = (config.epochs * config.batches_per_epoch - 1).max(1);
    let mut detector = DivergenceDetector::default();
    let mut records = Vec::new();
    let mut epoch_mean_loss = Vec::new();
    let mut loss_csv = String::from("epoch,batch,loss,lr\n");
    let mut checkpoints = Vec::new();
    let mut final_epoch_loss = f64::NAN;
    let mut final_epoch_baseline = f64::NAN;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        let mut active_bits = 0usize;
        let mut samples_seen = 0usize;
        for batch in 0..config.batches_per_epoch {
            let mut rng = batch_rng(config.seed, epoch, batch);
            let samples = sample_batch(registry, config, &mut rng)?;
            active_bits += samples.iter().map(|s| s.target.len()).sum::<usize>();
            let groups = group_samples(registry, &samples);

            let tape = Tape::new();
            let bound = model.bind(&tape);
            let (total, n_samples) = model.batch_loss(&tape, &bound, &groups, &attns, &opts)?;
            let loss = total.scale(1.0 / n_samples as f64);
            tape.backward(loss)?;

            let mut grad = flatten_tensors(&bound.grads()?);
            if let Some(mask) = &frozen {
                for (g, &hold) in grad.data_mut().iter_mut().zip(mask) {
                    if hold {
                        *g = 0.0;
                    }
                }
            }
            clip_global_norm(&mut grad, GRAD_CLIP_NORM);
            let step = epoch * config.batches_per_epoch + batch;
            let lr = cosine_lr(step, total_sched, config.lr_init, config.lr_final);
            adam_step(&mut flat, &grad, &mut adam, lr)?;
            model.set_from_flat(&flat)?;

            let loss_val = loss.value().item();
            detector.record_initial(loss_val);
            loss_csv.push_str(&format!("{epoch},{batch},{loss_val},{lr}\n"));
            records.push(LossRecord {
                epoch,
                batch,
                loss: loss_val,
                lr,
            });
            loss_sum += loss_val;
            samples_seen += n_samples;
        }

        let mean = loss_sum / config.batches_per_epoch as f64;
        epoch_mean_loss.push(mean);
        final_epoch_loss = mean;
        final_epoch_baseline =
            active_bits as f64 / samples_seen as f64 * std::f64::consts::LN_2;

        if let Some(dir) = out_dir {
            let path = dir.join(format!("epoch_{epoch:04}.ckpt"));
            save_checkpoint(&path, &model, &registry_names)?;
            checkpoints.push(path);
            std::fs::write(dir.join("loss.csv"), &loss_csv)?;
        }

        if detector.observe_epoch(mean) {
            return Err(Error::numerical(format!(
                "training diverged: mean loss {mean:.6} stayed above {}x the initial loss \
                 for {} consecutive epochs (aborted after epoch {epoch})",
                DivergenceDetector::FACTOR,
                DivergenceDetector::PATIENCE,
            )));
        }
    }

    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("model.ckpt"), &model, &registry_names)?;
    }

    Ok(TrainRun {
        model,
        records,
        epoch_mean_loss,
        final_epoch_loss,
        final_epoch_baseline,
        loss_csv,
        checkpoints,
    })
}

fn flatten_tensors(tensors: &[Tensor]) -> Tensor {
    let total: usize = tensors.iter().map(Tensor::numel).sum();
    let mut data = Vec::with_capacity(total);
    for t in tensors {
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(&[total], data)
}
