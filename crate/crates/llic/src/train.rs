//! Training harness: rate-distortion loss, Adam, the piecewise-constant
//! learning-rate schedule, the patch-size curriculum and a deterministic
//! training loop with bit-exact checkpoint resume.

use std::path::Path;

use crate::checkpoint::{self, TrainState};
use crate::error::{Error, Result};
use crate::math::Rng;
use crate::metrics::ms_ssim;
use crate::model::{ForwardOutput, Mode, Model, ModelConfig};
use crate::nn::replicate_pad;
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};

/// MSE-family lambda ladder.
pub const MSE_LAMBDAS: [f64; 6] = [0.0018, 0.0035, 0.0067, 0.0130, 0.0250, 0.0483];
/// MS-SSIM-family lambda ladder.
pub const MSSSIM_LAMBDAS: [f64; 6] = [2.4, 4.58, 8.73, 16.64, 31.73, 60.5];

/// Learning-rate plateau values; drops happen at the four milestones.
pub const LR_VALUES: [f64; 5] = [1e-4, 3e-5, 1e-5, 3e-6, 1e-6];
/// Milestone positions as fractions of the total step budget
/// (1.7M / 1.8M / 1.9M / 1.95M out of 2M).
pub const LR_MILESTONE_FRACTIONS: [f64; 4] = [0.85, 0.90, 0.95, 0.975];

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistortionKind {
    Mse,
    MsSsim,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lambda: f64,
    pub distortion: DistortionKind,
    pub total_steps: u64,
    pub batch_size: usize,
    /// Four increasing step indices where the LR drops to the next value.
    pub lr_milestones: [u64; 4],
    /// Patch side before/after the curriculum switch.
    pub patch_small: usize,
    pub patch_large: usize,
    pub patch_switch_step: u64,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults scaled to a step budget: milestones at the canonical
    /// fractions, 256 -> 512 patch switch at 60% of training.
    pub fn with_total_steps(total_steps: u64) -> Self {
        let mut ms = LR_MILESTONE_FRACTIONS
            .map(|f| (f * total_steps as f64).round() as u64);
        // Small step budgets can collapse rounded milestones; keep them
        // strictly increasing (late milestones past the budget are inert).
        for i in 1..ms.len() {
            ms[i] = ms[i].max(ms[i - 1] + 1);
        }
        TrainConfig {
            lambda: MSE_LAMBDAS[5],
            distortion: DistortionKind::Mse,
            total_steps,
            batch_size: 16,
            lr_milestones: ms,
            patch_small: 256,
            patch_large: 512,
            patch_switch_step: (0.6 * total_steps as f64).round() as u64,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Usage(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.lr_milestones.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Usage("lr milestones must strictly increase".into()));
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(Error::Usage("batch size and total steps must be positive".into()));
        }
        // The hyper path needs the latent divisible by 4 on the training
        // tape (only inference may realign), so patches come in 64-pixel
        // granularity.
        for s in [self.patch_small, self.patch_large] {
            if s == 0 || s % 64 != 0 {
                return Err(Error::Usage(format!(
                    "patch sizes must be positive multiples of 64, got {s}"
                )));
            }
        }
        Ok(())
    }
}

/// Piecewise-constant learning rate.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    let mut lr = LR_VALUES[0];
    for (i, &m) in cfg.lr_milestones.iter().enumerate() {
        if step >= m {
            lr = LR_VALUES[i + 1];
        }
    }
    lr
}

/// Patch side for the given step (size curriculum).
pub fn patch_size(step: u64, cfg: &TrainConfig) -> usize {
    if step < cfg.patch_switch_step {
        cfg.patch_small
    } else {
        cfg.patch_large
    }
}

/// Rate-distortion loss: R (bpp over the batch) + lambda * D, where D is
/// 255^2-scaled MSE or (1 - MS-SSIM).
pub fn rd_loss(
    x: &Tensor,
    out: &ForwardOutput,
    lambda: f64,
    kind: DistortionKind,
) -> Result<Tensor> {
    let (n, _, h, w) = x.dims4();
    let pixels = (n * h * w) as f64;
    let rate = out.bits_y.add(&out.bits_z).scale(1.0 / pixels);
    let distortion = match kind {
        DistortionKind::Mse => {
            let diff = x.sub(&out.xhat);
            diff.mul(&diff).mean_all().scale(255.0 * 255.0)
        }
        DistortionKind::MsSsim => ms_ssim(x, &out.xhat)?.neg().add_scalar(1.0),
    };
    Ok(rate.add(&distortion.scale(lambda)))
}

/// Bias-corrected Adam update over every param; gradients are zeroed
/// afterwards. Params that received no gradient this step (loss does not
/// depend on them) update with a zero gradient.
pub fn adam_step(store: &mut ParamStore, state: &mut TrainState, lr: f64) {
    let t = (state.step + 1) as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    for id in store.ids().collect::<Vec<_>>() {
        let has = store.has_grad(id);
        let n = store.value(id).len();
        for i in 0..n {
            let g = if has { store.grad(id)[i] } else { 0.0 };
            let m = &mut state.m[id][i];
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            let v = &mut state.v[id][i];
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let mhat = state.m[id][i] / bc1;
            let vhat = state.v[id][i] / bc2;
            store.value_mut(id)[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    store.zero_grads();
}

/// Uniform random crop; images smaller than the patch are replicate-padded
/// first. Always consumes the same number of RNG draws for a given call.
pub fn sample_patch(image: &Tensor, size: usize, rng: &mut Rng) -> Tensor {
    let (_, _, h, w) = image.dims4();
    let padded = if h < size || w < size {
        replicate_pad(image, h.max(size), w.max(size))
    } else {
        image.clone()
    };
    let (_, _, ph, pw) = padded.dims4();
    let oy = rng.below(ph - size + 1);
    let ox = rng.below(pw - size + 1);
    let data = padded.data();
    let mut out = vec![0.0; 3 * size * size];
    for c in 0..3 {
        for y in 0..size {
            let src = (c * ph + oy + y) * pw + ox;
            let dst = (c * size + y) * size;
            out[dst..dst + size].copy_from_slice(&data[src..src + size]);
        }
    }
    Tensor::from_vec(vec![1, 3, size, size], out)
}

fn stack_batch(patches: &[Tensor]) -> Tensor {
    let (_, c, h, w) = patches[0].dims4();
    let mut data = Vec::with_capacity(patches.len() * c * h * w);
    for p in patches {
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(vec![patches.len(), c, h, w], data)
}

/// One trainer owns the model params exclusively.
pub struct Trainer {
    pub model: Model,
    pub store: ParamStore,
    pub cfg: TrainConfig,
    pub state: TrainState,
    images: Vec<Tensor>,
    /// Per-step loss history (step i at index i).
    pub losses: Vec<f64>,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig, images: Vec<Tensor>) -> Result<Self> {
        cfg.validate()?;
        if images.is_empty() {
            return Err(Error::Usage("training needs at least one image".into()));
        }
        let (model, store) = Model::build(model_cfg, cfg.seed);
        let state = TrainState::fresh(&store, cfg.seed);
        Ok(Trainer {
            model,
            store,
            cfg,
            state,
            images,
            losses: Vec::new(),
        })
    }

    /// Resume from a checkpoint produced by `save`; the config digest must
    /// match the requested architecture.
    pub fn resume(
        model_cfg: ModelConfig,
        cfg: TrainConfig,
        images: Vec<Tensor>,
        ckpt: &Path,
    ) -> Result<Self> {
        cfg.validate()?;
        let raw = checkpoint::read_checkpoint(ckpt)?;
        let stored_cfg = checkpoint::config_of(&raw)?;
        if stored_cfg.digest() != model_cfg.digest() {
            return Err(Error::Format(format!(
                "checkpoint digest {:#018x} does not match requested config {:#018x}",
                stored_cfg.digest(),
                model_cfg.digest()
            )));
        }
        let (model, mut store) = Model::build(model_cfg, cfg.seed);
        checkpoint::load_params(&raw, &mut store)?;
        let state = checkpoint::train_state_of(&raw, &store)?
            .ok_or_else(|| Error::Format("checkpoint carries no training state".into()))?;
        if images.is_empty() {
            return Err(Error::Usage("training needs at least one image".into()));
        }
        Ok(Trainer {
            model,
            store,
            cfg,
            state,
            images,
            losses: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_checkpoint(path, &self.model.config, &self.store, Some(&self.state))
    }

    /// Run one optimization step; returns the loss value.
    pub fn step(&mut self) -> Result<f64> {
        let step = self.state.step;
        let size = patch_size(step, &self.cfg);
        let mut patches = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let idx = self.state.rng.below(self.images.len());
            patches.push(sample_patch(&self.images[idx], size, &mut self.state.rng));
        }
        let batch = stack_batch(&patches);

        let tape = Tape::new();
        let x = tape.attach(&batch);
        let out = self
            .model
            .forward(&self.store, &x, Mode::Train, Some(&mut self.state.rng));
        let loss = rd_loss(&x, &out, self.cfg.lambda, self.cfg.distortion)?;
        let loss_value = loss.item();
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {loss_value} at step {step}"
            )));
        }
        let grads = tape.backward(&loss);
        grads.apply_to(&mut self.store);
        let lr = lr_schedule(step, &self.cfg);
        adam_step(&mut self.store, &mut self.state, lr);
        self.state.step += 1;
        self.losses.push(loss_value);
        Ok(loss_value)
    }

    /// Train until `until_step` (absolute step index).
    pub fn run_until(&mut self, until_step: u64) -> Result<()> {
        while self.state.step < until_step {
            self.step()?;
        }
        Ok(())
    }
}
