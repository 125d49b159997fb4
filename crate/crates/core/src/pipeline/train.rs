//! The three training stages and checkpoint (de)serialization of their models.

use std::time::Instant;

use log::info;

use super::checkpoint::Checkpoint;
use super::data::Sample;
use super::profile::{Profile, StageBudget};
use crate::condvae::{CondVae, CondVaeShape};
use crate::diffusion::{Denoiser, DenoiserShape, LatentPrior, NoiseSchedule};
use crate::error::{Error, Result};
use crate::latentvae::{LatentVae, LatentVaeShape};
use crate::nn::{Bound, Optimizer, ParamStore, RngStream, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Cvae,
    Xvae,
    Ddm,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::Cvae => "cvae",
            Stage::Xvae => "xvae",
            Stage::Ddm => "ddm",
        }
    }

    fn prefix(self) -> String {
        format!("{}.", self.label())
    }

    fn code(self) -> f32 {
        match self {
            Stage::Cvae => 1.0,
            Stage::Xvae => 2.0,
            Stage::Ddm => 3.0,
        }
    }
}

pub const META_STAGE: &str = "meta.stage";
pub const META_CONVERGED: &str = "meta.converged";
pub const META_LOSS: &str = "meta.final_loss";
pub const LATENT_SCALE: &str = "ddm.latent_scale";

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
    pub seconds: f64,
}

impl StageReport {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }
}

pub fn cvae_shape(p: &Profile) -> CondVaeShape {
    CondVaeShape {
        channels: p.cond_channels,
        length: p.cond_len(),
        latent_channels: p.cond_latent.0,
        latent_length: p.cond_latent.1,
        width: p.arch.cvae_width,
    }
}

pub fn xvae_shape(p: &Profile) -> LatentVaeShape {
    LatentVaeShape {
        side: p.block_side(),
        latent_channels: p.latent.0,
        latent_side: p.latent.1,
        cond_numel: p.cond_latent_numel(),
        cond_proj: p.arch.cond_proj,
        width: p.arch.xvae_width,
        prior_hidden: p.arch.prior_hidden,
    }
}

pub fn ddm_shape(p: &Profile) -> DenoiserShape {
    DenoiserShape {
        latent_channels: p.latent.0,
        latent_side: p.latent.1,
        cond_numel: p.cond_latent_numel(),
        cond_proj: p.arch.cond_proj,
        width: p.arch.ddm_width,
        blocks: p.arch.ddm_blocks,
        time_dim: p.arch.time_dim,
    }
}

/// Optimizer with a cosine learning-rate decay to 1% over the stage.
struct Trainer {
    opt: Optimizer,
    base_lr: f64,
    clip: f64,
    total: usize,
    step: usize,
}

impl Trainer {
    fn new(profile: &Profile, budget: StageBudget, steps_per_epoch: usize) -> Self {
        Self {
            opt: Optimizer::new(profile.optimizer, budget.lr, profile.weight_decay),
            base_lr: budget.lr,
            clip: profile.grad_clip,
            total: (budget.epochs * steps_per_epoch).max(1),
            step: 0,
        }
    }

    fn apply(&mut self, store: &mut ParamStore, tape: &Tape<f32>, bound: &Bound, loss: Var) -> Result<f64> {
        let value = tape.value(loss).item()? as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", self.step)));
        }
        let mut grads = tape.backward(loss)?;
        let mut g: Vec<Tensor<f32>> = bound.vars().iter().map(|&v| grads.take(v)).collect();
        clip_global_norm(&mut g, self.clip);
        let frac = self.step as f64 / self.total as f64;
        let lr = self.base_lr * (0.01 + 0.99 * 0.5 * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos()));
        self.opt.set_lr(lr);
        self.opt.step(store.tensors_mut(), &g)?;
        self.step += 1;
        Ok(value)
    }
}

fn clip_global_norm(grads: &mut [Tensor<f32>], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().flat_map(|g| g.data()).map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

fn batches(n: usize, batch: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

fn pick<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

fn batched_shape(b: usize, shape: &[usize]) -> Vec<usize> {
    let mut s = vec![b];
    s.extend_from_slice(shape);
    s
}

fn stage_rng(profile: &Profile, stage: Stage) -> RngStream {
    RngStream::new(profile.seed).fork(100 + stage.code() as u64)
}

fn log_epoch(stage: Stage, epoch: usize, epochs: usize, loss: f64) {
    if epoch == 0 || (epoch + 1) % (epochs / 10).max(1) == 0 {
        info!("{} epoch {}/{}: loss {loss:.6e}", stage.label(), epoch + 1, epochs);
    }
}

fn finish(profile: &Profile, stage: Stage, store: &ParamStore, report: &StageReport) -> Checkpoint {
    let mut ckpt = Checkpoint::new(profile.hash());
    ckpt.extend(store.to_named(&stage.prefix()));
    ckpt.insert(META_STAGE, Tensor::scalar(stage.code()));
    let converged = report.losses.len() == stage_budget(profile, stage).epochs && report.final_loss().is_finite();
    ckpt.insert(META_CONVERGED, Tensor::scalar(if converged { 1.0 } else { 0.0 }));
    ckpt.insert(META_LOSS, Tensor::scalar(report.final_loss() as f32));
    ckpt
}

fn stage_budget(profile: &Profile, stage: Stage) -> StageBudget {
    match stage {
        Stage::Cvae => profile.cvae,
        Stage::Xvae => profile.xvae,
        Stage::Ddm => profile.ddm,
    }
}

/// Checks that `ckpt` belongs to `profile`, holds `stage`, and finished training.
pub fn require_stage(ckpt: &Checkpoint, profile: &Profile, stage: Stage) -> Result<()> {
    ckpt.require_profile(profile.hash())?;
    let code = ckpt.get(META_STAGE).and_then(|t| t.data().first().copied());
    if code != Some(stage.code()) {
        return Err(Error::StageOrder(format!("checkpoint does not hold a trained {} model", stage.label())));
    }
    let done = ckpt.get(META_CONVERGED).and_then(|t| t.data().first().copied());
    if done != Some(1.0) {
        return Err(Error::StageOrder(format!("{} checkpoint is not marked converged", stage.label())));
    }
    Ok(())
}

fn require_samples(samples: &[Sample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Empty("no training samples".into()));
    }
    Ok(())
}

pub fn train_cvae(profile: &Profile, samples: &[Sample]) -> Result<(CondVae, Checkpoint, StageReport)> {
    require_samples(samples)?;
    let start = Instant::now();
    let root = stage_rng(profile, Stage::Cvae);
    let mut model = CondVae::new(cvae_shape(profile), &mut root.fork(0))?;
    let conds: Vec<Tensor<f32>> = samples.iter().map(|s| s.cond.clone()).collect();
    let budget = profile.cvae;
    let mut trainer = Trainer::new(profile, budget, samples.len().div_ceil(budget.batch));
    let latent = model.latent_shape();
    let mut losses = Vec::with_capacity(budget.epochs);
    for epoch in 0..budget.epochs {
        let mut rng = root.fork(1).fork(epoch as u64);
        let mut sum = 0.0;
        for idx in batches(samples.len(), budget.batch, &mut rng) {
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape);
            let c = tape.constant(Tensor::stack(&pick(&conds, &idx))?);
            let eps = tape.constant(rng.normal_tensor(&batched_shape(idx.len(), &[latent[0], 1, latent[1]])));
            let (loss, _, _) = model.loss(&mut tape, &p, c, eps, profile.beta_kl)?;
            sum += trainer.apply(&mut model.store, &tape, &p, loss)? * idx.len() as f64;
        }
        losses.push(sum / samples.len() as f64);
        log_epoch(Stage::Cvae, epoch, budget.epochs, losses[epoch]);
    }
    let report = StageReport { stage: Stage::Cvae, losses, seconds: start.elapsed().as_secs_f64() };
    let ckpt = finish(profile, Stage::Cvae, &model.store, &report);
    Ok((model, ckpt, report))
}

pub fn load_cvae(profile: &Profile, ckpt: &Checkpoint) -> Result<CondVae> {
    require_stage(ckpt, profile, Stage::Cvae)?;
    let mut model = CondVae::new(cvae_shape(profile), &mut RngStream::new(0))?;
    model.store.load_named(&Stage::Cvae.prefix(), &ckpt.tensors)?;
    Ok(model)
}

pub fn embed_conditions(cvae: &CondVae, samples: &[Sample]) -> Result<Vec<Tensor<f32>>> {
    let conds: Vec<Tensor<f32>> = samples.iter().map(|s| s.cond.clone()).collect();
    let mut out = Vec::with_capacity(conds.len());
    for chunk in conds.chunks(64) {
        out.extend(cvae.embed(chunk)?);
    }
    Ok(out)
}

/// Requires a converged condition-VAE checkpoint.
pub fn train_xvae(profile: &Profile, samples: &[Sample], cvae_ckpt: &Checkpoint) -> Result<(LatentVae, Checkpoint, StageReport)> {
    let cvae = load_cvae(profile, cvae_ckpt)?;
    require_samples(samples)?;
    let start = Instant::now();
    let c0 = embed_conditions(&cvae, samples)?;
    let blocks: Vec<Tensor<f32>> = samples.iter().map(|s| s.blocks.clone()).collect();
    let root = stage_rng(profile, Stage::Xvae);
    let mut model = LatentVae::new(xvae_shape(profile), &mut root.fork(0))?;
    let budget = profile.xvae;
    let mut trainer = Trainer::new(profile, budget, samples.len().div_ceil(budget.batch));
    let latent = model.latent_shape();
    let mut losses = Vec::with_capacity(budget.epochs);
    for epoch in 0..budget.epochs {
        let mut rng = root.fork(1).fork(epoch as u64);
        let mut sum = 0.0;
        for idx in batches(samples.len(), budget.batch, &mut rng) {
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape);
            let x = tape.constant(Tensor::stack(&pick(&blocks, &idx))?);
            let c = tape.constant(Tensor::stack(&pick(&c0, &idx))?);
            let eps = tape.constant(rng.normal_tensor(&batched_shape(idx.len(), &latent)));
            let (loss, _, _) = model.loss(&mut tape, &p, x, c, eps, profile.beta_kl)?;
            sum += trainer.apply(&mut model.store, &tape, &p, loss)? * idx.len() as f64;
        }
        losses.push(sum / samples.len() as f64);
        log_epoch(Stage::Xvae, epoch, budget.epochs, losses[epoch]);
    }
    let report = StageReport { stage: Stage::Xvae, losses, seconds: start.elapsed().as_secs_f64() };
    let ckpt = finish(profile, Stage::Xvae, &model.store, &report);
    Ok((model, ckpt, report))
}

pub fn load_xvae(profile: &Profile, ckpt: &Checkpoint) -> Result<LatentVae> {
    require_stage(ckpt, profile, Stage::Xvae)?;
    let mut model = LatentVae::new(xvae_shape(profile), &mut RngStream::new(0))?;
    model.store.load_named(&Stage::Xvae.prefix(), &ckpt.tensors)?;
    Ok(model)
}

/// `1 / rms` of the posterior means, so diffusion sees unit-scale latents.
fn latent_scale(means: &[Tensor<f32>]) -> f32 {
    let (mut s, mut n) = (0.0f64, 0usize);
    for m in means {
        s += m.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
        n += m.numel();
    }
    let rms = (s / n.max(1) as f64).sqrt();
    if rms > 0.0 && rms.is_finite() {
        (1.0 / rms) as f32
    } else {
        1.0
    }
}

/// Requires converged condition-VAE and latent-VAE checkpoints.
pub fn train_ddm(
    profile: &Profile,
    samples: &[Sample],
    cvae_ckpt: &Checkpoint,
    xvae_ckpt: &Checkpoint,
) -> Result<(Denoiser, Checkpoint, StageReport)> {
    let cvae = load_cvae(profile, cvae_ckpt)?;
    let xvae = load_xvae(profile, xvae_ckpt)?;
    require_samples(samples)?;
    let start = Instant::now();
    let sched = profile.schedule()?;
    let c0 = embed_conditions(&cvae, samples)?;
    let blocks: Vec<Tensor<f32>> = samples.iter().map(|s| s.blocks.clone()).collect();
    let mut post = Vec::with_capacity(samples.len());
    for (x, c) in blocks.chunks(32).zip(c0.chunks(32)) {
        post.extend(xvae.encode_input(x, c)?);
    }
    let means: Vec<Tensor<f32>> = post.iter().map(|p| p.0.clone()).collect();
    let scale = latent_scale(&means);
    let root = stage_rng(profile, Stage::Ddm);
    let mut model = Denoiser::new(ddm_shape(profile), &mut root.fork(0))?;
    let budget = profile.ddm;
    let mut trainer = Trainer::new(profile, budget, samples.len().div_ceil(budget.batch));
    let latent = xvae.latent_shape();
    let mut losses = Vec::with_capacity(budget.epochs);
    for epoch in 0..budget.epochs {
        let mut rng = root.fork(1).fork(epoch as u64);
        let mut sum = 0.0;
        for idx in batches(samples.len(), budget.batch, &mut rng) {
            let shape = batched_shape(idx.len(), &latent);
            let xi: Tensor<f32> = rng.normal_tensor(&shape);
            let mut z0 = Vec::with_capacity(xi.numel());
            for (k, &i) in idx.iter().enumerate() {
                let (mu, lv) = &post[i];
                for j in 0..mu.numel() {
                    let v = mu.data()[j] + (0.5 * lv.data()[j]).exp() * xi.data()[k * mu.numel() + j];
                    z0.push(v * scale);
                }
            }
            let z0 = Tensor::new(shape.clone(), z0)?;
            let steps: Vec<usize> = idx.iter().map(|_| 1 + rng.below(sched.steps())).collect();
            let eps: Tensor<f32> = rng.normal_tensor(&shape);
            let c = Tensor::stack(&pick(&c0, &idx))?;
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape);
            let loss = model.loss(&mut tape, &p, &z0, &c, &steps, &eps, &sched)?;
            sum += trainer.apply(&mut model.store, &tape, &p, loss)? * idx.len() as f64;
        }
        losses.push(sum / samples.len() as f64);
        log_epoch(Stage::Ddm, epoch, budget.epochs, losses[epoch]);
    }
    let report = StageReport { stage: Stage::Ddm, losses, seconds: start.elapsed().as_secs_f64() };
    let mut ckpt = finish(profile, Stage::Ddm, &model.store, &report);
    ckpt.insert(LATENT_SCALE, Tensor::scalar(scale));
    Ok((model, ckpt, report))
}

/// All three trained models plus the diffusion latent scale.
#[derive(Clone, Debug)]
pub struct Models {
    pub cvae: CondVae,
    pub xvae: LatentVae,
    pub ddm: Denoiser,
    pub latent_scale: f32,
    pub schedule: NoiseSchedule,
}

impl Models {
    pub fn load(profile: &Profile, cvae: &Checkpoint, xvae: &Checkpoint, ddm: &Checkpoint) -> Result<Self> {
        let cvae_model = load_cvae(profile, cvae)?;
        let xvae_model = load_xvae(profile, xvae)?;
        require_stage(ddm, profile, Stage::Ddm)?;
        let mut den = Denoiser::new(ddm_shape(profile), &mut RngStream::new(0))?;
        den.store.load_named(&Stage::Ddm.prefix(), &ddm.tensors)?;
        let scale = ddm
            .get(LATENT_SCALE)
            .and_then(|t| t.data().first().copied())
            .filter(|s| s.is_finite() && *s > 0.0)
            .ok_or_else(|| Error::Format(format!("missing or invalid {LATENT_SCALE}")))?;
        Ok(Self { cvae: cvae_model, xvae: xvae_model, ddm: den, latent_scale: scale, schedule: profile.schedule()? })
    }

    /// Conditional prior expressed in the scaled diffusion space.
    pub fn scaled_prior(&self) -> ScaledPrior<'_> {
        ScaledPrior { vae: &self.xvae, scale: self.latent_scale }
    }
}

pub struct ScaledPrior<'a> {
    vae: &'a LatentVae,
    scale: f32,
}

impl LatentPrior<f32> for ScaledPrior<'_> {
    fn params(&self, cond: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let (mu, lv) = self.vae.params(cond)?;
        let shift = 2.0 * self.scale.ln();
        Ok((mu.map(|v| v * self.scale), lv.map(|v| v + shift)))
    }
}
