//! Residual convolutional noise predictor on the latent grid.

use super::{NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{timestep_embedding, Bound, Conv, Linear, ParamStore, ResBlock, RngStream, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserShape {
    pub latent_channels: usize,
    pub latent_side: usize,
    pub cond_numel: usize,
    pub cond_proj: usize,
    pub width: usize,
    pub blocks: usize,
    pub time_dim: usize,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub shape: DenoiserShape,
    pub store: ParamStore,
    cond: Linear,
    time0: Linear,
    time1: Linear,
    conv_in: Conv,
    blocks: Vec<ResBlock>,
    conv_out: Conv,
}

impl Denoiser {
    pub fn new(shape: DenoiserShape, rng: &mut RngStream) -> Result<Self> {
        if shape.latent_channels == 0 || shape.latent_side == 0 || shape.width == 0 || shape.time_dim < 2 {
            return Err(Error::shape("denoiser", format!("{shape:?}")));
        }
        let w = shape.width;
        let mut store = ParamStore::new();
        let s = &mut store;
        let plane = shape.latent_side * shape.latent_side;
        let cond = Linear::new(s, "cond", shape.cond_numel, shape.cond_proj * plane, rng);
        let time0 = Linear::new(s, "time0", shape.time_dim, w, rng);
        let time1 = Linear::new(s, "time1", w, w, rng);
        let conv_in = Conv::same(s, "in", shape.latent_channels + shape.cond_proj, w, 3, rng);
        let blocks = (0..shape.blocks).map(|i| ResBlock::new(s, &format!("res{i}"), w, (3, 3), rng)).collect();
        let conv_out = Conv::same(s, "out", w, shape.latent_channels, 3, rng);
        Ok(Self { shape, store, cond, time0, time1, conv_in, blocks, conv_out })
    }

    /// `z: [B, Cz, H, W]`, `c0: [B, ...]`, one step per batch row.
    pub fn forward(&self, tape: &mut Tape<f32>, p: &Bound, z: Var, c0: Var, steps: &[usize]) -> Result<Var> {
        let zs = tape.shape(z).to_vec();
        let sh = self.shape;
        if zs.len() != 4 || zs[1] != sh.latent_channels || zs[2] != sh.latent_side || zs[3] != sh.latent_side {
            return Err(Error::shape("denoiser", format!("latent {zs:?}")));
        }
        let b = zs[0];
        let cs = tape.shape(c0).to_vec();
        if cs[0] != b || cs[1..].iter().product::<usize>() != sh.cond_numel || steps.len() != b {
            return Err(Error::shape("denoiser", format!("condition {cs:?}, {} steps for batch {b}", steps.len())));
        }
        let flat = tape.reshape(c0, &[b, sh.cond_numel])?;
        let proj = self.cond.forward(tape, p, flat)?;
        let plane = tape.reshape(proj, &[b, sh.cond_proj, sh.latent_side, sh.latent_side])?;
        let emb = tape.constant(timestep_embedding(steps, sh.time_dim));
        let temb = self.time0.forward(tape, p, emb)?;
        let temb = tape.silu(temb);
        let temb = self.time1.forward(tape, p, temb)?;
        let tplane = tape.broadcast2d(temb, sh.latent_side, sh.latent_side)?;
        let h = tape.concat(&[z, plane], 1)?;
        let mut h = self.conv_in.forward(tape, p, h)?;
        for block in &self.blocks {
            h = tape.add(h, tplane)?;
            h = block.forward(tape, p, h)?;
        }
        let h = tape.silu(h);
        self.conv_out.forward(tape, p, h)
    }

    /// Mean absolute error between `eps` and the prediction at `z_t = sqrt(abar) z0 + sqrt(1 - abar) eps`.
    pub fn loss(
        &self,
        tape: &mut Tape<f32>,
        p: &Bound,
        z0: &Tensor<f32>,
        c0: &Tensor<f32>,
        steps: &[usize],
        eps: &Tensor<f32>,
        sched: &NoiseSchedule,
    ) -> Result<Var> {
        if z0.shape() != eps.shape() || z0.shape()[0] != steps.len() {
            return Err(Error::shape("ddm loss", format!("{:?} / {:?}", z0.shape(), eps.shape())));
        }
        let per = z0.numel() / steps.len();
        let mut zt = Vec::with_capacity(z0.numel());
        for (i, &t) in steps.iter().enumerate() {
            if t == 0 || t > sched.steps() {
                return Err(Error::InvalidParam(format!("step {t}")));
            }
            let (s, n) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
            for k in i * per..(i + 1) * per {
                zt.push((s * z0.data()[k] as f64 + n * eps.data()[k] as f64) as f32);
            }
        }
        let zt = tape.constant(Tensor::new(z0.shape().to_vec(), zt)?);
        let cv = tape.constant(c0.clone());
        let pred = self.forward(tape, p, zt, cv, steps)?;
        let e = tape.constant(eps.clone());
        let d = tape.sub(pred, e)?;
        let a = tape.abs(d);
        Ok(tape.mean(a))
    }
}

/// Single latent `[Cz, H, W]` with condition `[...]`, or a batch `[B, Cz, H, W]`
/// with conditions `[B, ...]`.
impl NoisePredictor<f32> for Denoiser {
    fn predict(&self, z: &Tensor<f32>, cond: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
        let single = z.shape().len() == 3;
        let (zb, cb) = if single {
            let mut zs = vec![1];
            zs.extend_from_slice(z.shape());
            let mut cs = vec![1];
            cs.extend_from_slice(cond.shape());
            (z.clone().reshape(zs)?, cond.clone().reshape(cs)?)
        } else {
            (z.clone(), cond.clone())
        };
        let b = zb.shape()[0];
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let zv = tape.constant(zb);
        let cv = tape.constant(cb);
        let out = self.forward(&mut tape, &p, zv, cv, &vec![t; b])?;
        let out = tape.value(out).clone();
        if single {
            out.reshape(z.shape().to_vec())
        } else {
            Ok(out)
        }
    }
}
