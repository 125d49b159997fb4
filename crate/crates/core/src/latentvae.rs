//! VAE over the four Laplacian quadrants with a condition-dependent Gaussian prior.

use crate::condvae::VaeLoss;
use crate::diffusion::LatentPrior;
use crate::error::{Error, Result};
use crate::graphrep::{block_merge, block_split};
use crate::nn::{Bound, Conv, Linear, ParamStore, ResBlock, RngStream, Tape, Tensor, Var};

pub const PRIOR_LOGVAR_MIN: f64 = -10.0;
pub const PRIOR_LOGVAR_MAX: f64 = 10.0;

/// KL between diagonal Gaussians `q = N(mu_q, var_q)` and `p = N(mu_p, var_p)`, summed.
pub fn kl_diagonal(mu_q: &[f64], var_q: &[f64], mu_p: &[f64], var_p: &[f64]) -> f64 {
    (0..mu_q.len())
        .map(|i| {
            let d = mu_q[i] - mu_p[i];
            0.5 * (var_p[i] / var_q[i]).ln() + (var_q[i] + d * d) / (2.0 * var_p[i]) - 0.5
        })
        .sum()
}

/// `[4, n/2, n/2]` quadrant tensor of an `n x n` matrix.
pub fn to_blocks(matrix: &[f64], n: usize) -> Result<Tensor<f32>> {
    let b = block_split(matrix, n)?;
    Tensor::new([4, n / 2, n / 2], b.into_iter().map(|v| v as f32).collect())
}

pub fn from_blocks(blocks: &Tensor<f32>) -> Result<Vec<f64>> {
    let s = blocks.shape();
    if s.len() != 3 || s[0] != 4 || s[1] != s[2] {
        return Err(Error::shape("from_blocks", format!("{s:?}")));
    }
    let data: Vec<f64> = blocks.data().iter().map(|&v| v as f64).collect();
    block_merge(&data, 2 * s[1])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentVaeShape {
    /// Quadrant side, `n_max / 2`.
    pub side: usize,
    pub latent_channels: usize,
    pub latent_side: usize,
    /// Flattened condition embedding size.
    pub cond_numel: usize,
    pub cond_proj: usize,
    pub width: usize,
    pub prior_hidden: usize,
}

impl LatentVaeShape {
    fn stages(&self) -> Result<usize> {
        let ratio = self.side / self.latent_side.max(1);
        if self.latent_side == 0 || self.side % self.latent_side != 0 || !ratio.is_power_of_two() {
            return Err(Error::shape("latentvae", format!("side {} vs latent {}", self.side, self.latent_side)));
        }
        Ok(ratio.trailing_zeros() as usize)
    }

    pub fn latent_numel(&self) -> usize {
        self.latent_channels * self.latent_side * self.latent_side
    }
}

#[derive(Clone, Debug)]
pub struct LatentVae {
    pub shape: LatentVaeShape,
    pub store: ParamStore,
    cond_proj: Linear,
    enc_in: Conv,
    enc_down: Vec<Conv>,
    enc_res: ResBlock,
    enc_head: Conv,
    dec_in: Conv,
    dec_res: Vec<ResBlock>,
    dec_up: Vec<Conv>,
    dec_out: Conv,
    dec_skip: Linear,
    prior_fc: Vec<Linear>,
    prior_out: Linear,
}

impl LatentVae {
    pub fn new(shape: LatentVaeShape, rng: &mut RngStream) -> Result<Self> {
        let stages = shape.stages()?;
        if shape.cond_numel == 0 || shape.cond_proj == 0 || shape.width == 0 || shape.prior_hidden == 0 {
            return Err(Error::shape("latentvae", format!("{shape:?}")));
        }
        let w = shape.width;
        let mut store = ParamStore::new();
        let s = &mut store;
        let cond_proj = Linear::new(s, "enc.cond", shape.cond_numel, shape.cond_proj, rng);
        let enc_in = Conv::same(s, "enc.in", 4 + shape.cond_proj, w, 3, rng);
        let mut enc_down = Vec::new();
        let mut c = w;
        for i in 0..stages {
            enc_down.push(Conv::down(s, &format!("enc.down{i}"), c, 2 * w, 3, rng));
            c = 2 * w;
        }
        let enc_res = ResBlock::new(s, "enc.res", c, (3, 3), rng);
        let enc_head = Conv::same(s, "enc.head", c, 2 * shape.latent_channels, 3, rng);
        let dec_in = Conv::same(s, "dec.in", shape.latent_channels, c, 3, rng);
        let dec_res = (0..2).map(|i| ResBlock::new(s, &format!("dec.res{i}"), c, (3, 3), rng)).collect();
        let mut dec_up = Vec::new();
        for i in 0..stages {
            let next = if i + 1 == stages { w } else { c };
            dec_up.push(Conv::same(s, &format!("dec.up{i}"), c, next, 3, rng));
            c = next;
        }
        let dec_out = Conv::same(s, "dec.out", c, 4, 3, rng);
        let dec_skip = Linear::zeroed(s, "dec.skip", shape.latent_numel(), 4 * shape.side * shape.side);
        let h = shape.prior_hidden;
        let prior_fc = vec![
            Linear::new(s, "prior.fc0", shape.cond_numel, h, rng),
            Linear::new(s, "prior.fc1", h, h, rng),
        ];
        let prior_out = Linear::zeroed(s, "prior.out", h, 2 * shape.latent_numel());
        Ok(Self {
            shape,
            store,
            cond_proj,
            enc_in,
            enc_down,
            enc_res,
            enc_head,
            dec_in,
            dec_res,
            dec_up,
            dec_out,
            dec_skip,
            prior_fc,
            prior_out,
        })
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.shape.latent_channels, self.shape.latent_side, self.shape.latent_side]
    }

    fn flat_cond(&self, tape: &mut Tape<f32>, c0: Var) -> Result<Var> {
        let b = tape.shape(c0)[0];
        let numel: usize = tape.shape(c0)[1..].iter().product();
        if numel != self.shape.cond_numel {
            return Err(Error::shape("latentvae.cond", format!("{:?}", tape.shape(c0))));
        }
        tape.reshape(c0, &[b, numel])
    }

    fn split_gaussian(&self, tape: &mut Tape<f32>, v: Var, lo: f64, hi: f64) -> Result<(Var, Var)> {
        let lc = self.shape.latent_channels;
        let mu = tape.slice(v, 1, 0, lc)?;
        let lv = tape.slice(v, 1, lc, lc)?;
        Ok((mu, tape.clamp(lv, lo, hi)))
    }

    /// Posterior `(mu, logvar)` from quadrants `[B, 4, S, S]` and condition `[B, ...]`.
    pub fn encode(&self, tape: &mut Tape<f32>, p: &Bound, x: Var, c0: Var) -> Result<(Var, Var)> {
        let s = tape.shape(x).to_vec();
        let side = self.shape.side;
        if s.len() != 4 || s[1] != 4 || s[2] != side || s[3] != side || tape.shape(c0)[0] != s[0] {
            return Err(Error::shape("latentvae.encode", format!("{s:?} with condition {:?}", tape.shape(c0))));
        }
        let flat = self.flat_cond(tape, c0)?;
        let proj = self.cond_proj.forward(tape, p, flat)?;
        let plane = tape.broadcast2d(proj, side, side)?;
        let mut h = tape.concat(&[x, plane], 1)?;
        h = self.enc_in.forward(tape, p, h)?;
        h = tape.silu(h);
        for conv in &self.enc_down {
            h = conv.forward(tape, p, h)?;
            h = tape.silu(h);
        }
        h = self.enc_res.forward(tape, p, h)?;
        h = tape.silu(h);
        let head = self.enc_head.forward(tape, p, h)?;
        self.split_gaussian(tape, head, -30.0, 20.0)
    }

    /// Latent `[B, Cz, Hz, Wz]` to quadrants `[B, 4, S, S]`.
    pub fn decode(&self, tape: &mut Tape<f32>, p: &Bound, z: Var) -> Result<Var> {
        let b = tape.shape(z)[0];
        let mut h = self.dec_in.forward(tape, p, z)?;
        for r in &self.dec_res {
            h = r.forward(tape, p, h)?;
        }
        h = tape.silu(h);
        for conv in &self.dec_up {
            h = tape.upsample(h, 2, 2)?;
            h = conv.forward(tape, p, h)?;
            h = tape.silu(h);
        }
        let conv_out = self.dec_out.forward(tape, p, h)?;
        let flat = tape.reshape(z, &[b, self.shape.latent_numel()])?;
        let skip = self.dec_skip.forward(tape, p, flat)?;
        let side = self.shape.side;
        let skip = tape.reshape(skip, &[b, 4, side, side])?;
        tape.add(conv_out, skip)
    }

    /// Conditional prior `(mu, logvar)`, each `[B, Cz, Hz, Wz]`, log-variance clamped.
    pub fn prior(&self, tape: &mut Tape<f32>, p: &Bound, c0: Var) -> Result<(Var, Var)> {
        let b = tape.shape(c0)[0];
        let mut h = self.flat_cond(tape, c0)?;
        for fc in &self.prior_fc {
            h = fc.forward(tape, p, h)?;
            h = tape.silu(h);
        }
        let out = self.prior_out.forward(tape, p, h)?;
        let [lc, hz, wz] = self.latent_shape();
        let out = tape.reshape(out, &[b, 2 * lc, hz, wz])?;
        self.split_gaussian(tape, out, PRIOR_LOGVAR_MIN, PRIOR_LOGVAR_MAX)
    }

    /// Reconstruction MSE plus `beta_kl` times the batch-mean KL from posterior to prior.
    pub fn loss(&self, tape: &mut Tape<f32>, p: &Bound, x: Var, c0: Var, eps: Var, beta_kl: f64) -> Result<(Var, Var, Var)> {
        let b = tape.shape(x)[0] as f64;
        let (mu_q, lv_q) = self.encode(tape, p, x, c0)?;
        let (mu_p, lv_p) = self.prior(tape, p, c0)?;
        let half = tape.scale(lv_q, 0.5);
        let std = tape.exp(half);
        let noise = tape.mul(std, eps)?;
        let z = tape.add(mu_q, noise)?;
        let rec = self.decode(tape, p, z)?;
        let rec = tape.mse(rec, x)?;
        let kl = diagonal_kl(tape, mu_q, lv_q, mu_p, lv_p)?;
        let kl = tape.scale(kl, 1.0 / b);
        let weighted = tape.scale(kl, beta_kl);
        let total = tape.add(rec, weighted)?;
        Ok((total, rec, kl))
    }

    pub fn batch_loss(&self, x: &[Tensor<f32>], c0: &[Tensor<f32>], eps: &Tensor<f32>, beta_kl: f64) -> Result<VaeLoss> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let xv = tape.constant(Tensor::stack(x)?);
        let cv = tape.constant(Tensor::stack(c0)?);
        let e = tape.constant(eps.clone());
        let (t, r, k) = self.loss(&mut tape, &p, xv, cv, e, beta_kl)?;
        let out = VaeLoss { total: tape.value(t).item()?.into(), rec: tape.value(r).item()?.into(), kl: tape.value(k).item()?.into() };
        if !out.total.is_finite() {
            return Err(Error::NonFinite("latentvae loss".into()));
        }
        Ok(out)
    }

    /// Posterior `(mu, logvar)` per sample, each `[Cz, Hz, Wz]`.
    pub fn encode_input(&self, x: &[Tensor<f32>], c0: &[Tensor<f32>]) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
        if x.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let xv = tape.constant(Tensor::stack(x)?);
        let cv = tape.constant(Tensor::stack(c0)?);
        let (mu, lv) = self.encode(&mut tape, &p, xv, cv)?;
        let mu = tape.value(mu).unstack();
        let lv = tape.value(lv).unstack();
        let shape = self.latent_shape();
        mu.into_iter().zip(lv).map(|(m, l)| Ok((m.reshape(shape)?, l.reshape(shape)?))).collect()
    }

    /// Quadrants `[4, S, S]` per latent `[Cz, Hz, Wz]`.
    pub fn decode_latent(&self, z: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
        if z.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let zv = tape.constant(Tensor::stack(z)?);
        let y = self.decode(&mut tape, &p, zv)?;
        let side = self.shape.side;
        tape.value(y).unstack().into_iter().map(|t| t.reshape([4, side, side])).collect()
    }

    /// Prior parameters for one or more condition embeddings stacked on axis 0.
    pub fn prior_params(&self, c0: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let cv = tape.constant(c0.clone());
        let (mu, lv) = self.prior(&mut tape, &p, cv)?;
        Ok((tape.value(mu).clone(), tape.value(lv).clone()))
    }
}

/// Batch of one: the condition is `[Cc, Lc]` and the parameters are `[Cz, Hz, Wz]`.
impl LatentPrior<f32> for LatentVae {
    fn params(&self, cond: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut shape = vec![1];
        shape.extend_from_slice(cond.shape());
        let (mu, lv) = self.prior_params(&cond.clone().reshape(shape)?)?;
        let s = self.latent_shape();
        Ok((mu.reshape(s)?, lv.reshape(s)?))
    }
}

/// `sum(0.5 (lv_p - lv_q) + (exp(lv_q) + (mu_q - mu_p)^2) / (2 exp(lv_p)) - 0.5)`.
pub(crate) fn diagonal_kl(tape: &mut Tape<f32>, mu_q: Var, lv_q: Var, mu_p: Var, lv_p: Var) -> Result<Var> {
    let dlv = tape.sub(lv_p, lv_q)?;
    let var_q = tape.exp(lv_q);
    let d = tape.sub(mu_q, mu_p)?;
    let d2 = tape.square(d);
    let num = tape.add(var_q, d2)?;
    let neg = tape.scale(lv_p, -1.0);
    let inv_var_p = tape.exp(neg);
    let ratio = tape.mul(num, inv_var_p)?;
    let a = tape.add(dlv, ratio)?;
    let a = tape.offset(a, -1.0);
    let s = tape.sum(a);
    Ok(tape.scale(s, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> LatentVaeShape {
        LatentVaeShape { side: 16, latent_channels: 1, latent_side: 4, cond_numel: 50, cond_proj: 4, width: 8, prior_hidden: 16 }
    }

    #[test]
    fn closed_form_kl() {
        assert!((kl_diagonal(&[1.0], &[1.0], &[0.0], &[1.0]) - 0.5).abs() < 1e-15);
        assert!((kl_diagonal(&[0.0], &[2.0], &[0.0], &[1.0]) - 0.153426).abs() < 1e-6);
        assert_eq!(kl_diagonal(&[0.3], &[0.7], &[0.3], &[0.7]), 0.0);
    }

    #[test]
    fn fresh_prior_is_standard_normal() {
        let mut rng = RngStream::new(2);
        let m = LatentVae::new(shape(), &mut rng).unwrap();
        let c: Tensor<f32> = rng.normal_tensor(&[2, 25]);
        let (mu, lv) = m.params(&c).unwrap();
        assert_eq!(mu.shape(), &[1, 4, 4]);
        assert!(mu.data().iter().chain(lv.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn shapes_flow_through() {
        let mut rng = RngStream::new(3);
        let m = LatentVae::new(shape(), &mut rng).unwrap();
        let x: Vec<Tensor<f32>> = (0..2).map(|_| rng.normal_tensor(&[4, 16, 16])).collect();
        let c: Vec<Tensor<f32>> = (0..2).map(|_| rng.normal_tensor(&[2, 25])).collect();
        let post = m.encode_input(&x, &c).unwrap();
        assert_eq!(post[0].0.shape(), &[1, 4, 4]);
        let z: Vec<Tensor<f32>> = post.iter().map(|p| p.0.clone()).collect();
        let y = m.decode_latent(&z).unwrap();
        assert_eq!(y[0].shape(), &[4, 16, 16]);
        assert_eq!(m.decode_latent(&z).unwrap(), y);
        let e = rng.normal_tensor(&[2, 1, 4, 4]);
        assert!(m.batch_loss(&x, &c, &e, 1e-3).unwrap().total.is_finite());
    }

    #[test]
    fn quadrant_round_trip() {
        let m: Vec<f64> = (0..64).map(|i| i as f64 * 0.25).collect();
        let t = to_blocks(&m, 8).unwrap();
        assert_eq!(t.shape(), &[4, 4, 4]);
        assert_eq!(from_blocks(&t).unwrap(), m);
    }
}
