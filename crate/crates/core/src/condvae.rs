//! Convolutional VAE that compresses a PDF curve into the condition embedding.

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, ParamStore, RngStream, Tape, Tensor, Var};
use crate::pdfsim::PdfCurve;

/// `[channels, length]` arrangement of a normalized PDF: channel `k` holds
/// samples `k * length .. (k + 1) * length`.
pub fn reshape_condition(g: &[f64], channels: usize) -> Result<Tensor<f32>> {
    if channels == 0 || g.is_empty() || g.len() % channels != 0 {
        return Err(Error::shape("reshape_condition", format!("{} samples into {channels} channels", g.len())));
    }
    Tensor::new([channels, g.len() / channels], g.iter().map(|&v| v as f32).collect())
}

/// Max-abs normalized PDF on the expected grid, reshaped.
pub fn condition_from_pdf(pdf: &PdfCurve, grid_len: usize, channels: usize) -> Result<Tensor<f32>> {
    if pdf.g.len() != grid_len {
        return Err(Error::shape("condition", format!("PDF has {} samples, profile grid has {grid_len}", pdf.g.len())));
    }
    reshape_condition(&pdf.normalized().g, channels)
}

/// `0.5 * sum(mu^2 + var - ln var - 1)`.
pub fn kl_standard_normal(mu: &[f64], var: &[f64]) -> f64 {
    mu.iter().zip(var).map(|(m, v)| 0.5 * (m * m + v - v.ln() - 1.0)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CondVaeShape {
    pub channels: usize,
    pub length: usize,
    pub latent_channels: usize,
    pub latent_length: usize,
    pub width: usize,
}

impl CondVaeShape {
    fn stages(&self) -> Result<usize> {
        let ratio = self.length / self.latent_length.max(1);
        if self.latent_length == 0 || self.length % self.latent_length != 0 || !ratio.is_power_of_two() {
            return Err(Error::shape("condvae", format!("length {} vs latent {}", self.length, self.latent_length)));
        }
        Ok(ratio.trailing_zeros() as usize)
    }
}

/// Loss terms of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeLoss {
    pub total: f64,
    pub rec: f64,
    pub kl: f64,
}

#[derive(Clone, Debug)]
pub struct CondVae {
    pub shape: CondVaeShape,
    pub store: ParamStore,
    enc_in: Conv,
    enc_down: Vec<Conv>,
    enc_head: Conv,
    dec_in: Conv,
    dec_up: Vec<Conv>,
    dec_out: Conv,
}

fn row_conv(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut RngStream) -> Conv {
    Conv::new(store, name, cin, cout, (1, 3), (1, stride), (0, 1), rng)
}

impl CondVae {
    pub fn new(shape: CondVaeShape, rng: &mut RngStream) -> Result<Self> {
        let stages = shape.stages()?;
        let w = shape.width;
        let mut store = ParamStore::new();
        let s = &mut store;
        let enc_in = row_conv(s, "enc.in", shape.channels, w, 1, rng);
        let mut enc_down = Vec::new();
        let mut c = w;
        for i in 0..stages {
            let next = 2 * w;
            enc_down.push(row_conv(s, &format!("enc.down{i}"), c, next, 2, rng));
            c = next;
        }
        let enc_head = row_conv(s, "enc.head", c, 2 * shape.latent_channels, 1, rng);
        let dec_in = row_conv(s, "dec.in", shape.latent_channels, c, 1, rng);
        let mut dec_up = Vec::new();
        for i in 0..stages {
            let next = if i + 1 == stages { w } else { c };
            dec_up.push(row_conv(s, &format!("dec.up{i}"), c, next, 1, rng));
            c = next;
        }
        let dec_out = row_conv(s, "dec.out", c, shape.channels, 1, rng);
        Ok(Self { shape, store, enc_in, enc_down, enc_head, dec_in, dec_up, dec_out })
    }

    pub fn latent_shape(&self) -> [usize; 2] {
        [self.shape.latent_channels, self.shape.latent_length]
    }

    /// `[B, C, L]` batch to posterior `(mu, logvar)`, each `[B, Cz, 1, Lz]`.
    pub fn encode(&self, tape: &mut Tape<f32>, p: &Bound, c: Var) -> Result<(Var, Var)> {
        let s = tape.shape(c).to_vec();
        if s.len() != 3 || s[1] != self.shape.channels || s[2] != self.shape.length {
            return Err(Error::shape("condvae.encode", format!("{s:?}")));
        }
        let x = tape.reshape(c, &[s[0], s[1], 1, s[2]])?;
        let mut h = self.enc_in.forward(tape, p, x)?;
        h = tape.silu(h);
        for conv in &self.enc_down {
            h = conv.forward(tape, p, h)?;
            h = tape.silu(h);
        }
        let head = self.enc_head.forward(tape, p, h)?;
        let lc = self.shape.latent_channels;
        let mu = tape.slice(head, 1, 0, lc)?;
        let lv = tape.slice(head, 1, lc, lc)?;
        Ok((mu, tape.clamp(lv, -30.0, 20.0)))
    }

    /// `[B, Cz, 1, Lz]` latent to `[B, C, L]`.
    pub fn decode(&self, tape: &mut Tape<f32>, p: &Bound, z: Var) -> Result<Var> {
        let b = tape.shape(z)[0];
        let mut h = self.dec_in.forward(tape, p, z)?;
        h = tape.silu(h);
        for conv in &self.dec_up {
            h = tape.upsample(h, 1, 2)?;
            h = conv.forward(tape, p, h)?;
            h = tape.silu(h);
        }
        let y = self.dec_out.forward(tape, p, h)?;
        tape.reshape(y, &[b, self.shape.channels, self.shape.length])
    }

    /// Reconstruction MSE plus `beta_kl` times the batch-mean KL to `N(0, I)`.
    /// `eps` has the latent batch shape `[B, Cz, 1, Lz]`.
    pub fn loss(&self, tape: &mut Tape<f32>, p: &Bound, c: Var, eps: Var, beta_kl: f64) -> Result<(Var, Var, Var)> {
        let b = tape.shape(c)[0] as f64;
        let (mu, lv) = self.encode(tape, p, c)?;
        let half = tape.scale(lv, 0.5);
        let std = tape.exp(half);
        let noise = tape.mul(std, eps)?;
        let z = tape.add(mu, noise)?;
        let rec = self.decode(tape, p, z)?;
        let rec = tape.mse(rec, c)?;
        let kl = standard_kl(tape, mu, lv)?;
        let kl = tape.scale(kl, 1.0 / b);
        let weighted = tape.scale(kl, beta_kl);
        let total = tape.add(rec, weighted)?;
        Ok((total, rec, kl))
    }

    /// Evaluates the loss for a batch of condition tensors `[C, L]` with a given noise draw.
    pub fn batch_loss(&self, batch: &[Tensor<f32>], eps: &Tensor<f32>, beta_kl: f64) -> Result<VaeLoss> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let c = tape.constant(Tensor::stack(batch)?);
        let e = tape.constant(eps.clone());
        let (t, r, k) = self.loss(&mut tape, &p, c, e, beta_kl)?;
        let out = VaeLoss { total: tape.value(t).item()?.into(), rec: tape.value(r).item()?.into(), kl: tape.value(k).item()?.into() };
        if !out.total.is_finite() {
            return Err(Error::NonFinite("condvae loss".into()));
        }
        Ok(out)
    }

    /// Posterior means `[Cz, Lz]` for each condition tensor.
    pub fn embed(&self, batch: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let c = tape.constant(Tensor::stack(batch)?);
        let (mu, _) = self.encode(&mut tape, &p, c)?;
        let [lc, ll] = self.latent_shape();
        let mu = tape.value(mu).clone();
        mu.unstack().into_iter().map(|t| t.reshape([lc, ll])).collect()
    }
}

/// `0.5 * sum(mu^2 + exp(lv) - lv - 1)` over every element of the batch.
pub(crate) fn standard_kl(tape: &mut Tape<f32>, mu: Var, lv: Var) -> Result<Var> {
    let m2 = tape.square(mu);
    let var = tape.exp(lv);
    let a = tape.add(m2, var)?;
    let a = tape.sub(a, lv)?;
    let a = tape.offset(a, -1.0);
    let s = tape.sum(a);
    Ok(tape.scale(s, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> CondVaeShape {
        CondVaeShape { channels: 6, length: 100, latent_channels: 2, latent_length: 25, width: 8 }
    }

    #[test]
    fn reshape_is_row_major() {
        let g: Vec<f64> = (0..3000).map(|i| i as f64).collect();
        let t = reshape_condition(&g, 6).unwrap();
        assert_eq!(t.shape(), &[6, 500]);
        assert_eq!(t.data()[499], 499.0);
        assert_eq!(t.data()[500], 500.0);
        assert_eq!(t.data().iter().map(|&v| v as f64).collect::<Vec<_>>(), g);
        assert_eq!(reshape_condition(&g[..600], 6).unwrap().shape(), &[6, 100]);
        assert!(reshape_condition(&g[..601], 6).is_err());
    }

    #[test]
    fn closed_form_kl() {
        assert_eq!(kl_standard_normal(&[0.0], &[1.0]), 0.0);
        assert!((kl_standard_normal(&[1.0], &[1.0]) - 0.5).abs() < 1e-15);
        assert!((kl_standard_normal(&[0.0], &[2.0]) - 0.153426).abs() < 1e-6);
    }

    #[test]
    fn shapes_flow_through() {
        let mut rng = RngStream::new(5);
        let m = CondVae::new(shape(), &mut rng).unwrap();
        let batch: Vec<Tensor<f32>> = (0..3).map(|_| rng.normal_tensor(&[6, 100])).collect();
        let e = rng.normal_tensor(&[3, 2, 1, 25]);
        let l = m.batch_loss(&batch, &e, 1e-3).unwrap();
        assert!(l.rec > 0.0 && l.kl >= 0.0);
        let z = m.embed(&batch).unwrap();
        assert_eq!(z[0].shape(), &[2, 25]);
        assert_eq!(m.embed(&batch).unwrap(), z);
        let bad = CondVaeShape { latent_length: 30, ..shape() };
        assert!(CondVae::new(bad, &mut rng).is_err());
    }
}
