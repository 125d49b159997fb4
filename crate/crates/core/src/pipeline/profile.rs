//! Named shape/training profiles and their fingerprint.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use super::config::{ConfigFile, Section};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::OptimizerKind;
use crate::pdfsim::DebyeParams;

/// Optimization budget of one training stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageBudget {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

/// Widths of the three trainable networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arch {
    pub cvae_width: usize,
    pub xvae_width: usize,
    pub prior_hidden: usize,
    pub ddm_width: usize,
    pub ddm_blocks: usize,
    pub time_dim: usize,
    pub cond_proj: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Profile {
    pub name: String,
    pub n_max: usize,
    pub sigma: f64,
    pub norm_constant: f64,
    pub pdf: DebyeParams,
    /// Training PDFs draw their damping uniformly from `[0, qdamp_max]`.
    pub qdamp_max: f64,
    pub cond_channels: usize,
    /// `(channels, length)` of the condition embedding.
    pub cond_latent: (usize, usize),
    /// `(channels, height, width)` of the Laplacian latent.
    pub latent: (usize, usize, usize),
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub beta_kl: f64,
    pub arch: Arch,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    /// Global gradient-norm cap per step; 0 disables clipping.
    pub grad_clip: f64,
    pub cvae: StageBudget,
    pub xvae: StageBudget,
    pub ddm: StageBudget,
    pub seed: u64,
}

impl Profile {
    /// Full-size shapes: 256-atom Laplacians, 3000-point PDFs, 1000 diffusion steps.
    pub fn paper() -> Self {
        Self {
            name: "paper".into(),
            n_max: 256,
            sigma: 5.0,
            norm_constant: 256.0,
            pdf: DebyeParams::default(),
            qdamp_max: 0.1,
            cond_channels: 6,
            cond_latent: (2, 125),
            latent: (1, 16, 16),
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            beta_kl: 1e-3,
            arch: Arch {
                cvae_width: 32,
                xvae_width: 32,
                prior_hidden: 512,
                ddm_width: 64,
                ddm_blocks: 4,
                time_dim: 64,
                cond_proj: 8,
            },
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.0,
            grad_clip: 1.0,
            cvae: StageBudget { epochs: 200, batch: 32, lr: 1e-3 },
            xvae: StageBudget { epochs: 200, batch: 16, lr: 1e-3 },
            ddm: StageBudget { epochs: 400, batch: 32, lr: 1e-3 },
            seed: 42,
        }
    }

    /// CPU-scale shapes that keep every ratio of the full profile.
    pub fn desk() -> Self {
        Self {
            name: "desk".into(),
            n_max: 64,
            norm_constant: 64.0,
            pdf: DebyeParams { r_step: 0.05, ..DebyeParams::default() },
            cond_latent: (2, 25),
            latent: (1, 8, 8),
            steps: 100,
            // Same total noise as 1e-4..0.02 over 1000 steps.
            beta_start: 1e-3,
            beta_end: 0.2,
            arch: Arch {
                cvae_width: 16,
                xvae_width: 16,
                prior_hidden: 128,
                ddm_width: 16,
                ddm_blocks: 2,
                time_dim: 16,
                cond_proj: 4,
            },
            cvae: StageBudget { epochs: 1500, batch: 16, lr: 2e-3 },
            xvae: StageBudget { epochs: 800, batch: 4, lr: 2e-3 },
            ddm: StageBudget { epochs: 1500, batch: 4, lr: 2e-3 },
            beta_kl: 1e-5,
            ..Self::paper()
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    /// Resolves `name` from `config` (`[profile.<name>]`, optionally `base = desk|paper`)
    /// or from the built-ins.
    pub fn resolve(name: &str, config: Option<&ConfigFile>) -> Result<Self> {
        let section = config.and_then(|c| c.section(&format!("profile.{name}")));
        let Some(section) = section else {
            return Self::builtin(name).ok_or_else(|| Error::InvalidParam(format!("unknown profile {name:?}")));
        };
        let base_name = section.get("base").unwrap_or(if Self::builtin(name).is_some() { name } else { "desk" });
        let mut p = Self::builtin(base_name)
            .ok_or_else(|| Error::InvalidParam(format!("unknown base profile {base_name:?}")))?;
        p.name = name.to_string();
        p.apply(section)?;
        p.validate()?;
        Ok(p)
    }

    fn apply(&mut self, s: &Section) -> Result<()> {
        const KEYS: &[&str] = &[
            "base", "n_max", "sigma", "norm_constant", "r_min", "r_max", "r_step", "q_min", "q_max", "b_iso",
            "qdamp_max", "cond_channels", "cond_latent", "latent", "steps", "beta_start", "beta_end", "beta_kl",
            "cvae_width", "xvae_width", "prior_hidden", "ddm_width", "ddm_blocks", "time_dim", "cond_proj",
            "optimizer", "weight_decay", "grad_clip", "seed", "cvae_epochs", "cvae_batch", "cvae_lr", "xvae_epochs",
            "xvae_batch", "xvae_lr", "ddm_epochs", "ddm_batch", "ddm_lr",
        ];
        for (k, _, line) in s.entries() {
            if !KEYS.contains(&k) {
                return Err(Error::parse("config", line, format!("unknown profile key {k:?}")));
            }
        }
        self.n_max = s.parse_or("n_max", self.n_max)?;
        self.sigma = s.parse_or("sigma", self.sigma)?;
        self.norm_constant = s.parse_or("norm_constant", self.n_max as f64)?;
        self.pdf.r_min = s.parse_or("r_min", self.pdf.r_min)?;
        self.pdf.r_max = s.parse_or("r_max", self.pdf.r_max)?;
        self.pdf.r_step = s.parse_or("r_step", self.pdf.r_step)?;
        self.pdf.q_min = s.parse_or("q_min", self.pdf.q_min)?;
        self.pdf.q_max = s.parse_or("q_max", self.pdf.q_max)?;
        self.pdf.b_iso = s.parse_or("b_iso", self.pdf.b_iso)?;
        self.qdamp_max = s.parse_or("qdamp_max", self.qdamp_max)?;
        self.cond_channels = s.parse_or("cond_channels", self.cond_channels)?;
        if let Some(v) = s.get("cond_latent") {
            let d = dims(v, 2).map_err(|m| Error::parse("config", 0, format!("cond_latent: {m}")))?;
            self.cond_latent = (d[0], d[1]);
        }
        if let Some(v) = s.get("latent") {
            let d = dims(v, 3).map_err(|m| Error::parse("config", 0, format!("latent: {m}")))?;
            self.latent = (d[0], d[1], d[2]);
        }
        self.steps = s.parse_or("steps", self.steps)?;
        self.beta_start = s.parse_or("beta_start", self.beta_start)?;
        self.beta_end = s.parse_or("beta_end", self.beta_end)?;
        self.beta_kl = s.parse_or("beta_kl", self.beta_kl)?;
        let a = &mut self.arch;
        a.cvae_width = s.parse_or("cvae_width", a.cvae_width)?;
        a.xvae_width = s.parse_or("xvae_width", a.xvae_width)?;
        a.prior_hidden = s.parse_or("prior_hidden", a.prior_hidden)?;
        a.ddm_width = s.parse_or("ddm_width", a.ddm_width)?;
        a.ddm_blocks = s.parse_or("ddm_blocks", a.ddm_blocks)?;
        a.time_dim = s.parse_or("time_dim", a.time_dim)?;
        a.cond_proj = s.parse_or("cond_proj", a.cond_proj)?;
        if let Some(v) = s.get("optimizer") {
            self.optimizer = match v {
                "adamw" => OptimizerKind::AdamW,
                "adan" => OptimizerKind::Adan,
                other => return Err(Error::parse("config", 0, format!("optimizer {other:?}"))),
            };
        }
        self.weight_decay = s.parse_or("weight_decay", self.weight_decay)?;
        self.grad_clip = s.parse_or("grad_clip", self.grad_clip)?;
        self.seed = s.parse_or("seed", self.seed)?;
        for (prefix, b) in [("cvae", &mut self.cvae), ("xvae", &mut self.xvae), ("ddm", &mut self.ddm)] {
            b.epochs = s.parse_or(&format!("{prefix}_epochs"), b.epochs)?;
            b.batch = s.parse_or(&format!("{prefix}_batch"), b.batch)?;
            b.lr = s.parse_or(&format!("{prefix}_lr"), b.lr)?;
        }
        Ok(())
    }

    /// Factor between the normalized Laplacian and the latent-VAE quadrant values,
    /// which brings entries to order one.
    pub fn block_gain(&self) -> f64 {
        self.norm_constant
    }

    pub fn grid_len(&self) -> usize {
        self.pdf.grid_len()
    }

    pub fn cond_len(&self) -> usize {
        self.grid_len() / self.cond_channels
    }

    pub fn block_side(&self) -> usize {
        self.n_max / 2
    }

    pub fn cond_stages(&self) -> usize {
        (self.cond_len() / self.cond_latent.1).trailing_zeros() as usize
    }

    pub fn latent_stages(&self) -> usize {
        (self.block_side() / self.latent.1).trailing_zeros() as usize
    }

    pub fn latent_numel(&self) -> usize {
        self.latent.0 * self.latent.1 * self.latent.2
    }

    pub fn cond_latent_numel(&self) -> usize {
        self.cond_latent.0 * self.cond_latent.1
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(format!("profile {}: {m}", self.name)));
        self.pdf.validate()?;
        if self.n_max < 2 || self.n_max % 2 != 0 {
            return bad(format!("n_max {} must be even", self.n_max));
        }
        if !(self.sigma > 0.0) || !(self.norm_constant > 0.0) {
            return bad("sigma and norm_constant must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.qdamp_max) {
            return bad(format!("qdamp_max {}", self.qdamp_max));
        }
        if self.cond_channels == 0 || self.grid_len() % self.cond_channels != 0 {
            return bad(format!("{} grid points do not fill {} channels", self.grid_len(), self.cond_channels));
        }
        let ratio_ok = |big: usize, small: usize| small > 0 && big % small == 0 && (big / small).is_power_of_two();
        if self.cond_latent.0 == 0 || !ratio_ok(self.cond_len(), self.cond_latent.1) {
            return bad(format!("condition length {} vs latent {:?}", self.cond_len(), self.cond_latent));
        }
        let side = self.block_side();
        if self.latent.0 == 0 || self.latent.1 != self.latent.2 || !ratio_ok(side, self.latent.1) {
            return bad(format!("block side {side} vs latent {:?}", self.latent));
        }
        let a = self.arch;
        if [a.cvae_width, a.xvae_width, a.prior_hidden, a.ddm_width, a.cond_proj].contains(&0) || a.time_dim < 2 {
            return bad("network widths must be positive".into());
        }
        if self.steps == 0 || !(self.beta_kl >= 0.0) {
            return bad("steps and beta_kl".into());
        }
        if !(self.grad_clip >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("grad_clip and weight_decay must be nonnegative".into());
        }
        for b in [self.cvae, self.xvae, self.ddm] {
            if b.batch == 0 || !(b.lr >= 0.0) {
                return bad(format!("budget {b:?}"));
            }
        }
        self.schedule()?;
        Ok(())
    }

    /// Canonical text of every field that determines tensor shapes or their meaning.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        let p = &self.pdf;
        let a = &self.arch;
        let _ = writeln!(s, "n_max={}\nsigma={}\nnorm_constant={}", self.n_max, self.sigma, self.norm_constant);
        let _ = writeln!(s, "r={}:{}:{}\nq={}:{}\nb_iso={}", p.r_min, p.r_max, p.r_step, p.q_min, p.q_max, p.b_iso);
        let _ = writeln!(s, "cond={}x{}\ncond_latent={}x{}", self.cond_channels, self.cond_len(), self.cond_latent.0, self.cond_latent.1);
        let _ = writeln!(s, "latent={}x{}x{}", self.latent.0, self.latent.1, self.latent.2);
        let _ = writeln!(s, "steps={}\nbeta={}:{}", self.steps, self.beta_start, self.beta_end);
        let _ = writeln!(
            s,
            "arch={},{},{},{},{},{},{}",
            a.cvae_width, a.xvae_width, a.prior_hidden, a.ddm_width, a.ddm_blocks, a.time_dim, a.cond_proj
        );
        s
    }

    /// First eight bytes (little-endian) of the SHA-256 of [`Self::canonical_text`].
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(b)
    }
}

fn dims(v: &str, n: usize) -> std::result::Result<Vec<usize>, String> {
    let d: Vec<usize> = v
        .split(['x', ',', ' '])
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| format!("{t:?} is not a dimension")))
        .collect::<std::result::Result<_, _>>()?;
    if d.len() != n {
        return Err(format!("expected {n} dimensions, got {}", d.len()));
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_shapes() {
        let p = Profile::paper();
        p.validate().unwrap();
        assert_eq!((p.grid_len(), p.cond_len(), p.block_side()), (3000, 500, 128));
        assert_eq!((p.cond_stages(), p.latent_stages()), (2, 3));
        let d = Profile::desk();
        d.validate().unwrap();
        assert_eq!((d.grid_len(), d.cond_len(), d.block_side()), (600, 100, 32));
        assert_eq!((d.cond_stages(), d.latent_stages()), (2, 2));
        assert_ne!(p.hash(), d.hash());
    }

    #[test]
    fn budgets_do_not_change_hash() {
        let mut d = Profile::desk();
        let h = d.hash();
        d.cvae.epochs = 3;
        d.seed = 7;
        assert_eq!(d.hash(), h);
        d.latent = (2, 8, 8);
        assert_ne!(d.hash(), h);
    }

    #[test]
    fn config_overrides() {
        let c = ConfigFile::parse("[profile.tiny]\nbase = desk\nn_max = 32\nlatent = 1x4x4\ncvae_epochs = 5\n").unwrap();
        let p = Profile::resolve("tiny", Some(&c)).unwrap();
        assert_eq!((p.n_max, p.norm_constant, p.latent, p.cvae.epochs), (32, 32.0, (1, 4, 4), 5));
        let c = ConfigFile::parse("[profile.bad]\nlatent = 1x3x3\n").unwrap();
        assert!(Profile::resolve("bad", Some(&c)).is_err());
        let c = ConfigFile::parse("[profile.typo]\nnmax = 3\n").unwrap();
        assert!(Profile::resolve("typo", Some(&c)).is_err());
        assert!(Profile::resolve("nope", None).is_err());
    }
}
