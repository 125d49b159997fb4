//! Structure prediction from a PDF: condition, sample latents, decode, recover, score.

use log::debug;

use super::data::Sample;
use super::metrics::rwp;
use super::profile::Profile;
use super::train::Models;
use crate::condvae::condition_from_pdf;
use crate::diffusion::{skip_sample, tune_skip, BlendSource, SkipPlan, TuneReport};
use crate::error::{Error, Result};
use crate::geomrecover::{refine_coords, spectral_embed, RefineOptions};
use crate::graphrep::symmetrize;
use crate::latentvae::from_blocks;
use crate::nn::{RngStream, Tensor};
use crate::pdfsim::{pdf_from_structure, PdfCurve};
use crate::structgen::AtomCloud;

/// Symmetrize a raw decoded matrix and recover coordinates from it.
pub fn recover_structure(raw: &[f64], profile: &Profile, opts: &RefineOptions) -> Result<(AtomCloud, f64)> {
    let img = symmetrize(raw, profile.n_max, profile.sigma, profile.norm_constant)?;
    let init = spectral_embed(&img)?;
    let res = refine_coords(&img, &init.coords, opts)?;
    Ok((AtomCloud::new(res.coords, None, 0.0), res.final_mse))
}

const DAMPING_GRID: usize = 20;

/// Best damping on `[0, qdamp_max]` for `cloud` against `obs`: coarse grid, then
/// golden-section refinement around the best grid point. Returns `(rwp, qdamp, curve)`.
pub fn fit_damping(obs: &PdfCurve, cloud: &AtomCloud, profile: &Profile) -> Result<(f64, f64, PdfCurve)> {
    let base = pdf_from_structure(cloud, &profile.pdf)?;
    let score = |q: f64| -> Result<f64> { rwp(&obs.g, &base.damped(q).g, None) };
    let hi = profile.qdamp_max;
    if hi <= 0.0 {
        return Ok((score(0.0)?, 0.0, base));
    }
    let h = hi / DAMPING_GRID as f64;
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..=DAMPING_GRID {
        let q = i as f64 * h;
        let r = score(q)?;
        if r < best.0 {
            best = (r, q);
        }
    }
    let (mut a, mut b) = ((best.1 - h).max(0.0), (best.1 + h).min(hi));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut c, mut d) = (b - g * (b - a), a + g * (b - a));
    let (mut fc, mut fd) = (score(c)?, score(d)?);
    for _ in 0..20 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = score(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = score(d)?;
        }
    }
    for (r, q) in [(fc, c), (fd, d)] {
        if r < best.0 {
            best = (r, q);
        }
    }
    Ok((best.0, best.1, base.damped(best.1)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub cloud: AtomCloud,
    pub rwp: f64,
    pub qdamp: f64,
    pub pdf: PdfCurve,
    /// Misfit between the recovered structure's Laplacian and the decoded one.
    pub laplacian_mse: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Prediction {
    /// Ascending by R_wp.
    pub candidates: Vec<Candidate>,
    /// `(candidate index, reason)` for candidates that could not be recovered.
    pub dropped: Vec<(usize, String)>,
}

impl Prediction {
    pub fn best(&self) -> Option<&Candidate> {
        self.candidates.first()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("rank\tnatoms\trwp\tqdamp\tlaplacian_mse\n");
        for (i, c) in self.candidates.iter().enumerate() {
            s.push_str(&format!("{i}\t{}\t{:.6}\t{:.6}\t{:.3e}\n", c.cloud.len(), c.rwp, c.qdamp, c.laplacian_mse));
        }
        for (i, why) in &self.dropped {
            s.push_str(&format!("#dropped\t{i}\t{why}\n"));
        }
        s
    }
}

/// Samples `k` latents with `plan` (stream `i` from `rng.fork(i)`), decodes and
/// recovers each, and scores it against `pdf`.
pub fn predict_structures(
    models: &Models,
    profile: &Profile,
    pdf: &PdfCurve,
    k: usize,
    plan: &SkipPlan,
    rng: &RngStream,
) -> Result<Prediction> {
    if k == 0 {
        return Ok(Prediction::default());
    }
    let cond = condition_from_pdf(pdf, profile.grid_len(), profile.cond_channels)?;
    let c0 = models.cvae.embed(&[cond])?.remove(0);
    let prior = models.scaled_prior();
    let inv = 1.0 / models.latent_scale;
    let mut latents = Vec::with_capacity(k);
    for i in 0..k {
        let z = skip_sample(&c0, plan, &prior, &models.ddm, &models.schedule, &rng.fork(i as u64))?;
        latents.push(z.map(|v| v * inv));
    }
    let decoded = models.xvae.decode_latent(&latents)?;
    let opts = RefineOptions::default();
    let mut out = Prediction::default();
    for (i, blocks) in decoded.iter().enumerate() {
        match candidate(blocks, pdf, profile, &opts) {
            Ok(c) => out.candidates.push(c),
            Err(e) => {
                debug!("candidate {i} dropped: {e}");
                out.dropped.push((i, e.to_string()));
            }
        }
    }
    if out.candidates.is_empty() {
        return Err(Error::Degenerate(format!("all {k} candidates dropped: {}", out.dropped[0].1)));
    }
    out.candidates.sort_by(|a, b| a.rwp.total_cmp(&b.rwp));
    Ok(out)
}

fn candidate(blocks: &Tensor<f32>, pdf: &PdfCurve, profile: &Profile, opts: &RefineOptions) -> Result<Candidate> {
    let gain = profile.block_gain();
    let raw: Vec<f64> = from_blocks(blocks)?.into_iter().map(|v| v / gain).collect();
    let (cloud, mse) = recover_structure(&raw, profile, opts)?;
    let (r, q, curve) = fit_damping(pdf, &cloud, profile)?;
    Ok(Candidate { cloud, rwp: r, qdamp: q, pdf: curve, laplacian_mse: mse })
}

/// Best-of-`k` R_wp per sample for one plan.
pub fn evaluate_plan(
    models: &Models,
    profile: &Profile,
    samples: &[Sample],
    k: usize,
    plan: &SkipPlan,
    rng: &RngStream,
) -> Result<Vec<f64>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let pred = predict_structures(models, profile, &s.pdf, k, plan, &rng.fork(i as u64))?;
            Ok(pred.best().map_or(f64::INFINITY, |c| c.rwp))
        })
        .collect()
}

/// Runs the skip tuning over `grid` on held-out `samples`.
#[allow(clippy::too_many_arguments)]
pub fn tune_plan(
    models: &Models,
    profile: &Profile,
    samples: &[Sample],
    grid: &[(usize, usize)],
    k: usize,
    slack: f64,
    blend: BlendSource,
    rng: &RngStream,
) -> Result<TuneReport> {
    if samples.is_empty() {
        return Err(Error::Empty("no tuning samples".into()));
    }
    tune_skip(grid, &models.schedule, slack, blend, |plan| evaluate_plan(models, profile, samples, k, plan, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphrep::encode_with_norm;
    use crate::structgen::{generate_cluster, AtomBounds, SizeParams, StructureKind};

    #[test]
    fn exact_laplacian_recovers_pdf() {
        let p = Profile::desk();
        let cloud = generate_cluster(StructureKind::Ico, SizeParams::Shells(1), 4.08, AtomBounds::default()).unwrap();
        let img = encode_with_norm(&cloud, p.sigma, p.n_max, p.norm_constant).unwrap();
        let (rec, mse) = recover_structure(&img.matrix, &p, &RefineOptions::default()).unwrap();
        assert_eq!(rec.len(), 13);
        assert!(mse < 1e-10);
        let obs = pdf_from_structure(&cloud, &p.pdf).unwrap().damped(0.04);
        let (r, q, _) = fit_damping(&obs, &rec, &p).unwrap();
        assert!(r < 1e-3, "rwp {r}");
        assert!((q - 0.04).abs() < 2e-3, "qdamp {q}");
    }

    #[test]
    fn degenerate_matrix_is_rejected() {
        let p = Profile::desk();
        let raw = vec![0.0; p.n_max * p.n_max];
        assert!(recover_structure(&raw, &p, &RefineOptions::default()).is_err());
    }
}
