//! Latent diffusion: noise schedule, forward noising, ancestral reverse steps
//! and the skip sampler that blends a conditional-prior draw into the chain.

mod denoiser;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{RngStream, Scalar, Tensor};

pub use denoiser::{Denoiser, DenoiserShape};

/// Per-step tables for `t = 1..=T`; index 0 holds the `t = 0` convention
/// (`beta = 0`, `alpha_bar = 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear `beta` from `beta_start` at `t = 1` to `beta_end` at `t = T`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidParam("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidParam(format!("beta range {beta_start}..{beta_end}")));
        }
        let betas = (1..=steps)
            .map(|t| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * (t - 1) as f64 / (steps - 1) as f64
                }
            })
            .collect::<Vec<_>>();
        Ok(Self::from_betas(&betas))
    }

    pub fn constant(steps: usize, beta: f64) -> Result<Self> {
        Self::linear(steps, beta, beta)
    }

    fn from_betas(betas: &[f64]) -> Self {
        let mut b = vec![0.0];
        b.extend_from_slice(betas);
        let alphas: Vec<f64> = b.iter().map(|x| 1.0 - x).collect();
        let mut alpha_bars = vec![1.0];
        for t in 1..b.len() {
            alpha_bars.push(alpha_bars[t - 1] * alphas[t]);
        }
        Self { betas: b, alphas, alpha_bars }
    }

    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Posterior variance `beta_t (1 - abar_{t-1}) / (1 - abar_t)` of the reverse step.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.betas[t] * (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t])
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidParam(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(f64, f64) -> f64) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("diffusion", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| T::of(f(x.f64(), y.f64()))).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// `z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
pub fn q_sample<T: Scalar>(z0: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    let (s, n) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
    zip_map(z0, eps, |z, e| s * z + n * e)
}

/// Mean absolute error between drawn and predicted noise.
pub fn l1_noise_loss<T: Scalar>(eps: &Tensor<T>, eps_hat: &Tensor<T>) -> Result<f64> {
    let d = zip_map(eps, eps_hat, |a, b| (a - b).abs())?;
    let v = d.data().iter().map(|x| x.f64()).sum::<f64>() / d.numel() as f64;
    if !v.is_finite() {
        return Err(Error::NonFinite("diffusion loss".into()));
    }
    Ok(v)
}

/// Noise predictor `eps(z_t, c0, t)` over a batch sharing one step `t`.
pub trait NoisePredictor<T: Scalar> {
    fn predict(&self, z: &Tensor<T>, cond: &Tensor<T>, t: usize) -> Result<Tensor<T>>;
}

/// Map from a condition embedding to a diagonal Gaussian `(mean, log-variance)`.
pub trait LatentPrior<T: Scalar> {
    fn params(&self, cond: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)>;
}

/// Diffusion loss for one batch with explicit `t` and `eps`; `t` shared by the batch.
pub fn ddm_loss<T: Scalar>(
    z0: &Tensor<T>,
    cond: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
    model: &impl NoisePredictor<T>,
) -> Result<f64> {
    let zt = q_sample(z0, t, eps, sched)?;
    let pred = model.predict(&zt, cond, t)?;
    l1_noise_loss(eps, &pred)
}

/// One reverse step. Noise is drawn from `rng` only for `t > 1`.
pub fn ancestral_step<T: Scalar>(
    zt: &Tensor<T>,
    t: usize,
    eps_hat: &Tensor<T>,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    let beta = sched.beta(t);
    let c = beta / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv = 1.0 / sched.alpha(t).sqrt();
    let mean = zip_map(zt, eps_hat, |z, e| (z - c * e) * inv)?;
    if t == 1 {
        return Ok(mean);
    }
    let sigma = sched.posterior_variance(t).sqrt();
    let xi: Tensor<f64> = rng.normal_tensor(zt.shape());
    zip_map(&mean, &xi.cast::<T>(), |m, x| m + sigma * x)
}

/// Which prior sample enters the skip blend.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BlendSource {
    /// The prior draw noised to step `T1` (the algorithm as written).
    #[default]
    Noised,
    /// The clean prior draw, for which the blend has the exact forward marginal.
    Clean,
}

impl BlendSource {
    pub fn label(self) -> &'static str {
        match self {
            BlendSource::Noised => "noised",
            BlendSource::Clean => "clean",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "noised" => Ok(BlendSource::Noised),
            "clean" => Ok(BlendSource::Clean),
            other => Err(Error::Plan(format!("unknown blend source {other:?}"))),
        }
    }
}

/// Skip from chain step `t2` to `t1` by blending `a * prior + u * chain`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SkipPlan {
    pub t1: usize,
    pub t2: usize,
    pub u: f64,
    pub a: f64,
    pub blend: BlendSource,
}

impl SkipPlan {
    pub fn new(t1: usize, t2: usize, sched: &NoiseSchedule) -> Result<Self> {
        if t1 > t2 {
            return Err(Error::Plan(format!("T1 = {t1} exceeds T2 = {t2}")));
        }
        if t2 > sched.steps() {
            return Err(Error::Plan(format!("T2 = {t2} exceeds schedule length {}", sched.steps())));
        }
        let (u, a) = if t1 == t2 {
            (1.0, 0.0)
        } else {
            let (ab1, ab2) = (sched.alpha_bar(t1), sched.alpha_bar(t2));
            let u = (1.0 - ab1).sqrt() / (1.0 - ab2).sqrt();
            (u, ab1.sqrt() - ab2.sqrt() * u)
        };
        Ok(Self { t1, t2, u, a, blend: BlendSource::Noised })
    }

    /// Plan that runs the whole reverse chain.
    pub fn full_chain(sched: &NoiseSchedule) -> Self {
        Self::new(sched.steps(), sched.steps(), sched).expect("full chain is a valid plan")
    }

    pub fn with_blend(mut self, blend: BlendSource) -> Self {
        self.blend = blend;
        self
    }

    pub fn interval(&self) -> usize {
        self.t2 - self.t1
    }
}

const CHAIN_STREAM: u64 = 0;
const PRIOR_STREAM: u64 = 1;

/// Reverse chain over `steps` (descending), consuming noise from `rng`.
fn run_chain<T: Scalar>(
    mut z: Tensor<T>,
    cond: &Tensor<T>,
    steps: impl Iterator<Item = usize>,
    model: &impl NoisePredictor<T>,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<Tensor<T>> {
    for t in steps {
        let eps = model.predict(&z, cond, t)?;
        z = ancestral_step(&z, t, &eps, sched, rng)?;
    }
    Ok(z)
}

/// Plain ancestral sampling from pure noise at `T` down to 0.
pub fn full_chain_sample<T: Scalar>(
    cond: &Tensor<T>,
    latent_shape: &[usize],
    model: &impl NoisePredictor<T>,
    sched: &NoiseSchedule,
    rng: &RngStream,
) -> Result<Tensor<T>> {
    let mut chain = rng.fork(CHAIN_STREAM);
    let z: Tensor<f64> = chain.normal_tensor(latent_shape);
    run_chain(z.cast(), cond, (1..=sched.steps()).rev(), model, sched, &mut chain)
}

/// Skip sampler: chain `T -> T2`, blend with the conditional prior at `T1`, chain `T1 -> 0`.
///
/// The chain and the prior draws use separate forks of `rng`, so `T1 = T2`
/// reproduces [`full_chain_sample`] exactly and `T1 = 0` returns the prior draw.
pub fn skip_sample<T: Scalar>(
    cond: &Tensor<T>,
    plan: &SkipPlan,
    prior: &impl LatentPrior<T>,
    model: &impl NoisePredictor<T>,
    sched: &NoiseSchedule,
    rng: &RngStream,
) -> Result<Tensor<T>> {
    if plan.t1 > plan.t2 || plan.t2 > sched.steps() {
        return Err(Error::Plan(format!("invalid plan ({}, {})", plan.t1, plan.t2)));
    }
    let (mu, logvar) = prior.params(cond)?;
    let shape = mu.shape().to_vec();
    let mut chain = rng.fork(CHAIN_STREAM);
    let mut pr = rng.fork(PRIOR_STREAM);
    let start: Tensor<f64> = chain.normal_tensor(&shape);
    let x_t2 = run_chain(start.cast::<T>(), cond, (plan.t2 + 1..=sched.steps()).rev(), model, sched, &mut chain)?;
    let xi: Tensor<f64> = pr.normal_tensor(&shape);
    let eps1: Tensor<f64> = pr.normal_tensor(&shape);
    let x0_star = Tensor::new(
        shape.clone(),
        mu.data()
            .iter()
            .zip(logvar.data())
            .zip(xi.data())
            .map(|((m, lv), x)| T::of(m.f64() + (0.5 * lv.f64()).exp() * x))
            .collect(),
    )?;
    let blended = if plan.t1 == plan.t2 {
        x_t2
    } else if plan.t1 == 0 {
        x0_star
    } else {
        let source = match plan.blend {
            BlendSource::Noised => q_sample(&x0_star, plan.t1, &eps1.cast(), sched)?,
            BlendSource::Clean => x0_star,
        };
        zip_map(&source, &x_t2, |p, c| plan.a * p + plan.u * c)?
    };
    run_chain(blended, cond, (1..=plan.t1).rev(), model, sched, &mut chain)
}

/// Exact noise predictor for data distributed as `N(mean, cov)` in two dimensions:
/// `eps = sqrt(1 - abar) S^-1 (z - sqrt(abar) m)` with `S = abar cov + (1 - abar) I`.
#[derive(Clone, Debug)]
pub struct GaussianOracle {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
    pub schedule: NoiseSchedule,
}

impl NoisePredictor<f64> for GaussianOracle {
    fn predict(&self, z: &Tensor<f64>, _cond: &Tensor<f64>, t: usize) -> Result<Tensor<f64>> {
        if z.shape().len() != 2 || z.shape()[1] != 2 {
            return Err(Error::shape("gaussian_oracle", format!("{:?}", z.shape())));
        }
        let ab = self.schedule.alpha_bar(t);
        let s = [
            [ab * self.cov[0][0] + 1.0 - ab, ab * self.cov[0][1]],
            [ab * self.cov[1][0], ab * self.cov[1][1] + 1.0 - ab],
        ];
        let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
        let inv = [[s[1][1] / det, -s[0][1] / det], [-s[1][0] / det, s[0][0] / det]];
        let k = (1.0 - ab).sqrt();
        let mut out = Vec::with_capacity(z.numel());
        for row in z.data().chunks(2) {
            let d = [row[0] - ab.sqrt() * self.mean[0], row[1] - ab.sqrt() * self.mean[1]];
            out.push(k * (inv[0][0] * d[0] + inv[0][1] * d[1]));
            out.push(k * (inv[1][0] * d[0] + inv[1][1] * d[1]));
        }
        Tensor::new(z.shape().to_vec(), out)
    }
}

/// One row of the skip tuning table.
#[derive(Clone, Debug, PartialEq)]
pub struct TuneRow {
    pub t1: usize,
    pub t2: usize,
    pub median_rwp: f64,
    pub feasible: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneReport {
    pub chosen: SkipPlan,
    pub baseline_median: f64,
    pub rows: Vec<TuneRow>,
}

impl TuneReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("t1\tt2\tmedian_rwp\tfeasible\n");
        for r in &self.rows {
            s.push_str(&format!("{}\t{}\t{:.6}\t{}\n", r.t1, r.t2, r.median_rwp, r.feasible));
        }
        s
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Picks the plan with the widest `T2 - T1` whose median R_wp stays within
/// `(1 + slack)` of the full-chain baseline. `evaluate` returns per-sample R_wp
/// values and is called once per distinct plan; the baseline is always included.
pub fn tune_skip(
    grid: &[(usize, usize)],
    sched: &NoiseSchedule,
    slack: f64,
    blend: BlendSource,
    mut evaluate: impl FnMut(&SkipPlan) -> Result<Vec<f64>>,
) -> Result<TuneReport> {
    if grid.is_empty() {
        return Err(Error::Plan("empty skip grid".into()));
    }
    if !(slack >= 0.0) {
        return Err(Error::Plan(format!("slack {slack}")));
    }
    let full = sched.steps();
    let mut pairs: Vec<(usize, usize)> = vec![(full, full)];
    for &p in grid {
        if !pairs.contains(&p) {
            pairs.push(p);
        }
    }
    let mut medians: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut plans = Vec::with_capacity(pairs.len());
    for &(t1, t2) in &pairs {
        let plan = SkipPlan::new(t1, t2, sched)?.with_blend(blend);
        let rwp = evaluate(&plan)?;
        let m = median(&rwp).ok_or_else(|| Error::Empty("no evaluation samples".into()))?;
        medians.insert((t1, t2), m);
        plans.push(plan);
    }
    let baseline = medians[&(full, full)];
    let bound = (1.0 + slack) * baseline;
    let mut rows = Vec::with_capacity(plans.len());
    let mut best: Option<SkipPlan> = None;
    for plan in &plans {
        let m = medians[&(plan.t1, plan.t2)];
        let feasible = (plan.t1, plan.t2) == (full, full) || m <= bound;
        rows.push(TuneRow { t1: plan.t1, t2: plan.t2, median_rwp: m, feasible });
        if feasible {
            let better = match &best {
                None => true,
                Some(b) => {
                    let mb = medians[&(b.t1, b.t2)];
                    plan.interval() > b.interval() || (plan.interval() == b.interval() && m < mb)
                }
            };
            if better {
                best = Some(*plan);
            }
        }
    }
    Ok(TuneReport { chosen: best.expect("baseline is always feasible"), baseline_median: baseline, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_schedule_product() {
        let s = NoiseSchedule::constant(5, 0.1).unwrap();
        assert!((s.alpha_bar(3) - 0.729).abs() < 1e-15);
        let one = NoiseSchedule::linear(1, 0.02, 0.02).unwrap();
        assert_eq!(one.alpha_bar(1), 1.0 - 0.02);
        assert!(NoiseSchedule::linear(10, 0.5, 0.1).is_err());
        assert!(NoiseSchedule::linear(0, 0.1, 0.1).is_err());
    }

    #[test]
    fn q_sample_closed_form() {
        let s = NoiseSchedule::constant(3, 0.1).unwrap();
        let z = q_sample(&Tensor::<f64>::scalar(1.0), 3, &Tensor::scalar(0.0), &s).unwrap();
        assert!((z.data()[0] - 0.853815).abs() < 1e-6);
        let z = q_sample(&Tensor::<f64>::scalar(0.0), 3, &Tensor::scalar(1.0), &s).unwrap();
        assert!((z.data()[0] - 0.520577).abs() < 1e-6);
    }

    #[test]
    fn final_step_is_deterministic() {
        let s = NoiseSchedule::constant(1, 0.1).unwrap();
        let mut rng = RngStream::new(0);
        let z0 = ancestral_step(&Tensor::<f64>::scalar(1.0), 1, &Tensor::scalar(0.5), &s, &mut rng).unwrap();
        assert!((z0.data()[0] - 0.8874259).abs() < 1e-6);
        assert_eq!(rng.counter(), 0);
        assert!(ancestral_step(&Tensor::<f64>::scalar(1.0), 2, &Tensor::scalar(0.5), &s, &mut rng).is_err());
    }

    #[test]
    fn plan_coefficients() {
        let s = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
        let p = SkipPlan::new(0, 60, &s).unwrap();
        assert_eq!((p.u, p.a), (0.0, 1.0));
        let p = SkipPlan::new(30, 30, &s).unwrap();
        assert_eq!((p.u, p.a), (1.0, 0.0));
        assert!(matches!(SkipPlan::new(40, 30, &s), Err(Error::Plan(_))));
    }

    #[test]
    fn tuning_keeps_baseline() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let r = tune_skip(&[(10, 10)], &s, 0.1, BlendSource::Noised, |_| Ok(vec![0.3, 0.2, 0.4])).unwrap();
        assert_eq!((r.chosen.t1, r.chosen.t2), (10, 10));
        assert_eq!(r.rows.len(), 1);
        let r = tune_skip(&[(0, 10)], &s, 0.1, BlendSource::Noised, |p| Ok(vec![if p.t1 == 0 { 0.9 } else { 0.3 }]))
            .unwrap();
        assert_eq!((r.chosen.t1, r.chosen.t2), (10, 10));
        assert!(!r.rows[1].feasible);
        assert!(tune_skip(&[], &s, 0.1, BlendSource::Noised, |_| Ok(vec![0.0])).is_err());
    }
}
