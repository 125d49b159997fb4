//! Pair distribution function simulation through the Debye scattering equation.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::structgen::{dist, AtomCloud};

/// Simulation grid and broadening parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DebyeParams {
    pub r_min: f64,
    pub r_max: f64,
    pub r_step: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub q_damp: f64,
    pub b_iso: f64,
    pub delta2: f64,
}

impl Default for DebyeParams {
    fn default() -> Self {
        Self { r_min: 0.0, r_max: 30.0, r_step: 0.01, q_min: 0.7, q_max: 25.0, q_damp: 0.0, b_iso: 0.3, delta2: 0.0 }
    }
}

/// Upper bound on the Q step of the Simpson quadrature.
pub const Q_STEP: f64 = 0.005;

impl DebyeParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.r_min, self.r_max, self.r_step, self.q_min, self.q_max, self.q_damp, self.b_iso, self.delta2];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam("non-finite PDF parameter".into()));
        }
        if self.r_min >= self.r_max || self.r_step <= 0.0 {
            return Err(Error::InvalidParam(format!("r grid {}..{} step {}", self.r_min, self.r_max, self.r_step)));
        }
        if self.q_min >= self.q_max || self.q_min < 0.0 {
            return Err(Error::InvalidParam(format!("Q range {}..{}", self.q_min, self.q_max)));
        }
        if self.q_damp < 0.0 || self.b_iso < 0.0 {
            return Err(Error::InvalidParam(format!("q_damp {} / b_iso {}", self.q_damp, self.b_iso)));
        }
        if self.delta2 != 0.0 {
            return Err(Error::Unsupported(format!("delta2 = {} (only 0 is supported)", self.delta2)));
        }
        if self.grid_len() == 0 {
            return Err(Error::InvalidParam("empty r grid".into()));
        }
        Ok(())
    }

    pub fn grid_len(&self) -> usize {
        ((self.r_max - self.r_min) / self.r_step).round() as usize
    }

    pub fn r_at(&self, i: usize) -> f64 {
        self.r_min + i as f64 * self.r_step
    }

    pub fn r_grid(&self) -> Vec<f64> {
        (0..self.grid_len()).map(|i| self.r_at(i)).collect()
    }

    /// Simpson nodes covering `[q_min, q_max]` with an even number of intervals.
    pub fn q_grid(&self, max_step: f64) -> Vec<f64> {
        let span = self.q_max - self.q_min;
        let mut m = (span / max_step).ceil() as usize;
        m += m % 2;
        let m = m.max(2);
        let h = span / m as f64;
        (0..=m).map(|i| self.q_min + i as f64 * h).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PdfCurve {
    pub params: DebyeParams,
    pub g: Vec<f64>,
}

impl PdfCurve {
    pub fn new(params: DebyeParams, g: Vec<f64>) -> Result<Self> {
        if g.len() != params.grid_len() {
            return Err(Error::InvalidParam(format!("{} samples for a {}-point grid", g.len(), params.grid_len())));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("PDF sample".into()));
        }
        Ok(Self { params, g })
    }

    pub fn r_grid(&self) -> Vec<f64> {
        self.params.r_grid()
    }

    pub fn max_abs(&self) -> f64 {
        self.g.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Scaled so the largest magnitude is 1; an all-zero curve is returned unchanged.
    pub fn normalized(&self) -> Self {
        let m = self.max_abs();
        let g = if m > 0.0 { self.g.iter().map(|v| v / m).collect() } else { self.g.clone() };
        Self { params: self.params, g }
    }

    /// Multiplies by the instrument envelope `exp(-(q_damp r)^2 / 2)`.
    pub fn damped(&self, q_damp: f64) -> Self {
        let g = self
            .g
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let r = self.params.r_at(i);
                v * (-(q_damp * r).powi(2) / 2.0).exp()
            })
            .collect();
        Self { params: DebyeParams { q_damp: self.params.q_damp + q_damp, ..self.params }, g }
    }

    /// Linear interpolation of arbitrary increasing samples onto `params`'s grid;
    /// points outside the sampled range are 0.
    pub fn resample(r: &[f64], g: &[f64], params: DebyeParams) -> Result<Self> {
        params.validate()?;
        if r.len() != g.len() || r.len() < 2 {
            return Err(Error::InvalidParam("resample needs at least two (r, G) pairs".into()));
        }
        if r.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParam("resample grid must be strictly increasing".into()));
        }
        let mut out = Vec::with_capacity(params.grid_len());
        let mut k = 0;
        for i in 0..params.grid_len() {
            let x = params.r_at(i);
            if x < r[0] || x > r[r.len() - 1] {
                out.push(0.0);
                continue;
            }
            while k + 2 < r.len() && r[k + 1] <= x {
                k += 1;
            }
            if x == r[k + 1] {
                out.push(g[k + 1]);
                continue;
            }
            let t = (x - r[k]) / (r[k + 1] - r[k]);
            out.push(g[k] + t.clamp(0.0, 1.0) * (g[k + 1] - g[k]));
        }
        PdfCurve::new(params, out)
    }
}

fn pair_distances(cloud: &AtomCloud) -> Result<Vec<f64>> {
    let c = cloud.coords();
    let mut d = Vec::with_capacity(c.len() * c.len().saturating_sub(1) / 2);
    for i in 0..c.len() {
        for j in i + 1..c.len() {
            let r = dist(&c[i], &c[j]);
            if r == 0.0 {
                return Err(Error::DuplicateAtoms(i, j));
            }
            d.push(r);
        }
    }
    Ok(d)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// `F(Q) = Q (2/N) sum_{i<j} sinc(Q r_ij) exp(-B Q^2 / (8 pi^2))` with unit scattering factors.
pub fn debye_structure_function(cloud: &AtomCloud, params: &DebyeParams, q_grid: &[f64]) -> Result<Vec<f64>> {
    if cloud.is_empty() {
        return Err(Error::InvalidParam("empty atom cloud".into()));
    }
    if q_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParam("Q grid must be strictly increasing".into()));
    }
    let tol = 1e-9 * params.q_max.abs().max(1.0);
    if q_grid.iter().any(|&q| q < params.q_min - tol || q > params.q_max + tol) {
        return Err(Error::InvalidParam(format!("Q grid outside [{}, {}]", params.q_min, params.q_max)));
    }
    let d = pair_distances(cloud)?;
    let n = cloud.len() as f64;
    Ok(q_grid
        .iter()
        .map(|&q| {
            let s: f64 = d.iter().map(|&r| sinc(q * r)).sum();
            let dw = (-params.b_iso * q * q / (8.0 * PI * PI)).exp();
            q * 2.0 / n * s * dw
        })
        .collect())
}

/// Sine transform of `F(Q)` by composite Simpson, before the damping envelope.
fn sine_transform(fq: &[f64], q: &[f64], params: &DebyeParams) -> Vec<f64> {
    let m = q.len() - 1;
    let h = (q[m] - q[0]) / m as f64;
    let weights: Vec<f64> = (0..=m)
        .map(|i| {
            let w = if i == 0 || i == m {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            w * h / 3.0 * fq[i]
        })
        .collect();
    (0..params.grid_len())
        .map(|k| {
            let r = params.r_at(k);
            let s: f64 = weights.iter().zip(q).map(|(w, &qi)| w * (qi * r).sin()).sum();
            2.0 / PI * s
        })
        .collect()
}

/// Simulated G(r) with Simpson step bounded by `max_q_step`.
pub fn pdf_with_q_step(cloud: &AtomCloud, params: &DebyeParams, max_q_step: f64) -> Result<PdfCurve> {
    params.validate()?;
    let q = params.q_grid(max_q_step);
    let fq = debye_structure_function(cloud, params, &q)?;
    let raw = sine_transform(&fq, &q, params);
    let undamped = PdfCurve::new(DebyeParams { q_damp: 0.0, ..*params }, raw)?;
    Ok(undamped.damped(params.q_damp))
}

pub fn pdf_from_structure(cloud: &AtomCloud, params: &DebyeParams) -> Result<PdfCurve> {
    pdf_with_q_step(cloud, params, Q_STEP)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub bin_width: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn bin_center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.bin_width
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Pair counts over `[0, r_max)` in bins of `bin_width`; longer pairs land in the last bin.
pub fn distance_histogram(cloud: &AtomCloud, bin_width: f64, r_max: f64) -> Result<Histogram> {
    if !(bin_width > 0.0) || !(r_max > 0.0) {
        return Err(Error::InvalidParam(format!("bin width {bin_width} / r_max {r_max}")));
    }
    let nbins = (r_max / bin_width).ceil() as usize;
    let mut counts = vec![0; nbins.max(1)];
    for d in cloud.pair_distances() {
        let b = ((d / bin_width).floor() as usize).min(counts.len() - 1);
        counts[b] += 1;
    }
    Ok(Histogram { bin_width, counts })
}

/// Indices of strict local maxima, largest value first.
pub fn peak_indices(values: &[f64], count: usize) -> Vec<usize> {
    let mut peaks: Vec<usize> = (1..values.len().saturating_sub(1))
        .filter(|&i| values[i] > values[i - 1] && values[i] >= values[i + 1])
        .collect();
    peaks.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    peaks.truncate(count);
    peaks
}
