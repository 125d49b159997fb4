//! Coordinates from a Laplacian target: spectral initialization, local
//! refinement of the Laplacian misfit, and rigid alignment for evaluation.

use std::collections::VecDeque;

use nalgebra::{DMatrix, Matrix3, SymmetricEigen};

use crate::error::{Error, Result};
use crate::graphrep::{kernel, LaplacianImage};

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralInit {
    pub coords: Vec<[f64; 3]>,
    /// Selected generalized eigenvalues, ascending.
    pub eigenvalues: Vec<f64>,
}

/// Generalized eigenpairs `L y = lambda D y` of a dense `n x n` Laplacian with
/// `D = diag(L)`. Returns eigenvalues ascending with `D`-orthonormal vectors.
pub fn generalized_eigen(l: &[f64], n: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if l.len() != n * n || n == 0 {
        return Err(Error::shape("generalized_eigen", format!("{} entries for side {n}", l.len())));
    }
    let d: Vec<f64> = (0..n).map(|i| l[i * n + i]).collect();
    if let Some(i) = d.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::InvalidLaplacian(format!("degree of row {i} is {}", d[i])));
    }
    let inv_sqrt: Vec<f64> = d.iter().map(|v| 1.0 / v.sqrt()).collect();
    let m = DMatrix::from_fn(n, n, |i, j| {
        let a = l[i * n + j] * inv_sqrt[i] * inv_sqrt[j];
        let b = l[j * n + i] * inv_sqrt[i] * inv_sqrt[j];
        0.5 * (a + b)
    });
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = order
        .iter()
        .map(|&k| (0..n).map(|i| eig.eigenvectors[(i, k)] * inv_sqrt[i]).collect())
        .collect();
    Ok((values, vectors))
}

/// Relative threshold below which an eigenvalue counts as null.
pub const NULL_EIGEN_RTOL: f64 = 1e-8;

/// Eigenvectors of the three smallest positive generalized eigenvalues, each
/// scaled by `1/sqrt(lambda)`, as the columns of an `n x 3` coordinate set.
/// Two- and three-atom inputs yield one or two nonzero columns.
pub fn spectral_embed(img: &LaplacianImage) -> Result<SpectralInit> {
    let n = img.n_atoms;
    if n < 2 {
        return Err(Error::Degenerate(format!("{n} atoms cannot be embedded")));
    }
    let (values, vectors) = generalized_eigen(&img.block(), n)?;
    let lmax = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let picked: Vec<usize> = (0..n).filter(|&k| values[k] > NULL_EIGEN_RTOL * lmax).take(3).collect();
    let want = 3.min(n - 1);
    if picked.len() < want {
        return Err(Error::Degenerate(format!("{} positive eigenvalues, need {want}", picked.len())));
    }
    let mut coords = vec![[0.0; 3]; n];
    for (c, &k) in picked.iter().enumerate() {
        let s = 1.0 / values[k].sqrt();
        for (i, p) in coords.iter_mut().enumerate() {
            p[c] = vectors[k][i] * s;
        }
    }
    Ok(SpectralInit { coords, eigenvalues: picked.iter().map(|&k| values[k]).collect() })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineOptions {
    pub max_iterations: usize,
    pub grad_tol: f64,
    pub f_tol: f64,
    pub memory: usize,
    /// Rescale the start isotropically to the best 1-D fit before iterating.
    pub rescale_init: bool,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self { max_iterations: 5000, grad_tol: 1e-8, f_tol: 1e-12, memory: 12, rescale_init: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineResult {
    pub coords: Vec<[f64; 3]>,
    pub final_mse: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Mean squared misfit `f(Z) = (1/n^2) sum_ij (L(Z)_ij - T_ij)^2` and its gradient.
pub struct LaplacianMisfit {
    target: Vec<f64>,
    n: usize,
    sigma: f64,
}

impl LaplacianMisfit {
    /// `target` is an `n x n` block in physical units.
    pub fn new(target: Vec<f64>, n: usize, sigma: f64) -> Result<Self> {
        if target.len() != n * n || n == 0 {
            return Err(Error::shape("refine_coords", format!("{} entries for side {n}", target.len())));
        }
        if !(sigma > 0.0) {
            return Err(Error::InvalidParam(format!("sigma {sigma}")));
        }
        Ok(Self { target, n, sigma })
    }

    pub fn from_image(img: &LaplacianImage) -> Result<Self> {
        Self::new(img.block(), img.n_atoms, img.sigma)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn weights(&self, z: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let d2: f64 = (0..3).map(|k| (z[3 * i + k] - z[3 * j + k]).powi(2)).sum();
                let v = kernel(d2, self.sigma);
                w[i * n + j] = v;
                w[j * n + i] = v;
            }
        }
        w
    }

    fn residual(&self, w: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut r = vec![0.0; n * n];
        for i in 0..n {
            let mut deg = 0.0;
            for j in 0..n {
                if i != j {
                    deg += w[i * n + j];
                    r[i * n + j] = -w[i * n + j] - self.target[i * n + j];
                }
            }
            r[i * n + i] = deg - self.target[i * n + i];
        }
        r
    }

    /// Objective at flat coordinates `z` (`3n` values).
    pub fn value(&self, z: &[f64]) -> f64 {
        let r = self.residual(&self.weights(z));
        r.iter().map(|v| v * v).sum::<f64>() / (self.n * self.n) as f64
    }

    pub fn value_and_gradient(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let n = self.n;
        let w = self.weights(z);
        let r = self.residual(&w);
        let f = r.iter().map(|v| v * v).sum::<f64>() / (n * n) as f64;
        let c = 2.0 / (n * n) as f64 / (self.sigma * self.sigma);
        let mut g = vec![0.0; 3 * n];
        for i in 0..n {
            for j in i + 1..n {
                let gij = -r[i * n + j] - r[j * n + i] + r[i * n + i] + r[j * n + j];
                let s = c * gij * w[i * n + j];
                for k in 0..3 {
                    let dz = z[3 * j + k] - z[3 * i + k];
                    g[3 * i + k] += s * dz;
                    g[3 * j + k] -= s * dz;
                }
            }
        }
        (f, g)
    }
}

fn flatten(coords: &[[f64; 3]]) -> Vec<f64> {
    coords.iter().flat_map(|p| p.iter().copied()).collect()
}

fn unflatten(z: &[f64]) -> Vec<[f64; 3]> {
    z.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Golden-section search of `f(s z)` over `log s`, returning the best scale.
fn best_scale(obj: &LaplacianMisfit, z: &[f64]) -> f64 {
    let rms = (dot(z, z) / (z.len().max(1) as f64)).sqrt();
    if !(rms > 0.0) || !rms.is_finite() {
        return 1.0;
    }
    let eval = |ls: f64| {
        let s = ls.exp();
        let scaled: Vec<f64> = z.iter().map(|v| v * s).collect();
        obj.value(&scaled)
    };
    // Bracket scales putting the cloud between 0.01 sigma and 10 sigma rms.
    let mut lo = (0.01 * obj.sigma / rms).ln();
    let mut hi = (10.0 * obj.sigma / rms).ln();
    let grid = 40;
    let mut best = (f64::INFINITY, 0.0);
    for k in 0..=grid {
        let ls = lo + (hi - lo) * k as f64 / grid as f64;
        let f = eval(ls);
        if f < best.0 {
            best = (f, ls);
        }
    }
    let step = (hi - lo) / grid as f64;
    lo = best.1 - step;
    hi = best.1 + step;
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (hi - g * (hi - lo), lo + g * (hi - lo));
    let (mut fa, mut fb) = (eval(a), eval(b));
    for _ in 0..60 {
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - g * (hi - lo);
            fa = eval(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + g * (hi - lo);
            fb = eval(b);
        }
    }
    let ls = if fa < fb { a } else { b };
    if eval(ls) < best.0 {
        ls.exp()
    } else {
        best.1.exp()
    }
}

/// Limited-memory quasi-Newton descent with monotone backtracking acceptance.
pub fn refine_coords(target: &LaplacianImage, init: &[[f64; 3]], opts: &RefineOptions) -> Result<RefineResult> {
    let obj = LaplacianMisfit::from_image(target)?;
    refine_with(&obj, init, opts)
}

pub fn refine_with(obj: &LaplacianMisfit, init: &[[f64; 3]], opts: &RefineOptions) -> Result<RefineResult> {
    if init.len() != obj.n {
        return Err(Error::shape("refine_coords", format!("{} initial atoms for a {}-atom target", init.len(), obj.n)));
    }
    let mut z = flatten(init);
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial coordinates".into()));
    }
    let (mut f, mut g) = obj.value_and_gradient(&z);
    if !f.is_finite() {
        return Err(Error::RefineDiverged { iteration: 0, last_good: init.to_vec() });
    }
    let done = |f: f64, g: &[f64]| f < opts.f_tol || inf_norm(g) < opts.grad_tol;
    if done(f, &g) {
        return Ok(RefineResult { coords: init.to_vec(), final_mse: f, iterations: 0, converged: true });
    }
    if opts.rescale_init {
        let s = best_scale(obj, &z);
        let scaled: Vec<f64> = z.iter().map(|v| v * s).collect();
        let (fs, gs) = obj.value_and_gradient(&scaled);
        if fs.is_finite() && fs < f {
            z = scaled;
            f = fs;
            g = gs;
        }
    }
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut iterations = 0;
    let mut converged = done(f, &g);
    while !converged && iterations < opts.max_iterations {
        iterations += 1;
        let mut dir = two_loop(&g, &history);
        let mut slope = dot(&dir, &g);
        if !(slope < 0.0) {
            history.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let mut step = if history.is_empty() { (1.0 / inf_norm(&g)).min(1.0) } else { 1.0 };
        let mut accepted = None;
        let mut saw_finite = false;
        for _ in 0..80 {
            let trial: Vec<f64> = z.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let (ft, gt) = obj.value_and_gradient(&trial);
            if ft.is_finite() && gt.iter().all(|v| v.is_finite()) {
                saw_finite = true;
                if ft <= f + 1e-4 * step * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        match accepted {
            Some((zn, fn_, gn)) => {
                let s: Vec<f64> = zn.iter().zip(&z).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-16 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
                    if history.len() == opts.memory {
                        history.pop_front();
                    }
                    history.push_back((s, y, 1.0 / sy));
                }
                z = zn;
                f = fn_;
                g = gn;
                converged = done(f, &g);
            }
            None if !saw_finite => {
                return Err(Error::RefineDiverged { iteration: iterations, last_good: unflatten(&z) });
            }
            None if !history.is_empty() => history.clear(),
            None => break,
        }
    }
    Ok(RefineResult { coords: unflatten(&z), final_mse: f, iterations, converged })
}

fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in &mut q {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter().map(|v| -v).collect()
}

/// RMSD after centring both sets and applying the optimal orthogonal map
/// (rotations and reflections) taking `a` onto `b`.
pub fn align_rmsd(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::InvalidParam("alignment of empty point sets".into()));
    }
    if a.len() != b.len() {
        return Err(Error::shape("align_rmsd", format!("{} vs {} points", a.len(), b.len())));
    }
    let center = |p: &[[f64; 3]]| {
        let n = p.len() as f64;
        let mut c = [0.0; 3];
        for q in p {
            for k in 0..3 {
                c[k] += q[k] / n;
            }
        }
        p.iter().map(|q| [q[0] - c[0], q[1] - c[1], q[2] - c[2]]).collect::<Vec<_>>()
    };
    let (pa, pb) = (center(a), center(b));
    let mut h = Matrix3::<f64>::zeros();
    for (x, y) in pa.iter().zip(&pb) {
        for r in 0..3 {
            for c in 0..3 {
                h[(r, c)] += x[r] * y[c];
            }
        }
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let rot = (u * vt).transpose();
    let mut sum = 0.0;
    for (x, y) in pa.iter().zip(&pb) {
        for r in 0..3 {
            let mapped: f64 = (0..3).map(|c| rot[(r, c)] * x[c]).sum();
            sum += (mapped - y[r]).powi(2);
        }
    }
    Ok((sum / a.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphrep::laplacian_block;

    fn image(coords: &[[f64; 3]], sigma: f64) -> LaplacianImage {
        let n = coords.len();
        LaplacianImage { matrix: laplacian_block(coords, sigma), n_max: n, n_atoms: n, sigma, norm_constant: 1.0 }
    }

    #[test]
    fn two_atom_eigenpair() {
        let (vals, vecs) = generalized_eigen(&[0.7, -0.7, -0.7, 0.7], 2).unwrap();
        assert!(vals[0].abs() < 1e-12);
        assert!((vals[1] - 2.0).abs() < 1e-12);
        assert!((vecs[1][0] + vecs[1][1]).abs() < 1e-12);
    }

    #[test]
    fn rejects_nonpositive_degree() {
        assert!(matches!(generalized_eigen(&[0.0, 0.0, 0.0, 1.0], 2), Err(Error::InvalidLaplacian(_))));
    }

    #[test]
    fn exact_start_is_a_fixed_point() {
        let c = [[0.0, 0.0, 0.0], [2.0, 0.1, 0.0], [0.3, 2.2, 0.4], [0.5, 0.7, 2.1]];
        let r = refine_coords(&image(&c, 5.0), &c, &RefineOptions::default()).unwrap();
        assert_eq!(r.iterations, 0);
        assert!(r.converged && r.final_mse < 1e-14);
    }

    #[test]
    fn mirror_and_rotation_align_to_zero() {
        let a = [[1.0, 2.0, 3.0], [-1.0, 0.5, 2.0], [0.0, -2.0, 1.0], [2.0, 1.0, -1.0]];
        let rot: Vec<[f64; 3]> = a.iter().map(|p| [-p[1], p[0], p[2]]).collect();
        let mirror: Vec<[f64; 3]> = a.iter().map(|p| [-p[0], p[1], p[2]]).collect();
        assert!(align_rmsd(&a, &rot).unwrap() < 1e-12);
        assert!(align_rmsd(&a, &mirror).unwrap() < 1e-12);
        assert!(align_rmsd(&a, &a).unwrap() < 1e-12);
        assert!(align_rmsd(&[], &[]).is_err());
    }
}
