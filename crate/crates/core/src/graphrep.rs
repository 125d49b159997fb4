//! Gaussian-kernel graph Laplacians of atom clouds, padded to a fixed size.

use crate::error::{Error, Result};
use crate::structgen::AtomCloud;

pub const DEFAULT_SIGMA: f64 = 5.0;

/// `n_max x n_max` row-major Laplacian; atoms occupy the leading `n_atoms`
/// rows and columns, the rest is zero. Stored divided by `norm_constant`.
#[derive(Clone, Debug, PartialEq)]
pub struct LaplacianImage {
    pub matrix: Vec<f64>,
    pub n_max: usize,
    pub n_atoms: usize,
    pub sigma: f64,
    pub norm_constant: f64,
}

impl LaplacianImage {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.n_max + j]
    }

    /// Leading `n_atoms x n_atoms` block in physical (un-normalized) units.
    pub fn block(&self) -> Vec<f64> {
        let n = self.n_atoms;
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                out.push(self.at(i, j) * self.norm_constant);
            }
        }
        out
    }

    /// Same matrix with the normalization divisor changed to `c`.
    pub fn renormalized(&self, c: f64) -> Self {
        let f = self.norm_constant / c;
        Self { matrix: self.matrix.iter().map(|v| v * f).collect(), norm_constant: c, ..self.clone() }
    }
}

/// Kernel weight `exp(-d^2 / (2 sigma^2))`.
pub fn kernel(d2: f64, sigma: f64) -> f64 {
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// `L = D - W` of the leading `n` atoms, `W_ii = 0`, as an `n x n` row-major block.
pub fn laplacian_block(coords: &[[f64; 3]], sigma: f64) -> Vec<f64> {
    let n = coords.len();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d2 = (0..3).map(|k| (coords[i][k] - coords[j][k]).powi(2)).sum::<f64>();
            let w = kernel(d2, sigma);
            l[i * n + j] = -w;
            l[j * n + i] = -w;
            l[i * n + i] += w;
            l[j * n + j] += w;
        }
    }
    l
}

pub fn laplacian_encode(cloud: &AtomCloud, sigma: f64, n_max: usize) -> Result<LaplacianImage> {
    encode_with_norm(cloud, sigma, n_max, n_max as f64)
}

pub fn encode_with_norm(cloud: &AtomCloud, sigma: f64, n_max: usize, norm_constant: f64) -> Result<LaplacianImage> {
    let n = cloud.len();
    if n > n_max {
        return Err(Error::Capacity { n, n_max });
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParam(format!("sigma {sigma}")));
    }
    if !(norm_constant > 0.0) {
        return Err(Error::InvalidParam(format!("norm constant {norm_constant}")));
    }
    let block = laplacian_block(cloud.coords(), sigma);
    let mut matrix = vec![0.0; n_max * n_max];
    for i in 0..n {
        for j in 0..n {
            matrix[i * n_max + j] = block[i * n + j] / norm_constant;
        }
    }
    Ok(LaplacianImage { matrix, n_max, n_atoms: n, sigma, norm_constant })
}

/// Four `(n/2) x (n/2)` quadrants in order top-left, top-right, bottom-left,
/// bottom-right, concatenated row-major.
pub fn block_split(matrix: &[f64], n: usize) -> Result<Vec<f64>> {
    if n % 2 != 0 || matrix.len() != n * n {
        return Err(Error::shape("block_split", format!("{} entries for side {n}", matrix.len())));
    }
    let h = n / 2;
    let mut out = Vec::with_capacity(n * n);
    for (r0, c0) in [(0, 0), (0, h), (h, 0), (h, h)] {
        for i in 0..h {
            out.extend_from_slice(&matrix[(r0 + i) * n + c0..(r0 + i) * n + c0 + h]);
        }
    }
    Ok(out)
}

pub fn block_merge(blocks: &[f64], n: usize) -> Result<Vec<f64>> {
    if n % 2 != 0 || blocks.len() != n * n {
        return Err(Error::shape("block_merge", format!("{} entries for side {n}", blocks.len())));
    }
    let h = n / 2;
    let mut out = vec![0.0; n * n];
    for (q, (r0, c0)) in [(0, 0), (0, h), (h, 0), (h, h)].into_iter().enumerate() {
        for i in 0..h {
            let src = &blocks[q * h * h + i * h..q * h * h + (i + 1) * h];
            out[(r0 + i) * n + c0..(r0 + i) * n + c0 + h].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Diagonals below this fraction of the largest one are treated as noise, not as
/// positive entries.
pub const DIAGONAL_NOISE_FLOOR: f64 = 0.05;

/// Number of rows whose diagonal exceeds half the median positive diagonal.
/// "Positive" means above `DIAGONAL_NOISE_FLOOR` times the largest diagonal.
pub fn infer_atom_count(matrix: &[f64], n: usize) -> usize {
    let diag: Vec<f64> = (0..n).map(|i| matrix[i * n + i]).collect();
    let top = diag.iter().fold(0.0f64, |m, &d| m.max(d));
    if !(top > 0.0) {
        return 0;
    }
    let mut pos: Vec<f64> = diag.iter().copied().filter(|&d| d > DIAGONAL_NOISE_FLOOR * top).collect();
    pos.sort_by(f64::total_cmp);
    let median = if pos.len() % 2 == 1 {
        pos[pos.len() / 2]
    } else {
        0.5 * (pos[pos.len() / 2 - 1] + pos[pos.len() / 2])
    };
    diag.iter().filter(|&&d| d > 0.5 * median).count()
}

/// Projects a raw square matrix (model output in normalized units) onto a valid
/// Laplacian: symmetric average, atom count inference, clamp of off-diagonals to
/// `<= 0` and diagonal reset to the negated off-diagonal row sum.
///
/// Rows are assumed to be ordered with atoms first, so the leading inferred-count
/// block is kept and everything beyond it is zeroed.
pub fn symmetrize(raw: &[f64], n_max: usize, sigma: f64, norm_constant: f64) -> Result<LaplacianImage> {
    if raw.len() != n_max * n_max {
        return Err(Error::shape("symmetrize", format!("{} entries for side {n_max}", raw.len())));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("symmetrize input".into()));
    }
    let mut m = vec![0.0; n_max * n_max];
    for i in 0..n_max {
        for j in 0..n_max {
            m[i * n_max + j] = 0.5 * (raw[i * n_max + j] + raw[j * n_max + i]);
        }
    }
    let n = infer_atom_count(&m, n_max);
    if n < 2 {
        return Err(Error::Degenerate(format!("inferred atom count {n}")));
    }
    let mut matrix = vec![0.0; n_max * n_max];
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            if i != j {
                let v = m[i * n_max + j].min(0.0);
                matrix[i * n_max + j] = v;
                row += v;
            }
        }
        matrix[i * n_max + i] = -row;
    }
    Ok(LaplacianImage { matrix, n_max, n_atoms: n, sigma, norm_constant })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dimer_block_values() {
        let d = 2f64.sqrt();
        let l = laplacian_block(&[[0.0; 3], [d, 0.0, 0.0]], 1.0);
        let w = (-1.0f64).exp();
        assert!((l[0] - w).abs() < 1e-15 && (l[1] + w).abs() < 1e-15);
        assert!((l[0] - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn single_atom_is_zero() {
        let c = AtomCloud::new(vec![[1.0, 1.0, 1.0]], None, 4.0);
        let img = laplacian_encode(&c, 5.0, 4).unwrap();
        assert_eq!(img.at(0, 0), 0.0);
        assert_eq!(img.n_atoms, 1);
    }

    #[test]
    fn capacity_is_enforced() {
        let c = AtomCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], None, 4.0);
        assert!(matches!(laplacian_encode(&c, 5.0, 2), Err(Error::Capacity { n: 3, n_max: 2 })));
    }

    #[test]
    fn quadrant_placement() {
        let m: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let b = block_split(&m, 4).unwrap();
        assert_eq!(&b[0..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&b[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&b[8..12], &[8.0, 9.0, 12.0, 13.0]);
        assert_eq!(&b[12..16], &[10.0, 11.0, 14.0, 15.0]);
        assert_eq!(block_merge(&b, 4).unwrap(), m);
        assert!(block_split(&m[..9], 3).is_err());
    }

    #[test]
    fn symmetrize_averages_and_clamps() {
        let raw = vec![0.6, -0.2, 0.1, -0.4, 0.6, 0.0, 0.1, 0.0, 0.0];
        let img = symmetrize(&raw, 3, 5.0, 1.0).unwrap();
        assert_eq!(img.n_atoms, 2);
        assert!((img.at(0, 1) + 0.3).abs() < 1e-15);
        assert!((img.at(0, 0) - 0.3).abs() < 1e-15);
        assert_eq!(img.at(2, 0), 0.0);
    }

    #[test]
    fn symmetrize_rejects_empty() {
        assert!(matches!(symmetrize(&[0.0; 4], 2, 5.0, 1.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn small_padding_noise_is_not_counted() {
        let n = 8;
        let mut m = vec![0.0; n * n];
        for i in 0..3 {
            m[i * n + i] = 0.2 + 0.05 * i as f64;
        }
        for i in 3..n {
            m[i * n + i] = 1e-3 * i as f64;
        }
        assert_eq!(infer_atom_count(&m, n), 3);
        m[7 * n + 7] = 0.15;
        assert_eq!(infer_atom_count(&m, n), 4);
    }
}
