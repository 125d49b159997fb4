//! Mono-metallic cluster generation and labelled dataset assembly.
//!
//! `lattice_constant` is always the cubic cell edge `a`. Close-packed kinds
//! (HCP, icosahedra, decahedra, octahedra) use the FCC nearest-neighbour distance
//! `a / sqrt(2)` so that all seven kinds share one length scale.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StructureKind {
    Fcc,
    Bcc,
    Sc,
    Hcp,
    Ico,
    Dec,
    Oct,
}

impl StructureKind {
    pub const ALL: [StructureKind; 7] = [
        StructureKind::Fcc,
        StructureKind::Bcc,
        StructureKind::Sc,
        StructureKind::Hcp,
        StructureKind::Ico,
        StructureKind::Dec,
        StructureKind::Oct,
    ];

    pub fn label(self) -> &'static str {
        match self {
            StructureKind::Fcc => "FCC",
            StructureKind::Bcc => "BCC",
            StructureKind::Sc => "SC",
            StructureKind::Hcp => "HCP",
            StructureKind::Ico => "ICO",
            StructureKind::Dec => "DEC",
            StructureKind::Oct => "OCT",
        }
    }

    pub fn is_lattice(self) -> bool {
        matches!(self, StructureKind::Fcc | StructureKind::Bcc | StructureKind::Sc | StructureKind::Hcp)
    }
}

impl fmt::Display for StructureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for StructureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StructureKind::ALL
            .into_iter()
            .find(|k| k.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidParam(format!("unknown structure kind {s:?}")))
    }
}

/// Cartesian coordinates (Å) of a single-species cluster, centred on its centroid.
#[derive(Clone, Debug, PartialEq)]
pub struct AtomCloud {
    coords: Vec<[f64; 3]>,
    kind: Option<StructureKind>,
    lattice_constant: f64,
}

impl AtomCloud {
    /// Wraps raw coordinates and recentres them on the centroid.
    pub fn new(coords: Vec<[f64; 3]>, kind: Option<StructureKind>, lattice_constant: f64) -> Self {
        let mut cloud = Self { coords, kind, lattice_constant };
        cloud.center();
        cloud
    }

    /// Coordinates taken as-is (no recentring).
    pub fn from_raw(coords: Vec<[f64; 3]>, kind: Option<StructureKind>, lattice_constant: f64) -> Self {
        Self { coords, kind, lattice_constant }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn kind(&self) -> Option<StructureKind> {
        self.kind
    }

    pub fn lattice_constant(&self) -> f64 {
        self.lattice_constant
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.coords.len().max(1) as f64;
        let mut c = [0.0; 3];
        for p in &self.coords {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    fn center(&mut self) {
        let c = self.centroid();
        for p in &mut self.coords {
            for k in 0..3 {
                p[k] -= c[k];
            }
        }
    }

    /// Unordered pair distances in `(i, j)` order with `i < j`.
    pub fn pair_distances(&self) -> Vec<f64> {
        let n = self.coords.len();
        let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                out.push(dist(&self.coords[i], &self.coords[j]));
            }
        }
        out
    }

    pub fn min_distance(&self) -> Option<f64> {
        self.pair_distances().into_iter().reduce(f64::min)
    }

    /// Sorted pair distances rounded to 1e-4 Å, as integer multiples of 1e-4.
    pub fn distance_key(&self) -> Vec<i64> {
        let mut d: Vec<i64> = self.pair_distances().iter().map(|d| (d * 1e4).round() as i64).collect();
        d.sort_unstable();
        d
    }

    pub fn transformed(&self, rotation: &[[f64; 3]; 3], shift: [f64; 3]) -> Self {
        let coords = self
            .coords
            .iter()
            .map(|p| {
                let mut q = shift;
                for r in 0..3 {
                    for c in 0..3 {
                        q[r] += rotation[r][c] * p[c];
                    }
                }
                q
            })
            .collect();
        Self { coords, kind: self.kind, lattice_constant: self.lattice_constant }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            coords: self.coords.iter().map(|p| p.map(|v| v * s)).collect(),
            kind: self.kind,
            lattice_constant: self.lattice_constant * s,
        }
    }
}

pub(crate) fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Size parameter of a cluster construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SizeParams {
    /// Spherical cutoff radius in Å (lattice kinds).
    Cutoff(f64),
    /// Number of Mackay shells around the central atom.
    Shells(usize),
    /// Decahedron facet parameters: `p` atoms on (100) facets normal to the
    /// five-fold axis, `q` parallel to it, `r` Marks re-entrance depth.
    Decahedron { p: usize, q: usize, r: usize },
    /// Atoms along an octahedron edge.
    Edge(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AtomBounds {
    pub min: usize,
    pub max: usize,
}

impl Default for AtomBounds {
    fn default() -> Self {
        Self { min: 5, max: 256 }
    }
}

const MIN_SEPARATION: f64 = 0.5;

/// Builds one cluster and checks it against `bounds`.
pub fn generate_cluster(
    kind: StructureKind,
    size: SizeParams,
    lattice_constant: f64,
    bounds: AtomBounds,
) -> Result<AtomCloud> {
    if !(lattice_constant > 0.0) || !lattice_constant.is_finite() {
        return Err(Error::InvalidParam(format!("lattice constant {lattice_constant}")));
    }
    let a = lattice_constant;
    let nn = a / 2f64.sqrt();
    let raw = match (kind, size) {
        (k, SizeParams::Cutoff(r)) if k.is_lattice() => {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::InvalidParam(format!("cutoff radius {r}")));
            }
            lattice_ball(k, a, r)
        }
        (StructureKind::Ico, SizeParams::Shells(s)) if s >= 1 => icosahedron(s, nn),
        (StructureKind::Dec, SizeParams::Decahedron { p, q, r }) if p >= 1 && q >= 1 => decahedron(p, q, r, nn),
        (StructureKind::Oct, SizeParams::Edge(m)) if m >= 1 => octahedron(m, a),
        (k, s) => return Err(Error::InvalidParam(format!("size {s:?} is not valid for {k}"))),
    };
    let n = raw.len();
    if n < bounds.min || n > bounds.max {
        return Err(Error::AtomCount { got: n, min: bounds.min, max: bounds.max });
    }
    let mut cloud = AtomCloud::new(canonical_order(raw), Some(kind), lattice_constant);
    // Recentering after sorting keeps the order while removing rounding drift.
    cloud.center();
    if let Some(d) = cloud.min_distance() {
        if d <= MIN_SEPARATION {
            return Err(Error::InvalidParam(format!("minimum distance {d:.3} Å below {MIN_SEPARATION} Å")));
        }
    }
    Ok(cloud)
}

/// Deduplicates coincident points and orders atoms by distance from the centroid
/// (then z, y, x), so Laplacian rows follow a radial order.
fn canonical_order(mut pts: Vec<[f64; 3]>) -> Vec<[f64; 3]> {
    let n = pts.len().max(1) as f64;
    let mut c = [0.0; 3];
    for p in &pts {
        for k in 0..3 {
            c[k] += p[k] / n;
        }
    }
    let q = |v: f64| (v * 1e6).round() as i64;
    let key = |p: &[f64; 3]| {
        let r = dist(p, &c);
        (q(r), q(p[2] - c[2]), q(p[1] - c[1]), q(p[0] - c[0]))
    };
    pts.sort_by_key(key);
    pts.dedup_by(|x, y| dist(x, y) < 1e-6);
    pts
}

fn lattice_ball(kind: StructureKind, a: f64, cutoff: f64) -> Vec<[f64; 3]> {
    let (cell, basis): ([[f64; 3]; 3], Vec<[f64; 3]>) = match kind {
        StructureKind::Sc => ([[a, 0.0, 0.0], [0.0, a, 0.0], [0.0, 0.0, a]], vec![[0.0; 3]]),
        StructureKind::Bcc => ([[a, 0.0, 0.0], [0.0, a, 0.0], [0.0, 0.0, a]], vec![[0.0; 3], [0.5, 0.5, 0.5]]),
        StructureKind::Fcc => (
            [[a, 0.0, 0.0], [0.0, a, 0.0], [0.0, 0.0, a]],
            vec![[0.0; 3], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]],
        ),
        StructureKind::Hcp => {
            let b = a / 2f64.sqrt();
            let c = b * (8.0f64 / 3.0).sqrt();
            (
                [[b, 0.0, 0.0], [0.5 * b, 0.5 * 3f64.sqrt() * b, 0.0], [0.0, 0.0, c]],
                vec![[0.0; 3], [1.0 / 3.0, 1.0 / 3.0, 0.5]],
            )
        }
        _ => unreachable!("not a lattice kind"),
    };
    let shortest = cell.iter().map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()).fold(f64::INFINITY, f64::min);
    // Hexagonal cells are skewed; pad the search range generously.
    let reach = (cutoff / shortest).ceil() as i64 + 2;
    let r2 = cutoff * cutoff * (1.0 + 1e-12);
    let mut out = Vec::new();
    for i in -reach..=reach {
        for j in -reach..=reach {
            for k in -reach..=reach {
                for f in &basis {
                    let u = [i as f64 + f[0], j as f64 + f[1], k as f64 + f[2]];
                    let mut p = [0.0; 3];
                    for (d, cv) in cell.iter().enumerate() {
                        for x in 0..3 {
                            p[x] += u[d] * cv[x];
                        }
                    }
                    if p[0] * p[0] + p[1] * p[1] + p[2] * p[2] <= r2 {
                        out.push(p);
                    }
                }
            }
        }
    }
    out
}

/// Mackay icosahedron: `shells` complete shells of `10 s^2 + 2` atoms each.
fn icosahedron(shells: usize, nn: f64) -> Vec<[f64; 3]> {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts = Vec::with_capacity(12);
    for s1 in [-1.0, 1.0] {
        for s2 in [-1.0, 1.0] {
            verts.push([0.0, s1, s2 * phi]);
            verts.push([s1, s2 * phi, 0.0]);
            verts.push([s2 * phi, 0.0, s1]);
        }
    }
    // Unscaled edge length is 2; rescale so edges equal `nn`.
    let verts: Vec<[f64; 3]> = verts.iter().map(|v| v.map(|x| x * nn / 2.0)).collect();
    let is_edge = |i: usize, j: usize| (dist(&verts[i], &verts[j]) - nn).abs() < 1e-9 * nn;
    let mut edges = Vec::new();
    let mut faces = Vec::new();
    for i in 0..12 {
        for j in i + 1..12 {
            if !is_edge(i, j) {
                continue;
            }
            edges.push((i, j));
            for k in j + 1..12 {
                if is_edge(i, k) && is_edge(j, k) {
                    faces.push((i, j, k));
                }
            }
        }
    }
    let lerp = |base: [f64; 3], s: f64, steps: &[(f64, [f64; 3])]| {
        let mut p = base.map(|v| v * s);
        for (t, d) in steps {
            for x in 0..3 {
                p[x] += t * d[x];
            }
        }
        p
    };
    let sub = |a: &[f64; 3], b: &[f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let mut out = vec![[0.0; 3]];
    for s in 1..=shells {
        let sf = s as f64;
        for v in &verts {
            out.push(v.map(|x| x * sf));
        }
        for &(i, j) in &edges {
            let d = sub(&verts[j], &verts[i]);
            for k in 1..s {
                out.push(lerp(verts[i], sf, &[(k as f64, d)]));
            }
        }
        for &(i, j, l) in &faces {
            let d1 = sub(&verts[j], &verts[i]);
            let d2 = sub(&verts[l], &verts[i]);
            for a in 1..s {
                for b in 1..s {
                    if a + b < s {
                        out.push(lerp(verts[i], sf, &[(a as f64, d1), (b as f64, d2)]));
                    }
                }
            }
        }
    }
    out
}

/// Ino/Marks decahedron built from pentagonal rings around the five-fold axis.
fn decahedron(p: usize, q: usize, r: usize, nn: f64) -> Vec<[f64; 3]> {
    let t = std::f64::consts::TAU / 5.0;
    let ring = nn * 3f64.sqrt() / 2.0;
    let verts: Vec<[f64; 3]> = (0..5)
        .map(|m| {
            let ang = t * m as f64 + std::f64::consts::FRAC_PI_2;
            [ring * ang.cos(), ring * ang.sin(), 0.0]
        })
        .collect();
    let h = p + q + 2 * r - 1;
    let g = h - q + 1;
    let mut out = Vec::new();
    for j in 0..h {
        out.push([0.0, 0.0, j as f64 * nn - (h as f64 - 1.0) * nn / 2.0]);
    }
    for n in 1..h.min(g) {
        for m in 0..5 {
            let v1 = verts[(m + 4) % 5];
            let v2 = verts[m];
            for i in 0..n {
                if n - i < g - r && i < g - r {
                    for j in 0..h - n {
                        let z = j as f64 * nn - (h - n - 1) as f64 * nn / 2.0;
                        let (a, b) = ((n - i) as f64, i as f64);
                        out.push([a * v1[0] + b * v2[0], a * v1[1] + b * v2[1], z]);
                    }
                }
            }
        }
    }
    out
}

/// Regular FCC octahedron with `edge` atoms along each edge.
fn octahedron(edge: usize, a: f64) -> Vec<[f64; 3]> {
    let m = edge as i64 - 1;
    let parity = m.rem_euclid(2);
    let mut out = Vec::new();
    for i in -m..=m {
        for j in -m..=m {
            for k in -m..=m {
                if i.abs() + j.abs() + k.abs() <= m && (i + j + k).rem_euclid(2) == parity {
                    out.push([i as f64 * a / 2.0, j as f64 * a / 2.0, k as f64 * a / 2.0]);
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Validation),
            other => Err(Error::InvalidParam(format!("unknown split {other:?}"))),
        }
    }
}

/// Inclusive integer range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IntRange(pub usize, pub usize);

/// What to generate: per-kind counts and size ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub counts: BTreeMap<StructureKind, usize>,
    /// Cutoff radius range for lattice kinds, in units of the lattice constant.
    pub cutoff: BTreeMap<StructureKind, (f64, f64)>,
    pub ico_shells: IntRange,
    pub dec_p: IntRange,
    pub dec_q: IntRange,
    pub dec_r: IntRange,
    pub oct_edge: IntRange,
    pub lattice_constant: (f64, f64),
    pub bounds: AtomBounds,
    pub seed: u64,
    pub train_fraction: f64,
}

impl DatasetSpec {
    /// Small desk-scale corpus: ~400 structures of at most 64 atoms.
    pub fn desk() -> Self {
        let counts = StructureKind::ALL
            .into_iter()
            .map(|k| {
                let n = match k {
                    StructureKind::Ico => 30,
                    StructureKind::Oct => 40,
                    _ => 66,
                };
                (k, n)
            })
            .collect();
        let cutoff = [
            (StructureKind::Fcc, (0.72, 1.55)),
            (StructureKind::Bcc, (0.88, 1.55)),
            (StructureKind::Sc, (1.01, 1.75)),
            (StructureKind::Hcp, (0.72, 1.55)),
        ]
        .into_iter()
        .collect();
        Self {
            counts,
            cutoff,
            ico_shells: IntRange(1, 2),
            dec_p: IntRange(1, 4),
            dec_q: IntRange(1, 3),
            dec_r: IntRange(0, 1),
            oct_edge: IntRange(2, 4),
            lattice_constant: (3.6, 4.2),
            bounds: AtomBounds { min: 5, max: 64 },
            seed: 42,
            train_fraction: 0.95,
        }
    }

    /// Full-size corpus settings (atoms up to 256, ~13k structures).
    pub fn paper() -> Self {
        let mut s = Self::desk();
        s.bounds = AtomBounds { min: 5, max: 256 };
        s.counts = StructureKind::ALL.into_iter().map(|k| (k, 1888)).collect();
        s.cutoff = [
            (StructureKind::Fcc, (0.72, 2.6)),
            (StructureKind::Bcc, (0.88, 2.6)),
            (StructureKind::Sc, (1.01, 3.1)),
            (StructureKind::Hcp, (0.72, 2.6)),
        ]
        .into_iter()
        .collect();
        s.ico_shells = IntRange(1, 3);
        s.dec_p = IntRange(1, 6);
        s.dec_q = IntRange(1, 5);
        s.dec_r = IntRange(0, 2);
        s.oct_edge = IntRange(2, 6);
        s
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidParam(format!("train fraction {} not in (0, 1)", self.train_fraction)));
        }
        if self.total() == 0 {
            return Err(Error::InvalidParam("dataset has no structures".into()));
        }
        if self.bounds.min < 1 || self.bounds.min > self.bounds.max {
            return Err(Error::InvalidParam(format!("atom bounds {:?}", self.bounds)));
        }
        let (lo, hi) = self.lattice_constant;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::InvalidParam(format!("lattice constant range {lo}..{hi}")));
        }
        for r in [self.ico_shells, self.dec_p, self.dec_q, self.dec_r, self.oct_edge] {
            if r.0 > r.1 {
                return Err(Error::InvalidParam(format!("empty range {r:?}")));
            }
        }
        for (k, n) in &self.counts {
            if *n > 0 && k.is_lattice() {
                match self.cutoff.get(k) {
                    Some(&(lo, hi)) if lo > 0.0 && lo <= hi => {}
                    _ => return Err(Error::InvalidParam(format!("missing or invalid cutoff range for {k}"))),
                }
            }
        }
        Ok(())
    }

    fn draw_size(&self, kind: StructureKind, a: f64, rng: &mut RngStream) -> SizeParams {
        let int = |r: IntRange, rng: &mut RngStream| r.0 + rng.below(r.1 - r.0 + 1);
        match kind {
            k if k.is_lattice() => {
                let (lo, hi) = self.cutoff[&k];
                SizeParams::Cutoff(a * rng.uniform_in(lo, hi))
            }
            StructureKind::Ico => SizeParams::Shells(int(self.ico_shells, rng)),
            StructureKind::Dec => SizeParams::Decahedron {
                p: int(self.dec_p, rng).max(1),
                q: int(self.dec_q, rng).max(1),
                r: int(self.dec_r, rng),
            },
            _ => SizeParams::Edge(int(self.oct_edge, rng)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub name: String,
    pub cloud: AtomCloud,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub entries: Vec<DatasetEntry>,
}

const MAX_ATTEMPTS_PER_STRUCTURE: usize = 200;

/// Deterministic, deduplicated dataset with a seeded train/validation split.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let root = RngStream::new(spec.seed);
    let mut seen: BTreeSet<(StructureKind, Vec<i64>)> = BTreeSet::new();
    let mut clouds = Vec::with_capacity(spec.total());
    for (ki, kind) in StructureKind::ALL.into_iter().enumerate() {
        let want = spec.counts.get(&kind).copied().unwrap_or(0);
        if want == 0 {
            continue;
        }
        let mut rng = root.fork(ki as u64);
        let mut got = 0;
        let mut attempts = 0;
        while got < want {
            attempts += 1;
            if attempts > MAX_ATTEMPTS_PER_STRUCTURE * want {
                return Err(Error::Unsatisfiable(format!(
                    "only {got} of {want} distinct {kind} structures within {:?} after {} attempts",
                    spec.bounds,
                    attempts - 1
                )));
            }
            let a = rng.uniform_in(spec.lattice_constant.0, spec.lattice_constant.1);
            let size = spec.draw_size(kind, a, &mut rng);
            let cloud = match generate_cluster(kind, size, a, spec.bounds) {
                Ok(c) => c,
                Err(Error::AtomCount { .. }) => continue,
                Err(e) => return Err(e),
            };
            if seen.insert((kind, cloud.distance_key())) {
                clouds.push(cloud);
                got += 1;
            }
        }
    }
    let splits = split_assignment(clouds.len(), spec.train_fraction, spec.seed);
    let entries = clouds
        .into_iter()
        .zip(splits)
        .enumerate()
        .map(|(i, (cloud, split))| DatasetEntry {
            name: format!("{i:05}_{}", cloud.kind().map(|k| k.label()).unwrap_or("UNK")),
            cloud,
            split,
        })
        .collect();
    Ok(Dataset { entries })
}

/// Seeded shuffle; the first `round(fraction * n)` shuffled indices are training.
pub fn split_assignment(n: usize, fraction: f64, seed: u64) -> Vec<Split> {
    let mut idx: Vec<usize> = (0..n).collect();
    RngStream::new(seed).fork(u64::MAX).shuffle(&mut idx);
    let n_train = (fraction * n as f64).round() as usize;
    let mut out = vec![Split::Validation; n];
    for &i in &idx[..n_train.min(n)] {
        out[i] = Split::Train;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(kind: StructureKind, size: SizeParams) -> usize {
        generate_cluster(kind, size, 4.0, AtomBounds { min: 1, max: 10_000 }).unwrap().len()
    }

    #[test]
    fn mackay_magic_numbers() {
        assert_eq!(count(StructureKind::Ico, SizeParams::Shells(1)), 13);
        assert_eq!(count(StructureKind::Ico, SizeParams::Shells(2)), 55);
        assert_eq!(count(StructureKind::Ico, SizeParams::Shells(3)), 147);
    }

    #[test]
    fn simple_cubic_first_shell() {
        assert_eq!(count(StructureKind::Sc, SizeParams::Cutoff(1.01 * 4.0)), 7);
    }

    #[test]
    fn fcc_cuboctahedron_and_octahedra() {
        assert_eq!(count(StructureKind::Fcc, SizeParams::Cutoff(1.01 * 4.0 / 2f64.sqrt())), 13);
        let sizes: Vec<usize> = (1..=5).map(|m| count(StructureKind::Oct, SizeParams::Edge(m))).collect();
        assert_eq!(sizes, vec![1, 6, 19, 44, 85]);
    }

    #[test]
    fn decahedron_sizes() {
        let dec = |p, q, r| count(StructureKind::Dec, SizeParams::Decahedron { p, q, r });
        assert_eq!(dec(2, 1, 0), 7);
        assert_eq!(dec(3, 1, 0), 23);
        assert_eq!(dec(2, 2, 0), 13);
    }

    #[test]
    fn outputs_are_centred() {
        for (kind, size) in [
            (StructureKind::Hcp, SizeParams::Cutoff(6.0)),
            (StructureKind::Dec, SizeParams::Decahedron { p: 3, q: 2, r: 1 }),
            (StructureKind::Bcc, SizeParams::Cutoff(5.0)),
        ] {
            let c = generate_cluster(kind, size, 4.0, AtomBounds::default()).unwrap();
            assert!(c.centroid().iter().all(|v| v.abs() < 1e-10), "{kind}");
        }
    }

    #[test]
    fn bounds_reject() {
        let err = generate_cluster(StructureKind::Ico, SizeParams::Shells(3), 4.0, AtomBounds { min: 5, max: 64 });
        assert!(matches!(err, Err(Error::AtomCount { got: 147, .. })));
        let err = generate_cluster(StructureKind::Ico, SizeParams::Edge(3), 4.0, AtomBounds::default());
        assert!(matches!(err, Err(Error::InvalidParam(_))));
    }

    #[test]
    fn split_arithmetic() {
        let s = split_assignment(200, 0.95, 42);
        assert_eq!(s.iter().filter(|x| **x == Split::Train).count(), 190);
        assert_eq!(s.iter().filter(|x| **x == Split::Validation).count(), 10);
    }

    #[test]
    fn kind_parsing() {
        for k in StructureKind::ALL {
            assert_eq!(k.label().parse::<StructureKind>().unwrap(), k);
        }
        assert!("XYZ".parse::<StructureKind>().is_err());
    }
}
