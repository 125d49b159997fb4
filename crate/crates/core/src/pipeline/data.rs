//! Dataset directories: structures, manifest, simulated PDFs and model-ready samples.

use std::path::{Path, PathBuf};

use super::config::{ConfigFile, Section};
use super::profile::Profile;
use crate::condvae::condition_from_pdf;
use crate::error::{Error, Result};
use crate::formats::{
    parse_curve, parse_manifest, parse_xyz, read_text, write_curve, write_manifest, write_text, write_xyz, CurveFile,
    ManifestRecord,
};
use crate::graphrep::encode_with_norm;
use crate::latentvae::to_blocks;
use crate::nn::{RngStream, Tensor};
use crate::pdfsim::{pdf_from_structure, PdfCurve};
use crate::structgen::{AtomBounds, AtomCloud, Dataset, DatasetSpec, IntRange, Split, StructureKind};

pub const MANIFEST: &str = "manifest.tsv";
pub const STRUCTURE_DIR: &str = "structures";
pub const PDF_DIR: &str = "pdf";

/// Reads a `[dataset]` section (optionally `base = desk|paper`) into a spec.
pub fn dataset_spec(config: &ConfigFile) -> Result<DatasetSpec> {
    let Some(s) = config.section("dataset") else {
        return Ok(DatasetSpec::desk());
    };
    let mut spec = match s.get("base").unwrap_or("desk") {
        "desk" => DatasetSpec::desk(),
        "paper" => DatasetSpec::paper(),
        other => return Err(Error::parse("config", 0, format!("unknown dataset base {other:?}"))),
    };
    apply_dataset(&mut spec, s)?;
    spec.validate()?;
    Ok(spec)
}

fn apply_dataset(spec: &mut DatasetSpec, s: &Section) -> Result<()> {
    let int_range = |key: &str, r: IntRange| -> Result<IntRange> {
        let (a, b) = s.range_or(key, (r.0, r.1))?;
        Ok(IntRange(a, b))
    };
    for (k, v, line) in s.entries() {
        let known = matches!(
            k,
            "base" | "ico_shells" | "dec_p" | "dec_q" | "dec_r" | "oct_edge" | "lattice_constant" | "min_atoms"
                | "max_atoms" | "seed" | "train_fraction"
        );
        if let Some(kind) = k.strip_prefix("count.") {
            let kind: StructureKind = kind.parse().map_err(|e: Error| Error::parse("config", line, e.to_string()))?;
            let n = v.parse().map_err(|_| Error::parse("config", line, format!("count {v:?}")))?;
            spec.counts.insert(kind, n);
        } else if let Some(kind) = k.strip_prefix("cutoff.") {
            let kind: StructureKind = kind.parse().map_err(|e: Error| Error::parse("config", line, e.to_string()))?;
            let r = s.range_or(k, (0.0, 0.0))?;
            spec.cutoff.insert(kind, r);
        } else if !known {
            return Err(Error::parse("config", line, format!("unknown dataset key {k:?}")));
        }
    }
    spec.ico_shells = int_range("ico_shells", spec.ico_shells)?;
    spec.dec_p = int_range("dec_p", spec.dec_p)?;
    spec.dec_q = int_range("dec_q", spec.dec_q)?;
    spec.dec_r = int_range("dec_r", spec.dec_r)?;
    spec.oct_edge = int_range("oct_edge", spec.oct_edge)?;
    spec.lattice_constant = s.range_or("lattice_constant", spec.lattice_constant)?;
    spec.bounds = AtomBounds { min: s.parse_or("min_atoms", spec.bounds.min)?, max: s.parse_or("max_atoms", spec.bounds.max)? };
    spec.seed = s.parse_or("seed", spec.seed)?;
    spec.train_fraction = s.parse_or("train_fraction", spec.train_fraction)?;
    Ok(())
}

/// Writes `structures/<name>.xyz` and `manifest.tsv` under `dir`.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<Vec<ManifestRecord>> {
    let mut records = Vec::with_capacity(data.entries.len());
    for e in &data.entries {
        let rel = PathBuf::from(STRUCTURE_DIR).join(format!("{}.xyz", e.name));
        write_text(&dir.join(&rel), &write_xyz(&e.cloud))?;
        let kind = e.cloud.kind().ok_or_else(|| Error::InvalidParam(format!("{} has no structure kind", e.name)))?;
        records.push(ManifestRecord { path: rel, kind, natoms: e.cloud.len(), split: e.split });
    }
    write_text(&dir.join(MANIFEST), &write_manifest(&records))?;
    Ok(records)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    parse_manifest(&read_text(&dir.join(MANIFEST))?)
}

pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Damping drawn for the `index`-th structure: uniform on `[0, qdamp_max]`.
pub fn qdamp_for(seed: u64, index: usize, qdamp_max: f64) -> f64 {
    RngStream::new(seed).fork(index as u64).uniform_in(0.0, qdamp_max)
}

/// Simulated, damped PDF of a structure.
pub fn simulate(cloud: &AtomCloud, profile: &Profile, qdamp: f64) -> Result<PdfCurve> {
    Ok(pdf_from_structure(cloud, &profile.pdf)?.damped(qdamp))
}

pub fn curve_file(pdf: &PdfCurve, header: Vec<(String, String)>) -> CurveFile {
    CurveFile { header, r: pdf.r_grid(), g: pdf.g.clone() }
}

/// Reads a two-column PDF and puts it on the profile grid.
pub fn read_pdf(path: &Path, profile: &Profile) -> Result<(PdfCurve, CurveFile)> {
    let file = parse_curve(&read_text(path)?)?;
    let same_grid = file.r.len() == profile.grid_len()
        && file.r.iter().enumerate().all(|(i, &r)| (r - profile.pdf.r_at(i)).abs() < 1e-6);
    let pdf = if same_grid {
        PdfCurve::new(profile.pdf, file.g.clone())?
    } else {
        PdfCurve::resample(&file.r, &file.g, profile.pdf)?
    };
    Ok((pdf, file))
}

/// Simulates `pdf/<stem>.gr` for every manifest entry, one damping draw per index.
pub fn generate_pdfs(dir: &Path, profile: &Profile, seed: u64) -> Result<usize> {
    let records = read_manifest(dir)?;
    for (i, rec) in records.iter().enumerate() {
        let cloud = parse_xyz(&read_text(&dir.join(&rec.path))?)?;
        let qdamp = qdamp_for(seed, i, profile.qdamp_max);
        let pdf = simulate(&cloud, profile, qdamp)?;
        let header = vec![
            ("kind".to_string(), rec.kind.to_string()),
            ("natoms".to_string(), cloud.len().to_string()),
            ("qdamp".to_string(), format!("{qdamp:.6}")),
            ("profile".to_string(), profile.name.clone()),
        ];
        let path = dir.join(PDF_DIR).join(format!("{}.gr", stem(&rec.path)));
        write_text(&path, &write_curve(&curve_file(&pdf, header)))?;
    }
    Ok(records.len())
}

/// One structure with its model inputs.
#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    pub kind: StructureKind,
    pub split: Split,
    pub cloud: AtomCloud,
    pub pdf: PdfCurve,
    /// Normalized PDF as `[channels, length]`.
    pub cond: Tensor<f32>,
    /// Laplacian quadrants `[4, n_max / 2, n_max / 2]`, times the profile block gain.
    pub blocks: Tensor<f32>,
}

impl Sample {
    pub fn new(name: String, kind: StructureKind, split: Split, cloud: AtomCloud, pdf: PdfCurve, profile: &Profile) -> Result<Self> {
        let cond = condition_from_pdf(&pdf, profile.grid_len(), profile.cond_channels)?;
        let img = encode_with_norm(&cloud, profile.sigma, profile.n_max, profile.norm_constant)?;
        let gain = profile.block_gain();
        let scaled: Vec<f64> = img.matrix.iter().map(|v| v * gain).collect();
        let blocks = to_blocks(&scaled, profile.n_max)?;
        Ok(Self { name, kind, split, cloud, pdf, cond, blocks })
    }
}

/// Loads samples of `split` (all when `None`) from a generated dataset directory.
pub fn load_samples(dir: &Path, profile: &Profile, split: Option<Split>) -> Result<Vec<Sample>> {
    let records = read_manifest(dir)?;
    let mut out = Vec::new();
    for rec in records.iter().filter(|r| split.is_none_or(|s| r.split == s)) {
        let cloud = parse_xyz(&read_text(&dir.join(&rec.path))?)?;
        let name = stem(&rec.path);
        let (pdf, _) = read_pdf(&dir.join(PDF_DIR).join(format!("{name}.gr")), profile)?;
        out.push(Sample::new(name, rec.kind, rec.split, cloud, pdf, profile)?);
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("no samples in {}", dir.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_section() {
        let c = ConfigFile::parse("[dataset]\ncount.FCC = 3\ncount.ICO = 0\ncutoff.FCC = 0.8..1.0\nmax_atoms = 40\nseed = 7\n").unwrap();
        let s = dataset_spec(&c).unwrap();
        assert_eq!(s.counts[&StructureKind::Fcc], 3);
        assert_eq!(s.cutoff[&StructureKind::Fcc], (0.8, 1.0));
        assert_eq!((s.bounds.max, s.seed), (40, 7));
        let bad = ConfigFile::parse("[dataset]\ncount.XYZ = 3\n").unwrap();
        assert!(dataset_spec(&bad).is_err());
        let bad = ConfigFile::parse("[dataset]\ncounts = 3\n").unwrap();
        assert!(dataset_spec(&bad).is_err());
    }

    #[test]
    fn damping_draws_are_seeded() {
        assert_eq!(qdamp_for(1, 3, 0.1), qdamp_for(1, 3, 0.1));
        assert_ne!(qdamp_for(1, 3, 0.1), qdamp_for(1, 4, 0.1));
        assert!((0.0..=0.1).contains(&qdamp_for(9, 0, 0.1)));
    }
}
