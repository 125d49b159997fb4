//! Plain-text file formats: XYZ structures, dataset manifests, two-column PDF
//! curves and dense Laplacian matrices.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::structgen::{AtomCloud, Split, StructureKind};

/// Element symbol written for every atom; readers accept any symbol.
pub const SPECIES: &str = "Au";

pub fn write_xyz(cloud: &AtomCloud) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{}", cloud.len());
    let kind = cloud.kind().map(|k| k.label()).unwrap_or("UNK");
    let _ = writeln!(s, "kind={kind} a={:.6}", cloud.lattice_constant());
    for p in cloud.coords() {
        let _ = writeln!(s, "{SPECIES} {:.6} {:.6} {:.6}", p[0], p[1], p[2]);
    }
    s
}

/// Parses an XYZ file. `kind=` and `a=` in the comment line are optional.
/// Coordinates are kept as written (no recentring).
pub fn parse_xyz(text: &str) -> Result<AtomCloud> {
    let what = "xyz";
    let mut lines = text.lines();
    let count_line = lines.next().ok_or_else(|| Error::parse(what, 1, "empty file"))?;
    let n: usize = count_line
        .trim()
        .parse()
        .map_err(|_| Error::parse(what, 1, format!("atom count {:?}", count_line.trim())))?;
    let comment = lines.next().ok_or_else(|| Error::parse(what, 2, "missing comment line"))?;
    let mut kind = None;
    let mut a = 0.0;
    for tok in comment.split_whitespace() {
        if let Some(v) = tok.strip_prefix("kind=") {
            kind = v.parse::<StructureKind>().ok();
        } else if let Some(v) = tok.strip_prefix("a=") {
            a = v.parse().map_err(|_| Error::parse(what, 2, format!("lattice constant {v:?}")))?;
        }
    }
    let mut coords = Vec::with_capacity(n.min(1 << 16));
    for (i, line) in lines.enumerate() {
        let lineno = i + 3;
        if line.trim().is_empty() {
            continue;
        }
        if coords.len() == n {
            return Err(Error::parse(what, lineno, format!("more than {n} atom lines")));
        }
        let mut f = line.split_whitespace();
        f.next();
        let mut p = [0.0f64; 3];
        for v in &mut p {
            let tok = f.next().ok_or_else(|| Error::parse(what, lineno, "expected 3 coordinates"))?;
            *v = tok.parse().map_err(|_| Error::parse(what, lineno, format!("coordinate {tok:?}")))?;
            if !v.is_finite() {
                return Err(Error::parse(what, lineno, "non-finite coordinate"));
            }
        }
        coords.push(p);
    }
    if coords.len() != n {
        return Err(Error::parse(what, n + 3, format!("expected {n} atoms, found {}", coords.len())));
    }
    Ok(AtomCloud::from_raw(coords, kind, a))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub kind: StructureKind,
    pub natoms: usize,
    pub split: Split,
}

pub fn write_manifest(records: &[ManifestRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", r.path.display(), r.kind, r.natoms, r.split.label());
    }
    s
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    let what = "manifest";
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::parse(what, lineno, format!("expected 4 tab-separated columns, found {}", cols.len())));
        }
        let kind = cols[1].parse().map_err(|e: Error| Error::parse(what, lineno, e.to_string()))?;
        let natoms = cols[2].parse().map_err(|_| Error::parse(what, lineno, format!("atom count {:?}", cols[2])))?;
        let split = cols[3].parse().map_err(|e: Error| Error::parse(what, lineno, e.to_string()))?;
        out.push(ManifestRecord { path: PathBuf::from(cols[0]), kind, natoms, split });
    }
    Ok(out)
}

/// Header key/value pairs and samples of a two-column curve file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CurveFile {
    pub header: Vec<(String, String)>,
    pub r: Vec<f64>,
    pub g: Vec<f64>,
}

impl CurveFile {
    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

pub fn write_curve(file: &CurveFile) -> String {
    let mut s = String::new();
    for (k, v) in &file.header {
        let _ = writeln!(s, "# {k}={v}");
    }
    for (r, g) in file.r.iter().zip(&file.g) {
        let _ = writeln!(s, "{r:.6} {g:.10e}");
    }
    s
}

/// Reads `#` comment lines (collecting `key=value` tokens) then `r G` rows.
/// The r column must be strictly increasing.
pub fn parse_curve(text: &str) -> Result<CurveFile> {
    let what = "pdf";
    let mut out = CurveFile::default();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if let Some(c) = t.strip_prefix('#') {
            for tok in c.split_whitespace() {
                if let Some((k, v)) = tok.split_once('=') {
                    out.header.push((k.to_string(), v.to_string()));
                }
            }
            continue;
        }
        let mut f = t.split_whitespace();
        let mut num = |name: &str| -> Result<f64> {
            let tok = f.next().ok_or_else(|| Error::parse(what, lineno, format!("missing {name} column")))?;
            let v: f64 = tok.parse().map_err(|_| Error::parse(what, lineno, format!("{name} value {tok:?}")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::parse(what, lineno, format!("non-finite {name}")))
            }
        };
        let r = num("r")?;
        let g = num("G")?;
        if let Some(&prev) = out.r.last() {
            if r <= prev {
                return Err(Error::parse(what, lineno, format!("r not increasing ({r} after {prev})")));
            }
        }
        out.r.push(r);
        out.g.push(g);
    }
    if out.r.len() < 2 {
        return Err(Error::parse(what, 0, "need at least two samples"));
    }
    Ok(out)
}

/// Dense square matrix plus `# key=value` header.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixFile {
    pub header: Vec<(String, String)>,
    pub size: usize,
    pub data: Vec<f64>,
}

impl MatrixFile {
    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

pub fn write_matrix(file: &MatrixFile) -> String {
    let mut s = String::new();
    for (k, v) in &file.header {
        let _ = writeln!(s, "# {k}={v}");
    }
    for row in file.data.chunks(file.size.max(1)) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        let _ = writeln!(s, "{}", cells.join(" "));
    }
    s
}

pub fn parse_matrix(text: &str) -> Result<MatrixFile> {
    let what = "laplacian";
    let mut header = Vec::new();
    let mut data = Vec::new();
    let mut size = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if let Some(c) = t.strip_prefix('#') {
            for tok in c.split_whitespace() {
                if let Some((k, v)) = tok.split_once('=') {
                    header.push((k.to_string(), v.to_string()));
                }
            }
            continue;
        }
        let start = data.len();
        for tok in t.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| Error::parse(what, lineno, format!("entry {tok:?}")))?;
            if !v.is_finite() {
                return Err(Error::parse(what, lineno, "non-finite entry"));
            }
            data.push(v);
        }
        let width = data.len() - start;
        match size {
            None => size = Some(width),
            Some(w) if w != width => {
                return Err(Error::parse(what, lineno, format!("row has {width} entries, expected {w}")))
            }
            _ => {}
        }
        rows += 1;
        if rows > size.unwrap_or(0) {
            return Err(Error::parse(what, lineno, "more rows than columns"));
        }
    }
    let size = size.ok_or_else(|| Error::parse(what, 0, "no matrix rows"))?;
    if rows != size {
        return Err(Error::parse(what, 0, format!("{rows} rows for {size} columns")));
    }
    Ok(MatrixFile { header, size, data })
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xyz_round_trip() {
        let c = AtomCloud::from_raw(vec![[0.0, 0.0, 0.0], [1.5, -2.25, 0.125]], Some(StructureKind::Dec), 4.0);
        let back = parse_xyz(&write_xyz(&c)).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn xyz_rejects_count_mismatch() {
        assert!(matches!(parse_xyz("3\nkind=FCC a=4\nAu 0 0 0\n"), Err(Error::Parse { .. })));
        assert!(parse_xyz("1\n\nAu 0 0\n").is_err());
        assert!(parse_xyz("").is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let recs = vec![ManifestRecord {
            path: "structures/00000_FCC.xyz".into(),
            kind: StructureKind::Fcc,
            natoms: 13,
            split: Split::Train,
        }];
        assert_eq!(parse_manifest(&write_manifest(&recs)).unwrap(), recs);
        assert!(parse_manifest("a\tFCC\tx\ttrain\n").is_err());
    }

    #[test]
    fn curve_requires_increasing_grid() {
        let f = parse_curve("# qdamp=0.05\n0.0 1\n0.1 2\n").unwrap();
        assert_eq!(f.header_value("qdamp"), Some("0.05"));
        assert!(parse_curve("0.1 1\n0.1 2\n").is_err());
    }

    #[test]
    fn matrix_round_trip_is_exact() {
        let m = MatrixFile { header: vec![("sigma".into(), "5".into())], size: 2, data: vec![0.1, -0.1, -0.1, 1.0 / 3.0] };
        assert_eq!(parse_matrix(&write_matrix(&m)).unwrap(), m);
        assert!(parse_matrix("1 2\n3\n").is_err());
    }
}
