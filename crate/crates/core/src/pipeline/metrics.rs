//! Weighted profile residual and per-kind evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::diffusion::median;
use crate::error::{Error, Result};

/// Weighted relative residual of `calc` against `obs`, each max-abs normalized first.
/// `weights = None` means all ones.
pub fn rwp(obs: &[f64], calc: &[f64], weights: Option<&[f64]>) -> Result<f64> {
    if obs.len() != calc.len() || weights.is_some_and(|w| w.len() != obs.len()) {
        return Err(Error::shape("rwp", format!("lengths {} / {}", obs.len(), calc.len())));
    }
    let scale = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let so = scale(obs);
    if !(so > 0.0) || !so.is_finite() {
        return Err(Error::UndefinedMetric("observed curve is identically zero".into()));
    }
    let sc = scale(calc);
    if !sc.is_finite() {
        return Err(Error::NonFinite(String::from("calculated curve")));
    }
    let sc = if sc > 0.0 { sc } else { 1.0 };
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..obs.len() {
        let w = weights.map_or(1.0, |w| w[i]);
        let o = obs[i] / so;
        let d = o - calc[i] / sc;
        num += w * d * d;
        den += w * o * o;
    }
    if !(den > 0.0) {
        return Err(Error::UndefinedMetric("zero weighted observed norm".into()));
    }
    Ok((num / den).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub kind: String,
    pub natoms: usize,
    pub rwp: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Median R_wp per kind, in kind order.
    pub fn medians(&self) -> BTreeMap<String, f64> {
        let mut by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            by.entry(r.kind.clone()).or_default().push(r.rwp);
        }
        by.into_iter().map(|(k, v)| (k, median(&v).unwrap_or(f64::NAN))).collect()
    }

    pub fn total_median(&self) -> f64 {
        median(&self.rows.iter().map(|r| r.rwp).collect::<Vec<_>>()).unwrap_or(f64::NAN)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("name\tkind\tnatoms\trwp\tseconds\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{}\t{:.6}\t{:.3}", r.name, r.kind, r.natoms, r.rwp, r.seconds);
        }
        s.push_str("#kind\tcount\tmedian_rwp\n");
        for (k, m) in self.medians() {
            let n = self.rows.iter().filter(|r| r.kind == k).count();
            let _ = writeln!(s, "#{k}\t{n}\t{m:.6}");
        }
        if !self.rows.is_empty() {
            let _ = writeln!(s, "#total\t{}\t{:.6}", self.rows.len(), self.total_median());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_values() {
        let obs = [0.1, -0.5, 0.3, 1.0];
        assert_eq!(rwp(&obs, &obs, None).unwrap(), 0.0);
        assert!((rwp(&obs, &[0.0; 4], None).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = obs.iter().map(|v| -v).collect();
        assert!((rwp(&obs, &neg, None).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(rwp(&[0.0; 4], &obs, None), Err(Error::UndefinedMetric(_))));
        assert!(rwp(&obs, &obs[..3], None).is_err());
    }

    #[test]
    fn scale_invariant() {
        let obs = [0.1, -0.5, 0.3, 1.0];
        let calc = [0.2, -0.4, 0.3, 0.9];
        let scaled: Vec<f64> = calc.iter().map(|v| v * 7.0).collect();
        assert!((rwp(&obs, &calc, None).unwrap() - rwp(&obs, &scaled, None).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn report_medians() {
        let row = |kind: &str, rwp| EvalRow { name: "x".into(), kind: kind.into(), natoms: 13, rwp, seconds: 0.0 };
        let r = EvalReport { rows: vec![row("ICO", 0.1), row("ICO", 0.3), row("FCC", 0.2), row("ICO", 0.2)] };
        let m = r.medians();
        assert_eq!(m["ICO"], 0.2);
        assert_eq!(m["FCC"], 0.2);
        assert!(r.to_tsv().contains("#ICO\t3\t0.200000"));
    }
}
