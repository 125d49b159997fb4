//! Skip-plan persistence (`[skip]` config section) and tuning grids.

use std::fmt::Write as _;

use super::config::ConfigFile;
use crate::diffusion::{BlendSource, NoiseSchedule, SkipPlan};
use crate::error::{Error, Result};

pub const DEFAULT_SLACK: f64 = 0.1;

/// `[skip]` section text for a plan.
pub fn write_plan(plan: &SkipPlan, slack: f64) -> String {
    let mut s = String::from("[skip]\n");
    let _ = writeln!(s, "t1 = {}\nt2 = {}\nblend = {}\nslack = {slack}", plan.t1, plan.t2, plan.blend.label());
    s
}

/// Plan from the `[skip]` section; the full chain when the section is absent.
pub fn read_plan(config: &ConfigFile, sched: &NoiseSchedule) -> Result<SkipPlan> {
    let Some(s) = config.section("skip") else {
        return Ok(SkipPlan::full_chain(sched));
    };
    let t = sched.steps();
    let t1 = s.parse_or("t1", t)?;
    let t2 = s.parse_or("t2", t)?;
    let blend = match s.get("blend") {
        Some(b) => BlendSource::parse(b)?,
        None => BlendSource::default(),
    };
    Ok(SkipPlan::new(t1, t2, sched)?.with_blend(blend))
}

pub fn read_slack(config: &ConfigFile) -> Result<f64> {
    match config.section("skip") {
        Some(s) => s.parse_or("slack", DEFAULT_SLACK),
        None => Ok(DEFAULT_SLACK),
    }
}

fn stepped(spec: &str, line: usize) -> Result<Vec<usize>> {
    let bad = || Error::parse("grid", line, format!("expected a:b or a:b:step, got {spec:?}"));
    let parts: Vec<&str> = spec.split(':').collect();
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    let (a, b, step) = match parts.as_slice() {
        [a] => {
            let v = num(a)?;
            (v, v, 1)
        }
        [a, b] => (num(a)?, num(b)?, 1),
        [a, b, s] => (num(a)?, num(b)?, num(s)?),
        _ => return Err(bad()),
    };
    if step == 0 || a > b {
        return Err(bad());
    }
    Ok((a..=b).step_by(step).collect())
}

/// Candidate `(T1, T2)` pairs. Each line is either `t1 t2` or
/// `t1=a:b[:step] t2=c:d[:step]` (all pairs with `t1 <= t2`); `#` starts a comment.
pub fn parse_grid(text: &str, steps: usize) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let t = raw.split('#').next().unwrap_or("").trim();
        if t.is_empty() {
            continue;
        }
        let toks: Vec<&str> = t.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(Error::parse("grid", line, format!("expected two fields, got {t:?}")));
        }
        let pairs: Vec<(usize, usize)> = match (toks[0].strip_prefix("t1="), toks[1].strip_prefix("t2=")) {
            (Some(a), Some(b)) => {
                let (r1, r2) = (stepped(a, line)?, stepped(b, line)?);
                r2.iter().flat_map(|&t2| r1.iter().filter(move |&&t1| t1 <= t2).map(move |&t1| (t1, t2))).collect()
            }
            (None, None) => {
                let n = |s: &str| s.parse::<usize>().map_err(|_| Error::parse("grid", line, format!("step {s:?}")));
                vec![(n(toks[0])?, n(toks[1])?)]
            }
            _ => return Err(Error::parse("grid", line, "mixed range and literal fields")),
        };
        for (t1, t2) in pairs {
            if t1 > t2 || t2 > steps {
                return Err(Error::parse("grid", line, format!("pair ({t1}, {t2}) outside 0 <= T1 <= T2 <= {steps}")));
            }
            if !out.contains(&(t1, t2)) {
                out.push((t1, t2));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Plan("empty skip grid".into()));
    }
    Ok(out)
}
