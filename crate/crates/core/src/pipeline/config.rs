//! `key = value` configuration text with `[section]` headers and `#` comments.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Section {
    pub name: String,
    entries: Vec<(String, String, usize)>,
}

impl Section {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().rev().find(|(k, _, _)| k == key).map(|(_, v, _)| v.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str, usize)> {
        self.entries.iter().map(|(k, v, l)| (k.as_str(), v.as_str(), *l))
    }

    fn line_of(&self, key: &str) -> usize {
        self.entries.iter().rev().find(|(k, _, _)| k == key).map(|e| e.2).unwrap_or(0)
    }

    pub fn parse_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::parse("config", self.line_of(key), format!("[{}] {key} = {v:?}", self.name))),
        }
    }

    /// `lo..hi` pair of numbers.
    pub fn range_or<T: std::str::FromStr + Copy>(&self, key: &str, default: (T, T)) -> Result<(T, T)> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => {
                let bad = || Error::parse("config", self.line_of(key), format!("[{}] {key} = {v:?} (expected lo..hi)", self.name));
                let (a, b) = v.split_once("..").ok_or_else(bad)?;
                Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    sections: Vec<Section>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections = vec![Section::default()];
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::parse("config", lineno, "unterminated section header"))?
                    .trim();
                if name.is_empty() || name.contains(char::is_whitespace) {
                    return Err(Error::parse("config", lineno, format!("bad section name {name:?}")));
                }
                if seen.insert(name.to_string(), lineno).is_some() {
                    return Err(Error::parse("config", lineno, format!("duplicate section [{name}]")));
                }
                sections.push(Section { name: name.to_string(), entries: Vec::new() });
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse("config", lineno, format!("expected key = value, got {line:?}")))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::parse("config", lineno, "empty key"));
            }
            let last = sections.last_mut().expect("root section");
            last.entries.push((k.to_string(), v.trim().to_string(), lineno));
        }
        Ok(Self { sections })
    }

    /// Keys that appear before any section header.
    pub fn root(&self) -> &Section {
        &self.sections[0]
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().skip(1).find(|s| s.name == name)
    }

    pub fn sections(&self) -> impl Iterator<Item = &Section> {
        self.sections.iter().skip(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_comments() {
        let c = ConfigFile::parse("top = 1\n[profile.desk]\nn_max = 64 # comment\n\n[skip]\nt1=10\nt1 = 20\n").unwrap();
        assert_eq!(c.root().get("top"), Some("1"));
        assert_eq!(c.section("profile.desk").unwrap().get("n_max"), Some("64"));
        assert_eq!(c.section("skip").unwrap().parse_or("t1", 0usize).unwrap(), 20);
        assert!(c.section("missing").is_none());
    }

    #[test]
    fn errors_carry_line_numbers() {
        match ConfigFile::parse("[a]\nno equals sign\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(ConfigFile::parse("[a\n").is_err());
        assert!(ConfigFile::parse("[a]\n[a]\n").is_err());
        let c = ConfigFile::parse("[s]\nx = abc\nr = 1..x\n").unwrap();
        assert!(c.section("s").unwrap().parse_or("x", 0.0f64).is_err());
        assert!(c.section("s").unwrap().range_or("r", (0.0, 1.0)).is_err());
    }
}
