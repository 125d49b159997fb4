//! Binary checkpoint: magic, version, profile hash, named f32 tensors.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const MAGIC: &[u8; 4] = b"CBLD";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub profile_hash: u64,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(profile_hash: u64) -> Self {
        Self { profile_hash, tensors: Vec::new() }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(k, _)| k == name).map(|(_, t)| t)
    }

    /// Replaces an existing tensor of the same name.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        let name = name.into();
        match self.tensors.iter_mut().find(|(k, _)| *k == name) {
            Some(slot) => slot.1 = t,
            None => self.tensors.push((name, t)),
        }
    }

    pub fn extend(&mut self, named: Vec<(String, Tensor<f32>)>) {
        for (k, t) in named {
            self.insert(k, t);
        }
    }

    pub fn require_profile(&self, expected: u64) -> Result<()> {
        if self.profile_hash != expected {
            return Err(Error::ProfileMismatch { expected, found: self.profile_hash });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.profile_hash.to_le_bytes());
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.shape().len()).map_err(|_| Error::Format(format!("rank of {name}")))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension of {name}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic: not a CBLD checkpoint".into()));
        }
        r.pos = 4;
        let version = r.u32()?;
        if version > VERSION || version == 0 {
            return Err(Error::Version { found: version, supported: VERSION });
        }
        let profile_hash = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= (bytes.len() - r.pos) / 4)
                .ok_or_else(|| Error::Corrupt(format!("tensor {name} extends past end of file")))?;
            let raw = r.take(numel * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if tensors.iter().any(|(k, _): &(String, Tensor<f32>)| *k == name) {
                return Err(Error::Corrupt(format!("duplicate tensor {name}")));
            }
            let t = Tensor::new(shape, data).map_err(|e| Error::Corrupt(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { profile_hash, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Corrupt(format!("truncated at byte {}", self.bytes.len())))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::RngStream;

    fn sample() -> Checkpoint {
        let mut rng = RngStream::new(3);
        let mut c = Checkpoint::new(0xdead_beef);
        c.insert("a.w", rng.normal_tensor(&[3, 4]));
        c.insert("b", Tensor::scalar(f32::MIN_POSITIVE));
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.profile_hash, c.profile_hash);
        for ((ka, ta), (kb, tb)) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(ka, kb);
            assert_eq!(ta.shape(), tb.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb));
        }
    }

    #[test]
    fn header_errors() {
        let mut b = sample().to_bytes().unwrap();
        b[0] ^= 0xff;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Format(m)) if m.contains("magic")));
        let mut b = sample().to_bytes().unwrap();
        b[4..8].copy_from_slice(&9999u32.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Version { found: 9999, .. })));
        let b = sample().to_bytes().unwrap();
        for cut in [5, 12, 20, b.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&b[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
        }
    }

    #[test]
    fn profile_check() {
        let c = sample();
        assert!(c.require_profile(0xdead_beef).is_ok());
        assert!(matches!(c.require_profile(1), Err(Error::ProfileMismatch { .. })));
    }
}
