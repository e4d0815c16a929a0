//! Versioned binary checkpoint container plus a text manifest.
//!
//! `checkpoint.bin` layout (all integers and floats little-endian):
//!
//! ```text
//! magic    b"NVCK"
//! version  u32
//! count    u32
//! count × { name_len u32, name utf-8, ndim u32, dims u64 × ndim, values f64 × Π dims }
//! ```
//!
//! `manifest.txt` is a `key = value` listing with the format version, the
//! config hash, one `entry = <name> <shape>` line per tensor and, after a
//! `[config]` marker, the full config echo.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NVCK";
pub const VERSION: u32 = 1;
pub const BIN_NAME: &str = "checkpoint.bin";
pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
    pub config_hash: String,
    pub config_echo: String,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("entry name is not utf-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            entries.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(entries)
    }

    pub fn manifest(&self) -> String {
        let mut s = String::new();
        s.push_str("format = novelaug-checkpoint\n");
        s.push_str(&format!("version = {VERSION}\n"));
        s.push_str(&format!("config_hash = {}\n", self.config_hash));
        s.push_str(&format!("entries = {}\n", self.entries.len()));
        for (name, t) in &self.entries {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            s.push_str(&format!("entry = {name} {}\n", shape.join("x")));
        }
        s.push_str("[config]\n");
        s.push_str(&self.config_echo);
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bin = dir.join(BIN_NAME);
        fs::write(&bin, self.encode()).map_err(|e| Error::io(&bin, e))?;
        let man = dir.join(MANIFEST_NAME);
        fs::write(&man, self.manifest()).map_err(|e| Error::io(&man, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let bin = dir.join(BIN_NAME);
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let entries = Self::decode(&bytes)?;
        let man = dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&man).map_err(|e| Error::io(&man, e))?;
        let (head, config_echo) = match text.split_once("[config]\n") {
            Some((h, c)) => (h, c.to_string()),
            None => (text.as_str(), String::new()),
        };
        let config_hash = head
            .lines()
            .find_map(|l| l.strip_prefix("config_hash = "))
            .ok_or_else(|| Error::Checkpoint("manifest lacks config_hash".into()))?
            .to_string();
        let listed = head.lines().filter(|l| l.starts_with("entry = ")).count();
        if listed != entries.len() {
            return Err(Error::Checkpoint(format!(
                "manifest lists {listed} entries, container holds {}",
                entries.len()
            )));
        }
        Ok(Checkpoint {
            entries,
            config_hash,
            config_echo,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated container".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn encode_decode_is_bit_exact(
            values in proptest::collection::vec(proptest::num::f64::ANY, 1..40),
            name in "[a-z][a-z0-9_.]{0,12}",
        ) {
            let t = Tensor::vector(values.clone()).unwrap();
            let ck = Checkpoint { entries: vec![(name.clone(), t)], config_hash: "h".into(), config_echo: String::new() };
            let back = Checkpoint::decode(&ck.encode()).unwrap();
            prop_assert_eq!(&back[0].0, &name);
            let bits: Vec<u64> = back[0].1.data().iter().map(|v| v.to_bits()).collect();
            let orig: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, orig);
        }
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let ck = Checkpoint {
            entries: vec![("w".into(), Tensor::zeros(&[2, 2]))],
            config_hash: "abc".into(),
            config_echo: "seed = 1\n".into(),
        };
        let bytes = ck.encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ck = Checkpoint {
            entries: vec![
                (
                    "a".into(),
                    Tensor::matrix(2, 3, vec![1.0, -0.0, 3.5, 1e-300, f64::MAX, -2.0]).unwrap(),
                ),
                ("b".into(), Tensor::scalar(7.0)),
            ],
            config_hash: "deadbeef".into(),
            config_echo: "seed = 3\nmethod = vanilla\n".into(),
        };
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back, ck);
        assert!(back.manifest().contains("entry = a 2x3"));
    }
}
