//! Named-tensor checkpoint file.
//!
//! ```text
//! kgcorrect-checkpoint 1
//! config <hash>
//! tensor <name> <rows> <cols>
//! ...
//! data
//! <little-endian f32 values, tensors in header order>
//! ```

use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::io::write_atomic;

const MAGIC: &str = "kgcorrect-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Checkpoint {
            config_hash: config_hash.into(),
            tensors: Vec::new(),
        }
    }

    pub fn from_store(store: &ParamStore, config_hash: impl Into<String>) -> Self {
        let mut ck = Checkpoint::new(config_hash);
        for id in store.params.ids() {
            ck.push(store.params.name(id), store.value(id).clone());
        }
        ck
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every store parameter from the checkpoint; names and shapes must match.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.params.ids().collect();
        if ids.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "store has {} tensors, checkpoint has {}",
                ids.len(),
                self.tensors.len()
            )));
        }
        for id in ids {
            let name = store.params.name(id).to_string();
            let t = self
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != store.value(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC}\nconfig {}\n", self.config_hash);
        for (name, t) in &self.tensors {
            header.push_str(&format!("tensor {name} {} {}\n", t.rows(), t.cols()));
        }
        header.push_str("data\n");
        let mut out = header.into_bytes();
        for (_, t) in &self.tensors {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("checkpoint", d.to_string());
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("unterminated header"))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| bad("header is not utf-8"))?;
            pos += end + 1;
            Ok(line)
        };
        if next_line()? != MAGIC {
            return Err(bad("bad magic line"));
        }
        let config_hash = next_line()?
            .strip_prefix("config ")
            .ok_or_else(|| bad("missing config line"))?
            .to_string();
        let mut shapes = Vec::new();
        loop {
            let line = next_line()?;
            if line == "data" {
                break;
            }
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 4 || parts[0] != "tensor" {
                return Err(bad(&format!("bad tensor line `{line}`")));
            }
            let rows: usize = parts[2].parse().map_err(|_| bad("bad row count"))?;
            let cols: usize = parts[3].parse().map_err(|_| bad("bad column count"))?;
            shapes.push((parts[1].to_string(), rows, cols));
        }
        let mut data = &bytes[pos..];
        let mut tensors = Vec::with_capacity(shapes.len());
        for (name, rows, cols) in shapes {
            let n = rows * cols;
            if data.len() < n * 4 {
                return Err(bad(&format!("truncated data for `{name}`")));
            }
            let vals = data[..n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            data = &data[n * 4..];
            tensors.push((name, Tensor::from_vec(rows, cols, vals)));
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Checkpoint {
            config_hash,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use proptest::prelude::*;

    #[test]
    fn store_roundtrip_through_f32() {
        let mut s = ParamStore::new(5);
        s.add("enc.w", 3, 4, Init::FanIn);
        s.add("enc.b", 1, 4, Init::Zeros);
        let ck = Checkpoint::from_store(&s, "abc123");
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.config_hash, "abc123");
        let mut s2 = ParamStore::new(99);
        s2.add("enc.w", 3, 4, Init::Zeros);
        s2.add("enc.b", 1, 4, Init::Ones);
        back.load_into(&mut s2).unwrap();
        let w = s2.params.find("enc.w").unwrap();
        for (a, b) in s.value(w).data().iter().zip(s2.value(w).data()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut s = ParamStore::new(5);
        s.add("w", 3, 4, Init::FanIn);
        let ck = Checkpoint::from_store(&s, "h");
        let mut other = ParamStore::new(5);
        other.add("w", 4, 3, Init::FanIn);
        assert!(ck.load_into(&mut other).is_err());
    }

    proptest! {
        #[test]
        fn bytes_roundtrip(vals in proptest::collection::vec(-1e3f32..1e3, 1..40)) {
            let n = vals.len();
            let mut ck = Checkpoint::new("x");
            ck.push("t", Tensor::from_vec(1, n, vals.iter().map(|&v| v as f64).collect()));
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(back, ck);
        }
    }
}
