//! Header+blob container used for checkpoints, datasets, reflow pairs,
//! bespoke transforms and sample batches.
//!
//! Layout: one line of compact JSON (the header) terminated by `\n`,
//! followed by the raw little-endian `f64` values of every tensor, in
//! manifest order. Each manifest entry records its byte offset relative to
//! the start of the blob section.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    /// What the file holds: "checkpoint", "dataset", "reflow_pairs", ...
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default)]
    pub hyperparameters: serde_json::Value,
    pub tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub kind: String,
    pub method: Option<String>,
    pub hyperparameters: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Blob {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            method: None,
            hyperparameters: serde_json::Value::Null,
            tensors: BTreeMap::new(),
        }
    }

    pub fn with_method(mut self, method: impl Into<String>) -> Self {
        self.method = Some(method.into());
        self
    }

    pub fn with_hyperparameters<T: Serialize>(mut self, h: &T) -> Result<Self> {
        self.hyperparameters = serde_json::to_value(h)?;
        Ok(self)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Format {
            path: None,
            detail: format!("missing tensor {name}"),
        })
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        self.tensors.remove(name).ok_or_else(|| Error::Format {
            path: None,
            detail: format!("missing tensor {name}"),
        })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format {
                path: None,
                detail: format!("expected a {kind} file, found {}", self.kind),
            });
        }
        Ok(())
    }

    pub fn hyper<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.hyperparameters.clone())?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = BTreeMap::new();
        for (name, t) in &self.tensors {
            entries.insert(
                name.clone(),
                TensorEntry {
                    shape: t.shape().to_vec(),
                    dtype: "f64".into(),
                    offset,
                },
            );
            offset += 8 * t.numel() as u64;
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            method: self.method.clone(),
            hyperparameters: self.hyperparameters.clone(),
            tensors: entries,
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        out.reserve(offset as usize);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: String| Error::Format { path: None, detail };
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("no header terminator".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..nl])?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format_version {}",
                header.format_version
            )));
        }
        let body = &bytes[nl + 1..];
        let mut tensors = BTreeMap::new();
        for (name, e) in header.tensors {
            if e.dtype != "f64" {
                return Err(bad(format!("{name}: unsupported dtype {}", e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * n;
            let raw = body
                .get(start..end)
                .ok_or_else(|| bad(format!("{name}: blob truncated")))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.insert(name, Tensor::new(e.shape, data)?);
        }
        Ok(Self {
            kind: header.kind,
            method: header.method,
            hyperparameters: header.hyperparameters,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { detail, .. } => Error::Format {
                path: Some(path.to_path_buf()),
                detail,
            },
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            vals in proptest::collection::vec(proptest::num::f64::ANY, 1..40),
            cols in 1usize..5,
        ) {
            let rows = vals.len() / cols;
            prop_assume!(rows > 0);
            let t = Tensor::new(vec![rows, cols], vals[..rows * cols].to_vec()).unwrap();
            let mut b = Blob::new("checkpoint").with_method("fm");
            b.insert("w", t.clone());
            b.insert("a", Tensor::scalar(-0.0));
            let back = Blob::from_bytes(&b.to_bytes().unwrap()).unwrap();
            let w = back.tensor("w").unwrap();
            prop_assert_eq!(w.shape(), t.shape());
            for (x, y) in w.data().iter().zip(t.data()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
            prop_assert_eq!(back.tensor("a").unwrap().item().to_bits(), (-0.0f64).to_bits());
        }
    }

    #[test]
    fn header_is_first_line_json() {
        let mut b = Blob::new("dataset");
        b.insert("y", Tensor::zeros(&[2, 3]));
        let bytes = b.to_bytes().unwrap();
        let nl = bytes.iter().position(|&c| c == b'\n').unwrap();
        let h: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(h["format_version"], 1);
        assert_eq!(h["tensors"]["y"]["shape"], serde_json::json!([2, 3]));
        assert_eq!(h["tensors"]["y"]["dtype"], "f64");
        assert_eq!(bytes.len() - nl - 1, 48);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let mut b = Blob::new("dataset");
        b.insert("y", Tensor::ones(&[4, 4]));
        let bytes = b.to_bytes().unwrap();
        assert!(Blob::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
