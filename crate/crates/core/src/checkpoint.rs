//! Tensor archives: a text manifest plus a little-endian f64 blob.
//!
//! ```text
//! toll-tensors 1
//! meta <key> <value>
//! param <group> <name> <step> <offset> <dims...>
//! tensor <name> <offset> <dims...>
//! ```
//!
//! A `param` entry stores value, first moment and second moment back to
//! back, each of `∏dims` values starting at `offset` (counted in f64s).

use std::collections::BTreeMap;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::{Param, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &str = "toll-tensors 1";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub meta: BTreeMap<String, String>,
    pub stores: IndexMap<String, ParamStore>,
    pub tensors: IndexMap<String, Tensor>,
}

fn dims_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" ")
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn encode(&self) -> (String, Vec<u8>) {
        let mut manifest = format!("{MAGIC}\n");
        let mut blob: Vec<f64> = Vec::new();
        for (k, v) in &self.meta {
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        for (group, store) in &self.stores {
            for (name, p) in store.iter() {
                manifest.push_str(&format!("param {group} {name} {} {} {}\n", p.step, blob.len(), dims_str(p.value.shape())));
                blob.extend_from_slice(p.value.data());
                blob.extend_from_slice(p.m.data());
                blob.extend_from_slice(p.v.data());
            }
        }
        for (name, t) in &self.tensors {
            manifest.push_str(&format!("tensor {name} {} {}\n", blob.len(), dims_str(t.shape())));
            blob.extend_from_slice(t.data());
        }
        let bytes = blob.iter().flat_map(|v| v.to_le_bytes()).collect();
        (manifest, bytes)
    }

    pub fn decode(manifest: &str, bytes: &[u8]) -> Result<Self> {
        if bytes.len() % 8 != 0 {
            return Err(Error::Parse {
                line: 0,
                msg: "tensor blob length is not a multiple of 8".into(),
            });
        }
        let blob: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let mut lines = manifest.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == MAGIC => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("expected `{MAGIC}`"),
                })
            }
        }
        let mut out = Archive::new();
        for (i, line) in lines {
            let line_no = i + 1;
            let bad = |msg: &str| Error::Parse {
                line: line_no,
                msg: msg.to_string(),
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() {
                continue;
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad integer `{s}`")));
            let slice = |offset: usize, shape: &[usize]| -> Result<Tensor> {
                let len: usize = shape.iter().product();
                let data = blob
                    .get(offset..offset + len)
                    .ok_or_else(|| bad("tensor extends past the end of the blob"))?;
                Tensor::new(shape.to_vec(), data.to_vec())
            };
            match f[0] {
                "meta" if f.len() >= 2 => {
                    let value = line.trim().splitn(3, ' ').nth(2).unwrap_or("");
                    out.meta.insert(f[1].to_string(), value.to_string());
                }
                "param" if f.len() >= 5 => {
                    let step = f[3].parse::<u64>().map_err(|_| bad("bad step"))?;
                    let offset = num(f[4])?;
                    let shape = f[5..].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
                    let len: usize = shape.iter().product();
                    let param = Param {
                        value: slice(offset, &shape)?,
                        m: slice(offset + len, &shape)?,
                        v: slice(offset + 2 * len, &shape)?,
                        step,
                    };
                    out.stores.entry(f[1].to_string()).or_default().insert_param(f[2], param)?;
                }
                "tensor" if f.len() >= 3 => {
                    let offset = num(f[2])?;
                    let shape = f[3..].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
                    out.tensors.insert(f[1].to_string(), slice(offset, &shape)?);
                }
                _ => return Err(bad(&format!("unrecognized entry `{line}`"))),
            }
        }
        Ok(out)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (manifest, bytes) = self.encode();
        let m = dir.join(MANIFEST_FILE);
        std::fs::write(&m, manifest).map_err(|e| Error::io(&m, e))?;
        let b = dir.join(BLOB_FILE);
        std::fs::write(&b, bytes).map_err(|e| Error::io(&b, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let m = dir.join(MANIFEST_FILE);
        let manifest = std::fs::read_to_string(&m).map_err(|e| Error::io(&m, e))?;
        let b = dir.join(BLOB_FILE);
        let bytes = std::fs::read(&b).map_err(|e| Error::io(&b, e))?;
        Self::decode(&manifest, &bytes)
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| Error::Parse {
            line: 0,
            msg: format!("archive lacks `{key}`"),
        })
    }

    pub fn store(&self, group: &str) -> Result<&ParamStore> {
        self.stores.get(group).ok_or_else(|| Error::Parse {
            line: 0,
            msg: format!("archive lacks parameter group `{group}`"),
        })
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Parse {
            line: 0,
            msg: format!("archive lacks tensor `{name}`"),
        })
    }
}
