//! Versioned checkpoint container.
//!
//! ```text
//! uam-checkpoint 1
//! config d_model=16
//! ...
//! meta <key>=<value>
//! param <name> <shape> <byte offset>
//! extra <name> <shape> <byte offset>
//! end
//! <little-endian f64 blobs in manifest order>
//! ```
//!
//! Shapes are written as `4x16`, or `scalar` for rank 0.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::classifier::UamClassifier;
use crate::autodiff::{named_parameters, Parameters, Tensor};
use crate::error::{Error, Result};
use crate::uam::ModelConfig;

pub const CHECKPOINT_MAGIC: &str = "uam-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: UamClassifier,
    /// Free-form single-line key/value pairs (label vocabulary and so on).
    pub meta: Vec<(String, String)>,
    /// Named tensors stored next to the model, e.g. standardizer statistics.
    pub extras: Vec<(String, Tensor)>,
}

fn shape_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".into()
    } else {
        shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
    }
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    if s == "scalar" {
        return Ok(Vec::new());
    }
    s.split('x')
        .map(|d| {
            d.parse()
                .map_err(|_| Error::Checkpoint(format!("bad shape {s:?}")))
        })
        .collect()
}

fn single_line(what: &str, s: &str) -> Result<()> {
    if s.contains(['\n', '\r']) {
        return Err(Error::Checkpoint(format!("{what} {s:?} cannot be stored on one line")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(model: UamClassifier) -> Self {
        Self {
            model,
            meta: Vec::new(),
            extras: Vec::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn extra(&self, name: &str) -> Option<&Tensor> {
        self.extras.iter().find(|(k, _)| k == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n");
        for (k, v) in self.model.config.to_pairs() {
            header.push_str(&format!("config {k}={v}\n"));
        }
        for (k, v) in &self.meta {
            single_line("meta key", k)?;
            single_line("meta value", v)?;
            if k.contains('=') {
                return Err(Error::Checkpoint(format!("meta key {k:?} contains '='")));
            }
            header.push_str(&format!("meta {k}={v}\n"));
        }
        let mut blob = Vec::new();
        let params = named_parameters(&self.model);
        let sections = params
            .iter()
            .map(|(n, t)| ("param", n.as_str(), *t))
            .chain(self.extras.iter().map(|(n, t)| ("extra", n.as_str(), t)));
        for (kind, name, t) in sections {
            if name.contains(char::is_whitespace) {
                return Err(Error::Checkpoint(format!("tensor name {name:?} contains whitespace")));
            }
            header.push_str(&format!("{kind} {name} {} {}\n", shape_str(t.shape()), blob.len()));
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let mut pos = 0;
        let mut lines = Vec::new();
        loop {
            let nl = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("header is not terminated by an end line".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + nl])
                .map_err(|_| bad("header is not UTF-8".into()))?;
            pos += nl + 1;
            if line == "end" {
                break;
            }
            lines.push(line);
        }
        let blob = &bytes[pos..];

        let mut it = lines.into_iter();
        let first = it.next().unwrap_or_default();
        let expected = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
        if first != expected {
            return Err(bad(format!("unsupported header {first:?}, expected {expected:?}")));
        }

        let mut config = BTreeMap::new();
        let mut meta = Vec::new();
        let mut manifest = Vec::new();
        for line in it {
            let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
            match kind {
                "config" | "meta" => {
                    let (k, v) = rest
                        .split_once('=')
                        .ok_or_else(|| bad(format!("malformed line {line:?}")))?;
                    if kind == "config" {
                        config.insert(k.to_string(), v.to_string());
                    } else {
                        meta.push((k.to_string(), v.to_string()));
                    }
                }
                "param" | "extra" => {
                    let parts: Vec<&str> = rest.split(' ').collect();
                    let [name, shape, offset] = parts[..] else {
                        return Err(bad(format!("malformed manifest line {line:?}")));
                    };
                    let offset: usize = offset
                        .parse()
                        .map_err(|_| bad(format!("bad offset in {line:?}")))?;
                    manifest.push((kind == "param", name.to_string(), parse_shape(shape)?, offset));
                }
                _ => return Err(bad(format!("unknown header line {line:?}"))),
            }
        }

        let config = ModelConfig::from_pairs(&config)?;
        let mut expected_offset = 0;
        let mut tensors = Vec::with_capacity(manifest.len());
        for (is_param, name, shape, offset) in manifest {
            if offset != expected_offset {
                return Err(bad(format!("{name}: offset {offset}, expected {expected_offset}")));
            }
            let n: usize = shape.iter().product();
            let end = offset + 8 * n;
            let raw = blob
                .get(offset..end)
                .ok_or_else(|| bad(format!("{name}: blob truncated")))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((is_param, name, Tensor::new(shape, data)?));
            expected_offset = end;
        }
        if expected_offset != blob.len() {
            return Err(bad(format!(
                "{} trailing bytes after the last tensor",
                blob.len() - expected_offset
            )));
        }

        let mut model = UamClassifier::init(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let (params, extras): (Vec<_>, Vec<_>) = tensors.into_iter().partition(|t| t.0);
        let expected: Vec<(String, Vec<usize>)> = named_parameters(&model)
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != params.len() {
            return Err(bad(format!(
                "manifest lists {} parameters; the configured model has {}",
                params.len(),
                expected.len()
            )));
        }
        for ((en, es), (_, n, t)) in expected.iter().zip(&params) {
            if en != n || es != t.shape() {
                return Err(bad(format!(
                    "manifest entry {n} {:?} does not match model parameter {en} {es:?}",
                    t.shape()
                )));
            }
        }
        let mut loaded = params.into_iter().map(|(_, _, t)| t);
        model.visit_mut("", &mut |_, slot| {
            *slot = loaded.next().expect("lengths checked");
        });
        Ok(Self {
            model,
            meta,
            extras: extras.into_iter().map(|(_, n, t)| (n, t)).collect(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
