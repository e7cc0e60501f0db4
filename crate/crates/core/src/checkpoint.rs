//! Text checkpoint format shared by encoder weights and masks.
//!
//! ```text
//! disentangle-checkpoint 1
//! meta <key> <value>                  zero or more, value runs to end of line
//! tensor <name> <d0>x<d1>[x<d2>]      one per tensor, sorted by name
//! checksum <sha256 hex>               see `Params::checksum`
//! end-manifest
//! <name> <v0> <v1> ...                one line per tensor, same order
//! ```
//!
//! Values use the shortest representation that parses back to the same
//! `f64`, so a save/load cycle is bit-exact and the checksum is stable.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::Params;
use crate::tensor::Tensor;

const MAGIC: &str = "disentangle-checkpoint 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Params,
}

impl Checkpoint {
    pub fn new(tensors: Params) -> Self {
        Self {
            meta: BTreeMap::new(),
            tensors,
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Input(format!("checkpoint has no meta key {key}")))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{MAGIC}").unwrap();
        for (k, v) in &self.meta {
            writeln!(out, "meta {k} {v}").unwrap();
        }
        for (name, t) in self.tensors.iter() {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            writeln!(out, "tensor {name} {}", dims.join("x")).unwrap();
        }
        writeln!(out, "checksum {}", self.tensors.checksum()).unwrap();
        writeln!(out, "end-manifest").unwrap();
        for (name, t) in self.tensors.iter() {
            out.push_str(name);
            for v in t.data() {
                write!(out, " {v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|msg| Error::format(path, msg))
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err("missing checkpoint header".into());
        }
        let mut meta = BTreeMap::new();
        let mut manifest: Vec<(String, Vec<usize>)> = Vec::new();
        let mut checksum = None;
        for line in lines.by_ref() {
            if line == "end-manifest" {
                break;
            }
            let (kind, rest) = line
                .split_once(' ')
                .ok_or(format!("bad manifest line: {line}"))?;
            match kind {
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    meta.insert(k.to_string(), v.to_string());
                }
                "tensor" => {
                    let (name, dims) = rest
                        .split_once(' ')
                        .ok_or(format!("bad tensor line: {line}"))?;
                    let dims = dims
                        .split('x')
                        .map(|d| {
                            d.parse::<usize>()
                                .map_err(|e| format!("bad dim in {line}: {e}"))
                        })
                        .collect::<std::result::Result<Vec<_>, _>>()?;
                    manifest.push((name.to_string(), dims));
                }
                "checksum" => checksum = Some(rest.to_string()),
                other => return Err(format!("unknown manifest entry {other}")),
            }
        }
        let mut tensors = Params::new();
        for (name, dims) in &manifest {
            let line = lines.next().ok_or(format!("missing data for {name}"))?;
            let mut parts = line.split(' ');
            if parts.next() != Some(name.as_str()) {
                return Err(format!("data line out of order, expected {name}"));
            }
            let data = parts
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| format!("bad value in {name}: {e}"))
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let t = Tensor::new(dims.clone(), data).map_err(|e| format!("{name}: {e}"))?;
            tensors.insert(name.clone(), t);
        }
        let expected = checksum.ok_or("manifest has no checksum")?;
        let actual = tensors.checksum();
        if expected != actual {
            return Err(format!(
                "checksum mismatch: manifest {expected}, data {actual}"
            ));
        }
        Ok(Self { meta, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut p = Params::new();
        p.insert("b", Tensor::vector(vec![0.1, -1e-300, 3.0]).unwrap());
        p.insert(
            "a",
            Tensor::matrix(2, 2, vec![1.0 / 3.0, 2.0, -0.0, 7e10]).unwrap(),
        );
        Checkpoint::new(p)
            .with_meta("mode", "weights")
            .with_meta("tau", "0.5")
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::parse(&ck.to_text()).unwrap();
        assert_eq!(back.tensors.checksum(), ck.tensors.checksum());
        assert_eq!(back.meta("tau").unwrap(), "0.5");
        assert_eq!(back.to_text(), ck.to_text());
    }

    #[test]
    fn corrupted_data_fails_checksum() {
        let text: String = sample()
            .to_text()
            .lines()
            .map(|l| {
                if l.starts_with("b ") {
                    format!("{l}5\n")
                } else {
                    format!("{l}\n")
                }
            })
            .collect();
        let err = Checkpoint::parse(&text).unwrap_err();
        assert!(err.contains("checksum"), "{err}");
    }
}
