//! Checkpoint container: a text manifest followed by a raw payload.
//!
//! ```text
//! betadet-checkpoint 1
//! step <n>
//! config <key> = <value>        one line per configuration entry
//! param <name> <d0,d1,...> <byte offset>
//! end
//! <little-endian f64 payload>
//! ```
//!
//! Offsets count from the first payload byte; parameters are stored
//! contiguously in manifest order.

use std::path::Path;

use crate::autograd::{Parameter, Tensor};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;

pub const MAGIC: &str = "betadet-checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: usize,
    pub params: Vec<Parameter>,
}

impl Checkpoint {
    pub fn new(config: RunConfig, step: usize, model: &Model) -> Self {
        let params = model.params().iter().map(|p| Parameter::new(p.name.clone(), p.value.clone())).collect();
        Checkpoint { config, step, params }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{MAGIC}\nstep {}\n", self.step);
        for (k, v) in self.config.entries() {
            head.push_str(&format!("config {k} = {v}\n"));
        }
        let mut offset = 0usize;
        for p in &self.params {
            let shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            head.push_str(&format!("param {} {} {}\n", p.name, shape.join(","), offset));
            offset += 8 * p.value.len();
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        out.reserve(offset);
        for p in &self.params {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], file: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse { file: file.to_string(), line, msg };
        let mut pos = 0usize;
        let mut lineno = 0usize;
        let mut config_text = String::new();
        let mut step = None;
        let mut entries: Vec<(String, Vec<usize>, usize)> = Vec::new();
        loop {
            let nl = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| err(lineno + 1, "manifest ends without `end`".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + nl])
                .map_err(|_| err(lineno + 1, "manifest is not UTF-8".into()))?;
            pos += nl + 1;
            lineno += 1;
            if lineno == 1 {
                if line != MAGIC {
                    return Err(err(1, format!("expected `{MAGIC}`, found `{line}`")));
                }
                continue;
            }
            if line == "end" {
                break;
            }
            let (tag, rest) = line.split_once(' ').unwrap_or((line, ""));
            match tag {
                "step" => step = Some(rest.parse().map_err(|_| err(lineno, format!("bad step `{rest}`")))?),
                "config" => {
                    config_text.push_str(rest);
                    config_text.push('\n');
                }
                "param" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 3 {
                        return Err(err(lineno, format!("expected `param name shape offset`, got `{line}`")));
                    }
                    let shape = f[1]
                        .split(',')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| err(lineno, format!("bad shape `{}`", f[1])))?;
                    let offset = f[2].parse().map_err(|_| err(lineno, format!("bad offset `{}`", f[2])))?;
                    entries.push((f[0].to_string(), shape, offset));
                }
                _ => return Err(err(lineno, format!("unknown manifest line `{line}`"))),
            }
        }
        let step = step.ok_or_else(|| err(lineno, "manifest has no step".into()))?;
        let config = RunConfig::parse(&config_text, &format!("{file} (config echo)"))?;

        let payload = &bytes[pos..];
        let mut expected = 0usize;
        let mut params = Vec::with_capacity(entries.len());
        for (name, shape, offset) in entries {
            if offset != expected {
                return Err(Error::Input(format!("{file}: `{name}` at offset {offset}, expected {expected}")));
            }
            let n: usize = shape.iter().product();
            let end = offset + 8 * n;
            let raw = payload
                .get(offset..end)
                .ok_or_else(|| Error::Input(format!("{file}: payload too short for `{name}`")))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            params.push(Parameter::new(name, Tensor::new(shape, data)?));
            expected = end;
        }
        if payload.len() != expected {
            return Err(Error::Input(format!(
                "{file}: payload holds {} bytes, manifest describes {expected}",
                payload.len()
            )));
        }
        Ok(Checkpoint { config, step, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Rebuilds the model; a layout mismatch is an input error listing the differences.
    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.config.model, self.params.clone())
    }
}
