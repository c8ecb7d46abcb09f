//! Checkpoint files and checkpoint averaging.
//!
//! Layout: a text manifest of `key=value` lines, one blank line, then one
//! record per parameter (`name ndim dims...\n` + little-endian f32 payload).
//! The manifest echoes the full run configuration as single-line JSON together
//! with its SHA-256 digest.

use std::fs;
use std::io::{BufRead, BufReader, Cursor, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const FILE_PREFIX: &str = "checkpoint_";
const FILE_SUFFIX: &str = ".bin";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub epoch: u64,
    /// Resolved run configuration, single-line JSON.
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn config_digest(config: &str) -> String {
    Sha256::digest(config.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn new(step: u64, epoch: u64, config: impl Into<String>, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let config = config.into();
        if config.contains('\n') {
            return Err(Error::Format("checkpoint config must be a single line".into()));
        }
        let mut names: Vec<&str> = tensors.iter().map(|(n, _)| n.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Format(format!("duplicate tensor name {}", w[0])));
        }
        Ok(Checkpoint { step, epoch, config, tensors })
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "format_version={FORMAT_VERSION}")?;
        writeln!(w, "step={}", self.step)?;
        writeln!(w, "epoch={}", self.epoch)?;
        writeln!(w, "config_digest={}", config_digest(&self.config))?;
        writeln!(w, "config={}", self.config)?;
        writeln!(w)?;
        for (name, t) in &self.tensors {
            t.write_record(name, w)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }

    pub fn read<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        loop {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Format("checkpoint manifest is not terminated".into()));
            }
            let line = line.trim_end_matches('\n');
            if line.is_empty() {
                break;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::Format(format!("manifest line without `=`: {line:?}")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| fields.get(k).ok_or_else(|| Error::Format(format!("manifest is missing `{k}`")));
        let num = |k: &str| -> Result<u64> {
            get(k)?.parse().map_err(|_| Error::Format(format!("manifest field `{k}` is not an integer")))
        };
        if num("format_version")? != FORMAT_VERSION as u64 {
            return Err(Error::Format(format!("unsupported checkpoint format {}", get("format_version")?)));
        }
        let config = get("config")?.clone();
        if *get("config_digest")? != config_digest(&config) {
            return Err(Error::Format("config digest does not match the embedded config".into()));
        }
        let mut tensors = Vec::new();
        while let Some(rec) = Tensor::read_record(r)? {
            tensors.push(rec);
        }
        Checkpoint::new(num("step")?, num("epoch")?, config, tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Checkpoint::read(&mut Cursor::new(bytes))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::read(&mut BufReader::new(fs::File::open(path)?))
    }
}

/// Element-wise mean of every parameter; step and epoch are the maxima of the inputs.
pub fn average_checkpoints(inputs: &[Checkpoint]) -> Result<Checkpoint> {
    let first = inputs.first().ok_or_else(|| Error::Invalid("nothing to average".into()))?;
    for other in &inputs[1..] {
        if other.config != first.config {
            return Err(Error::CheckpointMismatch {
                name: "<config>".into(),
                reason: "checkpoints were produced by different configurations".into(),
            });
        }
        if other.tensors.len() != first.tensors.len() {
            return Err(Error::CheckpointMismatch {
                name: "<all>".into(),
                reason: format!("{} vs {} tensors", other.tensors.len(), first.tensors.len()),
            });
        }
        for ((na, ta), (nb, tb)) in first.tensors.iter().zip(&other.tensors) {
            if na != nb {
                return Err(Error::CheckpointMismatch {
                    name: nb.clone(),
                    reason: format!("expected `{na}` at this position"),
                });
            }
            if ta.shape() != tb.shape() {
                return Err(Error::CheckpointMismatch {
                    name: na.clone(),
                    reason: format!("shape {:?} vs {:?}", tb.shape(), ta.shape()),
                });
            }
        }
    }
    let k = inputs.len() as f64;
    let tensors = first
        .tensors
        .iter()
        .enumerate()
        .map(|(i, (name, t))| {
            let mut sum = vec![0.0; t.numel()];
            for c in inputs {
                sum.iter_mut().zip(c.tensors[i].1.data()).for_each(|(s, v)| *s += v);
            }
            let mean = sum.into_iter().map(|s| s / k).collect();
            Ok((name.clone(), Tensor::new(t.shape().to_vec(), mean)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint {
        step: inputs.iter().map(|c| c.step).max().unwrap_or(0),
        epoch: inputs.iter().map(|c| c.epoch).max().unwrap_or(0),
        config: first.config.clone(),
        tensors,
    })
}

pub fn average_checkpoint_files(paths: &[PathBuf]) -> Result<Checkpoint> {
    let loaded = paths.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
    average_checkpoints(&loaded)
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("{FILE_PREFIX}{step:09}{FILE_SUFFIX}"))
}

/// Checkpoint files in `dir`, oldest first.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(FILE_PREFIX) && n.ends_with(FILE_SUFFIX))
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Deletes all but the newest `keep` checkpoint files in `dir`.
pub fn prune_checkpoints(dir: &Path, keep: usize) -> Result<()> {
    let files = list_checkpoints(dir)?;
    let excess = files.len().saturating_sub(keep);
    for f in &files[..excess] {
        fs::remove_file(f)?;
    }
    Ok(())
}
