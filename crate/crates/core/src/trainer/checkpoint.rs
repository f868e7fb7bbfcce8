//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then raw little-endian `f32` data: every parameter tensor in group
//! order, followed by the first and second moments in the same order.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::autograd::{Real, Tensor};
use crate::backbone::{build_networks, Group, ParamGroup, TrainState};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MVDCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct GroupEntry {
    group: Group,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    step: u64,
    /// Every random draw is derived from `(seed, step)`, so these two
    /// values are the complete generator state.
    rng_seed: u64,
    config: String,
    groups: Vec<GroupEntry>,
    checksum: String,
}

/// A training snapshot with the configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

fn fnv(data: &[u8]) -> u64 {
    data.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let st = &self.state;
        let mut data = Vec::new();
        for set in [&st.nets.groups, &st.m, &st.v] {
            for g in set.iter() {
                for t in &g.tensors {
                    f32::to_le_bytes_vec(t.data(), &mut data);
                }
            }
        }
        let header = Header {
            dtype: f32::DTYPE.to_string(),
            step: st.step,
            rng_seed: self.config.seed,
            config: self.config.to_text(),
            groups: Group::ALL
                .into_iter()
                .map(|group| {
                    let p = st.nets.group(group);
                    GroupEntry {
                        group,
                        tensors: p
                            .names
                            .iter()
                            .zip(&p.tensors)
                            .map(|(n, t)| TensorEntry {
                                name: n.clone(),
                                shape: t.shape().to_vec(),
                            })
                            .collect(),
                    }
                })
                .collect(),
            checksum: format!("{:016x}", fnv(&data)),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
        if header.dtype != f32::DTYPE {
            return Err(Error::Checkpoint(format!("unsupported dtype {}", header.dtype)));
        }
        let data = &bytes[20 + hlen..];
        let config = TrainConfig::from_text(&header.config)?;
        let reference = build_networks::<f32>(&config.backbone, 0)?;
        let mut mismatched = Vec::new();
        for (entry, group) in header.groups.iter().zip(Group::ALL) {
            let r = reference.group(group);
            let same = entry.group == group
                && entry.tensors.len() == r.tensors.len()
                && entry
                    .tensors
                    .iter()
                    .zip(r.names.iter().zip(&r.tensors))
                    .all(|(e, (n, t))| &e.name == n && e.shape == t.shape());
            if !same {
                mismatched.push(group.name());
            }
        }
        if header.groups.len() != Group::ALL.len() || !mismatched.is_empty() {
            return Err(Error::Checkpoint(format!(
                "parameter shapes do not match the stored backbone config (groups: {})",
                mismatched.join(", ")
            )));
        }
        let floats: usize = reference.numel() * 3;
        if data.len() != floats * 4 {
            return Err(Error::Checkpoint(format!(
                "truncated or oversized payload: {} bytes, expected {}",
                data.len(),
                floats * 4
            )));
        }
        if format!("{:016x}", fnv(data)) != header.checksum {
            return Err(bad("payload checksum mismatch"));
        }
        let mut offset = 0;
        let mut read_set = || -> Vec<ParamGroup<f32>> {
            reference
                .groups
                .iter()
                .map(|g| ParamGroup {
                    names: g.names.clone(),
                    tensors: g
                        .tensors
                        .iter()
                        .map(|t| {
                            let n = t.len() * 4;
                            let vals = f32::from_le_bytes_slice(&data[offset..offset + n]);
                            offset += n;
                            Tensor::new(t.shape().to_vec(), vals)
                        })
                        .collect(),
                })
                .collect()
        };
        let params = read_set();
        let m = read_set();
        let v = read_set();
        let mut nets = reference;
        nets.groups = params;
        Ok(Self {
            config,
            state: TrainState {
                nets,
                m,
                v,
                step: header.step,
            },
        })
    }

    /// Writes through a temporary file and renames, so a crash never
    /// leaves a half-written checkpoint under the final name.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Periodic checkpoint name for `step`.
pub fn periodic_name(step: u64) -> String {
    format!("ckpt_{step:08}.mvd")
}

/// Deletes all but the newest `keep` periodic checkpoints in `dir`.
pub fn rotate(dir: &Path, keep: usize) -> Result<Vec<PathBuf>> {
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ckpt_") && n.ends_with(".mvd"))
        })
        .collect();
    found.sort();
    let excess = found.len().saturating_sub(keep);
    for p in &found[..excess] {
        std::fs::remove_file(p).map_err(|e| Error::io(p, e))?;
    }
    Ok(found.split_off(excess))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;

    fn sample() -> Checkpoint {
        let config = TrainConfig {
            backbone: BackboneConfig::conv_small(2, 4),
            patch: 16,
            ..TrainConfig::default()
        };
        let mut state = TrainState::build(&config.backbone, 3).unwrap();
        state.step = 42;
        state.m[0].tensors[0].data_mut()[0] = 0.5;
        state.v[4].tensors[1].data_mut()[2] = 0.25;
        Checkpoint { config, state }
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.mvd");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn damaged_files_fail_loudly() {
        let bytes = sample().to_bytes();
        let truncated = &bytes[..bytes.len() - 10];
        assert!(matches!(Checkpoint::from_bytes(truncated), Err(Error::Checkpoint(_))));
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 1;
        assert!(Checkpoint::from_bytes(&flipped).is_err());
        let mut version = bytes.clone();
        version[8] = 9;
        let err = Checkpoint::from_bytes(&version).unwrap_err().to_string();
        assert!(err.contains("version 9"));
        assert!(Checkpoint::from_bytes(b"hello").is_err());
    }

    #[test]
    fn rotation_keeps_newest() {
        let dir = tempfile::tempdir().unwrap();
        for s in [10, 20, 30, 40, 50] {
            std::fs::write(dir.path().join(periodic_name(s)), b"x").unwrap();
        }
        std::fs::write(dir.path().join("final.mvd"), b"x").unwrap();
        let kept = rotate(dir.path(), 3).unwrap();
        let names: Vec<_> = kept
            .iter()
            .map(|p| p.file_name().unwrap().to_str().unwrap().to_string())
            .collect();
        assert_eq!(names, vec![periodic_name(30), periodic_name(40), periodic_name(50)]);
        assert!(dir.path().join("final.mvd").exists());
    }
}
