//! Binary sample files: `"CSID"`, then little-endian `u32` version, count,
//! channels, `n_t`, `n_c`, then `f32` samples. A TOML sidecar next to the
//! file holds environment tags, the UE layout and the normalization.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DatasetShard, Env, Normalization};
use crate::error::{Error, Result};
use crate::model::CsiDims;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CSID";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

/// A run of consecutive samples from one environment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvRun {
    pub env: Env,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub count: usize,
    pub n_t: usize,
    pub n_c: usize,
    /// Samples are split into this many equal consecutive shards.
    pub ues: usize,
    pub normalization: Normalization,
    #[serde(default)]
    pub env_runs: Vec<EnvRun>,
}

impl Sidecar {
    pub fn envs(&self) -> Vec<Env> {
        self.env_runs
            .iter()
            .flat_map(|r| std::iter::repeat(r.env).take(r.count))
            .collect()
    }
}

/// `data.csid` → `data.toml`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("toml")
}

/// Writes `(count, 2, n_t, n_c)` samples.
pub fn write_samples(path: &Path, samples: &Tensor<f32>) -> Result<()> {
    let s = samples.shape();
    if s.len() != 4 || s[1] != 2 {
        return Err(Error::dim("dataset file", s, &[s.first().copied().unwrap_or(0), 2, 0, 0]));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * samples.numel());
    buf.extend_from_slice(MAGIC);
    for v in [FORMAT_VERSION, s[0] as u32, 2, s[2] as u32, s[3] as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in samples.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Reads a sample file in full; nothing is returned unless the whole file
/// is well formed.
pub fn read_samples(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    let truncated = |expected: u64| Error::Truncated {
        path: path.to_path_buf(),
        expected,
        found: bytes.len() as u64,
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf() });
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated(HEADER_LEN as u64));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4-byte slice"));
    let (version, count, channels, n_t, n_c) = (word(0), word(1), word(2), word(3), word(4));
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if channels != 2 {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            reason: format!("expected 2 channels, header declares {channels}"),
        });
    }
    let n = count as u64 * 2 * n_t as u64 * n_c as u64;
    let expected = HEADER_LEN as u64 + 4 * n;
    if (bytes.len() as u64) < expected {
        return Err(truncated(expected));
    }
    if bytes.len() as u64 > expected {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            reason: format!("{} trailing bytes after the declared samples", bytes.len() as u64 - expected),
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    Tensor::new(vec![count as usize, 2, n_t as usize, n_c as usize], data)
}

/// Writes equal-sized shards back to back with their sidecar.
pub fn write_shards(path: &Path, shards: &[DatasetShard], normalization: Normalization) -> Result<()> {
    let first = shards
        .first()
        .ok_or_else(|| Error::Contract("no shards to write".into()))?;
    if let Some(s) = shards.iter().find(|s| s.samples.shape() != first.samples.shape()) {
        return Err(Error::dim("shard layout", s.samples.shape(), first.samples.shape()));
    }
    let parts: Vec<&Tensor<f32>> = shards.iter().map(|s| &s.samples).collect();
    let all = Tensor::concat_rows(&parts)?;
    let mut env_runs: Vec<EnvRun> = Vec::new();
    for &env in shards.iter().flat_map(|s| &s.envs) {
        match env_runs.last_mut() {
            Some(r) if r.env == env => r.count += 1,
            _ => env_runs.push(EnvRun { env, count: 1 }),
        }
    }
    let shape = all.shape();
    let sidecar = Sidecar {
        count: shape[0],
        n_t: shape[2],
        n_c: shape[3],
        ues: shards.len(),
        normalization,
        env_runs,
    };
    write_samples(path, &all)?;
    let text = toml::to_string(&sidecar).map_err(|e| Error::Contract(format!("sidecar serialization: {e}")))?;
    fs::write(sidecar_path(path), text)?;
    Ok(())
}

/// Reads a file written by [`write_shards`]. Without a sidecar the file is
/// one shard, untagged and with identity normalization.
pub fn read_shards(path: &Path) -> Result<(Vec<DatasetShard>, Normalization)> {
    let samples = read_samples(path)?;
    let (count, n_t, n_c) = (samples.shape()[0], samples.shape()[2], samples.shape()[3]);
    let side = sidecar_path(path);
    let sidecar = if side.exists() {
        let text = fs::read_to_string(&side)?;
        let s: Sidecar = toml::from_str(&text).map_err(|e| Error::Malformed {
            path: side.clone(),
            reason: e.message().to_string(),
        })?;
        if (s.count, s.n_t, s.n_c) != (count, n_t, n_c) || s.ues == 0 || count % s.ues != 0 {
            return Err(Error::Malformed {
                path: side,
                reason: format!(
                    "sidecar declares {} samples of {}x{} in {} shards, file holds {count} of {n_t}x{n_c}",
                    s.count, s.n_t, s.n_c, s.ues
                ),
            });
        }
        let tagged: usize = s.env_runs.iter().map(|r| r.count).sum();
        if !s.env_runs.is_empty() && tagged != count {
            return Err(Error::Malformed {
                path: side,
                reason: format!("environment tags cover {tagged} of {count} samples"),
            });
        }
        s
    } else {
        Sidecar {
            count,
            n_t,
            n_c,
            ues: 1,
            normalization: Normalization::IDENTITY,
            env_runs: Vec::new(),
        }
    };
    CsiDims::new(n_t, n_c)?;
    let envs = sidecar.envs();
    let m = count / sidecar.ues;
    let shards = (0..sidecar.ues)
        .map(|ue| {
            let rows = ue * m..(ue + 1) * m;
            Ok(DatasetShard {
                ue,
                envs: if envs.is_empty() { Vec::new() } else { envs[rows.clone()].to_vec() },
                samples: samples.slice_rows(rows.clone())?,
                ids: rows.collect(),
            })
        })
        .collect::<Result<_>>()?;
    Ok((shards, sidecar.normalization))
}
