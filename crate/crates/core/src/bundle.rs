//! Self-contained model bundle: net parameters, schedule config and
//! normalization stats, so a saved model is everything inference needs.
//!
//! Binary layout, little-endian:
//!
//! ```text
//!   magic  "PGDF"                      4 bytes
//!   format version                     u32
//!   header length                      u64
//!   header JSON                        net config, schedule, norm stats,
//!                                      tensor sizes in declared order
//!   parameter blob                     f64 values, tensor order
//!   sha256 of everything above         32 bytes
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::NormStats;
use crate::ddpm::ScheduleConfig;
use crate::error::{Error, Result};
use crate::net::{NetConfig, NetParams};

const MAGIC: &[u8; 4] = b"PGDF";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    net_config: NetConfig,
    schedule: ScheduleConfig,
    norm_stats: NormStats,
    tensor_sizes: Vec<usize>,
}

/// A trained model plus everything needed to run it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub net: NetParams,
    pub schedule: ScheduleConfig,
    pub norm: NormStats,
}

impl ModelBundle {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors = self.net.tensors();
        let header = Header {
            net_config: self.net.config,
            schedule: self.schedule,
            norm_stats: self.norm.clone(),
            tensor_sizes: tensors.iter().map(|t| t.len()).collect(),
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| Error::Corrupt(format!("bundle header serialization: {e}")))?;

        let blob_len: usize = tensors.iter().map(|t| t.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + header_json.len() + blob_len + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        for t in tensors {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() < 16 + 32 {
            return Err(Error::Corrupt("bundle file too short".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Incompatible("not a model bundle (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Incompatible(format!(
                "bundle format v{version}, this build reads v{FORMAT_VERSION}"
            )));
        }
        let (payload, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(payload).as_slice() != digest {
            return Err(Error::Corrupt("bundle checksum mismatch".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| Error::Corrupt("bundle header length out of range".into()))?;
        let header: Header = serde_json::from_slice(&payload[16..header_end])
            .map_err(|e| Error::Corrupt(format!("bundle header parse: {e}")))?;
        header.norm_stats.validate()?;

        let mut net = NetParams::zeros(header.net_config)?;
        {
            let mut tensors = net.tensors_mut();
            if tensors.len() != header.tensor_sizes.len()
                || tensors
                    .iter()
                    .zip(&header.tensor_sizes)
                    .any(|(t, &s)| t.len() != s)
            {
                return Err(Error::Incompatible(
                    "bundle tensor layout does not match its net config".into(),
                ));
            }
            let blob = &payload[header_end..];
            let expected: usize = header.tensor_sizes.iter().map(|s| s * 8).sum();
            if blob.len() != expected {
                return Err(Error::Corrupt(format!(
                    "bundle parameter blob is {} bytes, expected {expected}",
                    blob.len()
                )));
            }
            let mut off = 0;
            for t in tensors.iter_mut() {
                for v in t.iter_mut() {
                    *v = f64::from_le_bytes(blob[off..off + 8].try_into().unwrap());
                    off += 8;
                }
            }
        }
        if !net.is_finite() {
            return Err(Error::Corrupt("bundle contains non-finite parameters".into()));
        }
        Ok(Self { net, schedule: header.schedule, norm: header.norm_stats })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_bundle() -> ModelBundle {
        let cfg = NetConfig { width: 8, num_blocks: 2, obs_dim: 6, action_dim: 3, tau_embed_dim: 4 };
        ModelBundle {
            net: NetParams::init(cfg, 11).unwrap(),
            schedule: ScheduleConfig::default(),
            norm: NormStats::identity(),
        }
    }

    #[test]
    fn save_load_round_trip_preserves_forward_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pgdf");
        let bundle = small_bundle();
        bundle.save(&path).unwrap();
        let back = ModelBundle::load(&path).unwrap();
        assert_eq!(back, bundle);

        let obs = [0.1, -0.2, 0.3, 0.4, -0.5, 0.6];
        let a = [0.7, -0.8, 0.9];
        let mut o1 = [0.0; 3];
        let mut o2 = [0.0; 3];
        bundle.net.forward(&obs, &a, 5, &mut o1).unwrap();
        back.net.forward(&obs, &a, 5, &mut o2).unwrap();
        assert_eq!(o1, o2);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pgdf");
        small_bundle().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        assert!(matches!(ModelBundle::load(&path), Err(Error::Corrupt(_))));
    }

    #[test]
    fn flipped_byte_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pgdf");
        small_bundle().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(ModelBundle::load(&path), Err(Error::Corrupt(_))));
    }

    #[test]
    fn wrong_magic_and_version_are_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pgdf");
        small_bundle().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(ModelBundle::load(&path), Err(Error::Incompatible(_))));
    }
}
