//! Single-file checkpoints.
//!
//! Layout: magic `DSCK`, format version (u32 LE), manifest length (u64 LE),
//! the manifest as JSON text, then the tensors as back-to-back DSFT blobs.
//! The manifest carries the training config and, for every parameter, the
//! byte offset of its blob (relative to the end of the manifest) and its
//! shape.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Params;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::{Model, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub offset: u64,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: TrainConfig,
    pub tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blobs = Vec::new();
        let mut tensors = BTreeMap::new();
        self.model.visit("", &mut |name, t| {
            tensors.insert(
                name,
                TensorEntry {
                    offset: blobs.len() as u64,
                    shape: t.dims().to_vec(),
                },
            );
            blobs.extend(t.to_dsft_bytes());
        });
        let manifest = Manifest {
            config: self.config.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + blobs.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blobs);
        out
    }

    /// Parses a checkpoint and checks that its tensors are exactly those of
    /// the architecture its config describes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(ck("missing DSCK header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(ck(format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(16..16 + len)
            .ok_or_else(|| ck("manifest runs past the end of the file"))?;
        let manifest: Manifest = serde_json::from_slice(json)?;
        manifest.config.validate()?;
        let blobs = &bytes[16 + len..];

        // a skeleton of the described architecture, overwritten below
        let mut model = Model::init(&manifest.config.decoder, &mut Rng::new(0))?;
        let mut expected = Vec::new();
        model.visit("", &mut |name, _| expected.push(name));
        let mut found: Vec<&String> = manifest.tensors.keys().collect();
        found.sort();
        let mut want: Vec<&String> = expected.iter().collect();
        want.sort();
        if found != want {
            return Err(ck(format!(
                "tensor set does not match the {} architecture in the config",
                manifest.config.decoder.variant
            )));
        }
        let mut failure = None;
        model.visit_mut("", &mut |name, slot| {
            if failure.is_some() {
                return;
            }
            let entry = &manifest.tensors[&name];
            let loaded = blobs
                .get(entry.offset as usize..)
                .ok_or_else(|| ck(format!("{name}: offset past end of file")))
                .and_then(|b| Tensor::read_dsft(&mut Cursor::new(b)));
            match loaded {
                Ok(t) if t.dims() == slot.dims() && t.dims() == entry.shape.as_slice() => *slot = t,
                Ok(t) => {
                    failure = Some(ck(format!(
                        "{name}: stored shape {:?} but the config implies {:?}",
                        t.dims(),
                        slot.dims()
                    )))
                }
                Err(e) => failure = Some(e),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(Self {
            config: manifest.config,
            model,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::Variant;
    use crate::train::init_model;

    fn checkpoint(variant: Variant) -> Checkpoint {
        let mut config = TrainConfig::desk();
        config.decoder.variant = variant;
        let model = init_model(&config).unwrap();
        Checkpoint { config, model }
    }

    #[test]
    fn round_trip_every_variant() {
        for v in Variant::ALL {
            let c = checkpoint(v);
            let bytes = c.to_bytes();
            assert_eq!(&bytes[..4], b"DSCK");
            assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
            assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
        }
    }

    #[test]
    fn manifest_offsets_point_at_dsft_blobs() {
        let bytes = checkpoint(Variant::Dsff).to_bytes();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let m: Manifest = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        let e = &m.tensors["decoder.head_k5.weight"];
        assert_eq!(e.shape, vec![1, 8, 5, 5]);
        let at = 16 + len + e.offset as usize;
        assert_eq!(&bytes[at..at + 4], b"DSFT");
    }

    #[test]
    fn config_that_disagrees_with_tensors_is_rejected() {
        let c = checkpoint(Variant::Dsff);
        let bytes = c.to_bytes();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut m: Manifest = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        m.config.decoder.variant = Variant::Concat;
        let json = serde_json::to_vec(&m).unwrap();
        let mut tampered = bytes[..8].to_vec();
        tampered.extend_from_slice(&(json.len() as u64).to_le_bytes());
        tampered.extend_from_slice(&json);
        tampered.extend_from_slice(&bytes[16 + len..]);
        assert!(matches!(Checkpoint::from_bytes(&tampered), Err(Error::Checkpoint(_))));

        m.config.decoder.variant = Variant::Dsff;
        m.config.decoder.head_mid_channels = 16;
        let json = serde_json::to_vec(&m).unwrap();
        let mut tampered = bytes[..8].to_vec();
        tampered.extend_from_slice(&(json.len() as u64).to_le_bytes());
        tampered.extend_from_slice(&json);
        tampered.extend_from_slice(&bytes[16 + len..]);
        assert!(matches!(Checkpoint::from_bytes(&tampered), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let mut bytes = checkpoint(Variant::DetailOnly).to_bytes();
        bytes[4] = 9;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let bytes = checkpoint(Variant::DetailOnly).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
