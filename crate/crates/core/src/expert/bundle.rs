//! Expert bundle file.
//!
//! An 8-byte little-endian manifest length, a JSON manifest
//! `{"backbone_fnv1a": "<16 hex>", "experts": [{"task_id", "d", "mu",
//! "tensors": [{"name", "shape", "count"}]}]}`, then for every tensor in
//! manifest order `count` u32-LE indices followed by `count` f32-LE values.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{backbone_checksum, SparseExpert, SparseTensor};
use crate::error::{Error, Result};
use crate::store::Checkpoint;

/// Experts bound to one backbone by its file checksum.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBundle {
    backbone_fnv1a: u64,
    experts: Vec<SparseExpert>,
}

impl ExpertBundle {
    pub fn new(backbone_fnv1a: u64, experts: Vec<SparseExpert>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &experts {
            if !seen.insert(e.task_id.as_str()) {
                return Err(Error::DuplicateName(e.task_id.clone()));
            }
            for (name, t) in &e.tensors {
                t.validate(name)?;
            }
        }
        Ok(ExpertBundle {
            backbone_fnv1a,
            experts,
        })
    }

    pub fn bind(backbone: &Checkpoint, experts: Vec<SparseExpert>) -> Result<Self> {
        Self::new(backbone_checksum(backbone), experts)
    }

    pub fn backbone_fnv1a(&self) -> u64 {
        self.backbone_fnv1a
    }

    pub fn experts(&self) -> &[SparseExpert] {
        &self.experts
    }

    pub fn task_ids(&self) -> impl Iterator<Item = &str> {
        self.experts.iter().map(|e| e.task_id.as_str())
    }

    pub fn position(&self, task_id: &str) -> Option<usize> {
        self.experts.iter().position(|e| e.task_id == task_id)
    }

    pub fn verify(&self, backbone: &Checkpoint) -> Result<()> {
        let actual = backbone_checksum(backbone);
        if actual != self.backbone_fnv1a {
            return Err(Error::ChecksumMismatch {
                bundle: self.backbone_fnv1a,
                backbone: actual,
            });
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    backbone_fnv1a: String,
    experts: Vec<ManifestExpert>,
}

#[derive(Serialize, Deserialize)]
struct ManifestExpert {
    task_id: String,
    d: f64,
    mu: f64,
    tensors: Vec<ManifestTensor>,
}

#[derive(Serialize, Deserialize)]
struct ManifestTensor {
    name: String,
    shape: Vec<usize>,
    count: usize,
}

pub fn bundle_to_bytes(bundle: &ExpertBundle) -> Vec<u8> {
    let manifest = Manifest {
        backbone_fnv1a: format!("{:016x}", bundle.backbone_fnv1a),
        experts: bundle
            .experts
            .iter()
            .map(|e| ManifestExpert {
                task_id: e.task_id.clone(),
                d: e.d,
                mu: e.mu,
                tensors: e
                    .tensors
                    .iter()
                    .map(|(name, t)| ManifestTensor {
                        name: name.clone(),
                        shape: t.shape.clone(),
                        count: t.indices.len(),
                    })
                    .collect(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serialization cannot fail");
    let mut out = (json.len() as u64).to_le_bytes().to_vec();
    out.extend_from_slice(&json);
    for e in &bundle.experts {
        for t in e.tensors.values() {
            for &i in &t.indices {
                out.extend_from_slice(&i.to_le_bytes());
            }
            for &v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::TruncatedPayload(format!(
                    "{what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

pub fn bundle_from_bytes(bytes: &[u8]) -> Result<ExpertBundle> {
    let mut r = Reader { bytes, pos: 0 };
    let len = u64::from_le_bytes(r.take(8, "manifest length")?.try_into().unwrap());
    let len = usize::try_from(len)
        .map_err(|_| Error::TruncatedPayload(format!("manifest length {len} too large")))?;
    let manifest: Manifest = serde_json::from_slice(r.take(len, "manifest")?)
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let checksum = u64::from_str_radix(&manifest.backbone_fnv1a, 16).map_err(|e| {
        Error::MalformedHeader(format!("backbone_fnv1a `{}`: {e}", manifest.backbone_fnv1a))
    })?;

    let mut experts = Vec::with_capacity(manifest.experts.len());
    for me in manifest.experts {
        let mut tensors = BTreeMap::new();
        for mt in me.tensors {
            let idx_bytes = r.take(4 * mt.count, &mt.name)?;
            let val_bytes = r.take(4 * mt.count, &mt.name)?;
            let indices = idx_bytes
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let values = val_bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if mt.shape.contains(&0) {
                return Err(Error::MalformedHeader(format!(
                    "tensor `{}` has a zero dimension",
                    mt.name
                )));
            }
            let tensor = SparseTensor {
                shape: mt.shape,
                indices,
                values,
            };
            if tensors.insert(mt.name.clone(), tensor).is_some() {
                return Err(Error::DuplicateName(mt.name));
            }
        }
        experts.push(SparseExpert {
            task_id: me.task_id,
            d: me.d,
            mu: me.mu,
            tensors,
        });
    }
    ExpertBundle::new(checksum, experts)
}

pub fn save_bundle(bundle: &ExpertBundle, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, bundle_to_bytes(bundle))?;
    Ok(())
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<ExpertBundle> {
    bundle_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn expert(task: &str, indices: Vec<u32>, values: Vec<f32>) -> SparseExpert {
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "w".to_string(),
            SparseTensor {
                shape: vec![2, 4],
                indices,
                values,
            },
        );
        SparseExpert {
            task_id: task.into(),
            d: 0.25,
            mu: 3.5,
            tensors,
        }
    }

    #[test]
    fn manifest_layout() {
        let bundle =
            ExpertBundle::new(0xabc, vec![expert("a", vec![1, 6], vec![0.5, -2.0])]).unwrap();
        let bytes = bundle_to_bytes(&bundle);
        let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let manifest = std::str::from_utf8(&bytes[8..8 + len]).unwrap();
        assert_eq!(
            manifest,
            r#"{"backbone_fnv1a":"0000000000000abc","experts":[{"task_id":"a","d":0.25,"mu":3.5,"tensors":[{"name":"w","shape":[2,4],"count":2}]}]}"#
        );
        let blocks = &bytes[8 + len..];
        assert_eq!(blocks.len(), 16);
        assert_eq!(&blocks[..4], &1u32.to_le_bytes());
        assert_eq!(&blocks[12..], &(-2.0f32).to_le_bytes());
        assert_eq!(bundle_from_bytes(&bytes).unwrap(), bundle);
    }

    #[test]
    fn rejects_bad_bundles() {
        assert!(matches!(
            ExpertBundle::new(
                1,
                vec![expert("a", vec![], vec![]), expert("a", vec![], vec![])]
            ),
            Err(Error::DuplicateName(_))
        ));
        assert!(ExpertBundle::new(1, vec![expert("a", vec![3, 2], vec![1.0, 1.0])]).is_err());
        assert!(matches!(
            ExpertBundle::new(1, vec![expert("a", vec![8], vec![1.0])]),
            Err(Error::IndexOutOfBounds { .. })
        ));

        let bundle = ExpertBundle::new(7, vec![expert("a", vec![0], vec![1.0])]).unwrap();
        let bytes = bundle_to_bytes(&bundle);
        assert!(matches!(
            bundle_from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::TruncatedPayload(_))
        ));
        assert!(matches!(
            bundle_from_bytes(&bytes[..4]),
            Err(Error::TruncatedPayload(_))
        ));
        let mut garbage = 3u64.to_le_bytes().to_vec();
        garbage.extend_from_slice(b"{{{");
        assert!(matches!(
            bundle_from_bytes(&garbage),
            Err(Error::MalformedHeader(_))
        ));
    }
}
