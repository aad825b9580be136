use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"NICF";
pub const FEATURE_VERSION: u32 = 1;

const HEADER_LEN: usize = 4 + 4 * 5;
const KIND: &str = "feature";

/// Precomputed CNN outputs for one image: a global vector and a grid of
/// region vectors stored row-major as `R × D_a`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub image_id: u64,
    pub global: Vec<f32>,
    pub regions: Vec<f32>,
}

/// A feature file: shared dimensions plus records in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub feature_dim: usize,
    pub region_count: usize,
    pub region_dim: usize,
    pub records: Vec<FeatureRecord>,
}

impl FeatureSet {
    pub fn new(feature_dim: usize, region_count: usize, region_dim: usize) -> Self {
        FeatureSet {
            feature_dim,
            region_count,
            region_dim,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn find(&self, image_id: u64) -> Option<&FeatureRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    fn record_len(&self) -> usize {
        8 + 4 * (self.feature_dim + self.region_count * self.region_dim)
    }

    /// Checks dimensions, finiteness and id uniqueness.
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.region_count == 0 || self.region_dim == 0 {
            return Err(Error::DimensionMismatch {
                kind: KIND,
                detail: format!(
                    "dimensions must be positive (D_f={}, R={}, D_a={})",
                    self.feature_dim, self.region_count, self.region_dim
                ),
            });
        }
        let mut seen = HashSet::new();
        for r in &self.records {
            if r.global.len() != self.feature_dim || r.regions.len() != self.region_count * self.region_dim {
                return Err(Error::DimensionMismatch {
                    kind: KIND,
                    detail: format!("record {} does not match the header dimensions", r.image_id),
                });
            }
            if !r.global.iter().chain(&r.regions).all(|x| x.is_finite()) {
                return Err(Error::Malformed {
                    kind: KIND,
                    detail: format!("record {} holds a non-finite value", r.image_id),
                });
            }
            if !seen.insert(r.image_id) {
                return Err(Error::Malformed {
                    kind: KIND,
                    detail: format!("duplicate image id {}", r.image_id),
                });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(HEADER_LEN + self.records.len() * self.record_len());
        out.extend_from_slice(FEATURE_MAGIC);
        for v in [
            FEATURE_VERSION,
            self.records.len() as u32,
            self.feature_dim as u32,
            self.region_count as u32,
            self.region_dim as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for r in &self.records {
            out.extend_from_slice(&r.image_id.to_le_bytes());
            for x in r.global.iter().chain(&r.regions) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
            return Err(Error::BadMagic { kind: KIND });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                kind: KIND,
                detail: format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
            });
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = u32_at(0);
        if version != FEATURE_VERSION {
            return Err(Error::UnsupportedVersion { kind: KIND, version });
        }
        let count = u32_at(1) as usize;
        let mut set = FeatureSet::new(u32_at(2) as usize, u32_at(3) as usize, u32_at(4) as usize);
        if set.feature_dim == 0 || set.region_count == 0 || set.region_dim == 0 {
            return Err(Error::DimensionMismatch {
                kind: KIND,
                detail: "header dimensions must be positive".into(),
            });
        }

        let payload = &bytes[HEADER_LEN..];
        let record_len = set.record_len();
        let expected = count * record_len;
        if payload.len() < expected {
            return Err(Error::Truncated {
                kind: KIND,
                detail: format!("payload has {} bytes, header implies {expected}", payload.len()),
            });
        }
        if payload.len() > expected {
            return Err(Error::DimensionMismatch {
                kind: KIND,
                detail: format!(
                    "payload has {} bytes, header implies {expected}",
                    payload.len()
                ),
            });
        }

        let region_len = set.region_count * set.region_dim;
        set.records = payload
            .chunks_exact(record_len)
            .map(|chunk| {
                let image_id = u64::from_le_bytes(chunk[..8].try_into().unwrap());
                let mut floats = chunk[8..]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()));
                let global = floats.by_ref().take(set.feature_dim).collect();
                let regions = floats.take(region_len).collect();
                FeatureRecord {
                    image_id,
                    global,
                    regions,
                }
            })
            .collect();
        set.validate()?;
        Ok(set)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureSet {
        let mut s = FeatureSet::new(3, 2, 2);
        for id in [5u64, 9] {
            s.records.push(FeatureRecord {
                image_id: id,
                global: vec![id as f32, 0.5, -1.0],
                regions: vec![0.25, 1.0, 2.0, -3.5],
            });
        }
        s
    }

    #[test]
    fn round_trip() {
        let s = sample();
        let bytes = s.to_bytes().unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 2 * (8 + 4 * 7));
        let back = FeatureSet::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(FeatureSet::from_bytes(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn wrong_version() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(
            FeatureSet::from_bytes(&bytes),
            Err(Error::UnsupportedVersion { version: 2, .. })
        ));
    }

    #[test]
    fn truncated_payload() {
        let bytes = sample().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(FeatureSet::from_bytes(cut), Err(Error::Truncated { .. })));
        assert!(matches!(FeatureSet::from_bytes(&bytes[..10]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn header_dims_contradict_payload() {
        let mut bytes = sample().to_bytes().unwrap();
        // D_f 3 -> 2: each record shrinks so the payload is too long.
        bytes[12..16].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            FeatureSet::from_bytes(&bytes),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn non_finite_rejected() {
        let mut s = sample();
        s.records[0].global[1] = f32::NAN;
        assert!(s.to_bytes().is_err());
    }
}
