//! Binary policy checkpoints.
//!
//! ```text
//! magic     8 bytes  "MIXLABCK"
//! version   u32 LE
//! config    u64 LE length + JSON policy config
//! manifest  u32 LE count, then per parameter:
//!           u32 LE id length, id, u8 trainable, u32 LE rank, rank × u64 LE dims
//! payload   every parameter's values in manifest order, f64 LE
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::policy::{Policy, PolicyConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MIXLABCK";
pub const VERSION: u32 = 1;

/// One manifest entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

pub fn manifest(store: &ParamStore) -> Vec<ManifestEntry> {
    store
        .iter()
        .map(|p| ManifestEntry {
            id: p.id.clone(),
            shape: p.value.shape().to_vec(),
            trainable: p.trainable,
        })
        .collect()
}

pub fn encode_checkpoint(policy: &Policy) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&policy.config)?;
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(&cfg);
    let m = manifest(&policy.store);
    out.extend_from_slice(&(m.len() as u32).to_le_bytes());
    for e in &m {
        out.extend_from_slice(&(e.id.len() as u32).to_le_bytes());
        out.extend_from_slice(e.id.as_bytes());
        out.push(u8::from(e.trainable));
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for p in policy.store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(Error::CheckpointTruncated {
                expected: self.pos.saturating_add(n),
                found: self.buf.len(),
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64()?)
            .map_err(|_| Error::CheckpointManifest(format!("{what} does not fit in memory")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Policy> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r
        .take(MAGIC.len())
        .map_err(|_| Error::CheckpointVersion("file too short for a header".into()))?;
    if magic != MAGIC {
        return Err(Error::CheckpointVersion(
            "not a checkpoint (bad magic)".into(),
        ));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointVersion(format!(
            "format version {version}, expected {VERSION}"
        )));
    }
    let n = r.len("config")?;
    let config: PolicyConfig = serde_json::from_slice(r.take(n)?)?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u32()? as usize;
        let id = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::CheckpointManifest("parameter id is not UTF-8".into()))?;
        let trainable = r.take(1)?[0] != 0;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.len("dimension"))
            .collect::<Result<Vec<_>>>()?;
        entries.push(ManifestEntry {
            id,
            shape,
            trainable,
        });
    }

    let with_geo = entries
        .iter()
        .any(|e| e.id.starts_with(crate::backbones::geo::PREFIX));
    let mut policy = if with_geo {
        Policy::new(config, 0)?
    } else {
        Policy::without_geo_encoder(config, 0)?
    };
    let expected = manifest(&policy.store);
    let ids = |m: &[ManifestEntry]| {
        m.iter()
            .map(|e| (e.id.clone(), e.shape.clone()))
            .collect::<Vec<_>>()
    };
    if ids(&entries) != ids(&expected) {
        let missing: Vec<_> = expected
            .iter()
            .filter(|e| !entries.iter().any(|f| f.id == e.id))
            .map(|e| &e.id)
            .collect();
        let extra: Vec<_> = entries
            .iter()
            .filter(|e| !expected.iter().any(|f| f.id == e.id))
            .map(|e| &e.id)
            .collect();
        return Err(Error::CheckpointManifest(format!(
            "manifest does not match the configured model (missing {missing:?}, unexpected {extra:?}, or shapes/order differ)"
        )));
    }
    let total: usize = entries
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    let payload = &bytes[r.pos..];
    if payload.len() != total * 8 {
        return Err(Error::CheckpointTruncated {
            expected: r.pos + total * 8,
            found: bytes.len(),
        });
    }
    let mut chunks = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for (i, e) in entries.iter().enumerate() {
        let n: usize = e.shape.iter().product();
        let data: Vec<f64> = chunks.by_ref().take(n).collect();
        let p = policy.store.by_index_mut(i);
        p.value = Tensor::new(e.shape.clone(), data)?;
        p.trainable = e.trainable;
    }
    Ok(policy)
}

pub fn save_checkpoint(policy: &Policy, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(policy)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Policy> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionSchemeId;

    fn policy() -> Policy {
        let cfg = PolicyConfig {
            scheme: FusionSchemeId::AeFusion,
            ..Default::default()
        };
        Policy::new(cfg, 11).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = policy();
        let q = decode_checkpoint(&encode_checkpoint(&p).unwrap()).unwrap();
        assert_eq!(manifest(&q.store), manifest(&p.store));
        for (a, b) in p.store.iter().zip(q.store.iter()) {
            assert!(a
                .value
                .data()
                .iter()
                .zip(b.value.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn distinct_errors() {
        let bytes = encode_checkpoint(&policy()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(Error::CheckpointVersion(_))
        ));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(Error::CheckpointVersion(_))
        ));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3]),
            Err(Error::CheckpointTruncated { .. })
        ));

        let mut other = policy();
        other
            .store
            .insert("extra.w", Tensor::zeros(&[2]), true)
            .unwrap();
        let bytes = encode_checkpoint(&other).unwrap();
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::CheckpointManifest(_))
        ));
    }

    #[test]
    fn policy_without_encoder_round_trips() {
        let mut p = policy();
        p.config.scheme = FusionSchemeId::None;
        let mut p = Policy::new(p.config.clone(), 3).unwrap();
        p.drop_geo_encoder();
        let q = decode_checkpoint(&encode_checkpoint(&p).unwrap()).unwrap();
        assert!(q.geo.is_none());
        assert_eq!(manifest(&q.store), manifest(&p.store));
    }
}
