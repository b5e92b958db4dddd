//! Binary checkpoint: `HQOR` magic, format version, JSON header, then the
//! flattened weights as little-endian f64.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Arch, Model};
use crate::error::{Error, Result};
use crate::features::NormStats;

pub const MAGIC: &[u8; 4] = b"HQOR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub arch: Arch,
    pub n_params: usize,
    /// Free-form tag, e.g. `gnn_p/latency`.
    pub tag: String,
    pub norm: Option<NormStats>,
}

pub fn to_bytes(model: &Model, tag: &str, norm: Option<&NormStats>) -> Vec<u8> {
    let header = Header {
        arch: model.arch.clone(),
        n_params: model.params.len(),
        tag: tag.to_string(),
        norm: norm.cloned(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + 8 * model.params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &model.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, Header)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let rest = &bytes[12 + hlen..];
    if rest.len() != 8 * header.n_params {
        return Err(bad(&format!(
            "expected {} weights, found {} bytes",
            header.n_params,
            rest.len()
        )));
    }
    let params: Vec<f64> = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if params.iter().any(|p| !p.is_finite()) {
        return Err(bad("non-finite weight"));
    }
    let model = Model {
        arch: header.arch.clone(),
        params,
    };
    // Shape check against the architecture.
    let expected = super::Layout::new(&model.arch).total;
    if expected != model.params.len() {
        return Err(bad(&format!("architecture needs {expected} weights, file has {}", model.params.len())));
    }
    Ok((model, header))
}

pub fn save(path: &Path, model: &Model, tag: &str, norm: Option<&NormStats>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(model, tag, norm))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, Header)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::Variant;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = Model::init(Arch::new(Variant::Gcn, 8, true), &mut rng);
        let bytes = to_bytes(&m, "gnn_p/latency", Some(&NormStats::identity()));
        let (back, h) = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(h.tag, "gnn_p/latency");
        assert_eq!(to_bytes(&back, "gnn_p/latency", Some(&NormStats::identity())), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = Model::init(Arch::new(Variant::Sage, 4, false), &mut rng);
        let bytes = to_bytes(&m, "x", None);
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(from_bytes(&v2).is_err());
    }
}
