//! Binary feature cache.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `PDFC`                            |
//! | 4      | 2    | format version (1)                      |
//! | 6      | 1    | feature kind code                       |
//! | 7      | 1    | reserved (0)                            |
//! | 8      | 4    | dim (u32)                               |
//! | 12     | 4    | frame count (u32)                       |
//! | 16     | 4    | frame period in ms (f32)                |
//! | 20     | 4    | history length in bytes (u32)           |
//! | 24     | h    | history, UTF-8, entries joined with `;` |
//! | 24+h   | 4·n·d| frames, row-major f32                   |

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::{FeatureKind, FeatureMatrix, Transform};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PDFC";
const VERSION: u16 = 1;

pub fn write_feature_cache(path: impl AsRef<Path>, feat: &FeatureMatrix) -> Result<()> {
    let path = path.as_ref();
    let history = feat
        .history
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(";");
    let mut buf = Vec::with_capacity(24 + history.len() + 4 * feat.values.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(feat.kind.code());
    buf.push(0);
    buf.extend_from_slice(&(feat.dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(feat.num_frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(feat.frame_period_ms as f32).to_le_bytes());
    buf.extend_from_slice(&(history.len() as u32).to_le_bytes());
    buf.extend_from_slice(history.as_bytes());
    for v in feat.values.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_feature_cache(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let ctx = path.display().to_string();
    let bad = |msg: &str| Error::parse(ctx.clone(), msg.to_string());
    if bytes.len() < 24 || &bytes[..4] != MAGIC {
        return Err(bad("not a feature cache"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let kind = FeatureKind::from_code(bytes[6]).ok_or_else(|| bad("unknown feature kind"))?;
    let dim = u32_at(8) as usize;
    let frames = u32_at(12) as usize;
    let period = f32::from_le_bytes(bytes[16..20].try_into().unwrap());
    let hlen = u32_at(20) as usize;
    let data_start = 24 + hlen;
    if bytes.len() != data_start + 4 * dim * frames {
        return Err(bad("truncated or oversized payload"));
    }
    let history_text = std::str::from_utf8(&bytes[24..data_start]).map_err(|_| bad("history is not UTF-8"))?;
    let history = if history_text.is_empty() {
        Vec::new()
    } else {
        history_text
            .split(';')
            .map(str::parse::<Transform>)
            .collect::<Result<Vec<_>>>()?
    };
    let values: Vec<f64> = bytes[data_start..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    let values = Array2::from_shape_vec((frames, dim), values).map_err(|e| bad(&e.to_string()))?;
    Ok(FeatureMatrix {
        values,
        kind,
        frame_period_ms: f64::from(period),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn cache_round_trip(rows in 0usize..20, dim in 1usize..8, seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = crate::seed::rng_from(seed);
            let values = Array2::from_shape_fn((rows, dim), |_| f64::from(rng.random::<f32>()));
            let mut feat = FeatureMatrix::new(values, FeatureKind::Mfcc26, 10.0);
            feat.history = vec![Transform::Delta { half_window: 2 }, Transform::ZNorm];
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("f.feat");
            write_feature_cache(&p, &feat).unwrap();
            prop_assert_eq!(read_feature_cache(&p).unwrap(), feat);
        }
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.feat");
        std::fs::write(&p, b"not a cache at all, nope").unwrap();
        assert!(matches!(read_feature_cache(&p), Err(Error::Parse { .. })));
    }
}
