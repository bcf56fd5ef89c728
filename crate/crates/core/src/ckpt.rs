//! Versioned binary checkpoints.
//!
//! Layout: 4-byte magic `SSMS`, u32 format version, u32 JSON config length,
//! the config JSON, u64 parameter count, then the flat f32 little-endian
//! parameter payload in declaration order (projection, trunk, head).

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"SSMS";
pub const VERSION: u32 = 1;

pub fn save_params(path: &Path, cfg: &ModelConfig, params: &ModelParams<f32>) -> Result<()> {
    let json = serde_json::to_vec(cfg).map_err(|e| Error::Config(e.to_string()))?;
    let flat = params.flatten();
    let f = std::fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(json.len() as u32)?;
    w.write_all(&json)?;
    w.write_u64::<LittleEndian>(flat.len() as u64)?;
    for v in flat {
        w.write_f32::<LittleEndian>(v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<(ModelConfig, ModelParams<f32>)> {
    let f = std::fs::File::open(path)?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Corrupt("file shorter than header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Corrupt("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let json_len = r.read_u32::<LittleEndian>()? as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json)
        .map_err(|_| Error::Corrupt("truncated config".into()))?;
    let cfg: ModelConfig =
        serde_json::from_slice(&json).map_err(|e| Error::Corrupt(format!("bad config: {e}")))?;
    cfg.validate()?;
    let n = r.read_u64::<LittleEndian>()? as usize;
    let mut flat = Vec::with_capacity(n);
    for _ in 0..n {
        flat.push(
            r.read_f32::<LittleEndian>()
                .map_err(|_| Error::Corrupt("truncated parameter payload".into()))?,
        );
    }
    let mut params = ModelParams::<f32>::init(&cfg)?;
    if n != params.param_count() {
        return Err(Error::Corrupt(format!(
            "payload holds {n} values but the config implies {}",
            params.param_count()
        )));
    }
    params.unflatten(&flat)?;
    Ok((cfg, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bimamba::Variant;
    use crate::model::{model_forward, Pooling};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_feat: 8,
            d_model: 4,
            d_inner: 6,
            n_state: 2,
            n_blocks: 2,
            variant: Variant::Dua,
            k_conv: 3,
            pooling: Pooling::Mean,
            class_weights: None,
            seed: 11,
        }
    }

    #[test]
    fn roundtrip_byte_identical_and_logit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg();
        let p = ModelParams::<f32>::init(&c).unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_params(&p1, &c, &p).unwrap();
        let (c2, loaded) = load_params(&p1).unwrap();
        assert_eq!(c2, c);
        assert_eq!(loaded.flatten(), p.flatten());
        save_params(&p2, &c2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((6, 8), |_| rng.gen_range(-1.0f32..1.0));
        let (la, _) = model_forward(&x, &p, false).unwrap();
        let (lb, _) = model_forward(&x, &loaded, false).unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn truncation_and_corruption_errors() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg();
        let p = ModelParams::<f32>::init(&c).unwrap();
        let path = dir.path().join("c.ckpt");
        save_params(&path, &c, &p).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let trunc = dir.path().join("t.ckpt");
        std::fs::write(&trunc, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load_params(&trunc), Err(Error::Corrupt(_))));
        std::fs::write(&trunc, &bytes[..2]).unwrap();
        assert!(matches!(load_params(&trunc), Err(Error::Corrupt(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&trunc, &bad).unwrap();
        assert!(matches!(load_params(&trunc), Err(Error::Corrupt(_))));
        let mut vers = bytes.clone();
        vers[4] = 99;
        std::fs::write(&trunc, &vers).unwrap();
        assert!(matches!(
            load_params(&trunc),
            Err(Error::VersionMismatch { found: 99, expected: VERSION })
        ));
    }
}
