//! Binary checkpoint format plus a JSON sidecar.
//!
//! Layout: magic `DCAP`, format version (u32 LE), tensor count (u32 LE),
//! then per tensor: name length (u32 LE) + UTF-8 bytes, rank (u32 LE),
//! dims (u32 LE each), payload (f64 LE). The sidecar `<path>.json` carries
//! the step counter, a config echo, and the checkpoint id (sha256 of the
//! binary file), which is what downstream tools compare for identity.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ParamStore, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"DCAP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub id: String,
    pub kind: String,
    pub step: u64,
    pub seed: u64,
    pub config: serde_json::Value,
}

pub fn write_checkpoint(
    path: &Path,
    params: &ParamStore,
    kind: &str,
    seed: u64,
    config: serde_json::Value,
) -> Result<Sidecar> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for t in params.tensors() {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in &t.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::File::create(path)?.write_all(&buf)?;

    let id = hex_digest(&buf);
    let sidecar = Sidecar {
        id,
        kind: kind.to_string(),
        step: params.step,
        seed,
        config,
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    fs::write(sidecar_path(path), json)?;
    Ok(sidecar)
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, Sidecar)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::config(format!("cannot open checkpoint {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let mut cur = 0usize;
    let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
        if *cur + n > bytes.len() {
            return Err(Error::config("truncated checkpoint"));
        }
        let s = &bytes[*cur..*cur + n];
        *cur += n;
        Ok(s)
    };
    if take(&mut cur, 4)? != MAGIC {
        return Err(Error::config("bad checkpoint magic"));
    }
    let version = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::config(format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
    let mut params = ParamStore::empty();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut cur, name_len)?.to_vec())
            .map_err(|_| Error::config("bad tensor name"))?;
        let rank = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut cur, n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(Tensor { name, shape, data })?;
    }
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    params.step = sidecar.step;
    Ok((params, sidecar))
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    std::path::PathBuf::from(p)
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn round_trip_preserves_everything() {
        let spec: &[(&str, Vec<usize>, Init)] = &[
            ("embed", vec![10, 4], Init::Uniform(0.1)),
            ("w", vec![4, 4], Init::ScaledNormal { fan_in: 4 }),
        ];
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut ps = ParamStore::init(spec, &mut rng).unwrap();
        ps.step = 42;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dcap");
        let side = write_checkpoint(&path, &ps, "test", 9, serde_json::json!({"x": 1})).unwrap();
        let (loaded, side2) = load_checkpoint(&path).unwrap();
        assert_eq!(side.id, side2.id);
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.data(0), ps.data(0));
        assert_eq!(loaded.tensor(1).shape, vec![4, 4]);
    }

    #[test]
    fn same_params_same_id() {
        let spec: &[(&str, Vec<usize>, Init)] = &[("w", vec![8], Init::Uniform(0.1))];
        let ps = ParamStore::init(spec, &mut ChaCha12Rng::seed_from_u64(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = write_checkpoint(&dir.path().join("a.dcap"), &ps, "t", 1, serde_json::json!({}))
            .unwrap();
        let b = write_checkpoint(&dir.path().join("b.dcap"), &ps, "t", 1, serde_json::json!({}))
            .unwrap();
        assert_eq!(a.id, b.id);
    }
}
