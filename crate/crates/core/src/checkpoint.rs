//! Binary model checkpoints.
//!
//! Layout (little-endian): magic `NUNET1`, `u64` config length, canonical
//! config JSON, `u64` tensor count, then per tensor `u32` name length, UTF-8
//! name, `u32` rank, `u64` dims, `f64` data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

pub const MAGIC: &[u8; 6] = b"NUNET1";

/// Upper bound on any single length field, to fail fast on corrupt files.
const MAX_LEN: u64 = 1 << 34;

pub fn save(path: &Path, config: &ModelConfig, params: &ParamSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let json = config.canonical_json();
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(json.as_bytes())?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for (_, p) in params.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        let shape = p.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        let v = u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes"));
        if v > MAX_LEN {
            return Err(Error::Checkpoint(format!("implausible length {v}")));
        }
        Ok(v)
    }
}

/// Contents of a checkpoint file.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
    };
    if r.bytes(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint (bad magic)", path.display())));
    }
    let n = r.u64()? as usize;
    let config: ModelConfig = serde_json::from_slice(&r.bytes(n)?)
        .map_err(|e| Error::Checkpoint(format!("config header: {e}")))?;
    let count = r.u64()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(len)?).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.bytes(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    let mut rest = Vec::new();
    r.inner.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok(Checkpoint { config, tensors })
}

/// Copies checkpoint values into `params`, which must have been built from
/// `expected`. Config differences are reported as [`Error::Incompatible`].
pub fn load_into(path: &Path, expected: &ModelConfig, params: &mut ParamSet) -> Result<()> {
    let ckpt = read(path)?;
    let fields = expected.diff_fields(&ckpt.config);
    if !fields.is_empty() {
        return Err(Error::Incompatible { fields });
    }
    if ckpt.tensors.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model has {}",
            ckpt.tensors.len(),
            params.len()
        )));
    }
    for (name, t) in ckpt.tensors {
        let id = params
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
        if params.value(id).shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                params.value(id).shape()
            )));
        }
        *params.value_mut(id) = t;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NuNet;

    #[test]
    fn round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let config = ModelConfig {
            output_scale: [0.1, 1.0 / 3.0, 2.0_f64.sqrt(), 123.456789, 1e-7],
            ..ModelConfig::tiny()
        };
        let (_, params) = NuNet::new(&config).unwrap();
        save(&path, &config, &params).unwrap();
        assert_eq!(read(&path).unwrap().config, config);

        let other_seed = ModelConfig {
            init_seed: 99,
            ..config.clone()
        };
        let (_, mut fresh) = NuNet::new(&other_seed).unwrap();
        let err = load_into(&path, &other_seed, &mut fresh).unwrap_err();
        assert!(matches!(err, Error::Incompatible { ref fields } if fields == &["init_seed"]));

        let (_, mut fresh) = NuNet::new(&config).unwrap();
        fresh.value_mut(fresh.ids().next().unwrap()).data_mut().fill(3.0);
        load_into(&path, &config, &mut fresh).unwrap();
        for ((_, a), (_, b)) in params.iter().zip(fresh.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read(&path), Err(Error::Checkpoint(_))));
        std::fs::write(&path, b"garbage").unwrap();
        assert!(matches!(read(&path), Err(Error::Checkpoint(_))));
    }
}
