//! Binary checkpoint format for parameter sets.
//!
//! Layout: magic `FRNK`, format version (u32 LE), parameter count (u32 LE),
//! then one record per parameter — name length (u32 LE), UTF-8 name, rows,
//! cols (u32 LE each), row-major little-endian f32 values — followed by the
//! Adagrad accumulators as a second run of records in the same layout.
//! Hyperparameters and vocabularies live in text sidecars next to the
//! binary.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::matrix::{Matrix, Scalar};
use super::param::ParamSet;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FRNK";
pub const FORMAT_VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn write_record(w: &mut impl Write, name: &str, m: &Matrix<f32>) -> std::io::Result<()> {
    write_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    write_u32(w, m.rows() as u32)?;
    write_u32(w, m.cols() as u32)?;
    for &v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_record(r: &mut impl Read) -> Result<(String, Matrix<f32>)> {
    let name_len = read_u32(r)? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let mut data = vec![0f32; rows * cols];
    let mut buf = [0u8; 4];
    for v in &mut data {
        r.read_exact(&mut buf)?;
        *v = f32::from_le_bytes(buf);
    }
    Ok((name, Matrix::from_vec(rows, cols, data)))
}

/// Write all parameters (values then accumulators) to one binary file.
/// Non-finite values are rejected.
pub fn save_params<T: Scalar>(params: &ParamSet<T>, path: &Path) -> Result<()> {
    for p in params.iter() {
        if !p.value.is_finite() || !p.accum.is_finite() {
            return Err(Error::Checkpoint(format!(
                "parameter {:?} holds non-finite values",
                p.name
            )));
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    write_u32(&mut w, FORMAT_VERSION)?;
    write_u32(&mut w, params.len() as u32)?;
    for p in params.iter() {
        write_record(&mut w, &p.name, &p.value.cast::<f32>())?;
    }
    write_u32(&mut w, params.len() as u32)?;
    for p in params.iter() {
        write_record(&mut w, &p.name, &p.accum.cast::<f32>())?;
    }
    w.flush()?;
    Ok(())
}

/// Load a parameter set saved by [`save_params`]. Every accumulator must
/// match a value record by name and shape.
pub fn load_params(path: &Path) -> Result<ParamSet<f32>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic bytes {magic:?} in {path:?}"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let (name, value) = read_record(&mut r)?;
        if !value.is_finite() {
            return Err(Error::Checkpoint(format!(
                "parameter {name:?} holds non-finite values"
            )));
        }
        params.add(&name, value, false);
    }
    let accum_count = read_u32(&mut r)? as usize;
    if accum_count != count {
        return Err(Error::Checkpoint(
            "accumulator section does not match parameter section".into(),
        ));
    }
    for _ in 0..count {
        let (name, accum) = read_record(&mut r)?;
        let id = params.by_name(&name).ok_or_else(|| {
            Error::Checkpoint(format!("accumulator {name:?} has no matching parameter"))
        })?;
        let p = params.get_mut(id);
        if !p.value.same_shape(&accum) {
            return Err(Error::Checkpoint(format!(
                "accumulator shape mismatch for {name:?}"
            )));
        }
        p.accum = accum;
    }
    Ok(params)
}

/// Write a `key=value` sidecar; keys keep insertion order.
pub fn write_kv(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_kv(path: &Path) -> Result<Vec<(String, String)>> {
    let data = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for line in data.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Checkpoint(format!("bad sidecar line {line:?} in {path:?}"))
        })?;
        pairs.push((k.to_string(), v.to_string()));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn roundtrip_values_and_accumulators() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::<f32>::new();
        for (name, r, c) in [("alpha", 3, 4), ("beta", 2, 2)] {
            let mut m = Matrix::zeros(r, c);
            m.fill_uniform(&mut rng, 0.5);
            let id = ps.add(name, m, false);
            ps.get_mut(id).grad.fill_uniform(&mut rng, 0.5);
        }
        ps.adagrad_step(0.1, 0.0, 0.0).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.frnk");
        save_params(&ps, &path).unwrap();
        let back = load_params(&path).unwrap();
        assert_eq!(back.len(), ps.len());
        for (a, b) in ps.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
            assert_eq!(a.accum, b.accum);
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.frnk");
        fs::write(&path, b"NOPE....").unwrap();
        assert!(load_params(&path).is_err());
    }

    #[test]
    fn rejects_non_finite_values() {
        let mut ps = ParamSet::<f32>::new();
        let id = ps.add("w", Matrix::zeros(1, 1), false);
        ps.get_mut(id).value.set(0, 0, f32::INFINITY);
        let dir = tempfile::tempdir().unwrap();
        assert!(save_params(&ps, &dir.path().join("m.frnk")).is_err());
    }

    #[test]
    fn kv_sidecar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hparams.txt");
        let pairs = vec![
            ("lr".to_string(), "0.1".to_string()),
            ("mode".to_string(), "amp".to_string()),
        ];
        write_kv(&path, &pairs).unwrap();
        assert_eq!(read_kv(&path).unwrap(), pairs);
    }
}
