//! Binary parameter snapshots.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "DN4D" | u32 version | u32 count
//! count × ( u32 name_len | name | u32 ndim | ndim × u32 dim | u32 len | len × f32 )
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::diffcore::Array;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"DN4D";
pub const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn narrow(v: usize, path: &Path) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::format(path.display().to_string(), "field exceeds u32"))
}

/// Writes named arrays, narrowed to f32.
pub fn write_arrays<T: Scalar>(path: &Path, arrays: &[(&str, &Array<T>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    put_u32(&mut w, VERSION)?;
    put_u32(&mut w, narrow(arrays.len(), path)?)?;
    for (name, a) in arrays {
        put_u32(&mut w, narrow(name.len(), path)?)?;
        w.write_all(name.as_bytes())?;
        put_u32(&mut w, narrow(a.ndim(), path)?)?;
        for &d in a.shape() {
            put_u32(&mut w, narrow(d, path)?)?;
        }
        put_u32(&mut w, narrow(a.len(), path)?)?;
        for &v in a.data() {
            w.write_all(&v.to_f32_lossy().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads every named array of a checkpoint.
pub fn read_arrays<T: Scalar>(path: &Path) -> Result<Vec<(String, Array<T>)>> {
    let mut r = BufReader::new(File::open(path)?);
    let bad = |reason: &str| Error::format(path.display().to_string(), reason);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = get_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let count = get_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = get_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
        let ndim = get_u32(&mut r)? as usize;
        let shape = (0..ndim)
            .map(|_| get_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = get_u32(&mut r)? as usize;
        if shape.iter().product::<usize>() != n {
            return Err(bad("shape does not match element count"));
        }
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        out.push((name, Array::new(shape, data)?));
    }
    Ok(out)
}

pub fn save_store<T: Scalar>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    let arrays: Vec<(&str, &Array<T>)> = store.iter().map(|(_, p)| (p.name.as_str(), &p.value)).collect();
    write_arrays(path, &arrays)
}

pub fn load_store<T: Scalar>(path: &Path, store: &mut ParamStore<T>) -> Result<()> {
    store.load_named(&read_arrays(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;

    #[test]
    fn roundtrip_and_version_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let mut store = ParamStore::<f32>::new();
        store.add("x.w", ParamKind::Network, Array::from_fn(vec![2, 3], |i| i as f32 * 0.5));
        store.add("y", ParamKind::Grid, Array::full(vec![1, 1, 4], -1.25));
        save_store(&p, &store).unwrap();
        let mut other = store.clone();
        for id in other.ids().collect::<Vec<_>>() {
            other.value_mut(id).data_mut().fill(0.0);
        }
        load_store(&p, &mut other).unwrap();
        assert_eq!(other, store);

        let mut bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"DN4D");
        bytes[4] = 9;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            read_arrays::<f32>(&p),
            Err(Error::VersionMismatch { expected: 1, found: 9 })
        ));
    }
}
