//! Versioned binary blobs for grids, operator caches and checkpoints.
//!
//! Layout (little endian):
//! `magic[4] | version u32 | n_meta u32 | meta u64 * n_meta | key[32] |
//! n_payload u64 | content_hash[32] | payload f64 * n_payload`

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Key = [u8; 32];

/// Decoded blob.
#[derive(Clone, Debug)]
pub struct Blob {
    pub version: u32,
    pub meta: Vec<u64>,
    pub key: Key,
    pub payload: Vec<f64>,
}

/// SHA-256 over arbitrary parts.
pub fn hash_parts(parts: &[&[u8]]) -> Key {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

pub fn hex(key: &Key) -> String {
    key.iter().map(|b| format!("{b:02x}")).collect()
}

fn payload_hash(payload: &[f64]) -> Key {
    let mut h = Sha256::new();
    for x in payload {
        h.update(x.to_le_bytes());
    }
    h.finalize().into()
}

pub fn write_blob(
    path: &Path,
    magic: &[u8; 4],
    version: u32,
    meta: &[u64],
    key: &Key,
    payload: &[f64],
) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("partial");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(magic)?;
        w.write_all(&version.to_le_bytes())?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        for m in meta {
            w.write_all(&m.to_le_bytes())?;
        }
        w.write_all(key)?;
        w.write_all(&(payload.len() as u64).to_le_bytes())?;
        w.write_all(&payload_hash(payload))?;
        for x in payload {
            w.write_all(&x.to_le_bytes())?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Cache(format!("truncated file: {e}")))?;
    Ok(buf)
}

pub fn read_blob(path: &Path, magic: &[u8; 4], version: u32) -> Result<Blob> {
    let mut r = BufReader::new(File::open(path)?);
    let m: [u8; 4] = read_exact(&mut r)?;
    if &m != magic {
        return Err(Error::Cache(format!(
            "{}: bad magic {:?}, expected {:?}",
            path.display(),
            m,
            magic
        )));
    }
    let v = u32::from_le_bytes(read_exact(&mut r)?);
    if v != version {
        return Err(Error::Cache(format!(
            "{}: version {v}, expected {version}",
            path.display()
        )));
    }
    let n_meta = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    if n_meta > 1024 {
        return Err(Error::Cache("corrupt header".into()));
    }
    let mut meta = Vec::with_capacity(n_meta);
    for _ in 0..n_meta {
        meta.push(u64::from_le_bytes(read_exact(&mut r)?));
    }
    let key: Key = read_exact(&mut r)?;
    let n = u64::from_le_bytes(read_exact(&mut r)?) as usize;
    let stored: Key = read_exact(&mut r)?;
    let mut bytes = vec![0u8; n.checked_mul(8).ok_or_else(|| Error::Cache("corrupt size".into()))?];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Cache(format!("truncated payload: {e}")))?;
    let payload: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if payload_hash(&payload) != stored {
        return Err(Error::Cache(format!("{}: content hash mismatch", path.display())));
    }
    Ok(Blob { version: v, meta, key, payload })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let key = hash_parts(&[b"abc"]);
        write_blob(&p, b"TEST", 3, &[7, 9], &key, &[1.0, -2.5, 3.25]).unwrap();
        let b = read_blob(&p, b"TEST", 3).unwrap();
        assert_eq!(b.meta, vec![7, 9]);
        assert_eq!(b.key, key);
        assert_eq!(b.payload, vec![1.0, -2.5, 3.25]);
        assert!(read_blob(&p, b"TEST", 4).is_err());
        assert!(read_blob(&p, b"NOPE", 3).is_err());

        let mut bytes = std::fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_blob(&p, b"TEST", 3), Err(Error::Cache(_))));
    }
}
