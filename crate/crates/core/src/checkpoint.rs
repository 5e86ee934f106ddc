//! Binary checkpoint container shared repo-wide.
//!
//! Layout: magic `TSPT`, format version (u32 LE), entry count (u32 LE);
//! per entry: name length (u32 LE) + UTF-8 name, rank (u32 LE), extents
//! (u64 LE each), then the raw f64 LE values in row-major order. After
//! the entries, a trailer: byte length (u64 LE) + a flat `key = value`
//! UTF-8 text section. Round-trips are bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TSPT";
const VERSION: u32 = 1;

/// A named-tensor container plus a flat text config trailer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    /// Name -> (extents, row-major values). BTreeMap keeps write order
    /// deterministic.
    pub entries: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    /// Flat `key = value` configuration trailer.
    pub config: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.insert(name.to_string(), (shape.to_vec(), data));
    }

    pub fn get(&self, name: &str) -> Result<&(Vec<usize>, Vec<f64>)> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))
    }

    pub fn config_str(&self, key: &str) -> Option<&str> {
        self.config.get(key).map(|s| s.as_str())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);

        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes()).map_err(io)?;
        for (name, (shape, data)) in &self.entries {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(nb).map_err(io)?;
            w.write_all(&(shape.len() as u32).to_le_bytes()).map_err(io)?;
            for &e in shape {
                w.write_all(&(e as u64).to_le_bytes()).map_err(io)?;
            }
            for &v in data {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        let mut trailer = String::new();
        for (k, v) in &self.config {
            trailer.push_str(k);
            trailer.push_str(" = ");
            trailer.push_str(v);
            trailer.push('\n');
        }
        w.write_all(&(trailer.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(trailer.as_bytes()).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io = |e| Error::io(path, e);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: bad magic {:?}",
                path.display(),
                magic
            )));
        }
        let version = read_u32(&mut r, path)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported format version {version}",
                path.display()
            )));
        }
        let count = read_u32(&mut r, path)? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r, path)? as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf).map_err(io)?;
            let name = String::from_utf8(name_buf)
                .map_err(|_| Error::Checkpoint(format!("{}: non-UTF-8 entry name", path.display())))?;
            let rank = read_u32(&mut r, path)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r, path)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf).map_err(io)?;
                data.push(f64::from_le_bytes(buf));
            }
            if entries.insert(name.clone(), (shape, data)).is_some() {
                return Err(Error::Checkpoint(format!(
                    "{}: duplicate entry `{name}`",
                    path.display()
                )));
            }
        }
        let trailer_len = read_u64(&mut r, path)? as usize;
        let mut trailer = vec![0u8; trailer_len];
        r.read_exact(&mut trailer).map_err(io)?;
        let trailer = String::from_utf8(trailer)
            .map_err(|_| Error::Checkpoint(format!("{}: non-UTF-8 trailer", path.display())))?;
        let mut config = BTreeMap::new();
        for line in trailer.lines() {
            if let Some((k, v)) = line.split_once('=') {
                config.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(Checkpoint { entries, config })
    }
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.tspt");
        let mut ck = Checkpoint::default();
        ck.insert("w", &[2, 3], vec![1.5, -2.25, 0.0, f64::MIN_POSITIVE, 1e300, -0.0]);
        ck.insert("b", &[3], vec![0.1, 0.2, 0.3]);
        ck.config.insert("d".into(), "64".into());
        ck.config.insert("note".into(), "a = b".into());
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.entries.len(), 2);
        let (shape, data) = back.get("w").unwrap();
        assert_eq!(shape, &[2, 3]);
        let orig = &ck.get("w").unwrap().1;
        assert_eq!(
            data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            orig.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(back.config_str("d"), Some("64"));
        assert_eq!(back.config_str("note"), Some("a = b"));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.tspt");
        std::fs::write(&path, b"JUNKxxxxxxxx").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }
}
