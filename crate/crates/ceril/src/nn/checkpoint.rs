//! Checkpoint serialization.
//!
//! Layout (little-endian): magic "CKPT", version u16, record count u32,
//! then per record: name length u16, name bytes, shape rank u8, dims u32
//! each, f32 values. Parameter records come first; Adam moments are
//! appended in the same layout under the parameter name with ".m" / ".v"
//! suffixes, along with a one-element ".adam.step" record.

use super::params::ParamStore;
use crate::scalar::Scalar;
use std::io::Read;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CkptRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

const MAGIC: &[u8; 4] = b"CKPT";
const VERSION: u16 = 1;

pub fn write_records(path: &Path, records: &[CkptRecord]) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        let name = r.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(CheckpointError::Malformed(format!(
                "name too long: {}",
                r.name
            )));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(r.shape.len() as u8);
        for &d in &r.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        debug_assert_eq!(r.shape.iter().product::<usize>(), r.values.len());
        for &v in &r.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<CkptRecord>, CheckpointError> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
        if *pos + n > data.len() {
            return Err(CheckpointError::Malformed("truncated".to_string()));
        }
        let s = &data[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(CheckpointError::Malformed("bad magic".to_string()));
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Malformed(format!("bad version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("non-utf8 name".to_string()))?;
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut pos, 4 * n)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(CkptRecord {
            name,
            shape,
            values,
        });
    }
    if pos != data.len() {
        return Err(CheckpointError::Malformed("trailing bytes".to_string()));
    }
    Ok(records)
}

/// Serialize a parameter store (plus optional extra metadata records and
/// optimizer moments) to a checkpoint file.
pub fn save_store<S: Scalar>(
    path: &Path,
    store: &ParamStore<S>,
    adam_step: u64,
    extra: &[CkptRecord],
) -> Result<(), CheckpointError> {
    let mut records: Vec<CkptRecord> = Vec::new();
    for e in store.entries() {
        records.push(CkptRecord {
            name: e.name.clone(),
            shape: e.shape.clone(),
            values: e.values.iter().map(|v| v.to_f64_lossy() as f32).collect(),
        });
    }
    records.extend_from_slice(extra);
    for e in store.entries() {
        records.push(CkptRecord {
            name: format!("{}.m", e.name),
            shape: e.shape.clone(),
            values: e.m.iter().map(|v| v.to_f64_lossy() as f32).collect(),
        });
        records.push(CkptRecord {
            name: format!("{}.v", e.name),
            shape: e.shape.clone(),
            values: e.v.iter().map(|v| v.to_f64_lossy() as f32).collect(),
        });
    }
    records.push(CkptRecord {
        name: ".adam.step".to_string(),
        shape: vec![1],
        values: vec![adam_step as f32],
    });
    write_records(path, &records)
}

/// Restore parameter values (and moments when present) into a store whose
/// entries already exist with matching shapes. Returns the Adam step.
pub fn load_into_store<S: Scalar>(
    records: &[CkptRecord],
    store: &mut ParamStore<S>,
) -> Result<u64, CheckpointError> {
    let mut adam_step = 0u64;
    for r in records {
        if r.name == ".adam.step" {
            adam_step = r.values[0] as u64;
            continue;
        }
        let (base, slot) = if let Some(b) = r.name.strip_suffix(".m") {
            (b, 1)
        } else if let Some(b) = r.name.strip_suffix(".v") {
            (b, 2)
        } else {
            (r.name.as_str(), 0)
        };
        if !store.contains(base) {
            // Metadata or unknown records are skipped here; callers that
            // care about them read the raw records.
            continue;
        }
        let e = store.entry_mut(base);
        if e.shape != r.shape {
            return Err(CheckpointError::Malformed(format!(
                "shape mismatch for {}: {:?} vs {:?}",
                r.name, e.shape, r.shape
            )));
        }
        let dst = match slot {
            0 => &mut e.values,
            1 => &mut e.m,
            _ => &mut e.v,
        };
        for (d, &v) in dst.iter_mut().zip(&r.values) {
            *d = S::from_f64_lossy(f64::from(v));
        }
    }
    Ok(adam_step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_values() {
        let mut store = ParamStore::<f32>::new();
        store.add("layer.w", &[2, 3], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]);
        store.add("layer.b", &[3], vec![1.0, 2.0, 3.0]);
        store.entry_mut("layer.w").m[0] = 0.75;
        let dir = std::env::temp_dir().join("ceril_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.ckpt");
        save_store(&path, &store, 17, &[]).unwrap();

        let mut fresh = ParamStore::<f32>::new();
        fresh.add("layer.w", &[2, 3], vec![0.0; 6]);
        fresh.add("layer.b", &[3], vec![0.0; 3]);
        let records = read_records(&path).unwrap();
        let step = load_into_store(&records, &mut fresh).unwrap();
        assert_eq!(step, 17);
        assert_eq!(fresh.values("layer.w"), store.values("layer.w"));
        assert_eq!(fresh.values("layer.b"), store.values("layer.b"));
        assert_eq!(fresh.entry("layer.w").m[0], 0.75);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let records = vec![CkptRecord {
            name: "w".to_string(),
            shape: vec![2],
            values: vec![1.0, 2.0],
        }];
        let mut store = ParamStore::<f32>::new();
        store.add("w", &[3], vec![0.0; 3]);
        assert!(load_into_store(&records, &mut store).is_err());
    }

    #[test]
    fn malformed_files_error() {
        let dir = std::env::temp_dir().join("ceril_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(read_records(&path).is_err());
        std::fs::remove_file(&path).ok();
    }
}
