//! Binary parameter checkpoints.
//!
//! Layout: magic `ELNN`, `u32` version, then one record per parameter tensor
//! until end of file: `u32` node id, `u32` tensor index, `u32` rank, `rank`
//! `u32` dims, then the values as little-endian `f64`.

use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Graph, ParamRef};

const MAGIC: &[u8; 4] = b"ELNN";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint does not match graph: {0}")]
    Mismatch(String),
}

pub fn write_params(graph: &Graph, mut out: impl Write) -> Result<(), CheckpointError> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for p in graph.param_refs() {
        let t = graph.param(p);
        for v in [p.node, p.index, t.rank()] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save(graph: &Graph, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    write_params(graph, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

fn read_u32(bytes: &[u8], at: &mut usize) -> Result<u32, CheckpointError> {
    let end = *at + 4;
    let chunk = bytes
        .get(*at..end)
        .ok_or_else(|| CheckpointError::Mismatch("truncated record".into()))?;
    *at = end;
    Ok(u32::from_le_bytes(chunk.try_into().expect("4 bytes")))
}

/// Overwrites the graph parameters with the checkpoint contents. Every
/// parameter must be present exactly once with a matching shape.
pub fn read_params(graph: &mut Graph, mut input: impl Read) -> Result<(), CheckpointError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut at = 4;
    let version = read_u32(&bytes, &mut at)?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let refs = graph.param_refs();
    let mut seen = vec![false; refs.len()];
    while at < bytes.len() {
        let node = read_u32(&bytes, &mut at)? as usize;
        let index = read_u32(&bytes, &mut at)? as usize;
        let rank = read_u32(&bytes, &mut at)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&bytes, &mut at).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let p = ParamRef { node, index };
        let slot = refs
            .iter()
            .position(|r| *r == p)
            .ok_or_else(|| CheckpointError::Mismatch(format!("unknown parameter {node}/{index}")))?;
        if seen[slot] {
            return Err(CheckpointError::Mismatch(format!("duplicate parameter {node}/{index}")));
        }
        let target = graph.param_mut(p);
        if target.shape() != shape.as_slice() {
            return Err(CheckpointError::Mismatch(format!(
                "parameter {node}/{index} has shape {shape:?}, graph expects {:?}",
                target.shape()
            )));
        }
        let len = target.len();
        let raw = bytes
            .get(at..at + 8 * len)
            .ok_or_else(|| CheckpointError::Mismatch("truncated values".into()))?;
        for (v, chunk) in target.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        at += 8 * len;
        seen[slot] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        let r = refs[missing];
        return Err(CheckpointError::Mismatch(format!(
            "missing parameter {}/{}",
            r.node, r.index
        )));
    }
    Ok(())
}

pub fn load(graph: &mut Graph, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    read_params(graph, std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::zoo;
    use crate::graph::build_graph;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut g = build_graph(&zoo::toy_cnn(8, 4, 2)).unwrap();
        g.init_params(42);
        let mut buf = Vec::new();
        write_params(&g, &mut buf).unwrap();
        let mut h = build_graph(&zoo::toy_cnn(8, 4, 2)).unwrap();
        read_params(&mut h, buf.as_slice()).unwrap();
        for p in g.param_refs() {
            let a: Vec<u64> = g.param(p).data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = h.param(p).data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_foreign_files() {
        let mut g = build_graph(&zoo::toy_cnn(8, 4, 2)).unwrap();
        assert!(matches!(
            read_params(&mut g, &b"PNG\0\0\0\0\0"[..]),
            Err(CheckpointError::BadMagic)
        ));
        let mut buf = Vec::new();
        write_params(&g, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            read_params(&mut g, buf.as_slice()),
            Err(CheckpointError::Mismatch(_))
        ));
    }

    #[test]
    fn rejects_other_architecture() {
        let small = build_graph(&zoo::toy_cnn(8, 4, 2)).unwrap();
        let mut other = build_graph(&zoo::toy_cnn(8, 3, 2)).unwrap();
        let mut buf = Vec::new();
        write_params(&small, &mut buf).unwrap();
        assert!(read_params(&mut other, buf.as_slice()).is_err());
    }
}
