//! Parameter storage, momentum update and bit-exact binary round-trip.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    /// Whether weight decay applies (false for biases and norm parameters).
    pub decay: bool,
}

impl ParamInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Key,
}

/// Trainable tensors plus normalisation running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub role: Role,
    pub tensors: Vec<Vec<f64>>,
    pub buffers: Vec<Vec<f64>>,
}

impl EncoderParams {
    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| vec![0.0; t.len()]).collect()
    }

    pub fn same_shape(&self, other: &EncoderParams) -> bool {
        fn shapes(v: &[Vec<f64>]) -> impl Iterator<Item = usize> + '_ {
            v.iter().map(Vec::len)
        }
        self.tensors.len() == other.tensors.len()
            && self.buffers.len() == other.buffers.len()
            && shapes(&self.tensors).eq(shapes(&other.tensors))
            && shapes(&self.buffers).eq(shapes(&other.buffers))
    }

    /// Copy of these parameters tagged as the key encoder.
    pub fn to_key(&self) -> EncoderParams {
        EncoderParams {
            role: Role::Key,
            ..self.clone()
        }
    }
}

/// `key <- m * key + (1 - m) * query` per parameter. Running statistics are
/// copied from the query, since the key branch normalises with them.
pub fn ema_update(key: &mut EncoderParams, query: &EncoderParams, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid(format!("momentum must lie in [0, 1], got {m}")));
    }
    if !key.same_shape(query) {
        return Err(Error::Shape("key and query encoders differ in shape".into()));
    }
    let q = 1.0 - m;
    for (k, qt) in key.tensors.iter_mut().zip(&query.tensors) {
        k.iter_mut().zip(qt).for_each(|(a, b)| *a = m * *a + q * b);
    }
    key.buffers.clone_from(&query.buffers);
    Ok(())
}

/// Writes tensors back to back as little-endian `f64`.
pub fn write_tensors(path: &Path, tensors: &[Vec<f64>]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for t in tensors {
        for v in t {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads tensors with the given element counts; the file must match exactly.
pub fn read_tensors(path: &Path, sizes: &[usize]) -> Result<Vec<Vec<f64>>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let total: usize = sizes.iter().sum();
    if bytes.len() != total * 8 {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!("expected {} values, found {} bytes", total, bytes.len()),
        });
    }
    let mut vals = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    Ok(sizes.iter().map(|&n| vals.by_ref().take(n).collect()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc(v: f64) -> EncoderParams {
        EncoderParams {
            role: Role::Query,
            tensors: vec![vec![v], vec![v, -v]],
            buffers: vec![vec![v]],
        }
    }

    #[test]
    fn ema_examples() {
        let q = enc(4.0);
        let mut k = enc(2.0).to_key();
        ema_update(&mut k, &q, 0.5).unwrap();
        assert_eq!(k.tensors[0][0], 3.0);
        let before = enc(2.0).to_key();
        let mut k = before.clone();
        ema_update(&mut k, &q, 1.0).unwrap();
        assert_eq!(k.tensors, before.tensors);
        ema_update(&mut k, &q, 0.0).unwrap();
        assert_eq!(k.tensors, q.tensors);
        assert!(ema_update(&mut k, &q, 1.5).is_err());
        let mut bad = enc(1.0);
        bad.tensors.push(vec![0.0]);
        assert!(ema_update(&mut bad, &q, 0.5).is_err());
    }

    #[test]
    fn tensors_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let t = vec![vec![0.1, -0.0, f64::MIN_POSITIVE], vec![], vec![1e300]];
        write_tensors(&p, &t).unwrap();
        let back = read_tensors(&p, &[3, 0, 1]).unwrap();
        for (a, b) in t.iter().flatten().zip(back.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(read_tensors(&p, &[3]).is_err());
    }
}
