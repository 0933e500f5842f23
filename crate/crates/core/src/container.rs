//! Binary model container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "EBAD"  u16 version  u8 record
//! record 1 (RBM):  u32 M, u32 K, f64 a[M], b[K], W[M×K] row-major
//! record 2 (DBM):  u32 K1, u32 K2, u32 M,
//!                  f64 a1[M], a2[M], b1[K1], b2[K2], W1[M×K1], W2[K1×K2], W3[K2×M]
//! ```

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::dbm::CrDbmParams;
use crate::error::{Error, Result};
use crate::rbm::RbmParams;

pub const MAGIC: &[u8; 4] = b"EBAD";
pub const VERSION: u16 = 1;
const RECORD_RBM: u8 = 1;
const RECORD_DBM: u8 = 2;

/// A decoded container record.
#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Rbm(RbmParams),
    Dbm(CrDbmParams),
}

fn header(record: u8, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(record);
}

fn put_dim(n: usize, out: &mut Vec<u8>) {
    let n = u32::try_from(n).expect("dimension fits in u32");
    out.extend_from_slice(&n.to_le_bytes());
}

fn put_floats<'a>(xs: impl IntoIterator<Item = &'a f64>, out: &mut Vec<u8>) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_rbm(p: &RbmParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(15 + 8 * (p.a.len() + p.b.len() + p.w.len()));
    header(RECORD_RBM, &mut out);
    put_dim(p.n_visible(), &mut out);
    put_dim(p.n_hidden(), &mut out);
    put_floats(&p.a, &mut out);
    put_floats(&p.b, &mut out);
    put_floats(p.w.iter(), &mut out);
    out
}

pub fn encode_dbm(p: &CrDbmParams) -> Vec<u8> {
    let flat = p.flatten();
    let mut out = Vec::with_capacity(19 + 8 * flat.len());
    header(RECORD_DBM, &mut out);
    put_dim(p.n_cluster(), &mut out);
    put_dim(p.n_recon(), &mut out);
    put_dim(p.n_visible(), &mut out);
    put_floats(&flat, &mut out);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Container("truncated".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn dim(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| Error::Container("block size overflow".into()))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn vector(&mut self, n: usize) -> Result<Array1<f64>> {
        Ok(Array1::from(self.floats(n)?))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Container("block size overflow".into()))?;
        Array2::from_shape_vec((rows, cols), self.floats(n)?)
            .map_err(|e| Error::Container(e.to_string()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Record> {
    let mut r = Reader { buf: bytes };
    if r.take(4)? != MAGIC {
        return Err(Error::Container("bad magic".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Container(format!("unsupported version {version}")));
    }
    let record = match r.take(1)?[0] {
        RECORD_RBM => {
            let (m, k) = (r.dim()?, r.dim()?);
            let a = r.vector(m)?;
            let b = r.vector(k)?;
            let w = r.matrix(m, k)?;
            Record::Rbm(RbmParams { a, b, w })
        }
        RECORD_DBM => {
            let (k1, k2, m) = (r.dim()?, r.dim()?, r.dim()?);
            Record::Dbm(CrDbmParams {
                a1: r.vector(m)?,
                a2: r.vector(m)?,
                b1: r.vector(k1)?,
                b2: r.vector(k2)?,
                w1: r.matrix(m, k1)?,
                w2: r.matrix(k1, k2)?,
                w3: r.matrix(k2, m)?,
            })
        }
        other => return Err(Error::Container(format!("unknown record type {other}"))),
    };
    if !r.buf.is_empty() {
        return Err(Error::Container("trailing bytes".into()));
    }
    Ok(record)
}

pub fn decode_rbm(bytes: &[u8]) -> Result<RbmParams> {
    match decode(bytes)? {
        Record::Rbm(p) => Ok(p),
        Record::Dbm(_) => Err(Error::Container("expected an RBM record".into())),
    }
}

pub fn decode_dbm(bytes: &[u8]) -> Result<CrDbmParams> {
    match decode(bytes)? {
        Record::Dbm(p) => Ok(p),
        Record::Rbm(_) => Err(Error::Container("expected a DBM record".into())),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_rbm(path: &Path, p: &RbmParams) -> Result<()> {
    write(path, &encode_rbm(p))
}

pub fn save_dbm(path: &Path, p: &CrDbmParams) -> Result<()> {
    write(path, &encode_dbm(p))
}

pub fn load_rbm(path: &Path) -> Result<RbmParams> {
    decode_rbm(&read(path)?)
}

pub fn load_dbm(path: &Path) -> Result<CrDbmParams> {
    decode_dbm(&read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rbm_layout_is_exact() {
        let p = RbmParams::from_parts(
            ndarray::array![1.0, 2.0],
            ndarray::array![3.0],
            ndarray::array![[4.0], [5.0]],
        )
        .unwrap();
        let bytes = encode_rbm(&p);
        let mut expected = b"EBAD".to_vec();
        expected.extend_from_slice(&[1, 0, 1]);
        expected.extend_from_slice(&[2, 0, 0, 0, 1, 0, 0, 0]);
        for x in [1.0f64, 2.0, 3.0, 4.0, 5.0] {
            expected.extend_from_slice(&x.to_le_bytes());
        }
        assert_eq!(bytes, expected);
        assert_eq!(decode_rbm(&bytes).unwrap(), p);
    }

    #[test]
    fn round_trips_are_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = RbmParams::random(7, 3, &mut rng);
        assert_eq!(decode_rbm(&encode_rbm(&r)).unwrap(), r);
        let d = CrDbmParams::random(5, 2, 6, &mut rng);
        assert_eq!(decode_dbm(&encode_dbm(&d)).unwrap(), d);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_dbm(&path, &d).unwrap();
        assert_eq!(load_dbm(&path).unwrap(), d);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = encode_rbm(&RbmParams::zeros(3, 2));
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(decode(&magic).is_err());
        let mut version = bytes.clone();
        version[4] = 9;
        assert!(decode(&version).is_err());
        assert!(decode_dbm(&bytes).is_err());
        assert_eq!(decode(&[]).unwrap_err().exit_code(), 4);
    }
}
