//! Binary tensor fixtures: `EMIMTNSR`, u32 LE rank, rank × u64 LE extents,
//! then row-major f64 LE values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const FIXTURE_MAGIC: &[u8; 8] = b"EMIMTNSR";

pub fn write_fixture_to<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    w.write_all(FIXTURE_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_fixture_from<R: Read>(mut r: R) -> Result<Tensor> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != FIXTURE_MAGIC {
        return Err(Error::Format {
            what: "tensor fixture",
            detail: format!("bad magic {magic:?}"),
        });
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut u64buf = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut u64buf)?;
        shape.push(u64::from_le_bytes(u64buf) as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Format {
            what: "tensor fixture",
            detail: format!("extents overflow: {shape:?}"),
        })?;
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        r.read_exact(&mut u64buf)?;
        data.push(f64::from_le_bytes(u64buf));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format {
            what: "tensor fixture",
            detail: "trailing bytes after payload".into(),
        });
    }
    Tensor::new(shape, data)
}

pub fn write_fixture(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_fixture_to(BufWriter::new(File::create(path)?), t)
}

pub fn read_fixture(path: impl AsRef<Path>) -> Result<Tensor> {
    read_fixture_from(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_fixture_to(&mut buf, &t).unwrap();
        let mut expected = b"EMIMTNSR".to_vec();
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1.5f64.to_le_bytes());
        expected.extend_from_slice(&(-2.0f64).to_le_bytes());
        assert_eq!(buf, expected);
        assert_eq!(read_fixture_from(&buf[..]).unwrap(), t);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::zeros(&[3]);
        let mut buf = Vec::new();
        write_fixture_to(&mut buf, &t).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_fixture_from(&bad[..]), Err(Error::Format { .. })));
        assert!(read_fixture_from(&buf[..buf.len() - 1]).is_err());
        buf.push(0);
        assert!(read_fixture_from(&buf[..]).is_err());
    }
}
