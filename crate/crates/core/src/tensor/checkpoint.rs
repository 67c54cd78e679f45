//! Flat binary checkpoint format:
//!
//! ```text
//! "UFTC" | version u32 | count u32 |
//!   per tensor: name_len u16 | name bytes | rank u8 | dims u32 × rank | f64 × numel
//! ```
//! All integers and floats are little-endian.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UFTC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len())
            .map_err(|_| Error::Contract(format!("tensor name too long: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(nb);
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Contract(format!("tensor {name} rank too large")))?;
        buf.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Contract(format!("dimension too large in {name}")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad checkpoint magic".into(),
        });
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let count = c.u32("count")? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = u16::from_le_bytes(c.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let at = c.pos;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::Format {
                offset: at as u64,
                message: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = c.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = c.take(numel * 8, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(Error::Format {
            offset: c.pos as u64,
            message: "trailing bytes after last tensor".into(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::matrix(1, 2, vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("w".into(), t)]).unwrap();
        assert_eq!(&buf[0..4], b"UFTC");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..14], &1u16.to_le_bytes());
        assert_eq!(buf[14], b'w');
        assert_eq!(buf[15], 2);
        assert_eq!(&buf[16..20], &1u32.to_le_bytes());
        assert_eq!(&buf[20..24], &2u32.to_le_bytes());
        assert_eq!(&buf[24..32], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 40);
    }

    #[test]
    fn truncated_payload_names_offset() {
        let t = Tensor::matrix(2, 2, vec![1.0; 4]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("a".into(), t)]).unwrap();
        buf.truncate(buf.len() - 3);
        match read_checkpoint(buf.as_slice()) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 24),
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(matches!(read_checkpoint(&b"XXXX"[..]), Err(Error::Format { offset: 0, .. })));
    }

    proptest! {
        #[test]
        fn round_trip_preserves_bits(
            rows in 1usize..5,
            cols in 1usize..5,
            seed in proptest::collection::vec(-1e6f64..1e6, 25),
            name in "[a-z.]{1,12}",
        ) {
            let data: Vec<f64> = seed.iter().take(rows * cols).copied().collect();
            let t = Tensor::matrix(rows, cols, data).unwrap();
            let scalar = Tensor::new(vec![], vec![seed[0]]).unwrap();
            let entries = vec![(name.clone(), t), ("s".to_string(), scalar)];
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &entries).unwrap();
            let back = read_checkpoint(buf.as_slice()).unwrap();
            prop_assert_eq!(back, entries);
        }
    }
}
