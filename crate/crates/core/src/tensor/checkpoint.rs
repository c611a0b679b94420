//! `BEATX1` tensor container.
//!
//! Layout: the 6 magic bytes, then zero or more records until EOF:
//! `u32 name_len | name (UTF-8) | u32 rank | rank × u32 dims | f32 payload`,
//! all little-endian, payload row-major.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"BEATX1";

pub fn write_checkpoint<W: Write>(mut w: W, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload)?;
    }
    Ok(())
}

fn read_u32(buf: &[u8], pos: &mut usize) -> Result<u32> {
    let bytes = buf
        .get(*pos..*pos + 4)
        .ok_or_else(|| Error::Checkpoint("truncated record header".into()))?;
    *pos += 4;
    Ok(u32::from_le_bytes(bytes.try_into().expect("4 bytes")))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < 6 || &buf[..6] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("missing BEATX1 magic".into()));
    }
    let mut pos = 6;
    let mut out = Vec::new();
    while pos < buf.len() {
        let name_len = read_u32(&buf, &mut pos)? as usize;
        let name_bytes = buf
            .get(pos..pos + name_len)
            .ok_or_else(|| Error::Checkpoint("truncated tensor name".into()))?;
        let name = String::from_utf8(name_bytes.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        pos += name_len;
        let rank = read_u32(&buf, &mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&buf, &mut pos)? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = buf
            .get(pos..pos + numel * 4)
            .ok_or_else(|| Error::Checkpoint(format!("truncated payload for `{name}`")))?;
        pos += numel * 4;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_container_is_just_magic() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[]).unwrap();
        assert_eq!(buf, b"BEATX1");
        assert!(read_checkpoint(&buf[..]).unwrap().is_empty());
    }

    #[test]
    fn record_layout_is_little_endian() {
        let t = Tensor::new(&[1, 2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("ab".into(), t)]).unwrap();
        let mut want = b"BEATX1".to_vec();
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_checkpoint(&b"BEATX2"[..]).is_err());
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("w".into(), Tensor::zeros(&[3]))]).unwrap();
        buf.pop();
        assert!(matches!(read_checkpoint(&buf[..]), Err(Error::Checkpoint(_))));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            records in prop::collection::vec(
                ("[a-z_.]{1,12}", prop::collection::vec(1usize..4, 1..4), any::<u32>()),
                0..5,
            )
        ) {
            let tensors: Vec<(String, Tensor)> = records
                .into_iter()
                .map(|(name, shape, seed)| {
                    let t = Tensor::from_fn(&shape, |i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff));
                    (name, t)
                })
                .collect();
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &tensors).unwrap();
            let back = read_checkpoint(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), tensors.len());
            for ((n1, t1), (n2, t2)) in back.iter().zip(&tensors) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
                let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(b1, b2);
            }
        }
    }
}
