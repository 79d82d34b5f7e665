//! Flat binary tensor files.
//!
//! A file is a 64-byte ASCII header followed by the stored floats as
//! little-endian `f32` in storage order. The header is
//! `SCT1 <layout> <lanes> <d0> <d1> <d2> <d3>`, space padded to 63 bytes and
//! terminated by `\n`. Plain tensors use the layout tag `plain` and lanes 1.

use std::io::{Read, Write};

use super::{BlockedTensor, Layout, PlainTensor};
use crate::error::{Error, Result};

const MAGIC: &str = "SCT1";
const HEADER_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub enum LoadedTensor {
    Plain(PlainTensor),
    Blocked(BlockedTensor),
}

fn write_header(w: &mut impl Write, tag: &str, lanes: usize, dims: [usize; 4]) -> Result<()> {
    let text = format!(
        "{MAGIC} {tag} {lanes} {} {} {} {}",
        dims[0], dims[1], dims[2], dims[3]
    );
    if text.len() >= HEADER_LEN {
        return Err(Error::TensorFile(format!("header too long: {text}")));
    }
    let mut header = [b' '; HEADER_LEN];
    header[..text.len()].copy_from_slice(text.as_bytes());
    header[HEADER_LEN - 1] = b'\n';
    w.write_all(&header)?;
    Ok(())
}

fn write_floats(w: &mut impl Write, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for x in data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn dump_plain(w: &mut impl Write, t: &PlainTensor) -> Result<()> {
    write_header(w, "plain", 1, t.dims())?;
    write_floats(w, t.data())
}

pub fn dump_blocked(w: &mut impl Write, t: &BlockedTensor) -> Result<()> {
    write_header(w, t.layout().tag(), t.lanes(), t.dims())?;
    write_floats(w, t.data())
}

pub fn load_tensor(r: &mut impl Read) -> Result<LoadedTensor> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)?;
    let text = std::str::from_utf8(&header)
        .map_err(|_| Error::TensorFile("header is not ASCII".into()))?;
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() != 7 || fields[0] != MAGIC {
        return Err(Error::TensorFile(format!("bad header {:?}", text.trim_end())));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::TensorFile(format!("bad header field {s:?}")))
    };
    let lanes = num(fields[2])?;
    let dims = [num(fields[3])?, num(fields[4])?, num(fields[5])?, num(fields[6])?];

    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::TensorFile("payload is not a whole number of floats".into()));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    if fields[1] == "plain" {
        return PlainTensor::from_vec(dims, data).map(LoadedTensor::Plain);
    }
    let layout = Layout::from_tag(fields[1])
        .ok_or_else(|| Error::TensorFile(format!("unknown layout {:?}", fields[1])))?;
    BlockedTensor::from_raw(layout, dims, lanes, data).map(LoadedTensor::Blocked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::pack;

    #[test]
    fn header_is_64_bytes_and_readable() {
        let t = PlainTensor::from_fn([1, 2, 3, 4], |[_, b, r, c]| (b * 12 + r * 4 + c) as f32);
        let mut buf = Vec::new();
        dump_plain(&mut buf, &t).unwrap();
        assert_eq!(buf.len(), 64 + 24 * 4);
        assert_eq!(&buf[..20], b"SCT1 plain 1 1 2 3 4");
        assert_eq!(buf[63], b'\n');
        assert_eq!(&buf[68..72], &1.0f32.to_le_bytes()[..]);
        assert_eq!(load_tensor(&mut &buf[..]).unwrap(), LoadedTensor::Plain(t));
    }

    #[test]
    fn blocked_round_trip_keeps_layout() {
        let t = PlainTensor::from_fn([3, 8, 2, 2], |[a, b, r, c]| (a + b + r + c) as f32 * 0.5);
        let b = pack(&t, Layout::Chwn, 4).unwrap();
        let mut buf = Vec::new();
        dump_blocked(&mut buf, &b).unwrap();
        assert!(buf.starts_with(b"SCT1 chwn 4 3 8 2 2"));
        assert_eq!(load_tensor(&mut &buf[..]).unwrap(), LoadedTensor::Blocked(b));
    }

    #[test]
    fn rejects_garbage() {
        let mut buf = vec![b' '; 64];
        buf[..4].copy_from_slice(b"NOPE");
        assert!(load_tensor(&mut &buf[..]).is_err());
        let mut short = Vec::new();
        dump_plain(&mut short, &PlainTensor::zeros([1, 1, 1, 2])).unwrap();
        short.pop();
        assert!(load_tensor(&mut &short[..]).is_err());
    }
}
