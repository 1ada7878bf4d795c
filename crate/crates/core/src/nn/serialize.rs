//! Tensor records: one compact JSON header line (`name`, `dtype`, `shape`)
//! terminated by `\n`, then the values as little-endian `f32`.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{Real, Tensor};

pub const PAYLOAD_DTYPE: &str = "f32";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

impl TensorHeader {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Header line plus payload, in bytes.
    pub fn record_len(&self) -> io::Result<usize> {
        Ok(serde_json::to_vec(self).map_err(io::Error::other)?.len() + 1 + 4 * self.numel())
    }
}

pub fn write_tensor<T: Real, W: Write>(w: &mut W, name: &str, tensor: &Tensor<T>) -> io::Result<()> {
    let header = TensorHeader {
        name: name.to_string(),
        dtype: PAYLOAD_DTYPE.to_string(),
        shape: tensor.shape().to_vec(),
    };
    serde_json::to_writer(&mut *w, &header).map_err(io::Error::other)?;
    w.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(4 * tensor.numel());
    for &v in tensor.values() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

/// Reads the next record, or `None` at a clean end of stream.
pub fn read_tensor<T: Real, R: BufRead>(r: &mut R) -> io::Result<Option<(String, Tensor<T>)>> {
    let mut line = Vec::new();
    if r.read_until(b'\n', &mut line)? == 0 {
        return Ok(None);
    }
    if line.pop() != Some(b'\n') {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated tensor header"));
    }
    let header: TensorHeader = serde_json::from_slice(&line)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    if header.dtype != PAYLOAD_DTYPE {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("unsupported dtype {}", header.dtype),
        ));
    }
    let mut bytes = vec![0u8; 4 * header.numel()];
    r.read_exact(&mut bytes)?;
    let values = bytes
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    let tensor = Tensor::new(header.shape, values)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
    Ok(Some((header.name, tensor)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(rows in 1usize..5, cols in 1usize..7, seed in any::<u32>()) {
            let t = Tensor::<f32>::from_fn(vec![rows, cols], |i| (i as f32 + seed as f32).sin() * 1e3);
            let mut buf = Vec::new();
            write_tensor(&mut buf, "w.0", &t).unwrap();
            write_tensor(&mut buf, "w.1", &t).unwrap();
            let mut r = io::Cursor::new(buf);
            let (name, back) = read_tensor::<f32, _>(&mut r).unwrap().unwrap();
            prop_assert_eq!(name, "w.0");
            prop_assert_eq!(back.values(), t.values());
            prop_assert!(read_tensor::<f32, _>(&mut r).unwrap().is_some());
            prop_assert!(read_tensor::<f32, _>(&mut r).unwrap().is_none());
        }
    }

    #[test]
    fn layout_is_header_line_then_le_floats() {
        let t = Tensor::<f64>::vector(vec![1.0, -2.0]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, "x", &t).unwrap();
        let nl = buf.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(&buf[..nl], br#"{"name":"x","dtype":"f32","shape":[2]}"#);
        assert_eq!(&buf[nl + 1..nl + 5], &1.0f32.to_le_bytes());
        assert_eq!(&buf[nl + 5..], &(-2.0f32).to_le_bytes());
    }

    #[test]
    fn truncated_payload_errors() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, "x", &Tensor::<f32>::vector(vec![1.0; 4])).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_tensor::<f32, _>(&mut io::Cursor::new(buf)).is_err());
    }
}
