//! Binary tensor files.
//!
//! Layout: byte 0 dtype tag (0 = f32, 1 = i8, 2 = i32), byte 1 rank (at most
//! 7), bytes 2..16 seven little-endian `u16` extents (unused ones zero), then
//! the little-endian payload.

use std::io::{Read, Write};

use thiserror::Error;

use super::{Elements, TensorValue};
use crate::ir::{DataType, TensorShape};

const HEADER: usize = 16;
const MAX_RANK: usize = 7;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed tensor file: {0}")]
    Format(String),
}

fn tag(dtype: DataType) -> u8 {
    match dtype {
        DataType::F32 => 0,
        DataType::I8 => 1,
        DataType::I32 => 2,
    }
}

pub fn write_tensor<W: Write>(mut w: W, value: &TensorValue) -> Result<(), TensorIoError> {
    let dims = value.shape().dims();
    if dims.len() > MAX_RANK {
        return Err(TensorIoError::Format(format!(
            "rank {} exceeds {MAX_RANK}",
            dims.len()
        )));
    }
    let mut header = [0u8; HEADER];
    header[0] = tag(value.dtype());
    header[1] = dims.len() as u8;
    for (i, &d) in dims.iter().enumerate() {
        let d = u16::try_from(d)
            .map_err(|_| TensorIoError::Format(format!("extent {d} exceeds u16")))?;
        header[2 + 2 * i..4 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    w.write_all(&header)?;
    let payload: Vec<u8> = match (value.elements(), value.dtype()) {
        (Elements::F32(v), _) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        (Elements::Int(v), DataType::I8) => v.iter().map(|&x| x as i8 as u8).collect(),
        (Elements::Int(v), _) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
    };
    w.write_all(&payload)?;
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<TensorValue, TensorIoError> {
    let mut header = [0u8; HEADER];
    r.read_exact(&mut header)?;
    let dtype = match header[0] {
        0 => DataType::F32,
        1 => DataType::I8,
        2 => DataType::I32,
        t => return Err(TensorIoError::Format(format!("unknown dtype tag {t}"))),
    };
    let rank = header[1] as usize;
    if rank > MAX_RANK {
        return Err(TensorIoError::Format(format!(
            "rank {rank} exceeds {MAX_RANK}"
        )));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u16::from_le_bytes([header[2 + 2 * i], header[3 + 2 * i]]) as usize)
        .collect();
    let shape = TensorShape::new(dims);
    let count = shape.element_count().unwrap_or(0);
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != count * dtype.byte_width() {
        return Err(TensorIoError::Format(format!(
            "payload has {} bytes, shape {shape} needs {}",
            payload.len(),
            count * dtype.byte_width()
        )));
    }
    let elements = match dtype {
        DataType::F32 => Elements::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        DataType::I8 => Elements::Int(payload.iter().map(|&b| b as i8 as i32).collect()),
        DataType::I32 => Elements::Int(
            payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
    };
    TensorValue::new(shape, dtype, elements)
        .ok_or_else(|| TensorIoError::Format("inconsistent tensor".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_all_dtypes() {
        let values = [
            TensorValue::f32([1, 2, 3], vec![0.5, -1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(),
            TensorValue::int([4], DataType::I8, vec![-128, 0, 5, 127]).unwrap(),
            TensorValue::int([1, 2], DataType::I32, vec![i32::MIN, i32::MAX]).unwrap(),
        ];
        for v in values {
            let mut buf = Vec::new();
            write_tensor(&mut buf, &v).unwrap();
            assert_eq!(
                buf.len(),
                HEADER + v.shape().element_count().unwrap() * v.dtype().byte_width()
            );
            assert_eq!(read_tensor(&buf[..]).unwrap(), v);
        }
    }

    #[test]
    fn header_layout() {
        let v = TensorValue::int([2, 3], DataType::I8, vec![0; 6]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &v).unwrap();
        assert_eq!(&buf[..6], &[1, 2, 2, 0, 3, 0]);
        assert!(buf[6..16].iter().all(|&b| b == 0));
    }

    #[test]
    fn truncated_payload_rejected() {
        let v = TensorValue::f32([2], vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &v).unwrap();
        buf.pop();
        assert!(matches!(
            read_tensor(&buf[..]),
            Err(TensorIoError::Format(_))
        ));
    }
}
