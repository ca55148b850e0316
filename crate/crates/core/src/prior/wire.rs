//! Binary tensor payloads exchanged with the prior service.
//!
//! Each tensor is a 24-byte little-endian header followed by its data:
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `RFTN`                   |
//! | 4      | 1    | dtype code (0 = f32)           |
//! | 5      | 1    | rank, 1..=4                    |
//! | 6      | 2    | reserved, zero                 |
//! | 8      | 16   | 4 × u32 dims, unused dims zero |
//!
//! A request body is one or more tensors back to back, optionally followed by
//! a UTF-8 JSON trailer that runs to the end of the body.

use serde_json::Value;

use crate::error::{Error, Result};
use crate::image::Image;

pub const MAGIC: [u8; 4] = *b"RFTN";
pub const HEADER_LEN: usize = 24;
pub const DTYPE_F32: u8 = 0;
pub const MAX_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(Error::Wire(format!("rank {} outside 1..={MAX_RANK}", dims.len())));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Wire("dimension exceeds u32".into()));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Wire(format!("dims {dims:?} need {n} values, got {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    /// `C × H × W` tensor from an HWC image.
    pub fn from_image(img: &Image) -> Self {
        let (w, h, c) = img.shape();
        let mut data = Vec::with_capacity(w * h * c);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(img.get(x, y, ch) as f32);
                }
            }
        }
        Self {
            dims: vec![c, h, w],
            data,
        }
    }

    pub fn to_image(&self) -> Result<Image> {
        let [c, h, w] = self.dims[..] else {
            return Err(Error::Wire(format!("expected a C×H×W tensor, got dims {:?}", self.dims)));
        };
        let mut img = Image::new(w, h, c);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    img.set(x, y, ch, self.data[(ch * h + y) * w + x] as f64);
                }
            }
        }
        Ok(img)
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.push(DTYPE_F32);
        out.push(self.dims.len() as u8);
        out.extend_from_slice(&[0, 0]);
        for i in 0..MAX_RANK {
            let d = self.dims.get(i).copied().unwrap_or(0) as u32;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        self.encode(&mut out);
        out
    }

    /// Parses one tensor from the front of `bytes`; returns it with the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Wire(format!("{} bytes is shorter than the {HEADER_LEN}-byte header", bytes.len())));
        }
        if bytes[0..4] != MAGIC {
            return Err(Error::Wire(format!("bad magic {:?}", &bytes[0..4])));
        }
        if bytes[4] != DTYPE_F32 {
            return Err(Error::Wire(format!("unsupported dtype code {}", bytes[4])));
        }
        let rank = bytes[5] as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Wire(format!("rank {rank} outside 1..={MAX_RANK}")));
        }
        if bytes[6] != 0 || bytes[7] != 0 {
            return Err(Error::Wire("reserved header bytes must be zero".into()));
        }
        let mut dims = Vec::with_capacity(rank);
        for i in 0..MAX_RANK {
            let off = 8 + 4 * i;
            let d = u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize;
            if i < rank {
                dims.push(d);
            } else if d != 0 {
                return Err(Error::Wire(format!("dimension {i} beyond rank {rank} is {d}, not 0")));
            }
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Wire(format!("dims {dims:?} overflow")))?;
        let end = HEADER_LEN
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Wire(format!("dims {dims:?} need {n} data bytes, {} available", bytes.len() - HEADER_LEN)))?;
        let data = bytes[HEADER_LEN..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((Self { dims, data }, end))
    }
}

/// Tensors back to back, then the JSON trailer if any.
pub fn encode_body(tensors: &[&Tensor], trailer: Option<&Value>) -> Vec<u8> {
    let mut out = Vec::new();
    for t in tensors {
        t.encode(&mut out);
    }
    if let Some(v) = trailer {
        out.extend_from_slice(v.to_string().as_bytes());
    }
    out
}

/// Splits a body into exactly `count` tensors and the optional trailer.
pub fn decode_body(bytes: &[u8], count: usize) -> Result<(Vec<Tensor>, Option<Value>)> {
    let mut tensors = Vec::with_capacity(count);
    let mut off = 0;
    for _ in 0..count {
        let (t, used) = Tensor::decode(&bytes[off..])?;
        tensors.push(t);
        off += used;
    }
    let rest = &bytes[off..];
    let trailer = if rest.is_empty() {
        None
    } else {
        Some(serde_json::from_slice(rest).map_err(|e| Error::Wire(format!("bad JSON trailer: {e}")))?)
    };
    Ok((tensors, trailer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_byte_exact() {
        let t = Tensor::new(vec![2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = t.to_bytes();
        assert_eq!(b.len(), HEADER_LEN + 24);
        assert_eq!(&b[0..4], b"RFTN");
        assert_eq!(b[4], 0);
        assert_eq!(b[5], 3);
        assert_eq!(&b[6..8], &[0, 0]);
        assert_eq!(&b[8..24], &[2, 0, 0, 0, 1, 0, 0, 0, 3, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&b[24..28], &1.0f32.to_le_bytes());
    }

    #[test]
    fn image_round_trip_is_chw() {
        let mut img = Image::new(3, 2, 2);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = i as f64;
        }
        let t = Tensor::from_image(&img);
        assert_eq!(t.dims, vec![2, 2, 3]);
        // Channel 0 plane first: HWC indices 0, 2, 4, ...
        assert_eq!(&t.data[0..3], &[0.0, 2.0, 4.0]);
        assert_eq!(t.to_image().unwrap(), img);
    }

    #[test]
    fn body_with_trailer_round_trips() {
        let a = Tensor::new(vec![4], vec![1.0, -2.0, 3.5, 0.0]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![9.0, 8.0]).unwrap();
        let trailer = serde_json::json!({"t": 0.5, "guidance": 7.5, "prompt_tag": "local"});
        let body = encode_body(&[&a, &b], Some(&trailer));
        let (ts, tr) = decode_body(&body, 2).unwrap();
        assert_eq!(ts, vec![a, b]);
        assert_eq!(tr, Some(trailer));
    }

    #[test]
    fn malformed_headers_are_rejected() {
        let good = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().to_bytes();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(Tensor::decode(&bad).is_err());
        let mut bad = good.clone();
        bad[4] = 1;
        assert!(Tensor::decode(&bad).is_err());
        let mut bad = good.clone();
        bad[5] = 5;
        assert!(Tensor::decode(&bad).is_err());
        let mut bad = good.clone();
        bad[12] = 1;
        assert!(Tensor::decode(&bad).is_err());
        assert!(Tensor::decode(&good[..good.len() - 1]).is_err());
        assert!(Tensor::decode(&good[..10]).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..128)) {
            let _ = Tensor::decode(&bytes);
            let _ = decode_body(&bytes, 2);
        }

        #[test]
        fn header_fuzz_never_panics(header in proptest::collection::vec(any::<u8>(), 20), tail in proptest::collection::vec(any::<u8>(), 0..64)) {
            let mut bytes = b"RFTN".to_vec();
            bytes.extend(header);
            bytes.extend(tail);
            let _ = Tensor::decode(&bytes);
        }

        #[test]
        fn valid_tensors_round_trip(dims in proptest::collection::vec(1usize..5, 1..=4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| (i as f32 * 0.37 + seed as f32).sin()).collect();
            let t = Tensor::new(dims, data).unwrap();
            let (back, used) = Tensor::decode(&t.to_bytes()).unwrap();
            prop_assert_eq!(used, t.to_bytes().len());
            prop_assert_eq!(back, t);
        }
    }
}
