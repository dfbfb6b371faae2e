//! `IMT1` raw tensor files.
//!
//! Layout, all integers little-endian `u32`:
//! `"IMT1" | rank | dims[rank] | dtype | payload`, with dtype `1 = f32`,
//! `2 = u8` and the payload row-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{ProbMap, Raster};

pub const MAGIC: &[u8; 4] = b"IMT1";
pub const FORMAT_VERSION: &str = "IMT1";
const MAX_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    fn code(&self) -> u32 {
        match self {
            TensorData::F32(_) => 1,
            TensorData::U8(_) => 2,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "float32",
            TensorData::U8(_) => "uint8",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        if dims.len() > MAX_RANK {
            return Err(Error::InvalidArgument(format!("tensor rank {} exceeds {MAX_RANK}", dims.len())));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!("dims {dims:?} need {expected} values, got {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn f32(dims: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Self::new(dims, TensorData::F32(values))
    }

    pub fn into_f32(self) -> Result<(Vec<usize>, Vec<f32>)> {
        match self.data {
            TensorData::F32(v) => Ok((self.dims, v)),
            other => Err(Error::DtypeMismatch { expected: "float32", found: other.name() }),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.data.code().to_le_bytes());
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cursor = Cursor { bytes, pos: 0 };
        let magic = cursor.take(4)?;
        if magic != MAGIC {
            return Err(Error::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
        }
        let rank = cursor.u32()? as usize;
        if rank > MAX_RANK {
            return Err(Error::InvalidArgument(format!("tensor rank {rank} exceeds {MAX_RANK}")));
        }
        let dims = (0..rank).map(|_| cursor.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let data = match cursor.u32()? {
            1 => {
                let raw = cursor.take(count * 4)?;
                TensorData::F32(
                    raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
                )
            }
            2 => TensorData::U8(cursor.take(count)?.to_vec()),
            code => return Err(Error::UnknownDtype(code)),
        };
        if cursor.pos != bytes.len() {
            return Err(Error::Shape(format!("{} trailing bytes after payload", bytes.len() - cursor.pos)));
        }
        Ok(Self { dims, data })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated { expected: end, found: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    super::ensure_parent(path)?;
    fs::write(path, tensor.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::decode(&bytes)
}

/// Writes a probability map as a rank-3 `(H, W, C)` float32 tensor.
pub fn write_prob_map(path: &Path, map: &ProbMap<f32>) -> Result<()> {
    let (h, w) = map.dims();
    let tensor = Tensor::f32(vec![h, w, map.channels()], map.raster().data().to_vec())?;
    write_tensor(path, &tensor)
}

/// Reads a `(H, W, C)` float32 tensor as a probability map. Rank-2 tensors
/// are accepted as single-channel maps.
pub fn read_prob_map(path: &Path) -> Result<ProbMap<f32>> {
    let (dims, values) = read_tensor(path)?.into_f32()?;
    let (h, w, c) = match dims.as_slice() {
        [h, w] => (*h, *w, 1),
        [h, w, c] => (*h, *w, *c),
        _ => return Err(Error::Shape(format!("{}: expected (H,W,C) tensor, got {dims:?}", path.display()))),
    };
    ProbMap::new(Raster::new(h, w, c, values)?)
}

/// Reads a score tensor: a scalar, or a flat vector of per-class values.
pub fn read_score(path: &Path) -> Result<Vec<f32>> {
    let (_, values) = read_tensor(path)?.into_f32()?;
    if values.is_empty() {
        return Err(Error::Shape(format!("{}: empty score tensor", path.display())));
    }
    Ok(values)
}

pub fn write_score(path: &Path, values: &[f32]) -> Result<()> {
    write_tensor(path, &Tensor::f32(vec![values.len()], values.to_vec())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_round_trip_and_size() {
        let t = Tensor::f32(vec![2, 2], vec![0.5, 1.0, 0.0, 0.25]).unwrap();
        let bytes = t.encode();
        assert_eq!(bytes.len(), 4 + 4 + 8 + 4 + 16);
        assert_eq!(Tensor::decode(&bytes).unwrap(), t);
    }

    #[test]
    fn probability_map_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.imt");
        let values: Vec<f32> = (0..64 * 64 * 8).map(|i| (i % 97) as f32 / 96.0).collect();
        let map = ProbMap::from_vec(64, 64, 8, values).unwrap();
        write_prob_map(&path, &map).unwrap();
        assert_eq!(read_prob_map(&path).unwrap(), map);
    }

    #[test]
    fn errors_are_distinct() {
        let mut bytes = Tensor::f32(vec![2], vec![1.0, 2.0]).unwrap().encode();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Tensor::decode(&bad), Err(Error::BadMagic(m)) if &m == b"XMT1"));
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(Tensor::decode(&bytes), Err(Error::Truncated { .. })));
        let u8t = Tensor::new(vec![2], TensorData::U8(vec![1, 2])).unwrap();
        assert!(matches!(u8t.into_f32(), Err(Error::DtypeMismatch { .. })));
        let mut unknown = Tensor::f32(vec![1], vec![1.0]).unwrap().encode();
        unknown[12] = 9;
        assert!(matches!(Tensor::decode(&unknown), Err(Error::UnknownDtype(9))));
    }

    #[test]
    fn rank_above_four_rejected() {
        assert!(Tensor::f32(vec![1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(dims in proptest::collection::vec(1usize..5, 0..=4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let values: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32))).collect();
            let t = Tensor::f32(dims, values).unwrap();
            let back = Tensor::decode(&t.encode()).unwrap();
            let (TensorData::F32(a), TensorData::F32(b)) = (&t.data, &back.data) else { unreachable!() };
            prop_assert_eq!(&t.dims, &back.dims);
            prop_assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
