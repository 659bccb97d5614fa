//! Binary feature-pyramid files.
//!
//! Little-endian layout:
//! ```text
//! magic "FPYR" | u32 version (1) | u32 element bytes (4 or 8)
//! u32 image_h | u32 image_w | u32 num_levels
//! num_levels x (u32 stride | u32 C | u32 H | u32 W)
//! level payloads in header order, C*H*W elements each, channel-major
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{FeaturePyramid, PyramidLevel, Tensor3};
use crate::tracker::weights::Cursor;

const MAGIC: &[u8; 4] = b"FPYR";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    F32,
    F64,
}

impl ElementType {
    fn bytes(self) -> usize {
        match self {
            ElementType::F32 => 4,
            ElementType::F64 => 8,
        }
    }
}

pub fn read_features<R: Read>(mut r: R) -> Result<FeaturePyramid> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("not a feature file (bad magic)".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported feature file version {version}")));
    }
    let elem = match cur.u32()? {
        4 => ElementType::F32,
        8 => ElementType::F64,
        n => return Err(Error::Format(format!("element width must be 4 or 8 bytes, got {n}"))),
    };
    let image_h = cur.u32()?;
    let image_w = cur.u32()?;
    let num_levels = cur.u32()? as usize;
    if num_levels == 0 {
        return Err(Error::Shape("empty pyramid".into()));
    }
    let mut shapes = Vec::with_capacity(num_levels);
    for _ in 0..num_levels {
        let (stride, c, h, w) = (cur.u32()?, cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize);
        shapes.push((stride, c, h, w));
    }
    let expected: usize = shapes.iter().map(|&(_, c, h, w)| c * h * w * elem.bytes()).sum();
    let remaining = bytes.len() - cur.pos;
    if remaining != expected {
        return Err(Error::Shape(format!("header declares {expected} payload bytes, file has {remaining}")));
    }
    let mut levels = Vec::with_capacity(num_levels);
    for (stride, c, h, w) in shapes {
        let raw = cur.take(c * h * w * elem.bytes())?;
        let data: Vec<f64> = match elem {
            ElementType::F32 => raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect(),
            ElementType::F64 => raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
        };
        levels.push(PyramidLevel { stride, map: Tensor3::from_vec(c, h, w, data)? });
    }
    FeaturePyramid::new(image_h, image_w, levels)
}

pub fn write_features<W: Write>(mut w: W, pyr: &FeaturePyramid, elem: ElementType) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [VERSION, elem.bytes() as u32, pyr.image_height(), pyr.image_width(), pyr.levels().len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for l in pyr.levels() {
        let (c, h, wd) = l.map.shape();
        for v in [l.stride, c as u32, h as u32, wd as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for l in pyr.levels() {
        for &x in l.map.data() {
            match elem {
                ElementType::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
                ElementType::F64 => out.extend_from_slice(&x.to_le_bytes()),
            }
        }
    }
    w.write_all(&out)?;
    Ok(())
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeaturePyramid> {
    read_features(fs::File::open(path)?)
}

pub fn save_features(path: impl AsRef<Path>, pyr: &FeaturePyramid, elem: ElementType) -> Result<()> {
    write_features(fs::File::create(path)?, pyr, elem)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(levels: &[(u32, u32, u32, u32)], elem: u32) -> Vec<u8> {
        let mut b = MAGIC.to_vec();
        for v in [VERSION, elem, 32, 32, levels.len() as u32] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for &(s, c, h, w) in levels {
            for v in [s, c, h, w] {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    #[test]
    fn header_only_is_empty_pyramid() {
        let err = read_features(&header(&[], 8)[..]).unwrap_err();
        assert!(err.to_string().contains("empty pyramid"));
    }

    #[test]
    fn single_level_f32() {
        let mut b = header(&[(4, 4, 8, 8)], 4);
        for i in 0..256 {
            b.extend_from_slice(&(i as f32 * 0.5).to_le_bytes());
        }
        let p = read_features(&b[..]).unwrap();
        assert_eq!(p.levels()[0].map.len(), 256);
        assert_eq!(p.levels()[0].map[(1, 0, 0)], 32.0);
    }

    #[test]
    fn truncated_and_trailing_payloads() {
        let mut b = header(&[(4, 4, 8, 8)], 8);
        b.extend(std::iter::repeat_n(0u8, 256 * 8 - 1));
        assert!(matches!(read_features(&b[..]), Err(Error::Shape(_))));
        b.extend_from_slice(&[0, 0]);
        assert!(matches!(read_features(&b[..]), Err(Error::Shape(_))));
    }

    #[test]
    fn roundtrip_f64() {
        let lvl = |s: u32, n: usize| PyramidLevel {
            stride: s,
            map: Tensor3::from_fn(2, n, n, |c, y, x| (c * 100 + y * 10 + x) as f64 / 7.0),
        };
        let p = FeaturePyramid::new(32, 32, vec![lvl(4, 8), lvl(8, 4)]).unwrap();
        let mut buf = Vec::new();
        write_features(&mut buf, &p, ElementType::F64).unwrap();
        assert_eq!(read_features(&buf[..]).unwrap(), p);
    }
}
