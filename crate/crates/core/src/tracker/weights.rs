use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrackerConfig;
use crate::error::{Error, Result};
use crate::tensor::{BatchNorm, Conv2d, ConvBlockWeights};

/// Dense layer `y = W x + b` with `W` stored row-major `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub out_features: usize,
    pub in_features: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(out_features: usize, in_features: usize) -> Self {
        Self { out_features, in_features, weight: vec![0.0; out_features * in_features], bias: vec![0.0; out_features] }
    }

    pub fn zero(&mut self) {
        self.weight.fill(0.0);
        self.bias.fill(0.0);
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_features
            || self.weight.len() != self.out_features * self.in_features
            || self.bias.len() != self.out_features
        {
            return Err(Error::Shape(format!(
                "linear {}->{} applied to {} inputs",
                self.in_features,
                self.out_features,
                x.len()
            )));
        }
        Ok(self
            .weight
            .chunks_exact(self.in_features)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect())
    }
}

/// Parameters of the tracker head.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerWeights {
    /// Applied to the template branch, and to the search branch when `pre_search` is `None`.
    pub pre_template: ConvBlockWeights,
    pub pre_search: Option<ConvBlockWeights>,
    pub post: ConvBlockWeights,
    /// Shared convolution feeding both linear heads (followed by ReLU).
    pub head: Conv2d,
    pub fc_box: Linear,
    pub fc_score: Linear,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-0.05..=0.05)).collect()
}

fn random_block(rng: &mut ChaCha8Rng, out_c: usize, in_c: usize, kernel: usize) -> ConvBlockWeights {
    ConvBlockWeights {
        conv: Conv2d {
            out_channels: out_c,
            in_channels: in_c,
            kernel,
            weight: uniform(rng, out_c * in_c * kernel * kernel),
            bias: uniform(rng, out_c),
        },
        bn: BatchNorm {
            gamma: vec![1.0; out_c],
            beta: vec![0.0; out_c],
            mean: vec![0.0; out_c],
            var: vec![1.0; out_c],
            eps: BatchNorm::DEFAULT_EPS,
        },
    }
}

impl TrackerWeights {
    /// Seeded weights, uniform in `[-0.05, 0.05]`, with the default layout:
    /// shared 1x1 pre-correlation block, 3x3 post-correlation block, 3x3
    /// `head_filters` convolution and linear heads over the flattened map.
    pub fn synthetic(channels: usize, head_filters: usize, corr_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pre_template = random_block(&mut rng, channels, channels, 1);
        let post = random_block(&mut rng, channels, channels, 3);
        let head = Conv2d {
            out_channels: head_filters,
            in_channels: channels,
            kernel: 3,
            weight: uniform(&mut rng, head_filters * channels * 9),
            bias: uniform(&mut rng, head_filters),
        };
        let flat = head_filters * corr_size * corr_size;
        let fc_box = Linear {
            out_features: 4,
            in_features: flat,
            weight: uniform(&mut rng, 4 * flat),
            bias: uniform(&mut rng, 4),
        };
        let fc_score =
            Linear { out_features: 1, in_features: flat, weight: uniform(&mut rng, flat), bias: uniform(&mut rng, 1) };
        Self { pre_template, pre_search: None, post, head, fc_box, fc_score }
    }

    /// Default head width.
    pub const HEAD_FILTERS: usize = 256;

    pub fn check_compatible(&self, channels: usize, cfg: &TrackerConfig) -> Result<()> {
        let blocks =
            std::iter::once(&self.pre_template).chain(self.pre_search.as_ref()).chain(std::iter::once(&self.post));
        for b in blocks {
            b.validate()?;
        }
        self.head.validate()?;
        let mismatch =
            |what: &str, want: usize, got: usize| Err(Error::Shape(format!("{what}: expected {want}, got {got}")));
        let pre_out = self.pre_template.conv.out_channels;
        if self.pre_template.conv.in_channels != channels {
            return mismatch("pre-correlation input channels", channels, self.pre_template.conv.in_channels);
        }
        if let Some(s) = &self.pre_search {
            if s.conv.in_channels != channels || s.conv.out_channels != pre_out {
                return mismatch("search-branch block channels", pre_out, s.conv.out_channels);
            }
        }
        if self.post.conv.in_channels != pre_out {
            return mismatch("post-correlation input channels", pre_out, self.post.conv.in_channels);
        }
        if self.head.in_channels != self.post.conv.out_channels {
            return mismatch("head input channels", self.post.conv.out_channels, self.head.in_channels);
        }
        let corr = cfg.correlation_size();
        let flat = self.head.out_channels * corr * corr;
        for (name, fc, outs) in [("box head", &self.fc_box, 4), ("score head", &self.fc_score, 1)] {
            if fc.in_features != flat {
                return mismatch(&format!("{name} input size"), flat, fc.in_features);
            }
            if fc.out_features != outs {
                return mismatch(&format!("{name} output size"), outs, fc.out_features);
            }
        }
        Ok(())
    }

    pub fn to_arrays(&self) -> NamedArrays {
        let mut a = NamedArrays::default();
        push_block(&mut a, "pre_template", &self.pre_template);
        if let Some(s) = &self.pre_search {
            push_block(&mut a, "pre_search", s);
        }
        push_block(&mut a, "post", &self.post);
        push_conv(&mut a, "head", &self.head);
        push_linear(&mut a, "fc_box", &self.fc_box);
        push_linear(&mut a, "fc_score", &self.fc_score);
        a
    }

    pub fn from_arrays(a: &NamedArrays) -> Result<Self> {
        let pre_search =
            if a.get("pre_search.conv.weight").is_some() { Some(read_block(a, "pre_search")?) } else { None };
        Ok(Self {
            pre_template: read_block(a, "pre_template")?,
            pre_search,
            post: read_block(a, "post")?,
            head: read_conv(a, "head")?,
            fc_box: read_linear(a, "fc_box")?,
            fc_score: read_linear(a, "fc_score")?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_arrays().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_arrays(&NamedArrays::load(path)?)
    }
}

fn push_conv(a: &mut NamedArrays, prefix: &str, c: &Conv2d) {
    a.push(format!("{prefix}.weight"), vec![c.out_channels, c.in_channels, c.kernel, c.kernel], c.weight.clone());
    a.push(format!("{prefix}.bias"), vec![c.out_channels], c.bias.clone());
}

fn push_block(a: &mut NamedArrays, prefix: &str, b: &ConvBlockWeights) {
    push_conv(a, &format!("{prefix}.conv"), &b.conv);
    let n = b.bn.channels();
    a.push(format!("{prefix}.bn.gamma"), vec![n], b.bn.gamma.clone());
    a.push(format!("{prefix}.bn.beta"), vec![n], b.bn.beta.clone());
    a.push(format!("{prefix}.bn.mean"), vec![n], b.bn.mean.clone());
    a.push(format!("{prefix}.bn.var"), vec![n], b.bn.var.clone());
    a.push(format!("{prefix}.bn.eps"), vec![1], vec![b.bn.eps]);
}

fn push_linear(a: &mut NamedArrays, prefix: &str, l: &Linear) {
    a.push(format!("{prefix}.weight"), vec![l.out_features, l.in_features], l.weight.clone());
    a.push(format!("{prefix}.bias"), vec![l.out_features], l.bias.clone());
}

fn read_conv(a: &NamedArrays, prefix: &str) -> Result<Conv2d> {
    let (shape, weight) = a.require(&format!("{prefix}.weight"), 4)?;
    if shape[2] != shape[3] {
        return Err(Error::Format(format!("{prefix}.weight: kernel must be square, got {shape:?}")));
    }
    let (_, bias) = a.require(&format!("{prefix}.bias"), 1)?;
    Conv2d::new(shape[0], shape[1], shape[2], weight.to_vec(), bias.to_vec())
}

fn read_block(a: &NamedArrays, prefix: &str) -> Result<ConvBlockWeights> {
    let field = |name: &str| -> Result<Vec<f64>> { Ok(a.require(&format!("{prefix}.bn.{name}"), 1)?.1.to_vec()) };
    let eps = field("eps")?;
    if eps.len() != 1 {
        return Err(Error::Format(format!("{prefix}.bn.eps must hold one value")));
    }
    let block = ConvBlockWeights {
        conv: read_conv(a, &format!("{prefix}.conv"))?,
        bn: BatchNorm {
            gamma: field("gamma")?,
            beta: field("beta")?,
            mean: field("mean")?,
            var: field("var")?,
            eps: eps[0],
        },
    };
    block.validate()?;
    Ok(block)
}

fn read_linear(a: &NamedArrays, prefix: &str) -> Result<Linear> {
    let (shape, weight) = a.require(&format!("{prefix}.weight"), 2)?;
    let (_, bias) = a.require(&format!("{prefix}.bias"), 1)?;
    if bias.len() != shape[0] {
        return Err(Error::Format(format!("{prefix}.bias length {} != {}", bias.len(), shape[0])));
    }
    Ok(Linear { out_features: shape[0], in_features: shape[1], weight: weight.to_vec(), bias: bias.to_vec() })
}

const MAGIC: &[u8; 4] = b"VKWT";
const VERSION: u32 = 1;

/// Ordered container of named f64 arrays with explicit shapes.
///
/// Layout (little-endian): `b"VKWT"`, `u32` version, `u32` array count, then per
/// array `u32` name length, UTF-8 name, `u32` rank, `u64` dims, `f64` payload.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NamedArrays {
    entries: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl NamedArrays {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push((name.into(), shape, data));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.entries.iter().find(|(n, _, _)| n == name).map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    fn require(&self, name: &str, rank: usize) -> Result<(&[usize], &[f64])> {
        let (shape, data) = self.get(name).ok_or_else(|| Error::Format(format!("missing array {name}")))?;
        if shape.len() != rank {
            return Err(Error::Format(format!("{name}: expected rank {rank}, got shape {shape:?}")));
        }
        Ok((shape, data))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, shape, data) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for d in shape {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("not a weights file (bad magic)".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported weights version {version}")));
        }
        let count = cur.u32()? as usize;
        let mut out = NamedArrays::default();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|e| Error::Format(format!("array name is not UTF-8: {e}")))?
                .to_owned();
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(cur.u64()?).map_err(|_| Error::Format("dimension overflow".into()))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .ok_or_else(|| Error::Format(format!("{name}: element count overflows")))?;
            let raw = cur.take(n.checked_mul(8).ok_or_else(|| Error::Format("payload overflow".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            out.entries.push((name, shape, data));
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after last array", bytes.len() - cur.pos)));
        }
        Ok(out)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!(
                "truncated: need {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let w = TrackerWeights::synthetic(3, 8, 15, 11);
        let bytes = w.to_arrays().to_bytes();
        let back = TrackerWeights::from_arrays(&NamedArrays::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.to_arrays().to_bytes(), bytes);
    }

    #[test]
    fn separate_search_branch_survives_roundtrip() {
        let mut w = TrackerWeights::synthetic(2, 4, 15, 1);
        let mut s = w.pre_template.clone();
        s.bn.beta = vec![0.25, -0.5];
        w.pre_search = Some(s);
        let back = TrackerWeights::from_arrays(&w.to_arrays()).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = TrackerWeights::synthetic(2, 4, 15, 1).to_arrays().to_bytes();
        assert!(NamedArrays::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(NamedArrays::from_bytes(&extra).is_err());
        assert!(NamedArrays::from_bytes(b"nope").is_err());
        let mut missing = NamedArrays::default();
        missing.push("head.weight", vec![1, 1, 1, 1], vec![1.0]);
        assert!(TrackerWeights::from_arrays(&missing).is_err());
    }

    #[test]
    fn linear_forward() {
        let l = Linear {
            out_features: 2,
            in_features: 3,
            weight: vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0],
            bias: vec![0.5, -0.5],
        };
        assert_eq!(l.forward(&[1.0, 1.0, 1.0]).unwrap(), vec![6.5, -0.5]);
        assert!(l.forward(&[1.0]).is_err());
    }
}
