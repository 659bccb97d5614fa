//! Dense CPU kernels over channel-major 3-D tensors.
//!
//! Feature coordinates follow the half-pixel convention: the value stored at
//! column `j` of a stride-`s` map sits at image position `(j + 0.5) * s`.
//! A map therefore covers the image interval `[0, W * s)`; samples outside that
//! interval read as zero, samples inside but beyond the outermost cell centers
//! clamp to the border value.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// `C x H x W` tensor of f64, stored channel-major then row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!("tensor dims must be positive, got {channels}x{height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{channels}x{height}x{width} tensor needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { channels, height, width, data }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    fn offset(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(c < self.channels && y < self.height && x < self.width);
        (c * self.height + y) * self.width + x
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates along the channel axis. All inputs must share `H x W`.
    pub fn concat_channels(parts: &[Tensor3]) -> Result<Tensor3> {
        let first = parts.first().ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if (p.height, p.width) != (h, w) {
                return Err(Error::Shape(format!("cannot concatenate {}x{} with {h}x{w}", p.height, p.width)));
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Tensor3::from_vec(channels, h, w, data)
    }
}

impl Index<(usize, usize, usize)> for Tensor3 {
    type Output = f64;

    fn index(&self, (c, y, x): (usize, usize, usize)) -> &f64 {
        &self.data[self.offset(c, y, x)]
    }
}

impl IndexMut<(usize, usize, usize)> for Tensor3 {
    fn index_mut(&mut self, (c, y, x): (usize, usize, usize)) -> &mut f64 {
        let o = self.offset(c, y, x);
        &mut self.data[o]
    }
}

/// Bilinear read of one channel at continuous feature coordinates `(fy, fx)`
/// measured in cells from the map origin (cell `j` spans `[j, j + 1)`).
pub fn bilinear_at(feat: &Tensor3, c: usize, fy: f64, fx: f64) -> f64 {
    let (h, w) = (feat.height as f64, feat.width as f64);
    if !(0.0..=h).contains(&fy) || !(0.0..=w).contains(&fx) {
        return 0.0;
    }
    let v = (fy - 0.5).clamp(0.0, h - 1.0);
    let u = (fx - 0.5).clamp(0.0, w - 1.0);
    let y0 = v.floor() as usize;
    let x0 = u.floor() as usize;
    let y1 = (y0 + 1).min(feat.height - 1);
    let x1 = (x0 + 1).min(feat.width - 1);
    let ly = v - y0 as f64;
    let lx = u - x0 as f64;
    let plane = feat.channel(c);
    let row0 = y0 * feat.width;
    let row1 = y1 * feat.width;
    (1.0 - ly) * ((1.0 - lx) * plane[row0 + x0] + lx * plane[row0 + x1])
        + ly * ((1.0 - lx) * plane[row1 + x0] + lx * plane[row1 + x1])
}

/// How RoIAlign places sample points inside each output bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BinSampling {
    /// `max(2, ceil(bin extent in cells))` points per axis, averaged.
    #[default]
    Adaptive,
    /// A fixed `n x n` regular grid per bin, averaged.
    Grid(usize),
    /// A single point at the bin center, read from its 4 bilinear neighbours.
    Center,
}

impl BinSampling {
    fn points_per_axis(self, bin_cells: f64) -> usize {
        match self {
            BinSampling::Adaptive => (bin_cells.ceil() as usize).max(2),
            BinSampling::Grid(n) => n.max(1),
            BinSampling::Center => 1,
        }
    }
}

/// RoIAlign of `roi` (image pixels) over a stride-`stride` map into `out_h x out_w` bins.
pub fn roi_align(
    feat: &Tensor3,
    roi: &BBox,
    out_h: usize,
    out_w: usize,
    stride: f64,
    sampling: BinSampling,
) -> Result<Tensor3> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Argument(format!("output size must be positive, got {out_h}x{out_w}")));
    }
    if !(stride > 0.0) || !stride.is_finite() {
        return Err(Error::Argument(format!("stride must be positive, got {stride}")));
    }
    let mut out = Tensor3::zeros(feat.channels, out_h, out_w);
    if !roi.has_positive_area() {
        return Ok(out);
    }
    let y0 = roi.y1() / stride;
    let x0 = roi.x1() / stride;
    let bin_h = roi.height() / stride / out_h as f64;
    let bin_w = roi.width() / stride / out_w as f64;
    let sy = sampling.points_per_axis(bin_h);
    let sx = sampling.points_per_axis(bin_w);
    let norm = 1.0 / (sy * sx) as f64;

    // Sample coordinates are shared across channels.
    let ys: Vec<f64> =
        (0..out_h * sy).map(|k| y0 + bin_h * ((k / sy) as f64 + ((k % sy) as f64 + 0.5) / sy as f64)).collect();
    let xs: Vec<f64> =
        (0..out_w * sx).map(|k| x0 + bin_w * ((k / sx) as f64 + ((k % sx) as f64 + 0.5) / sx as f64)).collect();

    for c in 0..feat.channels {
        for by in 0..out_h {
            for bx in 0..out_w {
                let mut acc = 0.0;
                for &fy in &ys[by * sy..(by + 1) * sy] {
                    for &fx in &xs[bx * sx..(bx + 1) * sx] {
                        acc += bilinear_at(feat, c, fy, fx);
                    }
                }
                out[(c, by, bx)] = acc * norm;
            }
        }
    }
    Ok(out)
}

/// RoIAlign where each bin is the average over the whole bin (tracker variant).
pub fn roi_align_full_avg(feat: &Tensor3, roi: &BBox, out_h: usize, out_w: usize, stride: f64) -> Result<Tensor3> {
    roi_align(feat, roi, out_h, out_w, stride, BinSampling::Adaptive)
}

/// RoIAlign where each bin is one bilinear read at its center (detector variant).
pub fn roi_align_nearest4(feat: &Tensor3, roi: &BBox, out_h: usize, out_w: usize, stride: f64) -> Result<Tensor3> {
    roi_align(feat, roi, out_h, out_w, stride, BinSampling::Center)
}

/// Per-channel valid cross-correlation of `template` over `search`.
pub fn depthwise_correlate(template: &Tensor3, search: &Tensor3) -> Result<Tensor3> {
    if template.channels != search.channels {
        return Err(Error::Shape(format!(
            "template has {} channels, search has {}",
            template.channels, search.channels
        )));
    }
    if template.height > search.height || template.width > search.width {
        return Err(Error::Shape(format!(
            "template {}x{} larger than search {}x{}",
            template.height, template.width, search.height, search.width
        )));
    }
    let oh = search.height - template.height + 1;
    let ow = search.width - template.width + 1;
    let mut out = Tensor3::zeros(template.channels, oh, ow);
    for c in 0..template.channels {
        let t = template.channel(c);
        let s = search.channel(c);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ty in 0..template.height {
                    let srow = &s[(oy + ty) * search.width + ox..][..template.width];
                    let trow = &t[ty * template.width..][..template.width];
                    for (a, b) in trow.iter().zip(srow) {
                        acc += a * b;
                    }
                }
                out[(c, oy, ox)] = acc;
            }
        }
    }
    Ok(out)
}

/// Square 2-D convolution with stride 1 and same padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    /// `out x in x k x k`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let conv = Self { out_channels, in_channels, kernel, weight, bias };
        conv.validate()?;
        Ok(conv)
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kernel: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            kernel,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    /// 1x1 identity mapping over `channels`.
    pub fn identity(channels: usize) -> Self {
        let mut conv = Self::zeros(channels, channels, 1);
        for c in 0..channels {
            conv.weight[c * channels + c] = 1.0;
        }
        conv
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::Shape(format!("same padding needs an odd kernel, got {}", self.kernel)));
        }
        let expect = self.out_channels * self.in_channels * self.kernel * self.kernel;
        if self.weight.len() != expect || self.bias.len() != self.out_channels {
            return Err(Error::Shape(format!(
                "conv {}->{} k{} expects {expect} weights and {} biases, got {} and {}",
                self.in_channels,
                self.out_channels,
                self.kernel,
                self.out_channels,
                self.weight.len(),
                self.bias.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor3) -> Result<Tensor3> {
        self.validate()?;
        if input.channels != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, input.channels
            )));
        }
        let (h, w, k) = (input.height as isize, input.width as isize, self.kernel);
        let pad = (k / 2) as isize;
        let mut out = Tensor3::zeros(self.out_channels, input.height, input.width);
        for o in 0..self.out_channels {
            let plane = &mut out.data[o * input.height * input.width..][..input.height * input.width];
            plane.fill(self.bias[o]);
            for i in 0..self.in_channels {
                let src = input.channel(i);
                let kern = &self.weight[(o * self.in_channels + i) * k * k..][..k * k];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = kern[ky * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let dy = ky as isize - pad;
                        let dx = kx as isize - pad;
                        for y in 0.max(-dy)..h.min(h - dy) {
                            let srow = ((y + dy) * w) as usize;
                            let drow = (y * w) as usize;
                            for x in 0.max(-dx)..w.min(w - dx) {
                                plane[drow + x as usize] += wv * src[srow + (x + dx) as usize];
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Inference-mode batch normalization with stored running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl BatchNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    /// `gamma = 1, beta = 0, mean = 0, var = 1 - eps`, i.e. an exact identity.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0 - Self::DEFAULT_EPS; channels],
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.gamma.len();
        if self.beta.len() != n || self.mean.len() != n || self.var.len() != n {
            return Err(Error::Shape("batch-norm parameter lengths differ".into()));
        }
        if self.var.iter().any(|v| *v + self.eps <= 0.0) {
            return Err(Error::Argument("batch-norm variance + eps must be positive".into()));
        }
        Ok(())
    }

    pub fn forward_in_place(&self, t: &mut Tensor3) -> Result<()> {
        self.validate()?;
        if t.channels != self.channels() {
            return Err(Error::Shape(format!(
                "batch norm over {} channels applied to {}",
                self.channels(),
                t.channels
            )));
        }
        let n = t.height * t.width;
        for c in 0..t.channels {
            let scale = self.gamma[c] / (self.var[c] + self.eps).sqrt();
            let (mu, beta) = (self.mean[c], self.beta[c]);
            for v in &mut t.data[c * n..(c + 1) * n] {
                *v = scale * (*v - mu) + beta;
            }
        }
        Ok(())
    }
}

pub fn relu_in_place(t: &mut Tensor3) {
    for v in &mut t.data {
        *v = v.max(0.0);
    }
}

/// conv -> batch norm -> relu.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBlockWeights {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBlockWeights {
    pub fn identity(channels: usize) -> Self {
        Self { conv: Conv2d::identity(channels), bn: BatchNorm::identity(channels) }
    }

    pub fn validate(&self) -> Result<()> {
        self.conv.validate()?;
        self.bn.validate()?;
        if self.bn.channels() != self.conv.out_channels {
            return Err(Error::Shape(format!(
                "batch norm has {} channels, conv outputs {}",
                self.bn.channels(),
                self.conv.out_channels
            )));
        }
        Ok(())
    }
}

pub fn conv_block(input: &Tensor3, weights: &ConvBlockWeights) -> Result<Tensor3> {
    weights.validate()?;
    let mut out = weights.conv.forward(input)?;
    weights.bn.forward_in_place(&mut out)?;
    relu_in_place(&mut out);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel {
    pub stride: u32,
    pub map: Tensor3,
}

/// Multi-stride backbone features for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    image_height: u32,
    image_width: u32,
    levels: Vec<PyramidLevel>,
}

impl FeaturePyramid {
    pub fn new(image_height: u32, image_width: u32, levels: Vec<PyramidLevel>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Shape("empty pyramid".into()));
        }
        let mut prev = 0;
        for lvl in &levels {
            if lvl.stride == 0 || lvl.stride <= prev {
                return Err(Error::Shape(format!(
                    "pyramid strides must be positive and strictly increasing (got {} after {prev})",
                    lvl.stride
                )));
            }
            prev = lvl.stride;
            let eh = image_height.div_ceil(lvl.stride) as i64;
            let ew = image_width.div_ceil(lvl.stride) as i64;
            if (lvl.map.height() as i64 - eh).abs() > 1 || (lvl.map.width() as i64 - ew).abs() > 1 {
                return Err(Error::Shape(format!(
                    "stride {} level is {}x{}, expected about {eh}x{ew} for a {image_height}x{image_width} image",
                    lvl.stride,
                    lvl.map.height(),
                    lvl.map.width()
                )));
            }
        }
        Ok(Self { image_height, image_width, levels })
    }

    pub fn image_height(&self) -> u32 {
        self.image_height
    }

    pub fn image_width(&self) -> u32 {
        self.image_width
    }

    pub fn levels(&self) -> &[PyramidLevel] {
        &self.levels
    }

    pub fn strides(&self) -> Vec<u32> {
        self.levels.iter().map(|l| l.stride).collect()
    }

    pub fn level(&self, stride: u32) -> Option<&PyramidLevel> {
        self.levels.iter().find(|l| l.stride == stride)
    }

    pub fn finest_stride(&self) -> u32 {
        self.levels[0].stride
    }

    pub fn total_channels(&self) -> usize {
        self.levels.iter().map(|l| l.map.channels()).sum()
    }
}

fn max_pool_to(src: &Tensor3, factor: usize, out_h: usize, out_w: usize) -> Tensor3 {
    let window = |i: usize, n: usize| {
        let lo = (i * factor).min(n - 1);
        let hi = ((i + 1) * factor).min(n).max(lo + 1);
        lo..hi
    };
    Tensor3::from_fn(src.channels, out_h, out_w, |c, y, x| {
        let mut m = f64::NEG_INFINITY;
        for sy in window(y, src.height) {
            for sx in window(x, src.width) {
                m = m.max(src[(c, sy, sx)]);
            }
        }
        m
    })
}

fn resize_bilinear(src: &Tensor3, out_h: usize, out_w: usize) -> Tensor3 {
    let ry = src.height as f64 / out_h as f64;
    let rx = src.width as f64 / out_w as f64;
    Tensor3::from_fn(src.channels, out_h, out_w, |c, y, x| {
        let v = ((y as f64 + 0.5) * ry - 0.5).clamp(0.0, (src.height - 1) as f64);
        let u = ((x as f64 + 0.5) * rx - 0.5).clamp(0.0, (src.width - 1) as f64);
        let (y0, x0) = (v.floor() as usize, u.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(src.height - 1), (x0 + 1).min(src.width - 1));
        let (ly, lx) = (v - y0 as f64, u - x0 as f64);
        (1.0 - ly) * ((1.0 - lx) * src[(c, y0, x0)] + lx * src[(c, y0, x1)])
            + ly * ((1.0 - lx) * src[(c, y1, x0)] + lx * src[(c, y1, x1)])
    })
}

/// Resizes every level to the `target_stride` level's grid (max pooling for finer
/// levels, bilinear interpolation for coarser ones) and concatenates channels in
/// stride order.
pub fn fuse_pyramid(pyr: &FeaturePyramid, target_stride: u32) -> Result<Tensor3> {
    let target = pyr
        .level(target_stride)
        .ok_or_else(|| Error::Argument(format!("no stride-{target_stride} level in pyramid")))?;
    let (th, tw) = (target.map.height(), target.map.width());
    let mut parts = Vec::with_capacity(pyr.levels.len());
    for lvl in &pyr.levels {
        let resized = if lvl.stride == target_stride {
            lvl.map.clone()
        } else if lvl.stride < target_stride {
            if !target_stride.is_multiple_of(lvl.stride) {
                return Err(Error::Shape(format!(
                    "stride {} does not divide target stride {target_stride}",
                    lvl.stride
                )));
            }
            max_pool_to(&lvl.map, (target_stride / lvl.stride) as usize, th, tw)
        } else {
            resize_bilinear(&lvl.map, th, tw)
        };
        parts.push(resized);
    }
    Tensor3::concat_channels(&parts)
}
