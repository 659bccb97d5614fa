//! Scale-adaptive convolutional regression tracker head.
//!
//! For every box in frame `t` a `7x7` template is pooled at the box and a
//! `21x21` search patch is pooled at the box expanded `k = 3` times in frame
//! `t + 1`. Both pass a conv block, are depth-wise correlated into a `15x15`
//! map, adjusted by another conv block and a shared 256-filter convolution,
//! and two linear heads regress the box delta and the IoU-quality logit.

mod oracle;
pub(crate) mod weights;

pub use oracle::{oracle_track, OracleNoise, OracleTracker};
pub use weights::{Linear, NamedArrays, TrackerWeights};

use crate::detection::Detection;
use crate::error::{Error, Result};
use crate::geometry::{self, iou, BBox, RegressionDelta};
use crate::tensor::{
    conv_block, depthwise_correlate, fuse_pyramid, relu_in_place, roi_align_full_avg, FeaturePyramid, Tensor3,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    /// Search region expansion around the tracked box.
    pub k: f64,
    pub template_pool: usize,
    pub search_pool: usize,
    /// Frame gap between template and search frames.
    pub tau: usize,
    /// Pyramid level all features are resized to; `None` picks the finest.
    pub fuse_stride: Option<u32>,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { k: 3.0, template_pool: 7, search_pool: 21, tau: 1, fuse_stride: None }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k >= 1.0) {
            return Err(Error::Argument(format!("k must be >= 1, got {}", self.k)));
        }
        if self.template_pool == 0 || self.tau == 0 {
            return Err(Error::Argument("template_pool and tau must be positive".into()));
        }
        if self.search_pool as f64 != self.k * self.template_pool as f64 {
            return Err(Error::Argument(format!(
                "search_pool {} must equal k * template_pool = {}",
                self.search_pool,
                self.k * self.template_pool as f64
            )));
        }
        Ok(())
    }

    /// Side length of the correlation map.
    pub fn correlation_size(&self) -> usize {
        self.search_pool - self.template_pool + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackPrediction {
    pub source: Detection,
    pub predicted_box: BBox,
    /// Predicted IoU between `predicted_box` and the true next-frame box.
    pub quality: f64,
}

/// Anything that can move a frame's boxes one step forward.
pub trait FrameTracker {
    /// Predicts where each of `boxes` (all from `frame`) will be in the next frame.
    fn predict(&mut self, frame: usize, boxes: &[Detection]) -> Result<Vec<TrackPrediction>>;
}

impl<F> FrameTracker for F
where
    F: FnMut(usize, &[Detection]) -> Result<Vec<TrackPrediction>>,
{
    fn predict(&mut self, frame: usize, boxes: &[Detection]) -> Result<Vec<TrackPrediction>> {
        self(frame, boxes)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Intermediate shapes of one forward pass, `(C, H, W)` each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadTrace {
    pub template: (usize, usize, usize),
    pub search: (usize, usize, usize),
    pub correlation: (usize, usize, usize),
    pub head: (usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub delta: RegressionDelta,
    pub logit: f64,
    pub trace: HeadTrace,
}

/// Features of both frames already fused onto one stride.
pub struct FusedPair {
    pub template: Tensor3,
    pub search: Tensor3,
    pub stride: u32,
}

impl FusedPair {
    pub fn new(feat_t: &FeaturePyramid, feat_t1: &FeaturePyramid, cfg: &TrackerConfig) -> Result<Self> {
        if (feat_t.image_height(), feat_t.image_width()) != (feat_t1.image_height(), feat_t1.image_width()) {
            return Err(Error::Shape("feature pyramids come from different image sizes".into()));
        }
        if feat_t.strides() != feat_t1.strides() {
            return Err(Error::Shape("feature pyramids have different strides".into()));
        }
        let stride = cfg.fuse_stride.unwrap_or_else(|| feat_t.finest_stride());
        Ok(Self { template: fuse_pyramid(feat_t, stride)?, search: fuse_pyramid(feat_t1, stride)?, stride })
    }
}

/// Correlation map for one box, before the post-correlation block.
pub fn correlation_map(
    pair: &FusedPair,
    bbox: &BBox,
    w: &TrackerWeights,
    cfg: &TrackerConfig,
) -> Result<(Tensor3, Tensor3, Tensor3)> {
    let stride = pair.stride as f64;
    let search_roi = geometry::expand(bbox, cfg.k)?;
    let template = roi_align_full_avg(&pair.template, bbox, cfg.template_pool, cfg.template_pool, stride)?;
    let search = roi_align_full_avg(&pair.search, &search_roi, cfg.search_pool, cfg.search_pool, stride)?;
    let template = conv_block(&template, &w.pre_template)?;
    let search = conv_block(&search, w.pre_search.as_ref().unwrap_or(&w.pre_template))?;
    let corr = depthwise_correlate(&template, &search)?;
    Ok((template, search, corr))
}

/// Full head forward pass for a single box.
pub fn forward_box(pair: &FusedPair, bbox: &BBox, w: &TrackerWeights, cfg: &TrackerConfig) -> Result<HeadOutput> {
    let (template, search, corr) = correlation_map(pair, bbox, w, cfg)?;
    let adjusted = conv_block(&corr, &w.post)?;
    let mut head = w.head.forward(&adjusted)?;
    relu_in_place(&mut head);
    let flat = head.data();
    let d = w.fc_box.forward(flat)?;
    let logit = w.fc_score.forward(flat)?[0];
    Ok(HeadOutput {
        delta: RegressionDelta::new(d[0], d[1], d[2], d[3])?,
        logit,
        trace: HeadTrace {
            template: template.shape(),
            search: search.shape(),
            correlation: corr.shape(),
            head: head.shape(),
        },
    })
}

/// Runs the head for every box of frame `t`, predicting its frame `t + tau` box.
pub fn track(
    feat_t: &FeaturePyramid,
    feat_t1: &FeaturePyramid,
    boxes: &[Detection],
    w: &TrackerWeights,
    cfg: &TrackerConfig,
) -> Result<Vec<TrackPrediction>> {
    cfg.validate()?;
    if boxes.is_empty() {
        return Ok(Vec::new());
    }
    let pair = FusedPair::new(feat_t, feat_t1, cfg)?;
    w.check_compatible(pair.template.channels(), cfg)?;
    boxes
        .iter()
        .map(|det| {
            let out = forward_box(&pair, &det.bbox, w, cfg)?;
            Ok(TrackPrediction {
                source: det.clone(),
                predicted_box: geometry::decode(&det.bbox, &out.delta)?,
                quality: sigmoid(out.logit),
            })
        })
        .collect()
}

/// Regression and IoU-score targets for one training pair.
pub fn tracking_targets(b_t: &BBox, g_t1: &BBox, p_t1: &BBox) -> Result<(RegressionDelta, f64)> {
    if !p_t1.has_positive_area() {
        return Err(Error::Domain("predicted box must have positive area".into()));
    }
    Ok((geometry::encode(b_t, g_t1)?, iou(p_t1, g_t1)))
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Smooth-L1 summed over the four delta residuals and the score residual.
pub fn tracking_loss(pred: &(RegressionDelta, f64), target: &(RegressionDelta, f64)) -> f64 {
    let box_loss: f64 = pred.0.to_array().iter().zip(target.0.to_array()).map(|(p, t)| smooth_l1(p - t)).sum();
    box_loss + smooth_l1(pred.1 - target.1)
}
