//! Ground-truth driven stand-in for the learned head, so the merge and
//! linking stages can be exercised without trained weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{FrameTracker, TrackPrediction};
use crate::detection::{Detection, VideoDetectionSet};
use crate::error::Result;
use crate::geometry::{iou, BBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleNoise {
    /// Std-dev of the center error, as a fraction of the true box size.
    pub center_sigma: f64,
    /// Std-dev of the log-size error.
    pub scale_sigma: f64,
    /// Minimum IoU for a box to be associated with a ground-truth object.
    pub match_iou: f64,
    /// Unmatched boxes get a quality drawn from `[0, unmatched_quality_max)`.
    pub unmatched_quality_max: f64,
}

impl Default for OracleNoise {
    fn default() -> Self {
        Self { center_sigma: 0.0, scale_sigma: 0.0, match_iou: 0.5, unmatched_quality_max: 0.45 }
    }
}

impl OracleNoise {
    pub fn with_sigma(center_sigma: f64, scale_sigma: f64) -> Self {
        Self { center_sigma, scale_sigma, ..Self::default() }
    }
}

/// Predicts the next-frame ground truth of whichever object each box overlaps.
///
/// A box matched (IoU >= `match_iou`, class-agnostic) to a ground-truth object
/// that is still alive in `gt_next` gets that object's next box, perturbed by
/// `noise`, with quality equal to the IoU of the perturbed and true boxes.
/// Anything else keeps its own box and receives a quality below
/// `unmatched_quality_max`.
pub fn oracle_track(
    boxes: &[Detection],
    gt_now: &[Detection],
    gt_next: &[Detection],
    noise: &OracleNoise,
    seed: u64,
) -> Vec<TrackPrediction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    boxes
        .iter()
        .map(|det| {
            let mut best: Option<(f64, u64)> = None;
            for g in gt_now {
                let Some(id) = g.track else { continue };
                let o = iou(&det.bbox, &g.bbox);
                if o >= noise.match_iou && best.is_none_or(|(b, _)| o > b) {
                    best = Some((o, id));
                }
            }
            let next = best.and_then(|(_, id)| gt_next.iter().find(|g| g.track == Some(id)));
            // Draw the same number of variates on every path so one box's
            // outcome does not shift the stream for the boxes after it.
            let z = [unit.sample(&mut rng), unit.sample(&mut rng), unit.sample(&mut rng), unit.sample(&mut rng)];
            let u: f64 = rng.random();
            match next {
                Some(truth) => {
                    let t = &truth.bbox;
                    let predicted = BBox::from_center(
                        t.cx() + noise.center_sigma * t.width() * z[0],
                        t.cy() + noise.center_sigma * t.height() * z[1],
                        t.width() * (noise.scale_sigma * z[2]).exp(),
                        t.height() * (noise.scale_sigma * z[3]).exp(),
                    )
                    .unwrap_or(*t);
                    TrackPrediction { source: det.clone(), predicted_box: predicted, quality: iou(&predicted, t) }
                }
                None => TrackPrediction {
                    source: det.clone(),
                    predicted_box: det.bbox,
                    quality: u * noise.unmatched_quality_max,
                },
            }
        })
        .collect()
}

fn mix(seed: u64, frame: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// [`oracle_track`] over a whole video, seeded per frame.
#[derive(Debug, Clone)]
pub struct OracleTracker {
    gt: VideoDetectionSet,
    noise: OracleNoise,
    seed: u64,
}

impl OracleTracker {
    pub fn new(gt: VideoDetectionSet, noise: OracleNoise, seed: u64) -> Self {
        Self { gt, noise, seed }
    }
}

impl FrameTracker for OracleTracker {
    fn predict(&mut self, frame: usize, boxes: &[Detection]) -> Result<Vec<TrackPrediction>> {
        let empty = Vec::new();
        let now = self.gt.frames.get(frame).unwrap_or(&empty);
        let next = self.gt.frames.get(frame + 1).unwrap_or(&empty);
        Ok(oracle_track(boxes, now, next, &self.noise, mix(self.seed, frame)))
    }
}
