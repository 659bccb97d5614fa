//! Per-frame fusion of detector output and tracker predictions.
//!
//! Each step tracks the previous frame's confident boxes into the current
//! frame, drops low-quality and overlapping tracks, and then merges with the
//! current detections preferring the tracked box whenever the two overlap by
//! at least `T_merge` ("tracking first detection").

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detection::{Detection, Provenance, VideoDetectionSet};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::tracker::{FrameTracker, TrackPrediction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Minimum class score for a box to be tracked into the next frame.
    pub detect_to_track_score: f64,
    /// Tracks with a predicted IoU quality below this are dropped.
    pub track_quality_min: f64,
    /// NMS threshold among tracked boxes (keyed on quality).
    pub track_nms_iou: f64,
    /// Detections overlapping any tracked box at or above this are discarded.
    #[serde(rename = "T_merge")]
    pub t_merge: f64,
    pub final_score_min: f64,
    pub final_nms_iou: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            detect_to_track_score: 0.03,
            track_quality_min: 0.5,
            track_nms_iou: 0.7,
            t_merge: 0.7,
            final_score_min: 0.03,
            final_nms_iou: 0.45,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("detect_to_track_score", self.detect_to_track_score),
            ("track_quality_min", self.track_quality_min),
            ("track_nms_iou", self.track_nms_iou),
            ("T_merge", self.t_merge),
            ("final_score_min", self.final_score_min),
            ("final_nms_iou", self.final_nms_iou),
        ];
        for (name, v) in fields {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines; keys are the field names above.
    pub fn from_config_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_config_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_config_string(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }
}

/// Greedy NMS. Returns kept indices, highest key first; equal keys keep input order.
pub fn nms_indices<T>(items: &[T], iou_thresh: f64, bbox: impl Fn(&T) -> BBox, key: impl Fn(&T) -> f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| key(&items[b]).total_cmp(&key(&items[a])));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let bi = bbox(&items[i]);
        if kept.iter().all(|&k| iou(&bbox(&items[k]), &bi) <= iou_thresh) {
            kept.push(i);
        }
    }
    kept
}

/// Class-agnostic NMS on detection score.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    nms_indices(dets, iou_thresh, |d| d.bbox, |d| d.score).into_iter().map(|i| dets[i].clone()).collect()
}

/// NMS run separately per class; output keeps the input order of survivors.
pub fn nms_per_class(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut keep = vec![false; dets.len()];
    let mut classes: Vec<u32> = dets.iter().map(|d| d.class).collect();
    classes.sort_unstable();
    classes.dedup();
    for class in classes {
        let idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class == class).collect();
        for k in nms_indices(&idx, iou_thresh, |&i| dets[i].bbox, |&i| dets[i].score) {
            keep[idx[k]] = true;
        }
    }
    dets.iter().zip(keep).filter(|(_, k)| *k).map(|(d, _)| d.clone()).collect()
}

fn tracked_detection(p: &TrackPrediction) -> Detection {
    Detection {
        frame: p.source.frame + 1,
        class: p.source.class,
        score: p.source.score,
        bbox: p.predicted_box,
        track: p.source.track,
        provenance: Some(Provenance::Tracked),
    }
}

/// Indices of the predictions surviving the quality filter and quality-keyed NMS.
pub fn filter_track_indices(preds: &[TrackPrediction], cfg: &PipelineConfig) -> Vec<usize> {
    let passing: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].quality >= cfg.track_quality_min).collect();
    nms_indices(&passing, cfg.track_nms_iou, |&i| preds[i].predicted_box, |&i| preds[i].quality)
        .into_iter()
        .map(|k| passing[k])
        .collect()
}

/// Turns surviving predictions into tracked detections for the next frame.
pub fn filter_tracks(preds: &[TrackPrediction], cfg: &PipelineConfig) -> Vec<Detection> {
    filter_track_indices(preds, cfg).into_iter().map(|i| tracked_detection(&preds[i])).collect()
}

/// Which detections survive the tracking-first merge: those whose IoU with
/// every tracked box is below `t_merge`.
pub fn tfd_keep_mask(tracked: &[Detection], detected: &[Detection], t_merge: f64) -> Vec<bool> {
    detected.iter().map(|d| tracked.iter().all(|t| iou(&t.bbox, &d.bbox) < t_merge)).collect()
}

/// Monotonic track-id source.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrackIds {
    next: u64,
}

impl TrackIds {
    pub fn starting_at(next: u64) -> Self {
        Self { next }
    }

    pub fn fresh(&mut self) -> u64 {
        let id = self.next;
        self.next += 1;
        id
    }

    pub fn peek(&self) -> u64 {
        self.next
    }
}

/// Keeps every tracked box and the detections that do not duplicate one.
/// Kept detections (and any tracked box without an id) get fresh track ids.
pub fn tfd_merge(
    tracked: &[Detection],
    detected: &[Detection],
    cfg: &PipelineConfig,
    ids: &mut TrackIds,
) -> Vec<Detection> {
    let mask = tfd_keep_mask(tracked, detected, cfg.t_merge);
    let mut out: Vec<Detection> = tracked
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.provenance = Some(Provenance::Tracked);
            if t.track.is_none() {
                t.track = Some(ids.fresh());
            }
            t
        })
        .collect();
    for (d, keep) in detected.iter().zip(mask) {
        if keep {
            let mut d = d.clone();
            d.track = Some(ids.fresh());
            d.provenance = Some(Provenance::Detected);
            out.push(d);
        }
    }
    out
}

/// What an emitted box was derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    /// Index into the frame's input detections.
    Detected(usize),
    /// Index into the previous frame's emitted boxes.
    Tracked(usize),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameState {
    /// `None` before the first frame.
    pub frame: Option<usize>,
    pub emitted: Vec<Detection>,
    pub origins: Vec<Origin>,
    /// Tracker output for the previous frame's emitted boxes, aligned with them
    /// (`None` where a box was not confident enough to track).
    pub prev_predictions: Vec<Option<TrackPrediction>>,
    pub ids: TrackIds,
}

impl FrameState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tracks(&self) -> impl Iterator<Item = (u64, &Detection)> {
        self.emitted.iter().filter_map(|d| d.track.map(|id| (id, d)))
    }
}

/// Advances the pipeline by one frame.
pub fn step(
    state: &FrameState,
    detections: &[Detection],
    tracker: &mut dyn FrameTracker,
    cfg: &PipelineConfig,
) -> Result<FrameState> {
    let frame = state.frame.map_or(0, |f| f + 1);
    if let Some(d) = detections.iter().find(|d| d.frame != frame) {
        return Err(Error::Argument(format!(
            "step expects detections of frame {frame}, got one from frame {}",
            d.frame
        )));
    }

    let candidate_idx: Vec<usize> =
        (0..state.emitted.len()).filter(|&i| state.emitted[i].score >= cfg.detect_to_track_score).collect();
    let mut prev_predictions = vec![None; state.emitted.len()];
    let mut tracked = Vec::new();
    let mut tracked_origin = Vec::new();
    if let (Some(prev), false) = (state.frame, candidate_idx.is_empty()) {
        let candidates: Vec<Detection> = candidate_idx.iter().map(|&i| state.emitted[i].clone()).collect();
        let preds = tracker.predict(prev, &candidates)?;
        if preds.len() != candidates.len() {
            return Err(Error::Argument(format!(
                "tracker returned {} predictions for {} boxes",
                preds.len(),
                candidates.len()
            )));
        }
        for k in filter_track_indices(&preds, cfg) {
            tracked.push(tracked_detection(&preds[k]));
            tracked_origin.push(Origin::Tracked(candidate_idx[k]));
        }
        for (k, p) in preds.into_iter().enumerate() {
            prev_predictions[candidate_idx[k]] = Some(p);
        }
    }

    let det_idx: Vec<usize> =
        (0..detections.len()).filter(|&i| detections[i].score >= cfg.detect_to_track_score).collect();
    let detected: Vec<Detection> = det_idx.iter().map(|&i| detections[i].clone()).collect();
    let mut ids = state.ids.clone();
    let mask = tfd_keep_mask(&tracked, &detected, cfg.t_merge);
    let emitted = tfd_merge(&tracked, &detected, cfg, &mut ids);
    let origins = tracked_origin
        .into_iter()
        .chain(det_idx.iter().zip(&mask).filter(|(_, k)| **k).map(|(&i, _)| Origin::Detected(i)))
        .collect();

    Ok(FrameState { frame: Some(frame), emitted, origins, prev_predictions, ids })
}

/// Pipeline output for a whole video.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRun {
    pub merged: VideoDetectionSet,
    /// `predictions[t][i]`: tracker output for `merged.frames[t][i]`, if it was tracked.
    pub predictions: Vec<Vec<Option<TrackPrediction>>>,
}

impl PipelineRun {
    /// Predicted next-frame boxes aligned with `merged`, falling back to the
    /// box itself where no prediction exists.
    pub fn link_predictions(&self) -> Vec<Vec<BBox>> {
        self.merged
            .frames
            .iter()
            .zip(&self.predictions)
            .map(|(dets, preds)| {
                dets.iter().zip(preds).map(|(d, p)| p.as_ref().map_or(d.bbox, |p| p.predicted_box)).collect()
            })
            .collect()
    }
}

/// Runs [`step`] over every frame of `dets`. Boxes of the last frame have no
/// successor and therefore no prediction.
pub fn run_video(
    dets: &VideoDetectionSet,
    num_frames: usize,
    tracker: &mut dyn FrameTracker,
    cfg: &PipelineConfig,
) -> Result<PipelineRun> {
    cfg.validate()?;
    let num_frames = num_frames.max(dets.num_frames());
    let mut merged = VideoDetectionSet::new(dets.video.clone(), num_frames);
    let mut predictions: Vec<Vec<Option<TrackPrediction>>> = vec![Vec::new(); num_frames];
    let mut state = FrameState::new();
    let empty = Vec::new();
    for t in 0..num_frames {
        let frame_dets = dets.frames.get(t).unwrap_or(&empty);
        state = step(&state, frame_dets, tracker, cfg)?;
        if t > 0 {
            predictions[t - 1] = std::mem::take(&mut state.prev_predictions);
        }
        merged.frames[t] = state.emitted.clone();
    }
    if let Some(last) = num_frames.checked_sub(1) {
        predictions[last] = vec![None; merged.frames[last].len()];
    }
    Ok(PipelineRun { merged, predictions })
}

/// Final score threshold and per-class NMS, frame by frame.
pub fn finalize(video: &VideoDetectionSet, cfg: &PipelineConfig) -> VideoDetectionSet {
    VideoDetectionSet {
        video: video.video.clone(),
        frames: video
            .frames
            .iter()
            .map(|f| {
                let passing: Vec<Detection> = f.iter().filter(|d| d.score >= cfg.final_score_min).cloned().collect();
                nms_per_class(&passing, cfg.final_nms_iou)
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(frame: usize, score: f64, c: [f64; 4]) -> Detection {
        Detection::new(frame, 1, score, BBox::try_from(c).unwrap())
    }

    fn pred(src: Detection, b: [f64; 4], quality: f64) -> TrackPrediction {
        TrackPrediction { source: src, predicted_box: BBox::try_from(b).unwrap(), quality }
    }

    #[test]
    fn nms_examples() {
        let a = det(0, 0.9, [0.0, 0.0, 10.0, 10.0]);
        let b = det(0, 0.8, [0.0, 0.0, 10.0, 10.0]);
        assert_eq!(nms(&[b.clone(), a.clone()], 0.45), vec![a.clone()]);

        let far = det(0, 0.95, [50.0, 50.0, 60.0, 60.0]);
        let kept = nms(&[b.clone(), far.clone()], 0.45);
        assert_eq!(kept, vec![far, b]);
    }

    #[test]
    fn nms_ties_keep_input_order() {
        let a = det(0, 0.5, [0.0, 0.0, 10.0, 10.0]);
        let mut b = a.clone();
        b.class = 2;
        assert_eq!(nms_indices(&[a, b], 0.5, |d| d.bbox, |d| d.score), vec![0]);
    }

    #[test]
    fn nms_per_class_ignores_other_classes() {
        let a = det(0, 0.9, [0.0, 0.0, 10.0, 10.0]);
        let mut b = det(0, 0.8, [0.0, 0.0, 10.0, 10.0]);
        b.class = 2;
        let c = det(0, 0.7, [1.0, 0.0, 10.0, 10.0]);
        assert_eq!(nms_per_class(&[a.clone(), b.clone(), c], 0.45), vec![a, b]);
    }

    #[test]
    fn filter_tracks_examples() {
        let src = det(3, 0.6, [0.0, 0.0, 10.0, 10.0]).with_track(4);
        assert!(filter_tracks(&[pred(src.clone(), [0.0, 0.0, 10.0, 10.0], 0.4)], &PipelineConfig::default()).is_empty());
        assert!(filter_tracks(&[], &PipelineConfig::default()).is_empty());

        // IoU([0,0,10,10], [0,0,10,12.5]) = 0.8
        let src2 = det(3, 0.3, [20.0, 0.0, 30.0, 10.0]).with_track(5);
        let out = filter_tracks(
            &[pred(src2, [0.0, 0.0, 10.0, 12.5], 0.8), pred(src.clone(), [0.0, 0.0, 10.0, 10.0], 0.9)],
            &PipelineConfig::default(),
        );
        assert_eq!(out.len(), 1);
        let t = &out[0];
        assert_eq!((t.frame, t.class, t.score, t.track), (4, 1, 0.6, Some(4)));
        assert_eq!(t.provenance, Some(Provenance::Tracked));
    }

    #[test]
    fn tfd_merge_examples() {
        let cfg = PipelineConfig::default();
        let tracked = vec![det(1, 0.5, [0.0, 0.0, 10.0, 10.0]).with_track(0)];
        // IoU 0.8 -> discarded
        let dup = det(1, 0.99, [0.0, 0.0, 10.0, 12.5]);
        let mut ids = TrackIds::starting_at(1);
        let out = tfd_merge(&tracked, &[dup], &cfg, &mut ids);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].track, Some(0));
        // IoU 0.6 -> both kept
        let near = det(1, 0.99, [0.0, 0.0, 10.0, 6.0]);
        let out = tfd_merge(&tracked, &[near], &cfg, &mut ids);
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].track, Some(1));
        assert_eq!(out[1].provenance, Some(Provenance::Detected));
        // nothing tracked -> every detection kept
        let dets = vec![det(1, 0.2, [0.0, 0.0, 1.0, 1.0]), det(1, 0.3, [0.0, 0.0, 1.0, 1.0])];
        let out = tfd_merge(&[], &dets, &cfg, &mut ids);
        assert_eq!(out.len(), 2);
        assert_eq!(ids.peek(), 4);
    }

    #[test]
    fn first_frame_emits_thresholded_detections() {
        let cfg = PipelineConfig::default();
        let dets = vec![det(0, 0.5, [0.0, 0.0, 5.0, 5.0]), det(0, 0.01, [9.0, 9.0, 15.0, 15.0])];
        let mut never = |_: usize, _: &[Detection]| -> Result<Vec<TrackPrediction>> { panic!("no previous frame") };
        let s = step(&FrameState::new(), &dets, &mut never, &cfg).unwrap();
        assert_eq!(s.frame, Some(0));
        assert_eq!(s.emitted.len(), 1);
        assert_eq!(s.emitted[0].track, Some(0));
        assert_eq!(s.origins, vec![Origin::Detected(0)]);
    }

    #[test]
    fn zero_quality_tracker_degenerates_to_detection() {
        let cfg = PipelineConfig::default();
        let mut zero = |_: usize, b: &[Detection]| -> Result<Vec<TrackPrediction>> {
            Ok(b.iter().map(|d| pred(d.clone(), d.bbox.corners(), 0.0)).collect())
        };
        let mut s = FrameState::new();
        for t in 0..4 {
            let dets = vec![det(t, 0.5, [t as f64, 0.0, 10.0 + t as f64, 10.0])];
            s = step(&s, &dets, &mut zero, &cfg).unwrap();
            assert_eq!(s.emitted.len(), 1);
            assert_eq!(s.origins, vec![Origin::Detected(0)]);
            assert_eq!(s.emitted[0].track, Some(t as u64));
        }
    }

    #[test]
    fn step_rejects_wrong_frame() {
        let mut zero = |_: usize, _: &[Detection]| -> Result<Vec<TrackPrediction>> { Ok(vec![]) };
        let r = step(&FrameState::new(), &[det(2, 0.5, [0.0, 0.0, 1.0, 1.0])], &mut zero, &PipelineConfig::default());
        assert!(r.is_err());
    }

    #[test]
    fn config_file_parsing() {
        let cfg = PipelineConfig::from_config_str("T_merge = 0.3\nfinal_nms_iou = 0.5\n").unwrap();
        assert_eq!(cfg.t_merge, 0.3);
        assert_eq!(cfg.final_nms_iou, 0.5);
        assert_eq!(cfg.track_quality_min, 0.5);
        assert!(PipelineConfig::from_config_str("t_merge = 0.3").is_err());
        assert!(PipelineConfig::from_config_str("T_merge = 1.3").is_err());
        let back = PipelineConfig::from_config_str(&cfg.to_config_string()).unwrap();
        assert_eq!(back, cfg);
    }
}
