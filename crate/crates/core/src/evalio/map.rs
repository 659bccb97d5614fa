//! Per-class average precision and mAP.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::detection::VideoDetectionSet;
use crate::geometry::iou;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub ap: f64,
    pub num_gt: usize,
    pub num_pred: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Classes with at least one ground-truth instance.
    pub per_class: BTreeMap<u32, ClassAp>,
    pub map: f64,
    pub iou_thresh: f64,
}

impl fmt::Display for EvalResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>6} {:>8} {:>8} {:>8}", "class", "gt", "preds", "AP")?;
        for (c, a) in &self.per_class {
            writeln!(f, "{c:>6} {:>8} {:>8} {:>8.4}", a.num_gt, a.num_pred, a.ap)?;
        }
        write!(f, "mAP@{} = {:.6}", self.iou_thresh, self.map)
    }
}

/// All-point interpolated AP from a ranked TP/FP sequence: area under the
/// monotone precision envelope as a function of recall.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ap
}

/// Evaluates `preds` against `gt`, matching videos by id.
///
/// Predictions of a class are pooled across videos and ranked by score (ties
/// keep file order). Each is matched to the highest-IoU ground truth of the
/// same video, frame and class that is not yet matched, if that IoU reaches
/// `iou_thresh`.
pub fn evaluate_map(preds: &[VideoDetectionSet], gt: &[VideoDetectionSet], iou_thresh: f64) -> EvalResult {
    let gt_by_video: HashMap<&str, &VideoDetectionSet> = gt.iter().map(|v| (v.video.as_str(), v)).collect();

    let mut num_gt: BTreeMap<u32, usize> = BTreeMap::new();
    for d in gt.iter().flat_map(|v| v.iter()) {
        *num_gt.entry(d.class).or_default() += 1;
    }

    let mut ranked: BTreeMap<u32, Vec<(&str, &crate::detection::Detection)>> = BTreeMap::new();
    for v in preds {
        for d in v.iter() {
            ranked.entry(d.class).or_default().push((v.video.as_str(), d));
        }
    }

    let mut per_class = BTreeMap::new();
    for (&class, &n_gt) in &num_gt {
        let mut list = ranked.remove(&class).unwrap_or_default();
        list.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        let mut matched: HashMap<(&str, usize, usize), ()> = HashMap::new();
        let tp: Vec<bool> = list
            .iter()
            .map(|&(video, d)| {
                let Some(frame) = gt_by_video.get(video).and_then(|g| g.frames.get(d.frame)) else {
                    return false;
                };
                let mut best: Option<(f64, usize)> = None;
                for (j, g) in frame.iter().enumerate() {
                    if g.class != class || matched.contains_key(&(video, d.frame, j)) {
                        continue;
                    }
                    let o = iou(&d.bbox, &g.bbox);
                    if o >= iou_thresh && best.is_none_or(|(b, _)| o > b) {
                        best = Some((o, j));
                    }
                }
                match best {
                    Some((_, j)) => {
                        matched.insert((video, d.frame, j), ());
                        true
                    }
                    None => false,
                }
            })
            .collect();
        per_class.insert(class, ClassAp { ap: average_precision(&tp, n_gt), num_gt: n_gt, num_pred: list.len() });
    }

    let map =
        if per_class.is_empty() { 0.0 } else { per_class.values().map(|c| c.ap).sum::<f64>() / per_class.len() as f64 };
    EvalResult { per_class, map, iou_thresh }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::Detection;
    use crate::geometry::BBox;

    fn det(frame: usize, class: u32, score: f64, x: f64) -> Detection {
        Detection::new(frame, class, score, BBox::new(x, 0.0, x + 10.0, 10.0).unwrap())
    }

    #[test]
    fn tp_fp_tp() {
        let ap = average_precision(&[true, false, true], 2);
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_empty() {
        let mut gt = VideoDetectionSet::new("v", 2);
        gt.push(det(0, 0, 1.0, 0.0));
        gt.push(det(1, 1, 1.0, 50.0));
        let r = evaluate_map(std::slice::from_ref(&gt), std::slice::from_ref(&gt), 0.5);
        assert_eq!(r.map, 1.0);
        let r = evaluate_map(&[], std::slice::from_ref(&gt), 0.5);
        assert_eq!(r.map, 0.0);
        assert_eq!(r.per_class.len(), 2);
        assert_eq!(evaluate_map(&[gt], &[], 0.5).map, 0.0);
    }

    #[test]
    fn duplicates_are_false_positives() {
        let mut gt = VideoDetectionSet::new("v", 1);
        gt.push(det(0, 0, 1.0, 0.0));
        let mut p = VideoDetectionSet::new("v", 1);
        p.push(det(0, 0, 0.9, 0.0));
        p.push(det(0, 0, 0.8, 1.0));
        let r = evaluate_map(&[p], &[gt], 0.5);
        assert_eq!(r.per_class[&0].ap, 1.0);
    }

    #[test]
    fn highest_iou_ground_truth_is_taken() {
        let mut gt = VideoDetectionSet::new("v", 1);
        gt.push(det(0, 0, 1.0, 0.0));
        gt.push(det(0, 0, 1.0, 4.0));
        let mut p = VideoDetectionSet::new("v", 1);
        p.push(det(0, 0, 0.9, 2.5)); // overlaps both, the second more
        p.push(det(0, 0, 0.8, 0.5));
        let r = evaluate_map(&[p], &[gt], 0.5);
        assert_eq!(r.per_class[&0].ap, 1.0);
    }

    #[test]
    fn wrong_video_does_not_match() {
        let mut gt = VideoDetectionSet::new("v", 1);
        gt.push(det(0, 0, 1.0, 0.0));
        let mut p = VideoDetectionSet::new("w", 1);
        p.push(det(0, 0, 0.9, 0.0));
        assert_eq!(evaluate_map(&[p], &[gt], 0.5).map, 0.0);
    }
}
