//! Whole-video tubelet linking and re-scoring.
//!
//! Detections in consecutive frames are linked when they share a class and
//! satisfy an overlap constraint. The maximum-score path through the resulting
//! frame-layered DAG is extracted, its members are re-scored to the path mean,
//! same-class boxes overlapping a member in its frame are suppressed, and the
//! process repeats until no detection is left.
//!
//! Two constraints are supported:
//! * `SeqNms`: `iou(b_t, b_t+1) > link_iou`;
//! * `SeqTrack`: `iou(p_t+1, b_t+1) > link_iou`, where `p_t+1` is the tracker's
//!   prediction for `b_t`. This keeps links alive under large displacement.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::detection::VideoDetectionSet;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkMode {
    SeqNms,
    SeqTrack,
}

impl std::str::FromStr for LinkMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seqnms" => Ok(LinkMode::SeqNms),
            "seqtrack" | "seqtracknms" => Ok(LinkMode::SeqTrack),
            other => Err(Error::Argument(format!("unknown link mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkConfig {
    /// Links require overlap strictly above this.
    pub link_iou: f64,
    /// Same-class boxes overlapping a path member above this are removed.
    pub nms_iou: f64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self { link_iou: 0.5, nms_iou: 0.45 }
    }
}

/// Frame-layered DAG over a video's detections.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkGraph {
    /// Number of detections per frame; node `(t, i)` is `video.frames[t][i]`.
    pub frame_sizes: Vec<usize>,
    /// `edges[t][i]`: nodes of frame `t + 1` linked from `(t, i)`, ascending.
    pub edges: Vec<Vec<Vec<usize>>>,
    pub mode: LinkMode,
    pub link_iou: f64,
}

impl LinkGraph {
    pub fn num_nodes(&self) -> usize {
        self.frame_sizes.iter().sum()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.iter().flatten().map(Vec::len).sum()
    }

    pub fn has_edge(&self, t: usize, i: usize, j: usize) -> bool {
        self.edges.get(t).and_then(|f| f.get(i)).is_some_and(|e| e.binary_search(&j).is_ok())
    }
}

fn build(video: &VideoDetectionSet, mode: LinkMode, link_iou: f64, source: impl Fn(usize, usize) -> BBox) -> LinkGraph {
    let frames = &video.frames;
    let mut edges = Vec::with_capacity(frames.len());
    for t in 0..frames.len() {
        let next = frames.get(t + 1);
        let per_node = frames[t]
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let Some(next) = next else { return Vec::new() };
                let from = source(t, i);
                next.iter()
                    .enumerate()
                    .filter(|(_, n)| n.class == d.class && iou(&from, &n.bbox) > link_iou)
                    .map(|(j, _)| j)
                    .collect()
            })
            .collect();
        edges.push(per_node);
    }
    LinkGraph { frame_sizes: frames.iter().map(Vec::len).collect(), edges, mode, link_iou }
}

/// Links same-class boxes of consecutive frames whose IoU exceeds `link_iou`.
pub fn build_graph_seqnms(video: &VideoDetectionSet, link_iou: f64) -> LinkGraph {
    build(video, LinkMode::SeqNms, link_iou, |t, i| video.frames[t][i].bbox)
}

/// Links `(t, i)` to `(t + 1, j)` when the tracker's prediction for `(t, i)`
/// overlaps box `j` by more than `link_iou`. `preds[t]` must align with
/// `video.frames[t]` for every frame that has a successor.
pub fn build_graph_seqtrack(video: &VideoDetectionSet, preds: &[Vec<BBox>], link_iou: f64) -> Result<LinkGraph> {
    for t in 0..video.frames.len().saturating_sub(1) {
        let got = preds.get(t).map_or(0, Vec::len);
        if got != video.frames[t].len() {
            return Err(Error::Shape(format!(
                "frame {t} has {} detections but {got} predictions",
                video.frames[t].len()
            )));
        }
    }
    Ok(build(video, LinkMode::SeqTrack, link_iou, |t, i| preds[t][i]))
}

/// A linked chain of detections over consecutive frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Tubelet {
    pub start_frame: usize,
    /// Detection index within each frame, starting at `start_frame`.
    pub nodes: Vec<usize>,
    /// Sum of member scores, accumulated front to back.
    pub score: f64,
}

impl Tubelet {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn rescored(&self) -> f64 {
        self.score / self.nodes.len() as f64
    }

    pub fn members(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.nodes.iter().enumerate().map(|(k, &i)| (self.start_frame + k, i))
    }
}

/// Total order on candidate paths: higher score, then earlier start, then
/// lexicographically smaller node sequence. `Less` means "better".
pub fn compare_paths(
    a_score: f64,
    a_start: usize,
    a_nodes: &[usize],
    b_score: f64,
    b_start: usize,
    b_nodes: &[usize],
) -> Ordering {
    b_score.total_cmp(&a_score).then(a_start.cmp(&b_start)).then_with(|| a_nodes.cmp(b_nodes))
}

#[derive(Clone, Copy)]
struct Cell {
    score: f64,
    start: usize,
    prev: Option<usize>,
}

fn trace(cells: &[Vec<Option<Cell>>], t: usize, i: usize) -> Vec<usize> {
    let mut nodes = vec![i];
    let (mut t, mut i) = (t, i);
    while let Some(p) = cells[t][i].and_then(|c| c.prev) {
        t -= 1;
        i = p;
        nodes.push(i);
    }
    nodes.reverse();
    nodes
}

/// Maximum-score path over the `alive` nodes, by dynamic programming over
/// frames. Returns `None` when no node is alive.
pub fn best_path_masked(graph: &LinkGraph, scores: &[Vec<f64>], alive: &[Vec<bool>]) -> Option<Tubelet> {
    let frames = graph.frame_sizes.len();
    let mut cells: Vec<Vec<Option<Cell>>> = graph.frame_sizes.iter().map(|&n| vec![None; n]).collect();
    let mut best: Option<(usize, usize)> = None;

    for t in 0..frames {
        for i in 0..graph.frame_sizes[t] {
            if !alive[t][i] {
                continue;
            }
            let s = scores[t][i];
            let mut cell = Cell { score: s, start: t, prev: None };
            if t > 0 {
                for p in 0..graph.frame_sizes[t - 1] {
                    let Some(pc) = cells[t - 1][p] else { continue };
                    if !graph.edges[t - 1][p].contains(&i) {
                        continue;
                    }
                    let cand = Cell { score: pc.score + s, start: pc.start, prev: Some(p) };
                    let ord = cand.score.total_cmp(&cell.score).reverse().then(cand.start.cmp(&cell.start));
                    let better = match ord {
                        Ordering::Less => true,
                        Ordering::Greater => false,
                        Ordering::Equal => {
                            // exact tie: same start frame, so compare node sequences
                            cells[t][i] = Some(cell);
                            let current = trace(&cells, t, i);
                            cells[t][i] = Some(cand);
                            let challenger = trace(&cells, t, i);
                            challenger < current
                        }
                    };
                    if better {
                        cell = cand;
                    }
                }
            }
            cells[t][i] = Some(cell);
            best = match best {
                None => Some((t, i)),
                Some((bt, bi)) => {
                    let bc = cells[bt][bi].expect("best cell is set");
                    let ord = compare_paths(
                        cell.score,
                        cell.start,
                        &trace(&cells, t, i),
                        bc.score,
                        bc.start,
                        &trace(&cells, bt, bi),
                    );
                    if ord == Ordering::Less {
                        Some((t, i))
                    } else {
                        Some((bt, bi))
                    }
                }
            };
        }
    }

    best.map(|(t, i)| {
        let c = cells[t][i].expect("best cell is set");
        Tubelet { start_frame: c.start, nodes: trace(&cells, t, i), score: c.score }
    })
}

pub fn best_path(graph: &LinkGraph, scores: &[Vec<f64>]) -> Option<Tubelet> {
    let alive: Vec<Vec<bool>> = graph.frame_sizes.iter().map(|&n| vec![true; n]).collect();
    best_path_masked(graph, scores, &alive)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rescored {
    pub video: VideoDetectionSet,
    /// Extracted paths in extraction order.
    pub tubelets: Vec<Tubelet>,
}

/// Repeatedly extracts the best path, re-scores its members to the path mean
/// and suppresses same-class overlaps in each member's frame.
pub fn rescore_and_suppress(video: &VideoDetectionSet, graph: &LinkGraph, nms_iou: f64) -> Result<Rescored> {
    if graph.frame_sizes.len() != video.frames.len()
        || graph.frame_sizes.iter().zip(&video.frames).any(|(n, f)| *n != f.len())
    {
        return Err(Error::Shape("link graph was built over a different video".into()));
    }
    let scores: Vec<Vec<f64>> = video.frames.iter().map(|f| f.iter().map(|d| d.score).collect()).collect();
    let mut alive: Vec<Vec<bool>> = video.frames.iter().map(|f| vec![true; f.len()]).collect();
    let mut new_score: Vec<Vec<Option<f64>>> = video.frames.iter().map(|f| vec![None; f.len()]).collect();
    let mut tubelets = Vec::new();

    while let Some(path) = best_path_masked(graph, &scores, &alive) {
        let mean = path.rescored();
        for (t, i) in path.members() {
            new_score[t][i] = Some(mean);
            alive[t][i] = false;
        }
        for (t, i) in path.members() {
            let member = &video.frames[t][i];
            for (j, other) in video.frames[t].iter().enumerate() {
                if alive[t][j] && other.class == member.class && iou(&member.bbox, &other.bbox) > nms_iou {
                    alive[t][j] = false;
                }
            }
        }
        tubelets.push(path);
    }

    let frames = video
        .frames
        .iter()
        .zip(&new_score)
        .map(|(dets, scores)| {
            dets.iter()
                .zip(scores)
                .filter_map(|(d, s)| {
                    s.map(|s| {
                        let mut d = d.clone();
                        d.score = s;
                        d
                    })
                })
                .collect()
        })
        .collect();
    Ok(Rescored { video: VideoDetectionSet { video: video.video.clone(), frames }, tubelets })
}

/// Builds the graph for `mode` and runs [`rescore_and_suppress`].
pub fn link_and_rescore(
    video: &VideoDetectionSet,
    mode: LinkMode,
    preds: Option<&[Vec<BBox>]>,
    cfg: &LinkConfig,
) -> Result<Rescored> {
    let graph = match mode {
        LinkMode::SeqNms => build_graph_seqnms(video, cfg.link_iou),
        LinkMode::SeqTrack => {
            let preds = preds.ok_or_else(|| Error::Argument("seqtrack linking needs tracker predictions".into()))?;
            build_graph_seqtrack(video, preds, cfg.link_iou)?
        }
    };
    rescore_and_suppress(video, &graph, cfg.nms_iou)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::Detection;

    fn d(frame: usize, class: u32, score: f64, c: [f64; 4]) -> Detection {
        Detection::new(frame, class, score, BBox::try_from(c).unwrap())
    }

    fn abc_video() -> VideoDetectionSet {
        let mut v = VideoDetectionSet::new("v", 3);
        v.push(d(0, 0, 0.9, [0.0, 0.0, 10.0, 10.0])); // A
        v.push(d(0, 0, 0.5, [20.0, 20.0, 30.0, 30.0])); // B
        v.push(d(1, 0, 0.4, [1.0, 1.0, 11.0, 11.0])); // C
        v.push(d(1, 0, 0.8, [21.0, 21.0, 31.0, 31.0])); // D
        v.push(d(2, 0, 0.7, [2.0, 2.0, 12.0, 12.0])); // E
        v
    }

    #[test]
    fn seqnms_edges() {
        let mut v = VideoDetectionSet::new("v", 2);
        v.push(d(0, 0, 0.5, [0.0, 0.0, 10.0, 10.0]));
        v.push(d(1, 0, 0.5, [1.0, 1.0, 11.0, 11.0]));
        v.push(d(1, 1, 0.5, [1.0, 1.0, 11.0, 11.0]));
        let g = build_graph_seqnms(&v, 0.5);
        assert!(g.has_edge(0, 0, 0));
        assert!(!g.has_edge(0, 0, 1));
        assert_eq!(g.num_edges(), 1);
    }

    #[test]
    fn seqnms_boundary_is_strict() {
        // [0,0,10,10] vs [0,0,10,20]: IoU exactly 0.5
        let mut v = VideoDetectionSet::new("v", 2);
        v.push(d(0, 0, 0.5, [0.0, 0.0, 10.0, 10.0]));
        v.push(d(1, 0, 0.5, [0.0, 0.0, 10.0, 20.0]));
        assert_eq!(build_graph_seqnms(&v, 0.5).num_edges(), 0);
    }

    #[test]
    fn seqtrack_links_fast_motion() {
        let mut v = VideoDetectionSet::new("v", 2);
        v.push(d(0, 0, 0.5, [0.0, 0.0, 10.0, 10.0]));
        v.push(d(1, 0, 0.5, [40.0, 0.0, 50.0, 10.0]));
        assert_eq!(build_graph_seqnms(&v, 0.5).num_edges(), 0);
        let preds = vec![vec![v.frames[1][0].bbox], vec![]];
        assert_eq!(build_graph_seqtrack(&v, &preds, 0.5).unwrap().num_edges(), 1);
        assert!(build_graph_seqtrack(&v, &[vec![]], 0.5).is_err());
    }

    #[test]
    fn identity_predictions_reduce_to_seqnms() {
        let v = abc_video();
        let preds: Vec<Vec<BBox>> = v.frames.iter().map(|f| f.iter().map(|x| x.bbox).collect()).collect();
        let a = build_graph_seqnms(&v, 0.5);
        let b = build_graph_seqtrack(&v, &preds, 0.5).unwrap();
        assert_eq!(a.edges, b.edges);
    }

    #[test]
    fn best_path_example() {
        let v = abc_video();
        let g = build_graph_seqnms(&v, 0.5);
        let scores: Vec<Vec<f64>> = v.frames.iter().map(|f| f.iter().map(|x| x.score).collect()).collect();
        let p = best_path(&g, &scores).unwrap();
        assert_eq!((p.start_frame, p.nodes.clone()), (0, vec![0, 0, 0]));
        assert!((p.score - 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_detection_is_its_own_path() {
        let mut v = VideoDetectionSet::new("v", 1);
        v.push(d(0, 0, 0.3, [0.0, 0.0, 1.0, 1.0]));
        let g = build_graph_seqnms(&v, 0.5);
        let p = best_path(&g, &[vec![0.3]]).unwrap();
        assert_eq!(p.nodes, vec![0]);
        assert!(best_path(&build_graph_seqnms(&VideoDetectionSet::new("e", 2), 0.5), &[vec![], vec![]]).is_none());
    }

    #[test]
    fn equal_scores_prefer_the_longer_chain() {
        let mut v = VideoDetectionSet::new("v", 2);
        v.push(d(0, 0, 0.5, [50.0, 50.0, 60.0, 60.0]));
        v.push(d(0, 0, 0.5, [0.0, 0.0, 10.0, 10.0]));
        v.push(d(1, 0, 0.5, [0.0, 0.0, 10.0, 10.0]));
        let g = build_graph_seqnms(&v, 0.5);
        let p = best_path(&g, &[vec![0.5, 0.5], vec![0.5]]).unwrap();
        assert_eq!(p.nodes, vec![1, 0]);
    }

    #[test]
    fn rescore_example() {
        let v = abc_video();
        let g = build_graph_seqnms(&v, 0.5);
        let r = rescore_and_suppress(&v, &g, 0.45).unwrap();
        let s: Vec<Vec<f64>> = r.video.frames.iter().map(|f| f.iter().map(|x| x.score).collect()).collect();
        assert!((s[0][0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((s[1][0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((s[2][0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((s[0][1] - 0.65).abs() < 1e-12);
        assert!((s[1][1] - 0.65).abs() < 1e-12);
        assert_eq!(r.tubelets.len(), 2);
    }

    #[test]
    fn one_frame_video_keeps_scores() {
        let mut v = VideoDetectionSet::new("v", 1);
        v.push(d(0, 0, 0.3, [0.0, 0.0, 10.0, 10.0]));
        v.push(d(0, 1, 0.6, [0.0, 0.0, 10.0, 10.0]));
        let r = link_and_rescore(&v, LinkMode::SeqNms, None, &LinkConfig::default()).unwrap();
        assert_eq!(r.video, v);
    }

    #[test]
    fn suppression_removes_same_class_overlaps_only() {
        let mut v = VideoDetectionSet::new("v", 1);
        v.push(d(0, 0, 0.9, [0.0, 0.0, 10.0, 10.0]));
        v.push(d(0, 0, 0.2, [0.0, 0.0, 10.0, 11.0]));
        v.push(d(0, 1, 0.2, [0.0, 0.0, 10.0, 11.0]));
        let r = link_and_rescore(&v, LinkMode::SeqNms, None, &LinkConfig::default()).unwrap();
        assert_eq!(r.video.frames[0].len(), 2);
        assert_eq!(r.video.frames[0][1].class, 1);
        assert!(link_and_rescore(&v, LinkMode::SeqTrack, None, &LinkConfig::default()).is_err());
    }
}
