//! Independent reference implementations used as test oracles.
#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vodkit::detection::{Detection, VideoDetectionSet};
use vodkit::geometry::BBox;
use vodkit::tensor::{Conv2d, Tensor3};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(r: &mut impl Rng, c: usize, h: usize, w: usize) -> Tensor3 {
    Tensor3::from_fn(c, h, w, |_, _, _| r.random_range(-1.0..1.0))
}

/// Plain overlap ratio written from the definition.
pub fn iou_ref(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn naive_correlate(t: &Tensor3, s: &Tensor3) -> Vec<Vec<Vec<f64>>> {
    let (c, th, tw) = t.shape();
    let (_, sh, sw) = s.shape();
    let mut out = vec![vec![vec![0.0; sw - tw + 1]; sh - th + 1]; c];
    for (ch, plane) in out.iter_mut().enumerate() {
        for (y, row) in plane.iter_mut().enumerate() {
            for (x, v) in row.iter_mut().enumerate() {
                for i in 0..th {
                    for j in 0..tw {
                        *v += t[(ch, i, j)] * s[(ch, y + i, x + j)];
                    }
                }
            }
        }
    }
    out
}

/// Value of the bilinear interpolant at a point given in feature cells.
/// Cell `j` has its center at `j + 0.5`; points outside the map read zero,
/// points in the outer half cell take the edge value.
fn interp(feat: &Tensor3, ch: usize, py: f64, px: f64) -> f64 {
    let (_, h, w) = feat.shape();
    if py < 0.0 || px < 0.0 || py > h as f64 || px > w as f64 {
        return 0.0;
    }
    let cy = (py - 0.5).max(0.0).min((h - 1) as f64);
    let cx = (px - 0.5).max(0.0).min((w - 1) as f64);
    let (iy, ix) = (cy.floor(), cx.floor());
    let (fy, fx) = (cy - iy, cx - ix);
    let (iy, ix) = (iy as usize, ix as usize);
    let (jy, jx) = ((iy + 1).min(h - 1), (ix + 1).min(w - 1));
    let top = feat[(ch, iy, ix)] * (1.0 - fx) + feat[(ch, iy, jx)] * fx;
    let bottom = feat[(ch, jy, ix)] * (1.0 - fx) + feat[(ch, jy, jx)] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Bin averages from an `n x n` grid of point samples per bin.
pub fn oversampled_roi_align(
    feat: &Tensor3,
    roi: [f64; 4],
    out_h: usize,
    out_w: usize,
    stride: f64,
    n: usize,
) -> Vec<Vec<Vec<f64>>> {
    let (c, _, _) = feat.shape();
    let [x1, y1, x2, y2] = roi.map(|v| v / stride);
    let (bh, bw) = ((y2 - y1) / out_h as f64, (x2 - x1) / out_w as f64);
    let mut out = vec![vec![vec![0.0; out_w]; out_h]; c];
    if bh <= 0.0 || bw <= 0.0 {
        return out;
    }
    for (ch, plane) in out.iter_mut().enumerate() {
        for (by, row) in plane.iter_mut().enumerate() {
            for (bx, v) in row.iter_mut().enumerate() {
                let mut sum = 0.0;
                for sy in 0..n {
                    let py = y1 + bh * (by as f64 + (sy as f64 + 0.5) / n as f64);
                    for sx in 0..n {
                        let px = x1 + bw * (bx as f64 + (sx as f64 + 0.5) / n as f64);
                        sum += interp(feat, ch, py, px);
                    }
                }
                *v = sum / (n * n) as f64;
            }
        }
    }
    out
}

/// Same-padded stride-1 convolution, straight from the definition.
pub fn naive_conv(input: &Tensor3, conv: &Conv2d) -> Vec<Vec<Vec<f64>>> {
    let (_, h, w) = input.shape();
    let k = conv.kernel;
    let pad = (k / 2) as isize;
    let mut out = vec![vec![vec![0.0; w]; h]; conv.out_channels];
    for (o, plane) in out.iter_mut().enumerate() {
        for (y, row) in plane.iter_mut().enumerate() {
            for (x, v) in row.iter_mut().enumerate() {
                let mut acc = conv.bias[o];
                for i in 0..conv.in_channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - pad;
                            let sx = x as isize + kx as isize - pad;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let wgt = conv.weight[((o * conv.in_channels + i) * k + ky) * k + kx];
                            acc += wgt * input[(i, sy as usize, sx as usize)];
                        }
                    }
                }
                *v = acc;
            }
        }
    }
    out
}

/// A small random video whose boxes wander around a few anchors, so that
/// links, ties and suppressions all occur.
pub fn random_video(r: &mut impl Rng, max_frames: usize, max_boxes: usize, classes: u32) -> VideoDetectionSet {
    let frames = r.random_range(1..=max_frames);
    let mut v = VideoDetectionSet::new("rand", frames);
    let anchors = [(20.0, 20.0), (30.0, 24.0), (60.0, 50.0)];
    for t in 0..frames {
        for _ in 0..r.random_range(0..=max_boxes) {
            let (ax, ay) = anchors[r.random_range(0..anchors.len())];
            let x = ax + r.random_range(-6.0..6.0);
            let y = ay + r.random_range(-6.0..6.0);
            let w = r.random_range(10.0..24.0);
            let h = r.random_range(10.0..24.0);
            // a coarse score grid makes equal path sums likely
            let score = if r.random_bool(0.3) { r.random_range(1..=4) as f64 / 4.0 } else { r.random_range(0.01..1.0) };
            let class = r.random_range(0..classes);
            v.push(Detection::new(t, class, score, BBox::new(x, y, x + w, y + h).unwrap()));
        }
    }
    v
}

/// Random predicted boxes, one per detection.
pub fn random_preds(r: &mut impl Rng, v: &VideoDetectionSet) -> Vec<Vec<BBox>> {
    v.frames
        .iter()
        .map(|f| {
            f.iter()
                .map(|d| {
                    let dx = r.random_range(-12.0..12.0);
                    let dy = r.random_range(-12.0..12.0);
                    d.bbox.translate(dx, dy).unwrap()
                })
                .collect()
        })
        .collect()
}

/// Every path in the link DAG, enumerated explicitly. A path is
/// `(start frame, node indices)`; links are recomputed from the boxes.
pub fn all_paths(
    v: &VideoDetectionSet,
    link_from: &[Vec<BBox>],
    link_iou: f64,
    alive: &[Vec<bool>],
) -> Vec<(usize, Vec<usize>)> {
    let linked = |t: usize, i: usize, j: usize| {
        v.frames[t][i].class == v.frames[t + 1][j].class
            && iou_ref(link_from[t][i].corners(), v.frames[t + 1][j].bbox.corners()) > link_iou
    };
    let mut out = Vec::new();
    let mut stack: Vec<(usize, Vec<usize>)> = Vec::new();
    for t in 0..v.frames.len() {
        for i in 0..v.frames[t].len() {
            if alive[t][i] {
                stack.push((t, vec![i]));
            }
        }
    }
    while let Some((start, nodes)) = stack.pop() {
        let t = start + nodes.len() - 1;
        let last = *nodes.last().unwrap();
        if t + 1 < v.frames.len() {
            for j in 0..v.frames[t + 1].len() {
                if alive[t + 1][j] && linked(t, last, j) {
                    let mut next = nodes.clone();
                    next.push(j);
                    stack.push((start, next));
                }
            }
        }
        out.push((start, nodes));
    }
    out
}

pub fn path_score(v: &VideoDetectionSet, start: usize, nodes: &[usize]) -> f64 {
    nodes.iter().enumerate().fold(0.0, |acc, (k, &i)| acc + v.frames[start + k][i].score)
}

/// Best path by score (descending), start frame, then node sequence.
pub fn brute_best(
    v: &VideoDetectionSet,
    link_from: &[Vec<BBox>],
    link_iou: f64,
    alive: &[Vec<bool>],
) -> Option<(f64, usize, Vec<usize>)> {
    let mut best: Option<(f64, usize, Vec<usize>)> = None;
    for (start, nodes) in all_paths(v, link_from, link_iou, alive) {
        let s = path_score(v, start, &nodes);
        let better = match &best {
            None => true,
            Some((bs, bst, bn)) => s > *bs || (s == *bs && (start < *bst || (start == *bst && nodes < *bn))),
        };
        if better {
            best = Some((s, start, nodes));
        }
    }
    best
}

/// Re-scored score per input detection (`None` = suppressed), by repeated
/// brute-force extraction.
pub fn reference_rescore(
    v: &VideoDetectionSet,
    link_from: &[Vec<BBox>],
    link_iou: f64,
    nms_iou: f64,
) -> Vec<Vec<Option<f64>>> {
    let mut alive: Vec<Vec<bool>> = v.frames.iter().map(|f| vec![true; f.len()]).collect();
    let mut out: Vec<Vec<Option<f64>>> = v.frames.iter().map(|f| vec![None; f.len()]).collect();
    while let Some((score, start, nodes)) = brute_best(v, link_from, link_iou, &alive) {
        let mean = score / nodes.len() as f64;
        for (k, &i) in nodes.iter().enumerate() {
            out[start + k][i] = Some(mean);
            alive[start + k][i] = false;
        }
        for (k, &i) in nodes.iter().enumerate() {
            let t = start + k;
            let m = &v.frames[t][i];
            for j in 0..v.frames[t].len() {
                let o = &v.frames[t][j];
                if alive[t][j] && o.class == m.class && iou_ref(m.bbox.corners(), o.bbox.corners()) > nms_iou {
                    alive[t][j] = false;
                }
            }
        }
    }
    out
}

/// All-point interpolated AP computed by scanning recall levels.
pub fn ap_reference(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut points = Vec::new();
    let mut hits = 0;
    for (k, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        points.push((hits as f64 / num_gt as f64, hits as f64 / (k + 1) as f64));
    }
    // area under max-precision-at-recall->=r, one step per new true positive
    let mut ap = 0.0;
    let mut last_recall = 0.0;
    for (k, &(r, _)) in points.iter().enumerate() {
        if r > last_recall {
            let p_max = points[k..].iter().map(|p| p.1).fold(0.0, f64::max);
            ap += (r - last_recall) * p_max;
            last_recall = r;
        }
    }
    ap
}
