//! Axis-aligned box algebra.
//!
//! Boxes are stored by corners (`x1, y1, x2, y2`) in continuous pixel units.
//! The regression math works in center form: `(cx, cy)` is the box center and
//! `(w, h)` its extent, as in the usual R-CNN parameterization.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    /// Builds a box from corners. Zero extent is allowed, negative extent is not.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(Error::Argument(format!("non-finite box [{x1}, {y1}, {x2}, {y2}]")));
        }
        if x2 < x1 || y2 < y1 {
            return Err(Error::Argument(format!("negative extent box [{x1}, {y1}, {x2}, {y2}]")));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if w < 0.0 || h < 0.0 {
            return Err(Error::Argument(format!("negative size w={w} h={h}")));
        }
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn cx(&self) -> f64 {
        0.5 * (self.x1 + self.x2)
    }

    pub fn cy(&self) -> f64 {
        0.5 * (self.y1 + self.y2)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn has_positive_area(&self) -> bool {
        self.width() > 0.0 && self.height() > 0.0
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self> {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    pub fn scale(&self, s: f64) -> Result<Self> {
        Self::new(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)
    }

    fn require_positive(&self, what: &str) -> Result<()> {
        if self.has_positive_area() {
            Ok(())
        } else {
            Err(Error::Domain(format!("{what} must have positive width and height, got {:?}", self.corners())))
        }
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        Self::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.corners()
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Box regression offsets: center shift normalized by the reference size,
/// log-ratio of sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl RegressionDelta {
    pub const ZERO: Self = Self { dx: 0.0, dy: 0.0, dw: 0.0, dh: 0.0 };

    pub fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Result<Self> {
        let d = Self { dx, dy, dw, dh };
        if d.to_array().iter().all(|v| v.is_finite()) {
            Ok(d)
        } else {
            Err(Error::Argument(format!("non-finite delta {d:?}")))
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }
}

/// Regression target taking `reference` onto `target`.
pub fn encode(reference: &BBox, target: &BBox) -> Result<RegressionDelta> {
    reference.require_positive("reference box")?;
    target.require_positive("target box")?;
    let (bw, bh) = (reference.width(), reference.height());
    Ok(RegressionDelta {
        dx: (target.cx() - reference.cx()) / bw,
        dy: (target.cy() - reference.cy()) / bh,
        dw: (target.width() / bw).ln(),
        dh: (target.height() / bh).ln(),
    })
}

/// Applies a regression delta to `reference`.
pub fn decode(reference: &BBox, delta: &RegressionDelta) -> Result<BBox> {
    reference.require_positive("reference box")?;
    let (bw, bh) = (reference.width(), reference.height());
    // offsets applied to the corners so a zero delta is an exact identity
    let (sx, sy) = (delta.dx * bw, delta.dy * bh);
    let gx = 0.5 * (delta.dw.exp() * bw - bw);
    let gy = 0.5 * (delta.dh.exp() * bh - bh);
    BBox::new(reference.x1() + sx - gx, reference.y1() + sy - gy, reference.x2() + sx + gx, reference.y2() + sy + gy)
        .map_err(|e| Error::Domain(format!("decoded box is not representable: {e}")))
}

/// Grows the box `k` times around its center, keeping the aspect ratio.
pub fn expand(b: &BBox, k: f64) -> Result<BBox> {
    if !(k >= 1.0) || !k.is_finite() {
        return Err(Error::Argument(format!("expansion factor must be >= 1, got {k}")));
    }
    BBox::from_center(b.cx(), b.cy(), k * b.width(), k * b.height())
}

/// Shift/resize coefficients used to perturb a ground-truth box into a training RoI.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterCoefficients {
    dx: f64,
    dy: f64,
    sw: f64,
    sh: f64,
}

impl JitterCoefficients {
    pub const SHIFT_RANGE: (f64, f64) = (-1.0, 1.0);
    pub const SCALE_RANGE: (f64, f64) = (0.5, 1.5);

    pub fn new(dx: f64, dy: f64, sw: f64, sh: f64) -> Result<Self> {
        let (slo, shi) = Self::SHIFT_RANGE;
        let (clo, chi) = Self::SCALE_RANGE;
        let ok = (slo..=shi).contains(&dx)
            && (slo..=shi).contains(&dy)
            && (clo..=chi).contains(&sw)
            && (clo..=chi).contains(&sh);
        if !ok {
            return Err(Error::Argument(format!(
                "jitter ({dx}, {dy}, {sw}, {sh}) outside shift [-1, 1] / scale [0.5, 1.5]"
            )));
        }
        Ok(Self { dx, dy, sw, sh })
    }

    pub fn identity() -> Self {
        Self { dx: 0.0, dy: 0.0, sw: 1.0, sh: 1.0 }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let (slo, shi) = Self::SHIFT_RANGE;
        let (clo, chi) = Self::SCALE_RANGE;
        Self {
            dx: rng.random_range(slo..=shi),
            dy: rng.random_range(slo..=shi),
            sw: rng.random_range(clo..=chi),
            sh: rng.random_range(clo..=chi),
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.sw, self.sh]
    }
}

pub fn jitter_roi(g: &BBox, j: &JitterCoefficients) -> Result<BBox> {
    g.require_positive("ground-truth box")?;
    let (gw, gh) = (g.width(), g.height());
    BBox::from_center(j.dx * gw + g.cx(), j.dy * gh + g.cy(), j.sw * gw, j.sh * gh)
}

/// Which side of the overlap threshold a jittered RoI must fall on to be kept.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OverlapFilter {
    AtLeast(f64),
    Below(f64),
}

impl Default for OverlapFilter {
    fn default() -> Self {
        OverlapFilter::AtLeast(0.5)
    }
}

impl OverlapFilter {
    pub fn accepts(&self, overlap: f64) -> bool {
        match *self {
            OverlapFilter::AtLeast(t) => overlap >= t,
            OverlapFilter::Below(t) => overlap < t,
        }
    }
}

/// Draws `2 * n_keep` jittered RoIs around `g`, keeps those passing `filter`
/// and returns a random subset of `n_keep` of them (in draw order).
pub fn sample_jittered_rois(g: &BBox, n_keep: usize, seed: u64, filter: OverlapFilter) -> Result<Vec<BBox>> {
    if n_keep == 0 {
        return Err(Error::Argument("n_keep must be >= 1".into()));
    }
    g.require_positive("ground-truth box")?;
    let draws = 2 * n_keep;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut accepted = Vec::with_capacity(draws);
    for _ in 0..draws {
        let roi = jitter_roi(g, &JitterCoefficients::sample(&mut rng))?;
        if filter.accepts(iou(&roi, g)) {
            accepted.push(roi);
        }
    }
    if accepted.len() < n_keep {
        return Err(Error::Exhausted { wanted: n_keep, accepted: accepted.len(), draws });
    }
    let mut picked = index::sample(&mut rng, accepted.len(), n_keep).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| accepted[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::from_center(cx, cy, w, h).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn rejects_negative_extent() {
        assert!(BBox::new(0.0, 0.0, -1.0, 5.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.0, f64::NAN).is_err());
        assert!(BBox::new(3.0, 3.0, 3.0, 3.0).is_ok());
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        let far = BBox::new(20.0, 20.0, 30.0, 30.0).unwrap();
        assert_eq!(iou(&a, &far), 0.0);
        let b = BBox::new(5.0, 5.0, 15.0, 15.0).unwrap();
        // 5x5 overlap over 100 + 100 - 25
        assert!(close(iou(&a, &b), 25.0 / 175.0, 1e-15));
        let point = BBox::new(1.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(iou(&point, &point), 0.0);
    }

    #[test]
    fn encode_examples() {
        let b = c(10.0, 20.0, 4.0, 8.0);
        let g = c(12.0, 16.0, 8.0, 4.0);
        let d = encode(&b, &g).unwrap();
        let ln2 = 2f64.ln();
        assert!(close(d.dx, 0.5, 1e-12));
        assert!(close(d.dy, -0.5, 1e-12));
        assert!(close(d.dw, ln2, 1e-12));
        assert!(close(d.dh, -ln2, 1e-12));

        assert_eq!(encode(&b, &b).unwrap(), RegressionDelta::ZERO);

        let e = std::f64::consts::E;
        let d = encode(&c(0.0, 0.0, 1.0, 1.0), &c(1.0, 1.0, e, e)).unwrap();
        for v in d.to_array() {
            assert!(close(v, 1.0, 1e-12), "{d:?}");
        }
    }

    #[test]
    fn encode_rejects_degenerate() {
        let flat = BBox::new(0.0, 0.0, 5.0, 0.0).unwrap();
        let ok = c(0.0, 0.0, 2.0, 2.0);
        assert!(matches!(encode(&flat, &ok), Err(Error::Domain(_))));
        assert!(matches!(encode(&ok, &flat), Err(Error::Domain(_))));
        assert!(matches!(decode(&flat, &RegressionDelta::ZERO), Err(Error::Domain(_))));
    }

    #[test]
    fn decode_examples() {
        let b = c(10.0, 20.0, 4.0, 8.0);
        assert_eq!(decode(&b, &RegressionDelta::ZERO).unwrap(), b);
        let ln2 = 2f64.ln();
        let p = decode(&b, &RegressionDelta::new(0.5, -0.5, ln2, -ln2).unwrap()).unwrap();
        assert!(close(p.cx(), 12.0, 1e-12));
        assert!(close(p.cy(), 16.0, 1e-12));
        assert!(close(p.width(), 8.0, 1e-12));
        assert!(close(p.height(), 4.0, 1e-12));
    }

    #[test]
    fn expand_examples() {
        let b = c(10.0, 10.0, 4.0, 6.0);
        let e = expand(&b, 3.0).unwrap();
        assert_eq!((e.cx(), e.cy(), e.width(), e.height()), (10.0, 10.0, 12.0, 18.0));
        assert_eq!(expand(&b, 1.0).unwrap(), b);
        let e = expand(&c(0.0, 0.0, 2.0, 2.0), 2.0).unwrap();
        assert_eq!(e.corners(), [-2.0, -2.0, 2.0, 2.0]);
        assert!(expand(&b, 0.5).is_err());
        assert!(expand(&b, f64::NAN).is_err());
    }

    #[test]
    fn jitter_examples() {
        let g = c(10.0, 10.0, 4.0, 6.0);
        let r = jitter_roi(&g, &JitterCoefficients::new(0.5, -0.5, 1.0, 1.5).unwrap()).unwrap();
        assert!(close(r.cx(), 12.0, 1e-12));
        assert!(close(r.cy(), 7.0, 1e-12));
        assert!(close(r.width(), 4.0, 1e-12));
        assert!(close(r.height(), 9.0, 1e-12));
        assert_eq!(jitter_roi(&g, &JitterCoefficients::identity()).unwrap(), g);
        assert!(JitterCoefficients::new(1.5, 0.0, 1.0, 1.0).is_err());
        assert!(JitterCoefficients::new(0.0, 0.0, 0.4, 1.0).is_err());
    }

    #[test]
    fn jittered_sampling_is_deterministic_and_filtered() {
        let g = c(50.0, 50.0, 20.0, 30.0);
        for filter in [OverlapFilter::AtLeast(0.5), OverlapFilter::Below(0.5)] {
            let a = sample_jittered_rois(&g, 128, 7, filter);
            let b = sample_jittered_rois(&g, 128, 7, filter);
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    assert_eq!(a, b);
                    assert_eq!(a.len(), 128);
                    assert!(a.iter().all(|r| filter.accepts(iou(r, &g))));
                }
                (Err(Error::Exhausted { draws, .. }), Err(Error::Exhausted { .. })) => {
                    assert_eq!(draws, 256)
                }
                other => panic!("non-deterministic outcome: {other:?}"),
            }
        }
    }

    #[test]
    fn overlap_filter_direction_controls_acceptance() {
        // Roughly 4% of draws reach IoU 0.5, so keeping half of the budget
        // exhausts under the default filter but not under the inverted one.
        let g = c(50.0, 50.0, 20.0, 30.0);
        assert!(matches!(
            sample_jittered_rois(&g, 128, 3, OverlapFilter::default()),
            Err(Error::Exhausted { wanted: 128, draws: 256, .. })
        ));
        let rois = sample_jittered_rois(&g, 128, 3, OverlapFilter::Below(0.5)).unwrap();
        assert!(rois.iter().all(|r| iou(r, &g) < 0.5));
        let one = sample_jittered_rois(&g, 1, 0, OverlapFilter::AtLeast(0.0)).unwrap();
        assert_eq!(one.len(), 1);
        assert!(sample_jittered_rois(&g, 0, 3, OverlapFilter::default()).is_err());
    }
}
