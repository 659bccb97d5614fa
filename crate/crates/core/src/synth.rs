//! Seeded synthetic videos: linearly moving boxes, a noisy detector with
//! score-attenuation windows, and blob-pattern feature pyramids.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::detection::{Detection, VideoDetectionSet};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::tensor::{FeaturePyramid, PyramidLevel, Tensor3};

/// Frames `start..end` in which the detector's score is multiplied by `factor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Degradation {
    pub start: usize,
    pub end: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub class: u32,
    #[serde(default)]
    pub birth: usize,
    /// First frame the object is gone; defaults to the end of the video.
    #[serde(default)]
    pub death: Option<usize>,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default)]
    pub vx: f64,
    #[serde(default)]
    pub vy: f64,
    /// Multiplicative size change per frame.
    #[serde(default = "one")]
    pub scale_rate: f64,
    #[serde(default)]
    pub degradation: Vec<Degradation>,
}

fn one() -> f64 {
    1.0
}

impl ObjectSpec {
    pub fn alive(&self, frame: usize, frames: usize) -> bool {
        frame >= self.birth && frame < self.death.unwrap_or(frames)
    }

    /// Ground-truth box at `frame` (the object need not be alive).
    pub fn box_at(&self, frame: usize) -> Result<BBox> {
        let age = frame as f64 - self.birth as f64;
        let s = self.scale_rate.powf(age);
        BBox::from_center(self.cx + self.vx * age, self.cy + self.vy * age, self.w * s, self.h * s)
    }

    pub fn score_factor(&self, frame: usize) -> f64 {
        self.degradation.iter().filter(|d| (d.start..d.end).contains(&frame)).map(|d| d.factor).product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorNoise {
    /// Std-dev of the independent per-corner offset, in pixels.
    pub jitter_sigma: f64,
    pub miss_prob: f64,
    /// Mean number of false positives per frame (Poisson).
    pub fp_rate: f64,
    pub misclass_prob: f64,
    /// Score of an unattenuated true detection before noise.
    pub score_base: f64,
    pub score_sigma: f64,
    /// False-positive scores are `fp_score_max * u^fp_score_skew` with `u`
    /// uniform on `[0, 1]`; a skew above 1 concentrates them near zero.
    pub fp_score_max: f64,
    pub fp_score_skew: f64,
    /// False-positive side lengths are uniform on this range, in pixels.
    pub fp_size: [f64; 2],
    /// False positives are placed on background: their IoU with every live
    /// object stays at or below this (1 disables the constraint).
    pub fp_max_overlap: f64,
}

impl Default for DetectorNoise {
    fn default() -> Self {
        Self {
            jitter_sigma: 0.0,
            miss_prob: 0.0,
            fp_rate: 0.0,
            misclass_prob: 0.0,
            score_base: 1.0,
            score_sigma: 0.0,
            fp_score_max: 0.5,
            fp_score_skew: 1.0,
            fp_size: [16.0, 64.0],
            fp_max_overlap: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default = "default_video")]
    pub video: String,
    pub seed: u64,
    pub image_width: u32,
    pub image_height: u32,
    pub frames: usize,
    /// Class ids are drawn from `0..num_classes` for false positives and
    /// misclassifications.
    pub num_classes: u32,
    #[serde(default)]
    pub noise: DetectorNoise,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
}

fn default_video() -> String {
    "synthetic".to_string()
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {p} is not a probability")))
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let n = &self.noise;
        check_prob("miss_prob", n.miss_prob)?;
        check_prob("misclass_prob", n.misclass_prob)?;
        check_prob("score_base", n.score_base)?;
        check_prob("fp_score_max", n.fp_score_max)?;
        check_prob("fp_max_overlap", n.fp_max_overlap)?;
        for (name, v) in [
            ("jitter_sigma", n.jitter_sigma),
            ("score_sigma", n.score_sigma),
            ("fp_rate", n.fp_rate),
            ("fp_score_skew", n.fp_score_skew),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        if !(n.fp_size[0] > 0.0 && n.fp_size[0] <= n.fp_size[1]) {
            return Err(Error::Config(format!("fp_size {:?} is not a positive range", n.fp_size)));
        }
        if self.image_width == 0 || self.image_height == 0 || self.num_classes == 0 {
            return Err(Error::Config("image size and num_classes must be positive".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            let death = o.death.unwrap_or(self.frames);
            if o.birth >= death || death > self.frames {
                return Err(Error::Config(format!(
                    "object {i}: lifetime {}..{death} is empty or exceeds {} frames",
                    o.birth, self.frames
                )));
            }
            if o.class >= self.num_classes {
                return Err(Error::Config(format!("object {i}: class {} >= num_classes", o.class)));
            }
            if !(o.w > 0.0 && o.h > 0.0 && o.scale_rate > 0.0) {
                return Err(Error::Config(format!("object {i}: size and scale rate must be positive")));
            }
            for t in [o.birth, death - 1] {
                let b = o.box_at(t).map_err(|e| Error::Config(format!("object {i}: {e}")))?;
                if !b.has_positive_area() {
                    return Err(Error::Config(format!("object {i}: degenerate box at frame {t}")));
                }
            }
            for d in &o.degradation {
                if !(d.factor > 0.0 && d.factor <= 1.0) || d.start >= d.end {
                    return Err(Error::Config(format!("object {i}: bad degradation window {d:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let spec: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&std::fs::read_to_string(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Three objects, perfect detector.
    pub fn noiseless() -> Self {
        let obj = |class, cx, cy, vx, vy| ObjectSpec {
            class,
            birth: 0,
            death: None,
            cx,
            cy,
            w: 40.0,
            h: 30.0,
            vx,
            vy,
            scale_rate: 1.0,
            degradation: Vec::new(),
        };
        Self {
            video: "noiseless".into(),
            seed: 0,
            image_width: 320,
            image_height: 240,
            frames: 20,
            num_classes: 3,
            noise: DetectorNoise::default(),
            objects: vec![
                obj(0, 40.0, 40.0, 3.0, 1.0),
                obj(1, 200.0, 60.0, -2.0, 2.0),
                obj(2, 150.0, 180.0, 0.0, -1.5),
            ],
        }
    }

    /// Slow objects with mid-life score attenuation and a moderately noisy
    /// detector. Two late-born objects appear beside existing ones (IoU
    /// roughly 0.4 to 0.55 with them) and move along with them.
    pub fn degradation(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD3A7);
        let frames = 40;
        let mut objects: Vec<ObjectSpec> = (0..6)
            .map(|i| {
                let w = rng.random_range(40.0..80.0);
                let h = rng.random_range(40.0..80.0);
                let start = rng.random_range(5..25);
                let len = rng.random_range(5..12);
                ObjectSpec {
                    class: i % 3,
                    birth: 0,
                    death: None,
                    cx: rng.random_range(60.0..420.0),
                    cy: rng.random_range(60.0..300.0),
                    w,
                    h,
                    vx: rng.random_range(-2.0..2.0),
                    vy: rng.random_range(-2.0..2.0),
                    scale_rate: 1.0,
                    degradation: vec![Degradation { start, end: start + len, factor: rng.random_range(0.05..0.2) }],
                }
            })
            .collect();
        for host in 0..2 {
            let h = objects[host].clone();
            let birth = rng.random_range(5..20);
            let offset = rng.random_range(0.3..0.45) * h.w;
            objects.push(ObjectSpec {
                class: (h.class + 1) % 3,
                birth,
                death: None,
                cx: h.cx + h.vx * birth as f64 + offset,
                cy: h.cy + h.vy * birth as f64,
                degradation: Vec::new(),
                ..h
            });
        }
        Self {
            video: format!("degradation-{seed}"),
            seed,
            image_width: 480,
            image_height: 360,
            frames,
            num_classes: 3,
            noise: DetectorNoise {
                jitter_sigma: 2.0,
                miss_prob: 0.1,
                fp_rate: 1.0,
                misclass_prob: 0.0,
                score_base: 0.8,
                score_sigma: 0.1,
                fp_score_max: 0.6,
                fp_score_skew: 1.0,
                fp_size: [30.0, 80.0],
                fp_max_overlap: 0.2,
            },
            objects,
        }
    }

    /// Like [`degradation`](Self::degradation), but some objects move farther
    /// than their own width every frame.
    pub fn fast_motion(seed: u64) -> Self {
        let mut spec = Self::degradation(seed ^ 0xFA57);
        spec.video = format!("fast-motion-{seed}");
        spec.seed = seed;
        spec.image_width = 2000;
        spec.objects.truncate(6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0FA5);
        for o in spec.objects.iter_mut().take(3) {
            o.cx = rng.random_range(50.0..150.0);
            o.vx = o.w * rng.random_range(1.1..1.4);
            o.scale_rate = 1.0;
            o.vy = 0.0;
        }
        spec
    }

    /// Largest per-frame displacement in units of the object's width.
    pub fn max_relative_speed(&self) -> f64 {
        self.objects.iter().map(|o| o.vx.hypot(o.vy) / o.w).fold(0.0, f64::max)
    }
}

const FP_PLACEMENT_ATTEMPTS: usize = 32;

/// Ground truth (track id = object index) and noisy detections.
pub fn generate(spec: &ScenarioSpec) -> Result<(VideoDetectionSet, VideoDetectionSet)> {
    spec.validate()?;
    let n = &spec.noise;
    let mut gt = VideoDetectionSet::new(spec.video.clone(), spec.frames);
    let mut dets = VideoDetectionSet::new(spec.video.clone(), spec.frames);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let fp_count = (n.fp_rate > 0.0).then(|| Poisson::new(n.fp_rate).expect("positive rate"));

    for t in 0..spec.frames {
        for (id, o) in spec.objects.iter().enumerate() {
            if !o.alive(t, spec.frames) {
                continue;
            }
            let truth = o.box_at(t)?;
            gt.push(Detection::new(t, o.class, 1.0, truth).with_track(id as u64));

            // fixed number of draws per object keeps the stream aligned
            let miss: f64 = rng.random();
            let z: [f64; 5] = std::array::from_fn(|_| unit.sample(&mut rng));
            let misclass: f64 = rng.random();
            let other = rng.random_range(0..spec.num_classes.max(2) - 1);
            if miss < n.miss_prob {
                continue;
            }
            let [x1, y1, x2, y2] = truth.corners();
            let s = n.jitter_sigma;
            let (ax, bx) = (x1 + s * z[0], x2 + s * z[2]);
            let (ay, by) = (y1 + s * z[1], y2 + s * z[3]);
            let bbox = BBox::new(ax.min(bx), ay.min(by), ax.max(bx), ay.max(by))?;
            let score = (n.score_base + n.score_sigma * z[4]).clamp(0.0, 1.0) * o.score_factor(t);
            let class = if misclass < n.misclass_prob && spec.num_classes > 1 {
                // skip over the true class
                if other >= o.class {
                    other + 1
                } else {
                    other
                }
            } else {
                o.class
            };
            dets.push(Detection::new(t, class, score, bbox));
        }
        if let Some(p) = &fp_count {
            let k = p.sample(&mut rng) as usize;
            for _ in 0..k {
                let class = rng.random_range(0..spec.num_classes);
                let score = rng.random_range(0.0f64..=1.0).powf(n.fp_score_skew) * n.fp_score_max;
                // a bounded number of placement attempts; an FP that finds no
                // background spot is dropped
                for _ in 0..FP_PLACEMENT_ATTEMPTS {
                    let w = rng.random_range(n.fp_size[0]..=n.fp_size[1]);
                    let h = rng.random_range(n.fp_size[0]..=n.fp_size[1]);
                    let x = rng.random_range(0.0..=(spec.image_width as f64 - w).max(0.0));
                    let y = rng.random_range(0.0..=(spec.image_height as f64 - h).max(0.0));
                    let bbox = BBox::new(x, y, x + w, y + h)?;
                    if gt.frames[t].iter().all(|g| iou(&g.bbox, &bbox) <= n.fp_max_overlap) {
                        dets.push(Detection::new(t, class, score, bbox));
                        break;
                    }
                }
            }
        }
    }
    Ok((gt, dets))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub strides: Vec<u32>,
    pub channels: usize,
    /// Background noise is uniform on `[-background, background]`.
    pub background: f64,
    pub amplitude: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { strides: vec![4, 8], channels: 8, background: 0.05, amplitude: 1.0 }
    }
}

/// Feature pyramid for `frame`: each live object adds a Gaussian blob, centred
/// on its box and a quarter of its size wide, to channel `id % channels`.
pub fn render_features(spec: &ScenarioSpec, frame: usize, cfg: &RenderConfig) -> Result<FeaturePyramid> {
    if frame >= spec.frames {
        return Err(Error::Argument(format!("frame {frame} outside 0..{}", spec.frames)));
    }
    if cfg.channels == 0 {
        return Err(Error::Argument("render needs at least one channel".into()));
    }
    let live: Vec<(usize, BBox)> = spec
        .objects
        .iter()
        .enumerate()
        .filter(|(_, o)| o.alive(frame, spec.frames))
        .map(|(i, o)| o.box_at(frame).map(|b| (i % cfg.channels, b)))
        .collect::<Result<_>>()?;
    let mut levels = Vec::with_capacity(cfg.strides.len());
    for (l, &stride) in cfg.strides.iter().enumerate() {
        let h = spec.image_height.div_ceil(stride) as usize;
        let w = spec.image_width.div_ceil(stride) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ ((frame as u64) << 20) ^ ((l as u64) << 52) ^ 0xFEA7);
        let mut map = Tensor3::zeros(cfg.channels, h, w);
        if cfg.background > 0.0 {
            for v in map.data_mut() {
                *v = rng.random_range(-cfg.background..=cfg.background);
            }
        }
        let s = stride as f64;
        for &(c, b) in &live {
            let (sx, sy) = (b.width() / 4.0, b.height() / 4.0);
            let data = map.data_mut();
            for y in 0..h {
                let dy = ((y as f64 + 0.5) * s - b.cy()) / sy;
                for x in 0..w {
                    let dx = ((x as f64 + 0.5) * s - b.cx()) / sx;
                    data[(c * h + y) * w + x] += cfg.amplitude * (-0.5 * (dx * dx + dy * dy)).exp();
                }
            }
        }
        levels.push(PyramidLevel { stride, map });
    }
    FeaturePyramid::new(spec.image_height, spec.image_width, levels)
}
