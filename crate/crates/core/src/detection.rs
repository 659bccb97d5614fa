use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Where an emitted box came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Detected,
    Tracked,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Detected => "detected",
            Provenance::Tracked => "tracked",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub frame: usize,
    pub class: u32,
    pub score: f64,
    pub bbox: BBox,
    pub track: Option<u64>,
    pub provenance: Option<Provenance>,
}

impl Detection {
    pub fn new(frame: usize, class: u32, score: f64, bbox: BBox) -> Self {
        Self { frame, class, score, bbox, track: None, provenance: None }
    }

    pub fn with_track(mut self, track: u64) -> Self {
        self.track = Some(track);
        self
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = Some(provenance);
        self
    }
}

/// All detections (or ground truth) of one video, indexed by frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VideoDetectionSet {
    pub video: String,
    pub frames: Vec<Vec<Detection>>,
}

impl VideoDetectionSet {
    pub fn new(video: impl Into<String>, num_frames: usize) -> Self {
        Self { video: video.into(), frames: vec![Vec::new(); num_frames] }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_detections(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Detection> {
        self.frames.iter().flatten()
    }

    /// Appends `det` to its frame, growing the frame list as needed.
    pub fn push(&mut self, det: Detection) {
        if det.frame >= self.frames.len() {
            self.frames.resize_with(det.frame + 1, Vec::new);
        }
        self.frames[det.frame].push(det);
    }

    /// Checks frame indices and score range.
    pub fn validate(&self) -> Result<()> {
        for (t, frame) in self.frames.iter().enumerate() {
            for d in frame {
                if d.frame != t {
                    return Err(Error::Format(format!(
                        "video {}: detection stored under frame {t} claims frame {}",
                        self.video, d.frame
                    )));
                }
                if !(0.0..=1.0).contains(&d.score) {
                    return Err(Error::Format(format!(
                        "video {}: frame {t} score {} outside [0, 1]",
                        self.video, d.score
                    )));
                }
            }
        }
        Ok(())
    }

    /// Drops trailing empty frames (the JSONL format cannot represent them).
    pub fn trimmed(mut self) -> Self {
        while self.frames.last().is_some_and(Vec::is_empty) {
            self.frames.pop();
        }
        self
    }
}
