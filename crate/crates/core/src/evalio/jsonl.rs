//! Line-delimited JSON detection and prediction files.
//!
//! One object per line. Videos appear in order of first occurrence; within a
//! frame, detections keep their line order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detection::{Detection, Provenance, VideoDetectionSet};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tracker::TrackPrediction;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionRecord {
    video: String,
    frame: usize,
    class: u32,
    score: f64,
    #[serde(rename = "box")]
    bbox: BBox,
    track: Option<u64>,
    provenance: Option<Provenance>,
}

fn parse_lines<T, R: Read>(reader: R, mut each: impl FnMut(usize, T) -> Result<()>) -> Result<()>
where
    T: for<'de> Deserialize<'de>,
{
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&line).map_err(|e| Error::Parse { line: n + 1, message: e.to_string() })?;
        each(n + 1, rec)?;
    }
    Ok(())
}

fn video_slot<T>(sets: &mut Vec<T>, name: &str, key: impl Fn(&T) -> &str, make: impl FnOnce() -> T) -> usize {
    match sets.iter().position(|s| key(s) == name) {
        Some(i) => i,
        None => {
            sets.push(make());
            sets.len() - 1
        }
    }
}

pub fn read_detections<R: Read>(reader: R) -> Result<Vec<VideoDetectionSet>> {
    let mut sets: Vec<VideoDetectionSet> = Vec::new();
    parse_lines(reader, |line, r: DetectionRecord| {
        if !(0.0..=1.0).contains(&r.score) {
            return Err(Error::Parse { line, message: format!("score {} outside [0, 1]", r.score) });
        }
        let i = video_slot(&mut sets, &r.video, |s| &s.video, || VideoDetectionSet::new(r.video.clone(), 0));
        sets[i].push(Detection {
            frame: r.frame,
            class: r.class,
            score: r.score,
            bbox: r.bbox,
            track: r.track,
            provenance: r.provenance,
        });
        Ok(())
    })?;
    Ok(sets)
}

pub fn write_detections<W: Write>(mut w: W, sets: &[VideoDetectionSet]) -> Result<()> {
    for set in sets {
        for d in set.iter() {
            let rec = DetectionRecord {
                video: set.video.clone(),
                frame: d.frame,
                class: d.class,
                score: d.score,
                bbox: d.bbox,
                track: d.track,
                provenance: d.provenance,
            };
            serde_json::to_writer(&mut w, &rec).map_err(|e| Error::Format(e.to_string()))?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_detections(path: impl AsRef<Path>) -> Result<Vec<VideoDetectionSet>> {
    read_detections(File::open(path)?)
}

pub fn save_detections(path: impl AsRef<Path>, sets: &[VideoDetectionSet]) -> Result<()> {
    write_detections(BufWriter::new(File::create(path)?), sets)
}

/// One tracker output: the source detection's position in its frame, the
/// source itself, and the predicted next-frame box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub video: String,
    pub frame: usize,
    /// Index of the source detection within its frame.
    pub index: usize,
    pub class: u32,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub pred: BBox,
    pub quality: f64,
}

impl PredictionRecord {
    pub fn from_prediction(video: &str, index: usize, p: &TrackPrediction) -> Self {
        Self {
            video: video.to_string(),
            frame: p.source.frame,
            index,
            class: p.source.class,
            score: p.source.score,
            bbox: p.source.bbox,
            pred: p.predicted_box,
            quality: p.quality,
        }
    }

    pub fn to_prediction(&self) -> TrackPrediction {
        TrackPrediction {
            source: Detection::new(self.frame, self.class, self.score, self.bbox),
            predicted_box: self.pred,
            quality: self.quality,
        }
    }
}

/// Tracker outputs of one video.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionSet {
    pub video: String,
    pub records: Vec<PredictionRecord>,
}

impl PredictionSet {
    pub fn from_frames(video: &str, frames: &[Vec<Option<TrackPrediction>>]) -> Self {
        let records = frames
            .iter()
            .flat_map(|f| {
                f.iter()
                    .enumerate()
                    .filter_map(|(i, p)| p.as_ref().map(|p| PredictionRecord::from_prediction(video, i, p)))
            })
            .collect();
        Self { video: video.to_string(), records }
    }

    /// Predicted boxes aligned with `video`'s detections; a detection without
    /// a record keeps its own box.
    pub fn aligned_boxes(&self, video: &VideoDetectionSet) -> Vec<Vec<BBox>> {
        let mut out: Vec<Vec<BBox>> = video.frames.iter().map(|f| f.iter().map(|d| d.bbox).collect()).collect();
        for r in &self.records {
            if let Some(slot) = out.get_mut(r.frame).and_then(|f| f.get_mut(r.index)) {
                *slot = r.pred;
            }
        }
        out
    }

    pub fn frame(&self, frame: usize) -> impl Iterator<Item = &PredictionRecord> {
        self.records.iter().filter(move |r| r.frame == frame)
    }
}

pub fn read_predictions<R: Read>(reader: R) -> Result<Vec<PredictionSet>> {
    let mut sets: Vec<PredictionSet> = Vec::new();
    parse_lines(reader, |line, r: PredictionRecord| {
        if !(0.0..=1.0).contains(&r.quality) {
            return Err(Error::Parse { line, message: format!("quality {} outside [0, 1]", r.quality) });
        }
        let i = video_slot(
            &mut sets,
            &r.video,
            |s| &s.video,
            || PredictionSet { video: r.video.clone(), records: Vec::new() },
        );
        sets[i].records.push(r);
        Ok(())
    })?;
    Ok(sets)
}

pub fn write_predictions<W: Write>(mut w: W, sets: &[PredictionSet]) -> Result<()> {
    for r in sets.iter().flat_map(|s| &s.records) {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionSet>> {
    read_predictions(File::open(path)?)
}

pub fn save_predictions(path: impl AsRef<Path>, sets: &[PredictionSet]) -> Result<()> {
    write_predictions(BufWriter::new(File::create(path)?), sets)
}
