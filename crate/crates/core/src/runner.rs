//! Composed pipelines (detector only, linking, tracking-first merge plus
//! linking) and reproducible run manifests.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detection::{Detection, VideoDetectionSet};
use crate::error::{Error, Result};
use crate::evalio::{self, EvalResult, PredictionSet, StagedWrite};
use crate::geometry::{decode, encode, iou};
use crate::linker::{link_and_rescore, LinkConfig, LinkMode};
use crate::pipeline::{finalize, run_video, PipelineConfig, PipelineRun};
use crate::synth::{generate, ScenarioSpec};
use crate::tensor::FeaturePyramid;
use crate::tracker::{track, FrameTracker, OracleNoise, OracleTracker, TrackPrediction, TrackerConfig, TrackerWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "detector")]
    Detector,
    #[serde(rename = "seqnms")]
    SeqNms,
    #[serde(rename = "tfd+seqnms")]
    TfdSeqNms,
    #[serde(rename = "tfd+seqtracknms")]
    TfdSeqTrackNms,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Detector, Variant::SeqNms, Variant::TfdSeqNms, Variant::TfdSeqTrackNms];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Detector => "detector",
            Variant::SeqNms => "seqnms",
            Variant::TfdSeqNms => "tfd+seqnms",
            Variant::TfdSeqTrackNms => "tfd+seqtracknms",
        }
    }

    pub fn uses_tracker(&self) -> bool {
        matches!(self, Variant::TfdSeqNms | Variant::TfdSeqTrackNms)
    }

    pub fn link_mode(&self) -> Option<LinkMode> {
        match self {
            Variant::Detector => None,
            Variant::SeqNms | Variant::TfdSeqNms => Some(LinkMode::SeqNms),
            Variant::TfdSeqTrackNms => Some(LinkMode::SeqTrack),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown variant {s:?}")))
    }
}

const PIPELINE_KEYS: [&str; 6] =
    ["detect_to_track_score", "track_quality_min", "track_nms_iou", "T_merge", "final_score_min", "final_nms_iou"];

/// Everything that parameterizes a run besides its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub link: LinkConfig,
    /// Noise of the ground-truth driven tracker used by the merge variants.
    pub oracle: OracleNoise,
    pub tracker_seed: u64,
    pub eval_iou: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            link: LinkConfig::default(),
            oracle: OracleNoise::with_sigma(0.1, 0.1),
            tracker_seed: 0,
            eval_iou: 0.5,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        for (name, v) in
            [("link.link_iou", self.link.link_iou), ("link.nms_iou", self.link.nms_iou), ("eval_iou", self.eval_iou)]
        {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if !(self.oracle.center_sigma >= 0.0 && self.oracle.scale_sigma >= 0.0) {
            return Err(Error::Config("oracle noise must be non-negative".into()));
        }
        Ok(())
    }

    /// Parses the sectioned form. Pipeline keys may also appear at the top
    /// level, so a flat pipeline config file is a valid run config.
    pub fn from_toml(s: &str) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        let flat: Vec<(String, toml::Value)> =
            PIPELINE_KEYS.iter().filter_map(|k| table.remove(*k).map(|v| (k.to_string(), v))).collect();
        if !flat.is_empty() {
            let section = table
                .entry("pipeline")
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::Config("pipeline must be a table".into()))?;
            for (k, v) in flat {
                if section.insert(k.clone(), v).is_some() {
                    return Err(Error::Config(format!("{k} given both at top level and in [pipeline]")));
                }
            }
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&fs::read_to_string(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// Replays precomputed predictions as a tracker.
///
/// A queried box takes the record whose source box equals it (same class),
/// else the motion of the best-overlapping record source (IoU >= 0.5) applied
/// to the query box. Boxes with neither get their own box and quality 0.
#[derive(Debug, Clone)]
pub struct PredictionLookup {
    set: PredictionSet,
}

impl PredictionLookup {
    pub fn new(set: PredictionSet) -> Self {
        Self { set }
    }
}

impl FrameTracker for PredictionLookup {
    fn predict(&mut self, frame: usize, boxes: &[Detection]) -> Result<Vec<TrackPrediction>> {
        let records: Vec<_> = self.set.frame(frame).collect();
        boxes
            .iter()
            .map(|b| {
                if let Some(r) = records.iter().find(|r| r.bbox == b.bbox && r.class == b.class) {
                    return Ok(TrackPrediction { source: b.clone(), predicted_box: r.pred, quality: r.quality });
                }
                let best = records
                    .iter()
                    .map(|r| (iou(&r.bbox, &b.bbox), r))
                    .filter(|(o, _)| *o >= 0.5)
                    .max_by(|a, b| a.0.total_cmp(&b.0));
                let moved = match best {
                    Some((_, r)) if b.bbox.has_positive_area() && r.bbox.has_positive_area() => {
                        Some((decode(&b.bbox, &encode(&r.bbox, &r.pred)?)?, r.quality))
                    }
                    _ => None,
                };
                let (predicted_box, quality) = moved.unwrap_or((b.bbox, 0.0));
                Ok(TrackPrediction { source: b.clone(), predicted_box, quality })
            })
            .collect()
    }
}

/// The learned head over per-frame feature files `{dir}/{frame:06}.fpyr`.
pub struct FeatureTracker {
    dir: PathBuf,
    weights: TrackerWeights,
    cfg: TrackerConfig,
    cache: Option<(usize, FeaturePyramid)>,
}

impl FeatureTracker {
    pub fn new(dir: impl Into<PathBuf>, weights: TrackerWeights, cfg: TrackerConfig) -> Self {
        Self { dir: dir.into(), weights, cfg, cache: None }
    }

    pub fn feature_path(dir: &Path, frame: usize) -> PathBuf {
        dir.join(format!("{frame:06}.fpyr"))
    }

    fn features(&mut self, frame: usize) -> Result<FeaturePyramid> {
        if let Some((f, p)) = &self.cache {
            if *f == frame {
                return Ok(p.clone());
            }
        }
        let path = Self::feature_path(&self.dir, frame);
        let p = evalio::load_features(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        self.cache = Some((frame, p.clone()));
        Ok(p)
    }
}

impl FrameTracker for FeatureTracker {
    fn predict(&mut self, frame: usize, boxes: &[Detection]) -> Result<Vec<TrackPrediction>> {
        let t = self.features(frame)?;
        let t1 = self.features(frame + self.cfg.tau)?;
        track(&t, &t1, boxes, &self.weights, &self.cfg)
    }
}

/// Runs the tracking-first merge with the ground-truth driven tracker.
pub fn tfd_with_oracle(dets: &VideoDetectionSet, gt: &VideoDetectionSet, cfg: &RunConfig) -> Result<PipelineRun> {
    let mut tracker = OracleTracker::new(gt.clone(), cfg.oracle.clone(), cfg.tracker_seed);
    run_video(dets, gt.num_frames(), &mut tracker, &cfg.pipeline)
}

/// Optional linking followed by the final score threshold and per-class NMS.
/// Inputs below the final score threshold are dropped before linking.
pub fn link_stage(
    video: &VideoDetectionSet,
    mode: Option<LinkMode>,
    preds: Option<&PredictionSet>,
    cfg: &RunConfig,
) -> Result<VideoDetectionSet> {
    let Some(mode) = mode else {
        return Ok(finalize(video, &cfg.pipeline));
    };
    let mut passing = VideoDetectionSet::new(video.video.clone(), video.num_frames());
    let mut aligned = Vec::with_capacity(video.num_frames());
    let boxes = preds.map(|p| p.aligned_boxes(video));
    for (t, frame) in video.frames.iter().enumerate() {
        let mut row = Vec::new();
        for (i, d) in frame.iter().enumerate() {
            if d.score >= cfg.pipeline.final_score_min {
                passing.frames[t].push(d.clone());
                row.push(boxes.as_ref().map_or(d.bbox, |b| b[t][i]));
            }
        }
        aligned.push(row);
    }
    let rescored = link_and_rescore(&passing, mode, preds.map(|_| aligned.as_slice()), &cfg.link)?;
    Ok(finalize(&rescored.video, &cfg.pipeline))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantOutput {
    /// Merged boxes and their predictions, for the tracking variants.
    pub merged: Option<(VideoDetectionSet, PredictionSet)>,
    pub output: VideoDetectionSet,
}

pub fn run_variant(
    variant: Variant,
    dets: &VideoDetectionSet,
    gt: &VideoDetectionSet,
    cfg: &RunConfig,
) -> Result<VariantOutput> {
    cfg.validate()?;
    if !variant.uses_tracker() {
        return Ok(VariantOutput { merged: None, output: link_stage(dets, variant.link_mode(), None, cfg)? });
    }
    let run = tfd_with_oracle(dets, gt, cfg)?;
    let preds = PredictionSet::from_frames(&run.merged.video, &run.predictions);
    let link_preds = (variant == Variant::TfdSeqTrackNms).then_some(&preds);
    let output = link_stage(&run.merged, variant.link_mode(), link_preds, cfg)?;
    Ok(VariantOutput { merged: Some((run.merged, preds)), output })
}

/// Generates every scenario, runs `variant` on each and evaluates the pooled
/// outputs. Scenarios run on up to `jobs` threads; results keep input order.
pub fn run_scenarios(specs: &[ScenarioSpec], variant: Variant, cfg: &RunConfig, jobs: usize) -> Result<ScenarioRun> {
    let one = |spec: &ScenarioSpec| -> Result<ScenarioOutput> {
        let mut timings = BTreeMap::new();
        let clock = Instant::now();
        let (gt, dets) = generate(spec)?;
        timings.insert("generate".to_string(), ms(clock));
        let clock = Instant::now();
        let out = run_variant(variant, &dets, &gt, cfg)?;
        timings.insert("pipeline".to_string(), ms(clock));
        Ok(ScenarioOutput { gt, dets, out, timings })
    };
    let jobs = jobs.max(1);
    let mut results: Vec<Option<Result<ScenarioOutput>>> = (0..specs.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        for (chunk_specs, chunk_out) in
            specs.chunks(specs.len().div_ceil(jobs).max(1)).zip(results.chunks_mut(specs.len().div_ceil(jobs).max(1)))
        {
            s.spawn(move || {
                for (spec, slot) in chunk_specs.iter().zip(chunk_out) {
                    *slot = Some(one(spec));
                }
            });
        }
    });
    let outputs = results.into_iter().map(|r| r.expect("every scenario ran")).collect::<Result<Vec<_>>>()?;
    let clock = Instant::now();
    let preds: Vec<VideoDetectionSet> = outputs.iter().map(|o| o.out.output.clone()).collect();
    let gts: Vec<VideoDetectionSet> = outputs.iter().map(|o| o.gt.clone()).collect();
    let eval = evalio::evaluate_map(&preds, &gts, cfg.eval_iou);
    let eval_ms = ms(clock);
    Ok(ScenarioRun { outputs, eval, eval_ms })
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

#[derive(Debug, Clone)]
pub struct ScenarioOutput {
    pub gt: VideoDetectionSet,
    pub dets: VideoDetectionSet,
    pub out: VariantOutput,
    pub timings: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub outputs: Vec<ScenarioOutput>,
    pub eval: EvalResult,
    pub eval_ms: f64,
}

/// Evaluation summary written next to a run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub result: EvalResult,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("eval report serializes") + "\n"
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

pub fn detections_bytes(sets: &[VideoDetectionSet]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    evalio::write_detections(&mut buf, sets)?;
    Ok(buf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestOutputs {
    pub gt: PathBuf,
    pub dets: PathBuf,
    pub output: PathBuf,
    pub eval: PathBuf,
    /// Merged boxes and predictions, for tracking variants.
    pub merged: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
}

impl ManifestOutputs {
    pub fn in_dir(dir: &Path, tracking: bool) -> Self {
        Self {
            gt: dir.join("gt.jsonl"),
            dets: dir.join("dets.jsonl"),
            output: dir.join("output.jsonl"),
            eval: dir.join("eval.json"),
            merged: tracking.then(|| dir.join("merged.jsonl")),
            predictions: tracking.then(|| dir.join("predictions.jsonl")),
        }
    }
}

/// Record of one `run`: inputs, the full configuration and the outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub variant: Variant,
    pub spec_paths: Vec<PathBuf>,
    /// Scenario snapshots, so the run does not depend on the spec files.
    pub specs: Vec<ScenarioSpec>,
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub jobs: usize,
    /// Wall-clock milliseconds per stage, summed over scenarios.
    pub timings_ms: BTreeMap<String, f64>,
    pub outputs: ManifestOutputs,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// Runs `variant` over `specs`, writes all outputs and returns the manifest.
pub fn execute(
    specs: Vec<ScenarioSpec>,
    spec_paths: Vec<PathBuf>,
    variant: Variant,
    config: RunConfig,
    jobs: usize,
    outputs: ManifestOutputs,
) -> Result<(RunManifest, EvalResult)> {
    config.validate()?;
    let run = run_scenarios(&specs, variant, &config, jobs)?;
    let mut timings_ms = BTreeMap::new();
    for o in &run.outputs {
        for (k, v) in &o.timings {
            *timings_ms.entry(k.clone()).or_insert(0.0) += v;
        }
    }
    timings_ms.insert("evaluate".to_string(), run.eval_ms);

    let clock = Instant::now();
    let gts: Vec<_> = run.outputs.iter().map(|o| o.gt.clone()).collect();
    let dets: Vec<_> = run.outputs.iter().map(|o| o.dets.clone()).collect();
    let outs: Vec<_> = run.outputs.iter().map(|o| o.out.output.clone()).collect();
    let report = EvalReport { variant: variant.to_string(), result: run.eval.clone() };
    let mut files = StagedWrite::new();
    files.add(&outputs.gt, detections_bytes(&gts)?);
    files.add(&outputs.dets, detections_bytes(&dets)?);
    files.add(&outputs.output, detections_bytes(&outs)?);
    files.add(&outputs.eval, report.to_json().into_bytes());
    if let (Some(mp), Some(pp)) = (&outputs.merged, &outputs.predictions) {
        let merged: Vec<_> = run.outputs.iter().filter_map(|o| o.out.merged.as_ref()).map(|m| m.0.clone()).collect();
        let preds: Vec<_> = run.outputs.iter().filter_map(|o| o.out.merged.as_ref()).map(|m| m.1.clone()).collect();
        files.add(mp, detections_bytes(&merged)?);
        let mut buf = Vec::new();
        evalio::write_predictions(&mut buf, &preds)?;
        files.add(pp, buf);
    }
    files.commit()?;
    timings_ms.insert("write".to_string(), ms(clock));

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        variant,
        spec_paths,
        seeds: specs.iter().map(|s| s.seed).collect(),
        specs,
        config,
        jobs,
        timings_ms,
        outputs,
    };
    Ok((manifest, run.eval))
}

/// Re-runs a saved manifest, optionally redirecting outputs.
pub fn replay(manifest: &RunManifest, outputs: Option<ManifestOutputs>) -> Result<(RunManifest, EvalResult)> {
    execute(
        manifest.specs.clone(),
        manifest.spec_paths.clone(),
        manifest.variant,
        manifest.config.clone(),
        manifest.jobs,
        outputs.unwrap_or_else(|| manifest.outputs.clone()),
    )
}
