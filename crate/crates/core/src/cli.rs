//! Command-line front end.
//!
//! Every subcommand reads its inputs fully, computes, and only then writes its
//! outputs (all or none). Failures are reported with the stage that failed.

use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::detection::VideoDetectionSet;
use crate::error::{Error, Result};
use crate::evalio::{self, ElementType, EvalResult, PredictionSet, StagedWrite};
use crate::linker::LinkMode;
use crate::pipeline::run_video;
use crate::runner::{
    detections_bytes, execute, link_stage, replay, EvalReport, FeatureTracker, ManifestOutputs, PredictionLookup,
    RunConfig, RunManifest, Variant,
};
use crate::synth::{generate, render_features, RenderConfig, ScenarioSpec};
use crate::tracker::{FrameTracker, OracleNoise, OracleTracker, TrackPrediction, TrackerConfig, TrackerWeights};

#[derive(Debug, Parser)]
#[command(name = "vodkit", version, about = "Video object detection post-processing toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic ground truth and detections.
    SynthGen(SynthGenArgs),
    /// Write seeded tracker head weights.
    InitWeights(InitWeightsArgs),
    /// Predict next-frame boxes for every detection.
    Track(TrackArgs),
    /// Tracking-first merge of tracked and detected boxes.
    Tfd(TfdArgs),
    /// Tubelet linking and re-scoring, then final threshold and NMS.
    Link(LinkArgs),
    /// Per-class AP and mAP.
    Eval(EvalArgs),
    /// Full pipeline over synthetic scenarios, or a replay of a manifest.
    Run(RunArgs),
    /// Collect evaluation reports into a `variant,map` CSV.
    Plot(PlotArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Noiseless,
    Degradation,
    FastMotion,
}

impl Preset {
    pub fn spec(&self, seed: u64) -> ScenarioSpec {
        match self {
            Preset::Noiseless => ScenarioSpec { seed, ..ScenarioSpec::noiseless() },
            Preset::Degradation => ScenarioSpec::degradation(seed),
            Preset::FastMotion => ScenarioSpec::fast_motion(seed),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ScenarioArgs {
    /// Scenario files.
    #[arg(long, num_args = 1.., conflicts_with = "preset")]
    pub spec: Vec<PathBuf>,
    /// Built-in scenario family instead of files.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Seeds for --preset: `N`, `A..B` or a comma list.
    #[arg(long, default_value = "0", requires = "preset")]
    pub seeds: String,
}

impl ScenarioArgs {
    fn load(&self) -> Result<(Vec<ScenarioSpec>, Vec<PathBuf>)> {
        if let Some(preset) = self.preset {
            let specs = parse_seeds(&self.seeds)?.into_iter().map(|s| preset.spec(s)).collect();
            return Ok((specs, Vec::new()));
        }
        if self.spec.is_empty() {
            return Err(Error::Argument("give --spec files or --preset".into()));
        }
        let specs =
            self.spec.iter().map(|p| ScenarioSpec::load(p).map_err(|e| in_file(p, e))).collect::<Result<_>>()?;
        Ok((specs, self.spec.clone()))
    }
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Argument(format!("bad seed list {s:?}"));
    let num = |t: &str| t.trim().parse::<u64>().map_err(|_| bad());
    if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (num(a)?, num(b)?);
        if a >= b {
            return Err(bad());
        }
        return Ok((a..b).collect());
    }
    s.split(',').map(num).collect()
}

/// Pipeline and linking parameters: a config file, then flag overrides.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML config; flat pipeline keys or [pipeline]/[link]/[oracle] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub detect_to_track_score: Option<f64>,
    #[arg(long)]
    pub track_quality_min: Option<f64>,
    #[arg(long)]
    pub track_nms_iou: Option<f64>,
    #[arg(long)]
    pub t_merge: Option<f64>,
    #[arg(long)]
    pub final_score_min: Option<f64>,
    #[arg(long)]
    pub final_nms_iou: Option<f64>,
    #[arg(long)]
    pub link_iou: Option<f64>,
    /// Suppression threshold used while linking.
    #[arg(long)]
    pub link_nms_iou: Option<f64>,
    /// Center and log-size noise of the ground-truth tracker.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub tracker_seed: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let p = &mut cfg.pipeline;
        let overrides = [
            (&mut p.detect_to_track_score, self.detect_to_track_score),
            (&mut p.track_quality_min, self.track_quality_min),
            (&mut p.track_nms_iou, self.track_nms_iou),
            (&mut p.t_merge, self.t_merge),
            (&mut p.final_score_min, self.final_score_min),
            (&mut p.final_nms_iou, self.final_nms_iou),
        ];
        for (slot, v) in overrides {
            if let Some(v) = v {
                *slot = v;
            }
        }
        if let Some(v) = self.link_iou {
            cfg.link.link_iou = v;
        }
        if let Some(v) = self.link_nms_iou {
            cfg.link.nms_iou = v;
        }
        if let Some(s) = self.noise {
            cfg.oracle.center_sigma = s;
            cfg.oracle.scale_sigma = s;
        }
        if let Some(s) = self.tracker_seed {
            cfg.tracker_seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthGenArgs {
    #[command(flatten)]
    pub scenarios: ScenarioArgs,
    #[arg(long)]
    pub out_gt: PathBuf,
    #[arg(long)]
    pub out_dets: PathBuf,
    /// Write the scenario (single scenario only).
    #[arg(long)]
    pub out_spec: Option<PathBuf>,
    /// Render per-frame feature files `{dir}/{frame:06}.fpyr` (single scenario only).
    #[arg(long)]
    pub out_features: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub feature_channels: usize,
}

#[derive(Debug, Clone, Args)]
pub struct InitWeightsArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Channels of the fused feature map (levels x channels per level).
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    #[arg(long, default_value_t = TrackerWeights::HEAD_FILTERS)]
    pub head_filters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Search region expansion the weights are sized for.
    #[arg(long, default_value_t = 3.0)]
    pub k: f64,
}

/// Where predictions come from.
#[derive(Debug, Clone, Args)]
pub struct TrackerArgs {
    /// Directory of per-frame feature files.
    #[arg(long, requires = "weights", conflicts_with = "oracle")]
    pub features_dir: Option<PathBuf>,
    #[arg(long, requires = "features_dir")]
    pub weights: Option<PathBuf>,
    /// Track with the ground-truth driven tracker.
    #[arg(long, requires = "gt")]
    pub oracle: bool,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Search region expansion of the learned head.
    #[arg(long, default_value_t = 3.0)]
    pub k: f64,
    /// Frame gap between template and search frames (learned head, `track` only).
    #[arg(long, default_value_t = 1)]
    pub tau: usize,
}

#[derive(Debug, Clone, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub dets: PathBuf,
    #[command(flatten)]
    pub tracker: TrackerArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TfdArgs {
    #[arg(long)]
    pub dets: PathBuf,
    /// Precomputed predictions (output of `track`).
    #[arg(long)]
    pub preds: Option<PathBuf>,
    #[command(flatten)]
    pub tracker: TrackerArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Merged boxes.
    #[arg(long)]
    pub out: PathBuf,
    /// Predictions for the merged boxes, for `link --mode seqtrack`.
    #[arg(long)]
    pub out_preds: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Seqnms,
    Seqtrack,
    /// Final threshold and NMS only.
    None,
}

impl ModeArg {
    fn link_mode(&self) -> Option<LinkMode> {
        match self {
            ModeArg::Seqnms => Some(LinkMode::SeqNms),
            ModeArg::Seqtrack => Some(LinkMode::SeqTrack),
            ModeArg::None => None,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct LinkArgs {
    #[arg(long)]
    pub dets: PathBuf,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    /// Predictions aligned with --dets (output of `tfd --out-preds`).
    #[arg(long)]
    pub preds: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub preds: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    /// Also write the result as a JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Variant name stored in the report.
    #[arg(long, default_value = "")]
    pub label: String,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub scenarios: ScenarioArgs,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub iou: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Output directory; a manifest.json is written there.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Replay a saved manifest (outputs go to --out-dir if given, else to the
    /// manifest's own paths).
    #[arg(long, conflicts_with_all = ["spec", "preset", "variant", "config"])]
    pub manifest: Option<PathBuf>,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Clone, Args)]
pub struct PlotArgs {
    /// Evaluation reports (`eval.json` of `run`, or `eval --out`).
    #[arg(long, num_args = 1.., required = true)]
    pub results: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// A failure tagged with the stage it happened in.
#[derive(Debug)]
pub struct CliError {
    pub stage: &'static str,
    pub error: Error,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} failed: {}", self.stage, self.error)
    }
}

impl std::error::Error for CliError {}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, CliError>;
}

impl<T> Stage<T> for Result<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, CliError> {
        self.map_err(|error| CliError { stage, error })
    }
}

fn in_file(path: &Path, e: Error) -> Error {
    match e {
        Error::Parse { line, message } => Error::Format(format!("{}:{line}: {message}", path.display())),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

fn load_dets(path: &Path) -> Result<Vec<VideoDetectionSet>> {
    evalio::load_detections(path).map_err(|e| in_file(path, e))
}

fn load_preds(path: &Path) -> Result<Vec<PredictionSet>> {
    evalio::load_predictions(path).map_err(|e| in_file(path, e))
}

fn find_video<'a, T>(sets: &'a [T], name: &str, key: impl Fn(&T) -> &str) -> Option<&'a T> {
    sets.iter().find(|s| key(s) == name)
}

fn predictions_bytes(sets: &[PredictionSet]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    evalio::write_predictions(&mut buf, sets)?;
    Ok(buf)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from_args<I, T>(args: I, out: &mut dyn Write) -> std::result::Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)
        .map_err(|e| CliError { stage: "arguments", error: Error::Argument(e.to_string()) })?;
    dispatch(cli, out)
}

pub fn dispatch(cli: Cli, out: &mut dyn Write) -> std::result::Result<(), CliError> {
    match cli.command {
        Command::SynthGen(a) => synth_gen(a),
        Command::InitWeights(a) => init_weights(a),
        Command::Track(a) => track_cmd(a),
        Command::Tfd(a) => tfd_cmd(a),
        Command::Link(a) => link_cmd(a),
        Command::Eval(a) => eval_cmd(a, out),
        Command::Run(a) => run_cmd(a, out),
        Command::Plot(a) => plot_cmd(a),
    }
}

/// Entry point of the binary.
pub fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    match dispatch(cli, &mut stdout) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::FAILURE
        }
    }
}

fn synth_gen(a: SynthGenArgs) -> std::result::Result<(), CliError> {
    let (specs, _) = a.scenarios.load().stage("synth-gen: read scenarios")?;
    if specs.len() != 1 && (a.out_spec.is_some() || a.out_features.is_some()) {
        return Err(Error::Argument("--out-spec and --out-features need exactly one scenario".into()))
            .stage("synth-gen: arguments");
    }
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for spec in &specs {
        let (g, d) = generate(spec).stage("synth-gen: generate")?;
        gts.push(g);
        dets.push(d);
    }
    let mut files = StagedWrite::new();
    files.add(&a.out_gt, detections_bytes(&gts).stage("synth-gen: serialize")?);
    files.add(&a.out_dets, detections_bytes(&dets).stage("synth-gen: serialize")?);
    if let Some(p) = &a.out_spec {
        files.add(p, specs[0].to_toml().into_bytes());
    }
    if let Some(dir) = &a.out_features {
        let render = RenderConfig { channels: a.feature_channels, ..RenderConfig::default() };
        for t in 0..specs[0].frames {
            let pyr = render_features(&specs[0], t, &render).stage("synth-gen: render features")?;
            let mut buf = Vec::new();
            evalio::write_features(&mut buf, &pyr, ElementType::F32).stage("synth-gen: serialize")?;
            files.add(FeatureTracker::feature_path(dir, t), buf);
        }
    }
    files.commit().stage("synth-gen: write outputs")
}

/// Head geometry for search expansion `k`; the search pool follows the template pool.
fn head_config(k: f64) -> TrackerConfig {
    let d = TrackerConfig::default();
    TrackerConfig { k, search_pool: (k * d.template_pool as f64).round() as usize, ..d }
}

fn init_weights(a: InitWeightsArgs) -> std::result::Result<(), CliError> {
    let cfg = head_config(a.k);
    cfg.validate().stage("init-weights: arguments")?;
    if a.channels == 0 || a.head_filters == 0 {
        return Err(Error::Argument("channels and head filters must be positive".into())).stage("init-weights");
    }
    let w = TrackerWeights::synthetic(a.channels, a.head_filters, cfg.correlation_size(), a.seed);
    let mut files = StagedWrite::new();
    files.add(&a.out, w.to_arrays().to_bytes());
    files.commit().stage("init-weights: write outputs")
}

/// The tracker selected by the flags, built per video.
enum TrackerSource {
    Oracle(Vec<VideoDetectionSet>, OracleNoise, u64),
    Features(PathBuf, Box<TrackerWeights>, TrackerConfig),
    Lookup(Vec<PredictionSet>),
}

impl TrackerSource {
    /// `merge` is set when the predictions feed the frame-to-frame merge.
    fn from_args(t: &TrackerArgs, preds: Option<&Path>, cfg: &RunConfig, merge: bool) -> Result<Self> {
        let head = TrackerConfig { tau: t.tau, ..head_config(t.k) };
        head.validate()?;
        if t.tau != 1 && (merge || t.features_dir.is_none()) {
            return Err(Error::Argument("--tau other than 1 only applies to `track` with the learned head".into()));
        }
        if let Some(p) = preds {
            if t.oracle || t.features_dir.is_some() {
                return Err(Error::Argument("--preds replaces the tracker; drop --oracle/--features-dir".into()));
            }
            return Ok(TrackerSource::Lookup(load_preds(p)?));
        }
        if t.oracle {
            let gt_path = t.gt.as_ref().ok_or_else(|| Error::Argument("--oracle needs --gt".into()))?;
            return Ok(TrackerSource::Oracle(load_dets(gt_path)?, cfg.oracle.clone(), cfg.tracker_seed));
        }
        if let (Some(dir), Some(w)) = (&t.features_dir, &t.weights) {
            let weights = TrackerWeights::load(w).map_err(|e| in_file(w, e))?;
            return Ok(TrackerSource::Features(dir.clone(), Box::new(weights), head));
        }
        Err(Error::Argument("choose a tracker: --oracle --gt G, --features-dir X --weights W, or --preds P".into()))
    }

    /// Tracker for `video` and the number of frames to process.
    fn for_video(&self, video: &VideoDetectionSet, single: bool) -> Result<(Box<dyn FrameTracker>, usize)> {
        match self {
            TrackerSource::Oracle(gts, noise, seed) => {
                let gt = find_video(gts, &video.video, |g| &g.video)
                    .cloned()
                    .unwrap_or_else(|| VideoDetectionSet::new(video.video.clone(), 0));
                let frames = gt.num_frames().max(video.num_frames());
                Ok((Box::new(OracleTracker::new(gt, noise.clone(), *seed)), frames))
            }
            TrackerSource::Features(dir, weights, head) => {
                if !single {
                    return Err(Error::Argument("--features-dir takes a single-video detection file".into()));
                }
                let tracker = FeatureTracker::new(dir.clone(), (**weights).clone(), head.clone());
                Ok((Box::new(tracker), video.num_frames()))
            }
            TrackerSource::Lookup(sets) => {
                let set = find_video(sets, &video.video, |s| &s.video).cloned().unwrap_or_default();
                Ok((Box::new(PredictionLookup::new(set)), video.num_frames()))
            }
        }
    }
}

fn track_cmd(a: TrackArgs) -> std::result::Result<(), CliError> {
    let cfg = a.config.resolve().stage("track: config")?;
    let videos = load_dets(&a.dets).stage("track: read detections")?;
    let source = TrackerSource::from_args(&a.tracker, None, &cfg, false).stage("track: tracker")?;
    let mut sets = Vec::new();
    for v in &videos {
        let (mut tracker, frames) = source.for_video(v, videos.len() == 1).stage("track: tracker")?;
        let mut per_frame: Vec<Vec<Option<TrackPrediction>>> = Vec::new();
        for t in 0..v.num_frames() {
            if t + a.tracker.tau >= frames {
                break;
            }
            let preds = tracker.predict(t, &v.frames[t]).stage("track: predict")?;
            per_frame.push(preds.into_iter().map(Some).collect());
        }
        sets.push(PredictionSet::from_frames(&v.video, &per_frame));
    }
    let mut files = StagedWrite::new();
    files.add(&a.out, predictions_bytes(&sets).stage("track: serialize")?);
    files.commit().stage("track: write outputs")
}

fn tfd_cmd(a: TfdArgs) -> std::result::Result<(), CliError> {
    let cfg = a.config.resolve().stage("tfd: config")?;
    let videos = load_dets(&a.dets).stage("tfd: read detections")?;
    let source = TrackerSource::from_args(&a.tracker, a.preds.as_deref(), &cfg, true).stage("tfd: tracker")?;
    let mut merged = Vec::new();
    let mut preds = Vec::new();
    for v in &videos {
        let (mut tracker, frames) = source.for_video(v, videos.len() == 1).stage("tfd: tracker")?;
        let run = run_video(v, frames, tracker.as_mut(), &cfg.pipeline).stage("tfd: merge")?;
        preds.push(PredictionSet::from_frames(&run.merged.video, &run.predictions));
        merged.push(run.merged);
    }
    let mut files = StagedWrite::new();
    files.add(&a.out, detections_bytes(&merged).stage("tfd: serialize")?);
    if let Some(p) = &a.out_preds {
        files.add(p, predictions_bytes(&preds).stage("tfd: serialize")?);
    }
    files.commit().stage("tfd: write outputs")
}

fn link_cmd(a: LinkArgs) -> std::result::Result<(), CliError> {
    let cfg = a.config.resolve().stage("link: config")?;
    let videos = load_dets(&a.dets).stage("link: read detections")?;
    let mode = a.mode.link_mode();
    let preds = match &a.preds {
        Some(p) => Some(load_preds(p).stage("link: read predictions")?),
        None if mode == Some(LinkMode::SeqTrack) => {
            return Err(Error::Argument("--mode seqtrack needs --preds".into())).stage("link: arguments");
        }
        None => None,
    };
    let mut out = Vec::new();
    for v in &videos {
        let set = preds.as_ref().map(|sets| find_video(sets, &v.video, |s| &s.video).cloned().unwrap_or_default());
        // predictions only matter for seqtrack linking
        let set = set.filter(|_| mode == Some(LinkMode::SeqTrack));
        out.push(link_stage(v, mode, set.as_ref(), &cfg).stage("link: link")?);
    }
    let mut files = StagedWrite::new();
    files.add(&a.out, detections_bytes(&out).stage("link: serialize")?);
    files.commit().stage("link: write outputs")
}

fn eval_cmd(a: EvalArgs, out: &mut dyn Write) -> std::result::Result<(), CliError> {
    if !(0.0..=1.0).contains(&a.iou) {
        return Err(Error::Argument(format!("--iou {} outside [0, 1]", a.iou))).stage("eval: arguments");
    }
    let preds = load_dets(&a.preds).stage("eval: read predictions")?;
    let gt = load_dets(&a.gt).stage("eval: read ground truth")?;
    let result = evalio::evaluate_map(&preds, &gt, a.iou);
    if let Some(p) = &a.out {
        let report = EvalReport { variant: a.label.clone(), result: result.clone() };
        let mut files = StagedWrite::new();
        files.add(p, report.to_json().into_bytes());
        files.commit().stage("eval: write outputs")?;
    }
    writeln!(out, "{result}").map_err(Error::from).stage("eval: print")
}

fn run_cmd(a: RunArgs, out: &mut dyn Write) -> std::result::Result<(), CliError> {
    let (manifest, result) = match &a.manifest {
        Some(path) => {
            let saved = RunManifest::load(path).stage("run: read manifest")?;
            let outputs = a.out_dir.as_ref().map(|d| ManifestOutputs::in_dir(d, saved.variant.uses_tracker()));
            replay(&saved, outputs).stage("run: pipeline")?
        }
        None => {
            let variant =
                a.variant.ok_or_else(|| Error::Argument("--variant is required".into())).stage("run: arguments")?;
            let out_dir = a
                .out_dir
                .clone()
                .ok_or_else(|| Error::Argument("--out-dir is required".into()))
                .stage("run: arguments")?;
            let mut cfg = a.config.resolve().stage("run: config")?;
            if let Some(iou) = a.iou {
                cfg.eval_iou = iou;
                cfg.validate().stage("run: config")?;
            }
            let (specs, paths) = a.scenarios.load().stage("run: read scenarios")?;
            let outputs = ManifestOutputs::in_dir(&out_dir, variant.uses_tracker());
            execute(specs, paths, variant, cfg, a.jobs, outputs).stage("run: pipeline")?
        }
    };
    if let Some(dir) = &a.out_dir {
        manifest.save(dir.join("manifest.json")).stage("run: write manifest")?;
    }
    print_run(out, manifest.variant, &result).stage("run: print")
}

fn print_run(out: &mut dyn Write, variant: Variant, result: &EvalResult) -> Result<()> {
    writeln!(out, "variant {variant}")?;
    writeln!(out, "{result}")?;
    Ok(())
}

fn plot_cmd(a: PlotArgs) -> std::result::Result<(), CliError> {
    let mut csv = String::from("variant,map\n");
    for p in &a.results {
        let r = EvalReport::load(p).stage("plot: read results")?;
        if r.variant.contains([',', '"', '\n']) {
            csv.push_str(&format!("\"{}\",{}\n", r.variant.replace('"', "\"\""), r.result.map));
        } else {
            csv.push_str(&format!("{},{}\n", r.variant, r.result.map));
        }
    }
    let mut files = StagedWrite::new();
    files.add(&a.out, csv.into_bytes());
    files.commit().stage("plot: write outputs")
}
