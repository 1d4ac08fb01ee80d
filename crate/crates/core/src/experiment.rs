//! Training and evaluation of whole detection pipelines, and the ablation sweeps
//! built on them.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::condition::{ConditionConfig, ConvSite, KernelSize};
use crate::detector::{
    train, DetectParams, DetectionModel, Detector, DetectorConfig, Schedule, StreamMode, TrainLog,
    TrainVideo, TubeletDetection,
};
use crate::error::{Error, Result};
use crate::flowfield::{flows_for_video, FlowQuality};
use crate::numerics::Tensor;
use crate::synthdata::{Split, VideoSample};
use crate::tubes::{
    link_tubelets, video_map, ActionTube, GroundTruthTube, LinkConfig, MapReport, COCO_THRESHOLDS,
};

/// Pipeline variant: which detectors are trained and how their outputs combine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RunMode {
    Rgb,
    Flow,
    TwoStream,
    TwoInOne,
    TwoInOneTwoStream,
}

impl RunMode {
    pub const ALL: [RunMode; 5] = [
        RunMode::Rgb,
        RunMode::Flow,
        RunMode::TwoStream,
        RunMode::TwoInOne,
        RunMode::TwoInOneTwoStream,
    ];

    /// Streams to train; the first one supplies the boxes when fused.
    pub fn streams(self) -> &'static [StreamMode] {
        match self {
            RunMode::Rgb => &[StreamMode::Rgb],
            RunMode::Flow => &[StreamMode::Flow],
            RunMode::TwoStream => &[StreamMode::Rgb, StreamMode::Flow],
            RunMode::TwoInOne => &[StreamMode::TwoInOne],
            RunMode::TwoInOneTwoStream => &[StreamMode::TwoInOne, StreamMode::Flow],
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunMode::Rgb => "rgb",
            RunMode::Flow => "flow",
            RunMode::TwoStream => "two_stream",
            RunMode::TwoInOne => "two_in_one",
            RunMode::TwoInOneTwoStream => "two_in_one_two_stream",
        })
    }
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RunMode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

/// A video converted to network inputs.
#[derive(Clone, Debug)]
pub struct PreparedVideo {
    pub video_id: String,
    pub split: Split,
    pub rgb: Vec<Tensor>,
    /// Raw pixel displacements, `[2, H, W]` per frame.
    pub flow: Vec<Tensor>,
    pub tubes: Vec<GroundTruthTube>,
}

impl PreparedVideo {
    pub fn from_sample(s: &VideoSample) -> Self {
        PreparedVideo {
            video_id: s.video_id.clone(),
            split: s.split,
            rgb: s.frames.iter().map(|f| f.to_tensor()).collect(),
            flow: s.flows.iter().map(|f| f.to_tensor(1.0)).collect(),
            tubes: s.gt_tubes.clone(),
        }
    }

    /// Same video with flow recomputed by another estimator.
    pub fn with_flow_quality(s: &VideoSample, quality: FlowQuality) -> Result<Self> {
        let flows = flows_for_video(&s.frames, quality)?;
        Ok(PreparedVideo {
            flow: flows.iter().map(|f| f.to_tensor(1.0)).collect(),
            ..PreparedVideo::from_sample(s)
        })
    }

    fn as_train(&self) -> TrainVideo<'_> {
        TrainVideo {
            rgb: &self.rgb,
            flow: &self.flow,
            tubes: &self.tubes,
        }
    }
}

pub fn prepare(samples: &[VideoSample]) -> Vec<PreparedVideo> {
    samples.iter().map(PreparedVideo::from_sample).collect()
}

/// Everything needed to train and evaluate one pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub detector: DetectorConfig,
    pub schedule: Schedule,
    pub detect: DetectParams,
    pub link: LinkConfig,
}

/// Train one detector of the given stream. Initialisation uses `seed`, the clip
/// order `seed + 1`, so streams trained with the same seed start from the same
/// backbone weights and see the same clips.
pub fn train_stream(
    stream: StreamMode,
    cfg: &PipelineConfig,
    videos: &[PreparedVideo],
    seed: u64,
) -> Result<(Detector, TrainLog)> {
    let mut det = Detector::new(stream, &cfg.detector, seed)?;
    let train_videos: Vec<TrainVideo<'_>> = videos
        .iter()
        .filter(|v| v.split == Split::Train)
        .map(PreparedVideo::as_train)
        .collect();
    let log = train(
        &mut det,
        &train_videos,
        &cfg.schedule,
        seed.wrapping_add(1),
        |_, _| Ok(()),
    )?;
    Ok((det, log))
}

/// Caches trained streams so that modes sharing a stream train it once.
#[derive(Default)]
pub struct StreamCache {
    trained: HashMap<(StreamMode, String), Detector>,
}

impl StreamCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// `tag` distinguishes otherwise identical streams trained on different data
    /// (for example different flow estimators).
    pub fn get_or_train(
        &mut self,
        stream: StreamMode,
        tag: &str,
        cfg: &PipelineConfig,
        videos: &[PreparedVideo],
        seed: u64,
    ) -> Result<Detector> {
        let key = (stream, format!("{tag}|{seed}|{cfg:?}"));
        if let Some(d) = self.trained.get(&key) {
            return Ok(d.clone());
        }
        let started = Instant::now();
        let (det, log) = train_stream(stream, cfg, videos, seed)?;
        log::info!(
            "trained {stream} stream ({tag}, seed {seed}) in {:.1}s, final loss {:.4}",
            started.elapsed().as_secs_f64(),
            log.epochs.last().map_or(f64::NAN, |e| e.mean_loss)
        );
        self.trained.insert(key, det.clone());
        Ok(det)
    }
}

/// Train every stream of `mode` and combine them.
pub fn build_model(
    mode: RunMode,
    cfg: &PipelineConfig,
    videos: &[PreparedVideo],
    seed: u64,
    tag: &str,
    cache: &mut StreamCache,
) -> Result<DetectionModel> {
    let mut dets = Vec::new();
    for &stream in mode.streams() {
        // The RGB stream ignores flow, so it is shared across flow estimators.
        let tag = if stream == StreamMode::Rgb { "" } else { tag };
        dets.push(cache.get_or_train(stream, tag, cfg, videos, seed)?);
    }
    let mut it = dets.into_iter();
    let first = it.next().expect("every mode has a stream");
    match it.next() {
        None => Ok(DetectionModel::Single(first)),
        Some(second) => DetectionModel::two_stream(first, second),
    }
}

/// Tubes of every class in one video.
pub fn video_tubes(
    model: &DetectionModel,
    video: &PreparedVideo,
    cfg: &PipelineConfig,
) -> Result<Vec<ActionTube>> {
    let per_start: Vec<Vec<TubeletDetection>> =
        model.detect_video(&video.rgb, &video.flow, &cfg.detect)?;
    let mut tubes = Vec::new();
    for class_id in 1..=cfg.detector.num_classes {
        tubes.extend(link_tubelets(&per_start, class_id, &cfg.link));
    }
    Ok(tubes)
}

/// Result of evaluating a model on the test split.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MapReport,
    pub map_50: f64,
    pub map_50_95: f64,
    pub seconds_per_frame: f64,
    pub parameter_count: usize,
    pub tubes: Vec<(String, ActionTube)>,
}

/// Thresholds reported by default: 0.2, 0.5, 0.75 then 0.50..0.95 for the average.
pub fn report_thresholds() -> Vec<f64> {
    let mut t = vec![0.2, 0.5, 0.75];
    for c in COCO_THRESHOLDS {
        if !t.contains(&c) {
            t.push(c);
        }
    }
    t
}

/// mAP averaged over 0.50, 0.55, ..., 0.95 taken from a report that holds them.
pub fn coco_average(report: &MapReport) -> f64 {
    let vals: Vec<f64> = COCO_THRESHOLDS
        .iter()
        .filter_map(|&t| report.map_at(t))
        .collect();
    if vals.is_empty() {
        return 0.0;
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

pub fn evaluate(
    model: &DetectionModel,
    videos: &[PreparedVideo],
    cfg: &PipelineConfig,
) -> Result<Evaluation> {
    let test: Vec<&PreparedVideo> = videos.iter().filter(|v| v.split == Split::Test).collect();
    let started = Instant::now();
    let mut tubes = Vec::new();
    let mut frames = 0usize;
    for v in &test {
        frames += v.rgb.len().max(v.flow.len());
        for t in video_tubes(model, v, cfg)? {
            tubes.push((v.video_id.clone(), t));
        }
    }
    let seconds_per_frame = started.elapsed().as_secs_f64() / frames.max(1) as f64;
    let gts: Vec<(String, GroundTruthTube)> = test
        .iter()
        .flat_map(|v| v.tubes.iter().map(|t| (v.video_id.clone(), t.clone())))
        .collect();
    let report = video_map(&tubes, &gts, &report_thresholds())?;
    Ok(Evaluation {
        map_50: report.map_at(0.5).unwrap_or(0.0),
        map_50_95: coco_average(&report),
        report,
        seconds_per_frame,
        parameter_count: model.parameter_count(),
        tubes,
    })
}

/// Axis of an ablation sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AblationAxis {
    /// Single modulation site conv1..conv4 (two-in-one).
    Site,
    /// Last condition kernel 1x1 vs 3x3 (two-in-one).
    Kernel,
    /// Fast vs iterative flow for the two-in-one stream.
    FlowQuality,
    /// Every pipeline variant.
    Mode,
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationAxis::Site => "site",
            AblationAxis::Kernel => "kernel",
            AblationAxis::FlowQuality => "flow_quality",
            AblationAxis::Mode => "mode",
        })
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "site" => Ok(AblationAxis::Site),
            "kernel" => Ok(AblationAxis::Kernel),
            "flow_quality" => Ok(AblationAxis::FlowQuality),
            "mode" => Ok(AblationAxis::Mode),
            other => Err(Error::Config(format!(
                "unknown ablation axis `{other}` (expected site|kernel|flow_quality|mode)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub value: String,
    pub map_50: f64,
    pub map_50_95: f64,
    pub parameter_count: usize,
    pub seconds_per_frame: f64,
}

pub const ABLATION_CSV_HEADER: &str = "value,map_50,map_50_95,params,sec_per_frame";

impl AblationRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.6},{:.6},{},{:.6e}",
            self.value, self.map_50, self.map_50_95, self.parameter_count, self.seconds_per_frame
        )
    }
}

/// One sweep point: a label, the pipeline config, the mode and the flow estimator.
struct SweepPoint {
    value: String,
    cfg: PipelineConfig,
    mode: RunMode,
    quality: FlowQuality,
}

fn sweep_points(
    axis: AblationAxis,
    base: &PipelineConfig,
    base_mode: RunMode,
    base_quality: FlowQuality,
) -> Vec<SweepPoint> {
    let with_condition = |f: &dyn Fn(&mut ConditionConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg.detector.condition);
        cfg
    };
    match axis {
        AblationAxis::Site => ConvSite::ALL
            .iter()
            .map(|&site| SweepPoint {
                value: site.to_string(),
                cfg: with_condition(&|c| c.modulate_at = vec![site]),
                mode: RunMode::TwoInOne,
                quality: base_quality,
            })
            .collect(),
        AblationAxis::Kernel => [KernelSize::K1x1, KernelSize::K3x3]
            .iter()
            .map(|&k| SweepPoint {
                value: k.to_string(),
                cfg: with_condition(&|c| c.last_kernel = k),
                mode: RunMode::TwoInOne,
                quality: base_quality,
            })
            .collect(),
        AblationAxis::FlowQuality => [FlowQuality::Fast, FlowQuality::Iterative]
            .iter()
            .map(|&q| SweepPoint {
                value: q.to_string(),
                cfg: base.clone(),
                mode: if base_mode == RunMode::Rgb {
                    RunMode::TwoInOne
                } else {
                    base_mode
                },
                quality: q,
            })
            .collect(),
        AblationAxis::Mode => RunMode::ALL
            .iter()
            .map(|&m| SweepPoint {
                value: m.to_string(),
                cfg: base.clone(),
                mode: m,
                quality: base_quality,
            })
            .collect(),
    }
}

/// Run a sweep. `samples` supply frames and annotations; flows are recomputed for
/// each estimator the sweep needs. `on_row` sees each row as soon as it is done, so
/// a failure later in the sweep keeps earlier rows.
pub fn ablate<F>(
    axis: AblationAxis,
    base: &PipelineConfig,
    base_mode: RunMode,
    base_quality: FlowQuality,
    samples: &[VideoSample],
    seed: u64,
    mut on_row: F,
) -> Result<Vec<AblationRow>>
where
    F: FnMut(&AblationRow) -> Result<()>,
{
    let mut prepared: HashMap<FlowQuality, Vec<PreparedVideo>> = HashMap::new();
    let mut cache = StreamCache::new();
    let mut rows = Vec::new();
    for point in sweep_points(axis, base, base_mode, base_quality) {
        if let std::collections::hash_map::Entry::Vacant(e) = prepared.entry(point.quality) {
            let videos = samples
                .iter()
                .map(|s| PreparedVideo::with_flow_quality(s, point.quality))
                .collect::<Result<Vec<_>>>()?;
            e.insert(videos);
        }
        let videos = &prepared[&point.quality];
        let model = build_model(
            point.mode,
            &point.cfg,
            videos,
            seed,
            &point.quality.to_string(),
            &mut cache,
        )?;
        let eval = evaluate(&model, videos, &point.cfg)?;
        let row = AblationRow {
            value: point.value,
            map_50: eval.map_50,
            map_50_95: eval.map_50_95,
            parameter_count: eval.parameter_count,
            seconds_per_frame: eval.seconds_per_frame,
        };
        on_row(&row)?;
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for m in RunMode::ALL {
            assert_eq!(m.to_string().parse::<RunMode>().unwrap(), m);
        }
        assert!("both".parse::<RunMode>().is_err());
    }

    #[test]
    fn thresholds_cover_report_set() {
        let t = report_thresholds();
        assert_eq!(&t[..3], &[0.2, 0.5, 0.75]);
        assert_eq!(t.len(), 11);
    }
}
