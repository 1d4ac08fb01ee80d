//! Run configuration as flat `section.key = value` text.
//!
//! Every key has a default, unknown keys are rejected and [`RunConfig::to_text`]
//! writes every key, so parse(to_text(c)) == c.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::condition::{ConvSite, KernelSize};
use crate::detector::{DetectParams, DetectorConfig, Schedule};
use crate::error::{Error, Result};
use crate::experiment::{PipelineConfig, RunMode};
use crate::flowfield::FlowQuality;
use crate::synthdata::{GenConfig, MotionClass};
use crate::tubes::LinkConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: RunMode,
    pub detector: DetectorConfig,
    pub schedule: Schedule,
    pub detect: DetectParams,
    pub link: LinkConfig,
    pub gen: GenConfig,
    /// Dataset directory, relative to the output directory unless absolute.
    pub data_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gen = GenConfig::default();
        RunConfig {
            seed: 0,
            mode: RunMode::TwoInOne,
            detector: DetectorConfig {
                num_classes: gen.classes.len(),
                image_size: gen.width,
                ..DetectorConfig::default()
            },
            schedule: Schedule::default(),
            detect: DetectParams::default(),
            link: LinkConfig::default(),
            gen,
            data_dir: PathBuf::from("data"),
        }
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| bad_value(key, s)))
        .collect()
}

fn parse_array<T: FromStr + Copy, const N: usize>(key: &str, value: &str) -> Result<[T; N]> {
    let v: Vec<T> = parse_list(key, value)?;
    v.try_into()
        .map_err(|_| Error::Config(format!("{key} needs exactly {N} comma-separated values")))
}

fn bad_value(key: &str, value: &str) -> Error {
    Error::Config(format!("invalid value `{value}` for {key}"))
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse::<T>().map_err(|_| bad_value(key, value))
}

/// `f64` printed so that it parses back to the same bits.
fn real(v: f64) -> String {
    format!("{v:?}")
}

impl RunConfig {
    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.detector;
        let c = &d.condition;
        let s = &self.schedule;
        let g = &self.gen;
        vec![
            ("run.seed", self.seed.to_string()),
            ("run.mode", self.mode.to_string()),
            ("paths.data", self.data_dir.display().to_string()),
            ("condition.channels", join(&c.channels)),
            ("condition.last_kernel", c.last_kernel.to_string()),
            ("condition.modulate_at", join(&c.modulate_at)),
            ("condition.flow_scale", real(c.flow_scale)),
            ("detector.widths", join(&d.widths)),
            ("detector.anchor_sizes", join(&d.anchor_sizes.map(real))),
            ("detector.tubelet_len", d.tubelet_len.to_string()),
            ("detector.pos_iou", real(d.pos_iou)),
            ("detector.neg_ratio", d.neg_ratio.to_string()),
            ("detect.conf_thresh", real(self.detect.conf_thresh)),
            ("detect.nms_iou", real(self.detect.nms_iou)),
            ("detect.top_k", self.detect.top_k.to_string()),
            ("link.lambda_iou", real(self.link.lambda_iou)),
            ("link.gap_max", self.link.gap_max.to_string()),
            ("link.min_len", self.link.min_len.to_string()),
            ("train.epochs", s.epochs.to_string()),
            ("train.lr", real(s.lr)),
            ("train.lr_gamma", real(s.lr_gamma)),
            ("train.lr_step", s.lr_step.to_string()),
            ("train.momentum", real(s.momentum)),
            ("train.clips_per_video", s.clips_per_video.to_string()),
            ("train.batch_size", s.batch_size.to_string()),
            ("gen.texture_seed", g.texture_seed.to_string()),
            ("gen.num_videos", g.num_videos.to_string()),
            ("gen.num_test", g.num_test.to_string()),
            ("gen.frames_per_video", g.frames_per_video.to_string()),
            ("gen.resolution", g.width.to_string()),
            ("gen.classes", join(&g.classes)),
            ("gen.camouflage", g.camouflage.to_string()),
            ("gen.noise_level", real(g.noise_level)),
            ("gen.sprite_min", g.sprite_min.to_string()),
            ("gen.sprite_max", g.sprite_max.to_string()),
            ("gen.speed", g.speed.to_string()),
            ("gen.drift", g.drift.to_string()),
            ("gen.flow_quality", g.flow_quality.to_string()),
        ]
    }

    /// Set one key. Derived fields (class count, image size, generator seed) follow.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let d = &mut self.detector;
        let c = &mut d.condition;
        let s = &mut self.schedule;
        let g = &mut self.gen;
        match key {
            "run.seed" => self.seed = parse(key, value)?,
            "run.mode" => self.mode = value.parse()?,
            "paths.data" => self.data_dir = PathBuf::from(value),
            "condition.channels" => c.channels = parse_list(key, value)?,
            "condition.last_kernel" => c.last_kernel = value.parse::<KernelSize>()?,
            "condition.modulate_at" => c.modulate_at = parse_list::<ConvSite>(key, value)?,
            "condition.flow_scale" => c.flow_scale = parse(key, value)?,
            "detector.widths" => d.widths = parse_array(key, value)?,
            "detector.anchor_sizes" => d.anchor_sizes = parse_array(key, value)?,
            "detector.tubelet_len" => d.tubelet_len = parse(key, value)?,
            "detector.pos_iou" => d.pos_iou = parse(key, value)?,
            "detector.neg_ratio" => d.neg_ratio = parse(key, value)?,
            "detect.conf_thresh" => self.detect.conf_thresh = parse(key, value)?,
            "detect.nms_iou" => self.detect.nms_iou = parse(key, value)?,
            "detect.top_k" => self.detect.top_k = parse(key, value)?,
            "link.lambda_iou" => self.link.lambda_iou = parse(key, value)?,
            "link.gap_max" => self.link.gap_max = parse(key, value)?,
            "link.min_len" => self.link.min_len = parse(key, value)?,
            "train.epochs" => s.epochs = parse(key, value)?,
            "train.lr" => s.lr = parse(key, value)?,
            "train.lr_gamma" => s.lr_gamma = parse(key, value)?,
            "train.lr_step" => s.lr_step = parse(key, value)?,
            "train.momentum" => s.momentum = parse(key, value)?,
            "train.clips_per_video" => s.clips_per_video = parse(key, value)?,
            "train.batch_size" => s.batch_size = parse(key, value)?,
            "gen.texture_seed" => g.texture_seed = parse(key, value)?,
            "gen.num_videos" => g.num_videos = parse(key, value)?,
            "gen.num_test" => g.num_test = parse(key, value)?,
            "gen.frames_per_video" => g.frames_per_video = parse(key, value)?,
            "gen.resolution" => {
                g.width = parse(key, value)?;
                g.height = g.width;
            }
            "gen.classes" => g.classes = parse_list::<MotionClass>(key, value)?,
            "gen.camouflage" => g.camouflage = parse(key, value)?,
            "gen.noise_level" => g.noise_level = parse(key, value)?,
            "gen.sprite_min" => g.sprite_min = parse(key, value)?,
            "gen.sprite_max" => g.sprite_max = parse(key, value)?,
            "gen.speed" => g.speed = parse(key, value)?,
            "gen.drift" => g.drift = parse(key, value)?,
            "gen.flow_quality" => g.flow_quality = value.parse::<FlowQuality>()?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        self.sync_derived();
        Ok(())
    }

    fn sync_derived(&mut self) {
        self.detector.num_classes = self.gen.classes.len();
        self.detector.image_size = self.gen.width;
        self.gen.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.detector.validate()?;
        self.schedule.validate()?;
        if self.gen.width != self.gen.height {
            return Err(Error::Config(
                "gen.resolution must describe square frames".into(),
            ));
        }
        if self.gen.frames_per_video < self.detector.tubelet_len {
            return Err(Error::Config(format!(
                "gen.frames_per_video {} is shorter than detector.tubelet_len {}",
                self.gen.frames_per_video, self.detector.tubelet_len
            )));
        }
        Ok(())
    }

    /// Parse `key = value` lines; `#` starts a comment. Unset keys keep defaults.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    i + 1
                ))
            })?;
            cfg.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.sync_derived();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).at_path(path))?;
        Self::parse_text(&text).map_err(|e| e.at_path(path))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k} = {v}").expect("writing to a String");
        }
        out
    }

    /// First 16 hex digits of the SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        short_hash(&self.to_text())
    }

    /// Hash over the keys starting with any of `prefixes`.
    pub fn hash_of(&self, prefixes: &[&str]) -> String {
        let text: String = self
            .entries()
            .into_iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        short_hash(&text)
    }

    /// Hash of the settings that determine the generated dataset.
    pub fn data_hash(&self) -> String {
        self.hash_of(&["run.seed", "gen."])
    }

    /// Hash of the settings that determine trained weights.
    pub fn model_hash(&self) -> String {
        self.hash_of(&["run.", "gen.", "condition.", "detector.", "train."])
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            detector: self.detector.clone(),
            schedule: self.schedule.clone(),
            detect: self.detect,
            link: self.link,
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        self.gen.classes.iter().map(|c| c.to_string()).collect()
    }
}

fn short_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}
