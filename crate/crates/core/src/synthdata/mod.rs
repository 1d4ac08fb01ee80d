//! Synthetic videos of a textured sprite whose class is defined only by how it
//! moves.
//!
//! With camouflage on, the sprite is cut from the same texture distribution as the
//! background, so a single frame says almost nothing about where the actor is or
//! what it does; the motion between frames says everything.

mod io;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use io::{read_dataset, write_dataset, GT_INDEX_FILE, MANIFEST_FILE};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::flowfield::{flows_for_video, FlowField, FlowQuality, Frame};
use crate::tubes::GroundTruthTube;

/// Motion pattern defining a class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MotionClass {
    MoveUp,
    MoveDown,
    OscillateHorizontal,
    Diagonal,
}

impl MotionClass {
    pub const ALL: [MotionClass; 4] = [
        MotionClass::MoveUp,
        MotionClass::MoveDown,
        MotionClass::OscillateHorizontal,
        MotionClass::Diagonal,
    ];

    /// Largest per-axis travel away from the start position over `frames` frames,
    /// as (negative x, positive x, negative y, positive y) extents.
    fn extents(self, frames: usize, speed: usize) -> [usize; 4] {
        let travel = speed * frames.saturating_sub(1);
        match self {
            MotionClass::MoveUp => [0, 0, travel, 0],
            MotionClass::MoveDown => [0, 0, 0, travel],
            MotionClass::OscillateHorizontal => [0, speed * OSCILLATION_HALF_PERIOD, 0, 0],
            MotionClass::Diagonal => {
                let d = DIAGONAL_SPEED * frames.saturating_sub(1);
                [0, d, 0, d]
            }
        }
    }
}

impl fmt::Display for MotionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MotionClass::MoveUp => "move_up",
            MotionClass::MoveDown => "move_down",
            MotionClass::OscillateHorizontal => "oscillate_horizontal",
            MotionClass::Diagonal => "diagonal",
        })
    }
}

impl FromStr for MotionClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MotionClass::ALL
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown motion class `{s}`")))
    }
}

/// Frames between direction reversals of the horizontal oscillation.
pub const OSCILLATION_HALF_PERIOD: usize = 4;
/// Per-axis speed of the diagonal class in pixels per frame.
pub const DIAGONAL_SPEED: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    /// Seed for classes, sprite sizes and trajectories.
    pub seed: u64,
    /// Seed for background and sprite textures.
    pub texture_seed: u64,
    pub num_videos: usize,
    /// The last `num_test` videos form the test split.
    pub num_test: usize,
    pub frames_per_video: usize,
    pub width: usize,
    pub height: usize,
    pub classes: Vec<MotionClass>,
    pub camouflage: bool,
    /// Amplitude of the per-frame uniform pixel noise.
    pub noise_level: f64,
    /// Smallest and largest sprite side in pixels.
    pub sprite_min: usize,
    pub sprite_max: usize,
    /// Vertical speed of the up/down classes and horizontal speed of the
    /// oscillation, pixels per frame.
    pub speed: usize,
    /// Global background drift of one pixel per frame in a random direction.
    pub drift: bool,
    pub flow_quality: FlowQuality,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            texture_seed: 1,
            num_videos: 60,
            num_test: 20,
            frames_per_video: 12,
            width: 64,
            height: 64,
            classes: MotionClass::ALL.to_vec(),
            camouflage: true,
            noise_level: 0.02,
            sprite_min: 14,
            sprite_max: 18,
            speed: 3,
            drift: false,
            flow_quality: FlowQuality::Iterative,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Config(
                "gen.classes needs at least two classes".into(),
            ));
        }
        let mut seen = self.classes.clone();
        seen.sort_by_key(|c| c.to_string());
        seen.dedup();
        if seen.len() != self.classes.len() {
            return Err(Error::Config("gen.classes lists a class twice".into()));
        }
        if self.frames_per_video == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::Config(
                "gen frame count and resolution must be positive".into(),
            ));
        }
        if self.num_test > self.num_videos {
            return Err(Error::Config(format!(
                "gen.num_test {} exceeds gen.num_videos {}",
                self.num_test, self.num_videos
            )));
        }
        if self.sprite_min == 0 || self.sprite_min > self.sprite_max {
            return Err(Error::Config("gen sprite size range is empty".into()));
        }
        if !(0.0..=0.5).contains(&self.noise_level) {
            return Err(Error::Config("gen.noise_level must lie in [0, 0.5]".into()));
        }
        for class in &self.classes {
            let e = class.extents(self.frames_per_video, self.speed);
            if self.sprite_max + e[0] + e[1] > self.width
                || self.sprite_max + e[2] + e[3] > self.height
            {
                return Err(Error::Config(format!(
                    "sprite of {} px moving as {class} over {} frames does not fit a {}x{} frame",
                    self.sprite_max, self.frames_per_video, self.width, self.height
                )));
            }
        }
        Ok(())
    }

    /// Class id (1-based) of a motion class.
    pub fn class_id(&self, class: MotionClass) -> Option<usize> {
        self.classes.iter().position(|&c| c == class).map(|i| i + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub video_id: String,
    pub split: Split,
    pub frames: Vec<Frame>,
    /// Flow from each frame to the next; the last frame repeats the previous flow.
    pub flows: Vec<FlowField>,
    pub gt_tubes: Vec<GroundTruthTube>,
}

impl VideoSample {
    pub fn class_id(&self) -> Option<usize> {
        self.gt_tubes.first().map(|t| t.class_id)
    }
}

fn mix(seed: u64, index: u64) -> u64 {
    // splitmix64 finaliser over seed and index
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Smoothed RGB noise in `[0, 1]`: uniform noise, two separable box blurs of radius
/// 2 with wrap-around, then contrast restored around 0.5.
fn noise_texture(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Vec<f64> {
    let mut t: Vec<f64> = (0..w * h * 3).map(|_| rng.gen::<f64>()).collect();
    const R: usize = 2;
    let norm = (2 * R + 1) as f64;
    for _ in 0..2 {
        let mut tmp = vec![0.0; t.len()];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut s = 0.0;
                    for d in 0..=2 * R {
                        let xx = (x + w + d - R) % w;
                        s += t[(y * w + xx) * 3 + c];
                    }
                    tmp[(y * w + x) * 3 + c] = s / norm;
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut s = 0.0;
                    for d in 0..=2 * R {
                        let yy = (y + h + d - R) % h;
                        s += tmp[(yy * w + x) * 3 + c];
                    }
                    t[(y * w + x) * 3 + c] = s / norm;
                }
            }
        }
    }
    // Two blurs shrink the spread of uniform noise by roughly 4x.
    t.iter_mut()
        .for_each(|v| *v = (0.5 + 4.0 * (*v - 0.5)).clamp(0.0, 1.0));
    t
}

/// Sprite top-left corner at every frame.
fn trajectory(
    class: MotionClass,
    start: (i64, i64),
    frames: usize,
    speed: i64,
    sx: i64,
    sy: i64,
) -> Vec<(i64, i64)> {
    let half = OSCILLATION_HALF_PERIOD as i64;
    (0..frames as i64)
        .map(|t| match class {
            MotionClass::MoveUp => (start.0, start.1 - speed * t),
            MotionClass::MoveDown => (start.0, start.1 + speed * t),
            MotionClass::OscillateHorizontal => {
                let phase = t % (2 * half);
                let offset = if phase <= half {
                    phase
                } else {
                    2 * half - phase
                };
                (start.0 + speed * offset, start.1)
            }
            MotionClass::Diagonal => {
                let d = DIAGONAL_SPEED as i64;
                (start.0 + sx * d * t, start.1 + sy * d * t)
            }
        })
        .collect()
}

fn render_video(cfg: &GenConfig, index: usize) -> Result<(Vec<Frame>, GroundTruthTube)> {
    let (w, h) = (cfg.width, cfg.height);
    let frames = cfg.frames_per_video;
    let mut motion_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, index as u64));
    let mut texture_rng = ChaCha8Rng::seed_from_u64(mix(cfg.texture_seed, index as u64));

    let class_idx = index % cfg.classes.len();
    let class = cfg.classes[class_idx];
    let sw = motion_rng.gen_range(cfg.sprite_min..=cfg.sprite_max);
    let sh = motion_rng.gen_range(cfg.sprite_min..=cfg.sprite_max);
    let sx: i64 = if motion_rng.gen::<bool>() { 1 } else { -1 };
    let sy: i64 = if motion_rng.gen::<bool>() { 1 } else { -1 };
    let [ex_neg, ex_pos, ey_neg, ey_pos] = class.extents(frames, cfg.speed);
    // Diagonal extents are stored as positive travel; flip to the sampled signs.
    let (ex_neg, ex_pos) = if class == MotionClass::Diagonal && sx < 0 {
        (ex_pos, ex_neg)
    } else {
        (ex_neg, ex_pos)
    };
    let (ey_neg, ey_pos) = if class == MotionClass::Diagonal && sy < 0 {
        (ey_pos, ey_neg)
    } else {
        (ey_neg, ey_pos)
    };
    let x0 = motion_rng.gen_range(ex_neg..=w - sw - ex_pos) as i64;
    let y0 = motion_rng.gen_range(ey_neg..=h - sh - ey_pos) as i64;
    let path = trajectory(class, (x0, y0), frames, cfg.speed as i64, sx, sy);
    let drift: (i64, i64) = if cfg.drift {
        [(1, 0), (-1, 0), (0, 1), (0, -1)][motion_rng.gen_range(0..4)]
    } else {
        (0, 0)
    };

    let background = noise_texture(&mut texture_rng, w, h);
    let mut sprite = noise_texture(&mut texture_rng, w, h);
    if !cfg.camouflage {
        // A saturated red cast makes the actor stand out in a single frame.
        for px in sprite.chunks_mut(3) {
            px[0] = 0.6 + 0.4 * px[0];
            px[1] *= 0.4;
            px[2] *= 0.4;
        }
    }

    let mut out = Vec::with_capacity(frames);
    let mut boxes = Vec::with_capacity(frames);
    for (t, &(px, py)) in path.iter().enumerate() {
        let mut data = vec![0.0; w * h * 3];
        let (dx, dy) = (drift.0 * t as i64, drift.1 * t as i64);
        for y in 0..h {
            for x in 0..w {
                let bx = (x as i64 - dx).rem_euclid(w as i64) as usize;
                let by = (y as i64 - dy).rem_euclid(h as i64) as usize;
                let inside = (x as i64) >= px
                    && (x as i64) < px + sw as i64
                    && (y as i64) >= py
                    && (y as i64) < py + sh as i64;
                let src = if inside {
                    // The sprite carries its texture along with it.
                    let u = (x as i64 - px) as usize;
                    let v = (y as i64 - py) as usize;
                    &sprite[(v * w + u) * 3..(v * w + u) * 3 + 3]
                } else {
                    &background[(by * w + bx) * 3..(by * w + bx) * 3 + 3]
                };
                for c in 0..3 {
                    let n = if cfg.noise_level > 0.0 {
                        texture_rng.gen_range(-cfg.noise_level..=cfg.noise_level)
                    } else {
                        0.0
                    };
                    data[(y * w + x) * 3 + c] = (src[c] + n).clamp(0.0, 1.0);
                }
            }
        }
        out.push(Frame::new(w, h, data)?);
        boxes.push(BBox::new(
            px as f64 / w as f64,
            py as f64 / h as f64,
            (px + sw as i64) as f64 / w as f64,
            (py + sh as i64) as f64 / h as f64,
        ));
    }
    Ok((out, GroundTruthTube::new(class_idx + 1, 0, boxes)?))
}

/// Generate the dataset. Video `i` has class `i mod P`, so classes are balanced in
/// both splits whenever the split sizes are multiples of `P`.
pub fn generate(cfg: &GenConfig) -> Result<Vec<VideoSample>> {
    cfg.validate()?;
    let first_test = cfg.num_videos - cfg.num_test;
    (0..cfg.num_videos)
        .map(|i| {
            let (frames, tube) = render_video(cfg, i)?;
            let flows = flows_for_video(&frames, cfg.flow_quality)?;
            Ok(VideoSample {
                video_id: format!("vid{i:04}"),
                split: if i < first_test {
                    Split::Train
                } else {
                    Split::Test
                },
                frames,
                flows,
                gt_tubes: vec![tube],
            })
        })
        .collect()
}

/// Same frames in a random order per video: appearance kept, motion destroyed.
/// Boxes follow their frames and flows are recomputed on the shuffled sequence.
pub fn frame_shuffled(
    samples: &[VideoSample],
    seed: u64,
    quality: FlowQuality,
) -> Result<Vec<VideoSample>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, i as u64));
            let mut order: Vec<usize> = (0..s.frames.len()).collect();
            order.shuffle(&mut rng);
            let frames: Vec<Frame> = order.iter().map(|&j| s.frames[j].clone()).collect();
            let gt_tubes = s
                .gt_tubes
                .iter()
                .map(|t| {
                    let boxes: Option<Vec<BBox>> =
                        order.iter().map(|&j| t.box_at(j).copied()).collect();
                    boxes
                        .ok_or_else(|| {
                            Error::invalid(format!(
                                "tube of {} does not span the whole video",
                                s.video_id
                            ))
                        })
                        .and_then(|b| GroundTruthTube::new(t.class_id, 0, b))
                })
                .collect::<Result<_>>()?;
            Ok(VideoSample {
                video_id: format!("{}_shuffled", s.video_id),
                split: s.split,
                flows: flows_for_video(&frames, quality)?,
                frames,
                gt_tubes,
            })
        })
        .collect()
}

/// Mean absolute flow magnitude inside and outside the ground-truth boxes over all
/// frames of the given videos.
pub fn flow_contrast(samples: &[VideoSample]) -> (f64, f64) {
    let (mut sin, mut nin, mut sout, mut nout) = (0.0, 0usize, 0.0, 0usize);
    for s in samples {
        for (t, f) in s.flows.iter().enumerate() {
            let (w, h) = (f.width(), f.height());
            for y in 0..h {
                for x in 0..w {
                    let (u, v) = f.at(x, y);
                    let m = (u.abs() + v.abs()) as f64;
                    let (cx, cy) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
                    let inside = s.gt_tubes.iter().any(|g| {
                        g.box_at(t).is_some_and(|b| {
                            cx >= b.x_min && cx < b.x_max && cy >= b.y_min && cy < b.y_max
                        })
                    });
                    if inside {
                        sin += m;
                        nin += 1;
                    } else {
                        sout += m;
                        nout += 1;
                    }
                }
            }
        }
    }
    (sin / nin.max(1) as f64, sout / nout.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(classes: Vec<MotionClass>, camouflage: bool) -> GenConfig {
        GenConfig {
            num_videos: 4,
            num_test: 2,
            classes,
            camouflage,
            flow_quality: FlowQuality::Fast,
            ..GenConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        let cfg = small(vec![MotionClass::MoveUp, MotionClass::MoveDown], false);
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }

    #[test]
    fn move_up_rises() {
        let cfg = small(MotionClass::ALL.to_vec(), true);
        let data = generate(&cfg).unwrap();
        let up = data
            .iter()
            .find(|s| s.class_id() == cfg.class_id(MotionClass::MoveUp))
            .unwrap();
        let cy: Vec<f64> = up.gt_tubes[0]
            .boxes
            .iter()
            .map(|b| b.to_center().cy)
            .collect();
        assert!(cy.windows(2).all(|w| w[1] < w[0]), "{cy:?}");
        assert_eq!(up.flows.len(), up.frames.len());
        assert_eq!(data.iter().filter(|s| s.split == Split::Test).count(), 2);
    }

    #[test]
    fn boxes_stay_in_frame() {
        let cfg = GenConfig {
            num_videos: 16,
            num_test: 0,
            flow_quality: FlowQuality::Fast,
            ..GenConfig::default()
        };
        for s in generate(&cfg).unwrap() {
            for b in &s.gt_tubes[0].boxes {
                assert!(
                    b.x_min >= 0.0 && b.y_min >= 0.0 && b.x_max <= 1.0 && b.y_max <= 1.0,
                    "{b:?}"
                );
            }
        }
    }

    #[test]
    fn texture_seed_keeps_labels() {
        let a = small(MotionClass::ALL.to_vec(), true);
        let b = GenConfig {
            texture_seed: 99,
            ..a.clone()
        };
        let (da, db) = (generate(&a).unwrap(), generate(&b).unwrap());
        for (x, y) in da.iter().zip(&db) {
            assert_eq!(x.gt_tubes, y.gt_tubes);
            assert_ne!(x.frames, y.frames);
        }
    }

    #[test]
    fn oversized_sprite_rejected() {
        let cfg = GenConfig {
            sprite_min: 40,
            sprite_max: 40,
            ..GenConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn moving_sprite_dominates_flow() {
        let cfg = small(MotionClass::ALL.to_vec(), true);
        let (inside, outside) = flow_contrast(&generate(&cfg).unwrap());
        assert!(inside >= 3.0 * outside, "inside {inside} outside {outside}");
    }

    #[test]
    fn shuffled_variant_keeps_frames() {
        let cfg = small(vec![MotionClass::MoveUp, MotionClass::MoveDown], true);
        let data = generate(&cfg).unwrap();
        let shuffled = frame_shuffled(&data, 5, FlowQuality::Fast).unwrap();
        for (s, o) in shuffled.iter().zip(&data) {
            assert_eq!(s.gt_tubes[0].class_id, o.gt_tubes[0].class_id);
            for f in &s.frames {
                assert!(o.frames.contains(f));
            }
        }
    }
}
