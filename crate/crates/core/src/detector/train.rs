//! Seeded SGD training of a detector on clips cut from annotated videos.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    encode_targets, match_anchors, multibox_loss_var, ClipInput, Detector, GtTarget, StreamMode,
};
use crate::error::{Error, Result};
use crate::numerics::{Sgd, StepDecay, Tape, Tensor};
use crate::tubes::GroundTruthTube;

/// Optimisation schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub lr: f64,
    /// Learning-rate factor applied every `lr_step` epochs (0 disables decay).
    pub lr_gamma: f64,
    pub lr_step: usize,
    pub momentum: f64,
    /// Clips drawn per video per epoch; 0 uses every clip start.
    pub clips_per_video: usize,
    /// Clips whose gradients are summed before one update.
    pub batch_size: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            epochs: 30,
            lr: 0.01,
            lr_gamma: 0.1,
            lr_step: 20,
            momentum: 0.9,
            clips_per_video: 2,
            batch_size: 4,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "train.lr {} must be finite and non-negative",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "train.momentum {} must lie in [0, 1)",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma.is_finite()) {
            return Err(Error::Config("train.lr_gamma must be positive".into()));
        }
        Ok(())
    }

    pub fn decay(&self) -> StepDecay {
        StepDecay {
            base_lr: self.lr,
            gamma: self.lr_gamma,
            step_size: self.lr_step,
        }
    }
}

/// One annotated video as consumed by training: per-frame RGB tensors `[3, H, W]`,
/// per-frame raw flow tensors `[2, H, W]` (may be empty for the RGB stream) and the
/// ground-truth tubes.
#[derive(Clone, Copy, Debug)]
pub struct TrainVideo<'a> {
    pub rgb: &'a [Tensor],
    pub flow: &'a [Tensor],
    pub tubes: &'a [GroundTruthTube],
}

impl TrainVideo<'_> {
    fn num_frames(&self) -> usize {
        self.rgb.len().max(self.flow.len())
    }

    /// Targets for the clip `[start, start + k)`; tubes not covering every frame of
    /// the clip are left out.
    pub fn clip_targets(&self, start: usize, k: usize) -> Vec<GtTarget> {
        self.tubes
            .iter()
            .filter_map(|t| {
                let boxes: Option<Vec<_>> =
                    (start..start + k).map(|f| t.box_at(f).copied()).collect();
                boxes.map(|boxes| GtTarget {
                    boxes,
                    class_id: t.class_id,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    /// Loss of every clip in visiting order.
    pub clip_losses: Vec<f64>,
}

/// Loss and parameter gradients of one clip; gradients are accumulated into the
/// detector's parameters.
pub fn clip_loss_backward(det: &mut Detector, video: &TrainVideo<'_>, start: usize) -> Result<f64> {
    let k = det.config().tubelet_len;
    let input = ClipInput {
        rgb: video.rgb.get(start..start + k).unwrap_or(&[]),
        flow: video.flow.get(start..start + k).unwrap_or(&[]),
    };
    let targets = video.clip_targets(start, k);
    let assignment = match_anchors(&targets, det.anchors(), det.config().pos_iou)?;
    let encoded = encode_targets(&targets, det.anchors(), &assignment)?;
    let mut tape = Tape::new();
    let out = det.forward(&mut tape, &input)?;
    let (loss, parts) = multibox_loss_var(
        &mut tape,
        out.logits,
        out.boxes,
        &assignment,
        &encoded,
        det.config().num_classes,
        det.config().neg_ratio,
    )?;
    if !parts.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss {} at clip start {start}",
            parts.total
        )));
    }
    tape.backward(loss, det.params_mut())?;
    Ok(parts.total)
}

/// Train `det` in place.
///
/// Each epoch draws `clips_per_video` clip starts per video without replacement,
/// shuffles all clips, and updates once per `batch_size` clips with the summed
/// gradient scaled by `1 / batch`. Everything random comes from `seed`, so the same
/// inputs and seed give bitwise-identical weights. On a non-finite loss the weights
/// of the last completed epoch are restored and an error is returned.
/// `on_epoch` runs after each epoch and may abort training by returning an error.
pub fn train<F>(
    det: &mut Detector,
    videos: &[TrainVideo<'_>],
    schedule: &Schedule,
    seed: u64,
    mut on_epoch: F,
) -> Result<TrainLog>
where
    F: FnMut(&EpochStats, &Detector) -> Result<()>,
{
    schedule.validate()?;
    let k = det.config().tubelet_len;
    for (i, v) in videos.iter().enumerate() {
        if v.num_frames() < k {
            return Err(Error::invalid(format!(
                "training video {i} has {} frames, clip length is {k}",
                v.num_frames()
            )));
        }
        if det.mode() != StreamMode::Rgb && v.flow.len() < v.num_frames() {
            return Err(Error::invalid(format!(
                "training video {i} lacks flow for {} stream",
                det.mode()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Sgd::new(schedule.momentum);
    let decay = schedule.decay();
    let mut log = TrainLog::default();
    let mut last_good = det.params().clone();

    for epoch in 0..schedule.epochs {
        let lr = decay.lr_at(epoch);
        let mut clips = Vec::new();
        for (vi, v) in videos.iter().enumerate() {
            let mut starts: Vec<usize> = (0..=v.num_frames() - k).collect();
            if schedule.clips_per_video > 0 && schedule.clips_per_video < starts.len() {
                starts.partial_shuffle(&mut rng, schedule.clips_per_video);
                starts.truncate(schedule.clips_per_video);
            }
            clips.extend(starts.into_iter().map(|s| (vi, s)));
        }
        clips.shuffle(&mut rng);

        let mut total = 0.0;
        for batch in clips.chunks(schedule.batch_size) {
            for &(vi, start) in batch {
                let loss = match clip_loss_backward(det, &videos[vi], start) {
                    Ok(l) => l,
                    Err(e @ Error::NonFinite(_)) => {
                        *det.params_mut() = last_good;
                        return Err(e);
                    }
                    Err(e) => return Err(e),
                };
                total += loss;
                log.clip_losses.push(loss);
            }
            opt.step(det.params_mut(), lr / batch.len() as f64)?;
        }
        if !det.params().iter().all(|p| p.tensor.all_finite()) {
            *det.params_mut() = last_good;
            return Err(Error::NonFinite(format!(
                "weights diverged in epoch {epoch}"
            )));
        }
        last_good = det.params().clone();

        let stats = EpochStats {
            epoch,
            lr,
            mean_loss: if clips.is_empty() {
                0.0
            } else {
                total / clips.len() as f64
            },
            steps: clips.len().div_ceil(schedule.batch_size),
        };
        log::info!(
            "epoch {} lr {:.3e} loss {:.5} ({} clips)",
            epoch,
            lr,
            stats.mean_loss,
            clips.len()
        );
        on_epoch(&stats, det)?;
        log.epochs.push(stats);
    }
    Ok(log)
}
