//! SSD-style detector: anchors, matching, multibox loss, the network, post-processing
//! and training.

mod anchors;
mod detect;
mod loss;
mod matching;
mod network;
mod train;

pub use anchors::{generate_anchors, AnchorScale, AnchorSet, ANCHORS_PER_CELL};
pub use detect::{
    detections_from_predictions, fuse_two_stream, mean_iou, nms, nms_by, tubelets_from_predictions,
    DetectParams, Detection, DetectionModel, TubeletDetection,
};
pub use loss::{multibox_loss, multibox_loss_var, smooth_l1, MultiboxLoss};
pub use matching::{
    anchor_gt_overlap, encode_targets, match_anchors, AnchorMatch, GtTarget, MatchAssignment,
};
pub use network::{
    ClipInput, Detector, DetectorConfig, HeadOutputs, Predictions, StreamMode, BACKBONE_STRIDES,
    CONDITION_PREFIX, PARAM_PREFIX,
};
pub use train::{clip_loss_backward, train, EpochStats, Schedule, TrainLog, TrainVideo};
