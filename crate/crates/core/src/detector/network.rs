use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{generate_anchors, AnchorScale, AnchorSet, ANCHORS_PER_CELL};
use crate::condition::{
    modulate, ConditionConfig, ConvSite, ModulationParams, MotionModulation, SiteSpec,
};
use crate::error::{Error, Result};
use crate::numerics::{he_uniform, softmax_along, ParamId, ParamStore, Tape, Tensor, Var};

/// Which input a single detector consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StreamMode {
    /// RGB frames only.
    Rgb,
    /// Flow images only.
    Flow,
    /// RGB frames with low-level features modulated by flow.
    TwoInOne,
}

impl fmt::Display for StreamMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StreamMode::Rgb => "rgb",
            StreamMode::Flow => "flow",
            StreamMode::TwoInOne => "two_in_one",
        })
    }
}

impl FromStr for StreamMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(StreamMode::Rgb),
            "flow" => Ok(StreamMode::Flow),
            "two_in_one" => Ok(StreamMode::TwoInOne),
            other => Err(Error::Config(format!("unknown stream mode `{other}`"))),
        }
    }
}

/// Per-layer stride of the toy backbone.
pub const BACKBONE_STRIDES: [usize; 4] = [1, 2, 1, 2];

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    /// Number of action classes `P` (background excluded).
    pub num_classes: usize,
    /// Square input side in pixels; must be divisible by 4.
    pub image_size: usize,
    /// Output channels of conv1..conv4.
    pub widths: [usize; 4],
    /// Square anchor side (normalised) at the conv3 and conv4 heads.
    pub anchor_sizes: [f64; 2],
    /// Frames per input clip `K`; 1 is the frame-level detector.
    pub tubelet_len: usize,
    pub condition: ConditionConfig,
    pub pos_iou: f64,
    pub neg_ratio: usize,
    pub conf_thresh: f64,
    pub nms_iou: f64,
    pub top_k: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            num_classes: 4,
            image_size: 64,
            widths: [16, 32, 48, 64],
            anchor_sizes: [0.2, 0.3],
            tubelet_len: 1,
            condition: ConditionConfig::default(),
            pos_iou: 0.5,
            neg_ratio: 3,
            conf_thresh: 0.01,
            nms_iou: 0.45,
            top_k: 50,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config(
                "detector.num_classes must be positive".into(),
            ));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "detector.image_size {} must be a positive multiple of 4",
                self.image_size
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("detector.widths must be positive".into()));
        }
        if self.anchor_sizes.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
            return Err(Error::Config(
                "detector.anchor_sizes must lie in (0, 1]".into(),
            ));
        }
        if self.tubelet_len == 0 {
            return Err(Error::Config(
                "detector.tubelet_len must be positive".into(),
            ));
        }
        if !(self.pos_iou > 0.0 && self.pos_iou < 1.0) {
            return Err(Error::Config("detector.pos_iou must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.conf_thresh) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config(
                "detector thresholds must lie in [0, 1]".into(),
            ));
        }
        self.condition.validate()
    }

    /// Width and cumulative stride of every backbone layer's output.
    pub fn site_specs(&self) -> Vec<SiteSpec> {
        let mut stride = 1;
        ConvSite::ALL
            .iter()
            .zip(self.widths.iter().zip(BACKBONE_STRIDES))
            .map(|(&site, (&channels, s))| {
                stride *= s;
                SiteSpec {
                    site,
                    channels,
                    stride,
                }
            })
            .collect()
    }

    pub fn anchor_scales(&self) -> [AnchorScale; 2] {
        let g3 = self.image_size / 2;
        let g4 = self.image_size / 4;
        [
            AnchorScale {
                rows: g3,
                cols: g3,
                size: self.anchor_sizes[0],
            },
            AnchorScale {
                rows: g4,
                cols: g4,
                size: self.anchor_sizes[1],
            },
        ]
    }
}

#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}/weight"),
            he_uniform(rng, [c_out, c_in, 3, 3]),
            true,
        )?;
        let bias = store.add(format!("{name}/bias"), Tensor::zeros(&[c_out]), true)?;
        Ok(Conv {
            weight,
            bias,
            stride,
            pad: 1,
        })
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
struct Head {
    cls: Conv,
    loc: Conv,
}

/// Raw head outputs on a tape: `logits` is `[Q, P+1]`, `boxes` is `[Q, 4K]`.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub logits: Var,
    pub boxes: Var,
}

/// Per-anchor class probabilities and box offsets detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    /// `[Q, P+1]` softmax scores, background in column 0.
    pub scores: Vec<f64>,
    /// `[Q, 4K]` encoded offsets.
    pub offsets: Vec<f64>,
    pub num_classes: usize,
    pub tubelet_len: usize,
}

impl Predictions {
    pub fn num_anchors(&self) -> usize {
        self.scores.len() / (self.num_classes + 1)
    }

    pub fn score(&self, anchor: usize, class_id: usize) -> f64 {
        self.scores[anchor * (self.num_classes + 1) + class_id]
    }

    pub fn offsets_for(&self, anchor: usize, frame: usize) -> [f64; 4] {
        let base = anchor * 4 * self.tubelet_len + 4 * frame;
        self.offsets[base..base + 4].try_into().unwrap()
    }
}

/// Frames (and flows) of one input clip, `K` planar tensors each. RGB tensors are
/// `[3, H, W]` in `[0, 1]`; flow tensors are raw `[2, H, W]` pixel displacements.
#[derive(Clone, Copy, Debug)]
pub struct ClipInput<'a> {
    pub rgb: &'a [Tensor],
    pub flow: &'a [Tensor],
}

/// SSD-style detector over a four-layer conv backbone with heads at conv3 and conv4.
#[derive(Clone, Debug)]
pub struct Detector {
    mode: StreamMode,
    cfg: DetectorConfig,
    store: ParamStore,
    convs: Vec<Conv>,
    heads: Vec<Head>,
    modulation: Option<MotionModulation>,
    anchors: AnchorSet,
}

pub const PARAM_PREFIX: &str = "detector";
pub const CONDITION_PREFIX: &str = "detector/condition";

impl Detector {
    /// Build and initialise a detector. Backbone and head weights are drawn first, so
    /// an RGB and a two-in-one detector built from the same seed share them exactly.
    pub fn new(mode: StreamMode, cfg: &DetectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let k = cfg.tubelet_len;

        let mut c_in = match mode {
            StreamMode::Flow => 2,
            StreamMode::Rgb | StreamMode::TwoInOne => 3,
        };
        let mut convs = Vec::with_capacity(4);
        for (i, (&width, stride)) in cfg.widths.iter().zip(BACKBONE_STRIDES).enumerate() {
            convs.push(Conv::new(
                &mut store,
                &format!("{PARAM_PREFIX}/conv{}", i + 1),
                c_in,
                width,
                stride,
                &mut rng,
            )?);
            c_in = width;
        }

        let classes = cfg.num_classes + 1;
        let mut heads = Vec::with_capacity(2);
        for (layer, &width) in [3usize, 4].iter().zip(&cfg.widths[2..]) {
            let cls = Conv::new(
                &mut store,
                &format!("{PARAM_PREFIX}/head{layer}/cls"),
                width * k,
                classes * ANCHORS_PER_CELL,
                1,
                &mut rng,
            )?;
            let loc = Conv::new(
                &mut store,
                &format!("{PARAM_PREFIX}/head{layer}/loc"),
                width * k,
                4 * k * ANCHORS_PER_CELL,
                1,
                &mut rng,
            )?;
            heads.push(Head { cls, loc });
        }

        let modulation = match mode {
            StreamMode::TwoInOne => Some(MotionModulation::build(
                &mut store,
                CONDITION_PREFIX,
                &cfg.condition,
                &cfg.site_specs(),
                &mut rng,
            )?),
            _ => None,
        };

        Ok(Detector {
            mode,
            cfg: cfg.clone(),
            store,
            convs,
            heads,
            modulation,
            anchors: generate_anchors(&cfg.anchor_scales()),
        })
    }

    pub fn mode(&self) -> StreamMode {
        self.mode
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn modulation(&self) -> Option<&MotionModulation> {
        self.modulation.as_ref()
    }

    pub fn parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Trainable parameters added by the condition and modulation layers.
    pub fn condition_parameter_count(&self) -> usize {
        self.store.trainable_count_with_prefix(CONDITION_PREFIX)
    }

    fn check_input(&self, input: &ClipInput<'_>) -> Result<()> {
        let k = self.cfg.tubelet_len;
        let side = self.cfg.image_size;
        let need_rgb = self.mode != StreamMode::Flow;
        let need_flow = self.mode != StreamMode::Rgb;
        if need_rgb && input.rgb.len() < k {
            return Err(Error::invalid(format!(
                "clip has {} RGB frames, detector needs {k}",
                input.rgb.len()
            )));
        }
        if need_flow && input.flow.len() < k {
            return Err(Error::invalid(format!(
                "clip has {} flow fields, detector needs {k}",
                input.flow.len()
            )));
        }
        let ok = |t: &Tensor, c: usize| t.shape() == [c, side, side];
        if need_rgb && !input.rgb[..k].iter().all(|t| ok(t, 3)) {
            return Err(Error::shape(format!(
                "RGB input must be [3, {side}, {side}]"
            )));
        }
        if need_flow && !input.flow[..k].iter().all(|t| ok(t, 2)) {
            return Err(Error::shape(format!(
                "flow input must be [2, {side}, {side}]"
            )));
        }
        Ok(())
    }

    /// conv3 and conv4 feature maps for one frame.
    fn backbone(
        &self,
        tape: &mut Tape,
        rgb: Option<&Tensor>,
        flow: Option<&Tensor>,
    ) -> Result<(Var, Var)> {
        let store = &self.store;
        let (mut x, modulation): (Var, Vec<(ConvSite, ModulationParams)>) = match self.mode {
            StreamMode::Rgb => (tape.input(rgb.expect("checked").clone()), Vec::new()),
            StreamMode::Flow => {
                let scaled = flow
                    .expect("checked")
                    .data()
                    .iter()
                    .map(|v| v / self.cfg.condition.flow_scale)
                    .collect();
                let t = Tensor::new(flow.expect("checked").shape().to_vec(), scaled)?;
                (tape.input(t), Vec::new())
            }
            StreamMode::TwoInOne => {
                let m = self.modulation.as_ref().expect("two-in-one has modulation");
                let params = m.all_params(tape, store, flow.expect("checked"))?;
                (tape.input(rgb.expect("checked").clone()), params)
            }
        };
        let mut feats = Vec::with_capacity(4);
        for (site, conv) in ConvSite::ALL.iter().zip(&self.convs) {
            let mut y = conv.apply(tape, store, x)?;
            if let Some((_, m)) = modulation.iter().find(|(s, _)| s == site) {
                y = modulate(tape, y, m)?;
            }
            x = tape.relu(y);
            feats.push(x);
        }
        Ok((feats[2], feats[3]))
    }

    /// Record the forward pass for one clip of `K` frames.
    pub fn forward(&self, tape: &mut Tape, input: &ClipInput<'_>) -> Result<HeadOutputs> {
        self.check_input(input)?;
        let k = self.cfg.tubelet_len;
        let mut f3 = Vec::with_capacity(k);
        let mut f4 = Vec::with_capacity(k);
        for i in 0..k {
            let (a, b) = self.backbone(tape, input.rgb.get(i), input.flow.get(i))?;
            f3.push(a);
            f4.push(b);
        }
        let mut logits = Vec::with_capacity(2);
        let mut boxes = Vec::with_capacity(2);
        for (head, feats) in self.heads.iter().zip([f3, f4]) {
            let x = if feats.len() == 1 {
                feats[0]
            } else {
                tape.concat(&feats)?
            };
            let cls = head.cls.apply(tape, &self.store, x)?;
            logits.push(tape.chw_to_rows(cls, self.cfg.num_classes + 1)?);
            let loc = head.loc.apply(tape, &self.store, x)?;
            boxes.push(tape.chw_to_rows(loc, 4 * k)?);
        }
        Ok(HeadOutputs {
            logits: tape.concat(&logits)?,
            boxes: tape.concat(&boxes)?,
        })
    }

    /// Forward pass without keeping the tape: softmax scores and raw offsets.
    pub fn predict(&self, input: &ClipInput<'_>) -> Result<Predictions> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, input)?;
        let logits = tape.value(out.logits);
        Ok(Predictions {
            scores: softmax_along(logits.shape(), logits.data(), 1),
            offsets: tape.value(out.boxes).data().to_vec(),
            num_classes: self.cfg.num_classes,
            tubelet_len: self.cfg.tubelet_len,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> DetectorConfig {
        DetectorConfig {
            image_size: 16,
            ..DetectorConfig::default()
        }
    }

    #[test]
    fn output_shapes() {
        let cfg = small_cfg();
        let det = Detector::new(StreamMode::Rgb, &cfg, 0).unwrap();
        let q = (8 * 8 + 4 * 4) * ANCHORS_PER_CELL;
        assert_eq!(det.anchors().len(), q);
        let rgb = [Tensor::full(&[3, 16, 16], 0.5)];
        let mut tape = Tape::new();
        let out = det
            .forward(
                &mut tape,
                &ClipInput {
                    rgb: &rgb,
                    flow: &[],
                },
            )
            .unwrap();
        assert_eq!(tape.shape(out.logits), &[q, 5]);
        assert_eq!(tape.shape(out.boxes), &[q, 4]);
    }

    #[test]
    fn tubelet_output_shapes() {
        let cfg = DetectorConfig {
            tubelet_len: 3,
            ..small_cfg()
        };
        let det = Detector::new(StreamMode::TwoInOne, &cfg, 0).unwrap();
        let q = det.anchors().len();
        let rgb = vec![Tensor::full(&[3, 16, 16], 0.5); 3];
        let flow = vec![Tensor::zeros(&[2, 16, 16]); 3];
        let p = det
            .predict(&ClipInput {
                rgb: &rgb,
                flow: &flow,
            })
            .unwrap();
        assert_eq!(p.scores.len(), q * 5);
        assert_eq!(p.offsets.len(), q * 3 * 4);
        assert!(det
            .predict(&ClipInput {
                rgb: &rgb[..2],
                flow: &flow
            })
            .is_err());
    }

    #[test]
    fn flow_stream_takes_two_channels() {
        let cfg = small_cfg();
        let det = Detector::new(StreamMode::Flow, &cfg, 0).unwrap();
        assert_eq!(
            det.params()
                .by_name("detector/conv1/weight")
                .unwrap()
                .tensor
                .shape(),
            &[16, 2, 3, 3]
        );
        let flow = [Tensor::zeros(&[2, 16, 16])];
        assert!(det
            .predict(&ClipInput {
                rgb: &[],
                flow: &flow
            })
            .is_ok());
    }

    #[test]
    fn same_seed_shares_backbone() {
        let cfg = small_cfg();
        let rgb = Detector::new(StreamMode::Rgb, &cfg, 42).unwrap();
        let tio = Detector::new(StreamMode::TwoInOne, &cfg, 42).unwrap();
        for p in rgb.params().iter() {
            assert_eq!(&tio.params().by_name(&p.name).unwrap().tensor, &p.tensor);
        }
        assert_eq!(
            tio.parameter_count(),
            rgb.parameter_count() + tio.condition_parameter_count()
        );
    }
}
