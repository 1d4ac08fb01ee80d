use std::cmp::Ordering;

use super::ActionTube;
use crate::boxes::{iou, BBox};
use crate::detector::{mean_iou, Detection, TubeletDetection};

/// Constants of the greedy linker.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkConfig {
    /// Weight of the overlap term in `score + lambda_iou * IoU`.
    pub lambda_iou: f64,
    /// A tube stays open while the gap since its last box is at most this many frames.
    pub gap_max: usize,
    /// Tubes spanning fewer frames are dropped.
    pub min_len: usize,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            lambda_iou: 1.0,
            gap_max: 1,
            min_len: 2,
        }
    }
}

/// The sequence of decision values the greedy linker maximises, in decision order:
/// one entry per (frame, open tube) pair, visiting open tubes by descending mean
/// score then creation order. An entry is `score + lambda_iou * IoU` of the chosen
/// detection, or negative infinity when the tube found no overlapping candidate.
/// Linkings are compared lexicographically.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinkObjective {
    pub values: Vec<f64>,
}

struct Chain {
    frames: Vec<usize>,
    boxes: Vec<BBox>,
    scores: Vec<f64>,
}

impl Chain {
    fn mean_score(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }

    fn last_frame(&self) -> usize {
        *self.frames.last().unwrap()
    }

    fn span(&self) -> usize {
        self.last_frame() - self.frames[0] + 1
    }

    /// Box per frame with linear interpolation across gaps.
    fn dense_boxes(&self) -> Vec<BBox> {
        let mut out = vec![self.boxes[0]];
        for w in 1..self.frames.len() {
            let (f0, f1) = (self.frames[w - 1], self.frames[w]);
            let (a, b) = (self.boxes[w - 1], self.boxes[w]);
            for f in f0 + 1..f1 {
                let t = (f - f0) as f64 / (f1 - f0) as f64;
                let lerp = |x: f64, y: f64| x + t * (y - x);
                out.push(BBox::new(
                    lerp(a.x_min, b.x_min),
                    lerp(a.y_min, b.y_min),
                    lerp(a.x_max, b.x_max),
                    lerp(a.y_max, b.y_max),
                ));
            }
            out.push(b);
        }
        out
    }
}

fn priority(a: (f64, usize), b: (f64, usize)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

/// Greedy frame-by-frame linking of one class.
///
/// `per_frame[t]` holds the detections of frame `t` (other classes are ignored).
/// At each frame the open tubes, by descending mean score, each take the unclaimed
/// detection maximising `score + lambda_iou * IoU(last box, detection)` among those
/// with positive IoU; leftover detections open new tubes. The tube score is the
/// mean score of its detections. Also returns the objective trace.
pub fn link_detections(
    per_frame: &[Vec<Detection>],
    class_id: usize,
    cfg: &LinkConfig,
) -> (Vec<ActionTube>, LinkObjective) {
    let mut chains: Vec<Chain> = Vec::new();
    let mut objective = LinkObjective::default();
    for (t, dets) in per_frame.iter().enumerate() {
        let cands: Vec<&Detection> = dets.iter().filter(|d| d.class_id == class_id).collect();
        let mut open: Vec<usize> = (0..chains.len())
            .filter(|&c| t - chains[c].last_frame() <= cfg.gap_max)
            .collect();
        open.sort_by(|&a, &b| priority((chains[a].mean_score(), a), (chains[b].mean_score(), b)));
        let mut claimed = vec![false; cands.len()];
        for c in open {
            let last = *chains[c].boxes.last().unwrap();
            let mut best: Option<(f64, usize)> = None;
            for (j, d) in cands.iter().enumerate() {
                if claimed[j] {
                    continue;
                }
                let o = iou(&last, &d.bbox);
                if o <= 0.0 {
                    continue;
                }
                let value = d.score + cfg.lambda_iou * o;
                if best.is_none_or(|(v, _)| value > v) {
                    best = Some((value, j));
                }
            }
            match best {
                Some((value, j)) => {
                    claimed[j] = true;
                    let chain = &mut chains[c];
                    chain.frames.push(t);
                    chain.boxes.push(cands[j].bbox);
                    chain.scores.push(cands[j].score);
                    objective.values.push(value);
                }
                None => objective.values.push(f64::NEG_INFINITY),
            }
        }
        for (j, d) in cands.iter().enumerate() {
            if !claimed[j] {
                chains.push(Chain {
                    frames: vec![t],
                    boxes: vec![d.bbox],
                    scores: vec![d.score],
                });
            }
        }
    }
    let tubes = chains
        .iter()
        .filter(|c| c.span() >= cfg.min_len)
        .map(|c| ActionTube {
            class_id,
            score: c.mean_score(),
            start_frame: c.frames[0],
            boxes: c.dense_boxes(),
        })
        .collect();
    (tubes, objective)
}

struct MergedTube {
    start: usize,
    last_start: usize,
    sums: Vec<[f64; 4]>,
    weights: Vec<f64>,
    scores: Vec<f64>,
}

impl MergedTube {
    fn end(&self) -> usize {
        self.start + self.sums.len()
    }

    fn box_at(&self, frame: usize) -> BBox {
        let i = frame - self.start;
        let s = &self.sums[i];
        let w = self.weights[i];
        BBox::new(s[0] / w, s[1] / w, s[2] / w, s[3] / w)
    }

    fn add(&mut self, t: &TubeletDetection) {
        // Non-positive scores would cancel the mean; such tubelets weigh 1.
        let w = if t.score > 0.0 { t.score } else { 1.0 };
        for (f, b) in t.boxes.iter().enumerate() {
            let i = t.start_frame + f - self.start;
            if i == self.sums.len() {
                self.sums.push([0.0; 4]);
                self.weights.push(0.0);
            }
            let s = &mut self.sums[i];
            s[0] += w * b.x_min;
            s[1] += w * b.y_min;
            s[2] += w * b.x_max;
            s[3] += w * b.y_max;
            self.weights[i] += w;
        }
        self.scores.push(t.score);
        self.last_start = t.start_frame;
    }

    fn mean_score(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }
}

/// Greedy linking of `K`-frame tubelets of one class, `per_start[s]` holding the
/// tubelets that start at frame `s`.
///
/// Open tubes (those overlapping frame `s`), by descending mean score, each take the
/// unclaimed tubelet with the highest mean IoU over the frames they share, which
/// must be positive. The tube box on a frame is the score-weighted mean of all
/// tubelet boxes merged there. With `K = 1` this is [`link_detections`].
pub fn link_tubelets(
    per_start: &[Vec<TubeletDetection>],
    class_id: usize,
    cfg: &LinkConfig,
) -> Vec<ActionTube> {
    let k = per_start
        .iter()
        .flatten()
        .map(|t| t.boxes.len())
        .next()
        .unwrap_or(1);
    if k == 1 {
        let per_frame: Vec<Vec<Detection>> = per_start
            .iter()
            .enumerate()
            .map(|(f, ts)| {
                ts.iter()
                    .map(|t| Detection {
                        bbox: t.boxes[0],
                        class_id: t.class_id,
                        score: t.score,
                        frame_index: f,
                        anchor: t.anchor,
                    })
                    .collect()
            })
            .collect();
        return link_detections(&per_frame, class_id, cfg).0;
    }

    let mut tubes: Vec<MergedTube> = Vec::new();
    for (s, tubelets) in per_start.iter().enumerate() {
        let cands: Vec<&TubeletDetection> =
            tubelets.iter().filter(|t| t.class_id == class_id).collect();
        let mut open: Vec<usize> = (0..tubes.len())
            .filter(|&i| tubes[i].end() > s && tubes[i].last_start < s)
            .collect();
        open.sort_by(|&a, &b| priority((tubes[a].mean_score(), a), (tubes[b].mean_score(), b)));
        let mut claimed = vec![false; cands.len()];
        for i in open {
            let shared_end = tubes[i].end().min(s + k);
            let current: Vec<BBox> = (s..shared_end).map(|f| tubes[i].box_at(f)).collect();
            let mut best: Option<(f64, usize)> = None;
            for (j, t) in cands.iter().enumerate() {
                if claimed[j] {
                    continue;
                }
                let o = mean_iou(&current, &t.boxes[..current.len()]);
                if o > 0.0 && best.is_none_or(|(v, _)| o > v) {
                    best = Some((o, j));
                }
            }
            if let Some((_, j)) = best {
                claimed[j] = true;
                tubes[i].add(cands[j]);
            }
        }
        for (j, t) in cands.iter().enumerate() {
            if !claimed[j] {
                let mut m = MergedTube {
                    start: s,
                    last_start: s,
                    sums: Vec::new(),
                    weights: Vec::new(),
                    scores: Vec::new(),
                };
                m.add(t);
                tubes.push(m);
            }
        }
    }
    tubes
        .iter()
        .filter(|m| m.sums.len() >= cfg.min_len)
        .map(|m| ActionTube {
            class_id,
            score: m.mean_score(),
            start_frame: m.start,
            boxes: (m.start..m.end()).map(|f| m.box_at(f)).collect(),
        })
        .collect()
}
