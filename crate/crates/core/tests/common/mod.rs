//! Helpers shared by the integration test targets: random instance builders,
//! central finite differences and brute-force reference implementations written
//! independently of the library code paths they check.

#![allow(dead_code)]

use std::cmp::Ordering;

use flowcond::boxes::BBox;
use flowcond::detector::Detection;
use flowcond::tubes::{ActionTube, GroundTruthTube, LinkConfig};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, 1e-6)`: relative error with a floor so that gradients
/// that are both essentially zero compare by absolute difference scaled up by 1e6.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest relative error between `analytic` and the central difference of `f`
/// at `x`, over every coordinate.
pub fn fd_max_error(x: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + FD_STEP;
        let up = f(&probe);
        probe[i] = x[i] - FD_STEP;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

pub fn uniform_vec<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values in `[-1, 1]` kept at least `margin` away from zero.
pub fn away_from_zero<R: Rng>(rng: &mut R, n: usize, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

pub fn random_box<R: Rng>(rng: &mut R) -> BBox {
    let cx = rng.gen_range(0.25..0.75);
    let cy = rng.gen_range(0.25..0.75);
    let w = rng.gen_range(0.1..0.5);
    let h = rng.gen_range(0.1..0.5);
    BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

/// Reference intersection over union.
pub fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let area = |r: &BBox| (r.x_max - r.x_min).max(0.0) * (r.y_max - r.y_min).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Reference tube IoU: per-frame IoU summed over the frames either tube covers,
/// frames covered by one tube only contributing zero, divided by that count.
pub fn ref_tube_iou(start_a: usize, a: &[BBox], start_b: usize, b: &[BBox]) -> f64 {
    let first = start_a.min(start_b);
    let last = (start_a + a.len()).max(start_b + b.len());
    let mut covered = 0usize;
    let mut total = 0.0;
    for f in first..last {
        let ba = f.checked_sub(start_a).and_then(|i| a.get(i));
        let bb = f.checked_sub(start_b).and_then(|i| b.get(i));
        match (ba, bb) {
            (Some(x), Some(y)) => {
                covered += 1;
                total += ref_iou(x, y);
            }
            (Some(_), None) | (None, Some(_)) => covered += 1,
            (None, None) => {}
        }
    }
    if covered == 0 {
        0.0
    } else {
        total / covered as f64
    }
}

/// Reference AP from the full precision/recall curve: every true positive at rank
/// `k` contributes the best precision achieved at any rank `>= k`, divided by the
/// number of annotations.
pub fn ref_average_precision(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let curve: Vec<f64> = (0..hits.len())
        .map(|k| hits[..=k].iter().filter(|h| **h).count() as f64 / (k + 1) as f64)
        .collect();
    let mut ap = 0.0;
    for k in 0..hits.len() {
        if hits[k] {
            ap += curve[k..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        }
    }
    ap / num_gt as f64
}

/// Reference video mAP at one threshold; classes without annotations are skipped.
pub fn ref_video_map(
    tubes: &[(String, ActionTube)],
    gts: &[(String, GroundTruthTube)],
    threshold: f64,
) -> f64 {
    let mut classes: Vec<usize> = gts.iter().map(|(_, g)| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for &c in &classes {
        let gt_idx: Vec<usize> = (0..gts.len()).filter(|&j| gts[j].1.class_id == c).collect();
        let mut det_idx: Vec<usize> = (0..tubes.len())
            .filter(|&i| tubes[i].1.class_id == c)
            .collect();
        // Stable: equal scores keep input order.
        det_idx.sort_by(|&a, &b| tubes[b].1.score.partial_cmp(&tubes[a].1.score).unwrap());
        let mut taken = vec![false; gts.len()];
        let mut hits = Vec::new();
        for &i in &det_idx {
            let (vid, t) = &tubes[i];
            let mut best = -1.0;
            let mut best_j = None;
            for &j in &gt_idx {
                let (gvid, g) = &gts[j];
                if taken[j] || gvid != vid {
                    continue;
                }
                let o = ref_tube_iou(t.start_frame, &t.boxes, g.start_frame, &g.boxes);
                if o > best {
                    best = o;
                    best_j = Some(j);
                }
            }
            let hit = best >= threshold && best_j.is_some();
            if hit {
                taken[best_j.unwrap()] = true;
            }
            hits.push(hit);
        }
        sum += ref_average_precision(&hits, gt_idx.len());
    }
    sum / classes.len() as f64
}

struct OracleChain {
    last_frame: usize,
    last_box: BBox,
    scores: Vec<f64>,
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.partial_cmp(b).expect("objective values are never NaN")
}

/// Lexicographically largest objective trace over every admissible linking: at each
/// frame each open tube, in priority order, may take any unclaimed overlapping
/// detection or nothing.
pub fn exhaustive_link_optimum(
    per_frame: &[Vec<Detection>],
    class_id: usize,
    cfg: &LinkConfig,
) -> Vec<f64> {
    let frames: Vec<Vec<(BBox, f64)>> = per_frame
        .iter()
        .map(|d| {
            d.iter()
                .filter(|d| d.class_id == class_id)
                .map(|d| (d.bbox, d.score))
                .collect()
        })
        .collect();
    let mut best: Option<Vec<f64>> = None;
    let mut chains = Vec::new();
    let mut trace = Vec::new();
    explore_frame(&frames, 0, &mut chains, &mut trace, cfg, &mut best);
    best.unwrap_or_default()
}

fn explore_frame(
    frames: &[Vec<(BBox, f64)>],
    t: usize,
    chains: &mut Vec<OracleChain>,
    trace: &mut Vec<f64>,
    cfg: &LinkConfig,
    best: &mut Option<Vec<f64>>,
) {
    if t == frames.len() {
        if best
            .as_ref()
            .is_none_or(|b| lex_cmp(trace, b) == Ordering::Greater)
        {
            *best = Some(trace.clone());
        }
        return;
    }
    let mut open: Vec<usize> = (0..chains.len())
        .filter(|&c| t - chains[c].last_frame <= cfg.gap_max)
        .collect();
    let mean = |c: &OracleChain| c.scores.iter().sum::<f64>() / c.scores.len() as f64;
    open.sort_by(|&a, &b| {
        mean(&chains[b])
            .partial_cmp(&mean(&chains[a]))
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut claimed = vec![false; frames[t].len()];
    explore_tube(frames, t, &open, 0, &mut claimed, chains, trace, cfg, best);
}

#[allow(clippy::too_many_arguments)]
fn explore_tube(
    frames: &[Vec<(BBox, f64)>],
    t: usize,
    open: &[usize],
    k: usize,
    claimed: &mut Vec<bool>,
    chains: &mut Vec<OracleChain>,
    trace: &mut Vec<f64>,
    cfg: &LinkConfig,
    best: &mut Option<Vec<f64>>,
) {
    if k == open.len() {
        let before = chains.len();
        for (j, &(b, s)) in frames[t].iter().enumerate() {
            if !claimed[j] {
                chains.push(OracleChain {
                    last_frame: t,
                    last_box: b,
                    scores: vec![s],
                });
            }
        }
        explore_frame(frames, t + 1, chains, trace, cfg, best);
        chains.truncate(before);
        return;
    }
    let c = open[k];
    // Leave the tube unextended.
    trace.push(f64::NEG_INFINITY);
    explore_tube(frames, t, open, k + 1, claimed, chains, trace, cfg, best);
    trace.pop();
    for j in 0..frames[t].len() {
        let (b, s) = frames[t][j];
        let o = ref_iou(&chains[c].last_box, &b);
        if claimed[j] || o <= 0.0 {
            continue;
        }
        let saved = (chains[c].last_frame, chains[c].last_box);
        claimed[j] = true;
        chains[c].last_frame = t;
        chains[c].last_box = b;
        chains[c].scores.push(s);
        trace.push(s + cfg.lambda_iou * o);
        explore_tube(frames, t, open, k + 1, claimed, chains, trace, cfg, best);
        trace.pop();
        chains[c].scores.pop();
        (chains[c].last_frame, chains[c].last_box) = saved;
        claimed[j] = false;
    }
}

/// Random linking instance: up to `max_frames` frames with up to `max_dets`
/// detections each, mostly of class 1 with occasional class 2 distractors.
pub fn random_link_instance<R: Rng>(
    rng: &mut R,
    max_frames: usize,
    max_dets: usize,
) -> Vec<Vec<Detection>> {
    let frames = rng.gen_range(1..=max_frames);
    (0..frames)
        .map(|f| {
            let n = rng.gen_range(0..=max_dets);
            (0..n)
                .map(|a| Detection {
                    bbox: random_box(rng),
                    class_id: if rng.gen_bool(0.85) { 1 } else { 2 },
                    score: rng.gen_range(0.0..1.0),
                    frame_index: f,
                    anchor: a,
                })
                .collect()
        })
        .collect()
}

/// Random evaluation instance: up to 5 tubes, 3 annotations and 3 classes over two
/// videos of 6 frames.
pub fn random_map_instance<R: Rng>(
    rng: &mut R,
) -> (Vec<(String, ActionTube)>, Vec<(String, GroundTruthTube)>) {
    let vids = ["a", "b"];
    let classes = rng.gen_range(1..=3);
    let seq = |rng: &mut R| {
        let start = rng.gen_range(0..4);
        let len = rng.gen_range(1..=(6 - start));
        let base = random_box(rng);
        let boxes: Vec<BBox> = (0..len)
            .map(|_| {
                let dx = rng.gen_range(-0.05..0.05);
                let dy = rng.gen_range(-0.05..0.05);
                BBox::new(
                    base.x_min + dx,
                    base.y_min + dy,
                    base.x_max + dx,
                    base.y_max + dy,
                )
            })
            .collect();
        (start, boxes)
    };
    let gts: Vec<(String, GroundTruthTube)> = (0..rng.gen_range(0..=3))
        .map(|_| {
            let (start, boxes) = seq(rng);
            let vid = vids[rng.gen_range(0..2)].to_string();
            (
                vid,
                GroundTruthTube::new(rng.gen_range(1..=classes), start, boxes).unwrap(),
            )
        })
        .collect();
    let tubes: Vec<(String, ActionTube)> = (0..rng.gen_range(0..=5))
        .map(|_| {
            // Half the tubes are perturbed copies of an annotation so hits occur.
            let (vid, class_id, start, boxes) =
                match gts.get(rng.gen_range(0..gts.len().max(1) * 2)) {
                    Some((v, g)) => {
                        let boxes = g
                            .boxes
                            .iter()
                            .map(|b| {
                                let d = rng.gen_range(-0.04..0.04);
                                BBox::new(b.x_min + d, b.y_min, b.x_max + d, b.y_max)
                            })
                            .collect();
                        (v.clone(), g.class_id, g.start_frame, boxes)
                    }
                    None => {
                        let (start, boxes) = seq(rng);
                        (
                            vids[rng.gen_range(0..2)].to_string(),
                            rng.gen_range(1..=classes),
                            start,
                            boxes,
                        )
                    }
                };
            let score = (rng.gen_range(0..8) as f64) / 8.0;
            (vid, ActionTube::new(class_id, score, start, boxes).unwrap())
        })
        .collect();
    (tubes, gts)
}

pub mod gradcheck;
