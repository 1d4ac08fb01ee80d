mod common;

use flowcond::boxes::{encode, BBox};
use flowcond::detector::{
    encode_targets, generate_anchors, match_anchors, nms, train, AnchorScale, Detector,
    DetectorConfig, GtTarget, Schedule, StreamMode, TrainVideo,
};
use flowcond::experiment::PreparedVideo;
use flowcond::flowfield::FlowQuality;
use flowcond::synthdata::{generate, GenConfig, MotionClass};
use flowcond::tubes::{link_detections, video_map, LinkConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Greedy NMS output is the unique set with (a) no two kept boxes overlapping above
/// the threshold and (b) every dropped box overlapping some kept box that ranks
/// above it.
#[test]
fn nms_satisfies_its_characterisation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..300 {
        let n = rng.gen_range(1..10);
        let boxes: Vec<BBox> = (0..n).map(|_| common::random_box(&mut rng)).collect();
        // Coarse scores make ties common; ties rank by lower index.
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64).collect();
        let thresh = rng.gen_range(0.1..0.9);
        let kept = nms(&boxes, &scores, thresh);
        let ranks_above =
            |a: usize, b: usize| scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
        for (x, &i) in kept.iter().enumerate() {
            for &j in &kept[x + 1..] {
                assert!(common::ref_iou(&boxes[i], &boxes[j]) <= thresh);
                assert!(ranks_above(i, j), "kept boxes are listed by rank");
            }
        }
        for d in (0..n).filter(|d| !kept.contains(d)) {
            assert!(kept
                .iter()
                .any(|&k| ranks_above(k, d) && common::ref_iou(&boxes[k], &boxes[d]) > thresh));
        }
    }
}

/// Reference matcher: full overlap matrix and threshold rule, then forced claims
/// made by scanning every (anchor, ground truth) pair in order of descending
/// overlap, lower ground truth then lower anchor first, and accepting a pair when
/// both sides are still free.
fn reference_labels(gt: &[GtTarget], anchors: &[BBox], pos_iou: f64) -> Vec<Option<usize>> {
    let overlap: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| {
            gt.iter()
                .map(|g| {
                    g.boxes.iter().map(|b| common::ref_iou(a, b)).sum::<f64>()
                        / g.boxes.len() as f64
                })
                .collect()
        })
        .collect();
    let mut labels: Vec<Option<usize>> = overlap
        .iter()
        .map(|row| {
            let mut best = None;
            for (j, &o) in row.iter().enumerate() {
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            best.filter(|&(_, o)| o >= pos_iou).map(|(j, _)| j)
        })
        .collect();
    let mut pairs: Vec<(f64, usize, usize)> = (0..gt.len())
        .flat_map(|j| (0..anchors.len()).map(move |i| (j, i)))
        .map(|(j, i)| (overlap[i][j], j, i))
        .collect();
    pairs.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut anchor_taken = vec![false; anchors.len()];
    let mut gt_served = vec![false; gt.len()];
    for (_, j, i) in pairs {
        if !anchor_taken[i] && !gt_served[j] {
            anchor_taken[i] = true;
            gt_served[j] = true;
            labels[i] = Some(j);
        }
    }
    labels
}

#[test]
fn anchor_matching_agrees_with_reference() {
    let anchors = generate_anchors(&[
        AnchorScale {
            rows: 4,
            cols: 4,
            size: 0.25,
        },
        AnchorScale {
            rows: 2,
            cols: 2,
            size: 0.5,
        },
    ]);
    let corners: Vec<BBox> = anchors.boxes().iter().map(|a| a.to_corners()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let k = rng.gen_range(1..=3);
        let gt: Vec<GtTarget> = (0..rng.gen_range(0..4))
            .map(|_| GtTarget {
                boxes: (0..k).map(|_| common::random_box(&mut rng)).collect(),
                class_id: rng.gen_range(1..=4),
            })
            .collect();
        let pos_iou = rng.gen_range(0.3..0.7);
        let got = match_anchors(&gt, &anchors, pos_iou).unwrap();
        let want = reference_labels(&gt, &corners, pos_iou);
        for (i, (g, w)) in got.labels.iter().zip(&want).enumerate() {
            assert_eq!(g.map(|m| m.gt_index), *w, "anchor {i}");
            if let (Some(m), Some(j)) = (g, w) {
                assert_eq!(m.class_id, gt[*j].class_id);
            }
        }
        // Every ground truth owns at least one anchor.
        for j in 0..gt.len() {
            assert!(got
                .labels
                .iter()
                .any(|l| l.is_some_and(|m| m.gt_index == j)));
        }
        let targets = encode_targets(&gt, &anchors, &got).unwrap();
        let width = targets.len() / anchors.len();
        if !gt.is_empty() {
            assert_eq!(width, 4 * k);
        }
        for (i, l) in got.labels.iter().enumerate() {
            let row = &targets[i * width..(i + 1) * width];
            match l {
                None => assert!(row.iter().all(|v| *v == 0.0)),
                Some(m) => {
                    for f in 0..k {
                        let want =
                            encode(&gt[m.gt_index].boxes[f].to_center(), &anchors.boxes()[i])
                                .unwrap();
                        assert_eq!(&row[4 * f..4 * f + 4], &want);
                    }
                }
            }
        }
    }
}

#[test]
fn greedy_linking_reaches_exhaustive_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let per_frame = common::random_link_instance(&mut rng, 4, 3);
        let cfg = LinkConfig {
            lambda_iou: rng.gen_range(0.5..2.0),
            gap_max: rng.gen_range(0..=2),
            min_len: 1,
        };
        let (_, objective) = link_detections(&per_frame, 1, &cfg);
        assert_eq!(
            objective.values,
            common::exhaustive_link_optimum(&per_frame, 1, &cfg)
        );
    }
}

#[test]
fn video_map_agrees_with_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let (tubes, gts) = common::random_map_instance(&mut rng);
        let th = [0.2, 0.5, 0.75];
        let report = video_map(&tubes, &gts, &th).unwrap();
        for (r, &t) in report.results.iter().zip(&th) {
            assert!((r.map - common::ref_video_map(&tubes, &gts, t)).abs() < 1e-12);
        }
    }
}

fn tiny_videos() -> (Vec<PreparedVideo>, DetectorConfig) {
    let gen = GenConfig {
        num_videos: 4,
        num_test: 0,
        frames_per_video: 4,
        width: 32,
        height: 32,
        sprite_min: 8,
        sprite_max: 10,
        classes: vec![MotionClass::MoveUp, MotionClass::MoveDown],
        flow_quality: FlowQuality::Fast,
        ..GenConfig::default()
    };
    let videos = generate(&gen)
        .unwrap()
        .iter()
        .map(PreparedVideo::from_sample)
        .collect();
    let cfg = DetectorConfig {
        num_classes: 2,
        image_size: 32,
        widths: [4, 6, 8, 8],
        ..DetectorConfig::default()
    };
    (videos, cfg)
}

fn as_train(videos: &[PreparedVideo]) -> Vec<TrainVideo<'_>> {
    videos
        .iter()
        .map(|v| TrainVideo {
            rgb: &v.rgb,
            flow: &v.flow,
            tubes: &v.tubes,
        })
        .collect()
}

#[test]
fn training_lowers_the_loss() {
    let (videos, cfg) = tiny_videos();
    let mut det = Detector::new(StreamMode::TwoInOne, &cfg, 0).unwrap();
    let schedule = Schedule {
        epochs: 8,
        clips_per_video: 0,
        batch_size: 2,
        ..Schedule::default()
    };
    let log = train(&mut det, &as_train(&videos), &schedule, 1, |_, _| Ok(())).unwrap();
    let first = log.epochs.first().unwrap().mean_loss;
    let last = log.epochs.last().unwrap().mean_loss;
    assert!(last < 0.8 * first, "loss {first} -> {last}");
}

#[test]
fn zero_learning_rate_leaves_weights_untouched() {
    let (videos, cfg) = tiny_videos();
    let mut det = Detector::new(StreamMode::Rgb, &cfg, 0).unwrap();
    let before: Vec<Vec<f64>> = det
        .params()
        .iter()
        .map(|p| p.tensor.data().to_vec())
        .collect();
    let schedule = Schedule {
        epochs: 2,
        lr: 0.0,
        ..Schedule::default()
    };
    train(&mut det, &as_train(&videos), &schedule, 1, |_, _| Ok(())).unwrap();
    let after: Vec<Vec<f64>> = det
        .params()
        .iter()
        .map(|p| p.tensor.data().to_vec())
        .collect();
    assert_eq!(before, after);
}

#[test]
fn training_is_reproducible() {
    let (videos, cfg) = tiny_videos();
    let schedule = Schedule {
        epochs: 2,
        ..Schedule::default()
    };
    let run = || {
        let mut det = Detector::new(StreamMode::Flow, &cfg, 9).unwrap();
        let log = train(&mut det, &as_train(&videos), &schedule, 2, |_, _| Ok(())).unwrap();
        let w: Vec<u64> = det
            .params()
            .iter()
            .flat_map(|p| {
                p.tensor
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>()
            })
            .collect();
        (w, log)
    };
    assert_eq!(run(), run());
}

/// Ten single-clip epochs on one video, one update per clip.
fn single_clip_losses(lr: f64) -> Vec<f64> {
    let (videos, cfg) = tiny_videos();
    let one = &videos[..1];
    let mut det = Detector::new(StreamMode::Rgb, &cfg, 0).unwrap();
    let schedule = Schedule {
        epochs: 10,
        lr,
        momentum: 0.0,
        clips_per_video: 1,
        batch_size: 1,
        ..Schedule::default()
    };
    let train_set = as_train(one);
    let single = TrainVideo {
        rgb: &train_set[0].rgb[..1],
        flow: &train_set[0].flow[..1],
        tubes: train_set[0].tubes,
    };
    train(&mut det, &[single], &schedule, 1, |_, _| Ok(()))
        .unwrap()
        .clip_losses
}

#[test]
fn one_sample_loss_strictly_decreases_over_ten_steps() {
    let losses = single_clip_losses(0.01);
    assert_eq!(losses.len(), 10);
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn zero_learning_rate_keeps_the_loss_constant() {
    let losses = single_clip_losses(0.0);
    assert!(
        losses.iter().all(|l| l.to_bits() == losses[0].to_bits()),
        "{losses:?}"
    );
}
