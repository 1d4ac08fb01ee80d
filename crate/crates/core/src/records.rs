//! Line-oriented text records for detections and tubes.
//!
//! Detection: `video_id frame_index class_id score x_min y_min x_max y_max`.
//! Tube: `video_id class_id score frame:x_min,y_min,x_max,y_max ...` with one
//! `frame:box` field per consecutive frame. Reals carry 9 significant digits.

use crate::boxes::BBox;
use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::tubes::{ActionTube, GroundTruthTube};

/// `v` rounded to 9 significant digits, printed without redundant zeros.
pub fn fmt_real(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let rounded: f64 = format!("{v:.8e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

fn parse_real(s: &str, what: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::invalid(format!("bad {what} `{s}`")))
}

fn parse_int(s: &str, what: &str) -> Result<usize> {
    s.parse::<usize>()
        .map_err(|_| Error::invalid(format!("bad {what} `{s}`")))
}

fn check_video_id(id: &str) -> Result<()> {
    if id.is_empty() || id.chars().any(char::is_whitespace) {
        return Err(Error::invalid(format!(
            "video id `{id}` must be non-empty without whitespace"
        )));
    }
    Ok(())
}

pub fn format_detection(video_id: &str, d: &Detection) -> Result<String> {
    check_video_id(video_id)?;
    let b = &d.bbox;
    Ok(format!(
        "{video_id} {} {} {} {} {} {} {}",
        d.frame_index,
        d.class_id,
        fmt_real(d.score),
        fmt_real(b.x_min),
        fmt_real(b.y_min),
        fmt_real(b.x_max),
        fmt_real(b.y_max)
    ))
}

/// Parse a detection record; the anchor index is not stored and comes back as 0.
pub fn parse_detection(line: &str) -> Result<(String, Detection)> {
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != 8 {
        return Err(Error::invalid(format!(
            "detection record needs 8 fields, got {}",
            f.len()
        )));
    }
    let r = |i: usize, what: &str| parse_real(f[i], what);
    Ok((
        f[0].to_string(),
        Detection {
            frame_index: parse_int(f[1], "frame index")?,
            class_id: parse_int(f[2], "class id")?,
            score: r(3, "score")?,
            bbox: BBox::new(
                r(4, "x_min")?,
                r(5, "y_min")?,
                r(6, "x_max")?,
                r(7, "y_max")?,
            ),
            anchor: 0,
        },
    ))
}

pub fn format_tube(video_id: &str, t: &ActionTube) -> Result<String> {
    check_video_id(video_id)?;
    let mut s = format!("{video_id} {} {}", t.class_id, fmt_real(t.score));
    for (i, b) in t.boxes.iter().enumerate() {
        s.push_str(&format!(
            " {}:{},{},{},{}",
            t.start_frame + i,
            fmt_real(b.x_min),
            fmt_real(b.y_min),
            fmt_real(b.x_max),
            fmt_real(b.y_max)
        ));
    }
    Ok(s)
}

pub fn parse_tube(line: &str) -> Result<(String, ActionTube)> {
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() < 4 {
        return Err(Error::invalid(format!(
            "tube record needs a video id, class, score and at least one box, got {} fields",
            f.len()
        )));
    }
    let class_id = parse_int(f[1], "class id")?;
    let score = parse_real(f[2], "score")?;
    let mut start = None;
    let mut boxes = Vec::with_capacity(f.len() - 3);
    for field in &f[3..] {
        let (frame, coords) = field
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("box field `{field}` lacks `frame:`")))?;
        let frame = parse_int(frame, "frame index")?;
        let expected = start.map_or(frame, |s: usize| s + boxes.len());
        if frame != expected {
            return Err(Error::invalid(format!(
                "tube frames must be consecutive, got {frame} after {}",
                expected.wrapping_sub(1)
            )));
        }
        start.get_or_insert(frame);
        let c: Vec<f64> = coords
            .split(',')
            .map(|v| parse_real(v, "coordinate"))
            .collect::<Result<_>>()?;
        if c.len() != 4 {
            return Err(Error::invalid(format!(
                "box `{coords}` needs 4 coordinates"
            )));
        }
        boxes.push(BBox::new(c[0], c[1], c[2], c[3]));
    }
    Ok((
        f[0].to_string(),
        ActionTube::new(class_id, score, start.unwrap(), boxes)?,
    ))
}

/// Annotations use the tube format with a score of 1.
pub fn format_gt_tube(video_id: &str, g: &GroundTruthTube) -> Result<String> {
    format_tube(video_id, &g.as_detection(1.0))
}

pub fn parse_gt_tube(line: &str) -> Result<(String, GroundTruthTube)> {
    let (vid, t) = parse_tube(line)?;
    Ok((
        vid,
        GroundTruthTube::new(t.class_id, t.start_frame, t.boxes)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_digits() {
        assert_eq!(fmt_real(0.123456789012), "0.123456789");
        assert_eq!(fmt_real(1.0), "1");
        assert_eq!(fmt_real(0.0), "0");
        assert_eq!(fmt_real(-2.5e-7), "-0.00000025");
    }

    #[test]
    fn tube_round_trip() {
        let t = ActionTube::new(
            3,
            0.75,
            4,
            vec![
                BBox::new(0.1, 0.2, 0.3, 0.4),
                BBox::new(0.15, 0.2, 0.35, 0.4),
            ],
        )
        .unwrap();
        let line = format_tube("vid_01", &t).unwrap();
        assert_eq!(line, "vid_01 3 0.75 4:0.1,0.2,0.3,0.4 5:0.15,0.2,0.35,0.4");
        assert_eq!(parse_tube(&line).unwrap(), ("vid_01".to_string(), t));
        assert!(parse_tube("v 1 0.5 0:0,0,1,1 2:0,0,1,1").is_err());
        assert!(format_tube(
            "has space",
            &ActionTube::new(1, 0.5, 0, vec![BBox::new(0.0, 0.0, 1.0, 1.0)]).unwrap()
        )
        .is_err());
    }

    #[test]
    fn detection_round_trip() {
        let d = Detection {
            bbox: BBox::new(0.1, 0.2, 0.3, 0.4),
            class_id: 2,
            score: 0.5,
            frame_index: 7,
            anchor: 0,
        };
        let line = format_detection("v", &d).unwrap();
        assert_eq!(parse_detection(&line).unwrap(), ("v".to_string(), d));
    }
}
