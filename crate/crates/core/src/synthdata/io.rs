//! Dataset directory layout:
//!
//! ```text
//! manifest          "classes <name> ..." then "video <id> <split> <frames>" lines;
//!                   lines starting with `#` are comments
//! gt.txt            one annotated tube per line (tube record format)
//! <id>/frame_NNNN.ppm
//! <id>/flow_NNNN.flo
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Split, VideoSample};
use crate::error::{Error, Result};
use crate::flowfield::{read_flow, read_ppm, write_flow, write_ppm};
use crate::records::{format_gt_tube, parse_gt_tube};
use crate::tubes::GroundTruthTube;

pub const MANIFEST_FILE: &str = "manifest";
pub const GT_INDEX_FILE: &str = "gt.txt";

fn frame_name(t: usize) -> String {
    format!("frame_{t:04}.ppm")
}

fn flow_name(t: usize) -> String {
    format!("flow_{t:04}.flo")
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::from(e).at_path(path)
}

/// Write `samples` under `dir`, creating it if needed. `class_names` go into the
/// manifest in class-id order.
pub fn write_dataset(samples: &[VideoSample], class_names: &[String], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    let mut manifest = String::from("classes");
    for name in class_names {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::invalid(format!(
                "class name `{name}` must be one word"
            )));
        }
        manifest.push(' ');
        manifest.push_str(name);
    }
    manifest.push('\n');
    let mut gt = String::new();
    for s in samples {
        if s.flows.len() != s.frames.len() {
            return Err(Error::invalid(format!(
                "video {} has {} frames but {} flows",
                s.video_id,
                s.frames.len(),
                s.flows.len()
            )));
        }
        manifest.push_str(&format!(
            "video {} {} {}\n",
            s.video_id,
            s.split,
            s.frames.len()
        ));
        let vdir = dir.join(&s.video_id);
        fs::create_dir_all(&vdir).map_err(io_at(&vdir))?;
        for (t, (frame, flow)) in s.frames.iter().zip(&s.flows).enumerate() {
            write_ppm(frame, &vdir.join(frame_name(t)))?;
            write_flow(flow, &vdir.join(flow_name(t)))?;
        }
        for tube in &s.gt_tubes {
            gt.push_str(&format_gt_tube(&s.video_id, tube)?);
            gt.push('\n');
        }
    }
    let gt_path = dir.join(GT_INDEX_FILE);
    fs::write(&gt_path, gt).map_err(io_at(&gt_path))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, manifest).map_err(io_at(&manifest_path))
}

/// Read a dataset written by [`write_dataset`]; returns the samples and the class
/// names. An empty (or missing) directory yields an empty dataset.
pub fn read_dataset(dir: &Path) -> Result<(Vec<VideoSample>, Vec<String>)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        let empty = match fs::read_dir(dir) {
            Ok(mut entries) => entries.next().is_none(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => true,
            Err(e) => return Err(Error::from(e).at_path(dir)),
        };
        if empty {
            log::warn!("dataset directory {} is empty", dir.display());
            return Ok((Vec::new(), Vec::new()));
        }
        return Err(Error::File {
            path: manifest_path,
            reason: "manifest missing from a non-empty dataset directory".into(),
        });
    }
    let manifest = fs::read_to_string(&manifest_path).map_err(io_at(&manifest_path))?;
    let bad = |line: usize, reason: String| Error::File {
        path: manifest_path.clone(),
        reason: format!("line {}: {reason}", line + 1),
    };

    let mut classes = Vec::new();
    let mut videos: Vec<(String, Split, usize)> = Vec::new();
    for (i, line) in manifest.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.first() {
            None => continue,
            Some(w) if w.starts_with('#') => continue,
            Some(&"classes") => classes = f[1..].iter().map(|s| s.to_string()).collect(),
            Some(&"video") if f.len() == 4 => {
                let split = f[2].parse::<Split>().map_err(|e| bad(i, e.to_string()))?;
                let n = f[3]
                    .parse::<usize>()
                    .map_err(|_| bad(i, format!("bad frame count `{}`", f[3])))?;
                videos.push((f[1].to_string(), split, n));
            }
            Some(_) => return Err(bad(i, format!("unrecognised entry `{line}`"))),
        }
    }

    let gt_path = dir.join(GT_INDEX_FILE);
    let gt_text = fs::read_to_string(&gt_path).map_err(io_at(&gt_path))?;
    let mut tubes: BTreeMap<String, Vec<GroundTruthTube>> = BTreeMap::new();
    for (i, line) in gt_text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (vid, tube) = parse_gt_tube(line).map_err(|e| Error::File {
            path: gt_path.clone(),
            reason: format!("line {}: {e}", i + 1),
        })?;
        tubes.entry(vid).or_default().push(tube);
    }

    let mut samples = Vec::with_capacity(videos.len());
    for (video_id, split, n) in videos {
        let vdir = dir.join(&video_id);
        let mut frames = Vec::with_capacity(n);
        let mut flows = Vec::with_capacity(n);
        for t in 0..n {
            frames.push(read_ppm(&vdir.join(frame_name(t)))?);
            flows.push(read_flow(&vdir.join(flow_name(t)))?);
        }
        samples.push(VideoSample {
            gt_tubes: tubes.remove(&video_id).unwrap_or_default(),
            video_id,
            split,
            frames,
            flows,
        });
    }
    if let Some(vid) = tubes.keys().next() {
        return Err(Error::File {
            path: gt_path,
            reason: format!("annotation for unknown video `{vid}`"),
        });
    }
    Ok((samples, classes))
}
