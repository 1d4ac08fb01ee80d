//! Two stand-in flow estimators of different quality.
//!
//! `Fast` is exhaustive integer block matching. `Iterative` starts from the block
//! match and refines it with Horn–Schunck iterations on the warped second frame,
//! which yields smooth sub-pixel flow.

use std::fmt;
use std::str::FromStr;

use super::{FlowField, Frame};
use crate::error::{Error, Result};

pub const BLOCK_SIZE: usize = 8;
pub const SEARCH_RADIUS: i32 = 4;
pub const HS_SMOOTHNESS: f64 = 0.5;
pub const HS_ITERATIONS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FlowQuality {
    Fast,
    Iterative,
}

impl fmt::Display for FlowQuality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlowQuality::Fast => "fast",
            FlowQuality::Iterative => "iterative",
        })
    }
}

impl FromStr for FlowQuality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(FlowQuality::Fast),
            "iterative" => Ok(FlowQuality::Iterative),
            other => Err(Error::Config(format!(
                "unknown flow quality `{other}` (expected fast|iterative)"
            ))),
        }
    }
}

pub fn estimate_flow(a: &Frame, b: &Frame, quality: FlowQuality) -> Result<FlowField> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::shape(format!(
            "frame resolutions differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let (w, h) = (a.width(), a.height());
    let (la, lb) = (a.luma(), b.luma());
    let (u0, v0) = block_match(&la, &lb, w, h);
    let (u, v) = match quality {
        FlowQuality::Fast => (u0, v0),
        FlowQuality::Iterative => horn_schunck_refine(&la, &lb, w, h, &u0, &v0),
    };
    FlowField::new(
        w,
        h,
        u.into_iter().map(|x| x as f32).collect(),
        v.into_iter().map(|x| x as f32).collect(),
    )
}

/// One flow per frame: frame `t` gets the flow from `t` to `t+1`, the last frame
/// repeats its predecessor's flow, and a single-frame clip gets zero flow.
pub fn flows_for_video(frames: &[Frame], quality: FlowQuality) -> Result<Vec<FlowField>> {
    let Some(first) = frames.first() else {
        return Ok(Vec::new());
    };
    if frames.len() == 1 {
        return Ok(vec![FlowField::zeros(first.width(), first.height())]);
    }
    let mut flows = frames
        .windows(2)
        .map(|pair| estimate_flow(&pair[0], &pair[1], quality))
        .collect::<Result<Vec<_>>>()?;
    flows.push(flows.last().expect("at least one pair").clone());
    Ok(flows)
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Integer displacement per `BLOCK_SIZE` tile minimising the sum of squared luma
/// differences within `SEARCH_RADIUS`. Ties prefer the shorter displacement, then
/// scan order, so textureless or static content maps to zero.
pub fn block_match(a: &[f64], b: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let mut u = vec![0.0; w * h];
    let mut v = vec![0.0; w * h];
    let mut candidates: Vec<(i32, i32)> = (-SEARCH_RADIUS..=SEARCH_RADIUS)
        .flat_map(|dy| (-SEARCH_RADIUS..=SEARCH_RADIUS).map(move |dx| (dx, dy)))
        .collect();
    candidates.sort_by_key(|&(dx, dy)| dx * dx + dy * dy);

    for by in (0..h).step_by(BLOCK_SIZE) {
        for bx in (0..w).step_by(BLOCK_SIZE) {
            let (ey, ex) = ((by + BLOCK_SIZE).min(h), (bx + BLOCK_SIZE).min(w));
            let mut best = (f64::INFINITY, 0, 0);
            for &(dx, dy) in &candidates {
                let mut cost = 0.0;
                for y in by..ey {
                    let yb = clamp_index(y as isize + dy as isize, h);
                    for x in bx..ex {
                        let xb = clamp_index(x as isize + dx as isize, w);
                        let d = a[y * w + x] - b[yb * w + xb];
                        cost += d * d;
                    }
                }
                if cost < best.0 {
                    best = (cost, dx, dy);
                }
            }
            for y in by..ey {
                for x in bx..ex {
                    u[y * w + x] = best.1 as f64;
                    v[y * w + x] = best.2 as f64;
                }
            }
        }
    }
    (u, v)
}

fn bilinear(img: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = img[y0 * w + x0] * (1.0 - fx) + img[y0 * w + x1] * fx;
    let bot = img[y1 * w + x0] * (1.0 - fx) + img[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Central-difference gradients with replicated borders.
fn gradients(img: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let xl = x.saturating_sub(1);
            let xr = (x + 1).min(w - 1);
            let yu = y.saturating_sub(1);
            let yd = (y + 1).min(h - 1);
            gx[y * w + x] = 0.5 * (img[y * w + xr] - img[y * w + xl]);
            gy[y * w + x] = 0.5 * (img[yd * w + x] - img[yu * w + x]);
        }
    }
    (gx, gy)
}

/// 4-neighbour mean with replicated borders.
fn neighbour_mean(f: &[f64], w: usize, h: usize, out: &mut [f64]) {
    for y in 0..h {
        for x in 0..w {
            let xl = x.saturating_sub(1);
            let xr = (x + 1).min(w - 1);
            let yu = y.saturating_sub(1);
            let yd = (y + 1).min(h - 1);
            out[y * w + x] = 0.25 * (f[y * w + xl] + f[y * w + xr] + f[yu * w + x] + f[yd * w + x]);
        }
    }
}

/// Horn–Schunck iterations linearised around an initial flow `(u0, v0)`.
///
/// The second frame is warped by the initial flow, brightness constancy is
/// linearised about it, and the smoothness term acts on the total flow.
pub fn horn_schunck_refine(
    a: &[f64],
    b: &[f64],
    w: usize,
    h: usize,
    u0: &[f64],
    v0: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let warped: Vec<f64> = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            bilinear(b, w, h, x + u0[i], y + v0[i])
        })
        .collect();
    let (ax, ay) = gradients(a, w, h);
    let (bx, by) = gradients(&warped, w, h);
    let ix: Vec<f64> = ax.iter().zip(&bx).map(|(p, q)| 0.5 * (p + q)).collect();
    let iy: Vec<f64> = ay.iter().zip(&by).map(|(p, q)| 0.5 * (p + q)).collect();
    let it: Vec<f64> = warped.iter().zip(a).map(|(p, q)| p - q).collect();

    let mut u = u0.to_vec();
    let mut v = v0.to_vec();
    let mut ubar = vec![0.0; w * h];
    let mut vbar = vec![0.0; w * h];
    for _ in 0..HS_ITERATIONS {
        neighbour_mean(&u, w, h, &mut ubar);
        neighbour_mean(&v, w, h, &mut vbar);
        for i in 0..w * h {
            let residual = ix[i] * (ubar[i] - u0[i]) + iy[i] * (vbar[i] - v0[i]) + it[i];
            let t = residual / (HS_SMOOTHNESS + ix[i] * ix[i] + iy[i] * iy[i]);
            u[i] = ubar[i] - ix[i] * t;
            v[i] = vbar[i] - iy[i] * t;
        }
    }
    (u, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Smoothed random texture so that gradients are informative at pixel scale.
    fn textured(w: usize, h: usize, seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..w * h).map(|_| rng.gen::<f64>()).collect();
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    s += raw[((y + dy) % h) * w + (x + dx) % w];
                }
                let g = s / 4.0;
                data.extend([g, g, g]);
            }
        }
        Frame::new(w, h, data).unwrap()
    }

    /// `b(x, y) = a(x - dx, y - dy)` with periodic wrap.
    fn translate(a: &Frame, dx: isize, dy: isize) -> Frame {
        let (w, h) = (a.width(), a.height());
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                let sx = (x as isize - dx).rem_euclid(w as isize) as usize;
                let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
                data.extend(a.pixel(sx, sy));
            }
        }
        Frame::new(w, h, data).unwrap()
    }

    fn interior_mean(f: &FlowField, margin: usize) -> (f64, f64) {
        let (mut su, mut sv, mut n) = (0.0, 0.0, 0.0);
        for y in margin..f.height() - margin {
            for x in margin..f.width() - margin {
                let (u, v) = f.at(x, y);
                su += u as f64;
                sv += v as f64;
                n += 1.0;
            }
        }
        (su / n, sv / n)
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let a = textured(32, 24, 3);
        for q in [FlowQuality::Fast, FlowQuality::Iterative] {
            let f = estimate_flow(&a, &a, q).unwrap();
            assert!(f.u().iter().chain(f.v()).all(|&x| x == 0.0), "{q}");
        }
    }

    #[test]
    fn uniform_frames_give_zero_flow() {
        let a = Frame::filled(16, 16, [0.3, 0.3, 0.3]).unwrap();
        let b = Frame::filled(16, 16, [0.7, 0.7, 0.7]).unwrap();
        for q in [FlowQuality::Fast, FlowQuality::Iterative] {
            let f = estimate_flow(&a, &b, q).unwrap();
            assert!(f.u().iter().chain(f.v()).all(|&x| x == 0.0), "{q}");
        }
    }

    #[test]
    fn recovers_periodic_translation() {
        let a = textured(64, 64, 11);
        let b = translate(&a, 3, 0);
        for q in [FlowQuality::Fast, FlowQuality::Iterative] {
            let f = estimate_flow(&a, &b, q).unwrap();
            let (mu, mv) = interior_mean(&f, 8);
            assert!(
                (mu - 3.0).abs() < 0.5 && mv.abs() < 0.5,
                "{q}: ({mu}, {mv})"
            );
        }
    }

    #[test]
    fn mismatched_resolution_rejected() {
        let a = Frame::filled(8, 8, [0.0; 3]).unwrap();
        let b = Frame::filled(8, 4, [0.0; 3]).unwrap();
        assert!(estimate_flow(&a, &b, FlowQuality::Fast).is_err());
    }

    #[test]
    fn video_flow_reuses_last() {
        let a = textured(16, 16, 1);
        let frames = vec![a.clone(), translate(&a, 1, 0), translate(&a, 2, 1)];
        let flows = flows_for_video(&frames, FlowQuality::Fast).unwrap();
        assert_eq!(flows.len(), 3);
        assert_eq!(flows[1], flows[2]);
        let single = flows_for_video(&frames[..1], FlowQuality::Fast).unwrap();
        assert!(single[0].u().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn quality_parses() {
        assert_eq!("fast".parse::<FlowQuality>().unwrap(), FlowQuality::Fast);
        assert!("brox".parse::<FlowQuality>().is_err());
    }
}
