//! RGB frames, dense optical flow fields, flow estimation and on-disk formats.

mod estimate;
mod flo;
mod ppm;

pub use estimate::{
    block_match, estimate_flow, flows_for_video, horn_schunck_refine, FlowQuality, BLOCK_SIZE,
    HS_ITERATIONS, HS_SMOOTHNESS, SEARCH_RADIUS,
};
pub use flo::{decode_flow, encode_flow, read_flow, write_flow, FLO_MAGIC};
pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Interleaved RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("frame dimensions {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "{width}x{height} RGB frame needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Frame {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Frame::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Luma in `[0, 255]` units, row-major.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 255.0 * (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]))
            .collect()
    }

    /// Planar `[3, H, W]` tensor for the network.
    pub fn to_tensor(&self) -> Tensor {
        let n = self.width * self.height;
        let mut out = vec![0.0; 3 * n];
        for (i, p) in self.data.chunks_exact(3).enumerate() {
            out[i] = p[0];
            out[n + i] = p[1];
            out[2 * n + i] = p[2];
        }
        Tensor::from_parts(vec![3, self.height, self.width], out)
    }
}

/// Per-pixel displacement (pixels per frame) from one frame to the next.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    u: Vec<f32>,
    v: Vec<f32>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        if u.len() != width * height || v.len() != width * height {
            return Err(Error::shape(format!(
                "{width}x{height} flow needs {} values per channel, got {} and {}",
                width * height,
                u.len(),
                v.len()
            )));
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("flow field".into()));
        }
        Ok(FlowField {
            width,
            height,
            u,
            v,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn u(&self) -> &[f32] {
        &self.u
    }

    pub fn v(&self) -> &[f32] {
        &self.v
    }

    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    /// Planar `[2, H, W]` tensor with every component divided by `scale`.
    pub fn to_tensor(&self, scale: f64) -> Tensor {
        let data = self
            .u
            .iter()
            .chain(&self.v)
            .map(|&x| x as f64 / scale)
            .collect();
        Tensor::from_parts(vec![2, self.height, self.width], data)
    }
}
