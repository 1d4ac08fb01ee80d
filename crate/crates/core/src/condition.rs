//! Motion condition and motion modulation layers.
//!
//! A small stack of convolutions maps a scaled flow image to condition features
//! `psi`. For every modulated backbone layer two independent 1x1 branches turn
//! `psi` into a per-element scale `beta` and shift `gamma`, and the RGB features at
//! that layer become `beta * f + gamma`.
//!
//! The `beta` branch starts with zero weights and unit bias and the `gamma` branch
//! with all zeros, so a freshly built network computes exactly what the plain RGB
//! network computes.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{he_uniform, ParamId, ParamStore, Tape, Tensor, Var};

/// Backbone layer whose output can be modulated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConvSite {
    Conv1,
    Conv2,
    Conv3,
    Conv4,
}

impl ConvSite {
    pub const ALL: [ConvSite; 4] = [
        ConvSite::Conv1,
        ConvSite::Conv2,
        ConvSite::Conv3,
        ConvSite::Conv4,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ConvSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "conv{}", self.index() + 1)
    }
}

impl FromStr for ConvSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv1" => Ok(ConvSite::Conv1),
            "conv2" => Ok(ConvSite::Conv2),
            "conv3" => Ok(ConvSite::Conv3),
            "conv4" => Ok(ConvSite::Conv4),
            other => Err(Error::Config(format!("unknown modulation site `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KernelSize {
    K1x1,
    K3x3,
}

impl KernelSize {
    pub fn size(self) -> usize {
        match self {
            KernelSize::K1x1 => 1,
            KernelSize::K3x3 => 3,
        }
    }
}

impl fmt::Display for KernelSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelSize::K1x1 => "1x1",
            KernelSize::K3x3 => "3x3",
        })
    }
}

impl FromStr for KernelSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1x1" => Ok(KernelSize::K1x1),
            "3x3" => Ok(KernelSize::K3x3),
            other => Err(Error::Config(format!(
                "unknown kernel size `{other}` (expected 1x1|3x3)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionConfig {
    /// Output channels of each condition convolution.
    pub channels: Vec<usize>,
    /// Kernel of the last condition convolution (all others are 1x1).
    pub last_kernel: KernelSize,
    /// Modulated backbone layers, ascending and without duplicates.
    pub modulate_at: Vec<ConvSite>,
    /// Raw flow values are divided by this before entering the condition stack.
    pub flow_scale: f64,
}

impl Default for ConditionConfig {
    fn default() -> Self {
        ConditionConfig {
            channels: vec![8, 8],
            last_kernel: KernelSize::K3x3,
            modulate_at: vec![ConvSite::Conv2],
            flow_scale: 4.0,
        }
    }
}

impl ConditionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config(
                "condition.channels must be a non-empty list of positive widths".into(),
            ));
        }
        if self.modulate_at.is_empty() {
            return Err(Error::Config(
                "condition.modulate_at must name at least one site".into(),
            ));
        }
        if self.modulate_at.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "condition.modulate_at must be ascending without duplicates".into(),
            ));
        }
        if !(self.flow_scale.is_finite() && self.flow_scale > 0.0) {
            return Err(Error::Config(
                "condition.flow_scale must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Width and cumulative downsampling of one backbone layer's output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SiteSpec {
    pub site: ConvSite,
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
}

impl ConvLayer {
    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
struct Branch {
    spec: SiteSpec,
    beta: ConvLayer,
    gamma: ConvLayer,
}

/// `(beta, gamma)` for one modulation site, shaped like that site's feature map.
#[derive(Clone, Copy, Debug)]
pub struct ModulationParams {
    pub beta: Var,
    pub gamma: Var,
}

/// Condition stack plus one `(beta, gamma)` branch pair per modulated site.
#[derive(Clone, Debug)]
pub struct MotionModulation {
    cfg: ConditionConfig,
    stack: Vec<ConvLayer>,
    psi_stride: usize,
    branches: Vec<Branch>,
}

fn stride_exponent(factor: usize) -> Result<usize> {
    if !factor.is_power_of_two() {
        return Err(Error::Config(format!(
            "downsampling factor {factor} is not a power of two"
        )));
    }
    Ok(factor.trailing_zeros() as usize)
}

impl MotionModulation {
    /// Register condition and branch parameters under `prefix`. `sites` describes every
    /// backbone layer; the ones named in `cfg.modulate_at` get branches.
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ConditionConfig,
        sites: &[SiteSpec],
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let targets: Vec<SiteSpec> = cfg
            .modulate_at
            .iter()
            .map(|s| {
                sites
                    .iter()
                    .find(|spec| spec.site == *s)
                    .copied()
                    .ok_or_else(|| Error::Config(format!("backbone has no layer {s}")))
            })
            .collect::<Result<_>>()?;

        // The shared stack downsamples to the shallowest target; deeper targets
        // subsample further inside their own branches.
        let psi_stride = targets
            .iter()
            .map(|t| t.stride)
            .min()
            .expect("validated non-empty");
        let halvings = stride_exponent(psi_stride)?;
        if halvings > cfg.channels.len() {
            return Err(Error::Config(format!(
                "{} condition layers cannot reach downsampling factor {psi_stride}",
                cfg.channels.len()
            )));
        }

        let mut stack = Vec::with_capacity(cfg.channels.len());
        let mut c_in = 2;
        for (i, &c_out) in cfg.channels.iter().enumerate() {
            let k = if i + 1 == cfg.channels.len() {
                cfg.last_kernel.size()
            } else {
                1
            };
            let weight = store.add(
                format!("{prefix}/cond{}/weight", i + 1),
                he_uniform(rng, [c_out, c_in, k, k]),
                true,
            )?;
            let bias = store.add(
                format!("{prefix}/cond{}/bias", i + 1),
                Tensor::zeros(&[c_out]),
                true,
            )?;
            stack.push(ConvLayer {
                weight,
                bias,
                stride: if i < halvings { 2 } else { 1 },
                pad: k / 2,
            });
            c_in = c_out;
        }
        let c_psi = c_in;

        let mut branches = Vec::with_capacity(targets.len());
        for spec in targets {
            if spec.stride % psi_stride != 0 {
                return Err(Error::Config(format!(
                    "site {} stride {} is not a multiple of {psi_stride}",
                    spec.site, spec.stride
                )));
            }
            let stride = spec.stride / psi_stride;
            stride_exponent(stride)?;
            let mut branch = |name: &str, bias_value: f64| -> Result<ConvLayer> {
                let weight = store.add(
                    format!("{prefix}/{}/{name}/weight", spec.site),
                    Tensor::zeros(&[spec.channels, c_psi, 1, 1]),
                    true,
                )?;
                let bias = store.add(
                    format!("{prefix}/{}/{name}/bias", spec.site),
                    Tensor::full(&[spec.channels], bias_value),
                    true,
                )?;
                Ok(ConvLayer {
                    weight,
                    bias,
                    stride,
                    pad: 0,
                })
            };
            let beta = branch("beta", 1.0)?;
            let gamma = branch("gamma", 0.0)?;
            branches.push(Branch { spec, beta, gamma });
        }

        Ok(MotionModulation {
            cfg: cfg.clone(),
            stack,
            psi_stride,
            branches,
        })
    }

    pub fn config(&self) -> &ConditionConfig {
        &self.cfg
    }

    pub fn sites(&self) -> impl Iterator<Item = ConvSite> + '_ {
        self.branches.iter().map(|b| b.spec.site)
    }

    /// Downsampling factor between the flow image and `psi`.
    pub fn psi_stride(&self) -> usize {
        self.psi_stride
    }

    /// `psi = MC(flow / flow_scale)`: 1x1 convs with ReLU, the last kernel per config.
    /// `flow` is the raw `[2, H, W]` flow tensor.
    pub fn motion_condition(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        flow: &Tensor,
    ) -> Result<Var> {
        let s = flow.shape();
        if s.len() != 3 || s[0] != 2 {
            return Err(Error::shape(format!(
                "flow tensor must be [2,H,W], got {s:?}"
            )));
        }
        let deepest = self
            .branches
            .iter()
            .map(|b| b.spec.stride)
            .max()
            .unwrap_or(1);
        if !s[1].is_multiple_of(deepest) || !s[2].is_multiple_of(deepest) {
            return Err(Error::shape(format!(
                "flow resolution {}x{} is not divisible by the required stride {deepest}",
                s[2], s[1]
            )));
        }
        let scaled: Vec<f64> = flow
            .data()
            .iter()
            .map(|v| v / self.cfg.flow_scale)
            .collect();
        let mut x = tape.input(Tensor::new(s.to_vec(), scaled)?);
        for layer in &self.stack {
            x = layer.apply(tape, store, x)?;
            x = tape.relu(x);
        }
        Ok(x)
    }

    /// `(beta, gamma) = F(psi)` for `site`.
    pub fn modulation_params(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        psi: Var,
        site: ConvSite,
    ) -> Result<ModulationParams> {
        let branch = self
            .branches
            .iter()
            .find(|b| b.spec.site == site)
            .ok_or_else(|| Error::invalid(format!("{site} is not a modulated site")))?;
        let beta = branch.beta.apply(tape, store, psi)?;
        let gamma = branch.gamma.apply(tape, store, psi)?;
        Ok(ModulationParams { beta, gamma })
    }

    /// Compute `psi` once and the `(beta, gamma)` pair of every modulated site.
    pub fn all_params(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        flow: &Tensor,
    ) -> Result<Vec<(ConvSite, ModulationParams)>> {
        let psi = self.motion_condition(tape, store, flow)?;
        self.branches
            .iter()
            .map(|b| {
                Ok((
                    b.spec.site,
                    self.modulation_params(tape, store, psi, b.spec.site)?,
                ))
            })
            .collect()
    }
}

/// `beta * f + gamma`, elementwise.
pub fn modulate(tape: &mut Tape, f: Var, m: &ModulationParams) -> Result<Var> {
    if tape.shape(m.beta) != tape.shape(f) || tape.shape(m.gamma) != tape.shape(f) {
        return Err(Error::shape(format!(
            "modulation parameters beta {:?} / gamma {:?} do not match features {:?}",
            tape.shape(m.beta),
            tape.shape(m.gamma),
            tape.shape(f)
        )));
    }
    tape.mul_add(m.beta, f, m.gamma)
}
