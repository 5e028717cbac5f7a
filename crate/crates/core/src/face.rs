//! Shared domain types: blendshape and motor frames/sequences, robot
//! configurations, neutral-pose calibration and the motor normalization maps.

use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Default number of blendshape channels per capture frame.
pub const DEFAULT_BLENDSHAPE_DIM: usize = 55;
/// Default sequence length processed by the sequence models.
pub const DEFAULT_SEQ_LEN: usize = 120;
/// Channels whose neutral activation exceeds this are treated as saturated.
pub const NEUTRAL_SATURATION: f32 = 0.99;

fn check_unit_range(context: &str, values: &[f32]) -> Result<()> {
    if let Some((i, v)) = values
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(Error::InvalidInput(format!(
            "{context}: channel {i} = {v} outside [0, 1]"
        )));
    }
    Ok(())
}

/// One capture frame of blendshape activations in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendshapeFrame(Vec<f32>);

impl BlendshapeFrame {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("empty blendshape frame".into()));
        }
        check_unit_range("blendshape frame", &values)?;
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }
}

/// Ordered blendshape frames, the conditioning signal of the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendshapeSequence {
    data: Array2<f32>,
    pub frame_rate_hz: f32,
}

impl BlendshapeSequence {
    pub fn new(data: Array2<f32>, frame_rate_hz: f32) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidInput("empty blendshape sequence".into()));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "blendshape sequence value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            data,
            frame_rate_hz,
        })
    }

    pub fn from_frames(frames: &[BlendshapeFrame], frame_rate_hz: f32) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidInput("empty blendshape sequence".into()))?;
        let dim = first.dim();
        let mut data = Array2::zeros((frames.len(), dim));
        for (i, f) in frames.iter().enumerate() {
            check_dim("blendshape sequence frame", dim, f.dim())?;
            data.row_mut(i)
                .iter_mut()
                .zip(f.values())
                .for_each(|(d, v)| *d = *v);
        }
        Ok(Self {
            data,
            frame_rate_hz,
        })
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn frame(&self, i: usize) -> ArrayView1<'_, f32> {
        self.data.row(i)
    }

    /// Frames `start..start + len` as a new sequence.
    pub fn window(&self, start: usize, len: usize) -> Self {
        Self {
            data: self
                .data
                .slice(ndarray::s![start..start + len, ..])
                .to_owned(),
            frame_rate_hz: self.frame_rate_hz,
        }
    }
}

/// One frame of normalized motor commands in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotorFrame(Vec<f32>);

impl MotorFrame {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("empty motor frame".into()));
        }
        check_unit_range("motor frame", &values)?;
        Ok(Self(values))
    }

    pub fn zeros(dof: usize) -> Self {
        Self(vec![0.0; dof])
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dof(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }
}

/// A `T x dof` motor sequence.
///
/// At `noise_level == 0` the values are clean normalized commands in `[0, 1]`;
/// at `noise_level > 0` they live in the centered diffusion space and are
/// unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct MotorSequence {
    data: Array2<f32>,
    pub noise_level: usize,
}

impl MotorSequence {
    /// A clean sequence; every value must be in `[0, 1]`.
    pub fn clean(data: Array2<f32>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidInput("empty motor sequence".into()));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "clean motor sequence value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            data,
            noise_level: 0,
        })
    }

    /// A sequence in diffusion space at the given noise level (no range check).
    pub fn noisy(data: Array2<f32>, noise_level: usize) -> Self {
        Self { data, noise_level }
    }

    pub fn from_frames(frames: &[MotorFrame]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidInput("empty motor sequence".into()))?;
        let mut data = Array2::zeros((frames.len(), first.dof()));
        for (i, f) in frames.iter().enumerate() {
            check_dim("motor sequence frame", first.dof(), f.dof())?;
            data.row_mut(i)
                .iter_mut()
                .zip(f.values())
                .for_each(|(d, v)| *d = *v);
        }
        Self::clean(data)
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dof(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f32> {
        self.data
    }

    /// Frame `i` as a clean motor frame (values clamped into `[0, 1]`).
    pub fn frame(&self, i: usize) -> MotorFrame {
        MotorFrame(
            self.data
                .row(i)
                .iter()
                .map(|v| v.clamp(0.0, 1.0))
                .collect(),
        )
    }

    pub fn last_frame(&self) -> MotorFrame {
        self.frame(self.len() - 1)
    }

    /// Clean motor values mapped into diffusion space, `x = 2m - 1`.
    pub fn to_diffusion_space(&self) -> Self {
        Self::noisy(self.data.mapv(|m| 2.0 * m - 1.0), self.noise_level)
    }

    /// Inverse of [`MotorSequence::to_diffusion_space`], clamped back to `[0, 1]`.
    pub fn from_diffusion_space(&self) -> Self {
        Self {
            data: self.data.mapv(|x| ((x + 1.0) * 0.5).clamp(0.0, 1.0)),
            noise_level: 0,
        }
    }

    /// Concatenates sequences along the time axis.
    pub fn concat(parts: &[MotorSequence]) -> Result<Self> {
        let views: Vec<_> = parts.iter().map(|p| p.data.view()).collect();
        let data = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::InvalidInput(format!("cannot concatenate: {e}")))?;
        Ok(Self {
            data,
            noise_level: 0,
        })
    }
}

/// Shifts a clean motor frame into the zero-centered diffusion space.
pub fn to_diffusion_space(m: &MotorFrame) -> Vec<f32> {
    m.values().iter().map(|v| 2.0 * v - 1.0).collect()
}

/// Maps a diffusion-space vector back to a clean motor frame.
pub fn from_diffusion_space(x: &[f32]) -> MotorFrame {
    MotorFrame(x.iter().map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect())
}

/// Static description of one robot's actuator set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotConfig {
    pub name: String,
    pub dof: usize,
    pub actuator_names: Vec<String>,
    pub raw_min: Vec<f32>,
    pub raw_max: Vec<f32>,
    #[serde(default = "default_blendshape_dim")]
    pub blendshape_dim: usize,
}

fn default_blendshape_dim() -> usize {
    DEFAULT_BLENDSHAPE_DIM
}

impl RobotConfig {
    /// Cable-driven head, 33 facial actuators, 12-bit servo positions.
    pub fn micheal() -> Self {
        Self::preset("micheal", 33, 0.0, 4095.0)
    }

    /// Linkage-driven head, 32 facial actuators, joint angles in degrees.
    pub fn hobbs() -> Self {
        Self::preset("hobbs", 32, -45.0, 45.0)
    }

    fn preset(name: &str, dof: usize, lo: f32, hi: f32) -> Self {
        Self {
            name: name.to_string(),
            dof,
            actuator_names: (0..dof).map(|i| format!("{name}_m{i:02}")).collect(),
            raw_min: vec![lo; dof],
            raw_max: vec![hi; dof],
            blendshape_dim: DEFAULT_BLENDSHAPE_DIM,
        }
    }

    /// Looks up a bundled preset by name.
    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "micheal" => Some(Self::micheal()),
            "hobbs" => Some(Self::hobbs()),
            _ => None,
        }
    }

    /// Resolves either a preset name or a path to a JSON document.
    pub fn resolve(spec: &str) -> Result<Self> {
        match Self::by_name(spec) {
            Some(cfg) => Ok(cfg),
            None => Self::load(spec),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dof == 0 {
            return Err(Error::InvalidConfig("dof must be positive".into()));
        }
        if self.blendshape_dim == 0 {
            return Err(Error::InvalidConfig("blendshape_dim must be positive".into()));
        }
        for (what, len) in [
            ("actuator_names", self.actuator_names.len()),
            ("raw_min", self.raw_min.len()),
            ("raw_max", self.raw_max.len()),
        ] {
            if len != self.dof {
                return Err(Error::InvalidConfig(format!(
                    "{what} has {len} entries, dof is {}",
                    self.dof
                )));
            }
        }
        if let Some(i) = (0..self.dof).find(|&i| self.raw_min[i] >= self.raw_max[i]) {
            return Err(Error::InvalidConfig(format!(
                "actuator {i}: raw_min {} >= raw_max {}",
                self.raw_min[i], self.raw_max[i]
            )));
        }
        Ok(())
    }
}

/// Maps a normalized command onto the actuator's physical range.
pub fn denormalize(m: &MotorFrame, cfg: &RobotConfig) -> Result<Vec<f32>> {
    check_dim("denormalize", cfg.dof, m.dof())?;
    Ok(m.values()
        .iter()
        .zip(cfg.raw_min.iter().zip(&cfg.raw_max))
        .map(|(v, (lo, hi))| lo + v * (hi - lo))
        .collect())
}

/// Rest-pose capture used to calibrate raw blendshape frames.
#[derive(Debug, Clone, PartialEq)]
pub struct NeutralPose {
    pub neutral: BlendshapeFrame,
}

impl NeutralPose {
    pub fn new(neutral: BlendshapeFrame) -> Self {
        Self { neutral }
    }

    /// The all-zero rest pose; calibrating against it is the identity.
    pub fn zero(dim: usize) -> Self {
        Self {
            neutral: BlendshapeFrame::zeros(dim),
        }
    }
}

/// Re-expresses a raw capture relative to the neutral pose, rescaling the
/// remaining headroom of each channel onto `[0, 1]`.
pub fn calibrate(raw: &BlendshapeFrame, neutral: &NeutralPose) -> Result<BlendshapeFrame> {
    check_dim("calibrate", neutral.neutral.dim(), raw.dim())?;
    let values = raw
        .values()
        .iter()
        .zip(neutral.neutral.values())
        .map(|(&r, &n)| {
            if n > NEUTRAL_SATURATION {
                0.0
            } else {
                ((r - n) / (1.0 - n)).clamp(0.0, 1.0)
            }
        })
        .collect();
    Ok(BlendshapeFrame(values))
}
