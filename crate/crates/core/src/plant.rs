//! Deterministic simulated robot face: motor commands in, captured
//! blendshapes out. Also generates the synthetic driving sequences used for
//! bootstrap data and validation.
//!
//! The forward map is `b = clamp(gain * W2 * tanh(W1 * m), 0, 1)` with
//! non-negative, diagonally dominant `W1` and row-stochastic `W2`, so zero
//! motors give the neutral (all-zero) face and the map is smooth, coupled and
//! invertible on its image. `gain` is chosen so the fully actuated face stays
//! just below 1 and the clamp only acts on capture noise.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::face::{BlendshapeFrame, BlendshapeSequence, MotorFrame, MotorSequence, RobotConfig};

/// Frame rate of generated sequences.
pub const SEQUENCE_RATE_HZ: f32 = 60.0;

/// Serializable description from which a [`PlantModel`] is rebuilt exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub seed: u64,
    pub dof: usize,
    pub blendshape_dim: usize,
    /// Hidden "muscle" units; defaults to `dof`.
    pub hidden: usize,
    /// Diagonal drive of `W1`; sets how far into tanh saturation a fully
    /// actuated motor goes.
    pub drive: f64,
    /// Upper bound of the random off-diagonal couplings in `W1`.
    pub coupling: f64,
    pub capture_noise_sigma: f64,
}

impl PlantSpec {
    pub fn new(seed: u64, dof: usize, blendshape_dim: usize) -> Self {
        Self {
            seed,
            dof,
            blendshape_dim,
            hidden: dof,
            drive: 1.5,
            coupling: 0.3,
            capture_noise_sigma: 0.005,
        }
    }

    pub fn for_robot(robot: &RobotConfig, seed: u64) -> Self {
        Self::new(seed, robot.dof, robot.blendshape_dim)
    }
}

/// Simulated motors-to-blendshapes map.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    spec: PlantSpec,
    w1: Array2<f64>,
    w2: Array2<f64>,
    gain: f64,
}

impl PlantModel {
    pub fn new(spec: PlantSpec) -> Result<Self> {
        if spec.dof == 0 || spec.blendshape_dim == 0 || spec.hidden < spec.dof {
            return Err(Error::InvalidConfig(format!(
                "plant needs dof > 0, blendshape_dim > 0 and hidden >= dof (got {spec:?})"
            )));
        }
        if spec.drive <= 0.0 || spec.coupling < 0.0 || spec.capture_noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("plant drive/coupling/noise out of range".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (h, d, b) = (spec.hidden, spec.dof, spec.blendshape_dim);

        // Each unit is driven mainly by its own motor plus two weak neighbours.
        let mut w1 = Array2::zeros((h, d));
        for i in 0..h {
            w1[[i, i % d]] += spec.drive;
            for j in sample_indices(&mut rng, d, 2.min(d)) {
                if j != i % d {
                    w1[[i, j]] += rng.gen_range(0.0..spec.coupling);
                }
            }
        }

        // Every blendshape reads a primary unit plus up to two secondary ones.
        let mut w2 = Array2::zeros((b, h));
        for j in 0..b {
            w2[[j, j % h]] = 1.0;
            let extra = rng.gen_range(1..=2usize);
            for k in sample_indices(&mut rng, h, extra.min(h)) {
                if k != j % h {
                    w2[[j, k]] += rng.gen_range(0.1..0.5);
                }
            }
            let sum = w2.row(j).sum();
            w2.row_mut(j).mapv_inplace(|v| v / sum);
        }

        let full = w2.dot(&w1.dot(&Array1::ones(d)).mapv(f64::tanh));
        let gain = 0.95 / full.fold(0.0f64, |m, &v| m.max(v));
        Ok(Self { spec, w1, w2, gain })
    }

    pub fn spec(&self) -> &PlantSpec {
        &self.spec
    }

    pub fn dof(&self) -> usize {
        self.spec.dof
    }

    pub fn blendshape_dim(&self) -> usize {
        self.spec.blendshape_dim
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn w1(&self) -> &Array2<f64> {
        &self.w1
    }

    pub fn w2(&self) -> &Array2<f64> {
        &self.w2
    }

    /// Analytic Jacobian `∂b/∂m` at the neutral pose: `gain * W2 * W1`.
    pub fn jacobian_at_zero(&self) -> Array2<f64> {
        self.w2.dot(&self.w1) * self.gain
    }

    /// Sup-norm Lipschitz bound `gain * ‖W2‖∞ * ‖W1‖∞`.
    pub fn lipschitz_bound(&self) -> f64 {
        let row_sum = |m: &Array2<f64>| {
            m.rows()
                .into_iter()
                .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
                .fold(0.0, f64::max)
        };
        self.gain * row_sum(&self.w2) * row_sum(&self.w1)
    }

    fn forward(&self, m: &[f32]) -> Array1<f64> {
        let m = Array1::from_iter(m.iter().map(|&v| f64::from(v)));
        (self.w2.dot(&self.w1.dot(&m).mapv(f64::tanh)) * self.gain).mapv(|v| v.clamp(0.0, 1.0))
    }

    /// Observes the face for one motor frame. Capture noise is added when an
    /// rng is supplied: Gaussian truncated at ±3σ, then re-clamped to `[0, 1]`.
    pub fn plant_observe(
        &self,
        m: &MotorFrame,
        noise: Option<&mut dyn RngCore>,
    ) -> Result<BlendshapeFrame> {
        check_dim("plant motor frame", self.dof(), m.dof())?;
        let mut b = self.forward(m.values());
        if let Some(rng) = noise {
            let sigma = self.spec.capture_noise_sigma;
            if sigma > 0.0 {
                for v in b.iter_mut() {
                    *v = (*v + sigma * truncated_normal(rng)).clamp(0.0, 1.0);
                }
            }
        }
        BlendshapeFrame::new(b.iter().map(|&v| v as f32).collect())
    }

    /// Noise-free observation of a motor frame.
    pub fn observe_clean(&self, m: &MotorFrame) -> Result<BlendshapeFrame> {
        self.plant_observe(m, None)
    }

    /// Observes every frame of a clean motor sequence.
    pub fn observe_sequence(
        &self,
        motors: &MotorSequence,
        mut noise: Option<&mut dyn RngCore>,
    ) -> Result<BlendshapeSequence> {
        check_dim("plant motor sequence", self.dof(), motors.dof())?;
        let mut out = Array2::zeros((motors.len(), self.blendshape_dim()));
        for (i, row) in motors.data().rows().into_iter().enumerate() {
            let frame = MotorFrame::new(row.to_vec())?;
            let b = match noise.as_mut() {
                Some(rng) => self.plant_observe(&frame, Some(&mut **rng))?,
                None => self.plant_observe(&frame, None)?,
            };
            out.row_mut(i)
                .iter_mut()
                .zip(b.values())
                .for_each(|(d, v)| *d = *v);
        }
        BlendshapeSequence::new(out, SEQUENCE_RATE_HZ)
    }
}

fn truncated_normal(rng: &mut dyn RngCore) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 3.0 {
            return z;
        }
    }
}

/// How synthetic driving sequences are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceMode {
    /// Sparse "expression" keyframes in motor space, observed through the
    /// plant without noise, so every frame is attainable.
    Reachable,
    /// Sparse keyframes directly in blendshape space; may be unattainable.
    Free,
}

/// A keyframe of the interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub frame: usize,
    pub values: Vec<f64>,
}

/// A generated driving sequence. `motors` is the ground-truth motor track
/// for sequences generated in motor space.
#[derive(Debug, Clone)]
pub struct GeneratedSequence {
    pub blendshapes: BlendshapeSequence,
    pub motors: Option<MotorSequence>,
    pub keyframes: Vec<Keyframe>,
}

/// Keyframe spacing bounds in frames.
pub const MIN_SPACING: usize = 10;
pub const MAX_SPACING: usize = 40;

/// Number of contiguous channel groups treated as "muscle groups".
const GROUPS: usize = 6;

/// Sparse, expression-like activation: with some probability the neutral
/// face, otherwise one to three channel groups at a shared intensity.
fn sparse_keyframe<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    if rng.gen_bool(0.15) {
        return v;
    }
    let groups = GROUPS.min(dim);
    let active = rng.gen_range(1..=3usize.min(groups));
    let intensity = rng.gen_range(0.3..1.0);
    for g in sample_indices(rng, groups, active) {
        let (lo, hi) = (g * dim / groups, (g + 1) * dim / groups);
        for x in &mut v[lo..hi] {
            if rng.gen_bool(0.7) {
                *x = intensity * rng.gen_range(0.5..1.0);
            }
        }
    }
    v
}

fn uniform_keyframe<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.gen_range(0.0..1.0)).collect()
}

fn keyframe_track<R, F>(len: usize, dim: usize, rng: &mut R, mut draw: F) -> Vec<Keyframe>
where
    R: Rng + ?Sized,
    F: FnMut(usize, &mut R) -> Vec<f64>,
{
    let mut keys = vec![Keyframe {
        frame: 0,
        values: draw(dim, rng),
    }];
    while keys.last().map_or(0, |k| k.frame) < len - 1 {
        let frame = keys.last().map_or(0, |k| k.frame) + rng.gen_range(MIN_SPACING..=MAX_SPACING);
        keys.push(Keyframe {
            frame,
            values: draw(dim, rng),
        });
    }
    keys
}

/// Cosine interpolation between consecutive keyframes, sampled at `0..len`.
pub fn interpolate_keyframes(keys: &[Keyframe], len: usize) -> Array2<f64> {
    let dim = keys[0].values.len();
    let mut out = Array2::zeros((len, dim));
    for pair in keys.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let span = (b.frame - a.frame) as f64;
        for t in a.frame..b.frame.min(len) {
            let u = (t - a.frame) as f64 / span;
            let w = 0.5 * (1.0 - (PI * u).cos());
            for c in 0..dim {
                out[[t, c]] = a.values[c] + (b.values[c] - a.values[c]) * w;
            }
        }
    }
    if let Some(last) = keys.last() {
        if last.frame < len {
            for c in 0..dim {
                out[[last.frame, c]] = last.values[c];
            }
        }
    }
    out
}

fn to_f32(a: &Array2<f64>) -> Array2<f32> {
    a.mapv(|v| (v as f32).clamp(0.0, 1.0))
}

fn motor_track(
    plant: &PlantModel,
    keys: Vec<Keyframe>,
    len: usize,
) -> Result<GeneratedSequence> {
    let motors = MotorSequence::clean(to_f32(&interpolate_keyframes(&keys, len)))?;
    let blendshapes = plant.observe_sequence(&motors, None)?;
    Ok(GeneratedSequence {
        blendshapes,
        motors: Some(motors),
        keyframes: keys,
    })
}

/// Generates a human-like driving sequence of `len` frames.
pub fn gen_human_sequence<R: Rng + ?Sized>(
    plant: &PlantModel,
    len: usize,
    mode: SequenceMode,
    rng: &mut R,
) -> Result<GeneratedSequence> {
    if len < 2 {
        return Err(Error::InvalidInput("sequences need at least two frames".into()));
    }
    match mode {
        SequenceMode::Reachable => {
            let keys = keyframe_track(len, plant.dof(), rng, sparse_keyframe);
            motor_track(plant, keys, len)
        }
        SequenceMode::Free => {
            let keys = keyframe_track(len, plant.blendshape_dim(), rng, sparse_keyframe);
            let blendshapes =
                BlendshapeSequence::new(to_f32(&interpolate_keyframes(&keys, len)), SEQUENCE_RATE_HZ)?;
            Ok(GeneratedSequence {
                blendshapes,
                motors: None,
                keyframes: keys,
            })
        }
    }
}

/// Interpolates uniformly random motor keyframes and observes them through
/// the plant (noise free). Used by the interpolation-data ablation.
pub fn gen_random_interpolation<R: Rng + ?Sized>(
    plant: &PlantModel,
    len: usize,
    rng: &mut R,
) -> Result<GeneratedSequence> {
    if len < 2 {
        return Err(Error::InvalidInput("sequences need at least two frames".into()));
    }
    let keys = keyframe_track(len, plant.dof(), rng, uniform_keyframe);
    motor_track(plant, keys, len)
}
