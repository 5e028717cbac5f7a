use std::sync::RwLock;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::channel::LatestSlot;
use super::window::{PadPolicy, WindowBuffer};
use crate::denoiser::Model;
use crate::diffusion::{sample, DiffusionSchedule, SamplerConfig};
use crate::error::{check_dim, Error, Result};
use crate::face::{calibrate, BlendshapeFrame, BlendshapeSequence, MotorFrame, MotorSequence, NeutralPose};
use crate::nn::Params;
use crate::trainer::Checkpoint;

/// A loaded model ready to map a window to a motor sequence.
#[derive(Debug, Clone)]
pub struct Policy {
    model: Model,
    params: Params<f32>,
    sched: DiffusionSchedule,
    sampler: SamplerConfig,
    seed: u64,
}

impl Policy {
    /// Serving always samples deterministically with `sample_steps` reverse
    /// steps.
    pub fn from_checkpoint(ckpt: &Checkpoint, sample_steps: usize, seed: u64) -> Result<Self> {
        if sample_steps == 0 {
            return Err(Error::InvalidConfig("sample_steps must be at least 1".into()));
        }
        let sched = ckpt.schedule.build()?;
        let sampler = SamplerConfig {
            stochastic: false,
            stride: sched.stride_for_steps(sample_steps),
        };
        Ok(Self {
            model: ckpt.build_model()?,
            params: ckpt.params.clone(),
            sched,
            sampler,
            seed,
        })
    }

    pub fn dof(&self) -> usize {
        self.model.config().dof
    }

    pub fn blendshape_dim(&self) -> usize {
        self.model.config().blendshape_dim
    }

    pub fn window_len(&self) -> usize {
        self.model.config().seq_len
    }

    /// Deterministic: the same window always yields the same output.
    pub fn infer(&self, window: &BlendshapeSequence) -> Result<MotorSequence> {
        match &self.model {
            Model::Exface(m) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                sample(
                    &m.bind(&self.params),
                    window,
                    self.dof(),
                    &self.sched,
                    &mut rng,
                    self.sampler,
                )
            }
            Model::Transformer(m) => m.transformer_predict(&self.params, window),
            Model::Mlp(m) => m.predict_sequence(&self.params, window),
        }
    }
}

/// Result of one control cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleOutput {
    pub command: MotorFrame,
    /// `false` when inference failed and the last good command was reused.
    pub fresh: bool,
}

/// A calibrated frame waiting for the next control cycle.
#[derive(Debug, Clone)]
pub struct Pending {
    pub frame: BlendshapeFrame,
    pub timestamp_us: u64,
    pub received: Instant,
}

/// Front door of the service: validates and calibrates raw captures and
/// parks the newest one for the inference loop.
#[derive(Debug)]
pub struct Ingestor {
    dim: usize,
    neutral: RwLock<NeutralPose>,
    slot: LatestSlot<Pending>,
}

impl Ingestor {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            neutral: RwLock::new(NeutralPose::zero(dim)),
            slot: LatestSlot::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn slot(&self) -> &LatestSlot<Pending> {
        &self.slot
    }

    pub fn set_neutral(&self, values: Vec<f32>) -> Result<()> {
        check_dim("neutral pose", self.dim, values.len())?;
        let frame = BlendshapeFrame::new(values)?;
        *self.neutral.write().expect("neutral lock") = NeutralPose::new(frame);
        Ok(())
    }

    /// Calibrates a raw capture against the current neutral pose.
    pub fn calibrate(&self, values: Vec<f32>) -> Result<BlendshapeFrame> {
        check_dim("blendshape frame", self.dim, values.len())?;
        let raw = BlendshapeFrame::new(values)?;
        calibrate(&raw, &self.neutral.read().expect("neutral lock"))
    }

    /// Calibrates and parks a frame. Returns the calibrated frame and
    /// whether an unconsumed one was displaced.
    pub fn ingest(&self, timestamp_us: u64, values: Vec<f32>) -> Result<(BlendshapeFrame, bool)> {
        let frame = self.calibrate(values)?;
        let replaced = self.slot.put(Pending {
            frame: frame.clone(),
            timestamp_us,
            received: Instant::now(),
        });
        Ok((frame, replaced))
    }
}

/// Retargeting state owned by the inference loop: the history window and
/// the last good command.
#[derive(Debug, Clone)]
pub struct Retargeter {
    policy: Policy,
    window: WindowBuffer,
    last_good: Option<MotorFrame>,
    errors: u64,
}

impl Retargeter {
    pub fn new(policy: Policy, pad: PadPolicy) -> Self {
        let window = WindowBuffer::new(policy.window_len(), policy.blendshape_dim(), pad);
        Self {
            policy,
            window,
            last_good: None,
            errors: 0,
        }
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn window(&self) -> &WindowBuffer {
        &self.window
    }

    pub fn errors(&self) -> u64 {
        self.errors
    }

    /// Pushes the pending frame (if any), samples on the window and returns
    /// the final frame of the generated sequence.
    pub fn control_cycle(&mut self, pending: Option<BlendshapeFrame>) -> Result<CycleOutput> {
        if let Some(frame) = pending {
            self.window.push(frame)?;
        }
        self.cycle_with(|p, w| p.infer(w))
    }

    fn cycle_with<F>(&mut self, infer: F) -> Result<CycleOutput>
    where
        F: FnOnce(&Policy, &BlendshapeSequence) -> Result<MotorSequence>,
    {
        match infer(&self.policy, &self.window.sequence()) {
            Ok(seq) => {
                let command = seq.last_frame();
                self.last_good = Some(command.clone());
                Ok(CycleOutput {
                    command,
                    fresh: true,
                })
            }
            Err(e) => {
                self.errors += 1;
                log::warn!("control cycle failed: {e}");
                match &self.last_good {
                    Some(c) => Ok(CycleOutput {
                        command: c.clone(),
                        fresh: false,
                    }),
                    None => Err(e),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{ModelConfig, ModelKind};
    use crate::diffusion::ScheduleConfig;
    use rand::SeedableRng;

    pub(crate) fn tiny_checkpoint() -> Checkpoint {
        let model = ModelConfig {
            dof: 3,
            blendshape_dim: 5,
            seq_len: 6,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            mlp_hidden: 8,
            final_norm: false,
        };
        let m = Model::new(ModelKind::Exface, model).unwrap();
        Checkpoint {
            kind: ModelKind::Exface,
            model,
            robot: "tiny".into(),
            schedule: ScheduleConfig::default(),
            training_steps: 0,
            plant_seed: None,
            params: m.init(&mut ChaCha8Rng::seed_from_u64(3)),
        }
    }

    fn frame(v: f32) -> BlendshapeFrame {
        BlendshapeFrame::new(vec![v; 5]).unwrap()
    }

    #[test]
    fn repeated_cycles_on_a_fixed_window_are_identical() {
        let policy = Policy::from_checkpoint(&tiny_checkpoint(), 8, 1).unwrap();
        let mut r = Retargeter::new(policy, PadPolicy::RepeatEarliest);
        let first = r.control_cycle(Some(frame(0.3))).unwrap();
        let again = r.control_cycle(None).unwrap();
        assert_eq!(first, again);
        assert!(first.fresh);
        assert!(first.command.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn failure_falls_back_to_last_good_command() {
        let policy = Policy::from_checkpoint(&tiny_checkpoint(), 8, 1).unwrap();
        let mut r = Retargeter::new(policy, PadPolicy::Neutral);
        assert!(r
            .cycle_with(|_, _| Err(Error::Sampler("boom".into())))
            .is_err());
        let good = r.control_cycle(Some(frame(0.5))).unwrap();
        let fallback = r
            .cycle_with(|_, _| Err(Error::Sampler("boom".into())))
            .unwrap();
        assert_eq!(fallback.command, good.command);
        assert!(!fallback.fresh);
        assert_eq!(r.errors(), 2);
    }

    #[test]
    fn wrong_dimension_is_rejected_without_state_change() {
        let policy = Policy::from_checkpoint(&tiny_checkpoint(), 8, 1).unwrap();
        let mut r = Retargeter::new(policy, PadPolicy::Neutral);
        r.control_cycle(Some(frame(0.5))).unwrap();
        let before = r.window().sequence();
        let bad = BlendshapeFrame::new(vec![0.1; 4]).unwrap();
        assert!(r.control_cycle(Some(bad)).is_err());
        assert_eq!(r.window().sequence(), before);
    }

    #[test]
    fn ingest_calibrates_and_keeps_only_the_newest() {
        let ing = Ingestor::new(5);
        assert_eq!(ing.calibrate(vec![0.4; 5]).unwrap(), frame(0.4));
        ing.set_neutral(vec![0.2; 5]).unwrap();
        let c = ing.calibrate(vec![0.6; 5]).unwrap();
        assert!(c.values().iter().all(|&v| (v - 0.5).abs() < 1e-6));
        assert!(!ing.ingest(1, vec![0.6; 5]).unwrap().1);
        assert!(ing.ingest(2, vec![0.7; 5]).unwrap().1);
        assert_eq!(ing.slot().try_take().unwrap().timestamp_us, 2);
        assert!(ing.ingest(3, vec![0.5; 4]).is_err());
        assert!(ing.set_neutral(vec![0.5; 6]).is_err());
        let c = ing.slot().counts();
        assert_eq!((c.offered, c.replaced, c.depth), (2, 1, 0));
    }
}
