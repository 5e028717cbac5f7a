//! Static stage-0 data and the self-improvement loop: drive the simulated
//! face with the current model, record what it actually did, retrain.

use ndarray::Array2;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{frames_total, train_epochs, DataSource, TrainConfig, TrainingSample};
use crate::denoiser::{Denoiser, Model};
use crate::diffusion::{sample, DiffusionSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::eval::{blendshape_distance, motor_distance, retarget, IterationMetrics, Method, ValidationSet};
use crate::face::{MotorFrame, MotorSequence};
use crate::nn::{Adam, Params};
use crate::plant::{gen_human_sequence, gen_random_interpolation, PlantModel, SequenceMode};

/// Where the motor sequences of each bootstrap iteration come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BootstrapMode {
    /// Sample the current model on human-like driving sequences.
    #[default]
    HumanDriven,
    /// Ablation: interpolate uniformly random motor keyframes instead.
    Interpolation,
}

/// `pairs` random static poses, each tiled into a constant sequence with its
/// noise-free plant response.
pub fn build_stage0<R: Rng + ?Sized>(
    plant: &PlantModel,
    pairs: usize,
    seq_len: usize,
    rng: &mut R,
) -> Result<Vec<TrainingSample>> {
    if pairs == 0 || seq_len == 0 {
        return Err(Error::InvalidInput("stage 0 needs at least one frame".into()));
    }
    (0..pairs)
        .map(|_| {
            let m: Vec<f32> = (0..plant.dof()).map(|_| rng.gen::<f32>()).collect();
            let b = plant.observe_clean(&MotorFrame::new(m.clone())?)?;
            let motors = Array2::from_shape_fn((seq_len, m.len()), |(_, j)| m[j]);
            let bs = Array2::from_shape_fn((seq_len, b.dim()), |(_, j)| b.values()[j]);
            TrainingSample::new(
                MotorSequence::clean(motors)?,
                crate::face::BlendshapeSequence::new(bs, crate::plant::SEQUENCE_RATE_HZ)?,
                DataSource::Static,
                0,
            )
        })
        .collect()
}

/// Whole sequences needed to cover `budget` frames (rounded up).
pub fn budget_sequences(budget: usize, seq_len: usize) -> Result<usize> {
    if seq_len == 0 || budget < seq_len {
        return Err(Error::InvalidConfig(format!(
            "frame budget {budget} is below one {seq_len}-frame sequence"
        )));
    }
    Ok(budget.div_ceil(seq_len))
}

/// Everything an iteration needs besides the evolving state.
#[derive(Debug, Clone, Copy)]
pub struct BootstrapContext<'a> {
    pub model: &'a Denoiser,
    pub sched: &'a DiffusionSchedule,
    pub plant: &'a PlantModel,
    pub train: &'a TrainConfig,
    pub sampler: SamplerConfig,
    pub mode: BootstrapMode,
    pub validation: &'a ValidationSet,
    /// Seed of the evaluation sampler, fixed across iterations.
    pub eval_seed: u64,
}

impl BootstrapContext<'_> {
    /// Validation distances of a parameter snapshot.
    pub fn validate(&self, params: &Params<f32>) -> Result<(f64, f64)> {
        let method = Method::Exface {
            model: self.model,
            params,
            sched: self.sched,
            sampler: self.sampler,
            seed: self.eval_seed,
        };
        let pred = retarget(&method, &self.validation.blendshapes)?;
        Ok((
            motor_distance(&pred, &self.validation.motors)?,
            blendshape_distance(&pred, &self.validation.blendshapes, self.plant)?,
        ))
    }
}

#[derive(Debug, Clone)]
pub struct BootstrapState {
    pub iteration: usize,
    pub dataset: Vec<TrainingSample>,
    pub frames_total: usize,
    pub checkpoint: Params<f32>,
    pub history: Vec<IterationMetrics>,
    pub optimizer: Adam,
    pub training_steps: u64,
}

impl BootstrapState {
    /// State after stage-0 training: validates the checkpoint and records it
    /// as iteration 0.
    pub fn from_stage0(
        ctx: &BootstrapContext<'_>,
        dataset: Vec<TrainingSample>,
        checkpoint: Params<f32>,
        optimizer: Adam,
        training_steps: u64,
    ) -> Result<Self> {
        let (md, bd) = ctx.validate(&checkpoint)?;
        let frames = frames_total(&dataset);
        Ok(Self {
            iteration: 0,
            frames_total: frames,
            dataset,
            checkpoint,
            history: vec![IterationMetrics {
                iteration: 0,
                frames_total: frames,
                motor_distance: md,
                blendshape_distance: bd,
            }],
            optimizer,
            training_steps,
        })
    }

    /// Sampling weights: data added in the latest round counts extra.
    pub fn weights(&self, new_weight: f64) -> Vec<f64> {
        weights_for_round(&self.dataset, self.iteration, new_weight)
    }
}

/// Per-sample weights when fine-tuning after `round`.
pub fn weights_for_round(dataset: &[TrainingSample], round: usize, new_weight: f64) -> Vec<f64> {
    dataset
        .iter()
        .map(|s| if round > 0 && s.round == round { new_weight } else { 1.0 })
        .collect()
}

/// New data for one iteration: `count` sequences of the context's length.
fn collect_round<R: Rng>(
    ctx: &BootstrapContext<'_>,
    params: &Params<f32>,
    count: usize,
    round: usize,
    rng: &mut R,
) -> Result<Vec<TrainingSample>> {
    let t = ctx.model.config().seq_len;
    let dof = ctx.model.config().dof;
    let bound = ctx.model.bind(params);
    (0..count)
        .map(|_| {
            let motors = match ctx.mode {
                BootstrapMode::HumanDriven => {
                    let drive = gen_human_sequence(ctx.plant, t, SequenceMode::Reachable, rng)?;
                    sample(&bound, &drive.blendshapes, dof, ctx.sched, rng, ctx.sampler)?
                }
                BootstrapMode::Interpolation => gen_random_interpolation(ctx.plant, t, rng)?
                    .motors
                    .expect("interpolation yields motors"),
            };
            let observed = ctx.plant.observe_sequence(&motors, Some(&mut *rng as &mut dyn RngCore))?;
            TrainingSample::new(motors, observed, DataSource::Bootstrap, round)
        })
        .collect()
}

/// Runs one bootstrap iteration and returns the successor state.
pub fn bootstrap_iterate<R: Rng>(
    mut state: BootstrapState,
    ctx: &BootstrapContext<'_>,
    frame_budget: usize,
    rng: &mut R,
) -> Result<BootstrapState> {
    let count = budget_sequences(frame_budget, ctx.model.config().seq_len)?;
    let round = state.iteration + 1;
    let fresh = collect_round(ctx, &state.checkpoint, count, round, rng)?;
    state.frames_total += frames_total(&fresh);
    state.dataset.extend(fresh);
    state.iteration = round;

    let model = Model::Exface(ctx.model.clone());
    let weights = state.weights(ctx.train.new_data_weight);
    let out = train_epochs(
        &model,
        &mut state.checkpoint,
        &mut state.optimizer,
        &state.dataset,
        &weights,
        ctx.sched,
        ctx.train,
        ctx.train.finetune_epochs,
        rng,
    )?;
    state.training_steps += out.steps as u64;
    let (md, bd) = ctx.validate(&state.checkpoint)?;
    state.history.push(IterationMetrics {
        iteration: round,
        frames_total: state.frames_total,
        motor_distance: md,
        blendshape_distance: bd,
    });
    log::info!(
        "bootstrap iteration {round}: +{count} sequences, {} frames, motor {md:.5}, blendshape {bd:.6}",
        state.frames_total
    );
    Ok(state)
}
