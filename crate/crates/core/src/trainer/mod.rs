//! Training: dataset assembly, the minibatch optimization loop shared by the
//! denoiser and the baselines, checkpoints, and the bootstrap loop.

mod bootstrap;
mod checkpoint;
mod dataset;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{add_noise, gaussian, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::denoiser::Model;
use crate::face::{BlendshapeSequence, MotorSequence};
use crate::nn::{Adam, AdamConfig, Params};

pub use bootstrap::{
    bootstrap_iterate, budget_sequences, build_stage0, weights_for_round, BootstrapContext,
    BootstrapMode, BootstrapState,
};
pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, Checkpoint, Manifest, TensorInfo};
pub use dataset::{read_dataset, write_dataset, FrameRecord};

/// Where a training sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Static,
    Bootstrap,
    External,
}

/// One aligned `(motor, blendshape)` sequence pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub motor: MotorSequence,
    pub blendshape: BlendshapeSequence,
    pub source: DataSource,
    /// Bootstrap iteration that produced the sample (0 = static stage).
    pub round: usize,
}

impl TrainingSample {
    pub fn new(
        motor: MotorSequence,
        blendshape: BlendshapeSequence,
        source: DataSource,
        round: usize,
    ) -> Result<Self> {
        if motor.len() != blendshape.len() {
            return Err(Error::InvalidInput(format!(
                "motor length {} differs from blendshape length {}",
                motor.len(),
                blendshape.len()
            )));
        }
        if motor.noise_level != 0 {
            return Err(Error::InvalidInput("training motors must be clean".into()));
        }
        Ok(Self {
            motor,
            blendshape,
            source,
            round,
        })
    }

    pub fn len(&self) -> usize {
        self.motor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.motor.is_empty()
    }
}

/// Total frame count of a dataset.
pub fn frames_total(samples: &[TrainingSample]) -> usize {
    samples.iter().map(TrainingSample::len).sum()
}

/// Optimization settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Epochs on the static dataset.
    pub stage0_epochs: usize,
    /// Epochs over the accumulated dataset in each bootstrap iteration.
    pub finetune_epochs: usize,
    /// Sampling weight of data added in the current iteration.
    pub new_data_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 16,
            stage0_epochs: 300,
            finetune_epochs: 60,
            new_data_weight: 2.0,
        }
    }
}

/// Loss trace and step count of one training call.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOutcome {
    pub losses: Vec<f32>,
    pub steps: usize,
}

/// Loss of one sample, accumulating `weight * dL/dθ` into `grads`.
///
/// The denoiser draws its own noise level uniformly from `1..=N` and a
/// Gaussian draw, noises the clean motors in diffusion space and regresses
/// the clean sequence; the baselines regress the `[0, 1]` motors directly.
pub fn sample_loss_and_grad<R: Rng + ?Sized>(
    model: &Model,
    params: &Params<f32>,
    grads: &mut Params<f32>,
    sample: &TrainingSample,
    sched: &DiffusionSchedule,
    weight: f32,
    rng: &mut R,
) -> Result<f32> {
    let c = sample.blendshape.data().view();
    Ok(match model {
        Model::Exface(m) => {
            let x0 = sample.motor.to_diffusion_space();
            let n = rng.gen_range(1..=sched.steps());
            let noise = gaussian(rng, x0.data().dim());
            let xn = add_noise(&x0, n, &noise, sched)?;
            m.loss_and_grad(
                params,
                grads,
                &xn.data().view(),
                n,
                &c,
                &x0.data().view(),
                weight,
            )
        }
        Model::Transformer(m) => {
            m.loss_and_grad(params, grads, &c, &sample.motor.data().view(), weight)
        }
        Model::Mlp(m) => m.loss_and_grad(params, grads, &c, &sample.motor.data().view(), weight),
    })
}

/// Minibatch training for a number of epochs, one epoch being
/// `ceil(total_weight / batch_size)` steps. Samples are drawn with
/// replacement in proportion to `weights`.
///
/// On a non-finite loss or gradient the offending step is not applied, so
/// `params` still hold the last good values when [`Error::Diverged`] returns.
#[allow(clippy::too_many_arguments)]
pub fn train_epochs<R: Rng + ?Sized>(
    model: &Model,
    params: &mut Params<f32>,
    optimizer: &mut Adam,
    dataset: &[TrainingSample],
    weights: &[f64],
    sched: &DiffusionSchedule,
    cfg: &TrainConfig,
    epochs: usize,
    rng: &mut R,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("training dataset is empty".into()));
    }
    if weights.len() != dataset.len() {
        return Err(Error::InvalidInput("one weight per sample required".into()));
    }
    let batch = cfg.batch_size.max(1);
    let total: f64 = weights.iter().sum();
    let per_epoch = ((total / batch as f64).ceil() as usize).max(1);
    let picker = WeightedIndex::new(weights)
        .map_err(|e| Error::InvalidInput(format!("bad sample weights: {e}")))?;
    let mut grads = Params::zeros(params.layout().clone());
    let mut out = TrainOutcome::default();
    let scale = 1.0 / batch as f32;
    for _ in 0..epochs * per_epoch {
        grads.fill(0.0);
        let mut loss = 0.0;
        for _ in 0..batch {
            let sample = &dataset[picker.sample(rng)];
            loss += scale * sample_loss_and_grad(model, params, &mut grads, sample, sched, scale, rng)?;
        }
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged {
                step: out.steps,
                loss: f64::from(loss),
            });
        }
        optimizer.step(params, &grads);
        out.losses.push(loss);
        out.steps += 1;
    }
    Ok(out)
}

/// Fresh optimizer state for a parameter set.
pub fn optimizer_for(params: &Params<f32>, cfg: &TrainConfig) -> Adam {
    Adam::new(cfg.adam, params.data().len())
}
